#pragma once

// Adam optimizer, the semantic and binary-pretraining loops with
// best-validation checkpoint retention, and fold-level evaluation.

#include "a2dmn/data.hpp"
#include "a2dmn/losses.hpp"
#include "a2dmn/metrics.hpp"
#include "a2dmn/model.hpp"

#include <string>
#include <vector>

namespace a2dmn {

struct TrainConfig {
    double learning_rate = 1e-4;
    int batch_size = 32;
    int epochs = 100;
    int k_folds = 5;
    double val_frac = 0.15;
    std::uint64_t seed = 0;
    ArchConfig arch;
    LossConfig loss;
    bool binary_mode = false;
    bool smoothness_enabled = true;
    bool augment_enabled = true;
    AugmentConfig augment;
    double adam_beta1 = 0.9, adam_beta2 = 0.999, adam_eps = 1e-8;

    void validate() const {
        if (batch_size < 1) throw std::invalid_argument("TrainConfig.batch_size must be >= 1");
        if (epochs < 1) throw std::invalid_argument("TrainConfig.epochs must be >= 1");
        arch.validate();
        loss.validate();
    }
    std::string to_json() const;
    static TrainConfig from_json(const std::string& json);
};

struct AdamState {
    std::map<std::string, std::vector<float>> m, v;
    std::int64_t t = 0;
};

// Standard bias-corrected Adam update; consumes the grads stored on the
// parameter tensors and clears them. A parameter without a populated grad is
// rejected by name.
void adam_step(ParamStore<float>& params, AdamState& state, const TrainConfig& cfg);

template <typename T>
ParamStore<T> clone_params(const ParamStore<T>& ps) {
    ParamStore<T> out;
    for (const auto& name : ps.order) {
        const auto& src = ps.at(name);
        auto t = make_tensor<T>(src->shape, src->values, src->requires_grad);
        out.add(name, t);
    }
    return out;
}

struct EpochStats {
    double train_loss = 0;
    double val_loss = 0;
};

struct TrainResult {
    ParamStore<float> best_params;
    double best_val_loss = 0;
    int best_epoch = -1;
    std::vector<EpochStats> history;
};

// Mini-batch training with seeded per-epoch shuffling; samples are raw
// dataset entries and go through pad -> resize -> (augment) -> normalize.
// The returned parameters are a deep copy from the best-validation epoch.
TrainResult train(const TrainConfig& cfg, ParamStore<float> params, const std::vector<Sample>& train_set,
                  const std::vector<Sample>& val_set);

// Binary pretraining: masks collapsed to tumor-vs-rest must be binary; the
// network is the binary-head variant and the loss is two-class Dice only.
TrainResult pretrain_binary(const TrainConfig& cfg, ParamStore<float> params,
                            const std::vector<Sample>& train_set, const std::vector<Sample>& val_set);

// Hard per-pixel prediction for one raw sample.
LabelMap predict_labels(const ParamStore<float>& params, const ArchConfig& arch, const Sample& sample);

// Per-class metrics averaged over a sample set; absent entries are excluded
// and the contributing count recorded.
struct ClassAverages {
    struct Entry {
        double sum = 0;
        int count = 0;
        bool defined() const { return count > 0; }
        double mean() const { return sum / count; }
    };
    std::array<Entry, kNumClasses> iou, hd, aad;
};

ClassAverages evaluate_samples(const ParamStore<float>& params, const ArchConfig& arch,
                               const std::vector<Sample>& samples);

Sample preprocess(const Sample& s, int image_size);

}  // namespace a2dmn
