#include "a2dmn/train.hpp"

#include "json.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace a2dmn {

using nlohmann::json;

std::string TrainConfig::to_json() const {
    json j;
    j["learning_rate"] = learning_rate;
    j["batch_size"] = batch_size;
    j["epochs"] = epochs;
    j["k_folds"] = k_folds;
    j["val_frac"] = val_frac;
    j["seed"] = seed;
    j["binary_mode"] = binary_mode;
    j["smoothness_enabled"] = smoothness_enabled;
    j["augment_enabled"] = augment_enabled;
    j["adam_beta1"] = adam_beta1;
    j["adam_beta2"] = adam_beta2;
    j["adam_eps"] = adam_eps;
    j["arch"] = {{"image_size", arch.image_size},
                 {"num_classes", arch.num_classes},
                 {"channel_scale", arch.channel_scale}};
    j["augment"] = {{"rotation_deg_min", augment.rotation_deg_min},
                    {"rotation_deg_max", augment.rotation_deg_max},
                    {"hflip_probability", augment.hflip_probability},
                    {"translate_px_min", augment.translate_px_min},
                    {"translate_px_max", augment.translate_px_max}};
    j["loss"] = {{"lambda", loss.lambda},
                 {"sigma_alpha", loss.sigma_alpha},
                 {"sigma_beta", loss.sigma_beta},
                 {"epsilon", loss.epsilon},
                 {"beta_softargmax", loss.beta_softargmax},
                 {"dice_smooth", loss.dice_smooth}};
    return j.dump();
}

TrainConfig TrainConfig::from_json(const std::string& text) {
    const json j = json::parse(text);
    TrainConfig c;
    c.learning_rate = j.at("learning_rate");
    c.batch_size = j.at("batch_size");
    c.epochs = j.at("epochs");
    c.k_folds = j.at("k_folds");
    c.val_frac = j.at("val_frac");
    c.seed = j.at("seed");
    c.binary_mode = j.at("binary_mode");
    c.smoothness_enabled = j.at("smoothness_enabled");
    c.augment_enabled = j.at("augment_enabled");
    c.adam_beta1 = j.at("adam_beta1");
    c.adam_beta2 = j.at("adam_beta2");
    c.adam_eps = j.at("adam_eps");
    c.arch.image_size = j.at("arch").at("image_size");
    c.arch.num_classes = j.at("arch").at("num_classes");
    c.arch.channel_scale = j.at("arch").at("channel_scale");
    c.augment.rotation_deg_min = j.at("augment").at("rotation_deg_min");
    c.augment.rotation_deg_max = j.at("augment").at("rotation_deg_max");
    c.augment.hflip_probability = j.at("augment").at("hflip_probability");
    c.augment.translate_px_min = j.at("augment").at("translate_px_min");
    c.augment.translate_px_max = j.at("augment").at("translate_px_max");
    c.loss.lambda = j.at("loss").at("lambda");
    c.loss.sigma_alpha = j.at("loss").at("sigma_alpha");
    c.loss.sigma_beta = j.at("loss").at("sigma_beta");
    c.loss.epsilon = j.at("loss").at("epsilon");
    c.loss.beta_softargmax = j.at("loss").at("beta_softargmax");
    c.loss.dice_smooth = j.at("loss").at("dice_smooth");
    return c;
}

void adam_step(ParamStore<float>& params, AdamState& state, const TrainConfig& cfg) {
    for (const auto& name : params.order)
        if (!params.at(name)->has_grad())
            throw std::invalid_argument("adam_step: parameter " + name + " has no gradient");
    state.t += 1;
    const double b1 = cfg.adam_beta1, b2 = cfg.adam_beta2;
    const double corr1 = 1.0 - std::pow(b1, static_cast<double>(state.t));
    const double corr2 = 1.0 - std::pow(b2, static_cast<double>(state.t));
    for (const auto& name : params.order) {
        auto& t = params.tensors[name];
        auto& m = state.m[name];
        auto& v = state.v[name];
        if (m.empty()) m.assign(t->values.size(), 0.0f);
        if (v.empty()) v.assign(t->values.size(), 0.0f);
        for (size_t i = 0; i < t->values.size(); ++i) {
            const double g = t->grad[i];
            m[i] = static_cast<float>(b1 * m[i] + (1 - b1) * g);
            v[i] = static_cast<float>(b2 * v[i] + (1 - b2) * g * g);
            const double mhat = m[i] / corr1;
            const double vhat = v[i] / corr2;
            t->values[i] -= static_cast<float>(cfg.learning_rate * mhat / (std::sqrt(vhat) + cfg.adam_eps));
        }
        t->grad.clear();
    }
}

Sample preprocess(const Sample& s, int image_size) {
    return resize(pad_to_square(s), image_size);
}

namespace {

struct Batch {
    TensorPtr<float> images;   // [B,1,S,S]
    TensorPtr<float> targets;  // [B,K,S,S] one-hot, or [B,1,S,S] binary
};

Batch assemble(const std::vector<Sample>& samples, const std::vector<int>& idx, size_t lo, size_t hi,
               int image_size, bool binary, const AugmentConfig* aug, std::mt19937* rng) {
    const int B = static_cast<int>(hi - lo);
    const int S = image_size;
    const int K = binary ? 1 : 5;
    Batch b;
    b.images = make_tensor<float>({B, 1, S, S});
    b.targets = make_tensor<float>({B, K, S, S});
    const std::int64_t plane = static_cast<std::int64_t>(S) * S;
    for (int i = 0; i < B; ++i) {
        Sample s = preprocess(samples[idx[lo + i]], S);
        if (aug) s = augment(s, *aug, *rng);
        for (std::int64_t p = 0; p < plane; ++p) {
            b.images->values[i * plane + p] = s.image[p] / 255.0f;
            if (binary) {
                if (s.mask[p] > 1)
                    throw std::invalid_argument("binary training needs a binary mask, found label " +
                                                std::to_string(s.mask[p]) + " in " + s.id);
                b.targets->values[i * plane + p] = s.mask[p];
            } else {
                b.targets->values[(static_cast<std::int64_t>(i) * K + s.mask[p]) * plane + p] = 1.0f;
            }
        }
    }
    return b;
}

double run_epoch(const TrainConfig& cfg, ParamStore<float>& params, const std::vector<Sample>& set,
                 bool training, int epoch, AdamState* adam) {
    std::vector<int> idx(set.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::mt19937 rng(static_cast<std::uint32_t>(cfg.seed * 2654435761u + epoch * 97 + (training ? 0 : 1)));
    if (training) std::shuffle(idx.begin(), idx.end(), rng);

    double loss_sum = 0;
    std::int64_t n_seen = 0;
    for (size_t lo = 0; lo < idx.size(); lo += cfg.batch_size) {
        const size_t hi = std::min(idx.size(), lo + cfg.batch_size);
        const bool use_aug = training && cfg.augment_enabled;
        Batch batch = assemble(set, idx, lo, hi, cfg.arch.image_size, cfg.binary_mode,
                               use_aug ? &cfg.augment : nullptr, &rng);
        Tape<float> tape;
        double loss_value;
        if (cfg.binary_mode) {
            auto probs = binary_forward(tape, params, cfg.arch, batch.images);
            auto loss = binary_dice_loss(tape, probs, batch.targets, cfg.loss);
            loss_value = loss->values[0];
            if (training) backward(tape, loss);
        } else {
            auto probs = forward(tape, params, cfg.arch, batch.images);
            auto loss = total_loss(tape, probs, batch.targets, batch.images, cfg.loss,
                                   cfg.smoothness_enabled);
            loss_value = loss.total->values[0];
            if (training) backward(tape, loss.total);
        }
        if (!std::isfinite(loss_value))
            throw std::runtime_error("non-finite loss at epoch " + std::to_string(epoch) + ", batch " +
                                     std::to_string(lo / cfg.batch_size));
        if (training) {
            // parameters touched only through relu-dead paths may have no
            // grad allocated; they still take a (zero) Adam step
            for (const auto& name : params.order) params.tensors[name]->ensure_grad();
            adam_step(params, *adam, cfg);
        }
        loss_sum += loss_value * static_cast<double>(hi - lo);
        n_seen += static_cast<std::int64_t>(hi - lo);
    }
    return loss_sum / static_cast<double>(n_seen);
}

TrainResult train_loop(const TrainConfig& cfg, ParamStore<float> params,
                       const std::vector<Sample>& train_set, const std::vector<Sample>& val_set) {
    cfg.validate();
    if (train_set.empty()) throw std::invalid_argument("train: empty dataset");
    AdamState adam;
    TrainResult result;
    result.best_val_loss = std::numeric_limits<double>::infinity();
    const std::vector<Sample>& val = val_set.empty() ? train_set : val_set;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        EpochStats stats;
        stats.train_loss = run_epoch(cfg, params, train_set, true, epoch, &adam);
        stats.val_loss = run_epoch(cfg, params, val, false, epoch, nullptr);
        result.history.push_back(stats);
        if (stats.val_loss < result.best_val_loss) {
            result.best_val_loss = stats.val_loss;
            result.best_epoch = epoch;
            result.best_params = clone_params(params);
        }
    }
    return result;
}

}  // namespace

TrainResult train(const TrainConfig& cfg, ParamStore<float> params, const std::vector<Sample>& train_set,
                  const std::vector<Sample>& val_set) {
    if (cfg.binary_mode) throw std::invalid_argument("train: semantic mode expected; use pretrain_binary");
    return train_loop(cfg, std::move(params), train_set, val_set);
}

TrainResult pretrain_binary(const TrainConfig& cfg, ParamStore<float> params,
                            const std::vector<Sample>& train_set, const std::vector<Sample>& val_set) {
    TrainConfig bcfg = cfg;
    bcfg.binary_mode = true;
    bcfg.smoothness_enabled = false;
    auto collapse = [](const std::vector<Sample>& in) {
        std::vector<Sample> out;
        out.reserve(in.size());
        for (const auto& s : in) out.push_back(collapse_binary(s));
        return out;
    };
    return train_loop(bcfg, std::move(params), collapse(train_set), collapse(val_set));
}

LabelMap predict_labels(const ParamStore<float>& params, const ArchConfig& arch, const Sample& sample) {
    const Sample s = preprocess(sample, arch.image_size);
    auto [image, onehot] = normalize<float>(s);
    (void)onehot;
    auto batched = make_tensor<float>({1, 1, s.height, s.width}, image->values);
    Tape<float> tape;
    auto probs = forward(tape, params, arch, batched);
    auto labels = argmax_channels(probs);
    LabelMap m;
    m.width = s.width;
    m.height = s.height;
    m.labels.assign(labels.begin(), labels.end());
    return m;
}

ClassAverages evaluate_samples(const ParamStore<float>& params, const ArchConfig& arch,
                               const std::vector<Sample>& samples) {
    ClassAverages avg;
    for (const auto& sample : samples) {
        const Sample s = preprocess(sample, arch.image_size);
        LabelMap gt;
        gt.width = s.width;
        gt.height = s.height;
        gt.labels = s.mask;
        const LabelMap pred = predict_labels(params, arch, sample);
        const MetricsReport report = evaluate(pred, gt);
        for (int c = 0; c < kNumClasses; ++c) {
            if (report.per_class[c].iou.defined) {
                avg.iou[c].sum += report.per_class[c].iou.value;
                avg.iou[c].count += 1;
            }
            if (report.per_class[c].hd.defined) {
                avg.hd[c].sum += report.per_class[c].hd.value;
                avg.hd[c].count += 1;
            }
            if (report.per_class[c].aad.defined) {
                avg.aad[c].sum += report.per_class[c].aad.value;
                avg.aad[c].count += 1;
            }
        }
    }
    return avg;
}

}  // namespace a2dmn
