#pragma once

// The segmentation network: five two-conv encoder stages with 2x2 pooling,
// four dilated-multiscale skip blocks, four up blocks with dual skip
// connections, and a 1x1 head (5-class softmax, or 1-channel sigmoid for
// binary pretraining). Channel counts can be scaled down uniformly for
// desk-scale runs; scale 1 reproduces the full architecture.

#include "a2dmn/tensor.hpp"

#include <array>
#include <map>
#include <random>

namespace a2dmn {

struct ArchConfig {
    int image_size = 256;
    int num_classes = 5;
    std::array<int, 5> basic_channels{32, 64, 128, 256, 512};
    int dilation1 = 2;
    int dilation2 = 4;
    std::array<int, 4> a3_sizes{15, 13, 11, 9};
    std::array<int, 4> dme_channels{32, 64, 128, 256};
    // per-block A5 kernel size; entry 5 exists for completeness, blocks 1-4 are used
    std::array<int, 5> a5_sizes{1, 5, 1, 1, 5};
    std::array<int, 4> up_widths{256, 128, 64, 32};
    double channel_scale = 1.0;

    int scaled(int channels) const {
        return std::max(1, static_cast<int>(std::lround(channels * channel_scale)));
    }
    // M2 = 1 for up blocks 1-3, 5 for block 4; M1 = M3 = 3 always.
    static int m2_size(int block) { return block == 3 ? 5 : 1; }

    void validate() const {
        if (image_size <= 0 || image_size % 16 != 0)
            throw std::invalid_argument("ArchConfig.image_size must be a positive multiple of 16");
        if (num_classes < 2) throw std::invalid_argument("ArchConfig.num_classes must be >= 2");
        if (channel_scale <= 0) throw std::invalid_argument("ArchConfig.channel_scale must be positive");
        if (dilation1 < 1 || dilation2 < 1)
            throw std::invalid_argument("ArchConfig.dilation1/dilation2 must be positive");
        for (int a : a3_sizes)
            if (a < 1 || a % 2 == 0) throw std::invalid_argument("ArchConfig.a3_sizes must be odd and positive");
        for (int a : a5_sizes)
            if (a < 1 || a % 2 == 0) throw std::invalid_argument("ArchConfig.a5_sizes must be odd and positive");
    }
};

template <typename T>
struct ParamStore {
    std::vector<std::string> order;
    std::map<std::string, TensorPtr<T>> tensors;

    void add(const std::string& name, TensorPtr<T> t) {
        if (tensors.count(name)) throw std::invalid_argument("duplicate parameter name " + name);
        order.push_back(name);
        tensors.emplace(name, std::move(t));
    }
    const TensorPtr<T>& at(const std::string& name) const {
        auto it = tensors.find(name);
        if (it == tensors.end()) throw std::invalid_argument("no parameter named " + name);
        return it->second;
    }
    std::int64_t param_count() const {
        std::int64_t n = 0;
        for (const auto& [_, t] : tensors) n += numel(t->shape);
        return n;
    }
};

namespace detail {

template <typename T>
void he_init_conv(ParamStore<T>& store, std::mt19937& rng, const std::string& prefix, int co, int ci,
                  int kh, int kw, int fan_in = -1) {
    if (fan_in < 0) fan_in = ci * kh * kw;
    std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / fan_in));
    auto w = make_tensor<T>({co, ci, kh, kw}, true);
    for (auto& v : w->values) v = static_cast<T>(dist(rng));
    auto b = make_tensor<T>({co}, true);
    store.add(prefix + ".w", w);
    store.add(prefix + ".b", b);
}

}  // namespace detail

// He fan-in initialization (fan-in of the receiving convolution), biases
// zero, deterministic per seed. binary_head swaps the 5-class softmax head
// for a single-channel sigmoid head; the trunk is identical.
template <typename T>
ParamStore<T> build(const ArchConfig& cfg, std::uint64_t seed, bool binary_head = false) {
    cfg.validate();
    ParamStore<T> store;
    std::mt19937 rng(static_cast<std::uint32_t>(seed ^ (seed >> 32)));

    int in_ch = 1;
    for (int k = 0; k < 5; ++k) {
        const int ch = cfg.scaled(cfg.basic_channels[k]);
        detail::he_init_conv(store, rng, "enc.b" + std::to_string(k + 1) + ".conv1", ch, in_ch, 3, 3);
        detail::he_init_conv(store, rng, "enc.b" + std::to_string(k + 1) + ".conv2", ch, ch, 3, 3);
        in_ch = ch;
    }
    for (int k = 0; k < 4; ++k) {
        const std::string p = "dme." + std::to_string(k + 1);
        const int cin = cfg.scaled(cfg.basic_channels[k]);
        const int ck = cfg.scaled(cfg.dme_channels[k]);
        detail::he_init_conv(store, rng, p + ".branch1", ck, cin, 3, 3);
        detail::he_init_conv(store, rng, p + ".branch2", ck, cin, 3, 3);
        detail::he_init_conv(store, rng, p + ".branch3", ck, cin, cfg.a3_sizes[k], cfg.a3_sizes[k]);
        detail::he_init_conv(store, rng, p + ".proj", ck, 3 * ck + cin, 1, 1);
        detail::he_init_conv(store, rng, p + ".a5", ck, ck, cfg.a5_sizes[k], cfg.a5_sizes[k]);
    }
    int dec_in = cfg.scaled(cfg.basic_channels[4]);
    for (int j = 0; j < 4; ++j) {
        const std::string p = "dec.u" + std::to_string(j + 1);
        const int y = cfg.scaled(cfg.up_widths[j]);
        const int stage = 3 - j;  // encoder stage feeding this block's skips
        const int enc_ch = cfg.scaled(cfg.basic_channels[stage]);
        const int skip_ch = cfg.scaled(cfg.dme_channels[stage]);
        {
            // transposed conv weight layout [Ci,Co,2,2]; fan-in per output = Ci
            std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / dec_in));
            auto w = make_tensor<T>({dec_in, y, 2, 2}, true);
            for (auto& v : w->values) v = static_cast<T>(dist(rng));
            store.add(p + ".up.w", w);
            store.add(p + ".up.b", make_tensor<T>({y}, true));
        }
        const int m2 = ArchConfig::m2_size(j);
        detail::he_init_conv(store, rng, p + ".conv1", y, y + enc_ch + skip_ch, 3, 3);
        detail::he_init_conv(store, rng, p + ".conv2", y, y, m2, m2);
        detail::he_init_conv(store, rng, p + ".conv3", y, y + enc_ch, 3, 3);
        dec_in = y;
    }
    detail::he_init_conv(store, rng, "head", binary_head ? 1 : cfg.num_classes, dec_in, 1, 1);
    return store;
}

// Named intermediate activations captured during forward, for shape-closure
// and transfer tests.
template <typename T>
using ActivationTrace = std::vector<std::pair<std::string, TensorPtr<T>>>;

namespace detail {

template <typename T>
TensorPtr<T> conv_relu(Tape<T>& tape, const ParamStore<T>& ps, const std::string& prefix,
                       const TensorPtr<T>& x, int dilation = 1) {
    return relu(tape, conv2d(tape, x, ps.at(prefix + ".w"), ps.at(prefix + ".b"), dilation));
}

}  // namespace detail

template <typename T>
struct BasicBlockOut {
    TensorPtr<T> c1, c2, pooled;  // pooled is null for stage 5
};

template <typename T>
BasicBlockOut<T> basic_block(Tape<T>& tape, const ParamStore<T>& ps, const ArchConfig&,
                             const TensorPtr<T>& x, int stage) {
    const std::string p = "enc.b" + std::to_string(stage + 1);
    BasicBlockOut<T> out;
    out.c1 = detail::conv_relu(tape, ps, p + ".conv1", x);
    out.c2 = detail::conv_relu(tape, ps, p + ".conv2", out.c1);
    if (stage < 4) out.pooled = maxpool2d(tape, out.c2);
    return out;
}

// Three parallel context branches (dilations D1, D2 and the large A3 kernel)
// plus the residual input, concatenated, projected back to C_K by a 1x1 conv,
// then the A5 skip convolution.
template <typename T>
TensorPtr<T> dme_block(Tape<T>& tape, const ParamStore<T>& ps, const ArchConfig& cfg,
                       const TensorPtr<T>& x, int block) {
    const std::string p = "dme." + std::to_string(block + 1);
    auto b1 = detail::conv_relu(tape, ps, p + ".branch1", x, cfg.dilation1);
    auto b2 = detail::conv_relu(tape, ps, p + ".branch2", x, cfg.dilation2);
    auto b3 = detail::conv_relu(tape, ps, p + ".branch3", x, 1);
    auto cat = concat_channels(tape, std::vector<TensorPtr<T>>{b1, b2, b3, x});
    auto proj = detail::conv_relu(tape, ps, p + ".proj", cat);
    return detail::conv_relu(tape, ps, p + ".a5", proj);
}

template <typename T>
TensorPtr<T> up_block(Tape<T>& tape, const ParamStore<T>& ps, const ArchConfig&,
                      const TensorPtr<T>& d_in, const TensorPtr<T>& skip_a5, const TensorPtr<T>& c1,
                      const TensorPtr<T>& c2, int block) {
    const std::string p = "dec.u" + std::to_string(block + 1);
    auto psi = transposed_conv2d(tape, d_in, ps.at(p + ".up.w"), ps.at(p + ".up.b"));
    auto t1 = detail::conv_relu(tape, ps, p + ".conv1",
                                concat_channels(tape, std::vector<TensorPtr<T>>{psi, c1, skip_a5}));
    auto t2 = detail::conv_relu(tape, ps, p + ".conv2", t1);
    auto t3 = detail::conv_relu(tape, ps, p + ".conv3", concat_channels(tape, t2, c2));
    return t3;
}

template <typename T>
TensorPtr<T> run_trunk(Tape<T>& tape, const ParamStore<T>& ps, const ArchConfig& cfg,
                       const TensorPtr<T>& images, ActivationTrace<T>* trace) {
    detail::expect_rank(images->shape, 4, "forward images");
    if (images->shape[1] != 1 || images->shape[2] != cfg.image_size || images->shape[3] != cfg.image_size)
        throw std::invalid_argument("forward expects [N,1," + std::to_string(cfg.image_size) + "," +
                                    std::to_string(cfg.image_size) + "], got " + shape_str(images->shape));
    const auto record = [&](const std::string& name, const TensorPtr<T>& t) {
        if (trace) trace->emplace_back(name, t);
    };

    std::array<BasicBlockOut<T>, 5> stages;
    TensorPtr<T> x = images;
    for (int k = 0; k < 5; ++k) {
        stages[k] = basic_block(tape, ps, cfg, x, k);
        record("enc.b" + std::to_string(k + 1) + ".c1", stages[k].c1);
        record("enc.b" + std::to_string(k + 1) + ".c2", stages[k].c2);
        if (k < 4) x = stages[k].pooled;
    }
    std::array<TensorPtr<T>, 4> skips;
    for (int k = 0; k < 4; ++k) {
        skips[k] = dme_block(tape, ps, cfg, stages[k].c2, k);
        record("dme." + std::to_string(k + 1) + ".skip", skips[k]);
    }
    TensorPtr<T> d = stages[4].c2;
    for (int j = 0; j < 4; ++j) {
        const int stage = 3 - j;
        d = up_block(tape, ps, cfg, d, skips[stage], stages[stage].c1, stages[stage].c2, j);
        record("dec.u" + std::to_string(j + 1), d);
    }
    return d;
}

// Semantic forward: per-pixel 5-class distribution.
template <typename T>
TensorPtr<T> forward(Tape<T>& tape, const ParamStore<T>& ps, const ArchConfig& cfg,
                     const TensorPtr<T>& images, ActivationTrace<T>* trace = nullptr) {
    auto trunk = run_trunk(tape, ps, cfg, images, trace);
    auto logits = conv2d(tape, trunk, ps.at("head.w"), ps.at("head.b"), 1);
    return softmax_channels(tape, logits);
}

// Binary-pretraining forward: same trunk, 1-channel sigmoid head.
template <typename T>
TensorPtr<T> binary_forward(Tape<T>& tape, const ParamStore<T>& ps, const ArchConfig& cfg,
                            const TensorPtr<T>& images, ActivationTrace<T>* trace = nullptr) {
    auto trunk = run_trunk(tape, ps, cfg, images, trace);
    auto logits = conv2d(tape, trunk, ps.at("head.w"), ps.at("head.b"), 1);
    return sigmoid(tape, logits);
}

inline bool is_encoder_param(const std::string& name) {
    return name.rfind("enc.", 0) == 0 || name.rfind("dme.", 0) == 0;
}

template <typename T>
ParamStore<T> encoder_subset(const ParamStore<T>& ps) {
    ParamStore<T> out;
    for (const auto& name : ps.order)
        if (is_encoder_param(name)) out.add(name, ps.at(name));
    return out;
}

// Replaces the target's encoder tensors byte-for-byte; decoder and head stay
// untouched. Missing names or shape mismatches are rejected listing offenders.
template <typename T>
void load_encoder(ParamStore<T>& target, const ParamStore<T>& subset) {
    std::string offenders;
    for (const auto& name : target.order) {
        if (!is_encoder_param(name)) continue;
        auto it = subset.tensors.find(name);
        if (it == subset.tensors.end()) {
            offenders += " missing:" + name;
        } else if (it->second->shape != target.at(name)->shape) {
            offenders += " shape:" + name + shape_str(it->second->shape) + "vs" +
                         shape_str(target.at(name)->shape);
        }
    }
    if (!offenders.empty()) throw std::invalid_argument("load_encoder rejected:" + offenders);
    for (const auto& name : target.order)
        if (is_encoder_param(name)) target.tensors[name]->values = subset.at(name)->values;
}

}  // namespace a2dmn
