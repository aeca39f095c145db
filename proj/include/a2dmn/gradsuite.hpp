#pragma once

// Double-precision central-difference gradient suite covering every
// differentiable op, the loss components and the composed objective, up to
// the full network at a moderate softargmax temperature. Shared by the CLI
// `gradcheck` subcommand and the acceptance tests.

#include "a2dmn/losses.hpp"
#include "a2dmn/model.hpp"

#include <random>

namespace a2dmn {

struct GradCheckResult {
    std::string name;
    double max_rel_error = 0;
    double tolerance = 0;
    bool pass() const { return max_rel_error < tolerance; }
};

namespace gradsuite_detail {

inline TensorPtr<double> rand_tensor(Shape shape, std::mt19937& rng, bool requires_grad,
                                     double lo = -1.0, double hi = 1.0) {
    auto t = make_tensor<double>(std::move(shape), requires_grad);
    std::uniform_real_distribution<double> dist(lo, hi);
    for (auto& v : t->values) v = dist(rng);
    return t;
}

// Probe loss: weighted sum so the check is sensitive to every output entry.
inline TensorPtr<double> weighted_sum(Tape<double>& tape, const TensorPtr<double>& x,
                                      const TensorPtr<double>& w) {
    auto prod = make_tensor<double>(x->shape);
    prod->requires_grad = x->requires_grad;
    for (size_t i = 0; i < x->values.size(); ++i) prod->values[i] = x->values[i] * w->values[i];
    tape.record("probe_mul", prod, [=]() {
        if (!x->requires_grad) return;
        x->ensure_grad();
        for (size_t i = 0; i < x->values.size(); ++i) x->grad[i] += prod->grad[i] * w->values[i];
    });
    return sum(tape, prod);
}

}  // namespace gradsuite_detail

inline std::vector<GradCheckResult> run_gradient_suite(std::uint64_t seed = 0) {
    using namespace gradsuite_detail;
    std::mt19937 rng(static_cast<std::uint32_t>(seed + 12345));
    std::vector<GradCheckResult> results;
    const auto check = [&](const std::string& name, double tol,
                           const std::function<TensorPtr<double>(Tape<double>&)>& fn,
                           const std::vector<TensorPtr<double>>& params, GradCheckOptions opt = {}) {
        for (const auto& p : params) p->grad.clear();
        results.push_back({name, grad_check(fn, params, opt), tol});
    };

    {
        auto x = rand_tensor({1, 2, 6, 6}, rng, true);
        auto w = rand_tensor({3, 2, 3, 3}, rng, true);
        auto b = rand_tensor({3}, rng, true);
        auto probe = rand_tensor({1, 3, 6, 6}, rng, false);
        check("conv2d dilation 1", 1e-6,
              [&](Tape<double>& t) { return weighted_sum(t, conv2d(t, x, w, b, 1), probe); }, {x, w, b});
        check("conv2d dilation 2", 1e-6,
              [&](Tape<double>& t) { return weighted_sum(t, conv2d(t, x, w, b, 2), probe); }, {x, w, b});
    }
    {
        auto x = rand_tensor({1, 2, 3, 3}, rng, true);
        auto w = rand_tensor({2, 3, 2, 2}, rng, true);
        auto b = rand_tensor({3}, rng, true);
        auto probe = rand_tensor({1, 3, 6, 6}, rng, false);
        check("transposed_conv2d", 1e-6,
              [&](Tape<double>& t) { return weighted_sum(t, transposed_conv2d(t, x, w, b), probe); },
              {x, w, b});
    }
    {
        auto x = rand_tensor({1, 2, 4, 4}, rng, true);
        for (size_t i = 0; i < x->values.size(); ++i) x->values[i] += 1e-3 * static_cast<double>(i);
        check("maxpool2d (ties broken)", 1e-6,
              [&](Tape<double>& t) { return sum(t, maxpool2d(t, x)); }, {x});
    }
    {
        auto x = rand_tensor({1, 3, 4, 4}, rng, true);
        auto probe = rand_tensor({1, 3, 4, 4}, rng, false);
        check("relu", 1e-6, [&](Tape<double>& t) { return weighted_sum(t, relu(t, x), probe); }, {x});
        check("sigmoid", 1e-6, [&](Tape<double>& t) { return weighted_sum(t, sigmoid(t, x), probe); }, {x});
        auto y = rand_tensor({1, 3, 4, 4}, rng, true);
        check("add", 1e-6, [&](Tape<double>& t) { return weighted_sum(t, add(t, x, y), probe); }, {x, y});
        check("scale", 1e-6, [&](Tape<double>& t) { return weighted_sum(t, scale(t, x, 0.7), probe); }, {x});
    }
    {
        auto a = rand_tensor({1, 2, 4, 4}, rng, true);
        auto b = rand_tensor({1, 3, 4, 4}, rng, true);
        auto probe = rand_tensor({1, 5, 4, 4}, rng, false);
        check("concat_channels", 1e-6,
              [&](Tape<double>& t) { return weighted_sum(t, concat_channels(t, a, b), probe); }, {a, b});
    }
    {
        auto x = rand_tensor({1, 5, 4, 4}, rng, true);
        auto probe = rand_tensor({1, 5, 4, 4}, rng, false);
        check("softmax_channels", 1e-6,
              [&](Tape<double>& t) { return weighted_sum(t, softmax_channels(t, x), probe); }, {x});
    }
    LossConfig lcfg;
    {
        auto logits = rand_tensor({2, 5, 6, 6}, rng, true);
        auto target = make_tensor<double>({2, 5, 6, 6});
        std::uniform_int_distribution<int> cls(0, 4);
        for (int n = 0; n < 2; ++n)
            for (int p = 0; p < 36; ++p) target->values[(n * 5 + cls(rng)) * 36 + p] = 1.0;
        check("dice_loss", 1e-6,
              [&](Tape<double>& t) {
                  return dice_loss(t, softmax_channels(t, logits), target, lcfg);
              },
              {logits});

        auto soft_probe = rand_tensor({2, 1, 6, 6}, rng, false);
        check("softargmax (beta 20)", 1e-6,
              [&](Tape<double>& t) {
                  return weighted_sum(t, softargmax(t, softmax_channels(t, logits), 20.0), soft_probe);
              },
              {logits});

        // the delta gate is a detached constant; freeze it for differencing
        std::vector<int> labels0;
        {
            Tape<double> t0;
            labels0 = argmax_channels(softmax_channels(t0, logits));
        }
        auto image = rand_tensor({2, 1, 6, 6}, rng, false, 0.0, 1.0);
        check("smoothness_loss via softargmax (beta 10)", 1e-6,
              [&](Tape<double>& t) {
                  auto probs = softmax_channels(t, logits);
                  auto V = softargmax(t, probs, 10.0);
                  return smoothness_loss(t, V, labels0, image, lcfg);
              },
              {logits});

        LossConfig tot = lcfg;
        tot.beta_softargmax = 10;
        tot.lambda = 0.05;
        check("total_loss (beta 10)", 1e-6,
              [&](Tape<double>& t) {
                  return total_loss(t, softmax_channels(t, logits), target, image, tot, true, &labels0)
                      .total;
              },
              {logits});
    }
    {
        auto p = rand_tensor({2, 1, 5, 5}, rng, true, 0.05, 0.95);
        auto g = make_tensor<double>({2, 1, 5, 5});
        std::uniform_int_distribution<int> bin(0, 1);
        for (auto& v : g->values) v = bin(rng);
        check("binary_dice_loss", 1e-6,
              [&](Tape<double>& t) { return binary_dice_loss(t, p, g, lcfg); }, {p});
    }
    {
        // full network composition at desk scale, sampled coordinates
        ArchConfig arch;
        arch.image_size = 16;
        arch.channel_scale = 1.0 / 16.0;
        auto params = build<double>(arch, seed + 7);
        // zero-initialized biases leave dead-relu regions with pre-activations
        // exactly on the relu kink, where left and right derivatives differ;
        // jitter every parameter so differencing happens at a smooth point
        {
            std::uniform_real_distribution<double> jitter(-0.05, 0.05);
            for (const auto& name : params.order)
                for (auto& v : params.at(name)->values) v += jitter(rng);
        }
        auto images = rand_tensor({1, 1, 16, 16}, rng, false, 0.0, 1.0);
        auto target = make_tensor<double>({1, 5, 16, 16});
        std::uniform_int_distribution<int> cls(0, 4);
        for (int p = 0; p < 256; ++p) target->values[cls(rng) * 256 + p] = 1.0;
        LossConfig netloss = lcfg;
        netloss.beta_softargmax = 20;
        netloss.lambda = 0.01;
        std::vector<int> labels0;
        {
            Tape<double> t0;
            labels0 = argmax_channels(forward(t0, params, arch, images));
        }
        std::vector<TensorPtr<double>> tensors;
        for (const auto& name : params.order) tensors.push_back(params.at(name));
        GradCheckOptions opt;
        opt.coords_per_tensor = 3;
        opt.seed = seed + 99;
        check("full network total loss (beta 20)", 1e-5,
              [&](Tape<double>& t) {
                  auto probs = forward(t, params, arch, images);
                  return total_loss(t, probs, target, images, netloss, true, &labels0).total;
              },
              tensors, opt);
    }
    return results;
}

}  // namespace a2dmn
