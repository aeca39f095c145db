#pragma once

// Training objective: Dice loss plus a lambda-weighted anatomy smoothness
// term. The smoothness term penalizes neighboring pixels whose hard labels
// disagree, weighting each pair by intensity affinity, squared label distance
// of the softargmax relaxation, and inverse pixel distance. A naive
// double-loop oracle of the same quantity ships alongside as ground truth.

#include "a2dmn/tensor.hpp"

#include <array>
#include <cmath>
#include <set>

namespace a2dmn {

struct LossConfig {
    double lambda = 5e-5;
    double sigma_alpha = 0.1;
    double sigma_beta = 5.0;
    double epsilon = 1e-7;
    double beta_softargmax = 1e10;
    double dice_smooth = 1.0;
    // label integer -> class name; the ordering encodes superficial-to-deep
    // anatomy so implausible adjacencies carry large (V_i - V_j)^2 penalties
    std::array<std::string, 5> class_order{"background", "fat", "mammary", "tumor", "muscle"};

    void validate() const {
        if (lambda < 0) throw std::invalid_argument("LossConfig.lambda must be >= 0");
        if (sigma_alpha <= 0 || sigma_beta <= 0 || epsilon <= 0 || beta_softargmax <= 0 || dice_smooth <= 0)
            throw std::invalid_argument("LossConfig: sigmas, epsilon, beta and dice_smooth must be positive");
        std::set<std::string> names(class_order.begin(), class_order.end());
        if (names.size() != class_order.size())
            throw std::invalid_argument("LossConfig.class_order must be a bijection");
    }
};

// The eight immediate neighbors with inverse-distance weights: 1 for axial,
// 1/sqrt(2) for diagonal.
struct NeighborWeighting {
    static constexpr int kCount = 8;
    static constexpr std::array<int, 8> dy{-1, -1, -1, 0, 0, 1, 1, 1};
    static constexpr std::array<int, 8> dx{-1, 0, 1, -1, 1, -1, 0, 1};
    static double inverse_distance(int k) {
        return (dy[k] != 0 && dx[k] != 0) ? 1.0 / std::sqrt(2.0) : 1.0;
    }
};

// One delta-gated pair's contribution before the denominator:
// exp(-dI^2/sigma_alpha) * exp(+dV^2/sigma_beta) * inv_d.
inline double smoothness_pair_kernel(double d_intensity, double d_label, const LossConfig& cfg,
                                     double inv_d = 1.0) {
    return std::exp(-(d_intensity * d_intensity) / cfg.sigma_alpha) *
           std::exp((d_label * d_label) / cfg.sigma_beta) * inv_d;
}

// ---------------------------------------------------------------------------
// Dice loss. probs and target one-hot are [N,K,H,W]; 1 - mean over (n,k) of
// (2*sum(p*g)+s)/(sum(p)+sum(g)+s).
// ---------------------------------------------------------------------------
template <typename T>
TensorPtr<T> dice_loss(Tape<T>& tape, const TensorPtr<T>& probs, const TensorPtr<T>& target,
                       const LossConfig& cfg) {
    detail::expect_rank(probs->shape, 4, "dice_loss probs");
    if (probs->shape != target->shape)
        throw std::invalid_argument("dice_loss shape mismatch: " + shape_str(probs->shape) + " vs " +
                                    shape_str(target->shape));
    const int N = probs->shape[0], K = probs->shape[1];
    const std::int64_t plane = static_cast<std::int64_t>(probs->shape[2]) * probs->shape[3];
    for (int n = 0; n < N; ++n)
        for (std::int64_t p = 0; p < plane; ++p) {
            T csum = 0;
            for (int k = 0; k < K; ++k) {
                const T g = target->values[(static_cast<std::int64_t>(n) * K + k) * plane + p];
                if (g != T(0) && g != T(1))
                    throw std::invalid_argument("dice_loss target is not one-hot");
                csum += g;
            }
            if (csum != T(1)) throw std::invalid_argument("dice_loss target is not one-hot");
        }

    const T s = static_cast<T>(cfg.dice_smooth);
    auto num = std::make_shared<std::vector<T>>(static_cast<size_t>(N) * K);
    auto den = std::make_shared<std::vector<T>>(static_cast<size_t>(N) * K);
    T acc = 0;
    for (int n = 0; n < N; ++n)
        for (int k = 0; k < K; ++k) {
            const std::int64_t base = (static_cast<std::int64_t>(n) * K + k) * plane;
            T inter = 0, psum = 0, gsum = 0;
            for (std::int64_t p = 0; p < plane; ++p) {
                inter += probs->values[base + p] * target->values[base + p];
                psum += probs->values[base + p];
                gsum += target->values[base + p];
            }
            (*num)[n * K + k] = 2 * inter + s;
            (*den)[n * K + k] = psum + gsum + s;
            acc += (*num)[n * K + k] / (*den)[n * K + k];
        }
    auto out = make_tensor<T>({1}, std::vector<T>{T(1) - acc / static_cast<T>(N * K)});
    out->requires_grad = probs->requires_grad;

    tape.record("dice_loss", out, [=]() {
        if (!probs->requires_grad) return;
        probs->ensure_grad();
        const T g0 = out->grad[0] / static_cast<T>(N * K);
        for (int n = 0; n < N; ++n)
            for (int k = 0; k < K; ++k) {
                const std::int64_t base = (static_cast<std::int64_t>(n) * K + k) * plane;
                const T nm = (*num)[n * K + k], dn = (*den)[n * K + k];
                for (std::int64_t p = 0; p < plane; ++p) {
                    const T gt = target->values[base + p];
                    probs->grad[base + p] -= g0 * (2 * gt * dn - nm) / (dn * dn);
                }
            }
    });
    return out;
}

// Two-class Dice on a single sigmoid channel: foreground p vs background 1-p.
// probs and target are [N,1,H,W]; target entries in {0,1}.
template <typename T>
TensorPtr<T> binary_dice_loss(Tape<T>& tape, const TensorPtr<T>& probs, const TensorPtr<T>& target,
                              const LossConfig& cfg) {
    detail::expect_rank(probs->shape, 4, "binary_dice_loss probs");
    if (probs->shape != target->shape || probs->shape[1] != 1)
        throw std::invalid_argument("binary_dice_loss expects matching [N,1,H,W], got " +
                                    shape_str(probs->shape) + " vs " + shape_str(target->shape));
    for (T g : target->values)
        if (g != T(0) && g != T(1)) throw std::invalid_argument("binary_dice_loss target is not binary");

    const int N = probs->shape[0];
    const std::int64_t plane = static_cast<std::int64_t>(probs->shape[2]) * probs->shape[3];
    const T s = static_cast<T>(cfg.dice_smooth);
    auto terms = std::make_shared<std::vector<std::array<T, 4>>>(N);  // num_fg, den_fg, num_bg, den_bg
    T acc = 0;
    for (int n = 0; n < N; ++n) {
        const std::int64_t base = static_cast<std::int64_t>(n) * plane;
        T ifg = 0, pfg = 0, gfg = 0;
        for (std::int64_t p = 0; p < plane; ++p) {
            ifg += probs->values[base + p] * target->values[base + p];
            pfg += probs->values[base + p];
            gfg += target->values[base + p];
        }
        const T pl = static_cast<T>(plane);
        const T num_fg = 2 * ifg + s, den_fg = pfg + gfg + s;
        const T ibg = pl - pfg - gfg + ifg;  // sum (1-p)(1-g)
        const T num_bg = 2 * ibg + s, den_bg = (pl - pfg) + (pl - gfg) + s;
        (*terms)[n] = {num_fg, den_fg, num_bg, den_bg};
        acc += (num_fg / den_fg + num_bg / den_bg) / 2;
    }
    auto out = make_tensor<T>({1}, std::vector<T>{T(1) - acc / static_cast<T>(N)});
    out->requires_grad = probs->requires_grad;

    tape.record("binary_dice_loss", out, [=]() {
        if (!probs->requires_grad) return;
        probs->ensure_grad();
        const T g0 = out->grad[0] / static_cast<T>(2 * N);
        for (int n = 0; n < N; ++n) {
            const auto& t = (*terms)[n];
            const std::int64_t base = static_cast<std::int64_t>(n) * plane;
            for (std::int64_t p = 0; p < plane; ++p) {
                const T gt = target->values[base + p];
                const T dfg = (2 * gt * t[1] - t[0]) / (t[1] * t[1]);
                const T dbg = (-2 * (T(1) - gt) * t[3] + t[2]) / (t[3] * t[3]);
                probs->grad[base + p] -= g0 * (dfg + dbg);
            }
        }
    });
    return out;
}

// ---------------------------------------------------------------------------
// softargmax over channels: V = sum_c c*exp(beta*p_c) / sum_c exp(beta*p_c),
// max-subtracted. probs [N,K,H,W] -> [N,1,H,W].
// ---------------------------------------------------------------------------
template <typename T>
TensorPtr<T> softargmax(Tape<T>& tape, const TensorPtr<T>& probs, double beta) {
    detail::expect_rank(probs->shape, 4, "softargmax input");
    if (beta <= 0) throw std::invalid_argument("softargmax beta must be positive");
    const int N = probs->shape[0], K = probs->shape[1];
    const std::int64_t plane = static_cast<std::int64_t>(probs->shape[2]) * probs->shape[3];
    auto out = make_tensor<T>({N, 1, probs->shape[2], probs->shape[3]});
    out->requires_grad = probs->requires_grad;
    auto weights = std::make_shared<std::vector<T>>(probs->values.size());  // softmax(beta*p)
    const T tb = static_cast<T>(beta);
    for (int n = 0; n < N; ++n)
        for (std::int64_t p = 0; p < plane; ++p) {
            const std::int64_t base = static_cast<std::int64_t>(n) * K * plane + p;
            T mx = probs->values[base];
            for (int k = 1; k < K; ++k) mx = std::max(mx, probs->values[base + k * plane]);
            T z = 0, v = 0;
            for (int k = 0; k < K; ++k) {
                const T e = std::exp(tb * (probs->values[base + k * plane] - mx));
                (*weights)[base + k * plane] = e;
                z += e;
                v += static_cast<T>(k) * e;
            }
            v /= z;
            for (int k = 0; k < K; ++k) (*weights)[base + k * plane] /= z;
            out->values[static_cast<std::int64_t>(n) * plane + p] = v;
        }
    tape.record("softargmax", out, [=]() {
        if (!probs->requires_grad) return;
        probs->ensure_grad();
        for (int n = 0; n < N; ++n)
            for (std::int64_t p = 0; p < plane; ++p) {
                const std::int64_t base = static_cast<std::int64_t>(n) * K * plane + p;
                const T v = out->values[static_cast<std::int64_t>(n) * plane + p];
                const T g = out->grad[static_cast<std::int64_t>(n) * plane + p];
                for (int k = 0; k < K; ++k)
                    probs->grad[base + k * plane] +=
                        g * tb * (*weights)[base + k * plane] * (static_cast<T>(k) - v);
            }
    });
    return out;
}

// Per-pixel argmax labels, first-index tie-break. probs [N,K,H,W].
template <typename T>
std::vector<int> argmax_channels(const TensorPtr<T>& probs) {
    detail::expect_rank(probs->shape, 4, "argmax_channels input");
    const int N = probs->shape[0], K = probs->shape[1];
    const std::int64_t plane = static_cast<std::int64_t>(probs->shape[2]) * probs->shape[3];
    std::vector<int> labels(static_cast<size_t>(N) * plane);
    for (int n = 0; n < N; ++n)
        for (std::int64_t p = 0; p < plane; ++p) {
            const std::int64_t base = static_cast<std::int64_t>(n) * K * plane + p;
            int best = 0;
            for (int k = 1; k < K; ++k)
                if (probs->values[base + k * plane] > probs->values[base + best * plane]) best = k;
            labels[static_cast<std::int64_t>(n) * plane + p] = best;
        }
    return labels;
}

// ---------------------------------------------------------------------------
// Smoothness loss. V [N,1,H,W] is the softargmax relaxation, labels are the
// detached per-pixel argmax, I [N,1,H,W] the intensity image in [0,1].
// Per pixel i: numerator sums over in-bounds 8-neighbors j with
// labels_i != labels_j the pair kernel / d_ij; denominator counts those
// neighbors plus epsilon. Delta gates and denominators are constants during
// backward; gradient flows only through V.
// ---------------------------------------------------------------------------
template <typename T>
TensorPtr<T> smoothness_loss(Tape<T>& tape, const TensorPtr<T>& V, const std::vector<int>& labels,
                             const TensorPtr<T>& I, const LossConfig& cfg) {
    detail::expect_rank(V->shape, 4, "smoothness_loss V");
    if (V->shape != I->shape || V->shape[1] != 1)
        throw std::invalid_argument("smoothness_loss expects matching [N,1,H,W], got V " +
                                    shape_str(V->shape) + " vs I " + shape_str(I->shape));
    const int N = V->shape[0], H = V->shape[2], W = V->shape[3];
    if (labels.size() != V->values.size())
        throw std::invalid_argument("smoothness_loss labels length mismatch");
    const std::int64_t plane = static_cast<std::int64_t>(H) * W;

    // denominators: delta-neighbor count + epsilon, per pixel
    auto denom = std::make_shared<std::vector<T>>(V->values.size());
    for (int n = 0; n < N; ++n)
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x) {
                const std::int64_t i = static_cast<std::int64_t>(n) * plane + y * W + x;
                int cnt = 0;
                for (int k = 0; k < NeighborWeighting::kCount; ++k) {
                    const int ny = y + NeighborWeighting::dy[k], nx = x + NeighborWeighting::dx[k];
                    if (ny < 0 || ny >= H || nx < 0 || nx >= W) continue;
                    if (labels[static_cast<std::int64_t>(n) * plane + ny * W + nx] != labels[i]) ++cnt;
                }
                (*denom)[i] = static_cast<T>(cnt) + static_cast<T>(cfg.epsilon);
            }

    // forward: offset-sweep accumulation of numerator/denominator per pixel
    const T inv_sa = static_cast<T>(1.0 / cfg.sigma_alpha);
    const T inv_sb = static_cast<T>(1.0 / cfg.sigma_beta);
    T total = 0;
    for (int n = 0; n < N; ++n) {
        T img_acc = 0;
        for (int k = 0; k < NeighborWeighting::kCount; ++k) {
            const int oy = NeighborWeighting::dy[k], ox = NeighborWeighting::dx[k];
            const T invd = static_cast<T>(NeighborWeighting::inverse_distance(k));
            for (int y = std::max(0, -oy); y < H - std::max(0, oy); ++y)
                for (int x = std::max(0, -ox); x < W - std::max(0, ox); ++x) {
                    const std::int64_t i = static_cast<std::int64_t>(n) * plane + y * W + x;
                    const std::int64_t j = static_cast<std::int64_t>(n) * plane + (y + oy) * W + (x + ox);
                    if (labels[i] == labels[j]) continue;
                    const T di = I->values[i] - I->values[j];
                    const T dv = V->values[i] - V->values[j];
                    img_acc += std::exp(-di * di * inv_sa) * std::exp(dv * dv * inv_sb) * invd / (*denom)[i];
                }
        }
        total += img_acc / static_cast<T>(plane);
    }
    auto out = make_tensor<T>({1}, std::vector<T>{total / static_cast<T>(N)});
    out->requires_grad = V->requires_grad;

    tape.record("smoothness_loss", out, [=]() {
        if (!V->requires_grad) return;
        V->ensure_grad();
        const T g0 = out->grad[0] / static_cast<T>(N);
        for (int n = 0; n < N; ++n) {
            const T gimg = g0 / static_cast<T>(plane);
            for (int k = 0; k < NeighborWeighting::kCount; ++k) {
                const int oy = NeighborWeighting::dy[k], ox = NeighborWeighting::dx[k];
                const T invd = static_cast<T>(NeighborWeighting::inverse_distance(k));
                for (int y = std::max(0, -oy); y < H - std::max(0, oy); ++y)
                    for (int x = std::max(0, -ox); x < W - std::max(0, ox); ++x) {
                        const std::int64_t i = static_cast<std::int64_t>(n) * plane + y * W + x;
                        const std::int64_t j = static_cast<std::int64_t>(n) * plane + (y + oy) * W + (x + ox);
                        if (labels[i] == labels[j]) continue;
                        const T di = I->values[i] - I->values[j];
                        const T dv = V->values[i] - V->values[j];
                        const T term =
                            std::exp(-di * di * inv_sa) * std::exp(dv * dv * inv_sb) * invd / (*denom)[i];
                        const T d = gimg * term * 2 * dv * inv_sb;
                        V->grad[i] += d;
                        V->grad[j] -= d;
                    }
            }
        }
    });
    return out;
}

// Verification twin: naive per-pixel, per-neighbor double loops, double
// precision, no shared code with the op above.
inline double smoothness_oracle(const std::vector<double>& V, const std::vector<int>& labels,
                                const std::vector<double>& I, int N, int H, int W,
                                const LossConfig& cfg) {
    static const int dy[8] = {-1, -1, -1, 0, 0, 1, 1, 1};
    static const int dx[8] = {-1, 0, 1, -1, 1, -1, 0, 1};
    double batch_sum = 0;
    for (int n = 0; n < N; ++n) {
        double img = 0;
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x) {
                const std::int64_t i = (static_cast<std::int64_t>(n) * H + y) * W + x;
                double numer = 0;
                double count = 0;
                for (int k = 0; k < 8; ++k) {
                    const int ny = y + dy[k], nx = x + dx[k];
                    if (ny < 0 || ny >= H || nx < 0 || nx >= W) continue;
                    const std::int64_t j = (static_cast<std::int64_t>(n) * H + ny) * W + nx;
                    if (labels[i] == labels[j]) continue;
                    count += 1;
                    const double dist = std::sqrt(double(dy[k] * dy[k] + dx[k] * dx[k]));
                    numer += std::exp(-(I[i] - I[j]) * (I[i] - I[j]) / cfg.sigma_alpha) *
                             std::exp((V[i] - V[j]) * (V[i] - V[j]) / cfg.sigma_beta) / dist;
                }
                img += numer / (count + cfg.epsilon);
            }
        batch_sum += img / (static_cast<double>(H) * W);
    }
    return batch_sum / N;
}

// ---------------------------------------------------------------------------
// Combined objective: L_total = Dice + lambda * L_SL with V = softargmax.
// ---------------------------------------------------------------------------
template <typename T>
struct TotalLoss {
    TensorPtr<T> total;
    T dice = 0;
    T smooth = 0;
};

// frozen_labels pins the detached argmax gate; gradient checkers use it so
// central differencing sees the same constants the analytic backward does.
template <typename T>
TotalLoss<T> total_loss(Tape<T>& tape, const TensorPtr<T>& probs, const TensorPtr<T>& target,
                        const TensorPtr<T>& image, const LossConfig& cfg,
                        bool smoothness_enabled = true,
                        const std::vector<int>* frozen_labels = nullptr) {
    TotalLoss<T> out;
    auto dice = dice_loss(tape, probs, target, cfg);
    out.dice = dice->values[0];
    if (!smoothness_enabled || cfg.lambda == 0) {
        out.total = dice;
        return out;
    }
    auto V = softargmax(tape, probs, cfg.beta_softargmax);
    auto labels = frozen_labels ? *frozen_labels : argmax_channels(probs);
    auto sl = smoothness_loss(tape, V, labels, image, cfg);
    out.smooth = sl->values[0];
    out.total = add(tape, dice, scale(tape, sl, static_cast<T>(cfg.lambda)));
    return out;
}

}  // namespace a2dmn
