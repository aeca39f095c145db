#pragma once

// Dense rank-<=4 tensors with reverse-mode autodiff. The op set is exactly
// what the segmentation graph needs: dilated same-padding conv, 2x2 stride-2
// transposed conv, 2x2 maxpool, a few elementwise ops, channel concat/slice,
// channel softmax and reductions. Single precision for training, double for
// gradient checking; the scalar type is a template parameter.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace a2dmn {

using Shape = std::vector<int>;

inline std::int64_t numel(const Shape& s) {
    std::int64_t n = 1;
    for (int d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << ']';
    return os.str();
}

template <typename T>
struct TensorData {
    Shape shape;
    std::vector<T> values;
    std::vector<T> grad;  // empty until gradient flows here
    bool requires_grad = false;

    void ensure_grad() {
        if (grad.empty()) grad.assign(values.size(), T(0));
    }
    bool has_grad() const { return !grad.empty(); }
};

template <typename T>
using TensorPtr = std::shared_ptr<TensorData<T>>;

template <typename T>
TensorPtr<T> make_tensor(Shape shape, bool requires_grad = false) {
    if (shape.empty() || shape.size() > 4)
        throw std::invalid_argument("tensor rank must be 1..4, got " + shape_str(shape));
    for (int d : shape)
        if (d < 0) throw std::invalid_argument("negative extent in shape " + shape_str(shape));
    auto t = std::make_shared<TensorData<T>>();
    t->shape = std::move(shape);
    t->values.assign(static_cast<size_t>(numel(t->shape)), T(0));
    t->requires_grad = requires_grad;
    return t;
}

template <typename T>
TensorPtr<T> make_tensor(Shape shape, std::vector<T> values, bool requires_grad = false) {
    auto t = make_tensor<T>(std::move(shape), requires_grad);
    if (values.size() != t->values.size())
        throw std::invalid_argument("value count does not match shape " + shape_str(t->shape));
    t->values = std::move(values);
    return t;
}

// Records forward nodes in creation order; backward replays them in reverse.
template <typename T>
struct Tape {
    struct Node {
        std::string op;
        TensorPtr<T> out;
        std::function<void()> backprop;
    };
    std::vector<Node> nodes;

    void record(std::string op, TensorPtr<T> out, std::function<void()> backprop) {
        nodes.push_back(Node{std::move(op), std::move(out), std::move(backprop)});
    }

    // Index of the first node whose output holds a non-finite value, or -1.
    int first_nonfinite() const {
        for (size_t i = 0; i < nodes.size(); ++i)
            for (T v : nodes[i].out->values)
                if (!std::isfinite(static_cast<double>(v))) return static_cast<int>(i);
        return -1;
    }
};

template <typename T>
void backward(Tape<T>& tape, const TensorPtr<T>& loss) {
    if (numel(loss->shape) != 1)
        throw std::invalid_argument("backward requires a scalar loss, got shape " + shape_str(loss->shape));
    loss->ensure_grad();
    loss->grad[0] += T(1);
    for (auto it = tape.nodes.rbegin(); it != tape.nodes.rend(); ++it)
        if (it->out->has_grad()) it->backprop();
}

namespace detail {

template <typename T>
inline bool any_requires(std::initializer_list<const TensorPtr<T>*> ts) {
    for (auto* t : ts)
        if (*t && (*t)->requires_grad) return true;
    return false;
}

inline void expect_rank(const Shape& s, size_t rank, const char* what) {
    if (s.size() != rank)
        throw std::invalid_argument(std::string(what) + ": expected rank " + std::to_string(rank) +
                                    ", got shape " + shape_str(s));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// conv2d: stride 1, zero "same" padding, odd kernel, dilated taps.
// x [N,Ci,H,W], w [Co,Ci,kh,kw], b [Co] -> [N,Co,H,W]
// ---------------------------------------------------------------------------
template <typename T>
TensorPtr<T> conv2d(Tape<T>& tape, const TensorPtr<T>& x, const TensorPtr<T>& w,
                    const TensorPtr<T>& b, int dilation = 1) {
    detail::expect_rank(x->shape, 4, "conv2d input");
    detail::expect_rank(w->shape, 4, "conv2d weight");
    detail::expect_rank(b->shape, 1, "conv2d bias");
    const int N = x->shape[0], Ci = x->shape[1], H = x->shape[2], W = x->shape[3];
    const int Co = w->shape[0], kh = w->shape[2], kw = w->shape[3];
    if (w->shape[1] != Ci)
        throw std::invalid_argument("conv2d channel mismatch: input " + shape_str(x->shape) +
                                    " vs weight " + shape_str(w->shape));
    if (kh % 2 == 0 || kw % 2 == 0)
        throw std::invalid_argument("conv2d requires odd kernel, got " + shape_str(w->shape));
    if (b->shape[0] != Co)
        throw std::invalid_argument("conv2d bias extent " + shape_str(b->shape) +
                                    " does not match " + std::to_string(Co) + " kernels");
    if (dilation < 1) throw std::invalid_argument("conv2d dilation must be positive");

    const int ph = dilation * (kh / 2), pw = dilation * (kw / 2);
    auto out = make_tensor<T>({N, Co, H, W});
    out->requires_grad = detail::any_requires<T>({&x, &w, &b});

    const T* xv = x->values.data();
    const T* wv = w->values.data();
    T* ov = out->values.data();
    const auto xi = [=](int n, int c, int h, int ww_) {
        return ((static_cast<std::int64_t>(n) * Ci + c) * H + h) * W + ww_;
    };
    for (int n = 0; n < N; ++n)
        for (int co = 0; co < Co; ++co) {
            const T bias = b->values[co];
            for (int oh = 0; oh < H; ++oh) {
                T* orow = ov + ((static_cast<std::int64_t>(n) * Co + co) * H + oh) * W;
                for (int ow = 0; ow < W; ++ow) orow[ow] = bias;
                for (int ci = 0; ci < Ci; ++ci)
                    for (int r = 0; r < kh; ++r) {
                        const int ih = oh - ph + r * dilation;
                        if (ih < 0 || ih >= H) continue;
                        const T* wrow = wv + ((static_cast<std::int64_t>(co) * Ci + ci) * kh + r) * kw;
                        const T* xrow = xv + xi(n, ci, ih, 0);
                        for (int s = 0; s < kw; ++s) {
                            const T wt = wrow[s];
                            const int off = -pw + s * dilation;
                            const int lo = std::max(0, -off), hi = std::min(W, W - off);
                            for (int ow = lo; ow < hi; ++ow) orow[ow] += wt * xrow[ow + off];
                        }
                    }
            }
        }

    tape.record("conv2d", out, [=]() {
        const T* gv = out->grad.data();
        if (x->requires_grad) {
            x->ensure_grad();
            T* gx = x->grad.data();
            // gather form: gx[ih,iw] += sum_{co,r,s} w * gy[ih+ph-r*d, iw+pw-s*d]
            for (int n = 0; n < N; ++n)
                for (int ci = 0; ci < Ci; ++ci)
                    for (int ih = 0; ih < H; ++ih) {
                        T* gxrow = gx + xi(n, ci, ih, 0);
                        for (int co = 0; co < Co; ++co)
                            for (int r = 0; r < kh; ++r) {
                                const int oh = ih + ph - r * dilation;
                                if (oh < 0 || oh >= H) continue;
                                const T* wrow = wv + ((static_cast<std::int64_t>(co) * Ci + ci) * kh + r) * kw;
                                const T* grow = gv + ((static_cast<std::int64_t>(n) * Co + co) * H + oh) * W;
                                for (int s = 0; s < kw; ++s) {
                                    const T wt = wrow[s];
                                    const int off = pw - s * dilation;
                                    const int lo = std::max(0, -off), hi = std::min(W, W - off);
                                    for (int iw = lo; iw < hi; ++iw) gxrow[iw] += wt * grow[iw + off];
                                }
                            }
                    }
        }
        if (w->requires_grad) {
            w->ensure_grad();
            T* gw = w->grad.data();
            for (int co = 0; co < Co; ++co)
                for (int ci = 0; ci < Ci; ++ci)
                    for (int r = 0; r < kh; ++r)
                        for (int s = 0; s < kw; ++s) {
                            T acc = 0;
                            for (int n = 0; n < N; ++n)
                                for (int oh = 0; oh < H; ++oh) {
                                    const int ih = oh - ph + r * dilation;
                                    if (ih < 0 || ih >= H) continue;
                                    const int off = -pw + s * dilation;
                                    const int lo = std::max(0, -off), hi = std::min(W, W - off);
                                    const T* grow = gv + ((static_cast<std::int64_t>(n) * Co + co) * H + oh) * W;
                                    const T* xrow = xv + xi(n, ci, ih, 0);
                                    for (int ow = lo; ow < hi; ++ow) acc += grow[ow] * xrow[ow + off];
                                }
                            gw[((static_cast<std::int64_t>(co) * Ci + ci) * kh + r) * kw + s] += acc;
                        }
        }
        if (b->requires_grad) {
            b->ensure_grad();
            for (int co = 0; co < Co; ++co) {
                T acc = 0;
                for (int n = 0; n < N; ++n) {
                    const T* grow = gv + (static_cast<std::int64_t>(n) * Co + co) * H * W;
                    for (int i = 0; i < H * W; ++i) acc += grow[i];
                }
                b->grad[co] += acc;
            }
        }
    });
    return out;
}

// ---------------------------------------------------------------------------
// transposed_conv2d: fixed 2x2 kernel, stride 2. x [N,Ci,H,W], w [Ci,Co,2,2],
// b [Co] -> [N,Co,2H,2W]; exact adjoint of a valid stride-2 2x2 convolution.
// ---------------------------------------------------------------------------
template <typename T>
TensorPtr<T> transposed_conv2d(Tape<T>& tape, const TensorPtr<T>& x, const TensorPtr<T>& w,
                               const TensorPtr<T>& b) {
    detail::expect_rank(x->shape, 4, "transposed_conv2d input");
    detail::expect_rank(w->shape, 4, "transposed_conv2d weight");
    const int N = x->shape[0], Ci = x->shape[1], H = x->shape[2], W = x->shape[3];
    const int Co = w->shape[1];
    if (w->shape[0] != Ci || w->shape[2] != 2 || w->shape[3] != 2)
        throw std::invalid_argument("transposed_conv2d expects weight [Ci,Co,2,2], got " +
                                    shape_str(w->shape) + " for input " + shape_str(x->shape));
    if (b->shape.size() != 1 || b->shape[0] != Co)
        throw std::invalid_argument("transposed_conv2d bias shape " + shape_str(b->shape));

    const int OH = 2 * H, OW = 2 * W;
    auto out = make_tensor<T>({N, Co, OH, OW});
    out->requires_grad = detail::any_requires<T>({&x, &w, &b});

    const T* xv = x->values.data();
    const T* wv = w->values.data();
    T* ov = out->values.data();
    for (int n = 0; n < N; ++n)
        for (int co = 0; co < Co; ++co)
            for (int oh = 0; oh < OH; ++oh) {
                const int h = oh / 2, r = oh % 2;
                T* orow = ov + ((static_cast<std::int64_t>(n) * Co + co) * OH + oh) * OW;
                for (int ow = 0; ow < OW; ++ow) {
                    const int wcol = ow / 2, s = ow % 2;
                    T acc = b->values[co];
                    for (int ci = 0; ci < Ci; ++ci)
                        acc += xv[((static_cast<std::int64_t>(n) * Ci + ci) * H + h) * W + wcol] *
                               wv[((static_cast<std::int64_t>(ci) * Co + co) * 2 + r) * 2 + s];
                    orow[ow] = acc;
                }
            }

    tape.record("transposed_conv2d", out, [=]() {
        const T* gv = out->grad.data();
        if (x->requires_grad) {
            x->ensure_grad();
            for (int n = 0; n < N; ++n)
                for (int ci = 0; ci < Ci; ++ci)
                    for (int h = 0; h < H; ++h)
                        for (int wcol = 0; wcol < W; ++wcol) {
                            T acc = 0;
                            for (int co = 0; co < Co; ++co)
                                for (int r = 0; r < 2; ++r)
                                    for (int s = 0; s < 2; ++s)
                                        acc += gv[((static_cast<std::int64_t>(n) * Co + co) * OH + 2 * h + r) * OW +
                                                  2 * wcol + s] *
                                               wv[((static_cast<std::int64_t>(ci) * Co + co) * 2 + r) * 2 + s];
                            x->grad[((static_cast<std::int64_t>(n) * Ci + ci) * H + h) * W + wcol] += acc;
                        }
        }
        if (w->requires_grad) {
            w->ensure_grad();
            for (int ci = 0; ci < Ci; ++ci)
                for (int co = 0; co < Co; ++co)
                    for (int r = 0; r < 2; ++r)
                        for (int s = 0; s < 2; ++s) {
                            T acc = 0;
                            for (int n = 0; n < N; ++n)
                                for (int h = 0; h < H; ++h)
                                    for (int wcol = 0; wcol < W; ++wcol)
                                        acc += xv[((static_cast<std::int64_t>(n) * Ci + ci) * H + h) * W + wcol] *
                                               gv[((static_cast<std::int64_t>(n) * Co + co) * OH + 2 * h + r) * OW +
                                                  2 * wcol + s];
                            w->grad[((static_cast<std::int64_t>(ci) * Co + co) * 2 + r) * 2 + s] += acc;
                        }
        }
        if (b->requires_grad) {
            b->ensure_grad();
            for (int co = 0; co < Co; ++co) {
                T acc = 0;
                for (int n = 0; n < N; ++n) {
                    const T* grow = gv + (static_cast<std::int64_t>(n) * Co + co) * OH * OW;
                    for (int i = 0; i < OH * OW; ++i) acc += grow[i];
                }
                b->grad[co] += acc;
            }
        }
    });
    return out;
}

// ---------------------------------------------------------------------------
// maxpool2d: 2x2 window, stride 2; gradient routed to the first (row-major)
// maximal element of each window.
// ---------------------------------------------------------------------------
template <typename T>
TensorPtr<T> maxpool2d(Tape<T>& tape, const TensorPtr<T>& x) {
    detail::expect_rank(x->shape, 4, "maxpool2d input");
    const int N = x->shape[0], C = x->shape[1], H = x->shape[2], W = x->shape[3];
    if (H % 2 != 0 || W % 2 != 0)
        throw std::invalid_argument("maxpool2d requires even spatial extents, got " + shape_str(x->shape));
    const int OH = H / 2, OW = W / 2;
    auto out = make_tensor<T>({N, C, OH, OW});
    out->requires_grad = x->requires_grad;

    auto argmax = std::make_shared<std::vector<std::int64_t>>(out->values.size());
    const T* xv = x->values.data();
    std::int64_t o = 0;
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c)
            for (int oh = 0; oh < OH; ++oh)
                for (int ow = 0; ow < OW; ++ow, ++o) {
                    const std::int64_t base = ((static_cast<std::int64_t>(n) * C + c) * H + 2 * oh) * W + 2 * ow;
                    std::int64_t best = base;
                    T bestv = xv[base];
                    const std::int64_t cand[3] = {base + 1, base + W, base + W + 1};
                    for (std::int64_t idx : cand)
                        if (xv[idx] > bestv) { bestv = xv[idx]; best = idx; }
                    out->values[o] = bestv;
                    (*argmax)[o] = best;
                }

    tape.record("maxpool2d", out, [=]() {
        if (!x->requires_grad) return;
        x->ensure_grad();
        for (size_t i = 0; i < out->grad.size(); ++i) x->grad[(*argmax)[i]] += out->grad[i];
    });
    return out;
}

// ---------------------------------------------------------------------------
// elementwise family
// ---------------------------------------------------------------------------
template <typename T>
TensorPtr<T> relu(Tape<T>& tape, const TensorPtr<T>& x) {
    auto out = make_tensor<T>(x->shape);
    out->requires_grad = x->requires_grad;
    for (size_t i = 0; i < x->values.size(); ++i) out->values[i] = x->values[i] > T(0) ? x->values[i] : T(0);
    tape.record("relu", out, [=]() {
        if (!x->requires_grad) return;
        x->ensure_grad();
        for (size_t i = 0; i < x->values.size(); ++i)
            if (x->values[i] > T(0)) x->grad[i] += out->grad[i];
    });
    return out;
}

template <typename T>
TensorPtr<T> sigmoid(Tape<T>& tape, const TensorPtr<T>& x) {
    auto out = make_tensor<T>(x->shape);
    out->requires_grad = x->requires_grad;
    for (size_t i = 0; i < x->values.size(); ++i)
        out->values[i] = T(1) / (T(1) + std::exp(-x->values[i]));
    tape.record("sigmoid", out, [=]() {
        if (!x->requires_grad) return;
        x->ensure_grad();
        for (size_t i = 0; i < x->values.size(); ++i) {
            const T s = out->values[i];
            x->grad[i] += out->grad[i] * s * (T(1) - s);
        }
    });
    return out;
}

template <typename T>
TensorPtr<T> add(Tape<T>& tape, const TensorPtr<T>& a, const TensorPtr<T>& b) {
    if (a->shape != b->shape)
        throw std::invalid_argument("add shape mismatch: " + shape_str(a->shape) + " vs " + shape_str(b->shape));
    auto out = make_tensor<T>(a->shape);
    out->requires_grad = detail::any_requires<T>({&a, &b});
    for (size_t i = 0; i < a->values.size(); ++i) out->values[i] = a->values[i] + b->values[i];
    tape.record("add", out, [=]() {
        if (a->requires_grad) {
            a->ensure_grad();
            for (size_t i = 0; i < out->grad.size(); ++i) a->grad[i] += out->grad[i];
        }
        if (b->requires_grad) {
            b->ensure_grad();
            for (size_t i = 0; i < out->grad.size(); ++i) b->grad[i] += out->grad[i];
        }
    });
    return out;
}

template <typename T>
TensorPtr<T> scale(Tape<T>& tape, const TensorPtr<T>& a, T s) {
    auto out = make_tensor<T>(a->shape);
    out->requires_grad = a->requires_grad;
    for (size_t i = 0; i < a->values.size(); ++i) out->values[i] = a->values[i] * s;
    tape.record("scale", out, [=]() {
        if (!a->requires_grad) return;
        a->ensure_grad();
        for (size_t i = 0; i < out->grad.size(); ++i) a->grad[i] += out->grad[i] * s;
    });
    return out;
}

template <typename T>
TensorPtr<T> sum(Tape<T>& tape, const TensorPtr<T>& x) {
    auto out = make_tensor<T>({1});
    out->requires_grad = x->requires_grad;
    T acc = 0;
    for (T v : x->values) acc += v;
    out->values[0] = acc;
    tape.record("sum", out, [=]() {
        if (!x->requires_grad) return;
        x->ensure_grad();
        for (size_t i = 0; i < x->grad.size(); ++i) x->grad[i] += out->grad[0];
    });
    return out;
}

// ---------------------------------------------------------------------------
// channel concat / slice
// ---------------------------------------------------------------------------
template <typename T>
TensorPtr<T> concat_channels(Tape<T>& tape, const std::vector<TensorPtr<T>>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_channels: no inputs");
    const auto& s0 = parts[0]->shape;
    detail::expect_rank(s0, 4, "concat_channels input");
    int Ctot = 0;
    for (const auto& p : parts) {
        detail::expect_rank(p->shape, 4, "concat_channels input");
        if (p->shape[0] != s0[0] || p->shape[2] != s0[2] || p->shape[3] != s0[3])
            throw std::invalid_argument("concat_channels batch/spatial mismatch: " + shape_str(s0) +
                                        " vs " + shape_str(p->shape));
        Ctot += p->shape[1];
    }
    const int N = s0[0], H = s0[2], W = s0[3];
    auto out = make_tensor<T>({N, Ctot, H, W});
    for (const auto& p : parts) out->requires_grad = out->requires_grad || p->requires_grad;

    const std::int64_t plane = static_cast<std::int64_t>(H) * W;
    for (int n = 0; n < N; ++n) {
        std::int64_t cbase = 0;
        for (const auto& p : parts) {
            const int C = p->shape[1];
            std::copy_n(p->values.data() + static_cast<std::int64_t>(n) * C * plane, C * plane,
                        out->values.data() + (static_cast<std::int64_t>(n) * Ctot + cbase) * plane);
            cbase += C;
        }
    }
    tape.record("concat_channels", out, [=]() {
        for (int n = 0; n < N; ++n) {
            std::int64_t cbase = 0;
            for (const auto& p : parts) {
                const int C = p->shape[1];
                if (p->requires_grad) {
                    p->ensure_grad();
                    const T* src = out->grad.data() + (static_cast<std::int64_t>(n) * Ctot + cbase) * plane;
                    T* dst = p->grad.data() + static_cast<std::int64_t>(n) * C * plane;
                    for (std::int64_t i = 0; i < C * plane; ++i) dst[i] += src[i];
                }
                cbase += C;
            }
        }
    });
    return out;
}

template <typename T>
TensorPtr<T> concat_channels(Tape<T>& tape, const TensorPtr<T>& a, const TensorPtr<T>& b) {
    return concat_channels(tape, std::vector<TensorPtr<T>>{a, b});
}

template <typename T>
TensorPtr<T> slice_channels(Tape<T>& tape, const TensorPtr<T>& x, int c0, int c1) {
    detail::expect_rank(x->shape, 4, "slice_channels input");
    const int N = x->shape[0], C = x->shape[1], H = x->shape[2], W = x->shape[3];
    if (c0 < 0 || c1 < c0 || c1 > C)
        throw std::invalid_argument("slice_channels range [" + std::to_string(c0) + "," +
                                    std::to_string(c1) + ") out of " + std::to_string(C));
    auto out = make_tensor<T>({N, c1 - c0, H, W});
    out->requires_grad = x->requires_grad;
    const std::int64_t plane = static_cast<std::int64_t>(H) * W;
    for (int n = 0; n < N; ++n)
        std::copy_n(x->values.data() + (static_cast<std::int64_t>(n) * C + c0) * plane,
                    static_cast<std::int64_t>(c1 - c0) * plane,
                    out->values.data() + static_cast<std::int64_t>(n) * (c1 - c0) * plane);
    tape.record("slice_channels", out, [=]() {
        if (!x->requires_grad) return;
        x->ensure_grad();
        for (int n = 0; n < N; ++n) {
            const T* src = out->grad.data() + static_cast<std::int64_t>(n) * (c1 - c0) * plane;
            T* dst = x->grad.data() + (static_cast<std::int64_t>(n) * C + c0) * plane;
            for (std::int64_t i = 0; i < (c1 - c0) * plane; ++i) dst[i] += src[i];
        }
    });
    return out;
}

// ---------------------------------------------------------------------------
// softmax over the channel axis, max-subtracted.
// ---------------------------------------------------------------------------
template <typename T>
TensorPtr<T> softmax_channels(Tape<T>& tape, const TensorPtr<T>& x) {
    detail::expect_rank(x->shape, 4, "softmax_channels input");
    const int N = x->shape[0], K = x->shape[1], H = x->shape[2], W = x->shape[3];
    if (K < 2) throw std::invalid_argument("softmax_channels needs K >= 2, got " + shape_str(x->shape));
    auto out = make_tensor<T>(x->shape);
    out->requires_grad = x->requires_grad;
    const std::int64_t plane = static_cast<std::int64_t>(H) * W;
    for (int n = 0; n < N; ++n)
        for (std::int64_t p = 0; p < plane; ++p) {
            const std::int64_t base = static_cast<std::int64_t>(n) * K * plane + p;
            T mx = x->values[base];
            for (int k = 1; k < K; ++k) mx = std::max(mx, x->values[base + k * plane]);
            T denom = 0;
            for (int k = 0; k < K; ++k) {
                const T e = std::exp(x->values[base + k * plane] - mx);
                out->values[base + k * plane] = e;
                denom += e;
            }
            for (int k = 0; k < K; ++k) out->values[base + k * plane] /= denom;
        }
    tape.record("softmax_channels", out, [=]() {
        if (!x->requires_grad) return;
        x->ensure_grad();
        for (int n = 0; n < N; ++n)
            for (std::int64_t p = 0; p < plane; ++p) {
                const std::int64_t base = static_cast<std::int64_t>(n) * K * plane + p;
                T dot = 0;
                for (int k = 0; k < K; ++k) dot += out->grad[base + k * plane] * out->values[base + k * plane];
                for (int k = 0; k < K; ++k)
                    x->grad[base + k * plane] +=
                        out->values[base + k * plane] * (out->grad[base + k * plane] - dot);
            }
    });
    return out;
}

// ---------------------------------------------------------------------------
// gradient checking (double precision)
// ---------------------------------------------------------------------------

// max over checked coordinates of |analytic - central difference| /
// max(1, |analytic|, |numeric|). coords_per_tensor < 0 checks every entry.
struct GradCheckOptions {
    double eps = 1e-5;
    int coords_per_tensor = -1;
    std::uint64_t seed = 0;  // coordinate subsampling
};

inline double grad_check(const std::function<double()>& eval_loss,
                         const std::function<void(std::vector<TensorPtr<double>>&)>& run_backward,
                         const std::vector<TensorPtr<double>>& params,
                         const GradCheckOptions& opt = {});

// Convenience wrapper: fn rebuilds the graph from the params' current values
// on a fresh tape and returns the scalar loss.
inline double grad_check(const std::function<TensorPtr<double>(Tape<double>&)>& fn,
                         const std::vector<TensorPtr<double>>& params,
                         const GradCheckOptions& opt = {}) {
    auto eval_loss = [&]() {
        Tape<double> tape;
        auto loss = fn(tape);
        const int bad = tape.first_nonfinite();
        if (bad >= 0)
            throw std::runtime_error("non-finite intermediate at node " + std::to_string(bad) + " (" +
                                     tape.nodes[bad].op + ")");
        return loss->values[0];
    };
    auto run_backward = [&](std::vector<TensorPtr<double>>&) {
        Tape<double> tape;
        auto loss = fn(tape);
        backward(tape, loss);
    };
    return grad_check(eval_loss, run_backward, params, opt);
}

inline double grad_check(const std::function<double()>& eval_loss,
                         const std::function<void(std::vector<TensorPtr<double>>&)>& run_backward,
                         const std::vector<TensorPtr<double>>& params, const GradCheckOptions& opt) {
    for (const auto& p : params) {
        p->grad.clear();
        if (!p->requires_grad) throw std::invalid_argument("grad_check parameter without requires_grad");
    }
    auto mutable_params = params;
    run_backward(mutable_params);

    std::mt19937_64 rng(opt.seed);
    double worst = 0;
    for (const auto& p : params) {
        std::vector<size_t> coords;
        if (opt.coords_per_tensor < 0 || static_cast<size_t>(opt.coords_per_tensor) >= p->values.size()) {
            coords.resize(p->values.size());
            std::iota(coords.begin(), coords.end(), size_t{0});
        } else {
            for (int i = 0; i < opt.coords_per_tensor; ++i)
                coords.push_back(rng() % p->values.size());
        }
        for (size_t c : coords) {
            const double saved = p->values[c];
            p->values[c] = saved + opt.eps;
            const double fp = eval_loss();
            p->values[c] = saved - opt.eps;
            const double fm = eval_loss();
            p->values[c] = saved;
            const double numeric = (fp - fm) / (2 * opt.eps);
            const double analytic = p->has_grad() ? p->grad[c] : 0.0;
            const double denom = std::max({1.0, std::abs(analytic), std::abs(numeric)});
            worst = std::max(worst, std::abs(analytic - numeric) / denom);
        }
    }
    return worst;
}

}  // namespace a2dmn
