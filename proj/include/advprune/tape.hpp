#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "advprune/error.hpp"
#include "advprune/tensor.hpp"

namespace advprune {

/// Handle to a value recorded on a Tape.
struct Var {
    std::uint32_t id = 0;
    friend bool operator==(Var, Var) = default;
};

/// Result of a fused softmax-and-loss evaluation: the scalar, the unweighted
/// per-row losses, and the gradient of the scalar with respect to each logit
/// tensor ("view") that entered the loss.
template <class T>
struct LossResult {
    T value{};
    std::vector<T> row_values;
    std::vector<BasicTensor<T>> logit_grads;
};

/// Reverse-mode differentiation tape. Operations append nodes in evaluation
/// order, so reverse creation order is a valid topological order for the
/// backward sweep. Nodes that do not depend on any differentiable input
/// record no backward closure.
template <class T>
class Tape {
public:
    using TensorT = BasicTensor<T>;

    Var input(TensorT value, bool requires_grad) { return push(std::move(value), requires_grad, nullptr); }

    const TensorT& value(Var v) const { return nodes_.at(v.id).value; }

    /// Gradient accumulated by the last backward(); zeros if none reached `v`.
    TensorT grad(Var v) const {
        const auto& n = nodes_.at(v.id);
        return n.grad.empty() ? TensorT(n.value.shape) : n.grad;
    }

    bool requires_grad(Var v) const { return nodes_.at(v.id).requires_grad; }

    /// y = x · wᵀ with x [B,F] and w [O,F].
    Var matmul_nt(Var x, Var w) {
        const auto& xv = value(x);
        const auto& wv = value(w);
        if (xv.rank() != 2 || wv.rank() != 2 || xv.dim(1) != wv.dim(1))
            throw ShapeError("matmul", "cannot multiply " + shape_string(xv.shape) + " by transpose of " +
                                           shape_string(wv.shape));
        const std::size_t batch = xv.dim(0), in = xv.dim(1), out = wv.dim(0);
        TensorT y({batch, out});
        for (std::size_t b = 0; b < batch; ++b) {
            const T* xr = &xv.values[b * in];
            for (std::size_t o = 0; o < out; ++o) {
                const T* wr = &wv.values[o * in];
                T acc{0};
                for (std::size_t f = 0; f < in; ++f) acc += xr[f] * wr[f];
                y.values[b * out + o] = acc;
            }
        }
        return push(std::move(y), any_grad({x, w}), [x, w, batch, in, out](Tape& t, Var self) {
            const auto& gy = t.nodes_[self.id].grad.values;
            if (t.requires_grad(x)) {
                auto& gx = t.grad_ref(x).values;
                const auto& wv = t.value(w).values;
                for (std::size_t b = 0; b < batch; ++b)
                    for (std::size_t o = 0; o < out; ++o) {
                        const T g = gy[b * out + o];
                        if (g == T{0}) continue;
                        for (std::size_t f = 0; f < in; ++f) gx[b * in + f] += g * wv[o * in + f];
                    }
            }
            if (t.requires_grad(w)) {
                auto& gw = t.grad_ref(w).values;
                const auto& xv = t.value(x).values;
                for (std::size_t b = 0; b < batch; ++b)
                    for (std::size_t o = 0; o < out; ++o) {
                        const T g = gy[b * out + o];
                        if (g == T{0}) continue;
                        for (std::size_t f = 0; f < in; ++f) gw[o * in + f] += g * xv[b * in + f];
                    }
            }
        });
    }

    /// Adds b[c] along dimension 1 of x ([B,C] or [B,C,H,W]).
    Var add_bias(Var x, Var b) {
        const auto& xv = value(x);
        const auto& bv = value(b);
        if (xv.rank() < 2 || bv.rank() != 1 || bv.dim(0) != xv.dim(1))
            throw ShapeError("bias", "bias " + shape_string(bv.shape) + " does not match input " +
                                         shape_string(xv.shape));
        const std::size_t batch = xv.dim(0), channels = xv.dim(1), inner = xv.size() / (batch * channels);
        TensorT y = xv;
        for (std::size_t n = 0; n < batch; ++n)
            for (std::size_t c = 0; c < channels; ++c) {
                T* p = &y.values[(n * channels + c) * inner];
                for (std::size_t i = 0; i < inner; ++i) p[i] += bv.values[c];
            }
        return push(std::move(y), any_grad({x, b}), [x, b, batch, channels, inner](Tape& t, Var self) {
            const auto& gy = t.nodes_[self.id].grad.values;
            if (t.requires_grad(x)) {
                auto& gx = t.grad_ref(x).values;
                for (std::size_t i = 0; i < gy.size(); ++i) gx[i] += gy[i];
            }
            if (t.requires_grad(b)) {
                auto& gb = t.grad_ref(b).values;
                for (std::size_t n = 0; n < batch; ++n)
                    for (std::size_t c = 0; c < channels; ++c) {
                        const T* p = &gy[(n * channels + c) * inner];
                        T acc{0};
                        for (std::size_t i = 0; i < inner; ++i) acc += p[i];
                        gb[c] += acc;
                    }
            }
        });
    }

    Var relu(Var x) {
        TensorT y = value(x);
        for (auto& v : y.values) v = v > T{0} ? v : T{0};
        return push(std::move(y), any_grad({x}), [x](Tape& t, Var self) {
            const auto& gy = t.nodes_[self.id].grad.values;
            const auto& xv = t.value(x).values;
            auto& gx = t.grad_ref(x).values;
            for (std::size_t i = 0; i < gy.size(); ++i)
                if (xv[i] > T{0}) gx[i] += gy[i];
        });
    }

    /// 2-D cross-correlation, stride 1, zero padding that preserves H and W.
    /// x [B,C,H,W], k [O,C,KH,KW] with odd KH, KW.
    Var conv2d(Var x, Var k) {
        const auto& xv = value(x);
        const auto& kv = value(k);
        if (xv.rank() != 4 || kv.rank() != 4 || kv.dim(1) != xv.dim(1) || kv.dim(2) % 2 == 0 || kv.dim(3) % 2 == 0)
            throw ShapeError("conv2d", "kernel " + shape_string(kv.shape) + " incompatible with input " +
                                           shape_string(xv.shape));
        const Geometry g{xv.dim(0), xv.dim(1), xv.dim(2), xv.dim(3), kv.dim(0), kv.dim(2), kv.dim(3)};
        TensorT y({g.batch, g.out_ch, g.height, g.width});
        conv_visit(g, [&](std::size_t yi, std::size_t xi, std::size_t ki, std::size_t len) {
            const T w = kv.values[ki];
            T* yp = &y.values[yi];
            const T* xp = &xv.values[xi];
            for (std::size_t i = 0; i < len; ++i) yp[i] += w * xp[i];
        });
        return push(std::move(y), any_grad({x, k}), [x, k, g](Tape& t, Var self) {
            const auto& gy = t.nodes_[self.id].grad.values;
            const bool want_x = t.requires_grad(x), want_k = t.requires_grad(k);
            const auto& xv = t.value(x).values;
            const auto& kv = t.value(k).values;
            T* gx = want_x ? t.grad_ref(x).values.data() : nullptr;
            T* gk = want_k ? t.grad_ref(k).values.data() : nullptr;
            conv_visit(g, [&](std::size_t yi, std::size_t xi, std::size_t ki, std::size_t len) {
                const T* gyp = &gy[yi];
                if (gx) {
                    const T w = kv[ki];
                    T* gxp = gx + xi;
                    for (std::size_t i = 0; i < len; ++i) gxp[i] += w * gyp[i];
                }
                if (gk) {
                    const T* xp = &xv[xi];
                    T acc{0};
                    for (std::size_t i = 0; i < len; ++i) acc += gyp[i] * xp[i];
                    gk[ki] += acc;
                }
            });
        });
    }

    /// 2×2 max pooling with stride 2; odd trailing rows/columns are dropped.
    /// Ties go to the first element in row-major window order.
    Var max_pool2(Var x) {
        const auto& xv = value(x);
        if (xv.rank() != 4 || xv.dim(2) < 2 || xv.dim(3) < 2)
            throw ShapeError("max_pool2", "input " + shape_string(xv.shape) + " is not [B,C,H>=2,W>=2]");
        const std::size_t planes = xv.dim(0) * xv.dim(1), h = xv.dim(2), w = xv.dim(3);
        const std::size_t oh = h / 2, ow = w / 2;
        TensorT y({xv.dim(0), xv.dim(1), oh, ow});
        std::vector<std::uint32_t> argmax(y.size());
        for (std::size_t p = 0; p < planes; ++p)
            for (std::size_t oy = 0; oy < oh; ++oy)
                for (std::size_t ox = 0; ox < ow; ++ox) {
                    std::size_t best = p * h * w + (2 * oy) * w + 2 * ox;
                    for (std::size_t dy = 0; dy < 2; ++dy)
                        for (std::size_t dx = 0; dx < 2; ++dx) {
                            const std::size_t idx = p * h * w + (2 * oy + dy) * w + 2 * ox + dx;
                            if (xv.values[idx] > xv.values[best]) best = idx;
                        }
                    const std::size_t o = (p * oh + oy) * ow + ox;
                    y.values[o] = xv.values[best];
                    argmax[o] = static_cast<std::uint32_t>(best);
                }
        return push(std::move(y), any_grad({x}), [x, argmax = std::move(argmax)](Tape& t, Var self) {
            const auto& gy = t.nodes_[self.id].grad.values;
            auto& gx = t.grad_ref(x).values;
            for (std::size_t o = 0; o < gy.size(); ++o) gx[argmax[o]] += gy[o];
        });
    }

    /// [B, ...] -> [B, prod(...)]
    Var flatten(Var x) {
        TensorT y = value(x);
        const std::size_t batch = y.shape.at(0);
        y.shape = {batch, batch ? y.size() / batch : 0};
        return push(std::move(y), any_grad({x}), [x](Tape& t, Var self) {
            const auto& gy = t.nodes_[self.id].grad.values;
            auto& gx = t.grad_ref(x).values;
            for (std::size_t i = 0; i < gy.size(); ++i) gx[i] += gy[i];
        });
    }

    /// Scalar node for a fused softmax+loss whose value and logit gradients
    /// were computed by the caller from the current values of `views`.
    Var fused_loss(std::span<const Var> views, LossResult<T> result) {
        if (result.logit_grads.size() != views.size())
            throw InvalidArgument("fused loss: one logit gradient per view required");
        std::vector<Var> inputs(views.begin(), views.end());
        for (std::size_t i = 0; i < inputs.size(); ++i)
            if (result.logit_grads[i].shape != value(inputs[i]).shape)
                throw ShapeError("loss view " + std::to_string(i), "gradient shape " +
                                                                       shape_string(result.logit_grads[i].shape) +
                                                                       " vs logits " +
                                                                       shape_string(value(inputs[i]).shape));
        const bool needs = std::any_of(inputs.begin(), inputs.end(), [&](Var v) { return requires_grad(v); });
        TensorT y({1}, std::vector<T>{result.value});
        return push(std::move(y), needs,
                    [inputs, grads = std::move(result.logit_grads)](Tape& t, Var self) {
                        const T seed = t.nodes_[self.id].grad.values[0];
                        for (std::size_t i = 0; i < inputs.size(); ++i) {
                            if (!t.requires_grad(inputs[i])) continue;
                            auto& gx = t.grad_ref(inputs[i]).values;
                            for (std::size_t j = 0; j < gx.size(); ++j) gx[j] += seed * grads[i].values[j];
                        }
                    });
    }

    /// Reverse sweep from a scalar root with seed gradient 1.
    void backward(Var root) {
        auto& r = nodes_.at(root.id);
        if (r.value.size() != 1) throw ShapeError("backward root", "expected a scalar, got " + shape_string(r.value.shape));
        if (!r.requires_grad) return;
        r.grad = TensorT(r.value.shape, T{1});
        for (std::size_t i = root.id + 1; i-- > 0;) {
            auto& n = nodes_[i];
            if (n.backward && !n.grad.empty()) n.backward(*this, Var{static_cast<std::uint32_t>(i)});
        }
    }

private:
    using Backward = std::function<void(Tape&, Var)>;

    struct Node {
        TensorT value;
        TensorT grad;
        bool requires_grad = false;
        Backward backward;
    };

    struct Geometry {
        std::size_t batch, in_ch, height, width, out_ch, kh, kw;
    };

    // Calls f(y_offset, x_offset, kernel_offset, run_length) for every
    // contiguous run of output columns that one kernel tap touches.
    template <class F>
    static void conv_visit(const Geometry& g, F&& f) {
        const auto ph = static_cast<std::ptrdiff_t>(g.kh / 2), pw = static_cast<std::ptrdiff_t>(g.kw / 2);
        const auto H = static_cast<std::ptrdiff_t>(g.height), W = static_cast<std::ptrdiff_t>(g.width);
        for (std::size_t n = 0; n < g.batch; ++n)
            for (std::size_t o = 0; o < g.out_ch; ++o)
                for (std::size_t c = 0; c < g.in_ch; ++c)
                    for (std::size_t ky = 0; ky < g.kh; ++ky)
                        for (std::size_t kx = 0; kx < g.kw; ++kx) {
                            const std::size_t ki = ((o * g.in_ch + c) * g.kh + ky) * g.kw + kx;
                            const std::ptrdiff_t dy = static_cast<std::ptrdiff_t>(ky) - ph;
                            const std::ptrdiff_t dx = static_cast<std::ptrdiff_t>(kx) - pw;
                            const std::ptrdiff_t x0 = std::max<std::ptrdiff_t>(0, -dx);
                            const std::ptrdiff_t x1 = std::min<std::ptrdiff_t>(W, W - dx);
                            if (x1 <= x0) continue;
                            for (std::ptrdiff_t oy = std::max<std::ptrdiff_t>(0, -dy);
                                 oy < std::min<std::ptrdiff_t>(H, H - dy); ++oy) {
                                const auto yi = static_cast<std::size_t>(
                                    ((static_cast<std::ptrdiff_t>(n * g.out_ch + o) * H + oy) * W) + x0);
                                const auto xi = static_cast<std::size_t>(
                                    ((static_cast<std::ptrdiff_t>(n * g.in_ch + c) * H + oy + dy) * W) + x0 + dx);
                                f(yi, xi, ki, static_cast<std::size_t>(x1 - x0));
                            }
                        }
    }

    bool any_grad(std::initializer_list<Var> vars) const {
        return std::any_of(vars.begin(), vars.end(), [&](Var v) { return requires_grad(v); });
    }

    Var push(TensorT value, bool requires_grad, Backward backward) {
        Node n;
        n.value = std::move(value);
        n.requires_grad = requires_grad;
        if (requires_grad) n.backward = std::move(backward);
        nodes_.push_back(std::move(n));
        return Var{static_cast<std::uint32_t>(nodes_.size() - 1)};
    }

    TensorT& grad_ref(Var v) {
        auto& n = nodes_[v.id];
        if (n.grad.empty()) n.grad = TensorT(n.value.shape);
        return n.grad;
    }

    std::vector<Node> nodes_;
};

} // namespace advprune
