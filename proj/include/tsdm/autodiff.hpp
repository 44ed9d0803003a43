#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "tsdm/parallel.hpp"
#include "tsdm/tensor.hpp"

namespace tsdm::ad {

// Reverse-mode tape over rank<=3 tensors. Nodes are appended in evaluation
// order, so the reverse pass is a single backward sweep over the node list.
// Gradients are allocated lazily and accumulated; an empty grad reads as zero.

template <typename T>
struct Node {
    Tensor<T> val;
    Tensor<T> grad;
    bool needs_grad = false;
    std::string label;
    std::function<void()> back;
};

template <typename T>
class Tape {
  public:
    using Ref = Node<T>*;

    explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}

    bool grad_enabled() const { return grad_enabled_; }

    Ref leaf(Tensor<T> v, bool needs_grad, std::string label = {}) {
        return make(std::move(v), grad_enabled_ && needs_grad, std::move(label), nullptr);
    }

    /// Seeds root (a scalar node) with gradient 1 and sweeps the tape in
    /// reverse evaluation order.
    void backward(Ref root) {
        if (!grad_enabled_) throw std::logic_error("tape: backward on a no-grad tape");
        if (root->val.size() != 1) throw std::invalid_argument("tape: backward root must be scalar");
        grad_of(root)(0) = T(1);
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
            Node<T>* n = it->get();
            if (n->back && n->needs_grad && !n->grad.empty()) n->back();
        }
    }

    const std::vector<std::unique_ptr<Node<T>>>& nodes() const { return nodes_; }

    // ---- ops ----

    Ref add(Ref a, Ref b) {
        if (!a->val.same_shape(b->val)) throw std::invalid_argument("add: shape mismatch");
        Tensor<T> out = a->val;
        {
            T* __restrict o = out.data();
            const T* __restrict bv = b->val.data();
            parallel_for(static_cast<std::int64_t>(out.size()), [&](std::int64_t lo, std::int64_t hi) {
                for (std::int64_t i = lo; i < hi; ++i) o[i] += bv[i];
            });
        }
        Ref n = make(std::move(out), a->needs_grad || b->needs_grad, "add", nullptr);
        if (n->needs_grad)
            n->back = [this, n, a, b] {
                const Tensor<T>& g = n->grad;
                if (a->needs_grad) {
                    Tensor<T>& ga = grad_of(a);
                    parallel_for(static_cast<std::int64_t>(g.size()), [&](std::int64_t lo, std::int64_t hi) {
                        for (std::int64_t i = lo; i < hi; ++i) ga.v[i] += g.v[i];
                    });
                }
                if (b->needs_grad) {
                    Tensor<T>& gb = grad_of(b);
                    parallel_for(static_cast<std::int64_t>(g.size()), [&](std::int64_t lo, std::int64_t hi) {
                        for (std::int64_t i = lo; i < hi; ++i) gb.v[i] += g.v[i];
                    });
                }
            };
        return n;
    }

    Ref silu(Ref x) {
        Tensor<T> out = x->val;
        parallel_for(static_cast<std::int64_t>(out.size()), [&](std::int64_t lo, std::int64_t hi) {
            for (std::int64_t i = lo; i < hi; ++i) out.v[i] *= sigmoid(out.v[i]);
        });
        Ref n = make(std::move(out), x->needs_grad, "silu", nullptr);
        if (n->needs_grad)
            n->back = [this, n, x] {
                Tensor<T>& gx = grad_of(x);
                const Tensor<T>& g = n->grad;
                parallel_for(static_cast<std::int64_t>(g.size()), [&](std::int64_t lo, std::int64_t hi) {
                    for (std::int64_t i = lo; i < hi; ++i) {
                        const T v = x->val.v[i];
                        const T s = sigmoid(v);
                        gx.v[i] += g.v[i] * s * (T(1) + v * (T(1) - s));
                    }
                });
            };
        return n;
    }

    Ref relu(Ref x) {
        Tensor<T> out = x->val;
        for (auto& v : out.v)
            if (v < T(0)) v = T(0);
        Ref n = make(std::move(out), x->needs_grad, "relu", nullptr);
        if (n->needs_grad)
            n->back = [this, n, x] {
                Tensor<T>& gx = grad_of(x);
                const Tensor<T>& g = n->grad;
                for (std::size_t i = 0; i < g.size(); ++i)
                    if (x->val.v[i] > T(0)) gx.v[i] += g.v[i];
            };
        return n;
    }

    /// 1D convolution: x (B, Ci, L), w (Co, Ci, K), b (Co) -> (B, Co, Lo)
    /// with Lo = (L + 2 pad - K) / stride + 1.
    Ref conv1d(Ref x, Ref w, Ref b, int stride, int pad, const std::string& label = "conv1d") {
        const Tensor<T>& xv = x->val;
        const Tensor<T>& wv = w->val;
        if (xv.rank != 3 || wv.rank != 3) throw std::invalid_argument(label + ": rank mismatch");
        const int B = xv.dims[0], Ci = xv.dims[1], L = xv.dims[2];
        const int Co = wv.dims[0], K = wv.dims[2];
        if (wv.dims[1] != Ci) throw std::invalid_argument(label + ": channel mismatch");
        if (b->val.rank != 1 || b->val.dims[0] != Co)
            throw std::invalid_argument(label + ": bias shape mismatch");
        if (L + 2 * pad < K) throw std::invalid_argument(label + ": input shorter than kernel");
        const int Lo = (L + 2 * pad - K) / stride + 1;

        Tensor<T> out = Tensor<T>::d3(B, Co, Lo);
        parallel_for(static_cast<std::int64_t>(B) * Co, [&](std::int64_t lo_i, std::int64_t hi_i) {
            for (std::int64_t bc = lo_i; bc < hi_i; ++bc) {
                const int bi = static_cast<int>(bc / Co), co = static_cast<int>(bc % Co);
                T* yr = out.row(bi, co);
                const T bias = b->val(co);
                for (int i = 0; i < Lo; ++i) yr[i] = bias;
                for (int ci = 0; ci < Ci; ++ci) {
                    const T* xr = xv.row(bi, ci);
                    for (int k = 0; k < K; ++k) {
                        const T wk = wv(co, ci, k);
                        const int off = k - pad;
                        // valid output range: 0 <= i*stride + off < L
                        const int i0 = off < 0 ? (-off + stride - 1) / stride : 0;
                        const int i1 = std::min<std::int64_t>(Lo, off < L ? (L - 1 - off) / stride + 1 : 0);
                        if (stride == 1) {
                            const T* xs = xr + off;
                            for (int i = i0; i < i1; ++i) yr[i] += wk * xs[i];
                        } else {
                            for (int i = i0; i < i1; ++i) yr[i] += wk * xr[i * stride + off];
                        }
                    }
                }
            }
        });

        Ref n = make(std::move(out), x->needs_grad || w->needs_grad || b->needs_grad, label, nullptr);
        if (n->needs_grad)
            n->back = [this, n, x, w, b, stride, pad, B, Ci, Co, L, Lo, K] {
                const Tensor<T>& g = n->grad;
                if (x->needs_grad) {
                    Tensor<T>& gx = grad_of(x);
                    parallel_for(static_cast<std::int64_t>(B) * Ci, [&](std::int64_t lo_i, std::int64_t hi_i) {
                        for (std::int64_t bc = lo_i; bc < hi_i; ++bc) {
                            const int bi = static_cast<int>(bc / Ci), ci = static_cast<int>(bc % Ci);
                            T* gxr = gx.row(bi, ci);
                            for (int co = 0; co < Co; ++co) {
                                const T* gr = g.row(bi, co);
                                for (int k = 0; k < K; ++k) {
                                    const T wk = w->val(co, ci, k);
                                    const int off = k - pad;
                                    const int i0 = off < 0 ? (-off + stride - 1) / stride : 0;
                                    const int i1 = std::min<std::int64_t>(Lo, off < L ? (L - 1 - off) / stride + 1 : 0);
                                    if (stride == 1) {
                                        T* gxs = gxr + off;
                                        for (int i = i0; i < i1; ++i) gxs[i] += wk * gr[i];
                                    } else {
                                        for (int i = i0; i < i1; ++i) gxr[i * stride + off] += wk * gr[i];
                                    }
                                }
                            }
                        }
                    });
                }
                if (w->needs_grad) {
                    Tensor<T>& gw = grad_of(w);
                    parallel_for(Co, [&](std::int64_t lo_i, std::int64_t hi_i) {
                        for (int co = static_cast<int>(lo_i); co < hi_i; ++co)
                            for (int ci = 0; ci < Ci; ++ci)
                                for (int k = 0; k < K; ++k) {
                                    const int off = k - pad;
                                    const int i0 = off < 0 ? (-off + stride - 1) / stride : 0;
                                    const int i1 = std::min<std::int64_t>(Lo, off < L ? (L - 1 - off) / stride + 1 : 0);
                                    T acc = T(0);
                                    for (int bi = 0; bi < B; ++bi) {
                                        const T* xr = x->val.row(bi, ci);
                                        const T* gr = g.row(bi, co);
                                        if (stride == 1) {
                                            const T* xs = xr + off;
                                            for (int i = i0; i < i1; ++i) acc += xs[i] * gr[i];
                                        } else {
                                            for (int i = i0; i < i1; ++i) acc += xr[i * stride + off] * gr[i];
                                        }
                                    }
                                    gw(co, ci, k) += acc;
                                }
                    });
                }
                if (b->needs_grad) {
                    Tensor<T>& gb = grad_of(b);
                    for (int co = 0; co < Co; ++co) {
                        T acc = T(0);
                        for (int bi = 0; bi < B; ++bi) {
                            const T* gr = g.row(bi, co);
                            for (int i = 0; i < Lo; ++i) acc += gr[i];
                        }
                        gb(co) += acc;
                    }
                }
            };
        return n;
    }

    /// x (B, Din), w (Dout, Din), b (Dout) -> (B, Dout)
    Ref linear(Ref x, Ref w, Ref b, const std::string& label = "linear") {
        const int B = x->val.dims[0], Di = x->val.dims[1];
        const int Do = w->val.dims[0];
        if (x->val.rank != 2 || w->val.rank != 2 || w->val.dims[1] != Di)
            throw std::invalid_argument(label + ": shape mismatch");
        if (b->val.rank != 1 || b->val.dims[0] != Do)
            throw std::invalid_argument(label + ": bias shape mismatch");
        Tensor<T> out = Tensor<T>::d2(B, Do);
        for (int bi = 0; bi < B; ++bi)
            for (int o = 0; o < Do; ++o) {
                T acc = b->val(o);
                for (int i = 0; i < Di; ++i) acc += x->val(bi, i) * w->val(o, i);
                out(bi, o) = acc;
            }
        Ref n = make(std::move(out), x->needs_grad || w->needs_grad || b->needs_grad, label, nullptr);
        if (n->needs_grad)
            n->back = [this, n, x, w, b, B, Di, Do] {
                const Tensor<T>& g = n->grad;
                if (x->needs_grad) {
                    Tensor<T>& gx = grad_of(x);
                    for (int bi = 0; bi < B; ++bi)
                        for (int i = 0; i < Di; ++i) {
                            T acc = T(0);
                            for (int o = 0; o < Do; ++o) acc += g(bi, o) * w->val(o, i);
                            gx(bi, i) += acc;
                        }
                }
                if (w->needs_grad) {
                    Tensor<T>& gw = grad_of(w);
                    for (int o = 0; o < Do; ++o)
                        for (int i = 0; i < Di; ++i) {
                            T acc = T(0);
                            for (int bi = 0; bi < B; ++bi) acc += g(bi, o) * x->val(bi, i);
                            gw(o, i) += acc;
                        }
                }
                if (b->needs_grad) {
                    Tensor<T>& gb = grad_of(b);
                    for (int o = 0; o < Do; ++o) {
                        T acc = T(0);
                        for (int bi = 0; bi < B; ++bi) acc += g(bi, o);
                        gb(o) += acc;
                    }
                }
            };
        return n;
    }

    /// Group normalization over (channels-in-group x L) per item, with
    /// per-channel scale and offset. groups must divide the channel count.
    Ref group_norm(Ref x, Ref gamma, Ref beta, int groups, const std::string& label = "group_norm") {
        const Tensor<T>& xv = x->val;
        if (xv.rank != 3) throw std::invalid_argument(label + ": expects (B, C, L)");
        const int B = xv.dims[0], C = xv.dims[1], L = xv.dims[2];
        if (groups <= 0 || C % groups != 0)
            throw std::invalid_argument(label + ": groups must divide channels");
        if (gamma->val.dims[0] != C || beta->val.dims[0] != C)
            throw std::invalid_argument(label + ": scale/offset shape mismatch");
        const int Cg = C / groups;
        const T eps = T(1e-5);

        auto mean_t = std::make_shared<Tensor<T>>(Tensor<T>::d2(B, groups));
        auto inv_t = std::make_shared<Tensor<T>>(Tensor<T>::d2(B, groups));
        Tensor<T> out = Tensor<T>::d3(B, C, L);
        const std::size_t ng = static_cast<std::size_t>(Cg) * L;
        parallel_for(static_cast<std::int64_t>(B) * groups, [&](std::int64_t lo_i, std::int64_t hi_i) {
            for (std::int64_t bg = lo_i; bg < hi_i; ++bg) {
                const int bi = static_cast<int>(bg / groups), gi = static_cast<int>(bg % groups);
                T sum = T(0), sq = T(0);
                for (int c = gi * Cg; c < (gi + 1) * Cg; ++c) {
                    const T* xr = xv.row(bi, c);
                    for (int i = 0; i < L; ++i) {
                        sum += xr[i];
                        sq += xr[i] * xr[i];
                    }
                }
                const T mu = sum / static_cast<T>(ng);
                T var = sq / static_cast<T>(ng) - mu * mu;
                if (var < T(0)) var = T(0);
                const T inv = T(1) / std::sqrt(var + eps);
                (*mean_t)(bi, gi) = mu;
                (*inv_t)(bi, gi) = inv;
                for (int c = gi * Cg; c < (gi + 1) * Cg; ++c) {
                    const T* xr = xv.row(bi, c);
                    T* yr = out.row(bi, c);
                    const T gm = gamma->val(c), bt = beta->val(c);
                    for (int i = 0; i < L; ++i) yr[i] = (xr[i] - mu) * inv * gm + bt;
                }
            }
        });

        Ref n = make(std::move(out), x->needs_grad || gamma->needs_grad || beta->needs_grad, label,
                     nullptr);
        if (n->needs_grad)
            n->back = [this, n, x, gamma, beta, mean_t, inv_t, B, C, L, Cg, groups] {
                const Tensor<T>& g = n->grad;
                const std::size_t ng = static_cast<std::size_t>(Cg) * L;
                if (x->needs_grad) {
                    Tensor<T>& gx = grad_of(x);
                    parallel_for(static_cast<std::int64_t>(B) * groups,
                                 [&](std::int64_t lo_i, std::int64_t hi_i) {
                        for (std::int64_t bg = lo_i; bg < hi_i; ++bg) {
                            const int bi = static_cast<int>(bg / groups);
                            const int gi = static_cast<int>(bg % groups);
                            const T mu = (*mean_t)(bi, gi);
                            const T inv = (*inv_t)(bi, gi);
                            // dxhat = g * gamma; gx = inv*(dxhat - mean(dxhat) - xhat*mean(dxhat*xhat))
                            T s1 = T(0), s2 = T(0);
                            for (int c = gi * Cg; c < (gi + 1) * Cg; ++c) {
                                const T* xr = x->val.row(bi, c);
                                const T* gr = g.row(bi, c);
                                const T gm = gamma->val(c);
                                for (int i = 0; i < L; ++i) {
                                    const T dxh = gr[i] * gm;
                                    s1 += dxh;
                                    s2 += dxh * (xr[i] - mu) * inv;
                                }
                            }
                            const T m1 = s1 / static_cast<T>(ng);
                            const T m2 = s2 / static_cast<T>(ng);
                            for (int c = gi * Cg; c < (gi + 1) * Cg; ++c) {
                                const T* xr = x->val.row(bi, c);
                                const T* gr = g.row(bi, c);
                                T* gxr = gx.row(bi, c);
                                const T gm = gamma->val(c);
                                for (int i = 0; i < L; ++i) {
                                    const T xh = (xr[i] - mu) * inv;
                                    gxr[i] += inv * (gr[i] * gm - m1 - xh * m2);
                                }
                            }
                        }
                    });
                }
                if (gamma->needs_grad) {
                    Tensor<T>& gg = grad_of(gamma);
                    parallel_for(C, [&](std::int64_t lo_i, std::int64_t hi_i) {
                        for (int c = static_cast<int>(lo_i); c < hi_i; ++c) {
                            const int gi = c / Cg;
                            T acc = T(0);
                            for (int bi = 0; bi < B; ++bi) {
                                const T mu = (*mean_t)(bi, gi);
                                const T inv = (*inv_t)(bi, gi);
                                const T* xr = x->val.row(bi, c);
                                const T* gr = g.row(bi, c);
                                for (int i = 0; i < L; ++i) acc += gr[i] * (xr[i] - mu) * inv;
                            }
                            gg(c) += acc;
                        }
                    });
                }
                if (beta->needs_grad) {
                    Tensor<T>& gb = grad_of(beta);
                    for (int c = 0; c < C; ++c) {
                        T acc = T(0);
                        for (int bi = 0; bi < B; ++bi) {
                            const T* gr = g.row(bi, c);
                            for (int i = 0; i < L; ++i) acc += gr[i];
                        }
                        gb(c) += acc;
                    }
                }
            };
        return n;
    }

    /// Adds a per-(item, channel) bias across the length axis:
    /// y(b, c, l) = x(b, c, l) + e(b, c).
    Ref add_channel_bias(Ref x, Ref e) {
        const int B = x->val.dims[0], C = x->val.dims[1], L = x->val.dims[2];
        if (x->val.rank != 3 || e->val.rank != 2 || e->val.dims[0] != B || e->val.dims[1] != C)
            throw std::invalid_argument("add_channel_bias: shape mismatch");
        Tensor<T> out = x->val;
        parallel_for(static_cast<std::int64_t>(B) * C, [&](std::int64_t lo_i, std::int64_t hi_i) {
            for (std::int64_t bc = lo_i; bc < hi_i; ++bc) {
                const int bi = static_cast<int>(bc / C), c = static_cast<int>(bc % C);
                T* yr = out.row(bi, c);
                const T ev = e->val(bi, c);
                for (int i = 0; i < L; ++i) yr[i] += ev;
            }
        });
        Ref n = make(std::move(out), x->needs_grad || e->needs_grad, "add_channel_bias", nullptr);
        if (n->needs_grad)
            n->back = [this, n, x, e, B, C, L] {
                const Tensor<T>& g = n->grad;
                if (x->needs_grad) {
                    Tensor<T>& gx = grad_of(x);
                    parallel_for(static_cast<std::int64_t>(g.size()), [&](std::int64_t lo, std::int64_t hi) {
                        for (std::int64_t i = lo; i < hi; ++i) gx.v[i] += g.v[i];
                    });
                }
                if (e->needs_grad) {
                    Tensor<T>& ge = grad_of(e);
                    for (int bi = 0; bi < B; ++bi)
                        for (int c = 0; c < C; ++c) {
                            const T* gr = g.row(bi, c);
                            T acc = T(0);
                            for (int i = 0; i < L; ++i) acc += gr[i];
                            ge(bi, c) += acc;
                        }
                }
            };
        return n;
    }

    Ref concat_channels(Ref a, Ref b) {
        const int B = a->val.dims[0], Ca = a->val.dims[1], L = a->val.dims[2];
        const int Cb = b->val.dims[1];
        if (a->val.rank != 3 || b->val.rank != 3 || b->val.dims[0] != B || b->val.dims[2] != L)
            throw std::invalid_argument("concat_channels: shape mismatch");
        Tensor<T> out = Tensor<T>::d3(B, Ca + Cb, L);
        for (int bi = 0; bi < B; ++bi) {
            for (int c = 0; c < Ca; ++c)
                std::copy_n(a->val.row(bi, c), L, out.row(bi, c));
            for (int c = 0; c < Cb; ++c)
                std::copy_n(b->val.row(bi, c), L, out.row(bi, Ca + c));
        }
        Ref n = make(std::move(out), a->needs_grad || b->needs_grad, "concat", nullptr);
        if (n->needs_grad)
            n->back = [this, n, a, b, B, Ca, Cb, L] {
                const Tensor<T>& g = n->grad;
                if (a->needs_grad) {
                    Tensor<T>& ga = grad_of(a);
                    parallel_for(static_cast<std::int64_t>(B) * Ca, [&](std::int64_t lo_i, std::int64_t hi_i) {
                        for (std::int64_t bc = lo_i; bc < hi_i; ++bc) {
                            const int bi = static_cast<int>(bc / Ca), c = static_cast<int>(bc % Ca);
                            const T* gr = g.row(bi, c);
                            T* gar = ga.row(bi, c);
                            for (int i = 0; i < L; ++i) gar[i] += gr[i];
                        }
                    });
                }
                if (b->needs_grad) {
                    Tensor<T>& gb = grad_of(b);
                    parallel_for(static_cast<std::int64_t>(B) * Cb, [&](std::int64_t lo_i, std::int64_t hi_i) {
                        for (std::int64_t bc = lo_i; bc < hi_i; ++bc) {
                            const int bi = static_cast<int>(bc / Cb), c = static_cast<int>(bc % Cb);
                            const T* gr = g.row(bi, Ca + c);
                            T* gbr = gb.row(bi, c);
                            for (int i = 0; i < L; ++i) gbr[i] += gr[i];
                        }
                    });
                }
            };
        return n;
    }

    /// Nearest-neighbor x2 upsampling along the length axis.
    Ref upsample_nearest2(Ref x) {
        const int B = x->val.dims[0], C = x->val.dims[1], L = x->val.dims[2];
        if (x->val.rank != 3) throw std::invalid_argument("upsample: expects (B, C, L)");
        Tensor<T> out = Tensor<T>::d3(B, C, 2 * L);
        for (int bi = 0; bi < B; ++bi)
            for (int c = 0; c < C; ++c) {
                const T* xr = x->val.row(bi, c);
                T* yr = out.row(bi, c);
                for (int i = 0; i < L; ++i) {
                    yr[2 * i] = xr[i];
                    yr[2 * i + 1] = xr[i];
                }
            }
        Ref n = make(std::move(out), x->needs_grad, "upsample", nullptr);
        if (n->needs_grad)
            n->back = [this, n, x, B, C, L] {
                Tensor<T>& gx = grad_of(x);
                const Tensor<T>& g = n->grad;
                for (int bi = 0; bi < B; ++bi)
                    for (int c = 0; c < C; ++c) {
                        const T* gr = g.row(bi, c);
                        T* gxr = gx.row(bi, c);
                        for (int i = 0; i < L; ++i) gxr[i] += gr[2 * i] + gr[2 * i + 1];
                    }
            };
        return n;
    }

    /// Single-head self-attention over the length axis. q, k, v: (B, C, L);
    /// scores scaled by 1/sqrt(C), softmax over the key axis. When attn_probe
    /// is given the (B, L, L) attention weights are copied out for inspection.
    Ref attention(Ref q, Ref k, Ref v, Tensor<T>* attn_probe = nullptr) {
        const int B = q->val.dims[0], C = q->val.dims[1], L = q->val.dims[2];
        if (q->val.rank != 3 || !q->val.same_shape(k->val) || !q->val.same_shape(v->val))
            throw std::invalid_argument("attention: q/k/v shape mismatch");
        const T scale = T(1) / std::sqrt(static_cast<T>(C));

        auto attn = std::make_shared<Tensor<T>>(Tensor<T>::d3(B, L, L));
        Tensor<T> out = Tensor<T>::d3(B, C, L);
        parallel_for(B, [&](std::int64_t lo_i, std::int64_t hi_i) {
            for (int bi = static_cast<int>(lo_i); bi < hi_i; ++bi) {
                // scores(i, j) = scale * sum_c q(c, i) k(c, j)
                for (int i = 0; i < L; ++i) {
                    T* sr = attn->row(bi, i);
                    for (int j = 0; j < L; ++j) sr[j] = T(0);
                }
                for (int c = 0; c < C; ++c) {
                    const T* qr = q->val.row(bi, c);
                    const T* kr = k->val.row(bi, c);
                    for (int i = 0; i < L; ++i) {
                        const T qv = qr[i] * scale;
                        T* sr = attn->row(bi, i);
                        for (int j = 0; j < L; ++j) sr[j] += qv * kr[j];
                    }
                }
                for (int i = 0; i < L; ++i) {
                    T* sr = attn->row(bi, i);
                    T mx = sr[0];
                    for (int j = 1; j < L; ++j) mx = std::max(mx, sr[j]);
                    T sum = T(0);
                    for (int j = 0; j < L; ++j) {
                        sr[j] = std::exp(sr[j] - mx);
                        sum += sr[j];
                    }
                    const T inv = T(1) / sum;
                    for (int j = 0; j < L; ++j) sr[j] *= inv;
                }
                for (int c = 0; c < C; ++c) {
                    const T* vr = v->val.row(bi, c);
                    T* yr = out.row(bi, c);
                    for (int i = 0; i < L; ++i) {
                        const T* ar = attn->row(bi, i);
                        T acc = T(0);
                        for (int j = 0; j < L; ++j) acc += ar[j] * vr[j];
                        yr[i] = acc;
                    }
                }
            }
        });
        if (attn_probe) *attn_probe = *attn;

        Ref n = make(std::move(out), q->needs_grad || k->needs_grad || v->needs_grad, "attention",
                     nullptr);
        if (n->needs_grad)
            n->back = [this, n, q, k, v, attn, B, C, L, scale] {
                const Tensor<T>& g = n->grad;
                Tensor<T>* gq = q->needs_grad ? &grad_of(q) : nullptr;
                Tensor<T>* gk = k->needs_grad ? &grad_of(k) : nullptr;
                Tensor<T>* gv = v->needs_grad ? &grad_of(v) : nullptr;
                parallel_for(B, [&](std::int64_t lo_i, std::int64_t hi_i) {
                    for (int bi = static_cast<int>(lo_i); bi < hi_i; ++bi) {
                        // d attn(i, j) = sum_c g(c, i) v(c, j)
                        Tensor<T> ds = Tensor<T>::d2(L, L);
                        for (int c = 0; c < C; ++c) {
                            const T* gr = g.row(bi, c);
                            const T* vr = v->val.row(bi, c);
                            for (int i = 0; i < L; ++i) {
                                const T gi = gr[i];
                                T* dr = ds.data() + static_cast<std::size_t>(i) * L;
                                for (int j = 0; j < L; ++j) dr[j] += gi * vr[j];
                            }
                        }
                        if (gv) {
                            // dv(c, j) = sum_i attn(i, j) g(c, i)
                            for (int c = 0; c < C; ++c) {
                                const T* gr = g.row(bi, c);
                                T* gvr = gv->row(bi, c);
                                for (int i = 0; i < L; ++i) {
                                    const T gi = gr[i];
                                    const T* ar = attn->row(bi, i);
                                    for (int j = 0; j < L; ++j) gvr[j] += gi * ar[j];
                                }
                            }
                        }
                        // softmax backward: ds(i,j) = a(i,j) * (da(i,j) - sum_j' a(i,j') da(i,j'))
                        for (int i = 0; i < L; ++i) {
                            const T* ar = attn->row(bi, i);
                            T* dr = ds.data() + static_cast<std::size_t>(i) * L;
                            T dot = T(0);
                            for (int j = 0; j < L; ++j) dot += ar[j] * dr[j];
                            for (int j = 0; j < L; ++j) dr[j] = ar[j] * (dr[j] - dot);
                        }
                        // dq(c, i) = scale * sum_j ds(i, j) k(c, j)
                        if (gq)
                            for (int c = 0; c < C; ++c) {
                                const T* kr = k->val.row(bi, c);
                                T* gqr = gq->row(bi, c);
                                for (int i = 0; i < L; ++i) {
                                    const T* dr = ds.data() + static_cast<std::size_t>(i) * L;
                                    T acc = T(0);
                                    for (int j = 0; j < L; ++j) acc += dr[j] * kr[j];
                                    gqr[i] += scale * acc;
                                }
                            }
                        // dk(c, j) = scale * sum_i ds(i, j) q(c, i)
                        if (gk)
                            for (int c = 0; c < C; ++c) {
                                const T* qr = q->val.row(bi, c);
                                T* gkr = gk->row(bi, c);
                                for (int i = 0; i < L; ++i) {
                                    const T qs = qr[i] * scale;
                                    const T* dr = ds.data() + static_cast<std::size_t>(i) * L;
                                    for (int j = 0; j < L; ++j) gkr[j] += qs * dr[j];
                                }
                            }
                    }
                });
            };
        return n;
    }

    /// Mean over the length axis: (B, C, L) -> (B, C).
    Ref mean_pool_length(Ref x) {
        const int B = x->val.dims[0], C = x->val.dims[1], L = x->val.dims[2];
        if (x->val.rank != 3) throw std::invalid_argument("mean_pool: expects (B, C, L)");
        Tensor<T> out = Tensor<T>::d2(B, C);
        for (int bi = 0; bi < B; ++bi)
            for (int c = 0; c < C; ++c) {
                const T* xr = x->val.row(bi, c);
                T acc = T(0);
                for (int i = 0; i < L; ++i) acc += xr[i];
                out(bi, c) = acc / static_cast<T>(L);
            }
        Ref n = make(std::move(out), x->needs_grad, "mean_pool", nullptr);
        if (n->needs_grad)
            n->back = [this, n, x, B, C, L] {
                Tensor<T>& gx = grad_of(x);
                const Tensor<T>& g = n->grad;
                for (int bi = 0; bi < B; ++bi)
                    for (int c = 0; c < C; ++c) {
                        const T gv = g(bi, c) / static_cast<T>(L);
                        T* gxr = gx.row(bi, c);
                        for (int i = 0; i < L; ++i) gxr[i] += gv;
                    }
            };
        return n;
    }

    /// Mean squared error against a constant target, reduced over all
    /// elements; returns a scalar node.
    Ref mse_against(Ref pred, const Tensor<T>& target) {
        if (!pred->val.same_shape(target)) throw std::invalid_argument("mse: shape mismatch");
        const std::size_t n_el = pred->val.size();
        double acc = 0.0;
        for (std::size_t i = 0; i < n_el; ++i) {
            const double d = static_cast<double>(pred->val.v[i]) - static_cast<double>(target.v[i]);
            acc += d * d;
        }
        Tensor<T> out = Tensor<T>::d1(1);
        out(0) = static_cast<T>(acc / static_cast<double>(n_el));
        Ref n = make(std::move(out), pred->needs_grad, "mse", nullptr);
        if (n->needs_grad) {
            auto tgt = std::make_shared<Tensor<T>>(target);
            n->back = [this, n, pred, tgt, n_el] {
                Tensor<T>& gp = grad_of(pred);
                const T g0 = n->grad(0);
                const T c = g0 * T(2) / static_cast<T>(n_el);
                for (std::size_t i = 0; i < n_el; ++i)
                    gp.v[i] += c * (pred->val.v[i] - tgt->v[i]);
            };
        }
        return n;
    }

    /// Softmax cross-entropy with integer class labels, mean over the batch;
    /// returns a scalar node.
    Ref softmax_cross_entropy(Ref logits, const std::vector<int>& labels) {
        const int B = logits->val.dims[0], K = logits->val.dims[1];
        if (logits->val.rank != 2 || static_cast<int>(labels.size()) != B)
            throw std::invalid_argument("cross_entropy: shape mismatch");
        for (int lb : labels)
            if (lb < 0 || lb >= K) throw std::invalid_argument("cross_entropy: label out of range");
        auto probs = std::make_shared<Tensor<T>>(Tensor<T>::d2(B, K));
        double loss = 0.0;
        for (int bi = 0; bi < B; ++bi) {
            T mx = logits->val(bi, 0);
            for (int c = 1; c < K; ++c) mx = std::max(mx, logits->val(bi, c));
            double sum = 0.0;
            for (int c = 0; c < K; ++c) {
                const double e = std::exp(static_cast<double>(logits->val(bi, c) - mx));
                (*probs)(bi, c) = static_cast<T>(e);
                sum += e;
            }
            for (int c = 0; c < K; ++c) (*probs)(bi, c) = static_cast<T>((*probs)(bi, c) / sum);
            loss -= std::log(std::max(static_cast<double>((*probs)(bi, labels[bi])), 1e-300));
        }
        Tensor<T> out = Tensor<T>::d1(1);
        out(0) = static_cast<T>(loss / B);
        Ref n = make(std::move(out), logits->needs_grad, "cross_entropy", nullptr);
        if (n->needs_grad) {
            auto labs = std::make_shared<std::vector<int>>(labels);
            n->back = [this, n, logits, probs, labs, B, K] {
                Tensor<T>& gl = grad_of(logits);
                const T g0 = n->grad(0);
                for (int bi = 0; bi < B; ++bi)
                    for (int c = 0; c < K; ++c) {
                        const T ind = c == (*labs)[bi] ? T(1) : T(0);
                        gl(bi, c) += g0 * ((*probs)(bi, c) - ind) / static_cast<T>(B);
                    }
            };
        }
        return n;
    }

    Tensor<T>& grad_of(Ref n) {
        if (n->grad.empty()) n->grad = zeros_like(n->val);
        return n->grad;
    }

  private:
    static T sigmoid(T v) { return T(1) / (T(1) + std::exp(-v)); }

    Ref make(Tensor<T> v, bool needs, std::string label, std::function<void()> back) {
        nodes_.push_back(std::make_unique<Node<T>>());
        Node<T>* n = nodes_.back().get();
        n->val = std::move(v);
        n->needs_grad = grad_enabled_ && needs;
        n->label = std::move(label);
        n->back = std::move(back);
        return n;
    }

    std::vector<std::unique_ptr<Node<T>>> nodes_;
    bool grad_enabled_;
};

}  // namespace tsdm::ad
