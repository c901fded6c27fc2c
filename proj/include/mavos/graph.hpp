#pragma once

#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <utility>
#include <vector>

#include "mavos/errors.hpp"
#include "mavos/kernels.hpp"
#include "mavos/tensor.hpp"

namespace mavos {

// Handle to a node in a Graph. Plain value type, cheap to copy, invalid until
// assigned from a graph operation.
struct Var {
    int32_t id = -1;
    bool valid() const { return id >= 0; }
};

namespace detail {

inline double gelu_tanh(double x) {
    const double c = 0.7978845608028654;   // sqrt(2/pi)
    const double a = 0.044715;
    return 0.5 * x * (1.0 + std::tanh(c * (x + a * x * x * x)));
}

inline double gelu_tanh_grad(double x) {
    const double c = 0.7978845608028654;
    const double a = 0.044715;
    double u = c * (x + a * x * x * x);
    double t = std::tanh(u);
    double du = c * (1.0 + 3.0 * a * x * x);
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
}

template <typename T>
T stable_sigmoid(T x) {
    if (x >= T(0)) {
        return T(1) / (T(1) + std::exp(-x));
    }
    T e = std::exp(x);
    return e / (T(1) + e);
}

}  // namespace detail

// Reverse-mode autodiff tape. Operations compute values eagerly through the
// kernel layer and record a backward closure; backward() replays closures in
// reverse creation order. Nodes that no trainable leaf feeds into skip the
// closure entirely, so inference graphs carry no backward machinery.
//
// The graph also counts work as it goes: multiply-accumulate operations and
// softmax invocations. Both counters are deterministic functions of the op
// sequence and shapes, which the attention-reuse tests rely on.
template <typename T>
class Graph {
  public:
    // Process-unique tag. Lets long-lived state detect that it is looking at
    // a different graph than the one its cached handles belong to, even when
    // a new graph reuses the old one's address.
    uint64_t uid() const { return uid_; }

    Var input(Tensor<T> value, bool requires_grad = false) {
        nodes_.emplace_back();
        Node& n = nodes_.back();
        n.value = std::move(value);
        n.needs_grad = requires_grad;
        return Var{static_cast<int32_t>(nodes_.size() - 1)};
    }

    const Tensor<T>& val(Var v) const { return node(v).value; }

    // Gradient of the scalar objective w.r.t. v. Zero tensor if backward has
    // not touched the node.
    const Tensor<T>& grad(Var v) { return grad_ref(check(v)); }

    bool requires_grad(Var v) const { return node(v).needs_grad; }

    size_t size() const { return nodes_.size(); }
    size_t softmax_calls() const { return softmax_calls_; }
    double macs() const { return macs_; }
    void reset_counters() {
        softmax_calls_ = 0;
        macs_ = 0.0;
    }

    // Backpropagate from a scalar root (numel == 1), seeding with 1.
    void backward(Var root) {
        int32_t rid = check(root);
        if (nodes_[rid].value.numel() != 1) {
            throw UsageError("backward root must be scalar, got shape " +
                             nodes_[rid].value.shape_str());
        }
        if (!nodes_[rid].needs_grad) {
            throw UsageError("backward root does not depend on any trainable leaf");
        }
        grad_ref(rid)[0] += T(1);
        for (int32_t id = rid; id >= 0; --id) {
            Node& n = nodes_[id];
            if (n.needs_grad && n.grad_alloc && n.backprop) n.backprop(*this);
        }
    }

    // ---- elementwise and linear algebra ----

    Var add(Var a, Var b) {
        const Tensor<T>& av = val(a);
        const Tensor<T>& bv = val(b);
        require_same_shape(av, bv, "add");
        Tensor<T> out(av.shape());
        kern::add(out.ptr(), av.ptr(), bv.ptr(), out.numel());
        return push(std::move(out), {a, b}, [a, b](Graph& g, int32_t self) {
            const Tensor<T>& gr = g.nodes_[self].grad;
            g.accum_if(a, [&](Tensor<T>& d) { kern::axpy(d.ptr(), T(1), gr.ptr(), gr.numel()); });
            g.accum_if(b, [&](Tensor<T>& d) { kern::axpy(d.ptr(), T(1), gr.ptr(), gr.numel()); });
        });
    }

    Var sub(Var a, Var b) {
        const Tensor<T>& av = val(a);
        const Tensor<T>& bv = val(b);
        require_same_shape(av, bv, "sub");
        Tensor<T> out = av;
        kern::axpy(out.ptr(), T(-1), bv.ptr(), out.numel());
        return push(std::move(out), {a, b}, [a, b](Graph& g, int32_t self) {
            const Tensor<T>& gr = g.nodes_[self].grad;
            g.accum_if(a, [&](Tensor<T>& d) { kern::axpy(d.ptr(), T(1), gr.ptr(), gr.numel()); });
            g.accum_if(b, [&](Tensor<T>& d) { kern::axpy(d.ptr(), T(-1), gr.ptr(), gr.numel()); });
        });
    }

    Var mul(Var a, Var b) {
        const Tensor<T>& av = val(a);
        const Tensor<T>& bv = val(b);
        require_same_shape(av, bv, "mul");
        Tensor<T> out(av.shape());
        kern::mul(out.ptr(), av.ptr(), bv.ptr(), out.numel());
        macs_ += static_cast<double>(out.numel());
        return push(std::move(out), {a, b}, [a, b](Graph& g, int32_t self) {
            const Tensor<T>& gr = g.nodes_[self].grad;
            g.accum_if(a, [&](Tensor<T>& d) {
                kern::vmadd(d.ptr(), gr.ptr(), g.val(b).ptr(), gr.numel());
            });
            g.accum_if(b, [&](Tensor<T>& d) {
                kern::vmadd(d.ptr(), gr.ptr(), g.val(a).ptr(), gr.numel());
            });
        });
    }

    Var scale(Var a, T c) {
        Tensor<T> out = val(a);
        kern::scal(out.ptr(), c, out.numel());
        return push(std::move(out), {a}, [a, c](Graph& g, int32_t self) {
            const Tensor<T>& gr = g.nodes_[self].grad;
            g.accum_if(a, [&](Tensor<T>& d) { kern::axpy(d.ptr(), c, gr.ptr(), gr.numel()); });
        });
    }

    // C = A[M,K] * B[K,N]
    Var matmul(Var a, Var b) {
        const Tensor<T>& av = val(a);
        const Tensor<T>& bv = val(b);
        require_rank2(av, "matmul lhs");
        require_rank2(bv, "matmul rhs");
        int m = av.dim(0), k = av.dim(1), n = bv.dim(1);
        if (bv.dim(0) != k) {
            throw DimensionError("matmul: inner dims differ, " + av.shape_str() + " vs " +
                                 bv.shape_str());
        }
        Tensor<T> out({m, n});
        kern::matmul_nn(out.ptr(), av.ptr(), bv.ptr(), m, k, n);
        macs_ += static_cast<double>(m) * k * n;
        return push(std::move(out), {a, b}, [a, b, m, k, n](Graph& g, int32_t self) {
            const Tensor<T>& gr = g.nodes_[self].grad;
            g.accum_if(a, [&](Tensor<T>& d) {
                Tensor<T> tmp({m, k});
                kern::matmul_nt(tmp.ptr(), gr.ptr(), g.val(b).ptr(), m, n, k);
                kern::axpy(d.ptr(), T(1), tmp.ptr(), tmp.numel());
            });
            g.accum_if(b, [&](Tensor<T>& d) {
                Tensor<T> tmp({k, n});
                kern::matmul_tn(tmp.ptr(), g.val(a).ptr(), gr.ptr(), m, k, n);
                kern::axpy(d.ptr(), T(1), tmp.ptr(), tmp.numel());
            });
        });
    }

    // C = A[M,K] * B[N,K]^T
    Var matmul_nt(Var a, Var b) {
        const Tensor<T>& av = val(a);
        const Tensor<T>& bv = val(b);
        require_rank2(av, "matmul_nt lhs");
        require_rank2(bv, "matmul_nt rhs");
        int m = av.dim(0), k = av.dim(1), n = bv.dim(0);
        if (bv.dim(1) != k) {
            throw DimensionError("matmul_nt: inner dims differ, " + av.shape_str() + " vs " +
                                 bv.shape_str());
        }
        Tensor<T> out({m, n});
        kern::matmul_nt(out.ptr(), av.ptr(), bv.ptr(), m, k, n);
        macs_ += static_cast<double>(m) * k * n;
        return push(std::move(out), {a, b}, [a, b, m, k, n](Graph& g, int32_t self) {
            const Tensor<T>& gr = g.nodes_[self].grad;
            g.accum_if(a, [&](Tensor<T>& d) {
                Tensor<T> tmp({m, k});
                kern::matmul_nn(tmp.ptr(), gr.ptr(), g.val(b).ptr(), m, n, k);
                kern::axpy(d.ptr(), T(1), tmp.ptr(), tmp.numel());
            });
            g.accum_if(b, [&](Tensor<T>& d) {
                Tensor<T> tmp({n, k});
                kern::matmul_tn(tmp.ptr(), gr.ptr(), g.val(a).ptr(), m, n, k);
                kern::axpy(d.ptr(), T(1), tmp.ptr(), tmp.numel());
            });
        });
    }

    // x[..., K] * w[K, N] + b[N]. Leading dims pass through; pass an invalid
    // Var to skip the bias.
    Var linear(Var x, Var w, Var b) {
        const Tensor<T>& xv = val(x);
        const Tensor<T>& wv = val(w);
        require_rank2(wv, "linear weight");
        int k = wv.dim(0), n = wv.dim(1);
        if (xv.cols() != k) {
            throw DimensionError("linear: input features " + xv.shape_str() +
                                 " do not match weight " + wv.shape_str());
        }
        size_t rows = static_cast<size_t>(xv.rows());
        std::vector<int> oshape = xv.shape();
        oshape.back() = n;
        Tensor<T> out(oshape);
        kern::matmul_nn(out.ptr(), xv.ptr(), wv.ptr(), rows, k, n);
        if (b.valid()) {
            const Tensor<T>& bv = val(b);
            if (bv.numel() != n) {
                throw DimensionError("linear: bias " + bv.shape_str() + " does not match weight " +
                                     wv.shape_str());
            }
            for (size_t r = 0; r < rows; ++r) {
                kern::axpy(out.ptr() + r * n, T(1), bv.ptr(), n);
            }
        }
        macs_ += static_cast<double>(rows) * k * n;
        return push(std::move(out), {x, w, b}, [x, w, b, rows, k, n](Graph& g, int32_t self) {
            const Tensor<T>& gr = g.nodes_[self].grad;
            g.accum_if(x, [&](Tensor<T>& d) {
                Tensor<T> tmp(d.shape());
                kern::matmul_nt(tmp.ptr(), gr.ptr(), g.val(w).ptr(), rows, n, k);
                kern::axpy(d.ptr(), T(1), tmp.ptr(), tmp.numel());
            });
            g.accum_if(w, [&](Tensor<T>& d) {
                Tensor<T> tmp({k, n});
                kern::matmul_tn(tmp.ptr(), g.val(x).ptr(), gr.ptr(), rows, k, n);
                kern::axpy(d.ptr(), T(1), tmp.ptr(), tmp.numel());
            });
            if (b.valid()) {
                g.accum_if(b, [&](Tensor<T>& d) {
                    for (size_t r = 0; r < rows; ++r) {
                        kern::axpy(d.ptr(), T(1), gr.ptr() + r * n, n);
                    }
                });
            }
        });
    }

    // ---- nonlinearities ----

    // Row-wise softmax over the last axis of a rank-2 tensor, with max
    // subtraction. Non-finite input raises NumericError.
    Var softmax_rows(Var x) {
        const Tensor<T>& xv = val(x);
        require_rank2(xv, "softmax");
        int m = xv.dim(0), n = xv.dim(1);
        for (int64_t i = 0; i < xv.numel(); ++i) {
            if (!std::isfinite(static_cast<double>(xv[i]))) {
                throw NumericError("softmax input contains a non-finite value at row " +
                                   std::to_string(i / n) + ", col " + std::to_string(i % n));
            }
        }
        Tensor<T> out({m, n});
        for (int r = 0; r < m; ++r) {
            const T* row = xv.ptr() + static_cast<size_t>(r) * n;
            T* orow = out.ptr() + static_cast<size_t>(r) * n;
            T mx = kern::max(row, n);
            for (int j = 0; j < n; ++j) orow[j] = std::exp(row[j] - mx);
            T s = kern::sum(orow, n);
            kern::scal(orow, T(1) / s, n);
        }
        softmax_calls_ += 1;
        macs_ += static_cast<double>(m) * n * 4;
        return push(std::move(out), {x}, [x, m, n](Graph& g, int32_t self) {
            const Tensor<T>& gr = g.nodes_[self].grad;
            const Tensor<T>& y = g.nodes_[self].value;
            g.accum_if(x, [&](Tensor<T>& d) {
                for (int r = 0; r < m; ++r) {
                    const T* grow = gr.ptr() + static_cast<size_t>(r) * n;
                    const T* yrow = y.ptr() + static_cast<size_t>(r) * n;
                    T* drow = d.ptr() + static_cast<size_t>(r) * n;
                    T dotgy = kern::dot(grow, yrow, n);
                    for (int j = 0; j < n; ++j) drow[j] += yrow[j] * (grow[j] - dotgy);
                }
            });
        });
    }

    // Per-row standardization over the feature axis: (x - mean) / sqrt(var +
    // eps), no learned affine. The epsilon keeps all-zero rows (untouched
    // identity slots) at zero instead of 0/0.
    Var layer_norm_rows(Var x) {
        const Tensor<T>& xv = val(x);
        int c = xv.cols();
        size_t rows = static_cast<size_t>(xv.rows());
        const double eps = 1e-5;
        Tensor<T> out(xv.shape());
        for (size_t r = 0; r < rows; ++r) {
            const T* in = xv.ptr() + r * c;
            T* o = out.ptr() + r * c;
            double mu = 0.0;
            for (int j = 0; j < c; ++j) mu += static_cast<double>(in[j]);
            mu /= c;
            double var = 0.0;
            for (int j = 0; j < c; ++j) {
                double d = static_cast<double>(in[j]) - mu;
                var += d * d;
            }
            var /= c;
            double inv = 1.0 / std::sqrt(var + eps);
            for (int j = 0; j < c; ++j) {
                o[j] = static_cast<T>((static_cast<double>(in[j]) - mu) * inv);
            }
        }
        macs_ += static_cast<double>(rows) * c * 4;
        return push(std::move(out), {x}, [x, c, rows, eps](Graph& g, int32_t self) {
            const Tensor<T>& gr = g.nodes_[self].grad;
            const Tensor<T>& y = g.nodes_[self].value;
            const Tensor<T>& xin = g.val(x);
            g.accum_if(x, [&](Tensor<T>& d) {
                for (size_t r = 0; r < rows; ++r) {
                    const T* grow = gr.ptr() + r * c;
                    const T* yrow = y.ptr() + r * c;
                    const T* in = xin.ptr() + r * c;
                    double mu = 0.0;
                    for (int j = 0; j < c; ++j) mu += static_cast<double>(in[j]);
                    mu /= c;
                    double var = 0.0;
                    for (int j = 0; j < c; ++j) {
                        double dv = static_cast<double>(in[j]) - mu;
                        var += dv * dv;
                    }
                    var /= c;
                    double inv = 1.0 / std::sqrt(var + eps);
                    double gmean = 0.0, gymean = 0.0;
                    for (int j = 0; j < c; ++j) {
                        gmean += static_cast<double>(grow[j]);
                        gymean += static_cast<double>(grow[j]) * static_cast<double>(yrow[j]);
                    }
                    gmean /= c;
                    gymean /= c;
                    T* drow = d.ptr() + r * c;
                    for (int j = 0; j < c; ++j) {
                        double gj = static_cast<double>(grow[j]);
                        double yj = static_cast<double>(yrow[j]);
                        drow[j] += static_cast<T>(inv * (gj - gmean - yj * gymean));
                    }
                }
            });
        });
    }

    // GeLU, tanh approximation.
    Var gelu(Var x) {
        const Tensor<T>& xv = val(x);
        Tensor<T> out(xv.shape());
        for (int64_t i = 0; i < xv.numel(); ++i) {
            out[i] = static_cast<T>(detail::gelu_tanh(static_cast<double>(xv[i])));
        }
        macs_ += static_cast<double>(xv.numel()) * 8;
        return push(std::move(out), {x}, [x](Graph& g, int32_t self) {
            const Tensor<T>& gr = g.nodes_[self].grad;
            const Tensor<T>& xin = g.val(x);
            g.accum_if(x, [&](Tensor<T>& d) {
                for (int64_t i = 0; i < gr.numel(); ++i) {
                    d[i] += gr[i] *
                            static_cast<T>(detail::gelu_tanh_grad(static_cast<double>(xin[i])));
                }
            });
        });
    }

    // ---- shape plumbing ----

    Var reshape(Var x, std::vector<int> shape) {
        const Tensor<T>& xv = val(x);
        Tensor<T> out(shape, xv.data());
        return push(std::move(out), {x}, [x](Graph& g, int32_t self) {
            const Tensor<T>& gr = g.nodes_[self].grad;
            g.accum_if(x, [&](Tensor<T>& d) { kern::axpy(d.ptr(), T(1), gr.ptr(), gr.numel()); });
        });
    }

    // Rows [r0, r1) of a rank-2 tensor.
    Var slice_rows(Var x, int r0, int r1) {
        const Tensor<T>& xv = val(x);
        require_rank2(xv, "slice_rows");
        int c = xv.dim(1);
        if (r0 < 0 || r1 > xv.dim(0) || r0 >= r1) {
            throw DimensionError("slice_rows: range [" + std::to_string(r0) + ", " +
                                 std::to_string(r1) + ") out of bounds for " + xv.shape_str());
        }
        Tensor<T> out({r1 - r0, c});
        std::copy(xv.ptr() + static_cast<size_t>(r0) * c, xv.ptr() + static_cast<size_t>(r1) * c,
                  out.ptr());
        return push(std::move(out), {x}, [x, r0, c](Graph& g, int32_t self) {
            const Tensor<T>& gr = g.nodes_[self].grad;
            g.accum_if(x, [&](Tensor<T>& d) {
                kern::axpy(d.ptr() + static_cast<size_t>(r0) * c, T(1), gr.ptr(), gr.numel());
            });
        });
    }

    Var concat_rows(const std::vector<Var>& xs) {
        if (xs.empty()) throw UsageError("concat_rows: no inputs");
        int c = val(xs[0]).dim(1);
        int rows = 0;
        for (Var v : xs) {
            const Tensor<T>& t = val(v);
            require_rank2(t, "concat_rows");
            if (t.dim(1) != c) {
                throw DimensionError("concat_rows: column mismatch " + t.shape_str() + " vs [" +
                                     std::to_string(c) + "]");
            }
            rows += t.dim(0);
        }
        Tensor<T> out({rows, c});
        size_t off = 0;
        for (Var v : xs) {
            const Tensor<T>& t = val(v);
            std::copy(t.ptr(), t.ptr() + t.numel(), out.ptr() + off);
            off += t.numel();
        }
        std::vector<Var> parents(xs);
        return push_multi(std::move(out), parents, [xs](Graph& g, int32_t self) {
            const Tensor<T>& gr = g.nodes_[self].grad;
            size_t off = 0;
            for (Var v : xs) {
                size_t n = g.val(v).numel();
                size_t at = off;
                g.accum_if(v, [&](Tensor<T>& d) { kern::axpy(d.ptr(), T(1), gr.ptr() + at, n); });
                off += n;
            }
        });
    }

    // [R, Ca] ++ [R, Cb] -> [R, Ca + Cb]
    Var concat_cols(Var a, Var b) {
        const Tensor<T>& av = val(a);
        const Tensor<T>& bv = val(b);
        require_rank2(av, "concat_cols lhs");
        require_rank2(bv, "concat_cols rhs");
        if (av.dim(0) != bv.dim(0)) {
            throw DimensionError("concat_cols: row mismatch " + av.shape_str() + " vs " +
                                 bv.shape_str());
        }
        int r = av.dim(0), ca = av.dim(1), cb = bv.dim(1);
        Tensor<T> out({r, ca + cb});
        for (int i = 0; i < r; ++i) {
            std::copy(av.ptr() + static_cast<size_t>(i) * ca,
                      av.ptr() + static_cast<size_t>(i + 1) * ca,
                      out.ptr() + static_cast<size_t>(i) * (ca + cb));
            std::copy(bv.ptr() + static_cast<size_t>(i) * cb,
                      bv.ptr() + static_cast<size_t>(i + 1) * cb,
                      out.ptr() + static_cast<size_t>(i) * (ca + cb) + ca);
        }
        return push(std::move(out), {a, b}, [a, b, r, ca, cb](Graph& g, int32_t self) {
            const Tensor<T>& gr = g.nodes_[self].grad;
            g.accum_if(a, [&](Tensor<T>& d) {
                for (int i = 0; i < r; ++i) {
                    kern::axpy(d.ptr() + static_cast<size_t>(i) * ca, T(1),
                               gr.ptr() + static_cast<size_t>(i) * (ca + cb), ca);
                }
            });
            g.accum_if(b, [&](Tensor<T>& d) {
                for (int i = 0; i < r; ++i) {
                    kern::axpy(d.ptr() + static_cast<size_t>(i) * cb, T(1),
                               gr.ptr() + static_cast<size_t>(i) * (ca + cb) + ca, cb);
                }
            });
        });
    }

    // Row r of x scaled by s[r]. s has one entry per row of x; x may have any
    // rank with the last axis as features.
    Var scale_rows(Var x, Var s) {
        const Tensor<T>& xv = val(x);
        const Tensor<T>& sv = val(s);
        size_t rows = static_cast<size_t>(xv.rows());
        int c = xv.cols();
        if (sv.numel() != static_cast<int64_t>(rows)) {
            throw DimensionError("scale_rows: scale " + sv.shape_str() + " does not match rows of " +
                                 xv.shape_str());
        }
        Tensor<T> out = xv;
        for (size_t r = 0; r < rows; ++r) kern::scal(out.ptr() + r * c, sv[r], c);
        macs_ += static_cast<double>(rows) * c;
        return push(std::move(out), {x, s}, [x, s, rows, c](Graph& g, int32_t self) {
            const Tensor<T>& gr = g.nodes_[self].grad;
            const Tensor<T>& xin = g.val(x);
            const Tensor<T>& sin = g.val(s);
            g.accum_if(x, [&](Tensor<T>& d) {
                for (size_t r = 0; r < rows; ++r) {
                    kern::axpy(d.ptr() + r * c, sin[r], gr.ptr() + r * c, c);
                }
            });
            g.accum_if(s, [&](Tensor<T>& d) {
                for (size_t r = 0; r < rows; ++r) {
                    d[r] += kern::dot(gr.ptr() + r * c, xin.ptr() + r * c, c);
                }
            });
        });
    }

    // Column j of a feature-last tensor, as a flat vector of row count.
    Var col(Var x, int j) {
        const Tensor<T>& xv = val(x);
        int c = xv.cols();
        size_t rows = static_cast<size_t>(xv.rows());
        if (j < 0 || j >= c) {
            throw DimensionError("col: index " + std::to_string(j) + " out of range for " +
                                 xv.shape_str());
        }
        Tensor<T> out({static_cast<int>(rows)});
        for (size_t r = 0; r < rows; ++r) out[r] = xv[r * c + j];
        return push(std::move(out), {x}, [x, j, c, rows](Graph& g, int32_t self) {
            const Tensor<T>& gr = g.nodes_[self].grad;
            g.accum_if(x, [&](Tensor<T>& d) {
                for (size_t r = 0; r < rows; ++r) d[r * c + j] += gr[r];
            });
        });
    }

    // Tile a vector of D values into t rows of an output with the given shape
    // (whose rows() == t and cols() == D).
    Var broadcast_rows(Var z, std::vector<int> shape) {
        const Tensor<T>& zv = val(z);
        Tensor<T> out(shape);
        int c = out.cols();
        size_t rows = static_cast<size_t>(out.rows());
        if (zv.numel() != c) {
            throw DimensionError("broadcast_rows: source " + zv.shape_str() +
                                 " does not match target features " + out.shape_str());
        }
        for (size_t r = 0; r < rows; ++r) std::copy(zv.ptr(), zv.ptr() + c, out.ptr() + r * c);
        return push(std::move(out), {z}, [z, c, rows](Graph& g, int32_t self) {
            const Tensor<T>& gr = g.nodes_[self].grad;
            g.accum_if(z, [&](Tensor<T>& d) {
                for (size_t r = 0; r < rows; ++r) kern::axpy(d.ptr(), T(1), gr.ptr() + r * c, c);
            });
        });
    }

    // out[t, :] = table[idx[t], :], with -1 producing a zero row.
    Var gather_rows(Var table, std::vector<int> idx) {
        const Tensor<T>& tv = val(table);
        require_rank2(tv, "gather_rows");
        int n = tv.dim(0), d = tv.dim(1);
        Tensor<T> out({static_cast<int>(idx.size()), d});
        for (size_t t = 0; t < idx.size(); ++t) {
            int i = idx[t];
            if (i >= n || i < -1) {
                throw DimensionError("gather_rows: index " + std::to_string(i) +
                                     " out of range for " + tv.shape_str());
            }
            if (i >= 0) {
                std::copy(tv.ptr() + static_cast<size_t>(i) * d,
                          tv.ptr() + static_cast<size_t>(i + 1) * d, out.ptr() + t * d);
            }
        }
        return push(std::move(out), {table}, [table, idx, d](Graph& g, int32_t self) {
            const Tensor<T>& gr = g.nodes_[self].grad;
            g.accum_if(table, [&](Tensor<T>& dst) {
                for (size_t t = 0; t < idx.size(); ++t) {
                    if (idx[t] >= 0) {
                        kern::axpy(dst.ptr() + static_cast<size_t>(idx[t]) * d, T(1),
                                   gr.ptr() + t * d, d);
                    }
                }
            });
        });
    }

    // ---- spatial ops ----

    // Per-channel convolution of x[H,W,D] with w[k,k,D], zero padding, same
    // output size. k must be odd.
    Var depthwise_conv(Var x, Var w) {
        const Tensor<T>& xv = val(x);
        const Tensor<T>& wv = val(w);
        require_rank(xv, 3, "depthwise_conv input");
        require_rank(wv, 3, "depthwise_conv kernel");
        int h = xv.dim(0), wdt = xv.dim(1), d = xv.dim(2);
        int k = wv.dim(0);
        if (wv.dim(1) != k || wv.dim(2) != d || k % 2 == 0) {
            throw DimensionError("depthwise_conv: kernel " + wv.shape_str() +
                                 " incompatible with input " + xv.shape_str());
        }
        int r = k / 2;
        Tensor<T> out({h, wdt, d});
        for (int y = 0; y < h; ++y) {
            for (int xq = 0; xq < wdt; ++xq) {
                T* opos = out.ptr() + (static_cast<size_t>(y) * wdt + xq) * d;
                for (int dy = 0; dy < k; ++dy) {
                    int sy = y + dy - r;
                    if (sy < 0 || sy >= h) continue;
                    for (int dx = 0; dx < k; ++dx) {
                        int sx = xq + dx - r;
                        if (sx < 0 || sx >= wdt) continue;
                        kern::vmadd(opos, wv.ptr() + (static_cast<size_t>(dy) * k + dx) * d,
                                    xv.ptr() + (static_cast<size_t>(sy) * wdt + sx) * d, d);
                    }
                }
            }
        }
        macs_ += static_cast<double>(h) * wdt * k * k * d;
        return push(std::move(out), {x, w}, [x, w, h, wdt, d, k, r](Graph& g, int32_t self) {
            const Tensor<T>& gr = g.nodes_[self].grad;
            const Tensor<T>& xin = g.val(x);
            const Tensor<T>& win = g.val(w);
            for (int y = 0; y < h; ++y) {
                for (int xq = 0; xq < wdt; ++xq) {
                    const T* gpos = gr.ptr() + (static_cast<size_t>(y) * wdt + xq) * d;
                    for (int dy = 0; dy < k; ++dy) {
                        int sy = y + dy - r;
                        if (sy < 0 || sy >= h) continue;
                        for (int dx = 0; dx < k; ++dx) {
                            int sx = xq + dx - r;
                            if (sx < 0 || sx >= wdt) continue;
                            size_t tap = (static_cast<size_t>(dy) * k + dx) * d;
                            size_t src = (static_cast<size_t>(sy) * wdt + sx) * d;
                            g.accum_if(x, [&](Tensor<T>& dst) {
                                kern::vmadd(dst.ptr() + src, win.ptr() + tap, gpos, d);
                            });
                            g.accum_if(w, [&](Tensor<T>& dst) {
                                kern::vmadd(dst.ptr() + tap, xin.ptr() + src, gpos, d);
                            });
                        }
                    }
                }
            }
        });
    }

    // Dense convolution of x[H,W,Ci] with w[kh,kw,Ci,Co] plus bias b[Co]
    // (invalid Var to skip), zero padding `pad`, stride `stride`.
    Var conv2d(Var x, Var w, Var b, int stride, int pad) {
        const Tensor<T>& xv = val(x);
        const Tensor<T>& wv = val(w);
        require_rank(xv, 3, "conv2d input");
        require_rank(wv, 4, "conv2d kernel");
        int h = xv.dim(0), wd = xv.dim(1), ci = xv.dim(2);
        int kh = wv.dim(0), kw = wv.dim(1), co = wv.dim(3);
        if (wv.dim(2) != ci) {
            throw DimensionError("conv2d: kernel " + wv.shape_str() + " incompatible with input " +
                                 xv.shape_str());
        }
        int ho = (h + 2 * pad - kh) / stride + 1;
        int wo = (wd + 2 * pad - kw) / stride + 1;
        if (ho <= 0 || wo <= 0) {
            throw DimensionError("conv2d: empty output for input " + xv.shape_str());
        }
        Tensor<T> out({ho, wo, co});
        const T* bias = nullptr;
        if (b.valid()) {
            const Tensor<T>& bv = val(b);
            if (bv.numel() != co) {
                throw DimensionError("conv2d: bias " + bv.shape_str() + " does not match kernel " +
                                     wv.shape_str());
            }
            bias = bv.ptr();
        }
        for (int oy = 0; oy < ho; ++oy) {
            for (int ox = 0; ox < wo; ++ox) {
                T* opos = out.ptr() + (static_cast<size_t>(oy) * wo + ox) * co;
                if (bias) std::copy(bias, bias + co, opos);
                for (int dy = 0; dy < kh; ++dy) {
                    int sy = oy * stride + dy - pad;
                    if (sy < 0 || sy >= h) continue;
                    for (int dx = 0; dx < kw; ++dx) {
                        int sx = ox * stride + dx - pad;
                        if (sx < 0 || sx >= wd) continue;
                        const T* xpos = xv.ptr() + (static_cast<size_t>(sy) * wd + sx) * ci;
                        const T* wtap = wv.ptr() + (static_cast<size_t>(dy) * kw + dx) * ci * co;
                        for (int c = 0; c < ci; ++c) {
                            kern::axpy(opos, xpos[c], wtap + static_cast<size_t>(c) * co, co);
                        }
                    }
                }
            }
        }
        macs_ += static_cast<double>(ho) * wo * kh * kw * ci * co;
        return push(std::move(out), {x, w, b},
                    [x, w, b, h, wd, ci, kh, kw, co, ho, wo, stride, pad](Graph& g, int32_t self) {
                        const Tensor<T>& gr = g.nodes_[self].grad;
                        const Tensor<T>& xin = g.val(x);
                        const Tensor<T>& win = g.val(w);
                        for (int oy = 0; oy < ho; ++oy) {
                            for (int ox = 0; ox < wo; ++ox) {
                                const T* gpos =
                                    gr.ptr() + (static_cast<size_t>(oy) * wo + ox) * co;
                                if (b.valid()) {
                                    g.accum_if(b, [&](Tensor<T>& dst) {
                                        kern::axpy(dst.ptr(), T(1), gpos, co);
                                    });
                                }
                                for (int dy = 0; dy < kh; ++dy) {
                                    int sy = oy * stride + dy - pad;
                                    if (sy < 0 || sy >= h) continue;
                                    for (int dx = 0; dx < kw; ++dx) {
                                        int sx = ox * stride + dx - pad;
                                        if (sx < 0 || sx >= wd) continue;
                                        size_t xoff = (static_cast<size_t>(sy) * wd + sx) * ci;
                                        size_t woff =
                                            (static_cast<size_t>(dy) * kw + dx) * ci * co;
                                        g.accum_if(x, [&](Tensor<T>& dst) {
                                            for (int c = 0; c < ci; ++c) {
                                                dst[xoff + c] += kern::dot(
                                                    win.ptr() + woff + static_cast<size_t>(c) * co,
                                                    gpos, co);
                                            }
                                        });
                                        g.accum_if(w, [&](Tensor<T>& dst) {
                                            for (int c = 0; c < ci; ++c) {
                                                kern::axpy(
                                                    dst.ptr() + woff + static_cast<size_t>(c) * co,
                                                    xin[xoff + c], gpos, co);
                                            }
                                        });
                                    }
                                }
                            }
                        }
                    });
    }

    // [H,W,D] -> [1,1,D] mean over positions.
    Var global_avg_pool(Var x) {
        const Tensor<T>& xv = val(x);
        require_rank(xv, 3, "global_avg_pool");
        int h = xv.dim(0), w = xv.dim(1), d = xv.dim(2);
        size_t hw = static_cast<size_t>(h) * w;
        Tensor<T> out({1, 1, d});
        T inv = T(1) / static_cast<T>(hw);
        for (size_t p = 0; p < hw; ++p) kern::axpy(out.ptr(), inv, xv.ptr() + p * d, d);
        return push(std::move(out), {x}, [x, hw, d](Graph& g, int32_t self) {
            const Tensor<T>& gr = g.nodes_[self].grad;
            T inv = T(1) / static_cast<T>(hw);
            g.accum_if(x, [&](Tensor<T>& dst) {
                for (size_t p = 0; p < hw; ++p) kern::axpy(dst.ptr() + p * d, inv, gr.ptr(), d);
            });
        });
    }

    // Bilinear 2x upsample of [H,W,C], half-pixel centers.
    Var upsample2x(Var x) {
        const Tensor<T>& xv = val(x);
        require_rank(xv, 3, "upsample2x");
        int h = xv.dim(0), w = xv.dim(1), c = xv.dim(2);
        int ho = 2 * h, wo = 2 * w;
        Tensor<T> out({ho, wo, c});
        auto taps = [](int o, int n, int& i0, int& i1, T& f) {
            T s = T(0.5) * o - T(0.25);
            T fl = std::floor(s);
            i0 = static_cast<int>(fl);
            f = s - fl;
            i1 = i0 + 1;
            if (i0 < 0) i0 = 0;
            if (i1 > n - 1) i1 = n - 1;
        };
        for (int oy = 0; oy < ho; ++oy) {
            int y0, y1;
            T fy;
            taps(oy, h, y0, y1, fy);
            for (int ox = 0; ox < wo; ++ox) {
                int x0, x1;
                T fx;
                taps(ox, w, x0, x1, fx);
                T* opos = out.ptr() + (static_cast<size_t>(oy) * wo + ox) * c;
                kern::axpy(opos, (T(1) - fy) * (T(1) - fx),
                           xv.ptr() + (static_cast<size_t>(y0) * w + x0) * c, c);
                kern::axpy(opos, (T(1) - fy) * fx,
                           xv.ptr() + (static_cast<size_t>(y0) * w + x1) * c, c);
                kern::axpy(opos, fy * (T(1) - fx),
                           xv.ptr() + (static_cast<size_t>(y1) * w + x0) * c, c);
                kern::axpy(opos, fy * fx, xv.ptr() + (static_cast<size_t>(y1) * w + x1) * c, c);
            }
        }
        macs_ += static_cast<double>(ho) * wo * c * 4;
        return push(std::move(out), {x}, [x, h, w, c, ho, wo](Graph& g, int32_t self) {
            const Tensor<T>& gr = g.nodes_[self].grad;
            auto taps = [](int o, int n, int& i0, int& i1, T& f) {
                T s = T(0.5) * o - T(0.25);
                T fl = std::floor(s);
                i0 = static_cast<int>(fl);
                f = s - fl;
                i1 = i0 + 1;
                if (i0 < 0) i0 = 0;
                if (i1 > n - 1) i1 = n - 1;
            };
            g.accum_if(x, [&](Tensor<T>& dst) {
                for (int oy = 0; oy < ho; ++oy) {
                    int y0, y1;
                    T fy;
                    taps(oy, h, y0, y1, fy);
                    for (int ox = 0; ox < wo; ++ox) {
                        int x0, x1;
                        T fx;
                        taps(ox, w, x0, x1, fx);
                        const T* gpos = gr.ptr() + (static_cast<size_t>(oy) * wo + ox) * c;
                        kern::axpy(dst.ptr() + (static_cast<size_t>(y0) * w + x0) * c,
                                   (T(1) - fy) * (T(1) - fx), gpos, c);
                        kern::axpy(dst.ptr() + (static_cast<size_t>(y0) * w + x1) * c,
                                   (T(1) - fy) * fx, gpos, c);
                        kern::axpy(dst.ptr() + (static_cast<size_t>(y1) * w + x0) * c,
                                   fy * (T(1) - fx), gpos, c);
                        kern::axpy(dst.ptr() + (static_cast<size_t>(y1) * w + x1) * c, fy * fx,
                                   gpos, c);
                    }
                }
            });
        });
    }

    // ---- reductions and losses ----

    Var sum_all(Var x) {
        const Tensor<T>& xv = val(x);
        Tensor<T> out({1});
        out[0] = kern::sum(xv.ptr(), xv.numel());
        return push(std::move(out), {x}, [x](Graph& g, int32_t self) {
            T gv = g.nodes_[self].grad[0];
            g.accum_if(x, [&](Tensor<T>& dst) {
                for (int64_t i = 0; i < dst.numel(); ++i) dst[i] += gv;
            });
        });
    }

    // Mean over all elements of the numerically stable binary cross entropy
    // on logits: max(x,0) - x*z + log(1 + exp(-|x|)).
    Var bce_with_logits_mean(Var logits, Var targets) {
        const Tensor<T>& lv = val(logits);
        const Tensor<T>& tv = val(targets);
        require_same_shape(lv, tv, "bce_with_logits");
        int64_t n = lv.numel();
        double acc = 0.0;
        for (int64_t i = 0; i < n; ++i) {
            double x = static_cast<double>(lv[i]);
            double z = static_cast<double>(tv[i]);
            acc += std::max(x, 0.0) - x * z + std::log1p(std::exp(-std::abs(x)));
        }
        Tensor<T> out({1});
        out[0] = static_cast<T>(acc / static_cast<double>(n));
        macs_ += static_cast<double>(n) * 4;
        return push(std::move(out), {logits, targets}, [logits, targets, n](Graph& g,
                                                                            int32_t self) {
            T gv = g.nodes_[self].grad[0];
            const Tensor<T>& lin = g.val(logits);
            const Tensor<T>& tin = g.val(targets);
            T inv = gv / static_cast<T>(n);
            g.accum_if(logits, [&](Tensor<T>& dst) {
                for (int64_t i = 0; i < n; ++i) {
                    dst[i] += inv * (detail::stable_sigmoid(lin[i]) - tin[i]);
                }
            });
        });
    }

    // Soft Jaccard loss on logits, per feature channel (last axis), averaged
    // over channels: mean_c [1 - (sum p*g + eps) / (sum (p + g - p*g) + eps)]
    // with p = sigmoid(logits).
    Var soft_jaccard_mean(Var logits, Var targets) {
        const Tensor<T>& lv = val(logits);
        const Tensor<T>& tv = val(targets);
        require_same_shape(lv, tv, "soft_jaccard");
        int c = lv.cols();
        size_t rows = static_cast<size_t>(lv.rows());
        const double eps = 1e-7;
        double acc = 0.0;
        for (int ch = 0; ch < c; ++ch) {
            double s1 = 0.0, s2 = 0.0;
            for (size_t r = 0; r < rows; ++r) {
                double p = static_cast<double>(detail::stable_sigmoid(lv[r * c + ch]));
                double gt = static_cast<double>(tv[r * c + ch]);
                s1 += p * gt;
                s2 += p + gt - p * gt;
            }
            acc += 1.0 - (s1 + eps) / (s2 + eps);
        }
        Tensor<T> out({1});
        out[0] = static_cast<T>(acc / c);
        macs_ += static_cast<double>(rows) * c * 4;
        return push(std::move(out), {logits, targets}, [logits, targets, c, rows, eps](
                                                           Graph& g, int32_t self) {
            T gv = g.nodes_[self].grad[0];
            const Tensor<T>& lin = g.val(logits);
            const Tensor<T>& tin = g.val(targets);
            g.accum_if(logits, [&](Tensor<T>& dst) {
                for (int ch = 0; ch < c; ++ch) {
                    double s1 = 0.0, s2 = 0.0;
                    for (size_t r = 0; r < rows; ++r) {
                        double p = static_cast<double>(detail::stable_sigmoid(lin[r * c + ch]));
                        double gt = static_cast<double>(tin[r * c + ch]);
                        s1 += p * gt;
                        s2 += p + gt - p * gt;
                    }
                    s1 += eps;
                    s2 += eps;
                    for (size_t r = 0; r < rows; ++r) {
                        double p = static_cast<double>(detail::stable_sigmoid(lin[r * c + ch]));
                        double gt = static_cast<double>(tin[r * c + ch]);
                        double dldp = -(gt * s2 - s1 * (1.0 - gt)) / (s2 * s2) / c;
                        dst[r * c + ch] +=
                            gv * static_cast<T>(dldp * p * (1.0 - p));
                    }
                }
            });
        });
    }

  private:
    struct Node {
        Tensor<T> value;
        Tensor<T> grad;
        bool needs_grad = false;
        bool grad_alloc = false;
        std::function<void(Graph&)> backprop;
    };

    int32_t check(Var v) const {
        if (!v.valid() || static_cast<size_t>(v.id) >= nodes_.size()) {
            throw UsageError("invalid graph handle");
        }
        return v.id;
    }

    const Node& node(Var v) const { return nodes_[check(v)]; }

    static void require_rank2(const Tensor<T>& t, const char* what) {
        if (t.rank() != 2) {
            throw DimensionError(std::string(what) + " must be rank 2, got " + t.shape_str());
        }
    }

    static void require_rank(const Tensor<T>& t, size_t r, const char* what) {
        if (t.rank() != r) {
            throw DimensionError(std::string(what) + " must be rank " + std::to_string(r) +
                                 ", got " + t.shape_str());
        }
    }

    Tensor<T>& grad_ref(int32_t id) {
        Node& n = nodes_[id];
        if (!n.grad_alloc) {
            n.grad = Tensor<T>::zeros(n.value.shape());
            n.grad_alloc = true;
        }
        return n.grad;
    }

    // Run fn on the gradient buffer of v if v wants gradients.
    template <typename Fn>
    void accum_if(Var v, Fn&& fn) {
        if (v.valid() && nodes_[v.id].needs_grad) fn(grad_ref(v.id));
    }

    template <typename Fn>
    Var push(Tensor<T> value, std::initializer_list<Var> parents, Fn&& back) {
        bool needs = false;
        for (Var p : parents) {
            if (p.valid()) {
                check(p);
                needs = needs || nodes_[p.id].needs_grad;
            }
        }
        return emplace(std::move(value), needs, std::forward<Fn>(back));
    }

    template <typename Fn>
    Var push_multi(Tensor<T> value, const std::vector<Var>& parents, Fn&& back) {
        bool needs = false;
        for (Var p : parents) {
            if (p.valid()) {
                check(p);
                needs = needs || nodes_[p.id].needs_grad;
            }
        }
        return emplace(std::move(value), needs, std::forward<Fn>(back));
    }

    template <typename Fn>
    Var emplace(Tensor<T> value, bool needs, Fn&& back) {
        nodes_.emplace_back();
        Node& n = nodes_.back();
        n.value = std::move(value);
        n.needs_grad = needs;
        int32_t id = static_cast<int32_t>(nodes_.size() - 1);
        if (needs) {
            n.backprop = [fn = std::forward<Fn>(back), id](Graph& g) { fn(g, id); };
        }
        return Var{id};
    }

    static uint64_t next_uid() {
        static std::atomic<uint64_t> counter{1};
        return counter.fetch_add(1, std::memory_order_relaxed);
    }

    std::vector<Node> nodes_;
    uint64_t uid_ = next_uid();
    size_t softmax_calls_ = 0;
    double macs_ = 0.0;
};

}  // namespace mavos
