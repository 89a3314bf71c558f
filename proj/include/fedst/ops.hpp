#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "fedst/tensor.hpp"

namespace fedst {

// Differentiable primitives. Every op validates shapes, computes the forward
// value, verifies the result is finite, and (when a Tape is active and any
// input requires a gradient) records a closure that accumulates input
// gradients from the output gradient. Summation orders are fixed, so repeated
// runs produce bit-identical values and gradients.

namespace detail {

inline bool tracing() { return Tape::current() != nullptr; }

inline Tensor out_like(Shape shape, bool track) {
    return Tensor(std::move(shape), 0.0, track);
}

inline void record(const char* op, std::function<void()> fn) {
    Tape::current()->record(op, std::move(fn));
}

inline void require_same_shape(Tensor a, Tensor b, const char* op) {
    if (a.shape() != b.shape())
        throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                             " vs " + shape_str(b.shape()));
}

} // namespace detail

inline Tensor add(Tensor a, Tensor b) {
    detail::require_same_shape(a, b, "add");
    const bool track = detail::tracing() && (a.requires_grad() || b.requires_grad());
    Tensor out = detail::out_like(a.shape(), track);
    const std::size_t n = a.data().size();
    for (std::size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] + b.data()[i];
    out.check_finite("add");
    if (track) {
        detail::record("add", [a, b, out]() mutable {
            const auto& g = out.grad();
            if (a.requires_grad())
                for (std::size_t i = 0; i < g.size(); ++i) a.grad()[i] += g[i];
            if (b.requires_grad())
                for (std::size_t i = 0; i < g.size(); ++i) b.grad()[i] += g[i];
        });
    }
    return out;
}

inline Tensor sub(Tensor a, Tensor b) {
    detail::require_same_shape(a, b, "sub");
    const bool track = detail::tracing() && (a.requires_grad() || b.requires_grad());
    Tensor out = detail::out_like(a.shape(), track);
    const std::size_t n = a.data().size();
    for (std::size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] - b.data()[i];
    out.check_finite("sub");
    if (track) {
        detail::record("sub", [a, b, out]() mutable {
            const auto& g = out.grad();
            if (a.requires_grad())
                for (std::size_t i = 0; i < g.size(); ++i) a.grad()[i] += g[i];
            if (b.requires_grad())
                for (std::size_t i = 0; i < g.size(); ++i) b.grad()[i] -= g[i];
        });
    }
    return out;
}

inline Tensor mul(Tensor a, Tensor b) {
    detail::require_same_shape(a, b, "mul");
    const bool track = detail::tracing() && (a.requires_grad() || b.requires_grad());
    Tensor out = detail::out_like(a.shape(), track);
    const std::size_t n = a.data().size();
    for (std::size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] * b.data()[i];
    out.check_finite("mul");
    if (track) {
        detail::record("mul", [a, b, out]() mutable {
            const auto& g = out.grad();
            if (a.requires_grad())
                for (std::size_t i = 0; i < g.size(); ++i) a.grad()[i] += g[i] * b.data()[i];
            if (b.requires_grad())
                for (std::size_t i = 0; i < g.size(); ++i) b.grad()[i] += g[i] * a.data()[i];
        });
    }
    return out;
}

inline Tensor div(Tensor a, Tensor b) {
    detail::require_same_shape(a, b, "div");
    const bool track = detail::tracing() && (a.requires_grad() || b.requires_grad());
    Tensor out = detail::out_like(a.shape(), track);
    const std::size_t n = a.data().size();
    for (std::size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] / b.data()[i];
    out.check_finite("div");
    if (track) {
        detail::record("div", [a, b, out]() mutable {
            const auto& g = out.grad();
            if (a.requires_grad())
                for (std::size_t i = 0; i < g.size(); ++i) a.grad()[i] += g[i] / b.data()[i];
            if (b.requires_grad())
                for (std::size_t i = 0; i < g.size(); ++i)
                    b.grad()[i] -= g[i] * a.data()[i] / (b.data()[i] * b.data()[i]);
        });
    }
    return out;
}

inline Tensor scale(Tensor a, double s) {
    const bool track = detail::tracing() && a.requires_grad();
    Tensor out = detail::out_like(a.shape(), track);
    const std::size_t n = a.data().size();
    for (std::size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] * s;
    out.check_finite("scale");
    if (track) {
        detail::record("scale", [a, out, s]() mutable {
            const auto& g = out.grad();
            for (std::size_t i = 0; i < g.size(); ++i) a.grad()[i] += g[i] * s;
        });
    }
    return out;
}

inline Tensor add_scalar(Tensor a, double s) {
    const bool track = detail::tracing() && a.requires_grad();
    Tensor out = detail::out_like(a.shape(), track);
    const std::size_t n = a.data().size();
    for (std::size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] + s;
    out.check_finite("add_scalar");
    if (track) {
        detail::record("add_scalar", [a, out]() mutable {
            const auto& g = out.grad();
            for (std::size_t i = 0; i < g.size(); ++i) a.grad()[i] += g[i];
        });
    }
    return out;
}

/// Batched matrix product: a [..., m, k] x b [k, n] or [..., k, n].
/// A rank-2 b is applied to every leading batch of a.
inline Tensor matmul(Tensor a, Tensor b) {
    if (a.rank() < 2 || b.rank() < 2) throw DimensionError("matmul: inputs must have rank >= 2");
    const int m = a.dim(a.rank() - 2), k = a.dim(a.rank() - 1);
    const int kb = b.dim(b.rank() - 2), n = b.dim(b.rank() - 1);
    if (k != kb)
        throw DimensionError("matmul: inner dims " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    const bool b_shared = (b.rank() == 2);
    if (!b_shared) {
        if (a.rank() != b.rank()) throw DimensionError("matmul: rank mismatch");
        for (int i = 0; i < a.rank() - 2; ++i)
            if (a.dim(i) != b.dim(i)) throw DimensionError("matmul: batch dims differ");
    }
    Shape out_shape(a.shape());
    out_shape.back() = n;
    const std::int64_t batches = a.size() / (static_cast<std::int64_t>(m) * k);

    const bool track = detail::tracing() && (a.requires_grad() || b.requires_grad());
    Tensor out = detail::out_like(out_shape, track);

    const double* ad = a.data().data();
    const double* bd = b.data().data();
    double* od = out.data().data();
    for (std::int64_t t = 0; t < batches; ++t) {
        const double* at = ad + t * m * k;
        const double* bt = b_shared ? bd : bd + t * static_cast<std::int64_t>(k) * n;
        double* ot = od + t * m * n;
        for (int i = 0; i < m; ++i) {
            for (int kk = 0; kk < k; ++kk) {
                const double av = at[i * k + kk];
                const double* brow = bt + kk * n;
                double* orow = ot + i * n;
                for (int j = 0; j < n; ++j) orow[j] += av * brow[j];
            }
        }
    }
    out.check_finite("matmul");
    if (track) {
        detail::record("matmul", [a, b, out, m, k, n, batches, b_shared]() mutable {
            const double* g = out.grad().data();
            if (a.requires_grad()) {
                double* da = a.grad().data();
                const double* bd2 = b.data().data();
                for (std::int64_t t = 0; t < batches; ++t) {
                    const double* gt = g + t * m * n;
                    const double* bt = b_shared ? bd2 : bd2 + t * static_cast<std::int64_t>(k) * n;
                    double* dat = da + t * m * k;
                    for (int i = 0; i < m; ++i)
                        for (int j = 0; j < n; ++j) {
                            const double gv = gt[i * n + j];
                            for (int kk = 0; kk < k; ++kk) dat[i * k + kk] += gv * bt[kk * n + j];
                        }
                }
            }
            if (b.requires_grad()) {
                double* db = b.grad().data();
                const double* ad2 = a.data().data();
                for (std::int64_t t = 0; t < batches; ++t) {
                    const double* gt = g + t * m * n;
                    const double* at = ad2 + t * m * k;
                    double* dbt = b_shared ? db : db + t * static_cast<std::int64_t>(k) * n;
                    for (int i = 0; i < m; ++i)
                        for (int kk = 0; kk < k; ++kk) {
                            const double av = at[i * k + kk];
                            for (int j = 0; j < n; ++j) dbt[kk * n + j] += av * gt[i * n + j];
                        }
                }
            }
        });
    }
    return out;
}

/// a [m, k] x b [n, k]^T -> [m, n]. Rank-2 only; used for attention scores.
inline Tensor matmul_nt(Tensor a, Tensor b) {
    if (a.rank() != 2 || b.rank() != 2) throw DimensionError("matmul_nt: rank-2 inputs required");
    const int m = a.dim(0), k = a.dim(1), n = b.dim(0);
    if (b.dim(1) != k)
        throw DimensionError("matmul_nt: inner dims " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    const bool track = detail::tracing() && (a.requires_grad() || b.requires_grad());
    Tensor out = detail::out_like(Shape{m, n}, track);
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) {
            double acc = 0.0;
            for (int kk = 0; kk < k; ++kk) acc += a.data()[i * k + kk] * b.data()[j * k + kk];
            out.data()[i * n + j] = acc;
        }
    out.check_finite("matmul_nt");
    if (track) {
        detail::record("matmul_nt", [a, b, out, m, k, n]() mutable {
            const auto& g = out.grad();
            if (a.requires_grad())
                for (int i = 0; i < m; ++i)
                    for (int j = 0; j < n; ++j) {
                        const double gv = g[i * n + j];
                        for (int kk = 0; kk < k; ++kk) a.grad()[i * k + kk] += gv * b.data()[j * k + kk];
                    }
            if (b.requires_grad())
                for (int i = 0; i < m; ++i)
                    for (int j = 0; j < n; ++j) {
                        const double gv = g[i * n + j];
                        for (int kk = 0; kk < k; ++kk) b.grad()[j * k + kk] += gv * a.data()[i * k + kk];
                    }
        });
    }
    return out;
}

/// y = x W + b over the last axis: x [..., in], W [in, out], b [out].
inline Tensor fully_connected(Tensor x, Tensor w, Tensor b) {
    if (x.rank() < 1 || w.rank() != 2 || b.rank() != 1)
        throw DimensionError("fully_connected: expected x[...,in], W[in,out], b[out]");
    const int in = x.dim(x.rank() - 1);
    if (w.dim(0) != in || b.dim(0) != w.dim(1))
        throw DimensionError("fully_connected: weight dims " + shape_str(w.shape()) +
                             " incompatible with input " + shape_str(x.shape()));
    const int out_dim = w.dim(1);
    const std::int64_t rows = x.size() / in;
    Shape out_shape(x.shape());
    out_shape.back() = out_dim;

    const bool track =
        detail::tracing() && (x.requires_grad() || w.requires_grad() || b.requires_grad());
    Tensor out = detail::out_like(out_shape, track);

    const double* xd = x.data().data();
    const double* wd = w.data().data();
    const double* bd = b.data().data();
    double* od = out.data().data();
    for (std::int64_t r = 0; r < rows; ++r) {
        double* orow = od + r * out_dim;
        for (int j = 0; j < out_dim; ++j) orow[j] = bd[j];
        const double* xrow = xd + r * in;
        for (int i = 0; i < in; ++i) {
            const double xv = xrow[i];
            const double* wrow = wd + i * out_dim;
            for (int j = 0; j < out_dim; ++j) orow[j] += xv * wrow[j];
        }
    }
    out.check_finite("fully_connected");
    if (track) {
        detail::record("fully_connected", [x, w, b, out, rows, in, out_dim]() mutable {
            const double* g = out.grad().data();
            if (x.requires_grad()) {
                double* dx = x.grad().data();
                const double* wd2 = w.data().data();
                for (std::int64_t r = 0; r < rows; ++r)
                    for (int i = 0; i < in; ++i) {
                        const double* wrow = wd2 + i * out_dim;
                        const double* grow = g + r * out_dim;
                        double acc = 0.0;
                        for (int j = 0; j < out_dim; ++j) acc += grow[j] * wrow[j];
                        dx[r * in + i] += acc;
                    }
            }
            if (w.requires_grad()) {
                double* dw = w.grad().data();
                const double* xd2 = x.data().data();
                for (std::int64_t r = 0; r < rows; ++r) {
                    const double* xrow = xd2 + r * in;
                    const double* grow = g + r * out_dim;
                    for (int i = 0; i < in; ++i) {
                        const double xv = xrow[i];
                        for (int j = 0; j < out_dim; ++j) dw[i * out_dim + j] += xv * grow[j];
                    }
                }
            }
            if (b.requires_grad()) {
                double* dbn = b.grad().data();
                for (std::int64_t r = 0; r < rows; ++r)
                    for (int j = 0; j < out_dim; ++j) dbn[j] += g[r * out_dim + j];
            }
        });
    }
    return out;
}

inline Tensor sigmoid(Tensor x) {
    const bool track = detail::tracing() && x.requires_grad();
    Tensor out = detail::out_like(x.shape(), track);
    const std::size_t n = x.data().size();
    for (std::size_t i = 0; i < n; ++i) {
        const double v = x.data()[i];
        out.data()[i] = v >= 0.0 ? 1.0 / (1.0 + std::exp(-v))
                                 : std::exp(v) / (1.0 + std::exp(v));
    }
    out.check_finite("sigmoid");
    if (track) {
        detail::record("sigmoid", [x, out]() mutable {
            const auto& g = out.grad();
            for (std::size_t i = 0; i < g.size(); ++i) {
                const double y = out.data()[i];
                x.grad()[i] += g[i] * y * (1.0 - y);
            }
        });
    }
    return out;
}

inline Tensor relu(Tensor x) {
    const bool track = detail::tracing() && x.requires_grad();
    Tensor out = detail::out_like(x.shape(), track);
    const std::size_t n = x.data().size();
    for (std::size_t i = 0; i < n; ++i) out.data()[i] = x.data()[i] > 0.0 ? x.data()[i] : 0.0;
    if (track) {
        detail::record("relu", [x, out]() mutable {
            const auto& g = out.grad();
            for (std::size_t i = 0; i < g.size(); ++i)
                if (x.data()[i] > 0.0) x.grad()[i] += g[i];
        });
    }
    return out;
}

/// Shift-invariant softmax over the last axis. Rows sum to 1.
inline Tensor softmax_lastdim(Tensor x) {
    if (x.rank() < 1) throw DimensionError("softmax_lastdim: empty shape");
    const int L = x.dim(x.rank() - 1);
    const std::int64_t rows = x.size() / L;
    const bool track = detail::tracing() && x.requires_grad();
    Tensor out = detail::out_like(x.shape(), track);
    for (std::int64_t r = 0; r < rows; ++r) {
        const double* xr = x.data().data() + r * L;
        double* yr = out.data().data() + r * L;
        double mx = xr[0];
        for (int i = 1; i < L; ++i) mx = std::max(mx, xr[i]);
        double sum = 0.0;
        for (int i = 0; i < L; ++i) {
            yr[i] = std::exp(xr[i] - mx);
            sum += yr[i];
        }
        for (int i = 0; i < L; ++i) yr[i] /= sum;
    }
    out.check_finite("softmax_lastdim");
    if (track) {
        detail::record("softmax_lastdim", [x, out, rows, L]() mutable {
            const auto& g = out.grad();
            for (std::int64_t r = 0; r < rows; ++r) {
                const double* yr = out.data().data() + r * L;
                const double* gr = g.data() + r * L;
                double dot = 0.0;
                for (int i = 0; i < L; ++i) dot += gr[i] * yr[i];
                for (int i = 0; i < L; ++i) x.grad()[r * L + i] += yr[i] * (gr[i] - dot);
            }
        });
    }
    return out;
}

inline Tensor log_softmax_lastdim(Tensor x) {
    if (x.rank() < 1) throw DimensionError("log_softmax_lastdim: empty shape");
    const int L = x.dim(x.rank() - 1);
    const std::int64_t rows = x.size() / L;
    const bool track = detail::tracing() && x.requires_grad();
    Tensor out = detail::out_like(x.shape(), track);
    for (std::int64_t r = 0; r < rows; ++r) {
        const double* xr = x.data().data() + r * L;
        double* yr = out.data().data() + r * L;
        double mx = xr[0];
        for (int i = 1; i < L; ++i) mx = std::max(mx, xr[i]);
        double sum = 0.0;
        for (int i = 0; i < L; ++i) sum += std::exp(xr[i] - mx);
        const double lse = mx + std::log(sum);
        for (int i = 0; i < L; ++i) yr[i] = xr[i] - lse;
    }
    out.check_finite("log_softmax_lastdim");
    if (track) {
        detail::record("log_softmax_lastdim", [x, out, rows, L]() mutable {
            const auto& g = out.grad();
            for (std::int64_t r = 0; r < rows; ++r) {
                const double* yr = out.data().data() + r * L;
                const double* gr = g.data() + r * L;
                double gsum = 0.0;
                for (int i = 0; i < L; ++i) gsum += gr[i];
                for (int i = 0; i < L; ++i) x.grad()[r * L + i] += gr[i] - std::exp(yr[i]) * gsum;
            }
        });
    }
    return out;
}

/// Non-overlapping p x p mean pooling on an [h, w, c] map.
inline Tensor avgpool2d(Tensor x, int p) {
    if (x.rank() != 3) throw DimensionError("avgpool2d: expected [h,w,c]");
    const int h = x.dim(0), w = x.dim(1), c = x.dim(2);
    if (p <= 0 || h % p != 0 || w % p != 0)
        throw DimensionError("avgpool2d: dims " + shape_str(x.shape()) + " not divisible by pool " +
                             std::to_string(p));
    const int oh = h / p, ow = w / p;
    const bool track = detail::tracing() && x.requires_grad();
    Tensor out = detail::out_like(Shape{oh, ow, c}, track);
    const double inv = 1.0 / (static_cast<double>(p) * p);
    for (int i = 0; i < oh; ++i)
        for (int j = 0; j < ow; ++j)
            for (int k = 0; k < c; ++k) {
                double acc = 0.0;
                for (int a = 0; a < p; ++a)
                    for (int bcol = 0; bcol < p; ++bcol)
                        acc += x.data()[((i * p + a) * w + (j * p + bcol)) * c + k];
                out.data()[(i * ow + j) * c + k] = acc * inv;
            }
    out.check_finite("avgpool2d");
    if (track) {
        detail::record("avgpool2d", [x, out, h, w, c, p, oh, ow, inv]() mutable {
            const auto& g = out.grad();
            for (int i = 0; i < oh; ++i)
                for (int j = 0; j < ow; ++j)
                    for (int k = 0; k < c; ++k) {
                        const double gv = g[(i * ow + j) * c + k] * inv;
                        for (int a = 0; a < p; ++a)
                            for (int bcol = 0; bcol < p; ++bcol)
                                x.grad()[((i * p + a) * w + (j * p + bcol)) * c + k] += gv;
                    }
        });
    }
    return out;
}

/// Mean over the spatial axes of an [h, w, c] map -> [c].
inline Tensor global_avgpool_hw(Tensor x) {
    if (x.rank() != 3) throw DimensionError("global_avgpool_hw: expected [h,w,c]");
    const int h = x.dim(0), w = x.dim(1), c = x.dim(2);
    const bool track = detail::tracing() && x.requires_grad();
    Tensor out = detail::out_like(Shape{c}, track);
    const double inv = 1.0 / (static_cast<double>(h) * w);
    for (int i = 0; i < h * w; ++i)
        for (int k = 0; k < c; ++k) out.data()[k] += x.data()[i * c + k];
    for (int k = 0; k < c; ++k) out.data()[k] *= inv;
    out.check_finite("global_avgpool_hw");
    if (track) {
        detail::record("global_avgpool_hw", [x, out, h, w, c, inv]() mutable {
            const auto& g = out.grad();
            for (int i = 0; i < h * w; ++i)
                for (int k = 0; k < c; ++k) x.grad()[i * c + k] += g[k] * inv;
        });
    }
    return out;
}

/// Nearest-neighbour upsampling of an [h, w, c] map by integer factor f.
inline Tensor upsample_nearest(Tensor x, int f) {
    if (x.rank() != 3) throw DimensionError("upsample_nearest: expected [h,w,c]");
    if (f <= 0) throw DimensionError("upsample_nearest: factor must be positive");
    const int h = x.dim(0), w = x.dim(1), c = x.dim(2);
    const int oh = h * f, ow = w * f;
    const bool track = detail::tracing() && x.requires_grad();
    Tensor out = detail::out_like(Shape{oh, ow, c}, track);
    for (int i = 0; i < oh; ++i)
        for (int j = 0; j < ow; ++j) {
            const double* src = x.data().data() + ((i / f) * w + (j / f)) * c;
            double* dst = out.data().data() + (i * ow + j) * c;
            for (int k = 0; k < c; ++k) dst[k] = src[k];
        }
    if (track) {
        detail::record("upsample_nearest", [x, out, w, c, f, oh, ow]() mutable {
            const auto& g = out.grad();
            for (int i = 0; i < oh; ++i)
                for (int j = 0; j < ow; ++j) {
                    double* dst = x.grad().data() + ((i / f) * w + (j / f)) * c;
                    const double* src = g.data() + (i * ow + j) * c;
                    for (int k = 0; k < c; ++k) dst[k] += src[k];
                }
        });
    }
    return out;
}

/// Concatenate along `axis`; all other dims must agree.
inline Tensor concat(std::vector<Tensor> parts, int axis) {
    if (parts.empty()) throw DimensionError("concat: no inputs");
    const int rank = parts[0].rank();
    if (axis < 0 || axis >= rank) throw DimensionError("concat: axis out of range");
    Shape out_shape = parts[0].shape();
    int total_axis = 0;
    bool any_grad = false;
    for (Tensor t : parts) {
        if (t.rank() != rank) throw DimensionError("concat: rank mismatch");
        for (int i = 0; i < rank; ++i)
            if (i != axis && t.dim(i) != out_shape[static_cast<std::size_t>(i)])
                throw DimensionError("concat: dim mismatch off-axis");
        total_axis += t.dim(axis);
        any_grad = any_grad || t.requires_grad();
    }
    out_shape[static_cast<std::size_t>(axis)] = total_axis;

    std::int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= out_shape[static_cast<std::size_t>(i)];
    for (int i = axis + 1; i < rank; ++i) inner *= out_shape[static_cast<std::size_t>(i)];

    const bool track = detail::tracing() && any_grad;
    Tensor out = detail::out_like(out_shape, track);
    std::int64_t offset = 0;
    for (Tensor t : parts) {
        const std::int64_t block = t.dim(axis) * inner;
        for (std::int64_t o = 0; o < outer; ++o)
            std::copy_n(t.data().data() + o * block, block,
                        out.data().data() + o * total_axis * inner + offset);
        offset += block;
    }
    if (track) {
        detail::record("concat", [parts = std::move(parts), out, outer, inner, total_axis]() mutable {
            const auto& g = out.grad();
            std::int64_t off = 0;
            for (Tensor& t : parts) {
                const std::int64_t block = (t.size() / (outer * inner)) * inner;
                if (t.requires_grad())
                    for (std::int64_t o = 0; o < outer; ++o) {
                        const double* src = g.data() + o * total_axis * inner + off;
                        double* dst = t.grad().data() + o * block;
                        for (std::int64_t i = 0; i < block; ++i) dst[i] += src[i];
                    }
                off += block;
            }
        });
    }
    return out;
}

/// Contiguous slice of the last axis.
inline Tensor slice_lastdim(Tensor x, int offset, int len) {
    if (x.rank() < 1) throw DimensionError("slice_lastdim: empty shape");
    const int L = x.dim(x.rank() - 1);
    if (offset < 0 || len <= 0 || offset + len > L) throw DimensionError("slice_lastdim: bad range");
    Shape out_shape = x.shape();
    out_shape.back() = len;
    const std::int64_t rows = x.size() / L;
    const bool track = detail::tracing() && x.requires_grad();
    Tensor out = detail::out_like(out_shape, track);
    for (std::int64_t r = 0; r < rows; ++r)
        std::copy_n(x.data().data() + r * L + offset, len, out.data().data() + r * len);
    if (track) {
        detail::record("slice_lastdim", [x, out, rows, L, offset, len]() mutable {
            const auto& g = out.grad();
            for (std::int64_t r = 0; r < rows; ++r)
                for (int i = 0; i < len; ++i) x.grad()[r * L + offset + i] += g[r * len + i];
        });
    }
    return out;
}

/// Rows of a rank-2 tensor selected by index (duplicates allowed).
inline Tensor gather_rows(Tensor x, const std::vector<int>& idx) {
    if (x.rank() != 2) throw DimensionError("gather_rows: expected [n, c]");
    const int n = x.dim(0), c = x.dim(1);
    for (int i : idx)
        if (i < 0 || i >= n) throw DimensionError("gather_rows: index out of range");
    const int m = static_cast<int>(idx.size());
    const bool track = detail::tracing() && x.requires_grad();
    Tensor out = detail::out_like(Shape{m, c}, track);
    for (int r = 0; r < m; ++r)
        std::copy_n(x.data().data() + static_cast<std::int64_t>(idx[static_cast<std::size_t>(r)]) * c,
                    c, out.data().data() + static_cast<std::int64_t>(r) * c);
    if (track) {
        detail::record("gather_rows", [x, out, idx, c, m]() mutable {
            const auto& g = out.grad();
            for (int r = 0; r < m; ++r) {
                double* dst = x.grad().data() + static_cast<std::int64_t>(idx[static_cast<std::size_t>(r)]) * c;
                const double* src = g.data() + static_cast<std::int64_t>(r) * c;
                for (int k = 0; k < c; ++k) dst[k] += src[k];
            }
        });
    }
    return out;
}

/// Copying reshape; element count must be preserved.
inline Tensor reshape(Tensor x, Shape new_shape) {
    if (shape_numel(new_shape) != x.size())
        throw DimensionError("reshape: element count mismatch " + shape_str(x.shape()) + " -> " +
                             shape_str(new_shape));
    const bool track = detail::tracing() && x.requires_grad();
    Tensor out = detail::out_like(std::move(new_shape), track);
    out.data() = x.data();
    if (track) {
        detail::record("reshape", [x, out]() mutable {
            const auto& g = out.grad();
            for (std::size_t i = 0; i < g.size(); ++i) x.grad()[i] += g[i];
        });
    }
    return out;
}

/// [h, w, c] -> [h/s, w/s, s, s, c] non-overlapping windows. Exact inverse of
/// window_merge.
inline Tensor window_split(Tensor x, int s) {
    if (x.rank() != 3) throw DimensionError("window_split: expected [h,w,c]");
    const int h = x.dim(0), w = x.dim(1), c = x.dim(2);
    if (s <= 0 || h % s != 0 || w % s != 0)
        throw DimensionError("window_split: dims not divisible by window " + std::to_string(s));
    const int nh = h / s, nw = w / s;
    const bool track = detail::tracing() && x.requires_grad();
    Tensor out = detail::out_like(Shape{nh, nw, s, s, c}, track);
    for (int wi = 0; wi < nh; ++wi)
        for (int wj = 0; wj < nw; ++wj)
            for (int a = 0; a < s; ++a)
                for (int bcol = 0; bcol < s; ++bcol) {
                    const double* src = x.data().data() + ((wi * s + a) * w + (wj * s + bcol)) * c;
                    double* dst = out.data().data() +
                                  ((((wi * nw + wj) * s + a) * s) + bcol) * c;
                    for (int k = 0; k < c; ++k) dst[k] = src[k];
                }
    if (track) {
        detail::record("window_split", [x, out, w, c, s, nh, nw]() mutable {
            const auto& g = out.grad();
            for (int wi = 0; wi < nh; ++wi)
                for (int wj = 0; wj < nw; ++wj)
                    for (int a = 0; a < s; ++a)
                        for (int bcol = 0; bcol < s; ++bcol) {
                            double* dst = x.grad().data() + ((wi * s + a) * w + (wj * s + bcol)) * c;
                            const double* src = g.data() + ((((wi * nw + wj) * s + a) * s) + bcol) * c;
                            for (int k = 0; k < c; ++k) dst[k] += src[k];
                        }
        });
    }
    return out;
}

/// [h/s, w/s, s, s, c] -> [h, w, c]; inverse of window_split.
inline Tensor window_merge(Tensor x) {
    if (x.rank() != 5) throw DimensionError("window_merge: expected [nh,nw,s,s,c]");
    const int nh = x.dim(0), nw = x.dim(1), s = x.dim(2), c = x.dim(4);
    if (x.dim(3) != s) throw DimensionError("window_merge: windows must be square");
    const int h = nh * s, w = nw * s;
    const bool track = detail::tracing() && x.requires_grad();
    Tensor out = detail::out_like(Shape{h, w, c}, track);
    for (int wi = 0; wi < nh; ++wi)
        for (int wj = 0; wj < nw; ++wj)
            for (int a = 0; a < s; ++a)
                for (int bcol = 0; bcol < s; ++bcol) {
                    const double* src = x.data().data() + ((((wi * nw + wj) * s + a) * s) + bcol) * c;
                    double* dst = out.data().data() + ((wi * s + a) * w + (wj * s + bcol)) * c;
                    for (int k = 0; k < c; ++k) dst[k] = src[k];
                }
    if (track) {
        detail::record("window_merge", [x, out, w, c, s, nh, nw]() mutable {
            const auto& g = out.grad();
            for (int wi = 0; wi < nh; ++wi)
                for (int wj = 0; wj < nw; ++wj)
                    for (int a = 0; a < s; ++a)
                        for (int bcol = 0; bcol < s; ++bcol) {
                            double* dst = x.grad().data() + ((((wi * nw + wj) * s + a) * s) + bcol) * c;
                            const double* src = g.data() + ((wi * s + a) * w + (wj * s + bcol)) * c;
                            for (int k = 0; k < c; ++k) dst[k] += src[k];
                        }
        });
    }
    return out;
}

/// [h, w, c] -> [h/p, w/p, p*p*c]: each p x p patch flattened into the channel
/// axis (patch row-major, channels innermost).
inline Tensor space_to_patches(Tensor x, int p) {
    if (x.rank() != 3) throw DimensionError("space_to_patches: expected [h,w,c]");
    const int h = x.dim(0), w = x.dim(1), c = x.dim(2);
    if (p <= 0 || h % p != 0 || w % p != 0)
        throw DimensionError("space_to_patches: dims " + shape_str(x.shape()) +
                             " not divisible by patch " + std::to_string(p));
    const int oh = h / p, ow = w / p;
    const bool track = detail::tracing() && x.requires_grad();
    Tensor out = detail::out_like(Shape{oh, ow, p * p * c}, track);
    for (int i = 0; i < oh; ++i)
        for (int j = 0; j < ow; ++j) {
            double* dst = out.data().data() + (static_cast<std::int64_t>(i) * ow + j) * p * p * c;
            for (int a = 0; a < p; ++a)
                for (int bcol = 0; bcol < p; ++bcol) {
                    const double* src = x.data().data() + ((i * p + a) * w + (j * p + bcol)) * c;
                    for (int k = 0; k < c; ++k) dst[(a * p + bcol) * c + k] = src[k];
                }
        }
    if (track) {
        detail::record("space_to_patches", [x, out, w, c, p, oh, ow]() mutable {
            const auto& g = out.grad();
            for (int i = 0; i < oh; ++i)
                for (int j = 0; j < ow; ++j) {
                    const double* src = g.data() + (static_cast<std::int64_t>(i) * ow + j) * p * p * c;
                    for (int a = 0; a < p; ++a)
                        for (int bcol = 0; bcol < p; ++bcol) {
                            double* dst = x.grad().data() + ((i * p + a) * w + (j * p + bcol)) * c;
                            for (int k = 0; k < c; ++k) dst[k] += src[(a * p + bcol) * c + k];
                        }
                }
        });
    }
    return out;
}

/// Per-channel gate: out[i,j,k] = x[i,j,k] * gate[k].
inline Tensor mul_channels(Tensor x, Tensor gate) {
    if (x.rank() != 3 || gate.rank() != 1 || gate.dim(0) != x.dim(2))
        throw DimensionError("mul_channels: expected [h,w,c] and gate [c]");
    const int hw = x.dim(0) * x.dim(1), c = x.dim(2);
    const bool track = detail::tracing() && (x.requires_grad() || gate.requires_grad());
    Tensor out = detail::out_like(x.shape(), track);
    for (int i = 0; i < hw; ++i)
        for (int k = 0; k < c; ++k) out.data()[i * c + k] = x.data()[i * c + k] * gate.data()[k];
    out.check_finite("mul_channels");
    if (track) {
        detail::record("mul_channels", [x, gate, out, hw, c]() mutable {
            const auto& g = out.grad();
            if (x.requires_grad())
                for (int i = 0; i < hw; ++i)
                    for (int k = 0; k < c; ++k) x.grad()[i * c + k] += g[i * c + k] * gate.data()[k];
            if (gate.requires_grad())
                for (int i = 0; i < hw; ++i)
                    for (int k = 0; k < c; ++k) gate.grad()[k] += g[i * c + k] * x.data()[i * c + k];
        });
    }
    return out;
}

inline Tensor sum_all(Tensor x) {
    const bool track = detail::tracing() && x.requires_grad();
    Tensor out = detail::out_like(Shape{1}, track);
    double acc = 0.0;
    for (double v : x.data()) acc += v;
    out.data()[0] = acc;
    out.check_finite("sum_all");
    if (track) {
        detail::record("sum_all", [x, out]() mutable {
            const double g = out.grad()[0];
            for (std::size_t i = 0; i < x.data().size(); ++i) x.grad()[i] += g;
        });
    }
    return out;
}

inline Tensor mean_all(Tensor x) {
    return scale(sum_all(x), 1.0 / static_cast<double>(x.size()));
}

/// (1/N) * sum((a-b)^2) with N the element count.
inline Tensor mse_mean(Tensor a, Tensor b) {
    detail::require_same_shape(a, b, "mse_mean");
    const bool track = detail::tracing() && (a.requires_grad() || b.requires_grad());
    Tensor out = detail::out_like(Shape{1}, track);
    const std::size_t n = a.data().size();
    const double inv = 1.0 / static_cast<double>(n);
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double d = a.data()[i] - b.data()[i];
        acc += d * d;
    }
    out.data()[0] = acc * inv;
    out.check_finite("mse_mean");
    if (track) {
        detail::record("mse_mean", [a, b, out, inv]() mutable {
            const double g = out.grad()[0];
            const std::size_t n2 = a.data().size();
            for (std::size_t i = 0; i < n2; ++i) {
                const double d = 2.0 * (a.data()[i] - b.data()[i]) * inv * g;
                if (a.requires_grad()) a.grad()[i] += d;
                if (b.requires_grad()) b.grad()[i] -= d;
            }
        });
    }
    return out;
}

} // namespace fedst
