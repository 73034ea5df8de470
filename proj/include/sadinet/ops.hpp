#pragma once

// Differentiable primitives over sadi::Tensor. Every op computes its forward
// value eagerly and, when recording is active, registers one backward rule on
// the tape. Shape rules are checked up front and rejected with diagnostics
// naming the offending dimension.
//
// Reduction order inside every kernel is fixed, so results are bit-identical
// across runs and thread counts (parallel loops assign each output element to
// exactly one thread).

#include <array>
#include <cmath>
#include <cstring>
#include <limits>

#include "sadinet/tensor.hpp"

namespace sadi {

namespace detail {

// ---- small GEMM kernels (row-major) ----

// C[M,N] = A[M,K] * B[K,N], optionally accumulating into C.
inline void gemm(const double* A, const double* B, double* C, int M, int K, int N,
                 bool accumulate) {
#pragma omp parallel for schedule(static) if (static_cast<long long>(M) * K * N > 16384)
    for (int i = 0; i < M; ++i) {
        double* c = C + static_cast<std::size_t>(i) * N;
        if (!accumulate) std::fill(c, c + N, 0.0);
        const double* a = A + static_cast<std::size_t>(i) * K;
        for (int k = 0; k < K; ++k) {
            const double av = a[k];
            const double* b = B + static_cast<std::size_t>(k) * N;
            for (int j = 0; j < N; ++j) c[j] += av * b[j];
        }
    }
}

// C[M,N] = A[M,K] * B[K,N] with each row initialized to a constant (0 when
// bias is null): the fused conv/linear bias path.
inline void gemm_bias(const double* A, const double* B, double* C, int M, int K, int N,
                      const double* row_bias) {
#pragma omp parallel for schedule(static) if (static_cast<long long>(M) * K * N > 16384)
    for (int i = 0; i < M; ++i) {
        double* c = C + static_cast<std::size_t>(i) * N;
        std::fill(c, c + N, row_bias ? row_bias[i] : 0.0);
        const double* a = A + static_cast<std::size_t>(i) * K;
        for (int k = 0; k < K; ++k) {
            const double av = a[k];
            const double* b = B + static_cast<std::size_t>(k) * N;
            for (int j = 0; j < N; ++j) c[j] += av * b[j];
        }
    }
}

// C[M,N] += A[M,K] * B[N,K]^T  (dot products of contiguous rows)
inline void gemm_abt(const double* A, const double* B, double* C, int M, int K, int N,
                     bool accumulate) {
#pragma omp parallel for schedule(static) if (static_cast<long long>(M) * K * N > 16384)
    for (int i = 0; i < M; ++i) {
        const double* a = A + static_cast<std::size_t>(i) * K;
        double* c = C + static_cast<std::size_t>(i) * N;
        for (int j = 0; j < N; ++j) {
            const double* b = B + static_cast<std::size_t>(j) * K;
            double acc = 0.0;
            for (int k = 0; k < K; ++k) acc += a[k] * b[k];
            c[j] = accumulate ? c[j] + acc : acc;
        }
    }
}

// C[M,N] += A[P,M]^T * B[P,N]
inline void gemm_atb(const double* A, const double* B, double* C, int P, int M, int N,
                     bool accumulate) {
#pragma omp parallel for schedule(static) if (static_cast<long long>(P) * M * N > 16384)
    for (int i = 0; i < M; ++i) {
        double* c = C + static_cast<std::size_t>(i) * N;
        if (!accumulate) std::fill(c, c + N, 0.0);
        for (int p = 0; p < P; ++p) {
            const double av = A[static_cast<std::size_t>(p) * M + i];
            const double* b = B + static_cast<std::size_t>(p) * N;
            for (int j = 0; j < N; ++j) c[j] += av * b[j];
        }
    }
}

inline void require(bool cond, const std::string& msg) {
    if (!cond) throw std::invalid_argument(msg);
}

inline void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) {
        throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                                    " vs " + shape_str(b.shape()));
    }
}

inline void check_axis(const char* op, const Tensor& x, int axis) {
    if (axis < 0 || axis >= x.rank()) {
        throw std::invalid_argument(std::string(op) + ": axis " + std::to_string(axis) +
                                    " out of range for shape " + shape_str(x.shape()));
    }
}

// Splits a shape at `axis` into (outer, mid, inner) strides for reductions.
struct AxisSplit {
    std::int64_t outer, mid, inner;
};
inline AxisSplit split_axis(const Shape& s, int axis) {
    AxisSplit r{1, s[static_cast<std::size_t>(axis)], 1};
    for (int i = 0; i < axis; ++i) r.outer *= s[static_cast<std::size_t>(i)];
    for (int i = axis + 1; i < static_cast<int>(s.size()); ++i) r.inner *= s[static_cast<std::size_t>(i)];
    return r;
}

}  // namespace detail

// ---- elementwise arithmetic ----

inline Tensor add(const Tensor& a, const Tensor& b) {
    detail::require_same_shape("add", a, b);
    Tensor y = Tensor::uninitialized(a.shape());
    const std::int64_t n = a.numel();
    const double *av = a.data(), *bv = b.data();
    double* yv = y.data();
#pragma omp parallel for schedule(static) if (n > 32768)
    for (std::int64_t i = 0; i < n; ++i) yv[i] = av[i] + bv[i];
    auto ad = a.rep(), bd = b.rep(), yd = y.rep();
    detail::record("add", {a, b}, y, [ad, bd, yd] {
        const auto& og = yd->g;
        if (detail::takes_grad(ad)) {
            auto& ag = detail::grad_of(ad);
            for (std::size_t i = 0; i < og.size(); ++i) ag[i] += og[i];
        }
        if (detail::takes_grad(bd)) {
            auto& bg = detail::grad_of(bd);
            for (std::size_t i = 0; i < og.size(); ++i) bg[i] += og[i];
        }
    });
    return y;
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    detail::require_same_shape("sub", a, b);
    Tensor y = Tensor::uninitialized(a.shape());
    const std::int64_t n = a.numel();
    const double *av = a.data(), *bv = b.data();
    double* yv = y.data();
#pragma omp parallel for schedule(static) if (n > 32768)
    for (std::int64_t i = 0; i < n; ++i) yv[i] = av[i] - bv[i];
    auto ad = a.rep(), bd = b.rep(), yd = y.rep();
    detail::record("sub", {a, b}, y, [ad, bd, yd] {
        const auto& og = yd->g;
        if (detail::takes_grad(ad)) {
            auto& ag = detail::grad_of(ad);
            for (std::size_t i = 0; i < og.size(); ++i) ag[i] += og[i];
        }
        if (detail::takes_grad(bd)) {
            auto& bg = detail::grad_of(bd);
            for (std::size_t i = 0; i < og.size(); ++i) bg[i] -= og[i];
        }
    });
    return y;
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    detail::require_same_shape("mul", a, b);
    Tensor y = Tensor::uninitialized(a.shape());
    const std::int64_t n = a.numel();
    const double *av = a.data(), *bv = b.data();
    double* yv = y.data();
#pragma omp parallel for schedule(static) if (n > 32768)
    for (std::int64_t i = 0; i < n; ++i) yv[i] = av[i] * bv[i];
    auto ad = a.rep(), bd = b.rep(), yd = y.rep();
    detail::record("mul", {a, b}, y, [ad, bd, yd] {
        const auto& og = yd->g;
        if (detail::takes_grad(ad)) {
            auto& ag = detail::grad_of(ad);
            for (std::size_t i = 0; i < og.size(); ++i) ag[i] += og[i] * bd->v[i];
        }
        if (detail::takes_grad(bd)) {
            auto& bg = detail::grad_of(bd);
            for (std::size_t i = 0; i < og.size(); ++i) bg[i] += og[i] * ad->v[i];
        }
    });
    return y;
}

inline Tensor div(const Tensor& a, const Tensor& b) {
    detail::require_same_shape("div", a, b);
    Tensor y = Tensor::uninitialized(a.shape());
    const std::int64_t n = a.numel();
    const double *av = a.data(), *bv = b.data();
    double* yv = y.data();
    for (std::int64_t i = 0; i < n; ++i) yv[i] = av[i] / bv[i];
    auto ad = a.rep(), bd = b.rep(), yd = y.rep();
    detail::record("div", {a, b}, y, [ad, bd, yd] {
        const auto& og = yd->g;
        if (detail::takes_grad(ad)) {
            auto& ag = detail::grad_of(ad);
            for (std::size_t i = 0; i < og.size(); ++i) ag[i] += og[i] / bd->v[i];
        }
        if (detail::takes_grad(bd)) {
            auto& bg = detail::grad_of(bd);
            for (std::size_t i = 0; i < og.size(); ++i)
                bg[i] -= og[i] * ad->v[i] / (bd->v[i] * bd->v[i]);
        }
    });
    return y;
}

inline Tensor neg(const Tensor& x) {
    Tensor y = Tensor::uninitialized(x.shape());
    const std::int64_t n = x.numel();
    const double* xv = x.data();
    double* yv = y.data();
    for (std::int64_t i = 0; i < n; ++i) yv[i] = -xv[i];
    auto xd = x.rep(), yd = y.rep();
    detail::record("neg", {x}, y, [xd, yd] {
        if (!detail::takes_grad(xd)) return;
        auto& xg = detail::grad_of(xd);
        for (std::size_t i = 0; i < yd->g.size(); ++i) xg[i] -= yd->g[i];
    });
    return y;
}

inline Tensor add_scalar(const Tensor& x, double c) {
    Tensor y = Tensor::uninitialized(x.shape());
    const std::int64_t n = x.numel();
    const double* xv = x.data();
    double* yv = y.data();
    for (std::int64_t i = 0; i < n; ++i) yv[i] = xv[i] + c;
    auto xd = x.rep(), yd = y.rep();
    detail::record("add_scalar", {x}, y, [xd, yd] {
        if (!detail::takes_grad(xd)) return;
        auto& xg = detail::grad_of(xd);
        for (std::size_t i = 0; i < yd->g.size(); ++i) xg[i] += yd->g[i];
    });
    return y;
}

inline Tensor mul_scalar(const Tensor& x, double c) {
    Tensor y = Tensor::uninitialized(x.shape());
    const std::int64_t n = x.numel();
    const double* xv = x.data();
    double* yv = y.data();
    for (std::int64_t i = 0; i < n; ++i) yv[i] = xv[i] * c;
    auto xd = x.rep(), yd = y.rep();
    detail::record("mul_scalar", {x}, y, [xd, yd, c] {
        if (!detail::takes_grad(xd)) return;
        auto& xg = detail::grad_of(xd);
        for (std::size_t i = 0; i < yd->g.size(); ++i) xg[i] += c * yd->g[i];
    });
    return y;
}

// ---- nonlinearities ----

inline Tensor relu(const Tensor& x) {
    Tensor y = Tensor::uninitialized(x.shape());
    const std::int64_t n = x.numel();
    const double* xv = x.data();
    double* yv = y.data();
#pragma omp parallel for schedule(static) if (n > 32768)
    for (std::int64_t i = 0; i < n; ++i) yv[i] = xv[i] > 0.0 ? xv[i] : 0.0;
    auto xd = x.rep(), yd = y.rep();
    detail::record("relu", {x}, y, [xd, yd] {
        if (!detail::takes_grad(xd)) return;
        auto& xg = detail::grad_of(xd);
        for (std::size_t i = 0; i < yd->g.size(); ++i)
            if (xd->v[i] > 0.0) xg[i] += yd->g[i];
    });
    return y;
}

inline Tensor sigmoid(const Tensor& x) {
    Tensor y = Tensor::uninitialized(x.shape());
    const std::int64_t n = x.numel();
    const double* xv = x.data();
    double* yv = y.data();
#pragma omp parallel for schedule(static) if (n > 32768)
    for (std::int64_t i = 0; i < n; ++i) yv[i] = 1.0 / (1.0 + std::exp(-xv[i]));
    auto xd = x.rep(), yd = y.rep();
    detail::record("sigmoid", {x}, y, [xd, yd] {
        if (!detail::takes_grad(xd)) return;
        auto& xg = detail::grad_of(xd);
        for (std::size_t i = 0; i < yd->g.size(); ++i) {
            const double s = yd->v[i];
            xg[i] += yd->g[i] * s * (1.0 - s);
        }
    });
    return y;
}

inline Tensor tanh(const Tensor& x) {
    Tensor y = Tensor::uninitialized(x.shape());
    const std::int64_t n = x.numel();
    const double* xv = x.data();
    double* yv = y.data();
#pragma omp parallel for schedule(static) if (n > 32768)
    for (std::int64_t i = 0; i < n; ++i) yv[i] = std::tanh(xv[i]);
    auto xd = x.rep(), yd = y.rep();
    detail::record("tanh", {x}, y, [xd, yd] {
        if (!detail::takes_grad(xd)) return;
        auto& xg = detail::grad_of(xd);
        for (std::size_t i = 0; i < yd->g.size(); ++i)
            xg[i] += yd->g[i] * (1.0 - yd->v[i] * yd->v[i]);
    });
    return y;
}

// exp with the inputs clamped to +-700 so the forward value never overflows.
inline Tensor exp(const Tensor& x) {
    Tensor y = Tensor::uninitialized(x.shape());
    const std::int64_t n = x.numel();
    const double* xv = x.data();
    double* yv = y.data();
#pragma omp parallel for schedule(static) if (n > 32768)
    for (std::int64_t i = 0; i < n; ++i) {
        const double c = std::clamp(xv[i], -700.0, 700.0);
        yv[i] = std::exp(c);
    }
    auto xd = x.rep(), yd = y.rep();
    detail::record("exp", {x}, y, [xd, yd] {
        if (!detail::takes_grad(xd)) return;
        auto& xg = detail::grad_of(xd);
        for (std::size_t i = 0; i < yd->g.size(); ++i) {
            if (xd->v[i] > -700.0 && xd->v[i] < 700.0) xg[i] += yd->g[i] * yd->v[i];
        }
    });
    return y;
}

// log with the inputs clamped below at 1e-300; the forward value stays finite.
inline Tensor log(const Tensor& x) {
    Tensor y = Tensor::uninitialized(x.shape());
    const std::int64_t n = x.numel();
    const double* xv = x.data();
    double* yv = y.data();
    for (std::int64_t i = 0; i < n; ++i) yv[i] = std::log(std::max(xv[i], 1e-300));
    auto xd = x.rep(), yd = y.rep();
    detail::record("log", {x}, y, [xd, yd] {
        if (!detail::takes_grad(xd)) return;
        auto& xg = detail::grad_of(xd);
        for (std::size_t i = 0; i < yd->g.size(); ++i) {
            if (xd->v[i] > 1e-300) xg[i] += yd->g[i] / xd->v[i];
        }
    });
    return y;
}

inline Tensor softplus(const Tensor& x) {
    Tensor y = Tensor::uninitialized(x.shape());
    const std::int64_t n = x.numel();
    const double* xv = x.data();
    double* yv = y.data();
    for (std::int64_t i = 0; i < n; ++i) {
        const double v = xv[i];
        yv[i] = v > 30.0 ? v : std::log1p(std::exp(v));
    }
    auto xd = x.rep(), yd = y.rep();
    detail::record("softplus", {x}, y, [xd, yd] {
        if (!detail::takes_grad(xd)) return;
        auto& xg = detail::grad_of(xd);
        for (std::size_t i = 0; i < yd->g.size(); ++i)
            xg[i] += yd->g[i] / (1.0 + std::exp(-xd->v[i]));
    });
    return y;
}

// ---- shape ops ----

inline Tensor reshape(const Tensor& x, Shape shape) {
    if (numel_of(shape) != x.numel()) {
        throw std::invalid_argument("reshape: cannot view " + shape_str(x.shape()) + " as " +
                                    shape_str(shape));
    }
    Tensor y = Tensor::uninitialized(std::move(shape));
    std::copy(x.values().begin(), x.values().end(), y.values().begin());
    auto xd = x.rep(), yd = y.rep();
    detail::record("reshape", {x}, y, [xd, yd] {
        if (!detail::takes_grad(xd)) return;
        auto& xg = detail::grad_of(xd);
        for (std::size_t i = 0; i < yd->g.size(); ++i) xg[i] += yd->g[i];
    });
    return y;
}

// Right-aligned broadcast: each input dim must equal the target dim or be 1.
// A single contiguous run of broadcast axes (the common case: leading tile,
// per-row bias, repeated middle) runs as block copies; anything else falls
// back to generic strided indexing.
inline Tensor broadcast_to(const Tensor& x, const Shape& shape) {
    const int rx = x.rank(), ry = static_cast<int>(shape.size());
    detail::require(rx <= ry, "broadcast_to: source rank " + std::to_string(rx) +
                                  " exceeds target rank " + std::to_string(ry));
    // Source strides aligned to the target axes (0 stride where broadcast).
    std::vector<std::int64_t> xstride(static_cast<std::size_t>(ry), 0);
    std::int64_t s = 1;
    for (int i = rx - 1; i >= 0; --i) {
        const int xi = x.dim(i);
        const int yi = shape[static_cast<std::size_t>(i + ry - rx)];
        if (xi != yi && xi != 1) {
            throw std::invalid_argument("broadcast_to: dim " + std::to_string(i) + " of " +
                                        shape_str(x.shape()) + " incompatible with " + shape_str(shape));
        }
        xstride[static_cast<std::size_t>(i + ry - rx)] = (xi == 1 && yi != 1) ? 0 : s;
        s *= xi;
    }
    Tensor y = Tensor::uninitialized(shape);
    const std::int64_t n = y.numel();
    const double* xv = x.data();
    double* yv = y.data();

    // (outer, repeat, inner) decomposition when the zero-stride axes form one run
    std::int64_t outer = 1, repeat = 1, inner = 1;
    {
        int first = -1, last = -1;
        bool contiguous = true;
        for (int i = 0; i < ry; ++i) {
            const bool zero = xstride[static_cast<std::size_t>(i)] == 0 &&
                              shape[static_cast<std::size_t>(i)] != 1;
            if (!zero) continue;
            if (first < 0) first = i;
            else if (i != last + 1) contiguous = false;
            last = i;
        }
        if (first < 0) {  // no broadcasting at all
            std::copy(xv, xv + n, yv);
            outer = -1;  // marks the plain-copy case
        } else if (contiguous) {
            for (int i = 0; i < first; ++i) outer *= shape[static_cast<std::size_t>(i)];
            for (int i = first; i <= last; ++i) repeat *= shape[static_cast<std::size_t>(i)];
            for (int i = last + 1; i < ry; ++i) inner *= shape[static_cast<std::size_t>(i)];
        } else {
            outer = 0;  // marks the generic fallback
        }
    }

    std::vector<std::int64_t> ystride(static_cast<std::size_t>(ry), 1);
    for (int i = ry - 2; i >= 0; --i)
        ystride[static_cast<std::size_t>(i)] =
            ystride[static_cast<std::size_t>(i + 1)] * shape[static_cast<std::size_t>(i + 1)];

    if (outer > 0) {
        for (std::int64_t o = 0; o < outer; ++o) {
            const double* src = xv + o * inner;
            double* dst = yv + o * repeat * inner;
            for (std::int64_t r = 0; r < repeat; ++r)
                std::copy(src, src + inner, dst + r * inner);
        }
    } else if (outer == 0) {
#pragma omp parallel for schedule(static) if (n > 32768)
        for (std::int64_t f = 0; f < n; ++f) {
            std::int64_t rem = f, src = 0;
            for (int d = 0; d < ry; ++d) {
                const std::int64_t idx = rem / ystride[static_cast<std::size_t>(d)];
                rem -= idx * ystride[static_cast<std::size_t>(d)];
                src += idx * xstride[static_cast<std::size_t>(d)];
            }
            yv[f] = xv[src];
        }
    }

    auto xd = x.rep(), yd = y.rep();
    detail::record("broadcast_to", {x}, y, [xd, yd, xstride, ystride, ry, n, outer, repeat, inner] {
        if (!detail::takes_grad(xd)) return;
        auto& xg = detail::grad_of(xd);
        const double* g = yd->g.data();
        if (outer == -1) {
            for (std::int64_t i = 0; i < n; ++i) xg[static_cast<std::size_t>(i)] += g[i];
        } else if (outer > 0) {
            for (std::int64_t o = 0; o < outer; ++o) {
                double* dst = xg.data() + o * inner;
                const double* src = g + o * repeat * inner;
                for (std::int64_t r = 0; r < repeat; ++r)
                    for (std::int64_t i = 0; i < inner; ++i) dst[i] += src[r * inner + i];
            }
        } else {
            for (std::int64_t f = 0; f < n; ++f) {
                std::int64_t rem = f, src = 0;
                for (int d = 0; d < ry; ++d) {
                    const std::int64_t idx = rem / ystride[static_cast<std::size_t>(d)];
                    rem -= idx * ystride[static_cast<std::size_t>(d)];
                    src += idx * xstride[static_cast<std::size_t>(d)];
                }
                xg[static_cast<std::size_t>(src)] += yd->g[static_cast<std::size_t>(f)];
            }
        }
    });
    return y;
}

inline Tensor concat(const std::vector<Tensor>& xs, int axis) {
    detail::require(!xs.empty(), "concat: no inputs");
    detail::check_axis("concat", xs[0], axis);
    Shape out = xs[0].shape();
    for (std::size_t i = 1; i < xs.size(); ++i) {
        detail::require(xs[i].rank() == xs[0].rank(), "concat: rank mismatch between inputs");
        for (int d = 0; d < xs[0].rank(); ++d) {
            if (d != axis && xs[i].dim(d) != xs[0].dim(d)) {
                throw std::invalid_argument("concat: dim " + std::to_string(d) + " mismatch " +
                                            shape_str(xs[i].shape()) + " vs " + shape_str(xs[0].shape()));
            }
        }
        out[static_cast<std::size_t>(axis)] += xs[i].dim(axis);
    }
    Tensor y = Tensor::uninitialized(out);
    const auto sp = detail::split_axis(out, axis);
    double* yv = y.data();
    std::int64_t mid_off = 0;
    for (const Tensor& x : xs) {
        const auto sx = detail::split_axis(x.shape(), axis);
        const double* xv = x.data();
        for (std::int64_t o = 0; o < sx.outer; ++o)
            std::memcpy(yv + (o * sp.mid + mid_off) * sp.inner, xv + o * sx.mid * sx.inner,
                        static_cast<std::size_t>(sx.mid * sx.inner) * sizeof(double));
        mid_off += sx.mid;
    }
    std::vector<std::shared_ptr<TensorData>> reps;
    for (const Tensor& x : xs) reps.push_back(x.rep());
    auto yd = y.rep();
    // record() takes an initializer_list; build the node by hand for variadic inputs
    if (Graph::recording()) {
        bool any = false;
        for (const Tensor& x : xs) any = any || detail::wants_grad(x);
        if (any) {
            std::vector<int> ids;
            for (const Tensor& x : xs) ids.push_back(x.node());
            Graph::active()->add_node("concat", std::move(ids), yd, [reps, yd, sp, axis] {
                std::int64_t off = 0;
                for (const auto& xd : reps) {
                    const auto sx = detail::split_axis(xd->shape, axis);
                    if (detail::takes_grad(xd)) {
                        auto& xg = detail::grad_of(xd);
                        for (std::int64_t o = 0; o < sx.outer; ++o) {
                            const double* src = yd->g.data() + (o * sp.mid + off) * sp.inner;
                            double* dst = xg.data() + o * sx.mid * sx.inner;
                            for (std::int64_t i = 0; i < sx.mid * sx.inner; ++i) dst[i] += src[i];
                        }
                    }
                    off += sx.mid;
                }
            });
        }
    }
    return y;
}

inline Tensor slice(const Tensor& x, int axis, int start, int len) {
    detail::check_axis("slice", x, axis);
    detail::require(start >= 0 && len >= 1 && start + len <= x.dim(axis),
                    "slice: range [" + std::to_string(start) + "," + std::to_string(start + len) +
                        ") out of bounds for dim " + std::to_string(axis) + " of " +
                        shape_str(x.shape()));
    Shape out = x.shape();
    out[static_cast<std::size_t>(axis)] = len;
    Tensor y = Tensor::uninitialized(out);
    const auto sx = detail::split_axis(x.shape(), axis);
    const double* xv = x.data();
    double* yv = y.data();
    for (std::int64_t o = 0; o < sx.outer; ++o)
        std::memcpy(yv + o * len * sx.inner, xv + (o * sx.mid + start) * sx.inner,
                    static_cast<std::size_t>(len * sx.inner) * sizeof(double));
    auto xd = x.rep(), yd = y.rep();
    detail::record("slice", {x}, y, [xd, yd, sx, start, len] {
        if (!detail::takes_grad(xd)) return;
        auto& xg = detail::grad_of(xd);
        for (std::int64_t o = 0; o < sx.outer; ++o) {
            const double* src = yd->g.data() + o * len * sx.inner;
            double* dst = xg.data() + (o * sx.mid + start) * sx.inner;
            for (std::int64_t i = 0; i < len * sx.inner; ++i) dst[i] += src[i];
        }
    });
    return y;
}

// ---- reductions ----

inline Tensor sum_all(const Tensor& x) {
    double acc = 0.0;
    for (double v : x.values()) acc += v;
    Tensor y = Tensor::scalar(acc);
    auto xd = x.rep(), yd = y.rep();
    detail::record("sum_all", {x}, y, [xd, yd] {
        if (!detail::takes_grad(xd)) return;
        auto& xg = detail::grad_of(xd);
        const double g = yd->g[0];
        for (auto& e : xg) e += g;
    });
    return y;
}

inline Tensor mean_all(const Tensor& x) {
    return mul_scalar(sum_all(x), 1.0 / static_cast<double>(x.numel()));
}

// Reduction over one axis; the reduced dim is kept with extent 1.
inline Tensor sum_axis(const Tensor& x, int axis) {
    detail::check_axis("sum_axis", x, axis);
    const auto sx = detail::split_axis(x.shape(), axis);
    Shape out = x.shape();
    out[static_cast<std::size_t>(axis)] = 1;
    Tensor y(out);
    const double* xv = x.data();
    double* yv = y.data();
    for (std::int64_t o = 0; o < sx.outer; ++o)
        for (std::int64_t m = 0; m < sx.mid; ++m)
            for (std::int64_t i = 0; i < sx.inner; ++i)
                yv[o * sx.inner + i] += xv[(o * sx.mid + m) * sx.inner + i];
    auto xd = x.rep(), yd = y.rep();
    detail::record("sum_axis", {x}, y, [xd, yd, sx] {
        if (!detail::takes_grad(xd)) return;
        auto& xg = detail::grad_of(xd);
        for (std::int64_t o = 0; o < sx.outer; ++o)
            for (std::int64_t m = 0; m < sx.mid; ++m)
                for (std::int64_t i = 0; i < sx.inner; ++i)
                    xg[(o * sx.mid + m) * sx.inner + i] += yd->g[o * sx.inner + i];
    });
    return y;
}

inline Tensor mean_axis(const Tensor& x, int axis) {
    detail::check_axis("mean_axis", x, axis);
    return mul_scalar(sum_axis(x, axis), 1.0 / static_cast<double>(x.dim(axis)));
}

// Max over one axis (kept with extent 1); ties send the gradient to the lowest index.
inline Tensor reduce_max(const Tensor& x, int axis) {
    detail::check_axis("reduce_max", x, axis);
    const auto sx = detail::split_axis(x.shape(), axis);
    Shape out = x.shape();
    out[static_cast<std::size_t>(axis)] = 1;
    Tensor y = Tensor::uninitialized(out);
    std::vector<std::int64_t> arg(static_cast<std::size_t>(sx.outer * sx.inner), 0);
    const double* xv = x.data();
    double* yv = y.data();
    for (std::int64_t o = 0; o < sx.outer; ++o)
        for (std::int64_t i = 0; i < sx.inner; ++i) {
            double best = xv[(o * sx.mid) * sx.inner + i];
            std::int64_t bm = 0;
            for (std::int64_t m = 1; m < sx.mid; ++m) {
                const double v = xv[(o * sx.mid + m) * sx.inner + i];
                if (v > best) {
                    best = v;
                    bm = m;
                }
            }
            yv[o * sx.inner + i] = best;
            arg[static_cast<std::size_t>(o * sx.inner + i)] = bm;
        }
    auto xd = x.rep(), yd = y.rep();
    detail::record("reduce_max", {x}, y, [xd, yd, sx, arg] {
        if (!detail::takes_grad(xd)) return;
        auto& xg = detail::grad_of(xd);
        for (std::int64_t o = 0; o < sx.outer; ++o)
            for (std::int64_t i = 0; i < sx.inner; ++i) {
                const std::int64_t m = arg[static_cast<std::size_t>(o * sx.inner + i)];
                xg[(o * sx.mid + m) * sx.inner + i] += yd->g[o * sx.inner + i];
            }
    });
    return y;
}

inline Tensor softmax(const Tensor& x, int axis) {
    detail::check_axis("softmax", x, axis);
    const auto sx = detail::split_axis(x.shape(), axis);
    Tensor y = Tensor::uninitialized(x.shape());
    const double* xv = x.data();
    double* yv = y.data();
#pragma omp parallel for schedule(static) if (sx.outer * sx.inner > 4096)
    for (std::int64_t o = 0; o < sx.outer; ++o) {
        for (std::int64_t i = 0; i < sx.inner; ++i) {
            double mx = -std::numeric_limits<double>::infinity();
            for (std::int64_t m = 0; m < sx.mid; ++m)
                mx = std::max(mx, xv[(o * sx.mid + m) * sx.inner + i]);
            double z = 0.0;
            for (std::int64_t m = 0; m < sx.mid; ++m) {
                const double e = std::exp(xv[(o * sx.mid + m) * sx.inner + i] - mx);
                yv[(o * sx.mid + m) * sx.inner + i] = e;
                z += e;
            }
            const double inv = 1.0 / z;
            for (std::int64_t m = 0; m < sx.mid; ++m) yv[(o * sx.mid + m) * sx.inner + i] *= inv;
        }
    }
    auto xd = x.rep(), yd = y.rep();
    detail::record("softmax", {x}, y, [xd, yd, sx] {
        if (!detail::takes_grad(xd)) return;
        auto& xg = detail::grad_of(xd);
        for (std::int64_t o = 0; o < sx.outer; ++o)
            for (std::int64_t i = 0; i < sx.inner; ++i) {
                double dot = 0.0;
                for (std::int64_t m = 0; m < sx.mid; ++m) {
                    const std::int64_t f = (o * sx.mid + m) * sx.inner + i;
                    dot += yd->g[f] * yd->v[f];
                }
                for (std::int64_t m = 0; m < sx.mid; ++m) {
                    const std::int64_t f = (o * sx.mid + m) * sx.inner + i;
                    xg[f] += (yd->g[f] - dot) * yd->v[f];
                }
            }
    });
    return y;
}

// ---- linear algebra ----

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    detail::require(a.rank() == 2 && b.rank() == 2,
                    "matmul: expects rank-2 operands, got " + shape_str(a.shape()) + " and " +
                        shape_str(b.shape()));
    detail::require(a.dim(1) == b.dim(0), "matmul: inner dims differ, " + shape_str(a.shape()) +
                                              " vs " + shape_str(b.shape()));
    const int M = a.dim(0), K = a.dim(1), N = b.dim(1);
    Tensor y = Tensor::uninitialized(Shape{M, N});
    detail::gemm(a.data(), b.data(), y.data(), M, K, N, false);
    auto ad = a.rep(), bd = b.rep(), yd = y.rep();
    detail::record("matmul", {a, b}, y, [ad, bd, yd, M, K, N] {
        if (detail::takes_grad(ad)) {
            auto& ag = detail::grad_of(ad);
            detail::gemm_abt(yd->g.data(), bd->v.data(), ag.data(), M, N, K, true);
        }
        if (detail::takes_grad(bd)) {
            auto& bg = detail::grad_of(bd);
            detail::gemm_atb(ad->v.data(), yd->g.data(), bg.data(), M, K, N, true);
        }
    });
    return y;
}

// ---- convolution ----

namespace detail {

struct ConvDims {
    int N, C, H, W, O, kh, kw, OH, OW;
    int stride, padding, dilation;
};

inline ConvDims conv2d_dims(const Tensor& x, const Tensor& w, int stride, int padding,
                            int dilation) {
    require(x.rank() == 4, "conv2d: input must be [N,C,H,W], got " + shape_str(x.shape()));
    require(w.rank() == 4, "conv2d: kernel must be [O,C,kh,kw], got " + shape_str(w.shape()));
    require(stride >= 1, "conv2d: stride must be >= 1");
    require(dilation >= 1, "conv2d: dilation must be >= 1");
    require(padding >= 0, "conv2d: padding must be >= 0");
    ConvDims d{x.dim(0), x.dim(1), x.dim(2), x.dim(3), w.dim(0), w.dim(2), w.dim(3),
               0,        0,        stride,   padding,  dilation};
    if (w.dim(1) != d.C) {
        throw std::invalid_argument("conv2d: kernel channel dim " + std::to_string(w.dim(1)) +
                                    " does not match input channels " + std::to_string(d.C));
    }
    const int eh = d.H + 2 * padding - dilation * (d.kh - 1) - 1;
    const int ew = d.W + 2 * padding - dilation * (d.kw - 1) - 1;
    if (eh < 0 || ew < 0) {
        throw std::invalid_argument(
            "conv2d: output extent is not positive for input " + shape_str(x.shape()) +
            ", kernel " + shape_str(w.shape()) + ", stride " + std::to_string(stride) +
            ", padding " + std::to_string(padding) + ", dilation " + std::to_string(dilation));
    }
    d.OH = eh / stride + 1;  // floor division: trailing rows that no window covers are dropped
    d.OW = ew / stride + 1;
    return d;
}

// col[(c*kh+m)*kw + n][oy*OW + ox] = x[c][oy*s - p + m*d][ox*s - p + n*d] (0 outside)
inline void im2col(const double* x, const ConvDims& d, double* col) {
    const int HW = d.OH * d.OW;
    for (int c = 0; c < d.C; ++c) {
        for (int m = 0; m < d.kh; ++m) {
            for (int n = 0; n < d.kw; ++n) {
                double* row = col + static_cast<std::size_t>((c * d.kh + m) * d.kw + n) * HW;
                for (int oy = 0; oy < d.OH; ++oy) {
                    const int iy = oy * d.stride - d.padding + m * d.dilation;
                    if (iy < 0 || iy >= d.H) {
                        std::fill(row + oy * d.OW, row + (oy + 1) * d.OW, 0.0);
                        continue;
                    }
                    const double* xr = x + (static_cast<std::size_t>(c) * d.H + iy) * d.W;
                    for (int ox = 0; ox < d.OW; ++ox) {
                        const int ix = ox * d.stride - d.padding + n * d.dilation;
                        row[oy * d.OW + ox] = (ix >= 0 && ix < d.W) ? xr[ix] : 0.0;
                    }
                }
            }
        }
    }
}

inline void col2im_accum(const double* col, const ConvDims& d, double* x) {
    const int HW = d.OH * d.OW;
    for (int c = 0; c < d.C; ++c) {
        for (int m = 0; m < d.kh; ++m) {
            for (int n = 0; n < d.kw; ++n) {
                const double* row = col + static_cast<std::size_t>((c * d.kh + m) * d.kw + n) * HW;
                for (int oy = 0; oy < d.OH; ++oy) {
                    const int iy = oy * d.stride - d.padding + m * d.dilation;
                    if (iy < 0 || iy >= d.H) continue;
                    double* xr = x + (static_cast<std::size_t>(c) * d.H + iy) * d.W;
                    for (int ox = 0; ox < d.OW; ++ox) {
                        const int ix = ox * d.stride - d.padding + n * d.dilation;
                        if (ix >= 0 && ix < d.W) xr[ix] += row[oy * d.OW + ox];
                    }
                }
            }
        }
    }
}

}  // namespace detail

namespace detail {

// Direct stride-1 forward: shifted-row accumulation, no im2col. Row loops are
// contiguous on both sides, and the (ic, m, q) term order matches the im2col
// GEMM's reduction order.
inline void conv_fwd_direct(const double* x, const double* w, const double* bias, double* y,
                            const ConvDims& d) {
    const int HW = d.OH * d.OW;
#pragma omp parallel for schedule(static) if (d.N * d.O > 1)
    for (int t = 0; t < d.N * d.O; ++t) {
        const int n = t / d.O, oc = t % d.O;
        double* yp = y + (static_cast<std::size_t>(n) * d.O + oc) * HW;
        std::fill(yp, yp + HW, bias ? bias[oc] : 0.0);
        for (int ic = 0; ic < d.C; ++ic) {
            const double* xp = x + (static_cast<std::size_t>(n) * d.C + ic) * d.H * d.W;
            const double* wp = w + static_cast<std::size_t>(oc * d.C + ic) * d.kh * d.kw;
            for (int m = 0; m < d.kh; ++m) {
                for (int q = 0; q < d.kw; ++q) {
                    const double wv = wp[m * d.kw + q];
                    const int xoff = q * d.dilation - d.padding;
                    const int lo = std::max(0, -xoff);
                    const int hi = std::min(d.OW, d.W - xoff);
                    for (int oy = 0; oy < d.OH; ++oy) {
                        const int iy = oy - d.padding + m * d.dilation;
                        if (iy < 0 || iy >= d.H) continue;
                        const double* xr = xp + static_cast<std::size_t>(iy) * d.W + xoff;
                        double* yr = yp + static_cast<std::size_t>(oy) * d.OW;
                        for (int ox = lo; ox < hi; ++ox) yr[ox] += wv * xr[ox];
                    }
                }
            }
        }
    }
}

inline void conv_bwd_input_direct(const double* dy, const double* w, double* dx,
                                  const ConvDims& d) {
    const int HW = d.OH * d.OW;
#pragma omp parallel for schedule(static) if (d.N * d.C > 1)
    for (int t = 0; t < d.N * d.C; ++t) {
        const int n = t / d.C, ic = t % d.C;
        double* dxp = dx + (static_cast<std::size_t>(n) * d.C + ic) * d.H * d.W;
        for (int oc = 0; oc < d.O; ++oc) {
            const double* dyp = dy + (static_cast<std::size_t>(n) * d.O + oc) * HW;
            const double* wp = w + static_cast<std::size_t>(oc * d.C + ic) * d.kh * d.kw;
            for (int m = 0; m < d.kh; ++m) {
                for (int q = 0; q < d.kw; ++q) {
                    const double wv = wp[m * d.kw + q];
                    const int xoff = q * d.dilation - d.padding;  // ix = ox + xoff
                    const int lo = std::max(0, xoff);
                    const int hi = std::min(d.W, d.OW + xoff);
                    for (int iy = 0; iy < d.H; ++iy) {
                        const int oy = iy + d.padding - m * d.dilation;
                        if (oy < 0 || oy >= d.OH) continue;
                        const double* dyr = dyp + static_cast<std::size_t>(oy) * d.OW - xoff;
                        double* dxr = dxp + static_cast<std::size_t>(iy) * d.W;
                        for (int ix = lo; ix < hi; ++ix) dxr[ix] += wv * dyr[ix];
                    }
                }
            }
        }
    }
}

inline void conv_bwd_weight_direct(const double* dy, const double* x, double* dw,
                                   const ConvDims& d) {
#pragma omp parallel for schedule(static) if (d.O > 1)
    for (int oc = 0; oc < d.O; ++oc) {
        for (int ic = 0; ic < d.C; ++ic) {
            for (int m = 0; m < d.kh; ++m) {
                for (int q = 0; q < d.kw; ++q) {
                    const int xoff = q * d.dilation - d.padding;
                    const int lo = std::max(0, -xoff);
                    const int hi = std::min(d.OW, d.W - xoff);
                    double acc = 0.0;
                    for (int n = 0; n < d.N; ++n) {
                        const double* dyp =
                            dy + (static_cast<std::size_t>(n) * d.O + oc) * d.OH * d.OW;
                        const double* xp =
                            x + (static_cast<std::size_t>(n) * d.C + ic) * d.H * d.W;
                        for (int oy = 0; oy < d.OH; ++oy) {
                            const int iy = oy - d.padding + m * d.dilation;
                            if (iy < 0 || iy >= d.H) continue;
                            const double* dyr = dyp + static_cast<std::size_t>(oy) * d.OW;
                            const double* xr = xp + static_cast<std::size_t>(iy) * d.W + xoff;
                            double row = 0.0;
                            for (int ox = lo; ox < hi; ++ox) row += dyr[ox] * xr[ox];
                            acc += row;
                        }
                    }
                    dw[(static_cast<std::size_t>(oc * d.C + ic) * d.kh + m) * d.kw + q] += acc;
                }
            }
        }
    }
}

inline std::vector<double>& conv_scratch() {
    thread_local std::vector<double> buf;
    return buf;
}

}  // namespace detail

/// 2-D convolution (cross-correlation), NCHW, with an optional fused
/// per-output-channel bias. out[i,j] accumulates
/// input[i*stride - padding + dilation*m, ...] * w[m,n] over the kernel and
/// input channels. Stride-1 calls run a direct shifted-row kernel; strided
/// calls go through im2col.
inline Tensor conv2d_bias(const Tensor& x, const Tensor& w, const Tensor& bias, int stride = 1,
                          int padding = 0, int dilation = 1) {
    const auto d = detail::conv2d_dims(x, w, stride, padding, dilation);
    if (bias.defined())
        detail::require(bias.rank() == 1 && bias.dim(0) == d.O,
                        "conv2d: bias " + shape_str(bias.shape()) + " does not match " +
                            std::to_string(d.O) + " output channels");
    Tensor y = Tensor::uninitialized(Shape{d.N, d.O, d.OH, d.OW});
    const int K = d.C * d.kh * d.kw;
    const int HW = d.OH * d.OW;
    const double* bp = bias.defined() ? bias.data() : nullptr;
    if (stride == 1) {
        detail::conv_fwd_direct(x.data(), w.data(), bp, y.data(), d);
    } else {
        auto& col = detail::conv_scratch();
        col.resize(static_cast<std::size_t>(K) * HW);
        for (int n = 0; n < d.N; ++n) {
            detail::im2col(x.data() + static_cast<std::size_t>(n) * d.C * d.H * d.W, d, col.data());
            double* yp = y.data() + static_cast<std::size_t>(n) * d.O * HW;
#pragma omp parallel for schedule(static) if (static_cast<long long>(d.O) * K * HW > 16384)
            for (int oc = 0; oc < d.O; ++oc) {
                double* c = yp + static_cast<std::size_t>(oc) * HW;
                std::fill(c, c + HW, bp ? bp[oc] : 0.0);
                const double* a = w.data() + static_cast<std::size_t>(oc) * K;
                for (int k = 0; k < K; ++k) {
                    const double av = a[k];
                    const double* b = col.data() + static_cast<std::size_t>(k) * HW;
                    for (int j = 0; j < HW; ++j) c[j] += av * b[j];
                }
            }
        }
    }
    auto xd = x.rep(), wd = w.rep(), yd = y.rep();
    auto bd = bias.defined() ? bias.rep() : std::shared_ptr<TensorData>();
    auto backward = [xd, wd, bd, yd, d, stride] {
        const int K = d.C * d.kh * d.kw;
        const int HW = d.OH * d.OW;
        const bool need_x = detail::takes_grad(xd);
        const bool need_w = detail::takes_grad(wd);
        const double* dy_all = yd->g.data();
        if (bd && detail::takes_grad(bd)) {
            auto& bg = detail::grad_of(bd);
            for (int n = 0; n < d.N; ++n)
                for (int oc = 0; oc < d.O; ++oc) {
                    const double* dyr = dy_all + (static_cast<std::size_t>(n) * d.O + oc) * HW;
                    double acc = 0.0;
                    for (int i = 0; i < HW; ++i) acc += dyr[i];
                    bg[static_cast<std::size_t>(oc)] += acc;
                }
        }
        if (stride == 1) {
            if (need_w)
                detail::conv_bwd_weight_direct(dy_all, xd->v.data(), detail::grad_of(wd).data(),
                                               d);
            if (need_x)
                detail::conv_bwd_input_direct(dy_all, wd->v.data(), detail::grad_of(xd).data(), d);
            return;
        }
        auto& col = detail::conv_scratch();
        col.resize(static_cast<std::size_t>(K) * HW);
        std::vector<double> dcol(need_x ? static_cast<std::size_t>(K) * HW : 0);
        for (int n = 0; n < d.N; ++n) {
            const double* dy = dy_all + static_cast<std::size_t>(n) * d.O * HW;
            if (need_w) {
                detail::im2col(xd->v.data() + static_cast<std::size_t>(n) * d.C * d.H * d.W, d,
                               col.data());
                detail::gemm_abt(dy, col.data(), detail::grad_of(wd).data(), d.O, HW, K, true);
            }
            if (need_x) {
                detail::gemm_atb(wd->v.data(), dy, dcol.data(), d.O, K, HW, false);
                detail::col2im_accum(dcol.data(), d,
                                     detail::grad_of(xd).data() +
                                         static_cast<std::size_t>(n) * d.C * d.H * d.W);
            }
        }
    };
    if (bias.defined())
        detail::record("conv2d", {x, w, bias}, y, std::move(backward));
    else
        detail::record("conv2d", {x, w}, y, std::move(backward));
    return y;
}

inline Tensor conv2d(const Tensor& x, const Tensor& w, int stride = 1, int padding = 0,
                     int dilation = 1) {
    return conv2d_bias(x, w, Tensor(), stride, padding, dilation);
}

/// Adds a per-channel bias [C] to a [N,C,H,W] map.
inline Tensor add_channel_bias(const Tensor& x, const Tensor& b) {
    detail::require(x.rank() == 4, "add_channel_bias: input must be [N,C,H,W], got " +
                                       shape_str(x.shape()));
    detail::require(b.rank() == 1 && b.dim(0) == x.dim(1),
                    "add_channel_bias: bias " + shape_str(b.shape()) +
                        " does not match channel dim " + std::to_string(x.dim(1)));
    const int N = x.dim(0), C = x.dim(1);
    const std::int64_t HW = static_cast<std::int64_t>(x.dim(2)) * x.dim(3);
    Tensor y = Tensor::uninitialized(x.shape());
    const double *xv = x.data(), *bv = b.data();
    double* yv = y.data();
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            const std::int64_t base = (static_cast<std::int64_t>(n) * C + c) * HW;
            const double bc = bv[c];
            for (std::int64_t i = 0; i < HW; ++i) yv[base + i] = xv[base + i] + bc;
        }
    auto xd = x.rep(), bd = b.rep(), yd = y.rep();
    detail::record("add_channel_bias", {x, b}, y, [xd, bd, yd, N, C, HW] {
        if (detail::takes_grad(xd)) {
            auto& xg = detail::grad_of(xd);
            for (std::size_t i = 0; i < yd->g.size(); ++i) xg[i] += yd->g[i];
        }
        if (detail::takes_grad(bd)) {
            auto& bg = detail::grad_of(bd);
            for (int n = 0; n < N; ++n)
                for (int c = 0; c < C; ++c) {
                    const std::int64_t base = (static_cast<std::int64_t>(n) * C + c) * HW;
                    double acc = 0.0;
                    for (std::int64_t i = 0; i < HW; ++i) acc += yd->g[base + i];
                    bg[static_cast<std::size_t>(c)] += acc;
                }
        }
    });
    return y;
}

// ---- spatial resampling ----

inline Tensor nearest_upsample2d(const Tensor& x, int factor) {
    detail::require(x.rank() == 4, "nearest_upsample2d: input must be [N,C,H,W]");
    detail::require(factor >= 1, "nearest_upsample2d: factor must be >= 1");
    const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    Tensor y = Tensor::uninitialized(Shape{N, C, H * factor, W * factor});
    const double* xv = x.data();
    double* yv = y.data();
    const int OH = H * factor, OW = W * factor;
    for (int nc = 0; nc < N * C; ++nc) {
        const double* xp = xv + static_cast<std::size_t>(nc) * H * W;
        double* yp = yv + static_cast<std::size_t>(nc) * OH * OW;
        for (int oy = 0; oy < OH; ++oy) {
            const double* xr = xp + (oy / factor) * W;
            for (int ox = 0; ox < OW; ++ox) yp[oy * OW + ox] = xr[ox / factor];
        }
    }
    auto xd = x.rep(), yd = y.rep();
    detail::record("nearest_upsample2d", {x}, y, [xd, yd, N, C, H, W, factor] {
        if (!detail::takes_grad(xd)) return;
        auto& xg = detail::grad_of(xd);
        const int OH = H * factor, OW = W * factor;
        for (int nc = 0; nc < N * C; ++nc) {
            const double* gp = yd->g.data() + static_cast<std::size_t>(nc) * OH * OW;
            double* xp = xg.data() + static_cast<std::size_t>(nc) * H * W;
            for (int oy = 0; oy < OH; ++oy)
                for (int ox = 0; ox < OW; ++ox)
                    xp[(oy / factor) * W + ox / factor] += gp[oy * OW + ox];
        }
    });
    return y;
}

/// Strided subsampling (top-left corner of each factor x factor block).
inline Tensor nearest_downsample2d(const Tensor& x, int factor) {
    detail::require(x.rank() == 4, "nearest_downsample2d: input must be [N,C,H,W]");
    detail::require(factor >= 1 && x.dim(2) % factor == 0 && x.dim(3) % factor == 0,
                    "nearest_downsample2d: spatial extents " + shape_str(x.shape()) +
                        " not divisible by factor " + std::to_string(factor));
    const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const int OH = H / factor, OW = W / factor;
    Tensor y = Tensor::uninitialized(Shape{N, C, OH, OW});
    const double* xv = x.data();
    double* yv = y.data();
    for (int nc = 0; nc < N * C; ++nc) {
        const double* xp = xv + static_cast<std::size_t>(nc) * H * W;
        double* yp = yv + static_cast<std::size_t>(nc) * OH * OW;
        for (int oy = 0; oy < OH; ++oy)
            for (int ox = 0; ox < OW; ++ox) yp[oy * OW + ox] = xp[oy * factor * W + ox * factor];
    }
    auto xd = x.rep(), yd = y.rep();
    detail::record("nearest_downsample2d", {x}, y, [xd, yd, N, C, H, W, factor] {
        if (!detail::takes_grad(xd)) return;
        auto& xg = detail::grad_of(xd);
        const int OH = H / factor, OW = W / factor;
        for (int nc = 0; nc < N * C; ++nc) {
            const double* gp = yd->g.data() + static_cast<std::size_t>(nc) * OH * OW;
            double* xp = xg.data() + static_cast<std::size_t>(nc) * H * W;
            for (int oy = 0; oy < OH; ++oy)
                for (int ox = 0; ox < OW; ++ox)
                    xp[oy * factor * W + ox * factor] += gp[oy * OW + ox];
        }
    });
    return y;
}

/// 2x2 max pooling with stride 2; ties route the gradient to the first
/// element in scan order.
inline Tensor maxpool2d(const Tensor& x) {
    detail::require(x.rank() == 4, "maxpool2d: input must be [N,C,H,W]");
    detail::require(x.dim(2) % 2 == 0 && x.dim(3) % 2 == 0,
                    "maxpool2d: spatial extents of " + shape_str(x.shape()) + " must be even");
    const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const int OH = H / 2, OW = W / 2;
    Tensor y = Tensor::uninitialized(Shape{N, C, OH, OW});
    std::vector<std::int32_t> arg(static_cast<std::size_t>(y.numel()));
    const double* xv = x.data();
    double* yv = y.data();
    for (int nc = 0; nc < N * C; ++nc) {
        const double* xp = xv + static_cast<std::size_t>(nc) * H * W;
        double* yp = yv + static_cast<std::size_t>(nc) * OH * OW;
        std::int32_t* ap = arg.data() + static_cast<std::size_t>(nc) * OH * OW;
        for (int oy = 0; oy < OH; ++oy)
            for (int ox = 0; ox < OW; ++ox) {
                const int base = 2 * oy * W + 2 * ox;
                int best = base;
                for (int off : {1, W, W + 1})
                    if (xp[base + off] > xp[best]) best = base + off;
                yp[oy * OW + ox] = xp[best];
                ap[oy * OW + ox] = best;
            }
    }
    auto xd = x.rep(), yd = y.rep();
    detail::record("maxpool2d", {x}, y, [xd, yd, arg, N, C, H, W] {
        if (!detail::takes_grad(xd)) return;
        auto& xg = detail::grad_of(xd);
        const int OH = H / 2, OW = W / 2;
        for (int nc = 0; nc < N * C; ++nc) {
            const double* gp = yd->g.data() + static_cast<std::size_t>(nc) * OH * OW;
            const std::int32_t* ap = arg.data() + static_cast<std::size_t>(nc) * OH * OW;
            double* xp = xg.data() + static_cast<std::size_t>(nc) * H * W;
            for (int i = 0; i < OH * OW; ++i) xp[ap[i]] += gp[i];
        }
    });
    return y;
}

/// Global average pooling [N,C,H,W] -> [N,C].
inline Tensor global_avg_pool(const Tensor& x) {
    detail::require(x.rank() == 4, "global_avg_pool: input must be [N,C,H,W]");
    const int N = x.dim(0), C = x.dim(1);
    const std::int64_t HW = static_cast<std::int64_t>(x.dim(2)) * x.dim(3);
    Tensor y = Tensor::uninitialized(Shape{N, C});
    const double* xv = x.data();
    double* yv = y.data();
    for (int nc = 0; nc < N * C; ++nc) {
        const double* xp = xv + static_cast<std::size_t>(nc) * HW;
        double acc = 0.0;
        for (std::int64_t i = 0; i < HW; ++i) acc += xp[i];
        yv[nc] = acc / static_cast<double>(HW);
    }
    auto xd = x.rep(), yd = y.rep();
    detail::record("global_avg_pool", {x}, y, [xd, yd, N, C, HW] {
        if (!detail::takes_grad(xd)) return;
        auto& xg = detail::grad_of(xd);
        const double inv = 1.0 / static_cast<double>(HW);
        for (int nc = 0; nc < N * C; ++nc) {
            const double g = yd->g[static_cast<std::size_t>(nc)] * inv;
            double* xp = xg.data() + static_cast<std::size_t>(nc) * HW;
            for (std::int64_t i = 0; i < HW; ++i) xp[i] += g;
        }
    });
    return y;
}

/// y = x * scale + shift with scale/shift broadcast to x's shape.
inline Tensor affine_scale_shift(const Tensor& x, const Tensor& scale, const Tensor& shift) {
    return add(mul(x, broadcast_to(scale, x.shape())), broadcast_to(shift, x.shape()));
}

/// Fused y = x @ w + row-broadcast bias: [M,K] x [K,H] + [H] -> [M,H].
inline Tensor linear_bias(const Tensor& x, const Tensor& w, const Tensor& b) {
    detail::require(x.rank() == 2 && w.rank() == 2 && b.rank() == 1,
                    "linear_bias: expected [M,K], [K,H], [H]");
    detail::require(x.dim(1) == w.dim(0) && w.dim(1) == b.dim(0),
                    "linear_bias: dims " + shape_str(x.shape()) + " x " + shape_str(w.shape()) +
                        " + " + shape_str(b.shape()) + " do not chain");
    const int M = x.dim(0), K = x.dim(1), H = w.dim(1);
    Tensor y = Tensor::uninitialized(Shape{M, H});
    const double* bv = b.data();
    double* yv = y.data();
#pragma omp parallel for schedule(static) if (static_cast<long long>(M) * K * H > 16384)
    for (int i = 0; i < M; ++i) {
        double* c = yv + static_cast<std::size_t>(i) * H;
        std::copy(bv, bv + H, c);
        const double* a = x.data() + static_cast<std::size_t>(i) * K;
        for (int k = 0; k < K; ++k) {
            const double av = a[k];
            const double* wr = w.data() + static_cast<std::size_t>(k) * H;
            for (int j = 0; j < H; ++j) c[j] += av * wr[j];
        }
    }
    auto xd = x.rep(), wd = w.rep(), bd = b.rep(), yd = y.rep();
    detail::record("linear_bias", {x, w, b}, y, [xd, wd, bd, yd, M, K, H] {
        const double* dy = yd->g.data();
        if (detail::takes_grad(xd))
            detail::gemm_abt(dy, wd->v.data(), detail::grad_of(xd).data(), M, H, K, true);
        if (detail::takes_grad(wd))
            detail::gemm_atb(xd->v.data(), dy, detail::grad_of(wd).data(), M, K, H, true);
        if (detail::takes_grad(bd)) {
            auto& bg = detail::grad_of(bd);
            for (int i = 0; i < M; ++i)
                for (int j = 0; j < H; ++j)
                    bg[static_cast<std::size_t>(j)] += dy[static_cast<std::size_t>(i) * H + j];
        }
    });
    return y;
}

/// Fused standardization of a fixed point set against per-(sample, joint)
/// location/scale pairs: out[((n*J + j)*P + p), c] = (pts[p,c] - mu[n,j,c]) / sigma[n,j,c].
inline Tensor standardize_points(const Tensor& pts, const Tensor& mu, const Tensor& sigma) {
    detail::require(pts.rank() == 2 && pts.dim(1) == 2, "standardize_points: pts must be [P,2]");
    detail::require(mu.rank() == 3 && mu.dim(2) == 2 && sigma.shape() == mu.shape(),
                    "standardize_points: mu/sigma must be [N,J,2]");
    const int P = pts.dim(0), N = mu.dim(0), J = mu.dim(1);
    Tensor y = Tensor::uninitialized(Shape{N * J * P, 2});
    const double *pv = pts.data(), *mv = mu.data(), *sv = sigma.data();
    double* yv = y.data();
#pragma omp parallel for schedule(static) if (N * J > 1)
    for (int t = 0; t < N * J; ++t) {
        const double mx = mv[2 * t], my = mv[2 * t + 1];
        const double isx = 1.0 / sv[2 * t], isy = 1.0 / sv[2 * t + 1];
        double* o = yv + static_cast<std::size_t>(t) * P * 2;
        for (int p = 0; p < P; ++p) {
            o[2 * p] = (pv[2 * p] - mx) * isx;
            o[2 * p + 1] = (pv[2 * p + 1] - my) * isy;
        }
    }
    auto pd = pts.rep(), md = mu.rep(), sd = sigma.rep(), yd = y.rep();
    detail::record("standardize_points", {pts, mu, sigma}, y, [pd, md, sd, yd, P, N, J] {
        const double* g = yd->g.data();
        const double* out = yd->v.data();
        const bool need_p = detail::takes_grad(pd);
        const bool need_m = detail::takes_grad(md);
        const bool need_s = detail::takes_grad(sd);
        if (need_m || need_s) {
            auto& mg = detail::grad_of(md);
            auto& sg = detail::grad_of(sd);
            for (int t = 0; t < N * J; ++t) {
                const double isx = 1.0 / sd->v[2 * t], isy = 1.0 / sd->v[2 * t + 1];
                const double* gr = g + static_cast<std::size_t>(t) * P * 2;
                const double* ov = out + static_cast<std::size_t>(t) * P * 2;
                double gmx = 0, gmy = 0, gsx = 0, gsy = 0;
                for (int p = 0; p < P; ++p) {
                    gmx += gr[2 * p];
                    gmy += gr[2 * p + 1];
                    gsx += gr[2 * p] * ov[2 * p];
                    gsy += gr[2 * p + 1] * ov[2 * p + 1];
                }
                if (need_m) {
                    mg[static_cast<std::size_t>(2 * t)] -= gmx * isx;
                    mg[static_cast<std::size_t>(2 * t + 1)] -= gmy * isy;
                }
                if (need_s) {
                    sg[static_cast<std::size_t>(2 * t)] -= gsx * isx;
                    sg[static_cast<std::size_t>(2 * t + 1)] -= gsy * isy;
                }
            }
        }
        if (need_p) {
            auto& pg = detail::grad_of(pd);
            for (int t = 0; t < N * J; ++t) {
                const double isx = 1.0 / sd->v[2 * t], isy = 1.0 / sd->v[2 * t + 1];
                const double* gr = g + static_cast<std::size_t>(t) * P * 2;
                for (int p = 0; p < P; ++p) {
                    pg[static_cast<std::size_t>(2 * p)] += gr[2 * p] * isx;
                    pg[static_cast<std::size_t>(2 * p + 1)] += gr[2 * p + 1] * isy;
                }
            }
        }
    });
    return y;
}

/// log N(x; 0, I) over rows of [M,2]: -0.5 |x|^2 - log(2 pi).
inline Tensor log_standard_normal2d(const Tensor& pts) {
    detail::require(pts.rank() == 2 && pts.dim(1) == 2, "log_standard_normal2d: pts must be [M,2]");
    const int M = pts.dim(0);
    Tensor y = Tensor::uninitialized(Shape{M, 1});
    const double* pv = pts.data();
    double* yv = y.data();
    const double log2pi = std::log(2.0 * 3.14159265358979323846);
    for (int i = 0; i < M; ++i)
        yv[i] = -0.5 * (pv[2 * i] * pv[2 * i] + pv[2 * i + 1] * pv[2 * i + 1]) - log2pi;
    auto pd = pts.rep(), yd = y.rep();
    detail::record("log_standard_normal2d", {pts}, y, [pd, yd, M] {
        if (!detail::takes_grad(pd)) return;
        auto& pg = detail::grad_of(pd);
        for (int i = 0; i < M; ++i) {
            pg[static_cast<std::size_t>(2 * i)] -= yd->g[static_cast<std::size_t>(i)] * pd->v[2 * i];
            pg[static_cast<std::size_t>(2 * i + 1)] -=
                yd->g[static_cast<std::size_t>(i)] * pd->v[2 * i + 1];
        }
    });
    return y;
}

/// Fused column MLP out = tanh(x w1 + b1) w2 + b2 for x [M,1], hidden width
/// <= 64. The hidden activations are never materialized; backward recomputes
/// them row by row, so the tape holds only the [M,1] input and output.
inline Tensor coupling_mlp(const Tensor& x, const Tensor& w1, const Tensor& b1, const Tensor& w2,
                           const Tensor& b2) {
    detail::require(x.rank() == 2 && x.dim(1) == 1, "coupling_mlp: input must be [M,1]");
    const int W = w1.dim(1);
    detail::require(w1.rank() == 2 && w1.dim(0) == 1 && W <= 64 && b1.rank() == 1 &&
                        b1.dim(0) == W && w2.rank() == 2 && w2.dim(0) == W && w2.dim(1) == 1 &&
                        b2.rank() == 1 && b2.dim(0) == 1,
                    "coupling_mlp: weights must be [1,W], [W], [W,1], [1] with W <= 64");
    const int M = x.dim(0);
    Tensor y = Tensor::uninitialized(Shape{M, 1});
    const double* xv = x.data();
    const double *w1v = w1.data(), *b1v = b1.data(), *w2v = w2.data();
    const double b2v = b2.data()[0];
    double* yv = y.data();
#pragma omp parallel for schedule(static) if (M > 8192)
    for (int i = 0; i < M; ++i) {
        const double xi = xv[i];
        double acc = b2v;
        for (int k = 0; k < W; ++k) acc += std::tanh(xi * w1v[k] + b1v[k]) * w2v[k];
        yv[i] = acc;
    }
    auto xd = x.rep(), w1d = w1.rep(), b1d = b1.rep(), w2d = w2.rep(), b2d = b2.rep();
    auto yd = y.rep();
    detail::record("coupling_mlp", {x, w1, b1, w2, b2}, y, [xd, w1d, b1d, w2d, b2d, yd, M, W] {
        const double* g = yd->g.data();
        const double* xv = xd->v.data();
        const double *w1v = w1d->v.data(), *b1v = b1d->v.data(), *w2v = w2d->v.data();
        const bool need_x = detail::takes_grad(xd);
        const bool need_w = detail::takes_grad(w1d) || detail::takes_grad(b1d) ||
                            detail::takes_grad(w2d) || detail::takes_grad(b2d);
        double gw1[64] = {0}, gb1[64] = {0}, gw2[64] = {0}, gb2 = 0.0;
        double* xg = need_x ? detail::grad_of(xd).data() : nullptr;
        for (int i = 0; i < M; ++i) {
            const double gi = g[i];
            const double xi = xv[i];
            double gx = 0.0;
            for (int k = 0; k < W; ++k) {
                const double h = std::tanh(xi * w1v[k] + b1v[k]);
                const double dpre = gi * w2v[k] * (1.0 - h * h);
                gx += dpre * w1v[k];
                if (need_w) {
                    gw1[k] += dpre * xi;
                    gb1[k] += dpre;
                    gw2[k] += gi * h;
                }
            }
            gb2 += gi;
            if (need_x) xg[i] += gx;
        }
        if (detail::takes_grad(w1d)) {
            auto& w1g = detail::grad_of(w1d);
            for (int k = 0; k < W; ++k) w1g[static_cast<std::size_t>(k)] += gw1[k];
        }
        if (detail::takes_grad(b1d)) {
            auto& b1g = detail::grad_of(b1d);
            for (int k = 0; k < W; ++k) b1g[static_cast<std::size_t>(k)] += gb1[k];
        }
        if (detail::takes_grad(w2d)) {
            auto& w2g = detail::grad_of(w2d);
            for (int k = 0; k < W; ++k) w2g[static_cast<std::size_t>(k)] += gw2[k];
        }
        if (detail::takes_grad(b2d)) detail::grad_of(b2d)[0] += gb2;
    });
    return y;
}

/// N(x; 0, I) over rows of [M,2]: exp(-0.5 |x|^2) / (2 pi).
inline Tensor standard_normal2d(const Tensor& pts) {
    detail::require(pts.rank() == 2 && pts.dim(1) == 2, "standard_normal2d: pts must be [M,2]");
    const int M = pts.dim(0);
    Tensor y = Tensor::uninitialized(Shape{M, 1});
    const double* pv = pts.data();
    double* yv = y.data();
    const double inv2pi = 1.0 / (2.0 * 3.14159265358979323846);
    for (int i = 0; i < M; ++i)
        yv[i] = std::exp(-0.5 * (pv[2 * i] * pv[2 * i] + pv[2 * i + 1] * pv[2 * i + 1])) * inv2pi;
    auto pd = pts.rep(), yd = y.rep();
    detail::record("standard_normal2d", {pts}, y, [pd, yd, M] {
        if (!detail::takes_grad(pd)) return;
        auto& pg = detail::grad_of(pd);
        for (int i = 0; i < M; ++i) {
            const double gq = yd->g[static_cast<std::size_t>(i)] * yd->v[static_cast<std::size_t>(i)];
            pg[static_cast<std::size_t>(2 * i)] -= gq * pd->v[2 * i];
            pg[static_cast<std::size_t>(2 * i + 1)] -= gq * pd->v[2 * i + 1];
        }
    });
    return y;
}

}  // namespace sadi
