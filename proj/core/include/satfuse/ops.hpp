#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <vector>

#include "satfuse/tensor.hpp"

// Forward operations with hand-derived reverse-mode gradients. Ops never
// mutate their inputs; each returns a fresh tensor wired into the tape when
// grad mode is on and some input requires grad. Inner loops are arranged as
// contiguous AXPY updates so they vectorize without -ffast-math.

namespace satfuse::ops {

template <typename T>
inline constexpr T neg_inf = -std::numeric_limits<T>::infinity();

namespace detail {

template <typename T>
bool wants_tape(const std::initializer_list<TensorPtr<T>>& parents) {
    if (!grad_enabled()) return false;
    for (const auto& p : parents)
        if (p && p->requires_grad) return true;
    return false;
}

template <typename T>
void attach(TensorPtr<T>& out, std::initializer_list<TensorPtr<T>> parents,
            std::function<void()> fn) {
    out->ensure_grad();
    for (const auto& p : parents)
        if (p) out->parents.push_back(p);
    out->backward_fn = std::move(fn);
}

// C[N,M] += A[N,K] * B[K,M], all row-major.
template <typename T>
void mm_acc(const T* a, const T* b, T* c, std::int64_t n, std::int64_t k_dim, std::int64_t m) {
    parallel_for(n, [&](std::int64_t lo, std::int64_t hi) {
        for (std::int64_t i = lo; i < hi; ++i) {
            T* crow = c + i * m;
            const T* arow = a + i * k_dim;
            for (std::int64_t k = 0; k < k_dim; ++k) {
                const T av = arow[k];
                const T* brow = b + k * m;
                for (std::int64_t j = 0; j < m; ++j) crow[j] += av * brow[j];
            }
        }
    });
}

template <typename T>
std::vector<T> transposed(const T* x, std::int64_t rows, std::int64_t cols) {
    std::vector<T> out(static_cast<std::size_t>(rows * cols));
    for (std::int64_t r = 0; r < rows; ++r)
        for (std::int64_t c = 0; c < cols; ++c) out[c * rows + r] = x[r * cols + c];
    return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise / broadcast

template <typename T>
TensorPtr<T> add(const TensorPtr<T>& a, const TensorPtr<T>& b) {
    if (a->shape != b->shape)
        throw DimensionError("add: shape mismatch " + shape_str(a->shape) + " vs " + shape_str(b->shape));
    auto out = Tensor<T>::from(a->shape, a->data);
    for (std::size_t i = 0; i < out->data.size(); ++i) out->data[i] += b->data[i];
    if (detail::wants_tape<T>({a, b})) {
        Tensor<T>* self = out.get();
        detail::attach(out, {a, b}, [self, a, b] {
            a->accumulate_grad(self->grad);
            b->accumulate_grad(self->grad);
        });
    }
    return out;
}

template <typename T>
TensorPtr<T> mul(const TensorPtr<T>& a, const TensorPtr<T>& b) {
    if (a->shape != b->shape)
        throw DimensionError("mul: shape mismatch " + shape_str(a->shape) + " vs " + shape_str(b->shape));
    auto out = Tensor<T>::from(a->shape, a->data);
    for (std::size_t i = 0; i < out->data.size(); ++i) out->data[i] *= b->data[i];
    if (detail::wants_tape<T>({a, b})) {
        Tensor<T>* self = out.get();
        detail::attach(out, {a, b}, [self, a, b] {
            if (a->requires_grad)
                for (std::size_t i = 0; i < a->data.size(); ++i) a->grad[i] += self->grad[i] * b->data[i];
            if (b->requires_grad)
                for (std::size_t i = 0; i < b->data.size(); ++i) b->grad[i] += self->grad[i] * a->data[i];
        });
    }
    return out;
}

template <typename T>
TensorPtr<T> scale(const TensorPtr<T>& a, T s) {
    auto out = Tensor<T>::from(a->shape, a->data);
    for (auto& v : out->data) v *= s;
    if (detail::wants_tape<T>({a})) {
        Tensor<T>* self = out.get();
        detail::attach(out, {a}, [self, a, s] {
            for (std::size_t i = 0; i < a->data.size(); ++i) a->grad[i] += self->grad[i] * s;
        });
    }
    return out;
}

// y[i, j] = a[i, j] + v[j]
template <typename T>
TensorPtr<T> add_rowvec(const TensorPtr<T>& a, const TensorPtr<T>& v) {
    if (a->rank() != 2 || v->numel() != a->dim(1))
        throw DimensionError("add_rowvec: need [N,M] + [M], got " + shape_str(a->shape) + " + " + shape_str(v->shape));
    const auto n = a->dim(0), m = a->dim(1);
    auto out = Tensor<T>::from(a->shape, a->data);
    for (std::int64_t i = 0; i < n; ++i)
        for (std::int64_t j = 0; j < m; ++j) out->data[i * m + j] += v->data[j];
    if (detail::wants_tape<T>({a, v})) {
        Tensor<T>* self = out.get();
        detail::attach(out, {a, v}, [self, a, v, n, m] {
            if (a->requires_grad) a->accumulate_grad(self->grad);
            if (v->requires_grad)
                for (std::int64_t i = 0; i < n; ++i)
                    for (std::int64_t j = 0; j < m; ++j) v->grad[j] += self->grad[i * m + j];
        });
    }
    return out;
}

// Per-token broadcast of a [N,C] vector over P pixel slots laid out as
// (p, c) within each row: y[i, p*C + c] = a[i, p*C + c] + v[i, c].
template <typename T>
TensorPtr<T> add_tiled_rowvec(const TensorPtr<T>& a, const TensorPtr<T>& v) {
    if (a->rank() != 2 || v->rank() < 1)
        throw DimensionError("add_tiled_rowvec: bad ranks");
    const auto n = a->dim(0), row = a->dim(1);
    const auto c = v->numel() / n;
    if (v->numel() != n * c || c == 0 || row % c != 0)
        throw DimensionError("add_tiled_rowvec: " + shape_str(a->shape) + " vs " + shape_str(v->shape));
    const auto p = row / c;
    auto out = Tensor<T>::from(a->shape, a->data);
    for (std::int64_t i = 0; i < n; ++i) {
        const T* vr = v->data.data() + i * c;
        T* o = out->data.data() + i * row;
        for (std::int64_t pp = 0; pp < p; ++pp)
            for (std::int64_t cc = 0; cc < c; ++cc) o[pp * c + cc] += vr[cc];
    }
    if (detail::wants_tape<T>({a, v})) {
        Tensor<T>* self = out.get();
        detail::attach(out, {a, v}, [self, a, v, n, c, p, row] {
            if (a->requires_grad) a->accumulate_grad(self->grad);
            if (v->requires_grad)
                for (std::int64_t i = 0; i < n; ++i) {
                    T* vg = v->grad.data() + i * c;
                    const T* g = self->grad.data() + i * row;
                    for (std::int64_t pp = 0; pp < p; ++pp)
                        for (std::int64_t cc = 0; cc < c; ++cc) vg[cc] += g[pp * c + cc];
                }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// matmul family

template <typename T>
TensorPtr<T> matmul(const TensorPtr<T>& a, const TensorPtr<T>& b) {
    if (a->rank() != 2 || b->rank() != 2 || a->dim(1) != b->dim(0))
        throw DimensionError("matmul: incompatible shapes " + shape_str(a->shape) + " x " + shape_str(b->shape));
    const auto n = a->dim(0), k = a->dim(1), m = b->dim(1);
    auto out = Tensor<T>::zeros({n, m});
    detail::mm_acc(a->data.data(), b->data.data(), out->data.data(), n, k, m);
    if (detail::wants_tape<T>({a, b})) {
        Tensor<T>* self = out.get();
        detail::attach(out, {a, b}, [self, a, b, n, k, m] {
            if (a->requires_grad) {
                // dA = dC * B^T
                const auto bt = detail::transposed(b->data.data(), k, m);
                detail::mm_acc(self->grad.data(), bt.data(), a->grad.data(), n, m, k);
            }
            if (b->requires_grad) {
                // dB = A^T * dC
                const auto at = detail::transposed(a->data.data(), n, k);
                detail::mm_acc(at.data(), self->grad.data(), b->grad.data(), k, n, m);
            }
        });
    }
    return out;
}

// a [N,K] * b^T where b is [M,K]; the attention-score product.
template <typename T>
TensorPtr<T> matmul_nt(const TensorPtr<T>& a, const TensorPtr<T>& b) {
    if (a->rank() != 2 || b->rank() != 2 || a->dim(1) != b->dim(1))
        throw DimensionError("matmul_nt: incompatible shapes " + shape_str(a->shape) + " x " + shape_str(b->shape) + "^T");
    const auto n = a->dim(0), k = a->dim(1), m = b->dim(0);
    auto out = Tensor<T>::zeros({n, m});
    const auto bt = detail::transposed(b->data.data(), m, k);  // K x M
    detail::mm_acc(a->data.data(), bt.data(), out->data.data(), n, k, m);
    if (detail::wants_tape<T>({a, b})) {
        Tensor<T>* self = out.get();
        detail::attach(out, {a, b}, [self, a, b, n, k, m] {
            if (a->requires_grad)  // dA = dC * B
                detail::mm_acc(self->grad.data(), b->data.data(), a->grad.data(), n, m, k);
            if (b->requires_grad) {  // dB = dC^T * A
                const auto gt = detail::transposed(self->grad.data(), n, m);
                detail::mm_acc(gt.data(), a->data.data(), b->grad.data(), m, n, k);
            }
        });
    }
    return out;
}

// x * w + bias, the linear layer used across the fusion stack.
template <typename T>
TensorPtr<T> linear(const TensorPtr<T>& x, const TensorPtr<T>& w, const TensorPtr<T>& bias) {
    auto y = matmul(x, w);
    return bias ? add_rowvec(y, bias) : y;
}

// ---------------------------------------------------------------------------
// nonlinearities

// Stable softmax over the last dimension. -inf inputs get weight exactly 0;
// an all -inf slice yields all zeros (the "ignore satellite" convention).
template <typename T>
TensorPtr<T> softmax_lastdim(const TensorPtr<T>& x) {
    if (x->rank() < 1 || x->shape.back() < 1)
        throw DimensionError("softmax_lastdim: need last dim >= 1");
    const auto l = x->shape.back();
    const auto slices = x->numel() / l;
    auto out = Tensor<T>::zeros(x->shape);
    parallel_for(slices, [&](std::int64_t lo, std::int64_t hi) {
        for (std::int64_t s = lo; s < hi; ++s) {
            const T* in = x->data.data() + s * l;
            T* y = out->data.data() + s * l;
            T mx = neg_inf<T>;
            for (std::int64_t i = 0; i < l; ++i) mx = std::max(mx, in[i]);
            if (mx == neg_inf<T>) continue;  // fully masked slice stays zero
            T sum = T(0);
            for (std::int64_t i = 0; i < l; ++i) {
                const T e = in[i] == neg_inf<T> ? T(0) : std::exp(in[i] - mx);
                y[i] = e;
                sum += e;
            }
            const T inv = T(1) / sum;
            for (std::int64_t i = 0; i < l; ++i) y[i] *= inv;
        }
    });
    if (detail::wants_tape<T>({x})) {
        Tensor<T>* self = out.get();
        detail::attach(out, {x}, [self, x, l, slices] {
            for (std::int64_t s = 0; s < slices; ++s) {
                const T* y = self->data.data() + s * l;
                const T* g = self->grad.data() + s * l;
                T* dx = x->grad.data() + s * l;
                T dot = T(0);
                for (std::int64_t i = 0; i < l; ++i) dot += g[i] * y[i];
                for (std::int64_t i = 0; i < l; ++i) dx[i] += y[i] * (g[i] - dot);
            }
        });
    }
    return out;
}

template <typename T>
TensorPtr<T> sigmoid(const TensorPtr<T>& x) {
    auto out = Tensor<T>::from(x->shape, x->data);
    for (auto& v : out->data) {
        if (v >= T(0)) {
            v = T(1) / (T(1) + std::exp(-v));
        } else {
            const T e = std::exp(v);
            v = e / (T(1) + e);
        }
    }
    if (detail::wants_tape<T>({x})) {
        Tensor<T>* self = out.get();
        detail::attach(out, {x}, [self, x] {
            for (std::size_t i = 0; i < x->data.size(); ++i) {
                const T y = self->data[i];
                x->grad[i] += self->grad[i] * y * (T(1) - y);
            }
        });
    }
    return out;
}

// Smooth rectifier: softplus(x) = log(1 + e^x), gradient sigmoid(x).
template <typename T>
TensorPtr<T> softplus(const TensorPtr<T>& x) {
    auto out = Tensor<T>::from(x->shape, x->data);
    for (auto& v : out->data) v = std::max(v, T(0)) + std::log1p(std::exp(-std::abs(v)));
    if (detail::wants_tape<T>({x})) {
        Tensor<T>* self = out.get();
        detail::attach(out, {x}, [self, x] {
            for (std::size_t i = 0; i < x->data.size(); ++i) {
                const T v = x->data[i];
                const T s = v >= T(0) ? T(1) / (T(1) + std::exp(-v)) : std::exp(v) / (T(1) + std::exp(v));
                x->grad[i] += self->grad[i] * s;
            }
        });
    }
    return out;
}

// log(x) clipped below at `floor`; the soft attention-mask transform.
template <typename T>
TensorPtr<T> log_clip(const TensorPtr<T>& x, T floor_val) {
    auto out = Tensor<T>::from(x->shape, x->data);
    const T lo = std::exp(floor_val);
    for (auto& v : out->data) v = v > lo ? std::log(v) : floor_val;
    if (detail::wants_tape<T>({x})) {
        Tensor<T>* self = out.get();
        detail::attach(out, {x}, [self, x, lo] {
            for (std::size_t i = 0; i < x->data.size(); ++i)
                if (x->data[i] > lo) x->grad[i] += self->grad[i] / x->data[i];
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// convolution (CHW layout)

// Direct cross-correlation, kernel k in {1, 3}; H' = (H + 2 pad - k)/stride + 1.
template <typename T>
TensorPtr<T> conv2d(const TensorPtr<T>& x, const TensorPtr<T>& w, int stride = 1, int pad = 0) {
    if (x->rank() != 3 || w->rank() != 4)
        throw DimensionError("conv2d: need x[C,H,W], w[O,C,k,k], got " + shape_str(x->shape) + ", " + shape_str(w->shape));
    const auto cin = x->dim(0), h = x->dim(1), win = x->dim(2);
    const auto cout = w->dim(0), k = w->dim(2);
    if (w->dim(1) != cin || w->dim(3) != k)
        throw DimensionError("conv2d: kernel " + shape_str(w->shape) + " does not match input " + shape_str(x->shape));
    if (k != 1 && k != 3) throw DimensionError("conv2d: kernel size must be 1 or 3");
    if (stride < 1 || pad < 0) throw DimensionError("conv2d: bad stride/pad");
    const auto ho = (h + 2 * pad - k) / stride + 1;
    const auto wo = (win + 2 * pad - k) / stride + 1;
    if (ho <= 0 || wo <= 0)
        throw DimensionError("conv2d: non-positive output dims for input " + shape_str(x->shape));

    auto out = Tensor<T>::zeros({cout, ho, wo});
    const T* xd = x->data.data();
    const T* wd = w->data.data();
    T* od = out->data.data();
    parallel_for(cout, [&](std::int64_t lo_c, std::int64_t hi_c) {
        for (std::int64_t oc = lo_c; oc < hi_c; ++oc) {
            for (std::int64_t ic = 0; ic < cin; ++ic) {
                const T* xplane = xd + ic * h * win;
                const T* wk = wd + (oc * cin + ic) * k * k;
                for (std::int64_t ky = 0; ky < k; ++ky) {
                    for (std::int64_t kx = 0; kx < k; ++kx) {
                        const T wv = wk[ky * k + kx];
                        if (wv == T(0)) continue;
                        for (std::int64_t oy = 0; oy < ho; ++oy) {
                            const std::int64_t iy = oy * stride - pad + ky;
                            if (iy < 0 || iy >= h) continue;
                            const T* xrow = xplane + iy * win;
                            T* orow = od + (oc * ho + oy) * wo;
                            if (stride == 1) {
                                const std::int64_t off = kx - pad;
                                const std::int64_t x0 = std::max<std::int64_t>(0, -off);
                                const std::int64_t x1 = std::min(wo, win - off);
                                for (std::int64_t ox = x0; ox < x1; ++ox) orow[ox] += wv * xrow[ox + off];
                            } else {
                                for (std::int64_t ox = 0; ox < wo; ++ox) {
                                    const std::int64_t ix = ox * stride - pad + kx;
                                    if (ix >= 0 && ix < win) orow[ox] += wv * xrow[ix];
                                }
                            }
                        }
                    }
                }
            }
        }
    });

    if (detail::wants_tape<T>({x, w})) {
        Tensor<T>* self = out.get();
        const int s = stride, p = pad;
        detail::attach(out, {x, w}, [self, x, w, cin, cout, h, win, ho, wo, k, s, p] {
            const T* gd = self->grad.data();
            if (x->requires_grad) {
                T* dx = x->grad.data();
                const T* wd = w->data.data();
                parallel_for(cin, [&](std::int64_t lo_c, std::int64_t hi_c) {
                    for (std::int64_t ic = lo_c; ic < hi_c; ++ic) {
                        for (std::int64_t oc = 0; oc < cout; ++oc) {
                            const T* wk = wd + (oc * cin + ic) * k * k;
                            for (std::int64_t ky = 0; ky < k; ++ky) {
                                for (std::int64_t kx = 0; kx < k; ++kx) {
                                    const T wv = wk[ky * k + kx];
                                    if (wv == T(0)) continue;
                                    for (std::int64_t oy = 0; oy < ho; ++oy) {
                                        const std::int64_t iy = oy * s - p + ky;
                                        if (iy < 0 || iy >= h) continue;
                                        const T* grow = gd + (oc * ho + oy) * wo;
                                        T* dxrow = dx + (ic * h + iy) * win;
                                        if (s == 1) {
                                            const std::int64_t off = kx - p;
                                            const std::int64_t x0 = std::max<std::int64_t>(0, -off);
                                            const std::int64_t x1 = std::min(wo, win - off);
                                            for (std::int64_t ox = x0; ox < x1; ++ox) dxrow[ox + off] += wv * grow[ox];
                                        } else {
                                            for (std::int64_t ox = 0; ox < wo; ++ox) {
                                                const std::int64_t ix = ox * s - p + kx;
                                                if (ix >= 0 && ix < win) dxrow[ix] += wv * grow[ox];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                });
            }
            if (w->requires_grad) {
                const T* xd = x->data.data();
                T* dw = w->grad.data();
                parallel_for(cout, [&](std::int64_t lo_c, std::int64_t hi_c) {
                    for (std::int64_t oc = lo_c; oc < hi_c; ++oc) {
                        for (std::int64_t ic = 0; ic < cin; ++ic) {
                            const T* xplane = xd + ic * h * win;
                            for (std::int64_t ky = 0; ky < k; ++ky) {
                                for (std::int64_t kx = 0; kx < k; ++kx) {
                                    T acc0 = T(0), acc1 = T(0), acc2 = T(0), acc3 = T(0);
                                    for (std::int64_t oy = 0; oy < ho; ++oy) {
                                        const std::int64_t iy = oy * s - p + ky;
                                        if (iy < 0 || iy >= h) continue;
                                        const T* grow = gd + (oc * ho + oy) * wo;
                                        const T* xrow = xplane + iy * win;
                                        if (s == 1) {
                                            const std::int64_t off = kx - p;
                                            const std::int64_t x0 = std::max<std::int64_t>(0, -off);
                                            const std::int64_t x1 = std::min(wo, win - off);
                                            std::int64_t ox = x0;
                                            for (; ox + 4 <= x1; ox += 4) {
                                                acc0 += grow[ox] * xrow[ox + off];
                                                acc1 += grow[ox + 1] * xrow[ox + 1 + off];
                                                acc2 += grow[ox + 2] * xrow[ox + 2 + off];
                                                acc3 += grow[ox + 3] * xrow[ox + 3 + off];
                                            }
                                            for (; ox < x1; ++ox) acc0 += grow[ox] * xrow[ox + off];
                                        } else {
                                            for (std::int64_t ox = 0; ox < wo; ++ox) {
                                                const std::int64_t ix = ox * s - p + kx;
                                                if (ix >= 0 && ix < win) acc0 += grow[ox] * xrow[ix];
                                            }
                                        }
                                    }
                                    dw[((oc * cin + ic) * k + ky) * k + kx] += ((acc0 + acc1) + (acc2 + acc3));
                                }
                            }
                        }
                    }
                });
            }
        });
    }
    return out;
}

template <typename T>
TensorPtr<T> add_channel_bias(const TensorPtr<T>& x, const TensorPtr<T>& b) {
    if (x->rank() != 3 || b->numel() != x->dim(0))
        throw DimensionError("add_channel_bias: " + shape_str(x->shape) + " + " + shape_str(b->shape));
    const auto c = x->dim(0), plane = x->dim(1) * x->dim(2);
    auto out = Tensor<T>::from(x->shape, x->data);
    for (std::int64_t ch = 0; ch < c; ++ch) {
        const T bv = b->data[ch];
        T* row = out->data.data() + ch * plane;
        for (std::int64_t i = 0; i < plane; ++i) row[i] += bv;
    }
    if (detail::wants_tape<T>({x, b})) {
        Tensor<T>* self = out.get();
        detail::attach(out, {x, b}, [self, x, b, c, plane] {
            if (x->requires_grad) x->accumulate_grad(self->grad);
            if (b->requires_grad)
                for (std::int64_t ch = 0; ch < c; ++ch) {
                    const T* g = self->grad.data() + ch * plane;
                    T acc = T(0);
                    for (std::int64_t i = 0; i < plane; ++i) acc += g[i];
                    b->grad[ch] += acc;
                }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// layout / structural ops

template <typename T>
TensorPtr<T> permute_hwc_to_chw(const TensorPtr<T>& x) {
    if (x->rank() != 3) throw DimensionError("permute_hwc_to_chw: need rank-3");
    const auto h = x->dim(0), w = x->dim(1), c = x->dim(2);
    auto out = Tensor<T>::zeros({c, h, w});
    for (std::int64_t i = 0; i < h; ++i)
        for (std::int64_t j = 0; j < w; ++j) {
            const T* px = x->data.data() + (i * w + j) * c;
            for (std::int64_t ch = 0; ch < c; ++ch) out->data[(ch * h + i) * w + j] = px[ch];
        }
    if (detail::wants_tape<T>({x})) {
        Tensor<T>* self = out.get();
        detail::attach(out, {x}, [self, x, h, w, c] {
            for (std::int64_t i = 0; i < h; ++i)
                for (std::int64_t j = 0; j < w; ++j) {
                    T* gx = x->grad.data() + (i * w + j) * c;
                    for (std::int64_t ch = 0; ch < c; ++ch) gx[ch] += self->grad[(ch * h + i) * w + j];
                }
        });
    }
    return out;
}

template <typename T>
TensorPtr<T> permute_chw_to_hwc(const TensorPtr<T>& x) {
    if (x->rank() != 3) throw DimensionError("permute_chw_to_hwc: need rank-3");
    const auto c = x->dim(0), h = x->dim(1), w = x->dim(2);
    auto out = Tensor<T>::zeros({h, w, c});
    for (std::int64_t ch = 0; ch < c; ++ch)
        for (std::int64_t i = 0; i < h; ++i) {
            const T* row = x->data.data() + (ch * h + i) * w;
            for (std::int64_t j = 0; j < w; ++j) out->data[(i * w + j) * c + ch] = row[j];
        }
    if (detail::wants_tape<T>({x})) {
        Tensor<T>* self = out.get();
        detail::attach(out, {x}, [self, x, c, h, w] {
            for (std::int64_t ch = 0; ch < c; ++ch)
                for (std::int64_t i = 0; i < h; ++i) {
                    T* grow = x->grad.data() + (ch * h + i) * w;
                    for (std::int64_t j = 0; j < w; ++j) grow[j] += self->grad[(i * w + j) * c + ch];
                }
        });
    }
    return out;
}

template <typename T>
TensorPtr<T> reshape(const TensorPtr<T>& x, Shape new_shape) {
    if (shape_numel(new_shape) != x->numel())
        throw DimensionError("reshape: " + shape_str(x->shape) + " -> " + shape_str(new_shape));
    auto out = Tensor<T>::from(std::move(new_shape), x->data);
    if (detail::wants_tape<T>({x})) {
        Tensor<T>* self = out.get();
        detail::attach(out, {x}, [self, x] { x->accumulate_grad(self->grad); });
    }
    return out;
}

template <typename T>
TensorPtr<T> concat(const TensorPtr<T>& a, const TensorPtr<T>& b, std::size_t axis) {
    if (a->rank() != b->rank() || axis >= a->rank())
        throw DimensionError("concat: rank mismatch");
    for (std::size_t i = 0; i < a->rank(); ++i)
        if (i != axis && a->shape[i] != b->shape[i])
            throw DimensionError("concat: shapes " + shape_str(a->shape) + " vs " + shape_str(b->shape));
    Shape os = a->shape;
    os[axis] += b->shape[axis];
    std::int64_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= a->shape[i];
    for (std::size_t i = axis + 1; i < a->rank(); ++i) inner *= a->shape[i];
    const auto wa = a->shape[axis] * inner, wb = b->shape[axis] * inner;
    auto out = Tensor<T>::zeros(os);
    for (std::int64_t o = 0; o < outer; ++o) {
        std::copy_n(a->data.data() + o * wa, wa, out->data.data() + o * (wa + wb));
        std::copy_n(b->data.data() + o * wb, wb, out->data.data() + o * (wa + wb) + wa);
    }
    if (detail::wants_tape<T>({a, b})) {
        Tensor<T>* self = out.get();
        detail::attach(out, {a, b}, [self, a, b, outer, wa, wb] {
            for (std::int64_t o = 0; o < outer; ++o) {
                const T* g = self->grad.data() + o * (wa + wb);
                if (a->requires_grad)
                    for (std::int64_t i = 0; i < wa; ++i) a->grad[o * wa + i] += g[i];
                if (b->requires_grad)
                    for (std::int64_t i = 0; i < wb; ++i) b->grad[o * wb + i] += g[wa + i];
            }
        });
    }
    return out;
}

template <typename T>
TensorPtr<T> slice_lastdim(const TensorPtr<T>& x, std::int64_t c0, std::int64_t c1) {
    const auto l = x->shape.back();
    if (c0 < 0 || c1 > l || c0 >= c1) throw DimensionError("slice_lastdim: bad range");
    Shape os = x->shape;
    os.back() = c1 - c0;
    const auto rows = x->numel() / l, width = c1 - c0;
    auto out = Tensor<T>::zeros(os);
    for (std::int64_t r = 0; r < rows; ++r)
        std::copy_n(x->data.data() + r * l + c0, width, out->data.data() + r * width);
    if (detail::wants_tape<T>({x})) {
        Tensor<T>* self = out.get();
        detail::attach(out, {x}, [self, x, rows, l, c0, width] {
            for (std::int64_t r = 0; r < rows; ++r)
                for (std::int64_t i = 0; i < width; ++i) x->grad[r * l + c0 + i] += self->grad[r * width + i];
        });
    }
    return out;
}

// [H,W,C] -> [N, ph*pw*C]; token (gy,gx) row-major over the patch grid,
// row layout (py, px, c).
template <typename T>
TensorPtr<T> patchify(const TensorPtr<T>& x, std::int64_t ph, std::int64_t pw) {
    if (x->rank() != 3) throw DimensionError("patchify: need [H,W,C]");
    const auto h = x->dim(0), w = x->dim(1), c = x->dim(2);
    if (ph <= 0 || pw <= 0 || h % ph != 0 || w % pw != 0)
        throw DimensionError("patchify: patch (" + std::to_string(ph) + "," + std::to_string(pw) +
                             ") does not divide " + shape_str(x->shape));
    const auto hg = h / ph, wg = w / pw, n = hg * wg, row = ph * pw * c;
    auto out = Tensor<T>::zeros({n, row});
    for (std::int64_t gy = 0; gy < hg; ++gy)
        for (std::int64_t gx = 0; gx < wg; ++gx) {
            T* dst = out->data.data() + (gy * wg + gx) * row;
            for (std::int64_t py = 0; py < ph; ++py) {
                const T* src = x->data.data() + ((gy * ph + py) * w + gx * pw) * c;
                std::copy_n(src, pw * c, dst + py * pw * c);
            }
        }
    if (detail::wants_tape<T>({x})) {
        Tensor<T>* self = out.get();
        detail::attach(out, {x}, [self, x, hg, wg, ph, pw, w, c, row] {
            for (std::int64_t gy = 0; gy < hg; ++gy)
                for (std::int64_t gx = 0; gx < wg; ++gx) {
                    const T* g = self->grad.data() + (gy * wg + gx) * row;
                    for (std::int64_t py = 0; py < ph; ++py) {
                        T* dst = x->grad.data() + ((gy * ph + py) * w + gx * pw) * c;
                        const T* grow = g + py * pw * c;
                        for (std::int64_t i = 0; i < pw * c; ++i) dst[i] += grow[i];
                    }
                }
        });
    }
    return out;
}

// Inverse of patchify: [N, ph*pw*C] -> [H,W,C].
template <typename T>
TensorPtr<T> unpatchify(const TensorPtr<T>& t, std::int64_t hg, std::int64_t wg,
                        std::int64_t ph, std::int64_t pw, std::int64_t c) {
    const auto row = ph * pw * c;
    if (t->rank() != 2 || t->dim(0) != hg * wg || t->dim(1) != row)
        throw DimensionError("unpatchify: token tensor " + shape_str(t->shape) + " does not match grid");
    const auto h = hg * ph, w = wg * pw;
    auto out = Tensor<T>::zeros({h, w, c});
    for (std::int64_t gy = 0; gy < hg; ++gy)
        for (std::int64_t gx = 0; gx < wg; ++gx) {
            const T* src = t->data.data() + (gy * wg + gx) * row;
            for (std::int64_t py = 0; py < ph; ++py)
                std::copy_n(src + py * pw * c, pw * c, out->data.data() + ((gy * ph + py) * w + gx * pw) * c);
        }
    if (detail::wants_tape<T>({t})) {
        Tensor<T>* self = out.get();
        detail::attach(out, {t}, [self, t, hg, wg, ph, pw, w, c, row] {
            for (std::int64_t gy = 0; gy < hg; ++gy)
                for (std::int64_t gx = 0; gx < wg; ++gx) {
                    T* dst = t->grad.data() + (gy * wg + gx) * row;
                    for (std::int64_t py = 0; py < ph; ++py) {
                        const T* g = self->grad.data() + ((gy * ph + py) * w + gx * pw) * c;
                        T* drow = dst + py * pw * c;
                        for (std::int64_t i = 0; i < pw * c; ++i) drow[i] += g[i];
                    }
                }
        });
    }
    return out;
}

// Mean over each (ph, pw) patch of a [H,W] map -> [N].
template <typename T>
TensorPtr<T> pool_patch_mean(const TensorPtr<T>& s, std::int64_t ph, std::int64_t pw) {
    if (s->rank() != 2) throw DimensionError("pool_patch_mean: need [H,W]");
    const auto h = s->dim(0), w = s->dim(1);
    if (h % ph != 0 || w % pw != 0) throw DimensionError("pool_patch_mean: patch does not divide map");
    const auto hg = h / ph, wg = w / pw;
    const T inv = T(1) / static_cast<T>(ph * pw);
    auto out = Tensor<T>::zeros({hg * wg});
    for (std::int64_t gy = 0; gy < hg; ++gy)
        for (std::int64_t gx = 0; gx < wg; ++gx) {
            T acc = T(0);
            for (std::int64_t py = 0; py < ph; ++py)
                for (std::int64_t px = 0; px < pw; ++px) acc += s->data[(gy * ph + py) * w + gx * pw + px];
            out->data[gy * wg + gx] = acc * inv;
        }
    if (detail::wants_tape<T>({s})) {
        Tensor<T>* self = out.get();
        detail::attach(out, {s}, [self, s, hg, wg, ph, pw, w, inv] {
            for (std::int64_t gy = 0; gy < hg; ++gy)
                for (std::int64_t gx = 0; gx < wg; ++gx) {
                    const T g = self->grad[gy * wg + gx] * inv;
                    for (std::int64_t py = 0; py < ph; ++py)
                        for (std::int64_t px = 0; px < pw; ++px) s->grad[(gy * ph + py) * w + gx * pw + px] += g;
                }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// bilinear warp (HWC layout), the Eq.-5 kernel as a 4-neighbor gather

// out(h,w,c) = sum_{h',w'} f(h',w',c) * max(0, 1-|h+d1-h'|) * max(0, 1-|w+d2-w'|).
// Neighbors outside [0,H-1]x[0,W-1] contribute zero. Differentiable in both
// f and delta away from integer sample coordinates.
template <typename T>
TensorPtr<T> warp_hwc(const TensorPtr<T>& f, const TensorPtr<T>& delta) {
    if (f->rank() != 3 || delta->rank() != 3 || delta->dim(2) != 2 ||
        delta->dim(0) != f->dim(0) || delta->dim(1) != f->dim(1))
        throw DimensionError("warp: f " + shape_str(f->shape) + " vs delta " + shape_str(delta->shape));
    const auto h = f->dim(0), w = f->dim(1), c = f->dim(2);
    auto out = Tensor<T>::zeros({h, w, c});
    const T* fd = f->data.data();
    const T* dd = delta->data.data();
    T* od = out->data.data();
    parallel_for(h, [&](std::int64_t lo, std::int64_t hi) {
        for (std::int64_t i = lo; i < hi; ++i) {
            for (std::int64_t j = 0; j < w; ++j) {
                const T sy = static_cast<T>(i) + dd[(i * w + j) * 2 + 0];
                const T sx = static_cast<T>(j) + dd[(i * w + j) * 2 + 1];
                T* op = od + (i * w + j) * c;
                const auto y0 = static_cast<std::int64_t>(std::floor(sy));
                const auto x0 = static_cast<std::int64_t>(std::floor(sx));
                // exact pass-through keeps integer samples bit-identical
                if (static_cast<T>(y0) == sy && static_cast<T>(x0) == sx) {
                    if (y0 >= 0 && y0 < h && x0 >= 0 && x0 < w) {
                        const T* fp = fd + (y0 * w + x0) * c;
                        for (std::int64_t ch = 0; ch < c; ++ch) op[ch] = fp[ch];
                    }
                    continue;
                }
                for (int dy = 0; dy <= 1; ++dy) {
                    const std::int64_t yy = y0 + dy;
                    if (yy < 0 || yy >= h) continue;
                    const T wy = T(1) - std::abs(sy - static_cast<T>(yy));
                    if (wy <= T(0)) continue;
                    for (int dx = 0; dx <= 1; ++dx) {
                        const std::int64_t xx = x0 + dx;
                        if (xx < 0 || xx >= w) continue;
                        const T wx = T(1) - std::abs(sx - static_cast<T>(xx));
                        if (wx <= T(0)) continue;
                        const T ww = wy * wx;
                        const T* fp = fd + (yy * w + xx) * c;
                        for (std::int64_t ch = 0; ch < c; ++ch) op[ch] += ww * fp[ch];
                    }
                }
            }
        }
    });

    if (detail::wants_tape<T>({f, delta})) {
        Tensor<T>* self = out.get();
        detail::attach(out, {f, delta}, [self, f, delta, h, w, c] {
            const T* fd = f->data.data();
            const T* dd = delta->data.data();
            const T* gd = self->grad.data();
            for (std::int64_t i = 0; i < h; ++i) {
                for (std::int64_t j = 0; j < w; ++j) {
                    const T sy = static_cast<T>(i) + dd[(i * w + j) * 2 + 0];
                    const T sx = static_cast<T>(j) + dd[(i * w + j) * 2 + 1];
                    const T* g = gd + (i * w + j) * c;
                    const auto y0 = static_cast<std::int64_t>(std::floor(sy));
                    const auto x0 = static_cast<std::int64_t>(std::floor(sx));
                    T dsy = T(0), dsx = T(0);
                    for (int dy = 0; dy <= 1; ++dy) {
                        const std::int64_t yy = y0 + dy;
                        if (yy < 0 || yy >= h) continue;
                        const T ay = sy - static_cast<T>(yy);
                        const T wy = T(1) - std::abs(ay);
                        if (wy < T(0)) continue;
                        const T dwy = ay > T(0) ? T(-1) : T(1);  // right-derivative at the kink
                        for (int dx = 0; dx <= 1; ++dx) {
                            const std::int64_t xx = x0 + dx;
                            if (xx < 0 || xx >= w) continue;
                            const T ax = sx - static_cast<T>(xx);
                            const T wx = T(1) - std::abs(ax);
                            if (wx < T(0)) continue;
                            const T dwx = ax > T(0) ? T(-1) : T(1);
                            const T* fp = fd + (yy * w + xx) * c;
                            T gdotf = T(0);
                            for (std::int64_t ch = 0; ch < c; ++ch) gdotf += g[ch] * fp[ch];
                            if (f->requires_grad) {
                                T* dfp = f->grad.data() + (yy * w + xx) * c;
                                const T ww = wy * wx;
                                for (std::int64_t ch = 0; ch < c; ++ch) dfp[ch] += ww * g[ch];
                            }
                            dsy += dwy * wx * gdotf;
                            dsx += wy * dwx * gdotf;
                        }
                    }
                    if (delta->requires_grad) {
                        delta->grad[(i * w + j) * 2 + 0] += dsy;
                        delta->grad[(i * w + j) * 2 + 1] += dsx;
                    }
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// reductions and losses

template <typename T>
TensorPtr<T> sum(const TensorPtr<T>& x) {
    T acc = T(0);
    for (T v : x->data) acc += v;
    auto out = Tensor<T>::scalar(acc);
    if (detail::wants_tape<T>({x})) {
        Tensor<T>* self = out.get();
        detail::attach(out, {x}, [self, x] {
            const T g = self->grad[0];
            for (auto& dv : x->grad) dv += g;
        });
    }
    return out;
}

template <typename T>
TensorPtr<T> mean(const TensorPtr<T>& x) {
    return scale(sum(x), T(1) / static_cast<T>(x->numel()));
}

template <typename T>
TensorPtr<T> mse_loss(const TensorPtr<T>& a, const TensorPtr<T>& b) {
    if (a->shape != b->shape) throw DimensionError("mse_loss: shape mismatch");
    T acc = T(0);
    for (std::size_t i = 0; i < a->data.size(); ++i) {
        const T d = a->data[i] - b->data[i];
        acc += d * d;
    }
    const T invn = T(1) / static_cast<T>(a->numel());
    auto out = Tensor<T>::scalar(acc * invn);
    if (detail::wants_tape<T>({a, b})) {
        Tensor<T>* self = out.get();
        detail::attach(out, {a, b}, [self, a, b, invn] {
            const T g = T(2) * invn * self->grad[0];
            for (std::size_t i = 0; i < a->data.size(); ++i) {
                const T d = a->data[i] - b->data[i];
                if (a->requires_grad) a->grad[i] += g * d;
                if (b->requires_grad) b->grad[i] -= g * d;
            }
        });
    }
    return out;
}

// Squared error on [H,W,C] weighted per position by weights [H,W],
// normalized by sum(weights) * C.
template <typename T>
TensorPtr<T> masked_mse_hw(const TensorPtr<T>& a, const TensorPtr<T>& b, const TensorPtr<T>& wts) {
    if (a->shape != b->shape || a->rank() != 3 || wts->rank() != 2 ||
        wts->dim(0) != a->dim(0) || wts->dim(1) != a->dim(1))
        throw DimensionError("masked_mse_hw: shape mismatch");
    const auto hw = a->dim(0) * a->dim(1), c = a->dim(2);
    T wsum = T(0);
    for (T v : wts->data) wsum += v;
    if (wsum <= T(0)) throw NumericError("masked_mse_hw: empty mask");
    const T invn = T(1) / (wsum * static_cast<T>(c));
    T acc = T(0);
    for (std::int64_t p = 0; p < hw; ++p) {
        const T wv = wts->data[p];
        if (wv == T(0)) continue;
        for (std::int64_t ch = 0; ch < c; ++ch) {
            const T d = a->data[p * c + ch] - b->data[p * c + ch];
            acc += wv * d * d;
        }
    }
    auto out = Tensor<T>::scalar(acc * invn);
    if (detail::wants_tape<T>({a, b})) {
        Tensor<T>* self = out.get();
        detail::attach(out, {a, b}, [self, a, b, wts, hw, c, invn] {
            const T g = T(2) * invn * self->grad[0];
            for (std::int64_t p = 0; p < hw; ++p) {
                const T wv = wts->data[p];
                if (wv == T(0)) continue;
                for (std::int64_t ch = 0; ch < c; ++ch) {
                    const T d = g * wv * (a->data[p * c + ch] - b->data[p * c + ch]);
                    if (a->requires_grad) a->grad[p * c + ch] += d;
                    if (b->requires_grad) b->grad[p * c + ch] -= d;
                }
            }
        });
    }
    return out;
}

template <typename T>
TensorPtr<T> l1_loss(const TensorPtr<T>& a, const TensorPtr<T>& b) {
    if (a->shape != b->shape) throw DimensionError("l1_loss: shape mismatch");
    T acc = T(0);
    for (std::size_t i = 0; i < a->data.size(); ++i) acc += std::abs(a->data[i] - b->data[i]);
    const T invn = T(1) / static_cast<T>(a->numel());
    auto out = Tensor<T>::scalar(acc * invn);
    if (detail::wants_tape<T>({a, b})) {
        Tensor<T>* self = out.get();
        detail::attach(out, {a, b}, [self, a, b, invn] {
            const T g = invn * self->grad[0];
            for (std::size_t i = 0; i < a->data.size(); ++i) {
                const T d = a->data[i] - b->data[i];
                const T s = d > T(0) ? g : (d < T(0) ? -g : T(0));
                if (a->requires_grad) a->grad[i] += s;
                if (b->requires_grad) b->grad[i] -= s;
            }
        });
    }
    return out;
}

// Mean cross-entropy of [K,H,W] logits against a class raster (values < K).
template <typename T>
TensorPtr<T> cross_entropy_chw(const TensorPtr<T>& logits, const std::vector<std::uint8_t>& labels) {
    if (logits->rank() != 3) throw DimensionError("cross_entropy_chw: need [K,H,W]");
    const auto k = logits->dim(0), plane = logits->dim(1) * logits->dim(2);
    if (static_cast<std::int64_t>(labels.size()) != plane)
        throw DimensionError("cross_entropy_chw: label raster size mismatch");
    const T* ld = logits->data.data();
    T acc = T(0);
    for (std::int64_t p = 0; p < plane; ++p) {
        if (labels[p] >= k) throw DimensionError("cross_entropy_chw: label out of range");
        T mx = ld[p];
        for (std::int64_t cls = 1; cls < k; ++cls) mx = std::max(mx, ld[cls * plane + p]);
        T lse = T(0);
        for (std::int64_t cls = 0; cls < k; ++cls) lse += std::exp(ld[cls * plane + p] - mx);
        acc += mx + std::log(lse) - ld[labels[p] * plane + p];
    }
    const T invn = T(1) / static_cast<T>(plane);
    auto out = Tensor<T>::scalar(acc * invn);
    if (detail::wants_tape<T>({logits})) {
        Tensor<T>* self = out.get();
        detail::attach(out, {logits}, [self, logits, labels, k, plane, invn] {
            const T g = invn * self->grad[0];
            const T* ld = logits->data.data();
            for (std::int64_t p = 0; p < plane; ++p) {
                T mx = ld[p];
                for (std::int64_t cls = 1; cls < k; ++cls) mx = std::max(mx, ld[cls * plane + p]);
                T lse = T(0);
                for (std::int64_t cls = 0; cls < k; ++cls) lse += std::exp(ld[cls * plane + p] - mx);
                const T inv = T(1) / lse;
                for (std::int64_t cls = 0; cls < k; ++cls) {
                    const T soft = std::exp(ld[cls * plane + p] - mx) * inv;
                    logits->grad[cls * plane + p] += g * (soft - (labels[p] == cls ? T(1) : T(0)));
                }
            }
        });
    }
    return out;
}

// Mean binary cross-entropy on logits against targets in [0,1].
template <typename T>
TensorPtr<T> bce_with_logits(const TensorPtr<T>& z, const TensorPtr<T>& targets) {
    if (z->shape != targets->shape) throw DimensionError("bce_with_logits: shape mismatch");
    T acc = T(0);
    for (std::size_t i = 0; i < z->data.size(); ++i) {
        const T zi = z->data[i], t = targets->data[i];
        acc += std::max(zi, T(0)) - zi * t + std::log1p(std::exp(-std::abs(zi)));
    }
    const T invn = T(1) / static_cast<T>(z->numel());
    auto out = Tensor<T>::scalar(acc * invn);
    if (detail::wants_tape<T>({z})) {
        Tensor<T>* self = out.get();
        detail::attach(out, {z}, [self, z, targets, invn] {
            const T g = invn * self->grad[0];
            for (std::size_t i = 0; i < z->data.size(); ++i) {
                const T zi = z->data[i];
                const T s = zi >= T(0) ? T(1) / (T(1) + std::exp(-zi)) : std::exp(zi) / (T(1) + std::exp(zi));
                z->grad[i] += g * (s - targets->data[i]);
            }
        });
    }
    return out;
}

template <typename T>
void throw_if_not_finite(const TensorPtr<T>& t, const std::string& what) {
    if (!t->all_finite()) throw NumericError("non-finite values in " + what);
}

}  // namespace satfuse::ops
