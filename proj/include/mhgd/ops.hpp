// Copyright (c) 2026 the mhgd authors
// SPDX-License-Identifier: Apache-2.0
//
// Differentiable operations over TensorT. Reductions accumulate in double
// regardless of storage precision; loop orders are fixed so results do not
// depend on the worker-thread count.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <memory>
#include <vector>

#include "mhgd/common.hpp"
#include "mhgd/tensor.hpp"

namespace mhgd {

namespace detail {

// C += A*B, row-major, shapes m x k, k x n. The j loop vectorizes.
template <class T>
void gemm_accum(const T* A, const T* B, T* C, std::size_t m, std::size_t k,
                std::size_t n) {
    parallel_for(m, [&](std::size_t i) {
        const T* a = A + i * k;
        T* c = C + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const T av = a[p];
            const T* b = B + p * n;
            for (std::size_t j = 0; j < n; ++j) c[j] += av * b[j];
        }
    });
}

// C += A*B^T, shapes m x n, k x n -> m x k.
template <class T>
void gemm_accum_nt(const T* A, const T* B, T* C, std::size_t m, std::size_t n,
                   std::size_t k) {
    parallel_for(m, [&](std::size_t i) {
        const T* a = A + i * n;
        T* c = C + i * k;
        for (std::size_t p = 0; p < k; ++p) {
            const T* b = B + p * n;
            double acc = 0.0;
            for (std::size_t j = 0; j < n; ++j) acc += double(a[j]) * double(b[j]);
            c[p] += T(acc);
        }
    });
}

// C += A^T*B, shapes m x k, m x n -> k x n. Sequential over m by design:
// every row of A touches all of C.
template <class T>
void gemm_accum_tn(const T* A, const T* B, T* C, std::size_t m, std::size_t k,
                   std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const T* a = A + i * k;
        const T* b = B + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const T av = a[p];
            T* c = C + p * n;
            for (std::size_t j = 0; j < n; ++j) c[j] += av * b[j];
        }
    }
}

template <class T>
void require_same_shape(const TensorT<T>& a, const TensorT<T>& b,
                        const char* op) {
    if (a.shape() != b.shape()) {
        throw ShapeError(std::string(op) + ": shape mismatch " +
                         shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
}

// Row norms below this guard pass through normalization unchanged.
inline constexpr double kNormGuard = 1e-12;
// Probability floor applied before logs in divergence terms.
inline constexpr double kLogClamp = 1e-12;

}  // namespace detail

// ----------------------------------------------------------------------------
// Linear algebra

template <class T>
TensorT<T> matmul(const TensorT<T>& a, const TensorT<T>& b) {
    if (a.ndim() != 2 || b.ndim() != 2 || a.dim(1) != b.dim(0)) {
        throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) +
                         " and " + shape_str(b.shape()));
    }
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    TensorT<T> out = TensorT<T>::zeros({m, n});
    detail::gemm_accum(a.data(), b.data(), out.data(), m, k, n);
    detail::check_finite(out, "matmul");
    detail::attach(out, "matmul", {a, b},
                   [an = a.node(), bn = b.node(), m, k, n](TensorNode<T>& self) {
                       if (an->requires_grad) {
                           an->ensure_grad();
                           detail::gemm_accum_nt(self.grad.data(), bn->values.data(),
                                                 an->grad.data(), m, n, k);
                       }
                       if (bn->requires_grad) {
                           bn->ensure_grad();
                           detail::gemm_accum_tn(an->values.data(), self.grad.data(),
                                                 bn->grad.data(), m, k, n);
                       }
                   });
    return out;
}

template <class T>
TensorT<T> transpose(const TensorT<T>& x) {
    if (x.ndim() != 2) {
        throw ShapeError("transpose: expected 2-d tensor, got " +
                         shape_str(x.shape()));
    }
    const std::size_t r = x.dim(0), c = x.dim(1);
    TensorT<T> out = TensorT<T>::zeros({c, r});
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j)
            out.data()[j * r + i] = x.data()[i * c + j];
    detail::attach(out, "transpose", {x}, [xn = x.node(), r, c](TensorNode<T>& self) {
        xn->ensure_grad();
        for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j)
                xn->grad[i * c + j] += self.grad[j * r + i];
    });
    return out;
}

// y = x * w + b with b broadcast across rows; b may be undefined.
template <class T>
TensorT<T> linear(const TensorT<T>& x, const TensorT<T>& w, const TensorT<T>& b) {
    if (x.ndim() != 2 || w.ndim() != 2 || x.dim(1) != w.dim(0)) {
        throw ShapeError("linear: incompatible shapes " + shape_str(x.shape()) +
                         " and " + shape_str(w.shape()));
    }
    const std::size_t m = x.dim(0), k = x.dim(1), n = w.dim(1);
    if (b.defined() && (b.ndim() != 1 || b.dim(0) != n)) {
        throw ShapeError("linear: bias shape " + shape_str(b.shape()) +
                         " does not match output width " + std::to_string(n));
    }
    TensorT<T> out = TensorT<T>::zeros({m, n});
    if (b.defined()) {
        for (std::size_t i = 0; i < m; ++i)
            std::copy(b.data(), b.data() + n, out.data() + i * n);
    }
    detail::gemm_accum(x.data(), w.data(), out.data(), m, k, n);
    detail::check_finite(out, "linear");

    auto backward = [xn = x.node(), wn = w.node(),
                     bn = b.defined() ? b.node() : nullptr, m, k, n](TensorNode<T>& self) {
        if (xn->requires_grad) {
            xn->ensure_grad();
            detail::gemm_accum_nt(self.grad.data(), wn->values.data(),
                                  xn->grad.data(), m, n, k);
        }
        if (wn->requires_grad) {
            wn->ensure_grad();
            detail::gemm_accum_tn(xn->values.data(), self.grad.data(),
                                  wn->grad.data(), m, k, n);
        }
        if (bn && bn->requires_grad) {
            bn->ensure_grad();
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n; ++j)
                    bn->grad[j] += self.grad[i * n + j];
        }
    };
    if (b.defined()) {
        detail::attach(out, "linear", {x, w, b}, std::move(backward));
    } else {
        detail::attach(out, "linear", {x, w}, std::move(backward));
    }
    return out;
}

// ----------------------------------------------------------------------------
// Convolution / pooling (NHWC, weights kh x kw x cin x cout, cross-correlation)

template <class T>
TensorT<T> conv2d(const TensorT<T>& x, const TensorT<T>& w, std::size_t stride,
                  std::size_t padding) {
    if (x.ndim() != 4 || w.ndim() != 4) {
        throw ShapeError("conv2d: expected 4-d input and kernel, got " +
                         shape_str(x.shape()) + " and " + shape_str(w.shape()));
    }
    if (stride < 1) throw ShapeError("conv2d: stride must be >= 1");
    const std::size_t N = x.dim(0), H = x.dim(1), W = x.dim(2), C = x.dim(3);
    const std::size_t kh = w.dim(0), kw = w.dim(1), wc = w.dim(2), co = w.dim(3);
    if (wc != C) {
        throw ShapeError("conv2d: kernel expects " + std::to_string(wc) +
                         " input channels, input has " + std::to_string(C));
    }
    if (kh > H + 2 * padding || kw > W + 2 * padding) {
        throw ShapeError("conv2d: kernel " + std::to_string(kh) + "x" +
                         std::to_string(kw) + " larger than padded input " +
                         std::to_string(H + 2 * padding) + "x" +
                         std::to_string(W + 2 * padding));
    }
    const std::size_t OH = (H + 2 * padding - kh) / stride + 1;
    const std::size_t OW = (W + 2 * padding - kw) / stride + 1;
    const std::size_t K = kh * kw * C;
    const std::size_t rows = N * OH * OW;

    // im2col patch matrix; kernel flattens to K x co in its natural layout.
    auto col = std::make_shared<std::vector<T>>(rows * K, T(0));
    {
        T* cm = col->data();
        parallel_for(N, [&](std::size_t n) {
            const T* img = x.data() + n * H * W * C;
            for (std::size_t oh = 0; oh < OH; ++oh) {
                for (std::size_t ow = 0; ow < OW; ++ow) {
                    T* row = cm + ((n * OH + oh) * OW + ow) * K;
                    for (std::size_t i = 0; i < kh; ++i) {
                        const std::int64_t ih =
                            std::int64_t(oh * stride + i) - std::int64_t(padding);
                        if (ih < 0 || ih >= std::int64_t(H)) continue;
                        for (std::size_t j = 0; j < kw; ++j) {
                            const std::int64_t iw =
                                std::int64_t(ow * stride + j) - std::int64_t(padding);
                            if (iw < 0 || iw >= std::int64_t(W)) continue;
                            const T* src = img + (std::size_t(ih) * W + std::size_t(iw)) * C;
                            std::copy(src, src + C, row + (i * kw + j) * C);
                        }
                    }
                }
            }
        });
    }

    TensorT<T> out = TensorT<T>::zeros({N, OH, OW, co});
    detail::gemm_accum(col->data(), w.data(), out.data(), rows, K, co);
    detail::check_finite(out, "conv2d");

    detail::attach(out, "conv2d", {x, w},
                   [xn = x.node(), wn = w.node(), col, N, H, W, C, kh, kw, co, OH,
                    OW, K, stride, padding](TensorNode<T>& self) {
                       const std::size_t rows = N * OH * OW;
                       if (wn->requires_grad) {
                           wn->ensure_grad();
                           detail::gemm_accum_tn(col->data(), self.grad.data(),
                                                 wn->grad.data(), rows, K, co);
                       }
                       if (xn->requires_grad) {
                           xn->ensure_grad();
                           std::vector<T> gcol(rows * K, T(0));
                           detail::gemm_accum_nt(self.grad.data(), wn->values.data(),
                                                 gcol.data(), rows, co, K);
                           parallel_for(N, [&](std::size_t n) {
                               T* gimg = xn->grad.data() + n * H * W * C;
                               for (std::size_t oh = 0; oh < OH; ++oh) {
                                   for (std::size_t ow = 0; ow < OW; ++ow) {
                                       const T* row =
                                           gcol.data() + ((n * OH + oh) * OW + ow) * K;
                                       for (std::size_t i = 0; i < kh; ++i) {
                                           const std::int64_t ih =
                                               std::int64_t(oh * stride + i) -
                                               std::int64_t(padding);
                                           if (ih < 0 || ih >= std::int64_t(H)) continue;
                                           for (std::size_t j = 0; j < kw; ++j) {
                                               const std::int64_t iw =
                                                   std::int64_t(ow * stride + j) -
                                                   std::int64_t(padding);
                                               if (iw < 0 || iw >= std::int64_t(W))
                                                   continue;
                                               T* dst = gimg + (std::size_t(ih) * W +
                                                                std::size_t(iw)) *
                                                                   C;
                                               const T* src = row + (i * kw + j) * C;
                                               for (std::size_t c = 0; c < C; ++c)
                                                   dst[c] += src[c];
                                           }
                                       }
                                   }
                               }
                           });
                       }
                   });
    return out;
}

template <class T>
TensorT<T> maxpool2d(const TensorT<T>& x, std::size_t window, std::size_t stride) {
    if (x.ndim() != 4) {
        throw ShapeError("maxpool2d: expected 4-d input, got " + shape_str(x.shape()));
    }
    if (window < 1 || stride < 1) {
        throw ShapeError("maxpool2d: window and stride must be >= 1");
    }
    const std::size_t N = x.dim(0), H = x.dim(1), W = x.dim(2), C = x.dim(3);
    if (window > H || window > W) {
        throw ShapeError("maxpool2d: window " + std::to_string(window) +
                         " exceeds input extent " + std::to_string(H) + "x" +
                         std::to_string(W));
    }
    const std::size_t OH = (H - window) / stride + 1;
    const std::size_t OW = (W - window) / stride + 1;
    TensorT<T> out = TensorT<T>::zeros({N, OH, OW, C});
    // Flat input index of each selected maximum; ties take the first position
    // in row-major window order.
    auto argmax = std::make_shared<std::vector<std::size_t>>(out.size());
    parallel_for(N, [&](std::size_t n) {
        const T* img = x.data() + n * H * W * C;
        for (std::size_t oh = 0; oh < OH; ++oh) {
            for (std::size_t ow = 0; ow < OW; ++ow) {
                for (std::size_t c = 0; c < C; ++c) {
                    T best{};
                    std::size_t best_idx = 0;
                    bool first = true;
                    for (std::size_t i = 0; i < window; ++i) {
                        for (std::size_t j = 0; j < window; ++j) {
                            const std::size_t idx =
                                ((oh * stride + i) * W + (ow * stride + j)) * C + c;
                            if (first || img[idx] > best) {
                                best = img[idx];
                                best_idx = idx;
                                first = false;
                            }
                        }
                    }
                    const std::size_t o = ((n * OH + oh) * OW + ow) * C + c;
                    out.data()[o] = best;
                    (*argmax)[o] = n * H * W * C + best_idx;
                }
            }
        }
    });
    detail::attach(out, "maxpool2d", {x}, [xn = x.node(), argmax](TensorNode<T>& self) {
        xn->ensure_grad();
        for (std::size_t o = 0; o < self.grad.size(); ++o)
            xn->grad[(*argmax)[o]] += self.grad[o];
    });
    return out;
}

template <class T>
TensorT<T> global_avg_pool(const TensorT<T>& x) {
    if (x.ndim() != 4) {
        throw ShapeError("global_avg_pool: expected 4-d input, got " +
                         shape_str(x.shape()));
    }
    const std::size_t N = x.dim(0), H = x.dim(1), W = x.dim(2), C = x.dim(3);
    TensorT<T> out = TensorT<T>::zeros({N, C});
    const double inv = 1.0 / double(H * W);
    for (std::size_t n = 0; n < N; ++n) {
        for (std::size_t c = 0; c < C; ++c) {
            double acc = 0.0;
            const T* img = x.data() + n * H * W * C;
            for (std::size_t p = 0; p < H * W; ++p) acc += double(img[p * C + c]);
            out.data()[n * C + c] = T(acc * inv);
        }
    }
    detail::attach(out, "global_avg_pool", {x},
                   [xn = x.node(), N, H, W, C, inv](TensorNode<T>& self) {
                       xn->ensure_grad();
                       for (std::size_t n = 0; n < N; ++n)
                           for (std::size_t p = 0; p < H * W; ++p)
                               for (std::size_t c = 0; c < C; ++c)
                                   xn->grad[(n * H * W + p) * C + c] +=
                                       T(double(self.grad[n * C + c]) * inv);
                   });
    return out;
}

// ----------------------------------------------------------------------------
// Batch normalization
//
// 2-d inputs normalize per feature over the batch; 4-d inputs per channel over
// batch and spatial positions. Running buffers, when given, share storage with
// the caller and are updated as decay*old + (1-decay)*batch in batch-stats
// mode.

template <class T>
TensorT<T> batch_norm(const TensorT<T>& x, const TensorT<T>& gamma,
                      const TensorT<T>& beta, bool batch_stats,
                      double eps = 1e-5, TensorT<T> running_mean = {},
                      TensorT<T> running_var = {}, double decay = 0.9,
                      bool update_running = false) {
    if (x.ndim() != 2 && x.ndim() != 4) {
        throw ShapeError("batch_norm: expected 2-d or 4-d input, got " +
                         shape_str(x.shape()));
    }
    const std::size_t C = x.dim(x.ndim() - 1);
    const std::size_t N = x.dim(0);
    const std::size_t spatial = x.size() / (N * C);
    const std::size_t m = N * spatial;
    if (gamma.size() != C || beta.size() != C) {
        throw ShapeError("batch_norm: gamma/beta must have " + std::to_string(C) +
                         " features");
    }
    if (batch_stats && N < 2) {
        throw ContractError(
            "batch_norm: batch-stats mode needs batch size >= 2, got " +
            std::to_string(N));
    }

    auto mean = std::make_shared<std::vector<double>>(C, 0.0);
    auto invstd = std::make_shared<std::vector<double>>(C, 0.0);
    if (batch_stats) {
        std::vector<double> var(C, 0.0);
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t c = 0; c < C; ++c)
                (*mean)[c] += double(x.data()[i * C + c]);
        for (std::size_t c = 0; c < C; ++c) (*mean)[c] /= double(m);
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t c = 0; c < C; ++c) {
                const double d = double(x.data()[i * C + c]) - (*mean)[c];
                var[c] += d * d;
            }
        for (std::size_t c = 0; c < C; ++c) var[c] /= double(m);
        for (std::size_t c = 0; c < C; ++c)
            (*invstd)[c] = 1.0 / std::sqrt(var[c] + eps);
        if (update_running && running_mean.defined() && running_var.defined()) {
            for (std::size_t c = 0; c < C; ++c) {
                running_mean.data()[c] =
                    T(decay * double(running_mean.data()[c]) + (1.0 - decay) * (*mean)[c]);
                running_var.data()[c] =
                    T(decay * double(running_var.data()[c]) + (1.0 - decay) * var[c]);
            }
        }
    } else {
        if (!running_mean.defined() || !running_var.defined()) {
            throw ContractError("batch_norm: running-stats mode needs running buffers");
        }
        for (std::size_t c = 0; c < C; ++c) {
            (*mean)[c] = double(running_mean.data()[c]);
            (*invstd)[c] = 1.0 / std::sqrt(double(running_var.data()[c]) + eps);
        }
    }

    TensorT<T> out = TensorT<T>::zeros(x.shape());
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t c = 0; c < C; ++c) {
            const double xhat =
                (double(x.data()[i * C + c]) - (*mean)[c]) * (*invstd)[c];
            out.data()[i * C + c] =
                T(xhat * double(gamma.data()[c]) + double(beta.data()[c]));
        }
    detail::check_finite(out, "batch_norm");

    detail::attach(
        out, "batch_norm", {x, gamma, beta},
        [xn = x.node(), gn = gamma.node(), bn = beta.node(), mean, invstd, m, C,
         batch_stats](TensorNode<T>& self) {
            // Per-channel reductions of g and g*xhat feed every branch.
            std::vector<double> sum_g(C, 0.0), sum_gx(C, 0.0);
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t c = 0; c < C; ++c) {
                    const double g = double(self.grad[i * C + c]);
                    const double xhat =
                        (double(xn->values[i * C + c]) - (*mean)[c]) * (*invstd)[c];
                    sum_g[c] += g;
                    sum_gx[c] += g * xhat;
                }
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (std::size_t c = 0; c < C; ++c) bn->grad[c] += T(sum_g[c]);
            }
            if (gn->requires_grad) {
                gn->ensure_grad();
                for (std::size_t c = 0; c < C; ++c) gn->grad[c] += T(sum_gx[c]);
            }
            if (xn->requires_grad) {
                xn->ensure_grad();
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t c = 0; c < C; ++c) {
                        const double g = double(self.grad[i * C + c]) *
                                         double(gn->values[c]);
                        if (batch_stats) {
                            const double xhat =
                                (double(xn->values[i * C + c]) - (*mean)[c]) *
                                (*invstd)[c];
                            const double gg = double(gn->values[c]);
                            xn->grad[i * C + c] +=
                                T((*invstd)[c] *
                                  (g - gg * (sum_g[c] + xhat * sum_gx[c]) / double(m)));
                        } else {
                            xn->grad[i * C + c] += T(g * (*invstd)[c]);
                        }
                    }
            }
        });
    return out;
}

// ----------------------------------------------------------------------------
// Elementwise suite

namespace detail {

enum class BinKind { Elementwise, ScalarLeft, ScalarRight };

template <class T>
BinKind bin_kind(const TensorT<T>& a, const TensorT<T>& b, const char* op) {
    if (a.shape() == b.shape()) return BinKind::Elementwise;
    if (a.size() == 1) return BinKind::ScalarLeft;
    if (b.size() == 1) return BinKind::ScalarRight;
    throw ShapeError(std::string(op) + ": shapes " + shape_str(a.shape()) +
                     " and " + shape_str(b.shape()) +
                     " are neither equal nor scalar-broadcastable");
}

}  // namespace detail

template <class T>
TensorT<T> add(const TensorT<T>& a, const TensorT<T>& b) {
    const auto kind = detail::bin_kind(a, b, "add");
    const auto& big = kind == detail::BinKind::ScalarLeft ? b : a;
    TensorT<T> out = TensorT<T>::zeros(big.shape());
    for (std::size_t i = 0; i < out.size(); ++i) {
        const T av = kind == detail::BinKind::ScalarLeft ? a.data()[0] : a.data()[i];
        const T bv = kind == detail::BinKind::ScalarRight ? b.data()[0] : b.data()[i];
        out.data()[i] = av + bv;
    }
    detail::attach(out, "add", {a, b}, [an = a.node(), bn = b.node(), kind](TensorNode<T>& self) {
        auto pour = [&](TensorNode<T>* n, bool is_scalar) {
            if (!n->requires_grad) return;
            n->ensure_grad();
            if (is_scalar) {
                double acc = 0.0;
                for (T g : self.grad) acc += double(g);
                n->grad[0] += T(acc);
            } else {
                for (std::size_t i = 0; i < self.grad.size(); ++i)
                    n->grad[i] += self.grad[i];
            }
        };
        pour(an.get(), kind == detail::BinKind::ScalarLeft);
        pour(bn.get(), kind == detail::BinKind::ScalarRight);
    });
    return out;
}

template <class T>
TensorT<T> sub(const TensorT<T>& a, const TensorT<T>& b) {
    const auto kind = detail::bin_kind(a, b, "sub");
    const auto& big = kind == detail::BinKind::ScalarLeft ? b : a;
    TensorT<T> out = TensorT<T>::zeros(big.shape());
    for (std::size_t i = 0; i < out.size(); ++i) {
        const T av = kind == detail::BinKind::ScalarLeft ? a.data()[0] : a.data()[i];
        const T bv = kind == detail::BinKind::ScalarRight ? b.data()[0] : b.data()[i];
        out.data()[i] = av - bv;
    }
    detail::attach(out, "sub", {a, b}, [an = a.node(), bn = b.node(), kind](TensorNode<T>& self) {
        if (an->requires_grad) {
            an->ensure_grad();
            if (kind == detail::BinKind::ScalarLeft) {
                double acc = 0.0;
                for (T g : self.grad) acc += double(g);
                an->grad[0] += T(acc);
            } else {
                for (std::size_t i = 0; i < self.grad.size(); ++i)
                    an->grad[i] += self.grad[i];
            }
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
            if (kind == detail::BinKind::ScalarRight) {
                double acc = 0.0;
                for (T g : self.grad) acc += double(g);
                bn->grad[0] -= T(acc);
            } else {
                for (std::size_t i = 0; i < self.grad.size(); ++i)
                    bn->grad[i] -= self.grad[i];
            }
        }
    });
    return out;
}

template <class T>
TensorT<T> mul(const TensorT<T>& a, const TensorT<T>& b) {
    const auto kind = detail::bin_kind(a, b, "mul");
    const auto& big = kind == detail::BinKind::ScalarLeft ? b : a;
    TensorT<T> out = TensorT<T>::zeros(big.shape());
    for (std::size_t i = 0; i < out.size(); ++i) {
        const T av = kind == detail::BinKind::ScalarLeft ? a.data()[0] : a.data()[i];
        const T bv = kind == detail::BinKind::ScalarRight ? b.data()[0] : b.data()[i];
        out.data()[i] = av * bv;
    }
    detail::attach(out, "mul", {a, b}, [an = a.node(), bn = b.node(), kind](TensorNode<T>& self) {
        if (an->requires_grad) {
            an->ensure_grad();
            if (kind == detail::BinKind::ScalarLeft) {
                double acc = 0.0;
                for (std::size_t i = 0; i < self.grad.size(); ++i)
                    acc += double(self.grad[i]) * double(bn->values[i]);
                an->grad[0] += T(acc);
            } else {
                for (std::size_t i = 0; i < self.grad.size(); ++i) {
                    const T bv = kind == detail::BinKind::ScalarRight
                                     ? bn->values[0]
                                     : bn->values[i];
                    an->grad[i] += self.grad[i] * bv;
                }
            }
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
            if (kind == detail::BinKind::ScalarRight) {
                double acc = 0.0;
                for (std::size_t i = 0; i < self.grad.size(); ++i)
                    acc += double(self.grad[i]) * double(an->values[i]);
                bn->grad[0] += T(acc);
            } else {
                for (std::size_t i = 0; i < self.grad.size(); ++i) {
                    const T av = kind == detail::BinKind::ScalarLeft
                                     ? an->values[0]
                                     : an->values[i];
                    bn->grad[i] += self.grad[i] * av;
                }
            }
        }
    });
    return out;
}

template <class T>
TensorT<T> scale(const TensorT<T>& x, T c) {
    TensorT<T> out = TensorT<T>::zeros(x.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out.data()[i] = x.data()[i] * c;
    detail::attach(out, "scale", {x}, [xn = x.node(), c](TensorNode<T>& self) {
        xn->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i)
            xn->grad[i] += self.grad[i] * c;
    });
    return out;
}

template <class T>
TensorT<T> add_scalar(const TensorT<T>& x, T c) {
    TensorT<T> out = TensorT<T>::zeros(x.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out.data()[i] = x.data()[i] + c;
    detail::attach(out, "add_scalar", {x}, [xn = x.node()](TensorNode<T>& self) {
        xn->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i)
            xn->grad[i] += self.grad[i];
    });
    return out;
}

template <class T>
TensorT<T> relu(const TensorT<T>& x) {
    TensorT<T> out = TensorT<T>::zeros(x.shape());
    for (std::size_t i = 0; i < out.size(); ++i)
        out.data()[i] = x.data()[i] > T(0) ? x.data()[i] : T(0);
    detail::attach(out, "relu", {x}, [xn = x.node()](TensorNode<T>& self) {
        xn->ensure_grad();
        // Subgradient 0 at the kink.
        for (std::size_t i = 0; i < self.grad.size(); ++i)
            if (xn->values[i] > T(0)) xn->grad[i] += self.grad[i];
    });
    return out;
}

template <class T>
TensorT<T> tanh(const TensorT<T>& x) {
    TensorT<T> out = TensorT<T>::zeros(x.shape());
    for (std::size_t i = 0; i < out.size(); ++i)
        out.data()[i] = std::tanh(x.data()[i]);
    detail::attach(out, "tanh", {x},
                   [xn = x.node(), yv = out.values()](TensorNode<T>& self) {
                       xn->ensure_grad();
                       for (std::size_t i = 0; i < self.grad.size(); ++i)
                           xn->grad[i] += self.grad[i] * (T(1) - yv[i] * yv[i]);
                   });
    return out;
}

template <class T>
TensorT<T> exp(const TensorT<T>& x) {
    TensorT<T> out = TensorT<T>::zeros(x.shape());
    for (std::size_t i = 0; i < out.size(); ++i)
        out.data()[i] = std::exp(x.data()[i]);
    detail::check_finite(out, "exp");
    detail::attach(out, "exp", {x},
                   [xn = x.node(), yv = out.values()](TensorNode<T>& self) {
                       xn->ensure_grad();
                       for (std::size_t i = 0; i < self.grad.size(); ++i)
                           xn->grad[i] += self.grad[i] * yv[i];
                   });
    return out;
}

template <class T>
TensorT<T> log(const TensorT<T>& x) {
    if (checked_mode()) {
        for (std::size_t i = 0; i < x.size(); ++i)
            if (!(x.data()[i] > T(0))) {
                throw DomainError("log: non-positive input " +
                                  std::to_string(double(x.data()[i])));
            }
    }
    TensorT<T> out = TensorT<T>::zeros(x.shape());
    for (std::size_t i = 0; i < out.size(); ++i)
        out.data()[i] = std::log(x.data()[i]);
    detail::attach(out, "log", {x}, [xn = x.node()](TensorNode<T>& self) {
        xn->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i)
            xn->grad[i] += self.grad[i] / xn->values[i];
    });
    return out;
}

template <class T>
TensorT<T> sum(const TensorT<T>& x) {
    double acc = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) acc += double(x.data()[i]);
    TensorT<T> out = TensorT<T>::scalar(T(acc));
    detail::attach(out, "sum", {x}, [xn = x.node()](TensorNode<T>& self) {
        xn->ensure_grad();
        for (std::size_t i = 0; i < xn->grad.size(); ++i)
            xn->grad[i] += self.grad[0];
    });
    return out;
}

template <class T>
TensorT<T> mean(const TensorT<T>& x) {
    double acc = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) acc += double(x.data()[i]);
    const double inv = 1.0 / double(x.size());
    TensorT<T> out = TensorT<T>::scalar(T(acc * inv));
    detail::attach(out, "mean", {x}, [xn = x.node(), inv](TensorNode<T>& self) {
        xn->ensure_grad();
        for (std::size_t i = 0; i < xn->grad.size(); ++i)
            xn->grad[i] += T(double(self.grad[0]) * inv);
    });
    return out;
}

template <class T>
TensorT<T> reshape(const TensorT<T>& x, Shape shape) {
    if (numel(shape) != x.size()) {
        throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " +
                         shape_str(shape));
    }
    TensorT<T> out = TensorT<T>::from(std::move(shape), x.values());
    detail::attach(out, "reshape", {x}, [xn = x.node()](TensorNode<T>& self) {
        xn->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i)
            xn->grad[i] += self.grad[i];
    });
    return out;
}

template <class T>
TensorT<T> concat_cols(const std::vector<TensorT<T>>& parts) {
    if (parts.empty()) throw ContractError("concat_cols: no inputs");
    const std::size_t n = parts[0].dim(0);
    std::size_t total = 0;
    for (const auto& p : parts) {
        if (p.ndim() != 2 || p.dim(0) != n) {
            throw ShapeError("concat_cols: all parts must be 2-d with " +
                             std::to_string(n) + " rows");
        }
        total += p.dim(1);
    }
    TensorT<T> out = TensorT<T>::zeros({n, total});
    std::size_t off = 0;
    for (const auto& p : parts) {
        const std::size_t w = p.dim(1);
        for (std::size_t i = 0; i < n; ++i)
            std::copy(p.data() + i * w, p.data() + (i + 1) * w,
                      out.data() + i * total + off);
        off += w;
    }

    bool any = false;
    for (const auto& p : parts) any = any || p.requires_grad();
    if (grad_enabled() && any) {
        auto& node = *out.node();
        node.requires_grad = true;
        node.op = "concat_cols";
        std::vector<std::size_t> widths;
        for (const auto& p : parts) {
            node.parents.push_back(p.node());
            widths.push_back(p.dim(1));
        }
        node.backward = [widths, n, total](TensorNode<T>& self) {
            std::size_t off = 0;
            for (std::size_t k = 0; k < self.parents.size(); ++k) {
                auto& p = *self.parents[k];
                const std::size_t w = widths[k];
                if (p.requires_grad) {
                    p.ensure_grad();
                    for (std::size_t i = 0; i < n; ++i)
                        for (std::size_t j = 0; j < w; ++j)
                            p.grad[i * w + j] += self.grad[i * total + off + j];
                }
                off += w;
            }
        };
    }
    return out;
}

// ----------------------------------------------------------------------------
// Row-structured ops

// Row softmax with max subtraction; rows sum to 1 for any finite input.
template <class T>
TensorT<T> softmax_rows(const TensorT<T>& s) {
    if (s.ndim() != 2) {
        throw ShapeError("softmax_rows: expected 2-d input, got " +
                         shape_str(s.shape()));
    }
    const std::size_t n = s.dim(0), m = s.dim(1);
    TensorT<T> out = TensorT<T>::zeros({n, m});
    for (std::size_t i = 0; i < n; ++i) {
        const T* row = s.data() + i * m;
        T mx = row[0];
        for (std::size_t j = 1; j < m; ++j) mx = std::max(mx, row[j]);
        double denom = 0.0;
        for (std::size_t j = 0; j < m; ++j)
            denom += std::exp(double(row[j]) - double(mx));
        for (std::size_t j = 0; j < m; ++j)
            out.data()[i * m + j] =
                T(std::exp(double(row[j]) - double(mx)) / denom);
    }
    detail::attach(out, "softmax_rows", {s},
                   [sn = s.node(), yv = out.values(), n, m](TensorNode<T>& self) {
                       sn->ensure_grad();
                       for (std::size_t i = 0; i < n; ++i) {
                           double dot = 0.0;
                           for (std::size_t j = 0; j < m; ++j)
                               dot += double(self.grad[i * m + j]) *
                                      double(yv[i * m + j]);
                           for (std::size_t j = 0; j < m; ++j)
                               sn->grad[i * m + j] +=
                                   T(double(yv[i * m + j]) *
                                     (double(self.grad[i * m + j]) - dot));
                       }
                   });
    return out;
}

// Each row divided by max(norm, 1e-12); rows below the guard pass through
// unchanged and bump the checked-mode diagnostic counter.
template <class T>
TensorT<T> l2_normalize_rows(const TensorT<T>& v) {
    if (v.ndim() != 2) {
        throw ShapeError("l2_normalize_rows: expected 2-d input, got " +
                         shape_str(v.shape()));
    }
    const std::size_t n = v.dim(0), d = v.dim(1);
    TensorT<T> out = TensorT<T>::zeros({n, d});
    auto norms = std::make_shared<std::vector<double>>(n, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        double acc = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            const double x = double(v.data()[i * d + j]);
            acc += x * x;
        }
        const double r = std::sqrt(acc);
        (*norms)[i] = r;
        if (r < detail::kNormGuard) {
            if (checked_mode()) ++diagnostics().zero_norm_rows;
            for (std::size_t j = 0; j < d; ++j)
                out.data()[i * d + j] = v.data()[i * d + j];
        } else {
            for (std::size_t j = 0; j < d; ++j)
                out.data()[i * d + j] = T(double(v.data()[i * d + j]) / r);
        }
    }
    detail::attach(out, "l2_normalize_rows", {v},
                   [vn = v.node(), yv = out.values(), norms, n, d](TensorNode<T>& self) {
                       vn->ensure_grad();
                       for (std::size_t i = 0; i < n; ++i) {
                           const double r = (*norms)[i];
                           if (r < detail::kNormGuard) {
                               for (std::size_t j = 0; j < d; ++j)
                                   vn->grad[i * d + j] += self.grad[i * d + j];
                               continue;
                           }
                           double dot = 0.0;
                           for (std::size_t j = 0; j < d; ++j)
                               dot += double(self.grad[i * d + j]) *
                                      double(yv[i * d + j]);
                           for (std::size_t j = 0; j < d; ++j)
                               vn->grad[i * d + j] +=
                                   T((double(self.grad[i * d + j]) -
                                      dot * double(yv[i * d + j])) /
                                     r);
                       }
                   });
    return out;
}

// Mean over the batch of -log softmax(logits)[label], in log space.
template <class T>
TensorT<T> cross_entropy(const TensorT<T>& logits, const std::vector<int>& labels) {
    if (logits.ndim() != 2 || logits.dim(0) != labels.size()) {
        throw ShapeError("cross_entropy: logits " + shape_str(logits.shape()) +
                         " vs " + std::to_string(labels.size()) + " labels");
    }
    const std::size_t n = logits.dim(0), k = logits.dim(1);
    for (std::size_t i = 0; i < n; ++i) {
        if (labels[i] < 0 || std::size_t(labels[i]) >= k) {
            throw IndexError("cross_entropy: label " + std::to_string(labels[i]) +
                             " out of range [0, " + std::to_string(k) + ") at row " +
                             std::to_string(i));
        }
    }
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const T* row = logits.data() + i * k;
        double mx = double(row[0]);
        for (std::size_t j = 1; j < k; ++j) mx = std::max(mx, double(row[j]));
        double lse = 0.0;
        for (std::size_t j = 0; j < k; ++j) lse += std::exp(double(row[j]) - mx);
        lse = mx + std::log(lse);
        total += lse - double(row[labels[i]]);
    }
    TensorT<T> out = TensorT<T>::scalar(T(total / double(n)));
    detail::attach(out, "cross_entropy", {logits},
                   [ln = logits.node(), labels, n, k](TensorNode<T>& self) {
                       ln->ensure_grad();
                       const double g = double(self.grad[0]) / double(n);
                       for (std::size_t i = 0; i < n; ++i) {
                           const T* row = ln->values.data() + i * k;
                           double mx = double(row[0]);
                           for (std::size_t j = 1; j < k; ++j)
                               mx = std::max(mx, double(row[j]));
                           double denom = 0.0;
                           for (std::size_t j = 0; j < k; ++j)
                               denom += std::exp(double(row[j]) - mx);
                           for (std::size_t j = 0; j < k; ++j) {
                               double p = std::exp(double(row[j]) - mx) / denom;
                               if (std::size_t(labels[i]) == j) p -= 1.0;
                               ln->grad[i * k + j] += T(p * g);
                           }
                       }
                   });
    return out;
}

// sum p * (log p - log q) with entries clamped at 1e-12 before the logs.
// Differentiable in both arguments; callers detach the side that must not
// receive gradient.
template <class T>
TensorT<T> kl_sum(const TensorT<T>& p, const TensorT<T>& q) {
    detail::require_same_shape(p, q, "kl_sum");
    double total = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        const double pv = double(p.data()[i]);
        const double qt = std::max(double(q.data()[i]), detail::kLogClamp);
        const double pt = std::max(pv, detail::kLogClamp);
        total += pv * (std::log(pt) - std::log(qt));
    }
    TensorT<T> out = TensorT<T>::scalar(T(total));
    detail::attach(out, "kl_sum", {p, q}, [pn = p.node(), qn = q.node()](TensorNode<T>& self) {
        const double g = double(self.grad[0]);
        if (pn->requires_grad) {
            pn->ensure_grad();
            for (std::size_t i = 0; i < pn->grad.size(); ++i) {
                const double pt = std::max(double(pn->values[i]), detail::kLogClamp);
                const double qt = std::max(double(qn->values[i]), detail::kLogClamp);
                pn->grad[i] += T(g * (std::log(pt) - std::log(qt) + 1.0));
            }
        }
        if (qn->requires_grad) {
            qn->ensure_grad();
            for (std::size_t i = 0; i < qn->grad.size(); ++i) {
                const double qt = std::max(double(qn->values[i]), detail::kLogClamp);
                qn->grad[i] += T(-g * double(pn->values[i]) / qt);
            }
        }
    });
    return out;
}

// mean over rows of (1 - <est_i, tgt_i>); zero when estimates coincide with
// unit-norm targets.
template <class T>
TensorT<T> cosine_complement(const TensorT<T>& est, const TensorT<T>& tgt) {
    detail::require_same_shape(est, tgt, "cosine_complement");
    if (est.ndim() != 2) {
        throw ShapeError("cosine_complement: expected 2-d inputs, got " +
                         shape_str(est.shape()));
    }
    const std::size_t n = est.dim(0), d = est.dim(1);
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        double dot = 0.0;
        for (std::size_t j = 0; j < d; ++j)
            dot += double(est.data()[i * d + j]) * double(tgt.data()[i * d + j]);
        total += 1.0 - dot;
    }
    TensorT<T> out = TensorT<T>::scalar(T(total / double(n)));
    detail::attach(out, "cosine_complement", {est, tgt},
                   [en = est.node(), tn = tgt.node(), n](TensorNode<T>& self) {
                       const double g = double(self.grad[0]) / double(n);
                       if (en->requires_grad) {
                           en->ensure_grad();
                           for (std::size_t i = 0; i < en->grad.size(); ++i)
                               en->grad[i] += T(-g * double(tn->values[i]));
                       }
                       if (tn->requires_grad) {
                           tn->ensure_grad();
                           for (std::size_t i = 0; i < tn->grad.size(); ++i)
                               tn->grad[i] += T(-g * double(en->values[i]));
                       }
                   });
    return out;
}

}  // namespace mhgd
