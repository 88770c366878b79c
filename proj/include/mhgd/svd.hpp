// Copyright (c) 2026 the mhgd authors
// SPDX-License-Identifier: Apache-2.0
//
// Truncated SVD with an analytic backward pass, plus the feature-map
// compression that turns a sensed activation into one unit-norm vector per
// batch element.
//
// The forward decomposes the smaller Gram matrix (columns when D <= H*W,
// rows otherwise) with cyclic Jacobi sweeps in double precision. The column
// sign convention -- largest-magnitude entry positive, lowest index winning
// ties -- makes the factors deterministic and absorbs global sign flips of
// the input. The backward is the eigen-decomposition vector-Jacobian product
// with every spectral-gap reciprocal replaced by gap/(gap^2 + eps_gap) and
// the final gradient clipped elementwise.

#pragma once

#include <algorithm>
#include <cmath>
#include <memory>
#include <numeric>
#include <string>
#include <vector>

#include "mhgd/common.hpp"
#include "mhgd/ops.hpp"
#include "mhgd/tensor.hpp"

namespace mhgd {

template <class T>
struct MatT {
    std::size_t rows = 0, cols = 0;
    std::vector<T> a;

    MatT() = default;
    MatT(std::size_t r, std::size_t c) : rows(r), cols(c), a(r * c, T(0)) {}
    T& operator()(std::size_t i, std::size_t j) { return a[i * cols + j]; }
    T operator()(std::size_t i, std::size_t j) const { return a[i * cols + j]; }
};

using MatD = MatT<double>;

namespace svddetail {

inline constexpr double kJacobiTol = 1e-10;
inline constexpr double kDegenerateRatio = 1e-7;
inline constexpr double kGapEps = 1e-4;
inline constexpr double kGradClip = 1e3;

// Symmetric eigen-decomposition by cyclic Jacobi rotations; eigenpairs are
// returned sorted by descending eigenvalue (original order breaking ties).
inline void sym_eig_jacobi(MatD m, MatD& vecs, std::vector<double>& vals) {
    const std::size_t n = m.rows;
    vecs = MatD(n, n);
    for (std::size_t i = 0; i < n; ++i) vecs(i, i) = 1.0;

    double frob = 0.0;
    for (double x : m.a) frob += x * x;
    frob = std::sqrt(frob);
    const double tol = kJacobiTol * std::max(frob, 1e-300);

    for (int sweep = 0; sweep < 100; ++sweep) {
        double off = 0.0;
        for (std::size_t p = 0; p < n; ++p)
            for (std::size_t q = p + 1; q < n; ++q)
                off = std::max(off, std::fabs(m(p, q)));
        if (off <= tol) break;
        for (std::size_t p = 0; p < n; ++p) {
            for (std::size_t q = p + 1; q < n; ++q) {
                const double apq = m(p, q);
                if (std::fabs(apq) <= tol * 1e-2) continue;
                const double theta = (m(q, q) - m(p, p)) / (2.0 * apq);
                const double t =
                    (theta >= 0 ? 1.0 : -1.0) /
                    (std::fabs(theta) + std::sqrt(theta * theta + 1.0));
                const double c = 1.0 / std::sqrt(t * t + 1.0);
                const double s = t * c;
                const double app = m(p, p), aqq = m(q, q);
                m(p, p) = app - t * apq;
                m(q, q) = aqq + t * apq;
                m(p, q) = 0.0;
                m(q, p) = 0.0;
                for (std::size_t i = 0; i < n; ++i) {
                    if (i != p && i != q) {
                        const double aip = m(i, p), aiq = m(i, q);
                        m(i, p) = c * aip - s * aiq;
                        m(p, i) = m(i, p);
                        m(i, q) = s * aip + c * aiq;
                        m(q, i) = m(i, q);
                    }
                    const double vip = vecs(i, p), viq = vecs(i, q);
                    vecs(i, p) = c * vip - s * viq;
                    vecs(i, q) = s * vip + c * viq;
                }
            }
        }
    }

    vals.assign(n, 0.0);
    for (std::size_t i = 0; i < n; ++i) vals[i] = m(i, i);
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return vals[a] > vals[b]; });
    MatD sorted_vecs(n, n);
    std::vector<double> sorted_vals(n);
    for (std::size_t j = 0; j < n; ++j) {
        sorted_vals[j] = vals[order[j]];
        for (std::size_t i = 0; i < n; ++i) sorted_vecs(i, j) = vecs(i, order[j]);
    }
    vecs = std::move(sorted_vecs);
    vals = std::move(sorted_vals);
}

// Flips a column so its largest-magnitude entry is positive; the lowest index
// wins magnitude ties. Returns true when the column was negated.
inline bool sign_fix_column(MatD& m, std::size_t j) {
    std::size_t arg = 0;
    double best = -1.0;
    for (std::size_t i = 0; i < m.rows; ++i) {
        const double v = std::fabs(m(i, j));
        if (v > best) {
            best = v;
            arg = i;
        }
    }
    if (m(arg, j) < 0.0) {
        for (std::size_t i = 0; i < m.rows; ++i) m(i, j) = -m(i, j);
        return true;
    }
    return false;
}

inline double gap_reg(double gap) { return gap / (gap * gap + kGapEps); }

}  // namespace svddetail

template <class T>
struct SvdResultT {
    std::vector<T> sigma;  // k values, descending
    MatT<T> v;             // D x k right singular vectors, sign-fixed

    // Retained for the backward pass (double precision).
    MatD input;                 // the decomposed matrix f, n x d
    MatD basis;                 // full eigenbasis of the smaller Gram matrix
    std::vector<double> lambda;  // its eigenvalues, descending
    std::vector<double> sigma_full;
    MatD v_top;                 // d x k, double copy of the public factors
    bool gram_over_cols = true;  // true: basis spans column space (d <= n)
    std::size_t k = 0;
};

using SvdResult = SvdResultT<float>;

// Top-k right singular factors of f. Throws DegenerateRankError when the
// requested rank is not numerically supported (sigma_k / sigma_1 < 1e-7).
template <class T>
SvdResultT<T> truncated_svd(const MatT<T>& f, std::size_t k) {
    const std::size_t n = f.rows, d = f.cols;
    if (k < 1 || k > std::min(n, d)) {
        throw ShapeError("truncated_svd: k=" + std::to_string(k) +
                         " outside [1, min(" + std::to_string(n) + ", " +
                         std::to_string(d) + ")]");
    }
    for (T x : f.a) {
        if (!std::isfinite(double(x))) {
            throw DomainError("truncated_svd: non-finite input entry");
        }
    }

    SvdResultT<T> res;
    res.k = k;
    res.input = MatD(n, d);
    for (std::size_t i = 0; i < f.a.size(); ++i) res.input.a[i] = double(f.a[i]);
    res.gram_over_cols = d <= n;

    const std::size_t g = res.gram_over_cols ? d : n;
    MatD gram(g, g);
    if (res.gram_over_cols) {
        for (std::size_t i = 0; i < d; ++i)
            for (std::size_t j = i; j < d; ++j) {
                double acc = 0.0;
                for (std::size_t r = 0; r < n; ++r)
                    acc += res.input(r, i) * res.input(r, j);
                gram(i, j) = acc;
                gram(j, i) = acc;
            }
    } else {
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = i; j < n; ++j) {
                double acc = 0.0;
                for (std::size_t c = 0; c < d; ++c)
                    acc += res.input(i, c) * res.input(j, c);
                gram(i, j) = acc;
                gram(j, i) = acc;
            }
    }
    svddetail::sym_eig_jacobi(std::move(gram), res.basis, res.lambda);

    res.sigma_full.resize(g);
    for (std::size_t i = 0; i < g; ++i)
        res.sigma_full[i] = std::sqrt(std::max(res.lambda[i], 0.0));

    const double s1 = res.sigma_full[0];
    const double sk = res.sigma_full[k - 1];
    if (s1 <= 0.0 || sk / s1 < svddetail::kDegenerateRatio) {
        throw DegenerateRankError(
            "truncated_svd: rank k=" + std::to_string(k) +
            " is degenerate (sigma_k/sigma_1 = " +
            std::to_string(s1 > 0.0 ? sk / s1 : 0.0) + ")");
    }

    res.v_top = MatD(d, k);
    if (res.gram_over_cols) {
        for (std::size_t j = 0; j < k; ++j) {
            svddetail::sign_fix_column(res.basis, j);
            for (std::size_t i = 0; i < d; ++i) res.v_top(i, j) = res.basis(i, j);
        }
    } else {
        // v_j = f^T u_j / sigma_j; flipping v also flips the stored u so the
        // pair stays consistent for the backward pass.
        for (std::size_t j = 0; j < k; ++j) {
            for (std::size_t c = 0; c < d; ++c) {
                double acc = 0.0;
                for (std::size_t r = 0; r < n; ++r)
                    acc += res.input(r, c) * res.basis(r, j);
                res.v_top(c, j) = acc / res.sigma_full[j];
            }
            if (svddetail::sign_fix_column(res.v_top, j)) {
                for (std::size_t r = 0; r < n; ++r)
                    res.basis(r, j) = -res.basis(r, j);
            }
        }
    }

    res.sigma.resize(k);
    for (std::size_t j = 0; j < k; ++j) res.sigma[j] = T(res.sigma_full[j]);
    res.v = MatT<T>(d, k);
    for (std::size_t i = 0; i < d * k; ++i) res.v.a[i] = T(res.v_top.a[i]);
    return res;
}

// Vector-Jacobian product of the sign-fixed forward map: upstream gradients
// on the top-k right singular vectors map back to the decomposed matrix.
// Gap-regularized and clipped; finite for every input.
template <class T>
MatT<T> svd_backward(const SvdResultT<T>& res, const MatT<T>& grad_v) {
    const std::size_t n = res.input.rows, d = res.input.cols, k = res.k;
    if (grad_v.rows != d || grad_v.cols != k) {
        throw ShapeError("svd_backward: upstream grad must be " +
                         std::to_string(d) + "x" + std::to_string(k));
    }
    MatD gv(d, k);
    for (std::size_t i = 0; i < gv.a.size(); ++i) gv.a[i] = double(grad_v.a[i]);

    MatD grad_f(n, d);
    if (res.gram_over_cols) {
        // h = basis^T gv (only k live columns); m = gap_reg o h off-diagonal;
        // grad = f * basis (m + m^T) basis^T.
        MatD h(d, k);
        for (std::size_t i = 0; i < d; ++i)
            for (std::size_t j = 0; j < k; ++j) {
                double acc = 0.0;
                for (std::size_t r = 0; r < d; ++r)
                    acc += res.basis(r, i) * gv(r, j);
                h(i, j) = acc;
            }
        MatD m(d, d);
        for (std::size_t i = 0; i < d; ++i)
            for (std::size_t j = 0; j < k; ++j) {
                if (i == j) continue;
                m(i, j) = svddetail::gap_reg(res.lambda[j] - res.lambda[i]) * h(i, j);
            }
        MatD sym(d, d);
        for (std::size_t i = 0; i < d; ++i)
            for (std::size_t j = 0; j < d; ++j) sym(i, j) = m(i, j) + m(j, i);
        // a = basis * sym * basis^T
        MatD bs(d, d);
        for (std::size_t i = 0; i < d; ++i)
            for (std::size_t j = 0; j < d; ++j) {
                double acc = 0.0;
                for (std::size_t r = 0; r < d; ++r) acc += res.basis(i, r) * sym(r, j);
                bs(i, j) = acc;
            }
        MatD amat(d, d);
        for (std::size_t i = 0; i < d; ++i)
            for (std::size_t j = 0; j < d; ++j) {
                double acc = 0.0;
                for (std::size_t r = 0; r < d; ++r) acc += bs(i, r) * res.basis(j, r);
                amat(i, j) = acc;
            }
        for (std::size_t r = 0; r < n; ++r)
            for (std::size_t j = 0; j < d; ++j) {
                double acc = 0.0;
                for (std::size_t c = 0; c < d; ++c)
                    acc += res.input(r, c) * amat(c, j);
                grad_f(r, j) = acc;
            }
    } else {
        // Row-space decomposition: v_j = f^T u_j / sigma_j contributes three
        // terms -- the direct f^T path, the eigenvector path, and the
        // eigenvalue path through sigma.
        std::vector<double> inv_sigma(k);
        for (std::size_t j = 0; j < k; ++j)
            inv_sigma[j] = 1.0 / std::max(res.sigma_full[j], 1e-12);

        for (std::size_t r = 0; r < n; ++r)
            for (std::size_t c = 0; c < d; ++c) {
                double acc = 0.0;
                for (std::size_t j = 0; j < k; ++j)
                    acc += res.basis(r, j) * inv_sigma[j] * gv(c, j);
                grad_f(r, c) = acc;
            }

        MatD gu(n, k);
        for (std::size_t r = 0; r < n; ++r)
            for (std::size_t j = 0; j < k; ++j) {
                double acc = 0.0;
                for (std::size_t c = 0; c < d; ++c)
                    acc += res.input(r, c) * gv(c, j);
                gu(r, j) = acc * inv_sigma[j];
            }
        MatD h(n, k);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < k; ++j) {
                double acc = 0.0;
                for (std::size_t r = 0; r < n; ++r)
                    acc += res.basis(r, i) * gu(r, j);
                h(i, j) = acc;
            }
        MatD m(n, n);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < k; ++j) {
                if (i == j) continue;
                m(i, j) = svddetail::gap_reg(res.lambda[j] - res.lambda[i]) * h(i, j);
            }
        for (std::size_t j = 0; j < k; ++j) {
            double dot = 0.0;
            for (std::size_t c = 0; c < d; ++c) dot += gv(c, j) * res.v_top(c, j);
            const double gsigma = -dot * inv_sigma[j];
            m(j, j) = gsigma * 0.5 * inv_sigma[j];  // d(lambda) = d(sigma^2)
        }
        MatD sym(n, n);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < n; ++j) sym(i, j) = m(i, j) + m(j, i);
        MatD bs(n, n);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < n; ++j) {
                double acc = 0.0;
                for (std::size_t r = 0; r < n; ++r) acc += res.basis(i, r) * sym(r, j);
                bs(i, j) = acc;
            }
        MatD w(n, n);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < n; ++j) {
                double acc = 0.0;
                for (std::size_t r = 0; r < n; ++r) acc += bs(i, r) * res.basis(j, r);
                w(i, j) = acc;
            }
        for (std::size_t r = 0; r < n; ++r)
            for (std::size_t c = 0; c < d; ++c) {
                double acc = 0.0;
                for (std::size_t i = 0; i < n; ++i) acc += w(r, i) * res.input(i, c);
                grad_f(r, c) += acc;
            }
    }

    MatT<T> out(n, d);
    for (std::size_t i = 0; i < out.a.size(); ++i) {
        out.a[i] = T(std::clamp(grad_f.a[i], -svddetail::kGradClip,
                                svddetail::kGradClip));
    }
    return out;
}

// ----------------------------------------------------------------------------
// Feature vector sets

template <class T>
struct FeatureVectorSetT {
    TensorT<T> vectors;  // N x (k * channels), unit-norm rows
    std::string origin;  // tap identifier

    std::size_t count() const { return vectors.dim(0); }
    std::size_t dim() const { return vectors.dim(1); }
};

using FeatureVectorSet = FeatureVectorSetT<float>;

// Compresses a sensed N x H x W x C activation: per image, the spatial
// positions are flattened to an (H*W) x C matrix, the top-k right singular
// vectors are concatenated into one row, and the row is renormalized.
// Differentiable through the SVD. A degenerate spectrum reports the batch
// index of the offending image.
template <class T>
FeatureVectorSetT<T> compress_feature_map(const TensorT<T>& x, std::size_t k,
                                          std::string origin = "") {
    if (x.ndim() != 4) {
        throw ShapeError("compress_feature_map: expected 4-d input, got " +
                         shape_str(x.shape()));
    }
    const std::size_t N = x.dim(0), H = x.dim(1), W = x.dim(2), C = x.dim(3);
    const std::size_t hw = H * W;
    if (k < 1 || k > std::min(hw, C)) {
        throw ShapeError("compress_feature_map: k=" + std::to_string(k) +
                         " outside [1, min(" + std::to_string(hw) + ", " +
                         std::to_string(C) + ")]");
    }

    auto results = std::make_shared<std::vector<SvdResultT<T>>>(N);
    auto norms = std::make_shared<std::vector<double>>(N, 0.0);
    std::vector<std::string> failures(N);
    TensorT<T> out = TensorT<T>::zeros({N, k * C});

    parallel_for(N, [&](std::size_t img) {
        try {
            MatT<T> f(hw, C);
            std::copy(x.data() + img * hw * C, x.data() + (img + 1) * hw * C,
                      f.a.begin());
            (*results)[img] = truncated_svd(f, k);
            const auto& v = (*results)[img].v;
            T* row = out.data() + img * k * C;
            for (std::size_t j = 0; j < k; ++j)
                for (std::size_t c = 0; c < C; ++c) row[j * C + c] = v(c, j);
            double acc = 0.0;
            for (std::size_t i = 0; i < k * C; ++i)
                acc += double(row[i]) * double(row[i]);
            const double r = std::sqrt(acc);
            (*norms)[img] = r;
            if (r >= detail::kNormGuard) {
                for (std::size_t i = 0; i < k * C; ++i)
                    row[i] = T(double(row[i]) / r);
            }
        } catch (const Error& e) {
            failures[img] = e.what();
        }
    });
    for (std::size_t img = 0; img < N; ++img) {
        if (!failures[img].empty()) {
            throw DegenerateRankError(failures[img] + " (batch index " +
                                      std::to_string(img) + ")");
        }
    }

    detail::attach(out, "compress_feature_map", {x},
                   [xn = x.node(), yv = out.values(), results, norms, N, hw, C,
                    k](TensorNode<T>& self) {
                       xn->ensure_grad();
                       parallel_for(N, [&](std::size_t img) {
                           const std::size_t width = k * C;
                           const T* g = self.grad.data() + img * width;
                           const T* y = yv.data() + img * width;
                           // Through the row normalization first.
                           std::vector<double> gpre(width);
                           const double r = (*norms)[img];
                           if (r < detail::kNormGuard) {
                               for (std::size_t i = 0; i < width; ++i)
                                   gpre[i] = double(g[i]);
                           } else {
                               double dot = 0.0;
                               for (std::size_t i = 0; i < width; ++i)
                                   dot += double(g[i]) * double(y[i]);
                               for (std::size_t i = 0; i < width; ++i)
                                   gpre[i] = (double(g[i]) - dot * double(y[i])) / r;
                           }
                           MatT<T> gv(C, k);
                           for (std::size_t j = 0; j < k; ++j)
                               for (std::size_t c = 0; c < C; ++c)
                                   gv(c, j) = T(gpre[j * C + c]);
                           MatT<T> gf = svd_backward((*results)[img], gv);
                           T* dst = xn->grad.data() + img * hw * C;
                           for (std::size_t i = 0; i < hw * C; ++i)
                               dst[i] += gf.a[i];
                       });
                   });

    return FeatureVectorSetT<T>{out, std::move(origin)};
}

// Flips each student row whose dot product with the matching teacher row is
// negative; zero dot products leave the row unchanged. Differentiable in the
// student argument (the flip signs are constants of the step).
template <class T>
FeatureVectorSetT<T> sign_align_pair(const FeatureVectorSetT<T>& student,
                                     const FeatureVectorSetT<T>& teacher) {
    detail::require_same_shape(student.vectors, teacher.vectors, "sign_align_pair");
    const std::size_t n = student.vectors.dim(0), d = student.vectors.dim(1);
    auto signs = std::make_shared<std::vector<T>>(n, T(1));
    TensorT<T> out = TensorT<T>::zeros({n, d});
    for (std::size_t i = 0; i < n; ++i) {
        double dot = 0.0;
        for (std::size_t j = 0; j < d; ++j)
            dot += double(student.vectors.data()[i * d + j]) *
                   double(teacher.vectors.data()[i * d + j]);
        (*signs)[i] = dot < 0.0 ? T(-1) : T(1);
        for (std::size_t j = 0; j < d; ++j)
            out.data()[i * d + j] = student.vectors.data()[i * d + j] * (*signs)[i];
    }
    detail::attach(out, "sign_align_pair", {student.vectors},
                   [sn = student.vectors.node(), signs, n, d](TensorNode<T>& self) {
                       sn->ensure_grad();
                       for (std::size_t i = 0; i < n; ++i)
                           for (std::size_t j = 0; j < d; ++j)
                               sn->grad[i * d + j] +=
                                   self.grad[i * d + j] * (*signs)[i];
                   });
    return FeatureVectorSetT<T>{out, student.origin};
}

}  // namespace mhgd
