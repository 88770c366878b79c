// Copyright (c) 2026 the mhgd authors
// SPDX-License-Identifier: Apache-2.0

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "mhgd/svd.hpp"
#include "mhgd/tensor.hpp"

using namespace mhgd;

namespace {

// Independent SVD oracle: one-sided Jacobi working directly on the input
// columns, no Gram matrix. Returns full U (n x r), sigma (r), V (d x r) with
// r = min(n, d), descending, under the same sign convention.
struct OracleSvd {
    MatD u, v;
    std::vector<double> sigma;
};

OracleSvd oracle_svd(const MatD& f) {
    const std::size_t n = f.rows, d = f.cols;
    MatD a = f;          // columns will be orthogonalized in place: a = u*sigma
    MatD v(d, d);
    for (std::size_t i = 0; i < d; ++i) v(i, i) = 1.0;

    for (int sweep = 0; sweep < 100; ++sweep) {
        double off = 0.0;
        for (std::size_t p = 0; p < d; ++p) {
            for (std::size_t q = p + 1; q < d; ++q) {
                double app = 0.0, aqq = 0.0, apq = 0.0;
                for (std::size_t i = 0; i < n; ++i) {
                    app += a(i, p) * a(i, p);
                    aqq += a(i, q) * a(i, q);
                    apq += a(i, p) * a(i, q);
                }
                off = std::max(off, std::fabs(apq));
                if (std::fabs(apq) < 1e-13 * std::sqrt(app * aqq + 1e-300)) continue;
                const double tau = (aqq - app) / (2.0 * apq);
                const double t = (tau >= 0 ? 1.0 : -1.0) /
                                 (std::fabs(tau) + std::sqrt(1.0 + tau * tau));
                const double c = 1.0 / std::sqrt(1.0 + t * t);
                const double s = c * t;
                for (std::size_t i = 0; i < n; ++i) {
                    const double aip = a(i, p), aiq = a(i, q);
                    a(i, p) = c * aip - s * aiq;
                    a(i, q) = s * aip + c * aiq;
                }
                for (std::size_t i = 0; i < d; ++i) {
                    const double vip = v(i, p), viq = v(i, q);
                    v(i, p) = c * vip - s * viq;
                    v(i, q) = s * vip + c * viq;
                }
            }
        }
        if (off < 1e-13) break;
    }

    const std::size_t r = std::min(n, d);
    std::vector<double> norms(d, 0.0);
    for (std::size_t j = 0; j < d; ++j) {
        double acc = 0.0;
        for (std::size_t i = 0; i < n; ++i) acc += a(i, j) * a(i, j);
        norms[j] = std::sqrt(acc);
    }
    std::vector<std::size_t> order(d);
    for (std::size_t i = 0; i < d; ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t x, std::size_t y) { return norms[x] > norms[y]; });

    OracleSvd res;
    res.sigma.resize(r);
    res.u = MatD(n, r);
    res.v = MatD(d, r);
    for (std::size_t j = 0; j < r; ++j) {
        const std::size_t src = order[j];
        res.sigma[j] = norms[src];
        for (std::size_t i = 0; i < d; ++i) res.v(i, j) = v(i, src);
        for (std::size_t i = 0; i < n; ++i)
            res.u(i, j) = norms[src] > 1e-300 ? a(i, src) / norms[src] : 0.0;
        // Shared sign convention: largest-magnitude V entry positive.
        std::size_t arg = 0;
        double best = -1.0;
        for (std::size_t i = 0; i < d; ++i) {
            if (std::fabs(res.v(i, j)) > best) {
                best = std::fabs(res.v(i, j));
                arg = i;
            }
        }
        if (res.v(arg, j) < 0.0) {
            for (std::size_t i = 0; i < d; ++i) res.v(i, j) = -res.v(i, j);
            for (std::size_t i = 0; i < n; ++i) res.u(i, j) = -res.u(i, j);
        }
    }
    return res;
}

MatT<float> random_mat(std::size_t r, std::size_t c, Rng& rng) {
    MatT<float> m(r, c);
    for (auto& x : m.a) x = float(rng.gaussian());
    return m;
}

}  // namespace

TEST_CASE("truncated_svd diagonal and rank-1 hand cases") {
    MatT<float> diag(2, 2);
    diag(0, 0) = 3.0f;
    diag(1, 1) = 2.0f;
    auto res = truncated_svd(diag, 2);
    CHECK(res.sigma[0] == doctest::Approx(3.0));
    CHECK(res.sigma[1] == doctest::Approx(2.0));
    CHECK(res.v(0, 0) == doctest::Approx(1.0));
    CHECK(res.v(1, 0) == doctest::Approx(0.0).epsilon(1e-6));
    CHECK(res.v(1, 1) == doctest::Approx(1.0));

    MatT<float> row(1, 2);
    row(0, 0) = 3.0f;
    row(0, 1) = 4.0f;
    auto r1 = truncated_svd(row, 1);
    CHECK(r1.sigma[0] == doctest::Approx(5.0));
    CHECK(r1.v(0, 0) == doctest::Approx(0.6));
    CHECK(r1.v(1, 0) == doctest::Approx(0.8));

    MatT<float> rank1(2, 2);
    rank1(0, 0) = 1.0f;
    rank1(0, 1) = 2.0f;
    rank1(1, 0) = 2.0f;
    rank1(1, 1) = 4.0f;
    auto r2 = truncated_svd(rank1, 1);
    CHECK(r2.sigma[0] == doctest::Approx(5.0));
    CHECK(r2.v(0, 0) == doctest::Approx(1.0 / std::sqrt(5.0)));
    CHECK(r2.v(1, 0) == doctest::Approx(2.0 / std::sqrt(5.0)));
    CHECK_THROWS_AS(truncated_svd(rank1, 2), DegenerateRankError);

    CHECK_THROWS_AS(truncated_svd(rank1, 3), ShapeError);
}

TEST_CASE("truncated factors match the one-sided Jacobi oracle") {
    Rng rng(101);
    for (int iter = 0; iter < 100; ++iter) {
        auto f = random_mat(6, 4, rng);
        const std::size_t k = 1 + iter % 3;
        auto got = truncated_svd(f, k);
        MatD fd(6, 4);
        for (std::size_t i = 0; i < f.a.size(); ++i) fd.a[i] = double(f.a[i]);
        auto want = oracle_svd(fd);
        for (std::size_t j = 0; j < k; ++j) {
            CHECK(double(got.sigma[j]) ==
                  doctest::Approx(want.sigma[j]).epsilon(1e-5));
            for (std::size_t i = 0; i < 4; ++i) {
                CHECK(std::fabs(double(got.v(i, j)) - want.v(i, j)) <= 1e-5);
            }
        }
    }
}

TEST_CASE("reconstruction identity against the dense oracle") {
    Rng rng(202);
    for (int iter = 0; iter < 50; ++iter) {
        MatD f(6, 4);
        for (auto& x : f.a) x = rng.gaussian();
        auto full = oracle_svd(f);
        for (std::size_t k = 1; k <= 3; ++k) {
            // ||f - U_k S_k V_k^T||_F^2 == sum of the discarded sigma^2.
            double resid = 0.0;
            for (std::size_t i = 0; i < 6; ++i)
                for (std::size_t j = 0; j < 4; ++j) {
                    double rec = 0.0;
                    for (std::size_t p = 0; p < k; ++p)
                        rec += full.u(i, p) * full.sigma[p] * full.v(j, p);
                    const double d = f(i, j) - rec;
                    resid += d * d;
                }
            double tail = 0.0;
            for (std::size_t p = k; p < 4; ++p) tail += full.sigma[p] * full.sigma[p];
            const double scale = std::max(tail, 1e-9);
            CHECK(std::fabs(resid - tail) / scale <= 1e-4);
        }
    }
}

TEST_CASE("determinism and global-sign absorption") {
    Rng rng(303);
    auto f = random_mat(5, 3, rng);
    auto a = truncated_svd(f, 2);
    auto b = truncated_svd(f, 2);
    for (std::size_t i = 0; i < a.v.a.size(); ++i) CHECK(a.v.a[i] == b.v.a[i]);
    for (std::size_t i = 0; i < a.sigma.size(); ++i) CHECK(a.sigma[i] == b.sigma[i]);

    MatT<float> neg = f;
    for (auto& x : neg.a) x = -x;
    auto c = truncated_svd(neg, 2);
    for (std::size_t i = 0; i < a.v.a.size(); ++i) CHECK(a.v.a[i] == c.v.a[i]);
}

TEST_CASE("orthonormality of returned factors") {
    Rng rng(404);
    for (int iter = 0; iter < 30; ++iter) {
        auto f = random_mat(6, 5, rng);
        auto res = truncated_svd(f, 3);
        for (std::size_t a = 0; a < 3; ++a)
            for (std::size_t b = 0; b < 3; ++b) {
                double dot = 0.0;
                for (std::size_t i = 0; i < 5; ++i)
                    dot += double(res.v(i, a)) * double(res.v(i, b));
                CHECK(std::fabs(dot - (a == b ? 1.0 : 0.0)) <= 1e-5);
            }
        CHECK(res.sigma[0] >= res.sigma[1]);
        CHECK(res.sigma[1] >= res.sigma[2]);
        CHECK(res.sigma[2] >= 0.0f);
    }
}

TEST_CASE("svd_backward zero upstream and clip contract") {
    Rng rng(505);
    auto f = random_mat(5, 3, rng);
    auto res = truncated_svd(f, 2);
    MatT<float> zero(3, 2);
    auto g = svd_backward(res, zero);
    for (float x : g.a) CHECK(x == 0.0f);

    // Near-degenerate spectrum: finite gradient bounded by the clip.
    MatT<float> nearly(4, 2);
    nearly(0, 0) = 1.0f;
    nearly(1, 1) = 1.0f + 1e-6f;
    nearly(2, 0) = 0.3f;
    nearly(3, 1) = 0.3001f;
    auto res2 = truncated_svd(nearly, 2);
    MatT<float> up(2, 2);
    for (auto& x : up.a) x = 1.0f;
    auto g2 = svd_backward(res2, up);
    for (float x : g2.a) {
        CHECK(std::isfinite(x));
        CHECK(std::fabs(x) <= 1e3f);
    }
}

TEST_CASE("compress_feature_map spatially-flat input is plain normalization") {
    // H = W = 1: the per-image matrix is a single row.
    Tensor x = Tensor::from({2, 1, 1, 3}, {3, 0, 4, 0, 5, 0});
    auto fvs = compress_feature_map(x, 1, "tap");
    CHECK(fvs.origin == "tap");
    CHECK(fvs.vectors.shape() == Shape{2, 3});
    CHECK(fvs.vectors.data()[0] == doctest::Approx(0.6));
    CHECK(fvs.vectors.data()[2] == doctest::Approx(0.8));
    CHECK(fvs.vectors.data()[4] == doctest::Approx(1.0));
}

TEST_CASE("compress_feature_map rows are unit norm and match per-image SVD") {
    Rng rng(606);
    std::vector<float> vals(4 * 3 * 3 * 5);
    for (auto& v : vals) v = float(rng.gaussian());
    Tensor x = Tensor::from({4, 3, 3, 5}, vals);
    const std::size_t k = 2;
    auto fvs = compress_feature_map(x, k);
    REQUIRE(fvs.vectors.shape() == Shape{4, k * 5});
    for (std::size_t img = 0; img < 4; ++img) {
        double norm2 = 0.0;
        for (std::size_t j = 0; j < k * 5; ++j) {
            const double v = fvs.vectors.data()[img * k * 5 + j];
            norm2 += v * v;
        }
        CHECK(std::sqrt(norm2) == doctest::Approx(1.0).epsilon(1e-6));

        // Independent full-decomposition oracle with the same convention.
        MatD f(9, 5);
        for (std::size_t p = 0; p < 9; ++p)
            for (std::size_t c = 0; c < 5; ++c)
                f(p, c) = double(vals[(img * 9 + p) * 5 + c]);
        auto want = oracle_svd(f);
        const double inv = 1.0 / std::sqrt(double(k));
        for (std::size_t j = 0; j < k; ++j)
            for (std::size_t c = 0; c < 5; ++c) {
                CHECK(std::fabs(double(fvs.vectors.data()[img * k * 5 + j * 5 + c]) -
                                want.v(c, j) * inv) <= 1e-5);
            }
    }

    // k = 1 rows are unit norm even before the final normalization.
    auto single = compress_feature_map(x, 1);
    for (std::size_t img = 0; img < 4; ++img) {
        double norm2 = 0.0;
        for (std::size_t j = 0; j < 5; ++j) {
            const double v = single.vectors.data()[img * 5 + j];
            norm2 += v * v;
        }
        CHECK(std::sqrt(norm2) == doctest::Approx(1.0).epsilon(1e-6));
    }
}

TEST_CASE("compress_feature_map attaches the batch index to rank failures") {
    std::vector<float> vals(2 * 2 * 2 * 2, 0.0f);
    // First image well-conditioned, second exactly rank one.
    vals[0] = 1.0f;
    vals[3] = 1.0f;
    vals[5] = 2.0f;
    for (std::size_t i = 8; i < 16; ++i) vals[i] = 1.0f;
    Tensor x = Tensor::from({2, 2, 2, 2}, vals);
    CHECK_THROWS_WITH_AS(compress_feature_map(x, 2),
                         doctest::Contains("batch index 1"), DegenerateRankError);
}

TEST_CASE("sign_align_pair examples and property") {
    Tensor sv = Tensor::from({2, 2}, {1, 0, 0, 1});
    FeatureVectorSet s{sv, "s"};
    FeatureVectorSet t{sv.detach(), "t"};
    auto same = sign_align_pair(s, t);
    for (std::size_t i = 0; i < 4; ++i)
        CHECK(same.vectors.data()[i] == sv.data()[i]);

    FeatureVectorSet flipped{scale(sv, -1.0f), "s"};
    auto fixed = sign_align_pair(flipped, t);
    for (std::size_t i = 0; i < 4; ++i)
        CHECK(fixed.vectors.data()[i] == sv.data()[i]);

    Rng rng(707);
    for (int iter = 0; iter < 50; ++iter) {
        std::vector<float> a(6 * 4), b(6 * 4);
        for (auto& v : a) v = float(rng.gaussian());
        for (auto& v : b) v = float(rng.gaussian());
        FeatureVectorSet student{Tensor::from({6, 4}, a), "s"};
        FeatureVectorSet teacher{Tensor::from({6, 4}, b), "t"};
        auto aligned = sign_align_pair(student, teacher);
        for (std::size_t i = 0; i < 6; ++i) {
            double dot = 0.0;
            for (std::size_t j = 0; j < 4; ++j)
                dot += double(aligned.vectors.data()[i * 4 + j]) * double(b[i * 4 + j]);
            CHECK(dot >= 0.0);
        }
    }

    FeatureVectorSet small{Tensor::zeros({2, 3}), "s"};
    CHECK_THROWS_AS(sign_align_pair(small, t), ShapeError);
}
