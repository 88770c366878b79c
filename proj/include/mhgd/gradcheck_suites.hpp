// Copyright (c) 2026 the mhgd authors
// SPDX-License-Identifier: Apache-2.0
//
// Named finite-difference suites covering every differentiable operation,
// plus the composite compression -> attention -> transfer pipeline. All
// suites run at double precision with h = 1e-5. Loss closures must be
// deterministic, so scalarization weights are reconstructed from a fixed
// seed inside every closure invocation.

#pragma once

#include <cmath>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "mhgd/attention.hpp"
#include "mhgd/gradcheck.hpp"
#include "mhgd/ops.hpp"
#include "mhgd/optim.hpp"
#include "mhgd/svd.hpp"

namespace mhgd {

struct ScopeResult {
    std::string scope;
    double max_rel_err = 0.0;
    double threshold = 1e-4;
    int instances = 0;
    bool pass() const { return max_rel_err < threshold; }
};

namespace gradsuite {

using D = TensorT<double>;

inline std::vector<double> gaussian_vec(Rng& rng, std::size_t n, double scale = 1.0) {
    std::vector<double> v(n);
    for (auto& x : v) x = rng.gaussian() * scale;
    return v;
}

// Keeps coordinates away from a kink at zero so h = 1e-5 probes stay on one
// side of it.
inline std::vector<double> margin_vec(Rng& rng, std::size_t n, double margin = 1e-2) {
    std::vector<double> v(n);
    for (auto& x : v) {
        x = rng.gaussian();
        if (std::fabs(x) < margin) x = x < 0 ? x - margin : x + margin;
    }
    return v;
}

// Scalarizes a non-scalar op output with weights derived from the seed.
inline D weighted(const D& out, std::uint64_t weight_seed) {
    Rng wr(weight_seed);
    std::vector<double> w(out.size());
    for (auto& x : w) x = wr.gaussian();
    return sum(mul(out, D::from(out.shape(), std::move(w))));
}

// ----------------------------------------------------------------------------
// Well-posedness checks for SVD-touching suites. Finite differences on the
// sign-fixed factors are valid only when the spectrum is separated and the
// sign-defining entries have slack.

inline bool svd_fd_safe(const MatT<double>& f, std::size_t k) {
    SvdResultT<double> res;
    try {
        res = truncated_svd(f, k);
    } catch (const Error&) {
        return false;
    }
    const double top = res.lambda[0];
    if (top <= 1.0) return false;
    // Gap regularization biases the analytic gradient by eps/(gap^2 + eps);
    // requiring absolute gaps >= 0.7 keeps that bias well under the 1e-3
    // verification threshold.
    for (std::size_t j = 0; j < k && j + 1 < res.lambda.size(); ++j) {
        const double gap = res.lambda[j] - res.lambda[j + 1];
        if (gap < std::max(0.3 * top, 2.0)) return false;
    }
    for (std::size_t j = 0; j < k; ++j) {
        double best = -1.0, second = -1.0;
        for (std::size_t i = 0; i < res.v_top.rows; ++i) {
            const double v = std::fabs(res.v_top(i, j));
            if (v > best) {
                second = best;
                best = v;
            } else if (v > second) {
                second = v;
            }
        }
        if (best - second < 1e-2) return false;
    }
    return true;
}

inline bool map_fd_safe(const std::vector<double>& coords, std::size_t N,
                        std::size_t hw, std::size_t C, std::size_t k) {
    for (std::size_t img = 0; img < N; ++img) {
        MatT<double> f(hw, C);
        std::copy(coords.begin() + img * hw * C, coords.begin() + (img + 1) * hw * C,
                  f.a.begin());
        if (!svd_fd_safe(f, k)) return false;
    }
    return true;
}

// ----------------------------------------------------------------------------
// Module-level suites

inline double svd_backward_fd_err(std::uint64_t seed) {
    double worst = 0.0;
    struct Case {
        std::size_t n, d, k;
    };
    const Case cases[] = {{5, 3, 2}, {2, 5, 1}};  // column-gram and row-gram
    for (const auto& cs : cases) {
        Rng rng(seed * 7 + cs.d);
        std::vector<double> coords;
        for (int attempt = 0; attempt < 200; ++attempt) {
            coords = gaussian_vec(rng, cs.n * cs.d, 2.0);
            MatT<double> f(cs.n, cs.d);
            f.a = coords;
            if (svd_fd_safe(f, cs.k)) break;
        }
        MatT<double> weights(cs.d, cs.k);
        {
            Rng wr(seed + 555);
            for (auto& x : weights.a) x = wr.gaussian();
        }
        MatT<double> f0(cs.n, cs.d);
        f0.a = coords;
        auto res = truncated_svd(f0, cs.k);
        auto grad = svd_backward(res, weights);

        auto loss = [&](const std::vector<double>& flat) {
            MatT<double> f(cs.n, cs.d);
            f.a = flat;
            auto r = truncated_svd(f, cs.k);
            double acc = 0.0;
            for (std::size_t i = 0; i < r.v.a.size(); ++i)
                acc += r.v.a[i] * weights.a[i];
            return acc;
        };
        worst = std::max(
            worst, finite_difference_check(loss, coords, grad.a).max_rel_err);
    }
    return worst;
}

inline double compress_fd_err(std::uint64_t seed) {
    double worst = 0.0;
    struct Case {
        std::size_t N, H, W, C, k;
    };
    const Case cases[] = {{2, 3, 3, 4, 1}, {2, 1, 2, 5, 1}};
    for (const auto& cs : cases) {
        Rng rng(seed * 13 + cs.C);
        std::vector<double> coords;
        for (int attempt = 0; attempt < 200; ++attempt) {
            coords = gaussian_vec(rng, cs.N * cs.H * cs.W * cs.C, 2.0);
            if (map_fd_safe(coords, cs.N, cs.H * cs.W, cs.C, cs.k)) break;
        }
        worst = std::max(
            worst,
            gradcheck(
                [&](const std::vector<D>& in) {
                    auto fvs = compress_feature_map(in[0], cs.k);
                    return weighted(fvs.vectors, seed + 777);
                },
                {{cs.N, cs.H, cs.W, cs.C}}, coords)
                .max_rel_err);
    }
    return worst;
}

inline double attention_fd_err(std::uint64_t seed) {
    const std::size_t N = 4, dB = 3, dF = 5, dA = 4;
    Rng rng(seed * 3 + 1);
    std::vector<Shape> shapes = {{N, dB}, {N, dF}, {dB, dA}, {dA}, {dA}, {dA},
                                 {dF, dA}, {dA},  {dA},     {dA}};
    std::size_t total = 0;
    for (const auto& s : shapes) total += numel(s);
    auto coords = gaussian_vec(rng, total);
    // Shift the BN scale coordinates away from zero.
    std::size_t off = numel(shapes[0]) + numel(shapes[1]) + numel(shapes[2]) +
                      numel(shapes[3]);
    for (std::size_t i = 0; i < dA; ++i) coords[off + i] += 2.0;
    std::size_t off2 = off + 2 * dA + numel(shapes[6]) + dA;
    for (std::size_t i = 0; i < dA; ++i) coords[off2 + i] += 2.0;

    return gradcheck(
               [&](const std::vector<D>& in) {
                   AttentionHeadT<double> head;
                   head.theta.w = in[2];
                   head.theta.b = in[3];
                   head.theta.gamma = in[4];
                   head.theta.beta = in[5];
                   head.phi.w = in[6];
                   head.phi.b = in[7];
                   head.phi.gamma = in[8];
                   head.phi.beta = in[9];
                   FeatureVectorSetT<double> vb{in[0], "b"};
                   FeatureVectorSetT<double> vf{in[1], "f"};
                   return weighted(attention_similarity(head, vb, vf), seed + 202);
               },
               shapes, coords)
        .max_rel_err;
}

inline double estimator_fd_err(std::uint64_t seed) {
    const std::size_t N = 4, dF = 3, d1 = 2, A = 2, dB = 3;
    std::vector<Shape> shapes = {{N, N},    {N, N}, {N, dF}, {dF, d1}, {d1},
                                 {d1},      {d1},   {A * d1, dB}, {dB}};
    std::size_t total = 0;
    for (const auto& s : shapes) total += numel(s);

    auto build = [&](const std::vector<D>& in) {
        EstimatorT<double> est;
        est.f1.w = in[3];
        est.f1.b = in[4];
        est.f1.gamma = in[5];
        est.f1.beta = in[6];
        est.w2 = in[7];
        est.b2 = in[8];
        AttentionGraphT<double> g;
        g.heads = {in[0], in[1]};
        FeatureVectorSetT<double> vf{in[2], "f"};
        auto out = estimator_forward(est, g, vf);
        return weighted(out.vectors, seed + 404);
    };

    Rng rng(seed * 5 + 2);
    std::vector<double> coords;
    for (int attempt = 0; attempt < 200; ++attempt) {
        coords = gaussian_vec(rng, total);
        std::size_t off = 2 * N * N + N * dF + dF * d1 + d1;
        for (std::size_t i = 0; i < d1; ++i) coords[off + i] += 2.0;  // gamma
        // The f1 activations must clear the relu kink for FD validity.
        std::vector<D> probe;
        std::size_t o = 0;
        for (const auto& s : shapes) {
            const std::size_t n = numel(s);
            probe.push_back(D::from(
                s, std::vector<double>(coords.begin() + o, coords.begin() + o + n)));
            o += n;
        }
        NoGradGuard ng;
        D pre = batch_norm(linear(probe[2], probe[3], probe[4]), probe[5], probe[6],
                           true);
        bool safe = true;
        for (std::size_t i = 0; i < pre.size(); ++i)
            if (std::fabs(pre.data()[i]) < 1e-3) safe = false;
        if (safe) break;
    }
    return gradcheck(build, shapes, coords).max_rel_err;
}

inline double mhan_loss_fd_err(std::uint64_t seed) {
    const std::size_t N = 3, dF = 3, dB = 2, dA = 3, d1 = 2, A = 1;
    MhgdConfig cfg;
    cfg.heads = A;
    cfg.att_dim = dA;
    cfg.est_dim = d1;
    Rng prng(seed * 17 + 3);
    auto stack = MhgdStackT<double>::build(cfg, {{dF, dB}}, prng);

    std::vector<Shape> shapes = {{N, dF}, {N, dB}};
    Rng rng(seed * 11 + 4);
    std::vector<double> coords;
    for (int attempt = 0; attempt < 200; ++attempt) {
        coords = gaussian_vec(rng, N * dF + N * dB);
        // relu margin inside the estimator
        NoGradGuard ng;
        D vf = D::from({N, dF},
                       std::vector<double>(coords.begin(), coords.begin() + N * dF));
        D pre = batch_norm(linear(vf, stack.pairs[0].estimator.f1.w,
                                  stack.pairs[0].estimator.f1.b),
                           stack.pairs[0].estimator.f1.gamma,
                           stack.pairs[0].estimator.f1.beta, true);
        bool safe = true;
        for (std::size_t i = 0; i < pre.size(); ++i)
            if (std::fabs(pre.data()[i]) < 1e-3) safe = false;
        if (safe) break;
    }
    return gradcheck(
               [&](const std::vector<D>& in) {
                   std::vector<std::pair<FeatureVectorSetT<double>,
                                         FeatureVectorSetT<double>>>
                       taps;
                   taps.push_back({FeatureVectorSetT<double>{in[0], "f"},
                                   FeatureVectorSetT<double>{in[1], "b"}});
                   return mhan_loss(stack, taps).loss;
               },
               shapes, coords)
        .max_rel_err;
}

inline double transfer_loss_fd_err(std::uint64_t seed) {
    const std::size_t N = 3, A = 2;
    Rng rng(seed * 19 + 5);
    auto coords = gaussian_vec(rng, A * N * N, 1.5);
    auto tcoords = gaussian_vec(rng, A * N * N, 1.5);

    return gradcheck(
               [&](const std::vector<D>& in) {
                   auto gs = attention_graph<double>({in[0], in[1]},
                                                     GraphMode::Smoothed);
                   D t0 = D::from({N, N}, std::vector<double>(
                                              tcoords.begin(), tcoords.begin() + N * N));
                   D t1 = D::from({N, N}, std::vector<double>(
                                              tcoords.begin() + N * N, tcoords.end()));
                   auto gt = attention_graph<double>({t0, t1}, GraphMode::Smoothed);
                   return transfer_loss<double>({gt}, {gs});
               },
               {{N, N}, {N, N}}, coords)
        .max_rel_err;
}

// Composite check: d(transfer_loss)/d(student feature maps) through
// compression, sign alignment, attention and smoothing, with frozen heads and
// a fixed teacher. Covers both Gram branches of the SVD.
inline double pipeline_fd_err(std::uint64_t seed) {
    const std::size_t N = 3, C = 4, k = 1, A = 2, dA = 3;
    const Shape front_shape{N, 3, 3, C};  // 9 spatial positions  > 4 channels
    const Shape back_shape{N, 1, 2, C};   // 2 spatial positions  < 4 channels

    Rng prng(seed * 31 + 6);
    std::vector<AttentionHeadT<double>> heads;
    for (std::size_t a = 0; a < A; ++a)
        heads.push_back(AttentionHeadT<double>::dense(k * C, k * C, dA, prng));

    Rng trng(seed * 37 + 7);
    auto tf_coords = gaussian_vec(trng, numel(front_shape), 2.0);
    auto tb_coords = gaussian_vec(trng, numel(back_shape), 2.0);

    auto teacher_sets = [&]() {
        NoGradGuard ng;
        auto tf = compress_feature_map(D::from(front_shape, tf_coords), k, "t.front");
        auto tb = compress_feature_map(D::from(back_shape, tb_coords), k, "t.back");
        return std::make_pair(tf, tb);
    };

    auto build = [&](const std::vector<D>& in) {
        auto [tf, tb] = teacher_sets();
        std::vector<TensorT<double>> tsims, ssims;
        auto sf = sign_align_pair(compress_feature_map(in[0], k, "s.front"), tf);
        auto sb = sign_align_pair(compress_feature_map(in[1], k, "s.back"), tb);
        for (const auto& head : heads) {
            NoGradGuard ng;
            tsims.push_back(attention_similarity(head, tb, tf));
        }
        for (const auto& head : heads)
            ssims.push_back(attention_similarity(head, sb, sf));
        auto gt = attention_graph(tsims, GraphMode::Smoothed);
        auto gs = attention_graph(ssims, GraphMode::Smoothed);
        return transfer_loss<double>({gt}, {gs});
    };

    Rng rng(seed * 41 + 8);
    std::vector<double> front_coords, back_coords;
    for (int attempt = 0; attempt < 300; ++attempt) {
        front_coords = gaussian_vec(rng, numel(front_shape), 2.0);
        back_coords = gaussian_vec(rng, numel(back_shape), 2.0);
        if (!map_fd_safe(front_coords, N, 9, C, k) ||
            !map_fd_safe(back_coords, N, 2, C, k))
            continue;
        // Sign alignment must not sit near a flip boundary.
        NoGradGuard ng;
        auto [tf, tb] = teacher_sets();
        auto sf = compress_feature_map(D::from(front_shape, front_coords), k);
        auto sb = compress_feature_map(D::from(back_shape, back_coords), k);
        bool safe = true;
        for (std::size_t i = 0; i < N; ++i) {
            double dot_f = 0.0, dot_b = 0.0;
            for (std::size_t j = 0; j < k * C; ++j) {
                dot_f += sf.vectors.data()[i * k * C + j] *
                         tf.vectors.data()[i * k * C + j];
                dot_b += sb.vectors.data()[i * k * C + j] *
                         tb.vectors.data()[i * k * C + j];
            }
            if (std::fabs(dot_f) < 0.05 || std::fabs(dot_b) < 0.05) safe = false;
        }
        if (safe) break;
    }

    std::vector<double> coords = front_coords;
    coords.insert(coords.end(), back_coords.begin(), back_coords.end());
    return gradcheck(build, {front_shape, back_shape}, coords).max_rel_err;
}

// ----------------------------------------------------------------------------
// Scope registry

struct Scope {
    double threshold;
    std::function<double(std::uint64_t seed)> run;  // returns max rel err
};

inline const std::map<std::string, Scope>& scopes() {
    static const std::map<std::string, Scope> table = [] {
        std::map<std::string, Scope> t;

        t["matmul"] = {1e-4, [](std::uint64_t seed) {
            Rng rng(seed);
            auto coords = gaussian_vec(rng, 4 * 3 + 3 * 5);
            return gradcheck(
                       [&](const std::vector<D>& in) {
                           return weighted(matmul(in[0], in[1]), seed + 99);
                       },
                       {{4, 3}, {3, 5}}, coords)
                .max_rel_err;
        }};

        t["transpose"] = {1e-4, [](std::uint64_t seed) {
            Rng rng(seed);
            auto coords = gaussian_vec(rng, 3 * 4);
            return gradcheck(
                       [&](const std::vector<D>& in) {
                           return weighted(transpose(in[0]), seed + 99);
                       },
                       {{3, 4}}, coords)
                .max_rel_err;
        }};

        t["linear"] = {1e-4, [](std::uint64_t seed) {
            Rng rng(seed);
            auto coords = gaussian_vec(rng, 4 * 3 + 3 * 5 + 5);
            return gradcheck(
                       [&](const std::vector<D>& in) {
                           return weighted(linear(in[0], in[1], in[2]), seed + 99);
                       },
                       {{4, 3}, {3, 5}, {5}}, coords)
                .max_rel_err;
        }};

        t["conv2d"] = {1e-4, [](std::uint64_t seed) {
            Rng rng(seed);
            auto coords = gaussian_vec(rng, 2 * 5 * 5 * 3 + 3 * 3 * 3 * 4);
            double worst = gradcheck(
                               [&](const std::vector<D>& in) {
                                   return weighted(conv2d(in[0], in[1], 2, 1),
                                                   seed + 99);
                               },
                               {{2, 5, 5, 3}, {3, 3, 3, 4}}, coords)
                               .max_rel_err;
            Rng rng2(seed + 1);
            auto c2 = gaussian_vec(rng2, 1 * 4 * 4 * 2 + 2 * 2 * 2 * 3);
            return std::max(
                worst, gradcheck(
                           [&](const std::vector<D>& in) {
                               return weighted(conv2d(in[0], in[1], 1, 0), seed + 98);
                           },
                           {{1, 4, 4, 2}, {2, 2, 2, 3}}, c2)
                           .max_rel_err);
        }};

        t["maxpool2d"] = {1e-4, [](std::uint64_t seed) {
            Rng rng(seed);
            // Ties or near-ties inside a window would invalidate FD.
            std::vector<double> coords(1 * 6 * 6 * 2);
            for (std::size_t i = 0; i < coords.size(); ++i)
                coords[i] = double(i % 37) * 0.11 + rng.uniform01() * 0.03;
            return gradcheck(
                       [&](const std::vector<D>& in) {
                           return weighted(maxpool2d(in[0], 2, 2), seed + 99);
                       },
                       {{1, 6, 6, 2}}, coords)
                .max_rel_err;
        }};

        t["batch_norm"] = {1e-4, [](std::uint64_t seed) {
            Rng rng(seed);
            auto coords = gaussian_vec(rng, 5 * 3 + 3 + 3);
            for (std::size_t i = 15; i < 18; ++i) coords[i] += 2.0;
            double worst = gradcheck(
                               [&](const std::vector<D>& in) {
                                   return weighted(
                                       batch_norm(in[0], in[1], in[2], true),
                                       seed + 99);
                               },
                               {{5, 3}, {3}, {3}}, coords)
                               .max_rel_err;
            Rng rng2(seed + 1);
            auto c2 = gaussian_vec(rng2, 3 * 2 * 2 * 2 + 2 + 2);
            c2[24] += 2.0;
            c2[25] += 2.0;
            return std::max(
                worst, gradcheck(
                           [&](const std::vector<D>& in) {
                               return weighted(
                                   batch_norm(in[0], in[1], in[2], true), seed + 98);
                           },
                           {{3, 2, 2, 2}, {2}, {2}}, c2)
                           .max_rel_err);
        }};

        t["relu"] = {1e-4, [](std::uint64_t seed) {
            Rng rng(seed);
            auto coords = margin_vec(rng, 24);
            return gradcheck(
                       [&](const std::vector<D>& in) {
                           return weighted(relu(in[0]), seed + 99);
                       },
                       {{4, 6}}, coords)
                .max_rel_err;
        }};

        t["tanh"] = {1e-4, [](std::uint64_t seed) {
            Rng rng(seed);
            auto coords = gaussian_vec(rng, 24);
            return gradcheck(
                       [&](const std::vector<D>& in) {
                           return weighted(tanh(in[0]), seed + 99);
                       },
                       {{4, 6}}, coords)
                .max_rel_err;
        }};

        t["exp"] = {1e-4, [](std::uint64_t seed) {
            Rng rng(seed);
            auto coords = gaussian_vec(rng, 24);
            return gradcheck(
                       [&](const std::vector<D>& in) {
                           return weighted(exp(in[0]), seed + 99);
                       },
                       {{4, 6}}, coords)
                .max_rel_err;
        }};

        t["log"] = {1e-4, [](std::uint64_t seed) {
            Rng rng(seed);
            std::vector<double> coords(24);
            for (auto& x : coords) x = 0.2 + rng.uniform01() * 3.0;
            return gradcheck(
                       [&](const std::vector<D>& in) {
                           return weighted(log(in[0]), seed + 99);
                       },
                       {{4, 6}}, coords)
                .max_rel_err;
        }};

        t["add"] = {1e-4, [](std::uint64_t seed) {
            Rng rng(seed);
            auto coords = gaussian_vec(rng, 12 + 12 + 1);
            return gradcheck(
                       [&](const std::vector<D>& in) {
                           return weighted(add(add(in[0], in[1]), in[2]), seed + 99);
                       },
                       {{3, 4}, {3, 4}, {1}}, coords)
                .max_rel_err;
        }};

        t["sub"] = {1e-4, [](std::uint64_t seed) {
            Rng rng(seed);
            auto coords = gaussian_vec(rng, 12 + 12 + 1);
            return gradcheck(
                       [&](const std::vector<D>& in) {
                           return weighted(sub(sub(in[0], in[1]), in[2]), seed + 99);
                       },
                       {{3, 4}, {3, 4}, {1}}, coords)
                .max_rel_err;
        }};

        t["mul"] = {1e-4, [](std::uint64_t seed) {
            Rng rng(seed);
            auto coords = gaussian_vec(rng, 12 + 12 + 1);
            return gradcheck(
                       [&](const std::vector<D>& in) {
                           return weighted(mul(mul(in[0], in[1]), in[2]), seed + 99);
                       },
                       {{3, 4}, {3, 4}, {1}}, coords)
                .max_rel_err;
        }};

        t["scale"] = {1e-4, [](std::uint64_t seed) {
            Rng rng(seed);
            auto coords = gaussian_vec(rng, 12);
            return gradcheck(
                       [&](const std::vector<D>& in) {
                           return weighted(add_scalar(scale(in[0], 2.5), -0.75),
                                           seed + 99);
                       },
                       {{3, 4}}, coords)
                .max_rel_err;
        }};

        t["sum"] = {1e-4, [](std::uint64_t seed) {
            Rng rng(seed);
            auto coords = gaussian_vec(rng, 12);
            return gradcheck([&](const std::vector<D>& in) { return sum(in[0]); },
                             {{3, 4}}, coords)
                .max_rel_err;
        }};

        t["mean"] = {1e-4, [](std::uint64_t seed) {
            Rng rng(seed);
            auto coords = gaussian_vec(rng, 12);
            return gradcheck([&](const std::vector<D>& in) { return mean(in[0]); },
                             {{3, 4}}, coords)
                .max_rel_err;
        }};

        t["reshape"] = {1e-4, [](std::uint64_t seed) {
            Rng rng(seed);
            auto coords = gaussian_vec(rng, 12);
            return gradcheck(
                       [&](const std::vector<D>& in) {
                           return weighted(reshape(in[0], {2, 6}), seed + 99);
                       },
                       {{3, 4}}, coords)
                .max_rel_err;
        }};

        t["concat_cols"] = {1e-4, [](std::uint64_t seed) {
            Rng rng(seed);
            auto coords = gaussian_vec(rng, 3 * 2 + 3 * 4);
            return gradcheck(
                       [&](const std::vector<D>& in) {
                           return weighted(concat_cols<double>({in[0], in[1]}),
                                           seed + 99);
                       },
                       {{3, 2}, {3, 4}}, coords)
                .max_rel_err;
        }};

        t["global_avg_pool"] = {1e-4, [](std::uint64_t seed) {
            Rng rng(seed);
            auto coords = gaussian_vec(rng, 2 * 3 * 3 * 4);
            return gradcheck(
                       [&](const std::vector<D>& in) {
                           return weighted(global_avg_pool(in[0]), seed + 99);
                       },
                       {{2, 3, 3, 4}}, coords)
                .max_rel_err;
        }};

        t["softmax_rows"] = {1e-4, [](std::uint64_t seed) {
            Rng rng(seed);
            auto coords = gaussian_vec(rng, 4 * 5, 2.0);
            return gradcheck(
                       [&](const std::vector<D>& in) {
                           return weighted(softmax_rows(in[0]), seed + 99);
                       },
                       {{4, 5}}, coords)
                .max_rel_err;
        }};

        t["l2_normalize_rows"] = {1e-4, [](std::uint64_t seed) {
            Rng rng(seed);
            auto coords = gaussian_vec(rng, 4 * 5);
            return gradcheck(
                       [&](const std::vector<D>& in) {
                           return weighted(l2_normalize_rows(in[0]), seed + 99);
                       },
                       {{4, 5}}, coords)
                .max_rel_err;
        }};

        t["cross_entropy"] = {1e-4, [](std::uint64_t seed) {
            Rng rng(seed);
            auto coords = gaussian_vec(rng, 5 * 4, 2.0);
            std::vector<int> labels;
            for (int i = 0; i < 5; ++i) labels.push_back(int(rng.below(4)));
            return gradcheck(
                       [&](const std::vector<D>& in) {
                           return cross_entropy(in[0], labels);
                       },
                       {{5, 4}}, coords)
                .max_rel_err;
        }};

        t["kl_sum"] = {1e-4, [](std::uint64_t seed) {
            Rng rng(seed);
            std::vector<double> coords(2 * 2 * 6);
            for (auto& x : coords) x = 0.05 + rng.uniform01();
            return gradcheck(
                       [&](const std::vector<D>& in) {
                           return kl_sum(in[0], in[1]);
                       },
                       {{2, 6}, {2, 6}}, coords)
                .max_rel_err;
        }};

        t["cosine_complement"] = {1e-4, [](std::uint64_t seed) {
            Rng rng(seed);
            auto coords = gaussian_vec(rng, 2 * 3 * 4);
            return gradcheck(
                       [&](const std::vector<D>& in) {
                           return cosine_complement(in[0], in[1]);
                       },
                       {{3, 4}, {3, 4}}, coords)
                .max_rel_err;
        }};

        t["softmax_kl_composite"] = {1e-4, [](std::uint64_t seed) {
            Rng rng(seed);
            auto coords = gaussian_vec(rng, 2 * 3 * 4, 1.5);
            return gradcheck(
                       [&](const std::vector<D>& in) {
                           return kl_sum(softmax_rows(in[0]), softmax_rows(in[1]));
                       },
                       {{3, 4}, {3, 4}}, coords)
                .max_rel_err;
        }};

        t["sgd_rule"] = {1e-4, [](std::uint64_t seed) {
            // Not a tape op; verify the update rule against its closed form.
            Rng rng(seed);
            double worst = 0.0;
            for (int i = 0; i < 5; ++i) {
                const double w0 = rng.gaussian(), g = rng.gaussian();
                const double v0 = rng.gaussian(), mu = 0.9, lr = 0.05, wd = 5e-4;
                TensorT<double> w = TensorT<double>::from({1}, {w0});
                OptimizerStateT<double> st;
                st.velocity = {v0};
                st.momentum = mu;
                st.learning_rate = lr;
                st.weight_decay = wd;
                sgd_nesterov_step(w, TensorT<double>::from({1}, {g}), st);
                const double gp = g + wd * w0;
                const double v1 = mu * v0 + gp;
                const double w1 = w0 - lr * (gp + mu * v1);
                worst = std::max(worst, std::fabs(w.data()[0] - w1) +
                                            std::fabs(st.velocity[0] - v1));
            }
            return worst;
        }};

        t["svd"] = {1e-3, svd_backward_fd_err};
        t["compress"] = {1e-3, compress_fd_err};
        t["attention"] = {1e-4, attention_fd_err};
        t["estimator"] = {1e-4, estimator_fd_err};
        t["mhan_loss"] = {1e-4, mhan_loss_fd_err};
        t["transfer_loss"] = {1e-4, transfer_loss_fd_err};
        t["pipeline"] = {1e-3, pipeline_fd_err};

        return t;
    }();
    return table;
}

}  // namespace gradsuite

inline std::vector<std::string> gradcheck_scope_names() {
    std::vector<std::string> names;
    for (const auto& [name, scope] : gradsuite::scopes()) {
        (void)scope;
        names.push_back(name);
    }
    return names;
}

inline bool gradcheck_scope_known(const std::string& scope) {
    return gradsuite::scopes().count(scope) > 0;
}

inline ScopeResult run_gradcheck_scope(const std::string& scope, int instances = 20) {
    const auto& table = gradsuite::scopes();
    auto it = table.find(scope);
    if (it == table.end()) {
        throw ConfigError("gradcheck: unknown scope '" + scope + "'");
    }
    ScopeResult result;
    result.scope = scope;
    result.threshold = it->second.threshold;
    result.instances = instances;
    for (int i = 0; i < instances; ++i) {
        result.max_rel_err =
            std::max(result.max_rel_err, it->second.run(1000 + std::uint64_t(i)));
    }
    return result;
}

}  // namespace mhgd
