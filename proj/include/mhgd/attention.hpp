// Copyright (c) 2026 the mhgd authors
// SPDX-License-Identifier: Apache-2.0
//
// Multi-head attention over batch-relation graphs. Each head embeds the
// backend set (query) and frontend set (key) through FC+BN, takes all
// pairwise dot products, and row-normalizes with softmax -- optionally with
// tanh smoothing that bounds the logits to [-1, 1]. The estimator predicts
// the backend set from attention-weighted frontend features; its cosine
// complement is the phase-1 objective, and the KLD between teacher and
// student graphs is the phase-2 transfer objective.
//
// Batch normalization inside heads and estimator always uses batch
// statistics: the graph is a mini-batch relation, so cross-batch running
// state has no place in it.

#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "mhgd/common.hpp"
#include "mhgd/ops.hpp"
#include "mhgd/svd.hpp"
#include "mhgd/tensor.hpp"

namespace mhgd {

enum class GraphMode { Plain, Smoothed };

// FC layer with optional batch-stats BN; the embedding function used by
// attention heads and the estimator front half.
template <class T>
struct EmbeddingT {
    TensorT<T> w, b;
    TensorT<T> gamma, beta;
    bool use_bn = true;

    static EmbeddingT dense(std::size_t in, std::size_t out, Rng& rng) {
        EmbeddingT e;
        std::vector<T> wv(in * out);
        const double std_dev = std::sqrt(2.0 / double(in));
        for (auto& x : wv) x = T(rng.gaussian() * std_dev);
        e.w = TensorT<T>::from({in, out}, std::move(wv));
        e.b = TensorT<T>::zeros({out});
        e.gamma = TensorT<T>::full({out}, T(1));
        e.beta = TensorT<T>::zeros({out});
        return e;
    }

    // Test/bypass construction: identity weights, no normalization.
    static EmbeddingT identity(std::size_t dim) {
        EmbeddingT e;
        std::vector<T> wv(dim * dim, T(0));
        for (std::size_t i = 0; i < dim; ++i) wv[i * dim + i] = T(1);
        e.w = TensorT<T>::from({dim, dim}, std::move(wv));
        e.b = TensorT<T>::zeros({dim});
        e.gamma = TensorT<T>::full({dim}, T(1));
        e.beta = TensorT<T>::zeros({dim});
        e.use_bn = false;
        return e;
    }

    TensorT<T> forward(const TensorT<T>& x) const {
        TensorT<T> h = linear(x, w, b);
        if (use_bn) h = batch_norm(h, gamma, beta, /*batch_stats=*/true);
        return h;
    }

    std::size_t in_dim() const { return w.dim(0); }
    std::size_t out_dim() const { return w.dim(1); }

    void collect_params(const std::string& prefix,
                        std::vector<std::pair<std::string, TensorT<T>>>& out) const {
        out.emplace_back(prefix + "/w", w);
        out.emplace_back(prefix + "/b", b);
        if (use_bn) {
            out.emplace_back(prefix + "/gamma", gamma);
            out.emplace_back(prefix + "/beta", beta);
        }
    }
};

// One attention head: theta embeds the backend (query) set, phi the frontend
// (key) set.
template <class T>
struct AttentionHeadT {
    EmbeddingT<T> theta;
    EmbeddingT<T> phi;

    static AttentionHeadT dense(std::size_t d_back, std::size_t d_front,
                                std::size_t d_att, Rng& rng) {
        return AttentionHeadT{EmbeddingT<T>::dense(d_back, d_att, rng),
                              EmbeddingT<T>::dense(d_front, d_att, rng)};
    }
    static AttentionHeadT bypass(std::size_t dim) {
        return AttentionHeadT{EmbeddingT<T>::identity(dim),
                              EmbeddingT<T>::identity(dim)};
    }
};

using Embedding = EmbeddingT<float>;
using AttentionHead = AttentionHeadT<float>;

// S[i, j] = <theta(vB_i), phi(vF_j)>.
template <class T>
TensorT<T> attention_similarity(const AttentionHeadT<T>& head,
                                const FeatureVectorSetT<T>& v_back,
                                const FeatureVectorSetT<T>& v_front) {
    if (v_back.count() != v_front.count()) {
        throw ShapeError("attention_similarity: set sizes differ, " +
                         std::to_string(v_back.count()) + " vs " +
                         std::to_string(v_front.count()));
    }
    if (head.theta.out_dim() != head.phi.out_dim()) {
        throw ConfigError("attention_similarity: embedding widths differ");
    }
    TensorT<T> qb = head.theta.forward(v_back.vectors);
    TensorT<T> kf = head.phi.forward(v_front.vectors);
    return matmul(qb, transpose(kf));
}

// Row-stochastic relation graphs, one N x N matrix per head.
template <class T>
struct AttentionGraphT {
    std::vector<TensorT<T>> heads;
    GraphMode mode = GraphMode::Plain;
    int pair_index = 0;

    std::size_t head_count() const { return heads.size(); }
    std::size_t batch() const { return heads.empty() ? 0 : heads[0].dim(0); }
};

using AttentionGraph = AttentionGraphT<float>;

// Plain mode row-softmaxes the similarities; smoothed mode squashes them
// through tanh first, which caps every entry at e^2 / (e^2 + N - 1).
template <class T>
AttentionGraphT<T> attention_graph(const std::vector<TensorT<T>>& similarities,
                                   GraphMode mode, int pair_index = 0) {
    AttentionGraphT<T> g;
    g.mode = mode;
    g.pair_index = pair_index;
    g.heads.reserve(similarities.size());
    for (const auto& s : similarities) {
        if (s.ndim() != 2 || s.dim(0) != s.dim(1)) {
            throw ShapeError("attention_graph: similarity must be square, got " +
                             shape_str(s.shape()));
        }
        g.heads.push_back(mode == GraphMode::Smoothed ? softmax_rows(tanh(s))
                                                      : softmax_rows(s));
    }
    return g;
}

// Estimator: f1 = relu(BN(FC(.))), f2 = FC followed by row normalization, so
// predictions live on the unit sphere like their targets.
template <class T>
struct EstimatorT {
    EmbeddingT<T> f1;
    bool f1_relu = true;
    TensorT<T> w2, b2;

    static EstimatorT dense(std::size_t d_front, std::size_t d1,
                            std::size_t head_count, std::size_t d_back, Rng& rng) {
        EstimatorT e;
        e.f1 = EmbeddingT<T>::dense(d_front, d1, rng);
        const std::size_t in2 = head_count * d1;
        std::vector<T> wv(in2 * d_back);
        const double std_dev = std::sqrt(2.0 / double(in2));
        for (auto& x : wv) x = T(rng.gaussian() * std_dev);
        e.w2 = TensorT<T>::from({in2, d_back}, std::move(wv));
        e.b2 = TensorT<T>::zeros({d_back});
        return e;
    }

    void collect_params(const std::string& prefix,
                        std::vector<std::pair<std::string, TensorT<T>>>& out) const {
        f1.collect_params(prefix + "/f1", out);
        out.emplace_back(prefix + "/w2", w2);
        out.emplace_back(prefix + "/b2", b2);
    }
};

using Estimator = EstimatorT<float>;

// Per head a: context C_a = G_a * f1(V^F); contexts concatenate along the
// feature axis before f2.
template <class T>
FeatureVectorSetT<T> estimator_forward(const EstimatorT<T>& est,
                                       const AttentionGraphT<T>& g,
                                       const FeatureVectorSetT<T>& v_front) {
    if (g.batch() != v_front.count()) {
        throw ShapeError("estimator_forward: graph batch " +
                         std::to_string(g.batch()) + " vs set size " +
                         std::to_string(v_front.count()));
    }
    TensorT<T> h = est.f1.forward(v_front.vectors);
    if (est.f1_relu) h = relu(h);
    std::vector<TensorT<T>> contexts;
    contexts.reserve(g.head_count());
    for (const auto& graph : g.heads) contexts.push_back(matmul(graph, h));
    TensorT<T> cat = concat_cols(contexts);
    if (cat.dim(1) != est.w2.dim(0)) {
        throw ConfigError("estimator_forward: concatenated width " +
                          std::to_string(cat.dim(1)) + " does not match f2 input " +
                          std::to_string(est.w2.dim(0)));
    }
    TensorT<T> z = linear(cat, est.w2, est.b2);
    return FeatureVectorSetT<T>{l2_normalize_rows(z), "estimate"};
}

// ----------------------------------------------------------------------------
// Stacks: one attention unit (A heads + estimator) per sensing pair

struct MhgdConfig {
    std::size_t heads = 8;     // A
    std::size_t rank = 1;      // singular vectors kept per feature map
    std::size_t att_dim = 64;  // embedding width inside heads
    std::size_t est_dim = 128;  // f1 output width
};

template <class T>
struct MhganPairT {
    std::vector<AttentionHeadT<T>> heads;
    EstimatorT<T> estimator;
    std::size_t d_front = 0, d_back = 0;
};

template <class T>
struct MhgdStackT;

using MhganPair = MhganPairT<float>;

template <class T>
struct MhgdStackT {
    std::vector<MhganPairT<T>> pairs;
    MhgdConfig config;

    // tap_dims: per sensing pair, the (frontend, backend) vector dimensions
    // as produced by compression (rank * channel depth).
    static MhgdStackT build(const MhgdConfig& cfg,
                            const std::vector<std::pair<std::size_t, std::size_t>>& tap_dims,
                            Rng& rng) {
        if (cfg.heads < 1) throw ConfigError("mhgd stack: head count must be >= 1");
        if (tap_dims.empty()) {
            throw ConfigError("mhgd stack: at least one sensing pair required");
        }
        MhgdStackT stack;
        stack.config = cfg;
        for (const auto& [df, db] : tap_dims) {
            MhganPairT<T> pair;
            pair.d_front = df;
            pair.d_back = db;
            for (std::size_t a = 0; a < cfg.heads; ++a) {
                pair.heads.push_back(
                    AttentionHeadT<T>::dense(db, df, cfg.att_dim, rng));
            }
            pair.estimator =
                EstimatorT<T>::dense(df, cfg.est_dim, cfg.heads, db, rng);
            stack.pairs.push_back(std::move(pair));
        }
        return stack;
    }

    std::vector<std::pair<std::string, TensorT<T>>> named_params() const {
        std::vector<std::pair<std::string, TensorT<T>>> out;
        for (std::size_t m = 0; m < pairs.size(); ++m) {
            const std::string base = "pair" + std::to_string(m);
            for (std::size_t a = 0; a < pairs[m].heads.size(); ++a) {
                const std::string hb = base + "/head" + std::to_string(a);
                pairs[m].heads[a].theta.collect_params(hb + "/theta", out);
                pairs[m].heads[a].phi.collect_params(hb + "/phi", out);
            }
            pairs[m].estimator.collect_params(base + "/est", out);
        }
        return out;
    }

    void set_requires_grad(bool on) {
        auto params = named_params();  // copies share the underlying nodes
        for (auto& [name, t] : params) {
            (void)name;
            t.set_requires_grad(on);
        }
    }

    std::size_t pair_count() const { return pairs.size(); }
};

using MhgdStack = MhgdStackT<float>;

// All-head graphs for one sensing pair.
template <class T>
AttentionGraphT<T> pair_graphs(const MhganPairT<T>& pair,
                               const FeatureVectorSetT<T>& v_back,
                               const FeatureVectorSetT<T>& v_front,
                               GraphMode mode, int pair_index = 0) {
    std::vector<TensorT<T>> sims;
    sims.reserve(pair.heads.size());
    for (const auto& head : pair.heads) {
        sims.push_back(attention_similarity(head, v_back, v_front));
    }
    return attention_graph(sims, mode, pair_index);
}

template <class T>
struct MhanLossResultT {
    TensorT<T> loss;                // sum over pairs of mean cosine complement
    std::vector<double> mean_cosine;  // per pair, for logging
};

// Phase-1 objective over all sensing pairs; graphs are built in plain mode.
template <class T>
MhanLossResultT<T> mhan_loss(
    const MhgdStackT<T>& stack,
    const std::vector<std::pair<FeatureVectorSetT<T>, FeatureVectorSetT<T>>>& taps) {
    if (taps.size() != stack.pairs.size()) {
        throw ConfigError("mhan_loss: " + std::to_string(taps.size()) +
                          " tap pairs for " + std::to_string(stack.pairs.size()) +
                          " attention units");
    }
    MhanLossResultT<T> result;
    for (std::size_t m = 0; m < taps.size(); ++m) {
        const auto& [front, back] = taps[m];
        AttentionGraphT<T> g =
            pair_graphs(stack.pairs[m], back, front, GraphMode::Plain, int(m));
        FeatureVectorSetT<T> est =
            estimator_forward(stack.pairs[m].estimator, g, front);
        TensorT<T> pair_loss = cosine_complement(est.vectors, back.vectors);
        result.mean_cosine.push_back(1.0 - double(pair_loss.item()));
        result.loss =
            result.loss.defined() ? add(result.loss, pair_loss) : pair_loss;
    }
    return result;
}

// Phase-2 objective: KL(G_student || G_teacher) summed over pairs, heads and
// rows. The teacher side is detached, so gradient reaches only the student
// graphs.
template <class T>
TensorT<T> transfer_loss(const std::vector<AttentionGraphT<T>>& teacher,
                         const std::vector<AttentionGraphT<T>>& student) {
    if (teacher.size() != student.size()) {
        throw ShapeError("transfer_loss: pair counts differ, " +
                         std::to_string(teacher.size()) + " vs " +
                         std::to_string(student.size()));
    }
    TensorT<T> total;
    for (std::size_t m = 0; m < teacher.size(); ++m) {
        if (teacher[m].head_count() != student[m].head_count()) {
            throw ShapeError("transfer_loss: head counts differ at pair " +
                             std::to_string(m));
        }
        for (std::size_t a = 0; a < teacher[m].head_count(); ++a) {
            detail::require_same_shape(student[m].heads[a], teacher[m].heads[a],
                                       "transfer_loss");
            TensorT<T> term =
                kl_sum(student[m].heads[a], teacher[m].heads[a].detach());
            total = total.defined() ? add(total, term) : term;
        }
    }
    if (!total.defined()) throw ContractError("transfer_loss: empty graph list");
    return total;
}

// Upper bound on smoothed-graph entries for batch size n.
inline double smoothed_entry_bound(std::size_t n) {
    const double e2 = std::exp(2.0);
    return e2 / (e2 + double(n) - 1.0);
}

}  // namespace mhgd
