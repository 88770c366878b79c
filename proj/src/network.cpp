// Copyright (c) 2026 the mhgd authors
// SPDX-License-Identifier: Apache-2.0

#include "mhgd/network.hpp"

#include <algorithm>

#include "mhgd/ops.hpp"

namespace mhgd {

void NetworkSpec::validate() const {
    if (blocks.empty() || blocks.size() != widths.size()) {
        throw ConfigError("network spec: blocks and widths must be non-empty and "
                          "equally sized");
    }
    for (int b : blocks) {
        if (b < 1) throw ConfigError("network spec: every block needs >= 1 unit");
    }
    for (int w : widths) {
        if (w < 1) throw ConfigError("network spec: channel widths must be positive");
    }
    if (classes < 2) throw ConfigError("network spec: need >= 2 classes");
    if (input_h < 4 || input_w < 4 || input_c < 1) {
        throw ConfigError("network spec: input must be at least 4x4 with >= 1 "
                          "channel");
    }
    for (int s : sensing_blocks) {
        if (s < 1 || std::size_t(s) > blocks.size()) {
            throw ConfigError("network spec: sensing block " + std::to_string(s) +
                              " outside [1, " + std::to_string(blocks.size()) + "]");
        }
    }
}

namespace {

Tensor he_conv(std::size_t kh, std::size_t kw, std::size_t cin, std::size_t cout,
               Rng& rng) {
    std::vector<float> w(kh * kw * cin * cout);
    const double std_dev = std::sqrt(2.0 / double(kh * kw * cin));
    for (auto& x : w) x = float(rng.gaussian() * std_dev);
    return Tensor::from({kh, kw, cin, cout}, std::move(w));
}

ConvUnit make_unit(std::size_t kh, std::size_t kw, std::size_t cin,
                   std::size_t cout, std::size_t stride, std::size_t pad,
                   Rng& rng) {
    ConvUnit u;
    u.w = he_conv(kh, kw, cin, cout, rng);
    u.gamma = Tensor::full({cout}, 1.0f);
    u.beta = Tensor::zeros({cout});
    u.run_mean = Tensor::zeros({cout});
    u.run_var = Tensor::full({cout}, 1.0f);
    u.stride = stride;
    u.pad = pad;
    return u;
}

void register_unit(Network& net, const std::string& name, ConvUnit& u) {
    net.parameters.emplace_back(name + "/w", u.w);
    net.parameters.emplace_back(name + "/bn/gamma", u.gamma);
    net.parameters.emplace_back(name + "/bn/beta", u.beta);
    net.buffers.emplace_back(name + "/bn/run_mean", u.run_mean);
    net.buffers.emplace_back(name + "/bn/run_var", u.run_var);
}

// conv -> BN; batch statistics while training, running stats otherwise.
Tensor unit_forward(const ConvUnit& u, const Tensor& x, bool batch_stats,
                    bool update_running) {
    Tensor h = conv2d(x, u.w, u.stride, u.pad);
    return batch_norm(h, u.gamma, u.beta, batch_stats, 1e-5, u.run_mean,
                      u.run_var, 0.9, update_running);
}

}  // namespace

Network build_network(const NetworkSpec& spec, std::uint64_t seed) {
    spec.validate();
    Rng rng(seed);
    Network net;
    net.spec = spec;

    const std::size_t nblocks = spec.blocks.size();
    if (spec.family == Family::VggSmall) {
        std::size_t cin = spec.input_c;
        for (std::size_t b = 0; b < nblocks; ++b) {
            std::vector<ConvUnit> units;
            const std::size_t cout = std::size_t(spec.widths[b]);
            for (int u = 0; u < spec.blocks[b]; ++u) {
                units.push_back(make_unit(3, 3, u == 0 ? cin : cout, cout, 1, 1, rng));
                register_unit(net,
                              "block" + std::to_string(b + 1) + "/conv" +
                                  std::to_string(u),
                              units.back());
            }
            net.vgg_blocks.push_back(std::move(units));
            cin = cout;
        }
    } else {
        net.stem = make_unit(3, 3, spec.input_c, std::size_t(spec.widths[0]), 1, 1, rng);
        register_unit(net, "stem", net.stem);
        std::size_t cin = std::size_t(spec.widths[0]);
        for (std::size_t g = 0; g < nblocks; ++g) {
            std::vector<ResUnit> units;
            const std::size_t cout = std::size_t(spec.widths[g]);
            for (int u = 0; u < spec.blocks[g]; ++u) {
                ResUnit r;
                const std::size_t stride = (u == 0 && g > 0) ? 2 : 1;
                const std::size_t in = u == 0 ? cin : cout;
                r.c1 = make_unit(3, 3, in, cout, stride, 1, rng);
                r.c2 = make_unit(3, 3, cout, cout, 1, 1, rng);
                r.has_proj = stride != 1 || in != cout;
                if (r.has_proj) r.proj = make_unit(1, 1, in, cout, stride, 0, rng);
                const std::string base = "group" + std::to_string(g + 1) + "/unit" +
                                         std::to_string(u);
                register_unit(net, base + "/conv1", r.c1);
                register_unit(net, base + "/conv2", r.c2);
                if (r.has_proj) register_unit(net, base + "/proj", r.proj);
                units.push_back(std::move(r));
            }
            net.wrn_groups.push_back(std::move(units));
            cin = cout;
        }
    }

    {
        const std::size_t in = std::size_t(spec.widths.back());
        std::vector<float> w(in * std::size_t(spec.classes));
        const double std_dev = std::sqrt(2.0 / double(in));
        for (auto& x : w) x = float(rng.gaussian() * std_dev);
        net.fc_w = Tensor::from({in, std::size_t(spec.classes)}, std::move(w));
        net.fc_b = Tensor::zeros({std::size_t(spec.classes)});
        net.parameters.emplace_back("fc/w", net.fc_w);
        net.parameters.emplace_back("fc/b", net.fc_b);
    }

    net.taps = spec_taps(spec);

    for (auto& [name, p] : net.parameters) {
        (void)name;
        p.set_requires_grad(true);
    }
    return net;
}

std::vector<SensingTap> spec_taps(const NetworkSpec& spec) {
    spec.validate();
    std::vector<SensingTap> taps;
    int pair = 0;
    for (int b : spec.sensing_blocks) {
        SensingTap tap;
        tap.pair_index = pair++;
        tap.front_id = "block" + std::to_string(b) + ".front";
        tap.back_id = "block" + std::to_string(b) + ".back";
        tap.d_front = b == 1 ? spec.input_c : std::size_t(spec.widths[b - 2]);
        if (spec.family == Family::WrnSmall) {
            // The stem feeds group 1, so its frontend depth is widths[0].
            tap.d_front = b == 1 ? std::size_t(spec.widths[0])
                                 : std::size_t(spec.widths[b - 2]);
        }
        tap.d_back = std::size_t(spec.widths[b - 1]);
        taps.push_back(tap);
    }
    return taps;
}

void Network::freeze() {
    for (auto& [name, p] : parameters) {
        (void)name;
        p.set_requires_grad(false);
    }
}

bool Network::frozen() const {
    for (const auto& [name, p] : parameters) {
        (void)name;
        if (p.requires_grad()) return false;
    }
    return true;
}

SensedForward Network::forward_with_sensing(const Tensor& batch) const {
    if (batch.ndim() != 4 || batch.dim(1) != spec.input_h ||
        batch.dim(2) != spec.input_w || batch.dim(3) != spec.input_c) {
        throw ShapeError("network forward: batch " + shape_str(batch.shape()) +
                         " does not match input " + std::to_string(spec.input_h) +
                         "x" + std::to_string(spec.input_w) + "x" +
                         std::to_string(spec.input_c));
    }
    SensedForward out;
    std::map<int, std::pair<Tensor, Tensor>> sensed;
    auto is_sensed = [&](std::size_t block0) {
        return std::find(spec.sensing_blocks.begin(), spec.sensing_blocks.end(),
                         int(block0 + 1)) != spec.sensing_blocks.end();
    };

    const bool update = training_mode && update_running_stats;
    Tensor x = batch;
    if (spec.family == Family::VggSmall) {
        for (std::size_t b = 0; b < vgg_blocks.size(); ++b) {
            Tensor front = x;
            for (const auto& u : vgg_blocks[b]) {
                x = relu(unit_forward(u, x, training_mode, update));
            }
            if (is_sensed(b)) sensed[int(b)] = {front, x};
            x = maxpool2d(x, 2, 2);
        }
    } else {
        x = relu(unit_forward(stem, x, training_mode, update));
        for (std::size_t g = 0; g < wrn_groups.size(); ++g) {
            Tensor front = x;
            for (const auto& r : wrn_groups[g]) {
                Tensor h = relu(unit_forward(r.c1, x, training_mode, update));
                h = unit_forward(r.c2, h, training_mode, update);
                Tensor shortcut =
                    r.has_proj ? unit_forward(r.proj, x, training_mode, update) : x;
                x = relu(add(h, shortcut));
            }
            if (is_sensed(g)) sensed[int(g)] = {front, x};
        }
    }

    Tensor pooled = global_avg_pool(x);
    out.logits = linear(pooled, fc_w, fc_b);
    for (auto& [block, pair] : sensed) out.taps.push_back(pair);
    return out;
}

Tensor Network::forward(const Tensor& batch) const {
    return forward_with_sensing(batch).logits;
}

void Network::load_state(const std::map<std::string, std::vector<float>>& blobs) {
    auto apply = [&](std::vector<std::pair<std::string, Tensor>>& table) {
        for (auto& [name, t] : table) {
            auto it = blobs.find(name);
            if (it == blobs.end()) {
                throw CheckpointError("network state: missing blob '" + name + "'");
            }
            if (it->second.size() != t.size()) {
                throw CheckpointError("network state: blob '" + name + "' has " +
                                      std::to_string(it->second.size()) +
                                      " values, expected " + std::to_string(t.size()));
            }
            std::copy(it->second.begin(), it->second.end(), t.data());
        }
    };
    apply(parameters);
    apply(buffers);
}

std::map<std::string, std::vector<float>> Network::state() const {
    std::map<std::string, std::vector<float>> out;
    for (const auto& [name, t] : parameters) out[name] = t.values();
    for (const auto& [name, t] : buffers) out[name] = t.values();
    return out;
}

void check_tap_compatibility(const Network& teacher, const Network& student) {
    if (teacher.taps.size() != student.taps.size()) {
        throw ConfigError("tap pairing: teacher has " +
                          std::to_string(teacher.taps.size()) +
                          " sensing pairs, student has " +
                          std::to_string(student.taps.size()));
    }
    for (std::size_t i = 0; i < teacher.taps.size(); ++i) {
        const auto& t = teacher.taps[i];
        const auto& s = student.taps[i];
        if (t.d_front != s.d_front || t.d_back != s.d_back) {
            throw ConfigError("tap pairing: depths differ at pair " +
                              std::to_string(i) + " (teacher " +
                              std::to_string(t.d_front) + "/" +
                              std::to_string(t.d_back) + ", student " +
                              std::to_string(s.d_front) + "/" +
                              std::to_string(s.d_back) + ")");
        }
    }
}

Tensor soft_logits_loss(const Tensor& teacher_logits, const Tensor& student_logits,
                        double tau) {
    if (tau <= 0.0) {
        throw ConfigError("soft_logits_loss: temperature must be positive, got " +
                          std::to_string(tau));
    }
    detail::require_same_shape(teacher_logits, student_logits, "soft_logits_loss");
    const std::size_t n = teacher_logits.dim(0);
    Tensor t_soft =
        softmax_rows(scale(teacher_logits.detach(), float(1.0 / tau)));
    Tensor s_soft = softmax_rows(scale(student_logits, float(1.0 / tau)));
    return scale(kl_sum(t_soft, s_soft), float(tau * tau / double(n)));
}

Tensor feature_l2_loss(const std::vector<FeatureVectorSet>& teacher_sets,
                       const std::vector<FeatureVectorSet>& student_sets) {
    if (teacher_sets.size() != student_sets.size()) {
        throw ShapeError("feature_l2_loss: set counts differ");
    }
    Tensor total;
    for (std::size_t m = 0; m < teacher_sets.size(); ++m) {
        detail::require_same_shape(teacher_sets[m].vectors, student_sets[m].vectors,
                                   "feature_l2_loss");
        const std::size_t n = teacher_sets[m].vectors.dim(0);
        Tensor diff = sub(teacher_sets[m].vectors.detach(), student_sets[m].vectors);
        Tensor term = scale(sum(mul(diff, diff)), 1.0f / float(n));
        total = total.defined() ? add(total, term) : term;
    }
    if (!total.defined()) throw ContractError("feature_l2_loss: empty set list");
    return total;
}

}  // namespace mhgd
