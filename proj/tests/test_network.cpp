// Copyright (c) 2026 the mhgd authors
// SPDX-License-Identifier: Apache-2.0

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "mhgd/network.hpp"
#include "mhgd/ops.hpp"

using namespace mhgd;

namespace {

NetworkSpec student_spec() {
    NetworkSpec s;
    s.family = Family::VggSmall;
    s.blocks = {1, 1, 1};
    s.widths = {8, 16, 32};
    s.input_h = 16;
    s.input_w = 16;
    s.input_c = 3;
    s.classes = 4;
    s.role = Role::Student;
    s.sensing_blocks = {2, 3};
    return s;
}

NetworkSpec teacher_spec() {
    NetworkSpec t = student_spec();
    t.blocks = {2, 2, 2};
    t.role = Role::Teacher;
    return t;
}

Tensor random_batch(std::size_t n, const NetworkSpec& spec, Rng& rng) {
    std::vector<float> v(n * spec.input_h * spec.input_w * spec.input_c);
    for (auto& x : v) x = float(rng.uniform01() - 0.5);
    return Tensor::from({n, spec.input_h, spec.input_w, spec.input_c}, v);
}

}  // namespace

TEST_CASE("vgg student forward produces the right shapes") {
    auto net = build_network(student_spec(), 7);
    Rng rng(1);
    Tensor batch = random_batch(2, net.spec, rng);
    auto sensed = net.forward_with_sensing(batch);
    CHECK(sensed.logits.shape() == Shape{2, 4});
    REQUIRE(sensed.taps.size() == 2);
    // Block 2: frontend enters at 8x8x8, backend leaves at 8x8x16.
    CHECK(sensed.taps[0].first.shape() == Shape{2, 8, 8, 8});
    CHECK(sensed.taps[0].second.shape() == Shape{2, 8, 8, 16});
    // Block 3: 4x4 spatial.
    CHECK(sensed.taps[1].first.shape() == Shape{2, 4, 4, 16});
    CHECK(sensed.taps[1].second.shape() == Shape{2, 4, 4, 32});

    CHECK_THROWS_AS(net.forward(Tensor::zeros({2, 8, 8, 3})), ShapeError);
}

TEST_CASE("teacher spec with matching widths has equal tap depths") {
    auto teacher = build_network(teacher_spec(), 7);
    auto student = build_network(student_spec(), 8);
    check_tap_compatibility(teacher, student);
    for (std::size_t i = 0; i < teacher.taps.size(); ++i) {
        CHECK(teacher.taps[i].d_front == student.taps[i].d_front);
        CHECK(teacher.taps[i].d_back == student.taps[i].d_back);
    }

    // Width mismatch is a configuration error naming both depths.
    NetworkSpec wide = student_spec();
    wide.widths = {8, 24, 32};
    auto other = build_network(wide, 9);
    CHECK_THROWS_WITH_AS(check_tap_compatibility(teacher, other),
                         doctest::Contains("depths differ"), ConfigError);
}

TEST_CASE("identical seed and spec give bit-identical parameters") {
    auto a = build_network(teacher_spec(), 1234);
    auto b = build_network(teacher_spec(), 1234);
    REQUIRE(a.parameters.size() == b.parameters.size());
    for (std::size_t i = 0; i < a.parameters.size(); ++i) {
        CHECK(a.parameters[i].first == b.parameters[i].first);
        CHECK(a.parameters[i].second.values() == b.parameters[i].second.values());
    }
    auto c = build_network(teacher_spec(), 1235);
    bool all_same = true;
    for (std::size_t i = 0; i < a.parameters.size(); ++i) {
        if (a.parameters[i].second.values() != c.parameters[i].second.values())
            all_same = false;
    }
    CHECK_FALSE(all_same);
}

TEST_CASE("wrn family builds, downsamples and senses") {
    NetworkSpec w;
    w.family = Family::WrnSmall;
    w.blocks = {1, 1, 1};
    w.widths = {8, 16, 32};
    w.input_h = 16;
    w.input_w = 16;
    w.classes = 4;
    w.sensing_blocks = {2, 3};
    auto net = build_network(w, 5);
    Rng rng(2);
    Tensor batch = random_batch(2, w, rng);
    auto sensed = net.forward_with_sensing(batch);
    CHECK(sensed.logits.shape() == Shape{2, 4});
    REQUIRE(sensed.taps.size() == 2);
    // Group 2 halves the spatial extent with its stride-2 entry.
    CHECK(sensed.taps[0].first.shape() == Shape{2, 16, 16, 8});
    CHECK(sensed.taps[0].second.shape() == Shape{2, 8, 8, 16});
    CHECK(sensed.taps[1].second.shape() == Shape{2, 4, 4, 32});
}

TEST_CASE("frozen teacher emits gradient-free maps; eval mode is deterministic") {
    auto net = build_network(teacher_spec(), 77);
    net.freeze();
    net.set_training(false);
    CHECK(net.frozen());
    Rng rng(3);
    Tensor batch = random_batch(2, net.spec, rng);
    auto a = net.forward_with_sensing(batch);
    CHECK_FALSE(a.logits.requires_grad());
    for (const auto& [front, back] : a.taps) {
        CHECK_FALSE(front.requires_grad());
        CHECK_FALSE(back.requires_grad());
    }
    auto b = net.forward_with_sensing(batch);
    CHECK(a.logits.values() == b.logits.values());
    for (std::size_t i = 0; i < a.taps.size(); ++i) {
        CHECK(a.taps[i].first.values() == b.taps[i].first.values());
        CHECK(a.taps[i].second.values() == b.taps[i].second.values());
    }
}

TEST_CASE("state round-trips by name") {
    auto net = build_network(student_spec(), 11);
    auto blobs = net.state();
    auto other = build_network(student_spec(), 12);
    other.load_state(blobs);
    for (std::size_t i = 0; i < net.parameters.size(); ++i) {
        CHECK(net.parameters[i].second.values() ==
              other.parameters[i].second.values());
    }
    blobs.erase("fc/w");
    CHECK_THROWS_AS(other.load_state(blobs), CheckpointError);
}

TEST_CASE("soft_logits_loss contracts") {
    Rng rng(4);
    std::vector<float> v(6 * 4);
    for (auto& x : v) x = float(rng.gaussian() * 2.0);
    Tensor logits = Tensor::from({6, 4}, v);

    CHECK(soft_logits_loss(logits, logits, 4.0).item() ==
          doctest::Approx(0.0).epsilon(1e-6));
    CHECK_THROWS_AS(soft_logits_loss(logits, logits, 0.0), ConfigError);
    CHECK_THROWS_AS(soft_logits_loss(logits, logits, -1.0), ConfigError);

    // Direct-evaluation oracle at tau = 4.
    std::vector<float> u(6 * 4);
    for (auto& x : u) x = float(rng.gaussian() * 2.0);
    Tensor student = Tensor::from({6, 4}, u);
    const double tau = 4.0;
    double want = 0.0;
    for (std::size_t i = 0; i < 6; ++i) {
        double dt = 0.0, ds = 0.0;
        for (std::size_t j = 0; j < 4; ++j) {
            dt += std::exp(double(v[i * 4 + j]) / tau);
            ds += std::exp(double(u[i * 4 + j]) / tau);
        }
        for (std::size_t j = 0; j < 4; ++j) {
            const double pt = std::exp(double(v[i * 4 + j]) / tau) / dt;
            const double ps = std::exp(double(u[i * 4 + j]) / tau) / ds;
            want += pt * (std::log(pt) - std::log(ps));
        }
    }
    want *= tau * tau / 6.0;
    CHECK(double(soft_logits_loss(logits, student, tau).item()) ==
          doctest::Approx(want).epsilon(1e-6));

    // High temperature softens both distributions toward uniform: loss sinks.
    const float sharp = soft_logits_loss(logits, student, 1.0).item();
    (void)sharp;
    Tensor s1 = student.clone().set_requires_grad();
    backprop(soft_logits_loss(logits, s1, 1000.0));
    auto g = s1.grad();
    for (std::size_t i = 0; i < g.size(); ++i) CHECK(std::fabs(g.data()[i]) < 1.0);

    // Gradient reaches the student only.
    Tensor t2 = logits.clone().set_requires_grad();
    Tensor s2 = student.clone().set_requires_grad();
    backprop(soft_logits_loss(t2, s2, 4.0));
    auto gt = t2.grad();
    double t_norm = 0.0;
    for (std::size_t i = 0; i < gt.size(); ++i) t_norm += std::fabs(gt.data()[i]);
    CHECK(t_norm == 0.0);
}

TEST_CASE("feature_l2_loss contracts") {
    Rng rng(5);
    std::vector<float> v(5 * 6);
    for (auto& x : v) x = float(rng.gaussian());
    FeatureVectorSet a{l2_normalize_rows(Tensor::from({5, 6}, v)), "a"};
    CHECK(feature_l2_loss({a}, {a}).item() == doctest::Approx(0.0));

    // Antipodal rows vanish after sign alignment.
    FeatureVectorSet flipped{scale(a.vectors, -1.0f), "s"};
    auto aligned = sign_align_pair(flipped, a);
    CHECK(feature_l2_loss({a}, {aligned}).item() == doctest::Approx(0.0));

    // Random unit rows: value within [0, 4*M] and equal to the direct oracle.
    std::vector<float> u(5 * 6);
    for (auto& x : u) x = float(rng.gaussian());
    FeatureVectorSet b{l2_normalize_rows(Tensor::from({5, 6}, u)), "b"};
    const float loss = feature_l2_loss({a, a}, {b, b}).item();
    CHECK(loss >= 0.0f);
    CHECK(loss <= 8.0f);
    double want = 0.0;
    for (std::size_t i = 0; i < 5; ++i)
        for (std::size_t j = 0; j < 6; ++j) {
            const double d = double(a.vectors.data()[i * 6 + j]) -
                             double(b.vectors.data()[i * 6 + j]);
            want += d * d;
        }
    want = want * 2.0 / 5.0;
    CHECK(double(loss) == doctest::Approx(want).epsilon(1e-5));

    FeatureVectorSet small{Tensor::zeros({2, 3}), "x"};
    CHECK_THROWS_AS(feature_l2_loss({a}, {small}), ShapeError);
}

TEST_CASE("spec validation rejects malformed specs") {
    NetworkSpec bad = student_spec();
    bad.blocks = {};
    CHECK_THROWS_AS(build_network(bad, 1), ConfigError);
    bad = student_spec();
    bad.widths = {8, 16};
    CHECK_THROWS_AS(build_network(bad, 1), ConfigError);
    bad = student_spec();
    bad.sensing_blocks = {4};
    CHECK_THROWS_AS(build_network(bad, 1), ConfigError);
    bad = student_spec();
    bad.classes = 1;
    CHECK_THROWS_AS(build_network(bad, 1), ConfigError);
}
