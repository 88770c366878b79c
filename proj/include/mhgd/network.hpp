// Copyright (c) 2026 the mhgd authors
// SPDX-License-Identifier: Apache-2.0
//
// Desk-scale CNN families with sensing taps. Teacher capacity comes from
// depth (more conv units per block) rather than width, so tap depths line up
// with the paired student without adapters. Taps sit at block boundaries:
// the frontend map enters the block, the backend map leaves the last conv
// unit before pooling/downsampling hands off to the next block.

#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "mhgd/common.hpp"
#include "mhgd/svd.hpp"
#include "mhgd/tensor.hpp"

namespace mhgd {

enum class Family { VggSmall, WrnSmall };
enum class Role { Teacher, Student };

struct NetworkSpec {
    Family family = Family::VggSmall;
    std::vector<int> blocks;  // conv units per block (vgg) / residual units (wrn)
    std::vector<int> widths;  // output channels per block
    std::size_t input_h = 16, input_w = 16, input_c = 3;
    int classes = 4;
    Role role = Role::Student;
    std::vector<int> sensing_blocks;  // 1-indexed blocks that carry a tap pair

    void validate() const;
};

struct SensingTap {
    int pair_index = 0;
    std::string front_id, back_id;
    std::size_t d_front = 0, d_back = 0;
};

// conv + BN (+ relu applied by the forward walkers)
struct ConvUnit {
    Tensor w;
    Tensor gamma, beta, run_mean, run_var;
    std::size_t stride = 1, pad = 1;
};

struct ResUnit {
    ConvUnit c1, c2;
    bool has_proj = false;
    ConvUnit proj;  // 1x1, matching stride
};

struct SensedForward {
    Tensor logits;
    // (frontend, backend) raw feature maps, one pair per sensing block, in
    // block order.
    std::vector<std::pair<Tensor, Tensor>> taps;
};

class Network {
  public:
    NetworkSpec spec;
    std::vector<std::vector<ConvUnit>> vgg_blocks;
    ConvUnit stem;  // wrn only
    std::vector<std::vector<ResUnit>> wrn_groups;
    Tensor fc_w, fc_b;
    std::vector<SensingTap> taps;

    // training_mode selects batch statistics inside BN; running buffers are
    // only written when update_running_stats is also set. Frozen teachers run
    // in batch-stats mode during graph construction without touching their
    // buffers, so teacher and student features are normalized the same way.
    bool training_mode = true;
    bool update_running_stats = true;

    // Trainable parameters and running-stat buffers, by stable name.
    std::vector<std::pair<std::string, Tensor>> parameters;
    std::vector<std::pair<std::string, Tensor>> buffers;

    void set_training(bool on) { training_mode = on; }

    // Marks all parameters as gradient-free; used for teachers.
    void freeze();
    bool frozen() const;

    SensedForward forward_with_sensing(const Tensor& batch) const;
    Tensor forward(const Tensor& batch) const;

    // Replaces parameter/buffer values by name; shapes must match.
    void load_state(const std::map<std::string, std::vector<float>>& blobs);
    std::map<std::string, std::vector<float>> state() const;
};

Network build_network(const NetworkSpec& spec, std::uint64_t seed);

// Sensing taps implied by a spec, without building the network. Tap count
// and depths are a pure function of the spec.
std::vector<SensingTap> spec_taps(const NetworkSpec& spec);

// Tap depth agreement between a teacher and a student meant to be paired.
void check_tap_compatibility(const Network& teacher, const Network& student);

// tau^2-scaled KL between temperature-softened output distributions; the
// teacher side is detached.
Tensor soft_logits_loss(const Tensor& teacher_logits, const Tensor& student_logits,
                        double tau);

// Sum over pairs of mean squared distance between compressed vectors. The
// caller sign-aligns the student sets first; the teacher side is detached.
Tensor feature_l2_loss(const std::vector<FeatureVectorSet>& teacher_sets,
                       const std::vector<FeatureVectorSet>& student_sets);

}  // namespace mhgd
