// Copyright (c) 2026 the mhgd authors
// SPDX-License-Identifier: Apache-2.0
//
// The three training stages: teacher pretraining, attention-network fitting
// on the frozen teacher, and multi-task student training with a selectable
// transfer method. Plus learning-rate schedules, metrics logging, and the
// binary checkpoint format.

#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "mhgd/attention.hpp"
#include "mhgd/common.hpp"
#include "mhgd/data.hpp"
#include "mhgd/network.hpp"

namespace mhgd {

// ----------------------------------------------------------------------------
// Learning-rate schedule

struct LrSchedule {
    double initial = 0.1;
    std::vector<std::pair<int, double>> milestones;  // (epoch, multiplier)

    void validate() const;
};

// Initial rate times the product of multipliers whose milestone <= epoch.
double lr_at_epoch(const LrSchedule& sched, int epoch);

// ----------------------------------------------------------------------------
// Metrics

struct MetricRecord {
    int epoch = 0;
    std::string split;
    double loss_target = 0.0;
    double loss_transfer = 0.0;
    double accuracy = 0.0;
    double lr = 0.0;
    double seconds = 0.0;
};

struct RunMetrics {
    std::vector<MetricRecord> records;
    std::uint64_t seed = 0;
    std::string method;
    std::string config_hash;

    // CSV with header epoch,split,loss_target,loss_transfer,accuracy,lr,seconds
    // plus a flat-JSON sidecar holding seed, method and config hash.
    void save_csv(const std::string& path) const;
    void save_meta(const std::string& path) const;
    static RunMetrics load(const std::string& csv_path, const std::string& meta_path);

    const MetricRecord* find(int epoch, const std::string& split) const;
};

// ----------------------------------------------------------------------------
// Checkpoints
//
// File layout: magic "MHGD", version u32 LE, then records: name length (u32)
// + UTF-8 name + rank (u32) + dims (u32 each) + little-endian f32 payload.
// Parameter records carry a "p/" prefix, optimizer velocities "o/", and the
// trailing metadata records "m/rng", "m/config_hash" (byte strings packed
// into f32 words, first word = byte count) and "m/epoch" (scalar record).

struct NamedBlob {
    std::string name;
    Shape shape;
    std::vector<float> data;
};

struct Checkpoint {
    static constexpr std::uint32_t kVersion = 1;

    std::vector<NamedBlob> params;  // parameters and running-stat buffers
    std::vector<NamedBlob> opt;     // velocity buffers, named after parameters
    std::string rng_state;
    int epoch = 0;
    std::string config_hash;

    void save(const std::string& path) const;
    static Checkpoint load(const std::string& path);

    std::map<std::string, std::vector<float>> blob_map() const;
};

// ----------------------------------------------------------------------------
// Stage drivers

struct Dataset {
    LabeledImageSet train;
    LabeledImageSet test;
    AugmentConfig aug;
};

struct TrainHyper {
    int epochs = 30;
    std::size_t batch = 64;
    LrSchedule schedule;
    double momentum = 0.9;
    double weight_decay = 5e-4;
    double lambda = 1.0;  // transfer weight
    double tau = 4.0;     // soft-logits temperature
    std::string config_hash;
    bool prefetch = false;
};

enum class Method { Student, SoftLogits, KdSvdf, Mhgd };

Method parse_method(const std::string& name);
std::string method_name(Method m);

struct TrainResult {
    Checkpoint checkpoint;
    RunMetrics metrics;
};

// Cross-entropy training of a spec from scratch (or resumed), Nesterov SGD
// with the milestone schedule.
TrainResult train_teacher(const NetworkSpec& spec, const Dataset& data,
                          const TrainHyper& hyper, std::uint64_t seed,
                          const Checkpoint* resume = nullptr);

// Phase 1: fits the attention stack on the frozen teacher. Batches whose
// compression hits a degenerate spectrum are skipped with a warning; more
// than 10% skipped aborts the run.
TrainResult train_mhan(const NetworkSpec& teacher_spec, const Checkpoint& teacher,
                       const MhgdConfig& cfg, const Dataset& data,
                       const TrainHyper& hyper, std::uint64_t seed);

// Phase 2: multi-task student training, total = cross-entropy + lambda *
// method loss. Teacher and attention-stack bytes are verified unchanged.
TrainResult train_student(const NetworkSpec& teacher_spec, const Checkpoint& teacher,
                          const MhgdConfig& cfg, const Checkpoint* mhan,
                          const NetworkSpec& student_spec, const Dataset& data,
                          const TrainHyper& hyper, Method method, std::uint64_t seed,
                          const Checkpoint* resume = nullptr);

// Top-1 accuracy (percent) over a split, evaluation augmentation and
// running-stat normalization. Restores the network's previous mode.
double evaluate(Network& net, const LabeledImageSet& split,
                const AugmentConfig& aug, std::size_t batch);

struct EvalStats {
    double accuracy = 0.0;
    double mean_ce = 0.0;
};
EvalStats evaluate_full(Network& net, const LabeledImageSet& split,
                        const AugmentConfig& aug, std::size_t batch);

// Rebuilds a network from its spec and checkpoint.
Network restore_network(const NetworkSpec& spec, const Checkpoint& ckpt);

// Rebuilds an attention stack sized for the teacher's taps.
MhgdStack restore_stack(const NetworkSpec& teacher_spec, const MhgdConfig& cfg,
                        const Checkpoint& ckpt);

// The phase-2 transfer term for one batch: smoothed graphs from the frozen
// stack applied to teacher and student compressions, sign-aligned, KLD.
// Exposed for tests and diagnostics.
Tensor mhgd_transfer_term(const Network& teacher, const MhgdStack& stack,
                          const Network& student, const Tensor& batch);

}  // namespace mhgd
