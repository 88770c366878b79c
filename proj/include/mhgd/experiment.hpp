// Copyright (c) 2026 the mhgd authors
// SPDX-License-Identifier: Apache-2.0
//
// Orchestration of the full pipeline over seeds: teacher, attention stack,
// students per method, summary tables, and the head-count ablation.

#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include "mhgd/config.hpp"

namespace mhgd {

struct StageMask {
    bool teacher = true;
    bool mhan = true;
    bool student = true;

    static StageMask parse(const std::string& stage);  // teacher|mhan|student|all
};

struct MethodSummary {
    std::string method;
    int runs = 0;
    double acc_mean = 0.0;
    double acc_std = 0.0;
    double transfer_final_mean = 0.0;
};

// Artifact paths for one seed under the experiment output directory.
struct SeedPaths {
    std::string dir;
    std::string teacher_ckpt, teacher_csv, teacher_meta;
    std::string mhan_ckpt, mhan_csv, mhan_meta;
    std::string student_ckpt(const std::string& method) const;
    std::string student_csv(const std::string& method) const;
    std::string student_meta(const std::string& method) const;

    static SeedPaths at(const std::string& out_dir, std::uint64_t seed);
};

// Runs the requested stages for every seed; sequential by default, one
// worker process per seed when parallel_seeds is set. Returns the per-method
// summaries (final test accuracy over seeds) and writes summary.csv and
// summary.txt into the output directory.
std::vector<MethodSummary> run_experiment(const ExperimentConfig& cfg,
                                          const StageMask& stages,
                                          const std::vector<std::string>& methods,
                                          bool parallel_seeds, std::ostream& log);

struct AblationRow {
    std::size_t heads = 0;
    int runs = 0;
    double acc_mean = 0.0;
    double acc_std = 0.0;
};

// Repeats the mhan and student stages for each head count, reusing the
// per-seed teacher (training it first if absent). Emits an accuracy-vs-heads
// table (text + CSV) under the output directory.
std::vector<AblationRow> ablate_heads(const ExperimentConfig& cfg,
                                      const std::vector<std::size_t>& head_counts,
                                      std::ostream& log);

}  // namespace mhgd
