// Copyright (c) 2026 the mhgd authors
// SPDX-License-Identifier: Apache-2.0
//
// INI-style experiment configuration: sections of key = value lines mapped
// onto a validated ExperimentConfig. Unknown sections or keys are rejected
// with their line numbers.

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mhgd/attention.hpp"
#include "mhgd/network.hpp"
#include "mhgd/train.hpp"

namespace mhgd {

struct DatasetConfig {
    std::string source = "synthetic";  // synthetic | cifar100
    int classes = 4;
    std::size_t train_count = 2048;
    std::size_t test_count = 512;
    std::size_t image_size = 16;
    std::uint64_t seed = 9001;
    std::string path;       // cifar100 train file
    std::string eval_path;  // cifar100 test file
    std::string variant = "fine100";
    int pad = 4;
    bool flip = true;
};

struct StageConfig {
    int epochs = 30;
    std::size_t batch = 64;
    LrSchedule schedule;
    double momentum = 0.9;
    double weight_decay = 5e-4;
    double temperature = 4.0;  // student stage only
};

struct ExperimentConfig {
    DatasetConfig dataset;
    Family teacher_family = Family::VggSmall;
    std::vector<int> teacher_blocks{2, 2, 2};
    std::vector<int> teacher_widths{8, 16, 32};
    Family student_family = Family::VggSmall;
    std::vector<int> student_blocks{1, 1, 1};
    std::vector<int> student_widths{8, 16, 32};
    std::vector<int> sensing_blocks{2, 3};

    MhgdConfig mhgd;
    double lambda = 1.0;

    StageConfig teacher_train;
    StageConfig mhan_train;
    StageConfig student_train;

    std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};
    std::vector<std::string> methods{"student", "mhgd"};
    std::string out_dir = "runs/out";

    std::string config_hash;  // FNV-1a of the raw config text
    std::string source_name;

    static ExperimentConfig parse_file(const std::string& path);
    static ExperimentConfig parse_text(const std::string& text,
                                       const std::string& name);

    void validate() const;

    NetworkSpec teacher_spec() const;
    NetworkSpec student_spec() const;
    Dataset load_dataset() const;
    TrainHyper teacher_hyper() const;
    TrainHyper mhan_hyper() const;
    TrainHyper student_hyper() const;
};

}  // namespace mhgd
