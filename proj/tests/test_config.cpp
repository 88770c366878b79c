// Copyright (c) 2026 the mhgd authors
// SPDX-License-Identifier: Apache-2.0

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "mhgd/config.hpp"

using namespace mhgd;

namespace {

const char* kMinimal = R"(
[dataset]
source = synthetic
classes = 3
train_count = 64
test_count = 32
image_size = 16
seed = 5

[teacher]
blocks = 1,1
widths = 8,16

[student]
blocks = 1,1
widths = 8,16

[sensing]
blocks = 2

[mhgd]
heads = 2
rank = 1
att_dim = 8
est_dim = 8

[teacher_train]
epochs = 1
batch = 16
lr = 0.05

[mhan_train]
epochs = 1
batch = 16
lr = 0.1

[student_train]
epochs = 1
batch = 16
lr = 0.05

[run]
seeds = 1,2
methods = student,mhgd
out_dir = /tmp/mhgd_cfg_out
)";

}  // namespace

TEST_CASE("minimal config parses with defaults and hash") {
    auto cfg = ExperimentConfig::parse_text(kMinimal, "mini");
    CHECK(cfg.dataset.classes == 3);
    CHECK(cfg.seeds == std::vector<std::uint64_t>{1, 2});
    CHECK(cfg.methods == std::vector<std::string>{"student", "mhgd"});
    CHECK(cfg.mhgd.heads == 2);
    CHECK(cfg.lambda == 1.0);
    CHECK(cfg.config_hash.size() == 16);

    auto spec = cfg.teacher_spec();
    CHECK(spec.role == Role::Teacher);
    CHECK(spec.classes == 3);
    CHECK(spec.input_h == 16);
    CHECK(spec.sensing_blocks == std::vector<int>{2});

    // Same text, same hash; different text, different hash.
    auto again = ExperimentConfig::parse_text(kMinimal, "mini2");
    CHECK(again.config_hash == cfg.config_hash);
    std::string tweaked = std::string(kMinimal) + "\n# trailing comment\n";
    CHECK(ExperimentConfig::parse_text(tweaked, "t").config_hash != cfg.config_hash);
}

TEST_CASE("unknown keys and sections are named with line numbers") {
    std::string bad = std::string(kMinimal) + "\n[dataset]\nbananas = 7\n";
    CHECK_THROWS_WITH_AS(ExperimentConfig::parse_text(bad, "b"),
                         doctest::Contains("bananas"), ConfigError);
    std::string bad_section = std::string(kMinimal) + "\n[fruit]\n";
    CHECK_THROWS_WITH_AS(ExperimentConfig::parse_text(bad_section, "b"),
                         doctest::Contains("fruit"), ConfigError);
    std::string bad_value = std::string(kMinimal) + "\n[mhgd]\nheads = many\n";
    CHECK_THROWS_WITH_AS(ExperimentConfig::parse_text(bad_value, "b"),
                         doctest::Contains("integer"), ConfigError);
    CHECK_THROWS_AS(ExperimentConfig::parse_text("x = 1\n", "b"), ConfigError);
}

TEST_CASE("validation rejects inconsistent configs") {
    {
        std::string text(kMinimal);
        text += "\n[run]\nseeds =\n";
        CHECK_THROWS_AS(ExperimentConfig::parse_text(text, "v"), ConfigError);
    }
    {
        std::string text(kMinimal);
        text += "\n[mhgd]\nheads = 0\n";
        CHECK_THROWS_AS(ExperimentConfig::parse_text(text, "v"), ConfigError);
    }
    {
        std::string text(kMinimal);
        text += "\n[run]\nmethods = telepathy\n";
        CHECK_THROWS_WITH_AS(ExperimentConfig::parse_text(text, "v"),
                             doctest::Contains("telepathy"), ConfigError);
    }
    {
        std::string text(kMinimal);
        text += "\n[dataset]\nsource = cifar100\n";
        CHECK_THROWS_AS(ExperimentConfig::parse_text(text, "v"), ConfigError);
    }
}

TEST_CASE("shipped configs encode the published schedules") {
    auto vgg = ExperimentConfig::parse_file("configs/paper_vgg_cifar100.ini");
    CHECK(vgg.teacher_train.epochs == 200);
    CHECK(vgg.teacher_train.batch == 128);
    CHECK(vgg.teacher_train.weight_decay == doctest::Approx(5e-4));
    CHECK(lr_at_epoch(vgg.teacher_train.schedule, 0) == doctest::Approx(0.01));
    CHECK(lr_at_epoch(vgg.teacher_train.schedule, 120) ==
          doctest::Approx(0.001).epsilon(1e-12));
    CHECK(vgg.mhan_train.epochs == 20);
    CHECK(lr_at_epoch(vgg.mhan_train.schedule, 10) == doctest::Approx(0.1));
    CHECK(vgg.mhgd.heads == 8);

    auto wrn = ExperimentConfig::parse_file("configs/paper_wresnet_cifar100.ini");
    CHECK(lr_at_epoch(wrn.teacher_train.schedule, 130) ==
          doctest::Approx(0.004).epsilon(1e-12));
    // Student epochs are half the teacher's.
    CHECK(wrn.student_train.epochs * 2 == wrn.teacher_train.epochs);

    auto desk = ExperimentConfig::parse_file("configs/desk.ini");
    CHECK(desk.dataset.train_count == 2048);
    CHECK(desk.dataset.test_count == 512);
    CHECK(desk.dataset.image_size == 16);
    CHECK(desk.teacher_train.epochs == 30);
    CHECK(desk.mhan_train.epochs == 5);
    CHECK(lr_at_epoch(desk.mhan_train.schedule, 0) == doctest::Approx(0.1));
}

TEST_CASE("cifar config needs its files only when the dataset loads") {
    std::string text(kMinimal);
    text += "\n[dataset]\nsource = cifar100\npath = /nonexistent/train.bin\n"
            "eval_path = /nonexistent/test.bin\n";
    auto cfg = ExperimentConfig::parse_text(text, "c");  // parse succeeds
    CHECK_THROWS_WITH_AS(cfg.load_dataset(), doctest::Contains("does not exist"),
                         ConfigError);
}
