// Copyright (c) 2026 the mhgd authors
// SPDX-License-Identifier: Apache-2.0
//
// End-to-end CLI checks through the real binary: exit codes, artifacts, and
// the stage pipeline on a miniature config.

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>

using namespace std;
namespace fs = std::filesystem;

namespace {

int run_cli(const string& args) {
    const string cmd = string(MHGD_CLI_PATH) + " " + args + " >/tmp/mhgd_cli_out.log 2>&1";
    const int status = std::system(cmd.c_str());
    return WEXITSTATUS(status);
}

string cli_output() {
    ifstream in("/tmp/mhgd_cli_out.log");
    return string((istreambuf_iterator<char>(in)), istreambuf_iterator<char>());
}

const char* kTinyConfig = R"(
[dataset]
source = synthetic
classes = 3
train_count = 96
test_count = 48
image_size = 16
seed = 77
pad = 2

[teacher]
blocks = 2,2
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
est_dim = 16

[teacher_train]
epochs = 2
batch = 32
lr = 0.05

[mhan_train]
epochs = 2
batch = 32
lr = 0.1

[student_train]
epochs = 2
batch = 32
lr = 0.05

[run]
seeds = 1,2
methods = student,mhgd
out_dir = /tmp/mhgd_cli_run
)";

struct ConfigFile {
    string path = "/tmp/mhgd_cli_tiny.ini";
    ConfigFile() {
        ofstream out(path);
        out << kTinyConfig;
    }
};

}  // namespace

TEST_CASE("usage errors exit 2") {
    CHECK(run_cli("definitely-not-a-command") == 2);
    CHECK(run_cli("run") == 2);                       // missing --config
    CHECK(run_cli("gradcheck bogus") == 2);           // unknown scope
    CHECK(run_cli("run --config /nope/missing.ini") == 2);
}

TEST_CASE("config errors exit 2 and name the offender") {
    const string path = "/tmp/mhgd_cli_bad.ini";
    {
        ofstream out(path);
        out << kTinyConfig << "\n[dataset]\nwhatsthis = 1\n";
    }
    CHECK(run_cli("run --config " + path) == 2);
    CHECK(cli_output().find("whatsthis") != string::npos);
}

TEST_CASE("gradcheck subcommand passes for single scopes") {
    CHECK(run_cli("gradcheck softmax_rows") == 0);
    const string out = cli_output();
    CHECK(out.find("softmax_rows") != string::npos);
    CHECK(out.find("pass") != string::npos);
    CHECK(run_cli("gradcheck matmul") == 0);
}

TEST_CASE("full pipeline produces the artifact manifest") {
    ConfigFile cfg;
    fs::remove_all("/tmp/mhgd_cli_run");
    REQUIRE(run_cli("run --config " + cfg.path) == 0);
    for (const string seed : {"1", "2"}) {
        const string dir = "/tmp/mhgd_cli_run/seed_" + seed;
        CHECK(fs::exists(dir + "/teacher.ckpt"));
        CHECK(fs::exists(dir + "/teacher_metrics.csv"));
        CHECK(fs::exists(dir + "/mhan.ckpt"));
        CHECK(fs::exists(dir + "/student_student.ckpt"));
        CHECK(fs::exists(dir + "/student_mhgd.ckpt"));
        CHECK(fs::exists(dir + "/student_mhgd_metrics.csv"));
        CHECK(fs::exists(dir + "/student_mhgd_meta.json"));
    }
    CHECK(fs::exists("/tmp/mhgd_cli_run/summary.csv"));
    {
        ifstream in("/tmp/mhgd_cli_run/summary.csv");
        string text((istreambuf_iterator<char>(in)), istreambuf_iterator<char>());
        CHECK(text.find("student") != string::npos);
        CHECK(text.find("mhgd") != string::npos);
    }

    // Report over the finished run.
    CHECK(run_cli("report /tmp/mhgd_cli_run") == 0);
    CHECK(fs::exists("/tmp/mhgd_cli_run/report.svg"));

    // Stage gating: a student-only rerun against existing checkpoints.
    CHECK(run_cli("run --config " + cfg.path + " --stage student --method student") ==
          0);

    // Runtime failures (missing prerequisite) exit 2 as config errors.
    fs::remove_all("/tmp/mhgd_cli_run/seed_1/mhan.ckpt");
    CHECK(run_cli("run --config " + cfg.path + " --stage student --method mhgd") ==
          2);
    fs::remove_all("/tmp/mhgd_cli_run");
}

TEST_CASE("parallel seed workers produce the same artifacts") {
    ConfigFile cfg;
    fs::remove_all("/tmp/mhgd_cli_run");
    REQUIRE(run_cli("run --config " + cfg.path + " --stage teacher") == 0);
    auto read = [](const string& p) {
        ifstream in(p, ios::binary);
        return string((istreambuf_iterator<char>(in)), istreambuf_iterator<char>());
    };
    const string sequential = read("/tmp/mhgd_cli_run/seed_1/teacher.ckpt");
    fs::remove_all("/tmp/mhgd_cli_run");
    REQUIRE(run_cli("run --config " + cfg.path +
                    " --stage teacher --parallel-seeds") == 0);
    CHECK(read("/tmp/mhgd_cli_run/seed_1/teacher.ckpt") == sequential);
    fs::remove_all("/tmp/mhgd_cli_run");
}

TEST_CASE("report without metrics exits 1") {
    fs::remove_all("/tmp/mhgd_cli_norun");
    fs::create_directories("/tmp/mhgd_cli_norun");
    CHECK(run_cli("report /tmp/mhgd_cli_norun") == 1);
    fs::remove_all("/tmp/mhgd_cli_norun");
}
