// Copyright (c) 2026 the mhgd authors
// SPDX-License-Identifier: Apache-2.0
//
// Command-line front end. Exit codes: 0 success, 1 runtime failure,
// 2 usage or configuration error.

#include <CLI11.hpp>

#include <cstdio>
#include <iostream>
#include <string>
#include <vector>

#include "mhgd/config.hpp"
#include "mhgd/experiment.hpp"
#include "mhgd/gradcheck_suites.hpp"
#include "mhgd/report.hpp"
#include "mhgd/version.hpp"

namespace {

struct CommonArgs {
    std::string config_path;
    std::vector<std::uint64_t> seeds;
    std::string out_dir;
    std::string method;
    bool parallel_seeds = false;
};

mhgd::ExperimentConfig load_config(const CommonArgs& args) {
    auto cfg = mhgd::ExperimentConfig::parse_file(args.config_path);
    if (!args.seeds.empty()) cfg.seeds = args.seeds;
    if (!args.out_dir.empty()) cfg.out_dir = args.out_dir;
    return cfg;
}

std::vector<std::string> pick_methods(const mhgd::ExperimentConfig& cfg,
                                      const std::string& flag) {
    if (flag.empty()) return cfg.methods;
    mhgd::parse_method(flag);
    return {flag};
}

void add_common(CLI::App* cmd, CommonArgs& args, bool needs_method) {
    cmd->add_option("--config", args.config_path, "experiment config file")
        ->required();
    cmd->add_option("--seed", args.seeds, "override the config seed list");
    cmd->add_option("--out-dir", args.out_dir, "override the output directory");
    cmd->add_flag("--parallel-seeds", args.parallel_seeds,
                  "run seeds as parallel worker processes");
    if (needs_method) {
        cmd->add_option("--method", args.method,
                        "transfer method (student|soft-logits|kd-svdf|mhgd)");
    }
}

int run_gradcheck(const std::string& scope) {
    std::vector<std::string> scopes;
    if (scope == "all" || scope.empty()) {
        scopes = mhgd::gradcheck_scope_names();
    } else {
        if (!mhgd::gradcheck_scope_known(scope)) {
            throw mhgd::ConfigError("gradcheck: unknown scope '" + scope + "'");
        }
        scopes = {scope};
    }
    bool all_pass = true;
    for (const auto& name : scopes) {
        auto result = mhgd::run_gradcheck_scope(name);
        all_pass = all_pass && result.pass();
        std::printf("%-20s max rel err %.3e  (threshold %.0e)  %s\n", name.c_str(),
                    result.max_rel_err, result.threshold,
                    result.pass() ? "pass" : "FAIL");
    }
    return all_pass ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"multi-head graph distillation workbench"};
    app.set_version_flag("--version", mhgd::version());
    app.require_subcommand(1);

    CommonArgs args;
    std::string stage = "all";
    std::string gradcheck_scope = "all";
    std::string report_dir;
    bool report_force = false;
    std::vector<std::size_t> head_list{1, 2, 4, 8};

    CLI::App* train_teacher = app.add_subcommand("train-teacher", "train teachers");
    add_common(train_teacher, args, false);
    CLI::App* train_mhan =
        app.add_subcommand("train-mhan", "fit the attention stack on a teacher");
    add_common(train_mhan, args, false);
    CLI::App* train_student =
        app.add_subcommand("train-student", "train students with a transfer method");
    add_common(train_student, args, true);
    CLI::App* run = app.add_subcommand("run", "run pipeline stages over all seeds");
    add_common(run, args, true);
    run->add_option("--stage", stage, "teacher|mhan|student|all (default all)");
    CLI::App* ablate =
        app.add_subcommand("ablate-heads", "repeat mhan+student per head count");
    add_common(ablate, args, false);
    ablate->add_option("--heads", head_list, "head counts (default 1 2 4 8)");
    CLI::App* gradcheck = app.add_subcommand(
        "gradcheck", "finite-difference verification of gradients");
    gradcheck->add_option("scope", gradcheck_scope,
                          "op name, 'pipeline', or 'all' (default)");
    CLI::App* report =
        app.add_subcommand("report", "emit comparison table and accuracy chart");
    report->add_option("dir", report_dir, "run directory")->required();
    report->add_flag("--force", report_force, "allow mixed config hashes");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForVersion& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << e.what() << "\n";
        return 2;
    }

    try {
        if (gradcheck->parsed()) {
            return run_gradcheck(gradcheck_scope);
        }
        if (report->parsed()) {
            mhgd::emit_report(report_dir, report_force, std::cout);
            return 0;
        }

        auto cfg = load_config(args);
        mhgd::StageMask stages;
        std::vector<std::string> methods = pick_methods(cfg, args.method);
        if (train_teacher->parsed()) {
            stages = mhgd::StageMask::parse("teacher");
        } else if (train_mhan->parsed()) {
            stages = mhgd::StageMask::parse("mhan");
        } else if (train_student->parsed()) {
            stages = mhgd::StageMask::parse("student");
        } else if (run->parsed()) {
            stages = mhgd::StageMask::parse(stage);
        } else if (ablate->parsed()) {
            mhgd::ablate_heads(cfg, head_list, std::cout);
            return 0;
        }
        mhgd::run_experiment(cfg, stages, methods, args.parallel_seeds, std::cout);
        return 0;
    } catch (const mhgd::ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
