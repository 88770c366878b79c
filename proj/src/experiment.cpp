// Copyright (c) 2026 the mhgd authors
// SPDX-License-Identifier: Apache-2.0

#include "mhgd/experiment.hpp"

#include <sys/wait.h>
#include <unistd.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

namespace mhgd {

namespace fs = std::filesystem;

StageMask StageMask::parse(const std::string& stage) {
    StageMask mask{false, false, false};
    if (stage == "all" || stage.empty()) {
        mask.teacher = mask.mhan = mask.student = true;
    } else if (stage == "teacher") {
        mask.teacher = true;
    } else if (stage == "mhan") {
        mask.mhan = true;
    } else if (stage == "student") {
        mask.student = true;
    } else {
        throw ConfigError("unknown stage '" + stage +
                          "' (expected teacher|mhan|student|all)");
    }
    return mask;
}

SeedPaths SeedPaths::at(const std::string& out_dir, std::uint64_t seed) {
    SeedPaths p;
    p.dir = out_dir + "/seed_" + std::to_string(seed);
    p.teacher_ckpt = p.dir + "/teacher.ckpt";
    p.teacher_csv = p.dir + "/teacher_metrics.csv";
    p.teacher_meta = p.dir + "/teacher_meta.json";
    p.mhan_ckpt = p.dir + "/mhan.ckpt";
    p.mhan_csv = p.dir + "/mhan_metrics.csv";
    p.mhan_meta = p.dir + "/mhan_meta.json";
    return p;
}

std::string SeedPaths::student_ckpt(const std::string& method) const {
    return dir + "/student_" + method + ".ckpt";
}
std::string SeedPaths::student_csv(const std::string& method) const {
    return dir + "/student_" + method + "_metrics.csv";
}
std::string SeedPaths::student_meta(const std::string& method) const {
    return dir + "/student_" + method + "_meta.json";
}

namespace {

void run_seed(const ExperimentConfig& cfg, const StageMask& stages,
              const std::vector<std::string>& methods, std::uint64_t seed,
              const Dataset& data, std::ostream& log) {
    const SeedPaths paths = SeedPaths::at(cfg.out_dir, seed);
    fs::create_directories(paths.dir);

    if (stages.teacher) {
        log << "[seed " << seed << "] training teacher ("
            << cfg.teacher_train.epochs << " epochs)\n";
        auto result = train_teacher(cfg.teacher_spec(), data, cfg.teacher_hyper(), seed);
        result.checkpoint.save(paths.teacher_ckpt);
        result.metrics.save_csv(paths.teacher_csv);
        result.metrics.save_meta(paths.teacher_meta);
    }

    const bool wants_mhgd =
        std::find(methods.begin(), methods.end(), "mhgd") != methods.end();

    if (stages.mhan) {
        if (!fs::exists(paths.teacher_ckpt)) {
            throw ConfigError("stage mhan: missing teacher checkpoint '" +
                              paths.teacher_ckpt + "'");
        }
        log << "[seed " << seed << "] fitting attention stack ("
            << cfg.mhan_train.epochs << " epochs)\n";
        auto teacher = Checkpoint::load(paths.teacher_ckpt);
        auto result =
            train_mhan(cfg.teacher_spec(), teacher, cfg.mhgd, data, cfg.mhan_hyper(), seed);
        result.checkpoint.save(paths.mhan_ckpt);
        result.metrics.save_csv(paths.mhan_csv);
        result.metrics.save_meta(paths.mhan_meta);
    }

    if (stages.student) {
        if (!fs::exists(paths.teacher_ckpt)) {
            throw ConfigError("stage student: missing teacher checkpoint '" +
                              paths.teacher_ckpt + "'");
        }
        auto teacher = Checkpoint::load(paths.teacher_ckpt);
        Checkpoint mhan;
        bool have_mhan = false;
        if (wants_mhgd) {
            if (!fs::exists(paths.mhan_ckpt)) {
                throw ConfigError("stage student: method mhgd needs '" +
                                  paths.mhan_ckpt + "'");
            }
            mhan = Checkpoint::load(paths.mhan_ckpt);
            have_mhan = true;
        }
        for (const auto& name : methods) {
            const Method method = parse_method(name);
            log << "[seed " << seed << "] training student method=" << name << " ("
                << cfg.student_train.epochs << " epochs)\n";
            auto result = train_student(cfg.teacher_spec(), teacher, cfg.mhgd,
                                        method == Method::Mhgd && have_mhan ? &mhan
                                                                            : nullptr,
                                        cfg.student_spec(), data, cfg.student_hyper(),
                                        method, seed);
            result.checkpoint.save(paths.student_ckpt(name));
            result.metrics.save_csv(paths.student_csv(name));
            result.metrics.save_meta(paths.student_meta(name));
        }
    }
}

double final_test_accuracy(const RunMetrics& metrics) {
    double acc = 0.0;
    int best_epoch = -1;
    for (const auto& r : metrics.records) {
        if (r.split == "test" && r.epoch > best_epoch) {
            best_epoch = r.epoch;
            acc = r.accuracy;
        }
    }
    return acc;
}

double final_transfer(const RunMetrics& metrics) {
    double v = 0.0;
    int best_epoch = -1;
    for (const auto& r : metrics.records) {
        if (r.split == "train" && r.epoch > best_epoch) {
            best_epoch = r.epoch;
            v = r.loss_transfer;
        }
    }
    return v;
}

void mean_std(const std::vector<double>& xs, double& mean, double& sd) {
    mean = 0.0;
    sd = 0.0;
    if (xs.empty()) return;
    for (double x : xs) mean += x;
    mean /= double(xs.size());
    for (double x : xs) sd += (x - mean) * (x - mean);
    sd = xs.size() > 1 ? std::sqrt(sd / double(xs.size() - 1)) : 0.0;
}

}  // namespace

std::vector<MethodSummary> run_experiment(const ExperimentConfig& cfg,
                                          const StageMask& stages,
                                          const std::vector<std::string>& methods,
                                          bool parallel_seeds, std::ostream& log) {
    for (const auto& m : methods) parse_method(m);
    fs::create_directories(cfg.out_dir);
    const Dataset data = cfg.load_dataset();

    if (parallel_seeds && cfg.seeds.size() > 1) {
        std::vector<pid_t> children;
        for (std::uint64_t seed : cfg.seeds) {
            const pid_t pid = fork();
            if (pid < 0) throw Error("run: fork failed");
            if (pid == 0) {
                try {
                    run_seed(cfg, stages, methods, seed, data, std::cerr);
                    _exit(0);
                } catch (const std::exception& e) {
                    std::cerr << "[seed " << seed << "] failed: " << e.what() << "\n";
                    _exit(1);
                }
            }
            children.push_back(pid);
        }
        bool failed = false;
        for (pid_t pid : children) {
            int status = 0;
            waitpid(pid, &status, 0);
            if (!WIFEXITED(status) || WEXITSTATUS(status) != 0) failed = true;
        }
        if (failed) throw TrainingAbort("run: one or more seed workers failed");
    } else {
        for (std::uint64_t seed : cfg.seeds) {
            run_seed(cfg, stages, methods, seed, data, log);
        }
    }

    // Summarize from the artifacts on disk so both execution modes agree.
    std::vector<MethodSummary> summaries;
    if (stages.student) {
        for (const auto& name : methods) {
            MethodSummary s;
            s.method = name;
            std::vector<double> accs, transfers;
            for (std::uint64_t seed : cfg.seeds) {
                const SeedPaths paths = SeedPaths::at(cfg.out_dir, seed);
                auto metrics =
                    RunMetrics::load(paths.student_csv(name), paths.student_meta(name));
                accs.push_back(final_test_accuracy(metrics));
                transfers.push_back(final_transfer(metrics));
            }
            s.runs = int(accs.size());
            mean_std(accs, s.acc_mean, s.acc_std);
            double tmean = 0.0, tsd = 0.0;
            mean_std(transfers, tmean, tsd);
            s.transfer_final_mean = tmean;
            summaries.push_back(s);
        }

        std::ofstream csv(cfg.out_dir + "/summary.csv");
        csv << "method,runs,final_acc_mean,final_acc_std,final_transfer_mean\n";
        std::ostringstream table;
        table << "method        runs  acc_mean  acc_std\n";
        for (const auto& s : summaries) {
            csv << s.method << ',' << s.runs << ',' << s.acc_mean << ',' << s.acc_std
                << ',' << s.transfer_final_mean << '\n';
            char buf[128];
            std::snprintf(buf, sizeof(buf), "%-13s %4d  %8.2f  %7.2f\n",
                          s.method.c_str(), s.runs, s.acc_mean, s.acc_std);
            table << buf;
        }
        std::ofstream txt(cfg.out_dir + "/summary.txt");
        txt << table.str();
        log << table.str();
    }
    return summaries;
}

std::vector<AblationRow> ablate_heads(const ExperimentConfig& cfg,
                                      const std::vector<std::size_t>& head_counts,
                                      std::ostream& log) {
    if (head_counts.empty()) {
        throw ConfigError("ablation: head list must be non-empty");
    }
    fs::create_directories(cfg.out_dir);
    const Dataset data = cfg.load_dataset();

    // One teacher per seed, shared across head counts.
    for (std::uint64_t seed : cfg.seeds) {
        const SeedPaths paths = SeedPaths::at(cfg.out_dir, seed);
        if (!fs::exists(paths.teacher_ckpt)) {
            fs::create_directories(paths.dir);
            log << "[seed " << seed << "] training shared teacher\n";
            auto result =
                train_teacher(cfg.teacher_spec(), data, cfg.teacher_hyper(), seed);
            result.checkpoint.save(paths.teacher_ckpt);
            result.metrics.save_csv(paths.teacher_csv);
            result.metrics.save_meta(paths.teacher_meta);
        }
    }

    std::vector<AblationRow> rows;
    for (std::size_t heads : head_counts) {
        ExperimentConfig sub = cfg;
        sub.mhgd.heads = heads;
        sub.out_dir = cfg.out_dir + "/abl_heads_" + std::to_string(heads);
        fs::create_directories(sub.out_dir);

        std::vector<double> accs;
        for (std::uint64_t seed : cfg.seeds) {
            const SeedPaths shared = SeedPaths::at(cfg.out_dir, seed);
            const SeedPaths paths = SeedPaths::at(sub.out_dir, seed);
            fs::create_directories(paths.dir);
            auto teacher = Checkpoint::load(shared.teacher_ckpt);

            log << "[heads " << heads << ", seed " << seed << "] mhan + student\n";
            auto mhan = train_mhan(sub.teacher_spec(), teacher, sub.mhgd, data,
                                   sub.mhan_hyper(), seed);
            mhan.checkpoint.save(paths.mhan_ckpt);
            mhan.metrics.save_csv(paths.mhan_csv);
            mhan.metrics.save_meta(paths.mhan_meta);

            auto student = train_student(sub.teacher_spec(), teacher, sub.mhgd,
                                         &mhan.checkpoint, sub.student_spec(), data,
                                         sub.student_hyper(), Method::Mhgd, seed);
            student.checkpoint.save(paths.student_ckpt("mhgd"));
            student.metrics.save_csv(paths.student_csv("mhgd"));
            student.metrics.save_meta(paths.student_meta("mhgd"));
            accs.push_back(final_test_accuracy(student.metrics));
        }
        AblationRow row;
        row.heads = heads;
        row.runs = int(accs.size());
        mean_std(accs, row.acc_mean, row.acc_std);
        rows.push_back(row);
    }

    std::ofstream csv(cfg.out_dir + "/ablation.csv");
    csv << "heads,runs,final_acc_mean,final_acc_std\n";
    std::ostringstream table;
    table << "heads  runs  acc_mean  acc_std\n";
    for (const auto& r : rows) {
        csv << r.heads << ',' << r.runs << ',' << r.acc_mean << ',' << r.acc_std
            << '\n';
        char buf[96];
        std::snprintf(buf, sizeof(buf), "%5zu  %4d  %8.2f  %7.2f\n", r.heads, r.runs,
                      r.acc_mean, r.acc_std);
        table << buf;
    }
    std::ofstream txt(cfg.out_dir + "/ablation.txt");
    txt << table.str();
    log << table.str();
    return rows;
}

}  // namespace mhgd
