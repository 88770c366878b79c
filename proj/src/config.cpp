// Copyright (c) 2026 the mhgd authors
// SPDX-License-Identifier: Apache-2.0

#include "mhgd/config.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace mhgd {

namespace {

std::string trim(const std::string& s) {
    std::size_t a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    std::size_t b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

std::vector<std::string> split(const std::string& s, char sep) {
    std::vector<std::string> parts;
    std::istringstream in(s);
    std::string part;
    while (std::getline(in, part, sep)) parts.push_back(trim(part));
    if (!parts.empty() && parts.back().empty()) parts.pop_back();
    return parts;
}

[[noreturn]] void fail(int line, const std::string& msg) {
    throw ConfigError("config line " + std::to_string(line) + ": " + msg);
}

long to_int(const std::string& v, int line) {
    try {
        std::size_t used = 0;
        long out = std::stol(v, &used);
        if (used != v.size()) throw std::invalid_argument(v);
        return out;
    } catch (const std::exception&) {
        fail(line, "expected an integer, got '" + v + "'");
    }
}

double to_double(const std::string& v, int line) {
    try {
        std::size_t used = 0;
        double out = std::stod(v, &used);
        if (used != v.size()) throw std::invalid_argument(v);
        return out;
    } catch (const std::exception&) {
        fail(line, "expected a number, got '" + v + "'");
    }
}

bool to_bool(const std::string& v, int line) {
    if (v == "true" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "no") return false;
    fail(line, "expected a boolean, got '" + v + "'");
}

std::vector<int> to_int_list(const std::string& v, int line) {
    std::vector<int> out;
    for (const auto& part : split(v, ',')) out.push_back(int(to_int(part, line)));
    return out;
}

Family to_family(const std::string& v, int line) {
    if (v == "vgg") return Family::VggSmall;
    if (v == "wrn") return Family::WrnSmall;
    fail(line, "unknown family '" + v + "' (expected vgg|wrn)");
}

// "epoch:multiplier,epoch:multiplier"
std::vector<std::pair<int, double>> to_milestones(const std::string& v, int line) {
    std::vector<std::pair<int, double>> out;
    if (trim(v).empty()) return out;
    for (const auto& part : split(v, ',')) {
        const auto colon = part.find(':');
        if (colon == std::string::npos) {
            fail(line, "milestone '" + part + "' must be epoch:multiplier");
        }
        out.push_back({int(to_int(trim(part.substr(0, colon)), line)),
                       to_double(trim(part.substr(colon + 1)), line)});
    }
    return out;
}

void apply_stage_key(StageConfig& stage, const std::string& key,
                     const std::string& value, int line, bool allow_temp) {
    if (key == "epochs") {
        stage.epochs = int(to_int(value, line));
    } else if (key == "batch") {
        stage.batch = std::size_t(to_int(value, line));
    } else if (key == "lr") {
        stage.schedule.initial = to_double(value, line);
    } else if (key == "milestones") {
        stage.schedule.milestones = to_milestones(value, line);
    } else if (key == "momentum") {
        stage.momentum = to_double(value, line);
    } else if (key == "weight_decay") {
        stage.weight_decay = to_double(value, line);
    } else if (key == "temperature" && allow_temp) {
        stage.temperature = to_double(value, line);
    } else {
        fail(line, "unknown key '" + key + "'");
    }
}

}  // namespace

ExperimentConfig ExperimentConfig::parse_text(const std::string& text,
                                              const std::string& name) {
    ExperimentConfig cfg;
    cfg.source_name = name;
    cfg.config_hash = to_hex(fnv1a64(text.data(), text.size()));

    std::istringstream in(text);
    std::string raw;
    std::string section;
    int line_no = 0;
    while (std::getline(in, raw)) {
        ++line_no;
        std::string line = raw;
        const auto comment = line.find_first_of("#;");
        if (comment != std::string::npos) line = line.substr(0, comment);
        line = trim(line);
        if (line.empty()) continue;
        if (line.front() == '[') {
            if (line.back() != ']') fail(line_no, "unterminated section header");
            section = trim(line.substr(1, line.size() - 2));
            const char* known[] = {"dataset",       "teacher",     "student",
                                   "sensing",       "mhgd",        "teacher_train",
                                   "mhan_train",    "student_train", "run"};
            if (std::find(std::begin(known), std::end(known), section) ==
                std::end(known)) {
                fail(line_no, "unknown section '" + section + "'");
            }
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos) fail(line_no, "expected key = value");
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        if (section.empty()) fail(line_no, "key before any section");

        if (section == "dataset") {
            if (key == "source") cfg.dataset.source = value;
            else if (key == "classes") cfg.dataset.classes = int(to_int(value, line_no));
            else if (key == "train_count") cfg.dataset.train_count = std::size_t(to_int(value, line_no));
            else if (key == "test_count") cfg.dataset.test_count = std::size_t(to_int(value, line_no));
            else if (key == "image_size") cfg.dataset.image_size = std::size_t(to_int(value, line_no));
            else if (key == "seed") cfg.dataset.seed = std::uint64_t(to_int(value, line_no));
            else if (key == "path") cfg.dataset.path = value;
            else if (key == "eval_path") cfg.dataset.eval_path = value;
            else if (key == "variant") cfg.dataset.variant = value;
            else if (key == "pad") cfg.dataset.pad = int(to_int(value, line_no));
            else if (key == "flip") cfg.dataset.flip = to_bool(value, line_no);
            else fail(line_no, "unknown key '" + key + "'");
        } else if (section == "teacher") {
            if (key == "family") cfg.teacher_family = to_family(value, line_no);
            else if (key == "blocks") cfg.teacher_blocks = to_int_list(value, line_no);
            else if (key == "widths") cfg.teacher_widths = to_int_list(value, line_no);
            else fail(line_no, "unknown key '" + key + "'");
        } else if (section == "student") {
            if (key == "family") cfg.student_family = to_family(value, line_no);
            else if (key == "blocks") cfg.student_blocks = to_int_list(value, line_no);
            else if (key == "widths") cfg.student_widths = to_int_list(value, line_no);
            else fail(line_no, "unknown key '" + key + "'");
        } else if (section == "sensing") {
            if (key == "blocks") cfg.sensing_blocks = to_int_list(value, line_no);
            else fail(line_no, "unknown key '" + key + "'");
        } else if (section == "mhgd") {
            if (key == "heads") cfg.mhgd.heads = std::size_t(to_int(value, line_no));
            else if (key == "rank") cfg.mhgd.rank = std::size_t(to_int(value, line_no));
            else if (key == "att_dim") cfg.mhgd.att_dim = std::size_t(to_int(value, line_no));
            else if (key == "est_dim") cfg.mhgd.est_dim = std::size_t(to_int(value, line_no));
            else if (key == "lambda") cfg.lambda = to_double(value, line_no);
            else fail(line_no, "unknown key '" + key + "'");
        } else if (section == "teacher_train") {
            apply_stage_key(cfg.teacher_train, key, value, line_no, false);
        } else if (section == "mhan_train") {
            apply_stage_key(cfg.mhan_train, key, value, line_no, false);
        } else if (section == "student_train") {
            apply_stage_key(cfg.student_train, key, value, line_no, true);
        } else if (section == "run") {
            if (key == "seeds") {
                cfg.seeds.clear();
                for (int s : to_int_list(value, line_no))
                    cfg.seeds.push_back(std::uint64_t(s));
            } else if (key == "methods") {
                cfg.methods = split(value, ',');
            } else if (key == "out_dir") {
                cfg.out_dir = value;
            } else {
                fail(line_no, "unknown key '" + key + "'");
            }
        }
    }
    cfg.validate();
    return cfg;
}

ExperimentConfig ExperimentConfig::parse_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("config: cannot open '" + path + "'");
    std::string text((std::istreambuf_iterator<char>(in)),
                     std::istreambuf_iterator<char>());
    return parse_text(text, path);
}

void ExperimentConfig::validate() const {
    if (mhgd.heads < 1) throw ConfigError("config: mhgd heads must be >= 1");
    if (mhgd.rank < 1) throw ConfigError("config: mhgd rank must be >= 1");
    if (seeds.empty()) throw ConfigError("config: seeds must be non-empty");
    if (methods.empty()) throw ConfigError("config: methods must be non-empty");
    for (const auto& m : methods) parse_method(m);
    if (dataset.source != "synthetic" && dataset.source != "cifar100") {
        throw ConfigError("config: dataset source must be synthetic or cifar100");
    }
    if (dataset.source == "cifar100" &&
        (dataset.path.empty() || dataset.eval_path.empty())) {
        throw ConfigError("config: cifar100 needs path and eval_path");
    }
    teacher_spec().validate();
    student_spec().validate();
    teacher_train.schedule.validate();
    mhan_train.schedule.validate();
    student_train.schedule.validate();
    if (student_train.temperature <= 0.0) {
        throw ConfigError("config: temperature must be positive");
    }
}

NetworkSpec ExperimentConfig::teacher_spec() const {
    NetworkSpec spec;
    spec.family = teacher_family;
    spec.blocks = teacher_blocks;
    spec.widths = teacher_widths;
    spec.input_h = spec.input_w =
        dataset.source == "cifar100" ? 32 : dataset.image_size;
    spec.input_c = 3;
    spec.classes = dataset.source == "cifar100"
                       ? (dataset.variant == "coarse" ? 20 : 100)
                       : dataset.classes;
    spec.role = Role::Teacher;
    spec.sensing_blocks = sensing_blocks;
    return spec;
}

NetworkSpec ExperimentConfig::student_spec() const {
    NetworkSpec spec = teacher_spec();
    spec.family = student_family;
    spec.blocks = student_blocks;
    spec.widths = student_widths;
    spec.role = Role::Student;
    return spec;
}

Dataset ExperimentConfig::load_dataset() const {
    Dataset data;
    if (dataset.source == "cifar100") {
        // Referenced files are checked when a run actually needs them, so
        // paper-scale configs stay parseable without the data present.
        for (const auto& p : {dataset.path, dataset.eval_path}) {
            if (!std::filesystem::exists(p)) {
                throw ConfigError("config: dataset file '" + p + "' does not exist");
            }
        }
        const auto variant = dataset.variant == "coarse" ? CifarVariant::Coarse
                                                         : CifarVariant::Fine100;
        data.train = load_cifar_binary(dataset.path, variant);
        data.train.split = "train";
        data.test = load_cifar_binary(dataset.eval_path, variant);
        data.test.split = "test";
    } else {
        data.train = generate_synthetic(dataset.classes, dataset.train_count,
                                        dataset.image_size, dataset.seed, "train");
        data.test = generate_synthetic(dataset.classes, dataset.test_count,
                                       dataset.image_size, dataset.seed + 1, "test");
    }
    data.aug.pad = dataset.pad;
    data.aug.flip = dataset.flip;
    return data;
}

namespace {
TrainHyper stage_hyper(const StageConfig& stage, const std::string& hash,
                       double lambda, double tau) {
    TrainHyper h;
    h.epochs = stage.epochs;
    h.batch = stage.batch;
    h.schedule = stage.schedule;
    h.momentum = stage.momentum;
    h.weight_decay = stage.weight_decay;
    h.lambda = lambda;
    h.tau = tau;
    h.config_hash = hash;
    return h;
}
}  // namespace

TrainHyper ExperimentConfig::teacher_hyper() const {
    return stage_hyper(teacher_train, config_hash, lambda, student_train.temperature);
}
TrainHyper ExperimentConfig::mhan_hyper() const {
    return stage_hyper(mhan_train, config_hash, lambda, student_train.temperature);
}
TrainHyper ExperimentConfig::student_hyper() const {
    return stage_hyper(student_train, config_hash, lambda, student_train.temperature);
}

}  // namespace mhgd
