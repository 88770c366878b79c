// Copyright (c) 2026 the mhgd authors
// SPDX-License-Identifier: Apache-2.0

#include "mhgd/train.hpp"

#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <iostream>
#include <sstream>

#include "mhgd/ops.hpp"
#include "mhgd/optim.hpp"

namespace mhgd {

// ----------------------------------------------------------------------------
// Schedule

void LrSchedule::validate() const {
    if (initial <= 0.0) throw ConfigError("lr schedule: initial rate must be > 0");
    int prev = -1;
    for (const auto& [epoch, mult] : milestones) {
        if (epoch <= prev) {
            throw ConfigError("lr schedule: milestones must be strictly increasing");
        }
        if (mult <= 0.0) {
            throw ConfigError("lr schedule: multipliers must be positive");
        }
        prev = epoch;
    }
}

double lr_at_epoch(const LrSchedule& sched, int epoch) {
    double rate = sched.initial;
    for (const auto& [milestone, mult] : sched.milestones) {
        if (milestone <= epoch) rate *= mult;
    }
    return rate;
}

// ----------------------------------------------------------------------------
// Metrics

namespace {

std::string fmt_double(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.9g", v);
    return buf;
}

}  // namespace

void RunMetrics::save_csv(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw Error("metrics: cannot write '" + path + "'");
    out << "epoch,split,loss_target,loss_transfer,accuracy,lr,seconds\n";
    for (const auto& r : records) {
        out << r.epoch << ',' << r.split << ',' << fmt_double(r.loss_target) << ','
            << fmt_double(r.loss_transfer) << ',' << fmt_double(r.accuracy) << ','
            << fmt_double(r.lr) << ',' << fmt_double(r.seconds) << '\n';
    }
}

void RunMetrics::save_meta(const std::string& path) const {
    nlohmann::json meta;
    meta["seed"] = seed;
    meta["method"] = method;
    meta["config_hash"] = config_hash;
    std::ofstream out(path);
    if (!out) throw Error("metrics: cannot write '" + path + "'");
    out << meta.dump() << '\n';
}

RunMetrics RunMetrics::load(const std::string& csv_path, const std::string& meta_path) {
    RunMetrics metrics;
    {
        std::ifstream in(meta_path);
        if (in) {
            nlohmann::json meta = nlohmann::json::parse(in, nullptr, false);
            if (!meta.is_discarded()) {
                metrics.seed = meta.value("seed", std::uint64_t(0));
                metrics.method = meta.value("method", "");
                metrics.config_hash = meta.value("config_hash", "");
            }
        }
    }
    std::ifstream in(csv_path);
    if (!in) throw FormatError("metrics: cannot open '" + csv_path + "'");
    std::string line;
    bool header = true;
    while (std::getline(in, line)) {
        if (header) {
            header = false;
            continue;
        }
        if (line.empty()) continue;
        MetricRecord r;
        std::istringstream row(line);
        std::string field;
        try {
            if (!std::getline(row, field, ',')) throw FormatError("short row");
            r.epoch = std::stoi(field);
            if (!std::getline(row, r.split, ',')) throw FormatError("short row");
            if (!std::getline(row, field, ',')) throw FormatError("short row");
            r.loss_target = std::stod(field);
            if (!std::getline(row, field, ',')) throw FormatError("short row");
            r.loss_transfer = std::stod(field);
            if (!std::getline(row, field, ',')) throw FormatError("short row");
            r.accuracy = std::stod(field);
            if (!std::getline(row, field, ',')) throw FormatError("short row");
            r.lr = std::stod(field);
            if (!std::getline(row, field, ',')) throw FormatError("short row");
            r.seconds = std::stod(field);
        } catch (const std::exception&) {
            throw FormatError("metrics: malformed row in '" + csv_path + "': " + line);
        }
        metrics.records.push_back(std::move(r));
    }
    return metrics;
}

const MetricRecord* RunMetrics::find(int epoch, const std::string& split) const {
    for (const auto& r : records) {
        if (r.epoch == epoch && r.split == split) return &r;
    }
    return nullptr;
}

// ----------------------------------------------------------------------------
// Checkpoint serialization

namespace {

void put_u32(std::string& buf, std::uint32_t v) {
    buf.push_back(char(v & 0xff));
    buf.push_back(char((v >> 8) & 0xff));
    buf.push_back(char((v >> 16) & 0xff));
    buf.push_back(char((v >> 24) & 0xff));
}

void put_f32(std::string& buf, float f) {
    std::uint32_t v = 0;
    std::memcpy(&v, &f, 4);
    put_u32(buf, v);
}

struct Cursor {
    const std::string& buf;
    std::size_t pos = 0;

    std::uint32_t u32() {
        if (pos + 4 > buf.size()) throw CheckpointError("checkpoint: truncated file");
        std::uint32_t v = std::uint32_t(std::uint8_t(buf[pos])) |
                          std::uint32_t(std::uint8_t(buf[pos + 1])) << 8 |
                          std::uint32_t(std::uint8_t(buf[pos + 2])) << 16 |
                          std::uint32_t(std::uint8_t(buf[pos + 3])) << 24;
        pos += 4;
        return v;
    }
    float f32() {
        std::uint32_t v = u32();
        float f = 0;
        std::memcpy(&f, &v, 4);
        return f;
    }
    std::string bytes(std::size_t n) {
        if (pos + n > buf.size()) throw CheckpointError("checkpoint: truncated file");
        std::string s = buf.substr(pos, n);
        pos += n;
        return s;
    }
    bool done() const { return pos >= buf.size(); }
};

void write_record(std::string& buf, const std::string& name, const Shape& shape,
                  const std::vector<float>& data) {
    put_u32(buf, std::uint32_t(name.size()));
    buf.append(name);
    put_u32(buf, std::uint32_t(shape.size()));
    for (std::size_t d : shape) put_u32(buf, std::uint32_t(d));
    for (float f : data) put_f32(buf, f);
}

// Byte strings ride in f32 records: first word is the byte count, the rest
// the bytes packed four per word.
NamedBlob pack_bytes(const std::string& name, const std::string& bytes) {
    NamedBlob blob;
    blob.name = name;
    const std::size_t words = 1 + (bytes.size() + 3) / 4;
    blob.shape = {words};
    std::string raw;
    put_u32(raw, std::uint32_t(bytes.size()));
    raw.append(bytes);
    raw.resize(words * 4, '\0');
    blob.data.resize(words);
    std::memcpy(blob.data.data(), raw.data(), words * 4);
    return blob;
}

std::string unpack_bytes(const NamedBlob& blob) {
    if (blob.data.empty()) throw CheckpointError("checkpoint: empty byte record");
    std::string raw(blob.data.size() * 4, '\0');
    std::memcpy(raw.data(), blob.data.data(), raw.size());
    std::uint32_t len = 0;
    std::memcpy(&len, raw.data(), 4);
    if (4 + std::size_t(len) > raw.size()) {
        throw CheckpointError("checkpoint: corrupt byte record length");
    }
    return raw.substr(4, len);
}

}  // namespace

void Checkpoint::save(const std::string& path) const {
    std::string buf;
    buf.append("MHGD");
    put_u32(buf, kVersion);
    for (const auto& blob : params)
        write_record(buf, "p/" + blob.name, blob.shape, blob.data);
    for (const auto& blob : opt)
        write_record(buf, "o/" + blob.name, blob.shape, blob.data);
    {
        NamedBlob rng = pack_bytes("m/rng", rng_state);
        write_record(buf, rng.name, rng.shape, rng.data);
        NamedBlob hash = pack_bytes("m/config_hash", config_hash);
        write_record(buf, hash.name, hash.shape, hash.data);
        write_record(buf, "m/epoch", Shape{}, {float(epoch)});
    }
    std::ofstream out(path, std::ios::binary);
    if (!out) throw CheckpointError("checkpoint: cannot write '" + path + "'");
    out.write(buf.data(), std::streamsize(buf.size()));
}

Checkpoint Checkpoint::load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw CheckpointError("checkpoint: cannot open '" + path + "'");
    std::string buf((std::istreambuf_iterator<char>(in)),
                    std::istreambuf_iterator<char>());
    Cursor cur{buf};
    if (cur.bytes(4) != "MHGD") {
        throw CheckpointError("checkpoint: bad magic in '" + path +
                              "' (expected MHGD)");
    }
    const std::uint32_t version = cur.u32();
    if (version != kVersion) {
        throw CheckpointError("checkpoint: version " + std::to_string(version) +
                              " found, expected " + std::to_string(kVersion));
    }
    Checkpoint ck;
    while (!cur.done()) {
        const std::uint32_t name_len = cur.u32();
        const std::string name = cur.bytes(name_len);
        const std::uint32_t rank = cur.u32();
        NamedBlob blob;
        blob.shape.resize(rank);
        std::size_t count = 1;
        for (std::uint32_t i = 0; i < rank; ++i) {
            blob.shape[i] = cur.u32();
            count *= blob.shape[i];
        }
        blob.data.resize(count);
        for (std::size_t i = 0; i < count; ++i) blob.data[i] = cur.f32();
        if (name.rfind("p/", 0) == 0) {
            blob.name = name.substr(2);
            ck.params.push_back(std::move(blob));
        } else if (name.rfind("o/", 0) == 0) {
            blob.name = name.substr(2);
            ck.opt.push_back(std::move(blob));
        } else if (name == "m/rng") {
            blob.name = name;
            ck.rng_state = unpack_bytes(blob);
        } else if (name == "m/config_hash") {
            blob.name = name;
            ck.config_hash = unpack_bytes(blob);
        } else if (name == "m/epoch") {
            ck.epoch = int(blob.data.empty() ? 0.0f : blob.data[0]);
        } else {
            throw CheckpointError("checkpoint: unknown record '" + name + "'");
        }
    }
    return ck;
}

std::map<std::string, std::vector<float>> Checkpoint::blob_map() const {
    std::map<std::string, std::vector<float>> out;
    for (const auto& blob : params) out[blob.name] = blob.data;
    return out;
}

// ----------------------------------------------------------------------------
// Common helpers

Method parse_method(const std::string& name) {
    if (name == "student") return Method::Student;
    if (name == "soft-logits") return Method::SoftLogits;
    if (name == "kd-svdf") return Method::KdSvdf;
    if (name == "mhgd") return Method::Mhgd;
    throw ConfigError("unknown method '" + name +
                      "' (expected student|soft-logits|kd-svdf|mhgd)");
}

std::string method_name(Method m) {
    switch (m) {
        case Method::Student: return "student";
        case Method::SoftLogits: return "soft-logits";
        case Method::KdSvdf: return "kd-svdf";
        case Method::Mhgd: return "mhgd";
    }
    return "?";
}

namespace {

using Clock = std::chrono::steady_clock;

double elapsed_seconds(Clock::time_point since) {
    return std::chrono::duration<double>(Clock::now() - since).count();
}

struct ParamGroup {
    std::vector<std::pair<std::string, Tensor>> params;
    std::vector<OptimizerState> states;

    void init(std::vector<std::pair<std::string, Tensor>> p, double momentum,
              double weight_decay) {
        params = std::move(p);
        states.assign(params.size(), OptimizerState{});
        for (std::size_t i = 0; i < params.size(); ++i) {
            states[i].velocity.assign(params[i].second.size(), 0.0f);
            states[i].momentum = momentum;
            states[i].weight_decay = weight_decay;
        }
    }

    void zero_grads() {
        for (auto& [name, t] : params) t.zero_grad();
    }

    void step(double lr) {
        for (std::size_t i = 0; i < params.size(); ++i) {
            states[i].learning_rate = lr;
            Tensor grad = params[i].second.grad();
            sgd_nesterov_step(params[i].second, grad, states[i]);
        }
    }

    void load_velocities(const std::vector<NamedBlob>& blobs) {
        if (blobs.size() != params.size()) {
            throw CheckpointError("optimizer state: " + std::to_string(blobs.size()) +
                                  " blobs for " + std::to_string(params.size()) +
                                  " parameters");
        }
        for (std::size_t i = 0; i < params.size(); ++i) {
            if (blobs[i].name != params[i].first ||
                blobs[i].data.size() != params[i].second.size()) {
                throw CheckpointError("optimizer state: blob '" + blobs[i].name +
                                      "' does not match parameter '" +
                                      params[i].first + "'");
            }
            states[i].velocity = blobs[i].data;
        }
    }

    std::vector<NamedBlob> velocity_blobs() const {
        std::vector<NamedBlob> out;
        for (std::size_t i = 0; i < params.size(); ++i) {
            out.push_back(
                {params[i].first, params[i].second.shape(), states[i].velocity});
        }
        return out;
    }
};

Checkpoint network_checkpoint(const Network& net, const ParamGroup& group,
                              const Rng& rng, int epoch, const std::string& hash) {
    Checkpoint ck;
    for (const auto& [name, t] : net.parameters)
        ck.params.push_back({name, t.shape(), t.values()});
    for (const auto& [name, t] : net.buffers)
        ck.params.push_back({name, t.shape(), t.values()});
    ck.opt = group.velocity_blobs();
    ck.rng_state = rng.serialize();
    ck.epoch = epoch;
    ck.config_hash = hash;
    return ck;
}

void apply_stack_state(MhgdStack& stack, const Checkpoint& ckpt) {
    auto blobs = ckpt.blob_map();
    auto params = stack.named_params();
    for (auto& [name, t] : params) {
        auto it = blobs.find(name);
        if (it == blobs.end()) {
            throw CheckpointError("stack state: missing blob '" + name + "'");
        }
        if (it->second.size() != t.size()) {
            throw CheckpointError("stack state: blob '" + name + "' size mismatch");
        }
        std::copy(it->second.begin(), it->second.end(), t.data());
    }
}

std::vector<std::pair<std::size_t, std::size_t>> stack_tap_dims(
    const NetworkSpec& teacher_spec, const MhgdConfig& cfg) {
    auto taps = spec_taps(teacher_spec);
    if (taps.empty()) {
        throw ConfigError("attention stack: teacher spec has no sensing blocks");
    }
    std::vector<std::pair<std::size_t, std::size_t>> dims;
    for (const auto& tap : taps)
        dims.push_back({cfg.rank * tap.d_front, cfg.rank * tap.d_back});
    return dims;
}

void require_finite(double v, const char* what, int epoch, int step) {
    if (!std::isfinite(v)) {
        throw TrainingAbort(std::string(what) + " is not finite at epoch " +
                            std::to_string(epoch) + ", step " + std::to_string(step));
    }
}

// Runs fn(batch_tensor, labels) over one epoch of training batches, via the
// prefetch worker when requested. Both paths consume the rng identically.
template <class Fn>
void for_each_train_batch(const LabeledImageSet& set, const AugmentConfig& aug,
                          std::size_t batch, Rng& rng, bool prefetch, Fn&& fn) {
    auto batches = epoch_batches(set.count(), batch, rng, /*shuffle=*/true);
    if (prefetch) {
        PrefetchQueue queue(set, batches, aug, rng, /*train=*/true);
        while (auto item = queue.next()) fn(item->batch, item->labels);
    } else {
        for (const auto& idx : batches) {
            Tensor x = augment_batch(set, idx, aug, rng, /*train=*/true);
            fn(x, gather_labels(set, idx));
        }
    }
}

std::size_t argmax_row(const float* row, std::size_t k) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < k; ++j)
        if (row[j] > row[best]) best = j;
    return best;
}

}  // namespace

// ----------------------------------------------------------------------------
// Evaluation

EvalStats evaluate_full(Network& net, const LabeledImageSet& split,
                        const AugmentConfig& aug, std::size_t batch) {
    if (split.count() == 0) {
        throw ContractError("evaluate: empty split");
    }
    const bool prev_mode = net.training_mode;
    net.set_training(false);
    NoGradGuard ng;
    Rng unused(0);
    std::size_t correct = 0;
    double ce_sum = 0.0;
    std::vector<std::size_t> order(split.count());
    std::iota(order.begin(), order.end(), 0);
    for (std::size_t start = 0; start < order.size(); start += batch) {
        const std::size_t end = std::min(order.size(), start + batch);
        std::vector<std::size_t> idx(order.begin() + std::ptrdiff_t(start),
                                     order.begin() + std::ptrdiff_t(end));
        Tensor x = augment_batch(split, idx, aug, unused, /*train=*/false);
        auto labels = gather_labels(split, idx);
        Tensor logits = net.forward(x);
        const std::size_t k = logits.dim(1);
        for (std::size_t i = 0; i < idx.size(); ++i) {
            if (int(argmax_row(logits.data() + i * k, k)) == labels[i]) ++correct;
        }
        ce_sum += double(cross_entropy(logits, labels).item()) * double(idx.size());
    }
    net.set_training(prev_mode);
    EvalStats stats;
    stats.accuracy = 100.0 * double(correct) / double(split.count());
    stats.mean_ce = ce_sum / double(split.count());
    return stats;
}

double evaluate(Network& net, const LabeledImageSet& split, const AugmentConfig& aug,
                std::size_t batch) {
    return evaluate_full(net, split, aug, batch).accuracy;
}

// ----------------------------------------------------------------------------
// Stage 0: teacher

Network restore_network(const NetworkSpec& spec, const Checkpoint& ckpt) {
    Network net = build_network(spec, 0);
    net.load_state(ckpt.blob_map());
    return net;
}

MhgdStack restore_stack(const NetworkSpec& teacher_spec, const MhgdConfig& cfg,
                        const Checkpoint& ckpt) {
    Rng rng(0);
    MhgdStack stack = MhgdStack::build(cfg, stack_tap_dims(teacher_spec, cfg), rng);
    apply_stack_state(stack, ckpt);
    return stack;
}

TrainResult train_teacher(const NetworkSpec& spec, const Dataset& data,
                          const TrainHyper& hyper, std::uint64_t seed,
                          const Checkpoint* resume) {
    hyper.schedule.validate();
    Network net = build_network(spec, seed);
    ParamGroup group;
    group.init(net.parameters, hyper.momentum, hyper.weight_decay);
    Rng rng(seed * 0x9e3779b97f4a7c15ull + 0x1234567);
    int start_epoch = 0;
    RunMetrics metrics;
    metrics.seed = seed;
    metrics.method = spec.role == Role::Teacher ? "teacher" : "student";
    metrics.config_hash = hyper.config_hash;

    if (resume) {
        net.load_state(resume->blob_map());
        group.load_velocities(resume->opt);
        rng = Rng::deserialize(resume->rng_state);
        start_epoch = resume->epoch;
    }

    net.set_training(true);
    for (int epoch = start_epoch; epoch < hyper.epochs; ++epoch) {
        const double lr = lr_at_epoch(hyper.schedule, epoch);
        const auto t0 = Clock::now();
        double loss_sum = 0.0;
        std::size_t sample_count = 0, correct = 0;
        int step = 0;
        for_each_train_batch(
            data.train, data.aug, hyper.batch, rng, hyper.prefetch,
            [&](const Tensor& x, const std::vector<int>& labels) {
                if (labels.size() < 2) return;  // batch-stats floor
                group.zero_grads();
                Tensor logits = net.forward(x);
                Tensor loss = cross_entropy(logits, labels);
                require_finite(loss.item(), "teacher loss", epoch, step);
                backprop(loss);
                group.step(lr);
                loss_sum += double(loss.item()) * double(labels.size());
                const std::size_t k = logits.dim(1);
                for (std::size_t i = 0; i < labels.size(); ++i)
                    if (int(argmax_row(logits.data() + i * k, k)) == labels[i])
                        ++correct;
                sample_count += labels.size();
                ++step;
            });
        const double train_secs = elapsed_seconds(t0);
        MetricRecord train_rec;
        train_rec.epoch = epoch;
        train_rec.split = "train";
        train_rec.loss_target = sample_count ? loss_sum / double(sample_count) : 0.0;
        train_rec.accuracy =
            sample_count ? 100.0 * double(correct) / double(sample_count) : 0.0;
        train_rec.lr = lr;
        train_rec.seconds = train_secs;
        metrics.records.push_back(train_rec);

        const auto t1 = Clock::now();
        EvalStats test = evaluate_full(net, data.test, data.aug, hyper.batch);
        MetricRecord test_rec;
        test_rec.epoch = epoch;
        test_rec.split = "test";
        test_rec.loss_target = test.mean_ce;
        test_rec.accuracy = test.accuracy;
        test_rec.lr = lr;
        test_rec.seconds = elapsed_seconds(t1);
        metrics.records.push_back(test_rec);
    }

    TrainResult result;
    result.checkpoint =
        network_checkpoint(net, group, rng, hyper.epochs, hyper.config_hash);
    result.metrics = std::move(metrics);
    return result;
}

// ----------------------------------------------------------------------------
// Stage 1: attention network on the frozen teacher

namespace {

// Compressed (frontend, backend) sets for every sensing pair of a sensed
// forward pass.
std::vector<std::pair<FeatureVectorSet, FeatureVectorSet>> compress_taps(
    const SensedForward& sensed, std::size_t rank) {
    std::vector<std::pair<FeatureVectorSet, FeatureVectorSet>> sets;
    for (std::size_t m = 0; m < sensed.taps.size(); ++m) {
        sets.push_back(
            {compress_feature_map(sensed.taps[m].first, rank,
                                  "pair" + std::to_string(m) + ".front"),
             compress_feature_map(sensed.taps[m].second, rank,
                                  "pair" + std::to_string(m) + ".back")});
    }
    return sets;
}

}  // namespace

TrainResult train_mhan(const NetworkSpec& teacher_spec, const Checkpoint& teacher_ckpt,
                       const MhgdConfig& cfg, const Dataset& data,
                       const TrainHyper& hyper, std::uint64_t seed) {
    hyper.schedule.validate();
    Network teacher = restore_network(teacher_spec, teacher_ckpt);
    teacher.freeze();
    // Graphs are mini-batch relations, so the teacher's trunk also normalizes
    // with batch statistics while sensing; its running buffers stay frozen.
    teacher.set_training(true);
    teacher.update_running_stats = false;
    const auto teacher_bytes = teacher.state();

    Rng init_rng(seed * 0x2545f4914f6cdd1dull + 1);
    MhgdStack stack =
        MhgdStack::build(cfg, stack_tap_dims(teacher_spec, cfg), init_rng);
    stack.set_requires_grad(true);
    ParamGroup group;
    group.init(stack.named_params(), hyper.momentum, hyper.weight_decay);
    Rng rng(seed * 0x9e3779b97f4a7c15ull + 0x777);

    RunMetrics metrics;
    metrics.seed = seed;
    metrics.method = "mhan";
    metrics.config_hash = hyper.config_hash;

    std::size_t skipped_total = 0, seen_total = 0;
    for (int epoch = 0; epoch < hyper.epochs; ++epoch) {
        const double lr = lr_at_epoch(hyper.schedule, epoch);
        const auto t0 = Clock::now();
        double loss_sum = 0.0, cos_sum = 0.0;
        std::size_t batches_done = 0;
        int step = 0;
        for_each_train_batch(
            data.train, data.aug, hyper.batch, rng, hyper.prefetch,
            [&](const Tensor& x, const std::vector<int>& labels) {
                if (labels.size() < 2) return;
                ++seen_total;
                std::vector<std::pair<FeatureVectorSet, FeatureVectorSet>> taps;
                try {
                    NoGradGuard ng;
                    auto sensed = teacher.forward_with_sensing(x);
                    taps = compress_taps(sensed, cfg.rank);
                } catch (const DegenerateRankError& e) {
                    ++skipped_total;
                    std::cerr << "[mhan] skipping batch: " << e.what() << "\n";
                    return;
                }
                group.zero_grads();
                auto result = mhan_loss(stack, taps);
                require_finite(result.loss.item(), "mhan loss", epoch, step);
                backprop(result.loss);
                group.step(lr);
                loss_sum += double(result.loss.item());
                double mean_cos = 0.0;
                for (double c : result.mean_cosine) mean_cos += c;
                cos_sum += mean_cos / double(result.mean_cosine.size());
                ++batches_done;
                ++step;
            });
        if (seen_total > 0 && skipped_total * 10 > seen_total) {
            throw TrainingAbort("mhan: more than 10% of batches skipped (" +
                                std::to_string(skipped_total) + "/" +
                                std::to_string(seen_total) + ")");
        }
        MetricRecord rec;
        rec.epoch = epoch;
        rec.split = "train";
        rec.loss_target = batches_done ? loss_sum / double(batches_done) : 0.0;
        rec.accuracy = batches_done ? cos_sum / double(batches_done) : 0.0;
        rec.lr = lr;
        rec.seconds = elapsed_seconds(t0);
        metrics.records.push_back(rec);
    }

    if (teacher.state() != teacher_bytes) {
        throw Error("mhan training mutated teacher parameters");
    }

    TrainResult result;
    Checkpoint ck;
    for (const auto& [name, t] : stack.named_params())
        ck.params.push_back({name, t.shape(), t.values()});
    ck.opt = group.velocity_blobs();
    ck.rng_state = rng.serialize();
    ck.epoch = hyper.epochs;
    ck.config_hash = hyper.config_hash;
    result.checkpoint = std::move(ck);
    result.metrics = std::move(metrics);
    return result;
}

// ----------------------------------------------------------------------------
// Stage 2: student

namespace {

// Smoothed graphs for teacher and student sides of one batch; the student
// sets are sign-aligned to the teacher's before the heads see them.
struct PairGraphs {
    std::vector<AttentionGraph> teacher;
    std::vector<AttentionGraph> student;
};

PairGraphs build_transfer_graphs(const MhgdStack& stack,
                                 const SensedForward& teacher_sensed,
                                 const SensedForward& student_sensed,
                                 std::size_t rank) {
    PairGraphs graphs;
    std::vector<std::pair<FeatureVectorSet, FeatureVectorSet>> teacher_sets;
    {
        NoGradGuard ng;
        teacher_sets = compress_taps(teacher_sensed, rank);
    }
    auto student_sets = compress_taps(student_sensed, rank);
    for (std::size_t m = 0; m < stack.pairs.size(); ++m) {
        auto aligned_front =
            sign_align_pair(student_sets[m].first, teacher_sets[m].first);
        auto aligned_back =
            sign_align_pair(student_sets[m].second, teacher_sets[m].second);
        {
            NoGradGuard ng;
            graphs.teacher.push_back(pair_graphs(stack.pairs[m],
                                                 teacher_sets[m].second,
                                                 teacher_sets[m].first,
                                                 GraphMode::Smoothed, int(m)));
        }
        graphs.student.push_back(pair_graphs(stack.pairs[m], aligned_back,
                                             aligned_front, GraphMode::Smoothed,
                                             int(m)));
    }
    return graphs;
}

void check_smoothed_bound(const std::vector<AttentionGraph>& graphs) {
    for (const auto& g : graphs) {
        const double bound = smoothed_entry_bound(g.batch()) + 1e-6;
        for (const auto& head : g.heads) {
            for (std::size_t i = 0; i < head.size(); ++i) {
                if (double(head.data()[i]) > bound) {
                    throw Error("smoothed graph entry " +
                                std::to_string(double(head.data()[i])) +
                                " exceeds the bound " + std::to_string(bound));
                }
            }
        }
    }
}

}  // namespace

Tensor mhgd_transfer_term(const Network& teacher, const MhgdStack& stack,
                          const Network& student, const Tensor& batch) {
    SensedForward teacher_sensed;
    {
        NoGradGuard ng;
        teacher_sensed = teacher.forward_with_sensing(batch);
    }
    auto student_sensed = student.forward_with_sensing(batch);
    auto graphs =
        build_transfer_graphs(stack, teacher_sensed, student_sensed, stack.config.rank);
    return transfer_loss(graphs.teacher, graphs.student);
}

TrainResult train_student(const NetworkSpec& teacher_spec, const Checkpoint& teacher_ckpt,
                          const MhgdConfig& cfg, const Checkpoint* mhan,
                          const NetworkSpec& student_spec, const Dataset& data,
                          const TrainHyper& hyper, Method method, std::uint64_t seed,
                          const Checkpoint* resume) {
    hyper.schedule.validate();
    const bool needs_teacher = method != Method::Student;
    const bool needs_stack = method == Method::Mhgd;

    Network teacher = restore_network(teacher_spec, teacher_ckpt);
    teacher.freeze();
    // Sensing-based methods normalize the teacher trunk with batch statistics
    // (matching the student side); the logits baseline keeps inference mode.
    teacher.set_training(method == Method::Mhgd || method == Method::KdSvdf);
    teacher.update_running_stats = false;
    Network student = build_network(student_spec, seed);
    if (method == Method::Mhgd || method == Method::KdSvdf) {
        check_tap_compatibility(teacher, student);
    }

    MhgdStack stack;
    if (needs_stack) {
        if (!mhan) {
            throw ConfigError("train_student: method mhgd needs a fitted "
                              "attention-stack checkpoint");
        }
        stack = restore_stack(teacher_spec, cfg, *mhan);
        stack.set_requires_grad(false);
    }

    const auto teacher_bytes = teacher.state();
    std::map<std::string, std::vector<float>> stack_bytes;
    if (needs_stack) {
        for (const auto& [name, t] : stack.named_params()) stack_bytes[name] = t.values();
    }

    ParamGroup group;
    group.init(student.parameters, hyper.momentum, hyper.weight_decay);
    Rng rng(seed * 0x9e3779b97f4a7c15ull + 0xabcdef);
    int start_epoch = 0;

    RunMetrics metrics;
    metrics.seed = seed;
    metrics.method = method_name(method);
    metrics.config_hash = hyper.config_hash;

    if (resume) {
        student.load_state(resume->blob_map());
        group.load_velocities(resume->opt);
        rng = Rng::deserialize(resume->rng_state);
        start_epoch = resume->epoch;
    }

    student.set_training(true);

    // Transfer loss at initialization, before any update: the reference the
    // training trajectory is judged against. Probed on deterministic
    // evaluation-mode batches.
    if (!resume && method != Method::Student && hyper.epochs > 0) {
        NoGradGuard ng;
        Rng probe_rng(0);
        double init_sum = 0.0;
        std::size_t probes = 0;
        const std::size_t probe_images =
            std::min<std::size_t>(data.train.count(), 4 * hyper.batch);
        for (std::size_t start = 0; start + 1 < probe_images;
             start += hyper.batch) {
            const std::size_t end = std::min(probe_images, start + hyper.batch);
            std::vector<std::size_t> idx;
            for (std::size_t i = start; i < end; ++i) idx.push_back(i);
            Tensor x = augment_batch(data.train, idx, data.aug, probe_rng, false);
            double value = 0.0;
            if (method == Method::Mhgd) {
                value = double(mhgd_transfer_term(teacher, stack, student, x).item());
            } else if (method == Method::SoftLogits) {
                const bool prev = teacher.training_mode;
                teacher.set_training(false);
                Tensor t_logits = teacher.forward(x);
                teacher.set_training(prev);
                value = double(
                    soft_logits_loss(t_logits, student.forward(x), hyper.tau).item());
            } else {
                auto teacher_sensed = teacher.forward_with_sensing(x);
                auto teacher_sets = compress_taps(teacher_sensed, cfg.rank);
                auto student_sets =
                    compress_taps(student.forward_with_sensing(x), cfg.rank);
                std::vector<FeatureVectorSet> t_flat, s_flat;
                for (std::size_t m = 0; m < teacher_sets.size(); ++m) {
                    t_flat.push_back(teacher_sets[m].first);
                    t_flat.push_back(teacher_sets[m].second);
                    s_flat.push_back(sign_align_pair(student_sets[m].first,
                                                     teacher_sets[m].first));
                    s_flat.push_back(sign_align_pair(student_sets[m].second,
                                                     teacher_sets[m].second));
                }
                value = double(feature_l2_loss(t_flat, s_flat).item());
            }
            init_sum += value;
            ++probes;
        }
        MetricRecord init_rec;
        init_rec.epoch = 0;
        init_rec.split = "init";
        init_rec.loss_transfer = probes ? init_sum / double(probes) : 0.0;
        init_rec.lr = lr_at_epoch(hyper.schedule, 0);
        metrics.records.push_back(init_rec);
    }

    std::size_t skipped_total = 0, seen_total = 0;
    for (int epoch = start_epoch; epoch < hyper.epochs; ++epoch) {
        const double lr = lr_at_epoch(hyper.schedule, epoch);
        const auto t0 = Clock::now();
        double ce_sum = 0.0, transfer_sum = 0.0;
        std::size_t sample_count = 0, correct = 0, batches_done = 0;
        bool bound_checked = false;
        int step = 0;
        for_each_train_batch(
            data.train, data.aug, hyper.batch, rng, hyper.prefetch,
            [&](const Tensor& x, const std::vector<int>& labels) {
                if (labels.size() < 2) return;
                ++seen_total;
                group.zero_grads();
                auto student_sensed = student.forward_with_sensing(x);
                Tensor ce = cross_entropy(student_sensed.logits, labels);
                Tensor total = ce;
                double transfer_value = 0.0;
                try {
                    if (method == Method::SoftLogits) {
                        Tensor teacher_logits;
                        {
                            NoGradGuard ng;
                            teacher_logits = teacher.forward(x);
                        }
                        Tensor term = soft_logits_loss(teacher_logits,
                                                       student_sensed.logits,
                                                       hyper.tau);
                        transfer_value = term.item();
                        total = add(ce, scale(term, float(hyper.lambda)));
                    } else if (method == Method::KdSvdf) {
                        std::vector<std::pair<FeatureVectorSet, FeatureVectorSet>>
                            teacher_sets;
                        {
                            NoGradGuard ng;
                            auto sensed = teacher.forward_with_sensing(x);
                            teacher_sets = compress_taps(sensed, cfg.rank);
                        }
                        auto student_sets = compress_taps(student_sensed, cfg.rank);
                        std::vector<FeatureVectorSet> t_flat, s_flat;
                        for (std::size_t m = 0; m < teacher_sets.size(); ++m) {
                            t_flat.push_back(teacher_sets[m].first);
                            t_flat.push_back(teacher_sets[m].second);
                            s_flat.push_back(sign_align_pair(student_sets[m].first,
                                                             teacher_sets[m].first));
                            s_flat.push_back(sign_align_pair(student_sets[m].second,
                                                             teacher_sets[m].second));
                        }
                        Tensor term = feature_l2_loss(t_flat, s_flat);
                        transfer_value = term.item();
                        total = add(ce, scale(term, float(hyper.lambda)));
                    } else if (method == Method::Mhgd) {
                        SensedForward teacher_sensed;
                        {
                            NoGradGuard ng;
                            teacher_sensed = teacher.forward_with_sensing(x);
                        }
                        auto graphs = build_transfer_graphs(stack, teacher_sensed,
                                                            student_sensed, cfg.rank);
                        if (!bound_checked) {
                            check_smoothed_bound(graphs.teacher);
                            check_smoothed_bound(graphs.student);
                            bound_checked = true;
                        }
                        Tensor term = transfer_loss(graphs.teacher, graphs.student);
                        transfer_value = term.item();
                        total = add(ce, scale(term, float(hyper.lambda)));
                    }
                } catch (const DegenerateRankError& e) {
                    ++skipped_total;
                    std::cerr << "[student] skipping batch: " << e.what() << "\n";
                    return;
                }
                require_finite(total.item(), "student loss", epoch, step);
                backprop(total);
                group.step(lr);

                ce_sum += double(ce.item()) * double(labels.size());
                transfer_sum += transfer_value;
                const std::size_t k = student_sensed.logits.dim(1);
                for (std::size_t i = 0; i < labels.size(); ++i)
                    if (int(argmax_row(student_sensed.logits.data() + i * k, k)) ==
                        labels[i])
                        ++correct;
                sample_count += labels.size();
                ++batches_done;
                ++step;
            });
        if (seen_total > 0 && skipped_total * 10 > seen_total) {
            throw TrainingAbort("student: more than 10% of batches skipped (" +
                                std::to_string(skipped_total) + "/" +
                                std::to_string(seen_total) + ")");
        }
        MetricRecord train_rec;
        train_rec.epoch = epoch;
        train_rec.split = "train";
        train_rec.loss_target = sample_count ? ce_sum / double(sample_count) : 0.0;
        train_rec.loss_transfer =
            batches_done ? transfer_sum / double(batches_done) : 0.0;
        train_rec.accuracy =
            sample_count ? 100.0 * double(correct) / double(sample_count) : 0.0;
        train_rec.lr = lr;
        train_rec.seconds = elapsed_seconds(t0);
        metrics.records.push_back(train_rec);

        const auto t1 = Clock::now();
        EvalStats test = evaluate_full(student, data.test, data.aug, hyper.batch);
        MetricRecord test_rec;
        test_rec.epoch = epoch;
        test_rec.split = "test";
        test_rec.loss_target = test.mean_ce;
        test_rec.accuracy = test.accuracy;
        test_rec.lr = lr;
        test_rec.seconds = elapsed_seconds(t1);
        metrics.records.push_back(test_rec);
    }

    if (needs_teacher && teacher.state() != teacher_bytes) {
        throw Error("student training mutated teacher parameters");
    }
    if (needs_stack) {
        for (const auto& [name, t] : stack.named_params()) {
            if (stack_bytes.at(name) != t.values()) {
                throw Error("student training mutated attention-stack parameters");
            }
        }
    }

    TrainResult result;
    result.checkpoint =
        network_checkpoint(student, group, rng, hyper.epochs, hyper.config_hash);
    result.metrics = std::move(metrics);
    return result;
}

}  // namespace mhgd
