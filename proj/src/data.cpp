// Copyright (c) 2026 the mhgd authors
// SPDX-License-Identifier: Apache-2.0

#include "mhgd/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>

namespace mhgd {

namespace {
constexpr std::size_t kCifarDim = 32;
constexpr std::size_t kCifarPlane = kCifarDim * kCifarDim;
constexpr std::size_t kCifarRecord = 2 + 3 * kCifarPlane;
}  // namespace

LabeledImageSet load_cifar_binary(const std::string& path, CifarVariant variant) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cifar: cannot open '" + path + "'");
    std::vector<char> bytes((std::istreambuf_iterator<char>(in)),
                            std::istreambuf_iterator<char>());
    if (bytes.empty() || bytes.size() % kCifarRecord != 0) {
        throw FormatError("cifar: file size " + std::to_string(bytes.size()) +
                          " is not a multiple of the record size " +
                          std::to_string(kCifarRecord));
    }
    const std::size_t n = bytes.size() / kCifarRecord;
    LabeledImageSet set;
    set.height = kCifarDim;
    set.width = kCifarDim;
    set.classes = variant == CifarVariant::Fine100 ? 100 : 20;
    set.images.resize(n * kCifarPlane * 3);
    set.labels.resize(n);
    for (std::size_t r = 0; r < n; ++r) {
        const auto* rec =
            reinterpret_cast<const std::uint8_t*>(bytes.data() + r * kCifarRecord);
        const int label = variant == CifarVariant::Fine100 ? rec[1] : rec[0];
        if (label >= set.classes) {
            throw FormatError("cifar: corrupt record " + std::to_string(r) +
                              ": label " + std::to_string(label) + " >= " +
                              std::to_string(set.classes));
        }
        set.labels[r] = label;
        // Channel planes to interleaved pixels.
        std::uint8_t* img = set.images.data() + r * kCifarPlane * 3;
        for (std::size_t p = 0; p < kCifarPlane; ++p) {
            img[p * 3 + 0] = rec[2 + p];
            img[p * 3 + 1] = rec[2 + kCifarPlane + p];
            img[p * 3 + 2] = rec[2 + 2 * kCifarPlane + p];
        }
    }
    return set;
}

void save_cifar_binary(const LabeledImageSet& set, const std::string& path) {
    if (set.height != kCifarDim || set.width != kCifarDim) {
        throw FormatError("cifar: export requires 32x32 images, set is " +
                          std::to_string(set.height) + "x" +
                          std::to_string(set.width));
    }
    std::ofstream out(path, std::ios::binary);
    if (!out) throw FormatError("cifar: cannot write '" + path + "'");
    std::vector<char> rec(kCifarRecord);
    for (std::size_t r = 0; r < set.count(); ++r) {
        rec[0] = char(set.labels[r]);
        rec[1] = char(set.labels[r]);
        const std::uint8_t* img = set.image(r);
        for (std::size_t p = 0; p < kCifarPlane; ++p) {
            rec[2 + p] = char(img[p * 3 + 0]);
            rec[2 + kCifarPlane + p] = char(img[p * 3 + 1]);
            rec[2 + 2 * kCifarPlane + p] = char(img[p * 3 + 2]);
        }
        out.write(rec.data(), std::streamsize(rec.size()));
    }
}

namespace {

std::uint8_t clamp_byte(double v) {
    return std::uint8_t(std::clamp(v, 0.0, 255.0));
}

// Well-spread palette: hue steps around the color wheel at full saturation.
void class_color(int c, int classes, double& r, double& g, double& b) {
    const double hue = (double(c) / double(std::max(classes, 1))) * 6.0;
    const int sector = int(hue) % 6;
    const double frac = hue - std::floor(hue);
    const double lo = 22.0, hi = 233.0;
    const double mid_up = lo + (hi - lo) * frac;
    const double mid_down = hi - (hi - lo) * frac;
    switch (sector) {
        case 0: r = hi; g = mid_up; b = lo; break;
        case 1: r = mid_down; g = hi; b = lo; break;
        case 2: r = lo; g = hi; b = mid_up; break;
        case 3: r = lo; g = mid_down; b = hi; break;
        case 4: r = mid_up; g = lo; b = hi; break;
        default: r = hi; g = lo; b = mid_down; break;
    }
}

}  // namespace

LabeledImageSet generate_synthetic(int classes, std::size_t count, std::size_t size,
                                   std::uint64_t seed, const std::string& split) {
    if (classes < 2) throw ConfigError("synthetic: need at least 2 classes");
    LabeledImageSet set;
    set.height = size;
    set.width = size;
    set.classes = classes;
    set.split = split;
    set.images.resize(count * size * size * 3);
    set.labels.resize(count);

    Rng rng(seed);
    const double s = double(size);
    // Classes share a hue pairwise and are told apart by blob position, so
    // neither color nor position alone solves the task; the jitter levels
    // keep the position distributions overlapping.
    const int hue_count = std::max(2, (classes + 1) / 2);
    for (std::size_t i = 0; i < count; ++i) {
        const int label = int(rng.below(std::uint64_t(classes)));
        set.labels[i] = label;
        double cr, cg, cb;
        class_color(label % hue_count, hue_count, cr, cg, cb);
        const double angle = 6.283185307179586 * double(label) / double(classes);
        const double cx = s * 0.5 + s * 0.21 * std::cos(angle) + rng.gaussian() * s * 0.11;
        const double cy = s * 0.5 + s * 0.21 * std::sin(angle) + rng.gaussian() * s * 0.11;
        const double radius = s * (0.17 + 0.12 * rng.uniform01());
        const double fade = 0.60 + 0.40 * rng.uniform01();
        const double jr = rng.gaussian() * 26.0;
        const double jg = rng.gaussian() * 26.0;
        const double jb = rng.gaussian() * 26.0;
        std::uint8_t* img = set.images.data() + i * size * size * 3;
        for (std::size_t y = 0; y < size; ++y) {
            for (std::size_t x = 0; x < size; ++x) {
                const double d2 = (double(x) - cx) * (double(x) - cx) +
                                  (double(y) - cy) * (double(y) - cy);
                const double blob = fade * std::exp(-d2 / (2.0 * radius * radius));
                const double bg = 96.0;
                const double noise = rng.gaussian() * 30.0;
                std::uint8_t* px = img + (y * size + x) * 3;
                px[0] = clamp_byte(bg + (cr + jr - bg) * blob + noise);
                px[1] = clamp_byte(bg + (cg + jg - bg) * blob + rng.gaussian() * 30.0);
                px[2] = clamp_byte(bg + (cb + jb - bg) * blob + rng.gaussian() * 30.0);
            }
        }
    }
    return set;
}

Tensor augment_batch(const LabeledImageSet& set, const std::vector<std::size_t>& indices,
                     const AugmentConfig& cfg, Rng& rng, bool train) {
    const std::size_t h = set.height, w = set.width;
    const std::size_t oh = cfg.crop_h ? cfg.crop_h : h;
    const std::size_t ow = cfg.crop_w ? cfg.crop_w : w;
    if (oh > h + 2 * std::size_t(cfg.pad) || ow > w + 2 * std::size_t(cfg.pad)) {
        throw ConfigError("augment: crop size exceeds the padded canvas");
    }
    const std::size_t n = indices.size();
    Tensor out = Tensor::zeros({n, oh, ow, 3});

    for (std::size_t b = 0; b < n; ++b) {
        const std::uint8_t* img = set.image(indices[b]);
        bool flip = false;
        std::size_t dy = std::size_t(cfg.pad), dx = std::size_t(cfg.pad);
        if (train) {
            flip = cfg.flip && rng.uniform01() < 0.5;
            // Offsets over all valid positions, inclusive.
            dy = std::size_t(rng.below(h + 2 * cfg.pad - oh + 1));
            dx = std::size_t(rng.below(w + 2 * cfg.pad - ow + 1));
        }
        float* dst = out.data() + b * oh * ow * 3;
        for (std::size_t y = 0; y < oh; ++y) {
            for (std::size_t x = 0; x < ow; ++x) {
                // Position on the zero-padded canvas; zero padding is 0 in
                // normalized space.
                const std::int64_t sy = std::int64_t(y + dy) - cfg.pad;
                std::int64_t sx = std::int64_t(x + dx) - cfg.pad;
                float* px = dst + (y * ow + x) * 3;
                if (sy < 0 || sy >= std::int64_t(h) || sx < 0 ||
                    sx >= std::int64_t(w)) {
                    px[0] = px[1] = px[2] = 0.0f;
                    continue;
                }
                if (flip) sx = std::int64_t(w) - 1 - sx;
                const std::uint8_t* src = img + (std::size_t(sy) * w + std::size_t(sx)) * 3;
                for (int c = 0; c < 3; ++c)
                    px[c] = float(src[c]) / 255.0f - 0.5f;
            }
        }
    }
    return out;
}

std::vector<int> gather_labels(const LabeledImageSet& set,
                               const std::vector<std::size_t>& indices) {
    std::vector<int> labels(indices.size());
    for (std::size_t i = 0; i < indices.size(); ++i)
        labels[i] = set.labels[indices[i]];
    return labels;
}

std::vector<std::vector<std::size_t>> epoch_batches(std::size_t count,
                                                    std::size_t batch_size, Rng& rng,
                                                    bool shuffle) {
    std::vector<std::size_t> order(count);
    std::iota(order.begin(), order.end(), 0);
    if (shuffle) rng.shuffle(order.begin(), order.end());
    std::vector<std::vector<std::size_t>> batches;
    for (std::size_t start = 0; start < count; start += batch_size) {
        const std::size_t end = std::min(count, start + batch_size);
        batches.emplace_back(order.begin() + std::ptrdiff_t(start),
                             order.begin() + std::ptrdiff_t(end));
    }
    return batches;
}

PrefetchQueue::PrefetchQueue(const LabeledImageSet& set,
                             std::vector<std::vector<std::size_t>> batches,
                             const AugmentConfig& cfg, Rng& rng, bool train) {
    pending_ = batches.size();
    // All draws happen on the worker in batch order against the caller's rng;
    // the caller must not touch it until the queue drains.
    worker_ = std::thread([this, &set, batches = std::move(batches), cfg, &rng,
                           train]() {
        for (const auto& idx : batches) {
            Item item;
            item.batch = augment_batch(set, idx, cfg, rng, train);
            item.labels = gather_labels(set, idx);
            std::unique_lock<std::mutex> lock(mu_);
            cv_.wait(lock, [this] { return queue_.size() < kCapacity || done_; });
            if (done_) return;
            queue_.push(std::move(item));
            cv_.notify_all();
        }
        std::unique_lock<std::mutex> lock(mu_);
        done_ = true;
        cv_.notify_all();
    });
}

PrefetchQueue::~PrefetchQueue() {
    {
        std::unique_lock<std::mutex> lock(mu_);
        done_ = true;
        cv_.notify_all();
    }
    if (worker_.joinable()) worker_.join();
}

std::optional<PrefetchQueue::Item> PrefetchQueue::next() {
    std::unique_lock<std::mutex> lock(mu_);
    cv_.wait(lock, [this] { return !queue_.empty() || (done_ && pending_ == 0); });
    if (queue_.empty()) return std::nullopt;
    Item item = std::move(queue_.front());
    queue_.pop();
    --pending_;
    cv_.notify_all();
    return item;
}

}  // namespace mhgd
