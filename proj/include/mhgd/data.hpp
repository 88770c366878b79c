// Copyright (c) 2026 the mhgd authors
// SPDX-License-Identifier: Apache-2.0
//
// Dataset ingestion (CIFAR-style binary records), deterministic synthetic
// dataset generation, and the training augmentation chain.

#pragma once

#include <condition_variable>
#include <cstdint>
#include <mutex>
#include <optional>
#include <queue>
#include <string>
#include <thread>
#include <vector>

#include "mhgd/common.hpp"
#include "mhgd/tensor.hpp"

namespace mhgd {

struct LabeledImageSet {
    std::vector<std::uint8_t> images;  // N x H x W x 3, interleaved channels
    std::vector<int> labels;
    std::size_t height = 0, width = 0;
    int classes = 0;
    std::string split;

    std::size_t count() const { return labels.size(); }
    const std::uint8_t* image(std::size_t i) const {
        return images.data() + i * height * width * 3;
    }
};

enum class CifarVariant { Fine100, Coarse };

// Record layout: coarse label byte, fine label byte, then 3072 image bytes in
// channel-plane order R, G, B (32x32 each).
LabeledImageSet load_cifar_binary(const std::string& path, CifarVariant variant);

// Writes the same record layout (coarse byte = fine byte for synthetic sets);
// round-trips through load_cifar_binary when the set is 32x32.
void save_cifar_binary(const LabeledImageSet& set, const std::string& path);

// Class-separable blob images: each class owns a mean color and a blob
// position. Fully deterministic in the seed.
LabeledImageSet generate_synthetic(int classes, std::size_t count, std::size_t size,
                                   std::uint64_t seed, const std::string& split = "");

struct AugmentConfig {
    int pad = 4;
    bool flip = true;
    std::size_t crop_h = 0, crop_w = 0;  // 0: keep the source size
};

// Maps bytes linearly onto [-0.5, 0.5]. Training mode additionally applies a
// per-image horizontal flip (p = 0.5) and a random crop from the zero-padded
// canvas; evaluation mode normalizes only. Draw order per image: flip, row
// offset, column offset.
Tensor augment_batch(const LabeledImageSet& set, const std::vector<std::size_t>& indices,
                     const AugmentConfig& cfg, Rng& rng, bool train);

std::vector<int> gather_labels(const LabeledImageSet& set,
                               const std::vector<std::size_t>& indices);

// Shuffled index batches for one epoch; the final partial batch is kept.
std::vector<std::vector<std::size_t>> epoch_batches(std::size_t count,
                                                    std::size_t batch_size, Rng& rng,
                                                    bool shuffle);

// Single-producer prefetcher: augments batches on a worker thread ahead of
// the consumer, bounded queue of 4. All randomness is drawn on the producer
// in batch order, so the stream equals the synchronous one bit for bit.
class PrefetchQueue {
  public:
    struct Item {
        Tensor batch;
        std::vector<int> labels;
    };

    PrefetchQueue(const LabeledImageSet& set,
                  std::vector<std::vector<std::size_t>> batches,
                  const AugmentConfig& cfg, Rng& rng, bool train);
    ~PrefetchQueue();

    // Empty when the epoch is exhausted.
    std::optional<Item> next();

  private:
    std::mutex mu_;
    std::condition_variable cv_;
    std::queue<Item> queue_;
    bool done_ = false;
    std::size_t pending_ = 0;
    std::thread worker_;
    static constexpr std::size_t kCapacity = 4;
};

}  // namespace mhgd
