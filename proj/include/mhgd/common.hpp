// Copyright (c) 2026 the mhgd authors
// SPDX-License-Identifier: Apache-2.0
//
// Shared primitives: error types, seeded RNG, checked-mode diagnostics,
// and the bounded thread helper used by the heavy kernels.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace mhgd {

// ----------------------------------------------------------------------------
// Errors

class Error : public std::runtime_error {
  public:
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Shape/dimension mismatch between operands.
class ShapeError : public Error {
  public:
    using Error::Error;
};

// Value outside an op's mathematical domain (checked mode).
class DomainError : public Error {
  public:
    using Error::Error;
};

// Out-of-range index (labels, lookups).
class IndexError : public Error {
  public:
    using Error::Error;
};

// API contract violation (e.g. backprop on a non-scalar root).
class ContractError : public Error {
  public:
    using Error::Error;
};

// Invalid configuration: bad keys, inconsistent dimensions, missing files.
class ConfigError : public Error {
  public:
    using Error::Error;
};

// Requested SVD rank is numerically unsupported by the input spectrum.
class DegenerateRankError : public Error {
  public:
    using Error::Error;
};

// Malformed external data (dataset files).
class FormatError : public Error {
  public:
    using Error::Error;
};

// Corrupt or incompatible checkpoint file.
class CheckpointError : public Error {
  public:
    using Error::Error;
};

// Unrecoverable training failure (NaN loss, excessive skipped batches).
class TrainingAbort : public Error {
  public:
    using Error::Error;
};

// ----------------------------------------------------------------------------
// Seeded RNG
//
// One wrapper so every random draw in the project flows through a stream that
// can be serialized bit-exactly for checkpoint resume.

class Rng {
  public:
    Rng() : engine_(0x9e3779b97f4a7c15ull) {}
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    std::uint64_t next_u64() { return engine_(); }

    // Uniform in [0, 1) with 53 random bits.
    double uniform01() {
        return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
    }

    // Uniform integer in [0, n).
    std::uint64_t below(std::uint64_t n) {
        return n <= 1 ? 0 : engine_() % n;
    }

    // Standard normal via Box-Muller with a cached spare.
    double gaussian() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = uniform01();
        double u2 = uniform01();
        // Avoid log(0).
        double r = std::sqrt(-2.0 * std::log(1.0 - u1));
        double a = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(a);
        has_spare_ = true;
        return r * std::cos(a);
    }

    template <class It>
    void shuffle(It first, It last) {
        auto n = static_cast<std::uint64_t>(last - first);
        for (std::uint64_t i = n; i > 1; --i) {
            std::swap(first[i - 1], first[below(i)]);
        }
    }

    std::string serialize() const {
        std::ostringstream os;
        os << engine_ << " " << (has_spare_ ? 1 : 0) << " ";
        // Hex bit pattern keeps the spare exact across the round trip.
        std::uint64_t bits = 0;
        static_assert(sizeof(bits) == sizeof(spare_));
        std::memcpy(&bits, &spare_, sizeof(bits));
        os << std::hex << bits;
        return os.str();
    }

    static Rng deserialize(const std::string& text) {
        Rng r;
        std::istringstream is(text);
        is >> r.engine_;
        int has = 0;
        is >> has;
        r.has_spare_ = has != 0;
        std::uint64_t bits = 0;
        is >> std::hex >> bits;
        std::memcpy(&r.spare_, &bits, sizeof(bits));
        if (!is) {
            throw CheckpointError("rng state: unparseable serialization");
        }
        return r;
    }

  private:
    std::mt19937_64 engine_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

// ----------------------------------------------------------------------------
// Checked mode
//
// Opt-in validation layer: finite-value checks, domain checks, and counters
// for soft diagnostics (e.g. zero rows hitting the normalization guard).

struct Diagnostics {
    std::uint64_t zero_norm_rows = 0;

    void reset() { *this = Diagnostics{}; }
};

namespace detail {
inline bool& checked_flag() {
    thread_local bool flag = false;
    return flag;
}
inline Diagnostics& diagnostics_slot() {
    thread_local Diagnostics d;
    return d;
}
}  // namespace detail

inline bool checked_mode() { return detail::checked_flag(); }
inline Diagnostics& diagnostics() { return detail::diagnostics_slot(); }

class CheckedModeGuard {
  public:
    explicit CheckedModeGuard(bool on = true) : prev_(detail::checked_flag()) {
        detail::checked_flag() = on;
    }
    ~CheckedModeGuard() { detail::checked_flag() = prev_; }
    CheckedModeGuard(const CheckedModeGuard&) = delete;
    CheckedModeGuard& operator=(const CheckedModeGuard&) = delete;

  private:
    bool prev_;
};

// ----------------------------------------------------------------------------
// Bounded parallel helper
//
// Splits [0, n) into contiguous chunks, one worker thread per chunk. Callers
// must only write disjoint data per index, which keeps results bit-identical
// for any thread count. MHGD_THREADS caps the worker count.

inline int max_threads() {
    static const int cached = [] {
        int hw = static_cast<int>(std::thread::hardware_concurrency());
        if (hw <= 0) hw = 1;
        if (const char* env = std::getenv("MHGD_THREADS")) {
            int cap = std::atoi(env);
            if (cap >= 1 && cap < hw) hw = cap;
        }
        return hw;
    }();
    return cached;
}

template <class Fn>
void parallel_for(std::size_t n, Fn&& fn) {
    const std::size_t workers =
        std::min<std::size_t>(static_cast<std::size_t>(max_threads()), n);
    if (workers <= 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::vector<std::thread> pool;
    pool.reserve(workers);
    const std::size_t chunk = (n + workers - 1) / workers;
    for (std::size_t w = 0; w < workers; ++w) {
        const std::size_t lo = w * chunk;
        const std::size_t hi = std::min(n, lo + chunk);
        if (lo >= hi) break;
        pool.emplace_back([lo, hi, &fn] {
            for (std::size_t i = lo; i < hi; ++i) fn(i);
        });
    }
    for (auto& t : pool) t.join();
}

// ----------------------------------------------------------------------------
// Small utilities

// FNV-1a over raw bytes; used for config identity hashes.
inline std::uint64_t fnv1a64(const void* data, std::size_t n) {
    const auto* p = static_cast<const unsigned char*>(data);
    std::uint64_t h = 1469598103934665603ull;
    for (std::size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 1099511628211ull;
    }
    return h;
}

inline std::string to_hex(std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
    return std::string(buf);
}

}  // namespace mhgd
