// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <cstdlib>
#include <cstring>
#include <functional>
#include <string>
#include <thread>
#include <vector>

namespace moewb {

// SplitMix64: tiny deterministic PRNG with a portable, platform-independent
// output sequence. We deliberately avoid std::uniform_* distributions, whose
// streams differ across standard libraries.
struct SplitMix64 {
    uint64_t state;

    explicit SplitMix64(uint64_t seed) : state(seed) {}

    uint64_t next_u64() {
        state += 0x9e3779b97f4a7c15ULL;
        uint64_t z = state;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    // Uniform in [0, 1). 53 mantissa bits, exact in double and float-safe.
    double next_unit() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    // Uniform in [lo, hi).
    double next_range(double lo, double hi) {
        return lo + (hi - lo) * next_unit();
    }

    // Uniform integer in [0, n). Rejection-free modulo is fine here: n is
    // always tiny (vocab size, expert count) relative to 2^64, so bias is
    // far below anything observable.
    uint64_t next_below(uint64_t n) { return next_u64() % n; }

    // Derive an independent child stream. Mixing with a distinct odd
    // constant keeps child streams decorrelated from the parent.
    SplitMix64 fork(uint64_t salt) {
        uint64_t s = next_u64();
        return SplitMix64(s ^ (salt * 0x9e3779b97f4a7c15ULL + 0x632be59bd9b4e019ULL));
    }
};

// FNV-1a 64-bit hash over a byte range; used for checkpoint checksums.
inline uint64_t fnv1a64(const void* data, size_t len) {
    const auto* p = static_cast<const unsigned char*>(data);
    uint64_t h = 0xcbf29ce484222325ULL;
    for (size_t i = 0; i < len; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

// Thread count for parallel helpers: hardware_concurrency capped by the
// MOE_EAC_THREADS environment variable (values < 1 are treated as 1).
inline unsigned effective_threads() {
    unsigned hw = std::thread::hardware_concurrency();
    if (hw == 0) hw = 1;
    if (const char* env = std::getenv("MOE_EAC_THREADS")) {
        long cap = std::strtol(env, nullptr, 10);
        if (cap < 1) cap = 1;
        if (static_cast<unsigned long>(cap) < hw) hw = static_cast<unsigned>(cap);
    }
    return hw;
}

// Run fn(i) for i in [0, n) split into contiguous index blocks, one per
// worker. Each index is processed by exactly one worker and writes only
// its own outputs, so results are bitwise identical for any thread count.
inline void parallel_for(size_t n, const std::function<void(size_t)>& fn) {
    unsigned nt = effective_threads();
    if (nt <= 1 || n <= 1) {
        for (size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    if (static_cast<size_t>(nt) > n) nt = static_cast<unsigned>(n);
    std::vector<std::thread> workers;
    workers.reserve(nt);
    size_t chunk = (n + nt - 1) / nt;
    for (unsigned t = 0; t < nt; ++t) {
        size_t lo = static_cast<size_t>(t) * chunk;
        size_t hi = lo + chunk < n ? lo + chunk : n;
        if (lo >= hi) break;
        workers.emplace_back([lo, hi, &fn] {
            for (size_t i = lo; i < hi; ++i) fn(i);
        });
    }
    for (auto& w : workers) w.join();
}

}  // namespace moewb
