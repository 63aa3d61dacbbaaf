// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "moewb/model.hpp"
#include "moewb/tensor.hpp"

namespace moewb {

// Sequence-level expert pruning settings. alpha == 0 disables pruning
// entirely (the forward pass is then the plain dense pass, bit for bit).
struct PruneConfig {
    double alpha = 0.0;       // threshold fraction in [0, 1]
    bool renormalize = true;  // renormalize surviving selection weights
};

// One layer's pruning decision for one sequence.
struct LayerPrune {
    std::vector<uint64_t> counts;  // selection counts per expert
    std::vector<uint8_t> keep;     // 1 = expert stays active
    double threshold = 0.0;        // (l*K/N) * alpha
    bool floor_applied = false;    // true when the top-K floor forced survivors
};

struct PruneMask {
    std::vector<LayerPrune> layers;
};

// Threshold rule: expert i is pruned iff counts[i] < (l*K/N)*alpha
// (strictly below — a count exactly at the threshold survives). If fewer
// than K experts would survive, the K highest-count experts are kept
// instead (ties toward the lower index). Throws ConsistencyError unless
// counts sum to l*K; ArgumentError for alpha outside [0, 1] or degenerate
// k/n.
LayerPrune compute_prune_mask(const std::vector<uint64_t>& counts, size_t l, size_t k, size_t n,
                              double alpha);

// Prefill with per-layer two-phase pruning: phase 1 routes every token and
// accumulates selection counts; phase 2 drops pruned experts, renormalizes
// each token's surviving selection weights (or keeps original weights when
// renormalize is off), and falls back to the highest-scoring surviving
// expert with weight 1 for tokens whose whole selection was pruned.
struct PrunedRun {
    Matrix logits;
    RoutingTrace trace;
    PruneMask mask;
    uint64_t flops = 0;                // executed expert MACs
    uint64_t flops_dense = 0;          // analytic dense cost: l * K * per-expert MACs
    uint64_t fallback_tokens = 0;      // tokens whose every selection was pruned
    uint64_t dropped_selections = 0;   // (token, expert) selections that were pruned
};
PrunedRun forward_pruned(const MoEModel& model, const std::vector<uint32_t>& tokens,
                         const PruneConfig& pcfg);

// Pruned-expert share averaged over layers. Throws ArgumentError on an
// empty mask.
double pruning_rate(const PruneMask& mask);

// Corpus-level run: every sequence gets its own mask (pruning is a
// per-sequence decision); perplexity is over all predicted positions.
struct PrunedEval {
    double ppl = 0.0;
    double mean_pruning_rate = 0.0;  // mean of per-sequence pruning rates
    uint64_t flops = 0;
    uint64_t flops_dense = 0;
    uint64_t fallback_tokens = 0;
    uint64_t dropped_selections = 0;
};
PrunedEval evaluate_pruned(const MoEModel& model, const std::vector<std::vector<uint32_t>>& corpus,
                           const PruneConfig& pcfg);

}  // namespace moewb
