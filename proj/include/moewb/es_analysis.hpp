// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <vector>

#include "moewb/model.hpp"

namespace moewb {

// Per-layer expert-selection counts and their normalized distributions.
// `flattened` concatenates the per-layer distributions in layer order, so
// two profiles can be compared with a single cosine.
struct FrequencyProfile {
    std::vector<std::vector<uint64_t>> counts;  // [layer][expert]
    std::vector<std::vector<double>> p;         // per-layer, sums to 1
    std::vector<double> flattened;              // layer-major concat of p
};

FrequencyProfile frequency_profile(const RoutingTrace& trace);
FrequencyProfile frequency_profile(const std::vector<RoutingTrace>& traces);

// Cosine similarity of the flattened distributions. Throws ShapeError on
// dimension mismatch and NumericError if either vector is all zero.
double profile_similarity(const FrequencyProfile& a, const FrequencyProfile& b);

// Fractions of tokens whose top-K set, compared to a reference run:
//   all_changed  — shares no expert with the reference set
//   any_changed  — differs in at least one expert
//   half_changed — at least ceil(K/2) reference selections are missing
// By construction all_changed <= half_changed <= any_changed. For K = 2
// the last two coincide (ceil(K/2) = 1), which reports should note.
struct ChangeRates {
    double all_changed = 0.0;
    double any_changed = 0.0;
    double half_changed = 0.0;
};
struct ChangeRateReport {
    ChangeRates overall;
    std::vector<ChangeRates> per_layer;
};

// Compare two aligned routing traces (same layers, tokens, K). Throws
// ArgumentError on shape mismatch.
ChangeRateReport change_rates(const RoutingTrace& ref, const RoutingTrace& test);
ChangeRateReport change_rates(const std::vector<RoutingTrace>& ref,
                              const std::vector<RoutingTrace>& test);

// Routing traces of a model over a corpus, one per sequence.
std::vector<RoutingTrace> collect_traces(const MoEModel& model,
                                         const std::vector<std::vector<uint32_t>>& corpus);

// Perplexity under four conditions separating weight error from the
// expert-selection shift it induces: each model evaluated with its own
// routing and with the other model's routing decisions replayed.
struct ShiftGrid {
    double fp_own;        // reference model, own routing
    double fp_forced_q;   // reference model, quantized model's routing
    double q_forced_fp;   // quantized model, reference model's routing
    double q_own;         // quantized model, own routing
};
ShiftGrid expert_shift_grid(const MoEModel& model_fp, const MoEModel& model_q,
                            const std::vector<std::vector<uint32_t>>& corpus);

}  // namespace moewb
