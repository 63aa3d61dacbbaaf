// SPDX-License-Identifier: Apache-2.0
#include "moewb/es_analysis.hpp"

#include <algorithm>
#include <cmath>

#include "moewb/error.hpp"

namespace moewb {

namespace {

void accumulate_counts(const RoutingTrace& trace, std::vector<std::vector<uint64_t>>& counts) {
    if (counts.empty()) {
        counts.assign(trace.layers.size(), {});
        for (size_t l = 0; l < trace.layers.size(); ++l) {
            counts[l].assign(trace.layers[l].scores.cols, 0);
        }
    }
    if (counts.size() != trace.layers.size()) {
        throw ArgumentError("frequency_profile: traces disagree on layer count");
    }
    for (size_t l = 0; l < trace.layers.size(); ++l) {
        for (uint32_t e : trace.layers[l].selected) ++counts[l][e];
    }
}

FrequencyProfile finalize_profile(std::vector<std::vector<uint64_t>> counts) {
    FrequencyProfile fp;
    fp.counts = std::move(counts);
    fp.p.resize(fp.counts.size());
    for (size_t l = 0; l < fp.counts.size(); ++l) {
        uint64_t total = 0;
        for (uint64_t c : fp.counts[l]) total += c;
        fp.p[l].resize(fp.counts[l].size(), 0.0);
        if (total > 0) {
            for (size_t e = 0; e < fp.counts[l].size(); ++e) {
                fp.p[l][e] = static_cast<double>(fp.counts[l][e]) / static_cast<double>(total);
            }
        }
        fp.flattened.insert(fp.flattened.end(), fp.p[l].begin(), fp.p[l].end());
    }
    return fp;
}

// Per-(layer, token) event tallies for the three change metrics.
struct RateTally {
    uint64_t tokens = 0, all = 0, any = 0, half = 0;
    ChangeRates rates() const {
        ChangeRates r;
        if (tokens > 0) {
            r.all_changed = static_cast<double>(all) / static_cast<double>(tokens);
            r.any_changed = static_cast<double>(any) / static_cast<double>(tokens);
            r.half_changed = static_cast<double>(half) / static_cast<double>(tokens);
        }
        return r;
    }
};

void tally_pair(const RoutingTrace& ref, const RoutingTrace& test,
                std::vector<RateTally>& per_layer) {
    if (ref.layers.size() != test.layers.size() || ref.top_k != test.top_k) {
        throw ArgumentError("change_rates: trace shapes differ");
    }
    size_t k = ref.top_k;
    size_t half_thresh = (k + 1) / 2;
    if (per_layer.empty()) per_layer.resize(ref.layers.size());
    for (size_t l = 0; l < ref.layers.size(); ++l) {
        const auto& rsel = ref.layers[l].selected;
        const auto& tsel = test.layers[l].selected;
        if (rsel.size() != tsel.size()) {
            throw ArgumentError("change_rates: token counts differ at layer " + std::to_string(l));
        }
        size_t tokens = rsel.size() / k;
        RateTally& tal = per_layer[l];
        for (size_t t = 0; t < tokens; ++t) {
            size_t missing = 0;
            for (size_t i = 0; i < k; ++i) {
                uint32_t e = rsel[t * k + i];
                bool found = false;
                for (size_t j = 0; j < k; ++j) {
                    if (tsel[t * k + j] == e) {
                        found = true;
                        break;
                    }
                }
                if (!found) ++missing;
            }
            ++tal.tokens;
            if (missing == k) ++tal.all;
            if (missing >= 1) ++tal.any;
            if (missing >= half_thresh) ++tal.half;
        }
    }
}

ChangeRateReport finalize_rates(const std::vector<RateTally>& per_layer) {
    ChangeRateReport rep;
    RateTally overall;
    for (const RateTally& t : per_layer) {
        rep.per_layer.push_back(t.rates());
        overall.tokens += t.tokens;
        overall.all += t.all;
        overall.any += t.any;
        overall.half += t.half;
    }
    rep.overall = overall.rates();
    return rep;
}

}  // namespace

FrequencyProfile frequency_profile(const RoutingTrace& trace) {
    if (trace.layers.empty()) throw ArgumentError("frequency_profile: empty trace");
    std::vector<std::vector<uint64_t>> counts;
    accumulate_counts(trace, counts);
    return finalize_profile(std::move(counts));
}

FrequencyProfile frequency_profile(const std::vector<RoutingTrace>& traces) {
    if (traces.empty()) throw ArgumentError("frequency_profile: no traces");
    std::vector<std::vector<uint64_t>> counts;
    for (const auto& t : traces) accumulate_counts(t, counts);
    return finalize_profile(std::move(counts));
}

double profile_similarity(const FrequencyProfile& a, const FrequencyProfile& b) {
    if (a.flattened.size() != b.flattened.size()) {
        throw ShapeError("profile_similarity: dimension mismatch");
    }
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (size_t i = 0; i < a.flattened.size(); ++i) {
        dot += a.flattened[i] * b.flattened[i];
        na += a.flattened[i] * a.flattened[i];
        nb += b.flattened[i] * b.flattened[i];
    }
    if (na == 0.0 || nb == 0.0) {
        throw NumericError("profile_similarity: zero profile has no direction");
    }
    return dot / (std::sqrt(na) * std::sqrt(nb));
}

ChangeRateReport change_rates(const RoutingTrace& ref, const RoutingTrace& test) {
    std::vector<RateTally> tal;
    tally_pair(ref, test, tal);
    return finalize_rates(tal);
}

ChangeRateReport change_rates(const std::vector<RoutingTrace>& ref,
                              const std::vector<RoutingTrace>& test) {
    if (ref.size() != test.size()) {
        throw ArgumentError("change_rates: sequence counts differ");
    }
    if (ref.empty()) throw ArgumentError("change_rates: no traces");
    std::vector<RateTally> tal;
    for (size_t i = 0; i < ref.size(); ++i) tally_pair(ref[i], test[i], tal);
    return finalize_rates(tal);
}

std::vector<RoutingTrace> collect_traces(const MoEModel& model,
                                         const std::vector<std::vector<uint32_t>>& corpus) {
    std::vector<RoutingTrace> traces;
    traces.reserve(corpus.size());
    for (const auto& seq : corpus) traces.push_back(forward(model, seq).trace);
    return traces;
}

ShiftGrid expert_shift_grid(const MoEModel& model_fp, const MoEModel& model_q,
                            const std::vector<std::vector<uint32_t>>& corpus) {
    if (!(model_fp.config == model_q.config)) {
        throw ArgumentError("expert_shift_grid: model configs differ");
    }
    double nll[4] = {0, 0, 0, 0};
    size_t preds = 0;
    for (const auto& seq : corpus) {
        if (seq.size() < 2) continue;
        ForwardResult own_fp = forward(model_fp, seq);
        ForwardResult own_q = forward(model_q, seq);
        Matrix fp_forced = forward_with_forced_routing(model_fp, seq, own_q.trace);
        Matrix q_forced = forward_with_forced_routing(model_q, seq, own_fp.trace);
        nll[0] += sequence_nll(own_fp.logits, seq);
        nll[1] += sequence_nll(fp_forced, seq);
        nll[2] += sequence_nll(q_forced, seq);
        nll[3] += sequence_nll(own_q.logits, seq);
        preds += seq.size() - 1;
    }
    if (preds == 0) throw ArgumentError("expert_shift_grid: corpus yields no predictions");
    double n = static_cast<double>(preds);
    return ShiftGrid{std::exp(nll[0] / n), std::exp(nll[1] / n), std::exp(nll[2] / n),
                     std::exp(nll[3] / n)};
}

}  // namespace moewb
