// SPDX-License-Identifier: Apache-2.0
#include "moewb/pesf.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "moewb/error.hpp"

namespace moewb {

LayerPrune compute_prune_mask(const std::vector<uint64_t>& counts, size_t l, size_t k, size_t n,
                              double alpha) {
    if (n == 0 || counts.size() != n) throw ArgumentError("prune mask: counts width mismatch");
    if (k == 0 || k > n) throw ArgumentError("prune mask: k out of range");
    if (l == 0) throw ArgumentError("prune mask: empty sequence");
    if (alpha < 0.0 || alpha > 1.0) throw ArgumentError("prune mask: alpha outside [0, 1]");
    uint64_t total = 0;
    for (uint64_t c : counts) total += c;
    if (total != static_cast<uint64_t>(l) * k) {
        throw ConsistencyError("prune mask: counts sum to " + std::to_string(total) +
                               ", expected " + std::to_string(l * k));
    }

    LayerPrune lp;
    lp.counts = counts;
    lp.threshold = static_cast<double>(l) * static_cast<double>(k) / static_cast<double>(n) * alpha;
    lp.keep.assign(n, 0);
    size_t surviving = 0;
    for (size_t i = 0; i < n; ++i) {
        if (!(static_cast<double>(counts[i]) < lp.threshold)) {
            lp.keep[i] = 1;
            ++surviving;
        }
    }
    if (surviving < k) {
        // Floor: keep the K busiest experts, lowest index first on ties.
        // Thresholded survivors have strictly higher counts than any pruned
        // expert, so they are always inside the floored set.
        std::vector<size_t> order(n);
        std::iota(order.begin(), order.end(), size_t{0});
        std::stable_sort(order.begin(), order.end(),
                         [&](size_t a, size_t b) { return counts[a] > counts[b]; });
        lp.keep.assign(n, 0);
        for (size_t j = 0; j < k; ++j) lp.keep[order[j]] = 1;
        lp.floor_applied = true;
    }
    return lp;
}

PrunedRun forward_pruned(const MoEModel& model, const std::vector<uint32_t>& tokens,
                         const PruneConfig& pcfg) {
    if (pcfg.alpha < 0.0 || pcfg.alpha > 1.0) {
        throw ArgumentError("forward_pruned: alpha outside [0, 1]");
    }
    const ModelConfig& cfg = model.config;
    PrunedRun run;
    run.mask.layers.resize(cfg.num_layers);

    ForwardHooks hooks;
    hooks.renormalize = pcfg.renormalize;
    if (pcfg.alpha > 0.0) {
        hooks.mask_policy = [&](size_t layer, const std::vector<uint64_t>& counts, size_t l,
                                const Matrix&) {
            LayerPrune lp = compute_prune_mask(counts, l, cfg.top_k, cfg.num_experts, pcfg.alpha);
            std::vector<uint8_t> keep = lp.keep;
            run.mask.layers[layer] = std::move(lp);
            return keep;
        };
    }
    ForwardResult r = forward_hooked(model, tokens, hooks);
    if (pcfg.alpha == 0.0) {
        // Disabled pruning never installs a mask policy, so the pass above
        // is the plain dense pass; record the trivial all-keep mask.
        for (size_t l = 0; l < cfg.num_layers; ++l) {
            run.mask.layers[l].counts = r.stats.layer_counts[l];
            run.mask.layers[l].keep.assign(cfg.num_experts, 1);
            run.mask.layers[l].threshold = 0.0;
        }
    }
    run.logits = std::move(r.logits);
    run.trace = std::move(r.trace);
    run.flops = r.stats.expert_executions * expert_mac_cost(cfg);
    run.flops_dense = static_cast<uint64_t>(tokens.size()) * cfg.top_k * cfg.num_layers *
                      expert_mac_cost(cfg);
    run.fallback_tokens = r.stats.fallback_tokens;
    for (const LayerPrune& lp : run.mask.layers) {
        for (size_t e = 0; e < lp.keep.size(); ++e) {
            if (!lp.keep[e]) run.dropped_selections += lp.counts[e];
        }
    }
    return run;
}

double pruning_rate(const PruneMask& mask) {
    if (mask.layers.empty()) throw ArgumentError("pruning_rate: empty mask");
    double acc = 0.0;
    for (const LayerPrune& lp : mask.layers) {
        if (lp.keep.empty()) throw ArgumentError("pruning_rate: layer with no experts");
        size_t pruned = 0;
        for (uint8_t kf : lp.keep) {
            if (!kf) ++pruned;
        }
        acc += static_cast<double>(pruned) / static_cast<double>(lp.keep.size());
    }
    return acc / static_cast<double>(mask.layers.size());
}

PrunedEval evaluate_pruned(const MoEModel& model, const std::vector<std::vector<uint32_t>>& corpus,
                           const PruneConfig& pcfg) {
    if (corpus.empty()) throw ArgumentError("evaluate_pruned: empty corpus");
    PrunedEval ev;
    double nll = 0.0, rate_acc = 0.0;
    size_t predictions = 0;
    for (const auto& seq : corpus) {
        PrunedRun run = forward_pruned(model, seq, pcfg);
        if (seq.size() >= 2) {
            nll += sequence_nll(run.logits, seq);
            predictions += seq.size() - 1;
        }
        rate_acc += pruning_rate(run.mask);
        ev.flops += run.flops;
        ev.flops_dense += run.flops_dense;
        ev.fallback_tokens += run.fallback_tokens;
        ev.dropped_selections += run.dropped_selections;
    }
    if (predictions == 0) throw ArgumentError("evaluate_pruned: corpus yields no predictions");
    ev.ppl = std::exp(nll / static_cast<double>(predictions));
    ev.mean_pruning_rate = rate_acc / static_cast<double>(corpus.size());
    return ev;
}

}  // namespace moewb
