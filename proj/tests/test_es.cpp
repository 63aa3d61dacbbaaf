// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <algorithm>
#include <cstdint>
#include <vector>

#include "doctest.h"
#include "moewb/corpus.hpp"
#include "moewb/error.hpp"
#include "moewb/es_analysis.hpp"
#include "moewb/model.hpp"
#include "moewb/util.hpp"

using namespace moewb;

namespace {

// Hand-built single-layer trace from explicit top-K selections.
RoutingTrace trace_from(const std::vector<std::vector<uint32_t>>& selections, size_t n_experts) {
    RoutingTrace t;
    t.top_k = selections.empty() ? 0 : selections[0].size();
    LayerTrace lt;
    lt.scores = Matrix(selections.size(), n_experts);
    for (size_t tok = 0; tok < selections.size(); ++tok) {
        float w = 1.0f / float(t.top_k);
        for (uint32_t e : selections[tok]) lt.scores.at(tok, e) = w;
        for (uint32_t e : selections[tok]) lt.selected.push_back(e);
    }
    t.layers.push_back(std::move(lt));
    return t;
}

RoutingTrace random_trace(size_t layers, size_t tokens, size_t n, size_t k, uint64_t seed) {
    SplitMix64 rng(seed);
    RoutingTrace t;
    t.top_k = k;
    for (size_t l = 0; l < layers; ++l) {
        LayerTrace lt;
        lt.scores = Matrix(tokens, n);
        for (size_t tok = 0; tok < tokens; ++tok) {
            std::vector<uint32_t> pool(n);
            for (size_t i = 0; i < n; ++i) pool[i] = uint32_t(i);
            for (size_t i = 0; i < k; ++i) {
                size_t j = i + size_t(rng.next_below(n - i));
                std::swap(pool[i], pool[j]);
                lt.selected.push_back(pool[i]);
                lt.scores.at(tok, pool[i]) = 1.0f / float(k);
            }
        }
        t.layers.push_back(std::move(lt));
    }
    return t;
}

}  // namespace

TEST_CASE("frequency profile conserves counts and normalizes") {
    RoutingTrace t = random_trace(3, 50, 8, 2, 17);
    std::vector<RoutingTrace> ts;
    ts.push_back(t);
    FrequencyProfile p = frequency_profile(ts);
    REQUIRE(p.counts.size() == 3);
    for (size_t l = 0; l < 3; ++l) {
        uint64_t sum = 0;
        for (uint64_t c : p.counts[l]) sum += c;
        CHECK(sum == 50 * 2);
        double psum = 0;
        for (double v : p.p[l]) psum += v;
        CHECK(psum == doctest::Approx(1.0).epsilon(1e-9));
    }
    CHECK(p.flattened.size() == 3 * 8);
}

TEST_CASE("profile similarity: identity, disjoint support, symmetry, zero error") {
    RoutingTrace a = trace_from({{0, 1}, {0, 1}}, 8);
    RoutingTrace b = trace_from({{2, 3}, {2, 3}}, 8);
    FrequencyProfile pa = frequency_profile(a);
    FrequencyProfile pb = frequency_profile(b);
    CHECK(profile_similarity(pa, pa) == doctest::Approx(1.0).epsilon(1e-9));
    CHECK(profile_similarity(pa, pb) == doctest::Approx(0.0).epsilon(1e-9));
    CHECK(profile_similarity(pa, pb) == doctest::Approx(profile_similarity(pb, pa)));
    FrequencyProfile zero = pa;
    for (auto& v : zero.flattened) v = 0.0;
    CHECK_THROWS_AS(profile_similarity(pa, zero), NumericError);
}

TEST_CASE("change rates on identical traces are zero") {
    RoutingTrace t = random_trace(2, 30, 8, 2, 23);
    ChangeRateReport r = change_rates(t, t);
    CHECK(r.overall.all_changed == 0.0);
    CHECK(r.overall.any_changed == 0.0);
    CHECK(r.overall.half_changed == 0.0);
}

TEST_CASE("change rates classify partial and full set replacement") {
    // K=2: {1,3} -> {1,5} keeps one selection; {1,3} -> {4,5} replaces both.
    RoutingTrace ref = trace_from({{1, 3}, {1, 3}}, 8);
    RoutingTrace partial = trace_from({{1, 5}, {1, 3}}, 8);
    ChangeRateReport r1 = change_rates(ref, partial);
    CHECK(r1.overall.all_changed == 0.0);
    CHECK(r1.overall.any_changed == doctest::Approx(0.5));
    CHECK(r1.overall.half_changed == doctest::Approx(0.5));

    RoutingTrace full = trace_from({{4, 5}, {1, 3}}, 8);
    ChangeRateReport r2 = change_rates(ref, full);
    CHECK(r2.overall.all_changed == doctest::Approx(0.5));
    CHECK(r2.overall.any_changed == doctest::Approx(0.5));
    CHECK(r2.overall.half_changed == doctest::Approx(0.5));
}

TEST_CASE("selection order within the top-K set does not matter") {
    RoutingTrace a = trace_from({{1, 3}}, 8);
    RoutingTrace b = trace_from({{3, 1}}, 8);
    ChangeRateReport r = change_rates(a, b);
    CHECK(r.overall.any_changed == 0.0);
}

TEST_CASE("change rates reject misaligned traces") {
    RoutingTrace a = random_trace(2, 10, 8, 2, 31);
    RoutingTrace b = random_trace(3, 10, 8, 2, 32);
    CHECK_THROWS_AS(change_rates(a, b), ArgumentError);
    RoutingTrace c = random_trace(2, 11, 8, 2, 33);
    CHECK_THROWS_AS(change_rates(a, c), ArgumentError);
}

TEST_CASE("rate ordering holds on random trace pairs") {
    for (uint64_t s = 0; s < 50; ++s) {
        size_t k = 1 + s % 4;
        RoutingTrace a = random_trace(2, 40, 8, k, 100 + s);
        RoutingTrace b = random_trace(2, 40, 8, k, 200 + s);
        ChangeRateReport r = change_rates(a, b);
        CHECK(r.overall.all_changed <= r.overall.half_changed + 1e-12);
        CHECK(r.overall.half_changed <= r.overall.any_changed + 1e-12);
        for (const auto& pl : r.per_layer) {
            CHECK(pl.all_changed <= pl.half_changed + 1e-12);
            CHECK(pl.half_changed <= pl.any_changed + 1e-12);
        }
    }
}

TEST_CASE("permuting the dataset order permutes the similarity matrix consistently") {
    std::vector<FrequencyProfile> profs;
    for (uint64_t s = 0; s < 4; ++s) {
        profs.push_back(frequency_profile(random_trace(2, 30, 8, 2, 300 + s)));
    }
    double m01 = profile_similarity(profs[0], profs[1]);
    double m23 = profile_similarity(profs[2], profs[3]);
    std::vector<size_t> perm = {2, 0, 3, 1};
    // after the permutation, datasets 0,1 sit at positions 1,3 and 2,3 at 0,2
    CHECK(profile_similarity(profs[perm[1]], profs[perm[3]]) == doctest::Approx(m01));
    CHECK(profile_similarity(profs[perm[0]], profs[perm[2]]) == doctest::Approx(m23));
}

TEST_CASE("degenerate shift grid: identical models give four equal perplexities") {
    ModelConfig cfg;
    MoEModel m = init_planted(cfg, 71);
    auto corpus = gen_mixed_corpus(3, 96, cfg.vocab_size, cfg.num_experts, 0.9, 72);
    ShiftGrid g = expert_shift_grid(m, m, corpus);
    CHECK(g.fp_own == g.fp_forced_q);
    CHECK(g.fp_own == g.q_forced_fp);
    CHECK(g.fp_own == g.q_own);
}

TEST_CASE("shift grid rejects mismatched configs") {
    ModelConfig cfg;
    MoEModel a = init_planted(cfg, 73);
    ModelConfig cfg2 = cfg;
    cfg2.num_experts = 4;
    MoEModel b = init_planted(cfg2, 73);
    auto corpus = gen_mixed_corpus(2, 64, cfg.vocab_size, cfg.num_experts, 0.9, 74);
    CHECK_THROWS_AS(expert_shift_grid(a, b, corpus), ArgumentError);
}

TEST_CASE("family-grouped corpora cluster: intra-family similarity beats inter-family") {
    ModelConfig cfg;
    MoEModel m = init_planted(cfg, 1, 1.0f);
    // 4 families x 2 documents on the 8-expert model
    std::vector<FrequencyProfile> profs;
    std::vector<size_t> fam;
    for (size_t f = 0; f < 4; ++f) {
        for (size_t d = 0; d < 2; ++d) {
            auto doc = gen_family_doc(f, 4, 192, cfg.vocab_size, 0.95, 900 + f * 10 + d);
            std::vector<RoutingTrace> tr;
            tr.push_back(forward(m, doc).trace);
            profs.push_back(frequency_profile(tr));
            fam.push_back(f);
        }
    }
    double intra = 0, inter = 0;
    size_t n_intra = 0, n_inter = 0;
    for (size_t i = 0; i < profs.size(); ++i) {
        for (size_t j = i + 1; j < profs.size(); ++j) {
            double s = profile_similarity(profs[i], profs[j]);
            if (fam[i] == fam[j]) {
                intra += s;
                ++n_intra;
            } else {
                inter += s;
                ++n_inter;
            }
        }
    }
    CHECK(intra / double(n_intra) > inter / double(n_inter));
}
