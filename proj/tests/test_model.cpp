// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
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

std::vector<uint32_t> random_tokens(size_t n, size_t vocab, uint64_t seed) {
    std::vector<uint32_t> t(n);
    SplitMix64 rng(seed);
    for (auto& x : t) x = static_cast<uint32_t>(rng.next_below(vocab));
    return t;
}

bool bitwise_equal(const Matrix& a, const Matrix& b) {
    return a.same_shape(b) && a.data == b.data;
}

}  // namespace

TEST_CASE("config validation rejects structural violations") {
    ModelConfig cfg;
    cfg.validate();  // defaults are fine
    ModelConfig bad = cfg;
    bad.top_k = 9;
    CHECK_THROWS_AS(bad.validate(), ArgumentError);
    bad = cfg;
    bad.hidden_dim = 66;  // not divisible by heads
    CHECK_THROWS_AS(bad.validate(), ArgumentError);
    bad = cfg;
    bad.vocab_size = 1;
    CHECK_THROWS_AS(bad.validate(), ArgumentError);
    bad = cfg;
    bad.num_layers = 0;
    CHECK_THROWS_AS(bad.validate(), ArgumentError);
}

TEST_CASE("planted init is deterministic per seed") {
    ModelConfig cfg;
    MoEModel a = init_planted(cfg, 3);
    MoEModel b = init_planted(cfg, 3);
    MoEModel c = init_planted(cfg, 4);
    CHECK(a.embed.data == b.embed.data);
    CHECK(a.layers[2].router.data == b.layers[2].router.data);
    CHECK(a.layers[1].experts[5].gate.dense.data == b.layers[1].experts[5].gate.dense.data);
    CHECK(a.embed.data != c.embed.data);
}

TEST_CASE("forward validates inputs") {
    ModelConfig cfg;
    MoEModel m = init_planted(cfg, 1);
    CHECK_THROWS_AS(forward(m, {}), ArgumentError);
    CHECK_THROWS_AS(forward(m, {999}), ArgumentError);
    CHECK_THROWS_AS(forward(m, std::vector<uint32_t>(cfg.max_seq_len + 1, 0)), ArgumentError);
}

TEST_CASE("forward emits logits, scores and selections of the right shape") {
    ModelConfig cfg;
    MoEModel m = init_planted(cfg, 1);
    auto toks = random_tokens(40, cfg.vocab_size, 9);
    ForwardResult r = forward(m, toks);
    CHECK(r.logits.rows == 40);
    CHECK(r.logits.cols == cfg.vocab_size);
    REQUIRE(r.trace.layers.size() == cfg.num_layers);
    CHECK(r.trace.top_k == cfg.top_k);
    for (const auto& lt : r.trace.layers) {
        CHECK(lt.scores.rows == 40);
        CHECK(lt.scores.cols == cfg.num_experts);
        CHECK(lt.selected.size() == 40 * cfg.top_k);
        for (size_t t = 0; t < 40; ++t) {
            double sum = 0;
            for (size_t e = 0; e < cfg.num_experts; ++e) sum += lt.scores.at(t, e);
            CHECK(sum == doctest::Approx(1.0).epsilon(1e-5));
        }
    }
    CHECK(r.stats.expert_executions == 40 * cfg.top_k * cfg.num_layers);
}

TEST_CASE("replaying a model's own trace reproduces forward bitwise") {
    ModelConfig cfg;
    MoEModel m = init_planted(cfg, 11);
    auto toks = random_tokens(64, cfg.vocab_size, 12);
    ForwardResult r = forward(m, toks);
    Matrix replay = forward_with_forced_routing(m, toks, r.trace);
    CHECK(bitwise_equal(replay, r.logits));
}

TEST_CASE("forcing a different model's trace changes the outcome") {
    ModelConfig cfg;
    MoEModel a = init_planted(cfg, 21);
    MoEModel b = init_planted(cfg, 22);
    auto toks = random_tokens(64, cfg.vocab_size, 23);
    ForwardResult ra = forward(a, toks);
    ForwardResult rb = forward(b, toks);
    Matrix forced = forward_with_forced_routing(a, toks, rb.trace);
    CHECK_FALSE(bitwise_equal(forced, ra.logits));
}

TEST_CASE("forced trace shape mismatches are rejected") {
    ModelConfig cfg;
    MoEModel m = init_planted(cfg, 31);
    auto toks = random_tokens(16, cfg.vocab_size, 32);
    ForwardResult r = forward(m, toks);
    RoutingTrace bad_k = r.trace;
    bad_k.top_k = 3;
    CHECK_THROWS_AS(forward_with_forced_routing(m, toks, bad_k), ArgumentError);
    RoutingTrace bad_layers = r.trace;
    bad_layers.layers.pop_back();
    CHECK_THROWS_AS(forward_with_forced_routing(m, toks, bad_layers), ArgumentError);
    RoutingTrace bad_tokens = r.trace;
    toks.push_back(0);
    CHECK_THROWS_AS(forward_with_forced_routing(m, toks, bad_tokens), ArgumentError);
}

TEST_CASE("single-token expert block matches the batched row bitwise") {
    ModelConfig cfg;
    MoEModel m = init_planted(cfg, 41);
    SplitMix64 rng(42);
    Matrix xm(5, cfg.hidden_dim);
    fill_uniform(xm, rng, -1.0f, 1.0f);
    LayerTrace lt;
    Matrix batched = moe_apply(m, 2, xm, &lt);
    for (size_t t = 0; t < xm.rows; ++t) {
        std::vector<float> x(xm.row(t), xm.row(t) + cfg.hidden_dim);
        RoutingTrace single;
        std::vector<float> y = moe_layer_forward(m, 2, x, &single);
        for (size_t d = 0; d < cfg.hidden_dim; ++d) CHECK(y[d] == batched.at(t, d));
        for (size_t k = 0; k < cfg.top_k; ++k) {
            CHECK(single.layers[0].selected[k] == lt.selected[t * cfg.top_k + k]);
        }
    }
}

TEST_CASE("attention is causal: logits at t ignore future tokens") {
    ModelConfig cfg;
    MoEModel m = init_planted(cfg, 51);
    auto toks = random_tokens(32, cfg.vocab_size, 52);
    ForwardResult full = forward(m, toks);
    auto mutated = toks;
    mutated[20] = (mutated[20] + 7) % cfg.vocab_size;
    ForwardResult mut = forward(m, mutated);
    for (size_t t = 0; t < 20; ++t) {
        for (size_t v = 0; v < cfg.vocab_size; ++v) {
            REQUIRE(full.logits.at(t, v) == mut.logits.at(t, v));
        }
    }
}

TEST_CASE("family documents route to their planted expert in layer 0") {
    ModelConfig cfg;
    for (uint64_t seed : {1, 2, 3}) {
        MoEModel m = init_planted(cfg, seed, 1.0f);
        for (size_t fam = 0; fam < cfg.num_experts; ++fam) {
            auto doc = gen_family_doc(fam, cfg.num_experts, 128, cfg.vocab_size, 0.95,
                                      seed * 100 + fam);
            ForwardResult r = forward(m, doc);
            std::vector<RoutingTrace> tr;
            tr.push_back(r.trace);
            FrequencyProfile prof = frequency_profile(tr);
            size_t best = 0;
            for (size_t e = 1; e < cfg.num_experts; ++e) {
                if (prof.counts[0][e] > prof.counts[0][best]) best = e;
            }
            CHECK(best == fam);
        }
    }
}

TEST_CASE("perplexity is lower on matched family corpora than on uniform bytes") {
    ModelConfig cfg;
    int wins = 0;
    for (uint64_t seed = 1; seed <= 5; ++seed) {
        MoEModel m = init_planted(cfg, seed, 1.0f);
        auto matched = gen_mixed_corpus(4, 192, cfg.vocab_size, cfg.num_experts, 0.9, seed * 10);
        std::vector<std::vector<uint32_t>> random_bytes;
        for (int i = 0; i < 4; ++i) {
            random_bytes.push_back(random_tokens(192, cfg.vocab_size, seed * 10 + 100 + i));
        }
        if (perplexity(m, matched) < perplexity(m, random_bytes)) ++wins;
    }
    CHECK(wins >= 3);
}

TEST_CASE("perplexity rejects an empty corpus and singleton sequences") {
    ModelConfig cfg;
    MoEModel m = init_planted(cfg, 61);
    CHECK_THROWS_AS(perplexity(m, {}), ArgumentError);
    std::vector<std::vector<uint32_t>> singles = {{5}};
    CHECK_THROWS_AS(perplexity(m, singles), ArgumentError);
}

TEST_CASE("dense expert flop count is layers * K * tokens * per-expert cost") {
    ModelConfig cfg;
    MoEModel m = init_planted(cfg, 71);
    auto toks = random_tokens(50, cfg.vocab_size, 72);
    uint64_t f = count_expert_flops(m, toks);
    CHECK(f == cfg.num_layers * cfg.top_k * 50 * expert_mac_cost(cfg));
}

TEST_CASE("sequence nll sums next-token terms of the prefill logits") {
    ModelConfig cfg;
    MoEModel m = init_planted(cfg, 81);
    auto toks = random_tokens(8, cfg.vocab_size, 82);
    ForwardResult r = forward(m, toks);
    double nll = sequence_nll(r.logits, toks);
    CHECK(nll > 0.0);
    // a 2-token sequence has exactly one predicted position
    std::vector<uint32_t> two = {toks[0], toks[1]};
    ForwardResult r2 = forward(m, two);
    double nll2 = sequence_nll(r2.logits, two);
    Matrix p = softmax_rows(r2.logits);
    CHECK(nll2 == doctest::Approx(-std::log(double(p.at(0, toks[1])))).epsilon(1e-5));
}
