// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "doctest.h"
#include "moewb/corpus.hpp"
#include "moewb/error.hpp"
#include "moewb/model.hpp"
#include "moewb/qesc.hpp"
#include "moewb/quant.hpp"
#include "moewb/tensor.hpp"
#include "moewb/util.hpp"

using namespace moewb;

namespace {

Matrix random_matrix(size_t r, size_t c, uint64_t seed, float lo = -1.0f, float hi = 1.0f) {
    Matrix m(r, c);
    SplitMix64 rng(seed);
    fill_uniform(m, rng, lo, hi);
    return m;
}

std::vector<uint32_t> random_tokens(size_t n, size_t vocab, uint64_t seed) {
    std::vector<uint32_t> t(n);
    SplitMix64 rng(seed);
    for (auto& x : t) x = static_cast<uint32_t>(rng.next_below(vocab));
    return t;
}

}  // namespace

TEST_CASE("loss set width resolution") {
    CHECK(resolve_loss_k(0, 2, 8) == 8);    // min(8, 2*2+4)
    CHECK(resolve_loss_k(0, 2, 16) == 8);   // min(16, 8)
    CHECK(resolve_loss_k(0, 1, 4) == 4);    // min(4, 6)
    CHECK(resolve_loss_k(3, 2, 8) == 3);
    CHECK_THROWS_AS(resolve_loss_k(1, 2, 8), ArgumentError);   // below model K
    CHECK_THROWS_AS(resolve_loss_k(9, 2, 8), ArgumentError);   // above N
}

TEST_CASE("top-k logit loss: zero at identity and a hand-checked value") {
    // Router columns are experts: build w so that w^T x gives chosen logits.
    const size_t hidden = 4, n = 4;
    Matrix w_orig(hidden, n), w_cal(hidden, n);
    // x = e_0, so logits are row 0 of each matrix.
    std::vector<float> x = {1, 0, 0, 0};
    float ref[] = {2, 1, 0, -1};
    float cal[] = {1, 1, 1, -1};
    for (size_t j = 0; j < n; ++j) {
        w_orig.at(0, j) = ref[j];
        w_cal.at(0, j) = cal[j];
    }
    CHECK(topk_mse_loss(w_orig, w_orig, x, x, 2) == doctest::Approx(0.0));
    // top-2 of ref = indices 0,1: ((2-1)^2 + (1-1)^2)/2 = 0.5
    CHECK(topk_mse_loss(w_orig, w_cal, x, x, 2) == doctest::Approx(0.5));
    // loss_k = N reduces to the plain MSE over all logits
    double full = 0;
    for (size_t j = 0; j < n; ++j) full += (ref[j] - cal[j]) * (ref[j] - cal[j]);
    CHECK(topk_mse_loss(w_orig, w_cal, x, x, n) == doctest::Approx(full / n));
    CHECK_THROWS_AS(topk_mse_loss(w_orig, w_cal, x, x, 5), ArgumentError);
}

TEST_CASE("calibration with clean activations leaves the router bitwise unchanged") {
    Matrix w = random_matrix(64, 8, 91);
    Matrix x = random_matrix(200, 64, 92);
    CalibConfig cfg;
    cfg.steps = 20;
    LayerCalibRecord rec;
    Matrix out = calibrate_router(w, x, x, cfg, 2, &rec);
    CHECK(out.data == w.data);
    CHECK(rec.loss_before == doctest::Approx(0.0));
    CHECK(rec.loss_after == doctest::Approx(0.0));
}

TEST_CASE("calibration never increases loss and moves it toward the references") {
    Matrix w = random_matrix(64, 8, 93);
    Matrix x_fp = random_matrix(400, 64, 94);
    // Perturbed activations stand in for the quantized path.
    Matrix x_hat = x_fp;
    SplitMix64 noise(95);
    for (auto& v : x_hat.data) v += 0.05f * static_cast<float>(noise.next_range(-1.0, 1.0));
    CalibConfig cfg;
    cfg.steps = 100;
    cfg.learning_rate = 1e-3;
    LayerCalibRecord rec;
    Matrix out = calibrate_router(w, x_fp, x_hat, cfg, 2, &rec);
    CHECK(rec.loss_after <= rec.loss_before);
    CHECK(rec.loss_after < rec.loss_before);  // this instance strictly improves
    CHECK(rec.accepted_steps > 0);
    CHECK_FALSE(rec.aborted_divergence);
    CHECK(out.rows == w.rows);
}

TEST_CASE("one small step decreases the loss by roughly lr times gradient norm squared") {
    Matrix w = random_matrix(16, 4, 96);
    Matrix x_fp = random_matrix(1, 16, 97);
    Matrix x_hat = x_fp;
    for (auto& v : x_hat.data) v *= 0.9f;
    const size_t loss_k = 2;
    // Closed-form gradient at w for the single sample.
    std::vector<float> xf(x_fp.data), xh(x_hat.data);
    double l0 = topk_mse_loss(w, w, xf, xh, loss_k);
    Matrix grad(w.rows, w.cols);
    {
        // top-k reference set from w^T x_fp
        std::vector<float> ref(w.cols, 0.0f), hat(w.cols, 0.0f);
        for (size_t j = 0; j < w.cols; ++j) {
            for (size_t i = 0; i < w.rows; ++i) {
                ref[j] += w.at(i, j) * xf[i];
                hat[j] += w.at(i, j) * xh[i];
            }
        }
        std::vector<size_t> idx(w.cols);
        for (size_t i = 0; i < idx.size(); ++i) idx[i] = i;
        std::sort(idx.begin(), idx.end(), [&](size_t a, size_t b) { return ref[a] > ref[b]; });
        for (size_t r = 0; r < loss_k; ++r) {
            size_t j = idx[r];
            float coeff = 2.0f / float(loss_k) * (hat[j] - ref[j]);
            for (size_t i = 0; i < w.rows; ++i) grad.at(i, j) = coeff * xh[i];
        }
    }
    double g2 = 0;
    for (float g : grad.data) g2 += double(g) * g;
    const double lr = 1e-4;
    CalibConfig cfg;
    cfg.loss_k = loss_k;
    cfg.steps = 1;
    cfg.learning_rate = lr;
    cfg.batch = 1;
    LayerCalibRecord rec;
    calibrate_router(w, x_fp, x_hat, cfg, 2, &rec);
    double drop = rec.loss_before - rec.loss_after;
    CHECK(rec.loss_before == doctest::Approx(l0));
    CHECK(drop == doctest::Approx(lr * g2).epsilon(0.1));
}

TEST_CASE("full-precision schedule is a no-op pipeline") {
    ModelConfig mc;
    MoEModel m = init_planted(mc, 101);
    auto corpus = gen_mixed_corpus(4, 128, mc.vocab_size, mc.num_experts, 0.9, 102);
    BitSchedule sched = parse_schedule("uniform:16", mc.num_layers, 16);
    QescResult res = run_qesc_pipeline(m, corpus, sched, QuantConfig{}, CalibConfig{}, true);
    auto toks = random_tokens(64, mc.vocab_size, 103);
    CHECK(forward(m, toks).logits.data == forward(res.model, toks).logits.data);
}

TEST_CASE("pipeline stage order per layer, and the experts-first variant swaps it") {
    ModelConfig mc;
    mc.num_layers = 2;
    MoEModel m = init_planted(mc, 104);
    auto corpus = gen_mixed_corpus(4, 128, mc.vocab_size, mc.num_experts, 0.9, 105);
    BitSchedule sched = parse_schedule("uniform:4", mc.num_layers, 4);
    QuantConfig qc;
    qc.method = "rtn";
    CalibConfig cc;
    cc.steps = 5;
    QescResult a = run_qesc_pipeline(m, corpus, sched, qc, cc, true, true);
    REQUIRE(a.report.events.size() == mc.num_layers * 3);
    for (size_t l = 0; l < mc.num_layers; ++l) {
        CHECK(a.report.events[l * 3 + 0].layer == l);
        CHECK(a.report.events[l * 3 + 0].stage == "quantize_attention");
        CHECK(a.report.events[l * 3 + 1].stage == "calibrate_router");
        CHECK(a.report.events[l * 3 + 2].stage == "quantize_experts");
    }
    QescResult b = run_qesc_pipeline(m, corpus, sched, qc, cc, true, false);
    for (size_t l = 0; l < mc.num_layers; ++l) {
        CHECK(b.report.events[l * 3 + 1].stage == "quantize_experts");
        CHECK(b.report.events[l * 3 + 2].stage == "calibrate_router");
    }
}

TEST_CASE("pipeline without calibration leaves every router bitwise unchanged") {
    ModelConfig mc;
    mc.num_layers = 2;
    MoEModel m = init_planted(mc, 106);
    auto corpus = gen_mixed_corpus(4, 128, mc.vocab_size, mc.num_experts, 0.9, 107);
    BitSchedule sched = parse_schedule("uniform:2", mc.num_layers, 4);
    QuantConfig qc;
    qc.method = "rtn";
    QescResult res = run_qesc_pipeline(m, corpus, sched, qc, CalibConfig{}, false);
    for (size_t l = 0; l < mc.num_layers; ++l) {
        CHECK(res.model.layers[l].router.data == m.layers[l].router.data);
    }
    CHECK(res.report.calib.empty());
}

TEST_CASE("per-layer calibration loss never increases, and routers stay full precision") {
    ModelConfig mc;
    MoEModel m = init_planted(mc, 108);
    auto corpus = gen_mixed_corpus(8, 192, mc.vocab_size, mc.num_experts, 0.9, 109);
    BitSchedule sched = parse_schedule("uniform:2", mc.num_layers, 4);
    QuantConfig qc;
    qc.method = "rtn";
    CalibConfig cc;
    cc.steps = 60;
    QescResult res = run_qesc_pipeline(m, corpus, sched, qc, cc, true);
    REQUIRE(res.report.calib.size() == mc.num_layers);
    for (const auto& r : res.report.calib) {
        CHECK(r.loss_after <= r.loss_before);
        CHECK_FALSE(r.aborted_divergence);
    }
    for (const auto& layer : res.model.layers) {
        // experts carry packed codes, the router never does
        CHECK(layer.experts[0].gate.quantized());
        CHECK(layer.router.rows == mc.hidden_dim);
    }
}

TEST_CASE("8-bit experts keep perplexity within one percent of full precision") {
    ModelConfig mc;
    MoEModel m = init_planted(mc, 110);
    auto calib = gen_mixed_corpus(8, 192, mc.vocab_size, mc.num_experts, 0.9, 111);
    auto held = gen_mixed_corpus(4, 192, mc.vocab_size, mc.num_experts, 0.9, 112);
    BitSchedule sched = parse_schedule("uniform:8", mc.num_layers, 8);
    QuantConfig qc;
    qc.method = "rtn";
    QescResult res = run_qesc_pipeline(m, calib, sched, qc, CalibConfig{}, false);
    double fp = perplexity(m, held);
    double q8 = perplexity(res.model, held);
    CHECK(std::fabs(q8 - fp) / fp < 0.01);
}
