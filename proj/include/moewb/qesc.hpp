// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "moewb/model.hpp"
#include "moewb/quant.hpp"
#include "moewb/tensor.hpp"

namespace moewb {

// Router-calibration settings. loss_k == 0 means "auto": min(N, 2*K + 4)
// with K the model's per-token selection count — wider than the selection
// itself, so near-boundary experts contribute to the loss, but no wider
// than the expert count.
struct CalibConfig {
    size_t loss_k = 0;
    double learning_rate = 1e-3;
    size_t steps = 200;
    size_t batch = 256;  // calibration tokens per gradient step
};

// Per-layer record of one router calibration.
struct LayerCalibRecord {
    size_t layer = 0;
    double loss_before = 0.0;
    double loss_after = 0.0;
    double change_rate_before = 0.0;  // fraction of tokens whose top-K set differs
    double change_rate_after = 0.0;
    size_t steps_taken = 0;
    size_t accepted_steps = 0;
    double final_lr = 0.0;
    bool aborted_divergence = false;
};

// One pipeline stage in execution order. Stages: "quantize_attention",
// "calibrate_router", "quantize_experts".
struct PipelineEvent {
    size_t layer = 0;
    std::string stage;
};

struct QescReport {
    std::vector<PipelineEvent> events;
    std::vector<LayerCalibRecord> calib;
};

struct QescResult {
    MoEModel model;
    QescReport report;
};

// Resolve a requested loss-set width: 0 maps to min(n_experts, 2*model_k+4);
// anything outside [model_k, n_experts] throws ArgumentError.
size_t resolve_loss_k(size_t requested, size_t model_k, size_t n_experts);

// Mean squared gap between reference and calibrated logits over the loss_k
// highest reference logits for one token: the index set is always taken
// from w_orig applied to x_fp, never from the calibrated pair. Logits are
// x·W with W stored [hidden x n_experts].
double topk_mse_loss(const Matrix& w_orig, const Matrix& w_cal, const std::vector<float>& x_fp,
                     const std::vector<float>& x_hat, size_t loss_k);

// Gradient descent on the mean top-k logit MSE over the calibration slice
// (rows of x_fp / x_hat are aligned token-for-token). Steps are accepted
// only when the full-slice loss strictly decreases; on a non-improving
// candidate the learning rate is halved, up to 5 times per step, and kept
// at its reduced value afterwards. A batch whose gradient is identically
// zero is skipped outright, so x_hat == x_fp leaves the router bitwise
// unchanged. If the loss ever exceeds 10x its initial value the run aborts
// with a warning and returns the original w.
Matrix calibrate_router(const Matrix& w, const Matrix& x_fp, const Matrix& x_hat,
                        const CalibConfig& cfg, size_t model_k, LayerCalibRecord* record = nullptr);

// Layer-by-layer compression. For each layer in order: quantize the four
// attention projections at schedule.mhsa_bits with curvature from the
// current (already partially compressed) activations; calibrate the router
// against references from an untouched full-precision replica; quantize
// all experts at schedule.expert_bits[layer] with curvature from the
// tokens actually routed to each expert. Activations for layer l+1 always
// come from the compressed prefix. Routers stay full precision (their
// values change only via calibration); bit width 16 leaves a tensor class
// untouched. `calibrate_before_experts` swaps the two in-layer stages.
// Errors raised inside a layer are rethrown with the layer index attached.
QescResult run_qesc_pipeline(const MoEModel& model,
                             const std::vector<std::vector<uint32_t>>& corpus,
                             const BitSchedule& schedule, const QuantConfig& qcfg,
                             const CalibConfig& ccfg, bool calibrate = true,
                             bool calibrate_before_experts = true);

}  // namespace moewb
