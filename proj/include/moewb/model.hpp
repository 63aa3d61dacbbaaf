// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <vector>

#include "moewb/quant.hpp"
#include "moewb/tensor.hpp"

namespace moewb {

struct ModelConfig {
    size_t num_layers = 4;
    size_t hidden_dim = 64;
    size_t ffn_dim = 128;
    size_t num_heads = 4;
    size_t num_experts = 8;  // N
    size_t top_k = 2;        // K
    size_t vocab_size = 256;
    size_t max_seq_len = 256;

    // Throws ArgumentError on violated structural constraints.
    void validate() const;
    bool operator==(const ModelConfig&) const = default;
};

// A weight that is either dense or quantized. The dense matrix is always
// usable: when a quantized form is assigned, `dense` holds its dequantized
// image, so every forward pass runs one uniform code path.
struct WeightSlot {
    Matrix dense;
    std::optional<QuantizedMatrix> qm;

    bool quantized() const { return qm.has_value(); }
    void set_dense(Matrix w) {
        dense = std::move(w);
        qm.reset();
    }
    void set_quantized(QuantizedMatrix q) {
        qm = std::move(q);
        dense = dequantize(*qm);
    }
};

// Gated FFN expert: y = down( silu(gate·x) ⊙ (up·x) ).
// gate, up: [ffn_dim x hidden_dim]; down: [hidden_dim x ffn_dim].
struct Expert {
    WeightSlot gate, up, down;
};

struct Layer {
    std::vector<float> norm_attn_gain;  // [hidden_dim]
    std::vector<float> norm_moe_gain;   // [hidden_dim]
    WeightSlot wq, wk, wv, wo;          // [hidden_dim x hidden_dim]
    Matrix router;                      // [hidden_dim x num_experts], never quantized
    std::vector<Expert> experts;        // num_experts entries
};

struct MoEModel {
    ModelConfig config;
    Matrix embed;  // [vocab_size x hidden_dim]
    std::vector<Layer> layers;
    std::vector<float> norm_final_gain;  // [hidden_dim]
    WeightSlot head;                     // [vocab_size x hidden_dim]
};

// Deterministic synthetic initialization. Builds num_experts orthonormal
// centroid directions; byte b belongs to family fam(b) = b*N/vocab. With
// plant_strength s, embeddings lean toward their family centroid, router
// column i leans toward centroid i, expert i amplifies centroid i, and
// output-head rows lean toward their family centroid — so inputs near
// centroid i preferentially route to expert i and routing correctness
// shows up in perplexity. s = 0 gives pure random weights.
MoEModel init_planted(const ModelConfig& cfg, uint64_t seed, float plant_strength = 1.0f);

// Per-layer routing record: softmax scores for every token and the top-K
// indices actually used, in descending-score order.
struct LayerTrace {
    Matrix scores;                   // [tokens x num_experts], rows sum to 1
    std::vector<uint32_t> selected;  // tokens * K, row-major
};
struct RoutingTrace {
    size_t top_k = 0;
    std::vector<LayerTrace> layers;
    size_t tokens() const { return layers.empty() ? 0 : layers[0].scores.rows; }
};

// Per-layer activation snapshots for quantization calibration.
struct LayerCapture {
    Matrix attn_in;   // input to the q/k/v projections (post attention norm)
    Matrix attn_ctx;  // attention context (input to the output projection)
    Matrix moe_in;    // input to router and experts (post expert-block norm)
};

// Decides which experts of a layer stay active, given how many tokens
// selected each expert. Returns a keep flag per expert; at least one
// expert must be kept.
using MaskPolicy = std::function<std::vector<uint8_t>(
    size_t layer, const std::vector<uint64_t>& counts, size_t tokens, const Matrix& scores)>;

struct ForwardHooks {
    const RoutingTrace* forced = nullptr;  // replay this trace instead of routing
    MaskPolicy mask_policy;                // optional expert masking (two-phase)
    bool renormalize = true;               // renormalize weights over surviving experts
    std::vector<LayerCapture>* capture = nullptr;  // filled per layer when set
};

struct ForwardStats {
    uint64_t expert_executions = 0;  // expert FFN applications, fallbacks included
    uint64_t fallback_tokens = 0;    // tokens whose every selection was masked off
    std::vector<std::vector<uint64_t>> layer_counts;  // selection counts per layer
    std::vector<std::vector<uint8_t>> layer_keep;     // keep flags per layer
};

struct ForwardResult {
    Matrix logits;  // [tokens x vocab_size]
    RoutingTrace trace;
    ForwardStats stats;
};

// Causal prefill over one token sequence. Throws ArgumentError on an
// out-of-range token id or a sequence longer than max_seq_len.
ForwardResult forward(const MoEModel& model, const std::vector<uint32_t>& tokens);
ForwardResult forward_hooked(const MoEModel& model, const std::vector<uint32_t>& tokens,
                             const ForwardHooks& hooks);

// Replay routing decisions and scores from `forced` instead of the
// model's router. Replaying a model's own trace is bitwise identical to
// forward(). Throws ArgumentError on trace shape mismatch.
Matrix forward_with_forced_routing(const MoEModel& model, const std::vector<uint32_t>& tokens,
                                   const RoutingTrace& forced);

// One expert-block application to a single hidden vector (routing, Eq.-2
// weighting, expert FFNs). Appends this token's routing to *trace when
// trace is non-null. Matches the corresponding row of a batched forward
// bitwise.
std::vector<float> moe_layer_forward(const MoEModel& model, size_t layer,
                                     const std::vector<float>& x, RoutingTrace* trace = nullptr);

// exp(mean next-token cross-entropy) over all predicted positions of all
// sequences. `forced`, when given, must hold one trace per sequence.
// Throws ArgumentError if the corpus yields no predictions.
double perplexity(const MoEModel& model, const std::vector<std::vector<uint32_t>>& corpus,
                  const std::vector<RoutingTrace>* forced = nullptr);

// Summed next-token negative log-likelihood of seq under its own prefill
// logits (position t predicts seq[t+1]); seq.size()-1 terms.
double sequence_nll(const Matrix& logits, const std::vector<uint32_t>& seq);

// Building blocks of one decoder layer, exposed so calibration pipelines
// can run layer-by-layer on live weights while matching forward() bitwise.
// attention_context: q/k/v projection (weights given [hidden x hidden]),
// rotary positions, causal softmax attention; rows are sequence positions.
Matrix attention_context(const Matrix& xn, const Matrix& wq, const Matrix& wk, const Matrix& wv,
                         size_t n_heads);
// moe_apply: routing + Eq.-2 weighted expert outputs for pre-normalized
// inputs xm, recording the layer's routing into *lt when non-null.
Matrix moe_apply(const MoEModel& model, size_t layer, const Matrix& xm, LayerTrace* lt = nullptr);

// Multiply-accumulate count of executed expert FFNs for one prefill
// (3 * hidden * ffn per execution). With a mask, selections of dropped
// experts contribute nothing; a token whose whole selection is dropped
// falls back to one surviving expert, which is counted since it runs.
uint64_t count_expert_flops(const MoEModel& model, const std::vector<uint32_t>& tokens,
                            const std::vector<std::vector<uint8_t>>* keep_mask = nullptr);

// Per-execution MAC cost of one expert FFN under this config.
inline uint64_t expert_mac_cost(const ModelConfig& cfg) {
    return 3ULL * cfg.hidden_dim * cfg.ffn_dim;
}

}  // namespace moewb
