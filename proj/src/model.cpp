// SPDX-License-Identifier: Apache-2.0
#include "moewb/model.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "moewb/error.hpp"
#include "moewb/util.hpp"

namespace moewb {

namespace {

// Planted-specialization profile. The embed plant is kept small relative
// to embed noise so a few percent of tokens sit near the router's
// decision boundary: quantization error can flip those selections, and a
// flipped selection loses the family amplification and costs perplexity.
// The head plant deliberately undershoots the logit gap that would be
// PPL-optimal for the sticky-band corpora, so weight shrinkage from
// coarse grids cannot accidentally improve the model.
constexpr float kEmbedNoise = 0.25f;
constexpr float kEmbedPlant = 0.65f;
constexpr float kRouterNoise = 0.03f;
constexpr float kRouterPlant = 0.40f;
constexpr float kAttnScale = 0.020f;
constexpr float kExpertNoise = 0.050f;
constexpr float kExpertGate = 1.00f;
constexpr float kExpertUp = 1.00f;
constexpr float kExpertDown = 0.15f;
constexpr float kHeadNoise = 0.12f;
constexpr float kHeadPlant = 0.60f;

// Independent per-tensor stream, keyed by name so layout changes don't
// reshuffle unrelated tensors.
SplitMix64 rng_for(uint64_t seed, const std::string& tag) {
    return SplitMix64(seed ^ fnv1a64(tag.data(), tag.size()));
}

size_t family_of(size_t token, size_t vocab, size_t n_experts) {
    return token * n_experts / vocab;
}

// N orthonormal directions in hidden space (rows of the result).
Matrix make_centroids(size_t n, size_t dim, SplitMix64 rng) {
    Matrix u(n, dim);
    for (size_t i = 0; i < n; ++i) {
        while (true) {
            for (size_t d = 0; d < dim; ++d) {
                u.at(i, d) = static_cast<float>(rng.next_range(-1.0, 1.0));
            }
            for (size_t j = 0; j < i; ++j) {
                double dot = 0.0;
                for (size_t d = 0; d < dim; ++d) dot += (double)u.at(i, d) * u.at(j, d);
                for (size_t d = 0; d < dim; ++d) {
                    u.at(i, d) -= static_cast<float>(dot) * u.at(j, d);
                }
            }
            double n2 = 0.0;
            for (size_t d = 0; d < dim; ++d) n2 += (double)u.at(i, d) * u.at(i, d);
            if (n2 > 1e-8) {
                float inv = static_cast<float>(1.0 / std::sqrt(n2));
                for (size_t d = 0; d < dim; ++d) u.at(i, d) *= inv;
                break;
            }
        }
    }
    return u;
}

void add_inplace(Matrix& a, const Matrix& b) {
    for (size_t i = 0; i < a.data.size(); ++i) a.data[i] += b.data[i];
}

// Rotary position mixing on interleaved pairs within each head.
void rope_inplace(Matrix& m, size_t n_heads) {
    size_t hd = m.cols / n_heads;
    size_t half = hd / 2;
    std::vector<double> freq(half);
    for (size_t i = 0; i < half; ++i) {
        freq[i] = std::pow(10000.0, -2.0 * static_cast<double>(i) / static_cast<double>(hd));
    }
    for (size_t t = 0; t < m.rows; ++t) {
        float* row = m.row(t);
        for (size_t i = 0; i < half; ++i) {
            double ang = static_cast<double>(t) * freq[i];
            float c = static_cast<float>(std::cos(ang));
            float s = static_cast<float>(std::sin(ang));
            for (size_t h = 0; h < n_heads; ++h) {
                float* p = row + h * hd + 2 * i;
                float a = p[0], b = p[1];
                p[0] = a * c - b * s;
                p[1] = a * s + b * c;
            }
        }
    }
}

Matrix causal_attention_impl(const Matrix& q, const Matrix& k, const Matrix& v, size_t n_heads) {
    size_t tks = q.rows, hd = q.cols / n_heads;
    float inv_sqrt = 1.0f / std::sqrt(static_cast<float>(hd));
    Matrix ctx(tks, q.cols);
    parallel_for(tks, [&](size_t t) {
        std::vector<float> sc(t + 1);
        for (size_t h = 0; h < n_heads; ++h) {
            size_t off = h * hd;
            const float* qr = q.row(t) + off;
            float mx = -1e30f;
            for (size_t j = 0; j <= t; ++j) {
                const float* kr = k.row(j) + off;
                float acc = 0.0f;
                for (size_t d = 0; d < hd; ++d) acc += qr[d] * kr[d];
                sc[j] = acc * inv_sqrt;
                mx = std::max(mx, sc[j]);
            }
            float sum = 0.0f;
            for (size_t j = 0; j <= t; ++j) {
                sc[j] = std::exp(sc[j] - mx);
                sum += sc[j];
            }
            float* cr = ctx.row(t) + off;
            for (size_t d = 0; d < hd; ++d) {
                float acc = 0.0f;
                for (size_t j = 0; j <= t; ++j) acc += sc[j] * v.at(j, off + d);
                cr[d] = acc / sum;
            }
        }
    });
    return ctx;
}

// One expert-block application over a batch of normalized hidden states.
// Shared by the batched forward and the single-vector entry point so both
// produce bitwise-identical rows.
Matrix moe_block(const MoEModel& model, size_t layer, const Matrix& xm, const ForwardHooks& hooks,
                 LayerTrace& lt, ForwardStats& stats) {
    const ModelConfig& cfg = model.config;
    const Layer& lw = model.layers[layer];
    size_t tks = xm.rows, n = cfg.num_experts, k = cfg.top_k;

    if (hooks.forced) {
        const LayerTrace& fl = hooks.forced->layers[layer];
        if (fl.scores.rows != tks || fl.scores.cols != n || fl.selected.size() != tks * k) {
            throw ArgumentError("forced routing: trace shape mismatch at layer " +
                                std::to_string(layer));
        }
        lt.scores = fl.scores;
        lt.selected = fl.selected;
    } else {
        lt.scores = softmax_rows(matmul(xm, lw.router));
        lt.selected.resize(tks * k);
        for (size_t t = 0; t < tks; ++t) {
            auto idx = topk_row(lt.scores, t, k);
            for (size_t j = 0; j < k; ++j) lt.selected[t * k + j] = static_cast<uint32_t>(idx[j]);
        }
    }

    std::vector<uint64_t> counts(n, 0);
    for (uint32_t e : lt.selected) ++counts[e];

    std::vector<uint8_t> keep(n, 1);
    if (hooks.mask_policy) {
        keep = hooks.mask_policy(layer, counts, tks, lt.scores);
        if (keep.size() != n) throw ConsistencyError("mask policy returned wrong width");
        if (std::find(keep.begin(), keep.end(), uint8_t{1}) == keep.end()) {
            throw ConsistencyError("mask policy kept no experts");
        }
    }
    stats.layer_counts.push_back(counts);
    stats.layer_keep.push_back(keep);

    // Phase 2: per-token surviving slots and weights, then batched expert
    // application. Slot order (descending score) is preserved in the final
    // sum so masked and unmasked runs share one combine path.
    std::vector<std::vector<std::pair<uint32_t, float>>> slots(tks);
    std::vector<std::vector<uint32_t>> batch_tokens(n);
    for (size_t t = 0; t < tks; ++t) {
        const uint32_t* sel = lt.selected.data() + t * k;
        const float* srow = lt.scores.row(t);
        float denom_all = 0.0f, denom_surv = 0.0f;
        size_t survivors = 0;
        for (size_t j = 0; j < k; ++j) {
            denom_all += srow[sel[j]];
            if (keep[sel[j]]) {
                denom_surv += srow[sel[j]];
                ++survivors;
            }
        }
        auto& ts = slots[t];
        if (survivors == 0) {
            uint32_t best = 0;
            float best_s = -1.0f;
            for (size_t e = 0; e < n; ++e) {
                if (keep[e] && srow[e] > best_s) {
                    best_s = srow[e];
                    best = static_cast<uint32_t>(e);
                }
            }
            ts.emplace_back(best, 1.0f);
            ++stats.fallback_tokens;
        } else {
            float denom = hooks.renormalize ? denom_surv : denom_all;
            for (size_t j = 0; j < k; ++j) {
                if (keep[sel[j]]) ts.emplace_back(sel[j], srow[sel[j]] / denom);
            }
        }
        for (auto& [e, w] : ts) batch_tokens[e].push_back(static_cast<uint32_t>(t));
    }

    std::vector<Matrix> outs(n);
    std::vector<int32_t> rowmap(n * tks, -1);
    for (size_t e = 0; e < n; ++e) {
        const auto& toks = batch_tokens[e];
        if (toks.empty()) continue;
        Matrix xin(toks.size(), cfg.hidden_dim);
        for (size_t i = 0; i < toks.size(); ++i) {
            std::copy_n(xm.row(toks[i]), cfg.hidden_dim, xin.row(i));
            rowmap[e * tks + toks[i]] = static_cast<int32_t>(i);
        }
        const Expert& ex = lw.experts[e];
        Matrix g = matmul_nt(xin, ex.gate.dense);
        Matrix u = matmul_nt(xin, ex.up.dense);
        for (size_t i = 0; i < g.data.size(); ++i) g.data[i] = silu(g.data[i]) * u.data[i];
        outs[e] = matmul_nt(g, ex.down.dense);
        stats.expert_executions += toks.size();
    }

    Matrix out(tks, cfg.hidden_dim);
    for (size_t t = 0; t < tks; ++t) {
        float* orow = out.row(t);
        for (auto& [e, w] : slots[t]) {
            const float* y = outs[e].row(static_cast<size_t>(rowmap[e * tks + t]));
            for (size_t d = 0; d < cfg.hidden_dim; ++d) orow[d] += w * y[d];
        }
    }
    return out;
}

}  // namespace

void ModelConfig::validate() const {
    if (num_layers == 0 || hidden_dim == 0 || ffn_dim == 0 || num_heads == 0 ||
        max_seq_len == 0) {
        throw ArgumentError("model config: zero-sized dimension");
    }
    if (vocab_size < 2) throw ArgumentError("model config: vocab_size must be >= 2");
    if (top_k < 1 || top_k > num_experts) throw ArgumentError("model config: top_k out of range");
    if (hidden_dim % num_heads != 0) {
        throw ArgumentError("model config: hidden_dim not divisible by num_heads");
    }
    if ((hidden_dim / num_heads) % 2 != 0) {
        throw ArgumentError("model config: head dim must be even for rotary positions");
    }
    if (num_experts > hidden_dim) {
        throw ArgumentError("model config: num_experts exceeds hidden_dim");
    }
}

MoEModel init_planted(const ModelConfig& cfg, uint64_t seed, float plant_strength) {
    cfg.validate();
    float s = plant_strength;
    MoEModel m;
    m.config = cfg;
    Matrix cent = make_centroids(cfg.num_experts, cfg.hidden_dim, rng_for(seed, "centroids"));

    m.embed = Matrix(cfg.vocab_size, cfg.hidden_dim);
    {
        SplitMix64 rng = rng_for(seed, "embed");
        for (size_t b = 0; b < cfg.vocab_size; ++b) {
            const float* u = cent.row(family_of(b, cfg.vocab_size, cfg.num_experts));
            float* row = m.embed.row(b);
            for (size_t d = 0; d < cfg.hidden_dim; ++d) {
                row[d] = kEmbedNoise * static_cast<float>(rng.next_range(-1.0, 1.0)) +
                         s * kEmbedPlant * u[d];
            }
        }
    }

    m.layers.resize(cfg.num_layers);
    for (size_t l = 0; l < cfg.num_layers; ++l) {
        Layer& lw = m.layers[l];
        std::string p = "layer" + std::to_string(l) + ".";
        lw.norm_attn_gain.assign(cfg.hidden_dim, 1.0f);
        lw.norm_moe_gain.assign(cfg.hidden_dim, 1.0f);
        for (auto& [slot, name] : {std::pair<WeightSlot*, const char*>{&lw.wq, "wq"},
                                   {&lw.wk, "wk"},
                                   {&lw.wv, "wv"},
                                   {&lw.wo, "wo"}}) {
            Matrix w(cfg.hidden_dim, cfg.hidden_dim);
            SplitMix64 rng = rng_for(seed, p + name);
            fill_uniform(w, rng, -kAttnScale, kAttnScale);
            slot->set_dense(std::move(w));
        }
        lw.router = Matrix(cfg.hidden_dim, cfg.num_experts);
        {
            SplitMix64 rng = rng_for(seed, p + "router");
            for (size_t i = 0; i < cfg.num_experts; ++i) {
                const float* u = cent.row(i);
                for (size_t d = 0; d < cfg.hidden_dim; ++d) {
                    lw.router.at(d, i) =
                        kRouterNoise * static_cast<float>(rng.next_range(-1.0, 1.0)) +
                        s * kRouterPlant * u[d];
                }
            }
        }
        lw.experts.resize(cfg.num_experts);
        for (size_t e = 0; e < cfg.num_experts; ++e) {
            Expert& ex = lw.experts[e];
            const float* u = cent.row(e);
            std::string ep = p + "expert" + std::to_string(e) + ".";
            Matrix gate(cfg.ffn_dim, cfg.hidden_dim), up(cfg.ffn_dim, cfg.hidden_dim),
                down(cfg.hidden_dim, cfg.ffn_dim);
            SplitMix64 rg = rng_for(seed, ep + "gate");
            fill_uniform(gate, rg, -kExpertNoise, kExpertNoise);
            SplitMix64 ru = rng_for(seed, ep + "up");
            fill_uniform(up, ru, -kExpertNoise, kExpertNoise);
            SplitMix64 rd = rng_for(seed, ep + "down");
            fill_uniform(down, rd, -kExpertNoise, kExpertNoise);
            // Expert e amplifies centroid e: the first FFN channel reads
            // the centroid component twice (gated) and writes it back.
            for (size_t d = 0; d < cfg.hidden_dim; ++d) {
                gate.at(0, d) += s * kExpertGate * u[d];
                up.at(0, d) += s * kExpertUp * u[d];
                down.at(d, 0) += s * kExpertDown * u[d];
            }
            ex.gate.set_dense(std::move(gate));
            ex.up.set_dense(std::move(up));
            ex.down.set_dense(std::move(down));
        }
    }

    m.norm_final_gain.assign(cfg.hidden_dim, 1.0f);
    {
        Matrix head(cfg.vocab_size, cfg.hidden_dim);
        SplitMix64 rng = rng_for(seed, "head");
        for (size_t b = 0; b < cfg.vocab_size; ++b) {
            const float* u = cent.row(family_of(b, cfg.vocab_size, cfg.num_experts));
            float* row = head.row(b);
            for (size_t d = 0; d < cfg.hidden_dim; ++d) {
                row[d] = kHeadNoise * static_cast<float>(rng.next_range(-1.0, 1.0)) +
                         s * kHeadPlant * u[d];
            }
        }
        m.head.set_dense(std::move(head));
    }
    return m;
}

ForwardResult forward_hooked(const MoEModel& model, const std::vector<uint32_t>& tokens,
                             const ForwardHooks& hooks) {
    const ModelConfig& cfg = model.config;
    if (tokens.empty()) throw ArgumentError("forward: empty token sequence");
    if (tokens.size() > cfg.max_seq_len) {
        throw ArgumentError("forward: sequence length " + std::to_string(tokens.size()) +
                            " exceeds max_seq_len " + std::to_string(cfg.max_seq_len));
    }
    if (hooks.forced && (hooks.forced->layers.size() != cfg.num_layers ||
                         hooks.forced->top_k != cfg.top_k)) {
        throw ArgumentError("forced routing: trace layer count or top-k mismatch");
    }
    size_t tks = tokens.size();
    Matrix x(tks, cfg.hidden_dim);
    for (size_t t = 0; t < tks; ++t) {
        if (tokens[t] >= cfg.vocab_size) {
            throw ArgumentError("forward: token id " + std::to_string(tokens[t]) +
                                " out of range");
        }
        std::copy_n(model.embed.row(tokens[t]), cfg.hidden_dim, x.row(t));
    }

    ForwardResult res;
    res.trace.top_k = cfg.top_k;
    if (hooks.capture) hooks.capture->assign(cfg.num_layers, LayerCapture{});

    for (size_t l = 0; l < cfg.num_layers; ++l) {
        const Layer& lw = model.layers[l];
        Matrix xn = rmsnorm_rows(x, lw.norm_attn_gain);
        if (hooks.capture) (*hooks.capture)[l].attn_in = xn;
        Matrix ctx = attention_context(xn, lw.wq.dense, lw.wk.dense, lw.wv.dense, cfg.num_heads);
        if (hooks.capture) (*hooks.capture)[l].attn_ctx = ctx;
        add_inplace(x, matmul_nt(ctx, lw.wo.dense));

        Matrix xm = rmsnorm_rows(x, lw.norm_moe_gain);
        if (hooks.capture) (*hooks.capture)[l].moe_in = xm;
        res.trace.layers.emplace_back();
        add_inplace(x, moe_block(model, l, xm, hooks, res.trace.layers.back(), res.stats));
    }
    Matrix xf = rmsnorm_rows(x, model.norm_final_gain);
    res.logits = matmul_nt(xf, model.head.dense);
    return res;
}

ForwardResult forward(const MoEModel& model, const std::vector<uint32_t>& tokens) {
    return forward_hooked(model, tokens, ForwardHooks{});
}

Matrix forward_with_forced_routing(const MoEModel& model, const std::vector<uint32_t>& tokens,
                                   const RoutingTrace& forced) {
    ForwardHooks hooks;
    hooks.forced = &forced;
    return forward_hooked(model, tokens, hooks).logits;
}

std::vector<float> moe_layer_forward(const MoEModel& model, size_t layer,
                                     const std::vector<float>& x, RoutingTrace* trace) {
    if (layer >= model.config.num_layers) throw ArgumentError("moe_layer_forward: bad layer");
    if (x.size() != model.config.hidden_dim) {
        throw ShapeError("moe_layer_forward: input length " + std::to_string(x.size()));
    }
    Matrix xm(1, model.config.hidden_dim);
    std::copy(x.begin(), x.end(), xm.row(0));
    ForwardHooks hooks;
    ForwardStats stats;
    LayerTrace lt;
    Matrix out = moe_block(model, layer, xm, hooks, lt, stats);
    if (trace) {
        trace->top_k = model.config.top_k;
        trace->layers.push_back(std::move(lt));
    }
    return std::vector<float>(out.row(0), out.row(0) + model.config.hidden_dim);
}

double perplexity(const MoEModel& model, const std::vector<std::vector<uint32_t>>& corpus,
                  const std::vector<RoutingTrace>* forced) {
    if (forced && forced->size() != corpus.size()) {
        throw ArgumentError("perplexity: one forced trace per sequence required");
    }
    double nll = 0.0;
    size_t predictions = 0;
    for (size_t si = 0; si < corpus.size(); ++si) {
        const auto& seq = corpus[si];
        if (seq.size() < 2) continue;
        ForwardHooks hooks;
        if (forced) hooks.forced = &(*forced)[si];
        nll += sequence_nll(forward_hooked(model, seq, hooks).logits, seq);
        predictions += seq.size() - 1;
    }
    if (predictions == 0) throw ArgumentError("perplexity: corpus yields no predictions");
    return std::exp(nll / static_cast<double>(predictions));
}

double sequence_nll(const Matrix& logits, const std::vector<uint32_t>& seq) {
    if (logits.rows + 1 < seq.size()) {
        throw ShapeError("sequence_nll: fewer logit rows than predicted positions");
    }
    double nll = 0.0;
    for (size_t t = 0; t + 1 < seq.size(); ++t) {
        const float* row = logits.row(t);
        if (seq[t + 1] >= logits.cols) throw ArgumentError("sequence_nll: target out of range");
        float mx = row[0];
        for (size_t j = 1; j < logits.cols; ++j) mx = std::max(mx, row[j]);
        double sum = 0.0;
        for (size_t j = 0; j < logits.cols; ++j) {
            sum += std::exp(static_cast<double>(row[j]) - mx);
        }
        nll += std::log(sum) + static_cast<double>(mx) - static_cast<double>(row[seq[t + 1]]);
    }
    return nll;
}

Matrix attention_context(const Matrix& xn, const Matrix& wq, const Matrix& wk, const Matrix& wv,
                         size_t n_heads) {
    if (n_heads == 0 || xn.cols % n_heads != 0 || (xn.cols / n_heads) % 2 != 0) {
        throw ArgumentError("attention_context: bad head split");
    }
    Matrix q = matmul_nt(xn, wq);
    Matrix k = matmul_nt(xn, wk);
    Matrix v = matmul_nt(xn, wv);
    rope_inplace(q, n_heads);
    rope_inplace(k, n_heads);
    return causal_attention_impl(q, k, v, n_heads);
}

Matrix moe_apply(const MoEModel& model, size_t layer, const Matrix& xm, LayerTrace* lt) {
    if (layer >= model.config.num_layers) throw ArgumentError("moe_apply: bad layer");
    if (xm.cols != model.config.hidden_dim) throw ShapeError("moe_apply: input width mismatch");
    ForwardHooks hooks;
    ForwardStats stats;
    LayerTrace local;
    Matrix out = moe_block(model, layer, xm, hooks, local, stats);
    if (lt) *lt = std::move(local);
    return out;
}

uint64_t count_expert_flops(const MoEModel& model, const std::vector<uint32_t>& tokens,
                            const std::vector<std::vector<uint8_t>>* keep_mask) {
    ForwardHooks hooks;
    if (keep_mask) {
        if (keep_mask->size() != model.config.num_layers) {
            throw ArgumentError("count_expert_flops: mask layer count mismatch");
        }
        hooks.mask_policy = [keep_mask](size_t layer, const std::vector<uint64_t>&, size_t,
                                        const Matrix&) { return (*keep_mask)[layer]; };
    }
    ForwardResult res = forward_hooked(model, tokens, hooks);
    return res.stats.expert_executions * expert_mac_cost(model.config);
}

}  // namespace moewb
