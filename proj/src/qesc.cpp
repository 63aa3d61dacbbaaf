// SPDX-License-Identifier: Apache-2.0
#include "moewb/qesc.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "moewb/error.hpp"
#include "moewb/util.hpp"

namespace moewb {

namespace {

// Mean per-token loss over the whole slice; per-token terms are computed
// in parallel and reduced serially so the result is thread-count
// independent.
double slice_loss(const Matrix& cal, const Matrix& fp,
                  const std::vector<std::vector<size_t>>& loss_sets, size_t kk) {
    std::vector<double> per(cal.rows, 0.0);
    parallel_for(cal.rows, [&](size_t t) {
        double acc = 0.0;
        for (size_t i : loss_sets[t]) {
            double d = static_cast<double>(fp.at(t, i)) - static_cast<double>(cal.at(t, i));
            acc += d * d;
        }
        per[t] = acc / static_cast<double>(kk);
    });
    double sum = 0.0;
    for (double v : per) sum += v;
    return sum / static_cast<double>(cal.rows);
}

// Fraction of tokens whose top-k index set under `cal` differs (as a set)
// from the reference sets.
double selection_change_rate(const Matrix& cal,
                             const std::vector<std::vector<size_t>>& ref_sorted, size_t k) {
    size_t changed = 0;
    for (size_t t = 0; t < cal.rows; ++t) {
        std::vector<size_t> s = topk_row(cal, t, k);
        std::sort(s.begin(), s.end());
        if (s != ref_sorted[t]) ++changed;
    }
    return static_cast<double>(changed) / static_cast<double>(cal.rows);
}

void add_rows(Matrix& a, const Matrix& b) {
    if (!a.same_shape(b)) throw ShapeError("add_rows: shape mismatch");
    for (size_t i = 0; i < a.data.size(); ++i) a.data[i] += b.data[i];
}

}  // namespace

size_t resolve_loss_k(size_t requested, size_t model_k, size_t n_experts) {
    size_t kk = requested == 0 ? std::min(n_experts, 2 * model_k + 4) : requested;
    if (kk < model_k || kk > n_experts) {
        throw ArgumentError("loss_k " + std::to_string(kk) + " outside [" +
                            std::to_string(model_k) + ", " + std::to_string(n_experts) + "]");
    }
    return kk;
}

double topk_mse_loss(const Matrix& w_orig, const Matrix& w_cal, const std::vector<float>& x_fp,
                     const std::vector<float>& x_hat, size_t loss_k) {
    if (!w_orig.same_shape(w_cal)) throw ShapeError("topk_mse_loss: router shapes disagree");
    if (x_fp.size() != w_orig.rows || x_hat.size() != w_orig.rows) {
        throw ShapeError("topk_mse_loss: input width does not match router rows");
    }
    if (loss_k == 0 || loss_k > w_orig.cols) {
        throw ArgumentError("topk_mse_loss: loss_k out of range");
    }
    Matrix xf(1, w_orig.rows), xh(1, w_orig.rows);
    std::copy(x_fp.begin(), x_fp.end(), xf.row(0));
    std::copy(x_hat.begin(), x_hat.end(), xh.row(0));
    Matrix fp = matmul(xf, w_orig);
    Matrix cal = matmul(xh, w_cal);
    double acc = 0.0;
    for (size_t i : topk_row(fp, 0, loss_k)) {
        double d = static_cast<double>(fp.at(0, i)) - static_cast<double>(cal.at(0, i));
        acc += d * d;
    }
    return acc / static_cast<double>(loss_k);
}

Matrix calibrate_router(const Matrix& w, const Matrix& x_fp, const Matrix& x_hat,
                        const CalibConfig& cfg, size_t model_k, LayerCalibRecord* record) {
    if (!x_fp.same_shape(x_hat)) throw ShapeError("calibrate_router: calibration slices disagree");
    if (x_fp.rows == 0) throw ArgumentError("calibrate_router: empty calibration slice");
    if (x_fp.cols != w.rows) throw ShapeError("calibrate_router: input width vs router rows");
    if (cfg.learning_rate <= 0.0) throw ArgumentError("calibrate_router: learning_rate must be > 0");
    if (cfg.batch == 0) throw ArgumentError("calibrate_router: batch must be >= 1");
    const size_t n = w.cols;
    const size_t kk = resolve_loss_k(cfg.loss_k, model_k, n);
    const size_t T = x_fp.rows;
    const size_t B = std::min(cfg.batch, T);

    // Reference logits and per-token index sets, fixed once from the
    // full-precision pair; they never track the calibrated weights.
    Matrix fp = matmul(x_fp, w);
    std::vector<std::vector<size_t>> loss_sets(T), sel_sorted(T);
    for (size_t t = 0; t < T; ++t) {
        loss_sets[t] = topk_row(fp, t, kk);
        sel_sorted[t] = topk_row(fp, t, model_k);
        std::sort(sel_sorted[t].begin(), sel_sorted[t].end());
    }

    Matrix cur = w;
    double cur_loss = slice_loss(matmul(x_hat, cur), fp, loss_sets, kk);
    const double init_loss = cur_loss;
    const double rate_before = selection_change_rate(matmul(x_hat, cur), sel_sorted, model_k);

    double lr = cfg.learning_rate;
    size_t accepted = 0, steps_done = 0, pos = 0;
    bool aborted = false;
    std::vector<double> g(w.rows * n);
    for (size_t step = 0; step < cfg.steps; ++step) {
        ++steps_done;
        // Closed-form batch gradient at cur: for each token, columns in its
        // loss set get (2/kk) * (cal_i - fp_i) * x_hat; averaged over the
        // batch. Tokens cycle through the slice across steps.
        std::fill(g.begin(), g.end(), 0.0);
        for (size_t b = 0; b < B; ++b) {
            size_t t = (pos + b) % T;
            const float* xh = x_hat.row(t);
            for (size_t i : loss_sets[t]) {
                float acc = 0.0f;
                for (size_t j = 0; j < w.rows; ++j) acc += xh[j] * cur.at(j, i);
                double coef = (2.0 / static_cast<double>(kk)) *
                              (static_cast<double>(acc) - static_cast<double>(fp.at(t, i)));
                for (size_t j = 0; j < w.rows; ++j) {
                    g[j * n + i] += coef * static_cast<double>(xh[j]);
                }
            }
        }
        pos = (pos + B) % T;
        bool any = false;
        for (double v : g) {
            if (v != 0.0) {
                any = true;
                break;
            }
        }
        if (!any) continue;  // candidate would be bitwise identical to cur
        double inv_b = 1.0 / static_cast<double>(B);

        // Accept only a strict full-slice improvement; halve the rate on
        // each rejection, at most 5 times, and keep the reduced rate.
        for (int attempt = 0; attempt < 6; ++attempt) {
            Matrix cand = cur;
            for (size_t idx = 0; idx < cand.data.size(); ++idx) {
                cand.data[idx] =
                    static_cast<float>(static_cast<double>(cand.data[idx]) - lr * g[idx] * inv_b);
            }
            double cand_loss = slice_loss(matmul(x_hat, cand), fp, loss_sets, kk);
            if (cand_loss < cur_loss) {
                cur = std::move(cand);
                cur_loss = cand_loss;
                ++accepted;
                break;
            }
            if (attempt < 5) lr *= 0.5;
        }
        if (cur_loss > 10.0 * init_loss) {
            std::cerr << "calibrate_router: loss " << cur_loss << " exceeds 10x initial "
                      << init_loss << ", reverting to the original router\n";
            aborted = true;
            break;
        }
    }

    Matrix result = aborted ? w : std::move(cur);
    if (record) {
        record->loss_before = init_loss;
        record->loss_after = aborted ? init_loss : cur_loss;
        record->change_rate_before = rate_before;
        record->change_rate_after =
            selection_change_rate(matmul(x_hat, result), sel_sorted, model_k);
        record->steps_taken = steps_done;
        record->accepted_steps = accepted;
        record->final_lr = lr;
        record->aborted_divergence = aborted;
    }
    return result;
}

QescResult run_qesc_pipeline(const MoEModel& model,
                             const std::vector<std::vector<uint32_t>>& corpus,
                             const BitSchedule& schedule, const QuantConfig& qcfg,
                             const CalibConfig& ccfg, bool calibrate,
                             bool calibrate_before_experts) {
    const ModelConfig& cfg = model.config;
    cfg.validate();
    if (schedule.expert_bits.size() != cfg.num_layers) {
        throw ArgumentError("run_qesc_pipeline: schedule covers " +
                            std::to_string(schedule.expert_bits.size()) + " layers, model has " +
                            std::to_string(cfg.num_layers));
    }
    if (schedule.router_bits != 16) {
        throw ArgumentError("run_qesc_pipeline: routers must stay full precision");
    }
    if (qcfg.method != "rtn" && qcfg.method != "gptq") {
        throw ArgumentError("run_qesc_pipeline: unknown method '" + qcfg.method + "'");
    }
    size_t total_tokens = 0;
    for (const auto& seq : corpus) {
        if (seq.empty()) throw ArgumentError("run_qesc_pipeline: empty calibration sequence");
        if (seq.size() > cfg.max_seq_len) {
            throw ArgumentError("run_qesc_pipeline: sequence longer than max_seq_len");
        }
        for (uint32_t t : seq) {
            if (t >= cfg.vocab_size) throw ArgumentError("run_qesc_pipeline: token out of range");
        }
        total_tokens += seq.size();
    }
    if (total_tokens == 0) throw ArgumentError("run_qesc_pipeline: empty calibration corpus");
    if (calibrate && total_tokens < ccfg.batch) {
        throw ArgumentError("run_qesc_pipeline: corpus has " + std::to_string(total_tokens) +
                            " tokens, fewer than one batch of " + std::to_string(ccfg.batch));
    }

    QescResult out{model, {}};
    MoEModel& cur = out.model;
    const MoEModel& ref = model;
    const size_t S = corpus.size();
    const bool use_gptq = qcfg.method == "gptq";

    // Two residual streams advanced in lockstep: xq through the model being
    // compressed, xf through the untouched replica. Advancing them with the
    // same block helpers forward() uses keeps them bitwise equal to what a
    // fresh prefill through the respective model would produce.
    std::vector<Matrix> xq(S), xf(S);
    for (size_t s = 0; s < S; ++s) {
        const auto& seq = corpus[s];
        Matrix e(seq.size(), cfg.hidden_dim);
        for (size_t t = 0; t < seq.size(); ++t) {
            const float* src = ref.embed.row(seq[t]);
            std::copy(src, src + cfg.hidden_dim, e.row(t));
        }
        xq[s] = e;
        xf[s] = std::move(e);
    }

    auto quantize_slot = [&](WeightSlot& slot, const HessianAccumulator* hess, int bits) {
        if (use_gptq) {
            slot.set_quantized(gptq_quantize(slot.dense, *hess, bits, qcfg.group_size,
                                             qcfg.lambda_frac));
        } else {
            slot.set_quantized(rtn_quantize(slot.dense, bits, qcfg.group_size));
        }
    };

    for (size_t l = 0; l < cfg.num_layers; ++l) {
        try {
            Layer& lw = cur.layers[l];
            const Layer& lf = ref.layers[l];
            const int ebits = schedule.expert_bits[l];

            // Stage 1: attention projections. q/k/v share curvature from the
            // normalized block input; the output projection's curvature comes
            // from contexts computed with the already-quantized q/k/v.
            std::vector<Matrix> xn(S);
            for (size_t s = 0; s < S; ++s) xn[s] = rmsnorm_rows(xq[s], lw.norm_attn_gain);
            if (schedule.mhsa_bits != 16) {
                if (use_gptq) {
                    HessianAccumulator hin(cfg.hidden_dim);
                    for (const Matrix& m : xn) hin.add(m);
                    quantize_slot(lw.wq, &hin, schedule.mhsa_bits);
                    quantize_slot(lw.wk, &hin, schedule.mhsa_bits);
                    quantize_slot(lw.wv, &hin, schedule.mhsa_bits);
                } else {
                    quantize_slot(lw.wq, nullptr, schedule.mhsa_bits);
                    quantize_slot(lw.wk, nullptr, schedule.mhsa_bits);
                    quantize_slot(lw.wv, nullptr, schedule.mhsa_bits);
                }
            }
            std::vector<Matrix> ctx(S);
            for (size_t s = 0; s < S; ++s) {
                ctx[s] = attention_context(xn[s], lw.wq.dense, lw.wk.dense, lw.wv.dense,
                                           cfg.num_heads);
            }
            if (schedule.mhsa_bits != 16) {
                if (use_gptq) {
                    HessianAccumulator hctx(cfg.hidden_dim);
                    for (const Matrix& m : ctx) hctx.add(m);
                    quantize_slot(lw.wo, &hctx, schedule.mhsa_bits);
                } else {
                    quantize_slot(lw.wo, nullptr, schedule.mhsa_bits);
                }
            }
            out.report.events.push_back({l, "quantize_attention"});
            for (size_t s = 0; s < S; ++s) {
                add_rows(xq[s], matmul_nt(ctx[s], lw.wo.dense));
                Matrix rn = rmsnorm_rows(xf[s], lf.norm_attn_gain);
                Matrix rc = attention_context(rn, lf.wq.dense, lf.wk.dense, lf.wv.dense,
                                              cfg.num_heads);
                add_rows(xf[s], matmul_nt(rc, lf.wo.dense));
            }
            xn.clear();
            ctx.clear();

            // Normalized expert-block inputs on both streams, stacked
            // token-major across sequences (rows stay aligned pairwise).
            std::vector<Matrix> xmq(S), xmf(S);
            Matrix sq(total_tokens, cfg.hidden_dim), sf(total_tokens, cfg.hidden_dim);
            size_t row = 0;
            for (size_t s = 0; s < S; ++s) {
                xmq[s] = rmsnorm_rows(xq[s], lw.norm_moe_gain);
                xmf[s] = rmsnorm_rows(xf[s], lf.norm_moe_gain);
                std::copy(xmq[s].data.begin(), xmq[s].data.end(), sq.row(row));
                std::copy(xmf[s].data.begin(), xmf[s].data.end(), sf.row(row));
                row += xmq[s].rows;
            }

            auto stage_router = [&] {
                LayerCalibRecord rec;
                rec.layer = l;
                lw.router = calibrate_router(lf.router, sf, sq, ccfg, cfg.top_k, &rec);
                out.report.calib.push_back(rec);
                out.report.events.push_back({l, "calibrate_router"});
            };
            auto stage_experts = [&] {
                if (ebits != 16) {
                    if (use_gptq) {
                        // Curvature for each expert comes from the tokens the
                        // current router sends to it; an expert no token
                        // selects falls back to the whole slice.
                        Matrix scores = softmax_rows(matmul(sq, lw.router));
                        std::vector<std::vector<size_t>> routed(cfg.num_experts);
                        for (size_t t = 0; t < scores.rows; ++t) {
                            for (size_t i : topk_row(scores, t, cfg.top_k)) routed[i].push_back(t);
                        }
                        for (size_t e = 0; e < cfg.num_experts; ++e) {
                            Expert& ex = lw.experts[e];
                            const std::vector<size_t>* rows = &routed[e];
                            std::vector<size_t> all;
                            if (rows->empty()) {
                                all.resize(sq.rows);
                                std::iota(all.begin(), all.end(), size_t{0});
                                rows = &all;
                            }
                            Matrix xe(rows->size(), cfg.hidden_dim);
                            for (size_t r = 0; r < rows->size(); ++r) {
                                const float* src = sq.row((*rows)[r]);
                                std::copy(src, src + cfg.hidden_dim, xe.row(r));
                            }
                            HessianAccumulator hgu(cfg.hidden_dim);
                            hgu.add(xe);
                            quantize_slot(ex.gate, &hgu, ebits);
                            quantize_slot(ex.up, &hgu, ebits);
                            // Down-projection curvature uses hidden states
                            // produced by the quantized gate/up pair.
                            Matrix h = matmul_nt(xe, ex.gate.dense);
                            Matrix u = matmul_nt(xe, ex.up.dense);
                            for (size_t idx = 0; idx < h.data.size(); ++idx) {
                                h.data[idx] = silu(h.data[idx]) * u.data[idx];
                            }
                            HessianAccumulator hd(cfg.ffn_dim);
                            hd.add(h);
                            quantize_slot(ex.down, &hd, ebits);
                        }
                    } else {
                        for (size_t e = 0; e < cfg.num_experts; ++e) {
                            Expert& ex = lw.experts[e];
                            quantize_slot(ex.gate, nullptr, ebits);
                            quantize_slot(ex.up, nullptr, ebits);
                            quantize_slot(ex.down, nullptr, ebits);
                        }
                    }
                }
                out.report.events.push_back({l, "quantize_experts"});
            };

            if (calibrate && calibrate_before_experts) {
                stage_router();
                stage_experts();
            } else if (calibrate) {
                stage_experts();
                stage_router();
            } else {
                stage_experts();
            }

            // Advance both residual streams with the layer's final weights.
            for (size_t s = 0; s < S; ++s) {
                add_rows(xq[s], moe_apply(cur, l, xmq[s]));
                add_rows(xf[s], moe_apply(ref, l, xmf[s]));
            }
        } catch (const ShapeError& e) {
            throw ShapeError("layer " + std::to_string(l) + ": " + e.what());
        } catch (const ArgumentError& e) {
            throw ArgumentError("layer " + std::to_string(l) + ": " + e.what());
        } catch (const NumericError& e) {
            throw NumericError("layer " + std::to_string(l) + ": " + e.what());
        } catch (const ConsistencyError& e) {
            throw ConsistencyError("layer " + std::to_string(l) + ": " + e.what());
        }
    }
    return out;
}

}  // namespace moewb
