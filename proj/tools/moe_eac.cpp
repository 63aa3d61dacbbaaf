// SPDX-License-Identifier: Apache-2.0
//
// moe-eac: desk-scale mixture-of-experts compression workbench.
//
// Every subcommand writes a report.json embedding its fully resolved
// configuration (plus CSV tables where the output is tabular) into --out,
// creates --out if missing, and never writes into an input directory.
// Module errors surface as a nonzero exit code, a structured record in
// <out>/error.json, and a message on stderr. The MOE_EAC_THREADS
// environment variable caps internal parallelism.

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "moewb/checkpoint.hpp"
#include "moewb/corpus.hpp"
#include "moewb/error.hpp"
#include "moewb/es_analysis.hpp"
#include "moewb/model.hpp"
#include "moewb/pesf.hpp"
#include "moewb/qesc.hpp"
#include "moewb/quant.hpp"
#include "moewb/util.hpp"
#include "moewb/workbench.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace moewb;

namespace {

// Where a failure record may be written. Armed only once an output
// directory has passed the input-collision check, so error.json can never
// land inside an input checkpoint.
std::string g_error_dir;

// Create the output directory and refuse to point it at an input
// directory, so input checkpoints can never be overwritten.
void prepare_out_dir(const std::string& out, const std::vector<std::string>& input_dirs) {
    if (out.empty()) throw ArgumentError("--out is required");
    std::error_code ec;
    fs::create_directories(out, ec);
    if (ec) throw IoError("cannot create output directory " + out + ": " + ec.message());
    fs::path canon_out = fs::weakly_canonical(out);
    for (const auto& in : input_dirs) {
        if (in.empty() || !fs::exists(in)) continue;
        if (fs::weakly_canonical(in) == canon_out) {
            throw ArgumentError("output directory must differ from input directory: " + in);
        }
    }
    g_error_dir = out;
}

BitSchedule resolve_schedule(const std::string& schedule, int bits, bool mhsa_given, int mhsa_bits,
                             size_t n_layers) {
    if (!schedule.empty() && bits != 0) {
        throw ArgumentError("pass either --schedule or --bits, not both");
    }
    if (schedule.empty()) {
        int b = bits == 0 ? 4 : bits;
        // A bare --bits request means "everything at b" unless the
        // attention width was pinned explicitly.
        int mb = mhsa_given ? mhsa_bits : (bits == 0 ? mhsa_bits : b);
        return parse_schedule("uniform:" + std::to_string(b), n_layers, mb);
    }
    return parse_schedule(schedule, n_layers, mhsa_bits);
}

std::string csv_escape(const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string r = "\"";
    for (char c : s) {
        if (c == '"') r += '"';
        r += c;
    }
    return r + "\"";
}

std::string fmt(double v) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    return os.str();
}

json events_json(const QescReport& rep) {
    json ev = json::array();
    for (const auto& e : rep.events) ev.push_back({{"layer", e.layer}, {"stage", e.stage}});
    return ev;
}

json calib_json(const QescReport& rep) {
    json arr = json::array();
    for (const auto& r : rep.calib) {
        arr.push_back({{"layer", r.layer},
                       {"loss_before", r.loss_before},
                       {"loss_after", r.loss_after},
                       {"change_rate_before", r.change_rate_before},
                       {"change_rate_after", r.change_rate_after},
                       {"steps_taken", r.steps_taken},
                       {"accepted_steps", r.accepted_steps},
                       {"final_lr", r.final_lr},
                       {"aborted_divergence", r.aborted_divergence}});
    }
    return arr;
}

json schedule_json(const BitSchedule& s) {
    return json{{"mhsa_bits", s.mhsa_bits},
                {"expert_bits", s.expert_bits},
                {"router_bits", s.router_bits}};
}

// ---- subcommand option bundles -------------------------------------------

struct InitOpts {
    std::string out;
    uint64_t seed = 1;
    size_t layers = 4, hidden = 64, ffn = 128, heads = 4, experts = 8, top_k = 2, vocab = 256,
           max_seq = 256;
    double plant_strength = 1.0;
};

struct GenCorpusOpts {
    std::string out;
    uint64_t seed = 1;
    size_t vocab = 256;
    bool mixed = false;
    size_t families = 4, docs_per_family = 2, doc_len = 256;
    double purity = 0.9;
    size_t n_seqs = 32, seq_len = 256;
    double stickiness = 0.9;
};

struct QuantizeOpts {
    std::string model, out, schedule, method = "gptq";
    std::vector<std::string> calib;
    int bits = 0, mhsa_bits = 4;
    bool mhsa_given = false;
    size_t group_size = 128;
    double damp_frac = 0.01;
    uint64_t seed = 1;
};

struct CalibrateOpts {
    QuantizeOpts q;  // same quantization surface
    size_t loss_k = 0, steps = 200, batch = 256;
    double lr = 1e-3;
    bool experts_first = false;
};

struct EvalOpts {
    std::string model, ref, out;
    std::vector<std::string> corpus;
    uint64_t seed = 1;
};

struct AnalyzeOpts {
    std::string model, out;
    std::vector<std::string> corpus;
    uint64_t seed = 1;
};

struct SweepOpts {
    std::string model, out, alphas = "0,0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9";
    std::vector<std::string> corpus;
    bool no_renormalize = false;
    uint64_t seed = 1;
};

struct GridOpts {
    std::string model_fp, model_q, out;
    std::vector<std::string> corpus;
    uint64_t seed = 1;
};

std::vector<double> parse_alpha_list(const std::string& text) {
    std::vector<double> out;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (item.empty()) continue;
        size_t used = 0;
        double v = std::stod(item, &used);
        if (used != item.size()) throw ArgumentError("bad alpha value: " + item);
        out.push_back(v);
    }
    if (out.empty()) throw ArgumentError("--alphas parsed to an empty list");
    return out;
}

// ---- subcommand bodies ----------------------------------------------------

void run_init(const InitOpts& o) {
    ModelConfig cfg;
    cfg.num_layers = o.layers;
    cfg.hidden_dim = o.hidden;
    cfg.ffn_dim = o.ffn;
    cfg.num_heads = o.heads;
    cfg.num_experts = o.experts;
    cfg.top_k = o.top_k;
    cfg.vocab_size = o.vocab;
    cfg.max_seq_len = o.max_seq;
    cfg.validate();
    prepare_out_dir(o.out, {});
    MoEModel model = init_planted(cfg, o.seed, static_cast<float>(o.plant_strength));
    save_checkpoint(model, o.out);
    BitsReport bits = bits_report(model);
    json rep{{"command", "init-model"},
             {"seed", o.seed},
             {"config",
              {{"model", config_to_json(cfg)}, {"plant_strength", o.plant_strength}}},
             {"outputs", {{"checkpoint", o.out}}},
             {"results",
              {{"total_params", bits.total_params}, {"blob_bytes", expected_blob_bytes(model)}}}};
    write_json_file(o.out + "/report.json", rep);
}

void run_gen_corpus(const GenCorpusOpts& o) {
    if (o.vocab < 2 || o.vocab > 256) {
        throw ArgumentError("gen-corpus: vocab must be in [2, 256] for byte datasets");
    }
    prepare_out_dir(o.out, {});
    json files = json::array();
    if (o.mixed) {
        auto seqs = gen_mixed_corpus(o.n_seqs, o.seq_len, o.vocab, o.families, o.stickiness,
                                     o.seed);
        for (size_t i = 0; i < seqs.size(); ++i) {
            char name[64];
            std::snprintf(name, sizeof name, "mixed_%03zu.tokens", i);
            write_tokens_file(o.out + "/" + name, seqs[i]);
            files.push_back({{"file", name}, {"tokens", seqs[i].size()}});
        }
    } else {
        SplitMix64 doc_seeds(o.seed);
        for (size_t f = 0; f < o.families; ++f) {
            for (size_t d = 0; d < o.docs_per_family; ++d) {
                auto doc = gen_family_doc(f, o.families, o.doc_len, o.vocab, o.purity,
                                          doc_seeds.next_u64());
                char name[64];
                std::snprintf(name, sizeof name, "family%zu_doc%zu.tokens", f, d);
                write_tokens_file(o.out + "/" + name, doc);
                files.push_back({{"file", name}, {"family", f}, {"tokens", doc.size()}});
            }
        }
    }
    json rep{{"command", "gen-corpus"},
             {"seed", o.seed},
             {"config",
              {{"vocab", o.vocab},
               {"mixed", o.mixed},
               {"families", o.families},
               {"docs_per_family", o.docs_per_family},
               {"doc_len", o.doc_len},
               {"purity", o.purity},
               {"n_seqs", o.n_seqs},
               {"seq_len", o.seq_len},
               {"stickiness", o.stickiness}}},
             {"outputs", {{"dir", o.out}, {"files", files}}}};
    write_json_file(o.out + "/report.json", rep);
}

json quantize_config_json(const QuantizeOpts& o, const BitSchedule& sched) {
    return json{{"model", o.model},       {"method", o.method},
                {"schedule", schedule_json(sched)}, {"group_size", o.group_size},
                {"damp_frac", o.damp_frac},         {"calib_files", o.calib}};
}

// Activation-free whole-model quantization at a bit schedule.
void rtn_apply(MoEModel& m, const BitSchedule& sched, size_t group_size) {
    for (size_t l = 0; l < m.config.num_layers; ++l) {
        Layer& lw = m.layers[l];
        if (sched.mhsa_bits != 16) {
            for (WeightSlot* s : {&lw.wq, &lw.wk, &lw.wv, &lw.wo}) {
                s->set_quantized(rtn_quantize(s->dense, sched.mhsa_bits, group_size));
            }
        }
        if (sched.expert_bits[l] != 16) {
            for (Expert& e : lw.experts) {
                for (WeightSlot* s : {&e.gate, &e.up, &e.down}) {
                    s->set_quantized(rtn_quantize(s->dense, sched.expert_bits[l], group_size));
                }
            }
        }
    }
}

void run_quantize(const QuantizeOpts& o) {
    MoEModel model = load_checkpoint(o.model);
    BitSchedule sched =
        resolve_schedule(o.schedule, o.bits, o.mhsa_given, o.mhsa_bits, model.config.num_layers);
    prepare_out_dir(o.out, {o.model});
    QuantConfig qcfg;
    qcfg.group_size = o.group_size;
    qcfg.lambda_frac = o.damp_frac;
    qcfg.method = o.method;
    json rep{{"command", "quantize"}, {"seed", o.seed},
             {"config", quantize_config_json(o, sched)}};
    if (o.method == "rtn") {
        rtn_apply(model, sched, o.group_size);
        save_checkpoint(model, o.out);
        rep["results"] = {{"bits", bits_report_json(bits_report(model))}};
    } else if (o.method == "gptq") {
        if (o.calib.empty()) {
            throw ArgumentError("quantize: --calib token files are required for gptq");
        }
        auto corpus = load_corpus(o.calib, model.config.vocab_size, model.config.max_seq_len);
        QescResult res = run_qesc_pipeline(model, corpus, sched, qcfg, CalibConfig{},
                                           /*calibrate=*/false);
        save_checkpoint(res.model, o.out);
        rep["results"] = {{"bits", bits_report_json(bits_report(res.model))},
                          {"events", events_json(res.report)}};
    } else {
        throw ArgumentError("quantize: unknown method '" + o.method + "'");
    }
    rep["outputs"] = {{"checkpoint", o.out}};
    write_json_file(o.out + "/report.json", rep);
}

void run_calibrate(const CalibrateOpts& c) {
    const QuantizeOpts& o = c.q;
    if (o.calib.empty()) throw ArgumentError("calibrate: --calib token files are required");
    MoEModel model = load_checkpoint(o.model);
    BitSchedule sched =
        resolve_schedule(o.schedule, o.bits, o.mhsa_given, o.mhsa_bits, model.config.num_layers);
    prepare_out_dir(o.out, {o.model});
    QuantConfig qcfg;
    qcfg.group_size = o.group_size;
    qcfg.lambda_frac = o.damp_frac;
    qcfg.method = o.method;
    CalibConfig ccfg;
    ccfg.loss_k = c.loss_k;
    ccfg.learning_rate = c.lr;
    ccfg.steps = c.steps;
    ccfg.batch = c.batch;
    auto corpus = load_corpus(o.calib, model.config.vocab_size, model.config.max_seq_len);
    QescResult res = run_qesc_pipeline(model, corpus, sched, qcfg, ccfg, /*calibrate=*/true,
                                       /*calibrate_before_experts=*/!c.experts_first);
    save_checkpoint(res.model, o.out);

    std::string csv =
        "layer,loss_before,loss_after,change_rate_before,change_rate_after,steps_taken,"
        "accepted_steps,final_lr,aborted_divergence\n";
    for (const auto& r : res.report.calib) {
        csv += std::to_string(r.layer) + "," + fmt(r.loss_before) + "," + fmt(r.loss_after) + "," +
               fmt(r.change_rate_before) + "," + fmt(r.change_rate_after) + "," +
               std::to_string(r.steps_taken) + "," + std::to_string(r.accepted_steps) + "," +
               fmt(r.final_lr) + "," + (r.aborted_divergence ? "1" : "0") + "\n";
    }
    write_text_file(o.out + "/calibration.csv", csv);

    json cfg_json = quantize_config_json(o, sched);
    cfg_json["loss_k"] = c.loss_k;
    cfg_json["learning_rate"] = c.lr;
    cfg_json["steps"] = c.steps;
    cfg_json["batch"] = c.batch;
    cfg_json["order"] = c.experts_first ? "experts-first" : "router-first";
    json rep{{"command", "calibrate"},
             {"seed", o.seed},
             {"config", cfg_json},
             {"outputs", {{"checkpoint", o.out}, {"tables", {"calibration.csv"}}}},
             {"results",
              {{"bits", bits_report_json(bits_report(res.model))},
               {"events", events_json(res.report)},
               {"calibration", calib_json(res.report)}}}};
    write_json_file(o.out + "/report.json", rep);
}

void run_eval(const EvalOpts& o) {
    MoEModel model = load_checkpoint(o.model);
    prepare_out_dir(o.out, {o.model, o.ref});
    auto corpus = load_corpus(o.corpus, model.config.vocab_size, model.config.max_seq_len);
    double ppl = perplexity(model, corpus);
    json results{{"ppl", ppl}};
    json notes = json::array();
    if (!o.ref.empty()) {
        MoEModel ref = load_checkpoint(o.ref);
        if (!(ref.config == model.config)) {
            throw ArgumentError("eval: --ref checkpoint config differs from --model");
        }
        auto ref_traces = collect_traces(ref, corpus);
        auto test_traces = collect_traces(model, corpus);
        ChangeRateReport rates = change_rates(ref_traces, test_traces);
        results["ref_ppl"] = perplexity(ref, corpus);
        results["change_rates"] = {{"all_changed", rates.overall.all_changed},
                                   {"any_changed", rates.overall.any_changed},
                                   {"half_changed", rates.overall.half_changed}};
        if (model.config.top_k == 2) {
            notes.push_back("top_k is 2, so half_changed coincides with any_changed");
        }
        std::string csv = "layer,all_changed,any_changed,half_changed\n";
        for (size_t l = 0; l < rates.per_layer.size(); ++l) {
            csv += std::to_string(l) + "," + fmt(rates.per_layer[l].all_changed) + "," +
                   fmt(rates.per_layer[l].any_changed) + "," +
                   fmt(rates.per_layer[l].half_changed) + "\n";
        }
        csv += "overall," + fmt(rates.overall.all_changed) + "," +
               fmt(rates.overall.any_changed) + "," + fmt(rates.overall.half_changed) + "\n";
        write_text_file(o.out + "/change_rates.csv", csv);
    }
    json rep{{"command", "eval"},
             {"seed", o.seed},
             {"config",
              {{"model", o.model}, {"ref", o.ref}, {"corpus_files", o.corpus}}},
             {"results", results},
             {"notes", notes}};
    write_json_file(o.out + "/report.json", rep);
}

void run_analyze(const AnalyzeOpts& o) {
    MoEModel model = load_checkpoint(o.model);
    prepare_out_dir(o.out, {o.model});
    std::vector<std::string> names;
    std::vector<FrequencyProfile> profiles;
    for (const auto& path : o.corpus) {
        auto seqs = read_tokens_file(path, model.config.vocab_size, model.config.max_seq_len);
        profiles.push_back(frequency_profile(collect_traces(model, seqs)));
        names.push_back(fs::path(path).stem().string());
    }
    size_t n = profiles.size();
    const ModelConfig& cfg = model.config;

    std::string pcsv = "dataset";
    for (size_t m = 0; m < cfg.num_layers; ++m) {
        for (size_t e = 0; e < cfg.num_experts; ++e) {
            pcsv += ",layer" + std::to_string(m) + "_expert" + std::to_string(e);
        }
    }
    pcsv += "\n";
    for (size_t i = 0; i < n; ++i) {
        pcsv += csv_escape(names[i]);
        for (double v : profiles[i].flattened) pcsv += "," + fmt(v);
        pcsv += "\n";
    }
    write_text_file(o.out + "/profiles.csv", pcsv);

    std::vector<std::vector<double>> sim(n, std::vector<double>(n, 0.0));
    std::string scsv = "dataset";
    for (const auto& nm : names) scsv += "," + csv_escape(nm);
    scsv += "\n";
    for (size_t i = 0; i < n; ++i) {
        scsv += csv_escape(names[i]);
        for (size_t j = 0; j < n; ++j) {
            sim[i][j] = profile_similarity(profiles[i], profiles[j]);
            scsv += "," + fmt(sim[i][j]);
        }
        scsv += "\n";
    }
    write_text_file(o.out + "/similarity.csv", scsv);

    json rep{{"command", "analyze-es"},
             {"seed", o.seed},
             {"config", {{"model", o.model}, {"corpus_files", o.corpus}}},
             {"outputs", {{"tables", {"profiles.csv", "similarity.csv"}}}},
             {"results", {{"datasets", names}, {"similarity", sim}}}};
    write_json_file(o.out + "/report.json", rep);
}

void run_sweep(const SweepOpts& o) {
    MoEModel model = load_checkpoint(o.model);
    prepare_out_dir(o.out, {o.model});
    auto corpus = load_corpus(o.corpus, model.config.vocab_size, model.config.max_seq_len);
    std::vector<double> alphas = parse_alpha_list(o.alphas);
    std::string csv =
        "alpha,ppl,mean_pruning_rate,flops,flops_dense,fallback_tokens,dropped_selections\n";
    json rows = json::array();
    for (double a : alphas) {
        PruneConfig pcfg;
        pcfg.alpha = a;
        pcfg.renormalize = !o.no_renormalize;
        PrunedEval ev = evaluate_pruned(model, corpus, pcfg);
        csv += fmt(a) + "," + fmt(ev.ppl) + "," + fmt(ev.mean_pruning_rate) + "," +
               std::to_string(ev.flops) + "," + std::to_string(ev.flops_dense) + "," +
               std::to_string(ev.fallback_tokens) + "," + std::to_string(ev.dropped_selections) +
               "\n";
        rows.push_back({{"alpha", a},
                        {"ppl", ev.ppl},
                        {"mean_pruning_rate", ev.mean_pruning_rate},
                        {"flops", ev.flops},
                        {"flops_dense", ev.flops_dense},
                        {"fallback_tokens", ev.fallback_tokens},
                        {"dropped_selections", ev.dropped_selections}});
    }
    write_text_file(o.out + "/sweep.csv", csv);
    json rep{{"command", "pesf-sweep"},
             {"seed", o.seed},
             {"config",
              {{"model", o.model},
               {"corpus_files", o.corpus},
               {"alphas", alphas},
               {"renormalize", !o.no_renormalize}}},
             {"outputs", {{"tables", {"sweep.csv"}}}},
             {"results", {{"rows", rows}}}};
    write_json_file(o.out + "/report.json", rep);
}

void run_grid(const GridOpts& o) {
    MoEModel fp = load_checkpoint(o.model_fp);
    MoEModel q = load_checkpoint(o.model_q);
    prepare_out_dir(o.out, {o.model_fp, o.model_q});
    auto corpus = load_corpus(o.corpus, fp.config.vocab_size, fp.config.max_seq_len);
    ShiftGrid grid = expert_shift_grid(fp, q, corpus);
    std::string csv = "weights,own_routing,other_routing\n";
    csv += "reference," + fmt(grid.fp_own) + "," + fmt(grid.fp_forced_q) + "\n";
    csv += "quantized," + fmt(grid.q_own) + "," + fmt(grid.q_forced_fp) + "\n";
    write_text_file(o.out + "/grid.csv", csv);
    json rep{{"command", "shift-grid"},
             {"seed", o.seed},
             {"config",
              {{"model_fp", o.model_fp}, {"model_q", o.model_q}, {"corpus_files", o.corpus}}},
             {"outputs", {{"tables", {"grid.csv"}}}},
             {"results",
              {{"fp_own", grid.fp_own},
               {"fp_forced_q", grid.fp_forced_q},
               {"q_forced_fp", grid.q_forced_fp},
               {"q_own", grid.q_own}}}};
    write_json_file(o.out + "/report.json", rep);
}

const char* error_kind(const Error& e) {
    if (dynamic_cast<const ShapeError*>(&e)) return "shape";
    if (dynamic_cast<const ArgumentError*>(&e)) return "argument";
    if (dynamic_cast<const NumericError*>(&e)) return "numeric";
    if (dynamic_cast<const ConsistencyError*>(&e)) return "consistency";
    if (dynamic_cast<const IoError*>(&e)) return "io";
    return "error";
}

void add_common(CLI::App* sub) {
    // Consumed by expand_config_args before parsing; registered here so the
    // subcommand's --help documents it.
    sub->add_option("--config", "flat key=value file; keys are long option names");
}

// The argument parser only reads config files attached to the top-level
// command, so expand the per-subcommand flat key=value file into ordinary
// --key=value tokens before parsing. Keys are long option names (leading
// dashes optional); unknown keys are rejected by normal option matching, and
// explicit command-line flags win over file entries.
std::vector<std::string> expand_config_args(const std::vector<std::string>& argv_in) {
    std::vector<std::string> args;
    std::string path;
    std::size_t insert_at = 0;
    for (std::size_t i = 0; i < argv_in.size(); ++i) {
        const std::string& a = argv_in[i];
        std::string p;
        if (a == "--config") {
            if (i + 1 >= argv_in.size()) throw CLI::FileError("--config: missing file path");
            p = argv_in[++i];
        } else if (a.rfind("--config=", 0) == 0) {
            p = a.substr(9);
        } else {
            args.push_back(a);
            continue;
        }
        if (!path.empty()) throw CLI::FileError("--config: only one file is allowed");
        path = p;
        insert_at = args.size();
    }
    if (path.empty()) return args;

    std::ifstream in(path);
    if (!in) throw CLI::FileError::Missing(path);
    auto given = [&args](const std::string& name) {
        for (const auto& a : args)
            if (a == name || a.rfind(name + "=", 0) == 0) return true;
        return false;
    };
    std::vector<std::string> extra;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        std::string t = CLI::detail::trim_copy(line);
        if (t.empty() || t[0] == '#') continue;
        auto eq = t.find('=');
        std::string key = (eq == std::string::npos) ? "" : CLI::detail::trim_copy(t.substr(0, eq));
        while (!key.empty() && key.front() == '-') key.erase(key.begin());
        if (key.empty())
            throw CLI::FileError(path + ":" + std::to_string(lineno) + ": expected key=value");
        std::string name = "--" + key;
        if (given(name)) continue;
        extra.push_back(name + "=" + CLI::detail::trim_copy(t.substr(eq + 1)));
    }
    args.insert(args.begin() + static_cast<std::ptrdiff_t>(insert_at), extra.begin(), extra.end());
    return args;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Desk-scale mixture-of-experts compression workbench"};
    app.require_subcommand(1);

    std::string active_cmd;

    InitOpts io;
    auto* init = app.add_subcommand("init-model", "Create a planted toy model checkpoint");
    init->add_option("--out", io.out, "output checkpoint directory")->required();
    init->add_option("--seed", io.seed, "rng seed")->capture_default_str();
    init->add_option("--layers", io.layers)->capture_default_str();
    init->add_option("--hidden", io.hidden)->capture_default_str();
    init->add_option("--ffn", io.ffn)->capture_default_str();
    init->add_option("--heads", io.heads)->capture_default_str();
    init->add_option("--experts", io.experts)->capture_default_str();
    init->add_option("--top-k", io.top_k)->capture_default_str();
    init->add_option("--vocab", io.vocab)->capture_default_str();
    init->add_option("--max-seq", io.max_seq)->capture_default_str();
    init->add_option("--plant-strength", io.plant_strength,
                     "0 = pure noise, 1 = full expert specialization")
        ->capture_default_str();
    add_common(init);
    init->callback([&] {
        active_cmd = "init-model";
        run_init(io);
    });

    GenCorpusOpts go;
    auto* gen = app.add_subcommand("gen-corpus", "Generate synthetic byte datasets");
    gen->add_option("--out", go.out, "output directory")->required();
    gen->add_option("--seed", go.seed)->capture_default_str();
    gen->add_option("--vocab", go.vocab)->capture_default_str();
    gen->add_flag("--mixed", go.mixed, "sticky mixed-family sequences instead of family docs");
    gen->add_option("--families", go.families)->capture_default_str();
    gen->add_option("--docs-per-family", go.docs_per_family)->capture_default_str();
    gen->add_option("--doc-len", go.doc_len)->capture_default_str();
    gen->add_option("--purity", go.purity, "in-band draw probability for family docs")
        ->capture_default_str();
    gen->add_option("--n-seqs", go.n_seqs, "mixed mode: sequence count")->capture_default_str();
    gen->add_option("--seq-len", go.seq_len, "mixed mode: tokens per sequence")
        ->capture_default_str();
    gen->add_option("--stickiness", go.stickiness, "mixed mode: family stay probability")
        ->capture_default_str();
    add_common(gen);
    gen->callback([&] {
        active_cmd = "gen-corpus";
        run_gen_corpus(go);
    });

    auto add_quant_opts = [](CLI::App* sub, QuantizeOpts& q, bool calib_required) {
        sub->add_option("--model", q.model, "input checkpoint directory")
            ->required()
            ->check(CLI::ExistingDirectory);
        sub->add_option("--out", q.out, "output checkpoint directory")->required();
        auto* calib = sub->add_option("--calib", q.calib, "calibration token files")
                          ->check(CLI::ExistingFile);
        if (calib_required) calib->required();
        sub->add_option("--schedule", q.schedule, "uniform:<b> or half:<hi>/<lo> expert bits");
        sub->add_option("--bits", q.bits, "shorthand: everything at this width")
            ->check(CLI::IsMember({0, 2, 3, 4, 8, 16}));
        sub->add_option("--mhsa-bits", q.mhsa_bits, "attention projection width")
            ->capture_default_str();
        sub->add_option("--group-size", q.group_size)->capture_default_str();
        sub->add_option("--method", q.method, "rtn | gptq")
            ->capture_default_str()
            ->check(CLI::IsMember({"rtn", "gptq"}));
        sub->add_option("--damp-frac", q.damp_frac, "diagonal damping fraction")
            ->capture_default_str();
        sub->add_option("--seed", q.seed)->capture_default_str();
    };

    QuantizeOpts qo;
    auto* quant = app.add_subcommand("quantize", "Quantize a checkpoint (no router calibration)");
    add_quant_opts(quant, qo, false);
    add_common(quant);
    quant->callback([&] {
        active_cmd = "quantize";
        qo.mhsa_given = quant->count("--mhsa-bits") > 0;
        run_quantize(qo);
    });

    CalibrateOpts co;
    auto* calib = app.add_subcommand(
        "calibrate", "Quantize with expert-selection router calibration");
    add_quant_opts(calib, co.q, true);
    calib->add_option("--loss-k", co.loss_k, "loss set width; 0 = min(N, 2K+4)")
        ->capture_default_str();
    calib->add_option("--lr", co.lr, "calibration learning rate")->capture_default_str();
    calib->add_option("--steps", co.steps, "gradient steps per layer")->capture_default_str();
    calib->add_option("--batch", co.batch, "tokens per gradient step")->capture_default_str();
    calib->add_flag("--experts-first", co.experts_first,
                    "quantize experts before calibrating the router");
    add_common(calib);
    calib->callback([&] {
        active_cmd = "calibrate";
        co.q.mhsa_given = calib->count("--mhsa-bits") > 0;
        run_calibrate(co);
    });

    EvalOpts eo;
    auto* ev = app.add_subcommand("eval", "Perplexity (and change rates against a reference)");
    ev->add_option("--model", eo.model)->required()->check(CLI::ExistingDirectory);
    ev->add_option("--ref", eo.ref, "reference checkpoint for change rates")
        ->check(CLI::ExistingDirectory);
    ev->add_option("--corpus", eo.corpus, "token files")->required()->check(CLI::ExistingFile);
    ev->add_option("--out", eo.out)->required();
    ev->add_option("--seed", eo.seed)->capture_default_str();
    add_common(ev);
    ev->callback([&] {
        active_cmd = "eval";
        run_eval(eo);
    });

    AnalyzeOpts ao;
    auto* an = app.add_subcommand("analyze-es",
                                  "Selection-frequency profiles and dataset similarity");
    an->add_option("--model", ao.model)->required()->check(CLI::ExistingDirectory);
    an->add_option("--corpus", ao.corpus, "token files, one dataset each")
        ->required()
        ->check(CLI::ExistingFile);
    an->add_option("--out", ao.out)->required();
    an->add_option("--seed", ao.seed)->capture_default_str();
    add_common(an);
    an->callback([&] {
        active_cmd = "analyze-es";
        run_analyze(ao);
    });

    SweepOpts so;
    auto* sw = app.add_subcommand("pesf-sweep", "Frequency-pruning sweep over alpha");
    sw->add_option("--model", so.model)->required()->check(CLI::ExistingDirectory);
    sw->add_option("--corpus", so.corpus, "token files")->required()->check(CLI::ExistingFile);
    sw->add_option("--out", so.out)->required();
    sw->add_option("--alphas", so.alphas, "comma-separated thresholds")->capture_default_str();
    sw->add_flag("--no-renormalize", so.no_renormalize,
                 "keep original selection weights after pruning");
    sw->add_option("--seed", so.seed)->capture_default_str();
    add_common(sw);
    sw->callback([&] {
        active_cmd = "pesf-sweep";
        run_sweep(so);
    });

    GridOpts ro;
    auto* gr = app.add_subcommand("shift-grid",
                                  "Weight-error vs selection-shift perplexity grid");
    gr->add_option("--model-fp", ro.model_fp, "reference checkpoint")
        ->required()
        ->check(CLI::ExistingDirectory);
    gr->add_option("--model-q", ro.model_q, "compressed checkpoint")
        ->required()
        ->check(CLI::ExistingDirectory);
    gr->add_option("--corpus", ro.corpus, "token files")->required()->check(CLI::ExistingFile);
    gr->add_option("--out", ro.out)->required();
    gr->add_option("--seed", ro.seed)->capture_default_str();
    add_common(gr);
    gr->callback([&] {
        active_cmd = "shift-grid";
        run_grid(ro);
    });

    app.name(argc > 0 ? fs::path(argv[0]).filename().string() : "moe-eac");
    try {
        std::vector<std::string> args(argv + std::min(argc, 1), argv + argc);
        args = expand_config_args(args);
        std::reverse(args.begin(), args.end());
        app.parse(std::move(args));
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        if (!g_error_dir.empty()) {
            try {
                write_json_file(g_error_dir + "/error.json",
                                json{{"command", active_cmd},
                                     {"kind", error_kind(e)},
                                     {"message", e.what()}});
            } catch (...) {
                // the report directory itself is unusable; stderr has the story
            }
        }
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
