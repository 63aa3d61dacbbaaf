// SPDX-License-Identifier: Apache-2.0
#include "moewb/workbench.hpp"

#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "moewb/checkpoint.hpp"
#include "moewb/error.hpp"

namespace moewb {

void write_tokens_file(const std::string& path, const std::vector<uint32_t>& seq) {
    std::vector<char> bytes(seq.size());
    for (size_t i = 0; i < seq.size(); ++i) {
        if (seq[i] > 0xff) {
            throw ArgumentError("write_tokens_file: token " + std::to_string(seq[i]) +
                                " does not fit a byte");
        }
        bytes[i] = static_cast<char>(seq[i]);
    }
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot open for writing: " + path);
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw IoError("short write: " + path);
}

std::vector<std::vector<uint32_t>> read_tokens_file(const std::string& path, size_t vocab,
                                                    size_t max_len) {
    if (max_len == 0) throw ArgumentError("read_tokens_file: max_len must be >= 1");
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open: " + path);
    std::vector<char> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    if (bytes.empty()) throw IoError("empty token file: " + path);
    std::vector<std::vector<uint32_t>> seqs;
    for (size_t start = 0; start < bytes.size(); start += max_len) {
        size_t end = std::min(start + max_len, bytes.size());
        std::vector<uint32_t> seq(end - start);
        for (size_t i = start; i < end; ++i) {
            uint32_t tok = static_cast<uint8_t>(bytes[i]);
            if (tok >= vocab) {
                throw ArgumentError("token " + std::to_string(tok) + " out of vocabulary in " +
                                    path);
            }
            seq[i - start] = tok;
        }
        seqs.push_back(std::move(seq));
    }
    return seqs;
}

std::vector<std::vector<uint32_t>> load_corpus(const std::vector<std::string>& paths, size_t vocab,
                                               size_t max_len) {
    if (paths.empty()) throw ArgumentError("load_corpus: no token files given");
    std::vector<std::vector<uint32_t>> corpus;
    for (const auto& p : paths) {
        for (auto& s : read_tokens_file(p, vocab, max_len)) corpus.push_back(std::move(s));
    }
    return corpus;
}

nlohmann::json config_to_json(const ModelConfig& cfg) {
    return nlohmann::json{{"num_layers", cfg.num_layers},   {"hidden_dim", cfg.hidden_dim},
                          {"ffn_dim", cfg.ffn_dim},         {"num_heads", cfg.num_heads},
                          {"num_experts", cfg.num_experts}, {"top_k", cfg.top_k},
                          {"vocab_size", cfg.vocab_size},   {"max_seq_len", cfg.max_seq_len}};
}

namespace {

struct BitsTally {
    uint64_t params = 0;
    uint64_t qparams = 0;
    double bits16 = 0.0;  // parameter-bits with fp counted at 16
    double bits32 = 0.0;  // parameter-bits with fp counted at 32

    void dense(uint64_t n) {
        params += n;
        bits16 += static_cast<double>(n) * 16.0;
        bits32 += static_cast<double>(n) * 32.0;
    }
    void slot(const WeightSlot& s) {
        uint64_t n = static_cast<uint64_t>(s.dense.rows) * s.dense.cols;
        if (s.quantized()) {
            params += n;
            qparams += n;
            bits16 += static_cast<double>(n) * s.qm->bits;
            bits32 += static_cast<double>(n) * s.qm->bits;
        } else {
            dense(n);
        }
    }
};

}  // namespace

BitsReport bits_report(const MoEModel& model) {
    BitsTally t;
    t.dense(model.embed.size());
    for (const Layer& l : model.layers) {
        t.dense(l.norm_attn_gain.size());
        t.dense(l.norm_moe_gain.size());
        t.slot(l.wq);
        t.slot(l.wk);
        t.slot(l.wv);
        t.slot(l.wo);
        t.dense(l.router.size());
        for (const Expert& e : l.experts) {
            t.slot(e.gate);
            t.slot(e.up);
            t.slot(e.down);
        }
    }
    t.dense(model.norm_final_gain.size());
    t.slot(model.head);

    BitsReport r;
    r.total_params = t.params;
    r.quantized_params = t.qparams;
    double p = static_cast<double>(t.params);
    r.avg_bits_fp16 = t.bits16 / p;
    r.avg_bits_fp32 = t.bits32 / p;
    r.avg_bits_blob = static_cast<double>(expected_blob_bytes(model)) * 8.0 / p;
    return r;
}

nlohmann::json bits_report_json(const BitsReport& r) {
    return nlohmann::json{{"total_params", r.total_params},
                          {"quantized_params", r.quantized_params},
                          {"avg_bits_fp_as_16", r.avg_bits_fp16},
                          {"avg_bits_fp_as_32", r.avg_bits_fp32},
                          {"avg_bits_serialized", r.avg_bits_blob}};
}

void write_text_file(const std::string& path, const std::string& text) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot open for writing: " + path);
    f.write(text.data(), static_cast<std::streamsize>(text.size()));
    if (!f) throw IoError("short write: " + path);
}

void write_json_file(const std::string& path, const nlohmann::json& j) {
    write_text_file(path, j.dump(2) + "\n");
}

}  // namespace moewb
