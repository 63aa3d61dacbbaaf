// SPDX-License-Identifier: Apache-2.0
#include "moewb/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <vector>

#include "json.hpp"
#include "moewb/error.hpp"
#include "moewb/util.hpp"

namespace moewb {

namespace {

static_assert(std::endian::native == std::endian::little,
              "checkpoint blobs are little-endian; big-endian hosts are unsupported");

using nlohmann::json;

constexpr int kFormatVersion = 1;

std::string hex64(uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return std::string(buf);
}

json config_to_json(const ModelConfig& c) {
    return json{{"num_layers", c.num_layers},   {"hidden_dim", c.hidden_dim},
                {"ffn_dim", c.ffn_dim},         {"num_heads", c.num_heads},
                {"num_experts", c.num_experts}, {"top_k", c.top_k},
                {"vocab_size", c.vocab_size},   {"max_seq_len", c.max_seq_len}};
}

ModelConfig config_from_json(const json& j) {
    ModelConfig c;
    try {
        c.num_layers = j.at("num_layers").get<size_t>();
        c.hidden_dim = j.at("hidden_dim").get<size_t>();
        c.ffn_dim = j.at("ffn_dim").get<size_t>();
        c.num_heads = j.at("num_heads").get<size_t>();
        c.num_experts = j.at("num_experts").get<size_t>();
        c.top_k = j.at("top_k").get<size_t>();
        c.vocab_size = j.at("vocab_size").get<size_t>();
        c.max_seq_len = j.at("max_seq_len").get<size_t>();
    } catch (const json::exception& e) {
        throw IoError(std::string("checkpoint: bad config: ") + e.what());
    }
    return c;
}

void append_bytes(std::vector<uint8_t>& blob, const void* p, size_t len) {
    const auto* b = static_cast<const uint8_t*>(p);
    blob.insert(blob.end(), b, b + len);
}

json emit_dense(const std::string& name, const Matrix& m, std::vector<uint8_t>& blob) {
    uint64_t off = blob.size();
    append_bytes(blob, m.data.data(), m.data.size() * 4);
    uint64_t len = blob.size() - off;
    return json{{"name", name},
                {"kind", "dense"},
                {"shape", {m.rows, m.cols}},
                {"offset", off},
                {"length", len},
                {"checksum", hex64(fnv1a64(blob.data() + off, len))}};
}

json emit_qpacked(const std::string& name, const QuantizedMatrix& q,
                  std::vector<uint8_t>& blob) {
    uint64_t p_off = blob.size();
    append_bytes(blob, q.packed.data(), q.packed.size() * 4);
    uint64_t p_len = blob.size() - p_off;
    uint64_t s_off = blob.size();
    append_bytes(blob, q.scales.data(), q.scales.size() * 4);
    uint64_t s_len = blob.size() - s_off;
    uint64_t z_off = blob.size();
    append_bytes(blob, q.zps.data(), q.zps.size());
    uint64_t z_len = blob.size() - z_off;
    return json{{"name", name},
                {"kind", "qpacked"},
                {"shape", {q.rows, q.cols}},
                {"bits", q.bits},
                {"group_size", q.group_size},
                {"packed_offset", p_off},
                {"packed_length", p_len},
                {"scales_offset", s_off},
                {"scales_length", s_len},
                {"zps_offset", z_off},
                {"zps_length", z_len},
                {"checksum", hex64(fnv1a64(blob.data() + p_off, p_len + s_len + z_len))}};
}

json emit_slot(const std::string& name, const WeightSlot& slot, std::vector<uint8_t>& blob) {
    if (slot.quantized()) return emit_qpacked(name, *slot.qm, blob);
    return emit_dense(name, slot.dense, blob);
}

Matrix gain_as_matrix(const std::vector<float>& gain) {
    Matrix m(1, gain.size());
    std::copy(gain.begin(), gain.end(), m.data.begin());
    return m;
}

struct Segment {
    uint64_t off, len;
};

void read_segment(const std::vector<uint8_t>& blob, uint64_t off, uint64_t len, void* out,
                  const std::string& name) {
    if (off > blob.size() || len > blob.size() - off) {
        throw IoError("checkpoint: segment of '" + name + "' out of blob bounds");
    }
    std::memcpy(out, blob.data() + off, len);
}

uint64_t slot_bytes(const WeightSlot& s) {
    if (!s.quantized()) return static_cast<uint64_t>(s.dense.data.size()) * 4;
    const QuantizedMatrix& q = *s.qm;
    return static_cast<uint64_t>(q.packed.size()) * 4 + q.scales.size() * 4 + q.zps.size();
}

}  // namespace

void save_checkpoint(const MoEModel& model, const std::string& dir) {
    model.config.validate();
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw IoError("checkpoint: cannot create directory " + dir + ": " + ec.message());

    std::vector<uint8_t> blob;
    json tensors = json::array();
    tensors.push_back(emit_dense("embed", model.embed, blob));
    for (size_t l = 0; l < model.config.num_layers; ++l) {
        const Layer& lw = model.layers[l];
        std::string p = "layers." + std::to_string(l) + ".";
        tensors.push_back(emit_dense(p + "norm_attn", gain_as_matrix(lw.norm_attn_gain), blob));
        tensors.push_back(emit_slot(p + "attn.wq", lw.wq, blob));
        tensors.push_back(emit_slot(p + "attn.wk", lw.wk, blob));
        tensors.push_back(emit_slot(p + "attn.wv", lw.wv, blob));
        tensors.push_back(emit_slot(p + "attn.wo", lw.wo, blob));
        tensors.push_back(emit_dense(p + "norm_moe", gain_as_matrix(lw.norm_moe_gain), blob));
        tensors.push_back(emit_dense(p + "router", lw.router, blob));
        for (size_t e = 0; e < model.config.num_experts; ++e) {
            std::string ep = p + "experts." + std::to_string(e) + ".";
            const Expert& ex = lw.experts[e];
            tensors.push_back(emit_slot(ep + "gate", ex.gate, blob));
            tensors.push_back(emit_slot(ep + "up", ex.up, blob));
            tensors.push_back(emit_slot(ep + "down", ex.down, blob));
        }
    }
    tensors.push_back(emit_dense("norm_final", gain_as_matrix(model.norm_final_gain), blob));
    tensors.push_back(emit_slot("head", model.head, blob));

    json manifest{{"format_version", kFormatVersion},
                  {"config", config_to_json(model.config)},
                  {"tensors", tensors}};

    auto write_file = [&](const std::string& path, const void* data, size_t len) {
        std::ofstream f(path, std::ios::binary | std::ios::trunc);
        if (!f) throw IoError("checkpoint: cannot open " + path + " for writing");
        f.write(static_cast<const char*>(data), static_cast<std::streamsize>(len));
        if (!f) throw IoError("checkpoint: short write to " + path);
    };
    write_file(dir + "/weights.bin", blob.data(), blob.size());
    std::string text = manifest.dump(2);
    text.push_back('\n');
    write_file(dir + "/manifest.json", text.data(), text.size());
}

MoEModel load_checkpoint(const std::string& dir) {
    std::ifstream mf(dir + "/manifest.json");
    if (!mf) throw IoError("checkpoint: cannot read " + dir + "/manifest.json");
    json manifest;
    try {
        mf >> manifest;
    } catch (const json::exception& e) {
        throw IoError(std::string("checkpoint: manifest parse error: ") + e.what());
    }
    if (!manifest.contains("format_version") ||
        manifest["format_version"].get<int>() != kFormatVersion) {
        throw IoError("checkpoint: unsupported format_version");
    }
    ModelConfig cfg = config_from_json(manifest.at("config"));
    try {
        cfg.validate();
    } catch (const Error& e) {
        throw IoError(std::string("checkpoint: invalid config: ") + e.what());
    }

    std::ifstream bf(dir + "/weights.bin", std::ios::binary);
    if (!bf) throw IoError("checkpoint: cannot read " + dir + "/weights.bin");
    std::vector<uint8_t> blob((std::istreambuf_iterator<char>(bf)),
                              std::istreambuf_iterator<char>());

    MoEModel model;
    model.config = cfg;
    model.layers.resize(cfg.num_layers);
    for (auto& lw : model.layers) lw.experts.resize(cfg.num_experts);

    // Expected slots: name -> (rows, cols, may be quantized, destination).
    struct Slot {
        size_t rows, cols;
        bool allow_q;
        Matrix* dense = nullptr;              // dense-only destinations
        std::vector<float>* gain = nullptr;   // norm gains
        WeightSlot* slot = nullptr;           // quantizable destinations
        bool seen = false;
    };
    std::vector<std::pair<std::string, Slot>> expect;
    auto add_dense = [&](const std::string& n, size_t r, size_t c, Matrix* m) {
        expect.emplace_back(n, Slot{r, c, false, m, nullptr, nullptr, false});
    };
    auto add_gain = [&](const std::string& n, std::vector<float>* g) {
        expect.emplace_back(n, Slot{1, cfg.hidden_dim, false, nullptr, g, nullptr, false});
    };
    auto add_slot = [&](const std::string& n, size_t r, size_t c, WeightSlot* s) {
        expect.emplace_back(n, Slot{r, c, true, nullptr, nullptr, s, false});
    };
    add_dense("embed", cfg.vocab_size, cfg.hidden_dim, &model.embed);
    for (size_t l = 0; l < cfg.num_layers; ++l) {
        Layer& lw = model.layers[l];
        std::string p = "layers." + std::to_string(l) + ".";
        add_gain(p + "norm_attn", &lw.norm_attn_gain);
        add_slot(p + "attn.wq", cfg.hidden_dim, cfg.hidden_dim, &lw.wq);
        add_slot(p + "attn.wk", cfg.hidden_dim, cfg.hidden_dim, &lw.wk);
        add_slot(p + "attn.wv", cfg.hidden_dim, cfg.hidden_dim, &lw.wv);
        add_slot(p + "attn.wo", cfg.hidden_dim, cfg.hidden_dim, &lw.wo);
        add_gain(p + "norm_moe", &lw.norm_moe_gain);
        add_dense(p + "router", cfg.hidden_dim, cfg.num_experts, &lw.router);
        for (size_t e = 0; e < cfg.num_experts; ++e) {
            std::string ep = p + "experts." + std::to_string(e) + ".";
            Expert& ex = lw.experts[e];
            add_slot(ep + "gate", cfg.ffn_dim, cfg.hidden_dim, &ex.gate);
            add_slot(ep + "up", cfg.ffn_dim, cfg.hidden_dim, &ex.up);
            add_slot(ep + "down", cfg.hidden_dim, cfg.ffn_dim, &ex.down);
        }
    }
    add_gain("norm_final", &model.norm_final_gain);
    add_slot("head", cfg.vocab_size, cfg.hidden_dim, &model.head);

    auto find_slot = [&](const std::string& n) -> Slot* {
        for (auto& [name, s] : expect) {
            if (name == n) return &s;
        }
        return nullptr;
    };

    std::vector<Segment> segments;
    if (!manifest.contains("tensors") || !manifest["tensors"].is_array()) {
        throw IoError("checkpoint: manifest has no tensor list");
    }
    for (const auto& rec : manifest["tensors"]) {
        std::string name, kind;
        size_t r, c;
        uint64_t want_sum;
        try {
            name = rec.at("name").get<std::string>();
            kind = rec.at("kind").get<std::string>();
            r = rec.at("shape").at(0).get<size_t>();
            c = rec.at("shape").at(1).get<size_t>();
            want_sum = std::stoull(rec.at("checksum").get<std::string>(), nullptr, 16);
        } catch (const std::exception& e) {
            throw IoError(std::string("checkpoint: bad tensor record: ") + e.what());
        }
        Slot* slot = find_slot(name);
        if (!slot) throw IoError("checkpoint: unknown tensor '" + name + "'");
        if (slot->seen) throw IoError("checkpoint: duplicate tensor '" + name + "'");
        slot->seen = true;
        if (r != slot->rows || c != slot->cols) {
            throw IoError("checkpoint: shape mismatch for '" + name + "'");
        }
        if (kind == "dense") {
            uint64_t off = rec.at("offset").get<uint64_t>();
            uint64_t len = rec.at("length").get<uint64_t>();
            if (len != static_cast<uint64_t>(r) * c * 4) {
                throw IoError("checkpoint: dense length mismatch for '" + name + "'");
            }
            Matrix m(r, c);
            read_segment(blob, off, len, m.data.data(), name);
            if (fnv1a64(blob.data() + off, len) != want_sum) {
                throw IoError("checkpoint: checksum mismatch for '" + name + "'");
            }
            segments.push_back({off, len});
            if (slot->dense) {
                *slot->dense = std::move(m);
            } else if (slot->gain) {
                slot->gain->assign(m.data.begin(), m.data.end());
            } else {
                slot->slot->set_dense(std::move(m));
            }
        } else if (kind == "qpacked") {
            if (!slot->allow_q) {
                throw IoError("checkpoint: tensor '" + name + "' must be full precision");
            }
            QuantizedMatrix q;
            q.rows = r;
            q.cols = c;
            try {
                q.bits = rec.at("bits").get<int>();
                q.group_size = rec.at("group_size").get<size_t>();
            } catch (const json::exception& e) {
                throw IoError(std::string("checkpoint: bad qpacked record: ") + e.what());
            }
            if ((q.bits != 2 && q.bits != 3 && q.bits != 4 && q.bits != 8) ||
                q.group_size == 0) {
                throw IoError("checkpoint: invalid bits/group_size for '" + name + "'");
            }
            uint64_t p_off = rec.at("packed_offset").get<uint64_t>();
            uint64_t p_len = rec.at("packed_length").get<uint64_t>();
            uint64_t s_off = rec.at("scales_offset").get<uint64_t>();
            uint64_t s_len = rec.at("scales_length").get<uint64_t>();
            uint64_t z_off = rec.at("zps_offset").get<uint64_t>();
            uint64_t z_len = rec.at("zps_length").get<uint64_t>();
            uint64_t n_codes = static_cast<uint64_t>(r) * c;
            uint64_t want_words = (n_codes * static_cast<uint64_t>(q.bits) + 31) / 32;
            uint64_t ng = static_cast<uint64_t>(r) * ((c + q.group_size - 1) / q.group_size);
            if (p_len != want_words * 4 || s_len != ng * 4 || z_len != ng) {
                throw IoError("checkpoint: qpacked segment sizes wrong for '" + name + "'");
            }
            q.packed.resize(want_words);
            q.scales.resize(ng);
            q.zps.resize(ng);
            read_segment(blob, p_off, p_len, q.packed.data(), name);
            read_segment(blob, s_off, s_len, q.scales.data(), name);
            read_segment(blob, z_off, z_len, q.zps.data(), name);
            // Checksum covers the three segments in storage order; they are
            // written contiguously, which bounds-checking reverifies here.
            if (s_off != p_off + p_len || z_off != s_off + s_len) {
                throw IoError("checkpoint: qpacked segments not contiguous for '" + name + "'");
            }
            if (fnv1a64(blob.data() + p_off, p_len + s_len + z_len) != want_sum) {
                throw IoError("checkpoint: checksum mismatch for '" + name + "'");
            }
            segments.push_back({p_off, p_len + s_len + z_len});
            slot->slot->set_quantized(std::move(q));
        } else {
            throw IoError("checkpoint: unknown tensor kind '" + kind + "'");
        }
    }

    for (auto& [name, s] : expect) {
        if (!s.seen) throw IoError("checkpoint: missing tensor '" + name + "'");
    }
    std::sort(segments.begin(), segments.end(),
              [](const Segment& a, const Segment& b) { return a.off < b.off; });
    for (size_t i = 1; i < segments.size(); ++i) {
        if (segments[i].off < segments[i - 1].off + segments[i - 1].len) {
            throw IoError("checkpoint: overlapping blob segments");
        }
    }
    return model;
}

uint64_t expected_blob_bytes(const MoEModel& model) {
    uint64_t total = static_cast<uint64_t>(model.embed.data.size()) * 4;
    for (const Layer& lw : model.layers) {
        total += static_cast<uint64_t>(lw.norm_attn_gain.size()) * 4;
        total += static_cast<uint64_t>(lw.norm_moe_gain.size()) * 4;
        total += slot_bytes(lw.wq) + slot_bytes(lw.wk) + slot_bytes(lw.wv) + slot_bytes(lw.wo);
        total += static_cast<uint64_t>(lw.router.data.size()) * 4;
        for (const Expert& ex : lw.experts) {
            total += slot_bytes(ex.gate) + slot_bytes(ex.up) + slot_bytes(ex.down);
        }
    }
    total += static_cast<uint64_t>(model.norm_final_gain.size()) * 4;
    total += slot_bytes(model.head);
    return total;
}

}  // namespace moewb
