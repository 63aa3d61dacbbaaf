// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"
#include "moewb/model.hpp"

namespace moewb {

// Token datasets on disk are raw byte files: one token per byte. On load,
// sequences longer than max_len are split into consecutive chunks of at
// most max_len tokens. Tokens must stay below the vocabulary size (and
// below 256 on write).
void write_tokens_file(const std::string& path, const std::vector<uint32_t>& seq);
std::vector<std::vector<uint32_t>> read_tokens_file(const std::string& path, size_t vocab,
                                                    size_t max_len);
std::vector<std::vector<uint32_t>> load_corpus(const std::vector<std::string>& paths, size_t vocab,
                                               size_t max_len);

nlohmann::json config_to_json(const ModelConfig& cfg);

// Storage-weighted average bit widths under three conventions, so reports
// are comparable whichever bookkeeping a reader expects:
//   fp16 — unquantized tensors counted at 16 bits per parameter
//   fp32 — unquantized tensors counted at 32 bits (their actual storage)
//   blob — serialized checkpoint bits per parameter, grid overhead included
struct BitsReport {
    uint64_t total_params = 0;
    uint64_t quantized_params = 0;
    double avg_bits_fp16 = 0.0;
    double avg_bits_fp32 = 0.0;
    double avg_bits_blob = 0.0;
};
BitsReport bits_report(const MoEModel& model);
nlohmann::json bits_report_json(const BitsReport& r);

void write_text_file(const std::string& path, const std::string& text);
void write_json_file(const std::string& path, const nlohmann::json& j);

}  // namespace moewb
