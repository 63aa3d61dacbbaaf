// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>

#include "moewb/model.hpp"

namespace moewb {

// On-disk model format: <dir>/manifest.json + <dir>/weights.bin.
//
// The manifest carries format_version, the model config, and one record
// per tensor: {name, kind: "dense"|"qpacked", shape, offsets/lengths into
// the blob, fnv1a64 checksum (hex)}. Dense payloads are row-major 32-bit
// little-endian floats. Quantized slots persist their packed code words
// (32-bit little-endian), scales (float32), and zero-points (uint8) —
// never the dequantized image. Slot names:
//   embed, head, norm_final,
//   layers.<l>.norm_attn / norm_moe / router,
//   layers.<l>.attn.{wq,wk,wv,wo},
//   layers.<l>.experts.<e>.{gate,up,down}
//
// save overwrites the two files; load validates version, exactly-once
// slot coverage, segment bounds and non-overlap, structural sizes, and
// checksums, throwing IoError on any mismatch.
void save_checkpoint(const MoEModel& model, const std::string& dir);
MoEModel load_checkpoint(const std::string& dir);

// Closed-form size in bytes of the weights.bin this model serializes to.
uint64_t expected_blob_bytes(const MoEModel& model);

}  // namespace moewb
