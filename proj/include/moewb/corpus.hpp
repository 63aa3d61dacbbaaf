// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <vector>

namespace moewb {

// Token sequences for calibration / evaluation. Byte identities are drawn
// from contiguous per-family bands: family f of n owns bytes b with
// b*n/vocab == f, matching the planted model's family layout when n equals
// its expert count.

// Mixed-family corpus: each sequence follows a sticky Markov chain over
// families (stay probability `stickiness`), drawing bytes uniformly from
// the current family's band. Deterministic per seed.
std::vector<std::vector<uint32_t>> gen_mixed_corpus(size_t n_seqs, size_t seq_len, size_t vocab,
                                                    size_t n_families, double stickiness,
                                                    uint64_t seed);

// Single-family document: bytes from the family band with probability
// `purity`, uniform over the full vocabulary otherwise.
std::vector<uint32_t> gen_family_doc(size_t family, size_t n_families, size_t doc_len,
                                     size_t vocab, double purity, uint64_t seed);

}  // namespace moewb
