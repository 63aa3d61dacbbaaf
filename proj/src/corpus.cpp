// SPDX-License-Identifier: Apache-2.0
#include "moewb/corpus.hpp"

#include "moewb/error.hpp"
#include "moewb/util.hpp"

namespace moewb {

namespace {

void check_family_args(size_t n_families, size_t vocab) {
    if (n_families == 0 || vocab < 2 || n_families > vocab) {
        throw ArgumentError("corpus: need 1 <= families <= vocab");
    }
}

// Uniform byte from family f's band {b : b*n/vocab == f}.
uint32_t draw_band(SplitMix64& rng, size_t f, size_t n, size_t vocab) {
    size_t lo = (f * vocab + n - 1) / n;
    size_t hi = ((f + 1) * vocab + n - 1) / n;  // exclusive
    return static_cast<uint32_t>(lo + rng.next_below(hi - lo));
}

}  // namespace

std::vector<std::vector<uint32_t>> gen_mixed_corpus(size_t n_seqs, size_t seq_len, size_t vocab,
                                                    size_t n_families, double stickiness,
                                                    uint64_t seed) {
    check_family_args(n_families, vocab);
    if (n_seqs == 0 || seq_len == 0) throw ArgumentError("corpus: empty shape");
    if (stickiness < 0.0 || stickiness > 1.0) throw ArgumentError("corpus: bad stickiness");
    SplitMix64 rng(seed);
    std::vector<std::vector<uint32_t>> out(n_seqs);
    for (auto& seq : out) {
        seq.resize(seq_len);
        size_t fam = rng.next_below(n_families);
        for (auto& tok : seq) {
            if (rng.next_unit() >= stickiness) fam = rng.next_below(n_families);
            tok = draw_band(rng, fam, n_families, vocab);
        }
    }
    return out;
}

std::vector<uint32_t> gen_family_doc(size_t family, size_t n_families, size_t doc_len,
                                     size_t vocab, double purity, uint64_t seed) {
    check_family_args(n_families, vocab);
    if (family >= n_families) throw ArgumentError("corpus: family index out of range");
    if (doc_len == 0) throw ArgumentError("corpus: empty doc");
    if (purity < 0.0 || purity > 1.0) throw ArgumentError("corpus: bad purity");
    SplitMix64 rng(seed);
    std::vector<uint32_t> doc(doc_len);
    for (auto& tok : doc) {
        if (rng.next_unit() < purity) {
            tok = draw_band(rng, family, n_families, vocab);
        } else {
            tok = static_cast<uint32_t>(rng.next_below(vocab));
        }
    }
    return doc;
}

}  // namespace moewb
