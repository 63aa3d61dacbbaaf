// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "moewb/tensor.hpp"

namespace moewb {

// Group-quantized matrix. Codes are stored row-major, packed contiguously
// into 32-bit words in little-endian bit order (code i occupies stream
// bits [i*bits, (i+1)*bits); a code may straddle a word boundary). Groups
// run along each row: group g of row r covers columns
// [g*group_size, min((g+1)*group_size, cols)).
struct QuantizedMatrix {
    size_t rows = 0;
    size_t cols = 0;
    int bits = 0;
    size_t group_size = 0;
    std::vector<uint32_t> packed;  // ceil(rows*cols*bits/32) words
    std::vector<float> scales;     // rows * n_groups
    std::vector<uint8_t> zps;      // rows * n_groups

    size_t n_groups() const { return (cols + group_size - 1) / group_size; }
};

// Method + precision bundle threaded through the CLI.
struct QuantConfig {
    int bits = 4;
    size_t group_size = 128;
    double lambda_frac = 0.01;   // diagonal damping fraction for gptq
    std::string method = "gptq";  // "rtn" | "gptq"
};

// Asymmetric grid for one group of values, with the range extended to
// include zero: mn = min(0, min(v)), mx = max(0, max(v)). This guarantees
// zero is exactly representable. Constant groups use a dedicated grid
// (scale |c|, zero-point beside the code of c) so the constant value
// reconstructs bitwise; an all-zero group degenerates to scale 1, zp 0.
struct GroupGrid {
    float scale;
    uint8_t zp;
};
GroupGrid group_grid(const float* v, size_t n, int bits);

// Round-to-nearest quantization onto the group grid; codes are
// clamp(round(w/scale) + zp, 0, 2^bits - 1) with halves rounded away
// from zero. Throws ArgumentError for unsupported bits (valid: 2,3,4,8)
// or group_size == 0.
QuantizedMatrix rtn_quantize(const Matrix& w, int bits, size_t group_size);

// Inverse map: w' = (code - zp) * scale.
Matrix dequantize(const QuantizedMatrix& q);

// Pack / unpack low-`bits` codes into the contiguous little-endian word
// stream described on QuantizedMatrix. unpack returns exactly n codes.
std::vector<uint32_t> pack_codes(const std::vector<uint32_t>& codes, int bits);
std::vector<uint32_t> unpack_codes(const std::vector<uint32_t>& words, size_t n, int bits);

// Accumulates the curvature statistic H = 2 * sum_t x_t x_t^T over
// activation batches (tokens are rows of each batch). Double precision.
struct HessianAccumulator {
    size_t n = 0;
    size_t samples = 0;
    std::vector<double> h;  // n*n, row-major, symmetric

    explicit HessianAccumulator(size_t dim) : n(dim), h(dim * dim, 0.0) {}
    void add(const Matrix& acts);  // acts: [tokens x n]
    double diag(size_t i) const { return h[i * n + i]; }
};

// Error-compensated quantization: minimizes ||WX - W_q X||_F^2 greedily,
// one column at a time, spreading each column's rounding error over the
// not-yet-quantized columns via the inverse-curvature factor. Grids are
// fixed per group from the original weights before any compensation.
// Columns with zero curvature (never activated) are zeroed. The diagonal
// is damped by lambda_frac * mean(diag H) before factorization; a
// factorization breakdown after damping throws NumericError.
QuantizedMatrix gptq_quantize(const Matrix& w, const HessianAccumulator& hess, int bits,
                              size_t group_size, double lambda_frac = 0.01);

// Convenience forms taking calibration activations directly (tokens are
// rows of x_samples). Fewer than w.cols/4 tokens triggers a stderr warning
// about an under-determined curvature estimate.
QuantizedMatrix gptq_quantize(const Matrix& w, const Matrix& x_samples, const QuantConfig& cfg);
QuantizedMatrix rtn_quantize(const Matrix& w, const QuantConfig& cfg);

// ||W X - W_q X||_F^2 with X given as [tokens x in] (activations as rows).
double reconstruction_error(const Matrix& w, const QuantizedMatrix& q, const Matrix& x);

// Parameter-fraction weighted mean of bit widths. fraction_bits pairs are
// (fraction of parameters, bits); fractions must sum to 1 within 1e-6.
double average_bit_width(const std::vector<std::pair<double, double>>& fraction_bits);

// Per-tensor-class bit assignment for a model. Expert bits are per layer;
// bits == 16 means "leave in full precision" (no quantization applied).
struct BitSchedule {
    int mhsa_bits = 4;
    std::vector<int> expert_bits;
    int router_bits = 16;  // routers stay full precision by default
};

// Parse "uniform:<b>" (all layers at b) or "half:<hi>/<lo>" (first
// ceil(L/2) layers at hi, rest at lo). Throws ArgumentError on malformed
// input or bit widths outside {2,3,4,8,16}.
BitSchedule parse_schedule(const std::string& text, size_t n_layers, int mhsa_bits = 4);

}  // namespace moewb
