// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

namespace moewb {

// Dense row-major float matrix. Data layout is a single flat buffer;
// element (r, c) lives at data[r * cols + c].
struct Matrix {
    size_t rows = 0;
    size_t cols = 0;
    std::vector<float> data;

    Matrix() = default;
    Matrix(size_t r, size_t c) : rows(r), cols(c), data(r * c, 0.0f) {}

    float& at(size_t r, size_t c) { return data[r * cols + c]; }
    float at(size_t r, size_t c) const { return data[r * cols + c]; }
    float* row(size_t r) { return data.data() + r * cols; }
    const float* row(size_t r) const { return data.data() + r * cols; }
    size_t size() const { return rows * cols; }

    bool same_shape(const Matrix& o) const { return rows == o.rows && cols == o.cols; }
};

// C = A * B. Throws ShapeError on inner-dimension mismatch. The reduction
// over k runs in a fixed ascending order with float accumulation, so the
// result is bitwise reproducible regardless of thread count (rows are
// partitioned across threads; each row is reduced by exactly one thread).
Matrix matmul(const Matrix& a, const Matrix& b);

// C = A * B^T (B given row-major as [n x k], result [m x n]). Same
// determinism contract as matmul. This is the layout used for weight
// application: y = W x with W stored [out x in] and x as rows of A.
Matrix matmul_nt(const Matrix& a, const Matrix& b);

// Row-wise softmax with per-row max subtraction for overflow safety.
Matrix softmax_rows(const Matrix& m);

// Indices of the k largest entries of row r, ordered by descending value;
// ties broken toward the lower index. Throws ArgumentError if k is zero or
// exceeds the row width.
std::vector<size_t> topk_row(const Matrix& m, size_t r, size_t k);

// RMS normalization of each row: y = x / sqrt(mean(x^2) + eps) * gain.
// gain has one entry per column. Throws ShapeError on gain size mismatch.
Matrix rmsnorm_rows(const Matrix& m, const std::vector<float>& gain, float eps = 1e-5f);

// y = silu(x) = x * sigmoid(x), elementwise.
float silu(float x);

// Frobenius-norm squared of (a - b), accumulated in double.
double frob2_diff(const Matrix& a, const Matrix& b);

// Mean squared elementwise difference, accumulated in double.
double mse(const Matrix& a, const Matrix& b);

// Max absolute elementwise difference.
float max_abs_diff(const Matrix& a, const Matrix& b);

// Fill with uniform values in [lo, hi) drawn row-major from rng.
void fill_uniform(Matrix& m, struct SplitMix64& rng, float lo, float hi);

}  // namespace moewb
