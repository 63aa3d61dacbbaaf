// SPDX-License-Identifier: Apache-2.0
#include "moewb/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "moewb/error.hpp"
#include "moewb/util.hpp"

namespace moewb {

Matrix matmul(const Matrix& a, const Matrix& b) {
    if (a.cols != b.rows) {
        throw ShapeError("matmul: inner dims " + std::to_string(a.cols) + " vs " +
                         std::to_string(b.rows));
    }
    Matrix c(a.rows, b.cols);
    parallel_for(a.rows, [&](size_t i) {
        const float* ar = a.row(i);
        float* cr = c.row(i);
        // k-major loop keeps the per-output reduction order fixed.
        for (size_t j = 0; j < b.cols; ++j) {
            float acc = 0.0f;
            for (size_t k = 0; k < a.cols; ++k) {
                acc += ar[k] * b.at(k, j);
            }
            cr[j] = acc;
        }
    });
    return c;
}

Matrix matmul_nt(const Matrix& a, const Matrix& b) {
    if (a.cols != b.cols) {
        throw ShapeError("matmul_nt: inner dims " + std::to_string(a.cols) + " vs " +
                         std::to_string(b.cols));
    }
    Matrix c(a.rows, b.rows);
    parallel_for(a.rows, [&](size_t i) {
        const float* ar = a.row(i);
        float* cr = c.row(i);
        for (size_t j = 0; j < b.rows; ++j) {
            const float* br = b.row(j);
            float acc = 0.0f;
            for (size_t k = 0; k < a.cols; ++k) {
                acc += ar[k] * br[k];
            }
            cr[j] = acc;
        }
    });
    return c;
}

Matrix softmax_rows(const Matrix& m) {
    Matrix out(m.rows, m.cols);
    for (size_t i = 0; i < m.rows; ++i) {
        const float* in = m.row(i);
        float* o = out.row(i);
        float mx = in[0];
        for (size_t j = 1; j < m.cols; ++j) mx = std::max(mx, in[j]);
        float sum = 0.0f;
        for (size_t j = 0; j < m.cols; ++j) {
            o[j] = std::exp(in[j] - mx);
            sum += o[j];
        }
        for (size_t j = 0; j < m.cols; ++j) o[j] /= sum;
    }
    return out;
}

std::vector<size_t> topk_row(const Matrix& m, size_t r, size_t k) {
    if (k == 0 || k > m.cols) {
        throw ArgumentError("topk_row: k=" + std::to_string(k) + " with width " +
                            std::to_string(m.cols));
    }
    if (r >= m.rows) {
        throw ArgumentError("topk_row: row " + std::to_string(r) + " out of range");
    }
    std::vector<size_t> idx(m.cols);
    std::iota(idx.begin(), idx.end(), size_t{0});
    const float* row = m.row(r);
    // stable_sort on descending value leaves equal values in index order,
    // which is exactly the lower-index tie rule.
    std::stable_sort(idx.begin(), idx.end(),
                     [row](size_t a, size_t b) { return row[a] > row[b]; });
    idx.resize(k);
    return idx;
}

Matrix rmsnorm_rows(const Matrix& m, const std::vector<float>& gain, float eps) {
    if (gain.size() != m.cols) {
        throw ShapeError("rmsnorm_rows: gain size " + std::to_string(gain.size()) +
                         " vs cols " + std::to_string(m.cols));
    }
    Matrix out(m.rows, m.cols);
    for (size_t i = 0; i < m.rows; ++i) {
        const float* in = m.row(i);
        float* o = out.row(i);
        double ss = 0.0;
        for (size_t j = 0; j < m.cols; ++j) ss += static_cast<double>(in[j]) * in[j];
        float inv = 1.0f / std::sqrt(static_cast<float>(ss / static_cast<double>(m.cols)) + eps);
        for (size_t j = 0; j < m.cols; ++j) o[j] = in[j] * inv * gain[j];
    }
    return out;
}

float silu(float x) { return x / (1.0f + std::exp(-x)); }

double frob2_diff(const Matrix& a, const Matrix& b) {
    if (!a.same_shape(b)) throw ShapeError("frob2_diff: shape mismatch");
    double acc = 0.0;
    for (size_t i = 0; i < a.data.size(); ++i) {
        double d = static_cast<double>(a.data[i]) - static_cast<double>(b.data[i]);
        acc += d * d;
    }
    return acc;
}

double mse(const Matrix& a, const Matrix& b) {
    if (a.data.empty()) throw ArgumentError("mse: empty matrix");
    return frob2_diff(a, b) / static_cast<double>(a.data.size());
}

float max_abs_diff(const Matrix& a, const Matrix& b) {
    if (!a.same_shape(b)) throw ShapeError("max_abs_diff: shape mismatch");
    float mx = 0.0f;
    for (size_t i = 0; i < a.data.size(); ++i) {
        mx = std::max(mx, std::abs(a.data[i] - b.data[i]));
    }
    return mx;
}

void fill_uniform(Matrix& m, SplitMix64& rng, float lo, float hi) {
    for (auto& v : m.data) v = static_cast<float>(rng.next_range(lo, hi));
}

}  // namespace moewb
