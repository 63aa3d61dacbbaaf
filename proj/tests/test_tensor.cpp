// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <cstdlib>

#include "doctest.h"
#include "moewb/error.hpp"
#include "moewb/tensor.hpp"
#include "moewb/util.hpp"

using namespace moewb;

namespace {

Matrix random_matrix(size_t r, size_t c, uint64_t seed, float lo = -1.0f, float hi = 1.0f) {
    Matrix m(r, c);
    SplitMix64 rng(seed);
    fill_uniform(m, rng, lo, hi);
    return m;
}

Matrix transpose(const Matrix& a) {
    Matrix t(a.cols, a.rows);
    for (size_t r = 0; r < a.rows; ++r) {
        for (size_t c = 0; c < a.cols; ++c) t.at(c, r) = a.at(r, c);
    }
    return t;
}

}  // namespace

TEST_CASE("matmul small known product") {
    Matrix a(2, 3), b(3, 2);
    float av[] = {1, 2, 3, 4, 5, 6};
    float bv[] = {7, 8, 9, 10, 11, 12};
    std::copy(std::begin(av), std::end(av), a.data.begin());
    std::copy(std::begin(bv), std::end(bv), b.data.begin());
    Matrix c = matmul(a, b);
    REQUIRE(c.rows == 2);
    REQUIRE(c.cols == 2);
    CHECK(c.at(0, 0) == doctest::Approx(58));
    CHECK(c.at(0, 1) == doctest::Approx(64));
    CHECK(c.at(1, 0) == doctest::Approx(139));
    CHECK(c.at(1, 1) == doctest::Approx(154));
}

TEST_CASE("matmul shape mismatch throws") {
    Matrix a(2, 3), b(2, 3);
    CHECK_THROWS_AS(matmul(a, b), ShapeError);
}

TEST_CASE("matmul_nt agrees with matmul against the transpose") {
    Matrix a = random_matrix(7, 13, 42);
    Matrix b = random_matrix(5, 13, 43);  // [n x k] as matmul_nt expects
    Matrix via_nt = matmul_nt(a, b);
    Matrix via_t = matmul(a, transpose(b));
    REQUIRE(via_nt.same_shape(via_t));
    CHECK(max_abs_diff(via_nt, via_t) == 0.0f);
}

TEST_CASE("matmul bitwise identical across thread counts") {
    Matrix a = random_matrix(33, 71, 7);
    Matrix b = random_matrix(71, 29, 8);
    setenv("MOE_EAC_THREADS", "1", 1);
    Matrix c1 = matmul(a, b);
    setenv("MOE_EAC_THREADS", "7", 1);
    Matrix c7 = matmul(a, b);
    unsetenv("MOE_EAC_THREADS");
    Matrix cn = matmul(a, b);
    CHECK(max_abs_diff(c1, c7) == 0.0f);
    CHECK(max_abs_diff(c1, cn) == 0.0f);
}

TEST_CASE("softmax rows sum to one and order is preserved") {
    Matrix m = random_matrix(9, 17, 11, -30.0f, 30.0f);
    Matrix s = softmax_rows(m);
    for (size_t r = 0; r < s.rows; ++r) {
        double sum = 0.0;
        for (size_t c = 0; c < s.cols; ++c) {
            CHECK(s.at(r, c) >= 0.0f);
            sum += s.at(r, c);
        }
        CHECK(sum == doctest::Approx(1.0).epsilon(1e-6));
        for (size_t c = 1; c < s.cols; ++c) {
            if (m.at(r, c - 1) < m.at(r, c)) CHECK(s.at(r, c - 1) <= s.at(r, c));
        }
    }
}

TEST_CASE("softmax is overflow-safe on huge logits") {
    Matrix m(1, 3);
    m.at(0, 0) = 1e30f;
    m.at(0, 1) = 1e30f;
    m.at(0, 2) = -1e30f;
    Matrix s = softmax_rows(m);
    CHECK(std::isfinite(s.at(0, 0)));
    CHECK(s.at(0, 0) == doctest::Approx(0.5));
    CHECK(s.at(0, 2) == doctest::Approx(0.0));
}

TEST_CASE("topk_row descending order and tie toward lower index") {
    Matrix m(1, 5);
    float v[] = {1.0f, 3.0f, 3.0f, -2.0f, 2.0f};
    std::copy(std::begin(v), std::end(v), m.data.begin());
    auto top = topk_row(m, 0, 3);
    REQUIRE(top.size() == 3);
    CHECK(top[0] == 1);  // first of the tied 3.0s
    CHECK(top[1] == 2);
    CHECK(top[2] == 4);
    CHECK_THROWS_AS(topk_row(m, 0, 0), ArgumentError);
    CHECK_THROWS_AS(topk_row(m, 0, 6), ArgumentError);
}

TEST_CASE("rmsnorm normalizes row rms to one under unit gain") {
    Matrix m = random_matrix(6, 32, 20, -4.0f, 4.0f);
    std::vector<float> gain(32, 1.0f);
    Matrix y = rmsnorm_rows(m, gain);
    for (size_t r = 0; r < y.rows; ++r) {
        double ms = 0.0;
        for (size_t c = 0; c < y.cols; ++c) ms += double(y.at(r, c)) * y.at(r, c);
        CHECK(std::sqrt(ms / y.cols) == doctest::Approx(1.0).epsilon(1e-3));
    }
    std::vector<float> bad(31, 1.0f);
    CHECK_THROWS_AS(rmsnorm_rows(m, bad), ShapeError);
}

TEST_CASE("silu fixed points and smoothness") {
    CHECK(silu(0.0f) == 0.0f);
    CHECK(silu(20.0f) == doctest::Approx(20.0f).epsilon(1e-6));
    CHECK(silu(-20.0f) == doctest::Approx(0.0f).epsilon(1e-6));
    // x*sigmoid(x) identity at a generic point
    float x = 1.37f;
    CHECK(silu(x) == doctest::Approx(x / (1.0f + std::exp(-x))));
}

TEST_CASE("difference metrics") {
    Matrix a = random_matrix(4, 4, 30);
    Matrix b = a;
    CHECK(frob2_diff(a, b) == 0.0);
    CHECK(mse(a, b) == 0.0);
    CHECK(max_abs_diff(a, b) == 0.0f);
    b.at(2, 3) += 0.5f;
    CHECK(frob2_diff(a, b) == doctest::Approx(0.25));
    CHECK(mse(a, b) == doctest::Approx(0.25 / 16.0));
    CHECK(max_abs_diff(a, b) == doctest::Approx(0.5f));
    Matrix c(3, 4);
    CHECK_THROWS_AS(frob2_diff(a, c), ShapeError);
}

TEST_CASE("fill_uniform is deterministic per seed and in range") {
    Matrix a(8, 8), b(8, 8);
    SplitMix64 r1(99), r2(99);
    fill_uniform(a, r1, -0.25f, 0.75f);
    fill_uniform(b, r2, -0.25f, 0.75f);
    CHECK(max_abs_diff(a, b) == 0.0f);
    for (float v : a.data) {
        CHECK(v >= -0.25f);
        CHECK(v < 0.75f);
    }
}
