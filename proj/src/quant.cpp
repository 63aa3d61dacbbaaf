// SPDX-License-Identifier: Apache-2.0
#include "moewb/quant.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>

#include "moewb/error.hpp"
#include "moewb/util.hpp"

namespace moewb {

namespace {

bool valid_bits(int bits) { return bits == 2 || bits == 3 || bits == 4 || bits == 8; }

void check_quant_args(int bits, size_t group_size) {
    if (!valid_bits(bits)) {
        throw ArgumentError("quantize: unsupported bits " + std::to_string(bits));
    }
    if (group_size == 0) throw ArgumentError("quantize: group_size must be >= 1");
}

// In-place lower Cholesky A = L L^T on a flat n x n double buffer.
// Returns false on a non-positive pivot.
bool chol_lower(std::vector<double>& a, size_t n) {
    for (size_t j = 0; j < n; ++j) {
        double d = a[j * n + j];
        for (size_t k = 0; k < j; ++k) d -= a[j * n + k] * a[j * n + k];
        if (!(d > 0.0)) return false;
        d = std::sqrt(d);
        a[j * n + j] = d;
        for (size_t i = j + 1; i < n; ++i) {
            double s = a[i * n + j];
            for (size_t k = 0; k < j; ++k) s -= a[i * n + k] * a[j * n + k];
            a[i * n + j] = s / d;
        }
    }
    for (size_t i = 0; i < n; ++i)
        for (size_t j = i + 1; j < n; ++j) a[i * n + j] = 0.0;
    return true;
}

// Dense inverse from the lower Cholesky factor, via forward/back solves
// against identity columns.
std::vector<double> inverse_from_chol(const std::vector<double>& l, size_t n) {
    std::vector<double> inv(n * n, 0.0);
    std::vector<double> y(n), x(n);
    for (size_t c = 0; c < n; ++c) {
        for (size_t i = 0; i < n; ++i) {
            double s = (i == c) ? 1.0 : 0.0;
            for (size_t k = 0; k < i; ++k) s -= l[i * n + k] * y[k];
            y[i] = s / l[i * n + i];
        }
        for (size_t ii = n; ii-- > 0;) {
            double s = y[ii];
            for (size_t k = ii + 1; k < n; ++k) s -= l[k * n + ii] * x[k];
            x[ii] = s / l[ii * n + ii];
        }
        for (size_t i = 0; i < n; ++i) inv[i * n + c] = x[i];
    }
    return inv;
}

uint32_t quantize_one(float w, const GroupGrid& g, uint32_t qmax) {
    float r = std::round(w / g.scale) + static_cast<float>(g.zp);
    if (r < 0.0f) r = 0.0f;
    float fq = static_cast<float>(qmax);
    if (r > fq) r = fq;
    return static_cast<uint32_t>(r);
}

}  // namespace

GroupGrid group_grid(const float* v, size_t n, int bits) {
    float lo = v[0], hi = v[0];
    for (size_t i = 1; i < n; ++i) {
        lo = std::min(lo, v[i]);
        hi = std::max(hi, v[i]);
    }
    GroupGrid g;
    if (lo == hi) {
        // Constant group: a scale of |c| with the zero-point next to the
        // code of c reconstructs the constant bitwise ((±1 - zp) * |c|),
        // which (hi-lo)/qmax-style scales cannot do in float32.
        if (lo == 0.0f) {
            g.scale = 1.0f;
            g.zp = 0;
        } else {
            g.scale = std::abs(lo);
            g.zp = lo < 0.0f ? 1 : 0;
        }
        return g;
    }
    float mn = std::min(0.0f, lo);  // extend range to include zero so the
    float mx = std::max(0.0f, hi);  // zero-point is a real grid code
    float qmax = static_cast<float>((1u << bits) - 1u);
    g.scale = (mx - mn) / qmax;
    float z = std::round(-mn / g.scale);
    if (z < 0.0f) z = 0.0f;
    if (z > qmax) z = qmax;
    g.zp = static_cast<uint8_t>(z);
    return g;
}

QuantizedMatrix rtn_quantize(const Matrix& w, int bits, size_t group_size) {
    check_quant_args(bits, group_size);
    QuantizedMatrix q;
    q.rows = w.rows;
    q.cols = w.cols;
    q.bits = bits;
    q.group_size = group_size;
    size_t ng = q.n_groups();
    q.scales.resize(w.rows * ng);
    q.zps.resize(w.rows * ng);
    std::vector<uint32_t> codes(w.rows * w.cols);
    uint32_t qmax = (1u << bits) - 1u;
    for (size_t r = 0; r < w.rows; ++r) {
        const float* row = w.row(r);
        for (size_t g = 0; g < ng; ++g) {
            size_t c0 = g * group_size;
            size_t c1 = std::min(c0 + group_size, w.cols);
            GroupGrid grid = group_grid(row + c0, c1 - c0, bits);
            q.scales[r * ng + g] = grid.scale;
            q.zps[r * ng + g] = grid.zp;
            for (size_t c = c0; c < c1; ++c) {
                codes[r * w.cols + c] = quantize_one(row[c], grid, qmax);
            }
        }
    }
    q.packed = pack_codes(codes, bits);
    return q;
}

Matrix dequantize(const QuantizedMatrix& q) {
    Matrix w(q.rows, q.cols);
    std::vector<uint32_t> codes = unpack_codes(q.packed, q.rows * q.cols, q.bits);
    size_t ng = q.n_groups();
    for (size_t r = 0; r < q.rows; ++r) {
        for (size_t c = 0; c < q.cols; ++c) {
            size_t g = c / q.group_size;
            float scale = q.scales[r * ng + g];
            float zp = static_cast<float>(q.zps[r * ng + g]);
            w.at(r, c) = (static_cast<float>(codes[r * q.cols + c]) - zp) * scale;
        }
    }
    return w;
}

std::vector<uint32_t> pack_codes(const std::vector<uint32_t>& codes, int bits) {
    if (!valid_bits(bits)) throw ArgumentError("pack_codes: unsupported bits");
    uint32_t qmax = (1u << bits) - 1u;
    size_t total_bits = codes.size() * static_cast<size_t>(bits);
    std::vector<uint32_t> words((total_bits + 31) / 32, 0u);
    size_t pos = 0;
    for (uint32_t c : codes) {
        if (c > qmax) throw ArgumentError("pack_codes: code out of range");
        size_t word = pos >> 5;
        size_t off = pos & 31;
        words[word] |= c << off;
        if (off + static_cast<size_t>(bits) > 32) {
            words[word + 1] |= c >> (32 - off);
        }
        pos += static_cast<size_t>(bits);
    }
    return words;
}

std::vector<uint32_t> unpack_codes(const std::vector<uint32_t>& words, size_t n, int bits) {
    if (!valid_bits(bits)) throw ArgumentError("unpack_codes: unsupported bits");
    size_t need = (n * static_cast<size_t>(bits) + 31) / 32;
    if (words.size() < need) throw ArgumentError("unpack_codes: word buffer too small");
    uint32_t mask = (1u << bits) - 1u;
    std::vector<uint32_t> codes(n);
    size_t pos = 0;
    for (size_t i = 0; i < n; ++i) {
        size_t word = pos >> 5;
        size_t off = pos & 31;
        uint32_t v = words[word] >> off;
        if (off + static_cast<size_t>(bits) > 32) {
            v |= words[word + 1] << (32 - off);
        }
        codes[i] = v & mask;
        pos += static_cast<size_t>(bits);
    }
    return codes;
}

void HessianAccumulator::add(const Matrix& acts) {
    if (acts.cols != n) {
        throw ShapeError("hessian add: activation width " + std::to_string(acts.cols) +
                         " vs dim " + std::to_string(n));
    }
    parallel_for(n, [&](size_t i) {
        double* hrow = h.data() + i * n;
        for (size_t t = 0; t < acts.rows; ++t) {
            const float* x = acts.row(t);
            double coef = 2.0 * static_cast<double>(x[i]);
            for (size_t j = 0; j < n; ++j) {
                hrow[j] += coef * static_cast<double>(x[j]);
            }
        }
    });
    samples += acts.rows;
}

QuantizedMatrix gptq_quantize(const Matrix& w, const HessianAccumulator& hess, int bits,
                              size_t group_size, double lambda_frac) {
    check_quant_args(bits, group_size);
    if (hess.n != w.cols) {
        throw ShapeError("gptq: hessian dim " + std::to_string(hess.n) + " vs weight cols " +
                         std::to_string(w.cols));
    }
    if (lambda_frac < 0.0) throw ArgumentError("gptq: negative damping");
    size_t n = w.cols, m = w.rows;
    std::vector<double> H = hess.h;
    Matrix work = w;

    // Columns with zero curvature never see activation mass: their weights
    // are irrelevant to the objective, so pin them to zero and give the
    // diagonal a unit to keep the factorization well posed.
    for (size_t j = 0; j < n; ++j) {
        if (H[j * n + j] == 0.0) {
            for (size_t r = 0; r < m; ++r) work.at(r, j) = 0.0f;
            H[j * n + j] = 1.0;
        }
    }
    double mean_diag = 0.0;
    for (size_t j = 0; j < n; ++j) mean_diag += H[j * n + j];
    mean_diag /= static_cast<double>(n);
    double damp = lambda_frac * mean_diag;
    for (size_t j = 0; j < n; ++j) H[j * n + j] += damp;

    if (!chol_lower(H, n)) {
        throw NumericError("gptq: curvature factorization failed after damping");
    }
    std::vector<double> hinv = inverse_from_chol(H, n);
    if (!chol_lower(hinv, n)) {
        throw NumericError("gptq: inverse-curvature factorization failed");
    }
    // Upper factor U with Hinv = U^T U is the transpose of the lower
    // factor just computed: U[j][k] = hinv[k*n + j] for k >= j.
    std::vector<float> U(n * n, 0.0f);
    for (size_t j = 0; j < n; ++j) {
        for (size_t k = j; k < n; ++k) U[j * n + k] = static_cast<float>(hinv[k * n + j]);
    }

    // Grids are frozen from the original weights so later error
    // compensation cannot shift a group's range.
    size_t ng = (n + group_size - 1) / group_size;
    QuantizedMatrix q;
    q.rows = m;
    q.cols = n;
    q.bits = bits;
    q.group_size = group_size;
    q.scales.resize(m * ng);
    q.zps.resize(m * ng);
    for (size_t r = 0; r < m; ++r) {
        const float* row = work.row(r);
        for (size_t g = 0; g < ng; ++g) {
            size_t c0 = g * group_size;
            size_t c1 = std::min(c0 + group_size, n);
            GroupGrid grid = group_grid(row + c0, c1 - c0, bits);
            q.scales[r * ng + g] = grid.scale;
            q.zps[r * ng + g] = grid.zp;
        }
    }

    uint32_t qmax = (1u << bits) - 1u;
    std::vector<uint32_t> codes(m * n);
    // Rows are independent given the shared factor U, so partition by row.
    parallel_for(m, [&](size_t r) {
        float* row = work.row(r);
        uint32_t* crow = codes.data() + r * n;
        std::vector<float> err(group_size);
        for (size_t b0 = 0; b0 < n; b0 += group_size) {
            size_t b1 = std::min(b0 + group_size, n);
            for (size_t j = b0; j < b1; ++j) {
                size_t g = j / group_size;
                GroupGrid grid{q.scales[r * ng + g], q.zps[r * ng + g]};
                uint32_t code = quantize_one(row[j], grid, qmax);
                crow[j] = code;
                float deq = (static_cast<float>(code) - static_cast<float>(grid.zp)) * grid.scale;
                float d = U[j * n + j];
                float e = (row[j] - deq) / d;
                err[j - b0] = e;
                for (size_t k = j + 1; k < b1; ++k) row[k] -= e * U[j * n + k];
            }
            // Propagate the block's accumulated error to the columns that
            // have not been visited yet.
            for (size_t k = b1; k < n; ++k) {
                float acc = 0.0f;
                for (size_t j = b0; j < b1; ++j) acc += err[j - b0] * U[j * n + k];
                row[k] -= acc;
            }
        }
    });
    q.packed = pack_codes(codes, bits);
    return q;
}

QuantizedMatrix gptq_quantize(const Matrix& w, const Matrix& x_samples, const QuantConfig& cfg) {
    if (x_samples.rows * 4 < w.cols) {
        std::fprintf(stderr,
                     "warning: gptq calibration has %zu tokens for %zu input dims; "
                     "curvature estimate is under-determined\n",
                     x_samples.rows, w.cols);
    }
    HessianAccumulator hess(w.cols);
    hess.add(x_samples);
    return gptq_quantize(w, hess, cfg.bits, cfg.group_size, cfg.lambda_frac);
}

QuantizedMatrix rtn_quantize(const Matrix& w, const QuantConfig& cfg) {
    return rtn_quantize(w, cfg.bits, cfg.group_size);
}

double reconstruction_error(const Matrix& w, const QuantizedMatrix& q, const Matrix& x) {
    if (q.rows != w.rows || q.cols != w.cols) {
        throw ShapeError("reconstruction_error: quantized shape mismatch");
    }
    if (x.cols != w.cols) {
        throw ShapeError("reconstruction_error: activation width " + std::to_string(x.cols) +
                         " vs weight cols " + std::to_string(w.cols));
    }
    Matrix y_ref = matmul_nt(x, w);
    Matrix y_q = matmul_nt(x, dequantize(q));
    return frob2_diff(y_ref, y_q);
}

double average_bit_width(const std::vector<std::pair<double, double>>& fraction_bits) {
    double fsum = 0.0, avg = 0.0;
    for (const auto& [frac, bits] : fraction_bits) {
        if (frac < 0.0 || bits <= 0.0) {
            throw ArgumentError("average_bit_width: negative fraction or bits");
        }
        fsum += frac;
        avg += frac * bits;
    }
    if (std::abs(fsum - 1.0) > 1e-6) {
        throw ArgumentError("average_bit_width: fractions sum to " + std::to_string(fsum));
    }
    return avg;
}

BitSchedule parse_schedule(const std::string& text, size_t n_layers, int mhsa_bits) {
    auto valid_sched_bits = [](int b) { return valid_bits(b) || b == 16; };
    if (!valid_sched_bits(mhsa_bits)) {
        throw ArgumentError("schedule: unsupported attention bits " + std::to_string(mhsa_bits));
    }
    BitSchedule s;
    s.mhsa_bits = mhsa_bits;
    s.expert_bits.assign(n_layers, 16);
    auto colon = text.find(':');
    if (colon == std::string::npos) throw ArgumentError("schedule: expected '<kind>:<bits>'");
    std::string kind = text.substr(0, colon);
    std::string rest = text.substr(colon + 1);
    auto parse_int = [&](const std::string& t) {
        if (t.empty() || t.find_first_not_of("0123456789") != std::string::npos) {
            throw ArgumentError("schedule: bad bit width '" + t + "'");
        }
        int b = std::stoi(t);
        if (!valid_sched_bits(b)) {
            throw ArgumentError("schedule: unsupported bit width " + std::to_string(b));
        }
        return b;
    };
    if (kind == "uniform") {
        int b = parse_int(rest);
        for (auto& e : s.expert_bits) e = b;
    } else if (kind == "half") {
        auto slash = rest.find('/');
        if (slash == std::string::npos) throw ArgumentError("schedule: expected 'half:<hi>/<lo>'");
        int hi = parse_int(rest.substr(0, slash));
        int lo = parse_int(rest.substr(slash + 1));
        size_t first = (n_layers + 1) / 2;  // first half rounds up for odd depths
        for (size_t l = 0; l < n_layers; ++l) s.expert_bits[l] = l < first ? hi : lo;
    } else {
        throw ArgumentError("schedule: unknown kind '" + kind + "'");
    }
    return s;
}

}  // namespace moewb
