#include "zipcache/attention.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace zipcache {

namespace {

void check_dims(const Matrix &q, const Matrix &k, const Matrix &v) {
    if (q.cols != k.cols || k.rows != v.rows) {
        throw std::invalid_argument("attention: Q/K/V dimension mismatch");
    }
    if (q.rows == 0 || k.rows == 0) {
        throw std::invalid_argument("attention: empty input");
    }
}

double dot(const float *a, const float *b, size_t n) {
    double acc = 0.0;
    for (size_t i = 0; i < n; ++i) {
        acc += double(a[i]) * double(b[i]);
    }
    return acc;
}

// Softmax over keys [0, limit) for one query; probabilities stored into
// out[0..limit), the rest untouched. Accumulation in double keeps the tiled
// and one-shot paths within tight agreement.
void softmax_row(const float *q, const Matrix &k, size_t limit, float *out,
                 std::vector<double> &logits) {
    const double inv_sqrt_d = 1.0 / std::sqrt(double(k.cols));
    logits.resize(limit);
    double peak = -std::numeric_limits<double>::infinity();
    for (size_t j = 0; j < limit; ++j) {
        logits[j] = dot(q, k.row(j), k.cols) * inv_sqrt_d;
        peak = std::max(peak, logits[j]);
    }
    double sum = 0.0;
    for (size_t j = 0; j < limit; ++j) {
        logits[j] = std::exp(logits[j] - peak);
        sum += logits[j];
    }
    for (size_t j = 0; j < limit; ++j) {
        out[j] = float(logits[j] / sum);
    }
}

} // namespace

AttentionResult attention_full(const Matrix &q, const Matrix &k, const Matrix &v, bool causal) {
    check_dims(q, k, v);
    AttentionResult res;
    res.output = Matrix(q.rows, v.cols);
    res.weights.cols = uint32_t(k.rows);
    res.weights.rows.resize(q.rows);

    std::vector<double> scratch;
    std::vector<double> acc(v.cols);
    for (size_t i = 0; i < q.rows; ++i) {
        AttnRow &row = res.weights.rows[i];
        row.row_index = uint32_t(i);
        row.probs.assign(k.rows, 0.0f);
        const size_t limit = causal ? std::min(i + 1, k.rows) : k.rows;
        softmax_row(q.row(i), k, limit, row.probs.data(), scratch);

        std::fill(acc.begin(), acc.end(), 0.0);
        for (size_t j = 0; j < limit; ++j) {
            const double p = row.probs[j];
            const float *vr = v.row(j);
            for (size_t c = 0; c < v.cols; ++c) {
                acc[c] += p * double(vr[c]);
            }
        }
        for (size_t c = 0; c < v.cols; ++c) {
            res.output.at(i, c) = float(acc[c]);
        }
    }
    return res;
}

Matrix attention_tiled(const Matrix &q, const Matrix &k, const Matrix &v,
                       const TiledAttnConfig &cfg, bool causal) {
    return attention_tiled(q, k, v, cfg, causal, {}, {});
}

Matrix attention_tiled(const Matrix &q, const Matrix &k, const Matrix &v,
                       const TiledAttnConfig &cfg, bool causal,
                       std::span<const uint32_t> query_pos, std::span<const uint32_t> key_pos) {
    check_dims(q, k, v);
    if (cfg.block_rows == 0 || cfg.block_cols == 0) {
        throw std::invalid_argument("attention_tiled: block sizes must be >= 1");
    }
    if (!query_pos.empty() && query_pos.size() != q.rows) {
        throw std::invalid_argument("attention_tiled: query_pos length mismatch");
    }
    if (!key_pos.empty() && key_pos.size() != k.rows) {
        throw std::invalid_argument("attention_tiled: key_pos length mismatch");
    }

    const double inv_sqrt_d = 1.0 / std::sqrt(double(k.cols));
    auto visible = [&](size_t qi, size_t kj) {
        if (!causal) {
            return true;
        }
        const uint64_t qp = query_pos.empty() ? qi : query_pos[qi];
        const uint64_t kp = key_pos.empty() ? kj : key_pos[kj];
        return kp <= qp;
    };

    Matrix out(q.rows, v.cols);
    // Per-row running softmax state for the active row tile.
    std::vector<double> row_max(cfg.block_rows);
    std::vector<double> row_sum(cfg.block_rows);
    std::vector<double> row_acc(cfg.block_rows * v.cols);
    std::vector<double> logits(cfg.block_cols);

    for (size_t r0 = 0; r0 < q.rows; r0 += cfg.block_rows) {
        const size_t r1 = std::min(r0 + cfg.block_rows, q.rows);
        std::fill(row_max.begin(), row_max.end(), -std::numeric_limits<double>::infinity());
        std::fill(row_sum.begin(), row_sum.end(), 0.0);
        std::fill(row_acc.begin(), row_acc.end(), 0.0);

        for (size_t c0 = 0; c0 < k.rows; c0 += cfg.block_cols) {
            const size_t c1 = std::min(c0 + cfg.block_cols, k.rows);
            for (size_t i = r0; i < r1; ++i) {
                double block_peak = -std::numeric_limits<double>::infinity();
                size_t n_visible = 0;
                for (size_t j = c0; j < c1; ++j) {
                    if (!visible(i, j)) {
                        logits[j - c0] = -std::numeric_limits<double>::infinity();
                        continue;
                    }
                    logits[j - c0] = dot(q.row(i), k.row(j), k.cols) * inv_sqrt_d;
                    block_peak = std::max(block_peak, logits[j - c0]);
                    ++n_visible;
                }
                if (n_visible == 0) {
                    continue;
                }
                const size_t s = i - r0;
                const double new_max = std::max(row_max[s], block_peak);
                if (row_sum[s] > 0.0 && new_max > row_max[s]) {
                    const double rescale = std::exp(row_max[s] - new_max);
                    row_sum[s] *= rescale;
                    for (size_t c = 0; c < v.cols; ++c) {
                        row_acc[s * v.cols + c] *= rescale;
                    }
                }
                row_max[s] = new_max;
                for (size_t j = c0; j < c1; ++j) {
                    const double lg = logits[j - c0];
                    if (lg == -std::numeric_limits<double>::infinity()) {
                        continue;
                    }
                    const double e = std::exp(lg - new_max);
                    row_sum[s] += e;
                    const float *vr = v.row(j);
                    for (size_t c = 0; c < v.cols; ++c) {
                        row_acc[s * v.cols + c] += e * double(vr[c]);
                    }
                }
            }
        }

        for (size_t i = r0; i < r1; ++i) {
            const size_t s = i - r0;
            for (size_t c = 0; c < v.cols; ++c) {
                out.at(i, c) = row_sum[s] > 0.0 ? float(row_acc[s * v.cols + c] / row_sum[s]) : 0.0f;
            }
        }
    }
    return out;
}

DecodeResult attention_decode(std::span<const float> q, const Matrix &k, const Matrix &v) {
    if (k.rows == 0) {
        throw std::invalid_argument("attention_decode: empty cache");
    }
    if (q.size() != k.cols || k.rows != v.rows) {
        throw std::invalid_argument("attention_decode: dimension mismatch");
    }
    DecodeResult res;
    res.probs.assign(k.rows, 0.0f);
    std::vector<double> scratch;
    softmax_row(q.data(), k, k.rows, res.probs.data(), scratch);

    res.output.assign(v.cols, 0.0f);
    std::vector<double> acc(v.cols, 0.0);
    for (size_t j = 0; j < k.rows; ++j) {
        const double p = res.probs[j];
        const float *vr = v.row(j);
        for (size_t c = 0; c < v.cols; ++c) {
            acc[c] += p * double(vr[c]);
        }
    }
    for (size_t c = 0; c < v.cols; ++c) {
        res.output[c] = float(acc[c]);
    }
    return res;
}

AttnMatrix probe_attention(const Matrix &q, std::span<const uint32_t> probe_idx, const Matrix &k,
                           bool causal) {
    if (q.cols != k.cols) {
        throw std::invalid_argument("probe_attention: Q/K dimension mismatch");
    }
    for (size_t i = 0; i < probe_idx.size(); ++i) {
        if (probe_idx[i] >= q.rows || (i > 0 && probe_idx[i] <= probe_idx[i - 1])) {
            throw std::invalid_argument("probe_attention: probe indices must be sorted, unique, in range");
        }
    }

    AttnMatrix a;
    a.cols = uint32_t(k.rows);
    a.rows.resize(probe_idx.size());
    std::vector<double> scratch;
    for (size_t r = 0; r < probe_idx.size(); ++r) {
        const size_t i = probe_idx[r];
        AttnRow &row = a.rows[r];
        row.row_index = uint32_t(i);
        row.probs.assign(k.rows, 0.0f);
        const size_t limit = causal ? std::min(i + 1, k.rows) : k.rows;
        softmax_row(q.row(i), k, limit, row.probs.data(), scratch);
    }
    return a;
}

} // namespace zipcache
