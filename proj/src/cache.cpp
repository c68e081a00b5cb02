#include "zipcache/cache.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>

namespace zipcache {

namespace {

uint64_t data_bits_for(uint64_t b, uint64_t hd, uint64_t l, int k) {
    return 2 * b * hd * l * uint64_t(k);
}

uint64_t fp16_baseline_bits(uint64_t b, uint64_t hd, uint64_t l) {
    return data_bits_for(b, hd, l, 16);
}

} // namespace

CompressionReport compression_report(Scheme scheme, uint64_t b, uint64_t hd, uint64_t l,
                                     uint64_t group_size, int bit_width) {
    if (b == 0 || hd == 0 || l == 0) {
        throw std::invalid_argument("compression_report: dims must be positive");
    }
    CompressionReport rep;
    rep.data_bits = data_bits_for(b, hd, l, bit_width);
    rep.param_bits = param_budget(scheme, b, hd, l, group_size).count * 16;
    rep.ratio = double(fp16_baseline_bits(b, hd, l)) / double(rep.total_bits());
    return rep;
}

CompressionReport mixed_compression_report(uint64_t b, uint64_t hd, uint64_t l_salient,
                                           uint64_t l_regular, uint64_t l_buffer, int k_high,
                                           int k_low) {
    const uint64_t l = l_salient + l_regular + l_buffer;
    if (b == 0 || hd == 0 || l == 0) {
        throw std::invalid_argument("mixed_compression_report: dims must be positive");
    }
    CompressionReport rep;
    rep.data_bits = data_bits_for(b, hd, l_salient, k_high) + data_bits_for(b, hd, l_regular, k_low);
    // Per non-empty partition: channelwise K params (2*hd) plus channel-separable
    // tokenwise V params (hd + 2*b*l_p), at 16 bits apiece.
    const uint64_t l_compressed = l_salient + l_regular;
    for (uint64_t l_part : {l_salient, l_regular}) {
        if (l_part > 0) {
            rep.param_bits += (3 * hd + 2 * b * l_part) * 16;
        }
    }
    rep.bitmap_bits = b * l_compressed;
    rep.fp_buffer_bits = data_bits_for(b, hd, l_buffer, 16);
    rep.ratio = double(fp16_baseline_bits(b, hd, l)) / double(rep.total_bits());
    return rep;
}

MixedCache::MixedCache(uint32_t head_dim, CacheConfig cfg, uint64_t seed)
    : dim_(head_dim), cfg_(cfg), rng_(seed) {
    if (head_dim == 0) {
        throw std::invalid_argument("MixedCache: head_dim must be >= 1");
    }
    if (cfg_.k_high < cfg_.k_low) {
        throw std::invalid_argument("MixedCache: k_high must be >= k_low");
    }
    if (cfg_.recompress_interval == 0) {
        throw std::invalid_argument("MixedCache: recompress_interval must be >= 1");
    }
}

void MixedCache::compress_event(const Matrix &k, const Matrix &v,
                                std::span<const uint32_t> salient,
                                std::span<const uint32_t> regular, size_t base_token) {
    if (!salient.empty()) {
        salient_k_.push_back(quantize_rows_channelwise(k, salient, cfg_.k_high));
        salient_v_.push_back(quantize_rows_cst(v, salient, cfg_.k_high));
    }
    if (!regular.empty()) {
        regular_k_.push_back(quantize_rows_channelwise(k, regular, cfg_.k_low));
        regular_v_.push_back(quantize_rows_cst(v, regular, cfg_.k_low));
    }
    if (token_order_.size() < base_token + k.rows) {
        token_order_.resize(base_token + k.rows, Slot{SlotKind::buffer, 0});
        bitmap_.resize(base_token + k.rows, false);
    }
    for (size_t i = 0; i < salient.size(); ++i) {
        token_order_[base_token + salient[i]] = Slot{SlotKind::salient, salient_rows_ + uint32_t(i)};
        bitmap_[base_token + salient[i]] = true;
    }
    for (size_t i = 0; i < regular.size(); ++i) {
        token_order_[base_token + regular[i]] = Slot{SlotKind::regular, regular_rows_ + uint32_t(i)};
        bitmap_[base_token + regular[i]] = false;
    }
    salient_rows_ += uint32_t(salient.size());
    regular_rows_ += uint32_t(regular.size());
}

void MixedCache::compress_prefill(const Matrix &k, const Matrix &v, const Partition &partition) {
    if (!token_order_.empty()) {
        throw std::logic_error("compress_prefill: cache already holds tokens");
    }
    if (!k.same_shape(v) || k.cols != dim_) {
        throw std::invalid_argument("compress_prefill: K/V shape mismatch");
    }
    std::vector<bool> seen(k.rows, false);
    size_t covered = 0;
    for (const auto *idx : {&partition.salient_idx, &partition.regular_idx}) {
        for (uint32_t i : *idx) {
            if (i >= k.rows || seen[i]) {
                throw std::invalid_argument("compress_prefill: partition does not cover [0, l) exactly");
            }
            seen[i] = true;
            ++covered;
        }
    }
    if (covered != k.rows) {
        throw std::invalid_argument("compress_prefill: partition does not cover [0, l) exactly");
    }
    compress_event(k, v, partition.salient_idx, partition.regular_idx, 0);
}

void MixedCache::append_decode(std::span<const float> k_row, std::span<const float> v_row) {
    if (k_row.size() != dim_ || v_row.size() != dim_) {
        throw std::invalid_argument("append_decode: row dimension mismatch");
    }
    if (window_count_ == cfg_.recompress_interval) {
        throw std::logic_error("append_decode: window full, recompress first");
    }
    buffer_k_.insert(buffer_k_.end(), k_row.begin(), k_row.end());
    buffer_v_.insert(buffer_v_.end(), v_row.begin(), v_row.end());
    ++buffer_rows_;
    ++window_count_;
    token_order_.push_back(Slot{SlotKind::buffer, buffer_rows_ - 1});
    bitmap_.push_back(false);
}

void MixedCache::push_probe_row(std::vector<float> probs) {
    if (probs.size() != total_tokens()) {
        throw std::invalid_argument("probe row length must equal current token count");
    }
    probe_log_.push_back(ProbeLogRow{uint32_t(total_tokens() - 1), std::move(probs)});
}

void MixedCache::record_probe_row(std::vector<float> probs, uint32_t step_in_window) {
    if (probs.size() != total_tokens()) {
        throw std::invalid_argument("probe row length must equal current token count");
    }
    const bool in_tail = step_in_window + 5 > cfg_.recompress_interval;
    if (in_tail || rng_() % 100 < 5) {
        push_probe_row(std::move(probs));
    }
}

bool MixedCache::maybe_recompress() {
    if (window_count_ < cfg_.recompress_interval) {
        return false;
    }
    const uint32_t wc = window_count_;
    const size_t base = total_tokens() - wc;

    Matrix k_win(wc, dim_), v_win(wc, dim_);
    std::memcpy(k_win.data.data(), buffer_k_.data(), buffer_k_.size() * sizeof(float));
    std::memcpy(v_win.data.data(), buffer_v_.data(), buffer_v_.size() * sizeof(float));

    // Score the window tokens from the probe log (normalized metric restricted
    // to the observed rows).
    SaliencyVector sv;
    sv.metric = SaliencyMetric::normalized;
    sv.scores.assign(wc, 0.0f);
    sv.valid.assign(wc, false);
    bool any_valid = false;
    for (uint32_t j = 0; j < wc; ++j) {
        const size_t global = base + j;
        double sum = 0.0;
        uint32_t covering = 0;
        for (const ProbeLogRow &row : probe_log_) {
            if (row.row_index >= global) {
                sum += row.probs[global];
                ++covering;
            }
        }
        if (covering > 0) {
            sv.scores[j] = float(sum / covering);
            sv.valid[j] = true;
            any_valid = true;
        }
    }

    std::vector<uint32_t> salient, regular;
    if (!any_valid) {
        warnings_.push_back("recompress window " + std::to_string(base) + ".." +
                            std::to_string(base + wc) +
                            ": empty probe log, demoting window to regular partition");
        regular.resize(wc);
        std::iota(regular.begin(), regular.end(), 0u);
    } else {
        Partition part = select_salient(sv, cfg_.saliency_ratio);
        salient = std::move(part.salient_idx);
        regular = std::move(part.regular_idx);
    }

    // Window tokens currently occupy the buffer slots at the end of
    // token_order_; compress_event overwrites them with block slots.
    compress_event(k_win, v_win, salient, regular, base);

    buffer_k_.clear();
    buffer_v_.clear();
    buffer_rows_ = 0;
    window_count_ = 0;
    probe_log_.clear();
    return true;
}

std::pair<Matrix, Matrix> MixedCache::materialize() const {
    const size_t total = total_tokens();
    Matrix k_out(total, dim_), v_out(total, dim_);
    if (total == 0) {
        return {std::move(k_out), std::move(v_out)};
    }

    auto stack = [this](const std::vector<QuantizedBlock> &blocks, uint32_t rows) {
        Matrix m(rows, dim_);
        size_t at = 0;
        for (const QuantizedBlock &block : blocks) {
            const Matrix d = dequantize_block(block);
            std::copy(d.data.begin(), d.data.end(), m.row(at));
            at += d.rows;
        }
        return m;
    };
    const Matrix sal_k = stack(salient_k_, salient_rows_);
    const Matrix sal_v = stack(salient_v_, salient_rows_);
    const Matrix reg_k = stack(regular_k_, regular_rows_);
    const Matrix reg_v = stack(regular_v_, regular_rows_);

    for (size_t t = 0; t < total; ++t) {
        const Slot slot = token_order_[t];
        const float *k_src = nullptr;
        const float *v_src = nullptr;
        switch (slot.kind) {
        case SlotKind::salient:
            k_src = sal_k.row(slot.row);
            v_src = sal_v.row(slot.row);
            break;
        case SlotKind::regular:
            k_src = reg_k.row(slot.row);
            v_src = reg_v.row(slot.row);
            break;
        case SlotKind::buffer:
            k_src = buffer_k_.data() + size_t(slot.row) * dim_;
            v_src = buffer_v_.data() + size_t(slot.row) * dim_;
            break;
        }
        std::copy(k_src, k_src + dim_, k_out.row(t));
        std::copy(v_src, v_src + dim_, v_out.row(t));
    }
    return {std::move(k_out), std::move(v_out)};
}

} // namespace zipcache
