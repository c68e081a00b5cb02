#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "zipcache/quant.hpp"
#include "zipcache/saliency.hpp"
#include "zipcache/tensor.hpp"

namespace zipcache {

struct CacheConfig {
    int k_high = 4;
    int k_low = 2;
    double saliency_ratio = 0.4;
    uint32_t recompress_interval = 100;
    ProbeConfig probe;
};

// Bit accounting for one compressed cache. Parameters are counted at 16 bits
// each; the fp16 baseline is 2*b*hd*l*16 bits.
struct CompressionReport {
    uint64_t data_bits = 0;
    uint64_t param_bits = 0;
    uint64_t bitmap_bits = 0;
    uint64_t fp_buffer_bits = 0;
    double ratio = 1.0;

    uint64_t total_bits() const { return data_bits + param_bits + bitmap_bits + fp_buffer_bits; }
};

// Single-granularity scheme accounting (groupwise / tokenwise / channelwise+tokenwise /
// baseline), all tokens at `bit_width`.
CompressionReport compression_report(Scheme scheme, uint64_t b, uint64_t hd, uint64_t l,
                                     uint64_t group_size, int bit_width);

// Mixed-precision accounting: salient tokens at k_high, regular at k_low, both with
// channelwise K + channel-separable tokenwise V params per partition, one bitmap bit
// per compressed token, and any still-uncompressed decode buffer at 16 bits/element.
CompressionReport mixed_compression_report(uint64_t b, uint64_t hd, uint64_t l_salient,
                                           uint64_t l_regular, uint64_t l_buffer, int k_high,
                                           int k_low);

// The live mixed-precision KV cache for one (sequence, head): a salient partition
// at k_high bits, a regular partition at k_low bits, and a full-precision buffer
// for tokens decoded since the last recompression. Keys are quantized channelwise,
// values with the channel-separable tokenwise scheme. Each prefill/recompression
// event quantizes with ranges computed over all rows of that event, so partitions
// within one event share scales and events never interact.
class MixedCache {
  public:
    MixedCache(uint32_t head_dim, CacheConfig cfg, uint64_t seed);

    // Compress the prefill K/V (l x d) under a precomputed partition. Must be the
    // first ingestion; the buffer stays empty.
    void compress_prefill(const Matrix &k, const Matrix &v, const Partition &partition);

    // Append one decoded token's key/value row to the full-precision buffer.
    // Throws std::logic_error if the window is already full (recompress first).
    void append_decode(std::span<const float> k_row, std::span<const float> v_row);

    // Record a decode attention row when the step qualifies as a probe: one of
    // the last five steps of the window, or a seeded 5% coin otherwise.
    // step_in_window is 1-based. The row length must equal total_tokens().
    void record_probe_row(std::vector<float> probs, uint32_t step_in_window);

    // Unconditional probe-row insertion (the qualifying path above lands here).
    void push_probe_row(std::vector<float> probs);

    // When a full window has accumulated: score the buffered tokens from the
    // probe log (normalized metric), partition by saliency_ratio, quantize them
    // into the salient/regular blocks, clear the buffer and log. Returns whether
    // a recompression happened. An empty or useless probe log demotes the whole
    // window to the regular partition and records a warning.
    bool maybe_recompress();

    // Dequantized K/V in logical token order; buffer rows come back bit-exact.
    std::pair<Matrix, Matrix> materialize() const;

    uint32_t head_dim() const { return dim_; }
    const CacheConfig &config() const { return cfg_; }
    size_t total_tokens() const { return token_order_.size(); }
    size_t salient_tokens() const { return salient_rows_; }
    size_t regular_tokens() const { return regular_rows_; }
    size_t fp_buffer_tokens() const { return buffer_rows_; }
    uint32_t window_count() const { return window_count_; }
    bool is_salient(size_t token) const { return bitmap_[token]; }
    const std::vector<std::string> &warnings() const { return warnings_; }

    struct ProbeLogRow {
        uint32_t row_index = 0;    // global token position of the probing step
        std::vector<float> probs;  // row_index + 1 entries
    };
    const std::vector<ProbeLogRow> &probe_log() const { return probe_log_; }

  private:
    enum class SlotKind : uint8_t { salient, regular, buffer };
    struct Slot {
        SlotKind kind;
        uint32_t row;
    };

    void compress_event(const Matrix &k, const Matrix &v, std::span<const uint32_t> salient,
                        std::span<const uint32_t> regular, size_t base_token);

    uint32_t dim_;
    CacheConfig cfg_;
    std::mt19937_64 rng_;

    std::vector<QuantizedBlock> salient_k_, salient_v_, regular_k_, regular_v_;
    uint32_t salient_rows_ = 0;
    uint32_t regular_rows_ = 0;

    std::vector<float> buffer_k_, buffer_v_; // row-major, buffer_rows_ x dim_
    uint32_t buffer_rows_ = 0;
    uint32_t window_count_ = 0;

    std::vector<Slot> token_order_;  // logical position -> physical slot
    std::vector<bool> bitmap_;       // logical position -> salient (meaningful once compressed)
    std::vector<ProbeLogRow> probe_log_;
    std::vector<std::string> warnings_;
};

} // namespace zipcache
