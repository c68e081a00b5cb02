#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "zipcache/tensor.hpp"

namespace zipcache {

// Attention probability rows for a subset of query positions. A full matrix is
// simply all rows present. Stored rows have length `cols`, with exact zeros
// above the causal diagonal (masking happens before softmax, at -inf logits).
struct AttnRow {
    uint32_t row_index = 0;
    std::vector<float> probs;
};

struct AttnMatrix {
    uint32_t cols = 0;
    std::vector<AttnRow> rows;

    bool full() const { return rows.size() == cols; }
};

struct TiledAttnConfig {
    size_t block_rows = 64;
    size_t block_cols = 64;
};

struct AttentionResult {
    Matrix output;      // l x d
    AttnMatrix weights; // all rows
};

// Reference causal/full attention: softmax(Q K^T / sqrt(d)) V, materializing
// every probability row.
AttentionResult attention_full(const Matrix &q, const Matrix &k, const Matrix &v, bool causal);

// Tile-at-a-time attention with online softmax. Never materializes the score
// matrix; auxiliary storage is O(block_rows * (block_cols + d)).
Matrix attention_tiled(const Matrix &q, const Matrix &k, const Matrix &v,
                       const TiledAttnConfig &cfg, bool causal);

// Position-aware variant for caches whose rows are a subset of the original
// sequence: key j is visible to query i iff key_pos[j] <= query_pos[i].
// Queries with no visible key produce a zero output row.
Matrix attention_tiled(const Matrix &q, const Matrix &k, const Matrix &v,
                       const TiledAttnConfig &cfg, bool causal,
                       std::span<const uint32_t> query_pos, std::span<const uint32_t> key_pos);

struct DecodeResult {
    std::vector<float> output; // d
    std::vector<float> probs;  // l, sums to 1
};

// Single-query attention over the current cache (no mask; every key visible).
DecodeResult attention_decode(std::span<const float> q, const Matrix &k, const Matrix &v);

// Attention rows for the probe queries only; row r of the result equals row
// probe_idx[r] of attention_full's matrix. probe_idx must be sorted and unique.
AttnMatrix probe_attention(const Matrix &q, std::span<const uint32_t> probe_idx, const Matrix &k,
                           bool causal);

} // namespace zipcache
