#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "zipcache/tensor.hpp"

namespace zipcache {

// Asymmetric uniform quantization parameters for one group:
//   code = clip(round(x / scale) + zero_point, 0, 2^k - 1)
//   x̂   = (code - zero_point) * scale
// Rounding is half-away-from-zero throughout.
struct QuantParams {
    float scale = 1.0f;
    int32_t zero_point = 0;
    int bit_width = 8; // one of {2, 4, 8}
    // Cached reciprocal used when encoding: (2^k-1)/(max-min) evaluated in
    // double, so the round-half ties of hand-derivable inputs land exactly.
    // Derived, never stored; falls back to 1/scale when absent.
    double inv_scale = 0.0;

    uint32_t max_code() const { return (1u << bit_width) - 1u; }
    bool operator==(const QuantParams &o) const {
        return scale == o.scale && zero_point == o.zero_point && bit_width == o.bit_width;
    }
};

// Derive (scale, zero_point) from a value range. Constant input (hi == lo)
// falls back to scale 1 and zero_point -round(lo).
QuantParams params_from_range(float lo, float hi, int bit_width);

uint8_t encode_value(float x, const QuantParams &p);
float decode_value(uint8_t code, const QuantParams &p);

// Quantize one vector as a single group.
std::pair<std::vector<uint8_t>, QuantParams> quantize_uniform(std::span<const float> x,
                                                              int bit_width);
// Inverse of quantize_uniform; throws if any code exceeds the bit width.
std::vector<float> dequantize(std::span<const uint8_t> codes, const QuantParams &p);

enum class Granularity : uint8_t {
    tokenwise = 0,
    channelwise = 1,
    groupwise = 2,
    channel_separable_tokenwise = 3,
};

const char *granularity_name(Granularity g);

// Packed quantized 2-D block. Codes are bit-packed little-endian within bytes
// in row-major element order; params are indexed by quantization group
// (row, column, or contiguous run of `group_size` elements).
struct QuantizedBlock {
    Granularity granularity = Granularity::tokenwise;
    int bit_width = 8;
    uint32_t group_size = 0; // groupwise only
    size_t rows = 0;
    size_t cols = 0;
    std::vector<uint8_t> codes;
    std::vector<QuantParams> params;
    std::vector<float> channel_scales; // channel-separable scheme only

    size_t code_count() const { return rows * cols; }
    uint8_t code_at(size_t idx) const;
    size_t group_of(size_t idx) const;
};

QuantizedBlock quantize_matrix(const Matrix &x, Granularity granularity, int bit_width,
                               uint32_t group_size = 0);

// Channel-separable tokenwise quantization: divide column i by
// c_i = sqrt(max |column i|) (1 for all-zero columns), quantize per token,
// keep c for rescaling at dequantization.
QuantizedBlock cst_quantize(const Matrix &x, int bit_width);

Matrix dequantize_block(const QuantizedBlock &block);

// Shared-range variants used by the streaming cache: quantization parameters
// (per-channel ranges, channel scales) are computed over the whole `event`
// matrix, but codes are emitted only for the `rows` subset. This keeps rows
// quantized in the same compression event comparable regardless of which
// partition they land in.
QuantizedBlock quantize_rows_channelwise(const Matrix &event, std::span<const uint32_t> rows,
                                         int bit_width);
QuantizedBlock quantize_rows_cst(const Matrix &event, std::span<const uint32_t> rows,
                                 int bit_width);

// K/V-pair quantization schemes whose parameter counts have closed forms.
enum class Scheme {
    groupwise,            // K and V groupwise(n)
    tokenwise,            // K and V tokenwise
    channelwise_tokenwise, // channelwise K + tokenwise V
    baseline,             // channelwise K + channel-separable tokenwise V
};

Scheme parse_scheme(const std::string &name);
const char *scheme_name(Scheme scheme);

struct ParamBudget {
    std::string scheme;
    uint64_t count = 0; // stored full-precision quantization parameters, K+V pair
};

// Closed-form parameter counts:
//   groupwise 4*b*hd*l/n | tokenwise 4*b*l | channelwise+tokenwise 2*hd + 2*b*l
//   baseline 3*hd + 2*b*l
ParamBudget param_budget(Scheme scheme, uint64_t b, uint64_t hd, uint64_t l, uint64_t group_size);

// Snapshot serialization: granularity tag byte, bit width, group size, dims,
// packed codes, params (f32 scale, i32 zero point each), optional channel scales.
std::vector<uint8_t> serialize_block(const QuantizedBlock &block);
QuantizedBlock deserialize_block(std::span<const uint8_t> bytes);

} // namespace zipcache
