#include "zipcache/quant.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <numeric>

namespace zipcache {

namespace {

void check_bit_width(int k) {
    if (k != 2 && k != 4 && k != 8) {
        throw std::invalid_argument("bit width must be one of {2, 4, 8}");
    }
}

void check_finite(std::span<const float> x) {
    for (float f : x) {
        if (!std::isfinite(f)) {
            throw std::invalid_argument("input contains a non-finite value");
        }
    }
}

// Half-away-from-zero, matching std::llround.
int64_t round_half_away(double v) { return std::llround(v); }

size_t packed_bytes(size_t count, int k) { return (count * size_t(k) + 7) / 8; }

void pack_code(std::vector<uint8_t> &bytes, size_t idx, int k, uint8_t code) {
    const size_t bit = idx * size_t(k);
    bytes[bit / 8] |= uint8_t(code << (bit % 8));
}

uint8_t unpack_code(const std::vector<uint8_t> &bytes, size_t idx, int k) {
    const size_t bit = idx * size_t(k);
    const uint8_t mask = uint8_t((1u << k) - 1u);
    return uint8_t(bytes[bit / 8] >> (bit % 8)) & mask;
}

struct MinMax {
    float lo = std::numeric_limits<float>::infinity();
    float hi = -std::numeric_limits<float>::infinity();
    void feed(float v) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
};

// Group index of a row-major element under each granularity. Tokenwise and the
// channel-separable scheme group by row, channelwise by column, groupwise by
// contiguous runs of group_size elements (group_size divides cols, so runs
// never straddle rows).
size_t element_group(Granularity g, size_t r, size_t c, size_t cols, uint32_t group_size) {
    switch (g) {
    case Granularity::tokenwise:
    case Granularity::channel_separable_tokenwise: return r;
    case Granularity::channelwise: return c;
    case Granularity::groupwise: return (r * cols + c) / group_size;
    }
    return 0;
}

size_t group_count(Granularity g, size_t rows, size_t cols, uint32_t group_size) {
    switch (g) {
    case Granularity::tokenwise:
    case Granularity::channel_separable_tokenwise: return rows;
    case Granularity::channelwise: return cols;
    case Granularity::groupwise: return rows * cols / group_size;
    }
    return 0;
}

std::vector<float> channel_scales_of(const Matrix &x) {
    std::vector<float> scales(x.cols, 1.0f);
    for (size_t c = 0; c < x.cols; ++c) {
        float peak = 0.0f;
        for (size_t r = 0; r < x.rows; ++r) {
            peak = std::max(peak, std::fabs(x.at(r, c)));
        }
        scales[c] = peak > 0.0f ? std::sqrt(peak) : 1.0f;
    }
    return scales;
}

} // namespace

QuantParams params_from_range(float lo, float hi, int bit_width) {
    check_bit_width(bit_width);
    QuantParams p;
    p.bit_width = bit_width;
    if (hi > lo) {
        const double range = double(hi) - double(lo);
        const double levels = double((1u << bit_width) - 1u);
        p.inv_scale = levels / range;
        p.scale = float(range / levels);
        p.zero_point = int32_t(-round_half_away(double(lo) * p.inv_scale));
    } else {
        // Degenerate constant input: unit step, exact for integral constants.
        p.scale = 1.0f;
        p.inv_scale = 1.0;
        p.zero_point = int32_t(-round_half_away(double(lo)));
    }
    return p;
}

uint8_t encode_value(float x, const QuantParams &p) {
    const double inv = p.inv_scale > 0.0 ? p.inv_scale : 1.0 / double(p.scale);
    int64_t code = round_half_away(double(x) * inv) + p.zero_point;
    code = std::clamp<int64_t>(code, 0, p.max_code());
    return uint8_t(code);
}

float decode_value(uint8_t code, const QuantParams &p) {
    return float((int64_t(code) - p.zero_point) * double(p.scale));
}

std::pair<std::vector<uint8_t>, QuantParams> quantize_uniform(std::span<const float> x,
                                                              int bit_width) {
    if (x.empty()) {
        throw std::invalid_argument("quantize_uniform: empty input");
    }
    check_finite(x);
    MinMax mm;
    for (float f : x) {
        mm.feed(f);
    }
    const QuantParams p = params_from_range(mm.lo, mm.hi, bit_width);
    std::vector<uint8_t> codes(x.size());
    for (size_t i = 0; i < x.size(); ++i) {
        codes[i] = encode_value(x[i], p);
    }
    return {std::move(codes), p};
}

std::vector<float> dequantize(std::span<const uint8_t> codes, const QuantParams &p) {
    check_bit_width(p.bit_width);
    std::vector<float> out(codes.size());
    for (size_t i = 0; i < codes.size(); ++i) {
        if (codes[i] > p.max_code()) {
            throw std::invalid_argument("dequantize: code out of range for bit width");
        }
        out[i] = decode_value(codes[i], p);
    }
    return out;
}

const char *granularity_name(Granularity g) {
    switch (g) {
    case Granularity::tokenwise: return "tokenwise";
    case Granularity::channelwise: return "channelwise";
    case Granularity::groupwise: return "groupwise";
    case Granularity::channel_separable_tokenwise: return "channel-separable-tokenwise";
    }
    return "?";
}

uint8_t QuantizedBlock::code_at(size_t idx) const { return unpack_code(codes, idx, bit_width); }

size_t QuantizedBlock::group_of(size_t idx) const {
    return element_group(granularity, idx / cols, idx % cols, cols, group_size);
}

QuantizedBlock quantize_matrix(const Matrix &x, Granularity granularity, int bit_width,
                               uint32_t group_size) {
    check_bit_width(bit_width);
    if (x.rows == 0 || x.cols == 0) {
        throw std::invalid_argument("quantize_matrix: empty matrix");
    }
    check_finite(x.data);
    if (granularity == Granularity::channel_separable_tokenwise) {
        return cst_quantize(x, bit_width);
    }
    if (granularity == Granularity::groupwise) {
        if (group_size == 0 || x.cols % group_size != 0) {
            throw std::invalid_argument("quantize_matrix: group size must divide channel count");
        }
    } else {
        group_size = 0;
    }

    QuantizedBlock block;
    block.granularity = granularity;
    block.bit_width = bit_width;
    block.group_size = group_size;
    block.rows = x.rows;
    block.cols = x.cols;

    const size_t groups = group_count(granularity, x.rows, x.cols, group_size);
    std::vector<MinMax> ranges(groups);
    for (size_t r = 0; r < x.rows; ++r) {
        for (size_t c = 0; c < x.cols; ++c) {
            ranges[element_group(granularity, r, c, x.cols, group_size)].feed(x.at(r, c));
        }
    }
    block.params.resize(groups);
    for (size_t g = 0; g < groups; ++g) {
        block.params[g] = params_from_range(ranges[g].lo, ranges[g].hi, bit_width);
    }
    block.codes.assign(packed_bytes(x.rows * x.cols, bit_width), 0);
    for (size_t r = 0; r < x.rows; ++r) {
        for (size_t c = 0; c < x.cols; ++c) {
            const size_t g = element_group(granularity, r, c, x.cols, group_size);
            pack_code(block.codes, r * x.cols + c, bit_width, encode_value(x.at(r, c), block.params[g]));
        }
    }
    return block;
}

QuantizedBlock cst_quantize(const Matrix &x, int bit_width) {
    check_bit_width(bit_width);
    if (x.rows == 0 || x.cols == 0) {
        throw std::invalid_argument("cst_quantize: empty matrix");
    }
    check_finite(x.data);

    QuantizedBlock block;
    block.granularity = Granularity::channel_separable_tokenwise;
    block.bit_width = bit_width;
    block.rows = x.rows;
    block.cols = x.cols;
    block.channel_scales = channel_scales_of(x);

    block.params.resize(x.rows);
    block.codes.assign(packed_bytes(x.rows * x.cols, bit_width), 0);
    std::vector<float> norm_row(x.cols);
    for (size_t r = 0; r < x.rows; ++r) {
        for (size_t c = 0; c < x.cols; ++c) {
            norm_row[c] = x.at(r, c) / block.channel_scales[c];
        }
        MinMax mm;
        for (float f : norm_row) {
            mm.feed(f);
        }
        block.params[r] = params_from_range(mm.lo, mm.hi, bit_width);
        for (size_t c = 0; c < x.cols; ++c) {
            pack_code(block.codes, r * x.cols + c, bit_width,
                      encode_value(norm_row[c], block.params[r]));
        }
    }
    return block;
}

Matrix dequantize_block(const QuantizedBlock &block) {
    Matrix out(block.rows, block.cols);
    const bool rescale = block.granularity == Granularity::channel_separable_tokenwise;
    if (rescale && block.channel_scales.size() != block.cols) {
        throw std::invalid_argument("dequantize_block: missing channel scales");
    }
    for (size_t r = 0; r < block.rows; ++r) {
        for (size_t c = 0; c < block.cols; ++c) {
            const size_t idx = r * block.cols + c;
            float v = decode_value(block.code_at(idx), block.params[block.group_of(idx)]);
            if (rescale) {
                v *= block.channel_scales[c];
            }
            out.at(r, c) = v;
        }
    }
    return out;
}

QuantizedBlock quantize_rows_channelwise(const Matrix &event, std::span<const uint32_t> rows,
                                         int bit_width) {
    check_bit_width(bit_width);
    if (event.rows == 0 || event.cols == 0) {
        throw std::invalid_argument("quantize_rows_channelwise: empty event matrix");
    }
    check_finite(event.data);

    QuantizedBlock block;
    block.granularity = Granularity::channelwise;
    block.bit_width = bit_width;
    block.rows = rows.size();
    block.cols = event.cols;

    std::vector<MinMax> ranges(event.cols);
    for (size_t r = 0; r < event.rows; ++r) {
        for (size_t c = 0; c < event.cols; ++c) {
            ranges[c].feed(event.at(r, c));
        }
    }
    block.params.resize(event.cols);
    for (size_t c = 0; c < event.cols; ++c) {
        block.params[c] = params_from_range(ranges[c].lo, ranges[c].hi, bit_width);
    }
    block.codes.assign(packed_bytes(rows.size() * event.cols, bit_width), 0);
    for (size_t i = 0; i < rows.size(); ++i) {
        for (size_t c = 0; c < event.cols; ++c) {
            pack_code(block.codes, i * event.cols + c, bit_width,
                      encode_value(event.at(rows[i], c), block.params[c]));
        }
    }
    return block;
}

QuantizedBlock quantize_rows_cst(const Matrix &event, std::span<const uint32_t> rows,
                                 int bit_width) {
    check_bit_width(bit_width);
    if (event.rows == 0 || event.cols == 0) {
        throw std::invalid_argument("quantize_rows_cst: empty event matrix");
    }
    check_finite(event.data);

    QuantizedBlock block;
    block.granularity = Granularity::channel_separable_tokenwise;
    block.bit_width = bit_width;
    block.rows = rows.size();
    block.cols = event.cols;
    block.channel_scales = channel_scales_of(event);

    block.params.resize(rows.size());
    block.codes.assign(packed_bytes(rows.size() * event.cols, bit_width), 0);
    std::vector<float> norm_row(event.cols);
    for (size_t i = 0; i < rows.size(); ++i) {
        for (size_t c = 0; c < event.cols; ++c) {
            norm_row[c] = event.at(rows[i], c) / block.channel_scales[c];
        }
        MinMax mm;
        for (float f : norm_row) {
            mm.feed(f);
        }
        block.params[i] = params_from_range(mm.lo, mm.hi, bit_width);
        for (size_t c = 0; c < event.cols; ++c) {
            pack_code(block.codes, i * event.cols + c, bit_width,
                      encode_value(norm_row[c], block.params[i]));
        }
    }
    return block;
}

Scheme parse_scheme(const std::string &name) {
    if (name == "groupwise") return Scheme::groupwise;
    if (name == "tokenwise") return Scheme::tokenwise;
    if (name == "channelwise-tokenwise") return Scheme::channelwise_tokenwise;
    if (name == "baseline") return Scheme::baseline;
    throw std::invalid_argument("unknown scheme: " + name);
}

const char *scheme_name(Scheme scheme) {
    switch (scheme) {
    case Scheme::groupwise: return "groupwise";
    case Scheme::tokenwise: return "tokenwise";
    case Scheme::channelwise_tokenwise: return "channelwise-tokenwise";
    case Scheme::baseline: return "baseline";
    }
    return "?";
}

ParamBudget param_budget(Scheme scheme, uint64_t b, uint64_t hd, uint64_t l,
                         uint64_t group_size) {
    if (b == 0 || hd == 0 || l == 0) {
        throw std::invalid_argument("param_budget: dims must be positive");
    }
    ParamBudget budget;
    budget.scheme = scheme_name(scheme);
    switch (scheme) {
    case Scheme::groupwise:
        if (group_size == 0 || (b * hd * l) % group_size != 0) {
            throw std::invalid_argument("param_budget: group size must divide b*hd*l");
        }
        budget.count = 4 * b * hd * l / group_size;
        break;
    case Scheme::tokenwise:
        budget.count = 4 * b * l;
        break;
    case Scheme::channelwise_tokenwise:
        budget.count = 2 * hd + 2 * b * l;
        break;
    case Scheme::baseline:
        budget.count = 3 * hd + 2 * b * l;
        break;
    }
    return budget;
}

std::vector<uint8_t> serialize_block(const QuantizedBlock &block) {
    std::vector<uint8_t> out;
    auto put_u32 = [&out](uint32_t v) {
        for (int i = 0; i < 4; ++i) {
            out.push_back(uint8_t(v >> (8 * i) & 0xff));
        }
    };
    auto put_f32 = [&put_u32](float f) {
        uint32_t bits;
        std::memcpy(&bits, &f, sizeof(bits));
        put_u32(bits);
    };
    out.push_back(uint8_t(block.granularity));
    out.push_back(uint8_t(block.bit_width));
    put_u32(block.group_size);
    put_u32(uint32_t(block.rows));
    put_u32(uint32_t(block.cols));
    put_u32(uint32_t(block.codes.size()));
    out.insert(out.end(), block.codes.begin(), block.codes.end());
    put_u32(uint32_t(block.params.size()));
    for (const QuantParams &p : block.params) {
        put_f32(p.scale);
        put_u32(uint32_t(p.zero_point));
    }
    put_u32(uint32_t(block.channel_scales.size()));
    for (float c : block.channel_scales) {
        put_f32(c);
    }
    return out;
}

QuantizedBlock deserialize_block(std::span<const uint8_t> bytes) {
    size_t off = 0;
    auto need = [&](size_t n) {
        if (off + n > bytes.size()) {
            throw std::invalid_argument("deserialize_block: truncated at byte " +
                                        std::to_string(off));
        }
    };
    auto get_u32 = [&]() {
        need(4);
        uint32_t v = 0;
        for (int i = 0; i < 4; ++i) {
            v |= uint32_t(bytes[off + i]) << (8 * i);
        }
        off += 4;
        return v;
    };
    auto get_f32 = [&]() {
        uint32_t bits = get_u32();
        float f;
        std::memcpy(&f, &bits, sizeof(f));
        return f;
    };

    QuantizedBlock block;
    need(2);
    if (bytes[off] > uint8_t(Granularity::channel_separable_tokenwise)) {
        throw std::invalid_argument("deserialize_block: unknown granularity tag");
    }
    block.granularity = Granularity(bytes[off++]);
    block.bit_width = bytes[off++];
    check_bit_width(block.bit_width);
    block.group_size = get_u32();
    block.rows = get_u32();
    block.cols = get_u32();
    if (block.granularity == Granularity::groupwise &&
        (block.group_size == 0 || (block.cols != 0 && block.cols % block.group_size != 0))) {
        throw std::invalid_argument("deserialize_block: bad group size");
    }
    const uint32_t code_bytes = get_u32();
    if (code_bytes != packed_bytes(block.rows * block.cols, block.bit_width)) {
        throw std::invalid_argument("deserialize_block: code size mismatch");
    }
    need(code_bytes);
    block.codes.assign(bytes.begin() + off, bytes.begin() + off + code_bytes);
    off += code_bytes;
    const uint32_t n_params = get_u32();
    block.params.resize(n_params);
    for (QuantParams &p : block.params) {
        p.scale = get_f32();
        p.zero_point = int32_t(get_u32());
        p.bit_width = block.bit_width;
        p.inv_scale = 1.0 / double(p.scale);
    }
    const uint32_t n_scales = get_u32();
    block.channel_scales.resize(n_scales);
    for (float &c : block.channel_scales) {
        c = get_f32();
    }
    if (off != bytes.size()) {
        throw std::invalid_argument("deserialize_block: trailing bytes");
    }
    return block;
}

} // namespace zipcache
