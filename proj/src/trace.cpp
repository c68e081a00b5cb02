#include "zipcache/trace.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <limits>
#include <numeric>
#include <random>

namespace zipcache {

namespace {

constexpr char kMagic[4] = {'Z', 'K', 'V', '1'};
constexpr uint32_t kMaxLayerCount = 1u << 16;
constexpr uint64_t kMaxPayloadBytes = 1ull << 40;

std::string kind_label(TraceErrorKind kind) {
    switch (kind) {
    case TraceErrorKind::malformed_header: return "malformed header";
    case TraceErrorKind::dimension_overflow: return "dimension overflow";
    case TraceErrorKind::non_finite_value: return "non-finite value";
    case TraceErrorKind::truncated_payload: return "truncated payload";
    case TraceErrorKind::io_failure: return "i/o failure";
    }
    return "unknown";
}

uint32_t read_u32_le(const uint8_t *p) {
    return uint32_t(p[0]) | uint32_t(p[1]) << 8 | uint32_t(p[2]) << 16 | uint32_t(p[3]) << 24;
}

void write_u32_le(std::vector<uint8_t> &out, uint32_t v) {
    out.push_back(uint8_t(v & 0xff));
    out.push_back(uint8_t(v >> 8 & 0xff));
    out.push_back(uint8_t(v >> 16 & 0xff));
    out.push_back(uint8_t(v >> 24 & 0xff));
}

float read_f32_le(const uint8_t *p) {
    uint32_t bits = read_u32_le(p);
    float f;
    std::memcpy(&f, &bits, sizeof(f));
    return f;
}

void write_f32_le(std::vector<uint8_t> &out, float f) {
    uint32_t bits;
    std::memcpy(&bits, &f, sizeof(bits));
    write_u32_le(out, bits);
}

// Deterministic value streams on top of mt19937_64. The standard distributions
// are implementation-defined, so the mappings are spelled out here to keep
// traces bit-identical across toolchains.
struct ValueStream {
    std::mt19937_64 eng;

    explicit ValueStream(uint64_t seed) : eng(seed) {}

    double unit() { // [0, 1)
        return double(eng() >> 11) * 0x1.0p-53;
    }
    double uniform(double lo, double hi) { return lo + (hi - lo) * unit(); }
    double normal() { // Box-Muller, one sample per pair of draws
        double u1 = unit();
        double u2 = unit();
        if (u1 <= 0.0) {
            u1 = 0x1.0p-53;
        }
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
    }
    uint64_t below(uint64_t n) { return eng() % n; }
};

uint64_t splitmix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d4a2c62d4b7f5ull;
    return x ^ (x >> 31);
}

// First `count` entries of a seeded shuffle of [0, n).
std::vector<uint32_t> seeded_subset(ValueStream &vs, uint32_t n, uint32_t count) {
    std::vector<uint32_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0u);
    count = std::min(count, n);
    for (uint32_t i = 0; i < count; ++i) {
        uint32_t j = i + uint32_t(vs.below(n - i));
        std::swap(idx[i], idx[j]);
    }
    idx.resize(count);
    std::sort(idx.begin(), idx.end());
    return idx;
}

} // namespace

namespace {

std::string trace_error_message(TraceErrorKind kind, size_t byte_offset, const std::string &what) {
    std::string msg;
    msg.reserve(64 + what.size());
    msg.append(kind_label(kind));
    msg.append(" at byte ");
    msg.append(std::to_string(byte_offset));
    msg.append(": ");
    msg.append(what);
    return msg;
}

} // namespace

TraceError::TraceError(TraceErrorKind kind, size_t byte_offset, const std::string &what)
    : std::runtime_error(trace_error_message(kind, byte_offset, what)), kind_(kind),
      offset_(byte_offset) {}

void Trace::validate() const {
    if (layers.empty()) {
        throw std::invalid_argument("trace has no layers");
    }
    const Dims4 dm = dims();
    if (dm.b == 0 || dm.h == 0 || dm.l == 0 || dm.d == 0) {
        throw std::invalid_argument("trace has a zero dimension");
    }
    for (const LayerKV &layer : layers) {
        for (const Tensor4 *t : {&layer.q, &layer.k, &layer.v}) {
            if (!(t->dims == dm)) {
                throw std::invalid_argument("trace layers disagree on dims");
            }
            if (t->data.size() != dm.elems()) {
                throw std::invalid_argument("tensor data length does not match dims");
            }
        }
    }
    if (token_classes.size() != size_t(dm.b) * dm.l) {
        throw std::invalid_argument("token_classes length must be b*l");
    }
    if (prefill_len > dm.l) {
        throw std::invalid_argument("prefill_len exceeds sequence length");
    }
}

Trace load_trace(const std::string &path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw TraceError(TraceErrorKind::io_failure, 0, "cannot open " + path);
    }
    std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (in.bad()) {
        throw TraceError(TraceErrorKind::io_failure, bytes.size(), "read failed for " + path);
    }

    constexpr size_t kHeaderSize = 4 + 6 * 4;
    if (bytes.size() < kHeaderSize) {
        throw TraceError(TraceErrorKind::malformed_header, bytes.size(),
                         "file shorter than header");
    }
    if (std::memcmp(bytes.data(), kMagic, 4) != 0) {
        throw TraceError(TraceErrorKind::malformed_header, 0, "bad magic");
    }

    const uint32_t layer_count = read_u32_le(bytes.data() + 4);
    Dims4 dm;
    dm.b = read_u32_le(bytes.data() + 8);
    dm.h = read_u32_le(bytes.data() + 12);
    dm.l = read_u32_le(bytes.data() + 16);
    dm.d = read_u32_le(bytes.data() + 20);
    const uint32_t prefill = read_u32_le(bytes.data() + 24);

    if (layer_count == 0 || layer_count > kMaxLayerCount) {
        throw TraceError(TraceErrorKind::malformed_header, 4, "layer count out of range");
    }
    if (dm.b == 0 || dm.h == 0 || dm.l == 0 || dm.d == 0) {
        throw TraceError(TraceErrorKind::malformed_header, 8, "zero dimension");
    }
    if (prefill > dm.l) {
        throw TraceError(TraceErrorKind::malformed_header, 24, "prefill_len exceeds l");
    }

    const uint64_t elems = uint64_t(dm.b) * dm.h * dm.l * dm.d;
    if (dm.h != 0 && elems / dm.h / dm.b / dm.l != dm.d) {
        throw TraceError(TraceErrorKind::dimension_overflow, 8, "b*h*l*d overflows");
    }
    const uint64_t tensor_bytes = elems * 4;
    const uint64_t payload = uint64_t(layer_count) * 3 * tensor_bytes + uint64_t(dm.b) * dm.l;
    if (tensor_bytes / 4 != elems || payload > kMaxPayloadBytes) {
        throw TraceError(TraceErrorKind::dimension_overflow, 8, "payload exceeds supported size");
    }
    if (bytes.size() != kHeaderSize + payload) {
        if (bytes.size() < kHeaderSize + payload) {
            throw TraceError(TraceErrorKind::truncated_payload, bytes.size(),
                             "expected " + std::to_string(kHeaderSize + payload) + " bytes");
        }
        throw TraceError(TraceErrorKind::truncated_payload, kHeaderSize + payload,
                         "trailing bytes after payload");
    }

    Trace trace;
    trace.prefill_len = prefill;
    trace.layers.resize(layer_count);
    size_t off = kHeaderSize;
    for (LayerKV &layer : trace.layers) {
        for (Tensor4 *t : {&layer.q, &layer.k, &layer.v}) {
            t->dims = dm;
            t->data.resize(elems);
            for (uint64_t i = 0; i < elems; ++i) {
                const float f = read_f32_le(bytes.data() + off);
                if (!std::isfinite(f)) {
                    throw TraceError(TraceErrorKind::non_finite_value, off, "float is NaN or Inf");
                }
                t->data[i] = f;
                off += 4;
            }
        }
    }
    trace.token_classes.assign(bytes.begin() + off, bytes.begin() + off + size_t(dm.b) * dm.l);
    return trace;
}

void save_trace(const Trace &trace, const std::string &path) {
    trace.validate();
    const Dims4 dm = trace.dims();

    std::vector<uint8_t> bytes;
    bytes.reserve(28 + trace.layers.size() * 3 * dm.elems() * 4 + trace.token_classes.size());
    bytes.insert(bytes.end(), kMagic, kMagic + 4);
    write_u32_le(bytes, uint32_t(trace.layers.size()));
    write_u32_le(bytes, dm.b);
    write_u32_le(bytes, dm.h);
    write_u32_le(bytes, dm.l);
    write_u32_le(bytes, dm.d);
    write_u32_le(bytes, trace.prefill_len);
    for (const LayerKV &layer : trace.layers) {
        for (const Tensor4 *t : {&layer.q, &layer.k, &layer.v}) {
            for (float f : t->data) {
                write_f32_le(bytes, f);
            }
        }
    }
    bytes.insert(bytes.end(), trace.token_classes.begin(), trace.token_classes.end());

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw TraceError(TraceErrorKind::io_failure, 0, "cannot open " + path + " for writing");
    }
    out.write(reinterpret_cast<const char *>(bytes.data()), std::streamsize(bytes.size()));
    if (!out) {
        throw TraceError(TraceErrorKind::io_failure, bytes.size(), "write failed for " + path);
    }
}

SynthProfile parse_profile(const std::string &name) {
    if (name == "uniform") return SynthProfile::uniform;
    if (name == "peaked") return SynthProfile::peaked;
    if (name == "outlier-channel") return SynthProfile::outlier_channel;
    throw std::invalid_argument("unknown profile: " + name);
}

const char *profile_name(SynthProfile profile) {
    switch (profile) {
    case SynthProfile::uniform: return "uniform";
    case SynthProfile::peaked: return "peaked";
    case SynthProfile::outlier_channel: return "outlier-channel";
    }
    return "?";
}

std::vector<uint32_t> peaked_hot_keys(uint64_t seed, Dims4 dims) {
    ValueStream vs(splitmix64(seed ^ 0x70656b6564ull)); // stream tag "peked"
    const uint32_t count = std::max(1u, dims.l / 16);
    return seeded_subset(vs, dims.l, count);
}

namespace {

void fill_normal(ValueStream &vs, Tensor4 &t) {
    for (float &f : t.data) {
        f = float(vs.normal());
    }
}

void synth_uniform_layer(ValueStream &vs, LayerKV &layer) {
    fill_normal(vs, layer.q);
    fill_normal(vs, layer.k);
    fill_normal(vs, layer.v);
}

// Hot keys get a strong component along a per-(batch, head) direction that every
// query also carries, so softmax mass concentrates on them.
void synth_peaked_layer(ValueStream &vs, LayerKV &layer, std::span<const uint32_t> hot) {
    const Dims4 dm = layer.q.dims;
    std::vector<bool> is_hot(dm.l, false);
    for (uint32_t i : hot) {
        is_hot[i] = true;
    }
    std::vector<double> dir(dm.d);
    for (uint32_t b = 0; b < dm.b; ++b) {
        for (uint32_t h = 0; h < dm.h; ++h) {
            double norm2 = 0.0;
            for (uint32_t c = 0; c < dm.d; ++c) {
                dir[c] = vs.normal();
                norm2 += dir[c] * dir[c];
            }
            const double inv = 1.0 / std::sqrt(std::max(norm2, 1e-30));
            for (uint32_t c = 0; c < dm.d; ++c) {
                dir[c] *= inv;
            }
            const double q_gain = std::sqrt(double(dm.d));
            for (uint32_t t = 0; t < dm.l; ++t) {
                for (uint32_t c = 0; c < dm.d; ++c) {
                    layer.q.at(b, h, t, c) = float(q_gain * (dir[c] + 0.1 * vs.normal()));
                    const double base = 0.3 * vs.normal();
                    layer.k.at(b, h, t, c) = float(base + (is_hot[t] ? 4.0 * dir[c] : 0.0));
                    layer.v.at(b, h, t, c) = float(vs.normal());
                }
            }
        }
    }
}

// A seeded subset of flattened (h*d) channels is scaled by 100x, with one entry
// per hot channel planted at the full +/-100 magnitude so the outlier ratio is
// structural rather than statistical.
void synth_outlier_layer(ValueStream &vs, LayerKV &layer) {
    const Dims4 dm = layer.q.dims;
    fill_normal(vs, layer.q);
    const uint32_t hd = dm.h * dm.d;
    uint32_t hot_n = std::max(1u, hd / 16);
    if (hd >= 3) {
        hot_n = std::min(hot_n, (hd - 1) / 2);
    }
    for (Tensor4 *t : {&layer.k, &layer.v}) {
        for (float &f : t->data) {
            f = float(vs.uniform(-1.0, 1.0));
        }
        const std::vector<uint32_t> hot = seeded_subset(vs, hd, hot_n);
        for (uint32_t ch : hot) {
            const uint32_t h = ch / dm.d;
            const uint32_t c = ch % dm.d;
            const uint32_t planted_b = uint32_t(vs.below(dm.b));
            const uint32_t planted_t = uint32_t(vs.below(dm.l));
            const float sign = vs.unit() < 0.5 ? -1.0f : 1.0f;
            t->at(planted_b, h, planted_t, c) = sign;
            for (uint32_t b = 0; b < dm.b; ++b) {
                for (uint32_t tok = 0; tok < dm.l; ++tok) {
                    t->at(b, h, tok, c) *= 100.0f;
                }
            }
        }
    }
}

} // namespace

Trace synth_trace(uint64_t seed, Dims4 dims, SynthProfile profile, uint32_t layer_count,
                  uint32_t prefill_len) {
    if (dims.b == 0 || dims.h == 0 || dims.l == 0 || dims.d == 0) {
        throw std::invalid_argument("synth_trace: all dims must be >= 1");
    }
    if (layer_count == 0) {
        throw std::invalid_argument("synth_trace: layer_count must be >= 1");
    }
    if (prefill_len == UINT32_MAX) {
        prefill_len = dims.l;
    }
    if (prefill_len > dims.l || prefill_len == 0) {
        throw std::invalid_argument("synth_trace: prefill_len must be in [1, l]");
    }

    Trace trace;
    trace.prefill_len = prefill_len;
    trace.layers.resize(layer_count);

    const std::vector<uint32_t> hot = peaked_hot_keys(seed, dims);
    ValueStream vs(splitmix64(seed));
    for (LayerKV &layer : trace.layers) {
        layer.q = Tensor4(dims);
        layer.k = Tensor4(dims);
        layer.v = Tensor4(dims);
        switch (profile) {
        case SynthProfile::uniform: synth_uniform_layer(vs, layer); break;
        case SynthProfile::peaked: synth_peaked_layer(vs, layer, hot); break;
        case SynthProfile::outlier_channel: synth_outlier_layer(vs, layer); break;
        }
    }

    trace.token_classes.assign(size_t(dims.b) * dims.l, kTokenOrdinary);
    for (uint32_t b = 0; b < dims.b; ++b) {
        trace.token_classes[size_t(b) * dims.l] = kTokenSpecial;
        for (uint32_t t = 1; t < dims.l; ++t) {
            if (vs.below(100) < 5) {
                trace.token_classes[size_t(b) * dims.l + t] = kTokenPunctuation;
            }
        }
    }
    return trace;
}

} // namespace zipcache
