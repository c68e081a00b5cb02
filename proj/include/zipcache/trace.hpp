#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "zipcache/tensor.hpp"

namespace zipcache {

// Token class annotations carried by a trace (a stand-in for tokenizer knowledge).
inline constexpr uint8_t kTokenOrdinary = 0;
inline constexpr uint8_t kTokenSpecial = 1;
inline constexpr uint8_t kTokenPunctuation = 2;

struct LayerKV {
    Tensor4 q;
    Tensor4 k;
    Tensor4 v;
};

// Recorded or synthetic attention states for one forward pass: per-layer Q/K/V
// plus per-token class tags. The first `prefill_len` positions are the prompt,
// the rest are decode steps replayed one token at a time.
struct Trace {
    std::vector<LayerKV> layers;
    std::vector<uint8_t> token_classes; // b * l entries, batch-major
    uint32_t prefill_len = 0;

    Dims4 dims() const { return layers.empty() ? Dims4{} : layers.front().q.dims; }
    uint32_t decode_len() const { return dims().l - prefill_len; }

    std::span<const uint8_t> classes_for_batch(size_t b) const {
        return {token_classes.data() + b * dims().l, dims().l};
    }

    // Checks the structural invariants (shared dims, class length, prefill split).
    // Throws std::invalid_argument on violation.
    void validate() const;
};

enum class TraceErrorKind {
    malformed_header,
    dimension_overflow,
    non_finite_value,
    truncated_payload,
    io_failure,
};

// Load/save failure carrying the byte offset where the problem was detected.
class TraceError : public std::runtime_error {
  public:
    TraceError(TraceErrorKind kind, size_t byte_offset, const std::string &what);
    TraceErrorKind kind() const { return kind_; }
    size_t byte_offset() const { return offset_; }

  private:
    TraceErrorKind kind_;
    size_t offset_;
};

// Binary trace file layout (little-endian):
//   magic "ZKV1" | u32 layer_count | u32 b | u32 h | u32 l | u32 d | u32 prefill_len
//   per layer: Q, K, V each as b*h*l*d f32 row-major
//   b*l bytes of token classes
Trace load_trace(const std::string &path);
void save_trace(const Trace &trace, const std::string &path);

enum class SynthProfile {
    uniform,         // diffuse attention, unit-scale states
    peaked,          // a seeded subset of key positions draws most attention mass
    outlier_channel, // a seeded subset of K/V channels is scaled up ~100x
};

SynthProfile parse_profile(const std::string &name);
const char *profile_name(SynthProfile profile);

// Deterministic synthetic trace. Pure function of (seed, dims, profile, layer_count,
// prefill_len); prefill_len == UINT32_MAX means "all prefill".
Trace synth_trace(uint64_t seed, Dims4 dims, SynthProfile profile, uint32_t layer_count = 1,
                  uint32_t prefill_len = UINT32_MAX);

// The key positions the peaked profile boosts for a given seed; exposed so tests
// can check that saliency metrics recover them.
std::vector<uint32_t> peaked_hot_keys(uint64_t seed, Dims4 dims);

} // namespace zipcache
