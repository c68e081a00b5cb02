#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "zipcache/attention.hpp"
#include "zipcache/saliency.hpp"
#include "zipcache/trace.hpp"

using namespace zipcache;
namespace fs = std::filesystem;

namespace {

std::string temp_path(const std::string &name) {
    return (fs::temp_directory_path() / ("zipcache_test_" + name)).string();
}

std::vector<uint8_t> read_bytes(const std::string &path) {
    std::ifstream in(path, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_bytes(const std::string &path, const std::vector<uint8_t> &bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out.write(reinterpret_cast<const char *>(bytes.data()), std::streamsize(bytes.size()));
}

Trace zero_trace() {
    Trace t;
    t.prefill_len = 2;
    t.layers.resize(1);
    const Dims4 dm{1, 1, 2, 2};
    t.layers[0].q = Tensor4(dm);
    t.layers[0].k = Tensor4(dm);
    t.layers[0].v = Tensor4(dm);
    t.token_classes = {0, 1};
    return t;
}

} // namespace

TEST_CASE("save then load a minimal zero trace") {
    const std::string path = temp_path("zero.zkv");
    const Trace t = zero_trace();
    save_trace(t, path);

    // header 28 bytes + 3 tensors of 2*2*4 bytes + 2 class bytes
    const auto bytes = read_bytes(path);
    CHECK(bytes.size() == 28 + 3 * 16 + 2);
    CHECK(bytes[bytes.size() - 2] == 0x00);
    CHECK(bytes.back() == 0x01);

    const Trace back = load_trace(path);
    back.validate();
    CHECK(back.layers.size() == 1);
    CHECK(back.dims() == Dims4{1, 1, 2, 2});
    CHECK(back.prefill_len == 2);
    for (float f : back.layers[0].q.data) {
        CHECK(f == 0.0f);
    }
    std::remove(path.c_str());
}

TEST_CASE("round trip is byte identical") {
    const std::string p1 = temp_path("rt1.zkv");
    const std::string p2 = temp_path("rt2.zkv");
    const Trace t = synth_trace(42, {2, 2, 8, 4}, SynthProfile::uniform, 2, 6);
    save_trace(t, p1);
    const Trace back = load_trace(p1);
    save_trace(back, p2);
    CHECK(read_bytes(p1) == read_bytes(p2));

    // every float bit pattern survives
    REQUIRE(back.layers.size() == t.layers.size());
    CHECK(back.layers[1].v.data == t.layers[1].v.data);
    CHECK(back.token_classes == t.token_classes);
    CHECK(back.prefill_len == t.prefill_len);
    std::remove(p1.c_str());
    std::remove(p2.c_str());
}

TEST_CASE("load errors carry kind and byte offset") {
    const std::string path = temp_path("bad.zkv");
    const Trace t = zero_trace();
    save_trace(t, path);
    auto bytes = read_bytes(path);

    SUBCASE("bad magic") {
        bytes[0] = 'X';
        write_bytes(path, bytes);
        try {
            load_trace(path);
            FAIL("expected TraceError");
        } catch (const TraceError &e) {
            CHECK(e.kind() == TraceErrorKind::malformed_header);
            CHECK(e.byte_offset() == 0);
        }
    }
    SUBCASE("short header") {
        bytes.resize(10);
        write_bytes(path, bytes);
        try {
            load_trace(path);
            FAIL("expected TraceError");
        } catch (const TraceError &e) {
            CHECK(e.kind() == TraceErrorKind::malformed_header);
            CHECK(e.byte_offset() == 10);
        }
    }
    SUBCASE("l claims more payload than present") {
        bytes[16] = 3; // l: 2 -> 3
        write_bytes(path, bytes);
        try {
            load_trace(path);
            FAIL("expected TraceError");
        } catch (const TraceError &e) {
            CHECK(e.kind() == TraceErrorKind::truncated_payload);
            CHECK(e.byte_offset() == bytes.size());
        }
    }
    SUBCASE("zero dimension") {
        bytes[8] = 0; // b = 0
        write_bytes(path, bytes);
        CHECK_THROWS_AS(load_trace(path), TraceError);
    }
    SUBCASE("dimension overflow") {
        for (size_t off : {8, 12, 16, 20}) {
            bytes[off] = 0xff;
            bytes[off + 1] = 0xff;
            bytes[off + 2] = 0xff;
            bytes[off + 3] = 0x7f;
        }
        write_bytes(path, bytes);
        try {
            load_trace(path);
            FAIL("expected TraceError");
        } catch (const TraceError &e) {
            CHECK(e.kind() == TraceErrorKind::dimension_overflow);
        }
    }
    SUBCASE("non-finite float") {
        // first float of Q becomes NaN
        bytes[28] = 0x00;
        bytes[29] = 0x00;
        bytes[30] = 0xc0;
        bytes[31] = 0x7f;
        write_bytes(path, bytes);
        try {
            load_trace(path);
            FAIL("expected TraceError");
        } catch (const TraceError &e) {
            CHECK(e.kind() == TraceErrorKind::non_finite_value);
            CHECK(e.byte_offset() == 28);
        }
    }
    std::remove(path.c_str());
}

TEST_CASE("synth_trace is a pure function of seed, dims and profile") {
    for (SynthProfile p :
         {SynthProfile::uniform, SynthProfile::peaked, SynthProfile::outlier_channel}) {
        const Trace a = synth_trace(123, {2, 2, 16, 8}, p);
        const Trace b = synth_trace(123, {2, 2, 16, 8}, p);
        CHECK(a.layers[0].q.data == b.layers[0].q.data);
        CHECK(a.layers[0].k.data == b.layers[0].k.data);
        CHECK(a.layers[0].v.data == b.layers[0].v.data);
        CHECK(a.token_classes == b.token_classes);

        const Trace c = synth_trace(124, {2, 2, 16, 8}, p);
        CHECK(a.layers[0].q.data != c.layers[0].q.data);
    }
}

TEST_CASE("synth rejects zero dims") {
    CHECK_THROWS_AS(synth_trace(1, {0, 1, 4, 4}, SynthProfile::uniform), std::invalid_argument);
    CHECK_THROWS_AS(synth_trace(1, {1, 1, 4, 0}, SynthProfile::uniform), std::invalid_argument);
}

TEST_CASE("outlier-channel profile produces a >= 50x channel magnitude spread") {
    for (uint64_t seed : {1ull, 9ull, 77ull}) {
        const Dims4 dm{2, 2, 24, 16};
        const Trace t = synth_trace(seed, dm, SynthProfile::outlier_channel);
        for (const Tensor4 *tensor : {&t.layers[0].k, &t.layers[0].v}) {
            const uint32_t hd = dm.h * dm.d;
            std::vector<float> chan_mag(hd, 0.0f);
            for (uint32_t h = 0; h < dm.h; ++h) {
                for (uint32_t c = 0; c < dm.d; ++c) {
                    for (uint32_t b = 0; b < dm.b; ++b) {
                        for (uint32_t l = 0; l < dm.l; ++l) {
                            chan_mag[h * dm.d + c] =
                                std::max(chan_mag[h * dm.d + c], std::fabs(tensor->at(b, h, l, c)));
                        }
                    }
                }
            }
            std::vector<float> sorted = chan_mag;
            std::sort(sorted.begin(), sorted.end());
            const float median = sorted[sorted.size() / 2];
            const float peak = sorted.back();
            REQUIRE(median > 0.0f);
            CHECK(peak / median >= 50.0f);
        }
    }
}

TEST_CASE("peaked profile hot keys land in the exact-saliency top decile") {
    const Dims4 dm{1, 2, 64, 16};
    const uint64_t seed = 5;
    const Trace t = synth_trace(seed, dm, SynthProfile::peaked);
    const std::vector<uint32_t> hot = peaked_hot_keys(seed, dm);
    REQUIRE(!hot.empty());

    for (uint32_t h = 0; h < dm.h; ++h) {
        const Matrix q = t.layers[0].q.head_matrix(0, h);
        const Matrix k = t.layers[0].k.head_matrix(0, h);
        const AttentionResult full = attention_full(q, k, k, true);
        const SaliencyVector sv = normalized_scores(full.weights);
        const Partition top = select_salient(sv, 0.1);
        for (uint32_t key : hot) {
            CHECK(std::binary_search(top.salient_idx.begin(), top.salient_idx.end(), key));
        }
    }
}

TEST_CASE("synth token classes tag position zero special") {
    const Trace t = synth_trace(3, {3, 1, 32, 4}, SynthProfile::uniform);
    for (uint32_t b = 0; b < 3; ++b) {
        CHECK(t.classes_for_batch(b)[0] == kTokenSpecial);
    }
}

TEST_CASE("validate rejects traces whose layers disagree") {
    Trace t = synth_trace(1, {1, 1, 4, 4}, SynthProfile::uniform, 2);
    t.layers[1].k = Tensor4({1, 1, 4, 2});
    CHECK_THROWS_AS(t.validate(), std::invalid_argument);

    Trace short_classes = synth_trace(1, {1, 1, 4, 4}, SynthProfile::uniform);
    short_classes.token_classes.pop_back();
    CHECK_THROWS_AS(short_classes.validate(), std::invalid_argument);

    Trace bad_prefill = synth_trace(1, {1, 1, 4, 4}, SynthProfile::uniform);
    bad_prefill.prefill_len = 9;
    CHECK_THROWS_AS(bad_prefill.validate(), std::invalid_argument);
}
