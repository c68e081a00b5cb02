#include "zipcache/harness.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <memory>
#include <mutex>
#include <numeric>
#include <optional>
#include <sstream>
#include <thread>

#include "json.hpp"

#include "zipcache/attention.hpp"

namespace zipcache {

namespace {

constexpr TiledAttnConfig kHarnessTiles{64, 64};

// Heads are independent, so their runs fan out across threads. Each item
// writes only its own preallocated slot and results are reduced in index
// order afterwards, keeping reports bit-identical for any thread count.
void parallel_for(size_t n, const std::function<void(size_t)> &fn) {
    const size_t workers =
        std::min<size_t>(n, std::max(1u, std::thread::hardware_concurrency()));
    if (workers <= 1) {
        for (size_t i = 0; i < n; ++i) {
            fn(i);
        }
        return;
    }
    std::atomic<size_t> next{0};
    std::exception_ptr first_error;
    std::mutex error_mutex;
    std::vector<std::thread> pool;
    pool.reserve(workers);
    for (size_t w = 0; w < workers; ++w) {
        pool.emplace_back([&] {
            for (size_t i; (i = next.fetch_add(1)) < n;) {
                try {
                    fn(i);
                } catch (...) {
                    std::lock_guard<std::mutex> lock(error_mutex);
                    if (!first_error) {
                        first_error = std::current_exception();
                    }
                }
            }
        });
    }
    for (std::thread &t : pool) {
        t.join();
    }
    if (first_error) {
        std::rethrow_exception(first_error);
    }
}

uint64_t splitmix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d4a2c62d4b7f5ull;
    return x ^ (x >> 31);
}

uint64_t head_seed(uint64_t base, size_t layer, size_t b, size_t h) {
    return splitmix64(base ^ splitmix64((uint64_t(layer) << 40) | (uint64_t(b) << 20) | h));
}

// Ordering used by select_salient: valid first, then score, ties toward the
// higher index.
std::vector<uint32_t> top_scoring(const SaliencyVector &scores, size_t count) {
    std::vector<uint32_t> order(scores.size());
    std::iota(order.begin(), order.end(), 0u);
    auto is_valid = [&scores](size_t i) { return scores.valid.empty() || scores.valid[i]; };
    std::sort(order.begin(), order.end(), [&](uint32_t a, uint32_t b) {
        if (is_valid(a) != is_valid(b)) {
            return is_valid(a);
        }
        if (scores.scores[a] != scores.scores[b]) {
            return scores.scores[a] > scores.scores[b];
        }
        return a > b;
    });
    order.resize(std::min(count, order.size()));
    std::sort(order.begin(), order.end());
    return order;
}

struct Materialized {
    Matrix k;
    Matrix v;
    std::vector<uint32_t> positions; // empty = one row per original token, in order
};

struct ModelCounts {
    uint64_t salient = 0;
    uint64_t regular = 0;
    uint64_t quantized = 0; // recent_window
    uint64_t full_precision = 0;
    uint64_t kept = 0; // evict
    int k_high = 16;
    int k_low = 16;
};

// One policy's per-(sequence, head) cache behavior.
class HeadModel {
  public:
    virtual ~HeadModel() = default;
    virtual void prefill(const Matrix &q, const Matrix &k, const Matrix &v,
                         std::span<const uint8_t> classes) = 0;
    virtual void append(std::span<const float> k_row, std::span<const float> v_row) = 0;
    virtual void post_step(const std::vector<float> & /*attn_probs*/) {}
    virtual Materialized materialize() const = 0;
    // Tokens the policy singled out at prefill (salient / kept / full precision).
    // nullopt means the policy treats every token alike.
    virtual std::optional<std::vector<uint32_t>> selected() const { return std::nullopt; }
    virtual ModelCounts counts() const = 0;
};

class Fp16Model : public HeadModel {
  public:
    void prefill(const Matrix &, const Matrix &k, const Matrix &v,
                 std::span<const uint8_t>) override {
        k_ = k;
        v_ = v;
    }
    void append(std::span<const float> k_row, std::span<const float> v_row) override {
        k_.data.insert(k_.data.end(), k_row.begin(), k_row.end());
        v_.data.insert(v_.data.end(), v_row.begin(), v_row.end());
        ++k_.rows;
        ++v_.rows;
    }
    Materialized materialize() const override { return {k_, v_, {}}; }
    ModelCounts counts() const override {
        ModelCounts c;
        c.full_precision = k_.rows;
        return c;
    }

  private:
    Matrix k_, v_;
};

class ZipcacheModel : public HeadModel {
  public:
    ZipcacheModel(uint32_t head_dim, const CacheConfig &cfg, uint64_t seed, bool use_probes)
        : cfg_(cfg), use_probes_(use_probes), cache_(head_dim, cfg, seed) {}

    void prefill(const Matrix &q, const Matrix &k, const Matrix &v,
                 std::span<const uint8_t> classes) override {
        const uint32_t l = uint32_t(k.rows);
        Partition part;
        part.saliency_ratio = cfg_.saliency_ratio;
        bool scored = false;
        if (use_probes_) {
            const ProbeSelection probes = select_probes(cfg_.probe, l, classes);
            if (!probes.indices.empty()) {
                const AttnMatrix a = probe_attention(q, probes.indices, k, /*causal=*/true);
                const SaliencyVector sv = normalized_scores(a);
                if (std::any_of(sv.valid.begin(), sv.valid.end(), [](bool b) { return b; })) {
                    part = select_salient(sv, cfg_.saliency_ratio);
                    scored = true;
                }
            }
        } else {
            // Uniform policy: every token in the salient partition at k_high.
            part.salient_idx.resize(l);
            std::iota(part.salient_idx.begin(), part.salient_idx.end(), 0u);
            scored = true;
        }
        if (!scored) {
            part.regular_idx.resize(l);
            std::iota(part.regular_idx.begin(), part.regular_idx.end(), 0u);
        }
        cache_.compress_prefill(k, v, part);
        selected_ = part.salient_idx;
    }

    void append(std::span<const float> k_row, std::span<const float> v_row) override {
        cache_.append_decode(k_row, v_row);
    }

    void post_step(const std::vector<float> &attn_probs) override {
        if (use_probes_) {
            cache_.record_probe_row(attn_probs, cache_.window_count());
        }
        cache_.maybe_recompress();
    }

    Materialized materialize() const override {
        auto [k, v] = cache_.materialize();
        return {std::move(k), std::move(v), {}};
    }

    std::optional<std::vector<uint32_t>> selected() const override {
        if (!use_probes_) {
            return std::nullopt;
        }
        return selected_;
    }

    ModelCounts counts() const override {
        ModelCounts c;
        c.salient = cache_.salient_tokens();
        c.regular = cache_.regular_tokens();
        c.full_precision = cache_.fp_buffer_tokens();
        c.k_high = cfg_.k_high;
        c.k_low = cfg_.k_low;
        return c;
    }

  private:
    CacheConfig cfg_;
    bool use_probes_;
    MixedCache cache_;
    std::vector<uint32_t> selected_;
};

// KIVI-like: the most recent `window` tokens stay full precision, older ones are
// quantized (channelwise K, channel-separable tokenwise V) in window-sized chunks.
class RecentWindowModel : public HeadModel {
  public:
    RecentWindowModel(uint32_t head_dim, uint32_t window, int k_low)
        : dim_(head_dim), window_(std::max(1u, window)), k_(k_low) {}

    void prefill(const Matrix &, const Matrix &k, const Matrix &v,
                 std::span<const uint8_t>) override {
        const size_t l = k.rows;
        const size_t keep = std::min<size_t>(window_, l);
        const size_t old = l - keep;
        if (old > 0) {
            Matrix old_k(old, dim_), old_v(old, dim_);
            std::copy(k.data.begin(), k.data.begin() + old * dim_, old_k.data.begin());
            std::copy(v.data.begin(), v.data.begin() + old * dim_, old_v.data.begin());
            quantize_chunk(old_k, old_v);
        }
        fp_k_.assign(k.data.begin() + old * dim_, k.data.end());
        fp_v_.assign(v.data.begin() + old * dim_, v.data.end());
        fp_rows_ = uint32_t(keep);
        for (size_t i = old; i < l; ++i) {
            selected_.push_back(uint32_t(i));
        }
    }

    void append(std::span<const float> k_row, std::span<const float> v_row) override {
        fp_k_.insert(fp_k_.end(), k_row.begin(), k_row.end());
        fp_v_.insert(fp_v_.end(), v_row.begin(), v_row.end());
        ++fp_rows_;
        if (fp_rows_ == 2 * window_) {
            Matrix old_k(window_, dim_), old_v(window_, dim_);
            std::copy(fp_k_.begin(), fp_k_.begin() + size_t(window_) * dim_, old_k.data.begin());
            std::copy(fp_v_.begin(), fp_v_.begin() + size_t(window_) * dim_, old_v.data.begin());
            quantize_chunk(old_k, old_v);
            fp_k_.erase(fp_k_.begin(), fp_k_.begin() + size_t(window_) * dim_);
            fp_v_.erase(fp_v_.begin(), fp_v_.begin() + size_t(window_) * dim_);
            fp_rows_ -= window_;
        }
    }

    Materialized materialize() const override {
        Materialized m;
        m.k = Matrix(quant_rows_ + fp_rows_, dim_);
        m.v = Matrix(quant_rows_ + fp_rows_, dim_);
        size_t at = 0;
        for (size_t i = 0; i < quant_k_.size(); ++i) {
            const Matrix dk = dequantize_block(quant_k_[i]);
            const Matrix dv = dequantize_block(quant_v_[i]);
            std::copy(dk.data.begin(), dk.data.end(), m.k.row(at));
            std::copy(dv.data.begin(), dv.data.end(), m.v.row(at));
            at += dk.rows;
        }
        std::copy(fp_k_.begin(), fp_k_.end(), m.k.row(at));
        std::copy(fp_v_.begin(), fp_v_.end(), m.v.row(at));
        return m;
    }

    std::optional<std::vector<uint32_t>> selected() const override { return selected_; }

    ModelCounts counts() const override {
        ModelCounts c;
        c.quantized = quant_rows_;
        c.full_precision = fp_rows_;
        c.k_low = k_;
        return c;
    }

  private:
    void quantize_chunk(const Matrix &k, const Matrix &v) {
        quant_k_.push_back(quantize_matrix(k, Granularity::channelwise, k_));
        quant_v_.push_back(cst_quantize(v, k_));
        quant_rows_ += uint32_t(k.rows);
    }

    uint32_t dim_;
    uint32_t window_;
    int k_;
    std::vector<QuantizedBlock> quant_k_, quant_v_;
    uint32_t quant_rows_ = 0;
    std::vector<float> fp_k_, fp_v_;
    uint32_t fp_rows_ = 0;
    std::vector<uint32_t> selected_;
};

// H2O-like eviction: keep round(keep*l) heavy hitters by accumulated attention
// score plus the ceil(recent*l) most recent tokens, drop the rest for good.
class EvictModel : public HeadModel {
  public:
    EvictModel(uint32_t head_dim, double keep, double recent)
        : dim_(head_dim), keep_(keep), recent_(recent) {}

    void prefill(const Matrix &q, const Matrix &k, const Matrix &v,
                 std::span<const uint8_t>) override {
        const size_t l = k.rows;
        const size_t n_recent = std::min<size_t>(l, size_t(std::ceil(recent_ * double(l))));
        size_t n_heavy = size_t(std::llround(keep_ * double(l)));
        n_heavy = std::min(n_heavy, l - n_recent);

        std::vector<bool> kept(l, false);
        for (size_t i = l - n_recent; i < l; ++i) {
            kept[i] = true;
        }
        if (n_heavy > 0) {
            const AttentionResult full = attention_full(q, k, v, /*causal=*/true);
            const SaliencyVector acc = accumulated_scores(full.weights);
            SaliencyVector pool = acc;
            pool.valid.assign(l, true);
            for (size_t i = l - n_recent; i < l; ++i) {
                pool.valid[i] = false; // already kept via the recent window
            }
            for (uint32_t i : top_scoring(pool, n_heavy)) {
                kept[i] = true;
            }
        }

        for (size_t i = 0; i < l; ++i) {
            if (kept[i]) {
                positions_.push_back(uint32_t(i));
            }
        }
        if (positions_.empty()) {
            throw std::invalid_argument("evict: configuration removes every token");
        }
        k_ = Matrix(positions_.size(), dim_);
        v_ = Matrix(positions_.size(), dim_);
        for (size_t i = 0; i < positions_.size(); ++i) {
            std::copy(k.row(positions_[i]), k.row(positions_[i]) + dim_, k_.row(i));
            std::copy(v.row(positions_[i]), v.row(positions_[i]) + dim_, v_.row(i));
        }
        selected_ = positions_;
        prefill_len_ = uint32_t(l);
    }

    void append(std::span<const float> k_row, std::span<const float> v_row) override {
        k_.data.insert(k_.data.end(), k_row.begin(), k_row.end());
        v_.data.insert(v_.data.end(), v_row.begin(), v_row.end());
        ++k_.rows;
        ++v_.rows;
        positions_.push_back(prefill_len_ + decode_steps_);
        ++decode_steps_;
    }

    Materialized materialize() const override { return {k_, v_, positions_}; }

    std::optional<std::vector<uint32_t>> selected() const override { return selected_; }

    ModelCounts counts() const override {
        ModelCounts c;
        c.kept = positions_.size();
        c.full_precision = positions_.size();
        return c;
    }

  private:
    uint32_t dim_;
    double keep_;
    double recent_;
    Matrix k_, v_;
    std::vector<uint32_t> positions_;
    std::vector<uint32_t> selected_;
    uint32_t prefill_len_ = 0;
    uint32_t decode_steps_ = 0;
};

std::unique_ptr<HeadModel> make_model(const PolicyConfig &cfg, uint32_t head_dim,
                                      size_t layer, size_t b, size_t h) {
    switch (cfg.kind) {
    case PolicyKind::fp16:
        return std::make_unique<Fp16Model>();
    case PolicyKind::uniform: {
        if (cfg.k == 16) {
            return std::make_unique<Fp16Model>(); // identity quantizer path
        }
        CacheConfig cache = cfg.cache;
        cache.k_high = cfg.k;
        cache.k_low = cfg.k;
        cache.saliency_ratio = 1.0;
        return std::make_unique<ZipcacheModel>(head_dim, cache,
                                               head_seed(cfg.seed, layer, b, h),
                                               /*use_probes=*/false);
    }
    case PolicyKind::recent_window:
        return std::make_unique<RecentWindowModel>(head_dim, cfg.window, cfg.k);
    case PolicyKind::evict:
        return std::make_unique<EvictModel>(head_dim, cfg.evict_keep, cfg.evict_recent);
    case PolicyKind::zipcache:
        return std::make_unique<ZipcacheModel>(head_dim, cfg.cache,
                                               head_seed(cfg.seed, layer, b, h),
                                               /*use_probes=*/true);
    }
    throw std::invalid_argument("unknown policy kind");
}

// Drives one head through prefill + decode, returning one output row per token.
Matrix run_head(HeadModel &model, const Matrix &q, const Matrix &k, const Matrix &v,
                uint32_t prefill, std::span<const uint8_t> classes) {
    const size_t l = q.rows;
    Matrix out(l, v.cols);

    Matrix qp(prefill, q.cols), kp(prefill, k.cols), vp(prefill, v.cols);
    std::copy(q.data.begin(), q.data.begin() + size_t(prefill) * q.cols, qp.data.begin());
    std::copy(k.data.begin(), k.data.begin() + size_t(prefill) * k.cols, kp.data.begin());
    std::copy(v.data.begin(), v.data.begin() + size_t(prefill) * v.cols, vp.data.begin());

    model.prefill(qp, kp, vp, classes);
    {
        const Materialized mat = model.materialize();
        std::vector<uint32_t> qpos(prefill);
        std::iota(qpos.begin(), qpos.end(), 0u);
        const Matrix o = mat.positions.empty()
                             ? attention_tiled(qp, mat.k, mat.v, kHarnessTiles, true)
                             : attention_tiled(qp, mat.k, mat.v, kHarnessTiles, true, qpos,
                                               mat.positions);
        std::copy(o.data.begin(), o.data.end(), out.data.begin());
    }

    for (size_t p = prefill; p < l; ++p) {
        model.append(k.row_span(p), v.row_span(p));
        const Materialized mat = model.materialize();
        const DecodeResult dec = attention_decode(q.row_span(p), mat.k, mat.v);
        model.post_step(dec.probs);
        std::copy(dec.output.begin(), dec.output.end(), out.row(p));
    }
    return out;
}

CompressionReport accounting_for(const PolicyConfig &cfg, const ModelCounts &counts,
                                 uint64_t b, uint64_t hd, uint64_t l) {
    CompressionReport rep;
    const uint64_t baseline = 2 * b * hd * l * 16;
    switch (cfg.kind) {
    case PolicyKind::fp16:
        rep.data_bits = baseline;
        rep.ratio = 1.0;
        return rep;
    case PolicyKind::uniform: {
        if (cfg.k == 16) {
            rep.data_bits = baseline;
            rep.ratio = 1.0;
            return rep;
        }
        const uint64_t l_c = counts.salient + counts.regular;
        rep.data_bits = 2 * b * hd * l_c * uint64_t(cfg.k);
        rep.param_bits = l_c > 0 ? (3 * hd + 2 * b * l_c) * 16 : 0;
        rep.fp_buffer_bits = 2 * b * hd * counts.full_precision * 16;
        break;
    }
    case PolicyKind::recent_window:
        rep.data_bits = 2 * b * hd * counts.quantized * uint64_t(cfg.k);
        rep.param_bits = counts.quantized > 0 ? (3 * hd + 2 * b * counts.quantized) * 16 : 0;
        rep.fp_buffer_bits = 2 * b * hd * counts.full_precision * 16;
        break;
    case PolicyKind::evict:
        rep.data_bits = 2 * b * hd * counts.kept * 16;
        break;
    case PolicyKind::zipcache:
        return mixed_compression_report(b, hd, counts.salient, counts.regular,
                                        counts.full_precision, counts.k_high, counts.k_low);
    }
    rep.ratio = double(baseline) / double(rep.total_bits());
    return rep;
}

} // namespace

const char *policy_kind_name(PolicyKind kind) {
    switch (kind) {
    case PolicyKind::fp16: return "fp16";
    case PolicyKind::uniform: return "uniform";
    case PolicyKind::recent_window: return "recent-window";
    case PolicyKind::evict: return "evict";
    case PolicyKind::zipcache: return "zipcache";
    }
    return "?";
}

std::string PolicyConfig::label() const {
    char buf[128];
    switch (kind) {
    case PolicyKind::fp16:
        return "fp16";
    case PolicyKind::uniform:
        std::snprintf(buf, sizeof(buf), "uniform%d", k);
        return buf;
    case PolicyKind::recent_window:
        std::snprintf(buf, sizeof(buf), "recent-window%u/%d", window, k);
        return buf;
    case PolicyKind::evict:
        std::snprintf(buf, sizeof(buf), "evict%.2f+%.2f", evict_keep, evict_recent);
        return buf;
    case PolicyKind::zipcache:
        std::snprintf(buf, sizeof(buf), "zipcache%d/%d@%.2f", cache.k_high, cache.k_low,
                      cache.saliency_ratio);
        return buf;
    }
    return "?";
}

Reference compute_reference(const Trace &trace) {
    trace.validate();
    const Dims4 dm = trace.dims();
    Reference ref;
    ref.layer_outputs.resize(trace.layers.size());
    for (Matrix &out : ref.layer_outputs) {
        out = Matrix(size_t(dm.b) * dm.h * dm.l, dm.d);
    }
    const size_t heads_per_layer = size_t(dm.b) * dm.h;
    parallel_for(trace.layers.size() * heads_per_layer, [&](size_t item) {
        const size_t layer = item / heads_per_layer;
        const uint32_t b = uint32_t(item % heads_per_layer / dm.h);
        const uint32_t h = uint32_t(item % dm.h);
        const LayerKV &kv = trace.layers[layer];
        Fp16Model model;
        const Matrix head_out =
            run_head(model, kv.q.head_matrix(b, h), kv.k.head_matrix(b, h),
                     kv.v.head_matrix(b, h), trace.prefill_len, trace.classes_for_batch(b));
        std::copy(head_out.data.begin(), head_out.data.end(),
                  ref.layer_outputs[layer].row((size_t(b) * dm.h + h) * dm.l));
    });
    return ref;
}

PolicyReport run_policy(const Trace &trace, const PolicyConfig &cfg) {
    return run_policy(trace, cfg, compute_reference(trace));
}

PolicyReport run_policy(const Trace &trace, const PolicyConfig &cfg, const Reference &ref) {
    const auto t0 = std::chrono::steady_clock::now();
    trace.validate();
    if (trace.prefill_len < 1) {
        throw std::invalid_argument("run_policy: trace needs at least one prefill token");
    }
    const Dims4 dm = trace.dims();

    PolicyReport report;
    report.policy = cfg.label();
    report.layer_rel_err.assign(trace.layers.size(), 0.0);

    struct HeadResult {
        double err2 = 0.0;
        double ref2 = 0.0;
        double overlap = 1.0;
        ModelCounts counts;
    };
    const size_t heads_per_layer = size_t(dm.b) * dm.h;
    std::vector<HeadResult> results(trace.layers.size() * heads_per_layer);

    parallel_for(results.size(), [&](size_t item) {
        const size_t layer = item / heads_per_layer;
        const uint32_t b = uint32_t(item % heads_per_layer / dm.h);
        const uint32_t h = uint32_t(item % dm.h);
        const LayerKV &kv = trace.layers[layer];
        const Matrix q = kv.q.head_matrix(b, h);
        const Matrix k = kv.k.head_matrix(b, h);
        const Matrix v = kv.v.head_matrix(b, h);

        auto model = make_model(cfg, dm.d, layer, b, h);
        const Matrix out = run_head(*model, q, k, v, trace.prefill_len,
                                    trace.classes_for_batch(b));

        HeadResult &res = results[item];
        const Matrix &ref_out = ref.layer_outputs[layer];
        const size_t base = (size_t(b) * dm.h + h) * dm.l;
        for (size_t t = 0; t < dm.l; ++t) {
            for (size_t c = 0; c < dm.d; ++c) {
                const double r = ref_out.at(base + t, c);
                const double delta = double(out.at(t, c)) - r;
                res.err2 += delta * delta;
                res.ref2 += r * r;
            }
        }

        const auto selected = model->selected();
        if (selected.has_value()) {
            if (selected->empty()) {
                res.overlap = 0.0;
            } else {
                Matrix qp(trace.prefill_len, dm.d), kp(trace.prefill_len, dm.d);
                std::copy(q.data.begin(), q.data.begin() + size_t(trace.prefill_len) * dm.d,
                          qp.data.begin());
                std::copy(k.data.begin(), k.data.begin() + size_t(trace.prefill_len) * dm.d,
                          kp.data.begin());
                const AttentionResult full = attention_full(qp, kp, kp, true);
                const SaliencyVector exact = normalized_scores(full.weights);
                const std::vector<uint32_t> top = top_scoring(exact, selected->size());
                std::vector<uint32_t> inter;
                std::set_intersection(selected->begin(), selected->end(), top.begin(), top.end(),
                                      std::back_inserter(inter));
                res.overlap = double(inter.size()) / double(selected->size());
            }
        }
        res.counts = model->counts();
    });

    double overlap_sum = 0.0;
    for (size_t layer = 0; layer < trace.layers.size(); ++layer) {
        double err2 = 0.0;
        double ref2 = 0.0;
        for (size_t i = 0; i < heads_per_layer; ++i) {
            const HeadResult &res = results[layer * heads_per_layer + i];
            err2 += res.err2;
            ref2 += res.ref2;
            overlap_sum += res.overlap;
        }
        report.layer_rel_err[layer] = ref2 > 0.0 ? std::sqrt(err2 / ref2) : std::sqrt(err2);
    }
    const size_t overlap_n = results.size();
    const ModelCounts counts = results.front().counts;

    report.mean_rel_err =
        std::accumulate(report.layer_rel_err.begin(), report.layer_rel_err.end(), 0.0) /
        double(report.layer_rel_err.size());
    report.max_rel_err =
        *std::max_element(report.layer_rel_err.begin(), report.layer_rel_err.end());
    report.rank_overlap = overlap_n > 0 ? overlap_sum / double(overlap_n) : 1.0;
    report.compression = accounting_for(cfg, counts, dm.b, uint64_t(dm.h) * dm.d, dm.l);
    report.runtime_ms =
        std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    return report;
}

std::vector<PolicyReport> run_compare(const Trace &trace,
                                      const std::vector<PolicyConfig> &configs) {
    if (configs.empty()) {
        throw std::invalid_argument("run_compare: need at least one policy");
    }
    const Reference ref = compute_reference(trace);
    std::vector<PolicyReport> reports;
    reports.reserve(configs.size());
    for (const PolicyConfig &cfg : configs) {
        try {
            reports.push_back(run_policy(trace, cfg, ref));
        } catch (const std::exception &e) {
            PolicyReport failed;
            failed.policy = cfg.label();
            failed.error = e.what();
            reports.push_back(std::move(failed));
        }
    }
    return reports;
}

namespace {

double sig6(double v) {
    if (!std::isfinite(v)) {
        return v;
    }
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.6g", v);
    return std::strtod(buf, nullptr);
}

nlohmann::ordered_json report_json(const PolicyReport &r) {
    nlohmann::ordered_json j;
    j["policy"] = r.policy;
    if (!r.ok()) {
        j["error"] = r.error;
        return j;
    }
    nlohmann::ordered_json err;
    nlohmann::ordered_json per_layer = nlohmann::ordered_json::array();
    for (double e : r.layer_rel_err) {
        per_layer.push_back(sig6(e));
    }
    err["per_layer"] = std::move(per_layer);
    err["mean"] = sig6(r.mean_rel_err);
    err["max"] = sig6(r.max_rel_err);
    j["output_rel_err"] = std::move(err);
    j["rank_overlap"] = sig6(r.rank_overlap);
    nlohmann::ordered_json comp;
    comp["data_bits"] = r.compression.data_bits;
    comp["param_bits"] = r.compression.param_bits;
    comp["bitmap_bits"] = r.compression.bitmap_bits;
    comp["fp_buffer_bits"] = r.compression.fp_buffer_bits;
    comp["ratio"] = sig6(r.compression.ratio);
    j["compression"] = std::move(comp);
    j["runtime_ms"] = sig6(r.runtime_ms);
    return j;
}

} // namespace

std::string report_to_json(const PolicyReport &report) { return report_json(report).dump(2); }

std::string reports_to_json(const std::string &trace_path,
                            const std::vector<PolicyReport> &reports) {
    nlohmann::ordered_json j;
    j["trace"] = trace_path;
    nlohmann::ordered_json arr = nlohmann::ordered_json::array();
    for (const PolicyReport &r : reports) {
        arr.push_back(report_json(r));
    }
    j["policies"] = std::move(arr);
    return j.dump(2);
}

} // namespace zipcache
