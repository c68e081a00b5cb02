// Acceptance suite: runs every gate criterion end to end and prints one
// pass/fail line per criterion. Exits nonzero if any criterion fails.
//
// usage: acceptance <path-to-cli-binary>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <functional>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "fixtures.hpp"
#include "oracles.hpp"
#include "zipcache/attention.hpp"
#include "zipcache/cache.hpp"
#include "zipcache/harness.hpp"
#include "zipcache/quant.hpp"
#include "zipcache/saliency.hpp"
#include "zipcache/trace.hpp"

using namespace zipcache;

namespace {

std::string g_cli_path;

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string run_cli(const std::string &args) {
    const std::string cmd = g_cli_path + " " + args + " 2>&1";
    FILE *pipe = popen(cmd.c_str(), "r");
    if (!pipe) {
        return "";
    }
    std::string out;
    char buf[512];
    while (fgets(buf, sizeof(buf), pipe)) {
        out += buf;
    }
    pclose(pipe);
    return out;
}

std::string printed_ratio(const std::string &cli_output) {
    std::istringstream in(cli_output);
    std::string line;
    while (std::getline(in, line)) {
        if (line.rfind("ratio: ", 0) == 0) {
            return line.substr(7);
        }
    }
    return "<missing>";
}

// --- criteria ---------------------------------------------------------------

bool criterion_appendix_ratios(std::string &detail) {
    const auto t0 = std::chrono::steady_clock::now();
    const std::string base = "--b 8 --hd 4096 --l 4096";
    const std::string grp = printed_ratio(run_cli("ratio --scheme groupwise " + base + " --n 32 --k 4"));
    const std::string tok = printed_ratio(run_cli("ratio --scheme tokenwise " + base + " --k 4"));
    const std::string bas = printed_ratio(run_cli("ratio --scheme baseline " + base + " --k 4"));
    const double elapsed = seconds_since(t0);
    detail = "groupwise=" + grp + " tokenwise=" + tok + " baseline=" + bas + " (" +
             std::to_string(elapsed) + "s)";
    return grp == "3.200" && tok == "3.992" && bas == "3.995" && elapsed < 1.0;
}

bool criterion_param_counts(std::string &detail) {
    std::mt19937_64 eng(2001);
    size_t checked = 0;
    for (int trial = 0; trial < 100; ++trial) {
        const uint64_t b = 1 + eng() % 64;
        const uint64_t hd = 1 + eng() % 8192;
        const uint64_t l = 1 + eng() % 8192;
        uint64_t n = 1 + eng() % 128;
        while ((b * hd * l) % n != 0) {
            n = 1 + eng() % 128;
        }
        if (param_budget(Scheme::groupwise, b, hd, l, n).count !=
                oracle::params_groupwise(b, hd, l, n) ||
            param_budget(Scheme::tokenwise, b, hd, l, 0).count != oracle::params_tokenwise(b, l) ||
            param_budget(Scheme::channelwise_tokenwise, b, hd, l, 0).count !=
                oracle::params_channelwise_tokenwise(b, hd, l) ||
            param_budget(Scheme::baseline, b, hd, l, 0).count !=
                oracle::params_baseline(b, hd, l)) {
            detail = "mismatch at b=" + std::to_string(b) + " hd=" + std::to_string(hd) +
                     " l=" + std::to_string(l) + " n=" + std::to_string(n);
            return false;
        }
        ++checked;
    }
    detail = std::to_string(checked) + " random dimension tuples, all four closed forms exact";
    return true;
}

bool criterion_mixed_ratio(std::string &detail) {
    const std::string out =
        run_cli("ratio --scheme zipcache --b 8 --hd 4096 --l 840 --k-high 4 --k-low 2 "
                "--saliency-ratio 0.6");
    const double ratio = std::strtod(printed_ratio(out).c_str(), nullptr);
    detail = "zipcache 4/2 @ 0.60, l=840 -> " + printed_ratio(out);
    return ratio >= 4.88 && ratio <= 5.00;
}

bool criterion_quant_bounds(std::string &detail) {
    std::mt19937_64 eng(4242);
    std::normal_distribution<double> dist(0.0, 2.5);
    size_t elements = 0;
    for (int k : {2, 4, 8}) {
        for (int trial = 0; trial < 10'000; ++trial) {
            std::vector<float> x(2 + eng() % 31);
            for (float &f : x) {
                f = float(dist(eng) * (1.0 + double(eng() % 5)));
            }
            auto [codes, p] = quantize_uniform(x, k);
            const std::vector<float> back = dequantize(codes, p);
            // 1e-4 slack for the float storage of the scale
            for (size_t i = 0; i < x.size(); ++i) {
                const double err = std::fabs(double(x[i]) - double(back[i]));
                if (err > double(p.scale) * (1.0 + 1e-4)) {
                    detail = "error above s at k=" + std::to_string(k);
                    return false;
                }
                const long long raw = std::llround(double(x[i]) * p.inv_scale) + p.zero_point;
                if (raw >= 0 && raw <= (1ll << k) - 1 &&
                    err > double(p.scale) / 2.0 * (1.0 + 1e-4)) {
                    detail = "unclipped error above s/2 at k=" + std::to_string(k);
                    return false;
                }
                ++elements;
            }
        }
    }
    detail = std::to_string(elements) + " elements within s (s/2 when unclipped), k in {2,4,8}";
    return true;
}

bool criterion_cst_superiority(std::string &detail) {
    int wins = 0;
    for (int seed = 1; seed <= 100; ++seed) {
        const Trace t = synth_trace(uint64_t(seed), {1, 2, 24, 16}, SynthProfile::outlier_channel);
        const Matrix v = t.layers[0].v.batch_matrix(0);
        const double mse_cst = oracle::mse(v, dequantize_block(cst_quantize(v, 4)));
        const double mse_tok =
            oracle::mse(v, dequantize_block(quantize_matrix(v, Granularity::tokenwise, 4)));
        wins += mse_cst < mse_tok ? 1 : 0;
    }
    detail = "CST 4-bit beats tokenwise 4-bit on " + std::to_string(wins) + "/100 outlier matrices";
    return wins >= 99;
}

bool criterion_tiled_equivalence(std::string &detail) {
    const auto t0 = std::chrono::steady_clock::now();
    std::mt19937_64 eng(606);
    std::normal_distribution<float> dist(0.0f, 1.0f);
    double worst = 0.0;
    for (const size_t l : {1ul, 17ul, 64ul, 209ul, 512ul}) {
        const size_t d = 64;
        Matrix q(l, d), k(l, d), v(l, d);
        for (Matrix *m : {&q, &k, &v}) {
            for (float &f : m->data) {
                f = dist(eng);
            }
        }
        const Matrix full = attention_full(q, k, v, true).output;
        for (const size_t br : {8ul, 16ul, 64ul, l}) {
            for (const size_t bc : {8ul, 16ul, 64ul, l}) {
                const Matrix tiled = attention_tiled(q, k, v, {br, bc}, true);
                for (size_t i = 0; i < full.data.size(); ++i) {
                    worst = std::max(worst, std::fabs(double(tiled.data[i]) - full.data[i]));
                }
            }
        }
    }
    const double elapsed = seconds_since(t0);
    std::ostringstream os;
    os << "max |O_tiled - O_full| = " << worst << " over l<=512, blocks {8,16,64,l} ("
       << elapsed << "s)";
    detail = os.str();
    return worst <= 1e-5 && elapsed < 30.0;
}

bool criterion_probe_identity(std::string &detail) {
    double worst = 0.0;
    for (uint64_t seed = 1; seed <= 50; ++seed) {
        const Trace t = synth_trace(seed, {1, 1, 40, 16}, SynthProfile::uniform);
        const Matrix q = t.layers[0].q.head_matrix(0, 0);
        const Matrix k = t.layers[0].k.head_matrix(0, 0);
        std::vector<uint32_t> all(40);
        std::iota(all.begin(), all.end(), 0u);
        const SaliencyVector via_probe = normalized_scores(probe_attention(q, all, k, true));
        const SaliencyVector via_full = normalized_scores(attention_full(q, k, k, true).weights);
        for (size_t i = 0; i < 40; ++i) {
            worst = std::max(worst, std::fabs(double(via_probe.scores[i]) - via_full.scores[i]));
        }
    }
    std::ostringstream os;
    os << "max score difference = " << worst << " over 50 seeded traces";
    detail = os.str();
    return worst <= 1e-12;
}

bool criterion_score_bias(std::string &detail) {
    std::mt19937_64 eng(808);
    std::uniform_real_distribution<double> dist(0.01, 1.0);
    for (int trial = 0; trial < 1000; ++trial) {
        const uint32_t l = 2 + uint32_t(eng() % 31);
        AttnMatrix a;
        a.cols = l;
        for (uint32_t i = 0; i < l; ++i) {
            std::vector<float> probs(l, 0.0f);
            std::vector<double> raw(i + 1);
            double sum = 0.0;
            for (uint32_t j = 0; j <= i; ++j) {
                raw[j] = dist(eng);
                sum += raw[j];
            }
            for (uint32_t j = 0; j <= i; ++j) {
                probs[j] = float(raw[j] / sum);
            }
            a.rows.push_back(AttnRow{i, std::move(probs)});
        }
        const SaliencyVector acc = accumulated_scores(a);
        if (!(acc.scores[0] >= 1.0f && acc.scores[l - 1] <= 1.0f)) {
            detail = "p_0 >= 1 >= p_{l-1} violated at trial " + std::to_string(trial);
            return false;
        }
    }

    // the two-token rank flip, exactly as stated
    AttnMatrix flip;
    flip.cols = 2;
    flip.rows.push_back(AttnRow{0, {1.0f, 0.0f}});
    flip.rows.push_back(AttnRow{1, {0.2f, 0.8f}});
    const SaliencyVector acc = accumulated_scores(flip);
    const SaliencyVector norm = normalized_scores(flip);
    const bool flip_holds = select_salient(acc, 0.5).salient_idx == std::vector<uint32_t>{0} &&
                            select_salient(norm, 0.5).salient_idx == std::vector<uint32_t>{1};
    detail = "1000 random causal matrices keep p_0 >= 1 >= p_last; two-token flip holds";
    return flip_holds;
}

bool criterion_probe_overlap(std::string &detail) {
    double overlap_sum = 0.0;
    size_t n = 0;
    for (uint64_t seed = 1; seed <= 20; ++seed) {
        const Dims4 dm{1, 2, 256, 64};
        const Trace t = synth_trace(seed, dm, SynthProfile::peaked);
        ProbeConfig probes;
        probes.strategy = ProbeStrategy::hybrid;
        probes.recent_fraction = 0.05;
        probes.random_fraction = 0.05;
        probes.seed = seed;
        const ProbeSelection sel = select_probes(probes, dm.l, t.classes_for_batch(0));
        for (uint32_t h = 0; h < dm.h; ++h) {
            const Matrix q = t.layers[0].q.head_matrix(0, h);
            const Matrix k = t.layers[0].k.head_matrix(0, h);
            const SaliencyVector approx =
                normalized_scores(probe_attention(q, sel.indices, k, true));
            const SaliencyVector exact =
                normalized_scores(attention_full(q, k, k, true).weights);
            const Partition top_approx = select_salient(approx, 0.4);
            const Partition top_exact = select_salient(exact, 0.4);
            std::vector<uint32_t> inter;
            std::set_intersection(top_approx.salient_idx.begin(), top_approx.salient_idx.end(),
                                  top_exact.salient_idx.begin(), top_exact.salient_idx.end(),
                                  std::back_inserter(inter));
            overlap_sum += double(inter.size()) / double(top_exact.salient_idx.size());
            ++n;
        }
    }
    const double mean = overlap_sum / double(n);
    std::ostringstream os;
    os << "mean top-40% overlap = " << mean << " (threshold " << kProbeOverlapThreshold << ")";
    detail = os.str();
    return mean >= kProbeOverlapThreshold;
}

bool criterion_streaming_discipline(std::string &detail) {
    std::mt19937_64 eng(909);
    std::normal_distribution<float> dist(0.0f, 1.0f);
    CacheConfig cfg;
    cfg.recompress_interval = 100;
    cfg.saliency_ratio = 0.4;
    MixedCache cache(8, cfg, 77);

    size_t ingested = 0;
    for (int step = 1; step <= 1000; ++step) {
        std::vector<float> row(8);
        for (float &f : row) {
            f = dist(eng);
        }
        cache.append_decode(row, row);
        ++ingested;
        // random interleaving: probe recording and extra recompress calls
        if (eng() % 3 != 0) {
            cache.record_probe_row(std::vector<float>(cache.total_tokens(), 0.01f),
                                   cache.window_count());
        }
        cache.maybe_recompress();
        if (eng() % 5 == 0) {
            cache.maybe_recompress(); // idempotent no-op
        }
        if (cache.fp_buffer_tokens() > 100 ||
            cache.salient_tokens() + cache.regular_tokens() + cache.fp_buffer_tokens() !=
                ingested) {
            detail = "invariant violated at step " + std::to_string(step);
            return false;
        }
        if (step % 100 == 0 && cache.fp_buffer_tokens() != 0) {
            detail = "buffer not empty right after step " + std::to_string(step);
            return false;
        }
    }
    detail = "1000 decode steps: buffer <= 100 throughout, empty after each 100th, "
             "tokens conserved";
    return true;
}

bool criterion_fidelity_ordering(std::string &detail) {
    const auto t0 = std::chrono::steady_clock::now();
    std::ostringstream os;
    bool ok = true;
    for (uint64_t seed : {21ull, 22ull}) {
        const SynthProfile profile = seed % 2 == 0 ? SynthProfile::uniform : SynthProfile::peaked;
        const Trace trace = synth_trace(seed, {1, 2, 160, 32}, profile, 1, 96);
        const Reference ref = compute_reference(trace);

        PolicyConfig fp16;
        fp16.kind = PolicyKind::fp16;
        auto uniform_cfg = [&](int k) {
            PolicyConfig cfg;
            cfg.kind = PolicyKind::uniform;
            cfg.k = k;
            cfg.seed = seed;
            cfg.cache.recompress_interval = 100;
            return cfg;
        };
        PolicyConfig zc;
        zc.kind = PolicyKind::zipcache;
        zc.seed = seed;
        zc.cache.probe.seed = seed;
        zc.cache.k_high = 4;
        zc.cache.k_low = 2;
        zc.cache.saliency_ratio = 0.6;
        zc.cache.recompress_interval = 100;

        const double e16 = run_policy(trace, fp16, ref).mean_rel_err;
        const double e8 = run_policy(trace, uniform_cfg(8), ref).mean_rel_err;
        const double e4 = run_policy(trace, uniform_cfg(4), ref).mean_rel_err;
        const double e2 = run_policy(trace, uniform_cfg(2), ref).mean_rel_err;
        const double ez = run_policy(trace, zc, ref).mean_rel_err;

        os << "seed " << seed << ": fp16=" << e16 << " u8=" << e8 << " u4=" << e4 << " u2=" << e2
           << " zc=" << ez << "; ";
        ok = ok && e16 == 0.0 && e8 > 0.0 && e8 <= e4 && e4 <= e2 && ez <= e2;
    }
    const double elapsed = seconds_since(t0);
    os << "(" << elapsed << "s)";
    detail = os.str();
    return ok && elapsed < 120.0;
}

} // namespace

int main(int argc, char **argv) {
    if (argc < 2) {
        std::fprintf(stderr, "usage: acceptance <path-to-cli-binary>\n");
        return 2;
    }
    g_cli_path = argv[1];

    struct Criterion {
        const char *name;
        std::function<bool(std::string &)> run;
    };
    const std::vector<Criterion> criteria = {
        {"overhead accounting golden ratios (3.200 / 3.992 / 3.995)", criterion_appendix_ratios},
        {"parameter-count closed forms, 100 random dimension tuples", criterion_param_counts},
        {"mixed-precision 4/2 @ 60%, l=840 ratio in [4.88, 5.00]", criterion_mixed_ratio},
        {"quantization error <= s (s/2 unclipped), 10k vectors per bit width",
         criterion_quant_bounds},
        {"CST reconstruction beats tokenwise on >= 99/100 outlier matrices",
         criterion_cst_superiority},
        {"tiled attention equals full attention within 1e-5", criterion_tiled_equivalence},
        {"probe scores with all rows equal exact scores within 1e-12", criterion_probe_identity},
        {"accumulated-score bias invariant and two-token rank flip", criterion_score_bias},
        {"probe-approximated top-40% overlap meets the pinned threshold",
         criterion_probe_overlap},
        {"streaming discipline over 1000 decode steps", criterion_streaming_discipline},
        {"fidelity ordering fp16 < u8 <= u4 <= u2 and zipcache <= u2",
         criterion_fidelity_ordering},
    };

    int failures = 0;
    for (size_t i = 0; i < criteria.size(); ++i) {
        std::string detail;
        bool ok = false;
        try {
            ok = criteria[i].run(detail);
        } catch (const std::exception &e) {
            detail = std::string("exception: ") + e.what();
        }
        std::printf("[%2zu] %s  %s\n     %s\n", i + 1, ok ? "PASS" : "FAIL", criteria[i].name,
                    detail.c_str());
        failures += ok ? 0 : 1;
    }
    std::printf("acceptance: %zu/%zu criteria passed\n", criteria.size() - failures,
                criteria.size());
    return failures == 0 ? 0 : 1;
}
