#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"

#include "zipcache/harness.hpp"

namespace zipcache {

namespace {

std::string trim(const std::string &s) {
    const size_t a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) {
        return "";
    }
    const size_t b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
}

std::string unquote(const std::string &s) {
    if (s.size() >= 2 && ((s.front() == '"' && s.back() == '"') ||
                          (s.front() == '\'' && s.back() == '\''))) {
        return s.substr(1, s.size() - 2);
    }
    return s;
}

PolicyKind parse_policy_kind(const std::string &name) {
    if (name == "fp16") return PolicyKind::fp16;
    if (name == "uniform") return PolicyKind::uniform;
    if (name == "recent-window" || name == "recent_window") return PolicyKind::recent_window;
    if (name == "evict") return PolicyKind::evict;
    if (name == "zipcache") return PolicyKind::zipcache;
    throw std::invalid_argument("unknown policy: " + name);
}

void apply_config_key(PolicyConfig &cfg, const std::string &key, const std::string &value,
                      bool &probe_seed_set) {
    auto as_u64 = [&value, &key]() {
        size_t pos = 0;
        const uint64_t v = std::stoull(value, &pos);
        if (pos != value.size()) {
            throw std::invalid_argument("bad integer for " + key + ": " + value);
        }
        return v;
    };
    auto as_f64 = [&value, &key]() {
        size_t pos = 0;
        const double v = std::stod(value, &pos);
        if (pos != value.size()) {
            throw std::invalid_argument("bad number for " + key + ": " + value);
        }
        return v;
    };

    if (key == "policy") {
        cfg.kind = parse_policy_kind(unquote(value));
    } else if (key == "k") {
        cfg.k = int(as_u64());
    } else if (key == "window") {
        cfg.window = uint32_t(as_u64());
    } else if (key == "keep") {
        cfg.evict_keep = as_f64();
    } else if (key == "recent") {
        cfg.evict_recent = as_f64();
    } else if (key == "k_high") {
        cfg.cache.k_high = int(as_u64());
    } else if (key == "k_low") {
        cfg.cache.k_low = int(as_u64());
    } else if (key == "saliency_ratio") {
        cfg.cache.saliency_ratio = as_f64();
    } else if (key == "recompress_interval") {
        cfg.cache.recompress_interval = uint32_t(as_u64());
    } else if (key == "probe_strategy") {
        cfg.cache.probe.strategy = parse_probe_strategy(unquote(value));
    } else if (key == "recent_fraction") {
        cfg.cache.probe.recent_fraction = as_f64();
    } else if (key == "random_fraction") {
        cfg.cache.probe.random_fraction = as_f64();
    } else if (key == "probe_seed") {
        cfg.cache.probe.seed = as_u64();
        probe_seed_set = true;
    } else if (key == "seed") {
        cfg.seed = as_u64();
    } else {
        throw std::invalid_argument("unknown config key: " + key);
    }
}

} // namespace

std::vector<PolicyConfig> load_policy_configs(const std::string &path) {
    std::ifstream in(path);
    if (!in) {
        throw std::runtime_error("cannot open config file: " + path);
    }
    std::vector<PolicyConfig> configs;
    std::vector<bool> probe_seed_set;
    std::string line;
    size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        std::string s = trim(line);
        if (s.empty() || s[0] == '#') {
            continue;
        }
        if (s == "[[policy]]") {
            configs.emplace_back();
            probe_seed_set.push_back(false);
            continue;
        }
        const size_t eq = s.find('=');
        if (eq == std::string::npos) {
            throw std::runtime_error(path + ":" + std::to_string(lineno) +
                                     ": expected 'key = value' or [[policy]]");
        }
        if (configs.empty()) {
            throw std::runtime_error(path + ":" + std::to_string(lineno) +
                                     ": key outside a [[policy]] section");
        }
        const std::string key = trim(s.substr(0, eq));
        const std::string value = trim(s.substr(eq + 1));
        try {
            bool ps = probe_seed_set.back();
            apply_config_key(configs.back(), key, value, ps);
            probe_seed_set.back() = ps;
        } catch (const std::exception &e) {
            throw std::runtime_error(path + ":" + std::to_string(lineno) + ": " + e.what());
        }
    }
    if (configs.empty()) {
        throw std::runtime_error(path + ": no [[policy]] sections found");
    }
    for (size_t i = 0; i < configs.size(); ++i) {
        if (!probe_seed_set[i]) {
            configs[i].cache.probe.seed = configs[i].seed;
        }
    }
    return configs;
}

namespace {

Dims4 parse_dims(const std::string &text) {
    Dims4 dm;
    uint32_t *fields[4] = {&dm.b, &dm.h, &dm.l, &dm.d};
    std::stringstream ss(text);
    std::string part;
    int i = 0;
    while (std::getline(ss, part, ',')) {
        if (i >= 4) {
            throw CLI::ValidationError("--dims", "expected b,h,l,d");
        }
        *fields[i++] = uint32_t(std::stoul(trim(part)));
    }
    if (i != 4) {
        throw CLI::ValidationError("--dims", "expected b,h,l,d");
    }
    return dm;
}

void write_or_print(const std::string &report_path, const std::string &json) {
    if (report_path.empty()) {
        std::cout << json << "\n";
        return;
    }
    std::ofstream out(report_path, std::ios::trunc);
    if (!out) {
        throw std::runtime_error("cannot write report: " + report_path);
    }
    out << json << "\n";
}

int run_synth(uint64_t seed, const std::string &profile, const std::string &dims_spec,
              uint32_t layers, int64_t prefill, const std::string &out_path) {
    const Dims4 dm = parse_dims(dims_spec);
    const uint32_t prefill_len = prefill < 0 ? UINT32_MAX : uint32_t(prefill);
    const Trace trace = synth_trace(seed, dm, parse_profile(profile), layers, prefill_len);
    save_trace(trace, out_path);
    std::cout << "wrote " << out_path << " (profile " << profile << ", dims " << dm.b << ","
              << dm.h << "," << dm.l << "," << dm.d << ", layers " << layers << ", prefill "
              << trace.prefill_len << ")\n";
    return 0;
}

int run_ratio(const std::string &scheme, uint64_t b, uint64_t hd, uint64_t l, uint64_t d,
              uint64_t n, int k, int k_high, int k_low, double saliency_ratio) {
    CompressionReport rep;
    if (scheme == "zipcache") {
        if (!(saliency_ratio >= 0.0 && saliency_ratio <= 1.0)) {
            throw std::invalid_argument("--saliency-ratio must be in [0, 1]");
        }
        const uint64_t l_salient =
            std::min<uint64_t>(l, uint64_t(std::llround(saliency_ratio * double(l))));
        rep = mixed_compression_report(b, hd, l_salient, l - l_salient, 0, k_high, k_low);
    } else {
        if (d != 0 && hd % d != 0) {
            throw std::invalid_argument("--d must divide --hd");
        }
        rep = compression_report(parse_scheme(scheme), b, hd, l, n, k);
    }
    std::printf("scheme: %s\n", scheme.c_str());
    std::printf("data_bits: %llu\n", (unsigned long long)rep.data_bits);
    std::printf("param_bits: %llu\n", (unsigned long long)rep.param_bits);
    std::printf("bitmap_bits: %llu\n", (unsigned long long)rep.bitmap_bits);
    std::printf("fp_buffer_bits: %llu\n", (unsigned long long)rep.fp_buffer_bits);
    std::printf("ratio: %.3f\n", rep.ratio);
    return 0;
}

} // namespace

int cmd_main(int argc, char **argv) {
    CLI::App app{"KV-cache compression engine over attention traces"};
    app.require_subcommand(1);

    // synth
    auto *synth = app.add_subcommand("synth", "generate a synthetic trace");
    uint64_t synth_seed = 0;
    std::string synth_profile = "uniform";
    std::string synth_dims;
    uint32_t synth_layers = 1;
    int64_t synth_prefill = -1;
    std::string synth_out;
    synth->add_option("--seed", synth_seed, "generator seed");
    synth->add_option("--profile", synth_profile, "uniform | peaked | outlier-channel");
    synth->add_option("--dims", synth_dims, "b,h,l,d")->required();
    synth->add_option("--layers", synth_layers, "layer count");
    synth->add_option("--prefill", synth_prefill, "prompt length (default: all tokens)");
    synth->add_option("--out", synth_out, "output trace path")->required();

    // simulate
    auto *sim = app.add_subcommand("simulate", "run one policy over a trace");
    std::string sim_trace, sim_policy = "fp16", sim_report;
    PolicyConfig sim_cfg;
    bool sim_probe_seed_set = false;
    uint64_t sim_probe_seed = 0;
    sim->add_option("--trace", sim_trace, "trace file")->required();
    sim->add_option("--policy", sim_policy, "fp16 | uniform | recent-window | evict | zipcache");
    sim->add_option("--seed", sim_cfg.seed, "policy seed");
    sim->add_option("--k", sim_cfg.k, "bit width (uniform; k_low for recent-window)");
    sim->add_option("--window", sim_cfg.window, "full-precision window (recent-window)");
    sim->add_option("--keep", sim_cfg.evict_keep, "kept fraction by accumulated score (evict)");
    sim->add_option("--recent", sim_cfg.evict_recent, "kept recent fraction (evict)");
    sim->add_option("--k-high", sim_cfg.cache.k_high, "salient bit width (zipcache)");
    sim->add_option("--k-low", sim_cfg.cache.k_low, "regular bit width (zipcache)");
    sim->add_option("--saliency-ratio", sim_cfg.cache.saliency_ratio, "salient fraction (zipcache)");
    sim->add_option("--interval", sim_cfg.cache.recompress_interval, "recompress interval (zipcache)");
    std::string sim_probe = "hybrid";
    sim->add_option("--probe-strategy", sim_probe, "all | random | special | recent | hybrid");
    sim->add_option("--recent-fraction", sim_cfg.cache.probe.recent_fraction, "recent probe fraction");
    sim->add_option("--random-fraction", sim_cfg.cache.probe.random_fraction, "random probe fraction");
    sim->add_option("--probe-seed", sim_probe_seed, "probe seed (default: --seed)")
        ->each([&sim_probe_seed_set](const std::string &) { sim_probe_seed_set = true; });
    sim->add_option("--report", sim_report, "write report JSON here (default: stdout)");

    // compare
    auto *cmp = app.add_subcommand("compare", "run several policies against one fp16 reference");
    std::string cmp_trace, cmp_config, cmp_report;
    cmp->add_option("--trace", cmp_trace, "trace file")->required();
    cmp->add_option("--config", cmp_config, "policy config file")->required();
    cmp->add_option("--report", cmp_report, "write report JSON here (default: stdout)");

    // ratio
    auto *ratio = app.add_subcommand("ratio", "closed-form compression-ratio accounting");
    std::string ratio_scheme;
    uint64_t ratio_b = 8, ratio_hd = 4096, ratio_l = 4096, ratio_d = 0, ratio_n = 32;
    int ratio_k = 4, ratio_kh = 4, ratio_kl = 2;
    double ratio_sal = 0.6;
    ratio->add_option("--scheme", ratio_scheme,
                      "groupwise | tokenwise | channelwise-tokenwise | baseline | zipcache")
        ->required();
    ratio->add_option("--b", ratio_b, "batch size");
    ratio->add_option("--hd", ratio_hd, "heads x head dim");
    ratio->add_option("--l", ratio_l, "sequence length");
    ratio->add_option("--d", ratio_d, "head dim (optional, validated against --hd)");
    ratio->add_option("--n", ratio_n, "group size (groupwise)");
    ratio->add_option("--k", ratio_k, "bit width");
    ratio->add_option("--k-high", ratio_kh, "salient bit width (zipcache)");
    ratio->add_option("--k-low", ratio_kl, "regular bit width (zipcache)");
    ratio->add_option("--saliency-ratio", ratio_sal, "salient fraction (zipcache)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError &e) {
        if (e.get_exit_code() == 0) { // --help and friends
            app.exit(e);
            return 0;
        }
        std::cerr << e.what() << "\n\n" << app.help() << "\n";
        return 2;
    }

    try {
        if (synth->parsed()) {
            return run_synth(synth_seed, synth_profile, synth_dims, synth_layers, synth_prefill,
                             synth_out);
        }
        if (sim->parsed()) {
            sim_cfg.kind = parse_policy_kind(sim_policy);
            sim_cfg.cache.probe.strategy = parse_probe_strategy(sim_probe);
            sim_cfg.cache.probe.seed = sim_probe_seed_set ? sim_probe_seed : sim_cfg.seed;
            const Trace trace = load_trace(sim_trace);
            const PolicyReport report = run_policy(trace, sim_cfg);
            write_or_print(sim_report, report_to_json(report));
            return 0;
        }
        if (cmp->parsed()) {
            const std::vector<PolicyConfig> configs = load_policy_configs(cmp_config);
            const Trace trace = load_trace(cmp_trace);
            const std::vector<PolicyReport> reports = run_compare(trace, configs);
            write_or_print(cmp_report, reports_to_json(cmp_trace, reports));
            for (const PolicyReport &r : reports) {
                if (!r.ok()) {
                    std::cerr << "policy " << r.policy << " failed: " << r.error << "\n";
                    return 1;
                }
            }
            return 0;
        }
        if (ratio->parsed()) {
            return run_ratio(ratio_scheme, ratio_b, ratio_hd, ratio_l, ratio_d, ratio_n, ratio_k,
                             ratio_kh, ratio_kl, ratio_sal);
        }
    } catch (const std::exception &e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 2;
}

} // namespace zipcache
