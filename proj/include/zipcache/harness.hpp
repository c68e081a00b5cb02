#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "zipcache/cache.hpp"
#include "zipcache/trace.hpp"

namespace zipcache {

enum class PolicyKind { fp16, uniform, recent_window, evict, zipcache };

const char *policy_kind_name(PolicyKind kind);

struct PolicyConfig {
    PolicyKind kind = PolicyKind::fp16;
    int k = 4;                  // uniform bit width; also k_low for recent_window
    uint32_t window = 32;       // recent_window: tokens kept full precision
    double evict_keep = 0.4;    // evict: fraction kept by accumulated score
    double evict_recent = 0.2;  // evict: fraction of most recent tokens kept
    CacheConfig cache;          // zipcache parameters
    uint64_t seed = 0;

    std::string label() const;
};

// Fidelity and compression summary for one policy run over one trace.
struct PolicyReport {
    std::string policy;
    std::vector<double> layer_rel_err; // relative Frobenius error per layer
    double mean_rel_err = 0.0;
    double max_rel_err = 0.0;
    double rank_overlap = 1.0; // fraction of exact normalized-score top tokens the policy kept salient
    CompressionReport compression;
    double runtime_ms = 0.0;
    std::string error; // non-empty when the policy failed

    bool ok() const { return error.empty(); }
};

// Full-precision attention outputs for every layer, shared across policy runs.
struct Reference {
    // per layer: (b*h*l) x d outputs, batch-major then head then position
    std::vector<Matrix> layer_outputs;
};

Reference compute_reference(const Trace &trace);

PolicyReport run_policy(const Trace &trace, const PolicyConfig &cfg);
PolicyReport run_policy(const Trace &trace, const PolicyConfig &cfg, const Reference &ref);

// Runs every config against one shared fp16 reference; a failing policy yields
// a report with `error` set and does not stop the others.
std::vector<PolicyReport> run_compare(const Trace &trace, const std::vector<PolicyConfig> &configs);

// Key-value config file: one [[policy]] section per run, keys mirroring the
// PolicyConfig/CacheConfig fields (see README for the grammar).
std::vector<PolicyConfig> load_policy_configs(const std::string &path);

// JSON rendering with stable key order and floats at 6 significant digits.
std::string report_to_json(const PolicyReport &report);
std::string reports_to_json(const std::string &trace_path, const std::vector<PolicyReport> &reports);

int cmd_main(int argc, char **argv);

} // namespace zipcache
