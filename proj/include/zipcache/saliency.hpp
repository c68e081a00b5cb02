#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "zipcache/attention.hpp"

namespace zipcache {

enum class SaliencyMetric { accumulated, normalized };

// Per-token saliency scores. `probe_rows` records which attention rows produced
// them (empty when the full matrix was available). Tokens no probe row could
// observe are flagged invalid and carry score 0.
struct SaliencyVector {
    std::vector<float> scores;
    SaliencyMetric metric = SaliencyMetric::accumulated;
    std::vector<uint32_t> probe_rows;
    std::vector<bool> valid;

    size_t size() const { return scores.size(); }
};

// Column sums of the attention rows (heavy-hitter style accumulated scores).
SaliencyVector accumulated_scores(const AttnMatrix &a);

// Column sums divided by the count of structurally nonzero entries: for column
// i that is the number of available rows r with r >= i under the causal mask.
SaliencyVector normalized_scores(const AttnMatrix &a);

enum class ProbeStrategy { all, random, special, recent, hybrid };

ProbeStrategy parse_probe_strategy(const std::string &name);
const char *probe_strategy_name(ProbeStrategy strategy);

struct ProbeConfig {
    ProbeStrategy strategy = ProbeStrategy::hybrid;
    double recent_fraction = 0.05;
    double random_fraction = 0.05;
    uint64_t seed = 0;
};

struct ProbeSelection {
    std::vector<uint32_t> indices; // sorted, unique
    bool no_special_warning = false;
};

// Probe-token selection. recent = the ceil(recent_fraction*l) highest indices;
// random = seeded draw without replacement from the rest; special = every token
// tagged special or punctuation. Deterministic for a given seed.
ProbeSelection select_probes(const ProbeConfig &cfg, uint32_t l,
                             std::span<const uint8_t> token_classes);

struct Partition {
    std::vector<uint32_t> salient_idx; // sorted
    std::vector<uint32_t> regular_idx; // sorted
    double saliency_ratio = 0.0;
};

// Picks the round(ratio*l) highest-scoring tokens as salient. Ties break toward
// the higher (more recent) index; invalid tokens rank below every valid one.
Partition select_salient(const SaliencyVector &scores, double ratio);

} // namespace zipcache
