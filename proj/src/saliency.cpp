#include "zipcache/saliency.hpp"

#include "zipcache/trace.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

namespace zipcache {

namespace {

void check_nonempty(const AttnMatrix &a) {
    if (a.rows.empty()) {
        throw std::invalid_argument("saliency: attention matrix has no rows");
    }
    for (const AttnRow &row : a.rows) {
        if (row.probs.size() != a.cols) {
            throw std::invalid_argument("saliency: row length does not match column count");
        }
    }
}

std::vector<uint32_t> row_indices_if_partial(const AttnMatrix &a) {
    if (a.full()) {
        return {};
    }
    std::vector<uint32_t> idx(a.rows.size());
    for (size_t i = 0; i < a.rows.size(); ++i) {
        idx[i] = a.rows[i].row_index;
    }
    return idx;
}

} // namespace

SaliencyVector accumulated_scores(const AttnMatrix &a) {
    check_nonempty(a);
    SaliencyVector sv;
    sv.metric = SaliencyMetric::accumulated;
    sv.probe_rows = row_indices_if_partial(a);
    sv.valid.assign(a.cols, true);

    std::vector<double> sums(a.cols, 0.0);
    for (const AttnRow &row : a.rows) {
        for (size_t c = 0; c < a.cols; ++c) {
            sums[c] += row.probs[c];
        }
    }
    sv.scores.resize(a.cols);
    for (size_t c = 0; c < a.cols; ++c) {
        sv.scores[c] = float(sums[c]);
    }
    return sv;
}

SaliencyVector normalized_scores(const AttnMatrix &a) {
    check_nonempty(a);
    SaliencyVector sv;
    sv.metric = SaliencyMetric::normalized;
    sv.probe_rows = row_indices_if_partial(a);
    sv.scores.assign(a.cols, 0.0f);
    sv.valid.assign(a.cols, false);

    std::vector<double> sums(a.cols, 0.0);
    std::vector<uint32_t> covering(a.cols, 0); // rows r >= column under the causal mask
    for (const AttnRow &row : a.rows) {
        for (size_t c = 0; c < a.cols; ++c) {
            sums[c] += row.probs[c];
        }
        for (size_t c = 0; c <= row.row_index && c < a.cols; ++c) {
            ++covering[c];
        }
    }
    for (size_t c = 0; c < a.cols; ++c) {
        if (covering[c] > 0) {
            sv.scores[c] = float(sums[c] / covering[c]);
            sv.valid[c] = true;
        }
    }
    return sv;
}

ProbeStrategy parse_probe_strategy(const std::string &name) {
    if (name == "all") return ProbeStrategy::all;
    if (name == "random") return ProbeStrategy::random;
    if (name == "special") return ProbeStrategy::special;
    if (name == "recent") return ProbeStrategy::recent;
    if (name == "hybrid") return ProbeStrategy::hybrid;
    throw std::invalid_argument("unknown probe strategy: " + name);
}

const char *probe_strategy_name(ProbeStrategy strategy) {
    switch (strategy) {
    case ProbeStrategy::all: return "all";
    case ProbeStrategy::random: return "random";
    case ProbeStrategy::special: return "special";
    case ProbeStrategy::recent: return "recent";
    case ProbeStrategy::hybrid: return "hybrid";
    }
    return "?";
}

ProbeSelection select_probes(const ProbeConfig &cfg, uint32_t l,
                             std::span<const uint8_t> token_classes) {
    if (l == 0) {
        throw std::invalid_argument("select_probes: l must be >= 1");
    }
    if (cfg.recent_fraction < 0.0 || cfg.random_fraction < 0.0 ||
        cfg.recent_fraction + cfg.random_fraction > 1.0) {
        throw std::invalid_argument("select_probes: fractions must be in [0,1] and sum <= 1");
    }

    auto count_for = [l](double fraction) -> uint32_t {
        if (fraction <= 0.0) {
            return 0;
        }
        return std::min<uint32_t>(l, uint32_t(std::ceil(fraction * l)));
    };

    ProbeSelection sel;
    switch (cfg.strategy) {
    case ProbeStrategy::all: {
        sel.indices.resize(l);
        std::iota(sel.indices.begin(), sel.indices.end(), 0u);
        return sel;
    }
    case ProbeStrategy::special: {
        for (uint32_t i = 0; i < l && i < token_classes.size(); ++i) {
            if (token_classes[i] == kTokenSpecial || token_classes[i] == kTokenPunctuation) {
                sel.indices.push_back(i);
            }
        }
        sel.no_special_warning = sel.indices.empty();
        return sel;
    }
    case ProbeStrategy::recent: {
        const uint32_t n = count_for(cfg.recent_fraction);
        for (uint32_t i = l - n; i < l; ++i) {
            sel.indices.push_back(i);
        }
        return sel;
    }
    case ProbeStrategy::random:
    case ProbeStrategy::hybrid: {
        const uint32_t n_recent =
            cfg.strategy == ProbeStrategy::hybrid ? count_for(cfg.recent_fraction) : 0;
        const uint32_t pool = l - n_recent;
        const uint32_t n_random = std::min(pool, count_for(cfg.random_fraction));

        std::vector<uint32_t> candidates(pool);
        std::iota(candidates.begin(), candidates.end(), 0u);
        std::mt19937_64 eng(cfg.seed);
        for (uint32_t i = 0; i < n_random; ++i) {
            const uint32_t j = i + uint32_t(eng() % (pool - i));
            std::swap(candidates[i], candidates[j]);
        }
        sel.indices.assign(candidates.begin(), candidates.begin() + n_random);
        for (uint32_t i = l - n_recent; i < l; ++i) {
            sel.indices.push_back(i);
        }
        std::sort(sel.indices.begin(), sel.indices.end());
        return sel;
    }
    }
    return sel;
}

Partition select_salient(const SaliencyVector &scores, double ratio) {
    const size_t l = scores.size();
    if (l == 0) {
        throw std::invalid_argument("select_salient: empty score vector");
    }
    if (!(ratio > 0.0 && ratio <= 1.0)) {
        throw std::invalid_argument("select_salient: ratio must be in (0, 1]");
    }
    const bool has_valid =
        scores.valid.empty() || std::any_of(scores.valid.begin(), scores.valid.end(),
                                            [](bool v) { return v; });
    if (!has_valid) {
        throw std::invalid_argument("select_salient: all scores are invalid");
    }

    auto is_valid = [&scores](size_t i) { return scores.valid.empty() || scores.valid[i]; };
    std::vector<uint32_t> order(l);
    std::iota(order.begin(), order.end(), 0u);
    std::sort(order.begin(), order.end(), [&](uint32_t a, uint32_t b) {
        if (is_valid(a) != is_valid(b)) {
            return is_valid(a);
        }
        if (scores.scores[a] != scores.scores[b]) {
            return scores.scores[a] > scores.scores[b];
        }
        return a > b; // tie toward the more recent token
    });

    const size_t n_salient = std::min<size_t>(l, size_t(std::llround(ratio * double(l))));
    Partition part;
    part.saliency_ratio = ratio;
    part.salient_idx.assign(order.begin(), order.begin() + n_salient);
    part.regular_idx.assign(order.begin() + n_salient, order.end());
    std::sort(part.salient_idx.begin(), part.salient_idx.end());
    std::sort(part.regular_idx.begin(), part.regular_idx.end());
    return part;
}

} // namespace zipcache
