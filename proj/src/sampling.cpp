#include "cglab/sampling.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_map>
#include <unordered_set>

#include "cglab/errors.hpp"
#include "cglab/log.hpp"
#include "cglab/random.hpp"
#include "format.hpp"

namespace cglab {

namespace {

constexpr std::uint64_t kUniformStream = 31;
constexpr std::uint64_t kFrequencyStream = 32;
constexpr std::uint64_t kInBatchStream = 33;

std::uint64_t pair_key(QueryId q, CandidateId c) {
    return (static_cast<std::uint64_t>(q) << 32) ^ static_cast<std::uint64_t>(c) ^
           (static_cast<std::uint64_t>(q) >> 32) * 0x9e3779b97f4a7c15ULL;
}

struct PairHash {
    std::size_t operator()(const std::pair<QueryId, CandidateId>& p) const {
        return static_cast<std::size_t>(pair_key(p.first, p.second) * 0xff51afd7ed558ccdULL);
    }
};

using PairSet = std::unordered_set<std::pair<QueryId, CandidateId>, PairHash>;

PairSet known_positive_pairs(std::span<const Interaction> positives) {
    PairSet known;
    known.reserve(positives.size() * 2);
    for (const auto& p : positives)
        if (p.label == 1) known.emplace(p.query_id, p.candidate_id);
    return known;
}

/// Shared draw loop: `draw` returns a candidate from the positive's stream.
template <typename Draw>
NegativeSample sample_with(std::span<const Interaction> positives, const SamplerConfig& config, std::uint64_t stream,
                           Draw draw) {
    config.validate();
    const PairSet known = config.filter_known_positives ? known_positive_pairs(positives) : PairSet{};
    NegativeSample out;
    out.negatives.reserve(positives.size() * static_cast<std::size_t>(config.negatives_per_positive));
    out.source.reserve(out.negatives.capacity());
    for (std::size_t i = 0; i < positives.size(); ++i) {
        const QueryId q = positives[i].query_id;
        Rng rng(derive_seed(config.seed, stream, i));
        for (int n = 0; n < config.negatives_per_positive; ++n) {
            CandidateId c = draw(rng);
            int retries = 0;
            while (config.filter_known_positives && known.count({q, c}) && retries < config.max_retries) {
                c = draw(rng);
                ++retries;
            }
            if (config.filter_known_positives && known.count({q, c})) {
                ++out.skipped;
                continue;
            }
            out.negatives.push_back(Interaction{q, c, 0, Provenance::sampled_negative, 1.0});
            out.source.push_back(i);
        }
    }
    if (out.skipped > 0)
        warn("negative sampler skipped " + std::to_string(out.skipped) + " draws that kept hitting known positives");
    return out;
}

}  // namespace

std::string_view to_string(SamplerMode mode) {
    switch (mode) {
        case SamplerMode::uniform: return "uniform";
        case SamplerMode::frequency: return "frequency";
        case SamplerMode::in_batch: return "in_batch";
    }
    return "unknown";
}

SamplerMode parse_sampler_mode(std::string_view text) {
    if (text == "uniform") return SamplerMode::uniform;
    if (text == "frequency") return SamplerMode::frequency;
    if (text == "in_batch") return SamplerMode::in_batch;
    throw ConfigError("unknown sampler mode '" + std::string(text) + "'");
}

void SamplerConfig::validate() const {
    std::vector<std::string> problems;
    if (negatives_per_positive < 1) problems.push_back("negatives_per_positive must be >= 1");
    if (max_retries < 0) problems.push_back("max_retries must be >= 0");
    if (!(frequency_smoothing >= 0)) problems.push_back("frequency_smoothing must be >= 0");
    if (!problems.empty()) throw ConfigError(join_problems("sampler config", problems));
}

void PopularityWeightConfig::validate() const {
    if (!(t > 0) || !std::isfinite(t)) throw ConfigError("popularity coefficient t must be a finite value > 0");
}

double popularity_weight(double theta, const PopularityWeightConfig& config) {
    config.validate();
    if (!(theta >= 0)) throw ConfigError("popularity must be >= 0");
    return kPopularityWeightFloor + (kPopularityWeightCeiling - kPopularityWeightFloor) * std::exp(-theta / config.t);
}

NegativeSample sample_uniform_negatives(std::span<const Interaction> positives, std::span<const CandidateId> corpus,
                                        const SamplerConfig& config) {
    if (corpus.empty()) throw ConfigError("uniform sampler needs a non-empty corpus");
    return sample_with(positives, config, kUniformStream,
                       [&](Rng& rng) { return corpus[static_cast<std::size_t>(rng.below(corpus.size()))]; });
}

NegativeSample sample_frequency_negatives(std::span<const Interaction> positives,
                                          std::span<const Interaction> served_log, const SamplerConfig& config,
                                          std::span<const CandidateId> corpus) {
    if (served_log.empty()) throw ConfigError("frequency sampler needs a non-empty served log");
    std::unordered_map<CandidateId, double> counts;
    for (const auto& r : served_log) counts[r.candidate_id] += 1.0;
    if (config.frequency_smoothing > 0)
        for (CandidateId c : corpus) counts[c] += config.frequency_smoothing;
    std::vector<CandidateId> ids;
    ids.reserve(counts.size());
    for (const auto& [c, _] : counts) ids.push_back(c);
    std::sort(ids.begin(), ids.end());
    std::vector<double> cumulative(ids.size());
    double total = 0;
    for (std::size_t i = 0; i < ids.size(); ++i) {
        total += counts[ids[i]];
        cumulative[i] = total;
    }
    return sample_with(positives, config, kFrequencyStream, [&](Rng& rng) {
        const double u = rng.uniform() * total;
        auto it = std::upper_bound(cumulative.begin(), cumulative.end(), u);
        if (it == cumulative.end()) --it;
        return ids[static_cast<std::size_t>(it - cumulative.begin())];
    });
}

std::vector<Triplet> in_batch_negatives(std::span<const Interaction> batch, const SamplerConfig& config,
                                        std::uint64_t batch_index) {
    config.validate();
    std::vector<Triplet> out;
    const std::size_t B = batch.size();
    if (B < 2) {
        warn("in-batch negatives need at least two positives; batch of " + std::to_string(B) + " yields none");
        return out;
    }
    const bool full = config.full_cross || static_cast<std::size_t>(config.negatives_per_positive) >= B - 1;
    out.reserve(full ? B * (B - 1) : B * static_cast<std::size_t>(config.negatives_per_positive));
    Rng rng(derive_seed(config.seed, kInBatchStream, batch_index));
    std::vector<std::size_t> others(B - 1);
    for (std::size_t i = 0; i < B; ++i) {
        const auto& pos = batch[i];
        for (std::size_t j = 0, k = 0; j < B; ++j)
            if (j != i) others[k++] = j;
        std::size_t take = others.size();
        if (!full) {
            take = static_cast<std::size_t>(config.negatives_per_positive);
            // Partial Fisher-Yates: the first `take` slots become the sample.
            for (std::size_t k = 0; k < take; ++k) std::swap(others[k], others[k + rng.below(others.size() - k)]);
            std::sort(others.begin(), others.begin() + static_cast<std::ptrdiff_t>(take));
        }
        for (std::size_t k = 0; k < take; ++k)
            out.push_back(Triplet{pos.query_id, pos.candidate_id, batch[others[k]].candidate_id, 1.0});
    }
    return out;
}

void apply_popularity_weights(std::span<Triplet> triplets, const std::function<double(CandidateId)>& popularity,
                              const PopularityWeightConfig& config) {
    for (auto& t : triplets) t.weight = popularity_weight(popularity(t.negative_id), config);
}

void apply_popularity_weights(std::span<Interaction> negatives, const std::function<double(CandidateId)>& popularity,
                              const PopularityWeightConfig& config) {
    for (auto& r : negatives)
        if (r.label == 0) r.weight = popularity_weight(popularity(r.candidate_id), config);
}

}  // namespace cglab
