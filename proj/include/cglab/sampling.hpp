#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "cglab/dataset.hpp"

namespace cglab {

enum class SamplerMode { uniform, frequency, in_batch };

std::string_view to_string(SamplerMode mode);
SamplerMode parse_sampler_mode(std::string_view text);

struct SamplerConfig {
    SamplerMode mode = SamplerMode::uniform;
    int negatives_per_positive = 1;
    bool filter_known_positives = true;
    std::uint64_t seed = 0;
    int max_retries = 32;           // per negative, before the draw is skipped
    bool full_cross = true;         // in-batch: pair with every other positive
    double frequency_smoothing = 0; // added to every corpus item's served count

    void validate() const;
};

struct PopularityWeightConfig {
    double t = 2500.0;
    void validate() const;
};

inline constexpr double kPopularityWeightFloor = 0.5;
inline constexpr double kPopularityWeightCeiling = 1.0;

/// 0.5 + 0.5 * exp(-theta / t): weight of a negative with popularity theta.
double popularity_weight(double theta, const PopularityWeightConfig& config);

struct NegativeSample {
    std::vector<Interaction> negatives;
    std::vector<std::size_t> source;  // index of the positive each negative was drawn for
    std::size_t skipped = 0;  // draws abandoned after max_retries collisions
};

/// n negatives per positive, uniform over the corpus. With filtering on, a
/// draw that hits a known explicit positive of the same query is redrawn.
NegativeSample sample_uniform_negatives(std::span<const Interaction> positives, std::span<const CandidateId> corpus,
                                        const SamplerConfig& config);

/// n negatives per positive, drawn proportionally to each candidate's count
/// in the served log. Candidates absent from the log are never drawn unless
/// frequency_smoothing > 0 and a corpus is supplied.
NegativeSample sample_frequency_negatives(std::span<const Interaction> positives,
                                          std::span<const Interaction> served_log, const SamplerConfig& config,
                                          std::span<const CandidateId> corpus = {});

struct Triplet {
    QueryId query_id = 0;
    CandidateId positive_id = 0;
    CandidateId negative_id = 0;
    double weight = 1.0;
};

/// Pairs every positive of a batch with the candidates of the other
/// positives: all B - 1 of them (full_cross) or a seeded subset of
/// negatives_per_positive. A batch of one yields nothing.
std::vector<Triplet> in_batch_negatives(std::span<const Interaction> batch, const SamplerConfig& config,
                                        std::uint64_t batch_index = 0);

/// Sets each triplet's weight from its negative's popularity.
void apply_popularity_weights(std::span<Triplet> triplets, const std::function<double(CandidateId)>& popularity,
                              const PopularityWeightConfig& config);
void apply_popularity_weights(std::span<Interaction> negatives, const std::function<double(CandidateId)>& popularity,
                              const PopularityWeightConfig& config);

}  // namespace cglab
