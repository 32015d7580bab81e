#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "cglab/ann.hpp"
#include "cglab/dataset.hpp"

namespace cglab {

class TwoTowerModel;

struct ScoredExample {
    std::int64_t group = 0;
    double score = 0.0;
    int label = 0;
};

/// Probability that a random positive outscores a random negative, ties
/// counted as one half. Throws DataError without both classes.
double roc_auc(std::span<const ScoredExample> examples);

struct GroupedAuc {
    double mean = 0.0;
    std::size_t groups_used = 0;
    std::size_t groups_skipped = 0;  // groups holding a single class
};

/// Unweighted mean of the per-group AUC over groups holding both classes.
GroupedAuc grouped_roc_auc(std::span<const ScoredExample> examples);

/// Product-moment correlation. Throws NumericalError on zero variance.
double pearson(std::span<const double> x, std::span<const double> y);

/// Pearson correlation of average ranks (ties share their mean rank).
double spearman(std::span<const double> x, std::span<const double> y);

struct KnnEvalConfig {
    int query_sample = 1000;
    int candidate_sample = 10000;
    int k = 10;
    int mismatch_top_n = 1;
    int pearson_top_n = 5;
    bool log_popularity = false;
    std::uint64_t seed = 5;

    void validate() const;
    std::vector<std::pair<std::string, std::string>> echo() const;
};

/// Fraction of queries whose top_n exact neighbours include a candidate in a
/// language other than the query's.
double language_mismatch_rate(const Eigen::MatrixXd& query_embeddings, std::span<const int> query_languages,
                              const EmbeddingSet& candidates, std::span<const int> candidate_languages, int top_n);

/// Per-candidate fraction of queries whose top_n exact neighbours contain it.
std::vector<double> retrieval_frequency(const Eigen::MatrixXd& query_embeddings, const EmbeddingSet& candidates,
                                        int top_n);

/// Pearson correlation between popularity and retrieval frequency in the
/// top_n. Popularity enters raw unless log_popularity, then as log1p.
double popularity_recommendation_pearson(const Eigen::MatrixXd& query_embeddings, const EmbeddingSet& candidates,
                                         std::span<const double> popularity, int top_n, bool log_popularity = false);

/// Sorted sample of min(n, population) distinct indices.
std::vector<std::size_t> sample_indices(std::size_t population, std::size_t n, std::uint64_t seed);

struct KnnMetrics {
    double mismatch_rate = 0.0;
    double popularity_pearson = 0.0;
    bool pearson_defined = true;  // false when retrieval frequency has no variance
};

/// Embeds a seeded sample Q' of queries and C' of candidates and computes
/// both KNN diagnostics from one exact search.
KnnMetrics knn_metrics(const TwoTowerModel& model, const World& world, const KnnEvalConfig& config);

double language_mismatch_rate(const TwoTowerModel& model, const World& world, const KnnEvalConfig& config);
double popularity_recommendation_pearson(const TwoTowerModel& model, const World& world, const KnnEvalConfig& config);

}  // namespace cglab
