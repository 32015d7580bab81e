#include "cglab/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>

#include "cglab/errors.hpp"
#include "cglab/random.hpp"
#include "cglab/tower.hpp"
#include "features.hpp"
#include "format.hpp"

namespace cglab {

namespace {

constexpr std::uint64_t kQuerySampleStream = 51;
constexpr std::uint64_t kCandidateSampleStream = 52;

double auc_sorted(std::vector<ScoredExample>& ex) {
    std::sort(ex.begin(), ex.end(), [](const ScoredExample& a, const ScoredExample& b) { return a.score < b.score; });
    // Walk tied blocks in ascending score: each positive beats every negative
    // below its block and ties half of the negatives inside it.
    double wins = 0, negatives_below = 0, positives = 0;
    for (std::size_t i = 0; i < ex.size();) {
        std::size_t j = i;
        double p = 0, n = 0;
        for (; j < ex.size() && ex[j].score == ex[i].score; ++j) (ex[j].label ? p : n) += 1;
        wins += p * negatives_below + 0.5 * p * n;
        negatives_below += n;
        positives += p;
        i = j;
    }
    if (positives == 0 || negatives_below == 0) throw DataError("roc_auc needs at least one positive and one negative");
    return wins / (positives * negatives_below);
}

void check_examples(std::span<const ScoredExample> examples) {
    for (const auto& e : examples) {
        if (!std::isfinite(e.score)) throw DataError("roc_auc: non-finite score");
        if (e.label != 0 && e.label != 1) throw DataError("roc_auc: labels must be 0 or 1");
    }
}

}  // namespace

double roc_auc(std::span<const ScoredExample> examples) {
    check_examples(examples);
    std::vector<ScoredExample> ex(examples.begin(), examples.end());
    return auc_sorted(ex);
}

GroupedAuc grouped_roc_auc(std::span<const ScoredExample> examples) {
    if (examples.empty()) throw DataError("grouped_roc_auc on an empty example set");
    check_examples(examples);
    std::map<std::int64_t, std::vector<ScoredExample>> groups;
    for (const auto& e : examples) groups[e.group].push_back(e);
    GroupedAuc out;
    double sum = 0;
    for (auto& [_, ex] : groups) {
        const bool has_pos = std::any_of(ex.begin(), ex.end(), [](const auto& e) { return e.label == 1; });
        const bool has_neg = std::any_of(ex.begin(), ex.end(), [](const auto& e) { return e.label == 0; });
        if (!has_pos || !has_neg) {
            ++out.groups_skipped;
            continue;
        }
        sum += auc_sorted(ex);
        ++out.groups_used;
    }
    if (out.groups_used == 0) throw DataError("grouped_roc_auc: no group holds both classes");
    out.mean = sum / static_cast<double>(out.groups_used);
    return out;
}

double pearson(std::span<const double> x, std::span<const double> y) {
    if (x.size() != y.size()) throw DataError("pearson: length mismatch");
    if (x.size() < 2) throw DataError("pearson needs at least two points");
    const double n = static_cast<double>(x.size());
    const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
    const double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
    double sxy = 0, sxx = 0, syy = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double dx = x[i] - mx, dy = y[i] - my;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if (!(sxx > 0) || !(syy > 0)) throw NumericalError("pearson: zero variance");
    return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

namespace {

std::vector<double> average_ranks(std::span<const double> v) {
    std::vector<std::size_t> order(v.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
    std::vector<double> ranks(v.size());
    for (std::size_t i = 0; i < order.size();) {
        std::size_t j = i;
        while (j < order.size() && v[order[j]] == v[order[i]]) ++j;
        const double mean_rank = 0.5 * static_cast<double>(i + j - 1) + 1.0;
        for (std::size_t k = i; k < j; ++k) ranks[order[k]] = mean_rank;
        i = j;
    }
    return ranks;
}

}  // namespace

double spearman(std::span<const double> x, std::span<const double> y) {
    if (x.size() != y.size()) throw DataError("spearman: length mismatch");
    const auto rx = average_ranks(x), ry = average_ranks(y);
    return pearson(rx, ry);
}

void KnnEvalConfig::validate() const {
    std::vector<std::string> problems;
    if (query_sample < 1) problems.push_back("query_sample must be >= 1");
    if (candidate_sample < 1) problems.push_back("candidate_sample must be >= 1");
    if (mismatch_top_n < 1) problems.push_back("mismatch_top_n must be >= 1");
    if (pearson_top_n < 1) problems.push_back("pearson_top_n must be >= 1");
    if (k < std::max(mismatch_top_n, pearson_top_n)) problems.push_back("k must be >= every top-n");
    if (!problems.empty()) throw ConfigError(join_problems("knn eval config", problems));
}

std::vector<std::pair<std::string, std::string>> KnnEvalConfig::echo() const {
    return {{"query_sample", std::to_string(query_sample)},
            {"candidate_sample", std::to_string(candidate_sample)},
            {"k", std::to_string(k)},
            {"mismatch_top_n", std::to_string(mismatch_top_n)},
            {"pearson_top_n", std::to_string(pearson_top_n)},
            {"log_popularity", log_popularity ? "true" : "false"},
            {"seed", std::to_string(seed)}};
}

double language_mismatch_rate(const Eigen::MatrixXd& query_embeddings, std::span<const int> query_languages,
                              const EmbeddingSet& candidates, std::span<const int> candidate_languages, int top_n) {
    if (query_embeddings.cols() == 0 || candidates.size() == 0) throw DataError("mismatch rate on empty samples");
    if (static_cast<std::size_t>(query_embeddings.cols()) != query_languages.size() ||
        candidates.size() != candidate_languages.size())
        throw DataError("mismatch rate: language labels do not match samples");
    std::map<std::int64_t, int> lang;
    for (std::size_t j = 0; j < candidates.size(); ++j) lang[candidates.ids[j]] = candidate_languages[j];
    const auto knn = exact_knn_batch(candidates, query_embeddings, top_n);
    std::size_t mismatched = 0;
    for (std::size_t i = 0; i < knn.size(); ++i)
        if (std::any_of(knn[i].begin(), knn[i].end(),
                        [&](const Neighbor& n) { return lang[n.id] != query_languages[i]; }))
            ++mismatched;
    return static_cast<double>(mismatched) / static_cast<double>(knn.size());
}

std::vector<double> retrieval_frequency(const Eigen::MatrixXd& query_embeddings, const EmbeddingSet& candidates,
                                        int top_n) {
    if (query_embeddings.cols() == 0 || candidates.size() == 0) throw DataError("retrieval frequency on empty samples");
    std::map<std::int64_t, std::size_t> column;
    for (std::size_t j = 0; j < candidates.size(); ++j) column[candidates.ids[j]] = j;
    std::vector<double> freq(candidates.size(), 0.0);
    for (const auto& top : exact_knn_batch(candidates, query_embeddings, top_n))
        for (const auto& n : top) freq[column[n.id]] += 1.0;
    for (double& f : freq) f /= static_cast<double>(query_embeddings.cols());
    return freq;
}

double popularity_recommendation_pearson(const Eigen::MatrixXd& query_embeddings, const EmbeddingSet& candidates,
                                         std::span<const double> popularity, int top_n, bool log_popularity) {
    if (popularity.size() != candidates.size()) throw DataError("popularity does not match candidate sample");
    std::vector<double> pop(popularity.begin(), popularity.end());
    for (double& p : pop) {
        if (!(p >= 0)) throw DataError("popularity must be >= 0");
        if (log_popularity) p = std::log1p(p);
    }
    const auto freq = retrieval_frequency(query_embeddings, candidates, top_n);
    return pearson(pop, freq);
}

std::vector<std::size_t> sample_indices(std::size_t population, std::size_t n, std::uint64_t seed) {
    std::vector<std::size_t> idx(population);
    std::iota(idx.begin(), idx.end(), 0);
    if (n >= population) return idx;
    Rng rng(seed);
    for (std::size_t i = 0; i < n; ++i) std::swap(idx[i], idx[i + rng.below(population - i)]);
    idx.resize(n);
    std::sort(idx.begin(), idx.end());
    return idx;
}

KnnMetrics knn_metrics(const TwoTowerModel& model, const World& world, const KnnEvalConfig& config) {
    config.validate();
    const auto qi = sample_indices(world.queries().size(), static_cast<std::size_t>(config.query_sample),
                                   derive_seed(config.seed, kQuerySampleStream));
    const auto ci = sample_indices(world.candidates().size(), static_cast<std::size_t>(config.candidate_sample),
                                   derive_seed(config.seed, kCandidateSampleStream));
    const Eigen::MatrixXd q = model.embed(Tower::query, detail::query_features(world, qi));
    EmbeddingSet c;
    c.vectors = model.embed(Tower::candidate, detail::candidate_features(world, ci));
    std::vector<int> q_lang, c_lang;
    std::vector<double> pop;
    for (std::size_t i : qi) q_lang.push_back(world.queries()[i].primary_language);
    for (std::size_t j : ci) {
        const auto& cand = world.candidates()[j];
        c.ids.push_back(cand.candidate_id);
        c_lang.push_back(cand.language);
        pop.push_back(config.log_popularity ? std::log1p(cand.popularity) : cand.popularity);
    }

    const int top = std::max(config.mismatch_top_n, config.pearson_top_n);
    const auto knn = exact_knn_batch(c, q, top);
    std::map<std::int64_t, std::size_t> column;
    for (std::size_t j = 0; j < c.ids.size(); ++j) column[c.ids[j]] = j;

    KnnMetrics out;
    std::size_t mismatched = 0;
    std::vector<double> freq(c.ids.size(), 0.0);
    for (std::size_t i = 0; i < knn.size(); ++i) {
        const auto& list = knn[i];
        const auto n_mis = std::min<std::size_t>(list.size(), static_cast<std::size_t>(config.mismatch_top_n));
        if (std::any_of(list.begin(), list.begin() + static_cast<std::ptrdiff_t>(n_mis),
                        [&](const Neighbor& n) { return c_lang[column[n.id]] != q_lang[i]; }))
            ++mismatched;
        const auto n_pop = std::min<std::size_t>(list.size(), static_cast<std::size_t>(config.pearson_top_n));
        for (std::size_t r = 0; r < n_pop; ++r) freq[column[list[r].id]] += 1.0;
    }
    out.mismatch_rate = static_cast<double>(mismatched) / static_cast<double>(knn.size());
    for (double& f : freq) f /= static_cast<double>(knn.size());
    try {
        out.popularity_pearson = pearson(pop, freq);
    } catch (const NumericalError&) {
        out.popularity_pearson = 0.0;
        out.pearson_defined = false;
    }
    return out;
}

double language_mismatch_rate(const TwoTowerModel& model, const World& world, const KnnEvalConfig& config) {
    return knn_metrics(model, world, config).mismatch_rate;
}

double popularity_recommendation_pearson(const TwoTowerModel& model, const World& world, const KnnEvalConfig& config) {
    const auto m = knn_metrics(model, world, config);
    if (!m.pearson_defined) throw NumericalError("popularity pearson: retrieval frequency has zero variance");
    return m.popularity_pearson;
}

}  // namespace cglab
