#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace cglab {

using QueryId = std::int64_t;
using CandidateId = std::int64_t;
using UserId = std::int64_t;

enum class Provenance : std::uint8_t { explicit_positive, implicit_negative, sampled_negative };

std::string_view to_string(Provenance p);
Provenance parse_provenance(std::string_view text);

struct Query {
    QueryId query_id = 0;
    UserId user_id = 0;
    int primary_language = 0;
    int hard_group = 0;
    std::vector<double> features;
};

struct Candidate {
    CandidateId candidate_id = 0;
    int language = 0;
    int hard_group = 0;
    double popularity = 0.0;  // expected engagement count over all users
    std::vector<double> features;
};

struct Interaction {
    QueryId query_id = 0;
    CandidateId candidate_id = 0;
    int label = 0;
    Provenance provenance = Provenance::explicit_positive;
    double weight = 1.0;
};

/// Throws DataError when label/provenance/weight are inconsistent.
void validate(const Interaction& r);

Interaction explicit_positive(QueryId q, CandidateId c);

// Pair-probability bands of the relevance taxonomy.
inline constexpr double kIrrelevantCeiling = 1e-3;
inline constexpr double kNotEngagingCeiling = 0.1;
inline constexpr double kEngagingFloor = 0.3;

enum class Relevance { extremely_irrelevant, not_engaging, intermediate, engaging };

struct WorldConfig {
    std::uint64_t seed = 7;
    int n_users = 2000;
    int n_items = 20000;
    int languages = 5;
    int latent_dim = 8;
    int hard_groups = 0;     // 0 selects 2 when languages == 1, otherwise 1
    int query_dim = 0;       // 0 selects the minimal layout plus padding
    int candidate_dim = 0;
    int padding_dims = 4;    // pure-noise feature columns
    double appeal_shape = 1.3;       // Lomax tail index of item base appeal
    double interest_scale = 2.5;
    double engagement_bias = -2.5;
    double appeal_coef = 0.35;
    double feature_noise = 0.25;
    double irrelevant_engagement = kIrrelevantCeiling;
    std::vector<double> language_marginal;  // empty: uniform

    int effective_hard_groups() const { return hard_groups > 0 ? hard_groups : (languages == 1 ? 2 : 1); }
    int minimal_query_dim() const;
    int minimal_candidate_dim() const;
    int effective_query_dim() const;
    int effective_candidate_dim() const;
    void validate() const;
    std::vector<std::pair<std::string, std::string>> echo() const;
};

/// Synthetic universe with known engagement probabilities. Ids equal indices:
/// query i belongs to user i, candidate j is item j.
class World {
public:
    const WorldConfig& config() const { return config_; }
    int languages() const { return config_.languages; }
    int latent_dim() const { return config_.latent_dim; }
    int query_dim() const { return query_dim_; }
    int candidate_dim() const { return candidate_dim_; }

    std::span<const Query> queries() const { return queries_; }
    std::span<const Candidate> candidates() const { return candidates_; }
    const Query& query(QueryId id) const;
    const Candidate& candidate(CandidateId id) const;

    double appeal(CandidateId c) const { return appeal_.at(static_cast<std::size_t>(c)); }
    std::span<const double> appeal() const { return appeal_; }
    double interest(QueryId q, CandidateId c) const;
    double partial_interest(QueryId q, CandidateId c, int dims) const;
    bool extremely_irrelevant(QueryId q, CandidateId c) const;

    /// Ground-truth engagement probability p(q, c).
    double engagement(QueryId q, CandidateId c) const;
    Relevance classify(QueryId q, CandidateId c) const;

private:
    friend World generate_world(const WorldConfig& config);

    WorldConfig config_;
    int query_dim_ = 0;
    int candidate_dim_ = 0;
    std::vector<Query> queries_;
    std::vector<Candidate> candidates_;
    std::vector<double> user_latent_;  // n_users x k
    std::vector<double> item_latent_;  // n_items x k
    std::vector<double> appeal_;
};

World generate_world(const WorldConfig& config);

struct RegionOccupancy {
    double extremely_irrelevant = 0;
    double not_engaging = 0;
    double intermediate = 0;
    double engaging = 0;
    double mean_engagement = 0;
    double max_matched_engagement = 0;
    double max_mismatched_engagement = 0;
};

/// Exhaustive scan over every (query, candidate) pair.
RegionOccupancy scan_regions(const World& world);

struct PolicyConfig {
    int slate_size = 50;
    double noise = 0.5;              // Gaussian sigma as a fraction of the score std
    double popularity_weight = 1.0;
    double interest_weight = 0.5;
    int interest_dims = 0;           // 0 selects half the latent dims
    std::uint64_t seed = 11;

    void validate() const;
    std::vector<std::pair<std::string, std::string>> echo() const;
};

struct ServedLog {
    int slate_size = 0;
    std::vector<Interaction> records;  // slate_size consecutive records per query

    std::span<const Interaction> slate(std::size_t query_index) const {
        return std::span<const Interaction>(records).subspan(query_index * slate_size, slate_size);
    }
};

/// Serves each query the top slate of eligible items (language matched and
/// hard-group compatible) by a noisy popularity + partial-interest score, and
/// labels each served pair by a Bernoulli draw of p(q, c).
ServedLog simulate_served_traffic(const World& world, const PolicyConfig& policy);

struct Rating {
    UserId user_id = 0;
    std::int64_t movie_id = 0;
    int rating = 0;
    std::int64_t timestamp = 0;
};

struct RatingsFile {
    std::vector<Rating> ratings;
    std::vector<std::string> warnings;
};

/// Reads `UserID::MovieID::Rating::Timestamp` lines.
RatingsFile load_movielens_1m(const std::filesystem::path& path);
RatingsFile parse_movielens(std::string_view text, const std::string& source = "<memory>");

/// Engagement records drawn from a synthetic world, shaped like a ratings
/// log: each user engages with items sampled proportionally to p(q, c).
std::vector<Rating> synthetic_ratings(const World& world, int mean_per_user, std::uint64_t seed);

/// World for synthetic ratings: one language, 5000 items and engagement
/// dominated by item appeal, so held-out users are predictable from movie
/// ids the way MovieLens users are.
WorldConfig ratings_world();

struct UserSplit {
    std::vector<UserId> train_users;
    std::vector<UserId> test_users;
    bool is_train(UserId u) const;
};

UserSplit split_users(std::vector<UserId> users, double train_fraction, std::uint64_t seed);

template <typename Record>
struct SplitRecords {
    std::vector<Record> train;
    std::vector<Record> test;
};

SplitRecords<Rating> split_by_user(std::span<const Rating> records, double train_fraction, std::uint64_t seed);
SplitRecords<Interaction> split_by_user(std::span<const Interaction> records, double train_fraction,
                                        std::uint64_t seed);

// Tab-separated exports with one header line.
void write_queries_tsv(const World& world, const std::filesystem::path& path);
void write_candidates_tsv(const World& world, const std::filesystem::path& path);
void write_interactions_tsv(std::span<const Interaction> records, const std::filesystem::path& path);
std::vector<Interaction> read_interactions_tsv(const std::filesystem::path& path);
void write_world_meta(const WorldConfig& world, const PolicyConfig& policy, const std::filesystem::path& path);
std::pair<WorldConfig, PolicyConfig> read_world_meta(const std::filesystem::path& path);

/// Writes queries.tsv, candidates.tsv, interactions.tsv and world.meta.
void export_world(const World& world, const PolicyConfig& policy, const ServedLog& log,
                  const std::filesystem::path& dir);

}  // namespace cglab
