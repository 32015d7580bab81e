#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cglab/dataset.hpp"
#include "cglab/metrics.hpp"
#include "cglab/report.hpp"
#include "cglab/sampling.hpp"
#include "cglab/tower.hpp"

namespace cglab {

struct BundleConfig {
    double train_fraction = 0.8;
    int test_negatives_per_positive = 20;  // sampled negatives in the sampled-negative test
    std::uint64_t seed = 3;

    void validate() const;
    ConfigEcho echo() const;
};

/// A world, its served log and the user split every pipeline shares.
struct DatasetBundle {
    std::shared_ptr<const World> world;
    PolicyConfig policy;
    BundleConfig config;
    UserSplit split;
    std::vector<Interaction> train_served;  // served records of train users
    std::vector<Interaction> test_served;   // served records of test users (implicit-negative test)
    std::vector<Interaction> test_sampled;  // test positives plus uniform sampled negatives

    std::vector<Interaction> train_positives() const;
    std::vector<CandidateId> corpus() const;
};

DatasetBundle make_bundle(std::shared_ptr<const World> world, const PolicyConfig& policy,
                          const BundleConfig& config);
DatasetBundle make_bundle(const WorldConfig& world, const PolicyConfig& policy, const BundleConfig& config);

enum class LossKind { pointwise, triplet };
enum class NegativeSource { implicit, sampled };

std::string_view to_string(LossKind k);
LossKind parse_loss_kind(std::string_view text);
std::string_view to_string(NegativeSource s);
NegativeSource parse_negative_source(std::string_view text);

struct TrainConfig {
    LossKind loss = LossKind::pointwise;
    NegativeSource negatives = NegativeSource::sampled;
    SamplerConfig sampler;
    std::optional<PopularityWeightConfig> popularity_weighting;
    std::vector<int> hidden{128, 64};
    int embedding_dim = 32;
    double initial_scale = 5.0;
    TripletConfig triplet;
    int epochs = 5;
    int batch_size = 256;
    double learning_rate = 1e-3;
    std::uint64_t seed = 1;  // parameter initialisation and shuffling
    KnnEvalConfig eval;
    bool knn_eval = true;

    void validate() const;
    ConfigEcho echo() const;
};

struct EvalOptions {
    KnnEvalConfig knn;
    bool knn_eval = true;
};

/// Sampled-negative test AUCs, implicit-negative (served) test AUCs grouped
/// per user, and the KNN diagnostics.
ExperimentReport evaluate_model(const TwoTowerModel& model, const DatasetBundle& bundle, const EvalOptions& options);

struct TrainResult {
    TwoTowerModel model;
    ExperimentReport report;
    std::vector<double> epoch_losses;
    std::size_t steps = 0;
};

TrainResult train(const DatasetBundle& bundle, const TrainConfig& config);

/// Training on an explicit record list (pointwise only), used when the data
/// is not drawn from a bundle's served log.
TrainResult train_pointwise_on(const DatasetBundle& bundle, std::span<const Interaction> records,
                               const TrainConfig& config);

struct FineTuneConfig {
    std::filesystem::path base_checkpoint;
    double base_learning_rate = 1e-3;
    double lr_scale = 0.1;
    int epochs = 1;
    std::vector<std::string> frozen_layers;
    int batch_size = 256;
    std::uint64_t seed = 2;

    void validate() const;
    ConfigEcho echo() const;
};

struct FineTuneResult {
    TwoTowerModel model;
    ExperimentReport report;
    std::size_t epochs_run = 0;
    std::size_t steps = 0;
    double learning_rate = 0.0;
};

/// Continues pointwise training at base_learning_rate * lr_scale on records
/// that carry explicit positives and implicit negatives only.
FineTuneResult fine_tune(const TwoTowerModel& base, const FineTuneConfig& config, std::span<const Interaction> data,
                         const DatasetBundle& bundle, const EvalOptions& eval);
/// Loads config.base_checkpoint first.
FineTuneResult fine_tune(const FineTuneConfig& config, std::span<const Interaction> data, const DatasetBundle& bundle,
                         const EvalOptions& eval);

/// Runs `work(i)` for i in [0, n) on up to `threads` workers. Results must be
/// written to slot i so ordering never depends on scheduling.
void parallel_for(std::size_t n, int threads, const std::function<void(std::size_t)>& work);

/// One model per ratio; rows (ratio, auc, grouped_auc, served_grouped_auc,
/// mismatch). All points share the initialisation seed; sampling seeds are
/// derived per point.
ExperimentReport sweep_negative_ratio(const DatasetBundle& bundle, std::span<const int> ratios,
                                      const TrainConfig& base, int threads = 1);

/// Smallest grid t after which every later marginal AUC gain is below
/// `fraction` of the total gain; nullopt for fewer than two points.
std::optional<double> find_elbow(std::span<const double> t, std::span<const double> auc, double fraction = 0.1);

/// In-batch triplet training per t; rows (t, auc, grouped_auc, mismatch,
/// pearson) plus an elbow flag.
ExperimentReport sweep_popularity_t(const DatasetBundle& bundle, std::span<const double> t_values,
                                    const TrainConfig& base, int threads = 1);

struct IdClassifierConfig {
    int embedding_dim = 32;
    std::vector<int> hidden{64};
    int epochs = 4;
    int batch_size = 256;
    double learning_rate = 3e-3;

    void validate() const;
    ConfigEcho echo() const;
};

struct RatingExample {
    std::int64_t user = 0;   // dense user index
    std::int64_t movie = 0;  // dense movie index
    int label = 0;
};

/// User and movie id-embedding tables feeding a rectifier MLP head with a
/// single logit, trained with cross-entropy.
class IdClassifier {
public:
    IdClassifier(std::size_t n_users, std::size_t n_movies, const IdClassifierConfig& config, std::uint64_t seed);

    double logit(std::int64_t user, std::int64_t movie) const;
    double predict(std::int64_t user, std::int64_t movie) const;
    std::vector<double> predict(std::span<const RatingExample> examples) const;
    /// Returns the mean loss of each epoch.
    std::vector<double> fit(std::span<const RatingExample> examples, std::uint64_t shuffle_seed);
    /// Mean cross-entropy and its gradient over a batch.
    double loss_grad(std::span<const RatingExample> batch, std::vector<double>& gradient) const;

    std::span<const double> parameters() const { return params_; }
    std::span<double> parameters() { return params_; }
    std::uint64_t digest() const;

private:
    std::vector<double> logits(std::span<const RatingExample> examples) const;

    std::size_t n_users_, n_movies_;
    IdClassifierConfig config_;
    std::vector<double> params_;
    std::vector<std::size_t> layer_offset_;  // weight offset per head layer
    std::vector<int> dims_;                  // head layer widths, input first
};

struct BiasSimConfig {
    std::vector<double> taus{0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8};
    IdClassifierConfig classifier;
    int negatives_per_positive = 1;
    double train_fraction = 0.8;
    bool filter_all_examples = true;  // false: only negatives are filtered
    std::uint64_t seed = 17;

    void validate() const;
    ConfigEcho echo() const;
};

struct BiasSimData {
    std::vector<RatingExample> train, test;
    std::size_t n_users = 0, n_movies = 0;
};

/// Every record becomes a positive, uniform random (user, movie) pairs that
/// are not positives become negatives, and the split is by user.
BiasSimData build_bias_sim_data(std::span<const Rating> records, const BiasSimConfig& config);

/// Examples whose score exceeds tau (positives only when !filter_all).
std::vector<RatingExample> filter_by_score(std::span<const RatingExample> examples, std::span<const double> scores,
                                           double tau, bool filter_all);

/// Rows (tau, train_examples, test_examples, biased_test_auc, full_test_auc,
/// model_digest); the unbiased model's full-test AUC is the baseline metric.
ExperimentReport run_bias_simulation(std::span<const Rating> records, const BiasSimConfig& config, int threads = 1);

struct TriadConfig {
    TrainConfig implicit_model;  // A: served positives and implicit negatives
    TrainConfig random_model;    // B: served positives and uniform sampled negatives
    FineTuneConfig fine_tune;    // C: B fine-tuned on A's data
    EvalOptions eval;

    TriadConfig();
    void validate() const;
    ConfigEcho echo() const;
};

struct TriadResult {
    ExperimentReport report;
    std::vector<TwoTowerModel> models;  // A, B, C
};

/// Rows per model: (model, served_auc, served_grouped_auc, sampled_auc,
/// sampled_grouped_auc, mismatch).
TriadResult run_model_triad(const DatasetBundle& bundle, const TriadConfig& config);

}  // namespace cglab
