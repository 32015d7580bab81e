#include "cglab/pipelines.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <exception>
#include <mutex>
#include <numeric>
#include <thread>
#include <unordered_map>

#include "cglab/errors.hpp"
#include "cglab/random.hpp"
#include "features.hpp"
#include "format.hpp"

namespace cglab {

namespace {

constexpr std::uint64_t kSplitStream = 61;
constexpr std::uint64_t kTestNegativeStream = 62;
constexpr std::uint64_t kShuffleStream = 63;
constexpr std::uint64_t kEpochSamplerStream = 64;
constexpr std::uint64_t kSweepStream = 65;

std::string join_ints(const std::vector<int>& v) {
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
    return s;
}

double seconds_since(std::chrono::steady_clock::time_point start) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

/// Rethrows the active exception with `prefix` prepended, keeping its type.
[[noreturn]] void rethrow_annotated(const std::string& prefix) {
    try {
        throw;
    } catch (const ParseError&) {
        throw;
    } catch (const MissingFileError&) {
        throw;
    } catch (const DataError& e) {
        throw DataError(prefix + e.what());
    } catch (const ConfigError& e) {
        throw ConfigError(prefix + e.what());
    } catch (const NumericalError& e) {
        throw NumericalError(prefix + e.what());
    }
    throw;
}

template <typename T>
void shuffle_in_place(std::vector<T>& v, std::uint64_t seed) {
    Rng rng(seed);
    for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[rng.below(i)]);
}

/// Maps entity ids to batch columns in first-seen order.
class ColumnIndex {
public:
    int operator()(std::int64_t id) {
        auto [it, inserted] = index_.try_emplace(id, static_cast<int>(ids_.size()));
        if (inserted) ids_.push_back(static_cast<std::size_t>(id));
        return it->second;
    }
    const std::vector<std::size_t>& ids() const { return ids_; }

private:
    std::unordered_map<std::int64_t, int> index_;
    std::vector<std::size_t> ids_;
};

Eigen::MatrixXd gather(const Eigen::MatrixXd& all, const std::vector<std::size_t>& cols) {
    Eigen::MatrixXd out(all.rows(), static_cast<Eigen::Index>(cols.size()));
    for (std::size_t i = 0; i < cols.size(); ++i)
        out.col(static_cast<Eigen::Index>(i)) = all.col(static_cast<Eigen::Index>(cols[i]));
    return out;
}

/// Shared minibatch loop for both losses.
class Trainer {
public:
    Trainer(const World& world, TwoTowerModel& model, double lr, std::vector<std::uint8_t> mask)
        : world_(world),
          model_(model),
          lr_(lr),
          mask_(std::move(mask)),
          queries_(detail::query_features(world)),
          candidates_(detail::candidate_features(world)) {}

    double pointwise_epoch(std::vector<Interaction> records, int batch_size, std::uint64_t shuffle_seed, int epoch) {
        shuffle_in_place(records, shuffle_seed);
        double total = 0, weight = 0;
        std::size_t batch_no = 0;
        for (std::size_t start = 0; start < records.size(); start += static_cast<std::size_t>(batch_size), ++batch_no) {
            const std::size_t end = std::min(records.size(), start + static_cast<std::size_t>(batch_size));
            ColumnIndex qi, ci;
            PairBatch batch;
            batch.pairs.reserve(end - start);
            for (std::size_t i = start; i < end; ++i) {
                const auto& r = records[i];
                batch.pairs.push_back({qi(r.query_id), ci(r.candidate_id), static_cast<double>(r.label), r.weight});
            }
            batch.query_features = gather(queries_, qi.ids());
            batch.candidate_features = gather(candidates_, ci.ids());
            const double loss = step(epoch, batch_no, [&] { return pointwise_loss_grad(model_, batch); });
            total += loss * static_cast<double>(end - start);
            weight += static_cast<double>(end - start);
        }
        return weight > 0 ? total / weight : 0.0;
    }

    double triplet_epoch(std::vector<Triplet> triplets, int batch_size, std::uint64_t shuffle_seed, int epoch,
                         const TripletConfig& cfg) {
        shuffle_in_place(triplets, shuffle_seed);
        double total = 0, weight = 0;
        std::size_t batch_no = 0;
        for (std::size_t start = 0; start < triplets.size();
             start += static_cast<std::size_t>(batch_size), ++batch_no) {
            const std::size_t end = std::min(triplets.size(), start + static_cast<std::size_t>(batch_size));
            const double loss = triplet_step(std::span<const Triplet>(triplets).subspan(start, end - start), epoch,
                                             batch_no, cfg);
            total += loss * static_cast<double>(end - start);
            weight += static_cast<double>(end - start);
        }
        return weight > 0 ? total / weight : 0.0;
    }

    double in_batch_epoch(std::vector<Interaction> positives, int batch_size, std::uint64_t shuffle_seed, int epoch,
                          const SamplerConfig& sampler, const std::optional<PopularityWeightConfig>& pop,
                          const TripletConfig& cfg) {
        shuffle_in_place(positives, shuffle_seed);
        double total = 0, weight = 0;
        std::size_t batch_no = 0;
        for (std::size_t start = 0; start < positives.size();
             start += static_cast<std::size_t>(batch_size), ++batch_no) {
            const std::size_t end = std::min(positives.size(), start + static_cast<std::size_t>(batch_size));
            if (end - start < 2) continue;
            auto triplets = in_batch_negatives(std::span<const Interaction>(positives).subspan(start, end - start),
                                               sampler, static_cast<std::uint64_t>(epoch) * 1000003ULL + batch_no);
            if (pop) apply_popularity_weights(triplets, popularity_lookup(), *pop);
            const double loss = triplet_step(triplets, epoch, batch_no, cfg);
            total += loss * static_cast<double>(end - start);
            weight += static_cast<double>(end - start);
        }
        return weight > 0 ? total / weight : 0.0;
    }

    std::function<double(CandidateId)> popularity_lookup() const {
        return [this](CandidateId c) { return world_.candidate(c).popularity; };
    }

    std::size_t steps() const { return state_.step > 0 ? static_cast<std::size_t>(state_.step) : 0; }

private:
    double triplet_step(std::span<const Triplet> triplets, int epoch, std::size_t batch_no, const TripletConfig& cfg) {
        ColumnIndex qi, ci;
        TripletBatch batch;
        batch.triplets.reserve(triplets.size());
        for (const auto& t : triplets)
            batch.triplets.push_back({qi(t.query_id), ci(t.positive_id), ci(t.negative_id), t.weight});
        batch.query_features = gather(queries_, qi.ids());
        batch.candidate_features = gather(candidates_, ci.ids());
        return step(epoch, batch_no, [&] { return triplet_loss_grad(model_, batch, cfg); });
    }

    template <typename F>
    double step(int epoch, std::size_t batch_no, F&& loss_grad) {
        LossGrad lg;
        try {
            lg = loss_grad();
        } catch (const NumericalError& e) {
            throw NumericalError("training diverged at epoch " + std::to_string(epoch) + ", batch " +
                                 std::to_string(batch_no) + ": " + e.what());
        }
        optimizer_step(model_.parameters(), lg.gradient, state_, lr_, mask_);
        return lg.loss;
    }

    const World& world_;
    TwoTowerModel& model_;
    double lr_;
    std::vector<std::uint8_t> mask_;
    AdamState state_;
    Eigen::MatrixXd queries_;
    Eigen::MatrixXd candidates_;
};

TowerConfig tower_config(const World& world, const TrainConfig& c) {
    TowerConfig tc;
    tc.query_input_dim = world.query_dim();
    tc.candidate_input_dim = world.candidate_dim();
    tc.hidden = c.hidden;
    tc.embedding_dim = c.embedding_dim;
    return tc;
}

std::vector<Interaction> positives_of(std::span<const Interaction> records) {
    std::vector<Interaction> out;
    for (const auto& r : records)
        if (r.label == 1) out.push_back(r);
    return out;
}

ConfigEcho bundle_echo(const DatasetBundle& bundle) {
    ConfigEcho echo = bundle.world->config().echo();
    for (auto& kv : bundle.policy.echo()) echo.push_back(kv);
    for (auto& kv : bundle.config.echo()) echo.push_back(kv);
    return echo;
}

void merge_metrics(ExperimentReport& into, const ExperimentReport& from, const std::string& prefix = "") {
    for (const auto& [k, v] : from.metrics) into.set_metric(prefix + k, v);
}

}  // namespace

void BundleConfig::validate() const {
    std::vector<std::string> problems;
    if (!(train_fraction > 0 && train_fraction < 1)) problems.push_back("train_fraction must lie in (0, 1)");
    if (test_negatives_per_positive < 1) problems.push_back("test_negatives_per_positive must be >= 1");
    if (!problems.empty()) throw ConfigError(join_problems("bundle config", problems));
}

ConfigEcho BundleConfig::echo() const {
    return {{"bundle.train_fraction", format_double(train_fraction)},
            {"bundle.test_negatives_per_positive", std::to_string(test_negatives_per_positive)},
            {"bundle.seed", std::to_string(seed)}};
}

std::vector<Interaction> DatasetBundle::train_positives() const { return positives_of(train_served); }

std::vector<CandidateId> DatasetBundle::corpus() const {
    std::vector<CandidateId> ids;
    ids.reserve(world->candidates().size());
    for (const auto& c : world->candidates()) ids.push_back(c.candidate_id);
    return ids;
}

DatasetBundle make_bundle(std::shared_ptr<const World> world, const PolicyConfig& policy,
                          const BundleConfig& config) {
    config.validate();
    DatasetBundle b;
    b.world = std::move(world);
    b.policy = policy;
    b.config = config;
    const ServedLog log = simulate_served_traffic(*b.world, policy);
    std::vector<UserId> users;
    for (const auto& q : b.world->queries()) users.push_back(q.user_id);
    std::sort(users.begin(), users.end());
    users.erase(std::unique(users.begin(), users.end()), users.end());
    b.split = split_users(users, config.train_fraction, derive_seed(config.seed, kSplitStream));
    for (const auto& r : log.records)
        (b.split.is_train(b.world->query(r.query_id).user_id) ? b.train_served : b.test_served).push_back(r);

    const auto test_pos = positives_of(b.test_served);
    SamplerConfig sc;
    sc.negatives_per_positive = config.test_negatives_per_positive;
    sc.seed = derive_seed(config.seed, kTestNegativeStream);
    const auto corpus = b.corpus();
    auto neg = sample_uniform_negatives(test_pos, corpus, sc);
    b.test_sampled = test_pos;
    b.test_sampled.insert(b.test_sampled.end(), neg.negatives.begin(), neg.negatives.end());
    return b;
}

DatasetBundle make_bundle(const WorldConfig& world, const PolicyConfig& policy, const BundleConfig& config) {
    return make_bundle(std::make_shared<const World>(generate_world(world)), policy, config);
}

std::string_view to_string(LossKind k) { return k == LossKind::pointwise ? "pointwise" : "triplet"; }

LossKind parse_loss_kind(std::string_view text) {
    if (text == "pointwise") return LossKind::pointwise;
    if (text == "triplet") return LossKind::triplet;
    throw ConfigError("unknown loss '" + std::string(text) + "'");
}

std::string_view to_string(NegativeSource s) { return s == NegativeSource::implicit ? "implicit" : "sampled"; }

NegativeSource parse_negative_source(std::string_view text) {
    if (text == "implicit") return NegativeSource::implicit;
    if (text == "sampled") return NegativeSource::sampled;
    throw ConfigError("unknown negative source '" + std::string(text) + "'");
}

void TrainConfig::validate() const {
    std::vector<std::string> problems;
    if (epochs < 1) problems.push_back("epochs must be >= 1");
    if (batch_size < 1) problems.push_back("batch_size must be >= 1");
    if (!(learning_rate > 0) || !std::isfinite(learning_rate)) problems.push_back("learning_rate must be > 0");
    if (!(initial_scale > 0)) problems.push_back("initial_scale must be > 0");
    if (embedding_dim < 2) problems.push_back("embedding_dim must be >= 2");
    for (int h : hidden)
        if (h < 1) problems.push_back("hidden layer sizes must be >= 1");
    if (sampler.mode == SamplerMode::in_batch && loss != LossKind::triplet)
        problems.push_back("in_batch sampling requires the triplet loss");
    if (loss == LossKind::triplet && negatives == NegativeSource::implicit)
        problems.push_back("triplet loss needs sampled negatives");
    if (sampler.mode == SamplerMode::in_batch && batch_size < 2) problems.push_back("in_batch needs batch_size >= 2");
    if (sampler.negatives_per_positive < 1) problems.push_back("sampler.negatives_per_positive must be >= 1");
    if (!(triplet.margin > 0 && triplet.margin < 2)) problems.push_back("margin must lie in (0, 2)");
    if (popularity_weighting && !(popularity_weighting->t > 0)) problems.push_back("popularity t must be > 0");
    try {
        eval.validate();
    } catch (const ConfigError& e) {
        problems.push_back(e.what());
    }
    if (!problems.empty()) throw ConfigError(join_problems("train config", problems));
}

ConfigEcho TrainConfig::echo() const {
    ConfigEcho e{{"loss", std::string(to_string(loss))},
                 {"negatives", std::string(to_string(negatives))},
                 {"sampler.mode", std::string(to_string(sampler.mode))},
                 {"sampler.negatives_per_positive", std::to_string(sampler.negatives_per_positive)},
                 {"sampler.filter_known_positives", sampler.filter_known_positives ? "true" : "false"},
                 {"sampler.seed", std::to_string(sampler.seed)},
                 {"sampler.max_retries", std::to_string(sampler.max_retries)},
                 {"sampler.full_cross", sampler.full_cross ? "true" : "false"},
                 {"sampler.frequency_smoothing", format_double(sampler.frequency_smoothing)},
                 {"popularity_t", popularity_weighting ? format_double(popularity_weighting->t) : "none"},
                 {"hidden", join_ints(hidden)},
                 {"embedding_dim", std::to_string(embedding_dim)},
                 {"initial_scale", format_double(initial_scale)},
                 {"margin", format_double(triplet.margin)},
                 {"epochs", std::to_string(epochs)},
                 {"batch_size", std::to_string(batch_size)},
                 {"learning_rate", format_double(learning_rate)},
                 {"seed", std::to_string(seed)},
                 {"knn_eval", knn_eval ? "true" : "false"}};
    for (auto& [k, v] : eval.echo()) e.emplace_back("eval." + k, v);
    return e;
}

ExperimentReport evaluate_model(const TwoTowerModel& model, const DatasetBundle& bundle, const EvalOptions& options) {
    const World& world = *bundle.world;
    const Eigen::MatrixXd q = model.embed(Tower::query, detail::query_features(world));
    const Eigen::MatrixXd c = model.embed(Tower::candidate, detail::candidate_features(world));
    auto scored = [&](std::span<const Interaction> records) {
        std::vector<ScoredExample> out;
        out.reserve(records.size());
        for (const auto& r : records) {
            const double cos = q.col(static_cast<Eigen::Index>(r.query_id)).dot(c.col(static_cast<Eigen::Index>(r.candidate_id)));
            out.push_back({world.query(r.query_id).user_id, sigmoid(model.scale() * cos + model.offset()), r.label});
        }
        return out;
    };
    ExperimentReport report;
    report.kind = "evaluate";
    const auto sampled = scored(bundle.test_sampled);
    const auto served = scored(bundle.test_served);
    report.set_metric("sampled_auc", roc_auc(sampled));
    const auto sg = grouped_roc_auc(sampled);
    report.set_metric("sampled_grouped_auc", sg.mean);
    report.set_metric("served_auc", roc_auc(served));
    const auto vg = grouped_roc_auc(served);
    report.set_metric("served_grouped_auc", vg.mean);
    report.set_metric("served_groups_used", static_cast<double>(vg.groups_used));
    report.set_metric("served_groups_skipped", static_cast<double>(vg.groups_skipped));
    if (options.knn_eval) {
        const auto knn = knn_metrics(model, world, options.knn);
        report.set_metric("mismatch_rate", knn.mismatch_rate);
        if (knn.pearson_defined) report.set_metric("popularity_pearson", knn.popularity_pearson);
    }
    report.add_config("", bundle_echo(bundle));
    report.add_config("eval", options.knn.echo());
    return report;
}

TrainResult train(const DatasetBundle& bundle, const TrainConfig& config) {
    config.validate();
    if (config.loss == LossKind::pointwise && config.negatives == NegativeSource::implicit)
        return train_pointwise_on(bundle, bundle.train_served, config);

    const auto start = std::chrono::steady_clock::now();
    const World& world = *bundle.world;
    const auto positives = bundle.train_positives();
    if (positives.empty()) throw DataError("training data holds no positives");
    TrainResult result{TwoTowerModel(tower_config(world, config), config.seed, config.initial_scale), {}, {}, 0};
    Trainer trainer(world, result.model, config.learning_rate, {});
    const auto corpus = bundle.corpus();
    const auto pop = trainer.popularity_lookup();

    for (int epoch = 0; epoch < config.epochs; ++epoch) {
        const std::uint64_t shuffle = derive_seed(config.seed, kShuffleStream, static_cast<std::uint64_t>(epoch));
        SamplerConfig sc = config.sampler;
        sc.seed = derive_seed(config.sampler.seed, kEpochSamplerStream, static_cast<std::uint64_t>(epoch));
        double loss = 0;
        if (config.sampler.mode == SamplerMode::in_batch) {
            loss = trainer.in_batch_epoch(positives, config.batch_size, shuffle, epoch, sc,
                                          config.popularity_weighting, config.triplet);
        } else {
            auto sample = config.sampler.mode == SamplerMode::uniform
                              ? sample_uniform_negatives(positives, corpus, sc)
                              : sample_frequency_negatives(positives, bundle.train_served, sc, corpus);
            if (config.popularity_weighting) apply_popularity_weights(sample.negatives, pop, *config.popularity_weighting);
            if (config.loss == LossKind::pointwise) {
                std::vector<Interaction> records = positives;
                records.insert(records.end(), sample.negatives.begin(), sample.negatives.end());
                loss = trainer.pointwise_epoch(std::move(records), config.batch_size, shuffle, epoch);
            } else {
                std::vector<Triplet> triplets;
                triplets.reserve(sample.negatives.size());
                for (std::size_t i = 0; i < sample.negatives.size(); ++i) {
                    const auto& p = positives[sample.source[i]];
                    triplets.push_back({p.query_id, p.candidate_id, sample.negatives[i].candidate_id,
                                        sample.negatives[i].weight});
                }
                loss = trainer.triplet_epoch(std::move(triplets), config.batch_size, shuffle, epoch, config.triplet);
            }
        }
        result.epoch_losses.push_back(loss);
    }
    result.steps = trainer.steps();

    result.report = evaluate_model(result.model, bundle, {config.eval, config.knn_eval});
    result.report.kind = "train";
    result.report.seed = config.seed;
    result.report.add_config("train", config.echo());
    result.report.set_metric("final_train_loss", result.epoch_losses.back());
    result.report.set_metric("steps", static_cast<double>(result.steps));
    result.report.wall_seconds = seconds_since(start);
    return result;
}

TrainResult train_pointwise_on(const DatasetBundle& bundle, std::span<const Interaction> records,
                               const TrainConfig& config) {
    config.validate();
    if (config.loss != LossKind::pointwise) throw ConfigError("record training is pointwise only");
    if (std::none_of(records.begin(), records.end(), [](const Interaction& r) { return r.label == 1; }))
        throw DataError("training data holds no positives");
    for (const auto& r : records) validate(r);
    const auto start = std::chrono::steady_clock::now();
    const World& world = *bundle.world;
    TrainResult result{TwoTowerModel(tower_config(world, config), config.seed, config.initial_scale), {}, {}, 0};
    Trainer trainer(world, result.model, config.learning_rate, {});
    const std::vector<Interaction> data(records.begin(), records.end());
    for (int epoch = 0; epoch < config.epochs; ++epoch)
        result.epoch_losses.push_back(trainer.pointwise_epoch(
            data, config.batch_size, derive_seed(config.seed, kShuffleStream, static_cast<std::uint64_t>(epoch)),
            epoch));
    result.steps = trainer.steps();
    result.report = evaluate_model(result.model, bundle, {config.eval, config.knn_eval});
    result.report.kind = "train";
    result.report.seed = config.seed;
    result.report.add_config("train", config.echo());
    result.report.set_metric("final_train_loss", result.epoch_losses.back());
    result.report.set_metric("steps", static_cast<double>(result.steps));
    result.report.wall_seconds = seconds_since(start);
    return result;
}

void FineTuneConfig::validate() const {
    std::vector<std::string> problems;
    if (!(lr_scale > 0 && lr_scale <= 1)) problems.push_back("lr_scale must lie in (0, 1]");
    if (!(base_learning_rate > 0)) problems.push_back("base_learning_rate must be > 0");
    if (epochs < 1) problems.push_back("epochs must be >= 1");
    if (batch_size < 1) problems.push_back("batch_size must be >= 1");
    if (!problems.empty()) throw ConfigError(join_problems("fine-tune config", problems));
}

ConfigEcho FineTuneConfig::echo() const {
    std::string frozen;
    for (std::size_t i = 0; i < frozen_layers.size(); ++i) frozen += (i ? "," : "") + frozen_layers[i];
    return {{"base_checkpoint", base_checkpoint.string()},
            {"base_learning_rate", format_double(base_learning_rate)},
            {"lr_scale", format_double(lr_scale)},
            {"epochs", std::to_string(epochs)},
            {"frozen_layers", frozen},
            {"batch_size", std::to_string(batch_size)},
            {"seed", std::to_string(seed)}};
}

FineTuneResult fine_tune(const TwoTowerModel& base, const FineTuneConfig& config, std::span<const Interaction> data,
                         const DatasetBundle& bundle, const EvalOptions& eval) {
    config.validate();
    if (data.empty()) throw DataError("fine-tune data is empty");
    for (const auto& r : data) {
        validate(r);
        if (r.provenance == Provenance::sampled_negative)
            throw DataError("fine-tune data must hold explicit positives and implicit negatives only; found a "
                            "sampled_negative row (query " + std::to_string(r.query_id) + ", candidate " +
                            std::to_string(r.candidate_id) + ")");
    }
    const auto start = std::chrono::steady_clock::now();
    FineTuneResult result{base, {}, 0, 0, config.base_learning_rate * config.lr_scale};
    const ExperimentReport before = evaluate_model(base, bundle, eval);
    Trainer trainer(*bundle.world, result.model, result.learning_rate, base.trainable_mask(config.frozen_layers));
    const std::vector<Interaction> records(data.begin(), data.end());
    double last_loss = 0;
    for (int epoch = 0; epoch < config.epochs; ++epoch) {
        last_loss = trainer.pointwise_epoch(records, config.batch_size,
                                            derive_seed(config.seed, kShuffleStream, static_cast<std::uint64_t>(epoch)),
                                            epoch);
        ++result.epochs_run;
    }
    result.steps = trainer.steps();
    const ExperimentReport after = evaluate_model(result.model, bundle, eval);

    ExperimentReport& rep = result.report;
    rep.kind = "finetune";
    rep.seed = config.seed;
    rep.config = after.config;
    rep.add_config("finetune", config.echo());
    merge_metrics(rep, before, "before.");
    merge_metrics(rep, after, "after.");
    for (const auto& [k, v] : after.metrics)
        if (auto b = before.metric(k)) rep.set_metric("delta." + k, v - *b);
    rep.set_metric("final_train_loss", last_loss);
    rep.set_metric("epochs_run", static_cast<double>(result.epochs_run));
    rep.set_metric("steps", static_cast<double>(result.steps));
    rep.set_metric("learning_rate", result.learning_rate);
    rep.wall_seconds = seconds_since(start);
    return result;
}

FineTuneResult fine_tune(const FineTuneConfig& config, std::span<const Interaction> data, const DatasetBundle& bundle,
                         const EvalOptions& eval) {
    config.validate();
    return fine_tune(load_checkpoint(config.base_checkpoint), config, data, bundle, eval);
}

void parallel_for(std::size_t n, int threads, const std::function<void(std::size_t)>& work) {
    const auto workers = static_cast<std::size_t>(std::max(1, threads));
    if (workers == 1 || n <= 1) {
        for (std::size_t i = 0; i < n; ++i) work(i);
        return;
    }
    std::vector<std::exception_ptr> errors(n);
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < std::min(workers, n); ++w)
        pool.emplace_back([&] {
            for (std::size_t i; (i = next.fetch_add(1)) < n;) {
                try {
                    work(i);
                } catch (...) {
                    errors[i] = std::current_exception();
                }
            }
        });
    for (auto& t : pool) t.join();
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
}

ExperimentReport sweep_negative_ratio(const DatasetBundle& bundle, std::span<const int> ratios,
                                      const TrainConfig& base, int threads) {
    if (ratios.empty()) throw ConfigError("ratio sweep needs at least one ratio");
    for (std::size_t i = 0; i < ratios.size(); ++i) {
        if (ratios[i] < 1) throw ConfigError("ratios must be >= 1");
        if (i > 0 && ratios[i] == ratios[i - 1]) throw ConfigError("duplicate ratio " + std::to_string(ratios[i]));
        if (i > 0 && ratios[i] < ratios[i - 1]) throw ConfigError("ratios must be ascending");
    }
    if (base.sampler.mode == SamplerMode::in_batch || base.negatives != NegativeSource::sampled)
        throw ConfigError("ratio sweep needs a uniform or frequency sampler");
    base.validate();
    const auto start = std::chrono::steady_clock::now();

    std::vector<ExperimentReport> points(ratios.size());
    parallel_for(ratios.size(), threads, [&](std::size_t i) {
        TrainConfig cfg = base;
        cfg.sampler.negatives_per_positive = ratios[i];
        cfg.sampler.seed = derive_seed(base.sampler.seed, kSweepStream, i);
        try {
            points[i] = train(bundle, cfg).report;
        } catch (...) {
            rethrow_annotated("ratio " + std::to_string(ratios[i]) + ": ");
        }
    });

    ExperimentReport report;
    report.kind = "sweep-negatives";
    report.seed = base.seed;
    report.add_config("", bundle_echo(bundle));
    report.add_config("train", base.echo());
    report.config.emplace_back("ratios", join_ints({ratios.begin(), ratios.end()}));
    report.columns = {"ratio", "sampled_auc", "sampled_grouped_auc", "served_auc", "served_grouped_auc",
                      "mismatch_rate", "final_train_loss"};
    for (std::size_t i = 0; i < ratios.size(); ++i) {
        const auto& p = points[i];
        report.rows.push_back({static_cast<double>(ratios[i]), p.metric("sampled_auc"), p.metric("sampled_grouped_auc"),
                               p.metric("served_auc"), p.metric("served_grouped_auc"), p.metric("mismatch_rate"),
                               p.metric("final_train_loss")});
    }
    report.wall_seconds = seconds_since(start);
    return report;
}

std::optional<double> find_elbow(std::span<const double> t, std::span<const double> auc, double fraction) {
    if (t.size() != auc.size()) throw ConfigError("elbow: grid and metric lengths differ");
    if (t.size() < 2) return std::nullopt;
    const double total = auc.back() - auc.front();
    if (!(total > 0)) return t.front();
    // Walk back from the end while every remaining step stays small.
    std::size_t elbow = t.size() - 1;
    while (elbow > 0 && auc[elbow] - auc[elbow - 1] < fraction * total) --elbow;
    return t[elbow];
}

ExperimentReport sweep_popularity_t(const DatasetBundle& bundle, std::span<const double> t_values,
                                    const TrainConfig& base, int threads) {
    if (t_values.empty()) throw ConfigError("popularity sweep needs at least one t");
    for (std::size_t i = 0; i < t_values.size(); ++i) {
        if (!(t_values[i] > 0) || !std::isfinite(t_values[i])) throw ConfigError("t values must be finite and > 0");
        if (i > 0 && !(t_values[i] > t_values[i - 1])) throw ConfigError("t values must be strictly ascending");
    }
    if (base.loss != LossKind::triplet || base.sampler.mode != SamplerMode::in_batch)
        throw ConfigError("popularity sweep needs in_batch sampling with the triplet loss");
    base.validate();
    const auto start = std::chrono::steady_clock::now();

    std::vector<ExperimentReport> points(t_values.size());
    parallel_for(t_values.size(), threads, [&](std::size_t i) {
        TrainConfig cfg = base;
        cfg.popularity_weighting = PopularityWeightConfig{t_values[i]};
        cfg.sampler.seed = derive_seed(base.sampler.seed, kSweepStream, i);
        try {
            points[i] = train(bundle, cfg).report;
        } catch (...) {
            rethrow_annotated("t " + format_double(t_values[i]) + ": ");
        }
    });

    ExperimentReport report;
    report.kind = "sweep-popularity";
    report.seed = base.seed;
    report.add_config("", bundle_echo(bundle));
    report.add_config("train", base.echo());
    std::string grid;
    for (std::size_t i = 0; i < t_values.size(); ++i) grid += (i ? "," : "") + format_double(t_values[i]);
    report.config.emplace_back("t_values", grid);
    report.columns = {"t", "sampled_auc", "sampled_grouped_auc", "served_grouped_auc", "mismatch_rate",
                      "popularity_pearson"};
    std::vector<double> aucs;
    for (std::size_t i = 0; i < t_values.size(); ++i) {
        const auto& p = points[i];
        report.rows.push_back({t_values[i], p.metric("sampled_auc"), p.metric("sampled_grouped_auc"),
                               p.metric("served_grouped_auc"), p.metric("mismatch_rate"),
                               p.metric("popularity_pearson")});
        aucs.push_back(p.metric("sampled_auc").value_or(0.0));
    }
    if (auto elbow = find_elbow(t_values, aucs)) report.set_flag("elbow_t", format_double(*elbow));
    report.wall_seconds = seconds_since(start);
    return report;
}

TriadConfig::TriadConfig() {
    implicit_model.loss = LossKind::pointwise;
    implicit_model.negatives = NegativeSource::implicit;
    random_model.loss = LossKind::pointwise;
    random_model.negatives = NegativeSource::sampled;
    random_model.sampler.mode = SamplerMode::uniform;
    random_model.sampler.negatives_per_positive = 16;
    implicit_model.learning_rate = random_model.learning_rate = 3e-3;
    // Smaller batches give the single fine-tune epoch more steps.
    fine_tune.batch_size = 32;
}

void TriadConfig::validate() const {
    implicit_model.validate();
    random_model.validate();
    fine_tune.validate();
    eval.knn.validate();
    if (implicit_model.loss != LossKind::pointwise || implicit_model.negatives != NegativeSource::implicit)
        throw ConfigError("triad: model A must be pointwise on implicit negatives");
    if (random_model.negatives != NegativeSource::sampled || random_model.sampler.mode == SamplerMode::in_batch)
        throw ConfigError("triad: model B must use sampled negatives");
    if (random_model.hidden != implicit_model.hidden || random_model.embedding_dim != implicit_model.embedding_dim)
        throw ConfigError("triad: models A and B must share the tower shape");
}

ConfigEcho TriadConfig::echo() const {
    ConfigEcho e;
    for (auto& [k, v] : implicit_model.echo()) e.emplace_back("A." + k, v);
    for (auto& [k, v] : random_model.echo()) e.emplace_back("B." + k, v);
    for (auto& [k, v] : fine_tune.echo())
        if (k != "base_checkpoint" && k != "base_learning_rate") e.emplace_back("C." + k, v);
    for (auto& [k, v] : eval.knn.echo()) e.emplace_back("eval." + k, v);
    return e;
}

TriadResult run_model_triad(const DatasetBundle& bundle, const TriadConfig& config) {
    config.validate();
    const auto start = std::chrono::steady_clock::now();
    TrainConfig a_cfg = config.implicit_model, b_cfg = config.random_model;
    a_cfg.knn_eval = b_cfg.knn_eval = false;  // evaluated below with the shared options

    auto a = train(bundle, a_cfg);
    auto b = train(bundle, b_cfg);
    FineTuneConfig c_cfg = config.fine_tune;
    c_cfg.base_learning_rate = b_cfg.learning_rate;
    auto c = fine_tune(b.model, c_cfg, bundle.train_served, bundle, config.eval);

    TriadResult out;
    out.models = {a.model, b.model, c.model};
    ExperimentReport& rep = out.report;
    rep.kind = "triad";
    rep.seed = config.random_model.seed;
    rep.add_config("", bundle_echo(bundle));
    rep.add_config("", config.echo());
    rep.columns = {"model", "served_auc", "served_grouped_auc", "sampled_auc", "sampled_grouped_auc",
                   "mismatch_rate", "popularity_pearson"};
    const char* names[] = {"A", "B", "C"};
    for (std::size_t i = 0; i < 3; ++i) {
        const auto ev = evaluate_model(out.models[i], bundle, config.eval);
        rep.rows.push_back({static_cast<double>(i), ev.metric("served_auc"), ev.metric("served_grouped_auc"),
                            ev.metric("sampled_auc"), ev.metric("sampled_grouped_auc"), ev.metric("mismatch_rate"),
                            ev.metric("popularity_pearson")});
        for (const auto& [k, v] : ev.metrics) rep.set_metric(std::string(names[i]) + "." + k, v);
    }
    rep.set_flag("model_0", "A: implicit negatives only");
    rep.set_flag("model_1", "B: random sampled negatives");
    rep.set_flag("model_2", "C: B fine-tuned on A's data");
    rep.set_metric("C.epochs_run", static_cast<double>(c.epochs_run));
    rep.set_metric("C.learning_rate", c.learning_rate);
    rep.wall_seconds = seconds_since(start);
    return out;
}

}  // namespace cglab
