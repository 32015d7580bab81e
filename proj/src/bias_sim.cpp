#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <unordered_set>

#include "cglab/errors.hpp"
#include "cglab/pipelines.hpp"
#include "cglab/random.hpp"
#include "format.hpp"

namespace cglab {

namespace {

constexpr std::uint64_t kBiasNegativeStream = 71;
constexpr std::uint64_t kBiasSplitStream = 72;
constexpr std::uint64_t kBiasInitStream = 73;
constexpr std::uint64_t kBiasShuffleStream = 74;
constexpr double kTableInitStd = 0.1;

using Matrix = Eigen::MatrixXd;

}  // namespace

void IdClassifierConfig::validate() const {
    std::vector<std::string> problems;
    if (embedding_dim < 1) problems.push_back("embedding_dim must be >= 1");
    for (int h : hidden)
        if (h < 1) problems.push_back("hidden layer sizes must be >= 1");
    if (epochs < 1) problems.push_back("epochs must be >= 1");
    if (batch_size < 1) problems.push_back("batch_size must be >= 1");
    if (!(learning_rate > 0)) problems.push_back("learning_rate must be > 0");
    if (!problems.empty()) throw ConfigError(join_problems("id classifier config", problems));
}

ConfigEcho IdClassifierConfig::echo() const {
    std::string h;
    for (std::size_t i = 0; i < hidden.size(); ++i) h += (i ? "," : "") + std::to_string(hidden[i]);
    return {{"embedding_dim", std::to_string(embedding_dim)},
            {"hidden", h},
            {"epochs", std::to_string(epochs)},
            {"batch_size", std::to_string(batch_size)},
            {"learning_rate", format_double(learning_rate)}};
}

IdClassifier::IdClassifier(std::size_t n_users, std::size_t n_movies, const IdClassifierConfig& config,
                           std::uint64_t seed)
    : n_users_(n_users), n_movies_(n_movies), config_(config) {
    config_.validate();
    if (n_users == 0 || n_movies == 0) throw DataError("id classifier needs at least one user and one movie");
    const auto d = static_cast<std::size_t>(config_.embedding_dim);
    dims_.push_back(2 * config_.embedding_dim);
    dims_.insert(dims_.end(), config_.hidden.begin(), config_.hidden.end());
    dims_.push_back(1);
    std::size_t offset = (n_users + n_movies) * d;
    for (std::size_t l = 0; l + 1 < dims_.size(); ++l) {
        layer_offset_.push_back(offset);
        offset += static_cast<std::size_t>(dims_[l + 1]) * static_cast<std::size_t>(dims_[l] + 1);
    }
    params_.assign(offset, 0.0);
    Rng rng(seed);
    for (std::size_t i = 0; i < (n_users + n_movies) * d; ++i) params_[i] = kTableInitStd * rng.normal();
    for (std::size_t l = 0; l + 1 < dims_.size(); ++l) {
        const double std = std::sqrt(2.0 / dims_[l]);
        const auto n_weights = static_cast<std::size_t>(dims_[l + 1]) * static_cast<std::size_t>(dims_[l]);
        for (std::size_t i = 0; i < n_weights; ++i) params_[layer_offset_[l] + i] = std * rng.normal();
    }
}

double IdClassifier::logit(std::int64_t user, std::int64_t movie) const {
    const RatingExample ex{user, movie, 0};
    return logits(std::span<const RatingExample>(&ex, 1))[0];
}

double IdClassifier::predict(std::int64_t user, std::int64_t movie) const {
    const RatingExample ex{user, movie, 0};
    return predict(std::span<const RatingExample>(&ex, 1))[0];
}

namespace {

struct HeadPass {
    std::vector<Matrix> z;  // pre-activations per layer
    std::vector<Matrix> a;  // a[0] is the input
};

}  // namespace

std::vector<double> IdClassifier::predict(std::span<const RatingExample> examples) const {
    auto out = logits(examples);
    for (double& v : out) v = sigmoid(v);
    return out;
}

std::vector<double> IdClassifier::logits(std::span<const RatingExample> examples) const {
    const auto d = static_cast<Eigen::Index>(config_.embedding_dim);
    std::vector<double> out;
    out.reserve(examples.size());
    constexpr std::size_t kChunk = 4096;
    for (std::size_t start = 0; start < examples.size(); start += kChunk) {
        const std::size_t n = std::min(kChunk, examples.size() - start);
        Matrix a(2 * d, static_cast<Eigen::Index>(n));
        for (std::size_t i = 0; i < n; ++i) {
            const auto& ex = examples[start + i];
            if (ex.user < 0 || static_cast<std::size_t>(ex.user) >= n_users_ || ex.movie < 0 ||
                static_cast<std::size_t>(ex.movie) >= n_movies_)
                throw DataError("id classifier: index out of range");
            a.col(static_cast<Eigen::Index>(i)).head(d) =
                Eigen::Map<const Eigen::VectorXd>(params_.data() + static_cast<std::size_t>(ex.user) * d, d);
            a.col(static_cast<Eigen::Index>(i)).tail(d) = Eigen::Map<const Eigen::VectorXd>(
                params_.data() + (n_users_ + static_cast<std::size_t>(ex.movie)) * d, d);
        }
        for (std::size_t l = 0; l + 1 < dims_.size(); ++l) {
            Eigen::Map<const Matrix> w(params_.data() + layer_offset_[l], dims_[l + 1], dims_[l]);
            Eigen::Map<const Eigen::VectorXd> b(params_.data() + layer_offset_[l] + w.size(), dims_[l + 1]);
            Matrix z = (w * a).colwise() + b;
            a = l + 2 < dims_.size() ? Matrix(z.cwiseMax(0.0)) : z;
        }
        for (std::size_t i = 0; i < n; ++i) out.push_back(a(0, static_cast<Eigen::Index>(i)));
    }
    return out;
}

double IdClassifier::loss_grad(std::span<const RatingExample> batch, std::vector<double>& gradient) const {
    if (batch.empty()) throw ConfigError("id classifier loss needs a non-empty batch");
    gradient.assign(params_.size(), 0.0);
    const auto d = static_cast<Eigen::Index>(config_.embedding_dim);
    const auto n = static_cast<Eigen::Index>(batch.size());
    const std::size_t L = dims_.size() - 1;
    HeadPass pass;
    pass.a.emplace_back(2 * d, n);
    for (Eigen::Index i = 0; i < n; ++i) {
        const auto& ex = batch[static_cast<std::size_t>(i)];
        if (ex.user < 0 || static_cast<std::size_t>(ex.user) >= n_users_ || ex.movie < 0 ||
            static_cast<std::size_t>(ex.movie) >= n_movies_)
            throw DataError("id classifier: index out of range");
        pass.a[0].col(i).head(d) =
            Eigen::Map<const Eigen::VectorXd>(params_.data() + static_cast<std::size_t>(ex.user) * d, d);
        pass.a[0].col(i).tail(d) = Eigen::Map<const Eigen::VectorXd>(
            params_.data() + (n_users_ + static_cast<std::size_t>(ex.movie)) * d, d);
    }
    for (std::size_t l = 0; l < L; ++l) {
        Eigen::Map<const Matrix> w(params_.data() + layer_offset_[l], dims_[l + 1], dims_[l]);
        Eigen::Map<const Eigen::VectorXd> b(params_.data() + layer_offset_[l] + w.size(), dims_[l + 1]);
        pass.z.push_back((w * pass.a[l]).colwise() + b);
        pass.a.push_back(l + 1 < L ? Matrix(pass.z.back().cwiseMax(0.0)) : pass.z.back());
    }
    double loss = 0;
    Matrix dz(1, n);
    for (Eigen::Index i = 0; i < n; ++i) {
        const double z = pass.z.back()(0, i);
        const double y = batch[static_cast<std::size_t>(i)].label;
        loss += softplus(z) - y * z;
        dz(0, i) = (sigmoid(z) - y) / static_cast<double>(n);
    }
    loss /= static_cast<double>(n);
    if (!std::isfinite(loss)) throw NumericalError("non-finite id classifier loss");
    for (std::size_t l = L; l-- > 0;) {
        Eigen::Map<const Matrix> w(params_.data() + layer_offset_[l], dims_[l + 1], dims_[l]);
        Eigen::Map<Matrix> gw(gradient.data() + layer_offset_[l], dims_[l + 1], dims_[l]);
        Eigen::Map<Eigen::VectorXd> gb(gradient.data() + layer_offset_[l] + w.size(), dims_[l + 1]);
        gw += dz * pass.a[l].transpose();
        gb += dz.rowwise().sum();
        Matrix da = w.transpose() * dz;
        if (l > 0) da = da.cwiseProduct((pass.z[l - 1].array() > 0).cast<double>().matrix());
        dz = std::move(da);
    }
    for (Eigen::Index i = 0; i < n; ++i) {
        const auto& ex = batch[static_cast<std::size_t>(i)];
        Eigen::Map<Eigen::VectorXd>(gradient.data() + static_cast<std::size_t>(ex.user) * d, d) += dz.col(i).head(d);
        Eigen::Map<Eigen::VectorXd>(gradient.data() + (n_users_ + static_cast<std::size_t>(ex.movie)) * d, d) +=
            dz.col(i).tail(d);
    }
    return loss;
}

std::vector<double> IdClassifier::fit(std::span<const RatingExample> examples, std::uint64_t shuffle_seed) {
    if (examples.empty()) throw DataError("id classifier: empty training set");
    const auto d = static_cast<std::size_t>(config_.embedding_dim);
    const std::size_t head_start = (n_users_ + n_movies_) * d;
    const AdamConfig adam;
    std::vector<double> m(params_.size(), 0.0), v(params_.size(), 0.0), grad;
    std::vector<RatingExample> order(examples.begin(), examples.end());
    std::vector<std::size_t> rows;
    std::int64_t t = 0;
    std::vector<double> losses;
    auto update = [&](std::size_t i, double c1, double c2) {
        m[i] = adam.beta1 * m[i] + (1 - adam.beta1) * grad[i];
        v[i] = adam.beta2 * v[i] + (1 - adam.beta2) * grad[i] * grad[i];
        params_[i] -= config_.learning_rate * (m[i] / c1) / (std::sqrt(v[i] / c2) + adam.epsilon);
    };
    for (int epoch = 0; epoch < config_.epochs; ++epoch) {
        Rng rng(derive_seed(shuffle_seed, kBiasShuffleStream, static_cast<std::uint64_t>(epoch)));
        for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
        double total = 0;
        for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(config_.batch_size)) {
            const std::size_t n = std::min(order.size() - start, static_cast<std::size_t>(config_.batch_size));
            const auto batch = std::span<const RatingExample>(order).subspan(start, n);
            total += loss_grad(batch, grad) * static_cast<double>(n);
            ++t;
            const double c1 = 1 - std::pow(adam.beta1, static_cast<double>(t));
            const double c2 = 1 - std::pow(adam.beta2, static_cast<double>(t));
            // Table rows absent from the batch keep their moments untouched.
            rows.clear();
            for (const auto& ex : batch) {
                rows.push_back(static_cast<std::size_t>(ex.user));
                rows.push_back(n_users_ + static_cast<std::size_t>(ex.movie));
            }
            std::sort(rows.begin(), rows.end());
            rows.erase(std::unique(rows.begin(), rows.end()), rows.end());
            for (std::size_t r : rows)
                for (std::size_t k = 0; k < d; ++k) update(r * d + k, c1, c2);
            for (std::size_t i = head_start; i < params_.size(); ++i) update(i, c1, c2);
        }
        losses.push_back(total / static_cast<double>(order.size()));
    }
    return losses;
}

std::uint64_t IdClassifier::digest() const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    const auto* bytes = reinterpret_cast<const unsigned char*>(params_.data());
    for (std::size_t i = 0; i < params_.size() * sizeof(double); ++i) {
        h ^= bytes[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

void BiasSimConfig::validate() const {
    std::vector<std::string> problems;
    if (taus.empty()) problems.push_back("tau grid must not be empty");
    for (std::size_t i = 0; i < taus.size(); ++i) {
        if (!(taus[i] >= 0 && taus[i] < 1)) problems.push_back("tau values must lie in [0, 1)");
        if (i > 0 && !(taus[i] > taus[i - 1])) problems.push_back("tau grid must be strictly ascending");
    }
    if (negatives_per_positive < 1) problems.push_back("negatives_per_positive must be >= 1");
    if (!(train_fraction > 0 && train_fraction < 1)) problems.push_back("train_fraction must lie in (0, 1)");
    try {
        classifier.validate();
    } catch (const ConfigError& e) {
        problems.push_back(e.what());
    }
    if (!problems.empty()) throw ConfigError(join_problems("bias-sim config", problems));
}

ConfigEcho BiasSimConfig::echo() const {
    std::string grid;
    for (std::size_t i = 0; i < taus.size(); ++i) grid += (i ? "," : "") + format_double(taus[i]);
    ConfigEcho e{{"tau", grid},
                 {"negatives_per_positive", std::to_string(negatives_per_positive)},
                 {"train_fraction", format_double(train_fraction)},
                 {"filter_all_examples", filter_all_examples ? "true" : "false"},
                 {"seed", std::to_string(seed)}};
    for (auto& [k, v] : classifier.echo()) e.emplace_back("classifier." + k, v);
    return e;
}

BiasSimData build_bias_sim_data(std::span<const Rating> records, const BiasSimConfig& config) {
    config.validate();
    if (records.empty()) throw DataError("bias simulation needs at least one rating");
    std::vector<std::int64_t> users, movies;
    for (const auto& r : records) {
        users.push_back(r.user_id);
        movies.push_back(r.movie_id);
    }
    auto dedupe = [](std::vector<std::int64_t>& v) {
        std::sort(v.begin(), v.end());
        v.erase(std::unique(v.begin(), v.end()), v.end());
    };
    dedupe(users);
    dedupe(movies);
    auto index_of = [](const std::vector<std::int64_t>& v, std::int64_t id) {
        return static_cast<std::int64_t>(std::lower_bound(v.begin(), v.end(), id) - v.begin());
    };
    const auto n_movies = static_cast<std::uint64_t>(movies.size());
    std::unordered_set<std::uint64_t> positive_pairs;
    std::vector<RatingExample> examples;
    for (const auto& r : records) {
        const RatingExample ex{index_of(users, r.user_id), index_of(movies, r.movie_id), 1};
        if (positive_pairs.insert(static_cast<std::uint64_t>(ex.user) * n_movies + static_cast<std::uint64_t>(ex.movie))
                .second)
            examples.push_back(ex);
    }
    const std::size_t n_pos = examples.size();
    constexpr int kMaxRetries = 32;
    for (std::size_t i = 0; i < n_pos; ++i) {
        Rng rng(derive_seed(config.seed, kBiasNegativeStream, i));
        for (int k = 0; k < config.negatives_per_positive; ++k) {
            for (int attempt = 0; attempt <= kMaxRetries; ++attempt) {
                const auto u = rng.below(users.size());
                const auto m = rng.below(n_movies);
                if (positive_pairs.count(u * n_movies + m)) continue;
                examples.push_back({static_cast<std::int64_t>(u), static_cast<std::int64_t>(m), 0});
                break;
            }
        }
    }
    std::vector<UserId> dense_users(users.size());
    std::iota(dense_users.begin(), dense_users.end(), 0);
    const auto split = split_users(dense_users, config.train_fraction, derive_seed(config.seed, kBiasSplitStream));
    BiasSimData data;
    data.n_users = users.size();
    data.n_movies = movies.size();
    for (const auto& ex : examples) (split.is_train(ex.user) ? data.train : data.test).push_back(ex);
    return data;
}

std::vector<RatingExample> filter_by_score(std::span<const RatingExample> examples, std::span<const double> scores,
                                           double tau, bool filter_all) {
    if (examples.size() != scores.size()) throw DataError("filter_by_score: score count mismatch");
    std::vector<RatingExample> out;
    for (std::size_t i = 0; i < examples.size(); ++i)
        if (scores[i] > tau || (!filter_all && examples[i].label == 1)) out.push_back(examples[i]);
    return out;
}

namespace {

std::vector<ScoredExample> scored(std::span<const RatingExample> ex, std::span<const double> scores) {
    std::vector<ScoredExample> out(ex.size());
    for (std::size_t i = 0; i < ex.size(); ++i) out[i] = {ex[i].user, scores[i], ex[i].label};
    return out;
}

bool both_classes(std::span<const RatingExample> ex) {
    bool pos = false, neg = false;
    for (const auto& e : ex) (e.label ? pos : neg) = true;
    return pos && neg;
}

}  // namespace

ExperimentReport run_bias_simulation(std::span<const Rating> records, const BiasSimConfig& config, int threads) {
    config.validate();
    const auto start = std::chrono::steady_clock::now();
    const BiasSimData data = build_bias_sim_data(records, config);
    if (!both_classes(data.train) || !both_classes(data.test))
        throw DataError("bias simulation: train or test split lacks a class");
    const std::uint64_t init_seed = derive_seed(config.seed, kBiasInitStream);
    const std::uint64_t shuffle_seed = derive_seed(config.seed, kBiasShuffleStream);

    IdClassifier unbiased(data.n_users, data.n_movies, config.classifier, init_seed);
    const auto losses = unbiased.fit(data.train, shuffle_seed);
    const auto train_scores = unbiased.predict(data.train);
    const auto test_scores = unbiased.predict(data.test);
    const double baseline = roc_auc(scored(data.test, test_scores));

    struct Point {
        std::size_t n_train = 0, n_test = 0;
        std::optional<double> biased, full;
        std::uint64_t digest = 0;
    };
    std::vector<Point> points(config.taus.size());
    parallel_for(config.taus.size(), threads, [&](std::size_t i) {
        const double tau = config.taus[i];
        const auto train_tau = filter_by_score(data.train, train_scores, tau, config.filter_all_examples);
        const auto test_tau = filter_by_score(data.test, test_scores, tau, config.filter_all_examples);
        Point& p = points[i];
        p.n_train = train_tau.size();
        p.n_test = test_tau.size();
        if (!both_classes(train_tau) || !both_classes(test_tau)) return;
        IdClassifier model(data.n_users, data.n_movies, config.classifier, init_seed);
        model.fit(train_tau, shuffle_seed);
        p.biased = roc_auc(scored(test_tau, model.predict(test_tau)));
        p.full = roc_auc(scored(data.test, model.predict(data.test)));
        p.digest = model.digest();
    });

    ExperimentReport rep;
    rep.kind = "bias-sim";
    rep.seed = config.seed;
    rep.add_config("", config.echo());
    rep.config.emplace_back("records", std::to_string(records.size()));
    rep.columns = {"tau", "train_examples", "test_examples", "biased_test_auc", "full_test_auc"};
    std::vector<double> taus, biased, full;
    for (std::size_t i = 0; i < points.size(); ++i) {
        const auto& p = points[i];
        rep.rows.push_back({config.taus[i], static_cast<double>(p.n_train), static_cast<double>(p.n_test), p.biased,
                            p.full});
        const std::string key = "tau=" + format_double(config.taus[i]);
        if (p.biased) {
            taus.push_back(config.taus[i]);
            biased.push_back(*p.biased);
            full.push_back(*p.full);
            char hex[17];
            std::snprintf(hex, sizeof(hex), "%016llx", static_cast<unsigned long long>(p.digest));
            rep.set_flag("digest." + key, hex);
        } else {
            rep.set_flag("degenerate." + key, "filtered split lacks a class");
        }
    }
    rep.set_metric("baseline_auc", baseline);
    rep.set_metric("unbiased_final_train_loss", losses.back());
    rep.set_metric("train_examples", static_cast<double>(data.train.size()));
    rep.set_metric("test_examples", static_cast<double>(data.test.size()));
    rep.set_metric("non_degenerate_points", static_cast<double>(taus.size()));
    if (taus.size() >= 2) {
        try {
            rep.set_metric("spearman_biased", spearman(taus, biased));
            rep.set_metric("spearman_full", spearman(taus, full));
        } catch (const NumericalError&) {
            // constant AUC column; correlations are undefined
        }
    }
    rep.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return rep;
}

}  // namespace cglab
