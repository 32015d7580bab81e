// Command line front end: one binary, one subcommand per experiment.

#include <CLI11.hpp>
#include <charconv>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <json.hpp>
#include <map>
#include <set>
#include <sstream>

#include "cglab/ann.hpp"
#include "cglab/dataset.hpp"
#include "cglab/errors.hpp"
#include "cglab/log.hpp"
#include "cglab/metrics.hpp"
#include "cglab/pipelines.hpp"
#include "cglab/random.hpp"
#include "cglab/report.hpp"
#include "cglab/sampling.hpp"
#include "cglab/tower.hpp"

namespace fs = std::filesystem;
using namespace cglab;

namespace {

// Streams for seeds derived from --seed.
enum SeedStream : std::uint64_t {
    kWorldSeed = 1,
    kPolicySeed,
    kBundleSeed,
    kTrainSeed,
    kSamplerSeed,
    kFineTuneSeed,
    kEvalSeed,
    kIndexSeed,
    kBiasSeed,
    kRatingsSeed,
    kVectorSeed,
    kQueryVectorSeed,
    kModelBSeed,
    kSamplerBSeed,
};

std::string format_value(double v) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    return os.str();
}

/// Resolved key/value parameters. Every lookup marks the key as used; keys
/// never looked up are reported as unknown together with any bad values.
class Params {
public:
    std::map<std::string, std::string> values;
    std::uint64_t seed = 1;
    int threads = 1;
    fs::path out_dir = "runs";

    bool has(const std::string& key) {
        used_.insert(key);
        return values.count(key) != 0;
    }

    std::string str(const std::string& key, const std::string& fallback = "") {
        return has(key) ? values.at(key) : fallback;
    }

    template <typename T>
    T num(const std::string& key, T fallback) {
        if (!has(key)) return fallback;
        return parse<T>(key, values.at(key), fallback);
    }

    bool flag(const std::string& key, bool fallback) {
        if (!has(key)) return fallback;
        const auto& v = values.at(key);
        if (v == "true" || v == "1" || v.empty()) return true;
        if (v == "false" || v == "0") return false;
        problems_.push_back(key + ": expected true or false, got '" + v + "'");
        return fallback;
    }

    template <typename T>
    std::vector<T> list(const std::string& key, std::vector<T> fallback) {
        if (!has(key)) return fallback;
        std::vector<T> out;
        std::stringstream ss(values.at(key));
        std::string item;
        while (std::getline(ss, item, ',')) {
            if (item.empty()) continue;
            out.push_back(parse<T>(key, item, T{}));
        }
        if (out.empty()) problems_.push_back(key + ": empty list");
        return out;
    }

    std::uint64_t seed_for(const std::string& key, std::uint64_t stream) {
        return num<std::uint64_t>(key, derive_seed(seed, stream));
    }

    void problem(std::string p) { problems_.push_back(std::move(p)); }

    /// Throws ConfigError naming every unknown key and bad value at once.
    void finish() {
        std::vector<std::string> problems = problems_;
        for (const auto& [k, _] : values)
            if (!used_.count(k)) problems.push_back("unknown key '" + k + "'");
        if (problems.empty()) return;
        std::string msg = "invalid configuration:";
        for (const auto& p : problems) msg += "\n  " + p;
        throw ConfigError(msg);
    }

private:
    template <typename T>
    T parse(const std::string& key, const std::string& text, T fallback) {
        if constexpr (std::is_same_v<T, std::string>) {
            return text;
        } else if constexpr (std::is_floating_point_v<T>) {
            char* end = nullptr;
            const double v = std::strtod(text.c_str(), &end);
            if (end == text.c_str() || *end != '\0') {
                problems_.push_back(key + ": expected a number, got '" + text + "'");
                return fallback;
            }
            return static_cast<T>(v);
        } else {
            T v{};
            auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
            if (ec != std::errc() || ptr != text.data() + text.size()) {
                problems_.push_back(key + ": expected an integer, got '" + text + "'");
                return fallback;
            }
            return v;
        }
    }

    std::set<std::string> used_;
    std::vector<std::string> problems_;
};

void flatten_json(const nlohmann::json& j, const std::string& prefix, std::map<std::string, std::string>& out) {
    if (j.is_object()) {
        for (const auto& [k, v] : j.items()) flatten_json(v, prefix.empty() ? k : prefix + "." + k, out);
    } else if (j.is_array()) {
        std::string joined;
        for (std::size_t i = 0; i < j.size(); ++i) {
            const auto& e = j[i];
            joined += (i ? "," : "") + (e.is_string() ? e.get<std::string>() : e.dump());
        }
        out[prefix] = joined;
    } else if (j.is_string()) {
        out[prefix] = j.get<std::string>();
    } else {
        out[prefix] = j.dump();
    }
}

std::map<std::string, std::string> read_config_file(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw MissingFileError(path.string());
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::parse_error& e) {
        throw ParseError(path.string(), 0, e.what());
    }
    if (!j.is_object()) throw ConfigError(path.string() + ": config must be a JSON object");
    std::map<std::string, std::string> out;
    flatten_json(j, "", out);
    return out;
}

/// `--key value`, `--key=value` and bare `--flag` tokens.
std::map<std::string, std::string> parse_extras(const std::vector<std::string>& tokens) {
    std::map<std::string, std::string> out;
    std::vector<std::string> stray;
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        const std::string& t = tokens[i];
        if (t.rfind("--", 0) != 0) {
            stray.push_back(t);
            continue;
        }
        const std::string body = t.substr(2);
        const auto eq = body.find('=');
        if (eq != std::string::npos) {
            out[body.substr(0, eq)] = body.substr(eq + 1);
        } else if (i + 1 < tokens.size() && tokens[i + 1].rfind("--", 0) != 0) {
            out[body] = tokens[++i];
        } else {
            out[body] = "true";
        }
    }
    if (!stray.empty()) {
        std::string msg = "unexpected arguments:";
        for (const auto& s : stray) msg += " '" + s + "'";
        throw ConfigError(msg);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Config builders. Keys match the names in each config's echo.

WorldConfig world_config(Params& p, WorldConfig w = {}) {
    w.seed = p.seed_for("world.seed", kWorldSeed);
    w.n_users = p.num("world.n_users", w.n_users);
    w.n_items = p.num("world.n_items", w.n_items);
    w.languages = p.num("world.languages", w.languages);
    w.latent_dim = p.num("world.latent_dim", w.latent_dim);
    w.hard_groups = p.num("world.hard_groups", w.hard_groups);
    w.query_dim = p.num("world.query_dim", w.query_dim);
    w.candidate_dim = p.num("world.candidate_dim", w.candidate_dim);
    w.padding_dims = p.num("world.padding_dims", w.padding_dims);
    w.appeal_shape = p.num("world.appeal_shape", w.appeal_shape);
    w.interest_scale = p.num("world.interest_scale", w.interest_scale);
    w.engagement_bias = p.num("world.engagement_bias", w.engagement_bias);
    w.appeal_coef = p.num("world.appeal_coef", w.appeal_coef);
    w.feature_noise = p.num("world.feature_noise", w.feature_noise);
    w.irrelevant_engagement = p.num("world.irrelevant_engagement", w.irrelevant_engagement);
    w.language_marginal = p.list<double>("world.language_marginal", {});
    return w;
}

PolicyConfig policy_config(Params& p) {
    PolicyConfig c;
    c.slate_size = p.num("policy.slate_size", c.slate_size);
    c.noise = p.num("policy.noise", c.noise);
    c.popularity_weight = p.num("policy.popularity_weight", c.popularity_weight);
    c.interest_weight = p.num("policy.interest_weight", c.interest_weight);
    c.interest_dims = p.num("policy.interest_dims", c.interest_dims);
    c.seed = p.seed_for("policy.seed", kPolicySeed);
    return c;
}

BundleConfig bundle_config(Params& p) {
    BundleConfig c;
    c.train_fraction = p.num("bundle.train_fraction", c.train_fraction);
    c.test_negatives_per_positive = p.num("bundle.test_negatives_per_positive", c.test_negatives_per_positive);
    c.seed = p.seed_for("bundle.seed", kBundleSeed);
    return c;
}

/// World and policy come from `data_dir`/world.meta when given, otherwise
/// from the world.* and policy.* keys.
DatasetBundle load_bundle(Params& p) {
    WorldConfig w;
    PolicyConfig pol;
    if (p.has("data_dir")) {
        std::tie(w, pol) = read_world_meta(fs::path(p.str("data_dir")) / "world.meta");
        for (const auto& [k, _] : p.values)
            if (k.rfind("world.", 0) == 0 || k.rfind("policy.", 0) == 0)
                p.problem(k + ": conflicts with data_dir (the world is read from world.meta)");
    } else {
        w = world_config(p);
        pol = policy_config(p);
    }
    const auto b = bundle_config(p);
    p.finish();
    return make_bundle(w, pol, b);
}

KnnEvalConfig knn_config(Params& p, const std::string& prefix = "eval.") {
    KnnEvalConfig c;
    c.query_sample = p.num(prefix + "query_sample", c.query_sample);
    c.candidate_sample = p.num(prefix + "candidate_sample", c.candidate_sample);
    c.k = p.num(prefix + "k", c.k);
    c.mismatch_top_n = p.num(prefix + "mismatch_top_n", c.mismatch_top_n);
    c.pearson_top_n = p.num(prefix + "pearson_top_n", c.pearson_top_n);
    c.log_popularity = p.flag(prefix + "log_popularity", c.log_popularity);
    c.seed = p.seed_for(prefix + "seed", kEvalSeed);
    return c;
}

template <typename E, typename F>
E parse_enum(Params& p, const std::string& key, E fallback, F parser) {
    if (!p.has(key)) return fallback;
    try {
        return parser(p.str(key));
    } catch (const ConfigError& e) {
        p.problem(key + ": " + e.what());
        return fallback;
    }
}

TrainConfig train_config(Params& p, const std::string& prefix, TrainConfig c, std::uint64_t seed_stream,
                         std::uint64_t sampler_stream) {
    c.loss = parse_enum(p, prefix + "loss", c.loss, parse_loss_kind);
    c.negatives = parse_enum(p, prefix + "negatives", c.negatives, parse_negative_source);
    c.sampler.mode = parse_enum(p, prefix + "sampler.mode", c.sampler.mode, parse_sampler_mode);
    c.sampler.negatives_per_positive =
        p.num(prefix + "sampler.negatives_per_positive", c.sampler.negatives_per_positive);
    c.sampler.filter_known_positives = p.flag(prefix + "sampler.filter_known_positives", c.sampler.filter_known_positives);
    c.sampler.seed = p.seed_for(prefix + "sampler.seed", sampler_stream);
    c.sampler.max_retries = p.num(prefix + "sampler.max_retries", c.sampler.max_retries);
    c.sampler.full_cross = p.flag(prefix + "sampler.full_cross", c.sampler.full_cross);
    c.sampler.frequency_smoothing = p.num(prefix + "sampler.frequency_smoothing", c.sampler.frequency_smoothing);
    if (p.has(prefix + "popularity_t")) {
        const std::string v = p.str(prefix + "popularity_t");
        if (v == "none")
            c.popularity_weighting.reset();
        else
            c.popularity_weighting = PopularityWeightConfig{p.num(prefix + "popularity_t", 0.0)};
    }
    c.hidden = p.list<int>(prefix + "hidden", c.hidden);
    c.embedding_dim = p.num(prefix + "embedding_dim", c.embedding_dim);
    c.initial_scale = p.num(prefix + "initial_scale", c.initial_scale);
    c.triplet.margin = p.num(prefix + "margin", c.triplet.margin);
    c.epochs = p.num(prefix + "epochs", c.epochs);
    c.batch_size = p.num(prefix + "batch_size", c.batch_size);
    c.learning_rate = p.num(prefix + "learning_rate", c.learning_rate);
    c.seed = p.seed_for(prefix + "seed", seed_stream);
    c.knn_eval = p.flag(prefix + "knn_eval", c.knn_eval);
    return c;
}

/// In the triad the base model and its rate come from model B, so those keys
/// are not accepted there.
FineTuneConfig finetune_config(Params& p, const std::string& prefix, bool standalone) {
    FineTuneConfig c;
    if (standalone) {
        c.base_checkpoint = p.str(prefix + "base_checkpoint");
        c.base_learning_rate = p.num(prefix + "base_learning_rate", c.base_learning_rate);
    }
    c.lr_scale = p.num(prefix + "lr_scale", c.lr_scale);
    c.epochs = p.num(prefix + "epochs", c.epochs);
    if (p.has(prefix + "frozen_layers")) c.frozen_layers = p.list<std::string>(prefix + "frozen_layers", {});
    c.batch_size = p.num(prefix + "batch_size", c.batch_size);
    c.seed = p.seed_for(prefix + "seed", kFineTuneSeed);
    return c;
}

HnswConfig hnsw_config(Params& p) {
    HnswConfig c;
    c.M = p.num("hnsw.M", c.M);
    c.ef_construction = p.num("hnsw.ef_construction", c.ef_construction);
    c.ef_search = p.num("hnsw.ef_search", c.ef_search);
    c.seed = p.seed_for("hnsw.seed", kIndexSeed);
    return c;
}

// ---------------------------------------------------------------------------
// Output helpers.

void print_report(const ExperimentReport& report, const ExperimentReport::Paths& paths) {
    std::cout << "report\t" << paths.jsonl.string() << '\n';
    if (!paths.tsv.empty()) std::cout << "table\t" << paths.tsv.string() << '\n';
    for (const auto& [k, v] : report.metrics) std::cout << k << '\t' << format_value(v) << '\n';
    for (const auto& [k, v] : report.flags) std::cout << k << '\t' << v << '\n';
}

ExperimentReport::Paths write_report(ExperimentReport& report, const Params& p,
                                     std::chrono::steady_clock::time_point start) {
    report.seed = p.seed;
    report.config.emplace_back("seed", std::to_string(p.seed));
    report.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    const auto paths = report.write(p.out_dir);
    print_report(report, paths);
    return paths;
}

fs::path checkpoint_path(const std::string& explicit_path, const fs::path& out_dir, const ExperimentReport& report) {
    return explicit_path.empty() ? out_dir / (report.kind + "-" + report.config_hash() + ".ckpt")
                                 : fs::path(explicit_path);
}

void require(Params& p, const std::string& key) {
    if (!p.values.count(key)) p.problem(key + ": required");
}

std::vector<Interaction> positives_only(std::span<const Interaction> records) {
    std::vector<Interaction> out;
    for (const auto& r : records)
        if (r.label == 1) out.push_back(r);
    return out;
}

// ---------------------------------------------------------------------------
// Subcommands.

int cmd_generate_data(Params& p) {
    const auto start = std::chrono::steady_clock::now();
    const auto w = world_config(p);
    const auto pol = policy_config(p);
    const bool scan = p.flag("scan_regions", true);
    p.finish();
    const World world = generate_world(w);
    const ServedLog log = simulate_served_traffic(world, pol);
    export_world(world, pol, log, p.out_dir);

    ExperimentReport report;
    report.kind = "generate-data";
    report.add_config("", w.echo());
    report.add_config("", pol.echo());
    report.config.emplace_back("scan_regions", scan ? "true" : "false");
    report.set_metric("queries", static_cast<double>(world.queries().size()));
    report.set_metric("candidates", static_cast<double>(world.candidates().size()));
    report.set_metric("served_records", static_cast<double>(log.records.size()));
    report.set_metric("served_positive_rate",
                      static_cast<double>(positives_only(log.records).size()) /
                          static_cast<double>(std::max<std::size_t>(log.records.size(), 1)));
    if (scan) {
        const auto r = scan_regions(world);
        report.set_metric("region.extremely_irrelevant", r.extremely_irrelevant);
        report.set_metric("region.not_engaging", r.not_engaging);
        report.set_metric("region.intermediate", r.intermediate);
        report.set_metric("region.engaging", r.engaging);
        report.set_metric("mean_engagement", r.mean_engagement);
    }
    write_report(report, p, start);
    std::cout << "data\t" << p.out_dir.string() << '\n';
    return 0;
}

int cmd_train(Params& p) {
    const auto start = std::chrono::steady_clock::now();
    TrainConfig c = train_config(p, "", TrainConfig{}, kTrainSeed, kSamplerSeed);
    c.eval = knn_config(p);
    const std::string ckpt_out = p.str("checkpoint_out");
    c.validate();
    const auto bundle = load_bundle(p);
    auto result = train(bundle, c);
    const auto ckpt = checkpoint_path(ckpt_out, p.out_dir, result.report);
    fs::create_directories(p.out_dir);
    save_checkpoint(result.model, ckpt);
    result.report.config.emplace_back("checkpoint", ckpt.string());
    write_report(result.report, p, start);
    std::cout << "checkpoint\t" << ckpt.string() << '\n';
    return 0;
}

int cmd_finetune(Params& p) {
    const auto start = std::chrono::steady_clock::now();
    require(p, "base_checkpoint");
    FineTuneConfig c = finetune_config(p, "", true);
    EvalOptions eval{knn_config(p), p.flag("knn_eval", true)};
    const std::string data_path = p.str("data");
    const std::string ckpt_out = p.str("checkpoint_out");
    c.validate();
    const auto bundle = load_bundle(p);
    const auto records = data_path.empty() ? bundle.train_served : read_interactions_tsv(data_path);
    auto result = fine_tune(c, records, bundle, eval);
    if (!data_path.empty()) result.report.config.emplace_back("data", data_path);
    const auto ckpt = checkpoint_path(ckpt_out, p.out_dir, result.report);
    fs::create_directories(p.out_dir);
    save_checkpoint(result.model, ckpt);
    result.report.config.emplace_back("checkpoint", ckpt.string());
    write_report(result.report, p, start);
    std::cout << "checkpoint\t" << ckpt.string() << '\n';
    return 0;
}

int cmd_evaluate(Params& p) {
    const auto start = std::chrono::steady_clock::now();
    require(p, "checkpoint");
    const fs::path ckpt = p.str("checkpoint");
    EvalOptions eval{knn_config(p), p.flag("knn_eval", true)};
    const auto bundle = load_bundle(p);
    const auto model = load_checkpoint(ckpt);
    auto report = evaluate_model(model, bundle, eval);
    report.config.emplace_back("checkpoint", ckpt.string());
    write_report(report, p, start);
    return 0;
}

int cmd_bias_sim(Params& p) {
    const auto start = std::chrono::steady_clock::now();
    BiasSimConfig c;
    c.taus = p.list<double>("tau", c.taus);
    c.negatives_per_positive = p.num("negatives_per_positive", c.negatives_per_positive);
    c.train_fraction = p.num("train_fraction", c.train_fraction);
    c.filter_all_examples = p.flag("filter_all_examples", c.filter_all_examples);
    c.seed = p.seed_for("bias.seed", kBiasSeed);
    c.classifier.embedding_dim = p.num("classifier.embedding_dim", c.classifier.embedding_dim);
    c.classifier.hidden = p.list<int>("classifier.hidden", c.classifier.hidden);
    c.classifier.epochs = p.num("classifier.epochs", c.classifier.epochs);
    c.classifier.batch_size = p.num("classifier.batch_size", c.classifier.batch_size);
    c.classifier.learning_rate = p.num("classifier.learning_rate", c.classifier.learning_rate);

    const bool movielens = p.has("movielens");
    const bool synthetic = p.flag("synthetic", false);
    if (movielens == synthetic) p.problem("exactly one of --movielens <path> or --synthetic is required");
    std::vector<Rating> ratings;
    ConfigEcho source;
    if (movielens) {
        const std::string path = p.str("movielens");
        p.finish();
        c.validate();
        auto file = load_movielens_1m(path);
        for (const auto& w : file.warnings) warn(w);
        ratings = std::move(file.ratings);
        source.emplace_back("movielens", path);
    } else {
        const WorldConfig w = world_config(p, ratings_world());
        const int per_user = p.num("ratings_per_user", 40);
        const auto ratings_seed = p.seed_for("ratings_seed", kRatingsSeed);
        p.finish();
        c.validate();
        ratings = synthetic_ratings(generate_world(w), per_user, ratings_seed);
        source = w.echo();
        source.emplace_back("ratings_per_user", std::to_string(per_user));
        source.emplace_back("ratings_seed", std::to_string(ratings_seed));
    }
    auto report = run_bias_simulation(ratings, c, p.threads);
    report.add_config("", source);
    write_report(report, p, start);
    return 0;
}

int cmd_sweep_negatives(Params& p) {
    const auto start = std::chrono::steady_clock::now();
    TrainConfig c = train_config(p, "", TrainConfig{}, kTrainSeed, kSamplerSeed);
    c.eval = knn_config(p);
    const auto ratios = p.list<int>("ratios", {1, 4, 16, 64});
    c.validate();
    const auto bundle = load_bundle(p);
    auto report = sweep_negative_ratio(bundle, ratios, c, p.threads);
    write_report(report, p, start);
    return 0;
}

int cmd_sweep_popularity(Params& p) {
    const auto start = std::chrono::steady_clock::now();
    TrainConfig base;
    base.loss = LossKind::triplet;
    base.sampler.mode = SamplerMode::in_batch;
    TrainConfig c = train_config(p, "", base, kTrainSeed, kSamplerSeed);
    c.eval = knn_config(p);
    const auto ts = p.list<double>("t_values", {1, 10, 100, 1000, 10000});
    c.validate();
    const auto bundle = load_bundle(p);
    auto report = sweep_popularity_t(bundle, ts, c, p.threads);
    write_report(report, p, start);
    return 0;
}

int cmd_triad(Params& p) {
    const auto start = std::chrono::steady_clock::now();
    TriadConfig c;
    c.implicit_model = train_config(p, "A.", c.implicit_model, kTrainSeed, kSamplerSeed);
    c.random_model = train_config(p, "B.", c.random_model, kModelBSeed, kSamplerBSeed);
    c.fine_tune = finetune_config(p, "C.", false);
    c.eval = EvalOptions{knn_config(p), true};
    c.validate();
    const auto bundle = load_bundle(p);
    auto result = run_model_triad(bundle, c);
    write_report(result.report, p, start);
    return 0;
}

/// Candidate embeddings of every world item under a checkpoint.
EmbeddingSet world_candidates(const TwoTowerModel& model, const World& world) {
    EmbeddingSet out;
    Eigen::MatrixXd features(world.candidate_dim(), static_cast<Eigen::Index>(world.candidates().size()));
    for (std::size_t j = 0; j < world.candidates().size(); ++j) {
        const auto& f = world.candidates()[j].features;
        features.col(static_cast<Eigen::Index>(j)) = Eigen::Map<const Eigen::VectorXd>(f.data(), static_cast<Eigen::Index>(f.size()));
        out.ids.push_back(world.candidates()[j].candidate_id);
    }
    out.vectors = model.embed(Tower::candidate, features);
    return out;
}

int cmd_build_index(Params& p) {
    const auto start = std::chrono::steady_clock::now();
    const HnswConfig hc = hnsw_config(p);
    const std::string index_out = p.str("index_out");
    EmbeddingSet corpus;
    ConfigEcho source;
    if (p.has("checkpoint")) {
        const fs::path ckpt = p.str("checkpoint");
        const auto bundle = load_bundle(p);
        corpus = world_candidates(load_checkpoint(ckpt), *bundle.world);
        source.emplace_back("checkpoint", ckpt.string());
        for (const auto& kv : bundle.world->config().echo()) source.push_back(kv);
    } else {
        require(p, "random_vectors");
        const auto n = p.num<std::size_t>("random_vectors", 0);
        const int dim = p.num("dim", 32);
        const auto seed = p.seed_for("vector_seed", kVectorSeed);
        p.finish();
        corpus = random_unit_vectors(n, dim, seed);
        source = {{"random_vectors", std::to_string(n)}, {"dim", std::to_string(dim)},
                  {"vector_seed", std::to_string(seed)}};
    }
    hc.validate();
    HnswIndex index(corpus.dim(), hc);
    for (std::size_t i = 0; i < corpus.size(); ++i) {
        const auto col = corpus.vectors.col(static_cast<Eigen::Index>(i));
        index.insert(corpus.ids[i], {col.data(), static_cast<std::size_t>(col.size())});
    }

    ExperimentReport report;
    report.kind = "build-index";
    report.add_config("", source);
    report.add_config("", {{"hnsw.M", std::to_string(hc.M)},
                           {"hnsw.ef_construction", std::to_string(hc.ef_construction)},
                           {"hnsw.ef_search", std::to_string(hc.ef_search)},
                           {"hnsw.seed", std::to_string(hc.seed)}});
    report.set_metric("size", static_cast<double>(index.size()));
    report.set_metric("max_level", index.max_level());
    std::ostringstream digest;
    digest << std::hex << index.digest();
    report.set_flag("digest", digest.str());
    const fs::path out =
        index_out.empty() ? p.out_dir / ("index-" + report.config_hash() + ".hnsw") : fs::path(index_out);
    fs::create_directories(p.out_dir);
    index.save(out);
    report.config.emplace_back("index", out.string());
    write_report(report, p, start);
    std::cout << "index\t" << out.string() << '\n';
    return 0;
}

int cmd_query(Params& p) {
    require(p, "index");
    require(p, "query_id");
    const fs::path path = p.str("index");
    const auto qid = p.num<std::int64_t>("query_id", 0);
    const int k = p.num("k", 10);
    const int ef = p.num("ef_search", 0);
    if (k < 1) p.problem("k: must be >= 1");
    std::vector<double> q;
    std::optional<HnswIndex> index;
    if (p.has("checkpoint")) {
        const fs::path ckpt = p.str("checkpoint");
        const auto bundle = load_bundle(p);
        const auto model = load_checkpoint(ckpt);
        const auto& f = bundle.world->query(qid).features;
        const Embedding e = model.embed_query(f);
        q.assign(e.data(), e.data() + e.size());
        index.emplace(HnswIndex::load(path));
    } else {
        // Without a checkpoint the query is a stored item (item-to-item lookup).
        p.finish();
        index.emplace(HnswIndex::load(path));
        const auto v = index->vector(qid);
        q.assign(v.begin(), v.end());
    }
    if (static_cast<int>(q.size()) != index->dim()) throw DataError("query dimension does not match the index");
    std::cout << "rank\tid\tsimilarity\n";
    int rank = 0;
    for (const auto& n : index->search(q, k, ef)) std::cout << ++rank << '\t' << n.id << '\t' << format_value(n.similarity) << '\n';
    return 0;
}

int cmd_recall(Params& p) {
    const auto start = std::chrono::steady_clock::now();
    require(p, "index");
    const fs::path path = p.str("index");
    const int k = p.num("k", 10);
    const int ef = p.num("ef_search", 0);
    const auto n_queries = p.num<std::size_t>("queries", 1000);
    if (k < 1) p.problem("k: must be >= 1");
    Eigen::MatrixXd queries;
    ConfigEcho source;
    std::optional<HnswIndex> index;
    if (p.has("checkpoint")) {
        const fs::path ckpt = p.str("checkpoint");
        const auto sample_seed = p.seed_for("query_seed", kQueryVectorSeed);
        const auto bundle = load_bundle(p);
        const auto model = load_checkpoint(ckpt);
        const auto& world = *bundle.world;
        const auto rows = sample_indices(world.queries().size(), n_queries, sample_seed);
        queries.resize(world.query_dim(), static_cast<Eigen::Index>(rows.size()));
        for (std::size_t i = 0; i < rows.size(); ++i) {
            const auto& f = world.queries()[rows[i]].features;
            queries.col(static_cast<Eigen::Index>(i)) = Eigen::Map<const Eigen::VectorXd>(f.data(), static_cast<Eigen::Index>(f.size()));
        }
        queries = model.embed(Tower::query, queries);
        source = {{"checkpoint", ckpt.string()}, {"query_seed", std::to_string(sample_seed)}};
        index.emplace(HnswIndex::load(path));
    } else {
        const auto seed = p.seed_for("query_seed", kQueryVectorSeed);
        p.finish();
        index.emplace(HnswIndex::load(path));
        queries = random_unit_vectors(n_queries, index->dim(), seed).vectors;
        source = {{"query_seed", std::to_string(seed)}};
    }
    if (queries.rows() != index->dim()) throw DataError("query dimension does not match the index");
    ExperimentReport report;
    report.kind = "recall";
    report.add_config("", source);
    report.add_config("", {{"index", path.string()},
                           {"k", std::to_string(k)},
                           {"ef_search", std::to_string(ef)},
                           {"queries", std::to_string(queries.cols())}});
    report.set_metric("recall_at_k", recall_at_k(*index, index->vectors(), queries, k, ef));
    write_report(report, p, start);
    return 0;
}

int error_exit(int code, const std::string& kind, const std::string& message) {
    nlohmann::ordered_json j;
    j["error"] = kind;
    j["exit_code"] = code;
    j["message"] = message;
    std::cerr << j.dump() << '\n';
    return code;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Candidate-generation lab: synthetic data, two-tower training, sweeps and ANN retrieval"};
    app.require_subcommand(1);
    app.fallthrough();
    app.allow_extras();
    std::uint64_t seed = 1;
    int threads = 1;
    std::string out_dir = "runs";
    std::string config;
    app.add_option("--seed", seed, "master seed; every module seed derives from it");
    app.add_option("--threads", threads, "worker cap for sweeps and the bias simulation")->check(CLI::PositiveNumber);
    app.add_option("--out-dir", out_dir, "directory for reports, checkpoints and indexes");
    app.add_option("--config", config, "JSON file with the same keys as the flags (flags win)");

    using Handler = int (*)(Params&);
    const std::vector<std::tuple<std::string, std::string, Handler>> commands = {
        {"generate-data", "write world TSVs, the served log and world.meta", cmd_generate_data},
        {"train", "train a two-tower model; writes a checkpoint and a report", cmd_train},
        {"finetune", "fine-tune a checkpoint on served data", cmd_finetune},
        {"evaluate", "evaluate a checkpoint", cmd_evaluate},
        {"bias-sim", "threshold-filtered training simulation (--movielens PATH or --synthetic)", cmd_bias_sim},
        {"sweep-negatives", "sampled-negative ratio sweep", cmd_sweep_negatives},
        {"sweep-popularity", "popularity weighting sweep over t", cmd_sweep_popularity},
        {"triad", "implicit-only, random-negative and fine-tuned models side by side", cmd_triad},
        {"build-index", "build an HNSW snapshot", cmd_build_index},
        {"query", "top-k ids for a query id", cmd_query},
        {"recall", "ANN recall against exact search", cmd_recall},
    };
    std::vector<CLI::App*> subs;
    for (const auto& [name, help, _] : commands) {
        auto* sub = app.add_subcommand(name, help);
        sub->allow_extras();
        sub->footer("Per-command keys are passed as --key value (see README).");
        subs.push_back(sub);
    }
    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        return error_exit(2, "config", e.what());
    }

    try {
        for (std::size_t i = 0; i < subs.size(); ++i) {
            if (!subs[i]->parsed()) continue;
            Params p;
            p.seed = seed;
            p.threads = threads;
            p.out_dir = out_dir;
            if (!config.empty()) p.values = read_config_file(config);
            for (auto& [k, v] : parse_extras(app.remaining())) p.values[k] = v;
            return std::get<2>(commands[i])(p);
        }
        return error_exit(2, "config", "no subcommand");
    } catch (const ConfigError& e) {
        return error_exit(2, "config", e.what());
    } catch (const NumericalError& e) {
        return error_exit(4, "numerical", e.what());
    } catch (const DataError& e) {
        return error_exit(3, "data", e.what());
    } catch (const fs::filesystem_error& e) {
        return error_exit(3, "data", e.what());
    } catch (const std::exception& e) {
        return error_exit(1, "internal", e.what());
    }
}
