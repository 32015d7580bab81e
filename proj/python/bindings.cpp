#include <pybind11/eigen.h>
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "cglab/ann.hpp"
#include "cglab/dataset.hpp"
#include "cglab/errors.hpp"
#include "cglab/metrics.hpp"
#include "cglab/pipelines.hpp"
#include "cglab/sampling.hpp"
#include "cglab/tower.hpp"

namespace py = pybind11;
using namespace cglab;

namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

py::dict report_dict(const ExperimentReport& r) {
    py::dict d;
    d["kind"] = r.kind;
    d["seed"] = r.seed;
    d["config_hash"] = r.config_hash();
    py::dict config, metrics, flags;
    for (const auto& [k, v] : r.config) config[py::str(k)] = v;
    for (const auto& [k, v] : r.metrics) metrics[py::str(k)] = v;
    for (const auto& [k, v] : r.flags) flags[py::str(k)] = v;
    d["config"] = config;
    d["metrics"] = metrics;
    d["flags"] = flags;
    d["columns"] = r.columns;
    d["rows"] = r.rows;
    return d;
}

// Python callers pass vectors as rows (n x dim); the core stores columns.
EmbeddingSet embedding_set(const RowMatrix& vectors, std::optional<std::vector<std::int64_t>> ids) {
    EmbeddingSet s;
    s.vectors = vectors.transpose();
    if (ids) {
        if (ids->size() != static_cast<std::size_t>(vectors.rows())) throw DataError("ids and vectors differ in length");
        s.ids = std::move(*ids);
    } else {
        for (Eigen::Index i = 0; i < vectors.rows(); ++i) s.ids.push_back(i);
    }
    return s;
}

py::list neighbor_list(const std::vector<Neighbor>& ns) {
    py::list out;
    for (const auto& n : ns) out.append(py::make_tuple(n.id, n.similarity));
    return out;
}

std::vector<ScoredExample> scored(const std::vector<double>& scores, const std::vector<int>& labels,
                                  const std::vector<std::int64_t>& groups) {
    if (scores.size() != labels.size() || (!groups.empty() && groups.size() != scores.size()))
        throw DataError("scores, labels and groups differ in length");
    std::vector<ScoredExample> out(scores.size());
    for (std::size_t i = 0; i < scores.size(); ++i) out[i] = {groups.empty() ? 0 : groups[i], scores[i], labels[i]};
    return out;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "Two-tower candidate generation: synthetic worlds, training pipelines and HNSW retrieval";

    static py::exception<ConfigError> config_error(m, "ConfigError", PyExc_ValueError);
    static py::exception<DataError> data_error(m, "DataError", PyExc_RuntimeError);
    static py::exception<MissingFileError> missing_file(m, "MissingFileError", data_error.ptr());
    static py::exception<NumericalError> numerical_error(m, "NumericalError", PyExc_ArithmeticError);
    py::register_exception_translator([](std::exception_ptr p) {
        try {
            if (p) std::rethrow_exception(p);
        } catch (const ConfigError& e) {
            config_error(e.what());
        } catch (const MissingFileError& e) {
            missing_file(e.what());
        } catch (const DataError& e) {
            data_error(e.what());
        } catch (const NumericalError& e) {
            numerical_error(e.what());
        }
    });

    py::enum_<LossKind>(m, "LossKind").value("pointwise", LossKind::pointwise).value("triplet", LossKind::triplet);
    py::enum_<NegativeSource>(m, "NegativeSource")
        .value("implicit", NegativeSource::implicit)
        .value("sampled", NegativeSource::sampled);
    py::enum_<SamplerMode>(m, "SamplerMode")
        .value("uniform", SamplerMode::uniform)
        .value("frequency", SamplerMode::frequency)
        .value("in_batch", SamplerMode::in_batch);
    py::enum_<Provenance>(m, "Provenance")
        .value("explicit_positive", Provenance::explicit_positive)
        .value("implicit_negative", Provenance::implicit_negative)
        .value("sampled_negative", Provenance::sampled_negative);

    // Dataset.
    py::class_<WorldConfig>(m, "WorldConfig")
        .def(py::init<>())
        .def_readwrite("seed", &WorldConfig::seed)
        .def_readwrite("n_users", &WorldConfig::n_users)
        .def_readwrite("n_items", &WorldConfig::n_items)
        .def_readwrite("languages", &WorldConfig::languages)
        .def_readwrite("latent_dim", &WorldConfig::latent_dim)
        .def_readwrite("hard_groups", &WorldConfig::hard_groups)
        .def_readwrite("query_dim", &WorldConfig::query_dim)
        .def_readwrite("candidate_dim", &WorldConfig::candidate_dim)
        .def_readwrite("padding_dims", &WorldConfig::padding_dims)
        .def_readwrite("appeal_shape", &WorldConfig::appeal_shape)
        .def_readwrite("interest_scale", &WorldConfig::interest_scale)
        .def_readwrite("engagement_bias", &WorldConfig::engagement_bias)
        .def_readwrite("appeal_coef", &WorldConfig::appeal_coef)
        .def_readwrite("feature_noise", &WorldConfig::feature_noise)
        .def_readwrite("irrelevant_engagement", &WorldConfig::irrelevant_engagement)
        .def_readwrite("language_marginal", &WorldConfig::language_marginal)
        .def("validate", &WorldConfig::validate);
    m.def("ratings_world", &ratings_world);

    py::class_<PolicyConfig>(m, "PolicyConfig")
        .def(py::init<>())
        .def_readwrite("slate_size", &PolicyConfig::slate_size)
        .def_readwrite("noise", &PolicyConfig::noise)
        .def_readwrite("popularity_weight", &PolicyConfig::popularity_weight)
        .def_readwrite("interest_weight", &PolicyConfig::interest_weight)
        .def_readwrite("interest_dims", &PolicyConfig::interest_dims)
        .def_readwrite("seed", &PolicyConfig::seed);

    py::class_<BundleConfig>(m, "BundleConfig")
        .def(py::init<>())
        .def_readwrite("train_fraction", &BundleConfig::train_fraction)
        .def_readwrite("test_negatives_per_positive", &BundleConfig::test_negatives_per_positive)
        .def_readwrite("seed", &BundleConfig::seed);

    py::class_<Interaction>(m, "Interaction")
        .def(py::init<>())
        .def_readwrite("query_id", &Interaction::query_id)
        .def_readwrite("candidate_id", &Interaction::candidate_id)
        .def_readwrite("label", &Interaction::label)
        .def_readwrite("provenance", &Interaction::provenance)
        .def_readwrite("weight", &Interaction::weight);

    py::class_<World, std::shared_ptr<World>>(m, "World")
        .def_property_readonly("n_queries", [](const World& w) { return w.queries().size(); })
        .def_property_readonly("n_candidates", [](const World& w) { return w.candidates().size(); })
        .def_property_readonly("query_dim", &World::query_dim)
        .def_property_readonly("candidate_dim", &World::candidate_dim)
        .def("query_features", [](const World& w, QueryId q) { return w.query(q).features; })
        .def("candidate_features", [](const World& w, CandidateId c) { return w.candidate(c).features; })
        .def("query_language", [](const World& w, QueryId q) { return w.query(q).primary_language; })
        .def("engagement", &World::engagement)
        .def("appeal", py::overload_cast<CandidateId>(&World::appeal, py::const_));
    m.def("generate_world", [](const WorldConfig& c) { return std::make_shared<World>(generate_world(c)); });

    py::class_<DatasetBundle>(m, "DatasetBundle")
        .def_property_readonly("world", [](const DatasetBundle& b) { return std::const_pointer_cast<World>(b.world); })
        .def_readonly("train_served", &DatasetBundle::train_served)
        .def_readonly("test_served", &DatasetBundle::test_served)
        .def_readonly("test_sampled", &DatasetBundle::test_sampled)
        .def_property_readonly("train_users", [](const DatasetBundle& b) { return b.split.train_users; })
        .def_property_readonly("test_users", [](const DatasetBundle& b) { return b.split.test_users; });
    m.def(
        "make_bundle",
        [](const WorldConfig& w, const PolicyConfig& p, const BundleConfig& b) { return make_bundle(w, p, b); },
        py::arg("world") = WorldConfig{}, py::arg("policy") = PolicyConfig{}, py::arg("bundle") = BundleConfig{});

    py::class_<Rating>(m, "Rating")
        .def(py::init<>())
        .def(py::init([](UserId u, std::int64_t movie, int rating, std::int64_t ts) { return Rating{u, movie, rating, ts}; }),
             py::arg("user_id"), py::arg("movie_id"), py::arg("rating"), py::arg("timestamp") = 0)
        .def_readwrite("user_id", &Rating::user_id)
        .def_readwrite("movie_id", &Rating::movie_id)
        .def_readwrite("rating", &Rating::rating)
        .def_readwrite("timestamp", &Rating::timestamp);
    m.def(
        "synthetic_ratings",
        [](const WorldConfig& w, int per_user, std::uint64_t seed) { return synthetic_ratings(generate_world(w), per_user, seed); },
        py::arg("world") = ratings_world(), py::arg("ratings_per_user") = 40, py::arg("seed") = 1);
    m.def("load_movielens_1m", [](const std::filesystem::path& p) { return load_movielens_1m(p).ratings; });

    // Model.
    py::class_<TowerConfig>(m, "TowerConfig")
        .def(py::init<>())
        .def_readwrite("query_input_dim", &TowerConfig::query_input_dim)
        .def_readwrite("candidate_input_dim", &TowerConfig::candidate_input_dim)
        .def_readwrite("hidden", &TowerConfig::hidden)
        .def_readwrite("embedding_dim", &TowerConfig::embedding_dim);

    py::class_<TwoTowerModel>(m, "TwoTowerModel")
        .def(py::init<TowerConfig, std::uint64_t, double>(), py::arg("config"), py::arg("seed"),
             py::arg("initial_scale") = 5.0)
        .def_property_readonly("config", &TwoTowerModel::config)
        .def_property_readonly("parameter_count", &TwoTowerModel::parameter_count)
        .def_property_readonly("scale", &TwoTowerModel::scale)
        .def_property_readonly("offset", &TwoTowerModel::offset)
        .def("parameters", [](const TwoTowerModel& m) {
            const auto p = m.parameters();
            return std::vector<double>(p.begin(), p.end());
        })
        .def("embed_query", [](const TwoTowerModel& m, std::vector<double> f) { return m.embed_query(f); })
        .def("embed_candidate", [](const TwoTowerModel& m, std::vector<double> f) { return m.embed_candidate(f); })
        .def("score", &TwoTowerModel::score)
        .def("layer_names", &TwoTowerModel::layer_names)
        .def("layer_checksum", &TwoTowerModel::layer_checksum)
        .def("save", [](const TwoTowerModel& m, const std::filesystem::path& p) { save_checkpoint(m, p); })
        .def_static("load", &load_checkpoint);

    // Sampling.
    py::class_<SamplerConfig>(m, "SamplerConfig")
        .def(py::init<>())
        .def_readwrite("mode", &SamplerConfig::mode)
        .def_readwrite("negatives_per_positive", &SamplerConfig::negatives_per_positive)
        .def_readwrite("filter_known_positives", &SamplerConfig::filter_known_positives)
        .def_readwrite("seed", &SamplerConfig::seed)
        .def_readwrite("max_retries", &SamplerConfig::max_retries)
        .def_readwrite("full_cross", &SamplerConfig::full_cross)
        .def_readwrite("frequency_smoothing", &SamplerConfig::frequency_smoothing);
    py::class_<PopularityWeightConfig>(m, "PopularityWeightConfig")
        .def(py::init<>())
        .def(py::init([](double t) { return PopularityWeightConfig{t}; }), py::arg("t"))
        .def_readwrite("t", &PopularityWeightConfig::t);
    m.def(
        "popularity_weight", [](double theta, double t) { return popularity_weight(theta, {t}); }, py::arg("theta"),
        py::arg("t"));
    m.def(
        "sample_uniform_negatives",
        [](const std::vector<Interaction>& positives, const std::vector<CandidateId>& corpus, const SamplerConfig& c) {
            return sample_uniform_negatives(positives, corpus, c).negatives;
        },
        py::arg("positives"), py::arg("corpus"), py::arg("config") = SamplerConfig{});

    // Evaluation.
    py::class_<KnnEvalConfig>(m, "KnnEvalConfig")
        .def(py::init<>())
        .def_readwrite("query_sample", &KnnEvalConfig::query_sample)
        .def_readwrite("candidate_sample", &KnnEvalConfig::candidate_sample)
        .def_readwrite("k", &KnnEvalConfig::k)
        .def_readwrite("mismatch_top_n", &KnnEvalConfig::mismatch_top_n)
        .def_readwrite("pearson_top_n", &KnnEvalConfig::pearson_top_n)
        .def_readwrite("log_popularity", &KnnEvalConfig::log_popularity)
        .def_readwrite("seed", &KnnEvalConfig::seed);
    py::class_<EvalOptions>(m, "EvalOptions")
        .def(py::init<>())
        .def_readwrite("knn", &EvalOptions::knn)
        .def_readwrite("knn_eval", &EvalOptions::knn_eval);
    m.def(
        "roc_auc",
        [](const std::vector<double>& s, const std::vector<int>& l) {
            const auto e = scored(s, l, {});
            return roc_auc(e);
        },
        py::arg("scores"), py::arg("labels"));
    m.def(
        "grouped_roc_auc",
        [](const std::vector<std::int64_t>& g, const std::vector<double>& s, const std::vector<int>& l) {
            const auto r = grouped_roc_auc(scored(s, l, g));
            return py::make_tuple(r.mean, r.groups_used, r.groups_skipped);
        },
        py::arg("groups"), py::arg("scores"), py::arg("labels"),
        "(mean, groups_used, groups_skipped) over groups holding both classes");
    m.def("pearson", [](const std::vector<double>& x, const std::vector<double>& y) { return pearson(x, y); });
    m.def("spearman", [](const std::vector<double>& x, const std::vector<double>& y) { return spearman(x, y); });
    m.def(
        "evaluate_model",
        [](const TwoTowerModel& model, const DatasetBundle& b, const EvalOptions& e) {
            return report_dict(evaluate_model(model, b, e));
        },
        py::arg("model"), py::arg("bundle"), py::arg("eval") = EvalOptions{});

    // Pipelines.
    py::class_<TripletConfig>(m, "TripletConfig").def(py::init<>()).def_readwrite("margin", &TripletConfig::margin);
    py::class_<TrainConfig>(m, "TrainConfig")
        .def(py::init<>())
        .def_readwrite("loss", &TrainConfig::loss)
        .def_readwrite("negatives", &TrainConfig::negatives)
        .def_readwrite("sampler", &TrainConfig::sampler)
        .def_readwrite("popularity_weighting", &TrainConfig::popularity_weighting)
        .def_readwrite("hidden", &TrainConfig::hidden)
        .def_readwrite("embedding_dim", &TrainConfig::embedding_dim)
        .def_readwrite("initial_scale", &TrainConfig::initial_scale)
        .def_readwrite("triplet", &TrainConfig::triplet)
        .def_readwrite("epochs", &TrainConfig::epochs)
        .def_readwrite("batch_size", &TrainConfig::batch_size)
        .def_readwrite("learning_rate", &TrainConfig::learning_rate)
        .def_readwrite("seed", &TrainConfig::seed)
        .def_readwrite("eval", &TrainConfig::eval)
        .def_readwrite("knn_eval", &TrainConfig::knn_eval)
        .def("validate", &TrainConfig::validate);
    m.def(
        "train",
        [](const DatasetBundle& b, const TrainConfig& c) {
            auto r = train(b, c);
            return py::make_tuple(std::move(r.model), report_dict(r.report), r.epoch_losses);
        },
        py::arg("bundle"), py::arg("config") = TrainConfig{}, "Returns (model, report, epoch_losses).");

    py::class_<FineTuneConfig>(m, "FineTuneConfig")
        .def(py::init<>())
        .def_readwrite("base_checkpoint", &FineTuneConfig::base_checkpoint)
        .def_readwrite("base_learning_rate", &FineTuneConfig::base_learning_rate)
        .def_readwrite("lr_scale", &FineTuneConfig::lr_scale)
        .def_readwrite("epochs", &FineTuneConfig::epochs)
        .def_readwrite("frozen_layers", &FineTuneConfig::frozen_layers)
        .def_readwrite("batch_size", &FineTuneConfig::batch_size)
        .def_readwrite("seed", &FineTuneConfig::seed);
    m.def(
        "fine_tune",
        [](const TwoTowerModel& base, const DatasetBundle& b, const FineTuneConfig& c,
           std::optional<std::vector<Interaction>> data, const EvalOptions& e) {
            auto r = fine_tune(base, c, data ? *data : b.train_served, b, e);
            return py::make_tuple(std::move(r.model), report_dict(r.report));
        },
        py::arg("model"), py::arg("bundle"), py::arg("config") = FineTuneConfig{}, py::arg("data") = py::none(),
        py::arg("eval") = EvalOptions{}, "Fine-tunes on `data` (default: the bundle's served training log).");

    m.def(
        "sweep_negative_ratio",
        [](const DatasetBundle& b, const std::vector<int>& ratios, const TrainConfig& c, int threads) {
            return report_dict(sweep_negative_ratio(b, ratios, c, threads));
        },
        py::arg("bundle"), py::arg("ratios") = std::vector<int>{1, 4, 16, 64}, py::arg("config") = TrainConfig{},
        py::arg("threads") = 1);
    m.def(
        "sweep_popularity_t",
        [](const DatasetBundle& b, const std::vector<double>& ts, const TrainConfig& c, int threads) {
            return report_dict(sweep_popularity_t(b, ts, c, threads));
        },
        py::arg("bundle"), py::arg("t_values"), py::arg("config"), py::arg("threads") = 1);
    m.def(
        "find_elbow",
        [](const std::vector<double>& t, const std::vector<double>& auc, double fraction) {
            return find_elbow(t, auc, fraction);
        },
        py::arg("t"), py::arg("auc"), py::arg("fraction") = 0.1);

    py::class_<IdClassifierConfig>(m, "IdClassifierConfig")
        .def(py::init<>())
        .def_readwrite("embedding_dim", &IdClassifierConfig::embedding_dim)
        .def_readwrite("hidden", &IdClassifierConfig::hidden)
        .def_readwrite("epochs", &IdClassifierConfig::epochs)
        .def_readwrite("batch_size", &IdClassifierConfig::batch_size)
        .def_readwrite("learning_rate", &IdClassifierConfig::learning_rate);
    py::class_<BiasSimConfig>(m, "BiasSimConfig")
        .def(py::init<>())
        .def_readwrite("taus", &BiasSimConfig::taus)
        .def_readwrite("classifier", &BiasSimConfig::classifier)
        .def_readwrite("negatives_per_positive", &BiasSimConfig::negatives_per_positive)
        .def_readwrite("train_fraction", &BiasSimConfig::train_fraction)
        .def_readwrite("filter_all_examples", &BiasSimConfig::filter_all_examples)
        .def_readwrite("seed", &BiasSimConfig::seed);
    m.def(
        "run_bias_simulation",
        [](const std::vector<Rating>& ratings, const BiasSimConfig& c, int threads) {
            return report_dict(run_bias_simulation(ratings, c, threads));
        },
        py::arg("ratings"), py::arg("config") = BiasSimConfig{}, py::arg("threads") = 1);

    py::class_<TriadConfig>(m, "TriadConfig")
        .def(py::init<>())
        .def_readwrite("implicit_model", &TriadConfig::implicit_model)
        .def_readwrite("random_model", &TriadConfig::random_model)
        .def_readwrite("fine_tune", &TriadConfig::fine_tune)
        .def_readwrite("eval", &TriadConfig::eval);
    m.def(
        "run_model_triad",
        [](const DatasetBundle& b, const TriadConfig& c) {
            auto r = run_model_triad(b, c);
            return py::make_tuple(report_dict(r.report), std::move(r.models));
        },
        py::arg("bundle"), py::arg("config") = TriadConfig{}, "Returns (report, [model_a, model_b, model_c]).");

    // Retrieval.
    py::class_<HnswConfig>(m, "HnswConfig")
        .def(py::init<>())
        .def_readwrite("M", &HnswConfig::M)
        .def_readwrite("ef_construction", &HnswConfig::ef_construction)
        .def_readwrite("ef_search", &HnswConfig::ef_search)
        .def_readwrite("seed", &HnswConfig::seed);
    py::class_<HnswIndex>(m, "HnswIndex")
        .def(py::init<int, HnswConfig>(), py::arg("dim"), py::arg("config") = HnswConfig{})
        .def("insert", [](HnswIndex& h, std::int64_t id, std::vector<double> v) { h.insert(id, v); })
        .def(
            "add",
            [](HnswIndex& h, const RowMatrix& vectors, std::optional<std::vector<std::int64_t>> ids) {
                const auto s = embedding_set(vectors, std::move(ids));
                for (std::size_t i = 0; i < s.size(); ++i) {
                    const auto c = s.vectors.col(static_cast<Eigen::Index>(i));
                    h.insert(s.ids[i], {c.data(), static_cast<std::size_t>(c.size())});
                }
            },
            py::arg("vectors"), py::arg("ids") = py::none(), "Inserts the rows of an (n, dim) array.")
        .def(
            "search",
            [](const HnswIndex& h, std::vector<double> q, int k, int ef) { return neighbor_list(h.search(q, k, ef)); },
            py::arg("query"), py::arg("k") = 10, py::arg("ef_search") = 0, "[(id, similarity)] best first.")
        .def("__len__", &HnswIndex::size)
        .def_property_readonly("dim", &HnswIndex::dim)
        .def_property_readonly("max_level", &HnswIndex::max_level)
        .def("level_of", &HnswIndex::level_of)
        .def("neighbors", &HnswIndex::neighbors)
        .def("digest", &HnswIndex::digest)
        .def(
            "recall",
            [](const HnswIndex& h, const RowMatrix& queries, int k, int ef) {
                const Eigen::MatrixXd q = queries.transpose();
                return recall_at_k(h, h.vectors(), q, k, ef);
            },
            py::arg("queries"), py::arg("k") = 10, py::arg("ef_search") = 0)
        .def("save", &HnswIndex::save)
        .def_static("load", &HnswIndex::load);
    m.def(
        "random_unit_vectors",
        [](std::size_t n, int dim, std::uint64_t seed) {
            const RowMatrix v = random_unit_vectors(n, dim, seed).vectors.transpose();
            return v;
        },
        py::arg("n"), py::arg("dim"), py::arg("seed"), "(n, dim) array of rows drawn uniformly on the sphere.");
    m.def(
        "exact_knn",
        [](const RowMatrix& corpus, std::vector<double> q, int k, std::optional<std::vector<std::int64_t>> ids) {
            return neighbor_list(exact_knn(embedding_set(corpus, std::move(ids)), q, k));
        },
        py::arg("corpus"), py::arg("query"), py::arg("k"), py::arg("ids") = py::none());
}
