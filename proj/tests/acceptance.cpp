// Acceptance gate: runs every criterion at its stated tolerance and prints
// one PASS/FAIL line per criterion. Pass criterion numbers as arguments to
// run a subset. CGLAB_MOVIELENS=<ratings.dat> switches criterion 1 from the
// synthetic ratings to MovieLens 1M.

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <functional>
#include <map>
#include <set>
#include <sstream>
#include <string>

#include "cglab/ann.hpp"
#include "cglab/errors.hpp"
#include "cglab/pipelines.hpp"
#include "gradcheck.hpp"
#include "oracles.hpp"

using namespace cglab;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

std::string fmt(double v, int digits = 4) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.*f", digits, v);
    return buf;
}

std::string sci(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.2e", v);
    return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t).count();
}

const DatasetBundle& default_bundle() {
    static const DatasetBundle b = make_bundle(WorldConfig{}, PolicyConfig{}, BundleConfig{});
    return b;
}

double metric(const ExperimentReport& r, const std::string& name) {
    const auto v = r.metric(name);
    if (!v) throw DataError("report " + r.kind + " lacks metric " + name);
    return *v;
}

/// Grouped AUC recomputed from single-example embeddings and the O(P*N) oracle.
double oracle_grouped_auc(const TwoTowerModel& model, const World& world, std::span<const Interaction> records) {
    std::map<QueryId, Embedding> q;
    std::map<CandidateId, Embedding> c;
    std::vector<ScoredExample> ex;
    for (const auto& r : records) {
        if (!q.count(r.query_id)) q[r.query_id] = model.embed_query(world.query(r.query_id).features);
        if (!c.count(r.candidate_id)) c[r.candidate_id] = model.embed_candidate(world.candidate(r.candidate_id).features);
        ex.push_back({world.query(r.query_id).user_id, model.score(q[r.query_id], c[r.candidate_id]), r.label});
    }
    return oracle::grouped_auc(ex).first;
}

Outcome criterion_bias_simulation() {
    const auto start = std::chrono::steady_clock::now();
    std::vector<Rating> ratings;
    std::string source = "synthetic";
    if (const char* path = std::getenv("CGLAB_MOVIELENS")) {
        ratings = load_movielens_1m(path).ratings;
        source = "movielens";
    } else {
        ratings = synthetic_ratings(generate_world(ratings_world()), 40, 1);
    }
    const auto rep = run_bias_simulation(ratings, BiasSimConfig{});
    std::vector<double> tau, biased, full;
    for (const auto& row : rep.rows) {
        if (!row[3] || !row[4]) continue;
        tau.push_back(*row[0]);
        biased.push_back(*row[3]);
        full.push_back(*row[4]);
    }
    const double rb = oracle::spearman(tau, biased), rf = oracle::spearman(tau, full);
    const double secs = seconds_since(start);
    Outcome o;
    o.pass = tau.size() >= 5 && rb >= 0.8 && rf <= -0.8 && secs <= 1800;
    o.detail = source + ", " + std::to_string(tau.size()) + " points, rho(tau, biased auc) = " + fmt(rb) +
               " (need >= 0.8), rho(tau, full auc) = " + fmt(rf) + " (need <= -0.8), " + fmt(secs, 0) + " s";
    return o;
}

Outcome criterion_negative_ratio() {
    const std::vector<int> ratios{1, 4, 16, 64};
    const auto rep = sweep_negative_ratio(default_bundle(), ratios, TrainConfig{});
    const auto g = rep.column("sampled_grouped_auc");
    Outcome o{g.size() == ratios.size(), "grouped auc"};
    for (std::size_t i = 0; i < g.size(); ++i) {
        o.detail += " " + fmt(g[i]);
        if (i > 0 && g[i] < g[i - 1] - 0.01) o.pass = false;
    }
    o.detail += " (steps may drop by at most 0.01)";
    return o;
}

Outcome criterion_popularity() {
    TrainConfig base;
    base.loss = LossKind::triplet;
    base.sampler.mode = SamplerMode::in_batch;
    const std::vector<double> t{1, 10, 100, 1000, 10000};
    const auto rep = sweep_popularity_t(default_bundle(), t, base);
    const auto pearson = rep.column("popularity_pearson");
    const auto mismatch = rep.column("mismatch_rate");
    Outcome o{pearson.size() == t.size() && mismatch.size() == t.size() && rep.flag("elbow_t").has_value(), ""};
    // Steps are compared against the shared 0.02 noise band.
    std::string ps = "pearson", ms = "mismatch";
    for (std::size_t i = 0; i < pearson.size(); ++i) {
        ps += " " + fmt(pearson[i]);
        ms += " " + fmt(mismatch[i], 3);
        if (i > 0 && pearson[i] - pearson[i - 1] <= -0.02) o.pass = false;
        if (i > 0 && mismatch[i] - mismatch[i - 1] >= 0.02) o.pass = false;
    }
    o.detail = ps + "; " + ms + "; elbow_t " + rep.flag("elbow_t").value_or("missing");
    return o;
}

Outcome criterion_triad() {
    const auto& bundle = default_bundle();
    const auto r = run_model_triad(bundle, TriadConfig{});
    double g[3];
    for (int i = 0; i < 3; ++i) {
        g[i] = oracle_grouped_auc(r.models[static_cast<std::size_t>(i)], *bundle.world, bundle.test_served);
        const char* key[] = {"A.served_grouped_auc", "B.served_grouped_auc", "C.served_grouped_auc"};
        if (std::abs(g[i] - metric(r.report, key[i])) > 1e-9)
            throw NumericalError(std::string("oracle disagrees with ") + key[i]);
    }
    const double ma = metric(r.report, "A.mismatch_rate"), mb = metric(r.report, "B.mismatch_rate"),
                 mc = metric(r.report, "C.mismatch_rate");
    const double b_auc = metric(r.report, "B.served_auc");
    const bool s1 = ma >= 2 * mb;
    const bool s2 = b_auc >= 0.45 && b_auc <= 0.65 && g[1] >= 0.45 && g[1] <= 0.65;
    const bool s3 = g[2] >= 0.9 * g[0];
    const bool s4 = mc <= 1.5 * mb;
    Outcome o{s1 && s2 && s3 && s4, ""};
    o.detail = "mismatch A " + fmt(ma, 3) + " vs B " + fmt(mb, 3) + (s1 ? " ok" : " FAIL") + "; B served auc " +
               fmt(b_auc) + " grouped " + fmt(g[1]) + (s2 ? " ok" : " FAIL") + "; C/A grouped " + fmt(g[2]) + "/" +
               fmt(g[0]) + " = " + fmt(g[2] / g[0], 3) + (s3 ? " ok" : " FAIL (need >= 0.9)") + "; mismatch C " +
               fmt(mc, 3) + (s4 ? " ok" : " FAIL (need <= 1.5 x B)");
    return o;
}

Outcome criterion_gradients() {
    double worst = 0;
    int configs = 0;
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        Rng rng(9000 + seed);
        TowerConfig tc;
        tc.query_input_dim = 3 + static_cast<int>(rng.below(5));
        tc.candidate_input_dim = 3 + static_cast<int>(rng.below(5));
        tc.hidden.assign(1 + rng.below(3), 0);
        for (int& h : tc.hidden) h = 8 + static_cast<int>(rng.below(8));
        tc.embedding_dim = 2 + static_cast<int>(rng.below(5));

        TwoTowerModel m(tc, seed);
        oracle::jitter(m, rng);
        m.set_calibration(1 + 6 * rng.uniform(), rng.normal());
        const auto pairs = oracle::random_pair_batch(rng, tc, 4, 6, 12);
        const auto pl = pointwise_loss_grad(m, pairs);
        const auto pc = oracle::finite_difference(
            m, pl.gradient, [&](const TwoTowerModel& x) { return pointwise_loss_grad(x, pairs).loss; });

        TripletConfig trc;
        trc.margin = 0.5 + rng.uniform();
        const auto trip = oracle::random_triplet_batch(rng, tc, 4, 6, 12);
        const auto tl = triplet_loss_grad(m, trip, trc);
        const auto tcheck = oracle::finite_difference(
            m, tl.gradient, [&](const TwoTowerModel& x) { return triplet_loss_grad(x, trip, trc).loss; });
        worst = std::max({worst, pc.norm_relative_error, pc.max_entry_error, tcheck.norm_relative_error,
                          tcheck.max_entry_error});
        configs += 2;
    }
    return {worst < 1e-4, std::to_string(configs) + " seeded checks, worst relative error " + sci(worst) + " (need < 1e-4)"};
}

Outcome criterion_auc_oracle() {
    Rng rng(606);
    double worst = 0;
    int tie_heavy = 0;
    for (int inst = 0; inst < 1000; ++inst) {
        const auto n = 2 + rng.below(300);
        const int kind = inst % 4;  // 0 continuous, 1 few levels, 2 two levels, 3 all equal
        std::vector<ScoredExample> ex(n);
        for (std::size_t i = 0; i < n; ++i) {
            ex[i].group = static_cast<std::int64_t>(rng.below(5));
            ex[i].label = rng.uniform() < 0.3 ? 1 : 0;
            ex[i].score = kind == 0 ? rng.normal()
                          : kind == 1 ? static_cast<double>(rng.below(6))
                          : kind == 2 ? static_cast<double>(rng.below(2))
                                      : 0.25;
        }
        ex[0].label = 1;
        ex[1].label = 0;
        if (kind) ++tie_heavy;
        worst = std::max(worst, std::abs(roc_auc(ex) - oracle::pairwise_auc(ex)));
        const auto [mean, used] = oracle::grouped_auc(ex);
        if (used == 0) {
            try {
                grouped_roc_auc(ex);
                worst = 1;
            } catch (const DataError&) {
            }
            continue;
        }
        const auto g = grouped_roc_auc(ex);
        if (g.groups_used != used) worst = 1;
        worst = std::max(worst, std::abs(g.mean - mean));
    }
    return {worst <= 1e-12, "1000 instances (" + std::to_string(tie_heavy) + " tie-heavy), max |fast - pairwise| = " +
                                sci(worst) + ", grouped included (need <= 1e-12)"};
}

Outcome criterion_hnsw() {
    const auto corpus = random_unit_vectors(50000, 32, 7001);
    const auto queries = random_unit_vectors(1000, 32, 7002);
    HnswIndex index(32);
    for (std::size_t i = 0; i < corpus.size(); ++i)
        index.insert(corpus.ids[i], {corpus.vectors.col(static_cast<Eigen::Index>(i)).data(), 32});
    double hits = 0;
    for (Eigen::Index qi = 0; qi < queries.vectors.cols(); ++qi) {
        const Eigen::VectorXd q = queries.vectors.col(qi);
        const auto truth = oracle::top_k(corpus.vectors, q, 10);
        const std::set<std::size_t> want(truth.begin(), truth.end());
        for (const auto& n : index.search({q.data(), 32}, 10)) hits += want.count(static_cast<std::size_t>(n.id));
    }
    const double recall = hits / (10.0 * static_cast<double>(queries.size()));

    std::size_t exact_queries = 0, exact_ok = 0;
    for (std::size_t n : {10u, 100u, 500u, 1000u, 2000u}) {
        const auto small = random_unit_vectors(n, 32, 7100 + n);
        HnswIndex s(32);
        for (std::size_t i = 0; i < n; ++i) s.insert(small.ids[i], {small.vectors.col(static_cast<Eigen::Index>(i)).data(), 32});
        const auto qs = random_unit_vectors(50, 32, 7200 + n);
        const int k = static_cast<int>(std::min<std::size_t>(10, n));
        for (Eigen::Index qi = 0; qi < qs.vectors.cols(); ++qi) {
            const Eigen::VectorXd q = qs.vectors.col(qi);
            const auto truth = oracle::top_k(small.vectors, q, k);
            const auto got = s.search({q.data(), 32}, k, static_cast<int>(n));
            bool same = got.size() == truth.size();
            for (std::size_t r = 0; same && r < got.size(); ++r) same = got[r].id == static_cast<std::int64_t>(truth[r]);
            ++exact_queries;
            exact_ok += same;
        }
    }
    return {recall >= 0.95 && exact_ok == exact_queries,
            "recall@10 = " + fmt(recall) + " on 50000 x 32 (need >= 0.95); exact at ef = n on " +
                std::to_string(exact_ok) + "/" + std::to_string(exact_queries) + " queries over corpora <= 2000"};
}

Outcome criterion_weight_laws() {
    Rng rng(808);
    std::size_t checks = 0, bad = 0;
    for (int i = 0; i < 20000; ++i) {
        const double t = std::exp(12 * rng.uniform() - 4);
        const PopularityWeightConfig c{t};
        bad += popularity_weight(0.0, c) != 1.0;
        // Beyond theta / t of about 36 the excess over 0.5 is below one ulp.
        const double a = t * 30 * rng.uniform(), b = a + t * (1e-3 + rng.uniform());
        const double wa = popularity_weight(a, c), wb = popularity_weight(b, c);
        bad += !(wa > wb) || !(wb > 0.5) || !(wa <= 1.0);
        const double far = t * (1e3 + 1e6 * rng.uniform());
        bad += popularity_weight(far, c) < 0.5 || popularity_weight(far, c) > 0.5 + 1e-15;
        const double k = 40 * rng.uniform();
        bad += std::abs(popularity_weight(k * t, c) - (0.5 + 0.5 * std::exp(-k))) > 1e-15;
        checks += 4;
    }
    return {bad == 0, std::to_string(checks) + " property checks over random (theta, t), " + std::to_string(bad) +
                          " violations"};
}

Outcome criterion_determinism() {
    WorldConfig wc;
    wc.n_users = 200;
    wc.n_items = 1500;
    wc.languages = 3;
    PolicyConfig pc;
    pc.slate_size = 20;
    auto make = [&] { return make_bundle(wc, pc, BundleConfig{}); };
    const auto b1 = make(), b2 = make();
    TrainConfig tc;
    tc.hidden = {32, 16};
    tc.embedding_dim = 8;
    tc.epochs = 2;
    tc.eval.query_sample = 100;
    TrainConfig trip = tc;
    trip.loss = LossKind::triplet;
    trip.sampler.mode = SamplerMode::in_batch;
    trip.popularity_weighting = PopularityWeightConfig{50};

    std::vector<std::pair<std::string, std::pair<ExperimentReport, ExperimentReport>>> runs;
    const auto m1 = train(b1, tc), m2 = train(b2, tc);
    runs.push_back({"train", {m1.report, m2.report}});
    runs.push_back({"train-triplet", {train(b1, trip).report, train(b2, trip).report}});
    EvalOptions eval;
    eval.knn.query_sample = 100;
    runs.push_back({"evaluate", {evaluate_model(m1.model, b1, eval), evaluate_model(m2.model, b2, eval)}});
    FineTuneConfig fc;
    runs.push_back({"finetune", {fine_tune(m1.model, fc, b1.train_served, b1, eval).report,
                                 fine_tune(m2.model, fc, b2.train_served, b2, eval).report}});
    const std::vector<int> ratios{1, 4};
    runs.push_back({"sweep-negatives", {sweep_negative_ratio(b1, ratios, tc, 1), sweep_negative_ratio(b2, ratios, tc, 2)}});
    const std::vector<double> ts{10, 1000};
    runs.push_back({"sweep-popularity", {sweep_popularity_t(b1, ts, trip, 1), sweep_popularity_t(b2, ts, trip, 2)}});
    TriadConfig triad;
    for (auto* m : {&triad.implicit_model, &triad.random_model}) {
        m->hidden = tc.hidden;
        m->embedding_dim = tc.embedding_dim;
        m->epochs = 2;
    }
    triad.eval = eval;
    runs.push_back({"triad", {run_model_triad(b1, triad).report, run_model_triad(b2, triad).report}});
    const auto ratings = synthetic_ratings(generate_world(wc), 20, 3);
    BiasSimConfig bc;
    bc.classifier.epochs = 2;
    runs.push_back({"bias-sim", {run_bias_simulation(ratings, bc, 1), run_bias_simulation(ratings, bc, 2)}});

    std::vector<std::string> differing;
    std::size_t values = 0;
    for (const auto& [name, pair] : runs) {
        const auto& [a, b] = pair;
        values += a.metrics.size();
        for (const auto& row : a.rows) values += row.size();
        if (a.metrics != b.metrics || a.rows != b.rows || a.flags != b.flags || a.to_jsonl() != b.to_jsonl())
            differing.push_back(name);
    }
    const auto vecs = random_unit_vectors(3000, 16, 5);
    auto build = [&] {
        HnswIndex index(16);
        for (std::size_t i = 0; i < vecs.size(); ++i) index.insert(vecs.ids[i], {vecs.vectors.col(static_cast<Eigen::Index>(i)).data(), 16});
        return index;
    };
    const auto i1 = build(), i2 = build();
    const auto q = random_unit_vectors(100, 16, 6);
    if (i1.digest() != i2.digest() || recall_at_k(i1, vecs, q.vectors, 10) != recall_at_k(i2, vecs, q.vectors, 10))
        differing.push_back("hnsw");

    Outcome o{differing.empty(), std::to_string(runs.size() + 1) + " pipelines rerun, " + std::to_string(values) +
                                     " reported values compared bit-exactly"};
    for (const auto& d : differing) o.detail += ", differs: " + d;
    return o;
}

Outcome criterion_finetune_protocol() {
    WorldConfig wc;
    wc.n_users = 200;
    wc.n_items = 1500;
    wc.languages = 3;
    PolicyConfig pc;
    pc.slate_size = 20;
    const auto bundle = make_bundle(wc, pc, BundleConfig{});
    TrainConfig tc;
    tc.hidden = {32, 16};
    tc.embedding_dim = 8;
    tc.epochs = 2;
    tc.knn_eval = false;
    const auto base = train(bundle, tc).model;
    EvalOptions eval;
    eval.knn_eval = false;

    const FineTuneConfig defaults;
    const auto r = fine_tune(base, defaults, bundle.train_served, bundle, eval);
    const auto n = bundle.train_served.size();
    const auto bs = static_cast<std::size_t>(defaults.batch_size);
    const bool one_epoch = defaults.epochs == 1 && r.epochs_run == 1 && r.steps == (n + bs - 1) / bs;
    const bool tenth = defaults.lr_scale == 0.1 && r.learning_rate == defaults.base_learning_rate * 0.1 &&
                       metric(r.report, "learning_rate") == r.learning_rate;

    FineTuneConfig frozen;
    frozen.frozen_layers = {"query.0", "candidate.0", "calibration"};
    const auto f = fine_tune(base, frozen, bundle.train_served, bundle, eval);
    std::size_t kept = 0, moved = 0;
    for (const auto& layer : base.layer_names()) {
        const bool is_frozen =
            std::find(frozen.frozen_layers.begin(), frozen.frozen_layers.end(), layer) != frozen.frozen_layers.end();
        const bool same = f.model.layer_checksum(layer) == base.layer_checksum(layer);
        if (is_frozen) kept += same;
        else moved += !same;
    }
    const bool checksums = kept == frozen.frozen_layers.size() && moved == base.layer_names().size() - kept;
    return {one_epoch && tenth && checksums,
            "epochs " + std::to_string(r.epochs_run) + ", steps " + std::to_string(r.steps) + " over " +
                std::to_string(n) + " rows, learning rate " + sci(r.learning_rate) + " from " +
                sci(defaults.base_learning_rate) + ", frozen checksums unchanged " +
                std::to_string(kept) + "/" + std::to_string(frozen.frozen_layers.size()) + ", trainable layers moved " +
                std::to_string(moved)};
}

}  // namespace

int main(int argc, char** argv) {
    const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
        {"bias-simulation trend", criterion_bias_simulation},
        {"negative-ratio trend", criterion_negative_ratio},
        {"popularity-weighting trend", criterion_popularity},
        {"triad ordering", criterion_triad},
        {"gradient fidelity", criterion_gradients},
        {"auc oracle equivalence", criterion_auc_oracle},
        {"hnsw quality", criterion_hnsw},
        {"weight-formula laws", criterion_weight_laws},
        {"determinism", criterion_determinism},
        {"fine-tune protocol", criterion_finetune_protocol},
    };
    std::set<int> selected;
    for (int i = 1; i < argc; ++i) selected.insert(std::atoi(argv[i]));
    int failures = 0;
    for (std::size_t i = 0; i < criteria.size(); ++i) {
        const int id = static_cast<int>(i) + 1;
        if (!selected.empty() && !selected.count(id)) continue;
        const auto start = std::chrono::steady_clock::now();
        Outcome o;
        try {
            o = criteria[i].second();
        } catch (const std::exception& e) {
            o = {false, std::string("error: ") + e.what()};
        }
        failures += !o.pass;
        std::printf("criterion %d %s: %s | %s [%.0f s]\n", id, o.pass ? "PASS" : "FAIL", criteria[i].first.c_str(),
                    o.detail.c_str(), seconds_since(start));
        std::fflush(stdout);
    }
    return failures == 0 ? 0 : 1;
}
