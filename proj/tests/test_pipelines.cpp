#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "cglab/errors.hpp"
#include "cglab/pipelines.hpp"
#include "cglab/random.hpp"
#include "oracles.hpp"

using namespace cglab;

namespace {

WorldConfig tiny_world() {
    WorldConfig c;
    c.n_users = 120;
    c.n_items = 900;
    c.languages = 3;
    return c;
}

PolicyConfig tiny_policy() {
    PolicyConfig p;
    p.slate_size = 20;
    return p;
}

const DatasetBundle& bundle() {
    static const DatasetBundle b = make_bundle(tiny_world(), tiny_policy(), BundleConfig{});
    return b;
}

TrainConfig small_train() {
    TrainConfig c;
    c.hidden = {16};
    c.embedding_dim = 8;
    c.epochs = 2;
    c.batch_size = 64;
    c.sampler.negatives_per_positive = 2;
    c.eval.query_sample = 40;
    return c;
}

std::filesystem::path temp_dir(const std::string& name) {
    auto p = std::filesystem::temp_directory_path() / ("cglab_test_pipelines_" + name);
    std::filesystem::remove_all(p);
    return p;
}

std::string slurp(const std::filesystem::path& p) {
    std::ifstream in(p);
    std::stringstream s;
    s << in.rdbuf();
    return s.str();
}

}  // namespace

TEST(Bundle, SplitAndTestSets) {
    const auto& b = bundle();
    ASSERT_FALSE(b.train_served.empty());
    ASSERT_FALSE(b.test_served.empty());
    for (const auto& r : b.train_served) EXPECT_TRUE(b.split.is_train(r.query_id));
    for (const auto& r : b.test_served) EXPECT_FALSE(b.split.is_train(r.query_id));
    std::size_t pos = 0, neg = 0;
    for (const auto& r : b.test_sampled) {
        EXPECT_FALSE(b.split.is_train(r.query_id));
        if (r.label == 1) {
            EXPECT_EQ(r.provenance, Provenance::explicit_positive);
            ++pos;
        } else {
            EXPECT_EQ(r.provenance, Provenance::sampled_negative);
            ++neg;
        }
    }
    EXPECT_GT(pos, 0u);
    EXPECT_LE(neg, pos * 20);
    for (const auto& r : b.train_positives()) EXPECT_EQ(r.label, 1);
    EXPECT_EQ(b.corpus().size(), 900u);
}

TEST(Bundle, ConfigValidation) {
    BundleConfig c;
    c.train_fraction = 1.0;
    c.test_negatives_per_positive = 0;
    try {
        c.validate();
        FAIL();
    } catch (const ConfigError& e) {
        EXPECT_NE(std::string(e.what()).find("train_fraction"), std::string::npos);
        EXPECT_NE(std::string(e.what()).find("test_negatives_per_positive"), std::string::npos);
    }
}

TEST(Train, DeterministicReport) {
    const auto a = train(bundle(), small_train());
    const auto b = train(bundle(), small_train());
    EXPECT_EQ(a.report.to_jsonl(), b.report.to_jsonl());
    EXPECT_EQ(a.model.parameters().size(), b.model.parameters().size());
    EXPECT_TRUE(std::equal(a.model.parameters().begin(), a.model.parameters().end(), b.model.parameters().begin()));
    auto other = small_train();
    other.seed = 99;
    EXPECT_NE(train(bundle(), other).report.to_jsonl(), a.report.to_jsonl());
}

TEST(Train, MetricsAreInRange) {
    const auto r = train(bundle(), small_train()).report;
    for (const char* k : {"sampled_auc", "sampled_grouped_auc", "served_auc", "served_grouped_auc", "mismatch_rate"}) {
        ASSERT_TRUE(r.metric(k)) << k;
        EXPECT_GE(*r.metric(k), 0.0) << k;
        EXPECT_LE(*r.metric(k), 1.0) << k;
    }
    EXPECT_GT(*r.metric("sampled_auc"), 0.6);
}

TEST(Train, AllLossAndSamplerCombinations) {
    for (auto loss : {LossKind::pointwise, LossKind::triplet}) {
        for (auto mode : {SamplerMode::uniform, SamplerMode::frequency, SamplerMode::in_batch}) {
            auto c = small_train();
            c.loss = loss;
            c.sampler.mode = mode;
            c.epochs = 1;
            c.knn_eval = false;
            if (loss == LossKind::pointwise && mode == SamplerMode::in_batch) {
                EXPECT_THROW(train(bundle(), c), ConfigError);
                continue;
            }
            const auto r = train(bundle(), c);
            EXPECT_TRUE(std::isfinite(r.epoch_losses.back())) << to_string(loss) << "/" << to_string(mode);
            EXPECT_GT(r.steps, 0u);
        }
    }
    auto implicit = small_train();
    implicit.negatives = NegativeSource::implicit;
    implicit.knn_eval = false;
    EXPECT_GT(train(bundle(), implicit).steps, 0u);
}

TEST(Train, ConfigValidation) {
    auto c = small_train();
    c.epochs = 0;
    c.learning_rate = -1;
    c.hidden = {0};
    try {
        c.validate();
        FAIL();
    } catch (const ConfigError& e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find("epochs"), std::string::npos);
        EXPECT_NE(msg.find("learning_rate"), std::string::npos);
    }
    EXPECT_THROW(parse_loss_kind("hinge"), ConfigError);
    EXPECT_EQ(parse_negative_source("implicit"), NegativeSource::implicit);
}

TEST(FineTune, DefaultsToOneEpochAtTenthRate) {
    const FineTuneConfig defaults;
    EXPECT_EQ(defaults.epochs, 1);
    EXPECT_DOUBLE_EQ(defaults.lr_scale, 0.1);

    auto tc = small_train();
    tc.learning_rate = 2e-3;
    tc.knn_eval = false;
    const auto base = train(bundle(), tc).model;
    FineTuneConfig fc;
    fc.base_learning_rate = tc.learning_rate;
    fc.frozen_layers = {"query.0", "candidate.0"};
    EvalOptions eval;
    eval.knn_eval = false;
    const auto r = fine_tune(base, fc, bundle().train_served, bundle(), eval);
    EXPECT_EQ(r.epochs_run, 1u);
    EXPECT_DOUBLE_EQ(r.learning_rate, 2e-4);
    EXPECT_EQ(*r.report.metric("epochs_run"), 1.0);
    EXPECT_EQ(r.steps, (bundle().train_served.size() + static_cast<std::size_t>(fc.batch_size) - 1) /
                           static_cast<std::size_t>(fc.batch_size));
    for (const auto& layer : fc.frozen_layers) EXPECT_EQ(r.model.layer_checksum(layer), base.layer_checksum(layer));
    bool moved = false;
    for (const auto& layer : base.layer_names())
        if (std::find(fc.frozen_layers.begin(), fc.frozen_layers.end(), layer) == fc.frozen_layers.end())
            moved = moved || r.model.layer_checksum(layer) != base.layer_checksum(layer);
    EXPECT_TRUE(moved);
}

TEST(FineTune, RejectsSampledRowsAndLoadsCheckpoint) {
    auto tc = small_train();
    tc.epochs = 1;
    tc.knn_eval = false;
    const auto base = train(bundle(), tc).model;
    EvalOptions eval;
    eval.knn_eval = false;
    auto data = bundle().train_served;
    data.push_back({0, 1, 0, Provenance::sampled_negative, 1.0});
    EXPECT_THROW(fine_tune(base, FineTuneConfig{}, data, bundle(), eval), DataError);
    EXPECT_THROW(fine_tune(base, FineTuneConfig{}, std::vector<Interaction>{}, bundle(), eval), DataError);

    const auto dir = temp_dir("ft");
    std::filesystem::create_directories(dir);
    FineTuneConfig fc;
    fc.base_checkpoint = dir / "base.ckpt";
    EXPECT_THROW(fine_tune(fc, bundle().train_served, bundle(), eval), MissingFileError);
    save_checkpoint(base, fc.base_checkpoint);
    const auto from_file = fine_tune(fc, bundle().train_served, bundle(), eval);
    const auto in_memory = fine_tune(base, fc, bundle().train_served, bundle(), eval);
    EXPECT_EQ(from_file.report.to_jsonl(), in_memory.report.to_jsonl());
    std::filesystem::remove_all(dir);
}

TEST(Elbow, KnownShapes) {
    const std::vector<double> t{1, 10, 100, 1000, 10000};
    EXPECT_EQ(find_elbow(t, std::vector<double>{0.5, 0.7, 0.8, 0.805, 0.806}), 100.0);
    EXPECT_EQ(find_elbow(t, std::vector<double>{0.5, 0.6, 0.7, 0.8, 0.9}), 10000.0);
    EXPECT_EQ(find_elbow(t, std::vector<double>{0.5, 0.5, 0.5, 0.5, 0.5}), 1.0);
    EXPECT_EQ(find_elbow(std::vector<double>{1}, std::vector<double>{0.5}), std::nullopt);
    EXPECT_THROW(find_elbow(t, std::vector<double>{0.5}), ConfigError);
}

TEST(Elbow, IsLastLargeStep) {
    Rng rng(5);
    for (int trial = 0; trial < 200; ++trial) {
        std::vector<double> t, auc{0.5};
        for (int i = 0; i < 6; ++i) t.push_back(std::pow(10.0, i));
        for (int i = 1; i < 6; ++i) auc.push_back(auc.back() + rng.uniform() * 0.05);
        const double total = auc.back() - auc.front();
        const double e = *find_elbow(t, auc);
        const auto idx = static_cast<std::size_t>(std::find(t.begin(), t.end(), e) - t.begin());
        for (std::size_t i = idx + 1; i < t.size(); ++i) EXPECT_LT(auc[i] - auc[i - 1], 0.1 * total);
        if (idx > 0) EXPECT_GE(auc[idx] - auc[idx - 1], 0.1 * total);
    }
}

TEST(Sweeps, NegativeRatioRowsAndThreadInvariance) {
    auto c = small_train();
    c.epochs = 1;
    c.knn_eval = false;
    const std::vector<int> ratios{1, 4};
    const auto one = sweep_negative_ratio(bundle(), ratios, c, 1);
    const auto two = sweep_negative_ratio(bundle(), ratios, c, 2);
    EXPECT_EQ(one.to_jsonl(), two.to_jsonl());
    ASSERT_EQ(one.rows.size(), 2u);
    EXPECT_EQ(one.column("ratio"), std::vector<double>({1, 4}));
    EXPECT_THROW(sweep_negative_ratio(bundle(), std::vector<int>{}, c), ConfigError);
}

TEST(Sweeps, PopularityNeedsTripletInBatch) {
    auto c = small_train();
    c.epochs = 1;
    const std::vector<double> ts{1, 100};
    EXPECT_THROW(sweep_popularity_t(bundle(), ts, c), ConfigError);
    c.loss = LossKind::triplet;
    c.sampler.mode = SamplerMode::in_batch;
    EXPECT_THROW(sweep_popularity_t(bundle(), std::vector<double>{10, 1}, c), ConfigError);
    const auto r = sweep_popularity_t(bundle(), ts, c);
    ASSERT_EQ(r.rows.size(), 2u);
    EXPECT_TRUE(r.flag("elbow_t"));
    EXPECT_EQ(r.column("popularity_pearson").size(), 2u);
}

TEST(Triad, ReportsThreeModels) {
    TriadConfig c;
    for (auto* m : {&c.implicit_model, &c.random_model}) {
        m->hidden = {16};
        m->embedding_dim = 8;
        m->epochs = 1;
        m->batch_size = 64;
    }
    c.eval.knn.query_sample = 30;
    const auto r = run_model_triad(bundle(), c);
    ASSERT_EQ(r.models.size(), 3u);
    ASSERT_EQ(r.report.rows.size(), 3u);
    for (const char* k : {"A.mismatch_rate", "B.mismatch_rate", "C.mismatch_rate", "C.served_grouped_auc"})
        EXPECT_TRUE(r.report.metric(k)) << k;
    c.random_model.hidden = {8};
    EXPECT_THROW(run_model_triad(bundle(), c), ConfigError);
}

TEST(BiasSim, FilterAndSmallRun) {
    const std::vector<RatingExample> ex{{0, 0, 1}, {0, 1, 0}, {1, 0, 0}, {1, 1, 1}};
    const std::vector<double> scores{0.9, 0.2, 0.6, 0.1};
    EXPECT_EQ(filter_by_score(ex, scores, 0.5, true).size(), 2u);
    // Only negatives are filtered: both positives stay, negative 0.2 drops.
    EXPECT_EQ(filter_by_score(ex, scores, 0.5, false).size(), 3u);

    const World w = generate_world(tiny_world());
    const auto ratings = synthetic_ratings(w, 20, 4);
    BiasSimConfig c;
    c.taus = {0.0, 0.5};
    c.classifier.epochs = 1;
    c.classifier.embedding_dim = 8;
    c.classifier.hidden = {8};
    const auto data = build_bias_sim_data(ratings, c);
    EXPECT_LE(data.train.size() + data.test.size(), 2 * ratings.size());
    EXPECT_GT(data.train.size() + data.test.size(), ratings.size());
    const auto a = run_bias_simulation(ratings, c);
    const auto b = run_bias_simulation(ratings, c, 2);
    EXPECT_EQ(a.to_jsonl(), b.to_jsonl());
    EXPECT_EQ(a.rows.size(), 2u);
    EXPECT_TRUE(a.metric("baseline_auc"));
}

TEST(BiasSim, FilterMatchesRecount) {
    Rng rng(31);
    std::vector<RatingExample> ex;
    std::vector<double> scores;
    for (int i = 0; i < 3000; ++i) {
        ex.push_back({i % 50, i % 70, static_cast<int>(rng.below(2))});
        scores.push_back(std::floor(rng.uniform() * 10) / 10);  // ties land on tau exactly
    }
    for (double tau : {0.0, 0.3, 0.5, 0.9}) {
        for (bool all : {true, false}) {
            std::size_t kept = 0;
            for (std::size_t i = 0; i < ex.size(); ++i)
                if (scores[i] > tau || (!all && ex[i].label == 1)) ++kept;
            const auto got = filter_by_score(ex, scores, tau, all);
            ASSERT_EQ(got.size(), kept) << tau << " " << all;
            // Kept examples keep their input order.
            std::size_t j = 0;
            for (std::size_t i = 0; i < ex.size() && j < got.size(); ++i)
                if (ex[i].user == got[j].user && ex[i].movie == got[j].movie && ex[i].label == got[j].label) ++j;
            EXPECT_EQ(j, got.size());
        }
    }
}

TEST(Report, HashFilesAndMissingCells) {
    ExperimentReport r;
    r.kind = "demo";
    r.seed = 5;
    r.config = {{"a", "1"}};
    r.set_metric("x", 0.25);
    r.columns = {"p", "q"};
    r.rows = {{1.0, std::nullopt}, {2.0, 3.5}};
    r.set_flag("f", "yes");
    r.wall_seconds = 12.0;
    const auto hash = r.config_hash();
    EXPECT_EQ(hash.size(), 16u);
    ExperimentReport other = r;
    other.wall_seconds = 1.0;
    other.set_metric("x", 0.5);
    EXPECT_EQ(other.config_hash(), hash);
    other.config[0].second = "2";
    EXPECT_NE(other.config_hash(), hash);

    EXPECT_NE(r.to_jsonl().find("null"), std::string::npos);
    EXPECT_EQ(r.to_jsonl().find("12"), std::string::npos);  // wall time stays out
    EXPECT_NE(r.to_tsv().find("NA"), std::string::npos);
    EXPECT_EQ(r.column("q"), std::vector<double>{3.5});

    const auto dir = temp_dir("report");
    const auto paths = r.write(dir);
    EXPECT_EQ(paths.jsonl.filename().string(), "demo-" + hash + ".jsonl");
    EXPECT_EQ(slurp(paths.jsonl), r.to_jsonl());
    EXPECT_EQ(slurp(paths.tsv), r.to_tsv());
    EXPECT_TRUE(std::filesystem::exists(paths.log));
    std::filesystem::remove_all(dir);
}

TEST(ParallelFor, CoversEverySlotOnce) {
    std::vector<int> hits(97, 0);
    parallel_for(hits.size(), 4, [&](std::size_t i) { hits[i] += 1; });
    for (int h : hits) EXPECT_EQ(h, 1);
    EXPECT_THROW(parallel_for(3, 2, [](std::size_t i) { if (i == 1) throw DataError("boom"); }), DataError);
}
