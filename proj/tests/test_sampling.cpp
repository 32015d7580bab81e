#include <gtest/gtest.h>

#include <cmath>
#include <map>
#include <set>

#include "cglab/errors.hpp"
#include "cglab/log.hpp"
#include "cglab/random.hpp"
#include "cglab/sampling.hpp"

using namespace cglab;

namespace {

std::vector<Interaction> positives(std::initializer_list<std::pair<QueryId, CandidateId>> pairs) {
    std::vector<Interaction> out;
    for (auto [q, c] : pairs) out.push_back(explicit_positive(q, c));
    return out;
}

std::vector<CandidateId> range_corpus(int n) {
    std::vector<CandidateId> c;
    for (int i = 0; i < n; ++i) c.push_back(i);
    return c;
}

// Captures warnings for the lifetime of the object.
struct WarningCapture {
    std::vector<std::string> messages;
    WarningSink previous;
    WarningCapture() : previous(set_warning_sink([this](const std::string& m) { messages.push_back(m); })) {}
    ~WarningCapture() { set_warning_sink(previous); }
};

}  // namespace

TEST(Uniform, ForcedChoice) {
    const auto pos = positives({{1, 99}});
    const std::vector<CandidateId> corpus{5};
    SamplerConfig c;
    const auto s = sample_uniform_negatives(pos, corpus, c);
    ASSERT_EQ(s.negatives.size(), 1u);
    EXPECT_EQ(s.negatives[0].query_id, 1);
    EXPECT_EQ(s.negatives[0].candidate_id, 5);
    EXPECT_EQ(s.negatives[0].label, 0);
    EXPECT_EQ(s.negatives[0].provenance, Provenance::sampled_negative);
    EXPECT_EQ(s.source[0], 0u);
}

TEST(Uniform, OutputSizeScalesWithRatio) {
    const auto pos = positives({{1, 2}, {3, 4}, {5, 6}});
    SamplerConfig c;
    c.negatives_per_positive = 4000;
    c.filter_known_positives = false;
    const auto s = sample_uniform_negatives(pos, range_corpus(50000), c);
    EXPECT_EQ(s.negatives.size(), 12000u);
    EXPECT_EQ(s.source.size(), 12000u);
}

TEST(Uniform, ChiSquareUniformity) {
    const auto pos = positives({{1, 1000}});
    SamplerConfig c;
    c.negatives_per_positive = 100000;
    c.seed = 77;
    const auto s = sample_uniform_negatives(pos, range_corpus(100), c);
    std::vector<double> counts(100, 0.0);
    for (const auto& n : s.negatives) counts[static_cast<std::size_t>(n.candidate_id)] += 1;
    double chi2 = 0;
    for (double k : counts) chi2 += (k - 1000.0) * (k - 1000.0) / 1000.0;
    // Upper 1% point of chi-square with 99 degrees of freedom.
    EXPECT_LT(chi2, 134.642);
}

TEST(Uniform, SeedReproducibleAndSensitive) {
    const auto pos = positives({{1, 2}, {2, 3}, {3, 4}});
    SamplerConfig c;
    c.negatives_per_positive = 20;
    c.seed = 1;
    const auto a = sample_uniform_negatives(pos, range_corpus(1000), c);
    const auto b = sample_uniform_negatives(pos, range_corpus(1000), c);
    c.seed = 2;
    const auto d = sample_uniform_negatives(pos, range_corpus(1000), c);
    std::vector<CandidateId> ia, ib, id;
    for (const auto& n : a.negatives) ia.push_back(n.candidate_id);
    for (const auto& n : b.negatives) ib.push_back(n.candidate_id);
    for (const auto& n : d.negatives) id.push_back(n.candidate_id);
    EXPECT_EQ(ia, ib);
    EXPECT_NE(ia, id);
}

TEST(Uniform, FilterNeverEmitsKnownPositive) {
    Rng rng(4);
    for (int trial = 0; trial < 20; ++trial) {
        std::vector<Interaction> pos;
        for (int i = 0; i < 40; ++i)
            pos.push_back(explicit_positive(static_cast<QueryId>(rng.below(5)), static_cast<CandidateId>(rng.below(30))));
        SamplerConfig c;
        c.negatives_per_positive = 10;
        c.seed = static_cast<std::uint64_t>(trial);
        WarningCapture quiet;
        const auto s = sample_uniform_negatives(pos, range_corpus(30), c);
        std::set<std::pair<QueryId, CandidateId>> known;
        for (const auto& p : pos) known.insert({p.query_id, p.candidate_id});
        for (const auto& n : s.negatives) EXPECT_FALSE(known.count({n.query_id, n.candidate_id}));
        EXPECT_EQ(s.negatives.size() + s.skipped, pos.size() * 10);
    }
}

TEST(Uniform, FullyPositiveQueryIsSkippedWithWarning) {
    const auto pos = positives({{1, 0}, {1, 1}});
    SamplerConfig c;
    c.negatives_per_positive = 3;
    WarningCapture cap;
    const auto s = sample_uniform_negatives(pos, range_corpus(2), c);
    EXPECT_TRUE(s.negatives.empty());
    EXPECT_EQ(s.skipped, 6u);
    EXPECT_EQ(cap.messages.size(), 1u);
    EXPECT_THROW(sample_uniform_negatives(pos, std::vector<CandidateId>{}, c), ConfigError);
}

TEST(Frequency, FollowsServedCounts) {
    std::vector<Interaction> log;
    for (int i = 0; i < 3; ++i) log.push_back({9, 100, 0, Provenance::implicit_negative, 1.0});
    log.push_back({9, 200, 0, Provenance::implicit_negative, 1.0});
    const auto pos = positives({{1, 5}});
    SamplerConfig c;
    c.negatives_per_positive = 100000;
    const auto s = sample_frequency_negatives(pos, log, c);
    double a = 0, b = 0;
    for (const auto& n : s.negatives) (n.candidate_id == 100 ? a : b) += 1;
    EXPECT_EQ(a + b, 100000.0);
    EXPECT_NEAR(a / b, 3.0, 0.1);
}

TEST(Frequency, SingleCandidateAndEmptyLog) {
    const std::vector<Interaction> log{{9, 42, 0, Provenance::implicit_negative, 1.0}};
    SamplerConfig c;
    c.negatives_per_positive = 50;
    const auto s = sample_frequency_negatives(positives({{1, 5}}), log, c);
    for (const auto& n : s.negatives) EXPECT_EQ(n.candidate_id, 42);
    EXPECT_THROW(sample_frequency_negatives(positives({{1, 5}}), std::vector<Interaction>{}, c), ConfigError);
}

TEST(Frequency, SmoothingReachesUnservedItems) {
    const std::vector<Interaction> log{{9, 0, 0, Provenance::implicit_negative, 1.0}};
    SamplerConfig c;
    c.negatives_per_positive = 2000;
    c.frequency_smoothing = 1.0;
    const auto s = sample_frequency_negatives(positives({{1, 50}}), log, c, range_corpus(4));
    std::set<CandidateId> seen;
    for (const auto& n : s.negatives) seen.insert(n.candidate_id);
    EXPECT_EQ(seen.size(), 4u);
}

TEST(InBatch, CountsAndMembership) {
    SamplerConfig c;
    EXPECT_EQ(in_batch_negatives(positives({{1, 10}, {2, 20}}), c).size(), 2u);
    const auto batch = positives({{1, 10}, {2, 20}, {3, 30}, {4, 40}, {5, 50}});
    EXPECT_EQ(in_batch_negatives(batch, c).size(), 20u);

    c.full_cross = false;
    c.negatives_per_positive = 1;
    const auto three = positives({{1, 10}, {2, 20}, {3, 30}});
    const auto t = in_batch_negatives(three, c, 7);
    ASSERT_EQ(t.size(), 3u);
    for (const auto& x : t) {
        EXPECT_NE(x.negative_id, x.positive_id);
        EXPECT_TRUE(x.negative_id == 10 || x.negative_id == 20 || x.negative_id == 30);
    }
    EXPECT_EQ(in_batch_negatives(three, c, 7).front().negative_id, t.front().negative_id);
}

TEST(InBatch, SingletonWarnsAndDuplicatesKept) {
    SamplerConfig c;
    WarningCapture cap;
    EXPECT_TRUE(in_batch_negatives(positives({{1, 10}}), c).empty());
    EXPECT_EQ(cap.messages.size(), 1u);
    const auto dup = in_batch_negatives(positives({{1, 10}, {2, 10}}), c);
    ASSERT_EQ(dup.size(), 2u);
    EXPECT_EQ(dup[0].negative_id, dup[0].positive_id);
}

TEST(PopularityWeight, KnownValues) {
    const PopularityWeightConfig c{100.0};
    EXPECT_EQ(popularity_weight(0.0, c), 1.0);
    EXPECT_NEAR(popularity_weight(100.0, c), 0.5 + 0.5 * std::exp(-1.0), 1e-15);
    EXPECT_NEAR(popularity_weight(100.0, c), 0.6839, 1e-4);
    EXPECT_NEAR(popularity_weight(1e9, c), 0.5, 1e-15);
    EXPECT_THROW(popularity_weight(-1.0, c), ConfigError);
    EXPECT_THROW(popularity_weight(1.0, PopularityWeightConfig{0.0}), ConfigError);
}

TEST(PopularityWeight, MonotoneAndBounded) {
    Rng rng(9);
    for (int i = 0; i < 2000; ++i) {
        // Past theta / t of about 36 the exponential term drops below one ulp of 0.5.
        const double t = std::exp(8 * rng.uniform() - 2);
        const double a = t * std::exp(6 * rng.uniform() - 5), b = a * (1 + 0.1 + rng.uniform());
        const double wa = popularity_weight(a, {t}), wb = popularity_weight(b, {t});
        EXPECT_GT(wa, wb);
        EXPECT_GT(wb, 0.5);
        EXPECT_LE(wa, 1.0);
        EXPECT_LT(wa, popularity_weight(a, {t * 2}));
    }
}

TEST(PopularityWeight, AppliedToTripletsAndNegatives) {
    std::vector<Triplet> t{{1, 2, 3, 1.0}, {1, 2, 4, 1.0}};
    auto pop = [](CandidateId c) { return c == 3 ? 0.0 : 1e12; };
    apply_popularity_weights(t, pop, {10.0});
    EXPECT_EQ(t[0].weight, 1.0);
    EXPECT_EQ(t[1].weight, 0.5);
    std::vector<Interaction> n{{1, 3, 0, Provenance::sampled_negative, 1.0}, {1, 4, 1, Provenance::explicit_positive, 1.0}};
    apply_popularity_weights(n, pop, {10.0});
    EXPECT_EQ(n[0].weight, 1.0);
    EXPECT_EQ(n[1].weight, 1.0);  // positives keep their weight
}

TEST(SamplerConfig, ParseAndValidate) {
    EXPECT_EQ(parse_sampler_mode("in_batch"), SamplerMode::in_batch);
    EXPECT_EQ(to_string(SamplerMode::frequency), "frequency");
    EXPECT_THROW(parse_sampler_mode("nope"), ConfigError);
    SamplerConfig c;
    c.negatives_per_positive = 0;
    c.max_retries = -1;
    try {
        c.validate();
        FAIL();
    } catch (const ConfigError& e) {
        EXPECT_NE(std::string(e.what()).find("negatives_per_positive"), std::string::npos);
        EXPECT_NE(std::string(e.what()).find("max_retries"), std::string::npos);
    }
}
