#include "cglab/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "cglab/errors.hpp"
#include "cglab/random.hpp"
#include "format.hpp"

namespace cglab {

namespace {

double sigmoid(double x) {
    return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
}

int draw_category(Rng& rng, const std::vector<double>& cumulative) {
    const double u = rng.uniform() * cumulative.back();
    const auto it = std::upper_bound(cumulative.begin(), cumulative.end(), u);
    return static_cast<int>(std::min<std::ptrdiff_t>(it - cumulative.begin(),
                                                     static_cast<std::ptrdiff_t>(cumulative.size()) - 1));
}

enum Stream : std::uint64_t { kLanguages = 1, kLatent, kAppeal, kFeatures, kPolicy };

}  // namespace

std::string_view to_string(Provenance p) {
    switch (p) {
        case Provenance::explicit_positive: return "explicit_positive";
        case Provenance::implicit_negative: return "implicit_negative";
        case Provenance::sampled_negative: return "sampled_negative";
    }
    return "unknown";
}

Provenance parse_provenance(std::string_view text) {
    if (text == "explicit_positive") return Provenance::explicit_positive;
    if (text == "implicit_negative") return Provenance::implicit_negative;
    if (text == "sampled_negative") return Provenance::sampled_negative;
    throw DataError("unknown provenance '" + std::string(text) + "'");
}

void validate(const Interaction& r) {
    if (r.provenance == Provenance::explicit_positive && r.label != 1)
        throw DataError("explicit positive with label " + std::to_string(r.label));
    if (r.provenance != Provenance::explicit_positive && r.label != 0)
        throw DataError(std::string(to_string(r.provenance)) + " with label " + std::to_string(r.label));
    if (!(r.weight > 0.0 && r.weight <= 1.0))
        throw DataError("interaction weight " + format_double(r.weight) + " outside (0, 1]");
}

Interaction explicit_positive(QueryId q, CandidateId c) {
    return Interaction{q, c, 1, Provenance::explicit_positive, 1.0};
}

int WorldConfig::minimal_query_dim() const { return languages + effective_hard_groups() + latent_dim; }
int WorldConfig::minimal_candidate_dim() const { return languages + effective_hard_groups() + latent_dim + 1; }
int WorldConfig::effective_query_dim() const {
    return query_dim > 0 ? query_dim : minimal_query_dim() + padding_dims;
}
int WorldConfig::effective_candidate_dim() const {
    return candidate_dim > 0 ? candidate_dim : minimal_candidate_dim() + padding_dims;
}

void WorldConfig::validate() const {
    std::vector<std::string> problems;
    if (n_users < 1) problems.push_back("n_users must be >= 1");
    if (n_items < 1) problems.push_back("n_items must be >= 1");
    if (latent_dim < 2) problems.push_back("latent_dim must be >= 2");
    if (languages < 1) problems.push_back("languages must be >= 1");
    if (hard_groups < 0) problems.push_back("hard_groups must be >= 0");
    if (padding_dims < 0) problems.push_back("padding_dims must be >= 0");
    if (!(appeal_shape > 0)) problems.push_back("appeal_shape must be > 0");
    if (!(feature_noise >= 0)) problems.push_back("feature_noise must be >= 0");
    if (!(irrelevant_engagement > 0 && irrelevant_engagement <= kIrrelevantCeiling))
        problems.push_back("irrelevant_engagement must lie in (0, 0.001]");
    if (!language_marginal.empty()) {
        if (static_cast<int>(language_marginal.size()) != languages)
            problems.push_back("language_marginal needs one entry per language");
        else if (std::any_of(language_marginal.begin(), language_marginal.end(), [](double w) { return !(w > 0); }))
            problems.push_back("language_marginal entries must be > 0");
    }
    if (problems.empty()) {
        const int dq = effective_query_dim();
        const int dc = effective_candidate_dim();
        if (latent_dim > std::min(dq, dc))
            problems.push_back("latent_dim " + std::to_string(latent_dim) + " exceeds feature dimension " +
                               std::to_string(std::min(dq, dc)));
        else {
            if (dq < minimal_query_dim())
                problems.push_back("query_dim must be >= " + std::to_string(minimal_query_dim()));
            if (dc < minimal_candidate_dim())
                problems.push_back("candidate_dim must be >= " + std::to_string(minimal_candidate_dim()));
        }
    }
    if (!problems.empty()) throw ConfigError(join_problems("world config", problems));
}

std::vector<std::pair<std::string, std::string>> WorldConfig::echo() const {
    std::string marginal;
    for (std::size_t i = 0; i < language_marginal.size(); ++i)
        marginal += (i ? "," : "") + format_double(language_marginal[i]);
    return {{"world.seed", std::to_string(seed)},
            {"world.n_users", std::to_string(n_users)},
            {"world.n_items", std::to_string(n_items)},
            {"world.languages", std::to_string(languages)},
            {"world.latent_dim", std::to_string(latent_dim)},
            {"world.hard_groups", std::to_string(hard_groups)},
            {"world.query_dim", std::to_string(query_dim)},
            {"world.candidate_dim", std::to_string(candidate_dim)},
            {"world.padding_dims", std::to_string(padding_dims)},
            {"world.appeal_shape", format_double(appeal_shape)},
            {"world.interest_scale", format_double(interest_scale)},
            {"world.engagement_bias", format_double(engagement_bias)},
            {"world.appeal_coef", format_double(appeal_coef)},
            {"world.feature_noise", format_double(feature_noise)},
            {"world.irrelevant_engagement", format_double(irrelevant_engagement)},
            {"world.language_marginal", marginal}};
}

const Query& World::query(QueryId id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= queries_.size())
        throw DataError("unknown query id " + std::to_string(id));
    return queries_[static_cast<std::size_t>(id)];
}

const Candidate& World::candidate(CandidateId id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= candidates_.size())
        throw DataError("unknown candidate id " + std::to_string(id));
    return candidates_[static_cast<std::size_t>(id)];
}

double World::partial_interest(QueryId q, CandidateId c, int dims) const {
    const auto k = static_cast<std::size_t>(config_.latent_dim);
    const double* u = &user_latent_[static_cast<std::size_t>(q) * k];
    const double* v = &item_latent_[static_cast<std::size_t>(c) * k];
    double s = 0;
    for (int i = 0; i < dims; ++i) s += u[i] * v[i];
    return s;
}

double World::interest(QueryId q, CandidateId c) const { return partial_interest(q, c, config_.latent_dim); }

bool World::extremely_irrelevant(QueryId q, CandidateId c) const {
    const Query& qq = queries_[static_cast<std::size_t>(q)];
    const Candidate& cc = candidates_[static_cast<std::size_t>(c)];
    return qq.primary_language != cc.language || qq.hard_group != cc.hard_group;
}

double World::engagement(QueryId q, CandidateId c) const {
    const double logit = config_.interest_scale * interest(q, c) + config_.engagement_bias +
                         config_.appeal_coef * std::log1p(appeal_[static_cast<std::size_t>(c)]);
    const double p = sigmoid(logit);
    return extremely_irrelevant(q, c) ? config_.irrelevant_engagement * p : p;
}

Relevance World::classify(QueryId q, CandidateId c) const {
    if (extremely_irrelevant(q, c)) return Relevance::extremely_irrelevant;
    const double p = engagement(q, c);
    if (p < kNotEngagingCeiling) return Relevance::not_engaging;
    if (p >= kEngagingFloor) return Relevance::engaging;
    return Relevance::intermediate;
}

World generate_world(const WorldConfig& config) {
    config.validate();
    World w;
    w.config_ = config;
    w.query_dim_ = config.effective_query_dim();
    w.candidate_dim_ = config.effective_candidate_dim();
    const int L = config.languages;
    const int H = config.effective_hard_groups();
    const int k = config.latent_dim;
    const auto nu = static_cast<std::size_t>(config.n_users);
    const auto ni = static_cast<std::size_t>(config.n_items);

    std::vector<double> marginal = config.language_marginal;
    if (marginal.empty()) marginal.assign(static_cast<std::size_t>(L), 1.0);
    std::partial_sum(marginal.begin(), marginal.end(), marginal.begin());
    std::vector<double> groups(static_cast<std::size_t>(H), 1.0);
    std::partial_sum(groups.begin(), groups.end(), groups.begin());

    Rng lang_rng(derive_seed(config.seed, kLanguages));
    w.queries_.resize(nu);
    for (std::size_t i = 0; i < nu; ++i) {
        auto& q = w.queries_[i];
        q.query_id = static_cast<QueryId>(i);
        q.user_id = static_cast<UserId>(i);
        q.primary_language = draw_category(lang_rng, marginal);
        q.hard_group = draw_category(lang_rng, groups);
    }
    w.candidates_.resize(ni);
    for (std::size_t j = 0; j < ni; ++j) {
        auto& c = w.candidates_[j];
        c.candidate_id = static_cast<CandidateId>(j);
        c.language = draw_category(lang_rng, marginal);
        c.hard_group = draw_category(lang_rng, groups);
    }

    // Entries scaled so <u, v> has unit variance.
    const double latent_sd = std::pow(static_cast<double>(k), -0.25);
    Rng latent_rng(derive_seed(config.seed, kLatent));
    w.user_latent_.resize(nu * static_cast<std::size_t>(k));
    for (auto& x : w.user_latent_) x = latent_sd * latent_rng.normal();
    w.item_latent_.resize(ni * static_cast<std::size_t>(k));
    for (auto& x : w.item_latent_) x = latent_sd * latent_rng.normal();

    // Lomax (Pareto II) appeal: heavy tailed, support [0, inf).
    Rng appeal_rng(derive_seed(config.seed, kAppeal));
    w.appeal_.resize(ni);
    for (auto& a : w.appeal_) a = std::pow(appeal_rng.uniform_positive(), -1.0 / config.appeal_shape) - 1.0;

    double log_mean = 0, log_sq = 0;
    for (double a : w.appeal_) {
        const double la = std::log1p(a);
        log_mean += la;
        log_sq += la * la;
    }
    log_mean /= static_cast<double>(ni);
    const double log_sd = std::sqrt(std::max(log_sq / static_cast<double>(ni) - log_mean * log_mean, 1e-12));

    Rng feature_rng(derive_seed(config.seed, kFeatures));
    const double noise = config.feature_noise;
    for (std::size_t i = 0; i < nu; ++i) {
        auto& q = w.queries_[i];
        q.features.assign(static_cast<std::size_t>(w.query_dim_), 0.0);
        q.features[static_cast<std::size_t>(q.primary_language)] = 1.0;
        q.features[static_cast<std::size_t>(L + q.hard_group)] = 1.0;
        std::size_t col = static_cast<std::size_t>(L + H);
        for (int d = 0; d < k; ++d, ++col)
            q.features[col] = w.user_latent_[i * static_cast<std::size_t>(k) + static_cast<std::size_t>(d)] +
                              noise * feature_rng.normal();
        for (; col < q.features.size(); ++col) q.features[col] = feature_rng.normal();
    }
    for (std::size_t j = 0; j < ni; ++j) {
        auto& c = w.candidates_[j];
        c.features.assign(static_cast<std::size_t>(w.candidate_dim_), 0.0);
        c.features[static_cast<std::size_t>(c.language)] = 1.0;
        c.features[static_cast<std::size_t>(L + c.hard_group)] = 1.0;
        std::size_t col = static_cast<std::size_t>(L + H);
        for (int d = 0; d < k; ++d, ++col)
            c.features[col] = w.item_latent_[j * static_cast<std::size_t>(k) + static_cast<std::size_t>(d)] +
                              noise * feature_rng.normal();
        c.features[col++] = (std::log1p(w.appeal_[j]) - log_mean) / log_sd;
        for (; col < c.features.size(); ++col) c.features[col] = feature_rng.normal();
    }

    for (std::size_t j = 0; j < ni; ++j) {
        double total = 0;
        for (std::size_t i = 0; i < nu; ++i)
            total += w.engagement(static_cast<QueryId>(i), static_cast<CandidateId>(j));
        w.candidates_[j].popularity = total;
    }
    return w;
}

RegionOccupancy scan_regions(const World& world) {
    RegionOccupancy r;
    const auto nq = world.queries().size();
    const auto nc = world.candidates().size();
    double total = 0;
    for (std::size_t i = 0; i < nq; ++i) {
        for (std::size_t j = 0; j < nc; ++j) {
            const auto q = static_cast<QueryId>(i);
            const auto c = static_cast<CandidateId>(j);
            const double p = world.engagement(q, c);
            total += p;
            if (world.extremely_irrelevant(q, c)) {
                r.extremely_irrelevant += 1;
                r.max_mismatched_engagement = std::max(r.max_mismatched_engagement, p);
                continue;
            }
            r.max_matched_engagement = std::max(r.max_matched_engagement, p);
            if (p < kNotEngagingCeiling) r.not_engaging += 1;
            else if (p >= kEngagingFloor) r.engaging += 1;
            else r.intermediate += 1;
        }
    }
    const double n = static_cast<double>(nq * nc);
    r.extremely_irrelevant /= n;
    r.not_engaging /= n;
    r.intermediate /= n;
    r.engaging /= n;
    r.mean_engagement = total / n;
    return r;
}

void PolicyConfig::validate() const {
    std::vector<std::string> problems;
    if (slate_size < 1) problems.push_back("slate_size must be >= 1");
    if (!(noise >= 0)) problems.push_back("noise must be >= 0");
    if (interest_dims < 0) problems.push_back("interest_dims must be >= 0");
    if (!problems.empty()) throw ConfigError(join_problems("policy config", problems));
}

std::vector<std::pair<std::string, std::string>> PolicyConfig::echo() const {
    return {{"policy.slate_size", std::to_string(slate_size)},
            {"policy.noise", format_double(noise)},
            {"policy.popularity_weight", format_double(popularity_weight)},
            {"policy.interest_weight", format_double(interest_weight)},
            {"policy.interest_dims", std::to_string(interest_dims)},
            {"policy.seed", std::to_string(seed)}};
}

ServedLog simulate_served_traffic(const World& world, const PolicyConfig& policy) {
    policy.validate();
    const auto queries = world.queries();
    const auto candidates = world.candidates();
    if (static_cast<std::size_t>(policy.slate_size) > candidates.size())
        throw ConfigError("policy config: slate_size " + std::to_string(policy.slate_size) +
                          " exceeds corpus size " + std::to_string(candidates.size()));
    const int dims = policy.interest_dims > 0 ? std::min(policy.interest_dims, world.latent_dim())
                                              : std::max(1, world.latent_dim() / 2);
    const auto S = static_cast<std::size_t>(policy.slate_size);

    ServedLog log;
    log.slate_size = policy.slate_size;
    log.records.reserve(queries.size() * S);

    std::vector<double> log_appeal(candidates.size());
    for (std::size_t j = 0; j < candidates.size(); ++j) log_appeal[j] = std::log1p(world.appeal(static_cast<CandidateId>(j)));

    struct Scored {
        double score;
        CandidateId id;
        bool eligible;
    };
    std::vector<Scored> scored(candidates.size());

    for (const Query& q : queries) {
        Rng rng(derive_seed(policy.seed, kPolicy, static_cast<std::uint64_t>(q.query_id)));
        double sum = 0, sq = 0;
        std::size_t n_eligible = 0;
        for (std::size_t j = 0; j < candidates.size(); ++j) {
            const auto c = static_cast<CandidateId>(j);
            const bool eligible = !world.extremely_irrelevant(q.query_id, c);
            const double s = policy.popularity_weight * log_appeal[j] +
                             policy.interest_weight * world.partial_interest(q.query_id, c, dims);
            scored[j] = {s, c, eligible};
            if (eligible) {
                sum += s;
                sq += s * s;
                ++n_eligible;
            }
        }
        double sd = 0;
        if (n_eligible > 1) {
            const double mean = sum / static_cast<double>(n_eligible);
            sd = std::sqrt(std::max(sq / static_cast<double>(n_eligible) - mean * mean, 0.0));
        }
        const double sigma = policy.noise * sd;
        if (sigma > 0)
            for (auto& s : scored) s.score += sigma * rng.normal();
        // Eligible items first, then by noisy score, then ascending id.
        std::partial_sort(scored.begin(), scored.begin() + static_cast<std::ptrdiff_t>(S), scored.end(),
                          [](const Scored& a, const Scored& b) {
                              if (a.eligible != b.eligible) return a.eligible;
                              if (a.score != b.score) return a.score > b.score;
                              return a.id < b.id;
                          });
        std::vector<Scored> slate(scored.begin(), scored.begin() + static_cast<std::ptrdiff_t>(S));
        std::sort(slate.begin(), slate.end(), [](const Scored& a, const Scored& b) { return a.id < b.id; });
        for (const auto& s : slate) {
            const double p = world.engagement(q.query_id, s.id);
            const int label = rng.uniform() < p ? 1 : 0;
            log.records.push_back(Interaction{q.query_id, s.id, label,
                                              label ? Provenance::explicit_positive : Provenance::implicit_negative,
                                              1.0});
        }
    }
    return log;
}

}  // namespace cglab
