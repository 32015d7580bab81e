#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>
#include <unordered_set>

#include "cglab/dataset.hpp"
#include "cglab/errors.hpp"
#include "cglab/random.hpp"

namespace cglab {

namespace {

template <typename Int>
bool parse_int(std::string_view field, Int& out) {
    const auto* end = field.data() + field.size();
    auto [ptr, ec] = std::from_chars(field.data(), end, out);
    return ec == std::errc() && ptr == end;
}

constexpr std::uint64_t kSyntheticStream = 21;
constexpr std::uint64_t kSplitStream = 22;

}  // namespace

RatingsFile parse_movielens(std::string_view text, const std::string& source) {
    RatingsFile out;
    std::size_t line_no = 0;
    std::size_t pos = 0;
    while (pos < text.size()) {
        std::size_t eol = text.find('\n', pos);
        if (eol == std::string_view::npos) eol = text.size();
        std::string_view line = text.substr(pos, eol - pos);
        pos = eol + 1;
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
        if (line.empty()) continue;

        std::string_view fields[4];
        std::size_t n = 0;
        std::size_t start = 0;
        while (true) {
            const std::size_t sep = line.find("::", start);
            const std::string_view f = line.substr(start, sep == std::string_view::npos ? line.npos : sep - start);
            if (n < 4) fields[n] = f;
            ++n;
            if (sep == std::string_view::npos) break;
            start = sep + 2;
        }
        if (n != 4)
            throw ParseError(source, line_no, "expected 4 '::'-separated fields, found " + std::to_string(n));
        Rating r;
        if (!parse_int(fields[0], r.user_id) || !parse_int(fields[1], r.movie_id) ||
            !parse_int(fields[2], r.rating) || !parse_int(fields[3], r.timestamp))
            throw ParseError(source, line_no, "non-integer field");
        out.ratings.push_back(r);
    }
    if (out.ratings.empty()) out.warnings.push_back(source + ": no ratings found");
    return out;
}

RatingsFile load_movielens_1m(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw MissingFileError(path.string());
    std::ostringstream buf;
    buf << in.rdbuf();
    return parse_movielens(buf.str(), path.string());
}

WorldConfig ratings_world() {
    WorldConfig w;
    w.n_items = 5000;
    w.languages = 1;
    w.appeal_coef = 1.5;
    w.interest_scale = 1.0;
    w.engagement_bias = -7.0;
    return w;
}

std::vector<Rating> synthetic_ratings(const World& world, int mean_per_user, std::uint64_t seed) {
    if (mean_per_user < 1) throw ConfigError("synthetic ratings: mean_per_user must be >= 1");
    const auto items = world.candidates();
    std::vector<Rating> out;
    std::vector<double> cumulative(items.size());
    std::int64_t clock = 0;
    for (const Query& q : world.queries()) {
        Rng rng(derive_seed(seed, kSyntheticStream, static_cast<std::uint64_t>(q.query_id)));
        double total = 0;
        for (std::size_t j = 0; j < items.size(); ++j) {
            total += world.engagement(q.query_id, static_cast<CandidateId>(j));
            cumulative[j] = total;
        }
        // Log-normal activity around the requested mean.
        const double activity = std::exp(0.5 * rng.normal() - 0.125);
        const auto want = std::clamp<std::size_t>(static_cast<std::size_t>(std::lround(mean_per_user * activity)), 1,
                                                  items.size());
        std::set<std::int64_t> chosen;
        std::size_t attempts = 0;
        while (chosen.size() < want && attempts < want * 50) {
            ++attempts;
            const double u = rng.uniform() * total;
            auto it = std::upper_bound(cumulative.begin(), cumulative.end(), u);
            if (it == cumulative.end()) --it;
            chosen.insert(it - cumulative.begin());
        }
        for (const auto m : chosen) {
            const double p = world.engagement(q.query_id, m);
            out.push_back(Rating{q.user_id, m, 1 + static_cast<int>(std::min(4.0, std::floor(p * 5.0))), clock++});
        }
    }
    return out;
}

bool UserSplit::is_train(UserId u) const { return std::binary_search(train_users.begin(), train_users.end(), u); }

UserSplit split_users(std::vector<UserId> users, double train_fraction, std::uint64_t seed) {
    if (!(train_fraction > 0.0 && train_fraction < 1.0))
        throw ConfigError("train_fraction must lie in (0, 1)");
    std::sort(users.begin(), users.end());
    users.erase(std::unique(users.begin(), users.end()), users.end());
    Rng rng(derive_seed(seed, kSplitStream));
    for (std::size_t i = users.size(); i > 1; --i) std::swap(users[i - 1], users[rng.below(i)]);
    auto n_train = static_cast<std::size_t>(std::llround(train_fraction * static_cast<double>(users.size())));
    if (users.size() >= 2) n_train = std::clamp<std::size_t>(n_train, 1, users.size() - 1);
    UserSplit split;
    split.train_users.assign(users.begin(), users.begin() + static_cast<std::ptrdiff_t>(n_train));
    split.test_users.assign(users.begin() + static_cast<std::ptrdiff_t>(n_train), users.end());
    std::sort(split.train_users.begin(), split.train_users.end());
    std::sort(split.test_users.begin(), split.test_users.end());
    return split;
}

namespace {

template <typename Record, typename UserOf>
SplitRecords<Record> split_records(std::span<const Record> records, double train_fraction, std::uint64_t seed,
                                   UserOf user_of) {
    std::vector<UserId> users;
    users.reserve(records.size());
    for (const auto& r : records) users.push_back(user_of(r));
    const UserSplit split = split_users(std::move(users), train_fraction, seed);
    SplitRecords<Record> out;
    for (const auto& r : records) (split.is_train(user_of(r)) ? out.train : out.test).push_back(r);
    return out;
}

}  // namespace

SplitRecords<Rating> split_by_user(std::span<const Rating> records, double train_fraction, std::uint64_t seed) {
    return split_records(records, train_fraction, seed, [](const Rating& r) { return r.user_id; });
}

SplitRecords<Interaction> split_by_user(std::span<const Interaction> records, double train_fraction,
                                        std::uint64_t seed) {
    return split_records(records, train_fraction, seed, [](const Interaction& r) { return r.query_id; });
}

}  // namespace cglab
