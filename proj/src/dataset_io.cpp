#include <charconv>
#include <fstream>
#include <map>
#include <sstream>

#include "cglab/dataset.hpp"
#include "cglab/errors.hpp"
#include "format.hpp"

namespace cglab {

namespace {

std::ofstream open_out(const std::filesystem::path& path) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write " + path.string());
    return out;
}

std::vector<std::string_view> split_tabs(std::string_view line) {
    std::vector<std::string_view> out;
    std::size_t start = 0;
    while (true) {
        const std::size_t tab = line.find('\t', start);
        out.push_back(line.substr(start, tab == std::string_view::npos ? line.npos : tab - start));
        if (tab == std::string_view::npos) break;
        start = tab + 1;
    }
    return out;
}

template <typename T>
T parse_number(std::string_view field, const std::string& source, std::size_t line) {
    T value{};
    auto [ptr, ec] = std::from_chars(field.data(), field.data() + field.size(), value);
    if (ec != std::errc() || ptr != field.data() + field.size())
        throw ParseError(source, line, "bad number '" + std::string(field) + "'");
    return value;
}

}  // namespace

void write_queries_tsv(const World& world, const std::filesystem::path& path) {
    auto out = open_out(path);
    out << "query_id\tuser_id\tprimary_language\thard_group";
    for (int d = 0; d < world.query_dim(); ++d) out << "\tf" << d;
    out << '\n';
    for (const Query& q : world.queries()) {
        out << q.query_id << '\t' << q.user_id << '\t' << q.primary_language << '\t' << q.hard_group;
        for (double f : q.features) out << '\t' << format_double(f);
        out << '\n';
    }
}

void write_candidates_tsv(const World& world, const std::filesystem::path& path) {
    auto out = open_out(path);
    out << "candidate_id\tlanguage\thard_group\tpopularity";
    for (int d = 0; d < world.candidate_dim(); ++d) out << "\tf" << d;
    out << '\n';
    for (const Candidate& c : world.candidates()) {
        out << c.candidate_id << '\t' << c.language << '\t' << c.hard_group << '\t' << format_double(c.popularity);
        for (double f : c.features) out << '\t' << format_double(f);
        out << '\n';
    }
}

void write_interactions_tsv(std::span<const Interaction> records, const std::filesystem::path& path) {
    auto out = open_out(path);
    out << "query_id\tcandidate_id\tlabel\tprovenance\tweight\n";
    for (const Interaction& r : records)
        out << r.query_id << '\t' << r.candidate_id << '\t' << r.label << '\t' << to_string(r.provenance) << '\t'
            << format_double(r.weight) << '\n';
}

std::vector<Interaction> read_interactions_tsv(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw MissingFileError(path.string());
    const std::string source = path.string();
    std::string line;
    std::size_t line_no = 0;
    std::vector<Interaction> out;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line_no == 1) {
            if (line != "query_id\tcandidate_id\tlabel\tprovenance\tweight")
                throw ParseError(source, 1, "unexpected header");
            continue;
        }
        if (line.empty()) continue;
        const auto f = split_tabs(line);
        if (f.size() != 5) throw ParseError(source, line_no, "expected 5 columns");
        Interaction r;
        r.query_id = parse_number<std::int64_t>(f[0], source, line_no);
        r.candidate_id = parse_number<std::int64_t>(f[1], source, line_no);
        r.label = parse_number<int>(f[2], source, line_no);
        try {
            r.provenance = parse_provenance(f[3]);
            r.weight = parse_number<double>(f[4], source, line_no);
            validate(r);
        } catch (const ParseError&) {
            throw;
        } catch (const DataError& e) {
            throw ParseError(source, line_no, e.what());
        }
        out.push_back(r);
    }
    return out;
}

void write_world_meta(const WorldConfig& world, const PolicyConfig& policy, const std::filesystem::path& path) {
    auto out = open_out(path);
    out << "# cglab synthetic world\n";
    for (const auto& [k, v] : world.echo()) out << k << '=' << v << '\n';
    for (const auto& [k, v] : policy.echo()) out << k << '=' << v << '\n';
}

std::pair<WorldConfig, PolicyConfig> read_world_meta(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw MissingFileError(path.string());
    std::map<std::string, std::string> kv;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty() || line[0] == '#') continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw ParseError(path.string(), line_no, "expected key=value");
        kv[line.substr(0, eq)] = line.substr(eq + 1);
    }
    const std::string source = path.string();
    auto take = [&](const std::string& key) -> std::string {
        auto it = kv.find(key);
        if (it == kv.end()) throw ParseError(source, 0, "missing key " + key);
        std::string v = it->second;
        kv.erase(it);
        return v;
    };
    auto num = [&](const std::string& key, auto& out) {
        const std::string v = take(key);
        out = parse_number<std::remove_reference_t<decltype(out)>>(v, source, 0);
    };
    WorldConfig w;
    PolicyConfig p;
    num("world.seed", w.seed);
    num("world.n_users", w.n_users);
    num("world.n_items", w.n_items);
    num("world.languages", w.languages);
    num("world.latent_dim", w.latent_dim);
    num("world.hard_groups", w.hard_groups);
    num("world.query_dim", w.query_dim);
    num("world.candidate_dim", w.candidate_dim);
    num("world.padding_dims", w.padding_dims);
    num("world.appeal_shape", w.appeal_shape);
    num("world.interest_scale", w.interest_scale);
    num("world.engagement_bias", w.engagement_bias);
    num("world.appeal_coef", w.appeal_coef);
    num("world.feature_noise", w.feature_noise);
    num("world.irrelevant_engagement", w.irrelevant_engagement);
    const std::string marginal = take("world.language_marginal");
    std::size_t start = 0;
    while (start < marginal.size()) {
        std::size_t comma = marginal.find(',', start);
        if (comma == std::string::npos) comma = marginal.size();
        w.language_marginal.push_back(parse_number<double>(marginal.substr(start, comma - start), source, 0));
        start = comma + 1;
    }
    num("policy.slate_size", p.slate_size);
    num("policy.noise", p.noise);
    num("policy.popularity_weight", p.popularity_weight);
    num("policy.interest_weight", p.interest_weight);
    num("policy.interest_dims", p.interest_dims);
    num("policy.seed", p.seed);
    if (!kv.empty()) throw ParseError(source, 0, "unknown key " + kv.begin()->first);
    return {w, p};
}

void export_world(const World& world, const PolicyConfig& policy, const ServedLog& log,
                  const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    write_queries_tsv(world, dir / "queries.tsv");
    write_candidates_tsv(world, dir / "candidates.tsv");
    write_interactions_tsv(log.records, dir / "interactions.tsv");
    write_world_meta(world.config(), policy, dir / "world.meta");
}

}  // namespace cglab
