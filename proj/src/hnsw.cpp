#include <algorithm>
#include <cmath>
#include <queue>

#include "binary_io.hpp"
#include "cglab/ann.hpp"
#include "cglab/errors.hpp"
#include "cglab/random.hpp"
#include "format.hpp"

namespace cglab {

namespace {

constexpr std::uint64_t kLevelStream = 41;
constexpr int kMaxLevel = 30;

bool closer(double da, std::int64_t ia, double db, std::int64_t ib) { return da < db || (da == db && ia < ib); }

bool neighbor_order(const Neighbor& a, const Neighbor& b) {
    return a.similarity > b.similarity || (a.similarity == b.similarity && a.id < b.id);
}

}  // namespace

double dot(std::span<const double> a, std::span<const double> b) {
    return Eigen::Map<const Eigen::VectorXd>(a.data(), static_cast<Eigen::Index>(a.size()))
        .dot(Eigen::Map<const Eigen::VectorXd>(b.data(), static_cast<Eigen::Index>(b.size())));
}

std::vector<Neighbor> exact_knn(const EmbeddingSet& corpus, std::span<const double> query, int k) {
    if (corpus.size() == 0) throw DataError("exact knn over an empty corpus");
    if (k < 1) throw ConfigError("k must be >= 1");
    if (static_cast<Eigen::Index>(query.size()) != corpus.vectors.rows())
        throw DataError("query dimension does not match corpus");
    std::vector<Neighbor> all(corpus.size());
    for (std::size_t j = 0; j < corpus.size(); ++j) {
        const double* col = corpus.vectors.data() + static_cast<std::size_t>(corpus.vectors.rows()) * j;
        all[j] = {corpus.ids[j], dot(query, {col, query.size()})};
    }
    const auto take = std::min<std::size_t>(static_cast<std::size_t>(k), all.size());
    std::partial_sort(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(take), all.end(), neighbor_order);
    all.resize(take);
    return all;
}

std::vector<std::vector<Neighbor>> exact_knn_batch(const EmbeddingSet& corpus, const Eigen::MatrixXd& queries,
                                                   int k) {
    if (corpus.size() == 0) throw DataError("exact knn over an empty corpus");
    if (k < 1) throw ConfigError("k must be >= 1");
    if (queries.rows() != corpus.vectors.rows()) throw DataError("query dimension does not match corpus");
    const auto take = std::min<std::size_t>(static_cast<std::size_t>(k), corpus.size());
    std::vector<std::vector<Neighbor>> out(static_cast<std::size_t>(queries.cols()));
    // Blocks of queries keep the similarity matrix small.
    constexpr Eigen::Index kBlock = 256;
    std::vector<Neighbor> row(corpus.size());
    for (Eigen::Index start = 0; start < queries.cols(); start += kBlock) {
        const Eigen::Index n = std::min(kBlock, queries.cols() - start);
        const Eigen::MatrixXd sims = corpus.vectors.transpose() * queries.middleCols(start, n);
        for (Eigen::Index qi = 0; qi < n; ++qi) {
            for (std::size_t j = 0; j < corpus.size(); ++j)
                row[j] = {corpus.ids[j], sims(static_cast<Eigen::Index>(j), qi)};
            std::partial_sort(row.begin(), row.begin() + static_cast<std::ptrdiff_t>(take), row.end(), neighbor_order);
            out[static_cast<std::size_t>(start + qi)].assign(row.begin(), row.begin() + static_cast<std::ptrdiff_t>(take));
        }
    }
    return out;
}

void HnswConfig::validate() const {
    std::vector<std::string> problems;
    if (M < 2) problems.push_back("M must be >= 2");
    if (ef_construction < M) problems.push_back("ef_construction must be >= M");
    if (ef_search < 1) problems.push_back("ef_search must be >= 1");
    if (!problems.empty()) throw ConfigError(join_problems("hnsw config", problems));
}

HnswIndex::HnswIndex(int dim, HnswConfig config) : dim_(dim), config_(config) {
    if (dim < 1) throw ConfigError("index dimension must be >= 1");
    config_.validate();
}

std::span<const double> HnswIndex::vec(Node n) const {
    return {data_.data() + static_cast<std::size_t>(n) * static_cast<std::size_t>(dim_), static_cast<std::size_t>(dim_)};
}

double HnswIndex::distance(std::span<const double> q, Node n) const { return 1.0 - dot(q, vec(n)); }
double HnswIndex::distance(Node a, Node b) const { return 1.0 - dot(vec(a), vec(b)); }

int HnswIndex::draw_level(std::uint64_t insertion) const {
    Rng rng(derive_seed(config_.seed, kLevelStream, insertion));
    const double level = std::floor(-std::log(rng.uniform_positive()) * config_.level_multiplier());
    return static_cast<int>(std::min<double>(level, kMaxLevel));
}

std::int64_t HnswIndex::entry_point() const {
    if (empty()) throw DataError("empty index has no entry point");
    return ids_[entry_];
}

int HnswIndex::level_of(std::int64_t id) const {
    auto it = index_of_.find(id);
    if (it == index_of_.end()) throw DataError("unknown id " + std::to_string(id));
    return levels_[it->second];
}

std::vector<std::int64_t> HnswIndex::neighbors(std::int64_t id, int layer) const {
    auto it = index_of_.find(id);
    if (it == index_of_.end()) throw DataError("unknown id " + std::to_string(id));
    std::vector<std::int64_t> out;
    if (layer < 0 || layer > levels_[it->second]) return out;
    for (Node n : links_[it->second][static_cast<std::size_t>(layer)]) out.push_back(ids_[n]);
    return out;
}

std::vector<std::size_t> HnswIndex::layer_occupancy() const {
    std::vector<std::size_t> counts(static_cast<std::size_t>(std::max(max_level_ + 1, 0)), 0);
    for (int l : levels_)
        for (int layer = 0; layer <= l; ++layer) ++counts[static_cast<std::size_t>(layer)];
    return counts;
}

std::uint64_t HnswIndex::digest() const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    auto mix = [&](std::uint64_t v) {
        for (int i = 0; i < 8; ++i) {
            h ^= (v >> (8 * i)) & 0xff;
            h *= 0x100000001b3ULL;
        }
    };
    mix(ids_.size());
    mix(entry_);
    for (std::size_t n = 0; n < ids_.size(); ++n) {
        mix(static_cast<std::uint64_t>(ids_[n]));
        mix(static_cast<std::uint64_t>(levels_[n]));
        for (const auto& layer : links_[n]) {
            mix(layer.size());
            for (Node m : layer) mix(m);
        }
    }
    return h;
}

std::vector<HnswIndex::Scored> HnswIndex::search_layer(std::span<const double> q, const std::vector<Scored>& entry,
                                                       int ef, int layer) const {
    // Visited marks are reused across calls through an epoch counter.
    thread_local std::vector<std::uint32_t> visited;
    thread_local std::uint32_t epoch = 0;
    if (visited.size() < ids_.size()) visited.resize(ids_.size() + ids_.size() / 2 + 16, 0);
    if (++epoch == 0) {
        std::fill(visited.begin(), visited.end(), 0);
        epoch = 1;
    }

    auto nearer = [](const Scored& a, const Scored& b) { return closer(a.distance, a.id, b.distance, b.id); };
    auto farther = [&](const Scored& a, const Scored& b) { return nearer(b, a); };
    // candidates: closest on top; results: farthest on top.
    std::priority_queue<Scored, std::vector<Scored>, decltype(farther)> candidates(farther);
    std::priority_queue<Scored, std::vector<Scored>, decltype(nearer)> results(nearer);
    for (const Scored& e : entry) {
        if (visited[e.node] == epoch) continue;
        visited[e.node] = epoch;
        candidates.push(e);
        results.push(e);
        if (static_cast<int>(results.size()) > ef) results.pop();
    }
    while (!candidates.empty()) {
        const Scored c = candidates.top();
        if (static_cast<int>(results.size()) >= ef && nearer(results.top(), c)) break;
        candidates.pop();
        for (Node n : links_[c.node][static_cast<std::size_t>(layer)]) {
            if (visited[n] == epoch) continue;
            visited[n] = epoch;
            const Scored s{distance(q, n), ids_[n], n};
            if (static_cast<int>(results.size()) < ef || nearer(s, results.top())) {
                candidates.push(s);
                results.push(s);
                if (static_cast<int>(results.size()) > ef) results.pop();
            }
        }
    }
    std::vector<Scored> out;
    out.reserve(results.size());
    while (!results.empty()) {
        out.push_back(results.top());
        results.pop();
    }
    std::reverse(out.begin(), out.end());
    return out;
}

std::vector<HnswIndex::Scored> HnswIndex::select_heuristic(Node base, std::vector<Scored> candidates, int m,
                                                           const std::vector<Node>& protected_nodes) const {
    (void)base;
    std::vector<Scored> kept;
    kept.reserve(static_cast<std::size_t>(m));
    std::vector<std::uint8_t> taken(candidates.size(), 0);
    // Nodes whose only link is to `base` are kept first so pruning never
    // strands them.
    for (std::size_t i = 0; i < candidates.size() && static_cast<int>(kept.size()) < m; ++i) {
        if (std::find(protected_nodes.begin(), protected_nodes.end(), candidates[i].node) == protected_nodes.end())
            continue;
        kept.push_back(candidates[i]);
        taken[i] = 1;
    }
    for (std::size_t i = 0; i < candidates.size() && static_cast<int>(kept.size()) < m; ++i) {
        if (taken[i]) continue;
        const Scored& e = candidates[i];
        bool good = true;
        for (const Scored& r : kept) {
            if (distance(e.node, r.node) < e.distance) {
                good = false;
                break;
            }
        }
        if (good) kept.push_back(e);
    }
    return kept;
}

void HnswIndex::add_edge(Node a, Node b, int layer) {
    auto& la = links_[a][static_cast<std::size_t>(layer)];
    if (std::find(la.begin(), la.end(), b) != la.end()) return;
    la.push_back(b);
    links_[b][static_cast<std::size_t>(layer)].push_back(a);
}

void HnswIndex::remove_edge(Node a, Node b, int layer) {
    auto& la = links_[a][static_cast<std::size_t>(layer)];
    la.erase(std::remove(la.begin(), la.end(), b), la.end());
    auto& lb = links_[b][static_cast<std::size_t>(layer)];
    lb.erase(std::remove(lb.begin(), lb.end(), a), lb.end());
}

void HnswIndex::shrink(Node n, int layer) {
    const auto l = static_cast<std::size_t>(layer);
    const int cap = layer_cap(layer);
    if (static_cast<int>(links_[n][l].size()) <= cap) return;
    std::vector<Scored> cands;
    std::vector<Node> protected_nodes;
    for (Node m : links_[n][l]) {
        cands.push_back({distance(n, m), ids_[m], m});
        if (links_[m][l].size() == 1) protected_nodes.push_back(m);
    }
    std::sort(cands.begin(), cands.end(),
              [](const Scored& a, const Scored& b) { return closer(a.distance, a.id, b.distance, b.id); });
    const auto kept = select_heuristic(n, cands, cap, protected_nodes);
    std::vector<Node> dropped;
    for (const Scored& c : cands)
        if (std::none_of(kept.begin(), kept.end(), [&](const Scored& k) { return k.node == c.node; }))
            dropped.push_back(c.node);
    for (Node d : dropped) {
        remove_edge(n, d, layer);
        if (!links_[d][l].empty()) continue;
        // Stranded: link to the closest kept neighbour with spare capacity.
        for (const Scored& k : kept) {
            if (static_cast<int>(links_[k.node][l].size()) < cap) {
                add_edge(d, k.node, layer);
                break;
            }
        }
    }
}

void HnswIndex::insert(std::int64_t id, std::span<const double> embedding) {
    if (static_cast<int>(embedding.size()) != dim_)
        throw DataError("embedding dimension " + std::to_string(embedding.size()) + " does not match index dimension " +
                        std::to_string(dim_));
    const double norm = std::sqrt(dot(embedding, embedding));
    if (!(std::abs(norm - 1.0) <= kUnitNormTolerance))
        throw DataError("embedding for id " + std::to_string(id) + " is not unit-norm (norm " + format_double(norm) + ")");
    if (contains(id)) throw DataError("duplicate id " + std::to_string(id));

    const auto node = static_cast<Node>(ids_.size());
    const int level = draw_level(insertions_++);
    ids_.push_back(id);
    data_.insert(data_.end(), embedding.begin(), embedding.end());
    levels_.push_back(level);
    links_.emplace_back(static_cast<std::size_t>(level + 1));
    index_of_.emplace(id, node);

    if (node == 0) {
        entry_ = node;
        max_level_ = level;
        return;
    }

    const auto q = vec(node);
    std::vector<Scored> ep{{distance(q, entry_), ids_[entry_], entry_}};
    for (int layer = max_level_; layer > level; --layer) ep = search_layer(q, ep, 1, layer);
    for (int layer = std::min(level, max_level_); layer >= 0; --layer) {
        auto found = search_layer(q, ep, config_.ef_construction, layer);
        const auto selected = select_heuristic(node, found, layer_cap(layer), {});
        for (const Scored& s : selected) add_edge(node, s.node, layer);
        for (const Scored& s : selected) shrink(s.node, layer);
        ep = std::move(found);
    }
    if (level > max_level_) {
        max_level_ = level;
        entry_ = node;
    }
}

std::vector<Neighbor> HnswIndex::search(std::span<const double> query, int k, int ef_search) const {
    if (empty()) throw DataError("search on an empty index");
    if (k < 1) throw ConfigError("k must be >= 1");
    if (static_cast<int>(query.size()) != dim_) throw DataError("query dimension does not match index");
    const int ef = std::max(ef_search > 0 ? ef_search : config_.ef_search, k);
    std::vector<Scored> ep{{distance(query, entry_), ids_[entry_], entry_}};
    for (int layer = max_level_; layer > 0; --layer) ep = search_layer(query, ep, 1, layer);
    const auto found = search_layer(query, ep, ef, 0);
    std::vector<Neighbor> out;
    for (std::size_t i = 0; i < found.size() && static_cast<int>(out.size()) < k; ++i)
        out.push_back({found[i].id, dot(query, vec(found[i].node))});
    std::sort(out.begin(), out.end(), neighbor_order);
    return out;
}

void HnswIndex::save(const std::filesystem::path& path) const {
    detail::ByteWriter w;
    w.magic("HNSW");
    w.put<std::uint32_t>(kIndexVersion);
    w.put<std::uint32_t>(static_cast<std::uint32_t>(dim_));
    w.put<std::uint32_t>(static_cast<std::uint32_t>(config_.M));
    w.put<std::uint32_t>(static_cast<std::uint32_t>(config_.ef_construction));
    w.put<std::uint32_t>(static_cast<std::uint32_t>(config_.ef_search));
    w.put<std::uint64_t>(config_.seed);
    w.put<std::uint64_t>(ids_.size());
    w.put<std::uint64_t>(insertions_);
    w.put<std::uint32_t>(entry_);
    w.put<std::int32_t>(max_level_);
    for (std::size_t n = 0; n < ids_.size(); ++n) {
        w.put<std::int64_t>(ids_[n]);
        w.put<std::int32_t>(levels_[n]);
        w.doubles(data_.data() + n * static_cast<std::size_t>(dim_), static_cast<std::size_t>(dim_));
    }
    for (std::size_t n = 0; n < ids_.size(); ++n) {
        for (const auto& layer : links_[n]) {
            w.put<std::uint32_t>(static_cast<std::uint32_t>(layer.size()));
            for (Node m : layer) w.put<std::uint32_t>(m);
        }
    }
    w.finish(path);
}

HnswIndex HnswIndex::load(const std::filesystem::path& path) {
    detail::ByteReader r(path, "index snapshot");
    r.expect_magic("HNSW");
    const auto version = r.get<std::uint32_t>();
    if (version != kIndexVersion)
        throw DataError(r.source() + ": index version " + std::to_string(version) + ", expected " +
                        std::to_string(kIndexVersion));
    r.verify_crc();
    const int dim = static_cast<int>(r.get<std::uint32_t>());
    HnswConfig cfg;
    cfg.M = static_cast<int>(r.get<std::uint32_t>());
    cfg.ef_construction = static_cast<int>(r.get<std::uint32_t>());
    cfg.ef_search = static_cast<int>(r.get<std::uint32_t>());
    cfg.seed = r.get<std::uint64_t>();
    HnswIndex index(dim, cfg);
    const auto n = r.get<std::uint64_t>();
    index.insertions_ = r.get<std::uint64_t>();
    index.entry_ = r.get<std::uint32_t>();
    index.max_level_ = r.get<std::int32_t>();
    if (n > (1ULL << 31) || (n > 0 && index.entry_ >= n)) throw DataError(r.source() + ": corrupt node table");
    index.ids_.resize(n);
    index.levels_.resize(n);
    index.data_.resize(n * static_cast<std::size_t>(dim));
    index.links_.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        index.ids_[i] = r.get<std::int64_t>();
        index.levels_[i] = r.get<std::int32_t>();
        if (index.levels_[i] < 0 || index.levels_[i] > kMaxLevel) throw DataError(r.source() + ": corrupt level");
        r.doubles(index.data_.data() + i * static_cast<std::size_t>(dim), static_cast<std::size_t>(dim));
        index.index_of_.emplace(index.ids_[i], static_cast<Node>(i));
    }
    for (std::size_t i = 0; i < n; ++i) {
        index.links_[i].resize(static_cast<std::size_t>(index.levels_[i] + 1));
        for (auto& layer : index.links_[i]) {
            const auto count = r.get<std::uint32_t>();
            layer.resize(count);
            for (auto& m : layer) {
                m = r.get<std::uint32_t>();
                if (m >= n) throw DataError(r.source() + ": corrupt adjacency");
            }
        }
    }
    if (!r.at_end()) throw DataError(r.source() + ": trailing bytes in index snapshot");
    return index;
}

std::span<const double> HnswIndex::vector(std::int64_t id) const {
    auto it = index_of_.find(id);
    if (it == index_of_.end()) throw DataError("unknown id " + std::to_string(id));
    return vec(it->second);
}

EmbeddingSet HnswIndex::vectors() const {
    EmbeddingSet out;
    out.ids = ids_;
    out.vectors = Eigen::Map<const Eigen::MatrixXd>(data_.data(), dim_, static_cast<Eigen::Index>(ids_.size()));
    return out;
}

EmbeddingSet random_unit_vectors(std::size_t n, int dim, std::uint64_t seed) {
    if (dim < 1) throw ConfigError("dim must be >= 1");
    Rng rng(seed);
    EmbeddingSet out;
    out.vectors.resize(dim, static_cast<Eigen::Index>(n));
    for (std::size_t i = 0; i < n; ++i) {
        auto col = out.vectors.col(static_cast<Eigen::Index>(i));
        do {
            for (int d = 0; d < dim; ++d) col(d) = rng.normal();
        } while (col.norm() == 0.0);
        col.normalize();
        out.ids.push_back(static_cast<std::int64_t>(i));
    }
    return out;
}

double recall_at_k(const HnswIndex& index, const EmbeddingSet& corpus, const Eigen::MatrixXd& queries, int k,
                   int ef_search) {
    if (queries.cols() == 0) throw ConfigError("recall needs at least one query");
    const auto exact = exact_knn_batch(corpus, queries, k);
    double total = 0;
    for (Eigen::Index qi = 0; qi < queries.cols(); ++qi) {
        const Eigen::VectorXd q = queries.col(qi);
        const auto approx = index.search({q.data(), static_cast<std::size_t>(q.size())}, k, ef_search);
        const auto& truth = exact[static_cast<std::size_t>(qi)];
        std::size_t hits = 0;
        for (const auto& a : approx)
            if (std::any_of(truth.begin(), truth.end(), [&](const Neighbor& t) { return t.id == a.id; })) ++hits;
        total += static_cast<double>(hits) / static_cast<double>(std::max<std::size_t>(truth.size(), 1));
    }
    return total / static_cast<double>(queries.cols());
}

}  // namespace cglab
