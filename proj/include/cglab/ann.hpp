#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <span>
#include <unordered_map>
#include <vector>

namespace cglab {

/// Unit vectors stored column-wise with their ids.
struct EmbeddingSet {
    std::vector<std::int64_t> ids;
    Eigen::MatrixXd vectors;  // dim x n

    std::size_t size() const { return ids.size(); }
    int dim() const { return static_cast<int>(vectors.rows()); }
};

struct Neighbor {
    std::int64_t id = 0;
    double similarity = 0.0;
    bool operator==(const Neighbor&) const = default;
};

/// Inner product used by both the index and the exact oracle, so equal ids
/// yield bit-identical similarities.
double dot(std::span<const double> a, std::span<const double> b);

/// Exact top-k by cosine (inner product of unit vectors), ties by ascending id.
std::vector<Neighbor> exact_knn(const EmbeddingSet& corpus, std::span<const double> query, int k);

/// Exact top-k for many queries (columns of `queries`), one list per query.
std::vector<std::vector<Neighbor>> exact_knn_batch(const EmbeddingSet& corpus, const Eigen::MatrixXd& queries, int k);

struct HnswConfig {
    int M = 16;
    int ef_construction = 200;
    int ef_search = 100;
    std::uint64_t seed = 42;

    double level_multiplier() const { return 1.0 / std::log(static_cast<double>(M)); }
    void validate() const;
};

inline constexpr double kUnitNormTolerance = 1e-6;
inline constexpr std::uint32_t kIndexVersion = 1;

/// Hierarchical navigable small-world graph over unit vectors. Adjacency is
/// kept symmetric: pruning an edge removes it from both endpoints. Layer 0
/// allows 2M neighbours, upper layers M; a new node links to up to the cap.
class HnswIndex {
public:
    HnswIndex(int dim, HnswConfig config = {});

    void insert(std::int64_t id, std::span<const double> embedding);

    /// Up to k results by descending similarity. ef_search <= 0 uses the
    /// configured value; the beam is never narrower than k.
    std::vector<Neighbor> search(std::span<const double> query, int k, int ef_search = 0) const;

    std::size_t size() const { return ids_.size(); }
    int dim() const { return dim_; }
    const HnswConfig& config() const { return config_; }
    bool empty() const { return ids_.empty(); }
    bool contains(std::int64_t id) const { return index_of_.count(id) != 0; }
    int max_level() const { return max_level_; }
    std::int64_t entry_point() const;
    int level_of(std::int64_t id) const;
    std::vector<std::int64_t> neighbors(std::int64_t id, int layer) const;
    std::span<const double> vector(std::int64_t id) const;
    /// Stored vectors in insertion order.
    EmbeddingSet vectors() const;
    int layer_cap(int layer) const { return layer == 0 ? 2 * config_.M : config_.M; }
    /// Nodes whose level is >= layer, for every layer.
    std::vector<std::size_t> layer_occupancy() const;
    /// FNV-1a digest of ids, levels and adjacency.
    std::uint64_t digest() const;

    void save(const std::filesystem::path& path) const;
    static HnswIndex load(const std::filesystem::path& path);

private:
    using Node = std::uint32_t;
    struct Scored {
        double distance;
        std::int64_t id;
        Node node;
    };

    double distance(std::span<const double> q, Node n) const;
    double distance(Node a, Node b) const;
    std::span<const double> vec(Node n) const;
    int draw_level(std::uint64_t insertion) const;
    std::vector<Scored> search_layer(std::span<const double> q, const std::vector<Scored>& entry, int ef,
                                     int layer) const;
    std::vector<Scored> select_heuristic(Node base, std::vector<Scored> candidates, int m,
                                         const std::vector<Node>& protected_nodes) const;
    void add_edge(Node a, Node b, int layer);
    void remove_edge(Node a, Node b, int layer);
    void shrink(Node n, int layer);

    int dim_;
    HnswConfig config_;
    std::vector<std::int64_t> ids_;
    std::vector<double> data_;
    std::vector<int> levels_;
    std::vector<std::vector<std::vector<Node>>> links_;  // [node][layer]
    std::unordered_map<std::int64_t, Node> index_of_;
    Node entry_ = 0;
    int max_level_ = -1;
    std::uint64_t insertions_ = 0;
};

/// n vectors drawn uniformly on the unit sphere, ids 0..n-1.
EmbeddingSet random_unit_vectors(std::size_t n, int dim, std::uint64_t seed);

/// Mean over queries of |ANN top-k intersect exact top-k| / k.
double recall_at_k(const HnswIndex& index, const EmbeddingSet& corpus, const Eigen::MatrixXd& queries, int k,
                   int ef_search = 0);

}  // namespace cglab
