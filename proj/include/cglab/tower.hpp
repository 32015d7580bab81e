#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace cglab {

using Embedding = Eigen::VectorXd;

/// Norm floor used when normalizing tower outputs.
inline constexpr double kNormEpsilon = 1e-12;

enum class Tower { query, candidate };

struct TowerConfig {
    int query_input_dim = 0;
    int candidate_input_dim = 0;
    std::vector<int> hidden{128, 64};
    int embedding_dim = 32;

    void validate() const;
    bool operator==(const TowerConfig&) const = default;
};

/// A contiguous slice of the flat parameter vector.
struct ParamBlock {
    std::string name;  // e.g. "query.0.weight", "candidate.2.bias", "calibration"
    int rows = 0;
    int cols = 0;
    std::size_t offset = 0;
    std::size_t size() const { return static_cast<std::size_t>(rows) * static_cast<std::size_t>(cols); }
};

/// Query tower g and candidate tower h (rectifier MLPs ending in L2
/// normalization) plus the calibration pair applied to the cosine before the
/// sigmoid. All parameters live in one flat vector in declaration order:
/// query layers, candidate layers, then (scale, offset).
class TwoTowerModel {
public:
    TwoTowerModel(TowerConfig config, std::uint64_t init_seed, double initial_scale = 5.0);
    TwoTowerModel(TowerConfig config, std::vector<double> parameters);

    const TowerConfig& config() const { return config_; }
    const std::vector<ParamBlock>& blocks() const { return blocks_; }
    std::span<const double> parameters() const { return params_; }
    std::span<double> parameters() { return params_; }
    std::size_t parameter_count() const { return params_.size(); }
    int layer_count() const { return static_cast<int>(config_.hidden.size()) + 1; }

    double scale() const { return params_[params_.size() - 2]; }
    double offset() const { return params_.back(); }
    void set_calibration(double scale, double offset);

    Embedding embed_query(std::span<const double> features) const;
    Embedding embed_candidate(std::span<const double> features) const;
    /// Column-wise: features is input_dim x n, result is embedding_dim x n.
    Eigen::MatrixXd embed(Tower tower, const Eigen::MatrixXd& features) const;

    double score(const Embedding& query, const Embedding& candidate) const;

    /// Names of the trainable layer groups ("query.0", ..., "calibration").
    std::vector<std::string> layer_names() const;
    /// 1 for trainable entries, 0 for entries of the listed layers. "all"
    /// freezes everything.
    std::vector<std::uint8_t> trainable_mask(std::span<const std::string> frozen_layers) const;
    /// FNV-1a over the raw bytes of one layer group.
    std::uint64_t layer_checksum(const std::string& layer) const;

    Eigen::Map<const Eigen::MatrixXd> weight(Tower tower, int layer) const;
    Eigen::Map<const Eigen::VectorXd> bias(Tower tower, int layer) const;
    const ParamBlock& block(const std::string& name) const;

private:
    void build_layout();
    int block_index(Tower tower, int layer) const;

    TowerConfig config_;
    std::vector<ParamBlock> blocks_;
    std::vector<double> params_;
};

double sigmoid(double x);
/// log(1 + e^x) without overflow.
double softplus(double x);

// Batches reference entity columns so each distinct query or candidate runs
// through its tower once per batch.

struct PairRef {
    int query = 0;
    int candidate = 0;
    double label = 0.0;
    double weight = 1.0;
};

struct PairBatch {
    Eigen::MatrixXd query_features;      // query_input_dim x n_queries
    Eigen::MatrixXd candidate_features;  // candidate_input_dim x n_candidates
    std::vector<PairRef> pairs;
};

struct TripletRef {
    int query = 0;
    int positive = 0;
    int negative = 0;
    double weight = 1.0;
};

struct TripletBatch {
    Eigen::MatrixXd query_features;
    Eigen::MatrixXd candidate_features;
    std::vector<TripletRef> triplets;
};

struct TripletConfig {
    double margin = 0.2;
    void validate() const;
};

struct LossGrad {
    double loss = 0.0;
    std::vector<double> gradient;  // same layout as TwoTowerModel::parameters()
    std::size_t active = 0;        // triplets with positive hinge
};

/// Weighted mean binary cross-entropy of sigmoid(scale * cos + offset).
LossGrad pointwise_loss_grad(const TwoTowerModel& model, const PairBatch& batch);

/// Weighted mean of max(0, d(q, c+) - d(q, c-) + margin) with d = 1 - cos.
LossGrad triplet_loss_grad(const TwoTowerModel& model, const TripletBatch& batch, const TripletConfig& config);

/// Per-triplet hinge for given distances.
inline double triplet_hinge(double d_pos, double d_neg, double margin) {
    const double h = d_pos - d_neg + margin;
    return h > 0 ? h : 0.0;
}

struct AdamConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
};

struct AdamState {
    std::vector<double> m;
    std::vector<double> v;
    std::int64_t step = 0;
};

/// One Adam update in parameter order. Entries with mask 0 are left untouched
/// (moments included). An empty mask means everything is trainable.
void optimizer_step(std::span<double> params, std::span<const double> gradient, AdamState& state, double lr,
                    std::span<const std::uint8_t> mask = {}, const AdamConfig& config = {});

inline constexpr std::uint32_t kCheckpointVersion = 1;

void save_checkpoint(const TwoTowerModel& model, const std::filesystem::path& path);
TwoTowerModel load_checkpoint(const std::filesystem::path& path);

}  // namespace cglab
