#include "cglab/tower.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "binary_io.hpp"
#include "cglab/errors.hpp"
#include "cglab/random.hpp"
#include "format.hpp"

namespace cglab {

double sigmoid(double x) {
    if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

double softplus(double x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

void TowerConfig::validate() const {
    std::vector<std::string> problems;
    if (query_input_dim < 1) problems.push_back("query_input_dim must be >= 1");
    if (candidate_input_dim < 1) problems.push_back("candidate_input_dim must be >= 1");
    if (embedding_dim < 2) problems.push_back("embedding_dim must be >= 2");
    for (int h : hidden)
        if (h < 1) problems.push_back("hidden layer sizes must be >= 1");
    if (!problems.empty()) throw ConfigError(join_problems("tower config", problems));
}

void TripletConfig::validate() const {
    if (!(margin > 0 && margin < 2)) throw ConfigError("triplet margin must lie in (0, 2)");
}

namespace {

const char* tower_name(Tower t) { return t == Tower::query ? "query" : "candidate"; }

std::vector<int> layer_dims(const TowerConfig& c, Tower t) {
    std::vector<int> dims{t == Tower::query ? c.query_input_dim : c.candidate_input_dim};
    dims.insert(dims.end(), c.hidden.begin(), c.hidden.end());
    dims.push_back(c.embedding_dim);
    return dims;
}

}  // namespace

void TwoTowerModel::build_layout() {
    config_.validate();
    blocks_.clear();
    std::size_t offset = 0;
    for (Tower t : {Tower::query, Tower::candidate}) {
        const auto dims = layer_dims(config_, t);
        for (std::size_t l = 0; l + 1 < dims.size(); ++l) {
            const std::string prefix = std::string(tower_name(t)) + "." + std::to_string(l);
            blocks_.push_back({prefix + ".weight", dims[l + 1], dims[l], offset});
            offset += blocks_.back().size();
            blocks_.push_back({prefix + ".bias", dims[l + 1], 1, offset});
            offset += blocks_.back().size();
        }
    }
    blocks_.push_back({"calibration", 2, 1, offset});
}

TwoTowerModel::TwoTowerModel(TowerConfig config, std::uint64_t init_seed, double initial_scale)
    : config_(std::move(config)) {
    build_layout();
    if (!(initial_scale > 0)) throw ConfigError("initial calibration scale must be > 0");
    params_.assign(blocks_.back().offset + 2, 0.0);
    // He initialization; each weight block gets its own stream.
    for (std::size_t b = 0; b < blocks_.size(); ++b) {
        const ParamBlock& blk = blocks_[b];
        if (blk.cols == 1 || blk.name == "calibration") continue;
        Rng rng(derive_seed(init_seed, 101, b));
        const double sd = std::sqrt(2.0 / blk.cols);
        for (std::size_t i = 0; i < blk.size(); ++i) params_[blk.offset + i] = sd * rng.normal();
    }
    set_calibration(initial_scale, 0.0);
}

TwoTowerModel::TwoTowerModel(TowerConfig config, std::vector<double> parameters)
    : config_(std::move(config)), params_(std::move(parameters)) {
    build_layout();
    if (params_.size() != blocks_.back().offset + 2)
        throw DataError("parameter count " + std::to_string(params_.size()) + " does not match tower config");
    if (!std::all_of(params_.begin(), params_.end(), [](double v) { return std::isfinite(v); }))
        throw NumericalError("non-finite model parameter");
    if (!(scale() > 0)) throw NumericalError("calibration scale must be > 0");
}

void TwoTowerModel::set_calibration(double scale, double offset) {
    params_[params_.size() - 2] = scale;
    params_.back() = offset;
}

int TwoTowerModel::block_index(Tower tower, int layer) const {
    const int per_tower = 2 * layer_count();
    return (tower == Tower::query ? 0 : per_tower) + 2 * layer;
}

Eigen::Map<const Eigen::MatrixXd> TwoTowerModel::weight(Tower tower, int layer) const {
    const ParamBlock& b = blocks_[static_cast<std::size_t>(block_index(tower, layer))];
    return {params_.data() + b.offset, b.rows, b.cols};
}

Eigen::Map<const Eigen::VectorXd> TwoTowerModel::bias(Tower tower, int layer) const {
    const ParamBlock& b = blocks_[static_cast<std::size_t>(block_index(tower, layer) + 1)];
    return {params_.data() + b.offset, b.rows};
}

const ParamBlock& TwoTowerModel::block(const std::string& name) const {
    for (const auto& b : blocks_)
        if (b.name == name) return b;
    throw ConfigError("unknown parameter block " + name);
}

std::vector<std::string> TwoTowerModel::layer_names() const {
    std::vector<std::string> names;
    for (Tower t : {Tower::query, Tower::candidate})
        for (int l = 0; l < layer_count(); ++l) names.push_back(std::string(tower_name(t)) + "." + std::to_string(l));
    names.emplace_back("calibration");
    return names;
}

std::vector<std::uint8_t> TwoTowerModel::trainable_mask(std::span<const std::string> frozen_layers) const {
    std::vector<std::uint8_t> mask(params_.size(), 1);
    const auto names = layer_names();
    for (const std::string& layer : frozen_layers) {
        if (layer == "all") {
            std::fill(mask.begin(), mask.end(), 0);
            continue;
        }
        if (std::find(names.begin(), names.end(), layer) == names.end())
            throw ConfigError("unknown layer '" + layer + "'");
        for (const auto& b : blocks_)
            if (b.name == layer || b.name.rfind(layer + ".", 0) == 0)
                std::fill_n(mask.begin() + static_cast<std::ptrdiff_t>(b.offset), b.size(), 0);
    }
    return mask;
}

std::uint64_t TwoTowerModel::layer_checksum(const std::string& layer) const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    bool found = false;
    for (const auto& b : blocks_) {
        if (b.name != layer && b.name.rfind(layer + ".", 0) != 0) continue;
        found = true;
        const auto* bytes = reinterpret_cast<const unsigned char*>(params_.data() + b.offset);
        for (std::size_t i = 0; i < b.size() * sizeof(double); ++i) {
            h ^= bytes[i];
            h *= 0x100000001b3ULL;
        }
    }
    if (!found) throw ConfigError("unknown layer '" + layer + "'");
    return h;
}

namespace {

struct TowerCache {
    std::vector<Eigen::MatrixXd> inputs;  // input to each layer
    Eigen::MatrixXd raw;                  // final pre-normalization output
    Eigen::VectorXd norms;
    Eigen::MatrixXd unit;
};

void forward(const TwoTowerModel& m, Tower t, const Eigen::MatrixXd& x, TowerCache& cache) {
    const int layers = m.layer_count();
    const int expected = t == Tower::query ? m.config().query_input_dim : m.config().candidate_input_dim;
    if (x.rows() != expected)
        throw DataError(std::string(tower_name(t)) + " features have dimension " + std::to_string(x.rows()) +
                          ", expected " + std::to_string(expected));
    cache.inputs.resize(static_cast<std::size_t>(layers));
    cache.inputs[0] = x;
    for (int l = 0; l < layers; ++l) {
        Eigen::MatrixXd z = m.weight(t, l) * cache.inputs[static_cast<std::size_t>(l)];
        z.colwise() += m.bias(t, l);
        if (l + 1 < layers)
            cache.inputs[static_cast<std::size_t>(l + 1)] = z.cwiseMax(0.0);
        else
            cache.raw = std::move(z);
    }
    cache.norms = cache.raw.colwise().norm().transpose();
    cache.unit.resizeLike(cache.raw);
    for (Eigen::Index j = 0; j < cache.raw.cols(); ++j)
        cache.unit.col(j) = cache.raw.col(j) / std::max(cache.norms(j), kNormEpsilon);
}

void backward(const TwoTowerModel& m, Tower t, const TowerCache& cache, const Eigen::MatrixXd& d_unit,
              std::vector<double>& grad) {
    const int layers = m.layer_count();
    Eigen::MatrixXd dz(cache.raw.rows(), cache.raw.cols());
    for (Eigen::Index j = 0; j < dz.cols(); ++j) {
        const double n = cache.norms(j);
        if (n > kNormEpsilon) {
            const auto u = cache.unit.col(j);
            dz.col(j) = (d_unit.col(j) - u * u.dot(d_unit.col(j))) / n;
        } else {
            dz.col(j) = d_unit.col(j) / kNormEpsilon;
        }
    }
    const auto& blocks = m.blocks();
    const int base = t == Tower::query ? 0 : 2 * layers;
    for (int l = layers - 1; l >= 0; --l) {
        const auto& in = cache.inputs[static_cast<std::size_t>(l)];
        const ParamBlock& wb = blocks[static_cast<std::size_t>(base + 2 * l)];
        const ParamBlock& bb = blocks[static_cast<std::size_t>(base + 2 * l + 1)];
        Eigen::Map<Eigen::MatrixXd>(grad.data() + wb.offset, wb.rows, wb.cols).noalias() += dz * in.transpose();
        Eigen::Map<Eigen::VectorXd>(grad.data() + bb.offset, bb.rows) += dz.rowwise().sum();
        if (l > 0) {
            Eigen::MatrixXd da = m.weight(t, l).transpose() * dz;
            dz = da.cwiseProduct((in.array() > 0.0).cast<double>().matrix());
        }
    }
}

}  // namespace

Eigen::MatrixXd TwoTowerModel::embed(Tower tower, const Eigen::MatrixXd& features) const {
    TowerCache cache;
    forward(*this, tower, features, cache);
    return std::move(cache.unit);
}

Embedding TwoTowerModel::embed_query(std::span<const double> features) const {
    const Eigen::MatrixXd x = Eigen::Map<const Eigen::VectorXd>(features.data(), static_cast<Eigen::Index>(features.size()));
    return embed(Tower::query, x).col(0);
}

Embedding TwoTowerModel::embed_candidate(std::span<const double> features) const {
    const Eigen::MatrixXd x = Eigen::Map<const Eigen::VectorXd>(features.data(), static_cast<Eigen::Index>(features.size()));
    return embed(Tower::candidate, x).col(0);
}

double TwoTowerModel::score(const Embedding& query, const Embedding& candidate) const {
    return sigmoid(scale() * query.dot(candidate) + offset());
}

LossGrad pointwise_loss_grad(const TwoTowerModel& model, const PairBatch& batch) {
    if (batch.pairs.empty()) throw ConfigError("pointwise loss needs a non-empty batch");
    TowerCache qc, cc;
    forward(model, Tower::query, batch.query_features, qc);
    forward(model, Tower::candidate, batch.candidate_features, cc);

    const double s = model.scale();
    const double b = model.offset();
    double total_weight = 0;
    for (const auto& p : batch.pairs) total_weight += p.weight;

    Eigen::MatrixXd dq = Eigen::MatrixXd::Zero(qc.unit.rows(), qc.unit.cols());
    Eigen::MatrixXd dc = Eigen::MatrixXd::Zero(cc.unit.rows(), cc.unit.cols());
    LossGrad out;
    out.gradient.assign(model.parameter_count(), 0.0);
    double d_scale = 0, d_offset = 0, loss = 0;
    for (const auto& p : batch.pairs) {
        const auto q = qc.unit.col(p.query);
        const auto c = cc.unit.col(p.candidate);
        const double cosine = q.dot(c);
        const double logit = s * cosine + b;
        loss += p.weight * (softplus(logit) - p.label * logit);
        const double g = p.weight * (sigmoid(logit) - p.label) / total_weight;
        d_scale += g * cosine;
        d_offset += g;
        dq.col(p.query) += (g * s) * c;
        dc.col(p.candidate) += (g * s) * q;
    }
    out.loss = loss / total_weight;
    if (!std::isfinite(out.loss)) throw NumericalError("non-finite pointwise loss");
    backward(model, Tower::query, qc, dq, out.gradient);
    backward(model, Tower::candidate, cc, dc, out.gradient);
    out.gradient[out.gradient.size() - 2] = d_scale;
    out.gradient.back() = d_offset;
    return out;
}

LossGrad triplet_loss_grad(const TwoTowerModel& model, const TripletBatch& batch, const TripletConfig& config) {
    config.validate();
    if (batch.triplets.empty()) throw ConfigError("triplet loss needs a non-empty batch");
    TowerCache qc, cc;
    forward(model, Tower::query, batch.query_features, qc);
    forward(model, Tower::candidate, batch.candidate_features, cc);

    double total_weight = 0;
    for (const auto& t : batch.triplets) total_weight += t.weight;

    Eigen::MatrixXd dq = Eigen::MatrixXd::Zero(qc.unit.rows(), qc.unit.cols());
    Eigen::MatrixXd dc = Eigen::MatrixXd::Zero(cc.unit.rows(), cc.unit.cols());
    LossGrad out;
    out.gradient.assign(model.parameter_count(), 0.0);
    double loss = 0;
    for (const auto& t : batch.triplets) {
        const auto q = qc.unit.col(t.query);
        const auto cp = cc.unit.col(t.positive);
        const auto cn = cc.unit.col(t.negative);
        const double h = triplet_hinge(1.0 - q.dot(cp), 1.0 - q.dot(cn), config.margin);
        if (h <= 0) continue;
        ++out.active;
        loss += t.weight * h;
        const double g = t.weight / total_weight;
        dq.col(t.query) += g * (cn - cp);
        dc.col(t.positive) -= g * q;
        dc.col(t.negative) += g * q;
    }
    out.loss = loss / total_weight;
    if (!std::isfinite(out.loss)) throw NumericalError("non-finite triplet loss");
    if (out.active > 0) {
        backward(model, Tower::query, qc, dq, out.gradient);
        backward(model, Tower::candidate, cc, dc, out.gradient);
    }
    return out;
}

void optimizer_step(std::span<double> params, std::span<const double> gradient, AdamState& state, double lr,
                    std::span<const std::uint8_t> mask, const AdamConfig& config) {
    if (gradient.size() != params.size()) throw ConfigError("gradient/parameter size mismatch");
    if (!mask.empty() && mask.size() != params.size()) throw ConfigError("mask/parameter size mismatch");
    if (state.m.empty()) {
        state.m.assign(params.size(), 0.0);
        state.v.assign(params.size(), 0.0);
    }
    if (state.m.size() != params.size()) throw ConfigError("optimizer state does not match parameters");
    ++state.step;
    const double c1 = 1.0 - std::pow(config.beta1, static_cast<double>(state.step));
    const double c2 = 1.0 - std::pow(config.beta2, static_cast<double>(state.step));
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (!mask.empty() && !mask[i]) continue;
        const double g = gradient[i];
        state.m[i] = config.beta1 * state.m[i] + (1.0 - config.beta1) * g;
        state.v[i] = config.beta2 * state.v[i] + (1.0 - config.beta2) * g * g;
        const double m_hat = state.m[i] / c1;
        const double v_hat = state.v[i] / c2;
        params[i] -= lr * m_hat / (std::sqrt(v_hat) + config.epsilon);
    }
}

void save_checkpoint(const TwoTowerModel& model, const std::filesystem::path& path) {
    detail::ByteWriter w;
    w.magic("TTCG");
    w.put<std::uint32_t>(kCheckpointVersion);
    const auto& c = model.config();
    w.put<std::uint32_t>(static_cast<std::uint32_t>(c.query_input_dim));
    w.put<std::uint32_t>(static_cast<std::uint32_t>(c.candidate_input_dim));
    w.put<std::uint32_t>(static_cast<std::uint32_t>(c.hidden.size()));
    for (int h : c.hidden) w.put<std::uint32_t>(static_cast<std::uint32_t>(h));
    w.put<std::uint32_t>(static_cast<std::uint32_t>(c.embedding_dim));
    const auto params = model.parameters();
    w.put<std::uint64_t>(params.size());
    w.doubles(params.data(), params.size());
    w.finish(path);
}

TwoTowerModel load_checkpoint(const std::filesystem::path& path) {
    detail::ByteReader r(path, "checkpoint");
    r.expect_magic("TTCG");
    const auto version = r.get<std::uint32_t>();
    if (version != kCheckpointVersion)
        throw DataError(r.source() + ": checkpoint version " + std::to_string(version) + ", expected " +
                        std::to_string(kCheckpointVersion));
    r.verify_crc();
    TowerConfig c;
    c.query_input_dim = static_cast<int>(r.get<std::uint32_t>());
    c.candidate_input_dim = static_cast<int>(r.get<std::uint32_t>());
    const auto n_hidden = r.get<std::uint32_t>();
    if (n_hidden > 64) throw DataError(r.source() + ": implausible hidden layer count");
    c.hidden.resize(n_hidden);
    for (auto& h : c.hidden) h = static_cast<int>(r.get<std::uint32_t>());
    c.embedding_dim = static_cast<int>(r.get<std::uint32_t>());
    const auto n = r.get<std::uint64_t>();
    if (n > (1ULL << 32)) throw DataError(r.source() + ": implausible parameter count");
    std::vector<double> params(n);
    r.doubles(params.data(), params.size());
    if (!r.at_end()) throw DataError(r.source() + ": trailing bytes in checkpoint");
    return TwoTowerModel(std::move(c), std::move(params));
}

}  // namespace cglab
