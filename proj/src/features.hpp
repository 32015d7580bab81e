#pragma once

#include <Eigen/Dense>
#include <span>

#include "cglab/dataset.hpp"

namespace cglab::detail {

/// Feature columns for the listed query indices (all queries when empty).
inline Eigen::MatrixXd query_features(const World& world, std::span<const std::size_t> rows = {}) {
    const auto queries = world.queries();
    const std::size_t n = rows.empty() ? queries.size() : rows.size();
    Eigen::MatrixXd out(world.query_dim(), static_cast<Eigen::Index>(n));
    for (std::size_t i = 0; i < n; ++i) {
        const auto& f = queries[rows.empty() ? i : rows[i]].features;
        out.col(static_cast<Eigen::Index>(i)) = Eigen::Map<const Eigen::VectorXd>(f.data(), world.query_dim());
    }
    return out;
}

inline Eigen::MatrixXd candidate_features(const World& world, std::span<const std::size_t> rows = {}) {
    const auto candidates = world.candidates();
    const std::size_t n = rows.empty() ? candidates.size() : rows.size();
    Eigen::MatrixXd out(world.candidate_dim(), static_cast<Eigen::Index>(n));
    for (std::size_t i = 0; i < n; ++i) {
        const auto& f = candidates[rows.empty() ? i : rows[i]].features;
        out.col(static_cast<Eigen::Index>(i)) = Eigen::Map<const Eigen::VectorXd>(f.data(), world.candidate_dim());
    }
    return out;
}

}  // namespace cglab::detail
