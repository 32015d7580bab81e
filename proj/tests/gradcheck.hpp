#pragma once

// Central finite-difference check of the analytic loss gradients.

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "cglab/random.hpp"
#include "cglab/tower.hpp"

namespace oracle {

struct GradCheck {
    double norm_relative_error = 0;  // |a - n| / max(|a|, |n|) over the whole vector
    double max_entry_error = 0;      // per entry, relative with a 1e-5 floor
    std::size_t checked = 0;
};

inline GradCheck finite_difference(cglab::TwoTowerModel model, const std::vector<double>& analytic,
                                   const std::function<double(const cglab::TwoTowerModel&)>& loss, double h = 1e-6) {
    GradCheck out;
    auto params = model.parameters();
    double diff2 = 0, a2 = 0, n2 = 0;
    for (std::size_t i = 0; i < params.size(); ++i) {
        const double keep = params[i];
        params[i] = keep + h;
        const double up = loss(model);
        params[i] = keep - h;
        const double down = loss(model);
        params[i] = keep;
        const double numeric = (up - down) / (2 * h);
        const double a = analytic[i];
        diff2 += (a - numeric) * (a - numeric);
        a2 += a * a;
        n2 += numeric * numeric;
        out.max_entry_error =
            std::max(out.max_entry_error, std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-5}));
        ++out.checked;
    }
    out.norm_relative_error = std::sqrt(diff2) / std::max({std::sqrt(a2), std::sqrt(n2), 1e-300});
    return out;
}

/// He-initialised biases are zero, which can leave a whole narrow layer at
/// the rectifier kink; jitter every parameter so checks avoid it.
inline void jitter(cglab::TwoTowerModel& m, cglab::Rng& rng, double sd = 0.1) {
    auto p = m.parameters();
    for (std::size_t i = 0; i + 2 < p.size(); ++i) p[i] += sd * rng.normal();
}

inline Eigen::MatrixXd random_features(cglab::Rng& rng, int rows, int cols) {
    Eigen::MatrixXd m(rows, cols);
    for (int c = 0; c < cols; ++c)
        for (int r = 0; r < rows; ++r) m(r, c) = rng.normal();
    return m;
}

inline cglab::PairBatch random_pair_batch(cglab::Rng& rng, const cglab::TowerConfig& c, int nq, int nc, int pairs) {
    cglab::PairBatch b;
    b.query_features = random_features(rng, c.query_input_dim, nq);
    b.candidate_features = random_features(rng, c.candidate_input_dim, nc);
    for (int i = 0; i < pairs; ++i)
        b.pairs.push_back({static_cast<int>(rng.below(static_cast<std::uint64_t>(nq))),
                           static_cast<int>(rng.below(static_cast<std::uint64_t>(nc))),
                           rng.uniform() < 0.5 ? 1.0 : 0.0, 0.5 + 0.5 * rng.uniform()});
    return b;
}

inline cglab::TripletBatch random_triplet_batch(cglab::Rng& rng, const cglab::TowerConfig& c, int nq, int nc,
                                                int triplets) {
    cglab::TripletBatch b;
    b.query_features = random_features(rng, c.query_input_dim, nq);
    b.candidate_features = random_features(rng, c.candidate_input_dim, nc);
    for (int i = 0; i < triplets; ++i) {
        const int pos = static_cast<int>(rng.below(static_cast<std::uint64_t>(nc)));
        int neg = static_cast<int>(rng.below(static_cast<std::uint64_t>(nc - 1)));
        if (neg >= pos) ++neg;
        b.triplets.push_back({static_cast<int>(rng.below(static_cast<std::uint64_t>(nq))), pos, neg,
                              0.5 + 0.5 * rng.uniform()});
    }
    return b;
}

}  // namespace oracle
