#pragma once

// Brute-force reference implementations shared by the unit and acceptance
// tests. Deliberately naive: they share no code with the library.

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <utility>
#include <vector>

#include "cglab/metrics.hpp"

namespace oracle {

/// O(P*N) pairwise AUC: a win counts 1, a tie 1/2.
inline double pairwise_auc(const std::vector<cglab::ScoredExample>& ex) {
    double wins = 0, pairs = 0;
    for (const auto& p : ex) {
        if (p.label != 1) continue;
        for (const auto& n : ex) {
            if (n.label != 0) continue;
            pairs += 1;
            if (p.score > n.score)
                wins += 1;
            else if (p.score == n.score)
                wins += 0.5;
        }
    }
    return wins / pairs;
}

/// (mean per-group pairwise AUC, groups used)
inline std::pair<double, std::size_t> grouped_auc(const std::vector<cglab::ScoredExample>& ex) {
    std::map<std::int64_t, std::vector<cglab::ScoredExample>> groups;
    for (const auto& e : ex) groups[e.group].push_back(e);
    double sum = 0;
    std::size_t used = 0;
    for (const auto& [_, g] : groups) {
        bool pos = false, neg = false;
        for (const auto& e : g) (e.label ? pos : neg) = true;
        if (!pos || !neg) continue;
        sum += pairwise_auc(g);
        ++used;
    }
    return {sum / static_cast<double>(used), used};
}

inline double pearson(const std::vector<double>& x, const std::vector<double>& y) {
    const double n = static_cast<double>(x.size());
    double sx = 0, sy = 0, sxx = 0, syy = 0, sxy = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        sx += x[i];
        sy += y[i];
    }
    const double mx = sx / n, my = sy / n;
    for (std::size_t i = 0; i < x.size(); ++i) {
        sxx += (x[i] - mx) * (x[i] - mx);
        syy += (y[i] - my) * (y[i] - my);
        sxy += (x[i] - mx) * (y[i] - my);
    }
    return sxy / std::sqrt(sxx * syy);
}

/// Rank of each value = 1 + #smaller + (#equal - 1) / 2.
inline std::vector<double> average_ranks(const std::vector<double>& v) {
    std::vector<double> r(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) {
        double smaller = 0, equal = 0;
        for (double w : v) {
            if (w < v[i]) smaller += 1;
            if (w == v[i]) equal += 1;
        }
        r[i] = 1 + smaller + (equal - 1) / 2;
    }
    return r;
}

inline double spearman(const std::vector<double>& x, const std::vector<double>& y) {
    return pearson(average_ranks(x), average_ranks(y));
}

/// Column indices of the k largest inner products, ties by lower index.
inline std::vector<std::size_t> top_k(const Eigen::MatrixXd& corpus, const Eigen::VectorXd& q, int k) {
    std::vector<std::pair<double, std::size_t>> s;
    for (Eigen::Index j = 0; j < corpus.cols(); ++j) {
        double d = 0;
        for (Eigen::Index r = 0; r < corpus.rows(); ++r) d += corpus(r, j) * q(r);
        s.push_back({-d, static_cast<std::size_t>(j)});
    }
    std::sort(s.begin(), s.end());
    std::vector<std::size_t> out;
    for (int i = 0; i < k && i < static_cast<int>(s.size()); ++i) out.push_back(s[static_cast<std::size_t>(i)].second);
    return out;
}

inline std::vector<double> retrieval_frequency(const Eigen::MatrixXd& queries, const Eigen::MatrixXd& corpus, int k) {
    std::vector<double> f(static_cast<std::size_t>(corpus.cols()), 0.0);
    for (Eigen::Index i = 0; i < queries.cols(); ++i)
        for (std::size_t j : top_k(corpus, queries.col(i), k)) f[j] += 1.0;
    for (double& v : f) v /= static_cast<double>(queries.cols());
    return f;
}

}  // namespace oracle
