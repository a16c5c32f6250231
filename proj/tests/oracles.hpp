#pragma once

// Deliberately naive reference implementations used to cross-check the
// library: loops and exhaustive searches instead of the library's shortcuts.

#include "flipfl/tensor.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>
#include <vector>

namespace flipfl::oracle {

inline Real euclid(const RowMatrix& u, Index a, Index b) {
    Real s = 0;
    for (Index k = 0; k < u.cols(); ++k) s += (u(a, k) - u(b, k)) * (u(a, k) - u(b, k));
    return std::sqrt(s);
}

/// Step 1: repeatedly take the received row with the smallest summed distance
/// to the rows still received (lowest index on ties).
inline std::vector<Index> bulyan_selection(const RowMatrix& u, int f) {
    std::vector<Index> received(static_cast<std::size_t>(u.rows()));
    std::iota(received.begin(), received.end(), 0);
    std::vector<Index> chosen;
    while (static_cast<Index>(chosen.size()) < u.rows() - 2 * f) {
        Real best = std::numeric_limits<Real>::infinity();
        std::size_t best_pos = 0;
        for (std::size_t p = 0; p < received.size(); ++p) {
            Real s = 0;
            for (Index q : received) s += euclid(u, received[p], q);
            if (s < best) {
                best = s;
                best_pos = p;
            }
        }
        chosen.push_back(received[best_pos]);
        received.erase(received.begin() + static_cast<std::ptrdiff_t>(best_pos));
    }
    return chosen;
}

/// Step 2 for one coordinate: among all `keep`-subsets of `values` that are a
/// valid "closest to the median" set (no outsider strictly closer than an
/// insider), the one with the smallest value sum, averaged.
inline Real bulyan_coordinate(const std::vector<Real>& values, int keep) {
    std::vector<Real> sorted = values;
    std::sort(sorted.begin(), sorted.end());
    const Real med = sorted[(sorted.size() - 1) / 2];
    const std::size_t n = values.size();
    Real best_sum = std::numeric_limits<Real>::infinity();
    Real best_mean = 0;
    for (unsigned bits = 0; bits < (1u << n); ++bits) {
        if (std::popcount(bits) != keep) continue;
        Real worst_in = 0, best_out = std::numeric_limits<Real>::infinity(), sum = 0;
        for (std::size_t i = 0; i < n; ++i) {
            Real d = std::abs(values[i] - med);
            if (bits & (1u << i)) {
                worst_in = std::max(worst_in, d);
                sum += values[i];
            } else {
                best_out = std::min(best_out, d);
            }
        }
        if (worst_in > best_out) continue;
        if (sum < best_sum) {
            best_sum = sum;
            Real acc = 0;
            for (std::size_t i = 0; i < n; ++i)
                if (bits & (1u << i)) acc += values[i];
            best_mean = acc / keep;
        }
    }
    return best_mean;
}

inline Vector bulyan(const RowMatrix& u, int f) {
    const auto s = bulyan_selection(u, f);
    const int keep = static_cast<int>(u.rows()) - 4 * f;
    Vector out(u.cols());
    for (Index k = 0; k < u.cols(); ++k) {
        std::vector<Real> vals;
        for (Index r : s) vals.push_back(u(r, k));
        out[k] = bulyan_coordinate(vals, keep);
    }
    return out;
}

/// Per-coordinate signed rate: count +1 / -1 votes by hand.
inline std::vector<Real> robust_lr_rates(const RowMatrix& u, int beta, Real lr) {
    std::vector<Real> out;
    for (Index k = 0; k < u.cols(); ++k) {
        int sum = 0;
        for (Index i = 0; i < u.rows(); ++i) sum += u(i, k) > 0 ? 1 : (u(i, k) < 0 ? -1 : 0);
        out.push_back(std::abs(sum) >= beta ? lr : -lr);
    }
    return out;
}

inline Real reversed_fraction(const RowMatrix& u, int beta) {
    Index reversed = 0;
    for (Real r : robust_lr_rates(u, beta, 1.0)) reversed += r < 0;
    return static_cast<Real>(reversed) / static_cast<Real>(u.cols());
}

/// Density clustering from first principles: core points, the transitive
/// closure of eps-adjacency among cores, clusters ordered by their smallest
/// core index, border points attached to the earliest adjacent cluster.
inline std::vector<int> dbscan(const Matrix& d, Real eps, int min_pts) {
    const Index n = d.rows();
    std::vector<bool> core(static_cast<std::size_t>(n));
    for (Index i = 0; i < n; ++i) {
        int cnt = 0;
        for (Index j = 0; j < n; ++j) cnt += d(i, j) <= eps;
        core[static_cast<std::size_t>(i)] = cnt >= min_pts;
    }
    // reach[i][j]: cores i, j connected through a chain of cores.
    std::vector<std::vector<bool>> reach(static_cast<std::size_t>(n), std::vector<bool>(static_cast<std::size_t>(n)));
    for (Index i = 0; i < n; ++i)
        for (Index j = 0; j < n; ++j)
            reach[i][j] = core[i] && core[j] && d(i, j) <= eps;
    for (Index k = 0; k < n; ++k)
        for (Index i = 0; i < n; ++i)
            for (Index j = 0; j < n; ++j)
                if (reach[i][k] && reach[k][j]) reach[i][j] = true;
    std::vector<int> label(static_cast<std::size_t>(n), -1);
    int next = 0;
    std::vector<Index> cluster_root;
    for (Index i = 0; i < n; ++i) {
        if (!core[i] || label[i] != -1) continue;
        for (Index j = 0; j < n; ++j)
            if (reach[i][j]) label[j] = next;
        cluster_root.push_back(i);
        ++next;
    }
    for (Index i = 0; i < n; ++i) {
        if (core[i]) continue;
        for (int c = 0; c < next && label[i] == -1; ++c)
            for (Index j = 0; j < n; ++j)
                if (core[j] && label[j] == c && d(i, j) <= eps) {
                    label[i] = c;
                    break;
                }
    }
    return label;
}

/// Renumbers clusters by first appearance so labelings compare up to renaming.
inline std::vector<int> canonical_labels(const std::vector<int>& labels) {
    std::map<int, int> rename;
    std::vector<int> out;
    for (int l : labels) {
        if (l < 0) {
            out.push_back(-1);
            continue;
        }
        auto it = rename.try_emplace(l, static_cast<int>(rename.size())).first;
        out.push_back(it->second);
    }
    return out;
}

}  // namespace flipfl::oracle
