#pragma once

// Robust aggregation on flattened updates: Bulyan, sign-voting robust
// learning rate, and DeepSight clustering (with a standalone DBSCAN).

#include "flipfl/federation.hpp"
#include "flipfl/nn.hpp"

#include <span>
#include <string>
#include <vector>

namespace flipfl::robust {

/// Positions of `updates` sorted by client id, so every rule below is
/// invariant to the order in which updates arrive.
std::vector<std::size_t> client_order(std::span<const fl::SubmittedUpdate> updates);

/// Row r = flatten(updates[order[r]].proposed - global).
RowMatrix update_matrix(const nn::ModelParams& global, std::span<const fl::SubmittedUpdate> updates,
                        std::span<const std::size_t> order);

// ---- Bulyan --------------------------------------------------------------------------

struct BulyanConfig {
    int assumed_f = 1;
};

/// Greedy selection of n - 2f rows: repeatedly move the row with the smallest
/// summed Euclidean distance to the rows still in the received set. Ties go to
/// the lower row index. Returns row indices in selection order.
std::vector<Index> bulyan_select(const RowMatrix& updates, int f);

/// Mean of the `keep` values closest to the lower-middle median of `values`.
/// Closeness ties are broken by smaller value, then by position.
Real bulyan_coordinate(std::span<const Real> values, int keep);

struct BulyanResult {
    Vector aggregate;
    std::vector<Index> selected;
};

/// Throws PreconditionError when n < 4f + 3.
BulyanResult bulyan(const RowMatrix& updates, int f);

class BulyanAggregator : public fl::Aggregator {
public:
    explicit BulyanAggregator(BulyanConfig cfg) : cfg_(cfg) {}
    std::string name() const override { return "bulyan"; }
    fl::AggregationResult aggregate(fl::AggregationContext& ctx, std::span<const fl::SubmittedUpdate> updates) override;
    std::vector<std::string> diagnostic_columns() const override { return {"bulyan_selected"}; }

private:
    BulyanConfig cfg_;
};

// ---- Robust learning rate -------------------------------------------------------------

struct RobustLRConfig {
    int beta = 5;
    Real server_lr = 1.0;
};

/// |sum_i sgn(u_i[k])| per coordinate, with sgn(0) = 0.
Vector sign_agreement(const RowMatrix& updates);
/// +lr where the agreement reaches beta, -lr elsewhere.
Vector robust_lr_rates(const RowMatrix& updates, int beta, Real lr);
/// Fraction of coordinates whose agreement falls below beta.
Real reversed_coordinate_fraction(const RowMatrix& updates, int beta);

struct RobustLRResult {
    nn::ModelParams next;
    Real reversed_fraction = 0.0;
};

RobustLRResult robust_lr_aggregate(const nn::ModelParams& global, std::span<const fl::SubmittedUpdate> updates,
                                   const RobustLRConfig& cfg, fl::FedAvgDivisor divisor = fl::FedAvgDivisor::participating,
                                   Index total_samples = 0);

class RobustLRAggregator : public fl::Aggregator {
public:
    explicit RobustLRAggregator(RobustLRConfig cfg) : cfg_(cfg) {}
    std::string name() const override { return "robust_lr"; }
    fl::AggregationResult aggregate(fl::AggregationContext& ctx, std::span<const fl::SubmittedUpdate> updates) override;
    std::vector<std::string> diagnostic_columns() const override { return {"reversed_fraction"}; }

private:
    RobustLRConfig cfg_;
};

// ---- DBSCAN / DeepSight ---------------------------------------------------------------

constexpr int kNoise = -1;

/// Density clustering on a precomputed symmetric distance matrix. A point's
/// neighbourhood includes itself; a point is core when it has at least
/// `min_pts` neighbours within `eps`. Points are scanned in index order and
/// clusters are numbered from 0 in discovery order.
std::vector<int> dbscan(const Matrix& dist, Real eps, int min_pts);

struct DeepSightConfig {
    int num_random_inputs = 64;
    /// Clustering radii for the three distance matrices, as multiples of the
    /// median off-diagonal distance of that matrix.
    Real eps_bias = 0.5;
    Real eps_conv = 0.5;
    Real eps_prob = 0.5;
    /// Absolute radius on the 3 - agreements matrix.
    Real eps_final = 1.0;
    int min_pts = 2;
    /// Clusters with a flagged fraction above this are dropped.
    Real tau = 1.0 / 3.0;
    /// Flag when the max mean class probability exceeds median + k * MAD.
    Real flag_mad_k = 2.0;

    void validate() const;
};

/// 1 - cosine of last-layer update vectors (weight and bias). Two zero vectors
/// are at distance 0, a zero and a non-zero vector at distance 1.
Matrix cosine_distance_matrix(const RowMatrix& vectors);
Matrix euclidean_distance_matrix(const RowMatrix& vectors);

/// Labels from distinct clusterings to a 3 - agreements style distance. Noise
/// points never agree with anyone but themselves.
Matrix agreement_distance(std::span<const std::vector<int>> labelings);

/// Flags by the probability-concentration rule on per-client mean probabilities.
std::vector<bool> concentration_flags(const RowMatrix& mean_probs, Real mad_k);

struct DeepSightResult {
    /// Positions into the update span that survive.
    std::vector<std::size_t> kept;
    std::vector<bool> flagged;
    std::vector<int> final_labels;
    /// True when every client would have been dropped and all were kept instead.
    bool fallback = false;
};

DeepSightResult deepsight_filter(const nn::ModelParams& global, const nn::Architecture& arch,
                                 std::span<const fl::SubmittedUpdate> updates, const DeepSightConfig& cfg, Rng& rng);

class DeepSightAggregator : public fl::Aggregator {
public:
    explicit DeepSightAggregator(DeepSightConfig cfg);
    std::string name() const override { return "deepsight"; }
    fl::AggregationResult aggregate(fl::AggregationContext& ctx, std::span<const fl::SubmittedUpdate> updates) override;
    std::vector<std::string> diagnostic_columns() const override {
        return {"deepsight_excluded", "deepsight_fallback"};
    }

private:
    DeepSightConfig cfg_;
};

}  // namespace flipfl::robust
