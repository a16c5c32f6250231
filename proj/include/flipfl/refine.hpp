#pragma once

// Model-refinement defenses (ensemble distillation, median-count reweighting,
// filter-ranking pruning) and the clip/perturb/vote certified mechanism.

#include "flipfl/federation.hpp"
#include "flipfl/nn.hpp"

#include <span>
#include <string>
#include <vector>

namespace flipfl::refine {

/// Mean of the models' logits on x.
RowMatrix ensemble_logits(std::span<const nn::ModelParams> models, const nn::Architecture& arch, const RowMatrix& x);

/// Per (sample, class) lower-middle median of the models' logits.
RowMatrix median_logits(std::span<const nn::ModelParams> models, const nn::Architecture& arch, const RowMatrix& x);

struct DistillConfig {
    int steps = 10;
    Real lr = 0.05;
    Real temperature = 1.0;

    void validate() const;
};

/// Full-batch KL descent of `student` toward the teacher logits on x.
/// Throws NumericError naming the step when the loss goes non-finite.
nn::ModelParams distill(const nn::ModelParams& student, const nn::Architecture& arch, const RowMatrix& x,
                        const RowMatrix& teacher_logits, const DistillConfig& cfg);

/// Distil the FedAvg aggregate toward the mean of the client models.
nn::ModelParams feddf_distill(const nn::ModelParams& fedavg_model, std::span<const nn::ModelParams> client_models,
                              const nn::Architecture& arch, const RowMatrix& x_unlabeled, const DistillConfig& cfg);

class FedDFAggregator : public fl::Aggregator {
public:
    explicit FedDFAggregator(DistillConfig cfg);
    std::string name() const override { return "feddf"; }
    fl::AggregationResult aggregate(fl::AggregationContext& ctx, std::span<const fl::SubmittedUpdate> updates) override;

private:
    DistillConfig cfg_;
};

struct FedRadScores {
    /// Number of (sample, class) pairs where the client's logit is the median.
    std::vector<Real> raw;
    /// raw / sum(raw); uniform when every raw score is zero.
    std::vector<Real> weights;
    bool uniform_fallback = false;
};

FedRadScores fedrad_scores(std::span<const nn::ModelParams> models, const nn::Architecture& arch, const RowMatrix& x);

class FedRADAggregator : public fl::Aggregator {
public:
    explicit FedRADAggregator(DistillConfig cfg);
    std::string name() const override { return "fedrad"; }
    fl::AggregationResult aggregate(fl::AggregationContext& ctx, std::span<const fl::SubmittedUpdate> updates) override;
    std::vector<std::string> diagnostic_columns() const override { return {"fedrad_uniform"}; }

private:
    DistillConfig cfg_;
};

struct FedMVConfig {
    Real prune_fraction = 0.25;
    /// Prune the filters with the largest averaged rank; false prunes the smallest.
    bool prune_largest = true;
    /// Outlier erasure every `erase_period` rounds (0 disables).
    int erase_period = 5;
    Real erase_z = 3.0;

    void validate() const;
};

/// Index of the last conv layer; throws ConfigError when there is none.
std::size_t last_conv_layer(const nn::Architecture& arch);

/// Mean absolute activation of every filter in the last conv layer.
std::vector<Real> filter_activations(const nn::ModelParams& model, const nn::Architecture& arch, const RowMatrix& x);

/// Ascending ranks 0..p-1 of `activations`; ties go to the lower filter index.
std::vector<Real> activation_ranks(std::span<const Real> activations);

std::vector<Real> fedmv_rank_filters(const nn::ModelParams& model, const nn::Architecture& arch, const RowMatrix& x);

/// Filters to prune from averaged ranks: round(fraction * p) of them.
std::vector<Index> filters_to_prune(std::span<const Real> avg_ranks, Real fraction, bool largest);

/// Zeroes the weights and bias of the given filters of layer `layer`.
nn::ModelParams prune_filters(const nn::ModelParams& model, std::size_t layer, std::span<const Index> filters);

/// Zeroes every parameter whose distance to the global mean exceeds z standard deviations.
nn::ModelParams erase_outliers(const nn::ModelParams& model, Real z);

class FedMVAggregator : public fl::Aggregator {
public:
    explicit FedMVAggregator(FedMVConfig cfg);
    std::string name() const override { return "fedmv"; }
    fl::AggregationResult aggregate(fl::AggregationContext& ctx, std::span<const fl::SubmittedUpdate> updates) override;
    std::vector<Real> client_report(const nn::ModelParams& proposed, const nn::Architecture& arch,
                                    const data::Dataset& client_data) const override;
    std::vector<std::string> diagnostic_columns() const override { return {"fedmv_pruned", "fedmv_erased"}; }

private:
    FedMVConfig cfg_;
};

struct CRFLConfig {
    Real rho = 10.0;
    Real sigma_train = 0.01;
    /// Negative means "same as sigma_train".
    Real sigma_test = -1.0;
    int votes = 11;

    Real test_sigma() const { return sigma_test < 0 ? sigma_train : sigma_test; }
    void validate() const;
};

/// theta / max(1, ||theta|| / rho) plus N(0, sigma^2) noise on every parameter.
nn::ModelParams crfl_clip_noise(const nn::ModelParams& model, Real rho, Real sigma, Rng& rng);

struct VoteResult {
    std::vector<int> labels;
    /// tallies[i][c]: votes for class c on sample i; each row sums to M.
    std::vector<std::vector<int>> tallies;
};

/// M noisy copies of the model (shared across the batch) vote; ties go to the
/// smallest label.
VoteResult crfl_vote(const nn::ModelParams& model, const nn::Architecture& arch, const RowMatrix& x, Real sigma,
                     int votes, Rng& rng);

class CRFLAggregator : public fl::Aggregator {
public:
    explicit CRFLAggregator(CRFLConfig cfg);
    std::string name() const override { return "crfl"; }
    fl::AggregationResult aggregate(fl::AggregationContext& ctx, std::span<const fl::SubmittedUpdate> updates) override;
    std::vector<std::string> diagnostic_columns() const override { return {"crfl_clip_scale"}; }
    std::vector<int> predict(const nn::ModelParams& model, const nn::Architecture& arch, const RowMatrix& x,
                             Rng& rng) const override;
    /// Per-class vote totals of each predict call since the last drain, as
    /// crfl_tally_0, crfl_tally_1, ...
    fl::Diagnostics take_evaluation_diagnostics() override;

private:
    CRFLConfig cfg_;
    mutable std::vector<std::vector<long>> tallies_;
};

}  // namespace flipfl::refine
