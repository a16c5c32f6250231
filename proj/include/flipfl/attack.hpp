#pragma once

// Focused-flip backdoor attack: movement-based candidate selection, sign
// flipping layer by layer, trigger optimization and malicious local training.
// Also the classic train-and-rescale baseline.

#include "flipfl/data.hpp"
#include "flipfl/federation.hpp"
#include "flipfl/nn.hpp"

#include <map>
#include <optional>
#include <string>
#include <vector>

namespace flipfl::attack {

enum class Criterion { directional, directionless };

std::string to_string(Criterion c);
Criterion criterion_from_string(const std::string& name);

/// One tensor per layer, shaped like that layer's weight.
using LayerTensors = std::vector<Tensor>;

struct AttackConfig {
    Criterion criterion = Criterion::directional;
    /// Candidate fraction per layer kind.
    Real s_conv = 0.01;
    Real s_dense = 0.001;
    /// Weights of the triggered-sample term and the proximal term.
    Real lambda = 1.0;
    Real alpha = 0.0;
    /// Trigger ascent iterations and step size.
    int trigger_iters = 10;
    Real trigger_lr = 0.1;
    int trigger_batch_size = 32;
    int validation_batch_size = 32;
    /// <= 0 falls back to the round's local settings.
    int local_steps = 0;
    Real local_lr = 0.0;
    /// Rescale factor of the baseline attack.
    Real gamma = 1.0;
    bool enable_flip = true;
    bool enable_trigger_opt = true;

    void validate() const;
};

// ---- candidate selection ---------------------------------------------------------

/// directional: (w_t - w_prev) * w_t; directionless: its absolute value.
LayerTensors importance_scores(const nn::ModelParams& current, const nn::ModelParams& previous, Criterion c);
/// Uniform(-1, 1) scores for an attacker that has no earlier model.
LayerTensors random_scores(const nn::ModelParams& model, Rng& rng);

/// round(s * size), at least 1.
Index candidate_count(Index size, Real s);
/// Binary mask over the `candidate_count` lowest scores; ties go to the lower flat index.
Tensor select_candidates(const Tensor& scores, Real s);
LayerTensors select_candidates(const LayerTensors& scores, const nn::Architecture& arch, Real s_conv,
                               Real s_dense);

// ---- sign flipping ---------------------------------------------------------------

/// mask * sign(source) * |w| + (1 - mask) * w. A zero sign leaves the weight as is.
Tensor focused_flip(const Tensor& w, const Tensor& mask, const Tensor& sign_source);
inline Tensor flip_first_layer(const Tensor& w, const Tensor& mask, const Tensor& trigger_star) {
    return focused_flip(w, mask, trigger_star);
}
inline Tensor flip_subsequent_layer(const Tensor& w, const Tensor& mask, const Tensor& delta_star) {
    return focused_flip(w, mask, delta_star);
}

/// Weight-shaped sign source for the first layer. Conv: the trigger patch
/// resized to the kernel and repeated for every filter. Dense: the batch mean
/// of (x' - x), repeated for every output unit.
Tensor first_layer_sign_source(const nn::LayerSpec& spec, const data::Trigger& trig, const RowMatrix& batch);

/// Batch mean of act(z_j(x')) - act(z_j(x)) for layer index `layer` (0-based).
Vector activation_difference(const nn::ModelParams& model, const nn::Architecture& arch, std::size_t layer,
                             const RowMatrix& x_v, const data::Trigger& trig);

/// Maps an input-side difference vector of `spec` to its weight shape: per
/// channel nearest-neighbour resize for conv, row broadcast for dense.
Tensor expand_to_weight(const nn::LayerSpec& spec, const Vector& delta);

// ---- trigger optimization --------------------------------------------------------

struct TriggerLoss {
    Real value = 0.0;
    /// d value / d pattern, zero outside the mask.
    Tensor grad;
};

/// Batch mean of ||act(z_1(x)) - act(z_1(x'))||^2 and its gradient with
/// respect to the trigger pattern.
TriggerLoss trigger_loss_and_grad(const nn::LayerParams& first, const nn::LayerSpec& spec, const RowMatrix& x,
                                  const data::Trigger& trig);

struct TriggerOptResult {
    data::Trigger trigger;
    /// First-layer weights flipped with respect to the final trigger.
    nn::LayerParams first;
    std::vector<Real> losses;
};

/// P rounds of {flip, sample batch, ascend, clamp to [0,1]}, then one last
/// flip against the final pattern.
TriggerOptResult optimize_trigger(const nn::LayerParams& first, const nn::LayerSpec& spec, const Tensor& mask,
                                  const data::Trigger& init, const data::Dataset& data, const AttackConfig& cfg,
                                  Rng& rng);

// ---- malicious updates -----------------------------------------------------------

struct AttackResult {
    fl::ClientUpdate update;
    data::Trigger trigger;
    /// The model right after flipping, before local training.
    nn::ModelParams flipped;
    LayerTensors masks;
};

/// Scores, masks, first-layer flip (with optional trigger ascent), later
/// layer flips and K steps of the composite backdoor loss. `previous` is the
/// attacker's last received global model, if any.
AttackResult f3ba_update(const nn::ModelParams& global, const nn::ModelParams* previous,
                         const fl::ClientData& client, const nn::Architecture& arch, const fl::RoundConfig& round_cfg,
                         const AttackConfig& cfg, const data::Trigger& trigger, int round);

/// Composite-loss training with a fixed trigger, then theta + gamma * (theta_i - theta).
fl::ClientUpdate baseline_rescale_update(const nn::ModelParams& global, const fl::ClientData& client,
                                         const nn::Architecture& arch, const fl::RoundConfig& round_cfg,
                                         const AttackConfig& cfg, const data::Trigger& trigger, int round);

/// Subsample of `k` distinct indices in ascending order (all of them when k >= n).
std::vector<Index> sample_batch(Index n, int k, Rng& rng);

struct TriggerRecord {
    int round = 0;
    int client_id = 0;
    data::Trigger trigger;
};

class FocusedFlipAttacker : public fl::Adversary {
public:
    FocusedFlipAttacker(AttackConfig cfg, data::Trigger initial);

    std::string name() const override;
    fl::ClientUpdate propose(int round, const nn::ModelParams& global, const fl::ClientData& client,
                             const nn::Architecture& arch, const fl::RoundConfig& cfg) override;
    data::Trigger evaluation_trigger() const override;

    /// Every trigger produced so far, in proposal order.
    const std::vector<TriggerRecord>& trigger_log() const { return log_; }

private:
    struct Memory {
        std::optional<nn::ModelParams> last_global;
        data::Trigger trigger;
    };
    AttackConfig cfg_;
    data::Trigger initial_;
    std::map<int, Memory> memory_;
    std::vector<TriggerRecord> log_;
};

class RescaleAttacker : public fl::Adversary {
public:
    RescaleAttacker(AttackConfig cfg, data::Trigger trigger);

    std::string name() const override { return "baseline_rescale"; }
    fl::ClientUpdate propose(int round, const nn::ModelParams& global, const fl::ClientData& client,
                             const nn::Architecture& arch, const fl::RoundConfig& cfg) override;
    data::Trigger evaluation_trigger() const override { return trigger_; }

private:
    AttackConfig cfg_;
    data::Trigger trigger_;
};

}  // namespace flipfl::attack
