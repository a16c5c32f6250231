#pragma once

// Round orchestration: client sampling, benign local training, update
// collection, pluggable aggregation and ACC/ASR evaluation.

#include "flipfl/data.hpp"
#include "flipfl/nn.hpp"
#include "flipfl/random.hpp"

#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace flipfl::fl {

/// Divisor used by FedAvg: the participating clients' sample total (default)
/// or the literal total over all clients.
enum class FedAvgDivisor { participating, total };

struct RoundConfig {
    int clients_per_round = 10;
    int local_steps = 10;
    Real local_lr = 0.05;
    int batch_size = 16;
    std::uint64_t seed = 0;
    /// Force at least one malicious client into every round.
    bool guarantee_attacker = false;
    FedAvgDivisor divisor = FedAvgDivisor::participating;
};

/// What a defense is allowed to see of a client's contribution.
struct SubmittedUpdate {
    int client_id = 0;
    Index num_samples = 0;
    nn::ModelParams proposed;
    /// Optional client-side report requested by the aggregator.
    std::vector<Real> report;
};

/// A client's update plus the ground-truth tag used for metrics only.
/// Aggregators receive `SubmittedUpdate`, which has no such field.
struct ClientUpdate {
    SubmittedUpdate submission;
    bool is_malicious = false;
};

using Diagnostics = std::map<std::string, std::string>;

struct RoundMetrics {
    int round = 0;
    Real acc = 0.0;
    Real asr = 0.0;
    std::string aggregator;
    int malicious_sampled = 0;
    std::vector<int> sampled;
    Diagnostics diagnostics;
};

struct GlobalState {
    int round = 0;
    nn::ModelParams current;
    nn::ModelParams previous;
    std::vector<RoundMetrics> history;
};

struct ClientData {
    int id = 0;
    data::Dataset data;
    bool malicious = false;
};

/// Everything a defense may use on the server side.
struct AggregationContext {
    const GlobalState& state;
    const nn::Architecture& arch;
    /// Unlabeled server-side samples (distillation, FedRAD scoring).
    const data::Dataset& server_data;
    /// Sum of n_i over all clients (used by the literal FedAvg divisor).
    Index total_samples = 0;
    FedAvgDivisor divisor = FedAvgDivisor::participating;
    Rng& rng;
};

struct AggregationResult {
    nn::ModelParams next;
    Diagnostics diagnostics;
};

class Aggregator {
public:
    virtual ~Aggregator() = default;
    virtual std::string name() const = 0;
    virtual AggregationResult aggregate(AggregationContext& ctx, std::span<const SubmittedUpdate> updates) = 0;
    /// Client-side report sent along with the update (FedMV filter ranks).
    /// Computed by every sampled client on its own data; empty by default.
    virtual std::vector<Real> client_report(const nn::ModelParams& proposed, const nn::Architecture& arch,
                                            const data::Dataset& client_data) const;
    /// Scalar diagnostics this aggregator always emits; become CSV columns.
    virtual std::vector<std::string> diagnostic_columns() const { return {}; }
    /// Test-time classifier; plain argmax unless the defense smooths predictions.
    virtual std::vector<int> predict(const nn::ModelParams& model, const nn::Architecture& arch,
                                     const RowMatrix& x, Rng& rng) const;
    /// Diagnostics gathered while predicting (vote tallies); drained after
    /// each round's evaluation.
    virtual Diagnostics take_evaluation_diagnostics() { return {}; }
};

/// Malicious-client behaviour plugged into the round loop.
class Adversary {
public:
    virtual ~Adversary() = default;
    virtual std::string name() const = 0;
    /// Produce the malicious client's update for this round.
    virtual ClientUpdate propose(int round, const nn::ModelParams& global, const ClientData& client,
                                 const nn::Architecture& arch, const RoundConfig& cfg) = 0;
    /// Trigger used for ASR evaluation (average of the latest per-attacker triggers).
    virtual data::Trigger evaluation_trigger() const = 0;
};

// ---- operations -----------------------------------------------------------------

/// Seeded minibatch order for local training: epoch-wise shuffles of the
/// client's indices, cut into `batch_size` chunks, `steps` batches in total.
std::vector<std::vector<Index>> local_batches(Index num_samples, int steps, int batch_size, Rng& rng);

Rng local_training_stream(std::uint64_t seed, int round, int client_id);

/// K SGD steps of plain cross-entropy from `global`.
ClientUpdate local_train_benign(const nn::ModelParams& global, const nn::Architecture& arch,
                                const ClientData& client, const RoundConfig& cfg, int round);

/// theta + sum n_i (theta_i - theta) / divisor.
nn::ModelParams fedavg_aggregate(const nn::ModelParams& global, std::span<const SubmittedUpdate> updates,
                                 FedAvgDivisor divisor = FedAvgDivisor::participating,
                                 Index total_samples = 0);

/// Same rule with per-update weights (FedRAD uses n_i * s_i).
nn::ModelParams weighted_aggregate(const nn::ModelParams& global, std::span<const SubmittedUpdate> updates,
                                   std::span<const Real> weights);

class FedAvgAggregator : public Aggregator {
public:
    std::string name() const override { return "fedavg"; }
    AggregationResult aggregate(AggregationContext& ctx, std::span<const SubmittedUpdate> updates) override;
};

/// Uniform sample of `m` distinct client ids; with `guarantee_attacker` the
/// draw is repeated until at least one malicious id is present (if any exist).
std::vector<int> sample_clients(int num_clients, int m, std::span<const int> malicious_ids,
                                bool guarantee_attacker, Rng& rng);

Real evaluate_acc(const nn::ModelParams& model, const nn::Architecture& arch, const data::Dataset& test,
                  const Aggregator& predictor, Rng& rng);
/// Fraction of triggered non-target-class samples predicted as the target.
/// Throws ConfigError when no non-target sample exists.
Real evaluate_asr(const nn::ModelParams& model, const nn::Architecture& arch, const data::Dataset& test,
                  const data::Trigger& trigger, const Aggregator& predictor, Rng& rng);

/// Static description of one federation.
struct Federation {
    nn::Architecture arch;
    std::vector<ClientData> clients;
    data::Dataset test_set;
    data::Dataset server_data;
    /// ASR trigger when no adversary is present.
    data::Trigger default_trigger;
    RoundConfig round;

    Index total_samples() const;
    std::vector<int> malicious_ids() const;
};

/// One round: sample, train (benign or adversarial), aggregate, evaluate.
/// Returns the new state with a metrics row appended.
GlobalState run_round(const GlobalState& state, const Federation& fed, Adversary* adversary,
                      Aggregator& aggregator);

}  // namespace flipfl::fl
