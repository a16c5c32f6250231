#include "flipfl/federation.hpp"

#include "flipfl/errors.hpp"

#include <algorithm>
#include <numeric>

namespace flipfl::fl {

std::vector<int> Aggregator::predict(const nn::ModelParams& model, const nn::Architecture& arch,
                                     const RowMatrix& x, Rng&) const {
    return nn::argmax_rows(nn::forward(model, arch, x));
}

std::vector<Real> Aggregator::client_report(const nn::ModelParams&, const nn::Architecture&,
                                            const data::Dataset&) const {
    return {};
}

std::vector<std::vector<Index>> local_batches(Index num_samples, int steps, int batch_size, Rng& rng) {
    if (num_samples < 1) throw ConfigError("local training needs at least one sample");
    if (batch_size < 1) throw ConfigError("batch size must be >= 1");
    const Index b = std::min<Index>(batch_size, num_samples);
    std::vector<Index> order(static_cast<std::size_t>(num_samples));
    std::iota(order.begin(), order.end(), Index{0});
    std::shuffle(order.begin(), order.end(), rng);
    std::size_t cursor = 0;

    std::vector<std::vector<Index>> batches;
    batches.reserve(static_cast<std::size_t>(std::max(steps, 0)));
    for (int s = 0; s < steps; ++s) {
        std::vector<Index> batch;
        batch.reserve(static_cast<std::size_t>(b));
        while (static_cast<Index>(batch.size()) < b) {
            if (cursor == order.size()) {
                std::shuffle(order.begin(), order.end(), rng);
                cursor = 0;
            }
            batch.push_back(order[cursor++]);
        }
        batches.push_back(std::move(batch));
    }
    return batches;
}

Rng local_training_stream(std::uint64_t seed, int round, int client_id) {
    return make_stream(seed, StreamPurpose::local_training,
                       {static_cast<std::uint64_t>(round), static_cast<std::uint64_t>(client_id)});
}

ClientUpdate local_train_benign(const nn::ModelParams& global, const nn::Architecture& arch,
                                const ClientData& client, const RoundConfig& cfg, int round) {
    if (client.data.empty()) throw ConfigError("client " + std::to_string(client.id) + " has no samples");
    Rng rng = local_training_stream(cfg.seed, round, client.id);
    nn::ModelParams model = global;
    const auto loss = nn::LossSpec::cross_entropy();
    for (const auto& idx : local_batches(client.data.size(), cfg.local_steps, cfg.batch_size, rng)) {
        const RowMatrix x = data::gather_rows(client.data, idx);
        const auto y = data::gather_labels(client.data, idx);
        auto r = nn::loss_and_grad(model, arch, x, y, loss);
        model = nn::sgd_step(model, r.grads, cfg.local_lr);
    }
    ClientUpdate u;
    u.submission.client_id = client.id;
    u.submission.num_samples = client.data.size();
    u.submission.proposed = std::move(model);
    u.is_malicious = false;
    return u;
}

nn::ModelParams weighted_aggregate(const nn::ModelParams& global, std::span<const SubmittedUpdate> updates,
                                   std::span<const Real> weights) {
    if (updates.empty()) throw ConfigError("aggregation needs at least one update");
    if (weights.size() != updates.size()) throw DimensionError("one weight per update required");
    const Real total = std::accumulate(weights.begin(), weights.end(), Real{0});
    if (!(total > 0)) throw ConfigError("aggregation weights sum to zero");
    nn::ModelParams next = global;
    for (std::size_t i = 0; i < updates.size(); ++i) {
        if (weights[i] == 0) continue;
        nn::axpy(next, weights[i] / total, updates[i].proposed - global);
    }
    return next;
}

nn::ModelParams fedavg_aggregate(const nn::ModelParams& global, std::span<const SubmittedUpdate> updates,
                                 FedAvgDivisor divisor, Index total_samples) {
    if (updates.empty()) throw ConfigError("fedavg needs at least one update");
    Real participating = 0;
    for (const auto& u : updates) participating += static_cast<Real>(u.num_samples);
    const Real denom = divisor == FedAvgDivisor::total ? static_cast<Real>(total_samples) : participating;
    if (!(denom > 0)) throw ConfigError("fedavg: zero total samples");
    nn::ModelParams next = global;
    for (const auto& u : updates) {
        nn::axpy(next, static_cast<Real>(u.num_samples) / denom, u.proposed - global);
    }
    return next;
}

AggregationResult FedAvgAggregator::aggregate(AggregationContext& ctx, std::span<const SubmittedUpdate> updates) {
    return {fedavg_aggregate(ctx.state.current, updates, ctx.divisor, ctx.total_samples), {}};
}

std::vector<int> sample_clients(int num_clients, int m, std::span<const int> malicious_ids,
                                bool guarantee_attacker, Rng& rng) {
    if (m < 1 || m > num_clients) {
        throw ConfigError("clients_per_round " + std::to_string(m) + " must be in [1, " +
                          std::to_string(num_clients) + "]");
    }
    std::vector<int> ids(static_cast<std::size_t>(num_clients));
    std::iota(ids.begin(), ids.end(), 0);
    for (;;) {
        std::vector<int> pick;
        std::sample(ids.begin(), ids.end(), std::back_inserter(pick), m, rng);
        if (!guarantee_attacker || malicious_ids.empty()) return pick;
        for (int id : pick)
            if (std::find(malicious_ids.begin(), malicious_ids.end(), id) != malicious_ids.end()) return pick;
    }
}

Real evaluate_acc(const nn::ModelParams& model, const nn::Architecture& arch, const data::Dataset& test,
                  const Aggregator& predictor, Rng& rng) {
    if (test.empty()) throw ConfigError("evaluate_acc: empty test set");
    const auto pred = predictor.predict(model, arch, RowMatrix(test.rows()), rng);
    Index hits = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) hits += pred[i] == test.ys[i];
    return static_cast<Real>(hits) / static_cast<Real>(pred.size());
}

Real evaluate_asr(const nn::ModelParams& model, const nn::Architecture& arch, const data::Dataset& test,
                  const data::Trigger& trigger, const Aggregator& predictor, Rng& rng) {
    if (test.empty()) throw ConfigError("evaluate_asr: empty test set");
    std::vector<Index> keep;
    for (Index i = 0; i < test.size(); ++i)
        if (test.ys[static_cast<std::size_t>(i)] != trigger.target_label) keep.push_back(i);
    if (keep.empty()) throw ConfigError("evaluate_asr: every test sample already has the target label");
    RowMatrix x = data::gather_rows(test, keep);
    data::apply_trigger_rows(x, trigger);
    const auto pred = predictor.predict(model, arch, x, rng);
    Index hits = 0;
    for (int p : pred) hits += p == trigger.target_label;
    return static_cast<Real>(hits) / static_cast<Real>(pred.size());
}

Index Federation::total_samples() const {
    Index n = 0;
    for (const auto& c : clients) n += c.data.size();
    return n;
}

std::vector<int> Federation::malicious_ids() const {
    std::vector<int> ids;
    for (const auto& c : clients)
        if (c.malicious) ids.push_back(c.id);
    return ids;
}

GlobalState run_round(const GlobalState& state, const Federation& fed, Adversary* adversary,
                      Aggregator& aggregator) {
    const auto& cfg = fed.round;
    const auto round_key = static_cast<std::uint64_t>(state.round);
    const auto malicious = fed.malicious_ids();

    Rng sampler = make_stream(cfg.seed, StreamPurpose::client_sampling, {round_key});
    auto sampled = sample_clients(static_cast<int>(fed.clients.size()), cfg.clients_per_round, malicious,
                                  cfg.guarantee_attacker, sampler);
    std::sort(sampled.begin(), sampled.end());

    std::vector<ClientUpdate> updates;
    updates.reserve(sampled.size());
    int malicious_count = 0;
    for (int id : sampled) {
        const ClientData& client = fed.clients.at(static_cast<std::size_t>(id));
        if (client.malicious && adversary != nullptr) {
            updates.push_back(adversary->propose(state.round, state.current, client, fed.arch, cfg));
            updates.back().is_malicious = true;
        } else {
            updates.push_back(local_train_benign(state.current, fed.arch, client, cfg, state.round));
            updates.back().is_malicious = client.malicious;
        }
        malicious_count += updates.back().is_malicious ? 1 : 0;
        updates.back().submission.report = aggregator.client_report(updates.back().submission.proposed, fed.arch,
                                                                     client.data);
    }

    std::vector<SubmittedUpdate> submissions;
    submissions.reserve(updates.size());
    for (auto& u : updates) submissions.push_back(std::move(u.submission));

    Rng server_rng = make_stream(cfg.seed, StreamPurpose::server, {round_key});
    AggregationContext ctx{state, fed.arch, fed.server_data, fed.total_samples(), cfg.divisor, server_rng};
    AggregationResult agg;
    try {
        agg = aggregator.aggregate(ctx, submissions);
    } catch (const std::exception& e) {
        throw std::runtime_error("round " + std::to_string(state.round + 1) + ", aggregator " +
                                 aggregator.name() + ": " + e.what());
    }
    nn::check_model(agg.next, fed.arch);

    GlobalState next;
    next.round = state.round + 1;
    next.previous = state.current;
    next.current = std::move(agg.next);
    next.history = state.history;

    RoundMetrics m;
    m.round = next.round;
    m.aggregator = aggregator.name();
    m.malicious_sampled = malicious_count;
    m.sampled = sampled;
    m.diagnostics = std::move(agg.diagnostics);
    Rng eval_rng = make_stream(cfg.seed, StreamPurpose::evaluation, {round_key});
    m.acc = evaluate_acc(next.current, fed.arch, fed.test_set, aggregator, eval_rng);
    const data::Trigger trig = adversary ? adversary->evaluation_trigger() : fed.default_trigger;
    m.asr = evaluate_asr(next.current, fed.arch, fed.test_set, trig, aggregator, eval_rng);
    for (auto& [k, v] : aggregator.take_evaluation_diagnostics()) m.diagnostics[k] = std::move(v);
    next.history.push_back(std::move(m));
    return next;
}

}  // namespace flipfl::fl
