#include "flipfl/attack.hpp"

#include "flipfl/errors.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace flipfl::attack {

std::string to_string(Criterion c) {
    return c == Criterion::directional ? "directional" : "directionless";
}

Criterion criterion_from_string(const std::string& name) {
    if (name == "directional") return Criterion::directional;
    if (name == "directionless") return Criterion::directionless;
    throw ConfigError("unknown importance criterion '" + name + "'");
}

void AttackConfig::validate() const {
    if (!(s_conv > 0 && s_conv <= 1) || !(s_dense > 0 && s_dense <= 1))
        throw ConfigError("candidate fractions must lie in (0, 1]");
    if (lambda < 0 || alpha < 0) throw ConfigError("lambda and alpha must be non-negative");
    if (trigger_iters < 0) throw ConfigError("trigger_iters must be >= 0");
    if (!(trigger_lr > 0)) throw ConfigError("trigger_lr must be > 0");
    if (trigger_batch_size < 1 || validation_batch_size < 1) throw ConfigError("attack batch sizes must be >= 1");
    if (!(gamma >= 1)) throw ConfigError("gamma must be >= 1");
    if (local_lr < 0) throw ConfigError("attack local_lr must be non-negative");
}

LayerTensors importance_scores(const nn::ModelParams& current, const nn::ModelParams& previous, Criterion c) {
    if (current.num_layers() != previous.num_layers())
        throw DimensionError("importance_scores: models have different layer counts");
    LayerTensors out;
    out.reserve(current.num_layers());
    for (std::size_t j = 0; j < current.num_layers(); ++j) {
        const Tensor& w = current.layers[j].weight;
        const Tensor& w_prev = previous.layers[j].weight;
        require_same_shape(w, w_prev, "importance_scores");
        Vector s = (w.data() - w_prev.data()).cwiseProduct(w.data());
        if (c == Criterion::directionless) s = s.cwiseAbs();
        out.emplace_back(w.shape(), std::move(s));
    }
    return out;
}

LayerTensors random_scores(const nn::ModelParams& model, Rng& rng) {
    std::uniform_real_distribution<Real> u(-1.0, 1.0);
    LayerTensors out;
    out.reserve(model.num_layers());
    for (const auto& l : model.layers) {
        Tensor t(l.weight.shape());
        for (Index i = 0; i < t.size(); ++i) t[i] = u(rng);
        out.push_back(std::move(t));
    }
    return out;
}

Index candidate_count(Index size, Real s) {
    if (!(s > 0 && s <= 1)) throw ConfigError("candidate fraction must lie in (0, 1]");
    const auto k = static_cast<Index>(std::llround(s * static_cast<Real>(size)));
    return std::clamp<Index>(k, 1, size);
}

Tensor select_candidates(const Tensor& scores, Real s) {
    const Index n = scores.size();
    Tensor mask(scores.shape());
    if (n == 0) return mask;
    const Index k = candidate_count(n, s);
    std::vector<Index> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), Index{0});
    std::nth_element(order.begin(), order.begin() + (k - 1), order.end(), [&](Index a, Index b) {
        return scores[a] < scores[b] || (scores[a] == scores[b] && a < b);
    });
    for (Index i = 0; i < k; ++i) mask[order[static_cast<std::size_t>(i)]] = 1.0;
    return mask;
}

LayerTensors select_candidates(const LayerTensors& scores, const nn::Architecture& arch, Real s_conv,
                               Real s_dense) {
    if (scores.size() != arch.size()) throw DimensionError("select_candidates: one score tensor per layer required");
    LayerTensors out;
    out.reserve(scores.size());
    for (std::size_t j = 0; j < scores.size(); ++j)
        out.push_back(select_candidates(scores[j], arch[j].kind == nn::LayerKind::conv2d ? s_conv : s_dense));
    return out;
}

Tensor focused_flip(const Tensor& w, const Tensor& mask, const Tensor& sign_source) {
    require_same_shape(w, mask, "focused_flip (mask)");
    require_same_shape(w, sign_source, "focused_flip (sign source)");
    Tensor out = w;
    for (Index i = 0; i < w.size(); ++i) {
        if (mask[i] == 0.0) continue;
        const Real sg = sign_of(sign_source[i]);
        if (sg != 0.0) out[i] = sg * std::abs(w[i]);
    }
    return out;
}

namespace {

// Repeat a per-input block once per output unit / filter.
Tensor repeat_rows(const Shape& weight_shape, const Vector& block) {
    Tensor out(weight_shape);
    const Index rows = weight_shape.front();
    if (rows * block.size() != out.size()) throw DimensionError("sign source does not match weight shape");
    for (Index r = 0; r < rows; ++r) out.data().segment(r * block.size(), block.size()) = block;
    return out;
}

bool finite(const Vector& v) { return v.allFinite(); }

}  // namespace

Tensor expand_to_weight(const nn::LayerSpec& spec, const Vector& delta) {
    if (delta.size() != spec.input_size())
        throw DimensionError("difference vector of size " + std::to_string(delta.size()) +
                             " does not match layer input size " + std::to_string(spec.input_size()));
    if (spec.kind == nn::LayerKind::dense) return repeat_rows(spec.weight_shape(), delta);
    const Tensor map({spec.in_channels, spec.in_height, spec.in_width}, delta);
    return repeat_rows(spec.weight_shape(), data::resize_trigger(map, spec.kernel_h, spec.kernel_w).data());
}

Tensor first_layer_sign_source(const nn::LayerSpec& spec, const data::Trigger& trig, const RowMatrix& batch) {
    if (spec.kind == nn::LayerKind::dense) {
        if (batch.rows() == 0) throw PreconditionError("dense first-layer flip needs a non-empty batch");
        const RowMatrix shifted = data::triggered_copy(batch, trig);
        const Vector mean = (shifted - batch).colwise().mean().transpose();
        return expand_to_weight(spec, mean);
    }
    const auto box = trig.bounding_box();
    if (box.height == 0 || box.width == 0) return Tensor(spec.weight_shape());
    const Tensor patch = trig.patch();
    if (patch.dim(0) != spec.in_channels) throw DimensionError("trigger channels do not match the first layer");
    return repeat_rows(spec.weight_shape(), data::resize_trigger(patch, spec.kernel_h, spec.kernel_w).data());
}

Vector activation_difference(const nn::ModelParams& model, const nn::Architecture& arch, std::size_t layer,
                             const RowMatrix& x_v, const data::Trigger& trig) {
    if (layer >= arch.size()) throw PreconditionError("activation_difference: layer out of range");
    if (x_v.rows() == 0) throw PreconditionError("activation_difference: empty validation batch");
    const auto clean = nn::forward_with_trace(model, arch, x_v);
    const auto trig_fr = nn::forward_with_trace(model, arch, data::triggered_copy(x_v, trig));
    return (trig_fr.trace.layers[layer].post - clean.trace.layers[layer].post).colwise().mean().transpose();
}

TriggerLoss trigger_loss_and_grad(const nn::LayerParams& first, const nn::LayerSpec& spec, const RowMatrix& x,
                                  const data::Trigger& trig) {
    if (x.rows() == 0) throw PreconditionError("trigger loss needs a non-empty batch");
    const RowMatrix xt = data::triggered_copy(x, trig);
    const RowMatrix z = nn::layer_forward(first, spec, x);
    const RowMatrix zt = nn::layer_forward(first, spec, xt);
    const RowMatrix diff = nn::activate(z, spec.activation) - nn::activate(zt, spec.activation);
    const Real n = static_cast<Real>(x.rows());

    TriggerLoss out;
    out.value = diff.squaredNorm() / n;
    RowMatrix dat = -2.0 * diff / n;
    if (spec.activation == nn::Activation::relu) dat = dat.cwiseProduct((zt.array() > 0.0).cast<Real>().matrix());
    const RowMatrix dx = nn::layer_backward(first, spec, xt, dat, true).input;
    const Vector col = dx.colwise().sum().transpose();

    const data::ImageDims d = trig.dims();
    const Index plane = d.height * d.width;
    out.grad = Tensor(trig.pattern.shape());
    for (Index c = 0; c < d.channels; ++c)
        for (Index p = 0; p < plane; ++p) out.grad[c * plane + p] = col[c * plane + p] * trig.mask[p];
    return out;
}

std::vector<Index> sample_batch(Index n, int k, Rng& rng) {
    std::vector<Index> all(static_cast<std::size_t>(n));
    std::iota(all.begin(), all.end(), Index{0});
    if (k >= n) return all;
    std::vector<Index> pick;
    std::sample(all.begin(), all.end(), std::back_inserter(pick), k, rng);
    return pick;
}

TriggerOptResult optimize_trigger(const nn::LayerParams& first, const nn::LayerSpec& spec, const Tensor& mask,
                                  const data::Trigger& init, const data::Dataset& data, const AttackConfig& cfg,
                                  Rng& rng) {
    if (cfg.trigger_iters < 0) throw ConfigError("trigger_iters must be >= 0");
    if (data.empty()) throw PreconditionError("trigger optimization needs attacker data");
    init.validate();
    TriggerOptResult r;
    r.first = first;
    r.trigger = init;
    for (int p = 0; p < cfg.trigger_iters; ++p) {
        const RowMatrix batch = data::gather_rows(data, sample_batch(data.size(), cfg.trigger_batch_size, rng));
        r.first.weight = focused_flip(r.first.weight, mask, first_layer_sign_source(spec, r.trigger, batch));
        auto loss = trigger_loss_and_grad(r.first, spec, batch, r.trigger);
        if (!std::isfinite(loss.value) || !finite(loss.grad.data()))
            throw NumericError("trigger optimization: non-finite gradient at iteration " + std::to_string(p), 0);
        r.losses.push_back(loss.value);
        r.trigger.pattern.data() = (r.trigger.pattern.data() + cfg.trigger_lr * loss.grad.data()).cwiseMax(0.0).cwiseMin(1.0);
    }
    const RowMatrix batch = data::gather_rows(data, sample_batch(data.size(), cfg.trigger_batch_size, rng));
    r.first.weight = focused_flip(r.first.weight, mask, first_layer_sign_source(spec, r.trigger, batch));
    return r;
}

namespace {

Rng attack_stream(std::uint64_t seed, StreamPurpose purpose, int round, int client_id) {
    return make_stream(seed, purpose, {static_cast<std::uint64_t>(round), static_cast<std::uint64_t>(client_id)});
}

// K steps of the composite loss on the same minibatch schedule benign clients use.
nn::ModelParams backdoor_training(nn::ModelParams model, const nn::ModelParams& anchor, const fl::ClientData& client,
                                  const nn::Architecture& arch, const fl::RoundConfig& round_cfg,
                                  const AttackConfig& cfg, const data::Trigger& trigger, int round) {
    const int steps = cfg.local_steps > 0 ? cfg.local_steps : round_cfg.local_steps;
    const Real lr = cfg.local_lr > 0 ? cfg.local_lr : round_cfg.local_lr;
    Rng rng = fl::local_training_stream(round_cfg.seed, round, client.id);
    for (const auto& idx : fl::local_batches(client.data.size(), steps, round_cfg.batch_size, rng)) {
        const RowMatrix x = data::gather_rows(client.data, idx);
        const auto y = data::gather_labels(client.data, idx);
        nn::LossSpec loss;
        loss.kind = nn::LossKind::backdoor_composite;
        loss.lambda = cfg.lambda;
        loss.alpha = cfg.alpha;
        loss.target_label = trigger.target_label;
        if (cfg.lambda > 0) loss.triggered_batch = data::triggered_copy(x, trigger);
        if (cfg.alpha > 0) loss.anchor = anchor;
        auto r = nn::loss_and_grad(model, arch, x, y, loss);
        model = nn::sgd_step(model, r.grads, lr);
    }
    return model;
}

fl::ClientUpdate make_update(const fl::ClientData& client, nn::ModelParams proposed) {
    fl::ClientUpdate u;
    u.submission.client_id = client.id;
    u.submission.num_samples = client.data.size();
    u.submission.proposed = std::move(proposed);
    u.is_malicious = true;
    return u;
}

}  // namespace

AttackResult f3ba_update(const nn::ModelParams& global, const nn::ModelParams* previous,
                         const fl::ClientData& client, const nn::Architecture& arch, const fl::RoundConfig& round_cfg,
                         const AttackConfig& cfg, const data::Trigger& trigger, int round) {
    cfg.validate();
    nn::check_model(global, arch);
    if (client.data.empty()) throw PreconditionError("malicious client has no data");

    AttackResult r;
    r.trigger = trigger;
    nn::ModelParams model = global;

    if (cfg.enable_flip || cfg.enable_trigger_opt) {
        LayerTensors scores;
        if (previous != nullptr) {
            scores = importance_scores(global, *previous, cfg.criterion);
        } else {
            Rng score_rng = attack_stream(round_cfg.seed, StreamPurpose::attack_scores, round, client.id);
            scores = random_scores(global, score_rng);
        }
        r.masks = select_candidates(scores, arch, cfg.s_conv, cfg.s_dense);

        Rng val_rng = attack_stream(round_cfg.seed, StreamPurpose::attack_validation, round, client.id);
        const RowMatrix x_v =
            data::gather_rows(client.data, sample_batch(client.data.size(), cfg.validation_batch_size, val_rng));

        if (cfg.enable_trigger_opt) {
            Rng trig_rng = attack_stream(round_cfg.seed, StreamPurpose::attack_trigger, round, client.id);
            auto opt = optimize_trigger(model.layers[0], arch[0], r.masks[0], r.trigger, client.data, cfg, trig_rng);
            r.trigger = std::move(opt.trigger);
            if (cfg.enable_flip) model.layers[0] = std::move(opt.first);
        } else {
            model.layers[0].weight = flip_first_layer(model.layers[0].weight, r.masks[0],
                                                      first_layer_sign_source(arch[0], r.trigger, x_v));
        }
        if (cfg.enable_flip) {
            for (std::size_t j = 1; j < arch.size(); ++j) {
                const Vector delta = activation_difference(model, arch, j - 1, x_v, r.trigger);
                model.layers[j].weight =
                    flip_subsequent_layer(model.layers[j].weight, r.masks[j], expand_to_weight(arch[j], delta));
            }
        }
    }
    r.flipped = model;
    r.update = make_update(client, backdoor_training(std::move(model), global, client, arch, round_cfg, cfg,
                                                     r.trigger, round));
    return r;
}

fl::ClientUpdate baseline_rescale_update(const nn::ModelParams& global, const fl::ClientData& client,
                                         const nn::Architecture& arch, const fl::RoundConfig& round_cfg,
                                         const AttackConfig& cfg, const data::Trigger& trigger, int round) {
    cfg.validate();
    if (client.data.empty()) throw PreconditionError("malicious client has no data");
    const nn::ModelParams trained = backdoor_training(global, global, client, arch, round_cfg, cfg, trigger, round);
    if (cfg.gamma == 1.0) return make_update(client, trained);
    nn::ModelParams proposed = global;
    nn::axpy(proposed, cfg.gamma, trained - global);
    return make_update(client, std::move(proposed));
}

FocusedFlipAttacker::FocusedFlipAttacker(AttackConfig cfg, data::Trigger initial)
    : cfg_(cfg), initial_(std::move(initial)) {
    cfg_.validate();
    initial_.validate();
}

std::string FocusedFlipAttacker::name() const {
    if (!cfg_.enable_flip && !cfg_.enable_trigger_opt) return "train_only";
    return cfg_.enable_trigger_opt ? "f3ba_trigopt" : "f3ba";
}

fl::ClientUpdate FocusedFlipAttacker::propose(int round, const nn::ModelParams& global, const fl::ClientData& client,
                                              const nn::Architecture& arch, const fl::RoundConfig& cfg) {
    auto it = memory_.find(client.id);
    if (it == memory_.end()) it = memory_.emplace(client.id, Memory{std::nullopt, initial_}).first;
    Memory& mem = it->second;
    const nn::ModelParams* prev = mem.last_global ? &*mem.last_global : nullptr;
    AttackResult r = f3ba_update(global, prev, client, arch, cfg, cfg_, mem.trigger, round);
    mem.last_global = global;
    mem.trigger = r.trigger;
    log_.push_back({round, client.id, r.trigger});
    return std::move(r.update);
}

data::Trigger FocusedFlipAttacker::evaluation_trigger() const {
    if (memory_.empty()) return initial_;
    std::vector<data::Trigger> latest;
    latest.reserve(memory_.size());
    for (const auto& [id, mem] : memory_) latest.push_back(mem.trigger);
    return data::average_triggers(latest);
}

RescaleAttacker::RescaleAttacker(AttackConfig cfg, data::Trigger trigger) : cfg_(cfg), trigger_(std::move(trigger)) {
    cfg_.validate();
    trigger_.validate();
}

fl::ClientUpdate RescaleAttacker::propose(int round, const nn::ModelParams& global, const fl::ClientData& client,
                                          const nn::Architecture& arch, const fl::RoundConfig& cfg) {
    return baseline_rescale_update(global, client, arch, cfg, cfg_, trigger_, round);
}

}  // namespace flipfl::attack
