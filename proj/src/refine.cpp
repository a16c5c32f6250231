#include "flipfl/refine.hpp"

#include "flipfl/errors.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace flipfl::refine {

namespace {

std::string fmt(Real v) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    return os.str();
}

std::vector<const fl::SubmittedUpdate*> sorted_by_client(std::span<const fl::SubmittedUpdate> updates) {
    std::vector<const fl::SubmittedUpdate*> out;
    for (const auto& u : updates) out.push_back(&u);
    std::stable_sort(out.begin(), out.end(), [](auto* a, auto* b) { return a->client_id < b->client_id; });
    return out;
}

std::vector<nn::ModelParams> models_of(const std::vector<const fl::SubmittedUpdate*>& ups) {
    std::vector<nn::ModelParams> out;
    out.reserve(ups.size());
    for (auto* u : ups) out.push_back(u->proposed);
    return out;
}

std::vector<fl::SubmittedUpdate> copies_of(const std::vector<const fl::SubmittedUpdate*>& ups) {
    std::vector<fl::SubmittedUpdate> out;
    out.reserve(ups.size());
    for (auto* u : ups) out.push_back(*u);
    return out;
}

}  // namespace

RowMatrix ensemble_logits(std::span<const nn::ModelParams> models, const nn::Architecture& arch, const RowMatrix& x) {
    if (models.empty()) throw PreconditionError("ensemble_logits needs at least one model");
    RowMatrix sum = nn::forward(models[0], arch, x);
    for (std::size_t i = 1; i < models.size(); ++i) sum += nn::forward(models[i], arch, x);
    return sum / static_cast<Real>(models.size());
}

RowMatrix median_logits(std::span<const nn::ModelParams> models, const nn::Architecture& arch, const RowMatrix& x) {
    if (models.empty()) throw PreconditionError("median_logits needs at least one model");
    std::vector<RowMatrix> logits;
    for (const auto& m : models) logits.push_back(nn::forward(m, arch, x));
    RowMatrix out(logits[0].rows(), logits[0].cols());
    std::vector<Real> column(models.size());
    for (Index i = 0; i < out.rows(); ++i)
        for (Index c = 0; c < out.cols(); ++c) {
            for (std::size_t k = 0; k < models.size(); ++k) column[k] = logits[k](i, c);
            std::sort(column.begin(), column.end());
            out(i, c) = column[(column.size() - 1) / 2];
        }
    return out;
}

void DistillConfig::validate() const {
    if (steps < 1) throw ConfigError("distillation steps must be >= 1");
    if (lr < 0) throw ConfigError("distillation lr must be non-negative");
    if (!(temperature > 0)) throw ConfigError("distillation temperature must be > 0");
}

nn::ModelParams distill(const nn::ModelParams& student, const nn::Architecture& arch, const RowMatrix& x,
                        const RowMatrix& teacher_logits, const DistillConfig& cfg) {
    cfg.validate();
    if (x.rows() == 0) throw PreconditionError("distillation needs a non-empty server set");
    const auto loss = nn::LossSpec::distill(teacher_logits, cfg.temperature);
    nn::ModelParams model = student;
    for (int step = 0; step < cfg.steps; ++step) {
        nn::LossResult r;
        try {
            r = nn::loss_and_grad(model, arch, x, {}, loss);
        } catch (const NumericError& e) {
            throw NumericError("distillation step " + std::to_string(step) + ": " + e.what(), e.layer());
        }
        model = nn::sgd_step(model, r.grads, cfg.lr);
    }
    return model;
}

nn::ModelParams feddf_distill(const nn::ModelParams& fedavg_model, std::span<const nn::ModelParams> client_models,
                              const nn::Architecture& arch, const RowMatrix& x_unlabeled, const DistillConfig& cfg) {
    return distill(fedavg_model, arch, x_unlabeled, ensemble_logits(client_models, arch, x_unlabeled), cfg);
}

FedDFAggregator::FedDFAggregator(DistillConfig cfg) : cfg_(cfg) { cfg_.validate(); }

fl::AggregationResult FedDFAggregator::aggregate(fl::AggregationContext& ctx,
                                                 std::span<const fl::SubmittedUpdate> updates) {
    const auto ups = sorted_by_client(updates);
    const auto models = models_of(ups);
    const nn::ModelParams avg = fl::fedavg_aggregate(ctx.state.current, copies_of(ups), ctx.divisor, ctx.total_samples);
    const RowMatrix x(ctx.server_data.rows());
    return {feddf_distill(avg, models, ctx.arch, x, cfg_), {}};
}

FedRadScores fedrad_scores(std::span<const nn::ModelParams> models, const nn::Architecture& arch, const RowMatrix& x) {
    if (models.empty()) throw PreconditionError("fedrad needs at least one model");
    if (x.rows() == 0) throw PreconditionError("fedrad needs at least one server sample");
    std::vector<RowMatrix> logits;
    for (const auto& m : models) logits.push_back(nn::forward(m, arch, x));
    const RowMatrix med = median_logits(models, arch, x);
    FedRadScores s;
    s.raw.assign(models.size(), 0.0);
    for (std::size_t k = 0; k < models.size(); ++k)
        s.raw[k] = static_cast<Real>((logits[k].array() == med.array()).count());
    const Real total = std::accumulate(s.raw.begin(), s.raw.end(), Real{0});
    if (total > 0) {
        for (Real v : s.raw) s.weights.push_back(v / total);
    } else {
        s.uniform_fallback = true;
        s.weights.assign(models.size(), 1.0 / static_cast<Real>(models.size()));
    }
    return s;
}

FedRADAggregator::FedRADAggregator(DistillConfig cfg) : cfg_(cfg) { cfg_.validate(); }

fl::AggregationResult FedRADAggregator::aggregate(fl::AggregationContext& ctx,
                                                  std::span<const fl::SubmittedUpdate> updates) {
    const auto ups = sorted_by_client(updates);
    const auto models = models_of(ups);
    const RowMatrix x(ctx.server_data.rows());
    FedRadScores s = fedrad_scores(models, ctx.arch, x);
    std::vector<Real> w;
    for (std::size_t k = 0; k < ups.size(); ++k) w.push_back(static_cast<Real>(ups[k]->num_samples) * s.weights[k]);
    if (std::accumulate(w.begin(), w.end(), Real{0}) <= 0) {
        s.uniform_fallback = true;
        for (std::size_t k = 0; k < ups.size(); ++k) w[k] = static_cast<Real>(ups[k]->num_samples);
    }
    const nn::ModelParams agg = fl::weighted_aggregate(ctx.state.current, copies_of(ups), w);

    fl::AggregationResult out;
    out.next = distill(agg, ctx.arch, x, median_logits(models, ctx.arch, x), cfg_);
    out.diagnostics["fedrad_uniform"] = s.uniform_fallback ? "1" : "0";
    std::ostringstream os;
    for (std::size_t k = 0; k < ups.size(); ++k) os << (k ? ";" : "") << ups[k]->client_id << ':' << fmt(s.weights[k]);
    out.diagnostics["fedrad_weights"] = os.str();
    return out;
}

// ---- FedMV ----------------------------------------------------------------------------

void FedMVConfig::validate() const {
    if (!(prune_fraction >= 0 && prune_fraction < 1)) throw ConfigError("fedmv prune_fraction must lie in [0, 1)");
    if (erase_period < 0) throw ConfigError("fedmv erase_period must be >= 0");
    if (!(erase_z > 0)) throw ConfigError("fedmv erase_z must be > 0");
}

std::size_t last_conv_layer(const nn::Architecture& arch) {
    for (std::size_t j = arch.size(); j-- > 0;)
        if (arch[j].kind == nn::LayerKind::conv2d) return j;
    throw ConfigError("filter pruning defense needs a conv layer");
}

std::vector<Real> filter_activations(const nn::ModelParams& model, const nn::Architecture& arch, const RowMatrix& x) {
    const std::size_t layer = last_conv_layer(arch);
    if (x.rows() == 0) throw PreconditionError("filter ranking needs at least one sample");
    const auto fr = nn::forward_with_trace(model, arch, x);
    const RowMatrix& post = fr.trace.layers[layer].post;
    const nn::LayerSpec& spec = arch[layer];
    const Index plane = spec.out_height() * spec.out_width();
    std::vector<Real> act(static_cast<std::size_t>(spec.out_channels));
    for (Index f = 0; f < spec.out_channels; ++f)
        act[static_cast<std::size_t>(f)] = post.middleCols(f * plane, plane).cwiseAbs().mean();
    return act;
}

std::vector<Real> activation_ranks(std::span<const Real> activations) {
    std::vector<std::size_t> order(activations.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return activations[a] < activations[b]; });
    std::vector<Real> ranks(activations.size());
    for (std::size_t r = 0; r < order.size(); ++r) ranks[order[r]] = static_cast<Real>(r);
    return ranks;
}

std::vector<Real> fedmv_rank_filters(const nn::ModelParams& model, const nn::Architecture& arch, const RowMatrix& x) {
    return activation_ranks(filter_activations(model, arch, x));
}

std::vector<Index> filters_to_prune(std::span<const Real> avg_ranks, Real fraction, bool largest) {
    const auto p = static_cast<Index>(avg_ranks.size());
    const auto k = std::min<Index>(p, static_cast<Index>(std::llround(fraction * static_cast<Real>(p))));
    std::vector<Index> order(static_cast<std::size_t>(p));
    std::iota(order.begin(), order.end(), Index{0});
    std::stable_sort(order.begin(), order.end(), [&](Index a, Index b) {
        return largest ? avg_ranks[a] > avg_ranks[b] : avg_ranks[a] < avg_ranks[b];
    });
    std::vector<Index> out(order.begin(), order.begin() + k);
    std::sort(out.begin(), out.end());
    return out;
}

nn::ModelParams prune_filters(const nn::ModelParams& model, std::size_t layer, std::span<const Index> filters) {
    nn::ModelParams out = model;
    auto& l = out.layers.at(layer);
    const Index per_filter = l.weight.size() / l.weight.dim(0);
    for (Index f : filters) {
        if (f < 0 || f >= l.weight.dim(0)) throw DimensionError("prune_filters: filter index out of range");
        l.weight.data().segment(f * per_filter, per_filter).setZero();
        l.bias[f] = 0.0;
    }
    return out;
}

nn::ModelParams erase_outliers(const nn::ModelParams& model, Real z) {
    const Vector flat = nn::flatten(model);
    if (flat.size() == 0) return model;
    const Real mean = flat.mean();
    const Real sd = std::sqrt((flat.array() - mean).square().mean());
    nn::ModelParams out = model;
    for (auto& l : out.layers) {
        for (Tensor* t : {&l.weight, &l.bias})
            for (Index i = 0; i < t->size(); ++i)
                if (std::abs((*t)[i] - mean) > z * sd) (*t)[i] = 0.0;
    }
    return out;
}

FedMVAggregator::FedMVAggregator(FedMVConfig cfg) : cfg_(cfg) { cfg_.validate(); }

std::vector<Real> FedMVAggregator::client_report(const nn::ModelParams& proposed, const nn::Architecture& arch,
                                                 const data::Dataset& client_data) const {
    return fedmv_rank_filters(proposed, arch, RowMatrix(client_data.rows()));
}

fl::AggregationResult FedMVAggregator::aggregate(fl::AggregationContext& ctx,
                                                 std::span<const fl::SubmittedUpdate> updates) {
    const auto ups = sorted_by_client(updates);
    const std::size_t layer = last_conv_layer(ctx.arch);
    const auto p = static_cast<std::size_t>(ctx.arch[layer].out_channels);
    std::vector<Real> avg(p, 0.0);
    for (auto* u : ups) {
        if (u->report.size() != p) throw DimensionError("fedmv: client ranking has the wrong number of filters");
        for (std::size_t f = 0; f < p; ++f) avg[f] += u->report[f];
    }
    for (auto& v : avg) v /= static_cast<Real>(ups.size());

    nn::ModelParams next = fl::fedavg_aggregate(ctx.state.current, copies_of(ups), ctx.divisor, ctx.total_samples);
    const auto pruned = filters_to_prune(avg, cfg_.prune_fraction, cfg_.prune_largest);
    next = prune_filters(next, layer, pruned);
    const int round = ctx.state.round + 1;
    const bool erase = cfg_.erase_period > 0 && round % cfg_.erase_period == 0;
    if (erase) next = erase_outliers(next, cfg_.erase_z);

    fl::AggregationResult out;
    out.next = std::move(next);
    std::ostringstream os;
    for (std::size_t i = 0; i < pruned.size(); ++i) os << (i ? ";" : "") << pruned[i];
    out.diagnostics["fedmv_pruned"] = os.str();
    out.diagnostics["fedmv_erased"] = erase ? "1" : "0";
    return out;
}

// ---- CRFL -----------------------------------------------------------------------------

void CRFLConfig::validate() const {
    if (!(rho > 0)) throw ConfigError("crfl rho must be > 0");
    if (sigma_train < 0) throw ConfigError("crfl sigma_train must be >= 0");
    if (votes < 1) throw ConfigError("crfl votes must be >= 1");
}

nn::ModelParams crfl_clip_noise(const nn::ModelParams& model, Real rho, Real sigma, Rng& rng) {
    if (!(rho > 0)) throw ConfigError("crfl rho must be > 0");
    if (sigma < 0) throw ConfigError("crfl sigma must be >= 0");
    const Real norm = std::sqrt(nn::squared_norm(model));
    const Real scale = std::max<Real>(1.0, norm / rho);
    nn::ModelParams out = model;
    if (scale != 1.0) out = (1.0 / scale) * model;
    if (sigma > 0) {
        std::normal_distribution<Real> n(0.0, sigma);
        for (auto& l : out.layers)
            for (Tensor* t : {&l.weight, &l.bias})
                for (Index i = 0; i < t->size(); ++i) (*t)[i] += n(rng);
    }
    return out;
}

VoteResult crfl_vote(const nn::ModelParams& model, const nn::Architecture& arch, const RowMatrix& x, Real sigma,
                     int votes, Rng& rng) {
    if (votes < 1) throw ConfigError("crfl votes must be >= 1");
    if (sigma < 0) throw ConfigError("crfl sigma must be >= 0");
    const Index n = x.rows();
    const Index classes = arch.back().output_size();
    VoteResult r;
    r.tallies.assign(static_cast<std::size_t>(n), std::vector<int>(static_cast<std::size_t>(classes), 0));
    std::normal_distribution<Real> normal(0.0, sigma);
    for (int v = 0; v < votes; ++v) {
        nn::ModelParams noisy = model;
        if (sigma > 0)
            for (auto& l : noisy.layers)
                for (Tensor* t : {&l.weight, &l.bias})
                    for (Index i = 0; i < t->size(); ++i) (*t)[i] += normal(rng);
        const auto pred = nn::argmax_rows(nn::forward(noisy, arch, x));
        for (Index i = 0; i < n; ++i) ++r.tallies[static_cast<std::size_t>(i)][static_cast<std::size_t>(pred[i])];
    }
    r.labels.reserve(static_cast<std::size_t>(n));
    for (const auto& t : r.tallies)
        r.labels.push_back(static_cast<int>(std::max_element(t.begin(), t.end()) - t.begin()));
    return r;
}

CRFLAggregator::CRFLAggregator(CRFLConfig cfg) : cfg_(cfg) { cfg_.validate(); }

fl::AggregationResult CRFLAggregator::aggregate(fl::AggregationContext& ctx,
                                                std::span<const fl::SubmittedUpdate> updates) {
    const auto ups = sorted_by_client(updates);
    const nn::ModelParams avg = fl::fedavg_aggregate(ctx.state.current, copies_of(ups), ctx.divisor, ctx.total_samples);
    const Real norm = std::sqrt(nn::squared_norm(avg));
    fl::AggregationResult out;
    out.next = crfl_clip_noise(avg, cfg_.rho, cfg_.sigma_train, ctx.rng);
    out.diagnostics["crfl_clip_scale"] = fmt(std::max<Real>(1.0, norm / cfg_.rho));
    return out;
}

std::vector<int> CRFLAggregator::predict(const nn::ModelParams& model, const nn::Architecture& arch,
                                         const RowMatrix& x, Rng& rng) const {
    auto r = crfl_vote(model, arch, x, cfg_.test_sigma(), cfg_.votes, rng);
    std::vector<long> totals(r.tallies.empty() ? 0 : r.tallies.front().size(), 0);
    for (const auto& t : r.tallies)
        for (std::size_t c = 0; c < t.size(); ++c) totals[c] += t[c];
    tallies_.push_back(std::move(totals));
    return r.labels;
}

fl::Diagnostics CRFLAggregator::take_evaluation_diagnostics() {
    fl::Diagnostics d;
    for (std::size_t k = 0; k < tallies_.size(); ++k) {
        std::ostringstream os;
        for (std::size_t c = 0; c < tallies_[k].size(); ++c) os << (c ? ";" : "") << tallies_[k][c];
        d["crfl_tally_" + std::to_string(k)] = os.str();
    }
    tallies_.clear();
    return d;
}

}  // namespace flipfl::refine
