#include "flipfl/robust.hpp"

#include "flipfl/errors.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <sstream>

namespace flipfl::robust {

std::vector<std::size_t> client_order(std::span<const fl::SubmittedUpdate> updates) {
    std::vector<std::size_t> order(updates.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return updates[a].client_id < updates[b].client_id; });
    return order;
}

RowMatrix update_matrix(const nn::ModelParams& global, std::span<const fl::SubmittedUpdate> updates,
                        std::span<const std::size_t> order) {
    const Vector g = nn::flatten(global);
    RowMatrix m(static_cast<Index>(order.size()), g.size());
    for (std::size_t r = 0; r < order.size(); ++r) {
        const Vector u = nn::flatten(updates[order[r]].proposed);
        if (u.size() != g.size()) throw DimensionError("update has a different parameter count than the global model");
        m.row(static_cast<Index>(r)) = (u - g).transpose();
    }
    return m;
}

namespace {

std::string join_ids(const std::vector<int>& ids) {
    std::ostringstream os;
    for (std::size_t i = 0; i < ids.size(); ++i) os << (i ? ";" : "") << ids[i];
    return os.str();
}

std::string fmt(Real v) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    return os.str();
}

// Same layout as `like`, filled from a flat vector.
nn::ModelParams with_values(const nn::ModelParams& like, const Vector& flat) {
    nn::ModelParams out = like;
    Index off = 0;
    for (auto& l : out.layers) {
        l.weight.data() = flat.segment(off, l.weight.size());
        off += l.weight.size();
        l.bias.data() = flat.segment(off, l.bias.size());
        off += l.bias.size();
    }
    return out;
}

}  // namespace

// ---- Bulyan ---------------------------------------------------------------------------

std::vector<Index> bulyan_select(const RowMatrix& updates, int f) {
    const Index n = updates.rows();
    const Index target = n - 2 * static_cast<Index>(f);
    if (target < 1) throw PreconditionError("bulyan: n - 2f must be positive");
    Matrix dist(n, n);
    for (Index i = 0; i < n; ++i)
        for (Index j = 0; j < n; ++j) dist(i, j) = (updates.row(i) - updates.row(j)).norm();

    std::vector<Index> remaining(static_cast<std::size_t>(n));
    std::iota(remaining.begin(), remaining.end(), Index{0});
    std::vector<Index> selected;
    while (static_cast<Index>(selected.size()) < target) {
        std::size_t best = 0;
        Real best_cost = 0;
        for (std::size_t a = 0; a < remaining.size(); ++a) {
            Real cost = 0;
            for (Index b : remaining) cost += dist(remaining[a], b);
            if (a == 0 || cost < best_cost) {
                best = a;
                best_cost = cost;
            }
        }
        selected.push_back(remaining[best]);
        remaining.erase(remaining.begin() + static_cast<std::ptrdiff_t>(best));
    }
    return selected;
}

Real bulyan_coordinate(std::span<const Real> values, int keep) {
    const std::size_t n = values.size();
    if (keep < 1 || static_cast<std::size_t>(keep) > n) throw PreconditionError("bulyan: invalid keep count");
    std::vector<Real> sorted(values.begin(), values.end());
    std::sort(sorted.begin(), sorted.end());
    const Real med = sorted[(n - 1) / 2];
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
        const Real da = std::abs(values[a] - med), db = std::abs(values[b] - med);
        if (da != db) return da < db;
        if (values[a] != values[b]) return values[a] < values[b];
        return a < b;
    });
    Real sum = 0;
    for (int k = 0; k < keep; ++k) sum += values[idx[static_cast<std::size_t>(k)]];
    return sum / keep;
}

BulyanResult bulyan(const RowMatrix& updates, int f) {
    const Index n = updates.rows();
    if (f < 0) throw ConfigError("bulyan: assumed_f must be >= 0");
    if (n < 4 * f + 3)
        throw PreconditionError("bulyan needs n >= 4f + 3, got n = " + std::to_string(n) + ", f = " + std::to_string(f));
    BulyanResult r;
    r.selected = bulyan_select(updates, f);
    const int keep = static_cast<int>(n - 4 * f);
    r.aggregate.resize(updates.cols());
    std::vector<Real> column(r.selected.size());
    for (Index k = 0; k < updates.cols(); ++k) {
        for (std::size_t s = 0; s < r.selected.size(); ++s) column[s] = updates(r.selected[s], k);
        r.aggregate[k] = bulyan_coordinate(column, keep);
    }
    return r;
}

fl::AggregationResult BulyanAggregator::aggregate(fl::AggregationContext& ctx,
                                                  std::span<const fl::SubmittedUpdate> updates) {
    const auto order = client_order(updates);
    const RowMatrix u = update_matrix(ctx.state.current, updates, order);
    const BulyanResult b = bulyan(u, cfg_.assumed_f);
    std::vector<int> ids;
    for (Index r : b.selected) ids.push_back(updates[order[static_cast<std::size_t>(r)]].client_id);
    std::sort(ids.begin(), ids.end());
    fl::AggregationResult out;
    out.next = with_values(ctx.state.current, nn::flatten(ctx.state.current) + b.aggregate);
    out.diagnostics["bulyan_selected"] = join_ids(ids);
    return out;
}

// ---- Robust LR ------------------------------------------------------------------------

Vector sign_agreement(const RowMatrix& updates) {
    Vector s = Vector::Zero(updates.cols());
    for (Index i = 0; i < updates.rows(); ++i)
        for (Index k = 0; k < updates.cols(); ++k) s[k] += sign_of(updates(i, k));
    return s.cwiseAbs();
}

Vector robust_lr_rates(const RowMatrix& updates, int beta, Real lr) {
    if (beta < 1) throw ConfigError("robust lr threshold beta must be >= 1");
    const Vector agree = sign_agreement(updates);
    Vector rates(agree.size());
    for (Index k = 0; k < agree.size(); ++k) rates[k] = agree[k] >= beta ? lr : -lr;
    return rates;
}

Real reversed_coordinate_fraction(const RowMatrix& updates, int beta) {
    if (updates.rows() < 1) throw PreconditionError("reversed_coordinate_fraction needs at least one update");
    if (updates.cols() == 0) return 0.0;
    const Vector agree = sign_agreement(updates);
    Index reversed = 0;
    for (Index k = 0; k < agree.size(); ++k) reversed += agree[k] < beta;
    return static_cast<Real>(reversed) / static_cast<Real>(agree.size());
}

RobustLRResult robust_lr_aggregate(const nn::ModelParams& global, std::span<const fl::SubmittedUpdate> updates,
                                   const RobustLRConfig& cfg, fl::FedAvgDivisor divisor, Index total_samples) {
    if (updates.empty()) throw ConfigError("robust lr needs at least one update");
    if (cfg.beta < 1) throw ConfigError("robust lr threshold beta must be >= 1");
    if (static_cast<std::size_t>(cfg.beta) > updates.size())
        throw PreconditionError("robust lr needs beta <= n, got beta = " + std::to_string(cfg.beta) +
                                ", n = " + std::to_string(updates.size()));
    const auto order = client_order(updates);
    std::vector<fl::SubmittedUpdate> sorted;
    sorted.reserve(order.size());
    for (auto i : order) sorted.push_back(updates[i]);
    const RowMatrix u = update_matrix(global, updates, order);
    const Vector g = nn::flatten(global);
    const Vector mean_update = nn::flatten(fl::fedavg_aggregate(global, sorted, divisor, total_samples)) - g;
    const Vector rates = robust_lr_rates(u, cfg.beta, cfg.server_lr);

    RobustLRResult r;
    r.next = with_values(global, g + rates.cwiseProduct(mean_update));
    r.reversed_fraction = reversed_coordinate_fraction(u, cfg.beta);
    return r;
}

fl::AggregationResult RobustLRAggregator::aggregate(fl::AggregationContext& ctx,
                                                    std::span<const fl::SubmittedUpdate> updates) {
    auto r = robust_lr_aggregate(ctx.state.current, updates, cfg_, ctx.divisor, ctx.total_samples);
    fl::AggregationResult out;
    out.next = std::move(r.next);
    out.diagnostics["reversed_fraction"] = fmt(r.reversed_fraction);
    return out;
}

// ---- DBSCAN ---------------------------------------------------------------------------

std::vector<int> dbscan(const Matrix& dist, Real eps, int min_pts) {
    if (!(eps > 0)) throw ConfigError("dbscan eps must be > 0");
    if (min_pts < 1) throw ConfigError("dbscan min_pts must be >= 1");
    if (dist.rows() != dist.cols()) throw DimensionError("dbscan needs a square distance matrix");
    const Index n = dist.rows();
    auto neighbours = [&](Index i) {
        std::vector<Index> out;
        for (Index j = 0; j < n; ++j)
            if (dist(i, j) <= eps) out.push_back(j);
        return out;
    };
    constexpr int kUnvisited = -2;
    std::vector<int> label(static_cast<std::size_t>(n), kUnvisited);
    int cluster = 0;
    for (Index p = 0; p < n; ++p) {
        if (label[static_cast<std::size_t>(p)] != kUnvisited) continue;
        auto nb = neighbours(p);
        if (static_cast<int>(nb.size()) < min_pts) {
            label[static_cast<std::size_t>(p)] = kNoise;
            continue;
        }
        label[static_cast<std::size_t>(p)] = cluster;
        std::vector<Index> queue(nb.begin(), nb.end());
        for (std::size_t q = 0; q < queue.size(); ++q) {
            const auto idx = static_cast<std::size_t>(queue[q]);
            if (label[idx] == kNoise) label[idx] = cluster;
            if (label[idx] != kUnvisited) continue;
            label[idx] = cluster;
            auto nb2 = neighbours(queue[q]);
            if (static_cast<int>(nb2.size()) >= min_pts) queue.insert(queue.end(), nb2.begin(), nb2.end());
        }
        ++cluster;
    }
    return label;
}

// ---- DeepSight ------------------------------------------------------------------------

void DeepSightConfig::validate() const {
    if (num_random_inputs < 1) throw ConfigError("deepsight num_random_inputs must be >= 1");
    if (!(eps_bias > 0 && eps_conv > 0 && eps_prob > 0 && eps_final > 0))
        throw ConfigError("deepsight eps values must be > 0");
    if (min_pts < 1) throw ConfigError("deepsight min_pts must be >= 1");
    if (!(tau > 0 && tau <= 1)) throw ConfigError("deepsight tau must lie in (0, 1]");
}

Matrix cosine_distance_matrix(const RowMatrix& v) {
    const Index n = v.rows();
    Matrix d(n, n);
    for (Index i = 0; i < n; ++i)
        for (Index j = 0; j < n; ++j) {
            const Real ni = v.row(i).norm(), nj = v.row(j).norm();
            if (ni == 0 && nj == 0) d(i, j) = 0;
            else if (ni == 0 || nj == 0) d(i, j) = 1;
            else d(i, j) = std::max<Real>(0, 1 - v.row(i).dot(v.row(j)) / (ni * nj));
        }
    d.diagonal().setZero();
    return d;
}

Matrix euclidean_distance_matrix(const RowMatrix& v) {
    const Index n = v.rows();
    Matrix d(n, n);
    for (Index i = 0; i < n; ++i)
        for (Index j = 0; j < n; ++j) d(i, j) = (v.row(i) - v.row(j)).norm();
    return d;
}

Matrix agreement_distance(std::span<const std::vector<int>> labelings) {
    if (labelings.empty()) throw PreconditionError("agreement_distance needs at least one labeling");
    const std::size_t n = labelings.front().size();
    Matrix d = Matrix::Constant(static_cast<Index>(n), static_cast<Index>(n), static_cast<Real>(labelings.size()));
    for (const auto& lab : labelings) {
        if (lab.size() != n) throw DimensionError("labelings differ in length");
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < n; ++j)
                if (i == j || (lab[i] != kNoise && lab[i] == lab[j])) d(static_cast<Index>(i), static_cast<Index>(j)) -= 1;
    }
    return d;
}

namespace {

Real median_of(std::vector<Real> v) {
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

Real relative_eps(const Matrix& d, Real scale) {
    std::vector<Real> off;
    for (Index i = 0; i < d.rows(); ++i)
        for (Index j = i + 1; j < d.cols(); ++j) off.push_back(d(i, j));
    const Real med = off.empty() ? 0 : median_of(off);
    const Real eps = scale * med;
    return eps > 0 ? eps : 1e-12;
}

}  // namespace

std::vector<bool> concentration_flags(const RowMatrix& mean_probs, Real mad_k) {
    const Index n = mean_probs.rows();
    std::vector<Real> peak(static_cast<std::size_t>(n));
    for (Index i = 0; i < n; ++i) peak[static_cast<std::size_t>(i)] = mean_probs.row(i).maxCoeff();
    const Real med = median_of(peak);
    std::vector<Real> dev;
    for (Real p : peak) dev.push_back(std::abs(p - med));
    const Real mad = median_of(dev);
    std::vector<bool> flags;
    for (Real p : peak) flags.push_back(p > med + mad_k * mad);
    return flags;
}

DeepSightResult deepsight_filter(const nn::ModelParams& global, const nn::Architecture& arch,
                                 std::span<const fl::SubmittedUpdate> updates, const DeepSightConfig& cfg, Rng& rng) {
    cfg.validate();
    if (updates.empty()) throw PreconditionError("deepsight needs at least one update");
    DeepSightResult r;
    const std::size_t n = updates.size();
    if (n == 1) {
        r.kept = {0};
        r.flagged = {false};
        r.final_labels = {kNoise};
        return r;
    }
    const auto order = client_order(updates);
    const std::size_t last = arch.size() - 1;
    const Index last_w = global.layers[last].weight.size();
    const Index last_b = global.layers[last].bias.size();

    std::uniform_real_distribution<Real> unif(0.0, 1.0);
    RowMatrix x_rand(cfg.num_random_inputs, arch.front().input_size());
    for (Index i = 0; i < x_rand.rows(); ++i)
        for (Index j = 0; j < x_rand.cols(); ++j) x_rand(i, j) = unif(rng);

    RowMatrix bias_vecs(static_cast<Index>(n), last_w + last_b);
    RowMatrix conv_vecs(static_cast<Index>(n), last_w);
    RowMatrix probs(static_cast<Index>(n), arch.back().output_size());
    for (std::size_t r_i = 0; r_i < n; ++r_i) {
        const auto& m = updates[order[r_i]].proposed;
        nn::check_model(m, arch);
        const auto& lw = m.layers[last];
        const auto& gw = global.layers[last];
        const auto row = static_cast<Index>(r_i);
        bias_vecs.row(row).head(last_w) = (lw.weight.data() - gw.weight.data()).transpose();
        bias_vecs.row(row).tail(last_b) = (lw.bias.data() - gw.bias.data()).transpose();
        conv_vecs.row(row) = lw.weight.data().transpose();
        probs.row(row) = nn::softmax(nn::forward(m, arch, x_rand)).colwise().mean();
    }

    const auto sorted_flags = concentration_flags(probs, cfg.flag_mad_k);
    const Matrix d_bias = cosine_distance_matrix(bias_vecs);
    const Matrix d_conv = euclidean_distance_matrix(conv_vecs);
    const Matrix d_prob = euclidean_distance_matrix(probs);
    const std::vector<std::vector<int>> labelings{
        dbscan(d_bias, relative_eps(d_bias, cfg.eps_bias), cfg.min_pts),
        dbscan(d_conv, relative_eps(d_conv, cfg.eps_conv), cfg.min_pts),
        dbscan(d_prob, relative_eps(d_prob, cfg.eps_prob), cfg.min_pts),
    };
    const auto final_sorted = dbscan(agreement_distance(labelings), cfg.eps_final, cfg.min_pts);

    // Noise points form their own singleton clusters.
    std::map<int, std::vector<std::size_t>> clusters;
    int next_singleton = static_cast<int>(n) + 1;
    for (std::size_t i = 0; i < n; ++i)
        clusters[final_sorted[i] == kNoise ? next_singleton++ : final_sorted[i]].push_back(i);

    std::vector<bool> keep_sorted(n, true);
    for (const auto& [label, members] : clusters) {
        std::size_t flagged = 0;
        for (auto i : members) flagged += sorted_flags[i];
        if (static_cast<Real>(flagged) / static_cast<Real>(members.size()) > cfg.tau)
            for (auto i : members) keep_sorted[i] = false;
    }
    if (std::none_of(keep_sorted.begin(), keep_sorted.end(), [](bool k) { return k; })) {
        r.fallback = true;
        std::fill(keep_sorted.begin(), keep_sorted.end(), true);
    }

    r.flagged.assign(n, false);
    r.final_labels.assign(n, kNoise);
    for (std::size_t i = 0; i < n; ++i) {
        r.flagged[order[i]] = sorted_flags[i];
        r.final_labels[order[i]] = final_sorted[i];
        if (keep_sorted[i]) r.kept.push_back(order[i]);
    }
    std::sort(r.kept.begin(), r.kept.end());
    return r;
}

DeepSightAggregator::DeepSightAggregator(DeepSightConfig cfg) : cfg_(cfg) { cfg_.validate(); }

fl::AggregationResult DeepSightAggregator::aggregate(fl::AggregationContext& ctx,
                                                     std::span<const fl::SubmittedUpdate> updates) {
    const auto r = deepsight_filter(ctx.state.current, ctx.arch, updates, cfg_, ctx.rng);
    std::vector<fl::SubmittedUpdate> kept;
    std::vector<int> dropped, flagged;
    std::vector<bool> is_kept(updates.size(), false);
    for (auto i : r.kept) is_kept[i] = true;
    for (std::size_t i = 0; i < updates.size(); ++i) {
        if (is_kept[i]) kept.push_back(updates[i]);
        else dropped.push_back(updates[i].client_id);
        if (r.flagged[i]) flagged.push_back(updates[i].client_id);
    }
    std::sort(dropped.begin(), dropped.end());
    std::sort(flagged.begin(), flagged.end());
    std::sort(kept.begin(), kept.end(), [](const auto& a, const auto& b) { return a.client_id < b.client_id; });

    fl::AggregationResult out;
    out.next = fl::fedavg_aggregate(ctx.state.current, kept, ctx.divisor, ctx.total_samples);
    out.diagnostics["deepsight_excluded"] = std::to_string(dropped.size());
    out.diagnostics["deepsight_fallback"] = r.fallback ? "1" : "0";
    out.diagnostics["deepsight_dropped_ids"] = join_ids(dropped);
    out.diagnostics["deepsight_flagged_ids"] = join_ids(flagged);
    return out;
}

}  // namespace flipfl::robust
