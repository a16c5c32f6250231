#include "flipfl/nn.hpp"

#include "flipfl/errors.hpp"

#include <cmath>
#include <utility>

namespace flipfl::nn {

std::string to_string(LayerKind kind) {
    return kind == LayerKind::dense ? "dense" : "conv2d";
}

std::string to_string(Activation act) {
    return act == Activation::relu ? "relu" : "identity";
}

LayerSpec LayerSpec::dense(Index in, Index out, Activation act) {
    LayerSpec s;
    s.kind = LayerKind::dense;
    s.activation = act;
    s.in_features = in;
    s.out_features = out;
    return s;
}

LayerSpec LayerSpec::conv2d(Index channels, Index height, Index width, Index filters, Index kh,
                            Index kw, Activation act) {
    LayerSpec s;
    s.kind = LayerKind::conv2d;
    s.activation = act;
    s.in_channels = channels;
    s.in_height = height;
    s.in_width = width;
    s.out_channels = filters;
    s.kernel_h = kh;
    s.kernel_w = kw;
    return s;
}

Index LayerSpec::input_size() const {
    return kind == LayerKind::dense ? in_features : in_channels * in_height * in_width;
}

Index LayerSpec::output_size() const {
    return kind == LayerKind::dense ? out_features : out_channels * out_height() * out_width();
}

Shape LayerSpec::weight_shape() const {
    if (kind == LayerKind::dense) return {out_features, in_features};
    return {out_channels, in_channels, kernel_h, kernel_w};
}

Shape LayerSpec::bias_shape() const {
    return {kind == LayerKind::dense ? out_features : out_channels};
}

Shape LayerSpec::output_shape() const {
    if (kind == LayerKind::dense) return {out_features};
    return {out_channels, out_height(), out_width()};
}

void validate(const Architecture& arch) {
    if (arch.empty()) throw DimensionError("architecture has no layers");
    for (std::size_t j = 0; j < arch.size(); ++j) {
        const auto& l = arch[j];
        const std::string where = "layer " + std::to_string(j) + ": ";
        if (l.kind == LayerKind::dense) {
            if (l.in_features <= 0 || l.out_features <= 0)
                throw DimensionError(where + "dense dims must be positive");
        } else {
            if (l.kernel_h <= 0 || l.kernel_w <= 0)
                throw DimensionError(where + "conv2d kernel dims must be positive");
            if (l.in_channels <= 0 || l.out_channels <= 0)
                throw DimensionError(where + "conv2d channel counts must be positive");
            if (l.out_height() <= 0 || l.out_width() <= 0)
                throw DimensionError(where + "conv2d kernel larger than input");
        }
        if (j > 0 && arch[j - 1].output_size() != l.input_size()) {
            throw DimensionError(where + "input size " + std::to_string(l.input_size()) +
                                 " does not match previous output size " +
                                 std::to_string(arch[j - 1].output_size()));
        }
    }
}

Index ModelParams::num_params() const {
    Index n = 0;
    for (const auto& l : layers) n += l.weight.size() + l.bias.size();
    return n;
}

bool ModelParams::all_finite() const {
    for (const auto& l : layers)
        if (!l.weight.all_finite() || !l.bias.all_finite()) return false;
    return true;
}

ModelParams zeros_like(const Architecture& arch) {
    ModelParams m;
    m.layers.reserve(arch.size());
    for (const auto& l : arch) m.layers.push_back({Tensor(l.weight_shape()), Tensor(l.bias_shape())});
    return m;
}

ModelParams zeros_like(const ModelParams& model) {
    ModelParams m;
    m.layers.reserve(model.layers.size());
    for (const auto& l : model.layers)
        m.layers.push_back({Tensor(l.weight.shape()), Tensor(l.bias.shape())});
    return m;
}

ModelParams init_model(const Architecture& arch, Rng& rng) {
    validate(arch);
    ModelParams m = zeros_like(arch);
    for (std::size_t j = 0; j < arch.size(); ++j) {
        const Index fan_in = arch[j].kind == LayerKind::dense
                                 ? arch[j].in_features
                                 : arch[j].in_channels * arch[j].kernel_h * arch[j].kernel_w;
        std::normal_distribution<Real> dist(0.0, std::sqrt(2.0 / static_cast<Real>(fan_in)));
        for (Index i = 0; i < m.layers[j].weight.size(); ++i) m.layers[j].weight[i] = dist(rng);
    }
    return m;
}

void check_model(const ModelParams& model, const Architecture& arch) {
    if (model.layers.size() != arch.size()) {
        throw DimensionError("model has " + std::to_string(model.layers.size()) +
                             " layers, architecture has " + std::to_string(arch.size()));
    }
    for (std::size_t j = 0; j < arch.size(); ++j) {
        if (model.layers[j].weight.shape() != arch[j].weight_shape() ||
            model.layers[j].bias.shape() != arch[j].bias_shape()) {
            throw DimensionError("layer " + std::to_string(j) + " parameter shapes do not match spec");
        }
    }
}

namespace {

void check_compatible(const ModelParams& a, const ModelParams& b, const char* what) {
    if (a.layers.size() != b.layers.size()) throw DimensionError(std::string(what) + ": layer count mismatch");
    for (std::size_t j = 0; j < a.layers.size(); ++j) {
        require_same_shape(a.layers[j].weight, b.layers[j].weight, what);
        require_same_shape(a.layers[j].bias, b.layers[j].bias, what);
    }
}

}  // namespace

ModelParams operator+(const ModelParams& a, const ModelParams& b) {
    ModelParams r = a;
    axpy(r, 1.0, b);
    return r;
}

ModelParams operator-(const ModelParams& a, const ModelParams& b) {
    ModelParams r = a;
    axpy(r, -1.0, b);
    return r;
}

ModelParams operator*(Real s, const ModelParams& a) {
    ModelParams r = a;
    for (auto& l : r.layers) {
        l.weight.data() *= s;
        l.bias.data() *= s;
    }
    return r;
}

void axpy(ModelParams& a, Real s, const ModelParams& b) {
    check_compatible(a, b, "axpy");
    for (std::size_t j = 0; j < a.layers.size(); ++j) {
        a.layers[j].weight.data() += s * b.layers[j].weight.data();
        a.layers[j].bias.data() += s * b.layers[j].bias.data();
    }
}

Real squared_norm(const ModelParams& a) {
    Real s = 0;
    for (const auto& l : a.layers) s += l.weight.data().squaredNorm() + l.bias.data().squaredNorm();
    return s;
}

Real squared_distance(const ModelParams& a, const ModelParams& b) {
    check_compatible(a, b, "squared_distance");
    Real s = 0;
    for (std::size_t j = 0; j < a.layers.size(); ++j) {
        s += (a.layers[j].weight.data() - b.layers[j].weight.data()).squaredNorm();
        s += (a.layers[j].bias.data() - b.layers[j].bias.data()).squaredNorm();
    }
    return s;
}

Vector flatten(const ModelParams& model) {
    Vector flat(model.num_params());
    Index off = 0;
    for (const auto& l : model.layers) {
        flat.segment(off, l.weight.size()) = l.weight.data();
        off += l.weight.size();
        flat.segment(off, l.bias.size()) = l.bias.data();
        off += l.bias.size();
    }
    return flat;
}

Index num_params(const Architecture& arch) {
    Index n = 0;
    for (const auto& l : arch) n += shape_size(l.weight_shape()) + shape_size(l.bias_shape());
    return n;
}

ModelParams unflatten(const Vector& flat, const Architecture& arch) {
    if (flat.size() != num_params(arch)) {
        throw DimensionError("unflatten: vector length " + std::to_string(flat.size()) +
                             " does not match architecture parameter count " +
                             std::to_string(num_params(arch)));
    }
    ModelParams m = zeros_like(arch);
    Index off = 0;
    for (auto& l : m.layers) {
        l.weight.data() = flat.segment(off, l.weight.size());
        off += l.weight.size();
        l.bias.data() = flat.segment(off, l.bias.size());
        off += l.bias.size();
    }
    return m;
}

FlatLocation locate(const Architecture& arch, Index flat_index) {
    if (flat_index < 0) throw DimensionError("negative flat index");
    Index off = 0;
    for (std::size_t j = 0; j < arch.size(); ++j) {
        const Index nw = shape_size(arch[j].weight_shape());
        const Index nb = shape_size(arch[j].bias_shape());
        if (flat_index < off + nw) return {j, false, flat_index - off};
        if (flat_index < off + nw + nb) return {j, true, flat_index - off - nw};
        off += nw + nb;
    }
    throw DimensionError("flat index " + std::to_string(flat_index) + " out of range");
}

// ---- forward ---------------------------------------------------------------

namespace {

/// Patch matrix for one sample: rows are output positions (oh * OW + ow),
/// columns are (c, kh, kw) in row-major order.
RowMatrix im2col(const Real* sample, const LayerSpec& s) {
    const Index oh = s.out_height(), ow = s.out_width();
    const Index k = s.in_channels * s.kernel_h * s.kernel_w;
    RowMatrix col(oh * ow, k);
    for (Index y = 0; y < oh; ++y) {
        for (Index x = 0; x < ow; ++x) {
            Real* row = col.data() + (y * ow + x) * k;
            Index idx = 0;
            for (Index c = 0; c < s.in_channels; ++c) {
                const Real* plane = sample + c * s.in_height * s.in_width;
                for (Index ky = 0; ky < s.kernel_h; ++ky) {
                    const Real* src = plane + (y + ky) * s.in_width + x;
                    for (Index kx = 0; kx < s.kernel_w; ++kx) row[idx++] = src[kx];
                }
            }
        }
    }
    return col;
}

void col2im_add(const RowMatrix& dcol, const LayerSpec& s, Real* sample_grad) {
    const Index oh = s.out_height(), ow = s.out_width();
    const Index k = s.in_channels * s.kernel_h * s.kernel_w;
    for (Index y = 0; y < oh; ++y) {
        for (Index x = 0; x < ow; ++x) {
            const Real* row = dcol.data() + (y * ow + x) * k;
            Index idx = 0;
            for (Index c = 0; c < s.in_channels; ++c) {
                Real* plane = sample_grad + c * s.in_height * s.in_width;
                for (Index ky = 0; ky < s.kernel_h; ++ky) {
                    Real* dst = plane + (y + ky) * s.in_width + x;
                    for (Index kx = 0; kx < s.kernel_w; ++kx) dst[kx] += row[idx++];
                }
            }
        }
    }
}

}  // namespace

RowMatrix layer_forward(const LayerParams& params, const LayerSpec& spec, const RowMatrix& input) {
    if (input.cols() != spec.input_size()) {
        throw DimensionError("layer input has " + std::to_string(input.cols()) + " features, expected " +
                             std::to_string(spec.input_size()));
    }
    const Index n = input.rows();
    if (spec.kind == LayerKind::dense) {
        const auto w = params.weight.matrix(spec.out_features, spec.in_features);
        RowMatrix z = input * w.transpose();
        z.rowwise() += params.bias.data().transpose();
        return z;
    }
    const Index f = spec.out_channels;
    const Index p = spec.out_height() * spec.out_width();
    const Index k = spec.in_channels * spec.kernel_h * spec.kernel_w;
    const auto w = params.weight.matrix(f, k);
    RowMatrix z(n, f * p);
    for (Index i = 0; i < n; ++i) {
        const RowMatrix col = im2col(input.row(i).data(), spec);
        RowMap zi(z.row(i).data(), f, p);
        zi.noalias() = w * col.transpose();
        zi.colwise() += params.bias.data();
    }
    return z;
}

RowMatrix activate(const RowMatrix& pre, Activation act) {
    if (act == Activation::identity) return pre;
    return pre.cwiseMax(0.0);
}

ForwardResult forward_with_trace(const ModelParams& model, const Architecture& arch,
                                 const RowMatrix& batch) {
    check_model(model, arch);
    ForwardResult out;
    out.trace.layers.reserve(arch.size());
    const RowMatrix* input = &batch;
    for (std::size_t j = 0; j < arch.size(); ++j) {
        LayerTrace lt;
        lt.pre = layer_forward(model.layers[j], arch[j], *input);
        lt.post = activate(lt.pre, arch[j].activation);
        out.trace.layers.push_back(std::move(lt));
        input = &out.trace.layers.back().post;
    }
    out.logits = out.trace.layers.back().pre;
    return out;
}

ForwardResult forward_with_trace(const ModelParams& model, const Architecture& arch,
                                 const Tensor& batch) {
    if (batch.rank() < 2) throw DimensionError("batch tensor must have a leading batch axis");
    const Index n = batch.dim(0);
    if (n == 0 || batch.size() / n != arch.front().input_size()) {
        throw DimensionError("batch sample size does not match first layer input " +
                             std::to_string(arch.front().input_size()));
    }
    return forward_with_trace(model, arch, RowMatrix(batch.rows()));
}

RowMatrix forward(const ModelParams& model, const Architecture& arch, const RowMatrix& batch) {
    check_model(model, arch);
    RowMatrix x = batch;
    for (std::size_t j = 0; j < arch.size(); ++j) {
        RowMatrix z = layer_forward(model.layers[j], arch[j], x);
        x = (j + 1 == arch.size()) ? std::move(z) : activate(z, arch[j].activation);
    }
    return x;
}

// ---- backward ----------------------------------------------------------------

LayerGrad layer_backward(const LayerParams& params, const LayerSpec& spec, const RowMatrix& input,
                         const RowMatrix& grad_pre, bool want_input_grad) {
    LayerGrad g;
    g.params = {Tensor(params.weight.shape()), Tensor(params.bias.shape())};
    const Index n = input.rows();
    if (spec.kind == LayerKind::dense) {
        auto dw = g.params.weight.matrix(spec.out_features, spec.in_features);
        dw.noalias() = grad_pre.transpose() * input;
        g.params.bias.data() = grad_pre.colwise().sum().transpose();
        if (want_input_grad) {
            const auto w = params.weight.matrix(spec.out_features, spec.in_features);
            g.input = grad_pre * w;
        }
        return g;
    }
    const Index f = spec.out_channels;
    const Index p = spec.out_height() * spec.out_width();
    const Index k = spec.in_channels * spec.kernel_h * spec.kernel_w;
    const auto w = params.weight.matrix(f, k);
    auto dw = g.params.weight.matrix(f, k);
    if (want_input_grad) g.input = RowMatrix::Zero(n, spec.input_size());
    for (Index i = 0; i < n; ++i) {
        const RowMatrix col = im2col(input.row(i).data(), spec);
        const ConstRowMap dz(grad_pre.row(i).data(), f, p);
        dw.noalias() += dz * col;
        g.params.bias.data() += dz.rowwise().sum();
        if (want_input_grad) {
            const RowMatrix dcol = dz.transpose() * w;
            col2im_add(dcol, spec, g.input.row(i).data());
        }
    }
    return g;
}

ModelParams backward(const ModelParams& model, const Architecture& arch, const RowMatrix& batch,
                     const ActivationTrace& trace, std::size_t from_layer, RowMatrix grad_pre,
                     RowMatrix* input_grad) {
    ModelParams grads = zeros_like(arch);
    for (std::size_t jj = from_layer + 1; jj-- > 0;) {
        const RowMatrix& input = jj == 0 ? batch : trace.layers[jj - 1].post;
        const bool need_input = jj > 0 || input_grad != nullptr;
        LayerGrad lg = layer_backward(model.layers[jj], arch[jj], input, grad_pre, need_input);
        grads.layers[jj] = std::move(lg.params);
        if (jj == 0) {
            if (input_grad) *input_grad = std::move(lg.input);
            break;
        }
        if (arch[jj - 1].activation == Activation::relu) {
            grad_pre = lg.input.cwiseProduct(
                (trace.layers[jj - 1].pre.array() > 0.0).cast<Real>().matrix());
        } else {
            grad_pre = std::move(lg.input);
        }
    }
    return grads;
}

// ---- losses ---------------------------------------------------------------------

RowMatrix softmax(const RowMatrix& logits, Real temperature) {
    RowMatrix p(logits.rows(), logits.cols());
    for (Index i = 0; i < logits.rows(); ++i) {
        const auto z = (logits.row(i).array() / temperature).eval();
        const Real m = z.maxCoeff();
        const auto e = (z - m).exp().eval();
        p.row(i) = (e / e.sum()).matrix();
    }
    return p;
}

namespace {

RowMatrix log_softmax(const RowMatrix& logits, Real temperature = 1.0) {
    RowMatrix out(logits.rows(), logits.cols());
    for (Index i = 0; i < logits.rows(); ++i) {
        const auto z = (logits.row(i).array() / temperature).eval();
        const Real m = z.maxCoeff();
        const Real lse = m + std::log((z - m).exp().sum());
        out.row(i) = (z - lse).matrix();
    }
    return out;
}

void check_labels(std::span<const int> labels, Index rows, Index classes) {
    if (static_cast<Index>(labels.size()) != rows)
        throw DimensionError("label count does not match batch size");
    for (int y : labels)
        if (y < 0 || y >= classes) throw DimensionError("label " + std::to_string(y) + " out of range");
}

/// Mean CE value and dL/dlogits.
std::pair<Real, RowMatrix> ce_head(const RowMatrix& logits, std::span<const int> labels) {
    check_labels(labels, logits.rows(), logits.cols());
    const Real n = static_cast<Real>(logits.rows());
    const RowMatrix logp = log_softmax(logits);
    RowMatrix d = logp.array().exp().matrix();
    Real value = 0;
    for (Index i = 0; i < logits.rows(); ++i) {
        value -= logp(i, labels[static_cast<std::size_t>(i)]);
        d(i, labels[static_cast<std::size_t>(i)]) -= 1.0;
    }
    d /= n;
    return {value / n, std::move(d)};
}

[[noreturn]] void throw_non_finite(const ActivationTrace& trace, const char* what) {
    for (std::size_t j = 0; j < trace.layers.size(); ++j) {
        if (!trace.layers[j].pre.allFinite() || !trace.layers[j].post.allFinite()) {
            throw NumericError(std::string(what) + ": non-finite activation at layer " + std::to_string(j),
                               static_cast<int>(j));
        }
    }
    const int last = static_cast<int>(trace.layers.size()) - 1;
    throw NumericError(std::string(what) + ": non-finite loss at output layer " + std::to_string(last), last);
}

std::vector<int> constant_labels(Index n, int label) {
    return std::vector<int>(static_cast<std::size_t>(n), label);
}

}  // namespace

Real cross_entropy(const RowMatrix& logits, std::span<const int> labels) {
    return ce_head(logits, labels).first;
}

Real kl_divergence(const Vector& p_logits, const Vector& q_logits) {
    if (p_logits.size() != q_logits.size()) throw DimensionError("kl_divergence: size mismatch");
    RowMatrix p = p_logits.transpose();
    RowMatrix q = q_logits.transpose();
    return kl_divergence(p, q);
}

Real kl_divergence(const RowMatrix& p_logits, const RowMatrix& q_logits, Real temperature) {
    if (p_logits.rows() != q_logits.rows() || p_logits.cols() != q_logits.cols())
        throw DimensionError("kl_divergence: shape mismatch");
    const RowMatrix lp = log_softmax(p_logits, temperature);
    const RowMatrix lq = log_softmax(q_logits, temperature);
    const Real total = (lp.array().exp() * (lp - lq).array()).sum();
    // Clamp tiny negative rounding residue; KL is non-negative.
    return std::max<Real>(0.0, total / static_cast<Real>(p_logits.rows()));
}

std::vector<int> argmax_rows(const RowMatrix& logits) {
    std::vector<int> out(static_cast<std::size_t>(logits.rows()));
    for (Index i = 0; i < logits.rows(); ++i) {
        Index best = 0;
        logits.row(i).maxCoeff(&best);
        out[static_cast<std::size_t>(i)] = static_cast<int>(best);
    }
    return out;
}

LossSpec LossSpec::cross_entropy() { return {}; }

LossSpec LossSpec::backdoor(Real lambda, Real alpha, ModelParams anchor, RowMatrix triggered,
                            int target_label) {
    if (lambda < 0 || alpha < 0) throw ConfigError("backdoor loss weights must be non-negative");
    LossSpec s;
    s.kind = LossKind::backdoor_composite;
    s.lambda = lambda;
    s.alpha = alpha;
    s.anchor = std::move(anchor);
    s.triggered_batch = std::move(triggered);
    s.target_label = target_label;
    return s;
}

LossSpec LossSpec::distill(RowMatrix teacher_logits, Real temperature) {
    if (temperature <= 0) throw ConfigError("distillation temperature must be positive");
    LossSpec s;
    s.kind = LossKind::kl_distill;
    s.teacher_logits = std::move(teacher_logits);
    s.temperature = temperature;
    return s;
}

LossSpec LossSpec::trigger_activation(RowMatrix triggered) {
    LossSpec s;
    s.kind = LossKind::trigger_activation;
    s.triggered_batch = std::move(triggered);
    return s;
}

LossResult loss_and_grad(const ModelParams& model, const Architecture& arch, const RowMatrix& batch_x,
                         std::span<const int> batch_y, const LossSpec& loss) {
    LossResult r;
    const std::size_t last = arch.size() - 1;
    switch (loss.kind) {
        case LossKind::cross_entropy: {
            auto fr = forward_with_trace(model, arch, batch_x);
            auto [value, d] = ce_head(fr.logits, batch_y);
            if (!std::isfinite(value)) throw_non_finite(fr.trace, "cross_entropy");
            r.value = value;
            r.grads = backward(model, arch, batch_x, fr.trace, last, std::move(d));
            return r;
        }
        case LossKind::backdoor_composite: {
            if (loss.lambda < 0 || loss.alpha < 0) throw ConfigError("backdoor loss weights must be non-negative");
            auto fr = forward_with_trace(model, arch, batch_x);
            auto [value, d] = ce_head(fr.logits, batch_y);
            if (!std::isfinite(value)) throw_non_finite(fr.trace, "backdoor_composite");
            r.value = value;
            r.grads = backward(model, arch, batch_x, fr.trace, last, std::move(d));
            if (loss.lambda > 0) {
                if (!loss.triggered_batch) throw ConfigError("backdoor loss requires a triggered batch");
                const RowMatrix& xt = *loss.triggered_batch;
                auto ft = forward_with_trace(model, arch, xt);
                const auto yt = constant_labels(xt.rows(), loss.target_label);
                auto [vt, dt] = ce_head(ft.logits, yt);
                if (!std::isfinite(vt)) throw_non_finite(ft.trace, "backdoor_composite (triggered)");
                r.value += loss.lambda * vt;
                axpy(r.grads, loss.lambda, backward(model, arch, xt, ft.trace, last, std::move(dt)));
            }
            if (loss.alpha > 0) {
                if (!loss.anchor) throw ConfigError("backdoor loss requires an anchor model");
                const ModelParams diff = model - *loss.anchor;
                r.value += loss.alpha * squared_norm(diff);
                axpy(r.grads, 2.0 * loss.alpha, diff);
            }
            return r;
        }
        case LossKind::kl_distill: {
            if (!loss.teacher_logits) throw ConfigError("distillation loss requires teacher logits");
            auto fr = forward_with_trace(model, arch, batch_x);
            const RowMatrix& teacher = *loss.teacher_logits;
            if (teacher.rows() != fr.logits.rows() || teacher.cols() != fr.logits.cols())
                throw DimensionError("teacher logits shape does not match student logits");
            const Real t = loss.temperature;
            const Real n = static_cast<Real>(batch_x.rows());
            const RowMatrix p = softmax(teacher, t);
            const RowMatrix q = softmax(fr.logits, t);
            r.value = kl_divergence(teacher, fr.logits, t);
            if (!std::isfinite(r.value)) throw_non_finite(fr.trace, "kl_distill");
            RowMatrix d = (q - p) / (t * n);
            r.grads = backward(model, arch, batch_x, fr.trace, last, std::move(d));
            return r;
        }
        case LossKind::trigger_activation: {
            if (!loss.triggered_batch) throw ConfigError("trigger loss requires a triggered batch");
            const RowMatrix& xt = *loss.triggered_batch;
            if (xt.rows() != batch_x.rows() || xt.cols() != batch_x.cols())
                throw DimensionError("triggered batch shape does not match clean batch");
            check_model(model, arch);
            const LayerSpec& first = arch.front();
            const RowMatrix z = layer_forward(model.layers[0], first, batch_x);
            const RowMatrix zt = layer_forward(model.layers[0], first, xt);
            const RowMatrix a = activate(z, first.activation);
            const RowMatrix at = activate(zt, first.activation);
            const Real n = static_cast<Real>(batch_x.rows());
            const RowMatrix diff = a - at;
            r.value = diff.squaredNorm() / n;
            if (!std::isfinite(r.value)) throw NumericError("trigger_activation: non-finite loss at layer 0", 0);
            RowMatrix da = 2.0 * diff / n;
            RowMatrix dat = -da;
            if (first.activation == Activation::relu) {
                da = da.cwiseProduct((z.array() > 0.0).cast<Real>().matrix());
                dat = dat.cwiseProduct((zt.array() > 0.0).cast<Real>().matrix());
            }
            r.grads = zeros_like(arch);
            LayerGrad g1 = layer_backward(model.layers[0], first, batch_x, da, false);
            LayerGrad g2 = layer_backward(model.layers[0], first, xt, dat, false);
            r.grads.layers[0].weight.data() = g1.params.weight.data() + g2.params.weight.data();
            r.grads.layers[0].bias.data() = g1.params.bias.data() + g2.params.bias.data();
            return r;
        }
    }
    throw ConfigError("unknown loss kind");
}

Real loss_value(const ModelParams& model, const Architecture& arch, const RowMatrix& batch_x,
                std::span<const int> batch_y, const LossSpec& loss) {
    return loss_and_grad(model, arch, batch_x, batch_y, loss).value;
}

ModelParams sgd_step(const ModelParams& model, const ModelParams& grads, Real lr) {
    if (lr < 0) throw ConfigError("learning rate must be non-negative");
    if (lr == 0) return model;
    ModelParams out = model;
    axpy(out, -lr, grads);
    return out;
}

}  // namespace flipfl::nn
