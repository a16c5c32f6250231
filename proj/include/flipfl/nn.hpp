#pragma once

// Minimal differentiable network engine: dense and valid/stride-1 conv2d
// layers with ReLU or identity activations, exact manual gradients, SGD and
// parameter flattening.

#include "flipfl/random.hpp"
#include "flipfl/tensor.hpp"

#include <optional>
#include <span>
#include <string>
#include <vector>

namespace flipfl::nn {

enum class LayerKind { dense, conv2d };
enum class Activation { relu, identity };

std::string to_string(LayerKind kind);
std::string to_string(Activation act);

struct LayerSpec {
    LayerKind kind = LayerKind::dense;
    Activation activation = Activation::relu;

    // dense
    Index in_features = 0;
    Index out_features = 0;

    // conv2d: input is (in_channels, in_height, in_width)
    Index in_channels = 0;
    Index in_height = 0;
    Index in_width = 0;
    Index out_channels = 0;
    Index kernel_h = 0;
    Index kernel_w = 0;

    static LayerSpec dense(Index in, Index out, Activation act = Activation::relu);
    static LayerSpec conv2d(Index channels, Index height, Index width, Index filters,
                            Index kernel_h, Index kernel_w, Activation act = Activation::relu);

    Index out_height() const { return in_height - kernel_h + 1; }
    Index out_width() const { return in_width - kernel_w + 1; }
    Index input_size() const;
    Index output_size() const;
    /// dense: [out, in]; conv2d: [filters, channels, kh, kw]
    Shape weight_shape() const;
    Shape bias_shape() const;
    /// dense: [out]; conv2d: [filters, out_h, out_w]
    Shape output_shape() const;

    friend bool operator==(const LayerSpec&, const LayerSpec&) = default;
};

using Architecture = std::vector<LayerSpec>;

/// Throws DimensionError if any layer is malformed or consecutive layers do
/// not chain (conv output size must equal the next layer's input size).
void validate(const Architecture& arch);

struct LayerParams {
    Tensor weight;
    Tensor bias;

    friend bool operator==(const LayerParams&, const LayerParams&) = default;
};

/// Ordered per-layer weights and biases. Arithmetic helpers below operate
/// layer by layer and require identical shapes.
struct ModelParams {
    std::vector<LayerParams> layers;

    Index num_params() const;
    bool all_finite() const;
    std::size_t num_layers() const { return layers.size(); }

    friend bool operator==(const ModelParams&, const ModelParams&) = default;
};

ModelParams zeros_like(const Architecture& arch);
ModelParams zeros_like(const ModelParams& model);
/// He-normal weights, zero biases.
ModelParams init_model(const Architecture& arch, Rng& rng);
/// Throws DimensionError if `model` does not match `arch`.
void check_model(const ModelParams& model, const Architecture& arch);

ModelParams operator+(const ModelParams& a, const ModelParams& b);
ModelParams operator-(const ModelParams& a, const ModelParams& b);
ModelParams operator*(Real s, const ModelParams& a);
/// a += s * b
void axpy(ModelParams& a, Real s, const ModelParams& b);
Real squared_norm(const ModelParams& a);
Real squared_distance(const ModelParams& a, const ModelParams& b);

// ---- flattening ---------------------------------------------------------
//
// Order contract: layer-major; within a layer the weight tensor in row-major
// order, followed by the bias tensor.

Vector flatten(const ModelParams& model);
ModelParams unflatten(const Vector& flat, const Architecture& arch);

struct FlatLocation {
    std::size_t layer = 0;
    bool is_bias = false;
    Index index = 0;  // row-major index within the weight or bias tensor

    friend bool operator==(const FlatLocation&, const FlatLocation&) = default;
};

FlatLocation locate(const Architecture& arch, Index flat_index);
Index num_params(const Architecture& arch);

// ---- forward / backward ---------------------------------------------------

struct LayerTrace {
    RowMatrix pre;   // z^[j], one row per sample
    RowMatrix post;  // sigma(z^[j])
};

struct ActivationTrace {
    std::vector<LayerTrace> layers;
};

struct ForwardResult {
    RowMatrix logits;  // last layer's pre-activation
    ActivationTrace trace;
};

/// Pre-activation of a single layer for a batch (one sample per row).
RowMatrix layer_forward(const LayerParams& params, const LayerSpec& spec, const RowMatrix& input);
RowMatrix activate(const RowMatrix& pre, Activation act);

ForwardResult forward_with_trace(const ModelParams& model, const Architecture& arch,
                                 const RowMatrix& batch);
ForwardResult forward_with_trace(const ModelParams& model, const Architecture& arch,
                                 const Tensor& batch);
RowMatrix forward(const ModelParams& model, const Architecture& arch, const RowMatrix& batch);

struct LayerGrad {
    LayerParams params;
    RowMatrix input;  // dL/d(layer input), only filled when requested
};

/// Backpropagates dL/dz through one layer.
LayerGrad layer_backward(const LayerParams& params, const LayerSpec& spec,
                         const RowMatrix& input, const RowMatrix& grad_pre, bool want_input_grad);

/// Backpropagates `grad_pre` (dL/dz^[from_layer]) down to the input.
/// Returns parameter gradients (zero for layers above `from_layer`) and,
/// when `input_grad` is non-null, dL/d(batch).
ModelParams backward(const ModelParams& model, const Architecture& arch, const RowMatrix& batch,
                     const ActivationTrace& trace, std::size_t from_layer, RowMatrix grad_pre,
                     RowMatrix* input_grad = nullptr);

// ---- losses ---------------------------------------------------------------

enum class LossKind { cross_entropy, backdoor_composite, kl_distill, trigger_activation };

/// Loss selection plus the extra context each kind needs.
///   cross_entropy:       mean CE over the batch.
///   backdoor_composite:  CE(clean) + lambda * CE(triggered -> target) + alpha * ||theta - anchor||^2
///   kl_distill:          mean KL(softmax(teacher/T) || softmax(student/T)); labels unused.
///   trigger_activation:  mean over samples of ||sigma(z1(x)) - sigma(z1(x'))||^2; labels unused.
struct LossSpec {
    LossKind kind = LossKind::cross_entropy;
    Real lambda = 0.0;
    Real alpha = 0.0;
    std::optional<ModelParams> anchor;
    std::optional<RowMatrix> triggered_batch;
    int target_label = 0;
    std::optional<RowMatrix> teacher_logits;
    Real temperature = 1.0;

    static LossSpec cross_entropy();
    static LossSpec backdoor(Real lambda, Real alpha, ModelParams anchor, RowMatrix triggered,
                             int target_label);
    static LossSpec distill(RowMatrix teacher_logits, Real temperature = 1.0);
    static LossSpec trigger_activation(RowMatrix triggered);
};

struct LossResult {
    Real value = 0.0;
    ModelParams grads;
};

LossResult loss_and_grad(const ModelParams& model, const Architecture& arch, const RowMatrix& batch_x,
                         std::span<const int> batch_y, const LossSpec& loss);

Real loss_value(const ModelParams& model, const Architecture& arch, const RowMatrix& batch_x,
                std::span<const int> batch_y, const LossSpec& loss);

/// Row-wise softmax with max subtraction.
RowMatrix softmax(const RowMatrix& logits, Real temperature = 1.0);
/// Mean cross-entropy of `logits` against `labels`.
Real cross_entropy(const RowMatrix& logits, std::span<const int> labels);
/// KL(softmax(p) || softmax(q)) for a single logit vector.
Real kl_divergence(const Vector& p_logits, const Vector& q_logits);
/// Mean over rows of KL(softmax(p_i) || softmax(q_i)).
Real kl_divergence(const RowMatrix& p_logits, const RowMatrix& q_logits, Real temperature = 1.0);

std::vector<int> argmax_rows(const RowMatrix& logits);

/// model - lr * grads. Throws ConfigError for lr < 0.
ModelParams sgd_step(const ModelParams& model, const ModelParams& grads, Real lr);

}  // namespace flipfl::nn
