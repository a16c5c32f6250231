#pragma once

// Synthetic image-like datasets, Dirichlet client partitioning and backdoor
// trigger placement.

#include "flipfl/checkpoint.hpp"
#include "flipfl/random.hpp"
#include "flipfl/tensor.hpp"

#include <cstdint>
#include <span>
#include <vector>

namespace flipfl::data {

struct ImageDims {
    Index channels = 1;
    Index height = 1;
    Index width = 1;

    Index size() const { return channels * height * width; }
    friend bool operator==(const ImageDims&, const ImageDims&) = default;
};

/// xs has shape [N, C, H, W] with values in [0, 1]; ys in [0, num_classes).
struct Dataset {
    Tensor xs;
    std::vector<int> ys;
    int num_classes = 0;
    ImageDims dims;

    Index size() const { return static_cast<Index>(ys.size()); }
    bool empty() const { return ys.empty(); }
    /// One sample per row.
    ConstRowMap rows() const { return xs.matrix(size(), dims.size()); }
};

Dataset subset(const Dataset& ds, std::span<const Index> indices);
RowMatrix gather_rows(const Dataset& ds, std::span<const Index> indices);
std::vector<int> gather_labels(const Dataset& ds, std::span<const Index> indices);

/// Class c is a seeded random template image in [0,1]; samples are
/// template + N(0, noise_sd^2) clamped to [0,1], shuffled. Deterministic per seed.
Dataset gen_blobs_dataset(int num_classes, int samples_per_class, ImageDims dims, Real noise_sd,
                          std::uint64_t seed);

/// Class templates used by gen_blobs_dataset for the same arguments.
RowMatrix blob_templates(int num_classes, ImageDims dims, std::uint64_t seed);

ArrayFile make_dataset_file(const Dataset& ds);
Dataset parse_dataset_file(const ArrayFile& file);

struct ClientPartition {
    std::vector<std::vector<Index>> assignments;

    std::size_t num_clients() const { return assignments.size(); }
};

/// Per class, client proportions ~ Dirichlet(h * 1); indices dealt out by the
/// cumulative proportions. Any client left empty receives one sample moved
/// from the currently largest client.
ClientPartition dirichlet_partition(const Dataset& ds, int num_clients, Real h, std::uint64_t seed);

/// Per-client class histogram: [client][class] -> count.
std::vector<std::vector<Index>> class_histograms(const ClientPartition& p, const Dataset& ds);

/// Backdoor trigger: x' = (1 - m) * x + m * pattern.
///   pattern: [C, H, W] full-image pattern (only masked pixels matter)
///   mask:    [H, W] binary placement
struct Trigger {
    Tensor pattern;
    Tensor mask;
    int target_label = 0;

    /// size x size square with its bottom-right corner at the image corner,
    /// offset by `margin` pixels.
    static Trigger corner_square(ImageDims dims, Index size, int target_label, Real fill = 1.0,
                                 Index margin = 0);
    static Trigger square_at(ImageDims dims, Index top, Index left, Index size, int target_label,
                             Real fill = 1.0);

    ImageDims dims() const;
    /// Bounding box of the mask: (top, left, height, width). Empty mask gives zeros.
    struct Box {
        Index top = 0, left = 0, height = 0, width = 0;
    };
    Box bounding_box() const;
    /// Pattern restricted to the mask's bounding box: [C, bh, bw].
    Tensor patch() const;
    /// Throws DimensionError if the mask is not binary or shapes disagree.
    void validate() const;
};

/// x is [C, H, W] or [N, C, H, W].
Tensor apply_trigger(const Tensor& x, const Trigger& trig);
/// In-place on a row-per-sample batch.
void apply_trigger_rows(RowMatrix& rows, const Trigger& trig);
RowMatrix triggered_copy(const RowMatrix& rows, const Trigger& trig);

/// Nearest-neighbour resample of [C, h, w] (or [h, w]) to the target spatial
/// dims: out[c, i, j] = src[c, floor(i*h/th), floor(j*w/tw)].
Tensor resize_trigger(const Tensor& pattern, Index target_h, Index target_w);

/// Elementwise mean of patterns (masks must agree; target label of the first).
Trigger average_triggers(std::span<const Trigger> triggers);

ArrayFile make_trigger_file(const Trigger& trig, nlohmann::json extra = nlohmann::json::object());
Trigger parse_trigger_file(const ArrayFile& file);

}  // namespace flipfl::data
