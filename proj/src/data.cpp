#include "flipfl/data.hpp"

#include "flipfl/errors.hpp"

#include <algorithm>
#include <numeric>

namespace flipfl::data {

RowMatrix gather_rows(const Dataset& ds, std::span<const Index> indices) {
    const auto all = ds.rows();
    RowMatrix out(static_cast<Index>(indices.size()), ds.dims.size());
    for (std::size_t i = 0; i < indices.size(); ++i) out.row(static_cast<Index>(i)) = all.row(indices[i]);
    return out;
}

std::vector<int> gather_labels(const Dataset& ds, std::span<const Index> indices) {
    std::vector<int> out;
    out.reserve(indices.size());
    for (auto i : indices) out.push_back(ds.ys[static_cast<std::size_t>(i)]);
    return out;
}

Dataset subset(const Dataset& ds, std::span<const Index> indices) {
    Dataset out;
    out.num_classes = ds.num_classes;
    out.dims = ds.dims;
    const Index n = static_cast<Index>(indices.size());
    out.xs = Tensor({n, ds.dims.channels, ds.dims.height, ds.dims.width});
    if (n > 0) out.xs.matrix(n, ds.dims.size()) = gather_rows(ds, indices);
    out.ys = gather_labels(ds, indices);
    return out;
}

RowMatrix blob_templates(int num_classes, ImageDims dims, std::uint64_t seed) {
    Rng rng = make_stream(seed, StreamPurpose::dataset, {0});
    std::uniform_real_distribution<Real> u(0.0, 1.0);
    RowMatrix t(num_classes, dims.size());
    for (Index c = 0; c < t.rows(); ++c)
        for (Index k = 0; k < t.cols(); ++k) t(c, k) = u(rng);
    return t;
}

Dataset gen_blobs_dataset(int num_classes, int samples_per_class, ImageDims dims, Real noise_sd,
                          std::uint64_t seed) {
    if (num_classes <= 0 || samples_per_class <= 0 || dims.channels <= 0 || dims.height <= 0 ||
        dims.width <= 0) {
        throw ConfigError("gen_blobs_dataset: dimensions must be positive");
    }
    if (noise_sd < 0) throw ConfigError("gen_blobs_dataset: noise_sd must be non-negative");
    const RowMatrix templates = blob_templates(num_classes, dims, seed);
    Rng rng = make_stream(seed, StreamPurpose::dataset, {1});
    std::normal_distribution<Real> noise(0.0, 1.0);

    const Index n = static_cast<Index>(num_classes) * samples_per_class;
    RowMatrix xs(n, dims.size());
    std::vector<int> ys(static_cast<std::size_t>(n));
    Index r = 0;
    for (int c = 0; c < num_classes; ++c) {
        for (int s = 0; s < samples_per_class; ++s, ++r) {
            for (Index k = 0; k < xs.cols(); ++k) {
                const Real v = templates(c, k) + (noise_sd > 0 ? noise_sd * noise(rng) : 0.0);
                xs(r, k) = std::clamp(v, 0.0, 1.0);
            }
            ys[static_cast<std::size_t>(r)] = c;
        }
    }
    std::vector<Index> perm(static_cast<std::size_t>(n));
    std::iota(perm.begin(), perm.end(), Index{0});
    std::shuffle(perm.begin(), perm.end(), rng);

    Dataset ds;
    ds.num_classes = num_classes;
    ds.dims = dims;
    ds.xs = Tensor({n, dims.channels, dims.height, dims.width});
    auto out = ds.xs.matrix(n, dims.size());
    ds.ys.resize(static_cast<std::size_t>(n));
    for (Index i = 0; i < n; ++i) {
        out.row(i) = xs.row(perm[static_cast<std::size_t>(i)]);
        ds.ys[static_cast<std::size_t>(i)] = ys[static_cast<std::size_t>(perm[static_cast<std::size_t>(i)])];
    }
    return ds;
}

ArrayFile make_dataset_file(const Dataset& ds) {
    ArrayFile f;
    f.header["kind"] = "dataset";
    f.header["num_classes"] = ds.num_classes;
    f.header["dims"] = {ds.dims.channels, ds.dims.height, ds.dims.width};
    f.header["labels"] = ds.ys;
    f.values = ds.xs.data();
    return f;
}

Dataset parse_dataset_file(const ArrayFile& file) {
    if (file.header.value("kind", std::string()) != "dataset") throw ConfigError("array file is not a dataset");
    Dataset ds;
    ds.num_classes = file.header.at("num_classes").get<int>();
    const auto d = file.header.at("dims");
    ds.dims = {d.at(0).get<Index>(), d.at(1).get<Index>(), d.at(2).get<Index>()};
    ds.ys = file.header.at("labels").get<std::vector<int>>();
    const Index n = static_cast<Index>(ds.ys.size());
    ds.xs = Tensor({n, ds.dims.channels, ds.dims.height, ds.dims.width}, file.values);
    return ds;
}

// ---- partitioning -------------------------------------------------------------

ClientPartition dirichlet_partition(const Dataset& ds, int num_clients, Real h, std::uint64_t seed) {
    if (num_clients < 1) throw ConfigError("dirichlet_partition: num_clients must be >= 1");
    if (!(h > 0)) throw ConfigError("dirichlet_partition: concentration h must be > 0");
    if (ds.size() < num_clients) {
        throw ConfigError("dirichlet_partition: dataset has " + std::to_string(ds.size()) +
                          " samples for " + std::to_string(num_clients) + " clients");
    }
    Rng rng = make_stream(seed, StreamPurpose::partition);
    std::gamma_distribution<Real> gamma(h, 1.0);
    const auto k = static_cast<std::size_t>(num_clients);

    ClientPartition part;
    part.assignments.resize(k);
    for (int c = 0; c < ds.num_classes; ++c) {
        std::vector<Index> idx;
        for (Index i = 0; i < ds.size(); ++i)
            if (ds.ys[static_cast<std::size_t>(i)] == c) idx.push_back(i);
        if (idx.empty()) continue;
        std::shuffle(idx.begin(), idx.end(), rng);

        std::vector<Real> p(k);
        Real total = 0;
        for (auto& v : p) total += (v = gamma(rng));
        if (!(total > 0)) {
            // Every gamma draw underflowed (tiny h): the Dirichlet mass sits on one client.
            std::fill(p.begin(), p.end(), 0.0);
            p[std::uniform_int_distribution<std::size_t>(0, k - 1)(rng)] = 1.0;
            total = 1.0;
        }
        const auto n = static_cast<Real>(idx.size());
        Real cum = 0;
        std::size_t start = 0;
        for (std::size_t client = 0; client < k; ++client) {
            cum += p[client] / total;
            std::size_t end = client + 1 == k ? idx.size()
                                              : std::min(idx.size(), static_cast<std::size_t>(cum * n));
            end = std::max(end, start);
            for (std::size_t i = start; i < end; ++i) part.assignments[client].push_back(idx[i]);
            start = end;
        }
    }

    for (;;) {
        auto empty = std::find_if(part.assignments.begin(), part.assignments.end(),
                                  [](const auto& a) { return a.empty(); });
        if (empty == part.assignments.end()) break;
        auto largest = std::max_element(part.assignments.begin(), part.assignments.end(),
                                        [](const auto& a, const auto& b) { return a.size() < b.size(); });
        empty->push_back(largest->back());
        largest->pop_back();
    }
    for (auto& a : part.assignments) std::sort(a.begin(), a.end());
    return part;
}

std::vector<std::vector<Index>> class_histograms(const ClientPartition& p, const Dataset& ds) {
    std::vector<std::vector<Index>> h(p.num_clients(), std::vector<Index>(static_cast<std::size_t>(ds.num_classes), 0));
    for (std::size_t c = 0; c < p.num_clients(); ++c)
        for (auto i : p.assignments[c]) ++h[c][static_cast<std::size_t>(ds.ys[static_cast<std::size_t>(i)])];
    return h;
}

// ---- triggers -------------------------------------------------------------------

Trigger Trigger::square_at(ImageDims dims, Index top, Index left, Index size, int target_label, Real fill) {
    if (size <= 0 || top < 0 || left < 0 || top + size > dims.height || left + size > dims.width)
        throw DimensionError("trigger square does not fit the image");
    Trigger t;
    t.pattern = Tensor({dims.channels, dims.height, dims.width});
    t.mask = Tensor({dims.height, dims.width});
    t.target_label = target_label;
    for (Index y = top; y < top + size; ++y) {
        for (Index x = left; x < left + size; ++x) {
            t.mask[y * dims.width + x] = 1.0;
            for (Index c = 0; c < dims.channels; ++c)
                t.pattern[(c * dims.height + y) * dims.width + x] = std::clamp(fill, 0.0, 1.0);
        }
    }
    return t;
}

Trigger Trigger::corner_square(ImageDims dims, Index size, int target_label, Real fill, Index margin) {
    return square_at(dims, dims.height - size - margin, dims.width - size - margin, size, target_label, fill);
}

ImageDims Trigger::dims() const {
    return {pattern.dim(0), pattern.dim(1), pattern.dim(2)};
}

void Trigger::validate() const {
    if (pattern.rank() != 3 || mask.rank() != 2 || mask.dim(0) != pattern.dim(1) || mask.dim(1) != pattern.dim(2))
        throw DimensionError("trigger pattern must be [C,H,W] and mask [H,W]");
    for (Index i = 0; i < mask.size(); ++i)
        if (mask[i] != 0.0 && mask[i] != 1.0) throw DimensionError("trigger mask must be binary");
}

Trigger::Box Trigger::bounding_box() const {
    const Index h = mask.dim(0), w = mask.dim(1);
    Index top = h, left = w, bottom = -1, right = -1;
    for (Index y = 0; y < h; ++y)
        for (Index x = 0; x < w; ++x)
            if (mask[y * w + x] != 0.0) {
                top = std::min(top, y);
                left = std::min(left, x);
                bottom = std::max(bottom, y);
                right = std::max(right, x);
            }
    if (bottom < 0) return {};
    return {top, left, bottom - top + 1, right - left + 1};
}

Tensor Trigger::patch() const {
    const Box b = bounding_box();
    const ImageDims d = dims();
    Tensor out({d.channels, b.height, b.width});
    for (Index c = 0; c < d.channels; ++c)
        for (Index y = 0; y < b.height; ++y)
            for (Index x = 0; x < b.width; ++x)
                out[(c * b.height + y) * b.width + x] = pattern[(c * d.height + b.top + y) * d.width + b.left + x];
    return out;
}

void apply_trigger_rows(RowMatrix& rows, const Trigger& trig) {
    const ImageDims d = trig.dims();
    if (rows.cols() != d.size()) throw DimensionError("apply_trigger: sample size does not match trigger dims");
    const Index plane = d.height * d.width;
    for (Index p = 0; p < plane; ++p) {
        const Real m = trig.mask[p];
        if (m == 0.0) continue;
        for (Index c = 0; c < d.channels; ++c) {
            const Index k = c * plane + p;
            const Real v = trig.pattern[k];
            if (m == 1.0) {
                rows.col(k).setConstant(v);
            } else {
                rows.col(k) = ((1.0 - m) * rows.col(k).array() + m * v).matrix();
            }
        }
    }
}

RowMatrix triggered_copy(const RowMatrix& rows, const Trigger& trig) {
    RowMatrix out = rows;
    apply_trigger_rows(out, trig);
    return out;
}

Tensor apply_trigger(const Tensor& x, const Trigger& trig) {
    const ImageDims d = trig.dims();
    Tensor out = x;
    if (x.rank() == 3) {
        if (x.shape() != Shape{d.channels, d.height, d.width})
            throw DimensionError("apply_trigger: image shape " + shape_string(x.shape()) + " does not match trigger");
        RowMatrix row = out.matrix(1, d.size());
        apply_trigger_rows(row, trig);
        out.matrix(1, d.size()) = row;
        return out;
    }
    if (x.rank() == 4) {
        if (x.dim(1) != d.channels || x.dim(2) != d.height || x.dim(3) != d.width)
            throw DimensionError("apply_trigger: batch shape " + shape_string(x.shape()) + " does not match trigger");
        RowMatrix rows = out.matrix(x.dim(0), d.size());
        apply_trigger_rows(rows, trig);
        out.matrix(x.dim(0), d.size()) = rows;
        return out;
    }
    throw DimensionError("apply_trigger expects [C,H,W] or [N,C,H,W]");
}

Tensor resize_trigger(const Tensor& pattern, Index target_h, Index target_w) {
    if (target_h <= 0 || target_w <= 0) throw DimensionError("resize_trigger: target dims must be positive");
    Index c = 1, h = 0, w = 0;
    if (pattern.rank() == 2) {
        h = pattern.dim(0);
        w = pattern.dim(1);
    } else if (pattern.rank() == 3) {
        c = pattern.dim(0);
        h = pattern.dim(1);
        w = pattern.dim(2);
    } else {
        throw DimensionError("resize_trigger expects [h,w] or [C,h,w]");
    }
    if (h <= 0 || w <= 0) throw DimensionError("resize_trigger: empty source pattern");
    Shape shape = pattern.rank() == 2 ? Shape{target_h, target_w} : Shape{c, target_h, target_w};
    Tensor out(shape);
    for (Index ch = 0; ch < c; ++ch)
        for (Index i = 0; i < target_h; ++i)
            for (Index j = 0; j < target_w; ++j)
                out[(ch * target_h + i) * target_w + j] =
                    pattern[(ch * h + (i * h) / target_h) * w + (j * w) / target_w];
    return out;
}

Trigger average_triggers(std::span<const Trigger> triggers) {
    if (triggers.empty()) throw ConfigError("average_triggers: no triggers");
    Trigger out = triggers.front();
    for (std::size_t i = 1; i < triggers.size(); ++i) {
        if (!(triggers[i].mask == out.mask)) throw DimensionError("average_triggers: masks differ");
        out.pattern.data() += triggers[i].pattern.data();
    }
    out.pattern.data() /= static_cast<Real>(triggers.size());
    return out;
}

ArrayFile make_trigger_file(const Trigger& trig, nlohmann::json extra) {
    ArrayFile f;
    f.header = std::move(extra);
    f.header["kind"] = "trigger";
    f.header["target_label"] = trig.target_label;
    f.header["pattern_shape"] = trig.pattern.shape();
    f.header["mask_shape"] = trig.mask.shape();
    f.values.resize(trig.pattern.size() + trig.mask.size());
    f.values << trig.pattern.data(), trig.mask.data();
    return f;
}

Trigger parse_trigger_file(const ArrayFile& file) {
    if (file.header.value("kind", std::string()) != "trigger") throw ConfigError("array file is not a trigger");
    Trigger t;
    t.target_label = file.header.at("target_label").get<int>();
    const auto ps = file.header.at("pattern_shape").get<Shape>();
    const auto ms = file.header.at("mask_shape").get<Shape>();
    const Index np = shape_size(ps);
    if (np + shape_size(ms) != file.values.size()) throw DimensionError("trigger file payload length mismatch");
    t.pattern = Tensor(ps, file.values.head(np));
    t.mask = Tensor(ms, file.values.tail(shape_size(ms)));
    t.validate();
    return t;
}

}  // namespace flipfl::data
