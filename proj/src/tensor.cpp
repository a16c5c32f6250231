#include "flipfl/tensor.hpp"

#include "flipfl/errors.hpp"

#include <sstream>
#include <utility>

namespace flipfl {

Index shape_size(const Shape& shape) {
    Index n = 1;
    for (auto d : shape) {
        if (d < 0) throw DimensionError("negative dimension in shape");
        n *= d;
    }
    return n;
}

std::string shape_string(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ',';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

Tensor::Tensor(Shape shape) : shape_(std::move(shape)), data_(Vector::Zero(shape_size(shape_))) {}

Tensor::Tensor(Shape shape, Vector data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (shape_size(shape_) != data_.size()) {
        throw DimensionError("tensor data length " + std::to_string(data_.size()) +
                             " does not match shape " + shape_string(shape_));
    }
}

Tensor::Tensor(std::initializer_list<Index> shape, std::initializer_list<Real> values)
    : shape_(shape), data_(static_cast<Index>(values.size())) {
    Index i = 0;
    for (auto v : values) data_[i++] = v;
    if (shape_size(shape_) != data_.size()) {
        throw DimensionError("tensor initializer length does not match shape " + shape_string(shape_));
    }
}

Tensor Tensor::filled(Shape shape, Real value) {
    Tensor t(std::move(shape));
    t.data_.setConstant(value);
    return t;
}

RowMap Tensor::matrix(Index rows, Index cols) {
    if (rows * cols != size()) throw DimensionError("matrix view size mismatch");
    return RowMap(data_.data(), rows, cols);
}

ConstRowMap Tensor::matrix(Index rows, Index cols) const {
    if (rows * cols != size()) throw DimensionError("matrix view size mismatch");
    return ConstRowMap(data_.data(), rows, cols);
}

ConstRowMap Tensor::rows() const {
    if (shape_.empty()) throw DimensionError("rows() on rank-0 tensor");
    const Index n = shape_[0];
    return matrix(n, n == 0 ? 0 : size() / n);
}

RowMap Tensor::rows() {
    if (shape_.empty()) throw DimensionError("rows() on rank-0 tensor");
    const Index n = shape_[0];
    return matrix(n, n == 0 ? 0 : size() / n);
}

Tensor Tensor::reshaped(Shape shape) const {
    return Tensor(std::move(shape), data_);
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* what) {
    if (!a.same_shape(b)) {
        throw DimensionError(std::string(what) + ": shape " + shape_string(a.shape()) + " vs " +
                             shape_string(b.shape()));
    }
}

}  // namespace flipfl
