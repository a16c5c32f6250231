#pragma once

#include <Eigen/Dense>

#include <cstddef>
#include <initializer_list>
#include <string>
#include <vector>

namespace flipfl {

using Real = double;
using Index = Eigen::Index;
using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;
/// Batches are stored one sample per row, features in row-major (C, H, W) order.
using RowMatrix = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowMap = Eigen::Map<RowMatrix>;
using ConstRowMap = Eigen::Map<const RowMatrix>;

using Shape = std::vector<Index>;

Index shape_size(const Shape& shape);
std::string shape_string(const Shape& shape);

/// Dense row-major tensor of 64-bit reals. Owns its storage as an Eigen vector
/// so that elementwise math can be written as Eigen expressions on `data()`.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Shape shape);
    Tensor(Shape shape, Vector data);
    Tensor(std::initializer_list<Index> shape, std::initializer_list<Real> values);

    static Tensor filled(Shape shape, Real value);

    const Shape& shape() const noexcept { return shape_; }
    Index rank() const noexcept { return static_cast<Index>(shape_.size()); }
    Index dim(Index axis) const { return shape_.at(static_cast<std::size_t>(axis)); }
    Index size() const noexcept { return data_.size(); }

    Vector& data() noexcept { return data_; }
    const Vector& data() const noexcept { return data_; }

    Real& operator[](Index i) { return data_[i]; }
    Real operator[](Index i) const { return data_[i]; }

    /// View as rows x cols (row-major); rows * cols must equal size().
    RowMap matrix(Index rows, Index cols);
    ConstRowMap matrix(Index rows, Index cols) const;
    /// First axis as rows, the remaining axes flattened into columns.
    ConstRowMap rows() const;
    RowMap rows();

    bool all_finite() const { return data_.allFinite(); }
    bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

    /// Same data, new shape of equal size.
    Tensor reshaped(Shape shape) const;

    friend bool operator==(const Tensor& a, const Tensor& b) {
        return a.shape_ == b.shape_ && a.data_ == b.data_;
    }

private:
    Shape shape_;
    Vector data_;
};

/// Throws DimensionError with `what` context if shapes differ.
void require_same_shape(const Tensor& a, const Tensor& b, const char* what);

/// sign(x) with sign(0) = 0.
inline Real sign_of(Real x) { return static_cast<Real>((x > 0) - (x < 0)); }

}  // namespace flipfl
