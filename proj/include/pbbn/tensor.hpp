#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <limits>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace pbbn {

using Shape = std::vector<std::size_t>;
using Axis = std::size_t;

inline std::size_t shape_volume(const Shape& shape) {
    std::size_t n = 1;
    for (std::size_t e : shape) n *= e;
    return n;
}

inline std::string shape_string(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ',';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

/// Dense N-dimensional array, row-major (last axis varies fastest).
/// Instantiated as Tensor<float> for training/inference and Tensor<double>
/// for the gradient-check suite.
template <typename T>
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(Shape shape, T fill = T{}) : shape_(std::move(shape)) {
        validate_shape();
        data_.assign(shape_volume(shape_), fill);
    }

    Tensor(Shape shape, std::vector<T> buffer) : shape_(std::move(shape)), data_(std::move(buffer)) {
        validate_shape();
        if (shape_volume(shape_) != data_.size()) {
            throw std::invalid_argument("tensor: buffer length " + std::to_string(data_.size()) +
                                        " does not match shape " + shape_string(shape_));
        }
    }

    const Shape& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t extent(std::size_t axis) const { return shape_.at(axis); }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    T* data() { return data_.data(); }
    const T* data() const { return data_.data(); }
    std::span<T> values() { return data_; }
    std::span<const T> values() const { return data_; }

    T& operator[](std::size_t i) { return data_[i]; }
    const T& operator[](std::size_t i) const { return data_[i]; }

    /// Checked multi-index access, row-major.
    T& at(std::initializer_list<std::size_t> idx) { return data_[offset(idx)]; }
    const T& at(std::initializer_list<std::size_t> idx) const { return data_[offset(idx)]; }

    std::size_t offset(std::initializer_list<std::size_t> idx) const {
        if (idx.size() != shape_.size())
            throw std::invalid_argument("tensor: index rank mismatch");
        std::size_t off = 0;
        std::size_t axis = 0;
        for (std::size_t i : idx) {
            if (i >= shape_[axis])
                throw std::out_of_range("tensor: index out of range on axis " + std::to_string(axis));
            off = off * shape_[axis] + i;
            ++axis;
        }
        return off;
    }

    bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

    void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

private:
    void validate_shape() const {
        if (shape_.empty())
            throw std::invalid_argument("tensor: rank must be >= 1");
        for (std::size_t e : shape_) {
            if (e == 0)
                throw std::invalid_argument("tensor: zero extent in shape " + shape_string(shape_));
        }
    }

    Shape shape_;
    std::vector<T> data_;
};

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

enum class Reduce { Sum, Mean, Max };

/// Reduce over a set of axes. Reduced axes are removed unless keep_dims is
/// set (then kept as extent 1); reducing every axis yields a shape-[1]
/// tensor. Sum/mean accumulate in double regardless of T.
template <typename T>
Tensor<T> reduce(const Tensor<T>& t, const std::vector<Axis>& axes, Reduce kind, bool keep_dims = false) {
    const std::size_t rank = t.rank();
    std::vector<bool> reduced(rank, false);
    for (Axis a : axes) {
        if (a >= rank)
            throw std::invalid_argument("reduce: axis " + std::to_string(a) + " out of range for rank " +
                                        std::to_string(rank));
        if (reduced[a])
            throw std::invalid_argument("reduce: duplicate axis " + std::to_string(a));
        reduced[a] = true;
    }

    Shape out_shape;
    for (std::size_t a = 0; a < rank; ++a) {
        if (!reduced[a]) out_shape.push_back(t.extent(a));
        else if (keep_dims) out_shape.push_back(1);
    }
    if (out_shape.empty()) out_shape.push_back(1);

    const std::size_t out_size = shape_volume(out_shape);
    std::vector<double> acc(out_size, kind == Reduce::Max ? -std::numeric_limits<double>::infinity() : 0.0);

    // out strides over the kept axes, in input-axis order
    std::vector<std::size_t> out_stride(rank, 0);
    {
        std::size_t stride = out_size;
        for (std::size_t a = 0; a < rank; ++a) {
            if (!reduced[a]) {
                stride /= t.extent(a);
                out_stride[a] = stride;
            }
        }
    }

    std::vector<std::size_t> idx(rank, 0);
    std::size_t out_off = 0;
    for (std::size_t flat = 0; flat < t.size(); ++flat) {
        double v = static_cast<double>(t[flat]);
        if (kind == Reduce::Max) acc[out_off] = std::max(acc[out_off], v);
        else acc[out_off] += v;

        for (std::size_t a = rank; a-- > 0;) {
            ++idx[a];
            out_off += out_stride[a];
            if (idx[a] < t.extent(a)) break;
            out_off -= out_stride[a] * t.extent(a);
            idx[a] = 0;
        }
    }

    std::size_t reduced_count = 1;
    for (std::size_t a = 0; a < rank; ++a)
        if (reduced[a]) reduced_count *= t.extent(a);

    Tensor<T> out(out_shape);
    for (std::size_t i = 0; i < out_size; ++i) {
        double v = acc[i];
        if (kind == Reduce::Mean) v /= static_cast<double>(reduced_count);
        out[i] = static_cast<T>(v);
    }
    return out;
}

/// Rank-2 matrix product. Accumulates over k in ascending order for every
/// output element, so a double instantiation matches a naive triple loop
/// bit-for-bit.
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.rank() != 2 || b.rank() != 2)
        throw std::invalid_argument("matmul: both operands must be rank 2");
    const std::size_t m = a.extent(0), k = a.extent(1);
    const std::size_t k2 = b.extent(0), n = b.extent(1);
    if (k != k2)
        throw std::invalid_argument("matmul: inner extents differ: " + shape_string(a.shape()) + " x " +
                                    shape_string(b.shape()));
    Tensor<T> out(Shape{m, n}, T{});
    for (std::size_t i = 0; i < m; ++i) {
        const T* arow = a.data() + i * k;
        T* orow = out.data() + i * n;
        for (std::size_t l = 0; l < k; ++l) {
            const T av = arow[l];
            const T* brow = b.data() + l * n;
            for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
        }
    }
    return out;
}

}  // namespace pbbn
