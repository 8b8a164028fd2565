#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace dynpool {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
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

/// Raised when an operation receives operands whose shapes it cannot accept.
class ShapeError : public std::invalid_argument {
public:
    ShapeError(const std::string& op, const Shape& expected, const Shape& actual)
        : std::invalid_argument(op + ": expected shape " + shape_string(expected) + ", got " +
                                shape_string(actual)),
          op_(op), expected_(expected), actual_(actual) {}

    ShapeError(const std::string& op, const std::string& what)
        : std::invalid_argument(op + ": " + what), op_(op) {}

    const std::string& op() const noexcept { return op_; }
    const Shape& expected() const noexcept { return expected_; }
    const Shape& actual() const noexcept { return actual_; }

private:
    std::string op_;
    Shape expected_;
    Shape actual_;
};

/// Raised when a forward pass produces NaN or Inf from finite inputs.
class NumericError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Dense row-major array. Batched sequence data uses the layout [B, T, C].
template <class T>
class Tensor {
public:
    using value_type = T;

    Tensor() = default;

    explicit Tensor(Shape shape, T fill = T(0))
        : shape_(std::move(shape)), data_(shape_size(shape_), fill) {}

    Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
        if (shape_size(shape_) != data_.size()) {
            throw ShapeError("tensor", "shape " + shape_string(shape_) + " does not match " +
                                           std::to_string(data_.size()) + " values");
        }
    }

    const Shape& shape() const noexcept { return shape_; }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty() && shape_.empty(); }

    std::span<T> data() noexcept { return data_; }
    std::span<const T> data() const noexcept { return data_; }
    T* ptr() noexcept { return data_.data(); }
    const T* ptr() const noexcept { return data_.data(); }

    T& operator[](std::size_t i) noexcept { return data_[i]; }
    const T& operator[](std::size_t i) const noexcept { return data_[i]; }

    // [B, T, C] accessors
    T& at(std::size_t b, std::size_t t, std::size_t c) {
        return data_[(b * shape_[1] + t) * shape_[2] + c];
    }
    const T& at(std::size_t b, std::size_t t, std::size_t c) const {
        return data_[(b * shape_[1] + t) * shape_[2] + c];
    }

    void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

    Tensor reshaped(Shape shape) const {
        return Tensor(std::move(shape), data_);
    }

    template <class U>
    Tensor<U> cast() const {
        std::vector<U> out(data_.begin(), data_.end());
        return Tensor<U>(shape_, std::move(out));
    }

    bool all_finite() const {
        for (T v : data_) {
            if (!std::isfinite(v)) return false;
        }
        return true;
    }

    T item() const {
        if (data_.size() != 1) throw ShapeError("item", Shape{1}, shape_);
        return data_[0];
    }

    friend bool operator==(const Tensor& a, const Tensor& b) {
        return a.shape_ == b.shape_ && a.data_ == b.data_;
    }

private:
    Shape shape_;
    std::vector<T> data_;
};

inline void expect_rank(const std::string& op, const Shape& shape, std::size_t rank) {
    if (shape.size() != rank) {
        throw ShapeError(op, "expected rank " + std::to_string(rank) + ", got shape " +
                                 shape_string(shape));
    }
}

}  // namespace dynpool
