#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <type_traits>
#include <utility>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "repsteer/errors.hpp"

namespace repsteer {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ',';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

// Allocator whose value-less construct() leaves trivially constructible
// elements uninitialized, so op outputs that are fully overwritten skip a fill.
template <typename T, typename A = std::allocator<T>>
struct default_init_allocator : A {
    using A::A;
    template <typename U>
    struct rebind {
        using other = default_init_allocator<U, typename std::allocator_traits<A>::template rebind_alloc<U>>;
    };
    template <typename U>
    void construct(U* p) noexcept(std::is_nothrow_default_constructible_v<U>) {
        ::new (static_cast<void*>(p)) U;
    }
    template <typename U, typename... Args>
    void construct(U* p, Args&&... args) {
        std::allocator_traits<A>::construct(static_cast<A&>(*this), p, std::forward<Args>(args)...);
    }
};

struct uninitialized_t {};
inline constexpr uninitialized_t uninitialized{};

// Dense row-major array. Rank 0 is a scalar holding one element.
template <typename T>
class Array {
public:
    using value_type = T;

    Array() : shape_{}, data_(1, T{0}) {}

    explicit Array(Shape shape, T fill = T{0}) : shape_(std::move(shape)), data_(shape_size(shape_), fill) {}

    // Contents unspecified until written.
    Array(Shape shape, uninitialized_t) : shape_(std::move(shape)), data_(shape_size(shape_)) {}

    Array(Shape shape, const std::vector<T>& data) : shape_(std::move(shape)), data_(data.begin(), data.end()) {
        if (shape_size(shape_) != data_.size()) {
            throw ShapeError("array data length " + std::to_string(data_.size()) + " does not match shape " +
                             shape_str(shape_));
        }
    }

    static Array scalar(T v) { return Array(Shape{}, std::vector<T>{v}); }

    static Array vector(std::initializer_list<T> values) {
        return Array(Shape{values.size()}, std::vector<T>(values));
    }

    const Shape& shape() const noexcept { return shape_; }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t size() const noexcept { return data_.size(); }
    std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
    std::size_t rows() const { return rank() == 0 ? 1 : shape_[0]; }
    std::size_t cols() const { return rank() < 2 ? 1 : shape_[1]; }

    T* data() noexcept { return data_.data(); }
    const T* data() const noexcept { return data_.data(); }
    std::span<T> flat() noexcept { return data_; }
    std::span<const T> flat() const noexcept { return data_; }
    using Storage = std::vector<T, default_init_allocator<T>>;
    Storage& storage() noexcept { return data_; }
    const Storage& storage() const noexcept { return data_; }
    std::vector<T> to_vector() const { return std::vector<T>(data_.begin(), data_.end()); }

    T& operator[](std::size_t i) noexcept { return data_[i]; }
    const T& operator[](std::size_t i) const noexcept { return data_[i]; }
    T& at(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
    const T& at(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }

    T item() const {
        if (data_.size() != 1) throw ShapeError("item() on array of shape " + shape_str(shape_));
        return data_[0];
    }

    bool all_finite() const noexcept {
        // x - x is NaN exactly when x is NaN or infinite.
        T acc{0};
        for (const T v : data_) acc += v - v;
        return acc == T{0};
    }

    void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

    Array reshaped(Shape shape) const {
        if (shape_size(shape) != data_.size()) {
            throw ShapeError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
        }
        Array out(std::move(shape), uninitialized);
        out.data_ = data_;
        return out;
    }

    template <typename U>
    Array<U> cast() const {
        Array<U> out(shape_, uninitialized);
        std::copy(data_.begin(), data_.end(), out.data());
        return out;
    }

    friend bool operator==(const Array& a, const Array& b) { return a.shape_ == b.shape_ && a.data_ == b.data_; }

private:
    Shape shape_;
    Storage data_;
};

template <typename T>
T max_abs_diff(const Array<T>& a, const Array<T>& b) {
    if (a.shape() != b.shape()) throw ShapeError("max_abs_diff shape mismatch");
    T m{0};
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

}  // namespace repsteer
