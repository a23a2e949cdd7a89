// SPDX-License-Identifier: Apache-2.0
//
// Shared primitives: error type, dense row-major matrices, portable RNG.

#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace mlprune {

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

template <class T>
class MatrixView {
public:
    MatrixView() = default;
    MatrixView(T * data, std::size_t rows, std::size_t cols) : data_(data), rows_(rows), cols_(cols) {}

    std::size_t rows() const { return rows_; }
    std::size_t cols() const { return cols_; }
    std::size_t size() const { return rows_ * cols_; }

    T & operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }
    std::span<T> row(std::size_t r) const { return {data_ + r * cols_, cols_}; }
    std::span<T> flat() const { return {data_, size()}; }

    operator MatrixView<const T>() const { return {data_, rows_, cols_}; }

private:
    T *         data_ = nullptr;
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
};

template <class T>
class Matrix {
public:
    Matrix() = default;
    Matrix(std::size_t rows, std::size_t cols, T fill = T{}) : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
    Matrix(std::size_t rows, std::size_t cols, std::vector<T> data) : rows_(rows), cols_(cols), data_(std::move(data)) {
        if (data_.size() != rows * cols) {
            throw Error("matrix: buffer size does not match shape");
        }
    }

    std::size_t rows() const { return rows_; }
    std::size_t cols() const { return cols_; }
    std::size_t size() const { return data_.size(); }

    T &       operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
    const T & operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

    std::span<T>       row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
    std::span<const T> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

    std::vector<T> &       storage() { return data_; }
    const std::vector<T> & storage() const { return data_; }

    MatrixView<T>       view() { return {data_.data(), rows_, cols_}; }
    MatrixView<const T> view() const { return {data_.data(), rows_, cols_}; }
    operator MatrixView<const T>() const { return view(); }

    bool operator==(const Matrix &) const = default;

private:
    std::size_t    rows_ = 0;
    std::size_t    cols_ = 0;
    std::vector<T> data_;
};

using MatrixF = Matrix<float>;
using MatrixD = Matrix<double>;

// splitmix64: fixed output sequence on every platform, unlike the
// implementation-defined std:: distributions.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : state_(seed) {}

    std::uint64_t next() {
        std::uint64_t z = (state_ += 0x9E3779B97F4A7C15ULL);
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
        return z ^ (z >> 31);
    }

    // [0, 1)
    double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // [0, n)
    std::uint64_t below(std::uint64_t n) {
        if (n == 0) {
            throw Error("rng: empty range");
        }
        const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() - std::numeric_limits<std::uint64_t>::max() % n;
        std::uint64_t x;
        do {
            x = next();
        } while (x >= limit);
        return x % n;
    }

    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        while (u1 <= 0.0) {
            u1 = uniform();
        }
        const double u2  = uniform();
        const double mag = std::sqrt(-2.0 * std::log(u1));
        spare_     = mag * std::sin(2.0 * M_PI * u2);
        has_spare_ = true;
        return mag * std::cos(2.0 * M_PI * u2);
    }

private:
    std::uint64_t state_;
    double        spare_     = 0.0;
    bool          has_spare_ = false;
};

} // namespace mlprune
