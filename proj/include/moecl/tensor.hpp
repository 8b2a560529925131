#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <utility>
#include <initializer_list>
#include <sstream>
#include <string>
#include <vector>

#include "moecl/errors.hpp"

namespace moecl {

// Dense row-major matrix. Scalars are 1x1, row vectors 1xN, column vectors Nx1.
// Plain value type: copyable, no graph state. Gradient bookkeeping lives in the
// execution contexts (tape.hpp), not here.
template <typename S>
class Tensor {
  public:
    Tensor() = default;

    Tensor(int64_t rows, int64_t cols, S fill = S(0)) : rows_(rows), cols_(cols) {
        if (rows < 0 || cols < 0) throw ShapeError("tensor shape must be non-negative, got " + shape_str(rows, cols));
        data_.assign(static_cast<size_t>(rows * cols), fill);
    }

    Tensor(std::initializer_list<std::initializer_list<S>> rows) {
        rows_ = static_cast<int64_t>(rows.size());
        cols_ = rows_ == 0 ? 0 : static_cast<int64_t>(rows.begin()->size());
        data_.reserve(static_cast<size_t>(rows_ * cols_));
        for (const auto& r : rows) {
            if (static_cast<int64_t>(r.size()) != cols_)
                throw ShapeError("ragged initializer: row of " + std::to_string(r.size()) + " in " + shape_str(rows_, cols_));
            data_.insert(data_.end(), r.begin(), r.end());
        }
    }

    static Tensor zeros(int64_t r, int64_t c) { return Tensor(r, c, S(0)); }
    static Tensor full(int64_t r, int64_t c, S v) { return Tensor(r, c, v); }

    int64_t rows() const { return rows_; }
    int64_t cols() const { return cols_; }
    int64_t numel() const { return rows_ * cols_; }
    bool empty() const { return data_.empty(); }
    bool same_shape(const Tensor& o) const { return rows_ == o.rows_ && cols_ == o.cols_; }

    S& at(int64_t r, int64_t c) { return data_[static_cast<size_t>(r * cols_ + c)]; }
    const S& at(int64_t r, int64_t c) const { return data_[static_cast<size_t>(r * cols_ + c)]; }

    S* row_ptr(int64_t r) { return data_.data() + r * cols_; }
    const S* row_ptr(int64_t r) const { return data_.data() + r * cols_; }

    S* data() { return data_.data(); }
    const S* data() const { return data_.data(); }
    const std::vector<S>& vec() const { return data_; }
    std::vector<S>& vec() { return data_; }

    std::string shape_string() const { return shape_str(rows_, cols_); }

    bool all_finite() const {
        for (S v : data_)
            if (!std::isfinite(static_cast<double>(v))) return false;
        return true;
    }

    bool bit_equal(const Tensor& o) const {
        if (!same_shape(o)) return false;
        return data_.empty() || std::memcmp(data_.data(), o.data_.data(), data_.size() * sizeof(S)) == 0;
    }

    static std::string shape_str(int64_t r, int64_t c) {
        return "(" + std::to_string(r) + "x" + std::to_string(c) + ")";
    }

  private:
    int64_t rows_ = 0;
    int64_t cols_ = 0;
    std::vector<S> data_;
};

// FNV-1a over the raw byte image of the data. Used to prove tensors untouched
// (freezing contract, evaluation purity); bit-level, so any drift shows up.
template <typename S>
uint64_t tensor_hash(const Tensor<S>& t) {
    uint64_t h = 0xcbf29ce484222325ull;
    auto mix = [&h](const unsigned char* p, size_t n) {
        for (size_t i = 0; i < n; ++i) {
            h ^= p[i];
            h *= 0x100000001b3ull;
        }
    };
    int64_t dims[2] = {t.rows(), t.cols()};
    mix(reinterpret_cast<const unsigned char*>(dims), sizeof(dims));
    if (t.numel() > 0)
        mix(reinterpret_cast<const unsigned char*>(t.data()), static_cast<size_t>(t.numel()) * sizeof(S));
    return h;
}

// Counter-based deterministic RNG (splitmix64 applied to seed + counter).
// The raw u64 stream depends only on (seed, counter), never on call history
// interleaving of other instances, and is identical across platforms.
class Rng {
  public:
    explicit Rng(uint64_t seed) : seed_(seed) {}

    uint64_t next_u64() {
        uint64_t z = seed_ + 0x9e3779b97f4a7c15ull * ++counter_;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }

    // Uniform in [0, 1), 53 bits of precision.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    // Uniform integer in [0, n). Multiply-shift; bias is below 2^-53 for desk-scale n.
    uint64_t below(uint64_t n) {
        return static_cast<uint64_t>((static_cast<unsigned __int128>(next_u64()) * n) >> 64);
    }

    // Standard normal via Box-Muller, one cached spare per pair of uniforms.
    double gauss() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = uniform(), u2 = uniform();
        double r = std::sqrt(-2.0 * std::log1p(-u1));
        double a = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(a);
        have_spare_ = true;
        return r * std::cos(a);
    }

    // Independent substream: same master seed + distinct stream tag give the
    // same child stream regardless of what this instance has produced so far.
    Rng fork(uint64_t stream) const {
        uint64_t z = seed_ ^ (0x9e3779b97f4a7c15ull + (stream << 1) + 1);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return Rng(z ^ (z >> 31));
    }

    template <typename S>
    void fill_gaussian(Tensor<S>& t, double stddev) {
        for (int64_t i = 0; i < t.numel(); ++i) t.data()[i] = static_cast<S>(gauss() * stddev);
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[below(i)]);
    }

  private:
    uint64_t seed_;
    uint64_t counter_ = 0;
    double spare_ = 0.0;
    bool have_spare_ = false;
};

}  // namespace moecl
