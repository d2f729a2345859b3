#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <string_view>
#include <vector>

namespace headkd {

/// Scalar type used by every tensor in the framework. Double by default so
/// finite-difference gradient checks are meaningful; define
/// HEADKD_SINGLE_PRECISION to build a float32 variant.
#ifdef HEADKD_SINGLE_PRECISION
using real = float;
#else
using real = double;
#endif

using Shape = std::vector<int64_t>;

int64_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

/// Dense row-major tensor of rank 0..4. Plain value type: copying copies the
/// buffer. All shape arithmetic is checked in debug-style asserts plus a few
/// explicit runtime checks on the public entry points.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Shape shape);
    Tensor(Shape shape, std::vector<real> values);

    static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }
    static Tensor full(Shape shape, real v);
    static Tensor scalar(real v) { return Tensor({}, {v}); }

    int64_t rank() const { return static_cast<int64_t>(shape_.size()); }
    int64_t numel() const { return static_cast<int64_t>(data_.size()); }
    int64_t size(int64_t dim) const { return shape_.at(static_cast<size_t>(dim)); }
    const Shape& shape() const { return shape_; }
    bool defined() const { return !shape_.empty() || !data_.empty(); }

    real* data() { return data_.data(); }
    const real* data() const { return data_.data(); }
    std::vector<real>& vec() { return data_; }
    const std::vector<real>& vec() const { return data_; }

    real& operator[](int64_t i) { return data_[static_cast<size_t>(i)]; }
    real operator[](int64_t i) const { return data_[static_cast<size_t>(i)]; }

    real& at(int64_t i, int64_t j) { return data_[static_cast<size_t>(i * size(1) + j)]; }
    real at(int64_t i, int64_t j) const { return data_[static_cast<size_t>(i * size(1) + j)]; }
    real& at(int64_t c, int64_t y, int64_t x) {
        return data_[static_cast<size_t>((c * size(1) + y) * size(2) + x)];
    }
    real at(int64_t c, int64_t y, int64_t x) const {
        return data_[static_cast<size_t>((c * size(1) + y) * size(2) + x)];
    }
    real& at(int64_t n, int64_t c, int64_t y, int64_t x) {
        return data_[static_cast<size_t>(((n * size(1) + c) * size(2) + y) * size(3) + x)];
    }
    real at(int64_t n, int64_t c, int64_t y, int64_t x) const {
        return data_[static_cast<size_t>(((n * size(1) + c) * size(2) + y) * size(3) + x)];
    }

    real item() const;

    /// Same data in a new shape (copy). numel must match.
    Tensor reshaped(Shape new_shape) const;

    bool all_finite() const;
    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

    void fill(real v);
    void add_(const Tensor& o);          // elementwise in-place add
    void add_scaled_(const Tensor& o, real a);  // this += a * o
    void scale_(real a);

private:
    Shape shape_;
    std::vector<real> data_;
};

/// Deterministic random stream. Streams are derived from a base seed plus a
/// purpose tag so that consumers (student init, assistant init, shuffling,
/// data generation) draw independently of each other.
class Rng {
public:
    explicit Rng(uint64_t seed) : gen_(seed) {}

    static Rng stream(uint64_t seed, std::string_view purpose, uint64_t index = 0);

    real uniform(real lo, real hi);
    real normal(real mean = 0, real stddev = 1);
    int64_t uniform_int(int64_t lo, int64_t hi);  // inclusive bounds
    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            size_t j = static_cast<size_t>(uniform_int(0, static_cast<int64_t>(i) - 1));
            std::swap(v[i - 1], v[j]);
        }
    }

    Tensor normal_tensor(Shape shape, real mean = 0, real stddev = 1);

    std::mt19937_64& engine() { return gen_; }

private:
    std::mt19937_64 gen_;
};

/// FNV-1a over raw bytes; used for parameter checksums and id-hash splits.
uint64_t fnv1a(const void* data, size_t n, uint64_t seed = 14695981039346656037ull);
uint64_t fnv1a_str(std::string_view s, uint64_t seed = 14695981039346656037ull);

}  // namespace headkd
