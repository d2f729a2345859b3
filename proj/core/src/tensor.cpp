#include "headkd/tensor.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

namespace headkd {

int64_t shape_numel(const Shape& s) {
    int64_t n = 1;
    for (int64_t d : s) n *= d;
    return n;
}

std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
    os << "]";
    return os.str();
}

Tensor::Tensor(Shape shape) : shape_(std::move(shape)) {
    for (int64_t d : shape_) {
        if (d < 0) throw std::invalid_argument("Tensor: negative dimension in " + shape_str(shape_));
    }
    data_.assign(static_cast<size_t>(shape_numel(shape_)), real(0));
}

Tensor::Tensor(Shape shape, std::vector<real> values) : shape_(std::move(shape)), data_(std::move(values)) {
    if (shape_numel(shape_) != static_cast<int64_t>(data_.size())) {
        throw std::invalid_argument("Tensor: value count does not match shape " + shape_str(shape_));
    }
}

Tensor Tensor::full(Shape shape, real v) {
    Tensor t(std::move(shape));
    t.fill(v);
    return t;
}

real Tensor::item() const {
    if (numel() != 1) throw std::logic_error("Tensor::item on non-scalar " + shape_str(shape_));
    return data_[0];
}

Tensor Tensor::reshaped(Shape new_shape) const {
    if (shape_numel(new_shape) != numel()) {
        throw std::invalid_argument("reshape " + shape_str(shape_) + " -> " + shape_str(new_shape));
    }
    return Tensor(std::move(new_shape), data_);
}

bool Tensor::all_finite() const {
    for (real v : data_) {
        if (!std::isfinite(v)) return false;
    }
    return true;
}

void Tensor::fill(real v) {
    for (real& x : data_) x = v;
}

void Tensor::add_(const Tensor& o) {
    if (!same_shape(o)) throw std::invalid_argument("add_: shape mismatch");
    for (size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
}

void Tensor::add_scaled_(const Tensor& o, real a) {
    if (!same_shape(o)) throw std::invalid_argument("add_scaled_: shape mismatch");
    for (size_t i = 0; i < data_.size(); ++i) data_[i] += a * o.data_[i];
}

void Tensor::scale_(real a) {
    for (real& x : data_) x *= a;
}

uint64_t fnv1a(const void* data, size_t n, uint64_t seed) {
    const unsigned char* p = static_cast<const unsigned char*>(data);
    uint64_t h = seed;
    for (size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 1099511628211ull;
    }
    return h;
}

uint64_t fnv1a_str(std::string_view s, uint64_t seed) { return fnv1a(s.data(), s.size(), seed); }

Rng Rng::stream(uint64_t seed, std::string_view purpose, uint64_t index) {
    uint64_t h = fnv1a_str(purpose);
    h = fnv1a(&seed, sizeof(seed), h);
    h = fnv1a(&index, sizeof(index), h);
    // splitmix64 finalizer so nearby seeds map to distant states
    h += 0x9e3779b97f4a7c15ull;
    h = (h ^ (h >> 30)) * 0xbf58476d1ce4e5b9ull;
    h = (h ^ (h >> 27)) * 0x94d049bb133111ebull;
    h = h ^ (h >> 31);
    return Rng(h);
}

real Rng::uniform(real lo, real hi) {
    std::uniform_real_distribution<real> d(lo, hi);
    return d(gen_);
}

real Rng::normal(real mean, real stddev) {
    std::normal_distribution<real> d(mean, stddev);
    return d(gen_);
}

int64_t Rng::uniform_int(int64_t lo, int64_t hi) {
    std::uniform_int_distribution<int64_t> d(lo, hi);
    return d(gen_);
}

Tensor Rng::normal_tensor(Shape shape, real mean, real stddev) {
    Tensor t(std::move(shape));
    for (int64_t i = 0; i < t.numel(); ++i) t[i] = normal(mean, stddev);
    return t;
}

}  // namespace headkd
