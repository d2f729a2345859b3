#include "headkd/nn.hpp"

#include <cmath>
#include <stdexcept>

namespace headkd::nn {

namespace {

Tensor kaiming(Shape shape, int64_t fan_in, Rng& rng) {
    Tensor t(shape);
    const real std = std::sqrt(real(2) / static_cast<real>(fan_in));
    for (int64_t i = 0; i < t.numel(); ++i) t[i] = rng.normal(0, std);
    return t;
}

}  // namespace

Conv2d::Conv2d(int64_t cin, int64_t cout, int64_t ksz, int64_t stride_, int64_t pad_, Rng& rng,
               bool with_bias)
    : stride(stride_), pad(pad_) {
    w = Var::leaf(kaiming({cout, cin, ksz, ksz}, cin * ksz * ksz, rng), true);
    Tensor bias({cout});
    if (with_bias) {
        const real bound = real(1) / std::sqrt(static_cast<real>(cin * ksz * ksz));
        for (int64_t i = 0; i < cout; ++i) bias[i] = rng.uniform(-bound, bound);
    }
    b = Var::leaf(std::move(bias), with_bias);
}

void Conv2d::collect(const std::string& prefix, ParamMap& out) const {
    out.emplace(prefix + ".w", w);
    if (b.requires_grad()) out.emplace(prefix + ".b", b);
}

Linear::Linear(int64_t in, int64_t out_dim, Rng& rng) {
    w = Var::leaf(kaiming({out_dim, in}, in, rng), true);
    Tensor bias({out_dim});
    const real bound = real(1) / std::sqrt(static_cast<real>(in));
    for (int64_t i = 0; i < out_dim; ++i) bias[i] = rng.uniform(-bound, bound);
    b = Var::leaf(std::move(bias), true);
}

void Linear::collect(const std::string& prefix, ParamMap& out) const {
    out.emplace(prefix + ".w", w);
    out.emplace(prefix + ".b", b);
}

void Sgd::step(ParamMap& params, real lr) {
    for (auto& [name, p] : params) {
        if (!p.requires_grad()) continue;
        Tensor& w = p.val_mut();
        auto it = velocity_.find(name);
        if (it == velocity_.end()) {
            it = velocity_.emplace(name, Tensor(w.shape())).first;
        }
        Tensor& v = it->second;
        if (!v.same_shape(w)) throw std::logic_error("Sgd: stale velocity for " + name);
        const bool has_g = p.has_grad();
        for (int64_t i = 0; i < w.numel(); ++i) {
            const real g = (has_g ? p.grad()[i] : real(0)) + weight_decay_ * w[i];
            v[i] = momentum_ * v[i] + g;
            w[i] -= lr * v[i];
        }
    }
}

void Sgd::zero_grad(ParamMap& params) {
    for (auto& [name, p] : params) p.zero_grad();
}

uint64_t param_checksum(const ParamMap& params) {
    uint64_t h = 1469598103934665603ull;
    auto mix = [&h](const void* data, size_t len) {
        const unsigned char* p = static_cast<const unsigned char*>(data);
        for (size_t i = 0; i < len; ++i) {
            h ^= p[i];
            h *= 1099511628211ull;
        }
    };
    for (const auto& [name, p] : params) {
        mix(name.data(), name.size());
        mix(p.val().data(), sizeof(real) * static_cast<size_t>(p.val().numel()));
    }
    return h;
}

std::vector<std::string> param_names(const ParamMap& params) {
    std::vector<std::string> names;
    names.reserve(params.size());
    for (const auto& [name, p] : params) names.push_back(name);
    return names;
}

}  // namespace headkd::nn
