#pragma once

#include "headkd/autograd.hpp"
#include "headkd/tensor.hpp"

#include <map>
#include <string>
#include <vector>

namespace headkd::nn {

// Ordered name -> parameter map. Iteration order is lexicographic, which
// makes export, checksums, and optimizer state independent of build order.
using ParamMap = std::map<std::string, Var>;

struct Conv2d {
    Var w;  // (Cout, Cin, k, k)
    Var b;  // (Cout)
    int64_t stride = 1;
    int64_t pad = 0;

    Conv2d() = default;
    Conv2d(int64_t cin, int64_t cout, int64_t ksz, int64_t stride, int64_t pad, Rng& rng,
           bool with_bias = true);

    Var forward(const Var& x) const { return conv2d(x, w, b, stride, pad); }
    void collect(const std::string& prefix, ParamMap& out) const;
};

struct Linear {
    Var w;  // (Out, In)
    Var b;  // (Out)

    Linear() = default;
    Linear(int64_t in, int64_t out, Rng& rng);

    Var forward(const Var& x) const { return linear(x, w, b); }
    void collect(const std::string& prefix, ParamMap& out) const;
};

// SGD with momentum and decoupled-by-name weight decay, velocity keyed by
// parameter name so the schedule survives graph rebuilds between steps.
class Sgd {
  public:
    Sgd(real momentum, real weight_decay) : momentum_(momentum), weight_decay_(weight_decay) {}

    void step(ParamMap& params, real lr);
    void zero_grad(ParamMap& params);

    real momentum() const { return momentum_; }
    real weight_decay() const { return weight_decay_; }

    // Exposed so checkpoints can persist and restore optimizer state exactly.
    std::map<std::string, Tensor>& velocity() { return velocity_; }

  private:
    real momentum_;
    real weight_decay_;
    std::map<std::string, Tensor> velocity_;
};

// FNV-1a over the raw bytes of every parameter value, in name order.
uint64_t param_checksum(const ParamMap& params);

std::vector<std::string> param_names(const ParamMap& params);

}  // namespace headkd::nn
