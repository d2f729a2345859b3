#pragma once

#include <functional>
#include <memory>
#include <utility>
#include <vector>

#include "headkd/tensor.hpp"

namespace headkd {

struct Node;

/// Handle to a node of a define-by-run computation graph. Vars are cheap to
/// copy (shared ownership). A Var without gradient requirements behaves as a
/// plain immutable tensor; graph edges are only recorded when at least one
/// operand requires gradients.
class Var {
public:
    Var() = default;

    static Var leaf(Tensor v, bool requires_grad);
    static Var constant(Tensor v) { return leaf(std::move(v), false); }
    static Var scalar(real v) { return constant(Tensor::scalar(v)); }

    bool defined() const { return n_ != nullptr; }
    const Tensor& val() const;
    /// Mutable access to a leaf value; used by optimizers and weight loading.
    Tensor& val_mut();
    /// Gradient buffer, allocated to zeros on first access.
    Tensor& grad();
    bool has_grad() const;
    void zero_grad();
    bool requires_grad() const;
    /// Flip gradient tracking on a leaf; used to freeze loaded teacher weights.
    void set_requires_grad(bool flag);

    /// Value-only copy with no graph history and no gradient requirements.
    Var detached() const;

    Node* node() const { return n_.get(); }

    int64_t rank() const { return val().rank(); }
    int64_t size(int64_t d) const { return val().size(d); }
    const Shape& shape() const { return val().shape(); }

private:
    explicit Var(std::shared_ptr<Node> n) : n_(std::move(n)) {}
    std::shared_ptr<Node> n_;
    friend Var make_op(Tensor value, std::vector<Var> parents, std::function<void(Node&)> backward_fn);
};

struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    uint64_t seq = 0;
    std::vector<Var> parents;
    std::function<void(Node&)> backward_fn;

    Tensor& ensure_grad();
};

/// Build a graph node from a computed value. The backward function reads
/// self.grad and accumulates into the parents' grads; it is dropped when no
/// parent requires gradients or a NoGradGuard is active.
Var make_op(Tensor value, std::vector<Var> parents, std::function<void(Node&)> backward_fn);

/// Reverse-mode sweep from a scalar root. Gradients accumulate into every
/// reachable node that requires them; leaf gradients persist until zeroed.
void backward(const Var& root);

/// While alive, new ops become constants: no parents, no backward functions.
/// Used for teacher forwards and inference so no graph is retained.
class NoGradGuard {
  public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

    static bool grad_enabled();

  private:
    bool prev_;
};

// ---- elementwise primitives ----
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var div(Var a, Var b);
Var minimum(Var a, Var b);
Var neg(Var a);
Var scale(Var a, real c);
Var add_scalar(Var a, real c);
Var relu(Var a);
Var abs(Var a);
Var exp(Var a);
Var log(Var a);  // input must be strictly positive
Var sigmoid(Var a);

// ---- structural ----
Var reshape(Var a, Shape s);
Var sum_all(Var a);
Var mean_all(Var a);
Var add_n(const std::vector<Var>& xs);
/// out[n, c] = fmap[c, yx[n].first, yx[n].second]; differentiable w.r.t. fmap.
Var gather_pixels(Var fmap, const std::vector<std::pair<int64_t, int64_t>>& yx);
/// Places row r of src at row rows[r] of an n_rows-tall zero tensor.
/// Destination rows must be distinct.
Var scatter_rows(Var src, const std::vector<int64_t>& rows, int64_t n_rows);

// ---- dense algebra ----
Var matmul(Var a, Var b);                      // (N,K)x(K,M)
Var linear(Var x, Var w, Var b);        // x:(N,K) w:(M,K) b:(M)
Var conv2d(Var x, Var w, Var b, int64_t stride, int64_t pad);
Var upsample_nearest2(Var x);                         // (C,H,W) -> (C,2H,2W)

// ---- fused loss kernels (sum reductions; callers apply normalizers) ----
/// Per-element sigmoid focal term, masked; targets are 0/1.
Var sigmoid_focal_loss_sum(Var logits, const Tensor& targets, const Tensor& mask,
                           real alpha, real gamma);
Var bce_with_logits_sum(Var logits, const Tensor& targets, const Tensor& mask);
/// Softmax cross-entropy summed over rows; logits (N,K), labels in [0,K).
Var cross_entropy_sum(Var logits, const std::vector<int64_t>& labels);

}  // namespace headkd
