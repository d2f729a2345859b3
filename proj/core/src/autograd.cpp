#include "headkd/autograd.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <stdexcept>
#include <unordered_set>

namespace headkd {

namespace {

std::atomic<uint64_t> g_seq{1};
thread_local bool g_grad_enabled = true;

using EMat = Eigen::Matrix<real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using EMap = Eigen::Map<EMat>;
using ECMap = Eigen::Map<const EMat>;
using EVecMap = Eigen::Map<Eigen::Matrix<real, Eigen::Dynamic, 1>>;
using ECVecMap = Eigen::Map<const Eigen::Matrix<real, Eigen::Dynamic, 1>>;

void check_same_shape(const Var& a, const Var& b, const char* op) {
    if (!a.val().same_shape(b.val())) {
        throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                                    " vs " + shape_str(b.shape()));
    }
}

real stable_sigmoid(real x) {
    if (x >= 0) return 1 / (1 + std::exp(-x));
    real e = std::exp(x);
    return e / (1 + e);
}

}  // namespace

Tensor& Node::ensure_grad() {
    if (!grad.defined()) grad = Tensor(value.shape());
    return grad;
}

Var Var::leaf(Tensor v, bool requires_grad) {
    auto n = std::make_shared<Node>();
    n->value = std::move(v);
    n->requires_grad = requires_grad;
    n->seq = g_seq.fetch_add(1, std::memory_order_relaxed);
    return Var(std::move(n));
}

const Tensor& Var::val() const {
    if (!n_) throw std::logic_error("Var: undefined handle");
    return n_->value;
}

Tensor& Var::val_mut() {
    if (!n_) throw std::logic_error("Var: undefined handle");
    return n_->value;
}

Tensor& Var::grad() {
    if (!n_) throw std::logic_error("Var: undefined handle");
    return n_->ensure_grad();
}

bool Var::has_grad() const { return n_ && n_->grad.defined(); }

void Var::zero_grad() {
    if (n_ && n_->grad.defined()) n_->grad.fill(0);
}

bool Var::requires_grad() const { return n_ && n_->requires_grad; }

void Var::set_requires_grad(bool flag) {
    if (!n_) throw std::logic_error("Var: undefined handle");
    if (n_->backward_fn) throw std::logic_error("set_requires_grad: not a leaf");
    n_->requires_grad = flag;
}

Var Var::detached() const { return constant(val()); }

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }
bool NoGradGuard::grad_enabled() { return g_grad_enabled; }

Var make_op(Tensor value, std::vector<Var> parents, std::function<void(Node&)> backward_fn) {
    bool req = false;
    if (g_grad_enabled) {
        for (const Var& p : parents) req = req || p.requires_grad();
    }
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    n->seq = g_seq.fetch_add(1, std::memory_order_relaxed);
    n->requires_grad = req;
    if (req) {
        n->parents = std::move(parents);
        n->backward_fn = std::move(backward_fn);
    }
    return Var(std::move(n));
}

void backward(const Var& root) {
    if (!root.defined()) throw std::logic_error("backward: undefined root");
    if (root.val().numel() != 1) throw std::logic_error("backward: root must be scalar");
    if (!root.requires_grad()) return;

    // Creation order is a topological order for a define-by-run graph.
    std::vector<Node*> nodes;
    std::unordered_set<Node*> seen;
    std::vector<Node*> stack{root.node()};
    seen.insert(root.node());
    while (!stack.empty()) {
        Node* n = stack.back();
        stack.pop_back();
        nodes.push_back(n);
        for (const Var& p : n->parents) {
            Node* pn = p.node();
            if (pn->requires_grad && seen.insert(pn).second) stack.push_back(pn);
        }
    }
    std::sort(nodes.begin(), nodes.end(), [](Node* a, Node* b) { return a->seq > b->seq; });

    root.node()->ensure_grad().fill(1);
    for (Node* n : nodes) {
        if (!n->grad.defined() || !n->backward_fn) continue;
        n->backward_fn(*n);
    }
}

// ---------------- elementwise ----------------

Var add(Var a, Var b) {
    check_same_shape(a, b, "add");
    Tensor out = a.val();
    out.add_(b.val());
    return make_op(std::move(out), {a, b}, [a, b](Node& self) mutable {
        if (a.requires_grad()) a.grad().add_(self.grad);
        if (b.requires_grad()) b.grad().add_(self.grad);
    });
}

Var sub(Var a, Var b) {
    check_same_shape(a, b, "sub");
    Tensor out = a.val();
    out.add_scaled_(b.val(), -1);
    return make_op(std::move(out), {a, b}, [a, b](Node& self) mutable {
        if (a.requires_grad()) a.grad().add_(self.grad);
        if (b.requires_grad()) b.grad().add_scaled_(self.grad, -1);
    });
}

Var mul(Var a, Var b) {
    check_same_shape(a, b, "mul");
    Tensor out(a.shape());
    const int64_t n = out.numel();
    for (int64_t i = 0; i < n; ++i) out[i] = a.val()[i] * b.val()[i];
    return make_op(std::move(out), {a, b}, [a, b](Node& self) mutable {
        const int64_t n = self.value.numel();
        if (a.requires_grad()) {
            Tensor& g = a.grad();
            for (int64_t i = 0; i < n; ++i) g[i] += self.grad[i] * b.val()[i];
        }
        if (b.requires_grad()) {
            Tensor& g = b.grad();
            for (int64_t i = 0; i < n; ++i) g[i] += self.grad[i] * a.val()[i];
        }
    });
}

Var div(Var a, Var b) {
    check_same_shape(a, b, "div");
    Tensor out(a.shape());
    const int64_t n = out.numel();
    for (int64_t i = 0; i < n; ++i) out[i] = a.val()[i] / b.val()[i];
    return make_op(std::move(out), {a, b}, [a, b](Node& self) mutable {
        const int64_t n = self.value.numel();
        if (a.requires_grad()) {
            Tensor& g = a.grad();
            for (int64_t i = 0; i < n; ++i) g[i] += self.grad[i] / b.val()[i];
        }
        if (b.requires_grad()) {
            Tensor& g = b.grad();
            for (int64_t i = 0; i < n; ++i) {
                const real bv = b.val()[i];
                g[i] -= self.grad[i] * a.val()[i] / (bv * bv);
            }
        }
    });
}

Var minimum(Var a, Var b) {
    check_same_shape(a, b, "minimum");
    Tensor out(a.shape());
    const int64_t n = out.numel();
    for (int64_t i = 0; i < n; ++i) out[i] = std::min(a.val()[i], b.val()[i]);
    return make_op(std::move(out), {a, b}, [a, b](Node& self) mutable {
        const int64_t n = self.value.numel();
        for (int64_t i = 0; i < n; ++i) {
            // ties route to the first operand
            if (a.val()[i] <= b.val()[i]) {
                if (a.requires_grad()) a.grad()[i] += self.grad[i];
            } else if (b.requires_grad()) {
                b.grad()[i] += self.grad[i];
            }
        }
    });
}

Var neg(Var a) { return scale(a, -1); }

Var scale(Var a, real c) {
    Tensor out = a.val();
    out.scale_(c);
    return make_op(std::move(out), {a}, [a, c](Node& self) mutable {
        if (a.requires_grad()) a.grad().add_scaled_(self.grad, c);
    });
}

Var add_scalar(Var a, real c) {
    Tensor out = a.val();
    for (int64_t i = 0; i < out.numel(); ++i) out[i] += c;
    return make_op(std::move(out), {a}, [a](Node& self) mutable {
        if (a.requires_grad()) a.grad().add_(self.grad);
    });
}

Var relu(Var a) {
    Tensor out(a.shape());
    const int64_t n = out.numel();
    for (int64_t i = 0; i < n; ++i) out[i] = a.val()[i] > 0 ? a.val()[i] : 0;
    return make_op(std::move(out), {a}, [a](Node& self) mutable {
        if (!a.requires_grad()) return;
        Tensor& g = a.grad();
        const int64_t n = self.value.numel();
        for (int64_t i = 0; i < n; ++i) {
            if (a.val()[i] > 0) g[i] += self.grad[i];
        }
    });
}

Var abs(Var a) {
    Tensor out(a.shape());
    const int64_t n = out.numel();
    for (int64_t i = 0; i < n; ++i) out[i] = std::abs(a.val()[i]);
    return make_op(std::move(out), {a}, [a](Node& self) mutable {
        if (!a.requires_grad()) return;
        Tensor& g = a.grad();
        const int64_t n = self.value.numel();
        for (int64_t i = 0; i < n; ++i) {
            const real v = a.val()[i];
            if (v > 0) g[i] += self.grad[i];
            else if (v < 0) g[i] -= self.grad[i];
        }
    });
}

Var exp(Var a) {
    Tensor out(a.shape());
    const int64_t n = out.numel();
    for (int64_t i = 0; i < n; ++i) out[i] = std::exp(a.val()[i]);
    return make_op(std::move(out), {a}, [a](Node& self) mutable {
        if (!a.requires_grad()) return;
        Tensor& g = a.grad();
        const int64_t n = self.value.numel();
        for (int64_t i = 0; i < n; ++i) g[i] += self.grad[i] * self.value[i];
    });
}

Var log(Var a) {
    Tensor out(a.shape());
    const int64_t n = out.numel();
    for (int64_t i = 0; i < n; ++i) {
        if (!(a.val()[i] > 0)) throw std::domain_error("log: non-positive input");
        out[i] = std::log(a.val()[i]);
    }
    return make_op(std::move(out), {a}, [a](Node& self) mutable {
        if (!a.requires_grad()) return;
        Tensor& g = a.grad();
        const int64_t n = self.value.numel();
        for (int64_t i = 0; i < n; ++i) g[i] += self.grad[i] / a.val()[i];
    });
}

Var sigmoid(Var a) {
    Tensor out(a.shape());
    const int64_t n = out.numel();
    for (int64_t i = 0; i < n; ++i) out[i] = stable_sigmoid(a.val()[i]);
    return make_op(std::move(out), {a}, [a](Node& self) mutable {
        if (!a.requires_grad()) return;
        Tensor& g = a.grad();
        const int64_t n = self.value.numel();
        for (int64_t i = 0; i < n; ++i) {
            const real s = self.value[i];
            g[i] += self.grad[i] * s * (1 - s);
        }
    });
}

// ---------------- structural ----------------

Var reshape(Var a, Shape s) {
    Tensor out = a.val().reshaped(std::move(s));
    return make_op(std::move(out), {a}, [a](Node& self) mutable {
        if (a.requires_grad()) a.grad().add_(self.grad.reshaped(a.shape()));
    });
}

Var sum_all(Var a) {
    real s = 0;
    for (int64_t i = 0; i < a.val().numel(); ++i) s += a.val()[i];
    return make_op(Tensor::scalar(s), {a}, [a](Node& self) mutable {
        if (!a.requires_grad()) return;
        a.grad().add_scaled_(Tensor::full(a.shape(), 1), self.grad.item());
    });
}

Var mean_all(Var a) {
    const int64_t n = a.val().numel();
    if (n == 0) throw std::invalid_argument("mean_all: empty tensor");
    return scale(sum_all(a), real(1) / static_cast<real>(n));
}

Var add_n(const std::vector<Var>& xs) {
    if (xs.empty()) throw std::invalid_argument("add_n: empty list");
    Var acc = xs[0];
    for (size_t i = 1; i < xs.size(); ++i) acc = add(acc, xs[i]);
    return acc;
}

Var gather_pixels(Var fmap, const std::vector<std::pair<int64_t, int64_t>>& yx) {
    if (fmap.rank() != 3) throw std::invalid_argument("gather_pixels: fmap must be (C,H,W)");
    const int64_t c = fmap.size(0), h = fmap.size(1), w = fmap.size(2);
    const int64_t n = static_cast<int64_t>(yx.size());
    Tensor out({n, c});
    for (int64_t i = 0; i < n; ++i) {
        auto [y, x] = yx[static_cast<size_t>(i)];
        if (y < 0 || y >= h || x < 0 || x >= w) {
            throw std::out_of_range("gather_pixels: pixel out of bounds");
        }
        for (int64_t ch = 0; ch < c; ++ch) out.at(i, ch) = fmap.val().at(ch, y, x);
    }
    return make_op(std::move(out), {fmap}, [fmap, yx](Node& self) mutable {
        if (!fmap.requires_grad()) return;
        Tensor& g = fmap.grad();
        const int64_t c = fmap.size(0);
        for (int64_t i = 0; i < static_cast<int64_t>(yx.size()); ++i) {
            auto [y, x] = yx[static_cast<size_t>(i)];
            for (int64_t ch = 0; ch < c; ++ch) g.at(ch, y, x) += self.grad.at(i, ch);
        }
    });
}

Var scatter_rows(Var src, const std::vector<int64_t>& rows, int64_t n_rows) {
    if (src.rank() < 1) throw std::invalid_argument("scatter_rows: source must have rows");
    const int64_t r = src.size(0);
    if (r != static_cast<int64_t>(rows.size())) {
        throw std::invalid_argument("scatter_rows: index count mismatch");
    }
    const int64_t d = r == 0 ? 0 : src.val().numel() / r;
    Shape out_shape = src.shape();
    out_shape[0] = n_rows;
    Tensor out(out_shape);
    for (int64_t i = 0; i < r; ++i) {
        const int64_t dst = rows[static_cast<size_t>(i)];
        if (dst < 0 || dst >= n_rows) throw std::out_of_range("scatter_rows: row out of range");
        for (int64_t j = 0; j < d; ++j) out[dst * d + j] = src.val()[i * d + j];
    }
    return make_op(std::move(out), {src}, [src, rows, d](Node& self) mutable {
        if (!src.requires_grad()) return;
        Tensor& g = src.grad();
        for (int64_t i = 0; i < static_cast<int64_t>(rows.size()); ++i) {
            const int64_t dst = rows[static_cast<size_t>(i)];
            for (int64_t j = 0; j < d; ++j) g[i * d + j] += self.grad[dst * d + j];
        }
    });
}

// ---------------- dense algebra ----------------

Var matmul(Var a, Var b) {
    if (a.rank() != 2 || b.rank() != 2 || a.size(1) != b.size(0)) {
        throw std::invalid_argument("matmul: incompatible shapes " + shape_str(a.shape()) + " " +
                                    shape_str(b.shape()));
    }
    const int64_t n = a.size(0), k = a.size(1), m = b.size(1);
    Tensor out({n, m});
    EMap(out.data(), n, m).noalias() = ECMap(a.val().data(), n, k) * ECMap(b.val().data(), k, m);
    return make_op(std::move(out), {a, b}, [a, b, n, k, m](Node& self) mutable {
        ECMap gy(self.grad.data(), n, m);
        if (a.requires_grad()) {
            EMap(a.grad().data(), n, k).noalias() += gy * ECMap(b.val().data(), k, m).transpose();
        }
        if (b.requires_grad()) {
            EMap(b.grad().data(), k, m).noalias() += ECMap(a.val().data(), n, k).transpose() * gy;
        }
    });
}

Var linear(Var x, Var w, Var b) {
    if (x.rank() != 2 || w.rank() != 2 || b.rank() != 1 || x.size(1) != w.size(1) ||
        w.size(0) != b.size(0)) {
        throw std::invalid_argument("linear: incompatible shapes x" + shape_str(x.shape()) + " w" +
                                    shape_str(w.shape()) + " b" + shape_str(b.shape()));
    }
    const int64_t n = x.size(0), k = x.size(1), m = w.size(0);
    Tensor out({n, m});
    {
        EMap y(out.data(), n, m);
        y.noalias() = ECMap(x.val().data(), n, k) * ECMap(w.val().data(), m, k).transpose();
        y.rowwise() += ECVecMap(b.val().data(), m).transpose();
    }
    return make_op(std::move(out), {x, w, b}, [x, w, b, n, k, m](Node& self) mutable {
        ECMap gy(self.grad.data(), n, m);
        if (x.requires_grad()) {
            EMap(x.grad().data(), n, k).noalias() += gy * ECMap(w.val().data(), m, k);
        }
        if (w.requires_grad()) {
            EMap(w.grad().data(), m, k).noalias() += gy.transpose() * ECMap(x.val().data(), n, k);
        }
        if (b.requires_grad()) {
            EVecMap(b.grad().data(), m) += gy.colwise().sum().transpose();
        }
    });
}

namespace {

// col layout: (Cin*k*k) x (Ho*Wo)
Tensor im2col(const Tensor& x, int64_t ksz, int64_t stride, int64_t pad, int64_t ho, int64_t wo) {
    const int64_t cin = x.size(0), h = x.size(1), w = x.size(2);
    Tensor col({cin * ksz * ksz, ho * wo});
    real* cd = col.data();
    for (int64_t c = 0; c < cin; ++c) {
        for (int64_t ky = 0; ky < ksz; ++ky) {
            for (int64_t kx = 0; kx < ksz; ++kx) {
                const int64_t row = (c * ksz + ky) * ksz + kx;
                real* dst = cd + row * ho * wo;
                for (int64_t oy = 0; oy < ho; ++oy) {
                    const int64_t iy = oy * stride + ky - pad;
                    if (iy < 0 || iy >= h) {
                        for (int64_t ox = 0; ox < wo; ++ox) dst[oy * wo + ox] = 0;
                        continue;
                    }
                    const real* src = x.data() + (c * h + iy) * w;
                    for (int64_t ox = 0; ox < wo; ++ox) {
                        const int64_t ix = ox * stride + kx - pad;
                        dst[oy * wo + ox] = (ix < 0 || ix >= w) ? 0 : src[ix];
                    }
                }
            }
        }
    }
    return col;
}

void col2im_accum(const Tensor& col, int64_t cin, int64_t h, int64_t w, int64_t ksz, int64_t stride,
                  int64_t pad, int64_t ho, int64_t wo, Tensor& gx) {
    const real* cd = col.data();
    for (int64_t c = 0; c < cin; ++c) {
        for (int64_t ky = 0; ky < ksz; ++ky) {
            for (int64_t kx = 0; kx < ksz; ++kx) {
                const int64_t row = (c * ksz + ky) * ksz + kx;
                const real* src = cd + row * ho * wo;
                for (int64_t oy = 0; oy < ho; ++oy) {
                    const int64_t iy = oy * stride + ky - pad;
                    if (iy < 0 || iy >= h) continue;
                    real* dst = gx.data() + (c * h + iy) * w;
                    for (int64_t ox = 0; ox < wo; ++ox) {
                        const int64_t ix = ox * stride + kx - pad;
                        if (ix >= 0 && ix < w) dst[ix] += src[oy * wo + ox];
                    }
                }
            }
        }
    }
}

}  // namespace

Var conv2d(Var x, Var w, Var b, int64_t stride, int64_t pad) {
    if (x.rank() != 3 || w.rank() != 4 || b.rank() != 1) {
        throw std::invalid_argument("conv2d: expected x(C,H,W) w(Co,Ci,k,k) b(Co)");
    }
    const int64_t cin = x.size(0), h = x.size(1), wid = x.size(2);
    const int64_t cout = w.size(0), ksz = w.size(2);
    if (w.size(1) != cin) {
        throw std::invalid_argument("conv2d: channel mismatch, input has " + std::to_string(cin) +
                                    ", kernel expects " + std::to_string(w.size(1)));
    }
    if (w.size(3) != ksz) throw std::invalid_argument("conv2d: non-square kernel");
    if (b.size(0) != cout) throw std::invalid_argument("conv2d: bias size mismatch");
    const int64_t ho = (h + 2 * pad - ksz) / stride + 1;
    const int64_t wo = (wid + 2 * pad - ksz) / stride + 1;
    if (ho <= 0 || wo <= 0) throw std::invalid_argument("conv2d: output would be empty");

    auto col = std::make_shared<Tensor>(im2col(x.val(), ksz, stride, pad, ho, wo));
    Tensor out({cout, ho, wo});
    {
        EMap y(out.data(), cout, ho * wo);
        y.noalias() = ECMap(w.val().data(), cout, cin * ksz * ksz) *
                      ECMap(col->data(), cin * ksz * ksz, ho * wo);
        y.colwise() += ECVecMap(b.val().data(), cout);
    }
    return make_op(std::move(out), {x, w, b},
                   [x, w, b, col, cin, h, wid, cout, ksz, stride, pad, ho, wo](Node& self) mutable {
                       ECMap gy(self.grad.data(), cout, ho * wo);
                       if (w.requires_grad()) {
                           EMap(w.grad().data(), cout, cin * ksz * ksz).noalias() +=
                               gy * ECMap(col->data(), cin * ksz * ksz, ho * wo).transpose();
                       }
                       if (b.requires_grad()) {
                           EVecMap(b.grad().data(), cout) += gy.rowwise().sum();
                       }
                       if (x.requires_grad()) {
                           Tensor gcol({cin * ksz * ksz, ho * wo});
                           EMap(gcol.data(), cin * ksz * ksz, ho * wo).noalias() =
                               ECMap(w.val().data(), cout, cin * ksz * ksz).transpose() * gy;
                           col2im_accum(gcol, cin, h, wid, ksz, stride, pad, ho, wo, x.grad());
                       }
                   });
}

Var upsample_nearest2(Var x) {
    if (x.rank() != 3) throw std::invalid_argument("upsample_nearest2: expected (C,H,W)");
    const int64_t c = x.size(0), h = x.size(1), w = x.size(2);
    Tensor out({c, 2 * h, 2 * w});
    for (int64_t ch = 0; ch < c; ++ch) {
        for (int64_t y = 0; y < h; ++y) {
            for (int64_t xx = 0; xx < w; ++xx) {
                const real v = x.val().at(ch, y, xx);
                out.at(ch, 2 * y, 2 * xx) = v;
                out.at(ch, 2 * y, 2 * xx + 1) = v;
                out.at(ch, 2 * y + 1, 2 * xx) = v;
                out.at(ch, 2 * y + 1, 2 * xx + 1) = v;
            }
        }
    }
    return make_op(std::move(out), {x}, [x, c, h, w](Node& self) mutable {
        if (!x.requires_grad()) return;
        Tensor& g = x.grad();
        for (int64_t ch = 0; ch < c; ++ch) {
            for (int64_t y = 0; y < h; ++y) {
                for (int64_t xx = 0; xx < w; ++xx) {
                    g.at(ch, y, xx) += self.grad.at(ch, 2 * y, 2 * xx) +
                                       self.grad.at(ch, 2 * y, 2 * xx + 1) +
                                       self.grad.at(ch, 2 * y + 1, 2 * xx) +
                                       self.grad.at(ch, 2 * y + 1, 2 * xx + 1);
                }
            }
        }
    });
}

// ---------------- fused losses ----------------

Var sigmoid_focal_loss_sum(Var logits, const Tensor& targets, const Tensor& mask,
                           real alpha, real gamma) {
    if (!logits.val().same_shape(targets) || !logits.val().same_shape(mask)) {
        throw std::invalid_argument("sigmoid_focal_loss_sum: shape mismatch");
    }
    const int64_t n = logits.val().numel();
    real loss = 0;
    for (int64_t i = 0; i < n; ++i) {
        if (mask[i] == 0) continue;
        const real p = stable_sigmoid(logits.val()[i]);
        const real t = targets[i];
        // clamp keeps log finite at saturated logits
        const real pc = std::min(std::max(p, real(1e-12)), real(1) - real(1e-12));
        if (t > 0) {
            loss += -alpha * std::pow(1 - pc, gamma) * std::log(pc) * mask[i];
        } else {
            loss += -(1 - alpha) * std::pow(pc, gamma) * std::log(1 - pc) * mask[i];
        }
    }
    return make_op(Tensor::scalar(loss), {logits}, [logits, targets, mask, alpha, gamma](Node& self) mutable {
        if (!logits.requires_grad()) return;
        const real gup = self.grad.item();
        Tensor& g = logits.grad();
        const int64_t n = logits.val().numel();
        for (int64_t i = 0; i < n; ++i) {
            if (mask[i] == 0) continue;
            const real p = stable_sigmoid(logits.val()[i]);
            const real pc = std::min(std::max(p, real(1e-12)), real(1) - real(1e-12));
            const real q = 1 - pc;
            real d;
            if (targets[i] > 0) {
                d = alpha * std::pow(q, gamma) * (gamma * pc * std::log(pc) - q);
            } else {
                d = (1 - alpha) * std::pow(pc, gamma) * (pc - gamma * q * std::log(q));
            }
            g[i] += gup * d * mask[i];
        }
    });
}

Var bce_with_logits_sum(Var logits, const Tensor& targets, const Tensor& mask) {
    if (!logits.val().same_shape(targets) || !logits.val().same_shape(mask)) {
        throw std::invalid_argument("bce_with_logits_sum: shape mismatch");
    }
    const int64_t n = logits.val().numel();
    real loss = 0;
    for (int64_t i = 0; i < n; ++i) {
        if (mask[i] == 0) continue;
        const real x = logits.val()[i];
        const real t = targets[i];
        loss += (std::max(x, real(0)) - x * t + std::log1p(std::exp(-std::abs(x)))) * mask[i];
    }
    return make_op(Tensor::scalar(loss), {logits}, [logits, targets, mask](Node& self) mutable {
        if (!logits.requires_grad()) return;
        const real gup = self.grad.item();
        Tensor& g = logits.grad();
        const int64_t n = logits.val().numel();
        for (int64_t i = 0; i < n; ++i) {
            if (mask[i] == 0) continue;
            g[i] += gup * (stable_sigmoid(logits.val()[i]) - targets[i]) * mask[i];
        }
    });
}

Var cross_entropy_sum(Var logits, const std::vector<int64_t>& labels) {
    if (logits.rank() != 2) throw std::invalid_argument("cross_entropy_sum: logits must be (N,K)");
    const int64_t n = logits.size(0), k = logits.size(1);
    if (n != static_cast<int64_t>(labels.size())) {
        throw std::invalid_argument("cross_entropy_sum: label count mismatch");
    }
    real loss = 0;
    for (int64_t i = 0; i < n; ++i) {
        const int64_t lab = labels[static_cast<size_t>(i)];
        if (lab < 0 || lab >= k) throw std::out_of_range("cross_entropy_sum: label out of range");
        real mx = logits.val().at(i, 0);
        for (int64_t j = 1; j < k; ++j) mx = std::max(mx, logits.val().at(i, j));
        real se = 0;
        for (int64_t j = 0; j < k; ++j) se += std::exp(logits.val().at(i, j) - mx);
        loss += mx + std::log(se) - logits.val().at(i, lab);
    }
    return make_op(Tensor::scalar(loss), {logits}, [logits, labels, n, k](Node& self) mutable {
        if (!logits.requires_grad()) return;
        const real gup = self.grad.item();
        Tensor& g = logits.grad();
        for (int64_t i = 0; i < n; ++i) {
            real mx = logits.val().at(i, 0);
            for (int64_t j = 1; j < k; ++j) mx = std::max(mx, logits.val().at(i, j));
            real se = 0;
            for (int64_t j = 0; j < k; ++j) se += std::exp(logits.val().at(i, j) - mx);
            for (int64_t j = 0; j < k; ++j) {
                real soft = std::exp(logits.val().at(i, j) - mx) / se;
                if (j == labels[static_cast<size_t>(i)]) soft -= 1;
                g.at(i, j) += gup * soft;
            }
        }
    });
}

}  // namespace headkd
