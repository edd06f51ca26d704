#pragma once

#include <cmath>
#include <functional>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

#include "lbgen/errors.hpp"
#include "lbgen/tensor.hpp"

namespace lbgen::ad {

// Reverse-mode autodiff on a dynamically built graph. Nodes hold whole
// tensors, so graphs stay small (one node per layer-level operation).
//
// Forward values are computed identically whether or not recording is
// enabled; disabling gradients changes graph structure only, never numbers.
struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backprop;  // scatters node.grad into parents

    void ensure_grad() {
        if (grad.data.size() != value.data.size()) {
            grad.shape = value.shape;
            grad.data.assign(value.data.size(), 0.0);
        }
    }
};

inline bool& grad_mode_flag() {
    thread_local bool enabled = true;
    return enabled;
}

// RAII scope that disables graph recording (values still computed).
struct NoGradGuard {
    bool saved;
    NoGradGuard() : saved(grad_mode_flag()) { grad_mode_flag() = false; }
    ~NoGradGuard() { grad_mode_flag() = saved; }
};

class Var {
public:
    Var() = default;
    explicit Var(std::shared_ptr<Node> n) : node_(std::move(n)) {}

    static Var constant(Tensor t) {
        auto n = std::make_shared<Node>();
        n->value = std::move(t);
        return Var(n);
    }

    static Var constant(double v) { return constant(Tensor::scalar(v)); }

    // Trainable leaf; gradients accumulate across backward passes until
    // zero_grad.
    static Var param(Tensor t) {
        auto n = std::make_shared<Node>();
        n->value = std::move(t);
        n->requires_grad = true;
        n->ensure_grad();
        return Var(n);
    }

    bool defined() const { return node_ != nullptr; }
    const Tensor& value() const { return node_->value; }
    Tensor& mutable_value() { return node_->value; }
    const Tensor& grad() const { return node_->grad; }
    bool requires_grad() const { return node_->requires_grad; }
    std::size_t numel() const { return node_->value.numel(); }
    double scalar() const {
        require(numel() == 1, "Var::scalar: not a scalar");
        return node_->value.data[0];
    }
    std::shared_ptr<Node> node() const { return node_; }

    void zero_grad() {
        node_->ensure_grad();
        std::fill(node_->grad.data.begin(), node_->grad.data.end(), 0.0);
    }

    // Value copy with no graph history.
    Var detach() const { return constant(node_->value); }

private:
    std::shared_ptr<Node> node_;
};

namespace detail {

inline bool recording(std::initializer_list<const Var*> inputs) {
    if (!grad_mode_flag()) return false;
    for (const Var* v : inputs)
        if ((*v).node()->requires_grad) return true;
    return false;
}

inline Var make_node(Tensor value, std::initializer_list<Var> parents,
                     std::function<void(Node&)> backprop) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    bool rec = grad_mode_flag();
    bool any = false;
    if (rec) {
        for (const Var& p : parents)
            if (p.node()->requires_grad) any = true;
    }
    if (rec && any) {
        n->requires_grad = true;
        for (const Var& p : parents) n->parents.push_back(p.node());
        n->backprop = std::move(backprop);
    }
    return Var(n);
}

// Broadcast helper: a binary op where one side may be a scalar.
inline void check_binary(const Var& a, const Var& b) {
    require(a.numel() == b.numel() || a.numel() == 1 || b.numel() == 1,
            "autodiff: shape mismatch in binary op");
}

inline double pick(const Tensor& t, std::size_t i) {
    return t.numel() == 1 ? t.data[0] : t.data[i];
}

inline void scatter(Node& parent, std::size_t i, double g) {
    parent.ensure_grad();
    if (parent.value.numel() == 1)
        parent.grad.data[0] += g;
    else
        parent.grad.data[i] += g;
}

}  // namespace detail

inline Var add(const Var& a, const Var& b) {
    detail::check_binary(a, b);
    std::size_t n = std::max(a.numel(), b.numel());
    Tensor out = a.numel() >= b.numel() ? a.value() : b.value();
    for (std::size_t i = 0; i < n; ++i)
        out.data[i] = detail::pick(a.value(), i) + detail::pick(b.value(), i);
    auto pa = a.node().get();
    auto pb = b.node().get();
    return detail::make_node(std::move(out), {a, b}, [pa, pb, n](Node& self) {
        for (std::size_t i = 0; i < n; ++i) {
            double g = self.grad.data[i];
            if (pa->requires_grad) detail::scatter(*pa, i, g);
            if (pb->requires_grad) detail::scatter(*pb, i, g);
        }
    });
}

inline Var sub(const Var& a, const Var& b) {
    detail::check_binary(a, b);
    std::size_t n = std::max(a.numel(), b.numel());
    Tensor out = a.numel() >= b.numel() ? a.value() : b.value();
    for (std::size_t i = 0; i < n; ++i)
        out.data[i] = detail::pick(a.value(), i) - detail::pick(b.value(), i);
    auto pa = a.node().get();
    auto pb = b.node().get();
    return detail::make_node(std::move(out), {a, b}, [pa, pb, n](Node& self) {
        for (std::size_t i = 0; i < n; ++i) {
            double g = self.grad.data[i];
            if (pa->requires_grad) detail::scatter(*pa, i, g);
            if (pb->requires_grad) detail::scatter(*pb, i, -g);
        }
    });
}

inline Var mul(const Var& a, const Var& b) {
    detail::check_binary(a, b);
    std::size_t n = std::max(a.numel(), b.numel());
    Tensor out = a.numel() >= b.numel() ? a.value() : b.value();
    for (std::size_t i = 0; i < n; ++i)
        out.data[i] = detail::pick(a.value(), i) * detail::pick(b.value(), i);
    auto pa = a.node().get();
    auto pb = b.node().get();
    return detail::make_node(std::move(out), {a, b}, [pa, pb, n](Node& self) {
        for (std::size_t i = 0; i < n; ++i) {
            double g = self.grad.data[i];
            if (pa->requires_grad) detail::scatter(*pa, i, g * detail::pick(pb->value, i));
            if (pb->requires_grad) detail::scatter(*pb, i, g * detail::pick(pa->value, i));
        }
    });
}

inline Var scale(const Var& a, double c) {
    Tensor out = a.value();
    for (double& v : out.data) v *= c;
    auto pa = a.node().get();
    return detail::make_node(std::move(out), {a}, [pa, c](Node& self) {
        for (std::size_t i = 0; i < self.grad.data.size(); ++i)
            detail::scatter(*pa, i, c * self.grad.data[i]);
    });
}

inline Var add_const(const Var& a, double c) {
    Tensor out = a.value();
    for (double& v : out.data) v += c;
    auto pa = a.node().get();
    return detail::make_node(std::move(out), {a}, [pa](Node& self) {
        for (std::size_t i = 0; i < self.grad.data.size(); ++i)
            detail::scatter(*pa, i, self.grad.data[i]);
    });
}

// W (m x n) times x (n) -> (m)
inline Var matvec(const Var& W, const Var& x) {
    const Tensor& wt = W.value();
    require(wt.shape.size() == 2 && wt.shape[1] == x.numel(), "matvec: shape mismatch");
    std::size_t m = wt.shape[0], n = wt.shape[1];
    Tensor out({m});
    for (std::size_t i = 0; i < m; ++i) {
        double s = 0.0;
        const double* row = wt.data.data() + i * n;
        for (std::size_t j = 0; j < n; ++j) s += row[j] * x.value().data[j];
        out.data[i] = s;
    }
    auto pw = W.node().get();
    auto px = x.node().get();
    return detail::make_node(std::move(out), {W, x}, [pw, px, m, n](Node& self) {
        if (pw->requires_grad) {
            pw->ensure_grad();
            for (std::size_t i = 0; i < m; ++i) {
                double g = self.grad.data[i];
                if (g == 0.0) continue;
                double* grow = pw->grad.data.data() + i * n;
                for (std::size_t j = 0; j < n; ++j) grow[j] += g * px->value.data[j];
            }
        }
        if (px->requires_grad) {
            px->ensure_grad();
            for (std::size_t i = 0; i < m; ++i) {
                double g = self.grad.data[i];
                if (g == 0.0) continue;
                const double* wrow = pw->value.data.data() + i * n;
                for (std::size_t j = 0; j < n; ++j) px->grad.data[j] += g * wrow[j];
            }
        }
    });
}

namespace detail {

template <typename F, typename DF>
Var unary(const Var& a, F f, DF df) {
    Tensor out = a.value();
    for (double& v : out.data) v = f(v);
    auto pa = a.node().get();
    return make_node(std::move(out), {a}, [pa, df](Node& self) {
        for (std::size_t i = 0; i < self.grad.data.size(); ++i)
            scatter(*pa, i, self.grad.data[i] * df(pa->value.data[i], self.value.data[i]));
    });
}

}  // namespace detail

// x: input value, y: output value (saves recompute where the derivative is a
// function of the output).
inline Var tanh(const Var& a) {
    return detail::unary(
        a, [](double x) { return std::tanh(x); },
        [](double, double y) { return 1.0 - y * y; });
}

inline Var relu(const Var& a) {
    return detail::unary(
        a, [](double x) { return x > 0.0 ? x : 0.0; },
        [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

inline Var sigmoid(const Var& a) {
    return detail::unary(
        a,
        [](double x) {
            return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x))
                            : std::exp(x) / (1.0 + std::exp(x));
        },
        [](double, double y) { return y * (1.0 - y); });
}

inline Var log(const Var& a) {
    return detail::unary(
        a, [](double x) { return std::log(x); },
        [](double x, double) { return 1.0 / x; });
}

inline Var exp(const Var& a) {
    return detail::unary(
        a, [](double x) { return std::exp(x); },
        [](double, double y) { return y; });
}

inline Var abs(const Var& a) {
    return detail::unary(
        a, [](double x) { return std::fabs(x); },
        [](double x, double) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
}

inline Var square(const Var& a) {
    return detail::unary(
        a, [](double x) { return x * x; },
        [](double x, double) { return 2.0 * x; });
}

// Clamp with pass-through gradient strictly inside the interval.
inline Var clamp(const Var& a, double lo, double hi) {
    return detail::unary(
        a, [lo, hi](double x) { return x < lo ? lo : (x > hi ? hi : x); },
        [lo, hi](double x, double) { return (x > lo && x < hi) ? 1.0 : 0.0; });
}

inline Var sum(const Var& a) {
    double s = 0.0;
    for (double v : a.value().data) s += v;
    auto pa = a.node().get();
    return detail::make_node(Tensor::scalar(s), {a}, [pa](Node& self) {
        double g = self.grad.data[0];
        pa->ensure_grad();
        for (double& gv : pa->grad.data) gv += g;
    });
}

inline Var mean(const Var& a) {
    std::size_t n = a.numel();
    double s = 0.0;
    for (double v : a.value().data) s += v;
    s /= static_cast<double>(n);
    auto pa = a.node().get();
    return detail::make_node(Tensor::scalar(s), {a}, [pa, n](Node& self) {
        double g = self.grad.data[0] / static_cast<double>(n);
        pa->ensure_grad();
        for (double& gv : pa->grad.data) gv += g;
    });
}

// Subtracts the per-group mean where element i belongs to group i % stride.
// With stride = 3 on interleaved RGB pixels this removes each channel's mean.
inline Var center_interleaved(const Var& a, std::size_t stride) {
    require(stride >= 1 && a.numel() % stride == 0,
            "center_interleaved: size must be a multiple of stride");
    std::size_t per = a.numel() / stride;
    std::vector<double> means(stride, 0.0);
    for (std::size_t i = 0; i < a.numel(); ++i) means[i % stride] += a.value().data[i];
    for (double& m : means) m /= static_cast<double>(per);
    Tensor out = a.value();
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] -= means[i % stride];
    auto pa = a.node().get();
    return detail::make_node(std::move(out), {a}, [pa, stride, per](Node& self) {
        std::vector<double> gmeans(stride, 0.0);
        for (std::size_t i = 0; i < self.grad.data.size(); ++i)
            gmeans[i % stride] += self.grad.data[i];
        for (double& m : gmeans) m /= static_cast<double>(per);
        pa->ensure_grad();
        for (std::size_t i = 0; i < self.grad.data.size(); ++i)
            pa->grad.data[i] += self.grad.data[i] - gmeans[i % stride];
    });
}

// Mean absolute difference over horizontally and vertically adjacent grid
// entries of a row-major (h x w x c)-interleaved vector; channels never mix.
inline Var tv2d(const Var& a, std::size_t h, std::size_t w, std::size_t c) {
    require(h >= 1 && w >= 1 && c >= 1 && a.numel() == h * w * c, "tv2d: size mismatch");
    require(h >= 2 || w >= 2, "tv2d: need at least two cells along one axis");
    std::size_t pairs = c * (h * (w - 1) + (h - 1) * w);
    auto idx = [w, c](std::size_t y, std::size_t x, std::size_t ch) {
        return (y * w + x) * c + ch;
    };
    auto each_pair = [h, w, c, idx](auto&& fn) {
        for (std::size_t y = 0; y < h; ++y)
            for (std::size_t x = 0; x < w; ++x)
                for (std::size_t ch = 0; ch < c; ++ch) {
                    if (x + 1 < w) fn(idx(y, x, ch), idx(y, x + 1, ch));
                    if (y + 1 < h) fn(idx(y, x, ch), idx(y + 1, x, ch));
                }
    };
    double s = 0.0;
    each_pair([&](std::size_t i, std::size_t j) {
        s += std::fabs(a.value().data[j] - a.value().data[i]);
    });
    s /= static_cast<double>(pairs);
    auto pa = a.node().get();
    return detail::make_node(Tensor::scalar(s), {a}, [pa, pairs, each_pair](Node& self) {
        double g = self.grad.data[0] / static_cast<double>(pairs);
        pa->ensure_grad();
        each_pair([&](std::size_t i, std::size_t j) {
            double d = pa->value.data[j] - pa->value.data[i];
            double sg = d > 0.0 ? 1.0 : (d < 0.0 ? -1.0 : 0.0);
            pa->grad.data[j] += g * sg;
            pa->grad.data[i] -= g * sg;
        });
    });
}

inline Var dot(const Var& a, const Var& b) {
    require(a.numel() == b.numel(), "dot: size mismatch");
    double s = 0.0;
    for (std::size_t i = 0; i < a.numel(); ++i) s += a.value().data[i] * b.value().data[i];
    auto pa = a.node().get();
    auto pb = b.node().get();
    return detail::make_node(Tensor::scalar(s), {a, b}, [pa, pb](Node& self) {
        double g = self.grad.data[0];
        if (pa->requires_grad) {
            pa->ensure_grad();
            for (std::size_t i = 0; i < pa->grad.data.size(); ++i)
                pa->grad.data[i] += g * pb->value.data[i];
        }
        if (pb->requires_grad) {
            pb->ensure_grad();
            for (std::size_t i = 0; i < pb->grad.data.size(); ++i)
                pb->grad.data[i] += g * pa->value.data[i];
        }
    });
}

inline Var norm(const Var& a) {
    double s = 0.0;
    for (double v : a.value().data) s += v * v;
    double nv = std::sqrt(s);
    auto pa = a.node().get();
    return detail::make_node(Tensor::scalar(nv), {a}, [pa, nv](Node& self) {
        double g = self.grad.data[0];
        pa->ensure_grad();
        for (std::size_t i = 0; i < pa->grad.data.size(); ++i)
            pa->grad.data[i] += g * pa->value.data[i] / nv;
    });
}

// y = x / ||x||, with the exact projected backward.
inline Var normalize(const Var& a) {
    double s = 0.0;
    for (double v : a.value().data) s += v * v;
    double nv = std::sqrt(s);
    require(nv > 0.0, "normalize: zero-norm input");
    Tensor out = a.value();
    for (double& v : out.data) v /= nv;
    auto pa = a.node().get();
    return detail::make_node(std::move(out), {a}, [pa, nv](Node& self) {
        double gy_dot_y = 0.0;
        for (std::size_t i = 0; i < self.grad.data.size(); ++i)
            gy_dot_y += self.grad.data[i] * self.value.data[i];
        pa->ensure_grad();
        for (std::size_t i = 0; i < pa->grad.data.size(); ++i)
            pa->grad.data[i] += (self.grad.data[i] - self.value.data[i] * gy_dot_y) / nv;
    });
}

inline Var div(const Var& a, const Var& b) {
    detail::check_binary(a, b);
    std::size_t n = std::max(a.numel(), b.numel());
    Tensor out = a.numel() >= b.numel() ? a.value() : b.value();
    for (std::size_t i = 0; i < n; ++i)
        out.data[i] = detail::pick(a.value(), i) / detail::pick(b.value(), i);
    auto pa = a.node().get();
    auto pb = b.node().get();
    return detail::make_node(std::move(out), {a, b}, [pa, pb, n](Node& self) {
        for (std::size_t i = 0; i < n; ++i) {
            double g = self.grad.data[i];
            double bv = detail::pick(pb->value, i);
            if (pa->requires_grad) detail::scatter(*pa, i, g / bv);
            if (pb->requires_grad)
                detail::scatter(*pb, i, -g * detail::pick(pa->value, i) / (bv * bv));
        }
    });
}

// Numerically stable softmax (max-subtraction inside).
inline Var softmax(const Var& a) {
    const auto& x = a.value().data;
    double mx = x[0];
    for (double v : x) mx = std::max(mx, v);
    Tensor out = a.value();
    double z = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        out.data[i] = std::exp(x[i] - mx);
        z += out.data[i];
    }
    for (double& v : out.data) v /= z;
    auto pa = a.node().get();
    return detail::make_node(std::move(out), {a}, [pa](Node& self) {
        double gp = 0.0;
        for (std::size_t i = 0; i < self.grad.data.size(); ++i)
            gp += self.grad.data[i] * self.value.data[i];
        pa->ensure_grad();
        for (std::size_t i = 0; i < pa->grad.data.size(); ++i)
            pa->grad.data[i] += self.value.data[i] * (self.grad.data[i] - gp);
    });
}

// Picks one coordinate as a scalar.
inline Var at(const Var& a, std::size_t i) {
    require(i < a.numel(), "at: index out of range");
    auto pa = a.node().get();
    return detail::make_node(Tensor::scalar(a.value().data[i]), {a}, [pa, i](Node& self) {
        pa->ensure_grad();
        pa->grad.data[i] += self.grad.data[0];
    });
}

inline Var concat(const std::vector<Var>& parts) {
    std::size_t total = 0;
    for (const auto& p : parts) total += p.numel();
    Tensor out({total});
    std::size_t off = 0;
    for (const auto& p : parts) {
        for (double v : p.value().data) out.data[off++] = v;
    }
    auto n = std::make_shared<Node>();
    n->value = std::move(out);
    bool rec = grad_mode_flag();
    bool any = false;
    if (rec)
        for (const auto& p : parts)
            if (p.node()->requires_grad) any = true;
    if (rec && any) {
        n->requires_grad = true;
        for (const auto& p : parts) n->parents.push_back(p.node());
        std::vector<Node*> raw;
        for (const auto& p : parts) raw.push_back(p.node().get());
        n->backprop = [raw](Node& self) {
            std::size_t off2 = 0;
            for (Node* p : raw) {
                std::size_t cnt = p->value.numel();
                if (p->requires_grad) {
                    p->ensure_grad();
                    for (std::size_t i = 0; i < cnt; ++i)
                        p->grad.data[i] += self.grad.data[off2 + i];
                }
                off2 += cnt;
            }
        };
    }
    return Var(n);
}

// log(sum(exp(x))), stable.
inline Var logsumexp(const Var& a) {
    const auto& x = a.value().data;
    double mx = x[0];
    for (double v : x) mx = std::max(mx, v);
    double z = 0.0;
    for (double v : x) z += std::exp(v - mx);
    double out = mx + std::log(z);
    auto pa = a.node().get();
    return detail::make_node(Tensor::scalar(out), {a}, [pa, out](Node& self) {
        double g = self.grad.data[0];
        pa->ensure_grad();
        for (std::size_t i = 0; i < pa->grad.data.size(); ++i)
            pa->grad.data[i] += g * std::exp(pa->value.data[i] - out);
    });
}

// Runs reverse-mode accumulation from a scalar root. Gradients add into each
// reachable node's .grad; parameters keep theirs until zero_grad.
inline void backward(const Var& root) {
    require(root.numel() == 1, "backward: root must be scalar");
    if (!root.node()->requires_grad) return;

    // Iterative topological order (children before parents in `order`).
    std::vector<Node*> order;
    std::unordered_set<Node*> visited;
    std::vector<std::pair<Node*, std::size_t>> stack;
    stack.emplace_back(root.node().get(), 0);
    visited.insert(root.node().get());
    while (!stack.empty()) {
        auto& [node, idx] = stack.back();
        if (idx < node->parents.size()) {
            Node* p = node->parents[idx].get();
            ++idx;
            if (p->requires_grad && !visited.count(p)) {
                visited.insert(p);
                stack.emplace_back(p, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    for (Node* n : order) n->ensure_grad();
    root.node()->grad.data[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->backprop) n->backprop(*n);
    }
}

}  // namespace lbgen::ad
