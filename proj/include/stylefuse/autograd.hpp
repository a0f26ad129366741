#pragma once

#include <algorithm>
#include <functional>
#include <memory>
#include <unordered_set>
#include <vector>

#include "stylefuse/tensor.hpp"

namespace stylefuse::ag {

struct Node;
using Var = std::shared_ptr<Node>;

// Reverse-mode tape node. `backward_fn` reads this node's grad and accumulates
// into the parents' grads. Interior nodes are created by the ops below; leaves
// are created via leaf()/constant().
struct Node {
    Tensor value;
    Tensor grad;  // allocated on demand, same shape as value
    bool requires_grad = false;
    std::vector<Var> parents;
    std::function<void(Node&)> backward_fn;

    Tensor& ensure_grad() {
        if (!grad.same_shape(value)) grad = Tensor(value.shape());
        return grad;
    }
    void zero_grad() {
        if (grad.same_shape(value)) grad.fill(0.0);
    }
    const Shape& shape() const { return value.shape(); }
    double scalar() const { return value[0]; }
};

// Tracing can be turned off (inference, oracles) so ops return plain constants.
inline bool& grad_mode() {
    thread_local bool enabled = true;
    return enabled;
}

struct NoGradGuard {
    bool prev;
    NoGradGuard() : prev(grad_mode()) { grad_mode() = false; }
    ~NoGradGuard() { grad_mode() = prev; }
};

inline Var constant(Tensor t) {
    auto n   = std::make_shared<Node>();
    n->value = std::move(t);
    return n;
}

inline Var leaf(Tensor t, bool requires_grad = true) {
    auto n           = std::make_shared<Node>();
    n->value         = std::move(t);
    n->requires_grad = requires_grad;
    return n;
}

inline bool tracked(const Var& v) {
    return v->requires_grad || !v->parents.empty();
}

namespace detail {

inline Var make(Tensor value, std::vector<Var> parents, std::function<void(Node&)> fn) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    if (grad_mode()) {
        bool any = false;
        for (const auto& p : parents) any = any || tracked(p);
        if (any) {
            n->parents     = std::move(parents);
            n->backward_fn = std::move(fn);
        }
    }
    return n;
}

inline void topo(const Var& v, std::unordered_set<Node*>& seen, std::vector<Var>& order) {
    // iterative DFS; graphs can get deep through long residual chains
    std::vector<std::pair<Var, size_t>> stack;
    if (seen.insert(v.get()).second) stack.emplace_back(v, 0);
    while (!stack.empty()) {
        auto& [node, idx] = stack.back();
        if (idx < node->parents.size()) {
            Var p = node->parents[idx++];
            if (seen.insert(p.get()).second) stack.emplace_back(p, 0);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
}

}  // namespace detail

// Backpropagate from a scalar root (seed gradient 1). Gradients accumulate
// into leaves; callers zero leaf grads explicitly between optimizer steps.
// Interior nodes are fresh per forward pass, so their grads start clean.
inline void backward(const Var& root) {
    if (root->value.numel() != 1)
        throw std::logic_error("backward: root must be scalar, got " + shape_str(root->shape()));
    std::unordered_set<Node*> seen;
    std::vector<Var> order;
    detail::topo(root, seen, order);
    root->ensure_grad()[0] = 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node& n = **it;
        if (n.backward_fn && n.grad.same_shape(n.value)) n.backward_fn(n);
    }
}

// Drop every gradient reachable from root (leaves included).
inline void clear_grads(const Var& root) {
    std::unordered_set<Node*> seen;
    std::vector<Var> order;
    detail::topo(root, seen, order);
    for (auto& n : order) n->grad = Tensor();
}

// ---- elementwise ----

inline void check_same(const Var& a, const Var& b, const char* op) {
    if (!a->value.same_shape(b->value))
        throw std::invalid_argument(std::string(op) + ": shape mismatch " +
                                    shape_str(a->shape()) + " vs " + shape_str(b->shape()));
}

inline Var add(const Var& a, const Var& b) {
    check_same(a, b, "add");
    Tensor out = a->value;
    for (int64_t i = 0; i < out.numel(); ++i) out[i] += b->value[i];
    return detail::make(std::move(out), {a, b}, [a, b](Node& n) {
        Tensor& ga = a->ensure_grad();
        Tensor& gb = b->ensure_grad();
        for (int64_t i = 0; i < n.grad.numel(); ++i) {
            ga[i] += n.grad[i];
            gb[i] += n.grad[i];
        }
    });
}

inline Var sub(const Var& a, const Var& b) {
    check_same(a, b, "sub");
    Tensor out = a->value;
    for (int64_t i = 0; i < out.numel(); ++i) out[i] -= b->value[i];
    return detail::make(std::move(out), {a, b}, [a, b](Node& n) {
        Tensor& ga = a->ensure_grad();
        Tensor& gb = b->ensure_grad();
        for (int64_t i = 0; i < n.grad.numel(); ++i) {
            ga[i] += n.grad[i];
            gb[i] -= n.grad[i];
        }
    });
}

inline Var mul(const Var& a, const Var& b) {
    check_same(a, b, "mul");
    Tensor out = a->value;
    for (int64_t i = 0; i < out.numel(); ++i) out[i] *= b->value[i];
    return detail::make(std::move(out), {a, b}, [a, b](Node& n) {
        Tensor& ga = a->ensure_grad();
        Tensor& gb = b->ensure_grad();
        for (int64_t i = 0; i < n.grad.numel(); ++i) {
            ga[i] += n.grad[i] * b->value[i];
            gb[i] += n.grad[i] * a->value[i];
        }
    });
}

inline Var scale(const Var& a, double s) {
    Tensor out = a->value;
    for (int64_t i = 0; i < out.numel(); ++i) out[i] *= s;
    return detail::make(std::move(out), {a}, [a, s](Node& n) {
        Tensor& ga = a->ensure_grad();
        for (int64_t i = 0; i < n.grad.numel(); ++i) ga[i] += n.grad[i] * s;
    });
}

inline Var add_scalar(const Var& a, double s) {
    Tensor out = a->value;
    for (int64_t i = 0; i < out.numel(); ++i) out[i] += s;
    return detail::make(std::move(out), {a}, [a](Node& n) {
        Tensor& ga = a->ensure_grad();
        for (int64_t i = 0; i < n.grad.numel(); ++i) ga[i] += n.grad[i];
    });
}

inline Var neg(const Var& a) { return scale(a, -1.0); }

inline Var square(const Var& a) { return mul(a, a); }

// elementwise x^p; requires x > 0 when p is not a positive integer
inline Var pow_scalar(const Var& a, double p) {
    Tensor out = a->value;
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = std::pow(out[i], p);
    return detail::make(std::move(out), {a}, [a, p](Node& n) {
        Tensor& ga = a->ensure_grad();
        for (int64_t i = 0; i < n.grad.numel(); ++i)
            ga[i] += n.grad[i] * p * std::pow(a->value[i], p - 1.0);
    });
}

// elementwise natural log; inputs must be positive
inline Var log(const Var& a) {
    Tensor out = a->value;
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = std::log(out[i]);
    return detail::make(std::move(out), {a}, [a](Node& n) {
        Tensor& ga = a->ensure_grad();
        for (int64_t i = 0; i < n.grad.numel(); ++i) ga[i] += n.grad[i] / a->value[i];
    });
}

// main diagonal of a square matrix
inline Var diagonal(const Var& a) {
    if (a->value.ndim() != 2 || a->value.dim(0) != a->value.dim(1))
        throw std::invalid_argument("diagonal: need a square matrix");
    int n = a->value.dim(0);
    Tensor out({n});
    for (int i = 0; i < n; ++i) out[i] = a->value.at(i, i);
    return detail::make(std::move(out), {a}, [a, n](Node& nd) {
        Tensor& ga = a->ensure_grad();
        for (int i = 0; i < n; ++i) ga.at(i, i) += nd.grad[i];
    });
}

inline Var silu(const Var& a) {
    Tensor out = a->value;
    for (int64_t i = 0; i < out.numel(); ++i) {
        double s = 1.0 / (1.0 + std::exp(-out[i]));
        out[i]   = out[i] * s;
    }
    return detail::make(std::move(out), {a}, [a](Node& n) {
        Tensor& ga = a->ensure_grad();
        for (int64_t i = 0; i < n.grad.numel(); ++i) {
            double x = a->value[i];
            double s = 1.0 / (1.0 + std::exp(-x));
            ga[i] += n.grad[i] * (s + x * s * (1.0 - s));
        }
    });
}

inline Var stop_grad(const Var& a) { return constant(a->value); }

// ---- reductions / scalar plumbing ----

inline Var sum(const Var& a) {
    Tensor out = Tensor::scalar(a->value.sum());
    return detail::make(std::move(out), {a}, [a](Node& n) {
        Tensor& ga = a->ensure_grad();
        double g   = n.grad[0];
        for (int64_t i = 0; i < ga.numel(); ++i) ga[i] += g;
    });
}

inline Var mean(const Var& a) {
    int64_t cnt = a->value.numel();
    Tensor out  = Tensor::scalar(a->value.sum() / static_cast<double>(cnt));
    return detail::make(std::move(out), {a}, [a, cnt](Node& n) {
        Tensor& ga = a->ensure_grad();
        double g   = n.grad[0] / static_cast<double>(cnt);
        for (int64_t i = 0; i < ga.numel(); ++i) ga[i] += g;
    });
}

// x * s where s is a 1-element Var
inline Var mul_scalar_var(const Var& a, const Var& s) {
    if (s->value.numel() != 1) throw std::invalid_argument("mul_scalar_var: s must be scalar");
    Tensor out = a->value;
    double sv  = s->value[0];
    for (int64_t i = 0; i < out.numel(); ++i) out[i] *= sv;
    return detail::make(std::move(out), {a, s}, [a, s](Node& n) {
        Tensor& ga = a->ensure_grad();
        Tensor& gs = s->ensure_grad();
        double sv  = s->value[0];
        double acc = 0.0;
        for (int64_t i = 0; i < n.grad.numel(); ++i) {
            ga[i] += n.grad[i] * sv;
            acc += n.grad[i] * a->value[i];
        }
        gs[0] += acc;
    });
}

// x / s where s is a 1-element Var
inline Var div_scalar_var(const Var& a, const Var& s) {
    if (s->value.numel() != 1) throw std::invalid_argument("div_scalar_var: s must be scalar");
    Tensor out = a->value;
    double sv  = s->value[0];
    for (int64_t i = 0; i < out.numel(); ++i) out[i] /= sv;
    return detail::make(std::move(out), {a, s}, [a, s](Node& n) {
        Tensor& ga = a->ensure_grad();
        Tensor& gs = s->ensure_grad();
        double sv  = s->value[0];
        double acc = 0.0;
        for (int64_t i = 0; i < n.grad.numel(); ++i) {
            ga[i] += n.grad[i] / sv;
            acc += n.grad[i] * a->value[i];
        }
        gs[0] -= acc / (sv * sv);
    });
}

inline Var reshape(const Var& a, Shape s) {
    Tensor out = a->value.reshaped(s);
    return detail::make(std::move(out), {a}, [a](Node& n) {
        Tensor& ga = a->ensure_grad();
        for (int64_t i = 0; i < n.grad.numel(); ++i) ga[i] += n.grad[i];
    });
}

// ---- linear algebra ----

// (m x k) @ (k x n) -> (m x n)
inline Var matmul(const Var& a, const Var& b) {
    if (a->value.ndim() != 2 || b->value.ndim() != 2 || a->value.dim(1) != b->value.dim(0))
        throw std::invalid_argument("matmul: bad shapes " + shape_str(a->shape()) + " @ " +
                                    shape_str(b->shape()));
    int m = a->value.dim(0), k = a->value.dim(1), n = b->value.dim(1);
    Tensor out({m, n});
    for (int i = 0; i < m; ++i)
        for (int p = 0; p < k; ++p) {
            double av = a->value.at(i, p);
            if (av == 0.0) continue;
            for (int j = 0; j < n; ++j) out.at(i, j) += av * b->value.at(p, j);
        }
    return detail::make(std::move(out), {a, b}, [a, b, m, k, n](Node& nd) {
        Tensor& ga = a->ensure_grad();
        Tensor& gb = b->ensure_grad();
        // dA = G @ B^T, dB = A^T @ G
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < n; ++j) {
                double g = nd.grad.at(i, j);
                if (g == 0.0) continue;
                for (int p = 0; p < k; ++p) {
                    ga.at(i, p) += g * b->value.at(p, j);
                    gb.at(p, j) += g * a->value.at(i, p);
                }
            }
    });
}

// (m x k) @ (n x k)^T -> (m x n); the layout used for projections (out x in)
inline Var matmul_nt(const Var& a, const Var& b) {
    if (a->value.ndim() != 2 || b->value.ndim() != 2 || a->value.dim(1) != b->value.dim(1))
        throw std::invalid_argument("matmul_nt: bad shapes " + shape_str(a->shape()) + " @ " +
                                    shape_str(b->shape()) + "^T");
    int m = a->value.dim(0), k = a->value.dim(1), n = b->value.dim(0);
    Tensor out({m, n});
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) {
            double acc = 0.0;
            for (int p = 0; p < k; ++p) acc += a->value.at(i, p) * b->value.at(j, p);
            out.at(i, j) = acc;
        }
    return detail::make(std::move(out), {a, b}, [a, b, m, k, n](Node& nd) {
        Tensor& ga = a->ensure_grad();
        Tensor& gb = b->ensure_grad();
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < n; ++j) {
                double g = nd.grad.at(i, j);
                if (g == 0.0) continue;
                for (int p = 0; p < k; ++p) {
                    ga.at(i, p) += g * b->value.at(j, p);
                    gb.at(j, p) += g * a->value.at(i, p);
                }
            }
    });
}

// row-wise softmax on (R x C)
inline Var softmax_rows(const Var& a) {
    if (a->value.ndim() != 2) throw std::invalid_argument("softmax_rows: need 2-D input");
    int R = a->value.dim(0), C = a->value.dim(1);
    Tensor out({R, C});
    for (int r = 0; r < R; ++r) {
        double mx = a->value.at(r, 0);
        for (int c = 1; c < C; ++c) mx = std::max(mx, a->value.at(r, c));
        double z = 0.0;
        for (int c = 0; c < C; ++c) {
            double e = std::exp(a->value.at(r, c) - mx);
            out.at(r, c) = e;
            z += e;
        }
        for (int c = 0; c < C; ++c) out.at(r, c) /= z;
    }
    Tensor y = out;
    return detail::make(std::move(out), {a}, [a, y, R, C](Node& n) {
        Tensor& ga = a->ensure_grad();
        for (int r = 0; r < R; ++r) {
            double dot = 0.0;
            for (int c = 0; c < C; ++c) dot += n.grad.at(r, c) * y.at(r, c);
            for (int c = 0; c < C; ++c)
                ga.at(r, c) += y.at(r, c) * (n.grad.at(r, c) - dot);
        }
    });
}

// ---- structural ops ----

// stack k vectors of identical shape (d) into (k x d)
inline Var stack_rows(const std::vector<Var>& rows) {
    if (rows.empty()) throw std::invalid_argument("stack_rows: empty");
    int64_t d = rows[0]->value.numel();
    for (const auto& r : rows)
        if (r->value.numel() != d) throw std::invalid_argument("stack_rows: ragged rows");
    Tensor out({static_cast<int>(rows.size()), static_cast<int>(d)});
    for (size_t r = 0; r < rows.size(); ++r)
        for (int64_t c = 0; c < d; ++c) out[static_cast<int64_t>(r) * d + c] = rows[r]->value[c];
    std::vector<Var> parents = rows;
    return detail::make(std::move(out), parents, [rows, d](Node& n) {
        for (size_t r = 0; r < rows.size(); ++r) {
            Tensor& g = rows[r]->ensure_grad();
            for (int64_t c = 0; c < d; ++c) g[c] += n.grad[static_cast<int64_t>(r) * d + c];
        }
    });
}

// select one row of a (R x C) matrix as shape (C)
inline Var row(const Var& a, int r) {
    int C = a->value.dim(1);
    Tensor out({C});
    for (int c = 0; c < C; ++c) out[c] = a->value.at(r, c);
    return detail::make(std::move(out), {a}, [a, r, C](Node& n) {
        Tensor& ga = a->ensure_grad();
        for (int c = 0; c < C; ++c) ga.at(r, c) += n.grad[c];
    });
}

// select one column of a (R x C) matrix as shape (R)
inline Var column(const Var& a, int c) {
    int R = a->value.dim(0);
    Tensor out({R});
    for (int r = 0; r < R; ++r) out[r] = a->value.at(r, c);
    return detail::make(std::move(out), {a}, [a, c, R](Node& n) {
        Tensor& ga = a->ensure_grad();
        for (int r = 0; r < R; ++r) ga.at(r, c) += n.grad[r];
    });
}

// spatial crop of (C,H,W)
inline Var crop2d(const Var& a, int y0, int x0, int h, int w) {
    int C = a->value.dim(0), H = a->value.dim(1), W = a->value.dim(2);
    if (y0 < 0 || x0 < 0 || y0 + h > H || x0 + w > W)
        throw std::invalid_argument("crop2d: window out of bounds");
    Tensor out({C, h, w});
    for (int c = 0; c < C; ++c)
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) out.at(c, y, x) = a->value.at(c, y0 + y, x0 + x);
    return detail::make(std::move(out), {a}, [a, y0, x0, h, w, C](Node& n) {
        Tensor& ga = a->ensure_grad();
        for (int c = 0; c < C; ++c)
            for (int y = 0; y < h; ++y)
                for (int x = 0; x < w; ++x) ga.at(c, y0 + y, x0 + x) += n.grad.at(c, y, x);
    });
}

// exact area-average resize of (C,H,W) to (C,th,tw); linear, any th<=H, tw<=W
inline Var area_resize(const Var& a, int th, int tw) {
    int C = a->value.dim(0), H = a->value.dim(1), W = a->value.dim(2);
    if (th > H || tw > W || th < 1 || tw < 1)
        throw std::invalid_argument("area_resize: target must be within source size");
    double sy = static_cast<double>(H) / th, sx = static_cast<double>(W) / tw;
    // precompute fractional overlaps per output cell
    auto overlaps = [](double scale, int size, int t) {
        std::vector<std::vector<std::pair<int, double>>> rows(static_cast<size_t>(t));
        for (int i = 0; i < t; ++i) {
            double lo = i * scale, hi = (i + 1) * scale;
            for (int j = static_cast<int>(std::floor(lo)); j < size && j < hi; ++j) {
                double cover = std::min<double>(j + 1, hi) - std::max<double>(j, lo);
                if (cover > 1e-12) rows[static_cast<size_t>(i)].push_back({j, cover / scale});
            }
        }
        return rows;
    };
    auto oy = overlaps(sy, H, th);
    auto ox = overlaps(sx, W, tw);
    Tensor out({C, th, tw});
    for (int c = 0; c < C; ++c)
        for (int y = 0; y < th; ++y)
            for (int x = 0; x < tw; ++x) {
                double acc = 0.0;
                for (auto& [ys, wy] : oy[static_cast<size_t>(y)])
                    for (auto& [xs, wx] : ox[static_cast<size_t>(x)])
                        acc += wy * wx * a->value.at(c, ys, xs);
                out.at(c, y, x) = acc;
            }
    return detail::make(std::move(out), {a}, [a, oy, ox, C, th, tw](Node& n) {
        Tensor& ga = a->ensure_grad();
        for (int c = 0; c < C; ++c)
            for (int y = 0; y < th; ++y)
                for (int x = 0; x < tw; ++x) {
                    double g = n.grad.at(c, y, x);
                    if (g == 0.0) continue;
                    for (auto& [ys, wy] : oy[static_cast<size_t>(y)])
                        for (auto& [xs, wx] : ox[static_cast<size_t>(x)])
                            ga.at(c, ys, xs) += g * wy * wx;
                }
    });
}

// bilinear resize of (C,H,W) to (C,th,tw); handles up- and downscaling
inline Var resize_bilinear(const Var& a, int th, int tw) {
    int C = a->value.dim(0), H = a->value.dim(1), W = a->value.dim(2);
    if (th < 1 || tw < 1) throw std::invalid_argument("resize_bilinear: bad target size");
    struct Tap {
        int lo, hi;
        double wlo, whi;
    };
    auto taps = [](int src, int dst) {
        std::vector<Tap> v(static_cast<size_t>(dst));
        for (int i = 0; i < dst; ++i) {
            double s  = (i + 0.5) * static_cast<double>(src) / dst - 0.5;
            s         = std::max(0.0, std::min<double>(src - 1, s));
            int lo    = static_cast<int>(std::floor(s));
            int hi    = std::min(src - 1, lo + 1);
            double f  = s - lo;
            v[static_cast<size_t>(i)] = {lo, hi, 1.0 - f, f};
        }
        return v;
    };
    auto ty = taps(H, th), tx = taps(W, tw);
    Tensor out({C, th, tw});
    for (int c = 0; c < C; ++c)
        for (int y = 0; y < th; ++y)
            for (int x = 0; x < tw; ++x) {
                const Tap& a_y = ty[static_cast<size_t>(y)];
                const Tap& a_x = tx[static_cast<size_t>(x)];
                out.at(c, y, x) = a_y.wlo * (a_x.wlo * a->value.at(c, a_y.lo, a_x.lo) +
                                             a_x.whi * a->value.at(c, a_y.lo, a_x.hi)) +
                                  a_y.whi * (a_x.wlo * a->value.at(c, a_y.hi, a_x.lo) +
                                             a_x.whi * a->value.at(c, a_y.hi, a_x.hi));
            }
    return detail::make(std::move(out), {a}, [a, ty, tx, C, th, tw](Node& n) {
        Tensor& ga = a->ensure_grad();
        for (int c = 0; c < C; ++c)
            for (int y = 0; y < th; ++y)
                for (int x = 0; x < tw; ++x) {
                    double g = n.grad.at(c, y, x);
                    if (g == 0.0) continue;
                    const Tap& a_y = ty[static_cast<size_t>(y)];
                    const Tap& a_x = tx[static_cast<size_t>(x)];
                    ga.at(c, a_y.lo, a_x.lo) += g * a_y.wlo * a_x.wlo;
                    ga.at(c, a_y.lo, a_x.hi) += g * a_y.wlo * a_x.whi;
                    ga.at(c, a_y.hi, a_x.lo) += g * a_y.whi * a_x.wlo;
                    ga.at(c, a_y.hi, a_x.hi) += g * a_y.whi * a_x.whi;
                }
    });
}

// ---- conv / pooling on (C,H,W) ----

// 3x3 convolution, stride 1, zero padding 1. w is (O,C,3,3), bias (O).
inline Var conv3x3(const Var& x, const Var& w, const Var& bias) {
    int C = x->value.dim(0), H = x->value.dim(1), W = x->value.dim(2);
    int O = w->value.dim(0);
    if (w->value.ndim() != 4 || w->value.dim(1) != C || w->value.dim(2) != 3 || w->value.dim(3) != 3)
        throw std::invalid_argument("conv3x3: kernel shape mismatch");
    if (bias->value.numel() != O) throw std::invalid_argument("conv3x3: bias size mismatch");
    auto widx = [C](int o, int c, int ky, int kx) {
        return ((static_cast<int64_t>(o) * C + c) * 3 + ky) * 3 + kx;
    };
    Tensor out({O, H, W});
    for (int o = 0; o < O; ++o)
        for (int y = 0; y < H; ++y)
            for (int xw = 0; xw < W; ++xw) {
                double acc = bias->value[o];
                for (int c = 0; c < C; ++c)
                    for (int ky = 0; ky < 3; ++ky) {
                        int yy = y + ky - 1;
                        if (yy < 0 || yy >= H) continue;
                        for (int kx = 0; kx < 3; ++kx) {
                            int xx = xw + kx - 1;
                            if (xx < 0 || xx >= W) continue;
                            acc += w->value[widx(o, c, ky, kx)] * x->value.at(c, yy, xx);
                        }
                    }
                out.at(o, y, xw) = acc;
            }
    return detail::make(std::move(out), {x, w, bias}, [x, w, bias, C, H, W, O, widx](Node& n) {
        Tensor& gx = x->ensure_grad();
        Tensor& gw = w->ensure_grad();
        Tensor& gb = bias->ensure_grad();
        for (int o = 0; o < O; ++o)
            for (int y = 0; y < H; ++y)
                for (int xw = 0; xw < W; ++xw) {
                    double g = n.grad.at(o, y, xw);
                    if (g == 0.0) continue;
                    gb[o] += g;
                    for (int c = 0; c < C; ++c)
                        for (int ky = 0; ky < 3; ++ky) {
                            int yy = y + ky - 1;
                            if (yy < 0 || yy >= H) continue;
                            for (int kx = 0; kx < 3; ++kx) {
                                int xx = xw + kx - 1;
                                if (xx < 0 || xx >= W) continue;
                                gx.at(c, yy, xx) += g * w->value[widx(o, c, ky, kx)];
                                gw[widx(o, c, ky, kx)] += g * x->value.at(c, yy, xx);
                            }
                        }
                }
    });
}

inline Var avg_pool2(const Var& x) {
    int C = x->value.dim(0), H = x->value.dim(1), W = x->value.dim(2);
    if (H % 2 || W % 2) throw std::invalid_argument("avg_pool2: odd spatial size");
    int h = H / 2, w = W / 2;
    Tensor out({C, h, w});
    for (int c = 0; c < C; ++c)
        for (int y = 0; y < h; ++y)
            for (int xw = 0; xw < w; ++xw)
                out.at(c, y, xw) = 0.25 * (x->value.at(c, 2 * y, 2 * xw) + x->value.at(c, 2 * y, 2 * xw + 1) +
                                           x->value.at(c, 2 * y + 1, 2 * xw) + x->value.at(c, 2 * y + 1, 2 * xw + 1));
    return detail::make(std::move(out), {x}, [x, C, h, w](Node& n) {
        Tensor& gx = x->ensure_grad();
        for (int c = 0; c < C; ++c)
            for (int y = 0; y < h; ++y)
                for (int xw = 0; xw < w; ++xw) {
                    double g = 0.25 * n.grad.at(c, y, xw);
                    gx.at(c, 2 * y, 2 * xw) += g;
                    gx.at(c, 2 * y, 2 * xw + 1) += g;
                    gx.at(c, 2 * y + 1, 2 * xw) += g;
                    gx.at(c, 2 * y + 1, 2 * xw + 1) += g;
                }
    });
}

inline Var upsample_nearest2(const Var& x) {
    int C = x->value.dim(0), H = x->value.dim(1), W = x->value.dim(2);
    Tensor out({C, 2 * H, 2 * W});
    for (int c = 0; c < C; ++c)
        for (int y = 0; y < 2 * H; ++y)
            for (int xw = 0; xw < 2 * W; ++xw) out.at(c, y, xw) = x->value.at(c, y / 2, xw / 2);
    return detail::make(std::move(out), {x}, [x, C, H, W](Node& n) {
        Tensor& gx = x->ensure_grad();
        for (int c = 0; c < C; ++c)
            for (int y = 0; y < 2 * H; ++y)
                for (int xw = 0; xw < 2 * W; ++xw) gx.at(c, y / 2, xw / 2) += n.grad.at(c, y, xw);
    });
}

// per-channel bias broadcast over the spatial grid of (C,H,W)
inline Var add_channel_bias(const Var& x, const Var& b) {
    int C = x->value.dim(0), H = x->value.dim(1), W = x->value.dim(2);
    if (b->value.numel() != C) throw std::invalid_argument("add_channel_bias: size mismatch");
    Tensor out = x->value;
    for (int c = 0; c < C; ++c)
        for (int y = 0; y < H; ++y)
            for (int xw = 0; xw < W; ++xw) out.at(c, y, xw) += b->value[c];
    return detail::make(std::move(out), {x, b}, [x, b, C, H, W](Node& n) {
        Tensor& gx = x->ensure_grad();
        Tensor& gb = b->ensure_grad();
        for (int c = 0; c < C; ++c) {
            double acc = 0.0;
            for (int y = 0; y < H; ++y)
                for (int xw = 0; xw < W; ++xw) {
                    double g = n.grad.at(c, y, xw);
                    gx.at(c, y, xw) += g;
                    acc += g;
                }
            gb[c] += acc;
        }
    });
}

// pixel-unshuffle: (C,H,W) -> (C*f*f, H/f, W/f); exactly invertible
inline Var space_to_depth(const Var& x, int f) {
    int C = x->value.dim(0), H = x->value.dim(1), W = x->value.dim(2);
    if (H % f || W % f) throw std::invalid_argument("space_to_depth: size not divisible by factor");
    int h = H / f, w = W / f;
    Tensor out({C * f * f, h, w});
    for (int c = 0; c < C; ++c)
        for (int dy = 0; dy < f; ++dy)
            for (int dx = 0; dx < f; ++dx)
                for (int y = 0; y < h; ++y)
                    for (int xw = 0; xw < w; ++xw)
                        out.at((c * f + dy) * f + dx, y, xw) = x->value.at(c, y * f + dy, xw * f + dx);
    return detail::make(std::move(out), {x}, [x, f, C, h, w](Node& n) {
        Tensor& gx = x->ensure_grad();
        for (int c = 0; c < C; ++c)
            for (int dy = 0; dy < f; ++dy)
                for (int dx = 0; dx < f; ++dx)
                    for (int y = 0; y < h; ++y)
                        for (int xw = 0; xw < w; ++xw)
                            gx.at(c, y * f + dy, xw * f + dx) += n.grad.at((c * f + dy) * f + dx, y, xw);
    });
}

// pixel-shuffle: (C*f*f, h, w) -> (C, h*f, w*f)
inline Var depth_to_space(const Var& x, int f) {
    int Cf = x->value.dim(0), h = x->value.dim(1), w = x->value.dim(2);
    if (Cf % (f * f)) throw std::invalid_argument("depth_to_space: channels not divisible by f^2");
    int C = Cf / (f * f);
    Tensor out({C, h * f, w * f});
    for (int c = 0; c < C; ++c)
        for (int dy = 0; dy < f; ++dy)
            for (int dx = 0; dx < f; ++dx)
                for (int y = 0; y < h; ++y)
                    for (int xw = 0; xw < w; ++xw)
                        out.at(c, y * f + dy, xw * f + dx) = x->value.at((c * f + dy) * f + dx, y, xw);
    return detail::make(std::move(out), {x}, [x, f, C, h, w](Node& n) {
        Tensor& gx = x->ensure_grad();
        for (int c = 0; c < C; ++c)
            for (int dy = 0; dy < f; ++dy)
                for (int dx = 0; dx < f; ++dx)
                    for (int y = 0; y < h; ++y)
                        for (int xw = 0; xw < w; ++xw)
                            gx.at((c * f + dy) * f + dx, y, xw) += n.grad.at(c, y * f + dy, xw * f + dx);
    });
}

// ---- small composites ----

inline Var add_all(const std::vector<Var>& terms) {
    if (terms.empty()) throw std::invalid_argument("add_all: empty");
    Var acc = terms[0];
    for (size_t i = 1; i < terms.size(); ++i) acc = add(acc, terms[i]);
    return acc;
}

inline Var dot(const Var& a, const Var& b) { return sum(mul(a, b)); }

// L2-normalize a vector; epsilon keeps the zero vector finite
inline Var l2_normalize(const Var& v, double eps = 1e-12) {
    Var n = pow_scalar(add_scalar(sum(square(v)), eps), 0.5);
    return div_scalar_var(v, n);
}

inline Var cosine_similarity(const Var& a, const Var& b) {
    return dot(l2_normalize(a), l2_normalize(b));
}

// central finite differences of f() with respect to one leaf; f rebuilds the
// graph on every call. The workhorse behind every gradient-check test.
inline Tensor numeric_grad(const std::function<double()>& f, const Var& x, double step = 1e-4) {
    Tensor g(x->value.shape());
    for (int64_t i = 0; i < x->value.numel(); ++i) {
        double keep  = x->value[i];
        x->value[i]  = keep + step;
        double up    = f();
        x->value[i]  = keep - step;
        double down  = f();
        x->value[i]  = keep;
        g[i]         = (up - down) / (2.0 * step);
    }
    return g;
}

}  // namespace stylefuse::ag
