#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numbers>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "masa/matrix.hpp"

namespace masa {

// Trainable storage shared between the adapter registry and any graph that reads it.
using ParamPtr = std::shared_ptr<Matrix>;

struct Var {
    std::size_t id = 0;
};

struct AttentionShape {
    std::size_t seq_len = 1;
    std::size_t n_heads = 1;
    std::size_t n_kv_heads = 1;
};

// Tape-based reverse-mode autodiff over Matrix values. Nodes are appended in
// evaluation order, so the node list is already a topological order.
//
// A Graph is single-threaded; independent graphs share no mutable state.
class Graph {
public:
    Graph() = default;
    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    // ---- leaves -------------------------------------------------------------

    Var constant(Matrix value) { return push("constant", {}, std::move(value), false, nullptr); }

    // Trainable leaf not backed by external storage.
    Var variable(Matrix value) { return push("variable", {}, std::move(value), true, nullptr); }

    // Trainable leaf reading `p`. Repeated calls with the same storage return the
    // same node, so a parameter used in several places receives the summed gradient.
    Var parameter(const ParamPtr& p) {
        if (!p) throw ContractError("Graph::parameter: null parameter");
        if (auto it = param_nodes_.find(p.get()); it != param_nodes_.end()) return Var{it->second};
        Var v = push("parameter", {}, *p, true, nullptr);
        param_nodes_.emplace(p.get(), v.id);
        params_.emplace_back(p, v.id);
        return v;
    }

    // ---- linear algebra ------------------------------------------------------

    Var matmul(Var a, Var b) {
        Matrix out = masa::matmul(value(a), value(b));
        return push("matmul", {a.id, b.id}, std::move(out), any_grad({a, b}), [a, b](Graph& g, std::size_t self) {
            const Matrix& dy = g.nodes_[self].grad;
            if (g.needs(a)) g.accumulate(a, masa::matmul_nt(dy, g.value(b)));
            if (g.needs(b)) g.accumulate(b, masa::matmul(masa::transpose(g.value(a)), dy));
        });
    }

    // a * b^T
    Var matmul_nt(Var a, Var b) {
        Matrix out = masa::matmul_nt(value(a), value(b));
        return push("matmul_nt", {a.id, b.id}, std::move(out), any_grad({a, b}), [a, b](Graph& g, std::size_t self) {
            const Matrix& dy = g.nodes_[self].grad;
            if (g.needs(a)) g.accumulate(a, masa::matmul(dy, g.value(b)));
            if (g.needs(b)) g.accumulate(b, masa::matmul(masa::transpose(dy), g.value(a)));
        });
    }

    Var transpose(Var a) {
        return push("transpose", {a.id}, masa::transpose(value(a)), any_grad({a}), [a](Graph& g, std::size_t self) {
            g.accumulate(a, masa::transpose(g.nodes_[self].grad));
        });
    }

    // ---- elementwise ---------------------------------------------------------

    Var add(Var a, Var b) {
        value(a).require_same(value(b), "add");
        return push("add", {a.id, b.id}, value(a) + value(b), any_grad({a, b}), [a, b](Graph& g, std::size_t self) {
            const Matrix& dy = g.nodes_[self].grad;
            if (g.needs(a)) g.accumulate(a, dy);
            if (g.needs(b)) g.accumulate(b, dy);
        });
    }

    Var sub(Var a, Var b) {
        value(a).require_same(value(b), "sub");
        return push("sub", {a.id, b.id}, value(a) - value(b), any_grad({a, b}), [a, b](Graph& g, std::size_t self) {
            const Matrix& dy = g.nodes_[self].grad;
            if (g.needs(a)) g.accumulate(a, dy);
            if (g.needs(b)) g.accumulate(b, dy * -1.0);
        });
    }

    // Sum of one or more same-shaped nodes.
    Var add_n(std::span<const Var> xs) {
        if (xs.empty()) throw ContractError("add_n: empty operand list");
        Matrix out = value(xs[0]);
        std::vector<std::size_t> ins{xs[0].id};
        for (std::size_t i = 1; i < xs.size(); ++i) {
            out += value(xs[i]);
            ins.push_back(xs[i].id);
        }
        std::vector<Var> vs(xs.begin(), xs.end());
        return push("add_n", ins, std::move(out), any_grad(vs), [vs](Graph& g, std::size_t self) {
            for (Var v : vs)
                if (g.needs(v)) g.accumulate(v, g.nodes_[self].grad);
        });
    }

    Var mul(Var a, Var b) {
        Matrix out = hadamard(value(a), value(b));
        return push("mul", {a.id, b.id}, std::move(out), any_grad({a, b}), [a, b](Graph& g, std::size_t self) {
            const Matrix& dy = g.nodes_[self].grad;
            if (g.needs(a)) g.accumulate(a, hadamard(dy, g.value(b)));
            if (g.needs(b)) g.accumulate(b, hadamard(dy, g.value(a)));
        });
    }

    Var scale(Var a, double s) {
        return push("scale", {a.id}, value(a) * s, any_grad({a}), [a, s](Graph& g, std::size_t self) {
            g.accumulate(a, g.nodes_[self].grad * s);
        });
    }

    Var relu(Var a) {
        Matrix out = value(a);
        for (double& v : out.data()) v = v > 0.0 ? v : 0.0;
        return push("relu", {a.id}, std::move(out), any_grad({a}), [a](Graph& g, std::size_t self) {
            Matrix dx = g.nodes_[self].grad;
            const Matrix& x = g.value(a);
            for (std::size_t i = 0; i < dx.size(); ++i)
                if (x[i] <= 0.0) dx[i] = 0.0;
            g.accumulate(a, std::move(dx));
        });
    }

    // Exact GeLU: x * Phi(x).
    Var gelu(Var a) {
        Matrix out = value(a);
        for (double& v : out.data()) v = v * normal_cdf(v);
        return push("gelu", {a.id}, std::move(out), any_grad({a}), [a](Graph& g, std::size_t self) {
            Matrix dx = g.nodes_[self].grad;
            const Matrix& x = g.value(a);
            for (std::size_t i = 0; i < dx.size(); ++i) {
                const double pdf = std::exp(-0.5 * x[i] * x[i]) / std::sqrt(2.0 * std::numbers::pi);
                dx[i] *= normal_cdf(x[i]) + x[i] * pdf;
            }
            g.accumulate(a, std::move(dx));
        });
    }

    Var row_softmax(Var a) {
        Matrix out = value(a);
        for (std::size_t r = 0; r < out.rows(); ++r) softmax_inplace(out.row(r));
        return push("row_softmax", {a.id}, std::move(out), any_grad({a}), [a](Graph& g, std::size_t self) {
            const Matrix& y = g.nodes_[self].value;
            const Matrix& dy = g.nodes_[self].grad;
            Matrix dx(y.rows(), y.cols());
            for (std::size_t r = 0; r < y.rows(); ++r) {
                double dot = 0.0;
                for (std::size_t c = 0; c < y.cols(); ++c) dot += dy(r, c) * y(r, c);
                for (std::size_t c = 0; c < y.cols(); ++c) dx(r, c) = y(r, c) * (dy(r, c) - dot);
            }
            g.accumulate(a, std::move(dx));
        });
    }

    // Row-wise normalization followed by a frozen per-column gain (1 x cols).
    Var layer_norm(Var a, const Matrix& gain, double eps = 1e-5) {
        const Matrix& x = value(a);
        if (gain.rows() != 1 || gain.cols() != x.cols()) {
            throw DimensionError("layer_norm: gain " + gain.shape() + " does not match input " + x.shape());
        }
        auto xhat = std::make_shared<Matrix>(x.rows(), x.cols());
        auto inv_std = std::make_shared<std::vector<double>>(x.rows());
        Matrix out(x.rows(), x.cols());
        const double n = static_cast<double>(x.cols());
        for (std::size_t r = 0; r < x.rows(); ++r) {
            double mean = 0.0;
            for (double v : x.row(r)) mean += v;
            mean /= n;
            double var = 0.0;
            for (double v : x.row(r)) var += (v - mean) * (v - mean);
            var /= n;
            const double is = 1.0 / std::sqrt(var + eps);
            (*inv_std)[r] = is;
            for (std::size_t c = 0; c < x.cols(); ++c) {
                (*xhat)(r, c) = (x(r, c) - mean) * is;
                out(r, c) = (*xhat)(r, c) * gain(0, c);
            }
        }
        return push("layer_norm", {a.id}, std::move(out), any_grad({a}),
                    [a, gain, xhat, inv_std](Graph& g, std::size_t self) {
                        const Matrix& dy = g.nodes_[self].grad;
                        Matrix dx(dy.rows(), dy.cols());
                        const double n = static_cast<double>(dy.cols());
                        for (std::size_t r = 0; r < dy.rows(); ++r) {
                            double m1 = 0.0, m2 = 0.0;
                            for (std::size_t c = 0; c < dy.cols(); ++c) {
                                const double dxh = dy(r, c) * gain(0, c);
                                m1 += dxh;
                                m2 += dxh * (*xhat)(r, c);
                            }
                            m1 /= n;
                            m2 /= n;
                            for (std::size_t c = 0; c < dy.cols(); ++c) {
                                const double dxh = dy(r, c) * gain(0, c);
                                dx(r, c) = (*inv_std)[r] * (dxh - m1 - (*xhat)(r, c) * m2);
                            }
                        }
                        g.accumulate(a, std::move(dx));
                    });
    }

    // ---- reductions ----------------------------------------------------------

    Var sum(Var a) {
        return push("sum", {a.id}, Matrix(1, 1, masa::sum(value(a))), any_grad({a}), [a](Graph& g, std::size_t self) {
            const Matrix& x = g.value(a);
            g.accumulate(a, Matrix(x.rows(), x.cols(), g.nodes_[self].grad[0]));
        });
    }

    Var sq_norm(Var a) {
        double s = 0.0;
        for (double v : value(a).data()) s += v * v;
        return push("sq_norm", {a.id}, Matrix(1, 1, s), any_grad({a}), [a](Graph& g, std::size_t self) {
            g.accumulate(a, g.value(a) * (2.0 * g.nodes_[self].grad[0]));
        });
    }

    // mean((pred - target)^2) over all entries.
    Var mse(Var pred, const Matrix& target) {
        value(pred).require_same(target, "mse");
        auto diff = std::make_shared<Matrix>(value(pred) - target);
        double s = 0.0;
        for (double v : diff->data()) s += v * v;
        const double n = static_cast<double>(diff->size());
        return push("mse", {pred.id}, Matrix(1, 1, s / n), any_grad({pred}), [pred, diff, n](Graph& g, std::size_t self) {
            g.accumulate(pred, *diff * (2.0 * g.nodes_[self].grad[0] / n));
        });
    }

    // Mean cross-entropy of row-wise softmax(logits) against integer labels.
    Var softmax_cross_entropy(Var logits, std::vector<std::size_t> labels) {
        const Matrix& z = value(logits);
        if (labels.size() != z.rows()) {
            throw DimensionError("softmax_cross_entropy: " + std::to_string(labels.size()) + " labels for " + z.shape());
        }
        auto probs = std::make_shared<Matrix>(z);
        double loss = 0.0;
        for (std::size_t r = 0; r < z.rows(); ++r) {
            if (labels[r] >= z.cols()) throw ContractError("softmax_cross_entropy: label out of range");
            softmax_inplace(probs->row(r));
            loss -= std::log((*probs)(r, labels[r]));
        }
        const double n = static_cast<double>(z.rows());
        return push("softmax_cross_entropy", {logits.id}, Matrix(1, 1, loss / n), any_grad({logits}),
                    [logits, probs, labels = std::move(labels), n](Graph& g, std::size_t self) {
                        Matrix dz = *probs;
                        for (std::size_t r = 0; r < dz.rows(); ++r) dz(r, labels[r]) -= 1.0;
                        g.accumulate(logits, dz * (g.nodes_[self].grad[0] / n));
                    });
    }

    // Mean over consecutive blocks of `group` rows: [n*group x c] -> [n x c].
    Var mean_pool_rows(Var a, std::size_t group) {
        const Matrix& x = value(a);
        if (group == 0 || x.rows() % group != 0) {
            throw DimensionError("mean_pool_rows: " + x.shape() + " rows not divisible by " + std::to_string(group));
        }
        Matrix out(x.rows() / group, x.cols());
        for (std::size_t r = 0; r < x.rows(); ++r)
            for (std::size_t c = 0; c < x.cols(); ++c) out(r / group, c) += x(r, c) / static_cast<double>(group);
        return push("mean_pool_rows", {a.id}, std::move(out), any_grad({a}), [a, group](Graph& g, std::size_t self) {
            const Matrix& dy = g.nodes_[self].grad;
            const Matrix& x = g.value(a);
            Matrix dx(x.rows(), x.cols());
            for (std::size_t r = 0; r < x.rows(); ++r)
                for (std::size_t c = 0; c < x.cols(); ++c) dx(r, c) = dy(r / group, c) / static_cast<double>(group);
            g.accumulate(a, std::move(dx));
        });
    }

    // Full (non-causal) multi-head scaled dot-product attention over independent
    // sequences of `shape.seq_len` consecutive rows. Query heads are mapped onto
    // key/value heads in contiguous groups (grouped-KV when n_kv_heads < n_heads).
    Var attention(Var q, Var k, Var v, AttentionShape shape) {
        const Matrix& Q = value(q);
        const Matrix& K = value(k);
        const Matrix& V = value(v);
        const std::size_t s = shape.seq_len, H = shape.n_heads, Hkv = shape.n_kv_heads;
        if (s == 0 || H == 0 || Hkv == 0 || H % Hkv != 0 || Q.cols() % H != 0) {
            throw DimensionError("attention: invalid head layout for q " + Q.shape());
        }
        const std::size_t dh = Q.cols() / H;
        if (!K.same_shape(V) || K.rows() != Q.rows() || K.cols() != Hkv * dh || Q.rows() % s != 0) {
            throw DimensionError("attention: q " + Q.shape() + ", k " + K.shape() + ", v " + V.shape() +
                                 " inconsistent with seq_len " + std::to_string(s));
        }
        const std::size_t B = Q.rows() / s, per_group = H / Hkv;
        const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
        auto probs = std::make_shared<std::vector<Matrix>>();
        probs->reserve(B * H);
        Matrix out(Q.rows(), Q.cols());
        for (std::size_t b = 0; b < B; ++b) {
            for (std::size_t h = 0; h < H; ++h) {
                const std::size_t kvh = h / per_group;
                Matrix P(s, s);
                for (std::size_t i = 0; i < s; ++i) {
                    for (std::size_t j = 0; j < s; ++j) {
                        double acc = 0.0;
                        for (std::size_t d = 0; d < dh; ++d) acc += Q(b * s + i, h * dh + d) * K(b * s + j, kvh * dh + d);
                        P(i, j) = acc * inv_sqrt;
                    }
                    softmax_inplace(P.row(i));
                }
                for (std::size_t i = 0; i < s; ++i)
                    for (std::size_t j = 0; j < s; ++j)
                        for (std::size_t d = 0; d < dh; ++d) out(b * s + i, h * dh + d) += P(i, j) * V(b * s + j, kvh * dh + d);
                probs->push_back(std::move(P));
            }
        }
        return push("attention", {q.id, k.id, v.id}, std::move(out), any_grad({q, k, v}),
                    [q, k, v, s, B, H, per_group, dh, inv_sqrt, probs](Graph& g, std::size_t self) {
                        const Matrix& dO = g.nodes_[self].grad;
                        const Matrix& Q = g.value(q);
                        const Matrix& K = g.value(k);
                        const Matrix& V = g.value(v);
                        Matrix dQ(Q.rows(), Q.cols()), dK(K.rows(), K.cols()), dV(V.rows(), V.cols());
                        Matrix dP(s, s);
                        for (std::size_t b = 0; b < B; ++b) {
                            for (std::size_t h = 0; h < H; ++h) {
                                const std::size_t kvh = h / per_group;
                                const Matrix& P = (*probs)[b * H + h];
                                for (std::size_t i = 0; i < s; ++i)
                                    for (std::size_t j = 0; j < s; ++j) {
                                        double acc = 0.0;
                                        for (std::size_t d = 0; d < dh; ++d) {
                                            acc += dO(b * s + i, h * dh + d) * V(b * s + j, kvh * dh + d);
                                            dV(b * s + j, kvh * dh + d) += P(i, j) * dO(b * s + i, h * dh + d);
                                        }
                                        dP(i, j) = acc;
                                    }
                                for (std::size_t i = 0; i < s; ++i) {
                                    double dot = 0.0;
                                    for (std::size_t j = 0; j < s; ++j) dot += dP(i, j) * P(i, j);
                                    for (std::size_t j = 0; j < s; ++j) {
                                        const double dS = P(i, j) * (dP(i, j) - dot) * inv_sqrt;
                                        for (std::size_t d = 0; d < dh; ++d) {
                                            dQ(b * s + i, h * dh + d) += dS * K(b * s + j, kvh * dh + d);
                                            dK(b * s + j, kvh * dh + d) += dS * Q(b * s + i, h * dh + d);
                                        }
                                    }
                                }
                            }
                        }
                        if (g.needs(q)) g.accumulate(q, std::move(dQ));
                        if (g.needs(k)) g.accumulate(k, std::move(dK));
                        if (g.needs(v)) g.accumulate(v, std::move(dV));
                    });
    }

    // ---- evaluation ----------------------------------------------------------

    const Matrix& value(Var v) const { return node(v).value; }
    bool requires_grad(Var v) const { return node(v).requires_grad; }
    std::size_t size() const noexcept { return nodes_.size(); }

    // Reverse sweep from a 1x1 loss. Gradients from earlier calls are discarded.
    void backward(Var loss) {
        const Matrix& lv = node(loss).value;
        if (lv.rows() != 1 || lv.cols() != 1) {
            throw ContractError("backward: loss must be 1x1, got " + lv.shape());
        }
        for (auto& n : nodes_) n.grad = Matrix();
        nodes_[loss.id].grad = Matrix(1, 1, 1.0);
        for (std::size_t i = loss.id + 1; i-- > 0;) {
            Node& n = nodes_[i];
            if (!n.requires_grad || n.grad.empty() || !n.backward) continue;
            n.backward(*this, i);
        }
        for (auto& n : nodes_)
            if (n.requires_grad && n.grad.empty()) n.grad = Matrix(n.value.rows(), n.value.cols());
    }

    // Gradient of the last backward() for `v`. Non-trainable nodes report an all-zero slot.
    Matrix grad(Var v) const {
        const Node& n = node(v);
        if (n.grad.empty()) return Matrix(n.value.rows(), n.value.cols());
        return n.grad;
    }

    // (storage, gradient) for every parameter() leaf, in first-use order.
    std::vector<std::pair<ParamPtr, Matrix>> parameter_grads() const {
        std::vector<std::pair<ParamPtr, Matrix>> out;
        out.reserve(params_.size());
        for (const auto& [p, id] : params_) out.emplace_back(p, grad(Var{id}));
        return out;
    }

    static void softmax_inplace(std::span<double> row) {
        double mx = row[0];
        for (double v : row) mx = std::max(mx, v);
        double z = 0.0;
        for (double& v : row) {
            v = std::exp(v - mx);
            z += v;
        }
        for (double& v : row) v /= z;
    }

    static double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::numbers::sqrt2); }

private:
    using BackwardFn = std::function<void(Graph&, std::size_t)>;

    struct Node {
        const char* op;
        std::vector<std::size_t> inputs;
        Matrix value;
        Matrix grad;
        bool requires_grad;
        BackwardFn backward;
    };

    const Node& node(Var v) const {
        if (v.id >= nodes_.size()) throw ContractError("Graph: unknown node id " + std::to_string(v.id));
        return nodes_[v.id];
    }

    bool needs(Var v) const { return nodes_[v.id].requires_grad; }

    bool any_grad(std::initializer_list<Var> vs) const {
        for (Var v : vs)
            if (node(v).requires_grad) return true;
        return false;
    }
    bool any_grad(const std::vector<Var>& vs) const {
        for (Var v : vs)
            if (node(v).requires_grad) return true;
        return false;
    }

    void accumulate(Var v, Matrix g) {
        Node& n = nodes_[v.id];
        if (!n.requires_grad) return;
        if (n.grad.empty()) {
            n.grad = std::move(g);
        } else {
            n.grad += g;
        }
    }

    Var push(const char* op, std::vector<std::size_t> inputs, Matrix value, bool requires_grad, BackwardFn fn) {
        if (!value.all_finite()) throw NumericError(std::string("non-finite value produced by ") + op);
        nodes_.push_back(Node{op, std::move(inputs), std::move(value), Matrix(), requires_grad, std::move(fn)});
        return Var{nodes_.size() - 1};
    }

    std::vector<Node> nodes_;
    std::unordered_map<const Matrix*, std::size_t> param_nodes_;
    std::vector<std::pair<ParamPtr, std::size_t>> params_;
};

// Central differences (f(x + eps e_i) - f(x - eps e_i)) / (2 eps) for every entry.
inline Matrix finite_diff_grad(const std::function<double(const Matrix&)>& f, const Matrix& x, double eps) {
    if (!(eps > 0.0)) throw ContractError("finite_diff_grad: eps must be positive");
    Matrix g(x.rows(), x.cols());
    Matrix probe = x;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double orig = probe[i];
        probe[i] = orig + eps;
        const double fp = f(probe);
        probe[i] = orig - eps;
        const double fm = f(probe);
        probe[i] = orig;
        g[i] = (fp - fm) / (2.0 * eps);
    }
    return g;
}

} // namespace masa
