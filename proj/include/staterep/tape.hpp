#pragma once

#include <functional>
#include <utility>
#include <vector>

#include "staterep/matrix.hpp"

namespace staterep {

using ValueId = int;

// Reverse-mode differentiation tape. Operations evaluate eagerly and record
// a node; backward() replays the nodes in reverse. This is deliberately a
// minimal facility: just the primitives the embedding model and the training
// losses need, no control flow, no higher-order derivatives.
//
// Tapes are single-threaded and not shareable across threads.
class Tape {
    enum class Op {
        Leaf,
        Affine,
        Relu,
        L2NormalizeRows,
        MatmulNT,
        PairwiseSqDist,
        LogsumexpRows,
        Gather,
        SelectRows,
        Sub,
        AddScalar,
        Scale,
        BroadcastSubCols,
        WeightedSum,
        MeanAll,
    };

    struct Node {
        Op op;
        int operands[3] = {-1, -1, -1};
        Matrix value;
        Matrix grad;
        double scalar = 0.0;                              // AddScalar / Scale / eps
        std::vector<std::pair<std::size_t, std::size_t>> coords;  // Gather
        std::vector<std::size_t> rows;                    // SelectRows
        std::vector<std::uint8_t> mask;                   // LogsumexpRows (empty = all)
        Matrix weights;                                   // WeightedSum
    };

  public:
    const Matrix& value(ValueId id) const { return node(id).value; }

    // Gradient of the last backward() seed w.r.t. this node's value.
    const Matrix& grad(ValueId id) const {
        const Node& n = node(id);
        if (n.grad.empty()) throw UsageError("grad requested before backward()");
        return n.grad;
    }

    ValueId leaf(Matrix m) {
        Node n;
        n.op = Op::Leaf;
        n.value = std::move(m);
        return push(std::move(n));
    }

    ValueId affine(ValueId x, ValueId w, ValueId b) {
        Node n;
        n.op = Op::Affine;
        n.operands[0] = x;
        n.operands[1] = w;
        n.operands[2] = b;
        n.value = staterep::affine(value(x), value(w), value(b));
        return push(std::move(n));
    }

    ValueId relu(ValueId x) {
        Node n;
        n.op = Op::Relu;
        n.operands[0] = x;
        n.value = staterep::relu(value(x));
        return push(std::move(n));
    }

    ValueId l2_normalize_rows(ValueId x, double eps = 1e-12) {
        if (eps <= 0.0) throw UsageError("l2_normalize_rows: eps must be > 0");
        Node n;
        n.op = Op::L2NormalizeRows;
        n.operands[0] = x;
        n.scalar = eps;
        n.value = staterep::l2_normalize_rows(value(x), eps);
        return push(std::move(n));
    }

    ValueId matmul_nt(ValueId a, ValueId b) {
        Node n;
        n.op = Op::MatmulNT;
        n.operands[0] = a;
        n.operands[1] = b;
        n.value = staterep::matmul_nt(value(a), value(b));
        return push(std::move(n));
    }

    ValueId pairwise_sq_dist(ValueId a, ValueId b) {
        Node n;
        n.op = Op::PairwiseSqDist;
        n.operands[0] = a;
        n.operands[1] = b;
        n.value = staterep::pairwise_sq_dist(value(a), value(b));
        return push(std::move(n));
    }

    // Row-wise logsumexp over the entries whose mask bit is set (empty mask
    // means all entries). Output is n x 1.
    ValueId logsumexp_rows(ValueId x, std::vector<std::uint8_t> mask = {}) {
        const Matrix& xv = value(x);
        if (!mask.empty() && mask.size() != xv.size()) {
            throw DimensionError("logsumexp_rows: mask size mismatch");
        }
        Node n;
        n.op = Op::LogsumexpRows;
        n.operands[0] = x;
        n.mask = std::move(mask);
        Matrix out(xv.rows(), 1);
        for (std::size_t r = 0; r < xv.rows(); ++r) {
            double m = -HUGE_VAL;
            for (std::size_t c = 0; c < xv.cols(); ++c) {
                if (masked_in(n.mask, xv, r, c)) m = std::max(m, xv(r, c));
            }
            if (m == -HUGE_VAL) throw UsageError("logsumexp_rows: empty row selection");
            double s = 0.0;
            for (std::size_t c = 0; c < xv.cols(); ++c) {
                if (masked_in(n.mask, xv, r, c)) s += std::exp(xv(r, c) - m);
            }
            out(r, 0) = m + std::log(s);
        }
        n.value = std::move(out);
        return push(std::move(n));
    }

    // Picks entries (r_k, c_k) into a k x 1 column.
    ValueId gather(ValueId x, std::vector<std::pair<std::size_t, std::size_t>> coords) {
        const Matrix& xv = value(x);
        Matrix out(coords.size(), 1);
        for (std::size_t k = 0; k < coords.size(); ++k) {
            if (coords[k].first >= xv.rows() || coords[k].second >= xv.cols()) {
                throw DimensionError("gather: coordinate out of range");
            }
            out(k, 0) = xv(coords[k].first, coords[k].second);
        }
        Node n;
        n.op = Op::Gather;
        n.operands[0] = x;
        n.coords = std::move(coords);
        n.value = std::move(out);
        return push(std::move(n));
    }

    ValueId select_rows(ValueId x, std::vector<std::size_t> rows) {
        Node n;
        n.op = Op::SelectRows;
        n.operands[0] = x;
        n.value = staterep::select_rows(value(x), rows);
        n.rows = std::move(rows);
        return push(std::move(n));
    }

    ValueId sub(ValueId a, ValueId b) {
        const Matrix& av = value(a);
        const Matrix& bv = value(b);
        if (!av.same_shape(bv)) throw DimensionError("sub: shape mismatch");
        Node n;
        n.op = Op::Sub;
        n.operands[0] = a;
        n.operands[1] = b;
        Matrix out = av;
        for (std::size_t i = 0; i < out.size(); ++i) out.data()[i] -= bv.data()[i];
        n.value = std::move(out);
        return push(std::move(n));
    }

    ValueId add_scalar(ValueId a, double c) {
        Node n;
        n.op = Op::AddScalar;
        n.operands[0] = a;
        n.scalar = c;
        Matrix out = value(a);
        for (std::size_t i = 0; i < out.size(); ++i) out.data()[i] += c;
        n.value = std::move(out);
        return push(std::move(n));
    }

    ValueId scale(ValueId a, double c) {
        Node n;
        n.op = Op::Scale;
        n.operands[0] = a;
        n.scalar = c;
        Matrix out = value(a);
        for (std::size_t i = 0; i < out.size(); ++i) out.data()[i] *= c;
        n.value = std::move(out);
        return push(std::move(n));
    }

    // out[i,j] = v[i] - s[i,j], with v an n x 1 column.
    ValueId broadcast_sub_cols(ValueId v, ValueId s) {
        const Matrix& vv = value(v);
        const Matrix& sv = value(s);
        if (vv.cols() != 1 || vv.rows() != sv.rows()) {
            throw DimensionError("broadcast_sub_cols: v must be n x 1 matching s rows");
        }
        Node n;
        n.op = Op::BroadcastSubCols;
        n.operands[0] = v;
        n.operands[1] = s;
        Matrix out(sv.rows(), sv.cols());
        for (std::size_t r = 0; r < sv.rows(); ++r) {
            for (std::size_t c = 0; c < sv.cols(); ++c) out(r, c) = vv(r, 0) - sv(r, c);
        }
        n.value = std::move(out);
        return push(std::move(n));
    }

    // sum(weights ⊙ x) as a 1 x 1 scalar; weights are a tape constant.
    ValueId weighted_sum(ValueId x, Matrix weights) {
        const Matrix& xv = value(x);
        if (!xv.same_shape(weights)) throw DimensionError("weighted_sum: shape mismatch");
        Node n;
        n.op = Op::WeightedSum;
        n.operands[0] = x;
        double s = 0.0;
        for (std::size_t i = 0; i < xv.size(); ++i) s += xv.data()[i] * weights.data()[i];
        n.weights = std::move(weights);
        n.value = Matrix(1, 1);
        n.value(0, 0) = s;
        return push(std::move(n));
    }

    ValueId mean_all(ValueId x) {
        const Matrix& xv = value(x);
        if (xv.empty()) throw UsageError("mean_all of empty matrix");
        Node n;
        n.op = Op::MeanAll;
        n.operands[0] = x;
        n.value = Matrix(1, 1);
        n.value(0, 0) = staterep::sum_all(xv) / static_cast<double>(xv.size());
        return push(std::move(n));
    }

    // Reverse pass seeded at a scalar node. A second call without
    // reset_gradients() is an error (gradients would double-accumulate).
    void backward(ValueId loss) {
        const Node& seed = node(loss);
        if (seed.value.rows() != 1 || seed.value.cols() != 1) {
            throw UsageError("backward: seed must be a 1 x 1 scalar");
        }
        if (backward_done_) {
            throw UsageError("backward already run on this tape; call reset_gradients()");
        }
        backward_done_ = true;
        for (auto& n : nodes_) {
            n.grad = Matrix(n.value.rows(), n.value.cols());
        }
        nodes_[static_cast<std::size_t>(loss)].grad(0, 0) = 1.0;
        for (int i = loss; i >= 0; --i) propagate(nodes_[static_cast<std::size_t>(i)]);
    }

    void reset_gradients() {
        for (auto& n : nodes_) n.grad = Matrix();
        backward_done_ = false;
    }

    std::size_t num_nodes() const { return nodes_.size(); }

  private:
    static bool masked_in(const std::vector<std::uint8_t>& mask, const Matrix& x,
                          std::size_t r, std::size_t c) {
        return mask.empty() || mask[r * x.cols() + c] != 0;
    }

    const Node& node(ValueId id) const {
        if (id < 0 || static_cast<std::size_t>(id) >= nodes_.size()) {
            throw UsageError("invalid tape value id");
        }
        return nodes_[static_cast<std::size_t>(id)];
    }

    ValueId push(Node n) {
        if (backward_done_) {
            throw UsageError("tape already differentiated; build a fresh tape");
        }
        nodes_.push_back(std::move(n));
        return static_cast<ValueId>(nodes_.size() - 1);
    }

    Matrix& grad_of(int id) { return nodes_[static_cast<std::size_t>(id)].grad; }
    const Matrix& value_of(int id) const { return nodes_[static_cast<std::size_t>(id)].value; }

    void propagate(const Node& n) {
        using detail::as_eigen;
        const Matrix& g = n.grad;
        switch (n.op) {
            case Op::Leaf:
                break;
            case Op::Affine: {
                const Matrix& x = value_of(n.operands[0]);
                const Matrix& w = value_of(n.operands[1]);
                Matrix& gx = grad_of(n.operands[0]);
                Matrix& gw = grad_of(n.operands[1]);
                Matrix& gb = grad_of(n.operands[2]);
                as_eigen(gx).noalias() += as_eigen(g) * as_eigen(w).transpose();
                as_eigen(gw).noalias() += as_eigen(x).transpose() * as_eigen(g);
                for (std::size_t r = 0; r < g.rows(); ++r) {
                    for (std::size_t c = 0; c < g.cols(); ++c) gb(0, c) += g(r, c);
                }
                break;
            }
            case Op::Relu: {
                const Matrix& x = value_of(n.operands[0]);
                Matrix& gx = grad_of(n.operands[0]);
                for (std::size_t i = 0; i < x.size(); ++i) {
                    if (x.data()[i] > 0.0) gx.data()[i] += g.data()[i];
                }
                break;
            }
            case Op::L2NormalizeRows: {
                const Matrix& x = value_of(n.operands[0]);
                const Matrix& y = n.value;
                Matrix& gx = grad_of(n.operands[0]);
                const double eps = n.scalar;
                for (std::size_t r = 0; r < x.rows(); ++r) {
                    const double norm = row_norm(x, r);
                    if (norm >= eps) {
                        double dot = 0.0;
                        for (std::size_t c = 0; c < x.cols(); ++c) dot += g(r, c) * y(r, c);
                        for (std::size_t c = 0; c < x.cols(); ++c) {
                            gx(r, c) += (g(r, c) - dot * y(r, c)) / norm;
                        }
                    } else {
                        for (std::size_t c = 0; c < x.cols(); ++c) gx(r, c) += g(r, c) / eps;
                    }
                }
                break;
            }
            case Op::MatmulNT: {
                const Matrix& a = value_of(n.operands[0]);
                const Matrix& b = value_of(n.operands[1]);
                Matrix& ga = grad_of(n.operands[0]);
                Matrix& gb = grad_of(n.operands[1]);
                as_eigen(ga).noalias() += as_eigen(g) * as_eigen(b);
                as_eigen(gb).noalias() += as_eigen(g).transpose() * as_eigen(a);
                break;
            }
            case Op::PairwiseSqDist: {
                const Matrix& a = value_of(n.operands[0]);
                const Matrix& b = value_of(n.operands[1]);
                Matrix& ga = grad_of(n.operands[0]);
                Matrix& gb = grad_of(n.operands[1]);
                // dA_i += 2 (sum_j g_ij) a_i - 2 (g B)_i ; symmetric for B.
                Matrix gB = matmul(g, b);
                Matrix gTA = matmul_tn(g, a);
                for (std::size_t i = 0; i < a.rows(); ++i) {
                    double rs = 0.0;
                    for (std::size_t j = 0; j < b.rows(); ++j) rs += g(i, j);
                    for (std::size_t c = 0; c < a.cols(); ++c) {
                        ga(i, c) += 2.0 * (rs * a(i, c) - gB(i, c));
                    }
                }
                for (std::size_t j = 0; j < b.rows(); ++j) {
                    double cs = 0.0;
                    for (std::size_t i = 0; i < a.rows(); ++i) cs += g(i, j);
                    for (std::size_t c = 0; c < b.cols(); ++c) {
                        gb(j, c) += 2.0 * (cs * b(j, c) - gTA(j, c));
                    }
                }
                break;
            }
            case Op::LogsumexpRows: {
                const Matrix& x = value_of(n.operands[0]);
                Matrix& gx = grad_of(n.operands[0]);
                for (std::size_t r = 0; r < x.rows(); ++r) {
                    for (std::size_t c = 0; c < x.cols(); ++c) {
                        if (masked_in(n.mask, x, r, c)) {
                            gx(r, c) += g(r, 0) * std::exp(x(r, c) - n.value(r, 0));
                        }
                    }
                }
                break;
            }
            case Op::Gather: {
                Matrix& gx = grad_of(n.operands[0]);
                for (std::size_t k = 0; k < n.coords.size(); ++k) {
                    gx(n.coords[k].first, n.coords[k].second) += g(k, 0);
                }
                break;
            }
            case Op::SelectRows: {
                Matrix& gx = grad_of(n.operands[0]);
                for (std::size_t i = 0; i < n.rows.size(); ++i) {
                    for (std::size_t c = 0; c < g.cols(); ++c) gx(n.rows[i], c) += g(i, c);
                }
                break;
            }
            case Op::Sub: {
                Matrix& ga = grad_of(n.operands[0]);
                Matrix& gb = grad_of(n.operands[1]);
                for (std::size_t i = 0; i < g.size(); ++i) {
                    ga.data()[i] += g.data()[i];
                    gb.data()[i] -= g.data()[i];
                }
                break;
            }
            case Op::AddScalar: {
                Matrix& ga = grad_of(n.operands[0]);
                for (std::size_t i = 0; i < g.size(); ++i) ga.data()[i] += g.data()[i];
                break;
            }
            case Op::Scale: {
                Matrix& ga = grad_of(n.operands[0]);
                for (std::size_t i = 0; i < g.size(); ++i) ga.data()[i] += n.scalar * g.data()[i];
                break;
            }
            case Op::BroadcastSubCols: {
                Matrix& gv = grad_of(n.operands[0]);
                Matrix& gs = grad_of(n.operands[1]);
                for (std::size_t r = 0; r < g.rows(); ++r) {
                    for (std::size_t c = 0; c < g.cols(); ++c) {
                        gv(r, 0) += g(r, c);
                        gs(r, c) -= g(r, c);
                    }
                }
                break;
            }
            case Op::WeightedSum: {
                Matrix& gx = grad_of(n.operands[0]);
                const double s = g(0, 0);
                for (std::size_t i = 0; i < gx.size(); ++i) {
                    gx.data()[i] += s * n.weights.data()[i];
                }
                break;
            }
            case Op::MeanAll: {
                Matrix& gx = grad_of(n.operands[0]);
                const double s = g(0, 0) / static_cast<double>(gx.size());
                for (std::size_t i = 0; i < gx.size(); ++i) gx.data()[i] += s;
                break;
            }
        }
    }

    std::vector<Node> nodes_;
    bool backward_done_ = false;
};

// Central finite differences of a scalar function, the gradient oracle for
// every differentiable path in this project.
inline Matrix finite_difference_gradient(const std::function<double(const Matrix&)>& f,
                                         const Matrix& x, double h = 1e-6) {
    if (h <= 0.0) throw UsageError("finite_difference_gradient: h must be > 0");
    Matrix grad(x.rows(), x.cols());
    Matrix probe = x;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double orig = probe.data()[i];
        probe.data()[i] = orig + h;
        const double fp = f(probe);
        probe.data()[i] = orig - h;
        const double fm = f(probe);
        probe.data()[i] = orig;
        grad.data()[i] = (fp - fm) / (2.0 * h);
    }
    return grad;
}

}  // namespace staterep
