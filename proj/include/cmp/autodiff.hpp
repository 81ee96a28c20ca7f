#pragma once

#include <cstdint>
#include <deque>
#include <memory>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "cmp/linalg.hpp"
#include "cmp/matrix.hpp"

namespace cmp::ad {

constexpr double kNormEps = 1e-12;

/// One recorded operation. Nodes are owned by the Graph that created them
/// and are ordered so that inputs always precede consumers.
struct Node {
    Matrix value;
    Matrix grad;  // same shape as value, zero until backward
    bool stop_grad = false;
    std::vector<Node*> inputs;
    std::function<void(Node&)> backward_fn;  // pushes grad into inputs

    std::size_t num_rows() const { return value.rows(); }
    std::size_t num_cols() const { return value.cols(); }
    bool is_scalar() const { return value.rows() == 1 && value.cols() == 1; }
    double scalar() const { return value[0]; }

    /// Gradient accumulation; a stop-grad barrier drops everything, so its
    /// accumulator stays bitwise zero and nothing ever flows upstream of it.
    void accumulate(const Matrix& g) {
        if (stop_grad) return;
        grad += g;
    }
};

/// Tape for one forward/backward pass. Single-writer; values are immutable
/// once recorded.
class Graph {
public:
    Graph() = default;
    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    /// Leaf holding a differentiable value (parameters, probed inputs).
    Node* input(Matrix value) { return make(std::move(value), false); }

    /// Leaf that never receives gradient (targets from the EMA encoder).
    Node* constant(Matrix value) { return make(std::move(value), true); }

    Node* matmul(Node* a, Node* b) {
        if (a->num_cols() != b->num_rows())
            throw std::invalid_argument("matmul: inner dimensions disagree");
        Node* out = make(cmp::matmul(a->value, b->value), false, {a, b});
        out->backward_fn = [a, b](Node& n) {
            a->accumulate(cmp::matmul(n.grad, b->value.transposed()));
            b->accumulate(cmp::matmul(a->value.transposed(), n.grad));
        };
        return out;
    }

    Node* add(Node* a, Node* b) {
        if (!a->value.same_shape(b->value))
            throw std::invalid_argument("add: shape mismatch");
        Node* out = make(a->value + b->value, false, {a, b});
        out->backward_fn = [a, b](Node& n) {
            a->accumulate(n.grad);
            b->accumulate(n.grad);
        };
        return out;
    }

    Node* sub(Node* a, Node* b) {
        if (!a->value.same_shape(b->value))
            throw std::invalid_argument("sub: shape mismatch");
        Node* out = make(a->value - b->value, false, {a, b});
        out->backward_fn = [a, b](Node& n) {
            a->accumulate(n.grad);
            b->accumulate(n.grad * -1.0);
        };
        return out;
    }

    Node* scale(Node* a, double s) {
        Node* out = make(a->value * s, false, {a});
        out->backward_fn = [a, s](Node& n) { a->accumulate(n.grad * s); };
        return out;
    }

    /// Hadamard product.
    Node* mul(Node* a, Node* b) {
        if (!a->value.same_shape(b->value))
            throw std::invalid_argument("mul: shape mismatch");
        Matrix v = a->value;
        for (std::size_t i = 0; i < v.size(); ++i) v[i] *= b->value[i];
        Node* out = make(std::move(v), false, {a, b});
        out->backward_fn = [a, b](Node& n) {
            Matrix ga = n.grad, gb = n.grad;
            for (std::size_t i = 0; i < ga.size(); ++i) {
                ga[i] *= b->value[i];
                gb[i] *= a->value[i];
            }
            a->accumulate(ga);
            b->accumulate(gb);
        };
        return out;
    }

    Node* relu(Node* a) {
        Matrix v = a->value;
        for (double& x : v.data())
            if (x < 0.0) x = 0.0;
        Node* out = make(std::move(v), false, {a});
        out->backward_fn = [a](Node& n) {
            Matrix g = n.grad;
            for (std::size_t i = 0; i < g.size(); ++i)
                if (a->value[i] <= 0.0) g[i] = 0.0;
            a->accumulate(g);
        };
        return out;
    }

    /// a is b x d, bias is 1 x d, broadcast over rows.
    Node* add_row_broadcast(Node* a, Node* bias) {
        if (bias->num_rows() != 1 || bias->num_cols() != a->num_cols())
            throw std::invalid_argument("add_row_broadcast: bias shape mismatch");
        Matrix v = a->value;
        for (std::size_t r = 0; r < v.rows(); ++r)
            for (std::size_t c = 0; c < v.cols(); ++c) v(r, c) += bias->value(0, c);
        Node* out = make(std::move(v), false, {a, bias});
        out->backward_fn = [a, bias](Node& n) {
            a->accumulate(n.grad);
            Matrix gb(1, bias->num_cols());
            for (std::size_t r = 0; r < n.grad.rows(); ++r)
                for (std::size_t c = 0; c < n.grad.cols(); ++c) gb(0, c) += n.grad(r, c);
            bias->accumulate(gb);
        };
        return out;
    }

    Node* transpose(Node* a) {
        Node* out = make(a->value.transposed(), false, {a});
        out->backward_fn = [a](Node& n) { a->accumulate(n.grad.transposed()); };
        return out;
    }

    Node* sum(Node* a) {
        double s = 0.0;
        for (double v : a->value.data()) s += v;
        Node* out = make(Matrix(1, 1, {s}), false, {a});
        out->backward_fn = [a](Node& n) {
            a->accumulate(Matrix(a->num_rows(), a->num_cols(), n.grad[0]));
        };
        return out;
    }

    Node* mean_all(Node* a) { return scale(sum(a), 1.0 / static_cast<double>(a->value.size())); }

    /// Element-wise mean of equally shaped nodes; backward hands 1/N to each.
    Node* mean_stack(const std::vector<Node*>& parts) {
        if (parts.empty())
            throw std::invalid_argument("mean_stack: empty sequence");
        Matrix v = parts[0]->value;
        for (std::size_t i = 1; i < parts.size(); ++i) {
            if (!parts[i]->value.same_shape(v))
                throw std::invalid_argument("mean_stack: shape mismatch");
            v += parts[i]->value;
        }
        v *= 1.0 / static_cast<double>(parts.size());
        Node* out = make(std::move(v), false, parts);
        std::vector<Node*> ins = parts;
        out->backward_fn = [ins](Node& n) {
            Matrix g = n.grad * (1.0 / static_cast<double>(ins.size()));
            for (Node* p : ins) p->accumulate(g);
        };
        return out;
    }

    /// Stack nodes vertically (all same column count).
    Node* concat_rows(const std::vector<Node*>& parts) {
        if (parts.empty())
            throw std::invalid_argument("concat_rows: empty sequence");
        std::size_t cols = parts[0]->num_cols(), rows = 0;
        for (Node* p : parts) {
            if (p->num_cols() != cols)
                throw std::invalid_argument("concat_rows: column mismatch");
            rows += p->num_rows();
        }
        Matrix v(rows, cols);
        std::size_t r0 = 0;
        for (Node* p : parts) {
            for (std::size_t r = 0; r < p->num_rows(); ++r)
                for (std::size_t c = 0; c < cols; ++c) v(r0 + r, c) = p->value(r, c);
            r0 += p->num_rows();
        }
        Node* out = make(std::move(v), false, parts);
        std::vector<Node*> ins = parts;
        out->backward_fn = [ins](Node& n) {
            std::size_t r0 = 0;
            for (Node* p : ins) {
                Matrix g(p->num_rows(), p->num_cols());
                for (std::size_t r = 0; r < g.rows(); ++r)
                    for (std::size_t c = 0; c < g.cols(); ++c) g(r, c) = n.grad(r0 + r, c);
                p->accumulate(g);
                r0 += p->num_rows();
            }
        };
        return out;
    }

    /// Element gather from the flattened input; index < 0 reads as zero.
    /// Shared by the im2col convolution path.
    Node* gather(Node* a, std::size_t rows, std::size_t cols,
                 std::vector<std::int64_t> idx) {
        if (idx.size() != rows * cols)
            throw std::invalid_argument("gather: index map size mismatch");
        Matrix v(rows, cols);
        for (std::size_t i = 0; i < idx.size(); ++i)
            v[i] = idx[i] < 0 ? 0.0 : a->value[static_cast<std::size_t>(idx[i])];
        Node* out = make(std::move(v), false, {a});
        auto map = std::make_shared<std::vector<std::int64_t>>(std::move(idx));
        out->backward_fn = [a, map](Node& n) {
            Matrix g(a->num_rows(), a->num_cols());
            for (std::size_t i = 0; i < map->size(); ++i)
                if ((*map)[i] >= 0) g[static_cast<std::size_t>((*map)[i])] += n.grad[i];
            a->accumulate(g);
        };
        return out;
    }

    /// Each row divided by max(||row||, eps); the eps branch keeps dead
    /// (zero) rows at zero instead of producing NaN.
    Node* l2_normalize_rows(Node* a, double eps = kNormEps) {
        if (!(eps > 0.0))
            throw std::invalid_argument("l2_normalize_rows: eps must be positive");
        const std::size_t rows = a->num_rows(), cols = a->num_cols();
        Matrix v(rows, cols);
        std::vector<double> norms(rows);
        for (std::size_t r = 0; r < rows; ++r) {
            double s = 0.0;
            for (std::size_t c = 0; c < cols; ++c) s += a->value(r, c) * a->value(r, c);
            double nrm = std::sqrt(s);
            norms[r] = nrm;
            double denom = std::max(nrm, eps);
            for (std::size_t c = 0; c < cols; ++c) v(r, c) = a->value(r, c) / denom;
        }
        Node* out = make(std::move(v), false, {a});
        auto norms_p = std::make_shared<std::vector<double>>(std::move(norms));
        out->backward_fn = [a, eps, norms_p](Node& n) {
            const std::size_t rows = a->num_rows(), cols = a->num_cols();
            Matrix g(rows, cols);
            for (std::size_t r = 0; r < rows; ++r) {
                double nrm = (*norms_p)[r];
                if (nrm < eps) {
                    for (std::size_t c = 0; c < cols; ++c) g(r, c) = n.grad(r, c) / eps;
                } else {
                    double dot = 0.0;
                    for (std::size_t c = 0; c < cols; ++c) dot += n.grad(r, c) * a->value(r, c);
                    double n3 = nrm * nrm * nrm;
                    for (std::size_t c = 0; c < cols; ++c)
                        g(r, c) = n.grad(r, c) / nrm - a->value(r, c) * dot / n3;
                }
            }
            a->accumulate(g);
        };
        return out;
    }

    /// Per-row cosine similarity of two equally shaped batches; returns b x 1.
    Node* cosine_rows(Node* a, Node* b, double eps = kNormEps) {
        if (!a->value.same_shape(b->value))
            throw std::invalid_argument("cosine_rows: shape mismatch");
        const std::size_t rows = a->num_rows(), cols = a->num_cols();
        if (cols == 0)
            throw std::invalid_argument("cosine_rows: empty vectors");
        Matrix v(rows, 1);
        for (std::size_t r = 0; r < rows; ++r) {
            double dot = 0.0, na = 0.0, nb = 0.0;
            for (std::size_t c = 0; c < cols; ++c) {
                dot += a->value(r, c) * b->value(r, c);
                na += a->value(r, c) * a->value(r, c);
                nb += b->value(r, c) * b->value(r, c);
            }
            v(r, 0) = dot / (std::max(std::sqrt(na), eps) * std::max(std::sqrt(nb), eps));
        }
        Node* out = make(std::move(v), false, {a, b});
        out->backward_fn = [a, b, eps](Node& n) {
            const std::size_t rows = a->num_rows(), cols = a->num_cols();
            Matrix ga(rows, cols), gb(rows, cols);
            for (std::size_t r = 0; r < rows; ++r) {
                double dot = 0.0, na2 = 0.0, nb2 = 0.0;
                for (std::size_t c = 0; c < cols; ++c) {
                    dot += a->value(r, c) * b->value(r, c);
                    na2 += a->value(r, c) * a->value(r, c);
                    nb2 += b->value(r, c) * b->value(r, c);
                }
                double na = std::max(std::sqrt(na2), eps);
                double nb = std::max(std::sqrt(nb2), eps);
                double g = n.grad(r, 0);
                bool a_live = std::sqrt(na2) >= eps, b_live = std::sqrt(nb2) >= eps;
                for (std::size_t c = 0; c < cols; ++c) {
                    double da = b->value(r, c) / (na * nb);
                    if (a_live) da -= dot * a->value(r, c) / (na * na * na * nb);
                    double db = a->value(r, c) / (na * nb);
                    if (b_live) db -= dot * b->value(r, c) / (nb * nb * nb * na);
                    ga(r, c) = g * da;
                    gb(r, c) = g * db;
                }
            }
            a->accumulate(ga);
            b->accumulate(gb);
        };
        return out;
    }

    /// Per-row squared-difference reduction; mean over coordinates by
    /// default, sum form preserves the 2 - 2cos identity on unit vectors.
    Node* mse_rows(Node* a, Node* b, bool sum_form = false) {
        if (!a->value.same_shape(b->value))
            throw std::invalid_argument("mse_rows: shape mismatch");
        const std::size_t rows = a->num_rows(), cols = a->num_cols();
        double denom = sum_form ? 1.0 : static_cast<double>(cols);
        Matrix v(rows, 1);
        for (std::size_t r = 0; r < rows; ++r) {
            double s = 0.0;
            for (std::size_t c = 0; c < cols; ++c) {
                double d = a->value(r, c) - b->value(r, c);
                s += d * d;
            }
            v(r, 0) = s / denom;
        }
        Node* out = make(std::move(v), false, {a, b});
        out->backward_fn = [a, b, denom](Node& n) {
            const std::size_t rows = a->num_rows(), cols = a->num_cols();
            Matrix ga(rows, cols);
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t c = 0; c < cols; ++c)
                    ga(r, c) = n.grad(r, 0) * 2.0 * (a->value(r, c) - b->value(r, c)) / denom;
            a->accumulate(ga);
            b->accumulate(ga * -1.0);
        };
        return out;
    }

    /// 0.5 * log det(I + c Z Z^T) for Z of shape d x m, via Cholesky.
    /// I + c Z Z^T has eigenvalues >= 1, so the factorization cannot fail
    /// for finite Z. Backward is c * (I + c Z Z^T)^{-1} Z by triangular
    /// solves against the stored factor.
    Node* logdet_gram(Node* z, double c) {
        if (!(c > 0.0))
            throw std::invalid_argument("logdet_gram: c must be positive");
        if (!z->value.all_finite())
            throw std::runtime_error("logdet_gram: non-finite input");
        const std::size_t d = z->num_rows();
        Matrix gram = Matrix::identity(d);
        const Matrix& zv = z->value;
        for (std::size_t i = 0; i < d; ++i)
            for (std::size_t j = 0; j < d; ++j) {
                double s = 0.0;
                for (std::size_t k = 0; k < zv.cols(); ++k) s += zv(i, k) * zv(j, k);
                gram(i, j) += c * s;
            }
        Matrix l = cholesky(gram);
        double val = 0.0;
        for (std::size_t i = 0; i < d; ++i) val += std::log(l(i, i));
        Node* out = make(Matrix(1, 1, {val}), false, {z});
        auto l_p = std::make_shared<Matrix>(std::move(l));
        out->backward_fn = [z, c, l_p](Node& n) {
            Matrix x = cholesky_solve(*l_p, z->value);  // (I + cZZ^T)^{-1} Z
            x *= c * n.grad[0];
            z->accumulate(x);
        };
        return out;
    }

    /// Identity forward, zero backward.
    Node* stop_gradient(Node* a) {
        Node* out = make(a->value, true, {a});
        return out;
    }

    /// Reverse accumulation from a scalar loss node. A second call without
    /// reset_gradients() is an error rather than a silent accumulation.
    void backward(Node* loss) {
        if (!loss->is_scalar())
            throw std::invalid_argument("backward: loss must be scalar");
        if (backward_done_)
            throw std::logic_error("backward: called twice without reset_gradients()");
        backward_done_ = true;
        if (!loss->stop_grad) loss->grad[0] = 1.0;
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
            Node& n = *it;
            if (n.backward_fn) n.backward_fn(n);
        }
    }

    void reset_gradients() {
        for (Node& n : nodes_) n.grad = Matrix(n.value.rows(), n.value.cols());
        backward_done_ = false;
    }

    std::size_t node_count() const { return nodes_.size(); }

private:
    Node* make(Matrix value, bool stop_grad, std::vector<Node*> inputs = {}) {
        nodes_.emplace_back();
        Node& n = nodes_.back();
        n.grad = Matrix(value.rows(), value.cols());
        n.value = std::move(value);
        n.stop_grad = stop_grad;
        n.inputs = std::move(inputs);
        return &n;
    }

    std::deque<Node> nodes_;
    bool backward_done_ = false;
};

/// Scalar cosine similarity of two 1 x n vectors.
inline Node* cosine_similarity(Graph& g, Node* a, Node* b) {
    if (a->num_rows() != 1 || b->num_rows() != 1)
        throw std::invalid_argument("cosine_similarity: expects row vectors");
    return g.cosine_rows(a, b);
}

/// Scalar MSE of two 1 x n vectors.
inline Node* mse(Graph& g, Node* a, Node* b, bool sum_form = false) {
    if (a->num_rows() != 1 || b->num_rows() != 1)
        throw std::invalid_argument("mse: expects row vectors");
    return g.mse_rows(a, b, sum_form);
}

}  // namespace cmp::ad
