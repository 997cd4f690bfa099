#pragma once

#include <functional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "eelab/tensor.hpp"

namespace eelab {

// Reverse-mode tape over dense matrices. A forward pass records nodes in
// topological order; backward() walks them in reverse and accumulates
// parameter gradients into the owning ParamStore. One tape per training step.
template <typename Scalar>
class GraphT {
public:
    struct Value {
        int id = -1;
    };

    using Mat = MatX<Scalar>;

    Value constant(Mat v) { return push(std::move(v), {}, nullptr); }

    Value param(ParamStoreT<Scalar>& store, const std::string& name) {
        Value v = push(store.value(name), {}, nullptr);
        param_nodes_.push_back({v.id, &store, name});
        return v;
    }

    // y = x * w + b (b broadcast over rows)
    Value affine(Value x, Value w, Value b) {
        const Mat& xv = val(x);
        const Mat& wv = val(w);
        const Mat& bv = val(b);
        if (xv.cols() != wv.rows()) throw DimensionError("affine: input cols != weight rows");
        if (bv.rows() != 1 || bv.cols() != wv.cols()) throw DimensionError("affine: bad bias shape");
        Mat y = xv * wv;
        y.rowwise() += bv.row(0);
        return push(std::move(y), {x.id, w.id, b.id}, [](GraphT& g, const Node& n) {
            const Mat& dy = n.grad;
            const Mat& xv = g.nodes_[n.parents[0]].value;
            const Mat& wv = g.nodes_[n.parents[1]].value;
            g.nodes_[n.parents[0]].grad.noalias() += dy * wv.transpose();
            g.nodes_[n.parents[1]].grad.noalias() += xv.transpose() * dy;
            g.nodes_[n.parents[2]].grad += dy.colwise().sum();
        });
    }

    // y = x * w (no bias); used for fixed feature projections.
    Value matmul(Value x, Value w) {
        const Mat& xv = val(x);
        const Mat& wv = val(w);
        if (xv.cols() != wv.rows()) throw DimensionError("matmul: input cols != weight rows");
        return push(xv * wv, {x.id, w.id}, [](GraphT& g, const Node& n) {
            const Mat& dy = n.grad;
            g.nodes_[n.parents[0]].grad.noalias() += dy * g.nodes_[n.parents[1]].value.transpose();
            g.nodes_[n.parents[1]].grad.noalias() +=
                g.nodes_[n.parents[0]].value.transpose() * dy;
        });
    }

    Value relu(Value x) {
        return push(val(x).cwiseMax(Scalar(0)), {x.id}, [](GraphT& g, const Node& n) {
            const Mat& xv = g.nodes_[n.parents[0]].value;
            g.nodes_[n.parents[0]].grad.array() +=
                n.grad.array() * (xv.array() > Scalar(0)).template cast<Scalar>();
        });
    }

    Value concat_cols(std::span<const Value> parts) {
        if (parts.empty()) throw DimensionError("concat_cols: empty");
        Eigen::Index rows = val(parts[0]).rows(), cols = 0;
        std::vector<int> ids;
        for (Value p : parts) {
            if (val(p).rows() != rows) throw DimensionError("concat_cols: row mismatch");
            cols += val(p).cols();
            ids.push_back(p.id);
        }
        Mat y(rows, cols);
        Eigen::Index at = 0;
        for (Value p : parts) {
            y.middleCols(at, val(p).cols()) = val(p);
            at += val(p).cols();
        }
        return push(std::move(y), std::move(ids), [](GraphT& g, const Node& n) {
            Eigen::Index at = 0;
            for (int pid : n.parents) {
                Node& p = g.nodes_[pid];
                p.grad += n.grad.middleCols(at, p.value.cols());
                at += p.value.cols();
            }
        });
    }

    Value slice_cols(Value x, Eigen::Index begin, Eigen::Index len) {
        const Mat& xv = val(x);
        if (begin < 0 || len < 0 || begin + len > xv.cols())
            throw DimensionError("slice_cols: out of range");
        return push(xv.middleCols(begin, len), {x.id},
                    [begin, len](GraphT& g, const Node& n) {
                        g.nodes_[n.parents[0]].grad.middleCols(begin, len) += n.grad;
                    });
    }

    // y = alpha * x + beta with scalar (1x1) alpha, beta.
    Value scale_shift(Value x, Value alpha, Value beta) {
        if (val(alpha).size() != 1 || val(beta).size() != 1)
            throw DimensionError("scale_shift: alpha/beta must be 1x1");
        const Scalar a = val(alpha)(0, 0), b = val(beta)(0, 0);
        Mat y = (val(x).array() * a + b).matrix();
        return push(std::move(y), {x.id, alpha.id, beta.id}, [](GraphT& g, const Node& n) {
            const Mat& xv = g.nodes_[n.parents[0]].value;
            const Scalar a = g.nodes_[n.parents[1]].value(0, 0);
            g.nodes_[n.parents[0]].grad += a * n.grad;
            g.nodes_[n.parents[1]].grad(0, 0) += (n.grad.array() * xv.array()).sum();
            g.nodes_[n.parents[2]].grad(0, 0) += n.grad.sum();
        });
    }

    // Mean cross-entropy of softmax(logits) against integer labels.
    Value softmax_cross_entropy(Value logits, const std::vector<int>& labels) {
        const Mat& z = val(logits);
        if (static_cast<Eigen::Index>(labels.size()) != z.rows())
            throw DimensionError("softmax_cross_entropy: label count != rows");
        Mat p = softmax_rows(z);
        const Scalar inv_n = Scalar(1) / static_cast<Scalar>(z.rows());
        Scalar loss = 0;
        for (Eigen::Index r = 0; r < z.rows(); ++r) {
            if (labels[r] < 0 || labels[r] >= z.cols())
                throw DimensionError("softmax_cross_entropy: label out of range");
            loss -= std::log(std::max(p(r, labels[r]), Scalar(1e-30)));
        }
        Mat out(1, 1);
        out(0, 0) = loss * inv_n;
        return push(std::move(out), {logits.id},
                    [p = std::move(p), labels, inv_n](GraphT& g, const Node& n) {
                        const Scalar d = n.grad(0, 0) * inv_n;
                        Mat dz = p;
                        for (Eigen::Index r = 0; r < dz.rows(); ++r) dz(r, labels[r]) -= Scalar(1);
                        g.nodes_[n.parents[0]].grad += d * dz;
                    });
    }

    // Temperature-softened cross-entropy against fixed teacher probabilities:
    // mean over rows of -sum_c q * log softmax(z / T).
    Value distill_cross_entropy(Value logits, Mat teacher_probs, Scalar temperature) {
        const Mat& z = val(logits);
        if (teacher_probs.rows() != z.rows() || teacher_probs.cols() != z.cols())
            throw DimensionError("distill_cross_entropy: teacher shape mismatch");
        Mat soft = z / temperature;
        Mat p = softmax_rows(soft);
        const Scalar inv_n = Scalar(1) / static_cast<Scalar>(z.rows());
        Scalar loss = 0;
        for (Eigen::Index r = 0; r < z.rows(); ++r)
            for (Eigen::Index c = 0; c < z.cols(); ++c)
                loss -= teacher_probs(r, c) * std::log(std::max(p(r, c), Scalar(1e-30)));
        Mat out(1, 1);
        out(0, 0) = loss * inv_n;
        return push(std::move(out), {logits.id},
                    [p = std::move(p), q = std::move(teacher_probs), inv_n,
                     temperature](GraphT& g, const Node& n) {
                        const Scalar d = n.grad(0, 0) * inv_n / temperature;
                        g.nodes_[n.parents[0]].grad += d * (p - q);
                    });
    }

    // Sigmoid binary cross-entropy, summed over classes and averaged over
    // rows; targets may be soft.
    Value sigmoid_bce(Value logits, Mat targets) {
        const Mat& z = val(logits);
        if (targets.rows() != z.rows() || targets.cols() != z.cols())
            throw DimensionError("sigmoid_bce: target shape mismatch");
        const Scalar inv_n = Scalar(1) / static_cast<Scalar>(z.rows());
        Scalar loss = 0;
        for (Eigen::Index r = 0; r < z.rows(); ++r)
            for (Eigen::Index c = 0; c < z.cols(); ++c) {
                const Scalar zv = z(r, c);
                loss += std::max(zv, Scalar(0)) - zv * targets(r, c) +
                        std::log1p(std::exp(-std::abs(zv)));
            }
        Mat out(1, 1);
        out(0, 0) = loss * inv_n;
        return push(std::move(out), {logits.id},
                    [t = std::move(targets), inv_n](GraphT& g, const Node& n) {
                        const Mat& zv = g.nodes_[n.parents[0]].value;
                        const Scalar d = n.grad(0, 0) * inv_n;
                        Mat sig =
                            (Scalar(1) / (Scalar(1) + (-zv.array()).exp())).matrix();
                        g.nodes_[n.parents[0]].grad += d * (sig - t);
                    });
    }

    // Scalar combination sum_i w_i * term_i.
    Value weighted_sum(std::span<const Value> terms, std::span<const Scalar> weights) {
        if (terms.size() != weights.size() || terms.empty())
            throw DimensionError("weighted_sum: size mismatch");
        Scalar total = 0;
        std::vector<int> ids;
        for (std::size_t i = 0; i < terms.size(); ++i) {
            if (val(terms[i]).size() != 1) throw DimensionError("weighted_sum: non-scalar term");
            total += weights[i] * val(terms[i])(0, 0);
            ids.push_back(terms[i].id);
        }
        Mat out(1, 1);
        out(0, 0) = total;
        std::vector<Scalar> w(weights.begin(), weights.end());
        return push(std::move(out), std::move(ids), [w = std::move(w)](GraphT& g, const Node& n) {
            for (std::size_t i = 0; i < n.parents.size(); ++i)
                g.nodes_[n.parents[i]].grad(0, 0) += w[i] * n.grad(0, 0);
        });
    }

    const Mat& value(Value v) const { return val(v); }

    std::size_t node_count() const { return nodes_.size(); }

    // Seeds d(loss)=1 and accumulates gradients into every ParamStore that
    // contributed parameters to this tape.
    void backward(Value loss) {
        if (loss.id < 0 || loss.id >= static_cast<int>(nodes_.size()))
            throw StateError("backward: no recorded forward pass for this loss");
        if (nodes_[loss.id].value.size() != 1)
            throw StateError("backward: loss must be scalar");
        for (auto& n : nodes_) n.grad.setZero(n.value.rows(), n.value.cols());
        nodes_[loss.id].grad(0, 0) = Scalar(1);
        for (int i = loss.id; i >= 0; --i)
            if (nodes_[i].back) nodes_[i].back(*this, nodes_[i]);
        for (const auto& pn : param_nodes_)
            pn.store->grad(pn.name) += nodes_[pn.node].grad;
    }

private:
    struct Node {
        Mat value;
        Mat grad;
        std::vector<int> parents;
        std::function<void(GraphT&, const Node&)> back;
    };
    struct ParamNode {
        int node;
        ParamStoreT<Scalar>* store;
        std::string name;
    };

    Value push(Mat v, std::vector<int> parents, std::function<void(GraphT&, const Node&)> back) {
        Node n;
        n.value = std::move(v);
        n.parents = std::move(parents);
        n.back = std::move(back);
        nodes_.push_back(std::move(n));
        return Value{static_cast<int>(nodes_.size()) - 1};
    }

    const Mat& val(Value v) const {
        if (v.id < 0 || v.id >= static_cast<int>(nodes_.size()))
            throw StateError("invalid graph value");
        return nodes_[v.id].value;
    }

    std::vector<Node> nodes_;
    std::vector<ParamNode> param_nodes_;
};

using Graph = GraphT<float>;

}  // namespace eelab
