#pragma once

#include <Eigen/Dense>

#include <map>
#include <string>
#include <vector>

#include "eelab/errors.hpp"
#include "eelab/rng.hpp"

namespace eelab {

// Dense row-major matrix of samples-by-features; the one tensor type the
// whole library is built on. Training uses float, oracles instantiate double.
template <typename Scalar>
using MatX = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

using Matf = MatX<float>;
using Matd = MatX<double>;

template <typename Scalar>
bool all_finite(const MatX<Scalar>& m) {
    return m.allFinite();
}

template <typename Scalar>
void ensure_finite(const MatX<Scalar>& m, const char* context) {
    if (!m.allFinite()) throw NumericError(std::string(context) + ": non-finite values");
}

// Uniform init in +-sqrt(6 / (fan_in + fan_out)).
template <typename Scalar>
MatX<Scalar> glorot_uniform(Eigen::Index rows, Eigen::Index cols, Rng& rng) {
    const double limit = std::sqrt(6.0 / static_cast<double>(rows + cols));
    MatX<Scalar> m(rows, cols);
    for (Eigen::Index r = 0; r < rows; ++r)
        for (Eigen::Index c = 0; c < cols; ++c)
            m(r, c) = static_cast<Scalar>(rng.uniform(-limit, limit));
    return m;
}

// y = x * w, rows biased by b (b is 1 x cols).
template <typename Scalar>
MatX<Scalar> linear(const MatX<Scalar>& x, const MatX<Scalar>& w, const MatX<Scalar>& b) {
    if (x.cols() != w.rows())
        throw DimensionError("linear: input cols " + std::to_string(x.cols()) +
                             " != weight rows " + std::to_string(w.rows()));
    if (b.rows() != 1 || b.cols() != w.cols())
        throw DimensionError("linear: bias must be 1 x " + std::to_string(w.cols()));
    MatX<Scalar> y = x * w;
    y.rowwise() += b.row(0);
    return y;
}

template <typename Scalar>
MatX<Scalar> relu(const MatX<Scalar>& x) {
    return x.cwiseMax(Scalar(0));
}

// Numerically stable row-wise softmax.
template <typename Scalar>
MatX<Scalar> softmax_rows(const MatX<Scalar>& z) {
    MatX<Scalar> p(z.rows(), z.cols());
    for (Eigen::Index r = 0; r < z.rows(); ++r) {
        const Scalar m = z.row(r).maxCoeff();
        p.row(r) = (z.row(r).array() - m).exp();
        p.row(r) /= p.row(r).sum();
    }
    return p;
}

// First index attaining the row maximum (deterministic tie rule).
template <typename Scalar>
Eigen::Index argmax_row(const MatX<Scalar>& m, Eigen::Index row, Eigen::Index begin = 0,
                        Eigen::Index len = -1) {
    if (len < 0) len = m.cols() - begin;
    Eigen::Index best = begin;
    for (Eigen::Index c = begin + 1; c < begin + len; ++c)
        if (m(row, c) > m(row, best)) best = c;
    return best;
}

// ---------------------------------------------------------------------------
// Parameter store: every parameter carries a same-shape gradient and momentum
// buffer, keyed by a unique name. Ordered map keeps the step deterministic.
// ---------------------------------------------------------------------------
template <typename Scalar>
class ParamStoreT {
public:
    struct Entry {
        MatX<Scalar> value;
        MatX<Scalar> grad;
        MatX<Scalar> momentum;
    };

    void add(const std::string& name, MatX<Scalar> init) {
        if (entries_.count(name)) throw StateError("duplicate parameter name: " + name);
        Entry e;
        e.grad = MatX<Scalar>::Zero(init.rows(), init.cols());
        e.momentum = MatX<Scalar>::Zero(init.rows(), init.cols());
        e.value = std::move(init);
        entries_.emplace(name, std::move(e));
    }

    bool has(const std::string& name) const { return entries_.count(name) != 0; }

    MatX<Scalar>& value(const std::string& name) { return at(name).value; }
    const MatX<Scalar>& value(const std::string& name) const { return at(name).value; }
    MatX<Scalar>& grad(const std::string& name) { return at(name).grad; }
    const MatX<Scalar>& grad(const std::string& name) const { return at(name).grad; }
    MatX<Scalar>& momentum(const std::string& name) { return at(name).momentum; }

    void zero_grads() {
        for (auto& [name, e] : entries_) e.grad.setZero();
    }

    // v <- momentum * v + (g + wd * p);  p <- p - lr * v
    void sgd_step(Scalar lr, Scalar momentum, Scalar weight_decay = Scalar(0)) {
        for (auto& [name, e] : entries_) {
            if (weight_decay != Scalar(0))
                e.momentum = momentum * e.momentum + e.grad + weight_decay * e.value;
            else
                e.momentum = momentum * e.momentum + e.grad;
            e.value -= lr * e.momentum;
        }
    }

    // Scales all gradients so their global L2 norm is at most max_norm.
    void clip_grad_norm(Scalar max_norm) {
        double sq = 0;
        for (const auto& [name, e] : entries_) sq += static_cast<double>(e.grad.squaredNorm());
        const double norm = std::sqrt(sq);
        if (norm <= static_cast<double>(max_norm) || norm == 0.0) return;
        const Scalar scale = static_cast<Scalar>(static_cast<double>(max_norm) / norm);
        for (auto& [name, e] : entries_) e.grad *= scale;
    }

    std::size_t size() const { return entries_.size(); }
    auto begin() const { return entries_.begin(); }
    auto end() const { return entries_.end(); }
    auto begin() { return entries_.begin(); }
    auto end() { return entries_.end(); }

private:
    Entry& at(const std::string& name) {
        auto it = entries_.find(name);
        if (it == entries_.end()) throw StateError("unknown parameter: " + name);
        return it->second;
    }
    const Entry& at(const std::string& name) const {
        auto it = entries_.find(name);
        if (it == entries_.end()) throw StateError("unknown parameter: " + name);
        return it->second;
    }

    std::map<std::string, Entry> entries_;
};

using ParamStore = ParamStoreT<float>;

// ---------------------------------------------------------------------------
// Step learning-rate schedule: base_lr decayed at each milestone.
// ---------------------------------------------------------------------------
struct LrSchedule {
    double base_lr = 0.1;
    std::vector<int> milestones;
    double decay = 0.1;

    void validate() const {
        if (!(decay > 0.0 && decay < 1.0)) throw ConfigError("lr decay must be in (0, 1)");
        for (std::size_t i = 1; i < milestones.size(); ++i)
            if (milestones[i] <= milestones[i - 1])
                throw ConfigError("lr milestones must be strictly increasing");
    }
};

inline double lr_at(const LrSchedule& schedule, int epoch) {
    double lr = schedule.base_lr;
    for (int m : schedule.milestones)
        if (m <= epoch) lr *= schedule.decay;
    return lr;
}

}  // namespace eelab
