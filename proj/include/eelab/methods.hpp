#pragma once

#include <memory>
#include <utility>
#include <vector>

#include "eelab/memory.hpp"
#include "eelab/train.hpp"

namespace eelab {

// ---------------------------------------------------------------------------
// Finetuning: bare weighted cross-entropy, no memory.
// ---------------------------------------------------------------------------
template <typename Scalar>
MethodHooksT<Scalar> ft_hooks() {
    return {};
}

// Finetuning with exemplars: memory is concatenated into the task's training
// pool before epoch shuffling. Degenerates to FT while memory is empty.
template <typename Scalar>
MethodHooksT<Scalar> fte_hooks(const ExemplarMemoryT<Scalar>& memory) {
    MethodHooksT<Scalar> hooks;
    if (memory.empty()) return hooks;
    hooks.extend_pool = [&memory](MatX<Scalar>& x, std::vector<int>& y) {
        MatX<Scalar> mx;
        std::vector<int> my;
        memory.gather(mx, my);
        MatX<Scalar> joined(x.rows() + mx.rows(), x.cols());
        joined.topRows(x.rows()) = x;
        joined.bottomRows(mx.rows()) = mx;
        x = std::move(joined);
        y.insert(y.end(), my.begin(), my.end());
    };
    return hooks;
}

// Experience replay: every batch is exactly half new samples, half memory.
// Memory rows are drawn without replacement when enough are stored, with
// replacement otherwise.
template <typename Scalar>
MethodHooksT<Scalar> er_hooks(const ExemplarMemoryT<Scalar>& memory) {
    MethodHooksT<Scalar> hooks;
    if (memory.empty()) return hooks;
    hooks.memory_half = [&memory](Rng& rng, Eigen::Index k) {
        MatX<Scalar> all_x;
        std::vector<int> all_y;
        memory.gather(all_x, all_y);
        const Eigen::Index n = all_x.rows();
        std::vector<Eigen::Index> pick;
        if (n >= k) {
            std::vector<Eigen::Index> idx(static_cast<std::size_t>(n));
            for (Eigen::Index i = 0; i < n; ++i) idx[static_cast<std::size_t>(i)] = i;
            rng.shuffle(idx);
            pick.assign(idx.begin(), idx.begin() + k);
        } else {
            for (Eigen::Index i = 0; i < k; ++i)
                pick.push_back(static_cast<Eigen::Index>(rng.uniform_index(
                    static_cast<std::uint64_t>(n))));
        }
        MatX<Scalar> x(k, all_x.cols());
        std::vector<int> y;
        for (Eigen::Index i = 0; i < k; ++i) {
            x.row(i) = all_x.row(pick[static_cast<std::size_t>(i)]);
            y.push_back(all_y[static_cast<std::size_t>(pick[static_cast<std::size_t>(i)])]);
        }
        return std::make_pair(std::move(x), std::move(y));
    };
    return hooks;
}

// ---------------------------------------------------------------------------
// Learning without Forgetting: adds temperature-softened distillation against
// the frozen previous network, restricted to previously seen classes, with
// the same strength at every classifier.
// ---------------------------------------------------------------------------
template <typename Scalar>
MethodHooksT<Scalar> lwf_hooks(std::shared_ptr<const EarlyExitNetworkT<Scalar>> previous_net,
                               double lambda, double temperature) {
    if (!previous_net) throw ProtocolError("lwf_hooks: previous network missing");
    MethodHooksT<Scalar> hooks;
    hooks.losses = [previous_net, lambda, temperature](
                       GraphT<Scalar>& g,
                       const std::vector<typename GraphT<Scalar>::Value>& logits,
                       const BatchViewT<Scalar>& batch) {
        using Value = typename GraphT<Scalar>::Value;
        const int old_total = previous_net->num_classes();
        LogitBundleT<Scalar> teacher = collect_logits(*previous_net, batch.x);
        std::vector<Value> out;
        for (std::size_t i = 0; i < logits.size(); ++i) {
            Value ce = g.softmax_cross_entropy(logits[i], batch.labels);
            MatX<Scalar> q = softmax_rows<Scalar>(
                (teacher.logits[i] / static_cast<Scalar>(temperature)).eval());
            Value kd = g.distill_cross_entropy(g.slice_cols(logits[i], 0, old_total),
                                               std::move(q), static_cast<Scalar>(temperature));
            const std::vector<Value> terms{ce, kd};
            const std::vector<Scalar> w{Scalar(1), static_cast<Scalar>(lambda)};
            out.push_back(g.weighted_sum(terms, w));
        }
        return out;
    };
    return hooks;
}

// ---------------------------------------------------------------------------
// iCaRL (classifier-output variant): exemplars join the pool, and every
// classifier trains with sigmoid BCE whose targets are one-hot on the current
// task's classes and the previous network's sigmoids on old classes.
// Predictions at inference come straight from the logits.
// ---------------------------------------------------------------------------
template <typename Scalar>
MethodHooksT<Scalar> icarl_hooks(std::shared_ptr<const EarlyExitNetworkT<Scalar>> previous_net,
                                 const ExemplarMemoryT<Scalar>& memory,
                                 ClassRange current_task) {
    MethodHooksT<Scalar> hooks = fte_hooks(memory);
    hooks.losses = [previous_net, current_task](
                       GraphT<Scalar>& g,
                       const std::vector<typename GraphT<Scalar>::Value>& logits,
                       const BatchViewT<Scalar>& batch) {
        using Value = typename GraphT<Scalar>::Value;
        const int old_total = previous_net ? previous_net->num_classes() : 0;
        if (old_total == 0 && current_task.begin > 0)
            throw ProtocolError("icarl_hooks: previous network missing");
        LogitBundleT<Scalar> teacher;
        if (old_total > 0) teacher = collect_logits(*previous_net, batch.x);
        std::vector<Value> out;
        for (std::size_t i = 0; i < logits.size(); ++i) {
            const Eigen::Index rows = batch.x.rows();
            const Eigen::Index cols = g.value(logits[i]).cols();
            MatX<Scalar> targets = MatX<Scalar>::Zero(rows, cols);
            if (old_total > 0) {
                targets.leftCols(old_total) =
                    (Scalar(1) /
                     (Scalar(1) + (-teacher.logits[i].array()).exp()))
                        .matrix();
            }
            for (Eigen::Index r = 0; r < rows; ++r) {
                const int label = batch.labels[static_cast<std::size_t>(r)];
                if (current_task.contains(label)) targets(r, label) = Scalar(1);
            }
            out.push_back(g.sigmoid_bce(logits[i], std::move(targets)));
        }
        return out;
    };
    return hooks;
}

// ---------------------------------------------------------------------------
// Bias correction: stage-1 training is exemplar finetuning plus distillation
// (as in LwF); stage 2 fits one (scale, shift) pair per classifier on the
// newest task's logit slice against a held-out class-balanced split.
// ---------------------------------------------------------------------------
struct BicOptions {
    double val_fraction = 0.10;
    int epochs = 100;
    double lr = 0.001;
    int batch_size = 2;
    double momentum = 0.9;
    double temperature = 2.0;
};

template <typename Scalar>
struct BalancedSplitT {
    MatX<Scalar> val_x;
    std::vector<int> val_y;
    // Current-task training rows that remain after carving the split.
    std::vector<Eigen::Index> train_rows;
    // Memory exemplars (per class, rank order) excluded from replay.
    std::map<int, std::vector<std::size_t>> held_out_memory;
    int per_class = 0;
};

// Carves an equal number of validation samples per seen class: old classes
// from memory, new classes from the current task's train split.
template <typename Scalar>
BalancedSplitT<Scalar> carve_balanced_split(const ExemplarMemoryT<Scalar>& memory,
                                            const TaskDataT<Scalar>& task, double fraction,
                                            std::uint64_t seed) {
    const int classes_seen = task.classes.end();
    const int pool = memory.size() + static_cast<int>(task.train_x.rows());
    int per_class = std::max(1, static_cast<int>(fraction * pool) / classes_seen);

    std::map<int, std::vector<Eigen::Index>> new_rows;
    for (std::size_t i = 0; i < task.train_y.size(); ++i)
        new_rows[task.train_y[i]].push_back(static_cast<Eigen::Index>(i));

    for (int cls = 0; cls < classes_seen; ++cls) {
        int avail = 0;
        if (task.classes.contains(cls)) {
            avail = static_cast<int>(new_rows[cls].size());
        } else {
            avail = static_cast<int>(memory.of_class(cls).size());
        }
        if (avail == 0)
            throw DataError("carve_balanced_split: class " + std::to_string(cls) +
                            " has no validation candidates");
        per_class = std::min(per_class, avail);
    }

    Rng rng(derive_seed(seed, "bic_split", static_cast<std::uint64_t>(task.task_index)));
    BalancedSplitT<Scalar> split;
    split.per_class = per_class;
    const Eigen::Index dim = task.train_x.cols();
    std::vector<MatX<Scalar>> val_rows;
    for (int cls = 0; cls < classes_seen; ++cls) {
        if (task.classes.contains(cls)) {
            std::vector<Eigen::Index> rows = new_rows[cls];
            rng.shuffle(rows);
            for (int k = 0; k < per_class; ++k) {
                val_rows.push_back(task.train_x.row(rows[static_cast<std::size_t>(k)]));
                split.val_y.push_back(cls);
            }
            std::vector<Eigen::Index> rest(rows.begin() + per_class, rows.end());
            split.train_rows.insert(split.train_rows.end(), rest.begin(), rest.end());
        } else {
            const auto& stored = memory.of_class(cls);
            std::vector<std::size_t> idx(stored.size());
            for (std::size_t i = 0; i < stored.size(); ++i) idx[i] = i;
            rng.shuffle(idx);
            for (int k = 0; k < per_class; ++k) {
                val_rows.push_back(stored[idx[static_cast<std::size_t>(k)]].x);
                split.val_y.push_back(cls);
            }
            split.held_out_memory[cls] =
                std::vector<std::size_t>(idx.begin(), idx.begin() + per_class);
        }
    }
    split.val_x.resize(static_cast<Eigen::Index>(val_rows.size()), dim);
    for (std::size_t i = 0; i < val_rows.size(); ++i)
        split.val_x.row(static_cast<Eigen::Index>(i)) = val_rows[i];
    std::sort(split.train_rows.begin(), split.train_rows.end());
    return split;
}

// Copies a task keeping only the given train rows (test split untouched).
template <typename Scalar>
TaskDataT<Scalar> filter_task_rows(const TaskDataT<Scalar>& task,
                                   const std::vector<Eigen::Index>& keep) {
    TaskDataT<Scalar> out;
    out.task_index = task.task_index;
    out.classes = task.classes;
    out.test_x = task.test_x;
    out.test_y = task.test_y;
    out.train_x.resize(static_cast<Eigen::Index>(keep.size()), task.train_x.cols());
    for (std::size_t i = 0; i < keep.size(); ++i) {
        out.train_x.row(static_cast<Eigen::Index>(i)) = task.train_x.row(keep[i]);
        out.train_y.push_back(task.train_y[static_cast<std::size_t>(keep[i])]);
    }
    return out;
}

// Copies memory minus the held-out exemplars, preserving rank order.
template <typename Scalar>
ExemplarMemoryT<Scalar> filter_memory(const ExemplarMemoryT<Scalar>& memory,
                                      const std::map<int, std::vector<std::size_t>>& held_out) {
    ExemplarMemoryT<Scalar> out(memory.capacity());
    for (const auto& [cls, stored] : memory.contents()) {
        std::vector<bool> drop(stored.size(), false);
        auto it = held_out.find(cls);
        if (it != held_out.end())
            for (std::size_t pos : it->second) drop[pos] = true;
        std::vector<StoredExemplarT<Scalar>> kept;
        for (std::size_t i = 0; i < stored.size(); ++i)
            if (!drop[i]) kept.push_back(stored[i]);
        out.store_class(cls, std::move(kept));
    }
    return out;
}

// Core 2-parameter fit: minimizes cross-entropy of (old slices | a*new+b)
// over cached logits. Returns (scale, shift).
template <typename Scalar>
std::pair<Scalar, Scalar> fit_logit_rectifier(const MatX<Scalar>& logits,
                                              const std::vector<int>& labels, int old_total,
                                              int new_count, const BicOptions& opts,
                                              std::uint64_t seed) {
    if (logits.cols() != old_total + new_count)
        throw DimensionError("fit_logit_rectifier: slice widths do not cover the logits");
    ParamStoreT<Scalar> store;
    MatX<Scalar> one(1, 1), zero(1, 1);
    one(0, 0) = Scalar(1);
    zero(0, 0) = Scalar(0);
    store.add("alpha", one);
    store.add("beta", zero);
    Rng rng(derive_seed(seed, "bic_fit"));
    std::vector<Eigen::Index> order(static_cast<std::size_t>(logits.rows()));
    for (Eigen::Index i = 0; i < logits.rows(); ++i) order[static_cast<std::size_t>(i)] = i;
    for (int epoch = 0; epoch < opts.epochs; ++epoch) {
        rng.shuffle(order);
        for (std::size_t at = 0; at < order.size();
             at += static_cast<std::size_t>(opts.batch_size)) {
            const std::size_t n =
                std::min(static_cast<std::size_t>(opts.batch_size), order.size() - at);
            MatX<Scalar> bx(static_cast<Eigen::Index>(n), logits.cols());
            std::vector<int> by;
            for (std::size_t i = 0; i < n; ++i) {
                bx.row(static_cast<Eigen::Index>(i)) = logits.row(order[at + i]);
                by.push_back(labels[static_cast<std::size_t>(order[at + i])]);
            }
            GraphT<Scalar> g;
            auto x = g.constant(std::move(bx));
            auto alpha = g.param(store, "alpha");
            auto beta = g.param(store, "beta");
            auto corrected = g.scale_shift(g.slice_cols(x, old_total, new_count), alpha, beta);
            typename GraphT<Scalar>::Value rect;
            if (old_total > 0) {
                const std::vector<typename GraphT<Scalar>::Value> parts{
                    g.slice_cols(x, 0, old_total), corrected};
                rect = g.concat_cols(parts);
            } else {
                rect = corrected;
            }
            auto loss = g.softmax_cross_entropy(rect, by);
            g.backward(loss);
            store.sgd_step(static_cast<Scalar>(opts.lr), static_cast<Scalar>(opts.momentum));
            store.zero_grads();
        }
    }
    return {store.value("alpha")(0, 0), store.value("beta")(0, 0)};
}

template <typename Scalar>
struct BicFitReportT {
    std::vector<std::pair<Scalar, Scalar>> per_classifier;  // (scale, shift)
    int val_samples = 0;
};

// Stage-2 BiC: fits the rectifier on the balanced split and installs it in
// the network for the newest task's slice. Backbone and heads stay frozen.
template <typename Scalar>
BicFitReportT<Scalar> bic_fit(EarlyExitNetworkT<Scalar>& net, const BalancedSplitT<Scalar>& split,
                              int task_index, const BicOptions& opts, std::uint64_t seed) {
    if (task_index != net.num_tasks())
        throw ProtocolError("bic_fit: rectifier applies to the newest task only");
    const ClassRange newest = net.tasks.back();
    const int old_total = newest.begin;
    LogitBundleT<Scalar> bundle = forward_all(net, split.val_x);
    BicFitReportT<Scalar> report;
    report.val_samples = static_cast<int>(split.val_x.rows());
    for (int i = 0; i < net.num_classifiers(); ++i) {
        report.per_classifier.push_back(fit_logit_rectifier(
            bundle.logits[i], split.val_y, old_total, newest.count, opts,
            derive_seed(seed, "bic_cls", static_cast<std::uint64_t>(i))));
    }
    net.rectifier = report.per_classifier;
    net.rectified_task = task_index;
    return report;
}

}  // namespace eelab
