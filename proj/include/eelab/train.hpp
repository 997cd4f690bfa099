#pragma once

#include <functional>
#include <utility>
#include <vector>

#include "eelab/eenet.hpp"
#include "eelab/graph.hpp"
#include "eelab/scenario.hpp"

namespace eelab {

template <typename Scalar>
struct BatchViewT {
    MatX<Scalar> x;
    std::vector<int> labels;
    Eigen::Index memory_rows = 0;  // trailing rows drawn from replay memory
};

// Continual-learning strategies plug in here. Defaults reproduce plain
// finetuning: per-task pool as-is, sequential batches, cross-entropy at
// every classifier.
template <typename Scalar>
struct MethodHooksT {
    using Value = typename GraphT<Scalar>::Value;

    // Extends the epoch pool before shuffling (replay concatenation).
    std::function<void(MatX<Scalar>&, std::vector<int>&)> extend_pool;

    // When set, every batch is half new data, half memory rows supplied here.
    std::function<std::pair<MatX<Scalar>, std::vector<int>>(Rng&, Eigen::Index)> memory_half;

    // Returns one loss per classifier for this batch.
    std::function<std::vector<Value>(GraphT<Scalar>&, const std::vector<Value>&,
                                     const BatchViewT<Scalar>&)>
        losses;
};

using MethodHooks = MethodHooksT<float>;

struct TrainConfig {
    int epochs = 20;
    int batch_size = 128;
    LrSchedule schedule;
    double momentum = 0.9;
    double weight_decay = 5e-4;
    double grad_clip = 5.0;  // global L2 norm; <= 0 disables clipping
};

struct TrainStats {
    std::vector<double> epoch_loss;  // mean weighted loss per epoch
    std::vector<std::pair<int, int>> batch_composition;  // (new rows, memory rows)
    int steps = 0;
};

namespace detail {

template <typename Scalar>
MatX<Scalar> take_rows(const MatX<Scalar>& x, const std::vector<Eigen::Index>& rows,
                       std::size_t begin, std::size_t count) {
    MatX<Scalar> out(static_cast<Eigen::Index>(count), x.cols());
    for (std::size_t i = 0; i < count; ++i) out.row(static_cast<Eigen::Index>(i)) = x.row(rows[begin + i]);
    return out;
}

}  // namespace detail

// Minimizes the weighted per-classifier loss over the task's training data.
// Single-threaded and deterministic for a given (net, task, cfg, seed).
template <typename Scalar>
TrainStats train_task(EarlyExitNetworkT<Scalar>& net, const TaskDataT<Scalar>& task,
                      const TrainConfig& cfg, const MethodHooksT<Scalar>& hooks,
                      std::uint64_t seed) {
    using Value = typename GraphT<Scalar>::Value;
    if (task.train_x.rows() == 0) throw ConfigError("train_task: empty task data");
    if (net.num_tasks() < task.task_index)
        throw ProtocolError("train_task: head for this task has not been added");
    cfg.schedule.validate();

    MatX<Scalar> pool_x = task.train_x;
    std::vector<int> pool_y = task.train_y;
    if (hooks.extend_pool) hooks.extend_pool(pool_x, pool_y);

    const std::vector<double> fractions = net.ic_fractions();
    Rng rng(derive_seed(seed, "train_task", static_cast<std::uint64_t>(task.task_index)));
    TrainStats stats;

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        const std::vector<double> w = ic_loss_weights(epoch, cfg.epochs, fractions);
        const Scalar lr = static_cast<Scalar>(lr_at(cfg.schedule, epoch));
        double epoch_loss = 0;
        int epoch_batches = 0;

        auto step = [&](BatchViewT<Scalar> batch) {
            GraphT<Scalar> g;
            Value x = g.constant(batch.x);
            std::vector<Value> logits = forward_graph(net, g, x);
            std::vector<Value> losses;
            if (hooks.losses) {
                losses = hooks.losses(g, logits, batch);
            } else {
                for (const Value& l : logits)
                    losses.push_back(g.softmax_cross_entropy(l, batch.labels));
            }
            if (losses.size() != static_cast<std::size_t>(net.num_classifiers()))
                throw ProtocolError("train_task: hooks must return one loss per classifier");
            std::vector<Scalar> ws(w.size());
            for (std::size_t i = 0; i < w.size(); ++i) ws[i] = static_cast<Scalar>(w[i]);
            Value total = g.weighted_sum(losses, ws);
            const double loss_value = static_cast<double>(g.value(total)(0, 0));
            if (!std::isfinite(loss_value)) throw NumericError("train_task: non-finite loss");
            g.backward(total);
            if (cfg.grad_clip > 0) net.params.clip_grad_norm(static_cast<Scalar>(cfg.grad_clip));
            net.params.sgd_step(lr, static_cast<Scalar>(cfg.momentum),
                                static_cast<Scalar>(cfg.weight_decay));
            net.params.zero_grads();
            stats.batch_composition.emplace_back(
                static_cast<int>(batch.x.rows() - batch.memory_rows),
                static_cast<int>(batch.memory_rows));
            ++stats.steps;
            epoch_loss += loss_value;
            ++epoch_batches;
        };

        if (hooks.memory_half) {
            // Balanced replay: iterate the new data in half-batches, pair each
            // with an equal-sized draw from memory.
            std::vector<Eigen::Index> order(task.train_x.rows());
            for (Eigen::Index i = 0; i < task.train_x.rows(); ++i) order[i] = i;
            rng.shuffle(order);
            const std::size_t half = static_cast<std::size_t>(std::max(1, cfg.batch_size / 2));
            for (std::size_t at = 0; at < order.size(); at += half) {
                const std::size_t n = std::min(half, order.size() - at);
                auto [mem_x, mem_y] = hooks.memory_half(rng, static_cast<Eigen::Index>(n));
                BatchViewT<Scalar> batch;
                batch.x.resize(static_cast<Eigen::Index>(2 * n), task.train_x.cols());
                batch.x.topRows(static_cast<Eigen::Index>(n)) =
                    detail::take_rows(task.train_x, order, at, n);
                batch.x.bottomRows(static_cast<Eigen::Index>(n)) = mem_x;
                for (std::size_t i = 0; i < n; ++i)
                    batch.labels.push_back(task.train_y[static_cast<std::size_t>(order[at + i])]);
                batch.labels.insert(batch.labels.end(), mem_y.begin(), mem_y.end());
                batch.memory_rows = static_cast<Eigen::Index>(n);
                step(std::move(batch));
            }
        } else {
            std::vector<Eigen::Index> order(pool_x.rows());
            for (Eigen::Index i = 0; i < pool_x.rows(); ++i) order[i] = i;
            rng.shuffle(order);
            for (std::size_t at = 0; at < order.size();
                 at += static_cast<std::size_t>(cfg.batch_size)) {
                const std::size_t n =
                    std::min(static_cast<std::size_t>(cfg.batch_size), order.size() - at);
                BatchViewT<Scalar> batch;
                batch.x = detail::take_rows(pool_x, order, at, n);
                for (std::size_t i = 0; i < n; ++i)
                    batch.labels.push_back(pool_y[static_cast<std::size_t>(order[at + i])]);
                step(std::move(batch));
            }
        }
        stats.epoch_loss.push_back(epoch_batches ? epoch_loss / epoch_batches : 0.0);
    }
    return stats;
}

}  // namespace eelab
