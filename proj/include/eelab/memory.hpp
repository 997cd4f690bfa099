#pragma once

#include <map>
#include <string>
#include <vector>

#include "eelab/eenet.hpp"
#include "eelab/scenario.hpp"

namespace eelab {

// Greedy herding: repeatedly pick the sample that brings the mean of the
// selected set closest to the class mean. Returns the first m indices in
// selection order. Plain double loops; ties resolve to the lowest index.
template <typename Scalar>
std::vector<Eigen::Index> herding_select(const MatX<Scalar>& features, Eigen::Index m) {
    const Eigen::Index n = features.rows();
    const Eigen::Index d = features.cols();
    if (n == 0) throw DataError("herding_select: empty feature set");
    if (m < 0 || m > n) throw DataError("herding_select: m exceeds sample count");

    std::vector<double> mean(static_cast<std::size_t>(d), 0.0);
    for (Eigen::Index i = 0; i < n; ++i)
        for (Eigen::Index c = 0; c < d; ++c) mean[static_cast<std::size_t>(c)] += features(i, c);
    for (double& v : mean) v /= static_cast<double>(n);

    std::vector<double> sum(static_cast<std::size_t>(d), 0.0);
    std::vector<bool> taken(static_cast<std::size_t>(n), false);
    std::vector<Eigen::Index> order;
    order.reserve(static_cast<std::size_t>(m));
    for (Eigen::Index k = 1; k <= m; ++k) {
        Eigen::Index best = -1;
        double best_dist = 0;
        for (Eigen::Index i = 0; i < n; ++i) {
            if (taken[static_cast<std::size_t>(i)]) continue;
            double dist = 0;
            for (Eigen::Index c = 0; c < d; ++c) {
                const double diff = mean[static_cast<std::size_t>(c)] -
                                    (sum[static_cast<std::size_t>(c)] + features(i, c)) /
                                        static_cast<double>(k);
                dist += diff * diff;
            }
            if (best < 0 || dist < best_dist) {
                best = i;
                best_dist = dist;
            }
        }
        taken[static_cast<std::size_t>(best)] = true;
        for (Eigen::Index c = 0; c < d; ++c)
            sum[static_cast<std::size_t>(c)] += features(best, c);
        order.push_back(best);
    }
    return order;
}

template <typename Scalar>
struct StoredExemplarT {
    int task_index = 0;        // 1-based source task
    Eigen::Index source_row = 0;  // row in that task's train split
    int label = 0;             // global class ID
    MatX<Scalar> x;            // 1 x dim copy of the sample
};

// Fixed-capacity replay buffer. Per-class quotas are floor(capacity /
// classes_seen) with the remainder going to the earliest classes; within a
// class exemplars are kept in herding-rank order.
template <typename Scalar>
class ExemplarMemoryT {
public:
    explicit ExemplarMemoryT(int capacity) : capacity_(capacity) {
        if (capacity < 0) throw ConfigError("memory capacity must be >= 0");
    }

    int capacity() const { return capacity_; }

    int size() const {
        int n = 0;
        for (const auto& [cls, v] : per_class_) n += static_cast<int>(v.size());
        return n;
    }

    bool empty() const { return size() == 0; }

    int classes_stored() const { return static_cast<int>(per_class_.size()); }

    const std::vector<StoredExemplarT<Scalar>>& of_class(int cls) const {
        static const std::vector<StoredExemplarT<Scalar>> kEmpty;
        auto it = per_class_.find(cls);
        return it == per_class_.end() ? kEmpty : it->second;
    }

    int quota_for(int cls, int classes_seen) const {
        const int q = capacity_ / classes_seen;
        const int r = capacity_ % classes_seen;
        return q + (cls < r ? 1 : 0);
    }

    void truncate_class(int cls, int quota) {
        auto it = per_class_.find(cls);
        if (it == per_class_.end()) return;
        if (static_cast<int>(it->second.size()) > quota)
            it->second.resize(static_cast<std::size_t>(quota));
    }

    void store_class(int cls, std::vector<StoredExemplarT<Scalar>> ranked) {
        per_class_[cls] = std::move(ranked);
    }

    // All exemplars, class order then herding rank.
    void gather(MatX<Scalar>& x, std::vector<int>& y) const {
        const int n = size();
        Eigen::Index dim = 0;
        for (const auto& [cls, v] : per_class_)
            if (!v.empty()) {
                dim = v[0].x.cols();
                break;
            }
        x.resize(n, dim);
        y.clear();
        Eigen::Index at = 0;
        for (const auto& [cls, v] : per_class_) {
            for (const auto& e : v) {
                x.row(at++) = e.x.row(0);
                y.push_back(e.label);
            }
        }
    }

    const std::map<int, std::vector<StoredExemplarT<Scalar>>>& contents() const {
        return per_class_;
    }

private:
    int capacity_;
    std::map<int, std::vector<StoredExemplarT<Scalar>>> per_class_;
};

using ExemplarMemory = ExemplarMemoryT<float>;

// Recomputes quotas over all classes seen, truncates old classes to their
// quota (herding-rank prefix), and fills new classes by herding on the
// just-trained network's penultimate features.
template <typename Scalar>
void memory_update(ExemplarMemoryT<Scalar>& memory, const EarlyExitNetworkT<Scalar>& net,
                   const TaskDataT<Scalar>& task) {
    const int classes_seen = task.classes.end();
    if (classes_seen < 1) throw ConfigError("memory_update: no classes");
    for (const auto& [cls, v] : memory.contents())
        if (cls >= task.classes.begin && cls < task.classes.end())
            throw ProtocolError("memory_update: task already in memory");

    std::vector<int> old_classes;
    for (const auto& [cls, v] : memory.contents()) old_classes.push_back(cls);
    for (int cls : old_classes) memory.truncate_class(cls, memory.quota_for(cls, classes_seen));

    for (int cls = task.classes.begin; cls < task.classes.end(); ++cls) {
        std::vector<Eigen::Index> rows;
        for (std::size_t i = 0; i < task.train_y.size(); ++i)
            if (task.train_y[i] == cls) rows.push_back(static_cast<Eigen::Index>(i));
        if (rows.empty()) continue;
        MatX<Scalar> xs(static_cast<Eigen::Index>(rows.size()), task.train_x.cols());
        for (std::size_t i = 0; i < rows.size(); ++i)
            xs.row(static_cast<Eigen::Index>(i)) = task.train_x.row(rows[i]);
        MatX<Scalar> feats = penultimate_features(net, xs);
        const Eigen::Index m = std::min<Eigen::Index>(
            memory.quota_for(cls, classes_seen), static_cast<Eigen::Index>(rows.size()));
        std::vector<Eigen::Index> order = herding_select(feats, m);
        std::vector<StoredExemplarT<Scalar>> ranked;
        for (Eigen::Index local : order) {
            StoredExemplarT<Scalar> e;
            e.task_index = task.task_index;
            e.source_row = rows[static_cast<std::size_t>(local)];
            e.label = cls;
            e.x = xs.row(local);
            ranked.push_back(std::move(e));
        }
        memory.store_class(cls, std::move(ranked));
    }
}

}  // namespace eelab
