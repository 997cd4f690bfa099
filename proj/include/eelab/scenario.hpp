#pragma once

#include <set>
#include <vector>

#include "eelab/tensor.hpp"

namespace eelab {

// Contiguous global class-ID range [begin, begin + count).
struct ClassRange {
    int begin = 0;
    int count = 0;
    int end() const { return begin + count; }
    bool contains(int c) const { return c >= begin && c < end(); }
};

// One task's data. Labels are global class IDs inside `classes`.
template <typename Scalar>
struct TaskDataT {
    int task_index = 0;  // 1-based
    ClassRange classes;
    MatX<Scalar> train_x;
    std::vector<int> train_y;
    MatX<Scalar> test_x;
    std::vector<int> test_y;
};

template <typename Scalar>
struct ContinualScenarioT {
    std::vector<TaskDataT<Scalar>> tasks;
    int num_classes = 0;
    // orig_label_of_class[global id] = label in the source dataset
    std::vector<int> orig_label_of_class;

    int num_tasks() const { return static_cast<int>(tasks.size()); }
};

using TaskData = TaskDataT<float>;
using ContinualScenario = ContinualScenarioT<float>;

// Class ranges disjoint and ordered, at least 2 classes per task (single-class
// tasks make the masked-max correction degenerate), labels inside their range.
template <typename Scalar>
void validate_scenario(const ContinualScenarioT<Scalar>& sc) {
    int expect_begin = 0;
    std::set<int> seen;
    for (std::size_t t = 0; t < sc.tasks.size(); ++t) {
        const auto& task = sc.tasks[t];
        if (task.task_index != static_cast<int>(t) + 1)
            throw ConfigError("scenario: task indices must be 1..T in order");
        if (task.classes.count < 2)
            throw ConfigError("scenario: tasks must have at least 2 classes");
        if (task.classes.begin != expect_begin)
            throw ConfigError("scenario: class ranges must be contiguous and ordered");
        expect_begin = task.classes.end();
        for (int c = task.classes.begin; c < task.classes.end(); ++c) {
            if (!seen.insert(c).second) throw ConfigError("scenario: class sets overlap");
        }
        for (int y : task.train_y)
            if (!task.classes.contains(y)) throw DataError("scenario: train label out of range");
        for (int y : task.test_y)
            if (!task.classes.contains(y)) throw DataError("scenario: test label out of range");
        if (task.train_x.rows() != static_cast<Eigen::Index>(task.train_y.size()) ||
            task.test_x.rows() != static_cast<Eigen::Index>(task.test_y.size()))
            throw DataError("scenario: sample/label count mismatch");
    }
    if (expect_begin != sc.num_classes)
        throw ConfigError("scenario: class count mismatch");
}

}  // namespace eelab
