#pragma once

#include <fstream>
#include <string>

#include <json.hpp>

#include "eelab/memory.hpp"

namespace eelab {

inline constexpr int kMemorySnapshotVersion = 1;

// Snapshot holds provenance (task, row, label, rank); raw vectors are pulled
// back out of the scenario on restore.
template <typename Scalar>
void save_memory_snapshot(const ExemplarMemoryT<Scalar>& memory, const std::string& path) {
    nlohmann::json j;
    j["schema_version"] = kMemorySnapshotVersion;
    j["capacity"] = memory.capacity();
    nlohmann::json entries = nlohmann::json::array();
    for (const auto& [cls, v] : memory.contents()) {
        for (std::size_t rank = 0; rank < v.size(); ++rank) {
            entries.push_back({{"class", cls},
                               {"task", v[rank].task_index},
                               {"row", static_cast<std::int64_t>(v[rank].source_row)},
                               {"rank", rank}});
        }
    }
    j["exemplars"] = std::move(entries);
    std::ofstream os(path);
    if (!os) throw DataError("cannot write memory snapshot: " + path);
    os << j.dump(2) << "\n";
}

template <typename Scalar>
ExemplarMemoryT<Scalar> load_memory_snapshot(const std::string& path,
                                             const ContinualScenarioT<Scalar>& scenario) {
    std::ifstream is(path);
    if (!is) throw DataError("cannot read memory snapshot: " + path);
    nlohmann::json j = nlohmann::json::parse(is, nullptr, true);
    if (!j.contains("schema_version") || j["schema_version"].get<int>() != kMemorySnapshotVersion)
        throw VersionError("memory snapshot schema version mismatch");
    ExemplarMemoryT<Scalar> memory(j["capacity"].get<int>());
    std::map<int, std::vector<std::pair<std::size_t, StoredExemplarT<Scalar>>>> staging;
    for (const auto& e : j["exemplars"]) {
        StoredExemplarT<Scalar> ex;
        ex.task_index = e["task"].get<int>();
        ex.source_row = e["row"].get<std::int64_t>();
        ex.label = e["class"].get<int>();
        if (ex.task_index < 1 || ex.task_index > scenario.num_tasks())
            throw DataError("memory snapshot: task index out of range");
        const auto& task = scenario.tasks[static_cast<std::size_t>(ex.task_index - 1)];
        if (ex.source_row < 0 || ex.source_row >= task.train_x.rows())
            throw DataError("memory snapshot: row out of range");
        ex.x = task.train_x.row(ex.source_row);
        staging[ex.label].emplace_back(e["rank"].get<std::size_t>(), std::move(ex));
    }
    for (auto& [cls, v] : staging) {
        std::sort(v.begin(), v.end(),
                  [](const auto& a, const auto& b) { return a.first < b.first; });
        std::vector<StoredExemplarT<Scalar>> ranked;
        for (auto& [rank, ex] : v) ranked.push_back(std::move(ex));
        memory.store_class(cls, std::move(ranked));
    }
    return memory;
}

}  // namespace eelab
