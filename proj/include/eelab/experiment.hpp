#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "eelab/config.hpp"
#include "eelab/dyninfer.hpp"
#include "eelab/memory.hpp"
#include "eelab/scenario.hpp"
#include "eelab/tlc.hpp"

namespace eelab {

inline constexpr int kManifestSchemaVersion = 1;
inline constexpr const char* kToolVersion = "1.0.0";

struct TaskTrainRecord {
    int task_index = 0;
    int num_classes = 0;
    int train_samples = 0;
    int steps = 0;
    double final_loss = 0;
    double wall_seconds = 0;
};

// Everything a run produces; serialized as manifest.json. The digest covers
// the deterministic content only (timings excluded), so identical
// config+seed runs yield identical digests.
struct RunResult {
    ExperimentConfig config;
    std::vector<TaskTrainRecord> task_records;
    std::optional<TlcFitReport> tlc_report;
    BudgetCurve curve_plain;
    BudgetCurve curve_tlc;  // empty when tlc = off
    std::vector<BudgetPick> budgets_plain;
    std::vector<BudgetPick> budgets_tlc;
    OverthinkingReport overthinking_report;
    Matd forgetting;                              // classifier x task
    std::vector<Matd> forgetting_history;         // after each task, tasks seen so far
    std::vector<std::optional<double>> confidence;  // per task
    Matd task_aware;                              // classifier x task
    double tlc_fit_seconds = 0;
    double last_task_train_seconds = 0;
    std::map<std::string, std::string> checksums;  // file -> fnv1a64 hex
    std::string digest;
};

// Runs the full train -> fit -> sweep pipeline and persists curves.csv,
// metrics.json, manifest.json, checkpoint and memory snapshot under
// config.out_dir. On failure a partial manifest is flushed before rethrow.
RunResult run_experiment(const ExperimentConfig& config);

// Consolidated long-format CSV (method,tlc,seed,tau,avg_cost_fraction,
// accuracy) from one or more manifest files.
std::string export_plot_data(const std::vector<std::string>& manifest_paths);

std::uint64_t fnv1a64(const std::string& bytes);
std::string fnv1a64_hex(const std::string& bytes);

// Shortest round-trip decimal rendering; keeps CSV output byte-stable.
std::string format_double(double v);

std::string curve_to_csv(const BudgetCurve& curve);

}  // namespace eelab
