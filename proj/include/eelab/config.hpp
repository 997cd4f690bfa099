#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace eelab {

enum class Method { FT, FTE, ER, LWF, BIC, ICARL };

std::string method_name(Method m);
Method method_from_name(const std::string& name);

// Flat key=value experiment configuration. Every key has a documented
// default except `seed`, which is mandatory; unknown keys are hard errors.
struct ExperimentConfig {
    // data
    std::string dataset = "synthetic-blobs";
    std::string data_path;
    std::string labels_path;
    std::string test_data_path;
    std::string test_labels_path;
    int blobs_classes = 10;
    int blobs_dim = 32;
    int blobs_per_class = 100;
    double blobs_sigma = 0.25;
    std::uint64_t blobs_seed = 0;  // 0 = derive from the run seed
    int num_tasks = 5;

    // method
    Method method = Method::FT;
    int memory_capacity = 200;
    double lwf_lambda = 1.0;
    double lwf_temperature = 2.0;

    // model
    int stages = 7;
    int width = 64;
    int fr_width = 0;  // 0 = identity feature reduction
    std::vector<double> ic_fractions = {0.15, 0.45, 0.75};

    // training
    int epochs = 20;
    int batch_size = 128;
    double base_lr = 0.1;
    std::vector<int> lr_milestones = {12, 17};
    double lr_decay = 0.1;
    double momentum = 0.9;
    double weight_decay = 5e-4;
    double grad_clip = 5.0;

    // evaluation
    bool tlc = true;
    int tau_grid_points = 41;
    bool tau_sentinel = true;
    std::vector<double> budgets = {1.0, 0.75, 0.5, 0.25};
    std::string budget_selection = "test";  // test | holdout

    // run
    bool seed_set = false;
    std::uint64_t seed = 0;
    std::string out_dir = "eelab-out";

    // The tau grid: evenly spaced points in [0, 1] plus the never-exit
    // sentinel when enabled.
    std::vector<double> tau_grid() const;

    void validate() const;

    // Canonical echo of every effective key, for the manifest.
    std::map<std::string, std::string> echo() const;
};

ExperimentConfig parse_config_text(const std::string& text);
ExperimentConfig parse_config_file(const std::string& path);

}  // namespace eelab
