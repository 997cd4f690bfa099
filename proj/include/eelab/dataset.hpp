#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "eelab/scenario.hpp"
#include "eelab/tensor.hpp"

namespace eelab {

// A flat labeled sample set. Features are already normalized by the loader
// (images to [0,1], synthetic and CSV left raw). `is_test` marks rows whose
// train/test assignment came from the source; empty means no source split.
struct Dataset {
    Matf x;
    std::vector<int> labels;
    std::vector<std::uint8_t> is_test;

    Eigen::Index size() const { return x.rows(); }
};

struct BlobsSpec {
    int classes = 10;
    int dim = 32;
    int per_class = 100;
    double sigma = 0.25;
    std::uint64_t seed = 7;
};

// Gaussian clusters with per-class centers drawn uniformly in [0,1]^dim.
Dataset load_synthetic_blobs(const BlobsSpec& spec);

// IDX (big-endian magic + dims); expects ubyte images (magic 0x00000803) and
// ubyte labels (magic 0x00000801). Optional test files mark source splits.
Dataset load_idx(const std::string& images_path, const std::string& labels_path,
                 const std::string& test_images_path = {},
                 const std::string& test_labels_path = {});

// CIFAR binary: records of 1 label byte + 3072 pixel bytes.
Dataset load_cifar_binary(const std::string& train_path, const std::string& test_path = {});

// CSV with the label in the first column; remaining columns are features.
Dataset load_csv(const std::string& path);

// Shuffles class labels by seed, partitions them into T contiguous groups of
// (near-)equal size with the remainder to the earliest tasks, and remaps to
// global class IDs. Per-task train/test splits come from the source when
// present, otherwise a per-class 80/20 split.
ContinualScenario split_tasks(const Dataset& dataset, int num_tasks, std::uint64_t seed);

}  // namespace eelab
