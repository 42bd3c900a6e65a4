#pragma once

#include <vector>

#include "niff/tensor.hpp"

namespace niff {

/// Feature maps with class labels and, for real data, per-instance regression
/// targets for the labelled class's output block.
struct LabeledBatch {
    Tensor features;          // [N, C, H, W]
    std::vector<int> labels;  // global class indices
    Tensor reg_targets;       // [N, r]; undefined for forged batches

    bool empty() const { return !features.defined(); }
    int size() const { return empty() ? 0 : features.dim(0); }
    bool has_targets() const { return reg_targets.defined(); }

    void validate() const;
    /// Single-instance copy (fresh untracked tensors) for per-sample passes.
    LabeledBatch instance(int i) const;
};

/// Binary round-trip for labeled data, bit-exact on doubles.
void save_batch(const std::string& path, const LabeledBatch& batch);
LabeledBatch load_batch(const std::string& path);

}  // namespace niff
