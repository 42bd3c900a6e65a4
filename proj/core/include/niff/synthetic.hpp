#pragma once

#include <cstdint>
#include <vector>

#include "niff/batch.hpp"
#include "niff/errors.hpp"
#include "niff/rng.hpp"

namespace niff {

/// One class's feature distribution: a mixture of diagonal Gaussians over
/// channels, written out to every spatial position with fresh noise.
struct ClassMixture {
    std::vector<std::vector<double>> component_means;  // [components][channels]
    std::vector<double> component_scales;              // per-component noise std
    std::vector<double> mixing_weights;                // sums to 1

    /// Probability-weighted mean per channel.
    std::vector<double> mixture_mean() const;
};

enum class Split { base, novel };

/// Fully specifies the synthetic task: which feature distributions exist,
/// how regression targets derive from them, and how classes divide into the
/// base and novel sets. Class ids are global: base classes come first.
struct SyntheticTaskSpec {
    int base_classes = 8;
    int novel_classes = 3;
    int channels = 32;
    int spatial = 5;
    int shots = 10;
    int reg_targets = 4;
    double reg_noise = 0.05;
    std::uint64_t seed = 0;
    std::vector<ClassMixture> mixtures;        // size base_classes + novel_classes
    std::vector<std::vector<double>> reg_map;  // [reg_targets][channels]
    std::vector<double> reg_bias;              // [reg_targets]

    int total_classes() const { return base_classes + novel_classes; }
    std::vector<int> split_classes(Split split) const;

    /// Regression target mean for one class: reg_map · mixture_mean + bias.
    std::vector<double> class_target(int class_id) const;

    void validate() const;
};

/// Well-separated default task: positive-orthant mixtures whose class means
/// sit far apart relative to their noise, so the base head can actually hit
/// the training accuracy bar.
SyntheticTaskSpec default_task_spec(int base_classes, int novel_classes, int channels, int spatial, int shots,
                                    std::uint64_t seed);

/// Draws n_per_class instances for every class in the split. Labels are
/// global class ids; targets are the class's fixed linear map of its mixture
/// mean plus isotropic noise. The stream id keeps draws for different
/// purposes (train/heldout/test/shots) independent yet reproducible.
LabeledBatch make_synthetic_data(const SyntheticTaskSpec& spec, Split split, int n_per_class,
                                 std::uint64_t stream);

}  // namespace niff
