#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "niff/losses.hpp"
#include "niff/models.hpp"
#include "niff/sgd.hpp"
#include "niff/stats.hpp"
#include "niff/synthetic.hpp"

namespace niff {

enum class ReplayMode { fresh, fixed, none };

struct TaskShape {
    int base_classes = 8;
    int novel_classes = 3;
    int channels = 32;
    int spatial = 5;
    int shots = 10;
};

struct DataSizes {
    int train_per_class = 64;
    int heldout_per_class = 32;
    int test_per_class = 50;
};

struct BaseStage {
    SgdConfig opt{0.01, 0.9, 1e-4};
    int max_epochs = 30;
    // Keep training past the accuracy bar until this many epochs have run.
    // Feature forging needs a confident teacher, and a head that has only
    // just cleared the bar still has thin decision margins.
    int min_epochs = 8;
    int batch_size = 32;
    double accuracy_bar = 0.95;
};

struct GeneratorStage {
    SgdConfig opt{1e-3, 0.9, 5e-5};
    int iterations = 500;
    int feature_batch = 600;  // total per step; split per class, rounded
    // The alignment loss is steep where the teacher's softmax saturates, so
    // early steps need a global gradient-norm ceiling. Zero disables.
    double clip_norm = 10.0;

    int per_class(int base_classes) const;
};

struct NovelStage {
    SgdConfig opt{0.02, 0.9, 0.0};
    int iterations = 300;
    double head_lr_downscale = 0.015;
    ReplayMode replay = ReplayMode::fresh;
};

struct LossConfig {
    double lambda_kl = 5.0;
    double lambda_f = 0.1;
    double lambda_ewc = 0.01;
    double eps = 1e-8;
    bool include_post_softmax = true;
    FisherMode fisher_mode = FisherMode::per_layer_mean;
    LossSwitches switches;
};

/// Everything one experiment needs, loadable from a single JSON file. The
/// synthetic task's mixtures are derived deterministically from the seed, so
/// the file stays short and the data stays reproducible.
struct ExperimentConfig {
    std::uint64_t seed = 0;
    TaskShape task;
    DataSizes data;
    std::vector<int> head_blocks{32, 64};
    int gen_z_dim = 100;
    int gen_blocks = 5;
    int gen_trunk = 8;
    WatcherConfig watcher;
    LossConfig losses;
    BaseStage base;
    GeneratorStage generator;
    NovelStage novel;

    void validate() const;

    SyntheticTaskSpec task_spec() const;
    HeadConfig head_config() const;
    GeneratorConfig generator_config() const;
    AlignmentScale alignment_scale() const;

    std::string to_json_string() const;
    static ExperimentConfig from_json_string(const std::string& text);
    void save(const std::string& path) const;
    static ExperimentConfig load(const std::string& path);

    static ExperimentConfig desk_default();
    static ExperimentConfig full_scale();
};

std::string replay_mode_name(ReplayMode mode);
ReplayMode replay_mode_from_name(const std::string& name);

}  // namespace niff
