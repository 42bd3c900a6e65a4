#pragma once

#include <functional>
#include <span>
#include <string>
#include <vector>

#include "niff/batch.hpp"
#include "niff/config.hpp"
#include "niff/losses.hpp"
#include "niff/models.hpp"
#include "niff/stats.hpp"
#include "niff/synthetic.hpp"

namespace niff {

// Stream ids for the independent data draws of one experiment.
inline constexpr std::uint64_t kTrainStream = 1;
inline constexpr std::uint64_t kHeldoutStream = 2;
inline constexpr std::uint64_t kBaseTestStream = 3;
inline constexpr std::uint64_t kNovelTestStream = 4;
inline constexpr std::uint64_t kShotStream = 5;

/// Fraction of instances whose arg-max logit matches the label.
double accuracy(const HeadModel& model, const LabeledBatch& batch);

struct BaseTrainResult {
    HeadModel teacher;
    StatsSnapshot snapshot;
    FisherInfo fisher;
    std::vector<double> epoch_accuracy;  // held-out accuracy after each epoch
    double heldout_accuracy = 0.0;
    int epochs_run = 0;
};

/// Trains the base head until it clears the held-out accuracy bar (but for at
/// least min_epochs, so the margins firm up), then runs one final
/// observation-only epoch at the converged parameters: the watcher
/// records its statistics and parameter importance is estimated over that
/// same epoch's stream, so both describe the exact teacher later stages use.
BaseTrainResult base_train(HeadModel teacher, const LabeledBatch& train_data, const LabeledBatch& heldout,
                           DataWatcher watcher, const BaseStage& stage, FisherMode fisher_mode, Rng& rng);

struct GenTrainResult {
    GeneratorModel generator;
    std::vector<GenLossBreakdown> curve;
    double forged_class_prob = 0.0;  // teacher's mean true-class probability on fresh forged features
};

/// Stage I: fits the generator to the recorded statistics against the frozen
/// teacher. Divergence (non-finite loss) reports the last good iteration.
GenTrainResult train_generator(const StatsSnapshot& snapshot, const HeadModel& teacher,
                               const GeneratorConfig& gen_cfg, const GeneratorStage& stage,
                               const AlignmentScale& scale, Rng& rng);

/// Exactly K forged features per base class with fresh noise, class-major,
/// detached from any graph.
LabeledBatch forge_batch(const GeneratorModel& g, int shots, Rng& rng);

struct FinetuneRecord {
    int iteration = 0;
    KdLossBreakdown losses;
    double ewc = 0.0;
    double total = 0.0;
};

struct FinetuneResult {
    HeadModel student;
    std::vector<FinetuneRecord> curve;
    std::vector<long long> forged_counts;  // per base class, over the whole run
};

/// Seam for gradient surgery between the two objectives. Receives the
/// flattened replay-side and novel-side gradients and writes what the
/// optimizer should apply. The default (no combiner) is their sum.
using GradientCombiner =
    std::function<void(std::span<const double> replay_grads, std::span<const double> novel_grads,
                       std::span<double> out)>;

/// Stage II: finetunes the expanded student on the fixed K-shot novel batch
/// while replaying forged base features, with the anchored penalty and the
/// base-parameter learning-rate downscale.
FinetuneResult novel_finetune(HeadModel student, const HeadModel& teacher, const GeneratorModel* generator,
                              const LabeledBatch& novel_shots, const FisherInfo& fisher, const NovelStage& stage,
                              const LossConfig& losses, Rng& rng, const GradientCombiner& combiner = {});

struct EvalReport {
    int base_classes = 0;
    int novel_classes = 0;
    double base_accuracy = 0.0;
    double novel_accuracy = 0.0;
    double overall = 0.0;
    std::vector<double> per_class_accuracy;
    double base_reg_mae = 0.0;
    double novel_reg_mae = 0.0;
    std::vector<GenLossBreakdown> generator_curve;  // attached by the runner
    std::vector<FinetuneRecord> finetune_curve;

    std::string to_json_string() const;
    void save_json(const std::string& path) const;
    void save_finetune_csv(const std::string& path) const;
    void save_generator_csv(const std::string& path) const;
};

void save_generator_curve_csv(const std::string& path, std::span<const GenLossBreakdown> curve);
void save_finetune_curve_csv(const std::string& path, std::span<const FinetuneRecord> curve);

/// Class-count-weighted overall accuracy over the base and novel splits.
double overall_accuracy(double base_acc, double novel_acc, int base_classes, int novel_classes);

/// One decimal place, the usual reporting convention.
std::string format_accuracy(double value);

EvalReport evaluate(const HeadModel& model, const LabeledBatch& base_test, const LabeledBatch& novel_test);

/// Pooled features of real and forged batches as CSV for external embedding.
void dump_pooled_features(const std::string& path, const HeadModel& model, const LabeledBatch& real,
                          const LabeledBatch& forged);

/// Everything that precedes finetuning: data, the trained teacher with its
/// recorded statistics and importance estimate, and the fitted generator.
/// Preparing once and finetuning several arms keeps comparisons paired.
struct PreparedStages {
    SyntheticTaskSpec spec;
    BaseTrainResult base;
    GenTrainResult gen;
    LabeledBatch shots;
    LabeledBatch base_test;
    LabeledBatch novel_test;
};

PreparedStages prepare_stages(const ExperimentConfig& cfg);

/// Finetunes a fresh student from the prepared teacher under the given replay
/// mode and loss settings, then scores it. Deterministic in cfg.seed, so two
/// arms over the same stages differ only in the settings passed here.
EvalReport finetune_and_evaluate(const PreparedStages& stages, const ExperimentConfig& cfg, ReplayMode replay,
                                 const LossSwitches& switches, double lambda_ewc,
                                 FinetuneResult* finetune_out = nullptr);

struct ExperimentResult {
    BaseTrainResult base;
    GenTrainResult gen;
    FinetuneResult finetune;
    EvalReport report;
};

/// Whole pipeline for one seed at the given config: base training, generator
/// fitting, novel finetuning, evaluation. Deterministic in cfg.seed.
ExperimentResult run_experiment(const ExperimentConfig& cfg);

struct AblationRow {
    std::string label;
    ReplayMode replay = ReplayMode::fresh;
    LossSwitches switches;
    double lambda_ewc = 0.0;
    EvalReport report;
};

/// The eight replay-loss switch combinations, confidence-major, with reports
/// left empty. Rows are independent, so callers may fill them in parallel.
std::vector<AblationRow> ablation_grid(const ExperimentConfig& cfg);

/// All eight replay-loss switch combinations, sharing one base and generator
/// stage. Rows are ordered confidence-major.
std::vector<AblationRow> run_ablation(const ExperimentConfig& cfg);

/// Component build-up rows: plain finetuning, then feature distillation,
/// confidence, the L1 term, and the anchored penalty added one at a time.
std::vector<AblationRow> run_component_analysis(const ExperimentConfig& cfg);

void save_ablation_csv(const std::string& path, const std::vector<AblationRow>& rows);

}  // namespace niff
