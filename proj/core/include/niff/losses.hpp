#pragma once

#include <span>
#include <string>
#include <vector>

#include "niff/batch.hpp"
#include "niff/models.hpp"
#include "niff/rng.hpp"
#include "niff/stats.hpp"
#include "niff/tensor.hpp"

namespace niff {

/// Mean over dimensions of the diagonal-Gaussian divergence from the recorded
/// distribution (mu, var) to the batch distribution (mu_fake, var_fake), with
/// eps added to both variances inside logs and denominators.
double kl_gaussian_diag(std::span<const double> mu, std::span<const double> var, std::span<const double> mu_fake,
                        std::span<const double> var_fake, double eps);

struct AlignmentScale {
    double lambda_kl = 5.0;
    double eps = 1e-8;
    bool include_post_softmax = true;
};

/// One class's share of the generator objective, kept differentiable so
/// classes can be backpropagated one at a time and the graphs discarded.
struct ClassAlignment {
    Tensor partial;               // lambda_kl/(S*C) * sum_sites meanKL + CE/C
    double kl_mean = 0.0;         // mean over participating sites and dims
    double ce = 0.0;
    double mean_class_prob = 0.0;  // softmax mass on the target class
};

ClassAlignment class_alignment_loss(const StatsSnapshot& stats, const HeadModel& teacher,
                                    const Tensor& fake_features, int class_id, const AlignmentScale& scale);

struct GenLossBreakdown {
    double kl_term = 0.0;  // lambda-scaled, averaged over sites, classes, dims
    double ce_term = 0.0;
    double total = 0.0;
    double mean_class_prob = 0.0;
};

/// Full generator objective over all base classes with fresh noise. When
/// `accumulate_grads` is set, each class partial is backpropagated before the
/// next is built, leaving summed gradients on the generator parameters.
GenLossBreakdown generator_loss(const StatsSnapshot& stats, const HeadModel& teacher, const GeneratorModel& g,
                                int features_per_class, const AlignmentScale& scale, Rng& rng,
                                bool accumulate_grads);

struct LossSwitches {
    bool conf = true;
    bool feat_distill = true;
    bool l1_distill = true;
};

struct KdLossBreakdown {
    double cls_feat_term = 0.0;
    double reg_feat_term = 0.0;
    double reg_l1_term = 0.0;
    double conf_term = 0.0;
    double cls_novel_term = 0.0;
    double reg_novel_term = 0.0;
    double total = 0.0;
};

/// Feature distillation on forged base features: the teacher/student pooled
/// feature gap weighted by the class's classifier row, the same gap weighted
/// by each of the class's regressor rows, and an L1 match of the class's
/// regression outputs. Weight rows come from the student's current base
/// tensors but act as constants.
Tensor kd_loss(const HeadModel& teacher, const HeadModel& student, const LabeledBatch& forged, double lambda_f,
               KdLossBreakdown* breakdown = nullptr);

/// Mean cross-entropy of the student's full-class softmax against the forged
/// batch's base labels.
Tensor conf_loss(const HeadModel& student, const LabeledBatch& forged);

/// Everything the student owes to the forged base features: the switch-gated
/// sum of the distillation terms and the confidence term, sharing one forward
/// pass per network. With every switch off the result is a constant zero.
Tensor replay_loss(const HeadModel& teacher, const HeadModel& student, const LabeledBatch& forged,
                   double lambda_f, const LossSwitches& switches, KdLossBreakdown* breakdown = nullptr);

/// Composite novel-stage objective: classification and regression on the
/// novel batch plus the forged-replay terms, each switchable.
Tensor novel_loss(const HeadModel& student, const HeadModel& teacher, const LabeledBatch& novel,
                  const LabeledBatch& forged, double lambda_f, const LossSwitches& switches,
                  KdLossBreakdown* breakdown = nullptr);

enum class FisherMode { full_diagonal, per_layer_mean };

struct FisherEntry {
    std::string name;
    Shape shape;
    std::vector<double> anchor;  // parameter values at base convergence
    std::vector<double> values;  // per element, or one scalar in mean mode
};

struct FisherInfo {
    FisherMode mode = FisherMode::per_layer_mean;
    std::vector<FisherEntry> entries;

    std::size_t value_count() const;
    const FisherEntry* find(std::string_view name) const;

    void save(const std::string& path) const;
    static FisherInfo load(const std::string& path);
};

/// Empirical diagonal Fisher information: per-sample task-loss gradients
/// squared and averaged over the stream, anchored at the model's current
/// parameters. per_layer_mean collapses each parameter tensor to one scalar.
FisherInfo compute_fisher(const HeadModel& model, const std::vector<LabeledBatch>& stream, FisherMode mode);

/// lambda * sum_i F_i (theta_i - anchor_i)^2 over parameters named in the
/// fisher info; parameters without an entry (novel rows) are unpenalized.
Tensor ewc_penalty(const HeadModel& model, const FisherInfo& fisher, double lambda_ewc);

}  // namespace niff
