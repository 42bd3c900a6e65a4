#pragma once

#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "niff/rng.hpp"
#include "niff/stats.hpp"
#include "niff/tensor.hpp"

namespace niff {

struct HeadConfig {
    int in_channels = 32;
    int spatial = 5;
    std::vector<int> block_channels = {32, 64};
    int base_classes = 8;
    int novel_classes = 0;
    int reg_targets_per_class = 4;
    double norm_epsilon = 1e-5;

    int pooled_dim() const { return block_channels.back(); }
    int total_classes() const { return base_classes + novel_classes; }
    void validate() const;
};

/// Per-channel affine stand-in for a normalization layer whose statistics
/// were measured once and then frozen. Until calibrate() runs it has no
/// defined behaviour and forward passes refuse to use it.
struct FrozenNorm {
    std::vector<double> gain;
    std::vector<double> offset;
    bool calibrated = false;

    /// Fits gain/offset so the given pre-norm batch maps to zero mean and
    /// unit variance per channel. x: [N,C,H,W].
    void calibrate(const Tensor& x, double epsilon);
    Tensor apply(const Tensor& x) const;
};

struct ConvBlock {
    Tensor w;  // [out, in, 3, 3]
    Tensor b;  // [out]
    FrozenNorm norm;
};

struct HeadOutput {
    Tensor pooled;  // [N, d]
    Tensor logits;  // [N, C_total]
    Tensor probs;   // softmax(logits)
    Tensor reg;     // [N, reg_targets_per_class * C_total]
    std::vector<std::pair<std::string, Tensor>> sites;  // filled when requested
};

/// Convolutional trunk with a classifier and a per-class regressor on pooled
/// features. Base and novel output rows live in separate tensors so they can
/// be trained, regularized, and anchored independently.
class HeadModel {
public:
    HeadConfig config;
    std::vector<ConvBlock> blocks;
    Tensor cls_w, cls_b;              // [C_b, d], [C_b]
    Tensor cls_w_novel, cls_b_novel;  // defined iff novel_classes > 0
    Tensor reg_w, reg_b;              // [r*C_b, d], [r*C_b]
    Tensor reg_w_novel, reg_b_novel;

    /// Measures every frozen norm in sequence from one representative batch.
    void calibrate_norms(const Tensor& x);
    bool norms_calibrated() const;

    /// x: [N, in_channels, spatial, spatial]. Observes `watcher` at each
    /// probe site when given (labels then required, one per instance).
    HeadOutput forward(const Tensor& x, bool collect_sites = false, DataWatcher* watcher = nullptr,
                       std::span<const int> labels = {}) const;

    /// Logits/regression restricted to base rows (teacher-side view).
    Tensor base_logits(const Tensor& pooled) const;
    Tensor base_reg(const Tensor& pooled) const;

    std::vector<Tensor> parameters() const;
    std::vector<Tensor> base_parameters() const;   // everything predating novel rows
    std::vector<Tensor> novel_parameters() const;  // empty when novel_classes == 0
    std::vector<std::pair<std::string, Tensor>> named_parameters() const;

    bool trainable() const;

    /// Value-identical copy with every parameter's gradient tracking off.
    HeadModel frozen_copy() const;
    /// Trainable copy extended with `extra_novel_classes` fresh output rows:
    /// novel classifier rows start at zero, novel regressor rows at a fan-in
    /// uniform draw.
    HeadModel expanded_copy(int extra_novel_classes, Rng& rng) const;
};

HeadModel build_head(const HeadConfig& config, Rng& rng);

struct GeneratorConfig {
    int z_dim = 32;
    int trunk_channels = 8;
    int num_blocks = 2;
    int out_channels = 32;
    int spatial = 5;
    int num_classes = 8;

    void validate() const;
};

struct GeneratorClassHead {
    Tensor w;  // [out, trunk, 1, 1]
    Tensor b;  // [out]
};

/// Maps latent noise to class-conditioned fake feature maps: a linear lift to
/// a [trunk, spatial, spatial] seed, shared conv blocks, then one 1x1 head
/// per class.
class GeneratorModel {
public:
    GeneratorConfig config;
    Tensor fc_w, fc_b;  // [trunk*spatial^2, z_dim], [trunk*spatial^2]
    std::vector<ConvBlock> blocks;  // norm-free: calibrated flag stays false
    std::vector<GeneratorClassHead> heads;

    /// z: [N, z_dim] -> [N, out_channels, spatial, spatial]
    Tensor forward(const Tensor& z, int class_id) const;

    std::vector<Tensor> parameters() const;
    std::vector<std::pair<std::string, Tensor>> named_parameters() const;
    GeneratorModel frozen_copy() const;
};

GeneratorModel build_generator(const GeneratorConfig& config, Rng& rng);

/// Standard normal latent batch [n, z_dim].
Tensor sample_noise(Rng& rng, int n, int z_dim);

// ---- checkpoints -----------------------------------------------------------

void save_checkpoint(const HeadModel& model, const std::string& path);
void save_checkpoint(const GeneratorModel& model, const std::string& path);
HeadModel load_head_checkpoint(const std::string& path, bool trainable);
GeneratorModel load_generator_checkpoint(const std::string& path, bool trainable);

}  // namespace niff
