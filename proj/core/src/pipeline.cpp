#include "niff/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>

#include <json.hpp>

#include "niff/sgd.hpp"
#include "niff/tensor.hpp"

namespace niff {

namespace {

LabeledBatch subset(const LabeledBatch& batch, std::span<const int> indices) {
    const auto& shape = batch.features.shape();
    const int per = numel(shape) / shape[0];
    LabeledBatch out;
    std::vector<double> features(indices.size() * static_cast<std::size_t>(per));
    out.labels.resize(indices.size());
    const auto src = batch.features.data();
    for (std::size_t i = 0; i < indices.size(); ++i) {
        const int row = indices[i];
        std::copy(src.begin() + static_cast<std::ptrdiff_t>(row) * per,
                  src.begin() + static_cast<std::ptrdiff_t>(row + 1) * per,
                  features.begin() + static_cast<std::ptrdiff_t>(i) * per);
        out.labels[i] = batch.labels[static_cast<std::size_t>(row)];
    }
    Shape sub = shape;
    sub[0] = static_cast<int>(indices.size());
    out.features = Tensor::from_data(std::move(sub), std::move(features));
    if (batch.has_targets()) {
        const int r = batch.reg_targets.dim(1);
        std::vector<double> targets(indices.size() * static_cast<std::size_t>(r));
        const auto ts = batch.reg_targets.data();
        for (std::size_t i = 0; i < indices.size(); ++i) {
            std::copy(ts.begin() + static_cast<std::ptrdiff_t>(indices[i]) * r,
                      ts.begin() + static_cast<std::ptrdiff_t>(indices[i] + 1) * r,
                      targets.begin() + static_cast<std::ptrdiff_t>(i) * r);
        }
        out.reg_targets = Tensor::from_data({static_cast<int>(indices.size()), r}, std::move(targets));
    }
    return out;
}

Tensor task_loss(const HeadModel& model, const HeadOutput& out, const LabeledBatch& batch) {
    auto ce = cross_entropy(out.logits, batch.labels);
    if (!batch.has_targets()) return ce;
    const int r = model.config.reg_targets_per_class;
    return add(ce, smooth_l1(select_class_block(out.reg, batch.labels, r), batch.reg_targets));
}

std::vector<double> flatten_grads(const std::vector<Tensor>& params) {
    std::size_t total = 0;
    for (const auto& p : params) total += static_cast<std::size_t>(p.size());
    std::vector<double> out;
    out.reserve(total);
    for (const auto& p : params) {
        const auto g = p.grad();
        out.insert(out.end(), g.begin(), g.end());
    }
    return out;
}

void write_grads(std::vector<Tensor>& params, std::span<const double> flat) {
    std::size_t at = 0;
    for (auto& p : params) {
        auto g = p.grad_mut();
        std::copy(flat.begin() + static_cast<std::ptrdiff_t>(at),
                  flat.begin() + static_cast<std::ptrdiff_t>(at + g.size()), g.begin());
        at += g.size();
    }
}

std::string fmt(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.10g", v);
    return buf;
}

void clip_grad_norm(const std::vector<Tensor>& params, double max_norm) {
    if (max_norm <= 0.0) return;
    double sq = 0.0;
    for (const auto& p : params) {
        for (double g : p.grad()) sq += g * g;
    }
    const double norm = std::sqrt(sq);
    if (norm <= max_norm) return;
    const double scale = max_norm / norm;
    for (auto p : params) {
        for (double& g : p.grad_mut()) g *= scale;
    }
}

}  // namespace

double accuracy(const HeadModel& model, const LabeledBatch& batch) {
    batch.validate();
    if (batch.empty()) throw ContractError("accuracy of an empty batch");
    auto out = model.forward(batch.features);
    const int classes = model.config.total_classes();
    const auto logits = out.logits.data();
    int hits = 0;
    for (int i = 0; i < batch.size(); ++i) {
        const double* row = logits.data() + static_cast<std::ptrdiff_t>(i) * classes;
        const int pred = static_cast<int>(std::max_element(row, row + classes) - row);
        if (pred == batch.labels[static_cast<std::size_t>(i)]) ++hits;
    }
    return static_cast<double>(hits) / batch.size();
}

BaseTrainResult base_train(HeadModel teacher, const LabeledBatch& train_data, const LabeledBatch& heldout,
                           DataWatcher watcher, const BaseStage& stage, FisherMode fisher_mode, Rng& rng) {
    train_data.validate();
    heldout.validate();
    if (train_data.empty() || heldout.empty()) throw ContractError("base training needs train and held-out data");
    if (!train_data.has_targets()) throw ContractError("base training needs regression targets");
    if (!teacher.trainable()) throw ContractError("base training needs a trainable head");
    if (teacher.config.novel_classes != 0) throw ContractError("base training runs on a base-only head");
    if (!teacher.norms_calibrated()) teacher.calibrate_norms(train_data.features);

    SgdOptimizer opt(stage.opt);
    opt.add_parameters(teacher.parameters());

    const int n = train_data.size();
    std::vector<int> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), 0);

    BaseTrainResult result;
    bool converged = false;

    for (int epoch = 0; epoch < stage.max_epochs && !converged; ++epoch) {
        std::shuffle(order.begin(), order.end(), rng.engine());
        for (int at = 0; at < n; at += stage.batch_size) {
            const int take = std::min(stage.batch_size, n - at);
            auto mb = subset(train_data, std::span<const int>(order).subspan(static_cast<std::size_t>(at),
                                                                             static_cast<std::size_t>(take)));
            opt.zero_grad();
            backward(task_loss(teacher, teacher.forward(mb.features), mb));
            opt.step();
        }
        const double acc = accuracy(teacher, heldout);
        result.epoch_accuracy.push_back(acc);
        result.epochs_run = epoch + 1;
        converged = acc >= stage.accuracy_bar && epoch + 1 >= stage.min_epochs;
    }
    if (!converged) {
        throw TrainingError("base head reached only " + fmt(result.epoch_accuracy.back()) + " of the " +
                            fmt(stage.accuracy_bar) +
                            " held-out bar within base.max_epochs; raise base.max_epochs, adjust "
                            "base.learning_rate, or separate the task mixtures further");
    }
    result.heldout_accuracy = result.epoch_accuracy.back();

    // Final epoch, observation only: one more shuffled pass at the converged
    // parameters feeds the watcher and the importance estimate, so both
    // describe exactly the teacher that later stages freeze.
    auto frozen = teacher.frozen_copy();
    std::vector<LabeledBatch> final_epoch;
    std::shuffle(order.begin(), order.end(), rng.engine());
    for (int at = 0; at < n; at += stage.batch_size) {
        const int take = std::min(stage.batch_size, n - at);
        auto mb = subset(train_data, std::span<const int>(order).subspan(static_cast<std::size_t>(at),
                                                                         static_cast<std::size_t>(take)));
        frozen.forward(mb.features, false, &watcher, mb.labels);
        final_epoch.push_back(std::move(mb));
    }
    result.fisher = compute_fisher(teacher, final_epoch, fisher_mode);
    result.snapshot = watcher.snapshot();
    result.teacher = std::move(teacher);
    return result;
}

GenTrainResult train_generator(const StatsSnapshot& snapshot, const HeadModel& teacher,
                               const GeneratorConfig& gen_cfg, const GeneratorStage& stage,
                               const AlignmentScale& scale, Rng& rng) {
    if (snapshot.sites.empty()) throw ContractError("statistics snapshot holds no sites");
    auto frozen = teacher.frozen_copy();

    GenTrainResult result;
    result.generator = build_generator(gen_cfg, rng);
    SgdOptimizer opt(stage.opt);
    const auto params = result.generator.parameters();
    opt.add_parameters(params);
    const int per_class = stage.per_class(gen_cfg.num_classes);

    for (int it = 0; it < stage.iterations; ++it) {
        opt.zero_grad();
        auto bd = generator_loss(snapshot, frozen, result.generator, per_class, scale, rng, true);
        if (!std::isfinite(bd.total)) {
            throw TrainingError("generator loss diverged at iteration " + std::to_string(it) +
                                "; last good iteration " + std::to_string(it - 1) +
                                "; lower generator_train.learning_rate");
        }
        clip_grad_norm(params, stage.clip_norm);
        opt.step();
        result.curve.push_back(bd);
    }

    auto probe = forge_batch(result.generator, 16, rng);
    auto out = frozen.forward(probe.features);
    double prob_sum = 0.0;
    for (int i = 0; i < probe.size(); ++i) {
        prob_sum += out.probs.at({i, probe.labels[static_cast<std::size_t>(i)]});
    }
    result.forged_class_prob = prob_sum / probe.size();
    return result;
}

LabeledBatch forge_batch(const GeneratorModel& g, int shots, Rng& rng) {
    if (shots < 1) throw ContractError("forging needs at least one feature per class");
    const int classes = g.config.num_classes;
    const int per = g.config.out_channels * g.config.spatial * g.config.spatial;
    std::vector<double> features;
    features.reserve(static_cast<std::size_t>(classes) * shots * per);
    LabeledBatch out;
    out.labels.reserve(static_cast<std::size_t>(classes) * shots);
    for (int c = 0; c < classes; ++c) {
        auto fake = g.forward(sample_noise(rng, shots, g.config.z_dim), c);
        const auto data = fake.data();
        features.insert(features.end(), data.begin(), data.end());
        out.labels.insert(out.labels.end(), static_cast<std::size_t>(shots), c);
    }
    out.features = Tensor::from_data({classes * shots, g.config.out_channels, g.config.spatial, g.config.spatial},
                                     std::move(features));
    return out;
}

FinetuneResult novel_finetune(HeadModel student, const HeadModel& teacher, const GeneratorModel* generator,
                              const LabeledBatch& novel_shots, const FisherInfo& fisher, const NovelStage& stage,
                              const LossConfig& losses, Rng& rng, const GradientCombiner& combiner) {
    novel_shots.validate();
    if (!student.trainable()) throw ContractError("finetuning needs a trainable student");
    if (student.config.novel_classes < 1) throw ContractError("student carries no novel class rows");
    if (novel_shots.empty()) throw ContractError("finetuning needs the K-shot novel batch");
    if (!novel_shots.has_targets()) throw ContractError("novel shots carry no regression targets");

    auto teacher_frozen = teacher.frozen_copy();
    const bool replaying = generator != nullptr && stage.replay != ReplayMode::none;
    GeneratorModel gen_frozen;
    if (replaying) gen_frozen = generator->frozen_copy();

    SgdOptimizer opt(stage.opt);
    opt.add_parameters(student.base_parameters(), stage.head_lr_downscale);
    opt.add_parameters(student.novel_parameters());
    auto params = student.parameters();

    FinetuneResult result;
    result.forged_counts.assign(static_cast<std::size_t>(student.config.base_classes), 0);
    const int forge_k = std::max(1, novel_shots.size() / student.config.novel_classes);

    LabeledBatch fixed_forged;
    if (replaying && stage.replay == ReplayMode::fixed) fixed_forged = forge_batch(gen_frozen, forge_k, rng);

    const bool use_ewc = losses.lambda_ewc > 0.0 && !fisher.entries.empty();
    const LabeledBatch empty_batch;

    for (int it = 0; it < stage.iterations; ++it) {
        LabeledBatch forged;
        if (replaying) {
            forged = stage.replay == ReplayMode::fixed ? fixed_forged : forge_batch(gen_frozen, forge_k, rng);
            for (int l : forged.labels) ++result.forged_counts[static_cast<std::size_t>(l)];
        }

        FinetuneRecord rec;
        rec.iteration = it;
        if (!combiner) {
            opt.zero_grad();
            auto total =
                novel_loss(student, teacher_frozen, novel_shots, forged, losses.lambda_f, losses.switches,
                           &rec.losses);
            if (use_ewc) {
                auto penalty = ewc_penalty(student, fisher, losses.lambda_ewc);
                rec.ewc = penalty.value();
                total = add(total, penalty);
            }
            backward(total);
            rec.total = total.value();
            opt.step();
        } else {
            opt.zero_grad();
            KdLossBreakdown novel_bd{};
            auto novel_obj = novel_loss(student, teacher_frozen, novel_shots, empty_batch, losses.lambda_f,
                                        losses.switches, &novel_bd);
            backward(novel_obj);
            auto novel_grads = flatten_grads(params);

            opt.zero_grad();
            Tensor replay_obj;
            KdLossBreakdown replay_bd{};
            if (!forged.empty()) {
                replay_obj = replay_loss(teacher_frozen, student, forged, losses.lambda_f, losses.switches,
                                         &replay_bd);
            }
            if (use_ewc) {
                auto penalty = ewc_penalty(student, fisher, losses.lambda_ewc);
                rec.ewc = penalty.value();
                replay_obj = replay_obj.defined() ? add(replay_obj, penalty) : penalty;
            }
            if (replay_obj.defined() && replay_obj.requires_grad()) backward(replay_obj);
            auto replay_grads = flatten_grads(params);

            std::vector<double> combined(novel_grads.size());
            combiner(replay_grads, novel_grads, combined);
            write_grads(params, combined);

            rec.losses = replay_bd;
            rec.losses.cls_novel_term = novel_bd.cls_novel_term;
            rec.losses.reg_novel_term = novel_bd.reg_novel_term;
            rec.losses.total = novel_bd.total + replay_bd.total;
            rec.total = rec.losses.total + rec.ewc;
            opt.step();
        }
        result.curve.push_back(rec);
    }
    result.student = std::move(student);
    return result;
}

double overall_accuracy(double base_acc, double novel_acc, int base_classes, int novel_classes) {
    if (base_classes < 0 || novel_classes < 0 || base_classes + novel_classes == 0) {
        throw ContractError("class counts must be non-negative and not both zero");
    }
    return (base_classes * base_acc + novel_classes * novel_acc) / (base_classes + novel_classes);
}

std::string format_accuracy(double value) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.1f", value);
    return buf;
}

EvalReport evaluate(const HeadModel& model, const LabeledBatch& base_test, const LabeledBatch& novel_test) {
    base_test.validate();
    novel_test.validate();
    if (base_test.empty()) throw ContractError("base test split is empty");
    if (novel_test.empty()) throw ContractError("novel test split is empty");
    const int total = model.config.total_classes();
    for (const auto* split : {&base_test, &novel_test}) {
        for (int l : split->labels) {
            if (l < 0 || l >= total) throw ContractError("test label " + std::to_string(l) + " out of range");
        }
    }

    auto frozen = model.trainable() ? model.frozen_copy() : model;
    const int r = frozen.config.reg_targets_per_class;

    EvalReport report;
    report.base_classes = frozen.config.base_classes;
    report.novel_classes = frozen.config.novel_classes;
    report.per_class_accuracy.assign(static_cast<std::size_t>(total), 0.0);
    std::vector<int> counts(static_cast<std::size_t>(total), 0);
    std::vector<int> hits(static_cast<std::size_t>(total), 0);

    auto score = [&](const LabeledBatch& split, double& acc_out, double& mae_out) {
        auto out = frozen.forward(split.features);
        const auto logits = out.logits.data();
        int split_hits = 0;
        for (int i = 0; i < split.size(); ++i) {
            const double* row = logits.data() + static_cast<std::ptrdiff_t>(i) * total;
            const int pred = static_cast<int>(std::max_element(row, row + total) - row);
            const int label = split.labels[static_cast<std::size_t>(i)];
            ++counts[static_cast<std::size_t>(label)];
            if (pred == label) {
                ++split_hits;
                ++hits[static_cast<std::size_t>(label)];
            }
        }
        acc_out = static_cast<double>(split_hits) / split.size();
        if (split.has_targets()) {
            auto block = select_class_block(out.reg, split.labels, r);
            const auto pred = block.data();
            const auto want = split.reg_targets.data();
            double err = 0.0;
            for (std::size_t k = 0; k < pred.size(); ++k) err += std::abs(pred[k] - want[k]);
            mae_out = err / static_cast<double>(pred.size());
        }
    };
    score(base_test, report.base_accuracy, report.base_reg_mae);
    score(novel_test, report.novel_accuracy, report.novel_reg_mae);

    for (int c = 0; c < total; ++c) {
        if (counts[static_cast<std::size_t>(c)] > 0) {
            report.per_class_accuracy[static_cast<std::size_t>(c)] =
                static_cast<double>(hits[static_cast<std::size_t>(c)]) / counts[static_cast<std::size_t>(c)];
        }
    }
    report.overall =
        overall_accuracy(report.base_accuracy, report.novel_accuracy, report.base_classes, report.novel_classes);
    return report;
}

std::string EvalReport::to_json_string() const {
    nlohmann::json j;
    j["base_classes"] = base_classes;
    j["novel_classes"] = novel_classes;
    j["base_accuracy"] = base_accuracy;
    j["novel_accuracy"] = novel_accuracy;
    j["overall"] = overall;
    j["per_class_accuracy"] = per_class_accuracy;
    j["base_reg_mae"] = base_reg_mae;
    j["novel_reg_mae"] = novel_reg_mae;
    return j.dump(2) + "\n";
}

void EvalReport::save_json(const std::string& path) const {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw ArtifactError("cannot write report to " + path);
    out << to_json_string();
    if (!out) throw ArtifactError("failed writing report to " + path);
}

void save_finetune_curve_csv(const std::string& path, std::span<const FinetuneRecord> curve) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw ArtifactError("cannot write loss series to " + path);
    out << "iteration,cls_novel,reg_novel,cls_feat,reg_feat,reg_l1,conf,ewc,total\n";
    for (const auto& rec : curve) {
        out << rec.iteration << ',' << fmt(rec.losses.cls_novel_term) << ',' << fmt(rec.losses.reg_novel_term)
            << ',' << fmt(rec.losses.cls_feat_term) << ',' << fmt(rec.losses.reg_feat_term) << ','
            << fmt(rec.losses.reg_l1_term) << ',' << fmt(rec.losses.conf_term) << ',' << fmt(rec.ewc) << ','
            << fmt(rec.total) << '\n';
    }
    if (!out) throw ArtifactError("failed writing loss series to " + path);
}

void save_generator_curve_csv(const std::string& path, std::span<const GenLossBreakdown> curve) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw ArtifactError("cannot write loss series to " + path);
    out << "iteration,kl_term,ce_term,total,mean_class_prob\n";
    for (std::size_t i = 0; i < curve.size(); ++i) {
        const auto& bd = curve[i];
        out << i << ',' << fmt(bd.kl_term) << ',' << fmt(bd.ce_term) << ',' << fmt(bd.total) << ','
            << fmt(bd.mean_class_prob) << '\n';
    }
    if (!out) throw ArtifactError("failed writing loss series to " + path);
}

void EvalReport::save_finetune_csv(const std::string& path) const { save_finetune_curve_csv(path, finetune_curve); }

void EvalReport::save_generator_csv(const std::string& path) const {
    save_generator_curve_csv(path, generator_curve);
}

void dump_pooled_features(const std::string& path, const HeadModel& model, const LabeledBatch& real,
                          const LabeledBatch& forged) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw ArtifactError("cannot write features to " + path);
    auto frozen = model.trainable() ? model.frozen_copy() : model;
    const int d = frozen.config.pooled_dim();
    out << "label,source";
    for (int i = 0; i < d; ++i) out << ",f" << i;
    out << '\n';
    auto write = [&](const LabeledBatch& batch, const char* source) {
        if (batch.empty()) return;
        auto pooled = frozen.forward(batch.features).pooled;
        const auto data = pooled.data();
        for (int i = 0; i < batch.size(); ++i) {
            out << batch.labels[static_cast<std::size_t>(i)] << ',' << source;
            for (int k = 0; k < d; ++k) {
                out << ',' << fmt(data[static_cast<std::size_t>(i) * d + static_cast<std::size_t>(k)]);
            }
            out << '\n';
        }
    };
    write(real, "real");
    write(forged, "forged");
    if (!out) throw ArtifactError("failed writing features to " + path);
}

PreparedStages prepare_stages(const ExperimentConfig& cfg) {
    cfg.validate();
    if (cfg.task.novel_classes < 1) {
        throw ContractError("the experiment needs at least one novel class");
    }
    PreparedStages s;
    s.spec = cfg.task_spec();
    auto train = make_synthetic_data(s.spec, Split::base, cfg.data.train_per_class, kTrainStream);
    auto heldout = make_synthetic_data(s.spec, Split::base, cfg.data.heldout_per_class, kHeldoutStream);
    Rng base_rng(Rng(cfg.seed).fork(11).next());
    auto teacher = build_head(cfg.head_config(), base_rng);
    DataWatcher watcher(cfg.watcher, cfg.task.base_classes);
    s.base = base_train(std::move(teacher), train, heldout, std::move(watcher), cfg.base,
                        cfg.losses.fisher_mode, base_rng);
    Rng gen_rng(Rng(cfg.seed).fork(22).next());
    s.gen = train_generator(s.base.snapshot, s.base.teacher, cfg.generator_config(), cfg.generator,
                            cfg.alignment_scale(), gen_rng);
    s.shots = make_synthetic_data(s.spec, Split::novel, cfg.task.shots, kShotStream);
    s.base_test = make_synthetic_data(s.spec, Split::base, cfg.data.test_per_class, kBaseTestStream);
    s.novel_test = make_synthetic_data(s.spec, Split::novel, cfg.data.test_per_class, kNovelTestStream);
    return s;
}

EvalReport finetune_and_evaluate(const PreparedStages& s, const ExperimentConfig& cfg, ReplayMode replay,
                                 const LossSwitches& switches, double lambda_ewc,
                                 FinetuneResult* finetune_out) {
    Rng expand_rng(Rng(cfg.seed).fork(44).next());
    auto student = s.base.teacher.expanded_copy(cfg.task.novel_classes, expand_rng);
    NovelStage stage = cfg.novel;
    stage.replay = replay;
    LossConfig losses = cfg.losses;
    losses.switches = switches;
    losses.lambda_ewc = lambda_ewc;
    Rng ft_rng(Rng(cfg.seed).fork(33).next());
    auto ft = novel_finetune(std::move(student), s.base.teacher,
                             replay == ReplayMode::none ? nullptr : &s.gen.generator, s.shots, s.base.fisher,
                             stage, losses, ft_rng);
    auto report = evaluate(ft.student, s.base_test, s.novel_test);
    report.generator_curve = s.gen.curve;
    report.finetune_curve = ft.curve;
    if (finetune_out) *finetune_out = std::move(ft);
    return report;
}

ExperimentResult run_experiment(const ExperimentConfig& cfg) {
    auto stages = prepare_stages(cfg);
    ExperimentResult result;
    result.report = finetune_and_evaluate(stages, cfg, cfg.novel.replay, cfg.losses.switches,
                                          cfg.losses.lambda_ewc, &result.finetune);
    result.base = std::move(stages.base);
    result.gen = std::move(stages.gen);
    return result;
}

std::vector<AblationRow> ablation_grid(const ExperimentConfig& cfg) {
    std::vector<AblationRow> rows;
    for (int conf = 1; conf >= 0; --conf) {
        for (int feat = 1; feat >= 0; --feat) {
            for (int l1 = 1; l1 >= 0; --l1) {
                AblationRow row;
                row.switches = LossSwitches{conf != 0, feat != 0, l1 != 0};
                row.replay = cfg.novel.replay == ReplayMode::none ? ReplayMode::fresh : cfg.novel.replay;
                row.lambda_ewc = cfg.losses.lambda_ewc;
                row.label = std::string("conf=") + (conf ? "on" : "off") + ",feat=" + (feat ? "on" : "off") +
                            ",l1=" + (l1 ? "on" : "off");
                rows.push_back(std::move(row));
            }
        }
    }
    return rows;
}

std::vector<AblationRow> run_ablation(const ExperimentConfig& cfg) {
    auto stages = prepare_stages(cfg);
    auto rows = ablation_grid(cfg);
    for (auto& row : rows) {
        row.report = finetune_and_evaluate(stages, cfg, row.replay, row.switches, row.lambda_ewc);
    }
    return rows;
}

std::vector<AblationRow> run_component_analysis(const ExperimentConfig& cfg) {
    auto stages = prepare_stages(cfg);
    struct Step {
        const char* label;
        ReplayMode replay;
        LossSwitches switches;
        bool ewc;
    };
    const Step steps[] = {
        {"A_plain_finetune", ReplayMode::none, {false, false, false}, false},
        {"B_feature_distill", ReplayMode::fresh, {false, true, false}, false},
        {"C_plus_confidence", ReplayMode::fresh, {true, true, false}, false},
        {"D_plus_l1", ReplayMode::fresh, {true, true, true}, false},
        {"E_plus_anchoring", ReplayMode::fresh, {true, true, true}, true},
    };
    std::vector<AblationRow> rows;
    for (const auto& step : steps) {
        AblationRow row;
        row.label = step.label;
        row.replay = step.replay;
        row.switches = step.switches;
        row.lambda_ewc = step.ewc ? cfg.losses.lambda_ewc : 0.0;
        row.report = finetune_and_evaluate(stages, cfg, row.replay, row.switches, row.lambda_ewc);
        rows.push_back(std::move(row));
    }
    return rows;
}

void save_ablation_csv(const std::string& path, const std::vector<AblationRow>& rows) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw ArtifactError("cannot write ablation table to " + path);
    out << "label,replay,confidence,feature_distill,l1_distill,lambda_ewc,base_accuracy,novel_accuracy,overall,"
           "base_reg_mae,novel_reg_mae\n";
    for (const auto& row : rows) {
        out << row.label << ',' << replay_mode_name(row.replay) << ',' << (row.switches.conf ? 1 : 0) << ','
            << (row.switches.feat_distill ? 1 : 0) << ',' << (row.switches.l1_distill ? 1 : 0) << ','
            << fmt(row.lambda_ewc) << ',' << fmt(row.report.base_accuracy) << ','
            << fmt(row.report.novel_accuracy) << ',' << fmt(row.report.overall) << ','
            << fmt(row.report.base_reg_mae) << ',' << fmt(row.report.novel_reg_mae) << '\n';
    }
    if (!out) throw ArtifactError("failed writing ablation table to " + path);
}

}  // namespace niff
