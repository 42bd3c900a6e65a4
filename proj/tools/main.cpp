#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>

#include "niff/batch.hpp"
#include "niff/config.hpp"
#include "niff/errors.hpp"
#include "niff/manifest.hpp"
#include "niff/models.hpp"
#include "niff/pipeline.hpp"
#include "niff/rng.hpp"

namespace {

using namespace niff;

// Stable artifact names within a run directory. The manifest stores these
// same strings as entry names (minus the extension), so stages find their
// inputs by slot rather than by guessing paths.
constexpr const char* kConfigFile = "config.json";
constexpr const char* kBaseDataFile = "base_data.bin";
constexpr const char* kTeacherFile = "teacher.ckpt";
constexpr const char* kStatsFile = "stats.bin";
constexpr const char* kFisherFile = "fisher.bin";
constexpr const char* kGeneratorFile = "generator.ckpt";
constexpr const char* kGeneratorCurveFile = "generator_curve.csv";
constexpr const char* kStudentFile = "student.ckpt";
constexpr const char* kFinetuneCurveFile = "finetune_curve.csv";
constexpr const char* kReportFile = "report.json";
constexpr const char* kAblationFile = "ablation.csv";
constexpr const char* kComponentsFile = "components.csv";
constexpr const char* kFeaturesFile = "features.csv";
constexpr const char* kManifestFile = "manifest.json";

std::string file_path(const std::string& dir, const char* name) { return dir + "/" + name; }

struct CommonOpts {
    std::string config_path;
    std::string out_dir;
    std::optional<std::uint64_t> seed;
    std::string scale = "desk";
    bool data_free = false;
};

ExperimentConfig template_config(const std::string& scale) {
    if (scale == "desk") return ExperimentConfig::desk_default();
    if (scale == "full") return ExperimentConfig::full_scale();
    throw ConfigError("scale", "must be one of desk, full");
}

/// Config for a stage that starts a fresh run directory: from --config when
/// given, else the --scale template; --seed overrides either way.
ExperimentConfig resolve_config(const CommonOpts& opts) {
    ExperimentConfig cfg =
        opts.config_path.empty() ? template_config(opts.scale) : ExperimentConfig::load(opts.config_path);
    if (opts.seed) cfg.seed = *opts.seed;
    cfg.validate();
    return cfg;
}

RunManifest load_run(const std::string& dir) {
    auto manifest = RunManifest::load(file_path(dir, kManifestFile));
    if (manifest.version != kSoftwareVersion) {
        throw ArtifactError("run directory " + dir + " was written by version " + manifest.version +
                            "; this binary is " + std::string(kSoftwareVersion) +
                            " and will not mix artifacts across versions");
    }
    return manifest;
}

ExperimentConfig run_config(const RunManifest& manifest, const std::string& dir) {
    return ExperimentConfig::load(manifest.verified_path("config", dir));
}

void save_run(const RunManifest& manifest, const std::string& dir) {
    manifest.save(file_path(dir, kManifestFile));
}

RunManifest cmd_base_train(const CommonOpts& opts) {
    auto cfg = resolve_config(opts);
    std::filesystem::create_directories(opts.out_dir);
    cfg.save(file_path(opts.out_dir, kConfigFile));

    RunManifest manifest;
    manifest.config_hash = sha256_file(file_path(opts.out_dir, kConfigFile));
    manifest.seeds = {cfg.seed};
    manifest.created_at = utc_timestamp();
    manifest.add_artifact("config", opts.out_dir, kConfigFile);

    const auto spec = cfg.task_spec();
    auto train = make_synthetic_data(spec, Split::base, cfg.data.train_per_class, kTrainStream);
    auto heldout = make_synthetic_data(spec, Split::base, cfg.data.heldout_per_class, kHeldoutStream);
    if (!opts.data_free) {
        save_batch(file_path(opts.out_dir, kBaseDataFile), train);
        manifest.add_artifact("base_data", opts.out_dir, kBaseDataFile);
    }

    Rng rng(Rng(cfg.seed).fork(11).next());
    auto teacher = build_head(cfg.head_config(), rng);
    DataWatcher watcher(cfg.watcher, cfg.task.base_classes);
    auto result = base_train(std::move(teacher), train, heldout, std::move(watcher), cfg.base,
                             cfg.losses.fisher_mode, rng);

    save_checkpoint(result.teacher, file_path(opts.out_dir, kTeacherFile));
    result.snapshot.save_binary(file_path(opts.out_dir, kStatsFile));
    result.fisher.save(file_path(opts.out_dir, kFisherFile));
    manifest.add_artifact("teacher_checkpoint", opts.out_dir, kTeacherFile);
    manifest.add_artifact("stats_snapshot", opts.out_dir, kStatsFile);
    manifest.add_artifact("fisher", opts.out_dir, kFisherFile);
    save_run(manifest, opts.out_dir);

    std::printf("base training: %.3f held-out accuracy after %d epochs%s\n", result.heldout_accuracy,
                result.epochs_run, opts.data_free ? " (base data not persisted)" : "");
    return manifest;
}

void cmd_train_generator(const std::string& dir) {
    auto manifest = load_run(dir);
    auto cfg = run_config(manifest, dir);
    auto snapshot = StatsSnapshot::load_binary(manifest.verified_path("stats_snapshot", dir));
    auto teacher = load_head_checkpoint(manifest.verified_path("teacher_checkpoint", dir), false);

    Rng rng(Rng(cfg.seed).fork(22).next());
    auto result = train_generator(snapshot, teacher, cfg.generator_config(), cfg.generator,
                                  cfg.alignment_scale(), rng);

    save_checkpoint(result.generator, file_path(dir, kGeneratorFile));
    save_generator_curve_csv(file_path(dir, kGeneratorCurveFile), result.curve);
    manifest.add_artifact("generator_checkpoint", dir, kGeneratorFile);
    manifest.add_artifact("generator_curve", dir, kGeneratorCurveFile);
    save_run(manifest, dir);

    const double kl0 = result.curve.front().kl_term;
    const double klN = result.curve.back().kl_term;
    std::printf("generator: alignment %.4g -> %.4g over %zu iterations, mean forged class probability %.3f\n",
                kl0, klN, result.curve.size(), result.forged_class_prob);
    if (klN * 10.0 > kl0) {
        std::printf("warning: alignment loss fell less than 10x; consider more generator_train.iterations\n");
    }
}

void cmd_finetune(const std::string& dir) {
    auto manifest = load_run(dir);
    auto cfg = run_config(manifest, dir);
    auto teacher = load_head_checkpoint(manifest.verified_path("teacher_checkpoint", dir), false);
    auto fisher = FisherInfo::load(manifest.verified_path("fisher", dir));

    std::optional<GeneratorModel> generator;
    if (cfg.novel.replay != ReplayMode::none) {
        generator = load_generator_checkpoint(manifest.verified_path("generator_checkpoint", dir), false);
    }

    const auto spec = cfg.task_spec();
    auto shots = make_synthetic_data(spec, Split::novel, cfg.task.shots, kShotStream);

    Rng expand_rng(Rng(cfg.seed).fork(44).next());
    auto student = teacher.expanded_copy(cfg.task.novel_classes, expand_rng);
    Rng ft_rng(Rng(cfg.seed).fork(33).next());
    auto result = novel_finetune(std::move(student), teacher, generator ? &*generator : nullptr, shots, fisher,
                                 cfg.novel, cfg.losses, ft_rng);

    save_checkpoint(result.student, file_path(dir, kStudentFile));
    save_finetune_curve_csv(file_path(dir, kFinetuneCurveFile), result.curve);
    manifest.add_artifact("student_checkpoint", dir, kStudentFile);
    manifest.add_artifact("finetune_curve", dir, kFinetuneCurveFile);
    save_run(manifest, dir);

    std::printf("finetune: %zu iterations, %s replay\n", result.curve.size(),
                replay_mode_name(cfg.novel.replay).c_str());
}

void cmd_evaluate(const std::string& dir) {
    auto manifest = load_run(dir);
    auto cfg = run_config(manifest, dir);
    auto student = load_head_checkpoint(manifest.verified_path("student_checkpoint", dir), false);

    const auto spec = cfg.task_spec();
    auto base_test = make_synthetic_data(spec, Split::base, cfg.data.test_per_class, kBaseTestStream);
    auto novel_test = make_synthetic_data(spec, Split::novel, cfg.data.test_per_class, kNovelTestStream);

    auto report = evaluate(student, base_test, novel_test);
    report.save_json(file_path(dir, kReportFile));
    manifest.add_artifact("report", dir, kReportFile);
    save_run(manifest, dir);

    std::printf("base %s  novel %s  overall %s\n", format_accuracy(100.0 * report.base_accuracy).c_str(),
                format_accuracy(100.0 * report.novel_accuracy).c_str(),
                format_accuracy(100.0 * report.overall).c_str());
}

void cmd_run(const CommonOpts& opts) {
    cmd_base_train(opts);
    cmd_train_generator(opts.out_dir);
    cmd_finetune(opts.out_dir);
    cmd_evaluate(opts.out_dir);
}

void cmd_ablate(const CommonOpts& opts, int threads, bool components) {
    auto cfg = resolve_config(opts);
    std::filesystem::create_directories(opts.out_dir);

    auto stages = prepare_stages(cfg);
    auto rows = ablation_grid(cfg);
    if (threads <= 1) {
        for (auto& row : rows) {
            row.report = finetune_and_evaluate(stages, cfg, row.replay, row.switches, row.lambda_ewc);
        }
    } else {
        // Rows share the frozen teacher and generator read-only; each arm
        // builds its own student, so they are independent.
        std::vector<std::thread> pool;
        for (int t = 0; t < threads && t < static_cast<int>(rows.size()); ++t) {
            pool.emplace_back([&rows, &stages, &cfg, t, threads] {
                for (std::size_t i = static_cast<std::size_t>(t); i < rows.size();
                     i += static_cast<std::size_t>(threads)) {
                    rows[i].report =
                        finetune_and_evaluate(stages, cfg, rows[i].replay, rows[i].switches, rows[i].lambda_ewc);
                }
            });
        }
        for (auto& worker : pool) worker.join();
    }
    save_ablation_csv(file_path(opts.out_dir, kAblationFile), rows);
    std::printf("ablation: %zu rows -> %s\n", rows.size(), file_path(opts.out_dir, kAblationFile).c_str());

    if (components) {
        auto steps = run_component_analysis(cfg);
        save_ablation_csv(file_path(opts.out_dir, kComponentsFile), steps);
        std::printf("components: %zu rows -> %s\n", steps.size(),
                    file_path(opts.out_dir, kComponentsFile).c_str());
    }
}

void cmd_dump_features(const std::string& dir, int per_class) {
    auto manifest = load_run(dir);
    auto cfg = run_config(manifest, dir);
    auto teacher = load_head_checkpoint(manifest.verified_path("teacher_checkpoint", dir), false);
    auto generator = load_generator_checkpoint(manifest.verified_path("generator_checkpoint", dir), false);

    const auto spec = cfg.task_spec();
    auto real = make_synthetic_data(spec, Split::base, per_class, kHeldoutStream);
    Rng rng(Rng(cfg.seed).fork(55).next());
    auto forged = forge_batch(generator, per_class, rng);

    dump_pooled_features(file_path(dir, kFeaturesFile), teacher, real, forged);
    manifest.add_artifact("features", dir, kFeaturesFile);
    save_run(manifest, dir);
    std::printf("features: %d real + %d forged per class -> %s\n", per_class, per_class,
                file_path(dir, kFeaturesFile).c_str());
}

void cmd_verify(const std::string& dir) {
    auto manifest = load_run(dir);
    manifest.verify(dir);
    std::printf("%zu artifacts verified in %s\n", manifest.artifacts.size(), dir.c_str());
}

void cmd_init_config(const std::string& path, const std::string& scale, std::optional<std::uint64_t> seed) {
    auto cfg = template_config(scale);
    if (seed) cfg.seed = *seed;
    cfg.save(path);
    std::printf("wrote %s\n", path.c_str());
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{
        "niff: data-free feature replay experiments.\n"
        "Trains a multi-class head on synthetic features, records per-class\n"
        "statistics, fits a feature generator to them, and finetunes on novel\n"
        "classes with forged replay. Exit codes: 0 success, 2 config error,\n"
        "3 training failure, 4 missing or tampered artifact."};
    app.require_subcommand(1);

    CommonOpts opts;
    int threads = 1;
    bool components = false;
    int per_class = 32;
    std::string config_out = kConfigFile;

    auto add_config = [&](CLI::App* sub) {
        sub->add_option("--config", opts.config_path, "Experiment config JSON; defaults to the --scale template");
        sub->add_option("--seed", opts.seed, "Override the config's seed");
        sub->add_option("--scale", opts.scale, "Config template when no --config is given")
            ->check(CLI::IsMember({"desk", "full"}));
    };
    auto add_out = [&](CLI::App* sub) {
        sub->add_option("--out", opts.out_dir, "Run directory for artifacts")->required();
    };

    auto* init = app.add_subcommand("init-config", "Write a template config file");
    init->add_option("--out", config_out, "Output path");
    init->add_option("--scale", opts.scale, "Template: desk or full")
        ->check(CLI::IsMember({"desk", "full"}));
    init->add_option("--seed", opts.seed, "Seed to store in the config");
    init->callback([&] { cmd_init_config(config_out, opts.scale, opts.seed); });

    auto* base = app.add_subcommand("base-train", "Train the base head; record statistics and importance");
    add_config(base);
    add_out(base);
    base->add_flag("--data-free", opts.data_free, "Never persist base training data to disk");
    base->callback([&] { cmd_base_train(opts); });

    auto* gen = app.add_subcommand("train-generator", "Fit the feature generator to the recorded statistics");
    add_out(gen);
    gen->callback([&] { cmd_train_generator(opts.out_dir); });

    auto* ft = app.add_subcommand("finetune", "Finetune on novel shots with forged replay");
    add_out(ft);
    ft->callback([&] { cmd_finetune(opts.out_dir); });

    auto* ev = app.add_subcommand("evaluate", "Score the finetuned student on base and novel test sets");
    add_out(ev);
    ev->callback([&] { cmd_evaluate(opts.out_dir); });

    auto* run = app.add_subcommand("run", "All stages: base-train, train-generator, finetune, evaluate");
    add_config(run);
    add_out(run);
    run->add_flag("--data-free", opts.data_free, "Never persist base training data to disk");
    run->callback([&] { cmd_run(opts); });

    auto* ab = app.add_subcommand("ablate", "Replay-loss switch matrix, one CSV row per combination");
    add_config(ab);
    add_out(ab);
    ab->add_option("--threads", threads, "Worker threads for the arms")->check(CLI::PositiveNumber);
    ab->add_flag("--components", components, "Also write the loss build-up table");
    ab->callback([&] { cmd_ablate(opts, threads, components); });

    auto* dump = app.add_subcommand("dump-features", "Write real and forged pooled features as CSV");
    add_out(dump);
    dump->add_option("--per-class", per_class, "Instances per class")->check(CLI::PositiveNumber);
    dump->callback([&] { cmd_dump_features(opts.out_dir, per_class); });

    auto* ver = app.add_subcommand("verify", "Re-hash every artifact in a run directory");
    add_out(ver);
    ver->callback([&] { cmd_verify(opts.out_dir); });

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    } catch (const niff::ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const niff::TrainingError& e) {
        std::cerr << "training error: " << e.what() << "\n";
        return 3;
    } catch (const niff::ArtifactError& e) {
        std::cerr << "artifact error: " << e.what() << "\n";
        return 4;
    } catch (const niff::ContractError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
