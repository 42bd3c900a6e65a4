#include "niff/config.hpp"

#include <cmath>
#include <fstream>
#include <set>

#include <json.hpp>

namespace niff {

using nlohmann::json;

int GeneratorStage::per_class(int base_classes) const {
    const int n = static_cast<int>(std::lround(static_cast<double>(feature_batch) / base_classes));
    return std::max(2, n);
}

std::string replay_mode_name(ReplayMode mode) {
    switch (mode) {
        case ReplayMode::fresh: return "fresh";
        case ReplayMode::fixed: return "fixed";
        case ReplayMode::none: return "none";
    }
    throw ContractError("unknown replay mode");
}

ReplayMode replay_mode_from_name(const std::string& name) {
    if (name == "fresh") return ReplayMode::fresh;
    if (name == "fixed") return ReplayMode::fixed;
    if (name == "none") return ReplayMode::none;
    throw ConfigError("novel.replay", "must be fresh, fixed, or none; got '" + name + "'");
}

void ExperimentConfig::validate() const {
    if (task.base_classes < 1) throw ConfigError("task.base_classes", "need at least one base class");
    if (task.novel_classes < 0) throw ConfigError("task.novel_classes", "must be non-negative");
    if (task.channels < 1) throw ConfigError("task.channels", "must be positive");
    if (task.spatial < 1) throw ConfigError("task.spatial", "must be positive");
    if (task.shots < 1) throw ConfigError("task.shots", "K must be at least 1");
    if (data.train_per_class < 2) throw ConfigError("data.train_per_class", "need at least 2 per class");
    if (data.heldout_per_class < 1) throw ConfigError("data.heldout_per_class", "must be positive");
    if (data.test_per_class < 1) throw ConfigError("data.test_per_class", "must be positive");
    if (head_blocks.empty()) throw ConfigError("head.blocks", "must name at least one block");
    for (int c : head_blocks) {
        if (c < 1) throw ConfigError("head.blocks", "channel counts must be positive");
    }
    if (gen_z_dim < 1) throw ConfigError("generator.z_dim", "must be positive");
    if (gen_blocks < 0) throw ConfigError("generator.blocks", "must be non-negative");
    if (gen_trunk < 1) throw ConfigError("generator.trunk_channels", "must be positive");
    if (losses.lambda_kl < 0.0) throw ConfigError("losses.lambda_kl", "must be non-negative");
    if (losses.lambda_f < 0.0) throw ConfigError("losses.lambda_f", "must be non-negative");
    if (losses.lambda_ewc < 0.0) throw ConfigError("losses.lambda_ewc", "must be non-negative");
    if (losses.eps <= 0.0) throw ConfigError("losses.eps", "must be positive");
    if (base.max_epochs < 1) throw ConfigError("base.max_epochs", "must be at least 1");
    if (base.min_epochs < 1) throw ConfigError("base.min_epochs", "must be at least 1");
    if (base.min_epochs > base.max_epochs) {
        throw ConfigError("base.min_epochs", "must not exceed base.max_epochs");
    }
    if (base.batch_size < 1) throw ConfigError("base.batch_size", "must be positive");
    if (base.accuracy_bar <= 0.0 || base.accuracy_bar > 1.0) {
        throw ConfigError("base.accuracy_bar", "must lie in (0, 1]");
    }
    if (generator.iterations < 1) throw ConfigError("generator_train.iterations", "must be at least 1");
    if (generator.feature_batch < 2 * task.base_classes) {
        throw ConfigError("generator_train.feature_batch", "needs at least 2 features per base class");
    }
    if (!(generator.clip_norm >= 0.0)) {
        throw ConfigError("generator_train.clip_norm", "must be non-negative (zero disables clipping)");
    }
    if (novel.iterations < 1) throw ConfigError("novel.iterations", "must be at least 1");
    if (novel.head_lr_downscale <= 0.0 || novel.head_lr_downscale > 1.0) {
        throw ConfigError("novel.head_lr_downscale", "must lie in (0, 1]");
    }
    base.opt.validate();
    generator.opt.validate();
    novel.opt.validate();
    watcher.validate();
}

SyntheticTaskSpec ExperimentConfig::task_spec() const {
    return default_task_spec(task.base_classes, task.novel_classes, task.channels, task.spatial, task.shots,
                             seed);
}

HeadConfig ExperimentConfig::head_config() const {
    HeadConfig cfg;
    cfg.in_channels = task.channels;
    cfg.spatial = task.spatial;
    cfg.block_channels = head_blocks;
    cfg.base_classes = task.base_classes;
    cfg.novel_classes = 0;
    return cfg;
}

GeneratorConfig ExperimentConfig::generator_config() const {
    GeneratorConfig cfg;
    cfg.z_dim = gen_z_dim;
    cfg.trunk_channels = gen_trunk;
    cfg.num_blocks = gen_blocks;
    cfg.out_channels = task.channels;
    cfg.spatial = task.spatial;
    cfg.num_classes = task.base_classes;
    return cfg;
}

AlignmentScale ExperimentConfig::alignment_scale() const {
    AlignmentScale scale;
    scale.lambda_kl = losses.lambda_kl;
    scale.eps = losses.eps;
    scale.include_post_softmax = losses.include_post_softmax;
    return scale;
}

namespace {

// Strict readers: a typo in a key or a wrong type must name the exact field.
void expect_keys(const json& j, const std::string& where, const std::set<std::string>& allowed) {
    if (!j.is_object()) throw ConfigError(where, "must be an object");
    for (const auto& [key, value] : j.items()) {
        (void)value;
        if (!allowed.count(key)) throw ConfigError(where + "." + key, "unknown key");
    }
}

template <typename T>
void read(const json& j, const std::string& where, const char* key, T& out) {
    if (!j.contains(key)) return;
    try {
        out = j.at(key).get<T>();
    } catch (const json::exception&) {
        throw ConfigError(where + "." + key, "has the wrong type");
    }
}

void read_sgd(const json& j, const std::string& where, SgdConfig& opt) {
    read(j, where, "learning_rate", opt.learning_rate);
    read(j, where, "momentum", opt.momentum);
    read(j, where, "weight_decay", opt.weight_decay);
}

json sgd_json(const SgdConfig& opt) {
    return json{{"learning_rate", opt.learning_rate}, {"momentum", opt.momentum}, {"weight_decay", opt.weight_decay}};
}

}  // namespace

std::string ExperimentConfig::to_json_string() const {
    json j;
    j["seed"] = seed;
    j["task"] = {{"base_classes", task.base_classes}, {"novel_classes", task.novel_classes},
                 {"channels", task.channels},         {"spatial", task.spatial},
                 {"shots", task.shots}};
    j["data"] = {{"train_per_class", data.train_per_class},
                 {"heldout_per_class", data.heldout_per_class},
                 {"test_per_class", data.test_per_class}};
    j["head"] = {{"blocks", head_blocks}};
    j["generator"] = {{"z_dim", gen_z_dim}, {"blocks", gen_blocks}, {"trunk_channels", gen_trunk}};
    j["watcher"] = {{"pre_norm", watcher.pre_norm},
                    {"post_act", watcher.post_act},
                    {"softmax_sites", watcher.softmax_sites},
                    {"class_agnostic", watcher.class_agnostic}};
    j["losses"] = {{"lambda_kl", losses.lambda_kl},
                   {"lambda_f", losses.lambda_f},
                   {"lambda_ewc", losses.lambda_ewc},
                   {"eps", losses.eps},
                   {"include_post_softmax", losses.include_post_softmax},
                   {"fisher_mode", losses.fisher_mode == FisherMode::per_layer_mean ? "per_layer_mean"
                                                                                    : "full_diagonal"},
                   {"switches", {{"confidence", losses.switches.conf},
                                 {"feature_distill", losses.switches.feat_distill},
                                 {"l1_distill", losses.switches.l1_distill}}}};
    auto base_j = sgd_json(base.opt);
    base_j["max_epochs"] = base.max_epochs;
    base_j["min_epochs"] = base.min_epochs;
    base_j["batch_size"] = base.batch_size;
    base_j["accuracy_bar"] = base.accuracy_bar;
    j["base"] = base_j;
    auto gen_j = sgd_json(generator.opt);
    gen_j["iterations"] = generator.iterations;
    gen_j["feature_batch"] = generator.feature_batch;
    gen_j["clip_norm"] = generator.clip_norm;
    j["generator_train"] = gen_j;
    auto novel_j = sgd_json(novel.opt);
    novel_j["iterations"] = novel.iterations;
    novel_j["head_lr_downscale"] = novel.head_lr_downscale;
    novel_j["replay"] = replay_mode_name(novel.replay);
    j["novel"] = novel_j;
    return j.dump(2) + "\n";
}

ExperimentConfig ExperimentConfig::from_json_string(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw ConfigError("(root)", std::string("not valid JSON: ") + e.what());
    }
    expect_keys(j, "(root)",
                {"seed", "task", "data", "head", "generator", "watcher", "losses", "base", "generator_train",
                 "novel"});
    ExperimentConfig cfg;
    read(j, "(root)", "seed", cfg.seed);
    if (j.contains("task")) {
        const auto& t = j.at("task");
        expect_keys(t, "task", {"base_classes", "novel_classes", "channels", "spatial", "shots"});
        read(t, "task", "base_classes", cfg.task.base_classes);
        read(t, "task", "novel_classes", cfg.task.novel_classes);
        read(t, "task", "channels", cfg.task.channels);
        read(t, "task", "spatial", cfg.task.spatial);
        read(t, "task", "shots", cfg.task.shots);
    }
    if (j.contains("data")) {
        const auto& d = j.at("data");
        expect_keys(d, "data", {"train_per_class", "heldout_per_class", "test_per_class"});
        read(d, "data", "train_per_class", cfg.data.train_per_class);
        read(d, "data", "heldout_per_class", cfg.data.heldout_per_class);
        read(d, "data", "test_per_class", cfg.data.test_per_class);
    }
    if (j.contains("head")) {
        const auto& h = j.at("head");
        expect_keys(h, "head", {"blocks"});
        read(h, "head", "blocks", cfg.head_blocks);
    }
    if (j.contains("generator")) {
        const auto& g = j.at("generator");
        expect_keys(g, "generator", {"z_dim", "blocks", "trunk_channels"});
        read(g, "generator", "z_dim", cfg.gen_z_dim);
        read(g, "generator", "blocks", cfg.gen_blocks);
        read(g, "generator", "trunk_channels", cfg.gen_trunk);
    }
    if (j.contains("watcher")) {
        const auto& w = j.at("watcher");
        expect_keys(w, "watcher", {"pre_norm", "post_act", "softmax_sites", "class_agnostic"});
        read(w, "watcher", "pre_norm", cfg.watcher.pre_norm);
        read(w, "watcher", "post_act", cfg.watcher.post_act);
        read(w, "watcher", "softmax_sites", cfg.watcher.softmax_sites);
        read(w, "watcher", "class_agnostic", cfg.watcher.class_agnostic);
    }
    if (j.contains("losses")) {
        const auto& l = j.at("losses");
        expect_keys(l, "losses",
                    {"lambda_kl", "lambda_f", "lambda_ewc", "eps", "include_post_softmax", "fisher_mode",
                     "switches"});
        read(l, "losses", "lambda_kl", cfg.losses.lambda_kl);
        read(l, "losses", "lambda_f", cfg.losses.lambda_f);
        read(l, "losses", "lambda_ewc", cfg.losses.lambda_ewc);
        read(l, "losses", "eps", cfg.losses.eps);
        read(l, "losses", "include_post_softmax", cfg.losses.include_post_softmax);
        if (l.contains("fisher_mode")) {
            std::string mode;
            read(l, "losses", "fisher_mode", mode);
            if (mode == "per_layer_mean") {
                cfg.losses.fisher_mode = FisherMode::per_layer_mean;
            } else if (mode == "full_diagonal") {
                cfg.losses.fisher_mode = FisherMode::full_diagonal;
            } else {
                throw ConfigError("losses.fisher_mode", "must be per_layer_mean or full_diagonal");
            }
        }
        if (l.contains("switches")) {
            const auto& s = l.at("switches");
            expect_keys(s, "losses.switches", {"confidence", "feature_distill", "l1_distill"});
            read(s, "losses.switches", "confidence", cfg.losses.switches.conf);
            read(s, "losses.switches", "feature_distill", cfg.losses.switches.feat_distill);
            read(s, "losses.switches", "l1_distill", cfg.losses.switches.l1_distill);
        }
    }
    if (j.contains("base")) {
        const auto& b = j.at("base");
        expect_keys(b, "base",
                    {"learning_rate", "momentum", "weight_decay", "max_epochs", "min_epochs", "batch_size",
                     "accuracy_bar"});
        read_sgd(b, "base", cfg.base.opt);
        read(b, "base", "max_epochs", cfg.base.max_epochs);
        read(b, "base", "min_epochs", cfg.base.min_epochs);
        read(b, "base", "batch_size", cfg.base.batch_size);
        read(b, "base", "accuracy_bar", cfg.base.accuracy_bar);
    }
    if (j.contains("generator_train")) {
        const auto& g = j.at("generator_train");
        expect_keys(g, "generator_train",
                    {"learning_rate", "momentum", "weight_decay", "iterations", "feature_batch", "clip_norm"});
        read_sgd(g, "generator_train", cfg.generator.opt);
        read(g, "generator_train", "iterations", cfg.generator.iterations);
        read(g, "generator_train", "feature_batch", cfg.generator.feature_batch);
        read(g, "generator_train", "clip_norm", cfg.generator.clip_norm);
    }
    if (j.contains("novel")) {
        const auto& n = j.at("novel");
        expect_keys(n, "novel",
                    {"learning_rate", "momentum", "weight_decay", "iterations", "head_lr_downscale", "replay"});
        read_sgd(n, "novel", cfg.novel.opt);
        read(n, "novel", "iterations", cfg.novel.iterations);
        read(n, "novel", "head_lr_downscale", cfg.novel.head_lr_downscale);
        if (n.contains("replay")) {
            std::string mode;
            read(n, "novel", "replay", mode);
            cfg.novel.replay = replay_mode_from_name(mode);
        }
    }
    cfg.validate();
    return cfg;
}

void ExperimentConfig::save(const std::string& path) const {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw ArtifactError("cannot write config to " + path);
    out << to_json_string();
    if (!out) throw ArtifactError("failed writing config to " + path);
}

ExperimentConfig ExperimentConfig::load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ArtifactError("cannot read config from " + path);
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return from_json_string(text);
}

ExperimentConfig ExperimentConfig::desk_default() { return ExperimentConfig{}; }

ExperimentConfig ExperimentConfig::full_scale() {
    ExperimentConfig cfg;
    cfg.task.base_classes = 60;
    cfg.task.novel_classes = 20;
    cfg.task.channels = 1024;
    cfg.task.spatial = 7;
    cfg.head_blocks = {1024};
    cfg.gen_z_dim = 100;
    cfg.gen_blocks = 5;
    cfg.gen_trunk = 8;
    cfg.generator.iterations = 2000;
    return cfg;
}

}  // namespace niff
