#include "niff/synthetic.hpp"

#include <cmath>
#include <numeric>
#include <string>

#include "niff/tensor.hpp"

namespace niff {

std::vector<double> ClassMixture::mixture_mean() const {
    std::vector<double> mean(component_means.empty() ? 0 : component_means[0].size(), 0.0);
    for (std::size_t j = 0; j < component_means.size(); ++j) {
        for (std::size_t ch = 0; ch < mean.size(); ++ch) {
            mean[ch] += mixing_weights[j] * component_means[j][ch];
        }
    }
    return mean;
}

std::vector<int> SyntheticTaskSpec::split_classes(Split split) const {
    std::vector<int> ids;
    const int lo = split == Split::base ? 0 : base_classes;
    const int hi = split == Split::base ? base_classes : total_classes();
    for (int c = lo; c < hi; ++c) ids.push_back(c);
    return ids;
}

std::vector<double> SyntheticTaskSpec::class_target(int class_id) const {
    if (class_id < 0 || class_id >= total_classes()) {
        throw ContractError("class " + std::to_string(class_id) + " outside the task");
    }
    const auto mean = mixtures[static_cast<std::size_t>(class_id)].mixture_mean();
    std::vector<double> target(static_cast<std::size_t>(reg_targets));
    for (int t = 0; t < reg_targets; ++t) {
        double v = reg_bias[static_cast<std::size_t>(t)];
        for (int ch = 0; ch < channels; ++ch) {
            v += reg_map[static_cast<std::size_t>(t)][static_cast<std::size_t>(ch)] *
                 mean[static_cast<std::size_t>(ch)];
        }
        target[static_cast<std::size_t>(t)] = v;
    }
    return target;
}

void SyntheticTaskSpec::validate() const {
    if (base_classes < 1) throw ConfigError("task.base_classes", "need at least one base class");
    if (novel_classes < 0) throw ConfigError("task.novel_classes", "must be non-negative");
    if (channels < 1 || spatial < 1) throw ConfigError("task.feature_shape", "channels and spatial must be positive");
    if (shots < 1) throw ConfigError("task.shots", "K must be at least 1");
    if (reg_targets < 1) throw ConfigError("task.reg_targets", "must be positive");
    if (reg_noise < 0.0) throw ConfigError("task.reg_noise", "must be non-negative");
    if (static_cast<int>(mixtures.size()) != total_classes()) {
        throw ConfigError("task.mixtures", "need one mixture per class, got " + std::to_string(mixtures.size()));
    }
    for (std::size_t c = 0; c < mixtures.size(); ++c) {
        const auto& m = mixtures[c];
        const std::string where = "task.mixtures[" + std::to_string(c) + "]";
        if (m.component_means.empty()) throw ConfigError(where, "mixture has no components");
        if (m.component_scales.size() != m.component_means.size() ||
            m.mixing_weights.size() != m.component_means.size()) {
            throw ConfigError(where, "component fields disagree on count");
        }
        double weight_sum = 0.0;
        for (double w : m.mixing_weights) {
            if (w < 0.0) throw ConfigError(where, "mixing weights must be non-negative");
            weight_sum += w;
        }
        if (std::abs(weight_sum - 1.0) > 1e-9) throw ConfigError(where, "mixing weights must sum to 1");
        for (double s : m.component_scales) {
            if (s <= 0.0) throw ConfigError(where, "component scales must be positive");
        }
        for (const auto& mean : m.component_means) {
            if (static_cast<int>(mean.size()) != channels) {
                throw ConfigError(where, "component mean dimension != channels");
            }
        }
    }
    for (std::size_t a = 0; a < mixtures.size(); ++a) {
        const auto ma = mixtures[a].mixture_mean();
        for (std::size_t b = a + 1; b < mixtures.size(); ++b) {
            const auto mb = mixtures[b].mixture_mean();
            double dist2 = 0.0;
            for (int ch = 0; ch < channels; ++ch) {
                const double d = ma[static_cast<std::size_t>(ch)] - mb[static_cast<std::size_t>(ch)];
                dist2 += d * d;
            }
            if (dist2 <= 0.0) {
                throw ConfigError("task.mixtures", "classes " + std::to_string(a) + " and " + std::to_string(b) +
                                                       " share the same mixture mean");
            }
        }
    }
    if (static_cast<int>(reg_map.size()) != reg_targets ||
        static_cast<int>(reg_bias.size()) != reg_targets) {
        throw ConfigError("task.reg_map", "need one row and bias per regression target");
    }
    for (const auto& row : reg_map) {
        if (static_cast<int>(row.size()) != channels) {
            throw ConfigError("task.reg_map", "row dimension != channels");
        }
    }
}

SyntheticTaskSpec default_task_spec(int base_classes, int novel_classes, int channels, int spatial, int shots,
                                    std::uint64_t seed) {
    SyntheticTaskSpec spec;
    spec.base_classes = base_classes;
    spec.novel_classes = novel_classes;
    spec.channels = channels;
    spec.spatial = spatial;
    spec.shots = shots;
    spec.seed = seed;

    // Class means live in the positive orthant with a shared offset so the
    // relu trunk keeps them visible, and spread wide relative to the noise
    // so the separability precondition of base training holds.
    Rng rng(Rng(seed).fork(0xD157).next());
    spec.mixtures.resize(static_cast<std::size_t>(spec.total_classes()));
    for (auto& mixture : spec.mixtures) {
        const int components = 2;
        mixture.component_means.resize(components);
        mixture.component_scales.assign(components, 0.0);
        mixture.mixing_weights.assign(components, 1.0 / components);
        std::vector<double> anchor(static_cast<std::size_t>(channels));
        for (double& v : anchor) v = 1.0 + 0.9 * std::abs(rng.normal(0.0, 1.0));
        for (int j = 0; j < components; ++j) {
            auto& mean = mixture.component_means[static_cast<std::size_t>(j)];
            mean.resize(static_cast<std::size_t>(channels));
            for (int ch = 0; ch < channels; ++ch) {
                mean[static_cast<std::size_t>(ch)] = anchor[static_cast<std::size_t>(ch)] + rng.normal(0.0, 0.15);
            }
            mixture.component_scales[static_cast<std::size_t>(j)] = 0.45 + 0.1 * j;
        }
    }

    spec.reg_map.resize(static_cast<std::size_t>(spec.reg_targets));
    spec.reg_bias.assign(static_cast<std::size_t>(spec.reg_targets), 0.0);
    for (auto& row : spec.reg_map) {
        row.resize(static_cast<std::size_t>(channels));
        for (double& v : row) v = rng.normal(0.0, 1.0) / std::sqrt(static_cast<double>(channels));
    }
    spec.validate();
    return spec;
}

LabeledBatch make_synthetic_data(const SyntheticTaskSpec& spec, Split split, int n_per_class,
                                 std::uint64_t stream) {
    spec.validate();
    if (n_per_class < 1) throw ContractError("n_per_class must be positive");
    const auto classes = spec.split_classes(split);
    if (classes.empty()) throw ContractError("split holds no classes");

    const int hw = spec.spatial * spec.spatial;
    const int per_instance = spec.channels * hw;
    const int total = n_per_class * static_cast<int>(classes.size());

    LabeledBatch batch;
    std::vector<double> features(static_cast<std::size_t>(total) * per_instance);
    std::vector<double> targets(static_cast<std::size_t>(total) * spec.reg_targets);
    batch.labels.resize(static_cast<std::size_t>(total));

    int row = 0;
    for (int c : classes) {
        // One stream per (class, purpose): reproducible, and draws for one
        // class never shift when another class's count changes.
        Rng rng(Rng(spec.seed).fork(0x5EED0000u + static_cast<std::uint64_t>(c) * 977 + stream).next());
        const auto& mixture = spec.mixtures[static_cast<std::size_t>(c)];
        const auto target_mean = spec.class_target(c);
        for (int i = 0; i < n_per_class; ++i, ++row) {
            double pick = rng.uniform(0.0, 1.0);
            std::size_t comp = 0;
            for (; comp + 1 < mixture.mixing_weights.size(); ++comp) {
                pick -= mixture.mixing_weights[comp];
                if (pick < 0.0) break;
            }
            const auto& mean = mixture.component_means[comp];
            const double scale = mixture.component_scales[comp];
            double* dst = features.data() + static_cast<std::ptrdiff_t>(row) * per_instance;
            for (int ch = 0; ch < spec.channels; ++ch) {
                const double mu = mean[static_cast<std::size_t>(ch)];
                for (int s = 0; s < hw; ++s) *dst++ = mu + scale * rng.normal(0.0, 1.0);
            }
            batch.labels[static_cast<std::size_t>(row)] = c;
            double* t = targets.data() + static_cast<std::ptrdiff_t>(row) * spec.reg_targets;
            for (int k = 0; k < spec.reg_targets; ++k) {
                t[k] = target_mean[static_cast<std::size_t>(k)] + spec.reg_noise * rng.normal(0.0, 1.0);
            }
        }
    }
    batch.features = Tensor::from_data({total, spec.channels, spec.spatial, spec.spatial}, std::move(features));
    batch.reg_targets = Tensor::from_data({total, spec.reg_targets}, std::move(targets));
    return batch;
}

}  // namespace niff
