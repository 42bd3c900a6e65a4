#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "niff/errors.hpp"
#include "niff/tensor.hpp"

namespace niff {

/// Streaming first and second moments of a vector-valued signal. Stores the
/// sum of squared deviations internally so single-sample updates and pairwise
/// merges share one exact representation; variance() applies the Bessel
/// correction.
struct ClassMoments {
    std::uint64_t count = 0;
    std::vector<double> mean;
    std::vector<double> m2;

    void observe(std::span<const double> x);
    int dim() const { return static_cast<int>(mean.size()); }
    std::vector<double> variance() const;  // InsufficientDataError when count < 2

    static ClassMoments from_stats(std::uint64_t count, std::vector<double> mean, std::vector<double> variance);
};

/// Combines two accumulators as if their streams had been observed jointly.
ClassMoments merge_stats(const ClassMoments& a, const ClassMoments& b);

/// Spatial mean per channel for one instance laid out [C, spatial].
std::vector<double> pool_instance(std::span<const double> chw, int channels, std::int64_t spatial);

struct WatcherConfig {
    bool pre_norm = true;
    bool post_act = true;
    bool softmax_sites = true;
    bool class_agnostic = false;
    bool kl_include_post_softmax = true;

    void validate() const;
};

struct ClassStats {
    std::uint64_t count = 0;
    std::vector<double> mean;
    std::vector<double> variance;
};

struct SiteStats {
    std::string site_id;
    int dim = 0;
    std::vector<ClassStats> classes;
};

/// Frozen per-site, per-class statistics; the only thing the generator ever
/// sees about the original data.
class StatsSnapshot {
public:
    int num_class_slots = 0;
    std::vector<SiteStats> sites;

    bool has_site(std::string_view site_id) const;
    const SiteStats& site(std::string_view site_id) const;  // ArtifactError when absent
    std::vector<std::string> site_ids() const;

    void save_binary(const std::string& path) const;
    static StatsSnapshot load_binary(const std::string& path);
    void save_json(const std::string& path) const;
    static StatsSnapshot load_json(const std::string& path);
};

/// Accumulates activation statistics at named probe sites during forward
/// passes. Rank-4 activations are pooled per channel first; rank-2 rows pass
/// through unchanged. Site ids follow the head's naming: pre_norm_<i>,
/// post_act_<i>, pre_softmax, post_softmax.
class DataWatcher {
public:
    DataWatcher(WatcherConfig config, int num_classes);

    const WatcherConfig& config() const { return config_; }
    int num_classes() const { return num_classes_; }
    int slot_count() const { return config_.class_agnostic ? 1 : num_classes_; }

    /// Whether this watcher's config takes statistics at the given site.
    bool wants(std::string_view site_id) const;

    /// Ignores sites the config excludes. Labels are required per sample even
    /// in class-agnostic mode so call sites stay uniform.
    void observe(const std::string& site_id, const Tensor& activations, std::span<const int> labels);

    const ClassMoments& moments(std::string_view site_id, int class_slot) const;
    std::vector<std::string> site_ids() const;

    /// Folds another watcher's accumulators into this one (shard combine).
    void merge_from(const DataWatcher& other);

    /// InsufficientDataError naming the first site and class slot with fewer
    /// than two observations.
    StatsSnapshot snapshot() const;

private:
    struct Site {
        std::string id;
        std::vector<ClassMoments> slots;
    };

    Site& site_slot(const std::string& site_id);
    const Site* find_site(std::string_view site_id) const;

    WatcherConfig config_;
    int num_classes_;
    std::vector<Site> sites_;  // insertion order
};

}  // namespace niff
