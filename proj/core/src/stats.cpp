#include "niff/stats.hpp"

#include "niff/serialize.hpp"

#include <json.hpp>

#include <algorithm>
#include <fstream>

namespace niff {

using nlohmann::json;

void ClassMoments::observe(std::span<const double> x) {
    if (count == 0) {
        mean.assign(x.begin(), x.end());
        m2.assign(x.size(), 0.0);
        count = 1;
        return;
    }
    if (x.size() != mean.size()) {
        throw DimensionError("moment update with dimension " + std::to_string(x.size()) + ", accumulator has " +
                             std::to_string(mean.size()));
    }
    count += 1;
    const double inv = 1.0 / static_cast<double>(count);
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double delta = x[i] - mean[i];
        mean[i] += delta * inv;
        m2[i] += delta * (x[i] - mean[i]);
    }
}

std::vector<double> ClassMoments::variance() const {
    if (count < 2) {
        throw InsufficientDataError("variance undefined for " + std::to_string(count) + " observation(s)");
    }
    std::vector<double> v(m2.size());
    const double inv = 1.0 / static_cast<double>(count - 1);
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = m2[i] * inv;
    return v;
}

ClassMoments ClassMoments::from_stats(std::uint64_t count, std::vector<double> mean, std::vector<double> variance) {
    if (mean.size() != variance.size()) {
        throw DimensionError("mean and variance dimensions differ: " + std::to_string(mean.size()) + " vs " +
                             std::to_string(variance.size()));
    }
    ClassMoments m;
    m.count = count;
    m.mean = std::move(mean);
    m.m2 = std::move(variance);
    const double scale = count < 2 ? 0.0 : static_cast<double>(count - 1);
    for (double& v : m.m2) v *= scale;
    return m;
}

ClassMoments merge_stats(const ClassMoments& a, const ClassMoments& b) {
    if (a.count == 0) return b;
    if (b.count == 0) return a;
    if (a.dim() != b.dim()) {
        throw DimensionError("cannot merge moments of dimension " + std::to_string(a.dim()) + " and " +
                             std::to_string(b.dim()));
    }
    ClassMoments out;
    out.count = a.count + b.count;
    const double na = static_cast<double>(a.count);
    const double nb = static_cast<double>(b.count);
    const double n = na + nb;
    out.mean.resize(a.mean.size());
    out.m2.resize(a.mean.size());
    for (std::size_t i = 0; i < a.mean.size(); ++i) {
        const double delta = b.mean[i] - a.mean[i];
        out.mean[i] = (na * a.mean[i] + nb * b.mean[i]) / n;
        out.m2[i] = a.m2[i] + b.m2[i] + delta * delta * na * nb / n;
    }
    return out;
}

std::vector<double> pool_instance(std::span<const double> chw, int channels, std::int64_t spatial) {
    if (channels <= 0 || spatial <= 0 ||
        static_cast<std::int64_t>(chw.size()) != static_cast<std::int64_t>(channels) * spatial) {
        throw DimensionError("pool_instance: " + std::to_string(chw.size()) + " values cannot split into " +
                             std::to_string(channels) + " channels of " + std::to_string(spatial));
    }
    std::vector<double> pooled(static_cast<std::size_t>(channels));
    for (int c = 0; c < channels; ++c) {
        const double* p = chw.data() + static_cast<std::int64_t>(c) * spatial;
        double acc = 0.0;
        for (std::int64_t i = 0; i < spatial; ++i) acc += p[i];
        pooled[static_cast<std::size_t>(c)] = acc / static_cast<double>(spatial);
    }
    return pooled;
}

void WatcherConfig::validate() const {
    if (!pre_norm && !post_act && !softmax_sites) {
        throw ConfigError("watchers", "at least one site family must be enabled");
    }
}

// ---- StatsSnapshot ---------------------------------------------------------

bool StatsSnapshot::has_site(std::string_view site_id) const {
    return std::any_of(sites.begin(), sites.end(), [&](const SiteStats& s) { return s.site_id == site_id; });
}

const SiteStats& StatsSnapshot::site(std::string_view site_id) const {
    for (const auto& s : sites) {
        if (s.site_id == site_id) return s;
    }
    throw ArtifactError("statistics snapshot has no site '" + std::string(site_id) + "'");
}

std::vector<std::string> StatsSnapshot::site_ids() const {
    std::vector<std::string> ids;
    ids.reserve(sites.size());
    for (const auto& s : sites) ids.push_back(s.site_id);
    return ids;
}

namespace {

constexpr std::string_view kStatsMagic = "NIFFSTAT";
constexpr std::uint32_t kStatsVersion = 1;

}  // namespace

void StatsSnapshot::save_binary(const std::string& path) const {
    BinaryWriter w(path);
    w.magic(kStatsMagic);
    w.u32(kStatsVersion);
    w.u32(static_cast<std::uint32_t>(num_class_slots));
    w.u32(static_cast<std::uint32_t>(sites.size()));
    for (const auto& s : sites) {
        w.str(s.site_id);
        w.u32(static_cast<std::uint32_t>(s.dim));
        for (const auto& c : s.classes) {
            w.u64(c.count);
            w.f64_array(c.mean);
            w.f64_array(c.variance);
        }
    }
    w.finish();
}

StatsSnapshot StatsSnapshot::load_binary(const std::string& path) {
    BinaryReader r(path);
    r.expect_magic(kStatsMagic);
    const auto version = r.u32();
    if (version != kStatsVersion) r.fail("unsupported version " + std::to_string(version));
    StatsSnapshot snap;
    snap.num_class_slots = static_cast<int>(r.u32());
    const auto site_count = r.u32();
    if (snap.num_class_slots <= 0) r.fail("non-positive class slot count");
    for (std::uint32_t i = 0; i < site_count; ++i) {
        SiteStats s;
        s.site_id = r.str();
        s.dim = static_cast<int>(r.u32());
        if (s.dim <= 0) r.fail("site '" + s.site_id + "' has non-positive dimension");
        s.classes.resize(static_cast<std::size_t>(snap.num_class_slots));
        for (auto& c : s.classes) {
            c.count = r.u64();
            c.mean = r.f64_array(static_cast<std::size_t>(s.dim));
            c.variance = r.f64_array(static_cast<std::size_t>(s.dim));
        }
        snap.sites.push_back(std::move(s));
    }
    r.expect_eof();
    return snap;
}

void StatsSnapshot::save_json(const std::string& path) const {
    json doc;
    doc["format"] = std::string(kStatsMagic) + "-JSON";
    doc["version"] = kStatsVersion;
    doc["num_class_slots"] = num_class_slots;
    doc["sites"] = json::array();
    for (const auto& s : sites) {
        json js;
        js["id"] = s.site_id;
        js["dim"] = s.dim;
        js["classes"] = json::array();
        for (const auto& c : s.classes) {
            js["classes"].push_back({{"count", c.count}, {"mean", c.mean}, {"variance", c.variance}});
        }
        doc["sites"].push_back(std::move(js));
    }
    std::ofstream out(path);
    if (!out) throw ArtifactError("cannot open '" + path + "' for writing");
    out << doc.dump(2) << '\n';
    if (!out) throw ArtifactError("write to '" + path + "' failed");
}

StatsSnapshot StatsSnapshot::load_json(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ArtifactError("cannot open '" + path + "' for reading");
    json doc;
    try {
        in >> doc;
    } catch (const json::exception& e) {
        throw ArtifactError("'" + path + "': " + e.what());
    }
    try {
        StatsSnapshot snap;
        snap.num_class_slots = doc.at("num_class_slots").get<int>();
        for (const auto& js : doc.at("sites")) {
            SiteStats s;
            s.site_id = js.at("id").get<std::string>();
            s.dim = js.at("dim").get<int>();
            for (const auto& jc : js.at("classes")) {
                ClassStats c;
                c.count = jc.at("count").get<std::uint64_t>();
                c.mean = jc.at("mean").get<std::vector<double>>();
                c.variance = jc.at("variance").get<std::vector<double>>();
                if (static_cast<int>(c.mean.size()) != s.dim || static_cast<int>(c.variance.size()) != s.dim) {
                    throw ArtifactError("'" + path + "': site '" + s.site_id + "' has inconsistent dimensions");
                }
                s.classes.push_back(std::move(c));
            }
            snap.sites.push_back(std::move(s));
        }
        return snap;
    } catch (const json::exception& e) {
        throw ArtifactError("'" + path + "': " + e.what());
    }
}

// ---- DataWatcher -----------------------------------------------------------

DataWatcher::DataWatcher(WatcherConfig config, int num_classes) : config_(config), num_classes_(num_classes) {
    config_.validate();
    if (num_classes <= 0) {
        throw ConfigError("num_classes", "must be positive, got " + std::to_string(num_classes));
    }
}

bool DataWatcher::wants(std::string_view site_id) const {
    if (site_id.starts_with("pre_norm")) return config_.pre_norm;
    if (site_id.starts_with("post_act")) return config_.post_act;
    if (site_id == "pre_softmax" || site_id == "post_softmax") return config_.softmax_sites;
    throw ContractError("unknown probe site '" + std::string(site_id) + "'");
}

DataWatcher::Site& DataWatcher::site_slot(const std::string& site_id) {
    for (auto& s : sites_) {
        if (s.id == site_id) return s;
    }
    sites_.push_back({site_id, std::vector<ClassMoments>(static_cast<std::size_t>(slot_count()))});
    return sites_.back();
}

const DataWatcher::Site* DataWatcher::find_site(std::string_view site_id) const {
    for (const auto& s : sites_) {
        if (s.id == site_id) return &s;
    }
    return nullptr;
}

void DataWatcher::observe(const std::string& site_id, const Tensor& activations, std::span<const int> labels) {
    if (!wants(site_id)) return;
    const int n = activations.dim(0);
    if (static_cast<int>(labels.size()) != n) {
        throw DimensionError("watcher at '" + site_id + "': " + std::to_string(labels.size()) + " labels for " +
                             std::to_string(n) + " instances");
    }
    auto& site = site_slot(site_id);
    const auto data = activations.data();
    for (int i = 0; i < n; ++i) {
        const int label = labels[static_cast<std::size_t>(i)];
        if (label < 0 || label >= num_classes_) {
            throw ContractError("watcher at '" + site_id + "': label " + std::to_string(label) +
                                " out of range for " + std::to_string(num_classes_) + " classes");
        }
        const int slot = config_.class_agnostic ? 0 : label;
        if (activations.ndim() == 4) {
            const int c = activations.dim(1);
            const std::int64_t spatial = static_cast<std::int64_t>(activations.dim(2)) * activations.dim(3);
            const auto chw = data.subspan(static_cast<std::size_t>(i) * c * spatial, static_cast<std::size_t>(c) * spatial);
            site.slots[static_cast<std::size_t>(slot)].observe(pool_instance(chw, c, spatial));
        } else if (activations.ndim() == 2) {
            const int d = activations.dim(1);
            site.slots[static_cast<std::size_t>(slot)].observe(
                data.subspan(static_cast<std::size_t>(i) * d, static_cast<std::size_t>(d)));
        } else {
            throw DimensionError("watcher at '" + site_id + "': rank " + std::to_string(activations.ndim()) +
                                 " activations unsupported, expected 2 or 4");
        }
    }
}

const ClassMoments& DataWatcher::moments(std::string_view site_id, int class_slot) const {
    const Site* s = find_site(site_id);
    if (!s) throw ContractError("no statistics recorded at site '" + std::string(site_id) + "'");
    if (class_slot < 0 || class_slot >= static_cast<int>(s->slots.size())) {
        throw ContractError("class slot " + std::to_string(class_slot) + " out of range at site '" +
                            std::string(site_id) + "'");
    }
    return s->slots[static_cast<std::size_t>(class_slot)];
}

std::vector<std::string> DataWatcher::site_ids() const {
    std::vector<std::string> ids;
    ids.reserve(sites_.size());
    for (const auto& s : sites_) ids.push_back(s.id);
    return ids;
}

void DataWatcher::merge_from(const DataWatcher& other) {
    if (other.slot_count() != slot_count()) {
        throw ContractError("cannot merge watchers with " + std::to_string(other.slot_count()) + " and " +
                            std::to_string(slot_count()) + " class slots");
    }
    for (const auto& theirs : other.sites_) {
        auto& ours = site_slot(theirs.id);
        for (std::size_t slot = 0; slot < theirs.slots.size(); ++slot) {
            ours.slots[slot] = merge_stats(ours.slots[slot], theirs.slots[slot]);
        }
    }
}

StatsSnapshot DataWatcher::snapshot() const {
    StatsSnapshot snap;
    snap.num_class_slots = slot_count();
    for (const auto& s : sites_) {
        SiteStats out;
        out.site_id = s.id;
        for (std::size_t slot = 0; slot < s.slots.size(); ++slot) {
            const auto& m = s.slots[slot];
            if (m.count < 2) {
                throw InsufficientDataError("site '" + s.id + "' class slot " + std::to_string(slot) + " has " +
                                            std::to_string(m.count) + " observation(s), need at least 2");
            }
            out.dim = m.dim();
            out.classes.push_back({m.count, m.mean, m.variance()});
        }
        snap.sites.push_back(std::move(out));
    }
    return snap;
}

}  // namespace niff
