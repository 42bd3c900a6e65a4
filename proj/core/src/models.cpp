#include "niff/models.hpp"

#include "niff/serialize.hpp"

#include <json.hpp>

#include <cmath>
#include <cstring>

namespace niff {

using nlohmann::json;

namespace {

Tensor kaiming_uniform(Rng& rng, Shape shape, int fan_in, bool trainable) {
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
    std::vector<double> data(static_cast<std::size_t>(numel(shape)));
    for (double& v : data) v = rng.uniform(-bound, bound);
    return Tensor::from_data(std::move(shape), std::move(data), trainable);
}

Tensor copy_tensor(const Tensor& t, bool trainable) {
    return Tensor::from_data(t.shape(), std::vector<double>(t.data().begin(), t.data().end()), trainable);
}

void push_defined(std::vector<Tensor>& out, const Tensor& t) {
    if (t.defined()) out.push_back(t);
}

}  // namespace

void HeadConfig::validate() const {
    if (in_channels <= 0) throw ConfigError("head.in_channels", "must be positive");
    if (spatial <= 0) throw ConfigError("head.spatial", "must be positive");
    if (block_channels.empty()) throw ConfigError("head.block_channels", "must name at least one block");
    for (int c : block_channels) {
        if (c <= 0) throw ConfigError("head.block_channels", "channel counts must be positive");
    }
    if (base_classes <= 0) throw ConfigError("head.base_classes", "must be positive");
    if (novel_classes < 0) throw ConfigError("head.novel_classes", "must be non-negative");
    if (reg_targets_per_class <= 0) throw ConfigError("head.reg_targets_per_class", "must be positive");
    if (!(norm_epsilon > 0.0)) throw ConfigError("head.norm_epsilon", "must be positive");
}

void FrozenNorm::calibrate(const Tensor& x, double epsilon) {
    if (x.ndim() != 4) throw DimensionError("norm calibration expects [N,C,H,W], got " + shape_str(x.shape()));
    const int n = x.dim(0), c = x.dim(1);
    const std::int64_t spatial = static_cast<std::int64_t>(x.dim(2)) * x.dim(3);
    const std::int64_t per_channel = static_cast<std::int64_t>(n) * spatial;
    gain.assign(static_cast<std::size_t>(c), 0.0);
    offset.assign(static_cast<std::size_t>(c), 0.0);
    const auto data = x.data();
    for (int ci = 0; ci < c; ++ci) {
        double sum = 0.0;
        for (int ni = 0; ni < n; ++ni) {
            const double* p = data.data() + ((static_cast<std::int64_t>(ni) * c + ci)) * spatial;
            for (std::int64_t i = 0; i < spatial; ++i) sum += p[i];
        }
        const double mean = sum / static_cast<double>(per_channel);
        double sq = 0.0;
        for (int ni = 0; ni < n; ++ni) {
            const double* p = data.data() + ((static_cast<std::int64_t>(ni) * c + ci)) * spatial;
            for (std::int64_t i = 0; i < spatial; ++i) sq += (p[i] - mean) * (p[i] - mean);
        }
        const double var = sq / static_cast<double>(per_channel);
        const double g = 1.0 / std::sqrt(var + epsilon);
        gain[static_cast<std::size_t>(ci)] = g;
        offset[static_cast<std::size_t>(ci)] = -mean * g;
    }
    calibrated = true;
}

Tensor FrozenNorm::apply(const Tensor& x) const {
    if (!calibrated) throw ContractError("frozen norm used before calibration");
    return channel_affine(x, gain, offset);
}

// ---- HeadModel ---------------------------------------------------------------

void HeadModel::calibrate_norms(const Tensor& x) {
    Tensor h = x;
    for (auto& block : blocks) {
        h = conv2d(h, block.w, block.b, 1);
        block.norm.calibrate(h, config.norm_epsilon);
        h = relu(block.norm.apply(h));
    }
}

bool HeadModel::norms_calibrated() const {
    for (const auto& block : blocks) {
        if (!block.norm.calibrated) return false;
    }
    return true;
}

HeadOutput HeadModel::forward(const Tensor& x, bool collect_sites, DataWatcher* watcher,
                              std::span<const int> labels) const {
    if (x.ndim() != 4 || x.dim(1) != config.in_channels || x.dim(2) != config.spatial ||
        x.dim(3) != config.spatial) {
        throw DimensionError("head expects [N," + std::to_string(config.in_channels) + "," +
                             std::to_string(config.spatial) + "," + std::to_string(config.spatial) + "], got " +
                             shape_str(x.shape()));
    }
    if (watcher && static_cast<int>(labels.size()) != x.dim(0)) {
        throw ContractError("watched forward needs one label per instance");
    }

    HeadOutput out;
    auto tap = [&](const std::string& site_id, const Tensor& t) {
        if (collect_sites) out.sites.emplace_back(site_id, t);
        if (watcher) watcher->observe(site_id, t, labels);
    };

    Tensor h = x;
    for (std::size_t i = 0; i < blocks.size(); ++i) {
        const auto& block = blocks[i];
        h = conv2d(h, block.w, block.b, 1);
        tap("pre_norm_" + std::to_string(i), h);
        h = relu(block.norm.apply(h));
        tap("post_act_" + std::to_string(i), h);
    }
    out.pooled = avg_pool2d(h);

    Tensor wc = cls_w, bc = cls_b, wr = reg_w, br = reg_b;
    if (config.novel_classes > 0) {
        wc = concat_rows(cls_w, cls_w_novel);
        bc = concat_rows(cls_b, cls_b_novel);
        wr = concat_rows(reg_w, reg_w_novel);
        br = concat_rows(reg_b, reg_b_novel);
    }
    out.logits = linear(out.pooled, wc, bc);
    tap("pre_softmax", out.logits);
    out.probs = softmax(out.logits);
    tap("post_softmax", out.probs);
    out.reg = linear(out.pooled, wr, br);
    return out;
}

Tensor HeadModel::base_logits(const Tensor& pooled) const { return linear(pooled, cls_w, cls_b); }

Tensor HeadModel::base_reg(const Tensor& pooled) const { return linear(pooled, reg_w, reg_b); }

std::vector<Tensor> HeadModel::parameters() const {
    auto out = base_parameters();
    for (const auto& t : novel_parameters()) out.push_back(t);
    return out;
}

std::vector<Tensor> HeadModel::base_parameters() const {
    std::vector<Tensor> out;
    for (const auto& block : blocks) {
        out.push_back(block.w);
        out.push_back(block.b);
    }
    out.push_back(cls_w);
    out.push_back(cls_b);
    out.push_back(reg_w);
    out.push_back(reg_b);
    return out;
}

std::vector<Tensor> HeadModel::novel_parameters() const {
    std::vector<Tensor> out;
    push_defined(out, cls_w_novel);
    push_defined(out, cls_b_novel);
    push_defined(out, reg_w_novel);
    push_defined(out, reg_b_novel);
    return out;
}

std::vector<std::pair<std::string, Tensor>> HeadModel::named_parameters() const {
    std::vector<std::pair<std::string, Tensor>> out;
    for (std::size_t i = 0; i < blocks.size(); ++i) {
        out.emplace_back("block" + std::to_string(i) + ".w", blocks[i].w);
        out.emplace_back("block" + std::to_string(i) + ".b", blocks[i].b);
    }
    out.emplace_back("cls.w", cls_w);
    out.emplace_back("cls.b", cls_b);
    out.emplace_back("reg.w", reg_w);
    out.emplace_back("reg.b", reg_b);
    if (cls_w_novel.defined()) {
        out.emplace_back("cls_novel.w", cls_w_novel);
        out.emplace_back("cls_novel.b", cls_b_novel);
        out.emplace_back("reg_novel.w", reg_w_novel);
        out.emplace_back("reg_novel.b", reg_b_novel);
    }
    return out;
}

bool HeadModel::trainable() const { return cls_w.defined() && cls_w.requires_grad(); }

namespace {

HeadModel copy_head(const HeadModel& src, bool trainable) {
    HeadModel out;
    out.config = src.config;
    for (const auto& block : src.blocks) {
        out.blocks.push_back({copy_tensor(block.w, trainable), copy_tensor(block.b, trainable), block.norm});
    }
    out.cls_w = copy_tensor(src.cls_w, trainable);
    out.cls_b = copy_tensor(src.cls_b, trainable);
    out.reg_w = copy_tensor(src.reg_w, trainable);
    out.reg_b = copy_tensor(src.reg_b, trainable);
    if (src.cls_w_novel.defined()) {
        out.cls_w_novel = copy_tensor(src.cls_w_novel, trainable);
        out.cls_b_novel = copy_tensor(src.cls_b_novel, trainable);
        out.reg_w_novel = copy_tensor(src.reg_w_novel, trainable);
        out.reg_b_novel = copy_tensor(src.reg_b_novel, trainable);
    }
    return out;
}

}  // namespace

HeadModel HeadModel::frozen_copy() const { return copy_head(*this, false); }

HeadModel HeadModel::expanded_copy(int extra_novel_classes, Rng& rng) const {
    if (extra_novel_classes < 0) throw ContractError("cannot expand by a negative class count");
    HeadModel out = copy_head(*this, true);
    if (extra_novel_classes == 0) return out;

    const int d = config.pooled_dim();
    const int r = config.reg_targets_per_class;
    // Novel classifier rows start silent so day-one logits leave base
    // predictions untouched; regressor rows need signal to train from.
    Tensor cls_rows = Tensor::zeros({extra_novel_classes, d}, true);
    Tensor cls_bias = Tensor::zeros({extra_novel_classes}, true);
    Tensor reg_rows = kaiming_uniform(rng, {r * extra_novel_classes, d}, d, true);
    Tensor reg_bias = Tensor::zeros({r * extra_novel_classes}, true);

    if (out.cls_w_novel.defined()) {
        out.cls_w_novel = Tensor::from_data(
            [&] {
                Shape s = out.cls_w_novel.shape();
                s[0] += extra_novel_classes;
                return s;
            }(),
            [&] {
                std::vector<double> v(out.cls_w_novel.data().begin(), out.cls_w_novel.data().end());
                v.insert(v.end(), cls_rows.data().begin(), cls_rows.data().end());
                return v;
            }(),
            true);
        out.cls_b_novel = Tensor::from_data(
            {out.cls_b_novel.dim(0) + extra_novel_classes},
            [&] {
                std::vector<double> v(out.cls_b_novel.data().begin(), out.cls_b_novel.data().end());
                v.insert(v.end(), cls_bias.data().begin(), cls_bias.data().end());
                return v;
            }(),
            true);
        out.reg_w_novel = Tensor::from_data(
            [&] {
                Shape s = out.reg_w_novel.shape();
                s[0] += r * extra_novel_classes;
                return s;
            }(),
            [&] {
                std::vector<double> v(out.reg_w_novel.data().begin(), out.reg_w_novel.data().end());
                v.insert(v.end(), reg_rows.data().begin(), reg_rows.data().end());
                return v;
            }(),
            true);
        out.reg_b_novel = Tensor::from_data(
            {out.reg_b_novel.dim(0) + r * extra_novel_classes},
            [&] {
                std::vector<double> v(out.reg_b_novel.data().begin(), out.reg_b_novel.data().end());
                v.insert(v.end(), reg_bias.data().begin(), reg_bias.data().end());
                return v;
            }(),
            true);
    } else {
        out.cls_w_novel = cls_rows;
        out.cls_b_novel = cls_bias;
        out.reg_w_novel = reg_rows;
        out.reg_b_novel = reg_bias;
    }
    out.config.novel_classes += extra_novel_classes;
    return out;
}

HeadModel build_head(const HeadConfig& config, Rng& rng) {
    config.validate();
    if (config.novel_classes != 0) {
        throw ConfigError("head.novel_classes", "fresh heads start without novel rows; expand a copy instead");
    }
    HeadModel model;
    model.config = config;
    int cin = config.in_channels;
    for (int cout : config.block_channels) {
        ConvBlock block;
        block.w = kaiming_uniform(rng, {cout, cin, 3, 3}, cin * 9, true);
        block.b = Tensor::zeros({cout}, true);
        model.blocks.push_back(std::move(block));
        cin = cout;
    }
    const int d = config.pooled_dim();
    model.cls_w = kaiming_uniform(rng, {config.base_classes, d}, d, true);
    model.cls_b = Tensor::zeros({config.base_classes}, true);
    model.reg_w = kaiming_uniform(rng, {config.reg_targets_per_class * config.base_classes, d}, d, true);
    model.reg_b = Tensor::zeros({config.reg_targets_per_class * config.base_classes}, true);
    return model;
}

// ---- GeneratorModel ------------------------------------------------------------

void GeneratorConfig::validate() const {
    if (z_dim <= 0) throw ConfigError("generator.z_dim", "must be positive");
    if (trunk_channels <= 0) throw ConfigError("generator.trunk_channels", "must be positive");
    if (num_blocks < 0) throw ConfigError("generator.num_blocks", "must be non-negative");
    if (out_channels <= 0) throw ConfigError("generator.out_channels", "must be positive");
    if (spatial <= 0) throw ConfigError("generator.spatial", "must be positive");
    if (num_classes <= 0) throw ConfigError("generator.num_classes", "must be positive");
}

Tensor GeneratorModel::forward(const Tensor& z, int class_id) const {
    if (class_id < 0 || class_id >= config.num_classes) {
        throw ContractError("generator has no head for class " + std::to_string(class_id));
    }
    if (z.ndim() != 2 || z.dim(1) != config.z_dim) {
        throw DimensionError("generator expects noise [N," + std::to_string(config.z_dim) + "], got " +
                             shape_str(z.shape()));
    }
    const int n = z.dim(0);
    Tensor h = linear(z, fc_w, fc_b);
    h = reshape(h, {n, config.trunk_channels, config.spatial, config.spatial});
    for (const auto& block : blocks) h = relu(conv2d(h, block.w, block.b, 1));
    const auto& head = heads[static_cast<std::size_t>(class_id)];
    return conv2d(h, head.w, head.b, 0);
}

std::vector<Tensor> GeneratorModel::parameters() const {
    std::vector<Tensor> out{fc_w, fc_b};
    for (const auto& block : blocks) {
        out.push_back(block.w);
        out.push_back(block.b);
    }
    for (const auto& head : heads) {
        out.push_back(head.w);
        out.push_back(head.b);
    }
    return out;
}

std::vector<std::pair<std::string, Tensor>> GeneratorModel::named_parameters() const {
    std::vector<std::pair<std::string, Tensor>> out;
    out.emplace_back("fc.w", fc_w);
    out.emplace_back("fc.b", fc_b);
    for (std::size_t i = 0; i < blocks.size(); ++i) {
        out.emplace_back("block" + std::to_string(i) + ".w", blocks[i].w);
        out.emplace_back("block" + std::to_string(i) + ".b", blocks[i].b);
    }
    for (std::size_t c = 0; c < heads.size(); ++c) {
        out.emplace_back("head" + std::to_string(c) + ".w", heads[c].w);
        out.emplace_back("head" + std::to_string(c) + ".b", heads[c].b);
    }
    return out;
}

GeneratorModel GeneratorModel::frozen_copy() const {
    GeneratorModel out;
    out.config = config;
    out.fc_w = copy_tensor(fc_w, false);
    out.fc_b = copy_tensor(fc_b, false);
    for (const auto& block : blocks) {
        out.blocks.push_back({copy_tensor(block.w, false), copy_tensor(block.b, false), block.norm});
    }
    for (const auto& head : heads) {
        out.heads.push_back({copy_tensor(head.w, false), copy_tensor(head.b, false)});
    }
    return out;
}

GeneratorModel build_generator(const GeneratorConfig& config, Rng& rng) {
    config.validate();
    GeneratorModel model;
    model.config = config;
    const int seed_dim = config.trunk_channels * config.spatial * config.spatial;
    model.fc_w = kaiming_uniform(rng, {seed_dim, config.z_dim}, config.z_dim, true);
    model.fc_b = Tensor::zeros({seed_dim}, true);
    for (int i = 0; i < config.num_blocks; ++i) {
        ConvBlock block;
        block.w = kaiming_uniform(rng, {config.trunk_channels, config.trunk_channels, 3, 3},
                                  config.trunk_channels * 9, true);
        block.b = Tensor::zeros({config.trunk_channels}, true);
        model.blocks.push_back(std::move(block));
    }
    for (int c = 0; c < config.num_classes; ++c) {
        GeneratorClassHead head;
        head.w = kaiming_uniform(rng, {config.out_channels, config.trunk_channels, 1, 1}, config.trunk_channels,
                                 true);
        head.b = Tensor::zeros({config.out_channels}, true);
        model.heads.push_back(std::move(head));
    }
    return model;
}

Tensor sample_noise(Rng& rng, int n, int z_dim) {
    if (n <= 0 || z_dim <= 0) throw ContractError("noise batch and dimension must be positive");
    std::vector<double> data(static_cast<std::size_t>(n) * z_dim);
    for (double& v : data) v = rng.normal();
    return Tensor::from_data({n, z_dim}, std::move(data), false);
}

// ---- checkpoints -----------------------------------------------------------------

namespace {

constexpr std::string_view kCkptMagic = "NIFFCKPT";
constexpr std::uint32_t kCkptVersion = 1;

void write_param_table(BinaryWriter& w, const std::vector<std::pair<std::string, Tensor>>& params) {
    w.u32(static_cast<std::uint32_t>(params.size()));
    for (const auto& [name, t] : params) {
        w.str(name);
        w.u32(static_cast<std::uint32_t>(t.ndim()));
        for (int i = 0; i < t.ndim(); ++i) w.u32(static_cast<std::uint32_t>(t.dim(i)));
        w.f64_array(t.data());
    }
}

void read_param_table(BinaryReader& r, const std::vector<std::pair<std::string, Tensor>>& params) {
    const auto count = r.u32();
    if (count != params.size()) {
        r.fail("expected " + std::to_string(params.size()) + " parameters, file has " + std::to_string(count));
    }
    for (const auto& [name, t] : params) {
        const auto got_name = r.str();
        if (got_name != name) r.fail("expected parameter '" + name + "', found '" + got_name + "'");
        const auto rank = r.u32();
        if (rank != static_cast<std::uint32_t>(t.ndim())) r.fail("rank mismatch for '" + name + "'");
        for (int i = 0; i < t.ndim(); ++i) {
            const auto dim = r.u32();
            if (dim != static_cast<std::uint32_t>(t.dim(i))) r.fail("shape mismatch for '" + name + "'");
        }
        auto values = r.f64_array(static_cast<std::size_t>(t.size()));
        Tensor mutable_t = t;
        std::copy(values.begin(), values.end(), mutable_t.data_mut().begin());
    }
}

json head_arch(const HeadModel& model) {
    json arch;
    arch["kind"] = "head";
    arch["in_channels"] = model.config.in_channels;
    arch["spatial"] = model.config.spatial;
    arch["block_channels"] = model.config.block_channels;
    arch["base_classes"] = model.config.base_classes;
    arch["novel_classes"] = model.config.novel_classes;
    arch["reg_targets_per_class"] = model.config.reg_targets_per_class;
    arch["norm_epsilon"] = model.config.norm_epsilon;
    return arch;
}

json generator_arch(const GeneratorModel& model) {
    json arch;
    arch["kind"] = "generator";
    arch["z_dim"] = model.config.z_dim;
    arch["trunk_channels"] = model.config.trunk_channels;
    arch["num_blocks"] = model.config.num_blocks;
    arch["out_channels"] = model.config.out_channels;
    arch["spatial"] = model.config.spatial;
    arch["num_classes"] = model.config.num_classes;
    return arch;
}

}  // namespace

void save_checkpoint(const HeadModel& model, const std::string& path) {
    BinaryWriter w(path);
    w.magic(kCkptMagic);
    w.u32(kCkptVersion);
    w.str(head_arch(model).dump());
    w.u32(static_cast<std::uint32_t>(model.blocks.size()) * 2);
    for (std::size_t i = 0; i < model.blocks.size(); ++i) {
        const auto& norm = model.blocks[i].norm;
        if (!norm.calibrated) throw ArtifactError("head checkpoint requires calibrated norms");
        w.str("block" + std::to_string(i) + ".norm.gain");
        w.u32(static_cast<std::uint32_t>(norm.gain.size()));
        w.f64_array(norm.gain);
        w.str("block" + std::to_string(i) + ".norm.offset");
        w.u32(static_cast<std::uint32_t>(norm.offset.size()));
        w.f64_array(norm.offset);
    }
    write_param_table(w, model.named_parameters());
    w.finish();
}

void save_checkpoint(const GeneratorModel& model, const std::string& path) {
    BinaryWriter w(path);
    w.magic(kCkptMagic);
    w.u32(kCkptVersion);
    w.str(generator_arch(model).dump());
    w.u32(0);  // no buffers
    write_param_table(w, model.named_parameters());
    w.finish();
}

namespace {

json read_arch(BinaryReader& r, const std::string& expected_kind) {
    r.expect_magic(kCkptMagic);
    const auto version = r.u32();
    if (version != kCkptVersion) r.fail("unsupported version " + std::to_string(version));
    json arch;
    try {
        arch = json::parse(r.str());
    } catch (const json::exception& e) {
        r.fail(std::string("arch block is not valid json: ") + e.what());
    }
    const auto kind = arch.at("kind").get<std::string>();
    if (kind != expected_kind) r.fail("checkpoint holds a '" + kind + "', expected '" + expected_kind + "'");
    return arch;
}

}  // namespace

HeadModel load_head_checkpoint(const std::string& path, bool trainable) {
    BinaryReader r(path);
    json arch = read_arch(r, "head");
    HeadConfig config;
    try {
        config.in_channels = arch.at("in_channels").get<int>();
        config.spatial = arch.at("spatial").get<int>();
        config.block_channels = arch.at("block_channels").get<std::vector<int>>();
        config.base_classes = arch.at("base_classes").get<int>();
        config.novel_classes = arch.at("novel_classes").get<int>();
        config.reg_targets_per_class = arch.at("reg_targets_per_class").get<int>();
        config.norm_epsilon = arch.at("norm_epsilon").get<double>();
    } catch (const json::exception& e) {
        r.fail(std::string("bad arch block: ") + e.what());
    }
    config.validate();

    Rng scaffold_rng(0);
    HeadConfig base_config = config;
    base_config.novel_classes = 0;
    HeadModel model = build_head(base_config, scaffold_rng);
    if (config.novel_classes > 0) model = model.expanded_copy(config.novel_classes, scaffold_rng);
    if (!trainable) model = model.frozen_copy();

    const auto buffer_count = r.u32();
    if (buffer_count != model.blocks.size() * 2) {
        r.fail("expected " + std::to_string(model.blocks.size() * 2) + " norm buffers, file has " +
               std::to_string(buffer_count));
    }
    for (std::size_t i = 0; i < model.blocks.size(); ++i) {
        auto& norm = model.blocks[i].norm;
        const int channels = model.config.block_channels[i];
        for (const char* part : {"gain", "offset"}) {
            const auto name = r.str();
            const auto expected = "block" + std::to_string(i) + ".norm." + part;
            if (name != expected) r.fail("expected buffer '" + expected + "', found '" + name + "'");
            const auto len = r.u32();
            if (len != static_cast<std::uint32_t>(channels)) r.fail("buffer '" + name + "' has wrong length");
            auto values = r.f64_array(len);
            (std::strcmp(part, "gain") == 0 ? norm.gain : norm.offset) = std::move(values);
        }
        norm.calibrated = true;
    }
    read_param_table(r, model.named_parameters());
    r.expect_eof();
    return model;
}

GeneratorModel load_generator_checkpoint(const std::string& path, bool trainable) {
    BinaryReader r(path);
    json arch = read_arch(r, "generator");
    GeneratorConfig config;
    try {
        config.z_dim = arch.at("z_dim").get<int>();
        config.trunk_channels = arch.at("trunk_channels").get<int>();
        config.num_blocks = arch.at("num_blocks").get<int>();
        config.out_channels = arch.at("out_channels").get<int>();
        config.spatial = arch.at("spatial").get<int>();
        config.num_classes = arch.at("num_classes").get<int>();
    } catch (const json::exception& e) {
        r.fail(std::string("bad arch block: ") + e.what());
    }
    config.validate();

    Rng scaffold_rng(0);
    GeneratorModel model = build_generator(config, scaffold_rng);
    if (!trainable) model = model.frozen_copy();

    const auto buffer_count = r.u32();
    if (buffer_count != 0) r.fail("generator checkpoints carry no buffers");
    read_param_table(r, model.named_parameters());
    r.expect_eof();
    return model;
}

}  // namespace niff
