#include "niff/losses.hpp"

#include "niff/serialize.hpp"

#include <algorithm>
#include <cmath>

namespace niff {

double kl_gaussian_diag(std::span<const double> mu, std::span<const double> var, std::span<const double> mu_fake,
                        std::span<const double> var_fake, double eps) {
    const std::size_t d = mu.size();
    if (var.size() != d || mu_fake.size() != d || var_fake.size() != d) {
        throw DimensionError("divergence inputs disagree on dimension");
    }
    if (d == 0) throw DimensionError("divergence of empty vectors");
    if (!(eps > 0.0)) throw ContractError("divergence eps must be positive");
    double total = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
        if (var[i] < 0.0 || var_fake[i] < 0.0) {
            throw ContractError("negative variance in divergence input");
        }
        const double s2r = var[i] + eps;
        const double s2f = var_fake[i] + eps;
        const double dmu = mu_fake[i] - mu[i];
        total += 0.5 * std::log(s2f) - 0.5 * std::log(s2r) + (s2r + dmu * dmu) / (2.0 * s2f) - 0.5;
    }
    return total / static_cast<double>(d);
}

namespace {

const Tensor* find_site_tensor(const std::vector<std::pair<std::string, Tensor>>& sites, std::string_view id) {
    for (const auto& [site_id, t] : sites) {
        if (site_id == id) return &t;
    }
    return nullptr;
}

// Differentiable mean-over-dims divergence of a fake batch [N,d] against
// recorded per-dimension statistics.
Tensor batch_alignment_kl(const Tensor& batch, const ClassStats& recorded, double eps) {
    const int n = batch.dim(0);
    const int d = batch.dim(1);
    if (static_cast<int>(recorded.mean.size()) != d) {
        throw DimensionError("recorded statistics have dimension " + std::to_string(recorded.mean.size()) +
                             ", activations have " + std::to_string(d));
    }
    std::vector<double> s2r(recorded.variance.size());
    std::vector<double> c0(recorded.variance.size());
    for (std::size_t i = 0; i < s2r.size(); ++i) {
        if (recorded.variance[i] < 0.0) throw ContractError("negative recorded variance");
        s2r[i] = recorded.variance[i] + eps;
        c0[i] = -0.5 * std::log(s2r[i]) - 0.5;
    }
    auto mu_r = Tensor::from_data({d}, recorded.mean);
    auto s2r_t = Tensor::from_data({d}, std::move(s2r));
    auto c0_t = Tensor::from_data({d}, std::move(c0));

    auto mu_f = mul_scalar(sum_rows(batch), 1.0 / static_cast<double>(n));
    auto centered = sub(batch, broadcast_row(mu_f, n));
    auto var_f = mul_scalar(sum_rows(mul(centered, centered)), 1.0 / static_cast<double>(n - 1));
    auto s2f = add_scalar(var_f, eps);

    auto dmu = sub(mu_f, mu_r);
    auto ratio = div(add(s2r_t, mul(dmu, dmu)), mul_scalar(s2f, 2.0));
    auto kl_vec = add(add(mul_scalar(niff::log(s2f), 0.5), ratio), c0_t);
    return mean(kl_vec);
}

}  // namespace

ClassAlignment class_alignment_loss(const StatsSnapshot& stats, const HeadModel& teacher,
                                    const Tensor& fake_features, int class_id, const AlignmentScale& scale) {
    const int num_classes = teacher.config.base_classes;
    if (teacher.config.novel_classes != 0) {
        throw ContractError("alignment runs against the base-only teacher");
    }
    if (class_id < 0 || class_id >= num_classes) {
        throw ContractError("alignment class " + std::to_string(class_id) + " out of range");
    }
    if (fake_features.dim(0) < 2) {
        throw InsufficientDataError("batch variance needs at least 2 forged instances, got " +
                                    std::to_string(fake_features.dim(0)));
    }
    if (stats.num_class_slots != 1 && stats.num_class_slots != num_classes) {
        throw ContractError("snapshot has " + std::to_string(stats.num_class_slots) + " class slots for " +
                            std::to_string(num_classes) + " base classes");
    }
    const int slot = stats.num_class_slots == 1 ? 0 : class_id;
    const int n = fake_features.dim(0);

    auto out = teacher.forward(fake_features, true);

    Tensor kl_sum;
    int participating = 0;
    for (const auto& site : stats.sites) {
        if (!scale.include_post_softmax && site.site_id == "post_softmax") continue;
        const Tensor* tap = find_site_tensor(out.sites, site.site_id);
        if (!tap) throw ContractError("snapshot site '" + site.site_id + "' is not produced by this head");
        Tensor pooled = tap->ndim() == 4 ? avg_pool2d(*tap) : *tap;
        Tensor site_kl = batch_alignment_kl(pooled, site.classes[static_cast<std::size_t>(slot)], scale.eps);
        kl_sum = kl_sum.defined() ? add(kl_sum, site_kl) : site_kl;
        ++participating;
    }
    if (participating == 0) throw ContractError("no snapshot sites participate in alignment");

    std::vector<int> labels(static_cast<std::size_t>(n), class_id);
    Tensor ce = cross_entropy(out.logits, labels);

    ClassAlignment result;
    const double site_class_scale = scale.lambda_kl / (static_cast<double>(participating) * num_classes);
    result.partial = add(mul_scalar(kl_sum, site_class_scale), mul_scalar(ce, 1.0 / num_classes));
    result.kl_mean = kl_sum.value() / static_cast<double>(participating);
    result.ce = ce.value();
    double prob_sum = 0.0;
    for (int i = 0; i < n; ++i) prob_sum += out.probs.at({i, class_id});
    result.mean_class_prob = prob_sum / static_cast<double>(n);
    return result;
}

GenLossBreakdown generator_loss(const StatsSnapshot& stats, const HeadModel& teacher, const GeneratorModel& g,
                                int features_per_class, const AlignmentScale& scale, Rng& rng,
                                bool accumulate_grads) {
    if (features_per_class < 2) {
        throw InsufficientDataError("batch variance needs at least 2 forged instances per class, got " +
                                    std::to_string(features_per_class));
    }
    if (g.config.num_classes != teacher.config.base_classes) {
        throw ContractError("generator covers " + std::to_string(g.config.num_classes) + " classes, teacher has " +
                            std::to_string(teacher.config.base_classes));
    }
    GenLossBreakdown sum;
    const int classes = g.config.num_classes;
    for (int c = 0; c < classes; ++c) {
        auto z = sample_noise(rng, features_per_class, g.config.z_dim);
        auto fake = g.forward(z, c);
        auto aligned = class_alignment_loss(stats, teacher, fake, c, scale);
        if (accumulate_grads) backward(aligned.partial);
        sum.kl_term += aligned.kl_mean;
        sum.ce_term += aligned.ce;
        sum.mean_class_prob += aligned.mean_class_prob;
    }
    sum.kl_term *= scale.lambda_kl / static_cast<double>(classes);
    sum.ce_term /= static_cast<double>(classes);
    sum.mean_class_prob /= static_cast<double>(classes);
    sum.total = sum.kl_term + sum.ce_term;
    return sum;
}

namespace {

// Constant [N,d] matrix whose row i is `rows`' row `labels[i] * stride + offset`.
Tensor gather_rows_constant(const Tensor& rows, std::span<const int> labels, int stride, int offset) {
    const int d = rows.dim(1);
    const int n = static_cast<int>(labels.size());
    std::vector<double> out(static_cast<std::size_t>(n) * d);
    const auto rd = rows.data();
    for (int i = 0; i < n; ++i) {
        const int row = labels[static_cast<std::size_t>(i)] * stride + offset;
        std::copy(rd.begin() + static_cast<std::ptrdiff_t>(row) * d,
                  rd.begin() + static_cast<std::ptrdiff_t>(row + 1) * d,
                  out.begin() + static_cast<std::ptrdiff_t>(i) * d);
    }
    return Tensor::from_data({n, d}, std::move(out));
}

struct ForgedTerms {
    Tensor cls_feat;
    Tensor reg_feat;
    Tensor reg_l1;
    Tensor conf;
};

ForgedTerms forged_replay_terms(const HeadModel& teacher, const HeadModel& student, const LabeledBatch& forged,
                                double lambda_f) {
    forged.validate();
    if (forged.empty()) throw ContractError("distillation needs a non-empty forged batch");
    const int base_classes = teacher.config.base_classes;
    for (int l : forged.labels) {
        if (l < 0 || l >= base_classes) {
            throw ContractError("forged batch carries non-base label " + std::to_string(l));
        }
    }
    if (student.config.base_classes != base_classes ||
        student.config.pooled_dim() != teacher.config.pooled_dim()) {
        throw ContractError("teacher and student disagree on base output geometry");
    }

    const int n = forged.size();
    const int r = teacher.config.reg_targets_per_class;
    auto t_out = teacher.forward(forged.features);
    auto s_out = student.forward(forged.features);
    auto diff = sub(t_out.pooled, s_out.pooled);

    // The student's own rows steer which feature channels matter, but as
    // fixed weights: otherwise shrinking the rows kills the loss for free.
    auto cls_rows = gather_rows_constant(student.cls_w.detached(), forged.labels, 1, 0);
    auto weighted = mul(diff, cls_rows);
    ForgedTerms terms;
    terms.cls_feat = mul_scalar(sum(mul(weighted, weighted)), lambda_f / n);

    Tensor reg_sq_sum;
    for (int j = 0; j < r; ++j) {
        auto reg_rows = gather_rows_constant(student.reg_w.detached(), forged.labels, r, j);
        auto w = mul(diff, reg_rows);
        auto sq = sum(mul(w, w));
        reg_sq_sum = reg_sq_sum.defined() ? add(reg_sq_sum, sq) : sq;
    }
    terms.reg_feat = mul_scalar(reg_sq_sum, lambda_f / (static_cast<double>(n) * r));

    auto t_block = select_class_block(t_out.reg, forged.labels, r);
    auto s_block = select_class_block(s_out.reg, forged.labels, r);
    terms.reg_l1 = l1(s_block, t_block);

    terms.conf = cross_entropy(s_out.logits, forged.labels);
    return terms;
}

}  // namespace

Tensor kd_loss(const HeadModel& teacher, const HeadModel& student, const LabeledBatch& forged, double lambda_f,
               KdLossBreakdown* breakdown) {
    auto terms = forged_replay_terms(teacher, student, forged, lambda_f);
    auto total = add(add(terms.cls_feat, terms.reg_feat), terms.reg_l1);
    if (breakdown) {
        *breakdown = {};
        breakdown->cls_feat_term = terms.cls_feat.value();
        breakdown->reg_feat_term = terms.reg_feat.value();
        breakdown->reg_l1_term = terms.reg_l1.value();
        breakdown->total = total.value();
    }
    return total;
}

Tensor conf_loss(const HeadModel& student, const LabeledBatch& forged) {
    forged.validate();
    if (forged.empty()) throw ContractError("confidence loss needs a non-empty forged batch");
    const int total_classes = student.config.total_classes();
    for (int l : forged.labels) {
        if (l < 0 || l >= total_classes) {
            throw ContractError("confidence label " + std::to_string(l) + " out of range");
        }
    }
    auto out = student.forward(forged.features);
    return cross_entropy(out.logits, forged.labels);
}

Tensor replay_loss(const HeadModel& teacher, const HeadModel& student, const LabeledBatch& forged,
                   double lambda_f, const LossSwitches& switches, KdLossBreakdown* breakdown) {
    KdLossBreakdown out{};
    const bool any = switches.conf || switches.feat_distill || switches.l1_distill;
    if (!any) {
        if (breakdown) *breakdown = out;
        return Tensor::scalar(0.0);
    }
    auto terms = forged_replay_terms(teacher, student, forged, lambda_f);
    Tensor total;
    auto take = [&](const Tensor& t) { total = total.defined() ? add(total, t) : t; };
    if (switches.feat_distill) {
        take(terms.cls_feat);
        take(terms.reg_feat);
        out.cls_feat_term = terms.cls_feat.value();
        out.reg_feat_term = terms.reg_feat.value();
    }
    if (switches.l1_distill) {
        take(terms.reg_l1);
        out.reg_l1_term = terms.reg_l1.value();
    }
    if (switches.conf) {
        take(terms.conf);
        out.conf_term = terms.conf.value();
    }
    out.total = total.value();
    if (breakdown) *breakdown = out;
    return total;
}

Tensor novel_loss(const HeadModel& student, const HeadModel& teacher, const LabeledBatch& novel,
                  const LabeledBatch& forged, double lambda_f, const LossSwitches& switches,
                  KdLossBreakdown* breakdown) {
    novel.validate();
    if (novel.empty()) throw ContractError("novel stage needs a non-empty novel batch");
    if (!novel.has_targets()) throw ContractError("novel batch carries no regression targets");
    const int total_classes = student.config.total_classes();
    for (int l : novel.labels) {
        if (l < 0 || l >= total_classes) {
            throw ContractError("novel label " + std::to_string(l) + " out of range");
        }
    }

    const int r = student.config.reg_targets_per_class;
    auto n_out = student.forward(novel.features);
    auto cls_novel = cross_entropy(n_out.logits, novel.labels);
    auto reg_novel = smooth_l1(select_class_block(n_out.reg, novel.labels, r), novel.reg_targets);
    auto total = add(cls_novel, reg_novel);

    KdLossBreakdown out{};
    const bool any_replay = switches.conf || switches.feat_distill || switches.l1_distill;
    if (!forged.empty() && any_replay) {
        auto rep = replay_loss(teacher, student, forged, lambda_f, switches, &out);
        total = add(total, rep);
    }
    out.cls_novel_term = cls_novel.value();
    out.reg_novel_term = reg_novel.value();
    out.total = total.value();
    if (breakdown) *breakdown = out;
    return total;
}

// ---- Fisher / EWC -----------------------------------------------------------

std::size_t FisherInfo::value_count() const {
    std::size_t n = 0;
    for (const auto& e : entries) n += e.values.size();
    return n;
}

const FisherEntry* FisherInfo::find(std::string_view name) const {
    for (const auto& e : entries) {
        if (e.name == name) return &e;
    }
    return nullptr;
}

FisherInfo compute_fisher(const HeadModel& model, const std::vector<LabeledBatch>& stream, FisherMode mode) {
    if (stream.empty()) throw ContractError("fisher needs a non-empty sample stream");
    if (!model.trainable()) throw ContractError("fisher needs a gradient-tracking model");

    auto named = model.named_parameters();
    std::vector<std::vector<double>> accum(named.size());
    for (std::size_t p = 0; p < named.size(); ++p) {
        accum[p].assign(static_cast<std::size_t>(named[p].second.size()), 0.0);
    }
    auto params = model.parameters();
    const int r = model.config.reg_targets_per_class;

    std::uint64_t count = 0;
    for (const auto& batch : stream) {
        batch.validate();
        for (int i = 0; i < batch.size(); ++i) {
            auto one = batch.instance(i);
            for (auto& p : params) p.zero_grad();
            auto out = model.forward(one.features);
            Tensor loss = cross_entropy(out.logits, one.labels);
            if (one.has_targets()) {
                loss = add(loss, smooth_l1(select_class_block(out.reg, one.labels, r), one.reg_targets));
            }
            backward(loss);
            for (std::size_t p = 0; p < named.size(); ++p) {
                const auto g = named[p].second.grad();
                for (std::size_t k = 0; k < g.size(); ++k) accum[p][k] += g[k] * g[k];
            }
            ++count;
        }
    }
    if (count == 0) throw ContractError("fisher needs a non-empty sample stream");
    for (auto& p : params) p.zero_grad();

    FisherInfo info;
    info.mode = mode;
    for (std::size_t p = 0; p < named.size(); ++p) {
        FisherEntry entry;
        entry.name = named[p].first;
        entry.shape = named[p].second.shape();
        entry.anchor.assign(named[p].second.data().begin(), named[p].second.data().end());
        for (double& v : accum[p]) v /= static_cast<double>(count);
        if (mode == FisherMode::full_diagonal) {
            entry.values = std::move(accum[p]);
        } else {
            double m = 0.0;
            for (double v : accum[p]) m += v;
            entry.values = {m / static_cast<double>(accum[p].size())};
        }
        info.entries.push_back(std::move(entry));
    }
    return info;
}

Tensor ewc_penalty(const HeadModel& model, const FisherInfo& fisher, double lambda_ewc) {
    if (lambda_ewc < 0.0) throw ContractError("ewc strength must be non-negative");
    auto named = model.named_parameters();
    Tensor total;
    for (const auto& entry : fisher.entries) {
        const Tensor* param = nullptr;
        for (const auto& [name, t] : named) {
            if (name == entry.name) {
                param = &t;
                break;
            }
        }
        if (!param) throw ContractError("anchored parameter '" + entry.name + "' is missing from the model");
        if (param->shape() != entry.shape) {
            throw ContractError("anchored parameter '" + entry.name + "' changed shape");
        }
        auto anchor = Tensor::from_data(entry.shape, entry.anchor);
        auto drift = sub(*param, anchor);
        auto sq = mul(drift, drift);
        Tensor contrib;
        if (fisher.mode == FisherMode::full_diagonal) {
            contrib = sum(mul(sq, Tensor::from_data(entry.shape, entry.values)));
        } else {
            contrib = mul_scalar(sum(sq), entry.values[0]);
        }
        total = total.defined() ? add(total, contrib) : contrib;
    }
    if (!total.defined()) throw ContractError("fisher info holds no entries");
    return mul_scalar(total, lambda_ewc);
}

namespace {

constexpr std::string_view kFisherMagic = "NIFFFISH";
constexpr std::uint32_t kFisherVersion = 1;

}  // namespace

void FisherInfo::save(const std::string& path) const {
    BinaryWriter w(path);
    w.magic(kFisherMagic);
    w.u32(kFisherVersion);
    w.u32(mode == FisherMode::full_diagonal ? 0u : 1u);
    w.u32(static_cast<std::uint32_t>(entries.size()));
    for (const auto& e : entries) {
        w.str(e.name);
        w.u32(static_cast<std::uint32_t>(e.shape.size()));
        for (int d : e.shape) w.u32(static_cast<std::uint32_t>(d));
        w.f64_array(e.anchor);
        w.u32(static_cast<std::uint32_t>(e.values.size()));
        w.f64_array(e.values);
    }
    w.finish();
}

FisherInfo FisherInfo::load(const std::string& path) {
    BinaryReader r(path);
    r.expect_magic(kFisherMagic);
    const auto version = r.u32();
    if (version != kFisherVersion) r.fail("unsupported version " + std::to_string(version));
    FisherInfo info;
    const auto mode_tag = r.u32();
    if (mode_tag > 1) r.fail("unknown fisher mode " + std::to_string(mode_tag));
    info.mode = mode_tag == 0 ? FisherMode::full_diagonal : FisherMode::per_layer_mean;
    const auto count = r.u32();
    for (std::uint32_t i = 0; i < count; ++i) {
        FisherEntry e;
        e.name = r.str();
        const auto rank = r.u32();
        if (rank > 8) r.fail("implausible rank for '" + e.name + "'");
        e.shape.resize(rank);
        for (auto& d : e.shape) d = static_cast<int>(r.u32());
        const auto n = static_cast<std::size_t>(numel(e.shape));
        e.anchor = r.f64_array(n);
        const auto vc = r.u32();
        const auto expected = info.mode == FisherMode::full_diagonal ? n : 1u;
        if (vc != expected) r.fail("value count mismatch for '" + e.name + "'");
        e.values = r.f64_array(vc);
        for (double v : e.values) {
            if (v < 0.0) r.fail("negative importance for '" + e.name + "'");
        }
        info.entries.push_back(std::move(e));
    }
    r.expect_eof();
    return info;
}

}  // namespace niff
