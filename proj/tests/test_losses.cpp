#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <functional>
#include <iterator>
#include <string>
#include <vector>

#include <niff/batch.hpp>
#include <niff/errors.hpp>
#include <niff/losses.hpp>
#include <niff/models.hpp>
#include <niff/rng.hpp>
#include <niff/stats.hpp>
#include <niff/tensor.hpp>

#include "loss_gradient_scenarios.hpp"

using namespace niff;
namespace d = gradcheck::detail;

namespace {

LabeledBatch random_forged(Rng& rng, const HeadConfig& cfg, int n, int classes) {
    LabeledBatch b;
    b.features = d::rand_tensor(rng, {n, cfg.in_channels, cfg.spatial, cfg.spatial}, -1.0, 1.0, false);
    b.labels = d::rand_labels(rng, n, classes);
    return b;
}

}  // namespace

TEST_CASE("divergence is exactly zero for identical statistics") {
    std::vector<double> mu{0.3, -1.2, 4.0};
    std::vector<double> var{0.5, 2.0, 1e-4};
    CHECK(kl_gaussian_diag(mu, var, mu, var, 1e-8) == 0.0);
}

TEST_CASE("divergence matches the closed form for a unit mean shift") {
    std::vector<double> mu{0.0}, var{1.0}, mu_f{1.0}, var_f{1.0};
    CHECK(kl_gaussian_diag(mu, var, mu_f, var_f, 1e-30) == doctest::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("divergence is non-negative on random statistics") {
    Rng rng(41);
    for (int trial = 0; trial < 1000; ++trial) {
        const int dim = rng.uniform_int(1, 6);
        std::vector<double> mu(dim), var(dim), mu_f(dim), var_f(dim);
        for (int i = 0; i < dim; ++i) {
            mu[i] = rng.uniform(-5.0, 5.0);
            mu_f[i] = rng.uniform(-5.0, 5.0);
            var[i] = rng.uniform(0.0, 4.0);
            var_f[i] = rng.uniform(0.0, 4.0);
        }
        CHECK(kl_gaussian_diag(mu, var, mu_f, var_f, 1e-8) >= -1e-12);
    }
}

TEST_CASE("divergence rejects malformed statistics") {
    std::vector<double> one{1.0}, two{1.0, 2.0}, neg{-0.5};
    CHECK_THROWS_AS(kl_gaussian_diag(one, one, one, two, 1e-8), DimensionError);
    CHECK_THROWS_AS(kl_gaussian_diag(one, neg, one, one, 1e-8), ContractError);
    CHECK_THROWS_AS(kl_gaussian_diag(one, one, one, neg, 1e-8), ContractError);
    CHECK_THROWS_AS(kl_gaussian_diag(one, one, one, one, 0.0), ContractError);
    CHECK_THROWS_AS(kl_gaussian_diag({}, {}, {}, {}, 1e-8), DimensionError);
}

TEST_CASE("alignment divergence vanishes when forged features replay the recorded ones") {
    Rng rng(123);
    auto teacher = d::tiny_head(rng);
    const int classes = teacher.config.base_classes;
    DataWatcher watcher(WatcherConfig{}, classes);
    std::vector<Tensor> per_class;
    for (int c = 0; c < classes; ++c) {
        auto x = d::rand_tensor(rng, {8, 4, 3, 3}, -1.0, 1.0, false);
        std::vector<int> labels(8, c);
        teacher.forward(x, false, &watcher, labels);
        per_class.push_back(x);
    }
    auto snap = watcher.snapshot();
    for (int c = 0; c < classes; ++c) {
        auto aligned = class_alignment_loss(snap, teacher, per_class[static_cast<std::size_t>(c)], c, {});
        CHECK(std::abs(aligned.kl_mean) < 1e-6);
    }
}

TEST_CASE("generator loss divergence vanishes against statistics of its own output") {
    Rng rng(7);
    auto teacher = d::tiny_head(rng);
    GeneratorConfig gc;
    gc.z_dim = 4;
    gc.trunk_channels = 3;
    gc.num_blocks = 1;
    gc.out_channels = 4;
    gc.spatial = 3;
    gc.num_classes = 3;
    auto g = build_generator(gc, rng);

    DataWatcher watcher(WatcherConfig{}, 3);
    Rng data_rng(77);
    for (int c = 0; c < 3; ++c) {
        auto fake = g.forward(sample_noise(data_rng, 6, gc.z_dim), c);
        std::vector<int> labels(6, c);
        teacher.forward(fake.detached(), false, &watcher, labels);
    }
    auto snap = watcher.snapshot();

    Rng loss_rng(77);
    auto bd = generator_loss(snap, teacher, g, 6, {}, loss_rng, false);
    CHECK(std::abs(bd.kl_term) < 1e-6);
    CHECK(bd.total == doctest::Approx(bd.kl_term + bd.ce_term).epsilon(1e-12));
    CHECK(bd.mean_class_prob >= 0.0);
    CHECK(bd.mean_class_prob <= 1.0);
}

TEST_CASE("cross-entropy term equals log class count under a uniform teacher") {
    Rng rng(15);
    auto teacher = d::tiny_head(rng);
    auto snap = d::observe_snapshot(teacher, rng, 6);
    for (double& v : teacher.cls_w.data_mut()) v = 0.0;
    for (double& v : teacher.cls_b.data_mut()) v = 0.0;

    GeneratorConfig gc;
    gc.z_dim = 4;
    gc.trunk_channels = 3;
    gc.num_blocks = 0;
    gc.out_channels = 4;
    gc.spatial = 3;
    gc.num_classes = 3;
    auto g = build_generator(gc, rng);

    Rng loss_rng(3);
    auto bd = generator_loss(snap, teacher, g, 4, {}, loss_rng, false);
    CHECK(bd.ce_term == doctest::Approx(std::log(3.0)).epsilon(1e-12));
    CHECK(bd.mean_class_prob == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
}

TEST_CASE("generator loss accumulation equals one backward pass over the summed objective") {
    Rng rng(29);
    auto teacher = d::tiny_head(rng);
    auto snap = d::observe_snapshot(teacher, rng, 6);
    GeneratorConfig gc;
    gc.z_dim = 4;
    gc.trunk_channels = 3;
    gc.num_blocks = 1;
    gc.out_channels = 4;
    gc.spatial = 3;
    gc.num_classes = 3;
    auto g = build_generator(gc, rng);
    auto params = g.parameters();

    Rng r1(5);
    for (auto p : params) p.zero_grad();
    generator_loss(snap, teacher, g, 4, {}, r1, true);
    std::vector<std::vector<double>> accumulated;
    for (const auto& p : params) accumulated.emplace_back(p.grad().begin(), p.grad().end());

    Rng r2(5);
    for (auto p : params) p.zero_grad();
    Tensor total;
    for (int c = 0; c < 3; ++c) {
        auto fake = g.forward(sample_noise(r2, 4, gc.z_dim), c);
        auto partial = class_alignment_loss(snap, teacher, fake, c, {}).partial;
        total = total.defined() ? add(total, partial) : partial;
    }
    backward(total);
    for (std::size_t p = 0; p < params.size(); ++p) {
        const auto g2 = params[p].grad();
        for (std::size_t i = 0; i < g2.size(); ++i) {
            CHECK(accumulated[p][i] == doctest::Approx(g2[i]).epsilon(1e-10));
        }
    }
}

TEST_CASE("alignment contract violations are rejected") {
    Rng rng(31);
    auto teacher = d::tiny_head(rng);
    auto snap = d::observe_snapshot(teacher, rng, 6);
    auto fake = d::rand_tensor(rng, {4, 4, 3, 3}, -1.0, 1.0, false);
    auto single = d::rand_tensor(rng, {1, 4, 3, 3}, -1.0, 1.0, false);

    CHECK_THROWS_AS(class_alignment_loss(snap, teacher, single, 0, {}), InsufficientDataError);
    CHECK_THROWS_AS(class_alignment_loss(snap, teacher, fake, 3, {}), ContractError);
    CHECK_THROWS_AS(class_alignment_loss(snap, teacher, fake, -1, {}), ContractError);

    auto bad_slots = snap;
    bad_slots.num_class_slots = 2;
    CHECK_THROWS_AS(class_alignment_loss(bad_slots, teacher, fake, 0, {}), ContractError);

    auto bad_site = snap;
    bad_site.sites[0].site_id = "pre_norm_9";
    CHECK_THROWS_AS(class_alignment_loss(bad_site, teacher, fake, 0, {}), ContractError);

    auto expanded = teacher.expanded_copy(2, rng);
    CHECK_THROWS_AS(class_alignment_loss(snap, expanded, fake, 0, {}), ContractError);

    Rng loss_rng(1);
    GeneratorConfig gc;
    gc.z_dim = 4;
    gc.trunk_channels = 3;
    gc.num_blocks = 0;
    gc.out_channels = 4;
    gc.spatial = 3;
    gc.num_classes = 3;
    auto g = build_generator(gc, rng);
    CHECK_THROWS_AS(generator_loss(snap, teacher, g, 1, {}, loss_rng, false), InsufficientDataError);
}

TEST_CASE("replay distillation is zero between identical networks") {
    auto cfg = d::tiny_head_config();
    Rng ra(9), rb(9), rng(100);
    auto teacher = build_head(cfg, ra);
    auto student = build_head(cfg, rb);
    auto calib = d::rand_tensor(rng, {16, 4, 3, 3}, -1.0, 1.0, false);
    teacher.calibrate_norms(calib);
    student.calibrate_norms(calib);

    auto forged = random_forged(rng, cfg, 5, cfg.base_classes);
    KdLossBreakdown bd{};
    auto total = kd_loss(teacher, student, forged, 0.1, &bd);
    CHECK(total.value() == 0.0);
    CHECK(bd.cls_feat_term == 0.0);
    CHECK(bd.reg_feat_term == 0.0);
    CHECK(bd.reg_l1_term == 0.0);

    for (double& v : student.blocks[0].w.data_mut()) v += 0.05;
    CHECK(kd_loss(teacher, student, forged, 0.1).value() > 0.0);
}

TEST_CASE("zeroing a classifier row removes that class from the feature term") {
    Rng rng(44);
    auto teacher = d::tiny_head(rng);
    auto student = d::tiny_head(rng);
    LabeledBatch forged = random_forged(rng, teacher.config, 4, 1);  // labels all 0

    KdLossBreakdown before{};
    kd_loss(teacher, student, forged, 0.1, &before);
    CHECK(before.cls_feat_term > 0.0);

    auto row = student.cls_w.data_mut();
    const int dim = student.cls_w.dim(1);
    for (int i = 0; i < dim; ++i) row[static_cast<std::size_t>(i)] = 0.0;

    KdLossBreakdown after{};
    kd_loss(teacher, student, forged, 0.1, &after);
    CHECK(after.cls_feat_term == 0.0);
    CHECK(after.reg_feat_term > 0.0);
}

TEST_CASE("distillation weight rows act as constants in the gradient") {
    Rng rng(45);
    auto teacher = d::tiny_head(rng);
    auto student = d::tiny_head(rng);
    auto forged = random_forged(rng, teacher.config, 4, teacher.config.base_classes);
    for (auto p : student.parameters()) p.zero_grad();
    backward(kd_loss(teacher, student, forged, 0.1));
    for (double v : student.cls_w.grad()) CHECK(v == 0.0);
    double trunk_grad = 0.0;
    for (double v : student.blocks[0].w.grad()) trunk_grad += std::abs(v);
    CHECK(trunk_grad > 0.0);
}

TEST_CASE("replay losses reject novel labels and empty batches") {
    Rng rng(46);
    auto teacher = d::tiny_head(rng);
    auto student = d::tiny_head(rng, 2);
    LabeledBatch forged = random_forged(rng, teacher.config, 3, teacher.config.base_classes);
    forged.labels[1] = teacher.config.base_classes;  // novel id
    CHECK_THROWS_AS(kd_loss(teacher, student, forged, 0.1), ContractError);
    CHECK_THROWS_AS(kd_loss(teacher, student, LabeledBatch{}, 0.1), ContractError);
    CHECK_THROWS_AS(conf_loss(student, LabeledBatch{}), ContractError);
    LabeledBatch out_of_range = random_forged(rng, student.config, 3, student.config.base_classes);
    out_of_range.labels[0] = student.config.total_classes();
    CHECK_THROWS_AS(conf_loss(student, out_of_range), ContractError);
}

TEST_CASE("confidence loss equals log class count under uniform predictions") {
    Rng rng(47);
    auto student = d::tiny_head(rng, 2);
    for (double& v : student.cls_w.data_mut()) v = 0.0;
    for (double& v : student.cls_b.data_mut()) v = 0.0;
    for (double& v : student.cls_w_novel.data_mut()) v = 0.0;
    for (double& v : student.cls_b_novel.data_mut()) v = 0.0;
    auto forged = random_forged(rng, student.config, 6, student.config.base_classes);
    CHECK(conf_loss(student, forged).value() == doctest::Approx(std::log(5.0)).epsilon(1e-12));
}

TEST_CASE("confidence loss approaches zero for a sharply correct student") {
    niff::HeadConfig cfg = d::tiny_head_config();
    cfg.base_classes = 2;
    Rng rng(48);
    auto student = build_head(cfg, rng);
    student.calibrate_norms(d::rand_tensor(rng, {16, 4, 3, 3}, -1.0, 1.0, false));

    auto x0 = d::rand_tensor(rng, {1, 4, 3, 3}, -1.0, 1.0, false);
    auto x1 = d::rand_tensor(rng, {1, 4, 3, 3}, -1.0, 1.0, false);
    auto p0 = student.forward(x0).pooled;
    auto p1 = student.forward(x1).pooled;

    const int dim = cfg.pooled_dim();
    std::vector<double> w(static_cast<std::size_t>(dim));
    double sep = 0.0, mid_dot = 0.0;
    for (int i = 0; i < dim; ++i) {
        w[static_cast<std::size_t>(i)] = p0.at({0, i}) - p1.at({0, i});
        sep += w[static_cast<std::size_t>(i)] * w[static_cast<std::size_t>(i)];
        mid_dot += w[static_cast<std::size_t>(i)] * 0.5 * (p0.at({0, i}) + p1.at({0, i}));
    }
    const double kappa = 60.0 / sep;
    auto rows = student.cls_w.data_mut();
    for (int i = 0; i < dim; ++i) {
        rows[static_cast<std::size_t>(i)] = kappa * w[static_cast<std::size_t>(i)];
        rows[static_cast<std::size_t>(dim + i)] = -kappa * w[static_cast<std::size_t>(i)];
    }
    auto bias = student.cls_b.data_mut();
    bias[0] = -kappa * mid_dot;
    bias[1] = kappa * mid_dot;

    LabeledBatch forged;
    std::vector<double> both(x0.data().begin(), x0.data().end());
    both.insert(both.end(), x1.data().begin(), x1.data().end());
    forged.features = Tensor::from_data({2, 4, 3, 3}, std::move(both));
    forged.labels = {0, 1};
    CHECK(conf_loss(student, forged).value() < 1e-12);
}

TEST_CASE("novel loss with everything disabled reduces to plain finetuning") {
    Rng rng(50);
    auto teacher = d::tiny_head(rng);
    auto student = d::tiny_head(rng, 2);
    LabeledBatch novel;
    novel.features = d::rand_tensor(rng, {4, 4, 3, 3}, -1.0, 1.0, false);
    novel.labels = {3, 4, 4, 3};
    novel.reg_targets = d::rand_tensor(rng, {4, 2}, -2.0, 2.0, false);

    LossSwitches off{false, false, false};
    auto total = novel_loss(student, teacher, novel, LabeledBatch{}, 0.1, off);

    auto out = student.forward(novel.features);
    auto ce = cross_entropy(out.logits, novel.labels);
    auto sl = smooth_l1(select_class_block(out.reg, novel.labels, 2), novel.reg_targets);
    CHECK(total.value() == ce.value() + sl.value());

    KdLossBreakdown bd{};
    auto with_empty = novel_loss(student, teacher, novel, LabeledBatch{}, 0.1, LossSwitches{}, &bd);
    CHECK(with_empty.value() == total.value());
    CHECK(bd.conf_term == 0.0);
    CHECK(bd.cls_feat_term == 0.0);
}

TEST_CASE("a student cloned from the teacher has zero distillation terms") {
    Rng rng(51);
    auto teacher = d::tiny_head(rng);
    auto student = teacher.expanded_copy(2, rng);
    auto forged = random_forged(rng, teacher.config, 4, teacher.config.base_classes);
    LabeledBatch novel;
    novel.features = d::rand_tensor(rng, {3, 4, 3, 3}, -1.0, 1.0, false);
    novel.labels = {3, 4, 3};
    novel.reg_targets = d::rand_tensor(rng, {3, 2}, -2.0, 2.0, false);

    KdLossBreakdown bd{};
    auto total = novel_loss(student, teacher, novel, forged, 0.1, LossSwitches{}, &bd);
    CHECK(bd.cls_feat_term == 0.0);
    CHECK(bd.reg_feat_term == 0.0);
    CHECK(bd.reg_l1_term == 0.0);
    CHECK(bd.conf_term > 0.0);
    CHECK(total.value() == doctest::Approx(bd.cls_novel_term + bd.reg_novel_term + bd.conf_term).epsilon(1e-12));
}

TEST_CASE("disabling a term subtracts exactly its breakdown value") {
    Rng rng(52);
    auto teacher = d::tiny_head(rng);
    auto student = d::tiny_head(rng, 2);
    auto forged = random_forged(rng, teacher.config, 4, teacher.config.base_classes);
    LabeledBatch novel;
    novel.features = d::rand_tensor(rng, {4, 4, 3, 3}, -1.0, 1.0, false);
    novel.labels = {3, 4, 4, 3};
    novel.reg_targets = d::rand_tensor(rng, {4, 2}, -2.0, 2.0, false);

    KdLossBreakdown all{};
    const double full = novel_loss(student, teacher, novel, forged, 0.1, LossSwitches{}, &all).value();

    LossSwitches no_conf{false, true, true};
    CHECK(novel_loss(student, teacher, novel, forged, 0.1, no_conf).value() ==
          doctest::Approx(full - all.conf_term).epsilon(1e-12));

    LossSwitches no_feat{true, false, true};
    CHECK(novel_loss(student, teacher, novel, forged, 0.1, no_feat).value() ==
          doctest::Approx(full - all.cls_feat_term - all.reg_feat_term).epsilon(1e-12));

    LossSwitches no_l1{true, true, false};
    CHECK(novel_loss(student, teacher, novel, forged, 0.1, no_l1).value() ==
          doctest::Approx(full - all.reg_l1_term).epsilon(1e-12));
}

TEST_CASE("enabling the confidence term changes base classifier gradients") {
    Rng rng(53);
    auto teacher = d::tiny_head(rng);
    auto student = d::tiny_head(rng, 2);
    auto forged = random_forged(rng, teacher.config, 4, teacher.config.base_classes);
    LabeledBatch novel;
    novel.features = d::rand_tensor(rng, {4, 4, 3, 3}, -1.0, 1.0, false);
    novel.labels = {3, 4, 4, 3};
    novel.reg_targets = d::rand_tensor(rng, {4, 2}, -2.0, 2.0, false);

    auto grads_with = [&](const LossSwitches& sw) {
        for (auto p : student.parameters()) p.zero_grad();
        backward(novel_loss(student, teacher, novel, forged, 0.1, sw));
        return std::vector<double>(student.cls_w.grad().begin(), student.cls_w.grad().end());
    };
    auto off = grads_with(LossSwitches{false, true, true});
    auto on = grads_with(LossSwitches{true, true, true});
    double diff = 0.0;
    for (std::size_t i = 0; i < off.size(); ++i) diff = std::max(diff, std::abs(on[i] - off[i]));
    CHECK(diff > 1e-9);
}

TEST_CASE("novel loss validates its batches") {
    Rng rng(54);
    auto teacher = d::tiny_head(rng);
    auto student = d::tiny_head(rng, 2);
    LabeledBatch novel;
    novel.features = d::rand_tensor(rng, {2, 4, 3, 3}, -1.0, 1.0, false);
    novel.labels = {3, 4};
    CHECK_THROWS_AS(novel_loss(student, teacher, novel, LabeledBatch{}, 0.1, LossSwitches{}), ContractError);
    novel.reg_targets = d::rand_tensor(rng, {2, 2}, -1.0, 1.0, false);
    novel.labels = {3, 7};
    CHECK_THROWS_AS(novel_loss(student, teacher, novel, LabeledBatch{}, 0.1, LossSwitches{}), ContractError);
    CHECK_THROWS_AS(novel_loss(student, teacher, LabeledBatch{}, LabeledBatch{}, 0.1, LossSwitches{}),
                    ContractError);
}

TEST_CASE("diagonal importance equals the brute-force per-sample average") {
    Rng rng(60);
    auto head = d::tiny_head(rng);
    std::vector<LabeledBatch> stream(1);
    stream[0].features = d::rand_tensor(rng, {3, 4, 3, 3}, -1.0, 1.0, false);
    stream[0].labels = {0, 2, 1};
    stream[0].reg_targets = d::rand_tensor(rng, {3, 2}, -1.0, 1.0, false);

    auto fisher = compute_fisher(head, stream, FisherMode::full_diagonal);

    auto named = head.named_parameters();
    std::vector<std::vector<double>> oracle(named.size());
    for (std::size_t p = 0; p < named.size(); ++p) oracle[p].assign(named[p].second.size(), 0.0);
    for (int i = 0; i < 3; ++i) {
        auto one = stream[0].instance(i);
        for (auto p : head.parameters()) p.zero_grad();
        auto out = head.forward(one.features);
        auto loss = add(cross_entropy(out.logits, one.labels),
                        smooth_l1(select_class_block(out.reg, one.labels, 2), one.reg_targets));
        backward(loss);
        for (std::size_t p = 0; p < named.size(); ++p) {
            auto g = named[p].second.grad();
            for (std::size_t k = 0; k < g.size(); ++k) oracle[p][k] += g[k] * g[k] / 3.0;
        }
    }
    for (std::size_t p = 0; p < named.size(); ++p) {
        const auto* entry = fisher.find(named[p].first);
        REQUIRE(entry != nullptr);
        REQUIRE(entry->values.size() == oracle[p].size());
        for (std::size_t k = 0; k < oracle[p].size(); ++k) {
            CHECK(entry->values[k] == doctest::Approx(oracle[p][k]).epsilon(1e-12));
            CHECK(entry->values[k] >= 0.0);
        }
    }
}

TEST_CASE("parameters outside the loss path get zero importance") {
    Rng rng(62);
    auto head = d::tiny_head(rng);
    std::vector<LabeledBatch> stream(1);
    stream[0].features = d::rand_tensor(rng, {3, 4, 3, 3}, -1.0, 1.0, false);
    stream[0].labels = {0, 1, 2};  // no regression targets in the stream

    auto fisher = compute_fisher(head, stream, FisherMode::full_diagonal);
    for (const auto& name : {"reg.w", "reg.b"}) {
        const auto* entry = fisher.find(name);
        REQUIRE(entry != nullptr);
        for (double v : entry->values) CHECK(v == 0.0);
    }
}

TEST_CASE("per-layer importance stores one scalar per parameter tensor") {
    Rng rng(63);
    auto head = d::tiny_head(rng);
    std::vector<LabeledBatch> stream(1);
    stream[0].features = d::rand_tensor(rng, {3, 4, 3, 3}, -1.0, 1.0, false);
    stream[0].labels = {0, 1, 2};
    stream[0].reg_targets = d::rand_tensor(rng, {3, 2}, -1.0, 1.0, false);

    auto full = compute_fisher(head, stream, FisherMode::full_diagonal);
    auto layer = compute_fisher(head, stream, FisherMode::per_layer_mean);

    CHECK(layer.value_count() == head.named_parameters().size());
    CHECK(full.value_count() > layer.value_count());
    for (const auto& e : layer.entries) {
        const auto* f = full.find(e.name);
        REQUIRE(f != nullptr);
        double mean = 0.0;
        for (double v : f->values) mean += v;
        mean /= static_cast<double>(f->values.size());
        CHECK(e.values.size() == 1);
        CHECK(e.values[0] == doctest::Approx(mean).epsilon(1e-12));
    }
}

TEST_CASE("importance estimation rejects an empty stream and frozen models") {
    Rng rng(64);
    auto head = d::tiny_head(rng);
    CHECK_THROWS_AS(compute_fisher(head, {}, FisherMode::full_diagonal), ContractError);
    auto frozen = head.frozen_copy();
    std::vector<LabeledBatch> stream(1);
    stream[0].features = d::rand_tensor(rng, {2, 4, 3, 3}, -1.0, 1.0, false);
    stream[0].labels = {0, 1};
    CHECK_THROWS_AS(compute_fisher(frozen, stream, FisherMode::full_diagonal), ContractError);
}

TEST_CASE("anchored penalty arithmetic on a single coordinate") {
    Rng rng(65);
    auto head = d::tiny_head(rng);
    FisherInfo fisher;
    fisher.mode = FisherMode::full_diagonal;
    FisherEntry entry;
    entry.name = "cls.b";
    entry.shape = head.cls_b.shape();
    entry.anchor.assign(head.cls_b.data().begin(), head.cls_b.data().end());
    entry.anchor[0] -= 3.0;  // drift of exactly 3 on the first coordinate
    entry.values.assign(entry.anchor.size(), 0.0);
    entry.values[0] = 2.0;
    fisher.entries.push_back(entry);

    CHECK(ewc_penalty(head, fisher, 0.01).value() == doctest::Approx(0.18).epsilon(1e-12));
    CHECK(ewc_penalty(head, fisher, 0.0).value() == 0.0);
}

TEST_CASE("anchored penalty is zero without drift and grows with it") {
    Rng rng(66);
    auto head = d::tiny_head(rng);
    std::vector<LabeledBatch> stream(1);
    stream[0].features = d::rand_tensor(rng, {3, 4, 3, 3}, -1.0, 1.0, false);
    stream[0].labels = {0, 1, 2};
    stream[0].reg_targets = d::rand_tensor(rng, {3, 2}, -1.0, 1.0, false);
    auto fisher = compute_fisher(head, stream, FisherMode::full_diagonal);

    CHECK(ewc_penalty(head, fisher, 5.0).value() == 0.0);

    auto bias = head.cls_b.data_mut();
    const double saved = bias[0];
    bias[0] = saved + 1.0;
    const double at_one = ewc_penalty(head, fisher, 5.0).value();
    bias[0] = saved + 2.0;
    const double at_two = ewc_penalty(head, fisher, 5.0).value();
    bias[0] = saved;
    CHECK(at_one >= 0.0);
    CHECK(at_two >= at_one);
}

TEST_CASE("layer-scalar penalty equals diagonal penalty when a layer shares one value") {
    Rng rng(67);
    auto head = d::tiny_head(rng);
    FisherInfo full, collapsed;
    full.mode = FisherMode::full_diagonal;
    collapsed.mode = FisherMode::per_layer_mean;
    double c = 0.2;
    for (const auto& [name, p] : head.named_parameters()) {
        FisherEntry fe;
        fe.name = name;
        fe.shape = p.shape();
        fe.anchor.assign(p.data().begin(), p.data().end());
        fe.values.assign(static_cast<std::size_t>(p.size()), c);
        full.entries.push_back(fe);
        fe.values = {c};
        collapsed.entries.push_back(fe);
        c += 0.13;
    }
    for (auto p : head.parameters()) {
        for (double& v : p.data_mut()) v += rng.uniform(-0.5, 0.5);
    }
    CHECK(ewc_penalty(head, full, 0.01).value() ==
          doctest::Approx(ewc_penalty(head, collapsed, 0.01).value()).epsilon(1e-12));
}

TEST_CASE("novel rows sit outside the anchored penalty") {
    Rng rng(68);
    auto teacher = d::tiny_head(rng);
    std::vector<LabeledBatch> stream(1);
    stream[0].features = d::rand_tensor(rng, {3, 4, 3, 3}, -1.0, 1.0, false);
    stream[0].labels = {0, 1, 2};
    auto fisher = compute_fisher(teacher, stream, FisherMode::per_layer_mean);

    auto student = teacher.expanded_copy(2, rng);
    CHECK(ewc_penalty(student, fisher, 1.0).value() == 0.0);
    for (double& v : student.cls_w_novel.data_mut()) v += 2.0;
    CHECK(ewc_penalty(student, fisher, 1.0).value() == 0.0);
    for (double& v : student.cls_w.data_mut()) v += 0.1;
    CHECK(ewc_penalty(student, fisher, 1.0).value() > 0.0);
}

TEST_CASE("anchored penalty rejects mismatched models") {
    Rng rng(69);
    auto head = d::tiny_head(rng);
    std::vector<LabeledBatch> stream(1);
    stream[0].features = d::rand_tensor(rng, {2, 4, 3, 3}, -1.0, 1.0, false);
    stream[0].labels = {0, 1};
    auto fisher = compute_fisher(head, stream, FisherMode::full_diagonal);

    auto renamed = fisher;
    renamed.entries[0].name = "missing.layer";
    CHECK_THROWS_AS(ewc_penalty(head, renamed, 1.0), ContractError);

    HeadConfig other_cfg = d::tiny_head_config();
    other_cfg.block_channels = {6};
    auto other = build_head(other_cfg, rng);
    other.calibrate_norms(d::rand_tensor(rng, {8, 4, 3, 3}, -1.0, 1.0, false));
    CHECK_THROWS_AS(ewc_penalty(other, fisher, 1.0), ContractError);

    CHECK_THROWS_AS(ewc_penalty(head, FisherInfo{}, 1.0), ContractError);
    CHECK_THROWS_AS(ewc_penalty(head, fisher, -0.5), ContractError);
}

TEST_CASE("importance tables round-trip through their file format") {
    Rng rng(70);
    auto head = d::tiny_head(rng);
    std::vector<LabeledBatch> stream(1);
    stream[0].features = d::rand_tensor(rng, {3, 4, 3, 3}, -1.0, 1.0, false);
    stream[0].labels = {0, 1, 2};
    stream[0].reg_targets = d::rand_tensor(rng, {3, 2}, -1.0, 1.0, false);

    for (auto mode : {FisherMode::full_diagonal, FisherMode::per_layer_mean}) {
        auto fisher = compute_fisher(head, stream, mode);
        const std::string path = "fisher_roundtrip.bin";
        fisher.save(path);
        auto loaded = FisherInfo::load(path);
        CHECK(loaded.mode == fisher.mode);
        REQUIRE(loaded.entries.size() == fisher.entries.size());
        for (std::size_t i = 0; i < fisher.entries.size(); ++i) {
            CHECK(loaded.entries[i].name == fisher.entries[i].name);
            CHECK(loaded.entries[i].shape == fisher.entries[i].shape);
            CHECK(loaded.entries[i].anchor == fisher.entries[i].anchor);
            CHECK(loaded.entries[i].values == fisher.entries[i].values);
        }
    }
}

TEST_CASE("truncated importance files are rejected") {
    Rng rng(71);
    auto head = d::tiny_head(rng);
    std::vector<LabeledBatch> stream(1);
    stream[0].features = d::rand_tensor(rng, {2, 4, 3, 3}, -1.0, 1.0, false);
    stream[0].labels = {0, 1};
    auto fisher = compute_fisher(head, stream, FisherMode::full_diagonal);
    fisher.save("fisher_trunc.bin");
    {
        std::ifstream in("fisher_trunc.bin", std::ios::binary);
        std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
        std::ofstream out("fisher_trunc.bin", std::ios::binary | std::ios::trunc);
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size() / 2));
    }
    CHECK_THROWS_AS(FisherInfo::load("fisher_trunc.bin"), ArtifactError);
}

TEST_CASE("loss gradients match finite differences") {
    for (const auto& scenario : gradcheck::loss_scenarios()) {
        CAPTURE(scenario.name);
        for (int trial = 0; trial < 3; ++trial) {
            Rng rng(Rng(900 + trial).fork(std::hash<std::string>{}(scenario.name)).next());
            CHECK(scenario.max_rel_err(rng) < 1e-4);
        }
    }
}
