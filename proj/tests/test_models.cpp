#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <vector>

#include <niff/models.hpp>
#include <niff/rng.hpp>

using namespace niff;

namespace {

Tensor random_features(Rng& rng, int n, const HeadConfig& cfg, bool track = false) {
    std::vector<double> data(static_cast<std::size_t>(n) * cfg.in_channels * cfg.spatial * cfg.spatial);
    for (double& v : data) v = rng.normal(0.5, 1.0);
    return Tensor::from_data({n, cfg.in_channels, cfg.spatial, cfg.spatial}, std::move(data), track);
}

HeadConfig small_head_config() {
    HeadConfig cfg;
    cfg.in_channels = 4;
    cfg.spatial = 5;
    cfg.block_channels = {6, 8};
    cfg.base_classes = 3;
    cfg.reg_targets_per_class = 4;
    return cfg;
}

std::filesystem::path temp_file(const char* name) {
    auto dir = std::filesystem::temp_directory_path() / "niff_models_test";
    std::filesystem::create_directories(dir);
    return dir / name;
}

bool same_values(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) return false;
    for (std::size_t i = 0; i < a.data().size(); ++i) {
        if (a.data()[i] != b.data()[i]) return false;
    }
    return true;
}

}  // namespace

TEST_CASE("head construction is deterministic in the seed") {
    auto cfg = small_head_config();
    Rng r1(99), r2(99), r3(100);
    auto a = build_head(cfg, r1);
    auto b = build_head(cfg, r2);
    auto c = build_head(cfg, r3);
    CHECK(same_values(a.cls_w, b.cls_w));
    CHECK(same_values(a.blocks[0].w, b.blocks[0].w));
    CHECK_FALSE(same_values(a.cls_w, c.cls_w));
}

TEST_CASE("norm calibration standardizes each channel on the calibration batch") {
    auto cfg = small_head_config();
    Rng rng(7);
    auto head = build_head(cfg, rng);
    auto x = random_features(rng, 16, cfg);
    head.calibrate_norms(x);
    CHECK(head.norms_calibrated());

    // Recompute the first block's normalized activations and check moments.
    auto pre = conv2d(x, head.blocks[0].w, head.blocks[0].b, 1);
    auto post = head.blocks[0].norm.apply(pre);
    const int c = post.dim(1);
    const std::int64_t spatial = static_cast<std::int64_t>(post.dim(2)) * post.dim(3);
    const std::int64_t per_channel = 16 * spatial;
    for (int ci = 0; ci < c; ++ci) {
        double sum = 0.0, sq = 0.0;
        for (int ni = 0; ni < 16; ++ni) {
            for (std::int64_t s = 0; s < spatial; ++s) {
                const double v = post.data()[static_cast<std::size_t>(((ni * c + ci)) * spatial + s)];
                sum += v;
                sq += v * v;
            }
        }
        const double mean = sum / static_cast<double>(per_channel);
        const double var = sq / static_cast<double>(per_channel) - mean * mean;
        CHECK(std::abs(mean) < 1e-10);
        CHECK(var == doctest::Approx(1.0).epsilon(1e-3));
    }
}

TEST_CASE("forward refuses uncalibrated norms and wrong shapes") {
    auto cfg = small_head_config();
    Rng rng(3);
    auto head = build_head(cfg, rng);
    auto x = random_features(rng, 2, cfg);
    CHECK_THROWS_AS(head.forward(x), ContractError);
    head.calibrate_norms(x);
    CHECK_NOTHROW(head.forward(x));
    auto bad = Tensor::zeros({2, cfg.in_channels + 1, cfg.spatial, cfg.spatial});
    CHECK_THROWS_AS(head.forward(bad), DimensionError);
}

TEST_CASE("forward produces coherent shapes and probability rows") {
    auto cfg = small_head_config();
    Rng rng(11);
    auto head = build_head(cfg, rng);
    auto x = random_features(rng, 5, cfg);
    head.calibrate_norms(x);
    auto out = head.forward(x, true);

    CHECK(out.pooled.shape() == Shape{5, cfg.pooled_dim()});
    CHECK(out.logits.shape() == Shape{5, cfg.base_classes});
    CHECK(out.reg.shape() == Shape{5, cfg.reg_targets_per_class * cfg.base_classes});
    for (int i = 0; i < 5; ++i) {
        double s = 0.0;
        for (int j = 0; j < cfg.base_classes; ++j) s += out.probs.at({i, j});
        CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
    }

    std::vector<std::string> ids;
    for (const auto& [id, t] : out.sites) ids.push_back(id);
    CHECK(ids == std::vector<std::string>{"pre_norm_0", "post_act_0", "pre_norm_1", "post_act_1", "pre_softmax",
                                          "post_softmax"});
}

TEST_CASE("watched forward feeds every enabled site") {
    auto cfg = small_head_config();
    Rng rng(13);
    auto head = build_head(cfg, rng);
    auto x = random_features(rng, 6, cfg);
    head.calibrate_norms(x);
    DataWatcher watcher({}, cfg.base_classes);
    std::vector<int> labels{0, 1, 2, 0, 1, 2};
    head.forward(x, false, &watcher, labels);
    CHECK(watcher.site_ids().size() == 6);
    CHECK(watcher.moments("pre_norm_0", 0).count == 2);
    CHECK(watcher.moments("post_softmax", 2).count == 2);
    CHECK(watcher.moments("pre_norm_0", 0).dim() == cfg.block_channels[0]);
    CHECK(watcher.moments("post_softmax", 0).dim() == cfg.base_classes);

    std::vector<int> short_labels{0, 1};
    CHECK_THROWS_AS(head.forward(x, false, &watcher, short_labels), ContractError);
}

TEST_CASE("frozen copies keep values but drop gradient tracking") {
    auto cfg = small_head_config();
    Rng rng(17);
    auto head = build_head(cfg, rng);
    auto x = random_features(rng, 4, cfg);
    head.calibrate_norms(x);
    auto teacher = head.frozen_copy();
    CHECK_FALSE(teacher.trainable());
    CHECK(head.trainable());
    CHECK(same_values(teacher.cls_w, head.cls_w));

    auto tracked = random_features(rng, 4, cfg, true);
    auto out = teacher.forward(tracked);
    backward(mean(out.logits));
    CHECK_FALSE(teacher.cls_w.has_grad());
    double total = 0.0;
    for (double g : tracked.grad()) total += std::abs(g);
    CHECK(total > 0.0);
}

TEST_CASE("expanded copy appends silent classifier rows and keeps base behavior") {
    auto cfg = small_head_config();
    Rng rng(23);
    auto head = build_head(cfg, rng);
    auto x = random_features(rng, 4, cfg);
    head.calibrate_norms(x);
    auto teacher = head.frozen_copy();

    Rng expand_rng(5);
    auto student = teacher.expanded_copy(2, expand_rng);
    CHECK(student.trainable());
    CHECK(student.config.novel_classes == 2);
    CHECK(student.config.total_classes() == 5);
    CHECK(student.cls_w_novel.shape() == Shape{2, cfg.pooled_dim()});
    for (double v : student.cls_w_novel.data()) CHECK(v == 0.0);

    auto teacher_out = teacher.forward(x);
    auto student_out = student.forward(x);
    CHECK(student_out.logits.shape() == Shape{4, 5});
    for (int i = 0; i < 4; ++i) {
        for (int j = 0; j < cfg.base_classes; ++j) {
            CHECK(student_out.logits.at({i, j}) == doctest::Approx(teacher_out.logits.at({i, j})).epsilon(1e-12));
        }
        for (int j = cfg.base_classes; j < 5; ++j) CHECK(student_out.logits.at({i, j}) == 0.0);
    }

    CHECK(student.base_parameters().size() == 4 + 2 * cfg.block_channels.size());
    CHECK(student.novel_parameters().size() == 4);
    CHECK(student.named_parameters().size() == student.parameters().size());
}

TEST_CASE("generator class heads are isolated from one another") {
    GeneratorConfig cfg;
    cfg.z_dim = 6;
    cfg.trunk_channels = 4;
    cfg.num_blocks = 1;
    cfg.out_channels = 5;
    cfg.spatial = 3;
    cfg.num_classes = 3;
    Rng rng(31);
    auto gen = build_generator(cfg, rng);

    Rng noise_rng(1);
    auto z = sample_noise(noise_rng, 4, cfg.z_dim);
    auto fake = gen.forward(z, 1);
    CHECK(fake.shape() == Shape{4, 5, 3, 3});
    backward(mean(fake));

    auto zero_grad = [](const Tensor& t) {
        for (double g : t.grad()) {
            if (g != 0.0) return false;
        }
        return true;
    };
    CHECK_FALSE(zero_grad(gen.heads[1].w));
    CHECK(zero_grad(gen.heads[0].w));
    CHECK(zero_grad(gen.heads[2].w));
    CHECK(zero_grad(gen.heads[0].b));
    CHECK_FALSE(zero_grad(gen.fc_w));

    CHECK_THROWS_AS(gen.forward(z, 3), ContractError);
    CHECK_THROWS_AS(gen.forward(z, -1), ContractError);
}

TEST_CASE("generator reproduces the published layer widths at full scale") {
    GeneratorConfig cfg;
    cfg.z_dim = 100;
    cfg.trunk_channels = 8;
    cfg.num_blocks = 5;
    cfg.out_channels = 1024;
    cfg.spatial = 7;
    cfg.num_classes = 60;
    Rng rng(41);
    auto gen = build_generator(cfg, rng);
    CHECK(gen.fc_w.shape() == Shape{392, 100});
    CHECK(gen.blocks.size() == 5);
    CHECK(gen.blocks[0].w.shape() == Shape{8, 8, 3, 3});
    CHECK(gen.heads.size() == 60);
    CHECK(gen.heads[0].w.shape() == Shape{1024, 8, 1, 1});

    Rng noise_rng(2);
    auto z = sample_noise(noise_rng, 2, cfg.z_dim);
    CHECK(gen.forward(z, 59).shape() == Shape{2, 1024, 7, 7});
}

TEST_CASE("latent noise is standard normal to sampling accuracy") {
    Rng rng(55);
    auto z = sample_noise(rng, 2000, 50);
    double sum = 0.0, sq = 0.0;
    for (double v : z.data()) {
        sum += v;
        sq += v * v;
    }
    const double n = static_cast<double>(z.size());
    const double mean = sum / n;
    const double var = sq / n - mean * mean;
    CHECK(std::abs(mean) < 0.02);
    CHECK(std::abs(var - 1.0) < 0.02);
}

TEST_CASE("head checkpoints round-trip exactly") {
    auto cfg = small_head_config();
    Rng rng(61);
    auto head = build_head(cfg, rng);
    auto x = random_features(rng, 8, cfg);
    head.calibrate_norms(x);
    Rng expand_rng(9);
    auto student = head.expanded_copy(2, expand_rng);

    auto path = temp_file("head.niffckpt");
    save_checkpoint(student, path.string());
    auto loaded = load_head_checkpoint(path.string(), false);
    CHECK_FALSE(loaded.trainable());
    CHECK(loaded.config.novel_classes == 2);
    for (std::size_t i = 0; i < student.named_parameters().size(); ++i) {
        CHECK(same_values(loaded.named_parameters()[i].second, student.named_parameters()[i].second));
    }
    CHECK(loaded.blocks[0].norm.gain == student.blocks[0].norm.gain);
    CHECK(loaded.blocks[1].norm.offset == student.blocks[1].norm.offset);

    auto out_a = student.forward(x);
    auto out_b = loaded.forward(x);
    CHECK(same_values(out_a.logits, out_b.logits));
    CHECK(same_values(out_a.reg, out_b.reg));

    auto trainable = load_head_checkpoint(path.string(), true);
    CHECK(trainable.trainable());

    // Saving the loaded model again must reproduce the file byte for byte.
    auto path2 = temp_file("head2.niffckpt");
    save_checkpoint(loaded, path2.string());
    std::ifstream f1(path, std::ios::binary), f2(path2, std::ios::binary);
    std::string b1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
    std::string b2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
    CHECK(b1 == b2);
}

TEST_CASE("generator checkpoints round-trip exactly") {
    GeneratorConfig cfg;
    cfg.z_dim = 6;
    cfg.trunk_channels = 4;
    cfg.num_blocks = 2;
    cfg.out_channels = 5;
    cfg.spatial = 3;
    cfg.num_classes = 3;
    Rng rng(71);
    auto gen = build_generator(cfg, rng);
    auto path = temp_file("gen.niffckpt");
    save_checkpoint(gen, path.string());
    auto loaded = load_generator_checkpoint(path.string(), true);
    CHECK(loaded.parameters().size() == gen.parameters().size());

    Rng noise_rng(3);
    auto z = sample_noise(noise_rng, 3, cfg.z_dim);
    CHECK(same_values(gen.forward(z, 2), loaded.forward(z, 2)));
}

TEST_CASE("checkpoint loaders reject mismatched kinds and mangled files") {
    GeneratorConfig cfg;
    cfg.z_dim = 4;
    cfg.trunk_channels = 2;
    cfg.num_blocks = 1;
    cfg.out_channels = 3;
    cfg.spatial = 2;
    cfg.num_classes = 2;
    Rng rng(81);
    auto gen = build_generator(cfg, rng);
    auto path = temp_file("kind.niffckpt");
    save_checkpoint(gen, path.string());
    CHECK_THROWS_AS(load_head_checkpoint(path.string(), true), ArtifactError);

    auto truncated = temp_file("short.niffckpt");
    {
        std::ofstream out(truncated, std::ios::binary);
        out << "NIFFCKPT";
    }
    CHECK_THROWS_AS(load_generator_checkpoint(truncated.string(), true), ArtifactError);
}
