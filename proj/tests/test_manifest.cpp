#include <doctest.h>

#include <cstdio>
#include <fstream>
#include <string>

#include "niff/batch.hpp"
#include "niff/errors.hpp"
#include "niff/manifest.hpp"
#include "niff/rng.hpp"
#include "niff/tensor.hpp"

using namespace niff;

namespace {

Tensor rand_tensor(Rng& rng, Shape shape) {
    std::vector<double> data(static_cast<std::size_t>(numel(shape)));
    for (double& v : data) v = rng.normal();
    return Tensor::from_data(std::move(shape), std::move(data));
}

void write_file(const std::string& path, const std::string& content) {
    std::ofstream out(path, std::ios::trunc | std::ios::binary);
    out << content;
}

std::string slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    REQUIRE(in.good());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

TEST_CASE("sha-256 matches the published test vectors") {
    CHECK(sha256_hex("") == "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
    CHECK(sha256_hex("abc") == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");

    const std::string path = "/tmp/niff_hash_probe.bin";
    const std::string payload = "the quick brown fox\n";
    write_file(path, payload);
    CHECK(sha256_file(path) == sha256_hex(payload));

    CHECK_THROWS_AS(sha256_file("/tmp/niff_no_such_file.bin"), ArtifactError);
}

TEST_CASE("timestamps are iso-8601 utc") {
    const auto stamp = utc_timestamp();
    REQUIRE(stamp.size() == 20);
    CHECK(stamp[4] == '-');
    CHECK(stamp[10] == 'T');
    CHECK(stamp[19] == 'Z');
}

TEST_CASE("manifest records, verifies, and survives a round trip") {
    const std::string dir = "/tmp";
    write_file("/tmp/niff_art_a.bin", "alpha");
    write_file("/tmp/niff_art_b.bin", "beta");

    RunManifest m;
    m.config_hash = sha256_hex("config bytes");
    m.seeds = {0, 17};
    m.created_at = utc_timestamp();
    m.add_artifact("a", dir, "niff_art_a.bin");
    m.add_artifact("b", dir, "niff_art_b.bin");

    SUBCASE("verify passes while files are intact") {
        m.verify(dir);
        CHECK(m.verified_path("a", dir) == "/tmp/niff_art_a.bin");
    }

    SUBCASE("same-name artifacts replace instead of accumulating") {
        write_file("/tmp/niff_art_a.bin", "alpha v2");
        m.add_artifact("a", dir, "niff_art_a.bin");
        CHECK(m.artifacts.size() == 2);
        m.verify(dir);
    }

    SUBCASE("tampering is detected and named") {
        write_file("/tmp/niff_art_b.bin", "betb");
        CHECK_THROWS_WITH_AS(m.verify(dir), doctest::Contains("niff_art_b.bin"), ArtifactError);
    }

    SUBCASE("a deleted artifact is reported as missing") {
        std::remove("/tmp/niff_art_a.bin");
        CHECK_THROWS_WITH_AS(m.verified_path("a", dir), doctest::Contains("missing"), ArtifactError);
    }

    SUBCASE("unknown slots point at the producing stage") {
        CHECK_THROWS_WITH_AS(m.verified_path("nonexistent", dir), doctest::Contains("nonexistent"),
                             ArtifactError);
    }

    SUBCASE("json round trip preserves every field") {
        const auto text = m.to_json_string();
        const auto back = RunManifest::from_json_string(text);
        CHECK(back.version == m.version);
        CHECK(back.config_hash == m.config_hash);
        CHECK(back.seeds == m.seeds);
        CHECK(back.created_at == m.created_at);
        REQUIRE(back.artifacts.size() == m.artifacts.size());
        for (std::size_t i = 0; i < m.artifacts.size(); ++i) {
            CHECK(back.artifacts[i].name == m.artifacts[i].name);
            CHECK(back.artifacts[i].path == m.artifacts[i].path);
            CHECK(back.artifacts[i].sha256 == m.artifacts[i].sha256);
            CHECK(back.artifacts[i].written_at == m.artifacts[i].written_at);
        }
        CHECK(back.to_json_string() == text);
    }

    SUBCASE("save and load agree with the string form") {
        m.save("/tmp/niff_manifest.json");
        CHECK(slurp("/tmp/niff_manifest.json") == m.to_json_string());
        const auto loaded = RunManifest::load("/tmp/niff_manifest.json");
        CHECK(loaded.to_json_string() == m.to_json_string());
    }

    SUBCASE("garbage json is rejected with context") {
        CHECK_THROWS_AS(RunManifest::from_json_string("not json"), ArtifactError);
        CHECK_THROWS_AS(RunManifest::from_json_string("{\"version\": \"0.1.0\"}"), ArtifactError);
    }
}

TEST_CASE("labeled batches round-trip bit-exactly") {
    Rng rng(404);
    LabeledBatch batch;
    batch.features = rand_tensor(rng, {6, 3, 2, 2});
    batch.labels = {0, 1, 2, 0, 1, 2};
    batch.reg_targets = rand_tensor(rng, {6, 4});

    const std::string path = "/tmp/niff_batch.bin";
    save_batch(path, batch);
    const auto back = load_batch(path);
    CHECK(back.features.shape() == batch.features.shape());
    CHECK(back.labels == batch.labels);
    const auto fa = batch.features.data();
    const auto fb = back.features.data();
    REQUIRE(fa.size() == fb.size());
    for (std::size_t i = 0; i < fa.size(); ++i) CHECK(fa[i] == fb[i]);
    const auto ta = batch.reg_targets.data();
    const auto tb = back.reg_targets.data();
    REQUIRE(ta.size() == tb.size());
    for (std::size_t i = 0; i < ta.size(); ++i) CHECK(ta[i] == tb[i]);

    SUBCASE("a second save writes identical bytes") {
        save_batch("/tmp/niff_batch2.bin", batch);
        CHECK(slurp("/tmp/niff_batch2.bin") == slurp(path));
    }

    SUBCASE("forged-style batches without targets survive too") {
        LabeledBatch forged;
        forged.features = rand_tensor(rng, {4, 3, 2, 2});
        forged.labels = {1, 1, 0, 0};
        save_batch("/tmp/niff_batch3.bin", forged);
        const auto loaded = load_batch("/tmp/niff_batch3.bin");
        CHECK_FALSE(loaded.has_targets());
        CHECK(loaded.labels == forged.labels);
    }

    SUBCASE("empty batches are legal") {
        save_batch("/tmp/niff_batch4.bin", LabeledBatch{});
        CHECK(load_batch("/tmp/niff_batch4.bin").empty());
    }

    SUBCASE("truncation is caught") {
        auto bytes = slurp(path);
        write_file("/tmp/niff_batch5.bin", bytes.substr(0, bytes.size() / 2));
        CHECK_THROWS_AS(load_batch("/tmp/niff_batch5.bin"), ArtifactError);
    }
}
