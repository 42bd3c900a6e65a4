#include "niff/manifest.hpp"

#include <openssl/evp.h>

#include <cstdio>
#include <ctime>
#include <fstream>
#include <memory>
#include <sstream>

#include <json.hpp>

#include "niff/errors.hpp"

namespace niff {

namespace {

std::string to_hex(const unsigned char* digest, unsigned int len) {
    static const char* hex = "0123456789abcdef";
    std::string out(2 * static_cast<std::size_t>(len), '0');
    for (unsigned int i = 0; i < len; ++i) {
        out[2 * i] = hex[digest[i] >> 4];
        out[2 * i + 1] = hex[digest[i] & 0xf];
    }
    return out;
}

struct CtxFree {
    void operator()(EVP_MD_CTX* ctx) const { EVP_MD_CTX_free(ctx); }
};
using CtxPtr = std::unique_ptr<EVP_MD_CTX, CtxFree>;

std::string join_path(const std::string& dir, const std::string& filename) {
    if (dir.empty()) return filename;
    if (dir.back() == '/') return dir + filename;
    return dir + "/" + filename;
}

}  // namespace

std::string sha256_hex(const void* data, std::size_t size) {
    unsigned char digest[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    if (!EVP_Digest(data, size, digest, &len, EVP_sha256(), nullptr)) {
        throw ArtifactError("sha-256 digest failed");
    }
    return to_hex(digest, len);
}

std::string sha256_hex(std::string_view text) { return sha256_hex(text.data(), text.size()); }

std::string sha256_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ArtifactError("cannot read " + path + " for hashing");
    CtxPtr ctx(EVP_MD_CTX_new());
    if (!ctx || !EVP_DigestInit_ex(ctx.get(), EVP_sha256(), nullptr)) {
        throw ArtifactError("sha-256 digest failed");
    }
    char buf[1 << 16];
    while (in) {
        in.read(buf, sizeof buf);
        const auto got = in.gcount();
        if (got > 0 && !EVP_DigestUpdate(ctx.get(), buf, static_cast<std::size_t>(got))) {
            throw ArtifactError("sha-256 digest failed");
        }
    }
    if (!in.eof()) throw ArtifactError("failed reading " + path + " for hashing");
    unsigned char digest[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    if (!EVP_DigestFinal_ex(ctx.get(), digest, &len)) throw ArtifactError("sha-256 digest failed");
    return to_hex(digest, len);
}

std::string utc_timestamp() {
    const std::time_t now = std::time(nullptr);
    std::tm tm{};
    gmtime_r(&now, &tm);
    char buf[64];
    std::snprintf(buf, sizeof buf, "%04d-%02d-%02dT%02d:%02d:%02dZ", tm.tm_year + 1900, tm.tm_mon + 1,
                  tm.tm_mday, tm.tm_hour, tm.tm_min, tm.tm_sec);
    return buf;
}

void RunManifest::add_artifact(const std::string& name, const std::string& dir, const std::string& filename) {
    ManifestEntry entry{name, filename, sha256_file(join_path(dir, filename)), utc_timestamp()};
    for (auto& existing : artifacts) {
        if (existing.name == name) {
            existing = std::move(entry);
            return;
        }
    }
    artifacts.push_back(std::move(entry));
}

const ManifestEntry* RunManifest::find(std::string_view name) const {
    for (const auto& entry : artifacts) {
        if (entry.name == name) return &entry;
    }
    return nullptr;
}

std::string RunManifest::verified_path(std::string_view name, const std::string& dir) const {
    const ManifestEntry* entry = find(name);
    if (!entry) throw ArtifactError("manifest has no \"" + std::string(name) + "\" artifact; run the producing stage first");
    const std::string full = join_path(dir, entry->path);
    std::ifstream probe(full, std::ios::binary);
    if (!probe) throw ArtifactError("artifact " + entry->path + " is missing from " + dir);
    probe.close();
    if (sha256_file(full) != entry->sha256) {
        throw ArtifactError("artifact " + entry->path + " does not match its recorded hash; the file was modified after it was written");
    }
    return full;
}

void RunManifest::verify(const std::string& dir) const {
    for (const auto& entry : artifacts) verified_path(entry.name, dir);
}

std::string RunManifest::to_json_string() const {
    nlohmann::ordered_json j;
    j["version"] = version;
    j["config_hash"] = config_hash;
    j["seeds"] = seeds;
    j["created_at"] = created_at;
    auto& arts = j["artifacts"] = nlohmann::ordered_json::array();
    for (const auto& entry : artifacts) {
        arts.push_back({{"name", entry.name},
                        {"path", entry.path},
                        {"sha256", entry.sha256},
                        {"written_at", entry.written_at}});
    }
    return j.dump(2) + "\n";
}

RunManifest RunManifest::from_json_string(const std::string& text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw ArtifactError(std::string("manifest is not valid JSON: ") + e.what());
    }
    RunManifest m;
    try {
        m.version = j.at("version").get<std::string>();
        m.config_hash = j.at("config_hash").get<std::string>();
        m.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
        m.created_at = j.at("created_at").get<std::string>();
        for (const auto& a : j.at("artifacts")) {
            m.artifacts.push_back({a.at("name").get<std::string>(), a.at("path").get<std::string>(),
                                   a.at("sha256").get<std::string>(), a.at("written_at").get<std::string>()});
        }
    } catch (const nlohmann::json::exception& e) {
        throw ArtifactError(std::string("manifest is malformed: ") + e.what());
    }
    return m;
}

void RunManifest::save(const std::string& path) const {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw ArtifactError("cannot write manifest to " + path);
    out << to_json_string();
    if (!out) throw ArtifactError("failed writing manifest to " + path);
}

RunManifest RunManifest::load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ArtifactError("cannot read manifest " + path);
    std::ostringstream buf;
    buf << in.rdbuf();
    return from_json_string(buf.str());
}

}  // namespace niff
