#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

namespace niff {

inline constexpr std::string_view kSoftwareVersion = "0.1.0";

/// SHA-256 of a byte buffer, lowercase hex.
std::string sha256_hex(const void* data, std::size_t size);
std::string sha256_hex(std::string_view text);

/// SHA-256 of a file's contents, streamed. Throws ArtifactError when the
/// file cannot be read.
std::string sha256_file(const std::string& path);

struct ManifestEntry {
    std::string name;        // artifact slot, e.g. "teacher_checkpoint"
    std::string path;        // relative to the manifest's directory
    std::string sha256;      // content hash at write time
    std::string written_at;  // UTC, ISO 8601
};

/// Ledger of one run directory: the config that produced it, the seeds that
/// ran, and a content hash for every artifact written. Stage commands append
/// entries as they go; verify() re-hashes everything so missing or edited
/// files are caught before a later stage consumes them.
struct RunManifest {
    std::string version{kSoftwareVersion};
    std::string config_hash;
    std::vector<std::uint64_t> seeds;
    std::string created_at;  // UTC, ISO 8601
    std::vector<ManifestEntry> artifacts;

    /// Hashes dir/filename and records (or replaces) the named entry.
    void add_artifact(const std::string& name, const std::string& dir, const std::string& filename);

    const ManifestEntry* find(std::string_view name) const;

    /// The named entry's path resolved against dir, after checking that the
    /// recorded hash still matches the file. Throws ArtifactError when the
    /// entry is absent, the file is missing, or the content changed.
    std::string verified_path(std::string_view name, const std::string& dir) const;

    /// verified_path over every entry.
    void verify(const std::string& dir) const;

    std::string to_json_string() const;
    static RunManifest from_json_string(const std::string& text);
    void save(const std::string& path) const;
    static RunManifest load(const std::string& path);
};

/// Current UTC time as ISO 8601, seconds precision.
std::string utc_timestamp();

}  // namespace niff
