#include "niff/serialize.hpp"

#include <bit>
#include <cstring>

namespace niff {

namespace {

static_assert(std::endian::native == std::endian::little, "artifact io assumes a little-endian host");

}  // namespace

BinaryWriter::BinaryWriter(const std::string& path) : out_(path, std::ios::binary), path_(path) {
    if (!out_) throw ArtifactError("cannot open '" + path + "' for writing");
}

void BinaryWriter::magic(std::string_view tag) { out_.write(tag.data(), static_cast<std::streamsize>(tag.size())); }

void BinaryWriter::u32(std::uint32_t v) { out_.write(reinterpret_cast<const char*>(&v), sizeof v); }

void BinaryWriter::u64(std::uint64_t v) { out_.write(reinterpret_cast<const char*>(&v), sizeof v); }

void BinaryWriter::f64(double v) { out_.write(reinterpret_cast<const char*>(&v), sizeof v); }

void BinaryWriter::str(std::string_view s) {
    u32(static_cast<std::uint32_t>(s.size()));
    out_.write(s.data(), static_cast<std::streamsize>(s.size()));
}

void BinaryWriter::f64_array(std::span<const double> xs) {
    out_.write(reinterpret_cast<const char*>(xs.data()), static_cast<std::streamsize>(xs.size() * sizeof(double)));
}

void BinaryWriter::finish() {
    out_.flush();
    if (!out_) throw ArtifactError("write to '" + path_ + "' failed");
}

BinaryReader::BinaryReader(const std::string& path) : in_(path, std::ios::binary), path_(path) {
    if (!in_) throw ArtifactError("cannot open '" + path + "' for reading");
}

void BinaryReader::fail(const std::string& why) const { throw ArtifactError("'" + path_ + "': " + why); }

void BinaryReader::need(std::size_t bytes) {
    if (!in_) fail("truncated or unreadable (" + std::to_string(bytes) + " bytes expected)");
}

void BinaryReader::expect_magic(std::string_view tag) {
    std::string got(tag.size(), '\0');
    in_.read(got.data(), static_cast<std::streamsize>(tag.size()));
    need(tag.size());
    if (got != tag) fail("bad magic, expected '" + std::string(tag) + "'");
}

std::uint32_t BinaryReader::u32() {
    std::uint32_t v = 0;
    in_.read(reinterpret_cast<char*>(&v), sizeof v);
    need(sizeof v);
    return v;
}

std::uint64_t BinaryReader::u64() {
    std::uint64_t v = 0;
    in_.read(reinterpret_cast<char*>(&v), sizeof v);
    need(sizeof v);
    return v;
}

double BinaryReader::f64() {
    double v = 0;
    in_.read(reinterpret_cast<char*>(&v), sizeof v);
    need(sizeof v);
    return v;
}

std::string BinaryReader::str(std::uint32_t max_len) {
    const std::uint32_t len = u32();
    if (len > max_len) fail("string length " + std::to_string(len) + " exceeds limit");
    std::string s(len, '\0');
    in_.read(s.data(), len);
    need(len);
    return s;
}

std::vector<double> BinaryReader::f64_array(std::size_t count) {
    std::vector<double> xs(count);
    in_.read(reinterpret_cast<char*>(xs.data()), static_cast<std::streamsize>(count * sizeof(double)));
    need(count * sizeof(double));
    return xs;
}

void BinaryReader::expect_eof() {
    in_.peek();
    if (!in_.eof()) fail("trailing bytes after payload");
}

}  // namespace niff
