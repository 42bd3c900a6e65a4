#pragma once

#include <cstdint>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include "niff/errors.hpp"

namespace niff {

/// Little-endian binary writer for artifact files.
class BinaryWriter {
public:
    explicit BinaryWriter(const std::string& path);

    void magic(std::string_view tag);  // raw bytes, fixed width
    void u32(std::uint32_t v);
    void u64(std::uint64_t v);
    void f64(double v);
    void str(std::string_view s);                // u32 length + bytes
    void f64_array(std::span<const double> xs);  // raw values, length written by caller

    void finish();  // flush and verify stream health

private:
    std::ofstream out_;
    std::string path_;
};

/// Little-endian binary reader; every failure names the file.
class BinaryReader {
public:
    explicit BinaryReader(const std::string& path);

    void expect_magic(std::string_view tag);
    std::uint32_t u32();
    std::uint64_t u64();
    double f64();
    std::string str(std::uint32_t max_len = 1u << 20);
    std::vector<double> f64_array(std::size_t count);
    void expect_eof();

    const std::string& path() const { return path_; }
    [[noreturn]] void fail(const std::string& why) const;

private:
    void need(std::size_t bytes);

    std::ifstream in_;
    std::string path_;
};

}  // namespace niff
