#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>

namespace advdiff::io {

// Shortest decimal string that parses back to the same double.
std::string format_double(double v);
double parse_double(std::string_view s);

// Writes to <path>.tmp then renames, so readers never see partial files.
void write_file_atomic(const std::filesystem::path& path, std::string_view contents);
std::string read_file(const std::filesystem::path& path);

std::uint64_t hash_bytes(std::string_view bytes);
std::string hash_hex(std::uint64_t h);
// FNV-1a of the file contents, hex encoded.
std::string hash_file(const std::filesystem::path& path);

}  // namespace advdiff::io
