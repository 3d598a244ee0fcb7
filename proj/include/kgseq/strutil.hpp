#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

namespace kgseq {

// Trim leading/trailing whitespace and collapse inner runs to single spaces.
std::string normalize_ws(std::string_view s);

// Split on a single-character delimiter; keeps empty fields.
std::vector<std::string> split(std::string_view s, char delim);

std::string join(const std::vector<std::string>& parts, std::string_view sep);

// FNV-1a 64-bit; used for config and artifact content hashes.
std::uint64_t fnv1a(std::string_view bytes);
std::uint64_t fnv1a(const void* data, size_t n, std::uint64_t seed = 0xcbf29ce484222325ULL);
std::string hex64(std::uint64_t v);

bool parse_int(std::string_view s, long long& out);

// Whole-file helpers; throw DataError on I/O failure.
std::string read_file(const std::string& path);
void write_file(const std::string& path, std::string_view content);
std::vector<std::string> read_lines(const std::string& path);
bool file_exists(const std::string& path);

}  // namespace kgseq
