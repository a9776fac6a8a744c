#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>

namespace snapmmd {

// Shortest decimal form that parses back to the same double.
std::string format_double(double v);

// Writes to a sibling temporary file and renames it into place, so readers
// never observe a partially written artifact.
void write_file_atomic(const std::filesystem::path& path, std::string_view contents);
std::string read_file(const std::filesystem::path& path);

// 64-bit FNV-1a, used for config digests.
std::uint64_t fnv1a64(std::string_view bytes);

}  // namespace snapmmd
