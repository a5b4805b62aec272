#pragma once

#include <filesystem>
#include <string>
#include <string_view>

namespace udaseg::fsutil {

// Writes `bytes` to a sibling temp file and renames it over `path`, so readers
// never observe a partially written file.
void write_atomic(const std::filesystem::path& path, std::string_view bytes);
std::string read_file(const std::filesystem::path& path);

// 64-bit FNV-1a, used for config hashes in run manifests.
std::uint64_t fnv1a64(std::string_view bytes);
std::string hex64(std::uint64_t v);

}  // namespace udaseg::fsutil
