#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

namespace longtail {

// FNV-1a over bytes. Used for artifact fingerprints and the vocabulary hash
// embedded in checkpoints; not a cryptographic hash.
uint64_t fnv1a(std::string_view data, uint64_t state = 0xcbf29ce484222325ull);

std::string hex64(uint64_t v);

bool file_exists(const std::string& path);
std::string read_file(const std::string& path);
std::vector<std::string> read_lines(const std::string& path);

// Writes to a sibling temp file and renames into place, so readers never see
// a half-written artifact.
void write_file_atomic(const std::string& path, std::string_view content);

uint64_t hash_file(const std::string& path);

std::string join(const std::vector<std::string>& parts, std::string_view sep);

// Current time as ISO-8601 UTC with second precision.
std::string utc_timestamp();

}  // namespace longtail
