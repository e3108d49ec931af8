#pragma once

#include <filesystem>
#include <string>
#include <string_view>

namespace smf {

/// Writes to a sibling temporary file and renames it over `path`, so readers
/// never observe a partial file and failures leave nothing behind.
void write_file_atomic(const std::filesystem::path& path, std::string_view contents);

/// Whole file as bytes; throws DataError if it cannot be opened.
std::string read_file(const std::filesystem::path& path);

} // namespace smf
