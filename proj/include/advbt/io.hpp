#pragma once

#include <filesystem>
#include <string>
#include <string_view>

namespace advbt {

// Shortest decimal form that parses back to the same double.
std::string format_double(double value);
double parse_double(std::string_view text);

// Writes to a sibling temporary file and renames it into place.
void atomic_write_file(const std::filesystem::path& path, std::string_view content);
std::string read_file(const std::filesystem::path& path);

}  // namespace advbt
