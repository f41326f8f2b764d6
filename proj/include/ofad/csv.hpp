// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace ofad::csv {

/// 17 significant digits; parses back to the identical double.
std::string format_real(double v);

double parse_real(std::string_view field);
long long parse_int(std::string_view field);
std::uint64_t parse_uint(std::string_view field);

std::vector<std::string> split(std::string_view line, char sep = ',');

struct Table {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  /// Column index by name; throws ValidationError when missing.
  std::size_t column(std::string_view name) const;
};

/// Reads a CSV file and checks that its header equals `expected_header`.
Table read(const std::filesystem::path& path, std::string_view expected_header);

void write_text(const std::filesystem::path& path, const std::string& text);
std::string read_text(const std::filesystem::path& path);

}  // namespace ofad::csv
