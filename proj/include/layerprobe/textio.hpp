#pragma once

#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace layerprobe::text {

// Locale-independent strict parse. The whole field must be consumed, so
// "0,40" is rejected rather than read as 0.
double parse_double(std::string_view field);
long long parse_int(std::string_view field);

// Shortest decimal string that round-trips to the same double.
std::string format_double(double v);

std::vector<std::string_view> split(std::string_view line, char sep);

// Reads a UTF-8 text file into lines, stripping "\n" / "\r\n".
std::vector<std::string> read_lines(const std::filesystem::path& path);

// Writes the whole string, truncating any existing file.
void write_file(const std::filesystem::path& path, std::string_view content);

std::string read_file(const std::filesystem::path& path);

}  // namespace layerprobe::text
