#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

namespace gwvlm::text {

std::string trim(std::string_view s);
std::string to_lower(std::string_view s);
// Trims and collapses internal runs of whitespace to one space.
std::string collapse_whitespace(std::string_view s);
std::vector<std::string> split_lines(std::string_view s);
std::vector<std::string> split_whitespace(std::string_view s);
std::string join(const std::vector<std::string>& parts, std::string_view sep);
std::uint64_t fnv1a64(std::string_view s, std::uint64_t seed = 0);
std::string hex64(std::uint64_t v);
// printf("%.*f") with the given number of decimals.
std::string fixed(double v, int decimals);

}  // namespace gwvlm::text
