#pragma once

#include <filesystem>
#include <string>
#include <string_view>

#include "bilevel/types.hpp"

namespace bilevel {

/// Writes to a temporary sibling and renames it over `path`.
void write_file_atomic(const std::filesystem::path& path, std::string_view content);

std::string read_file(const std::filesystem::path& path);

/// Shortest round-trip-exact decimal text for a double ("%.17g").
std::string format_scalar(Scalar x);

}  // namespace bilevel
