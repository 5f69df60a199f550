#pragma once

#include <string>
#include <string_view>

#include "json.hpp"

namespace gradmerge {

using Json = nlohmann::json;

// Parses a JSON document, rejecting duplicate object keys. Failures are
// format errors whose message starts with `what`.
Json parse_json_strict(std::string_view text, std::string_view what);

std::string read_text_file(const std::string& path);

}  // namespace gradmerge
