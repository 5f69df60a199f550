#include "gradmerge/json_util.hpp"

#include <fstream>
#include <set>
#include <sstream>
#include <vector>

#include "gradmerge/error.hpp"

namespace gradmerge {

Json parse_json_strict(std::string_view text, std::string_view what) {
  std::vector<std::set<std::string>> open_objects;
  auto reject_duplicates = [&](int /*depth*/, Json::parse_event_t event, Json& parsed) {
    switch (event) {
      case Json::parse_event_t::object_start:
        open_objects.emplace_back();
        break;
      case Json::parse_event_t::object_end:
        open_objects.pop_back();
        break;
      case Json::parse_event_t::key: {
        const auto& key = parsed.get_ref<const std::string&>();
        if (!open_objects.back().insert(key).second) {
          throw_error(ErrorKind::format, std::string(what) + ": duplicate key '" + key + "'");
        }
        break;
      }
      default:
        break;
    }
    return true;
  };
  try {
    return Json::parse(text.begin(), text.end(), reject_duplicates);
  } catch (const Json::parse_error& e) {
    throw_error(ErrorKind::format, std::string(what) + " is not valid JSON: " + e.what());
  }
}

std::string read_text_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw_error(ErrorKind::io, "cannot open " + path);
  std::ostringstream buffer;
  buffer << in.rdbuf();
  return buffer.str();
}

}  // namespace gradmerge
