#include "gradmerge/compat.hpp"

#include <fnmatch.h>

#include <algorithm>
#include <set>

#include "gradmerge/error.hpp"

namespace gradmerge {

bool NameFilters::admits(std::string_view name) const {
  const std::string n(name);
  auto matches = [&](const std::string& pattern) {
    return ::fnmatch(pattern.c_str(), n.c_str(), 0) == 0;
  };
  if (!include.empty() && std::none_of(include.begin(), include.end(), matches)) return false;
  return std::none_of(exclude.begin(), exclude.end(), matches);
}

std::string_view to_string(SkipReason reason) {
  switch (reason) {
    case SkipReason::missing: return "missing";
    case SkipReason::shape_mismatch: return "shape-mismatch";
    case SkipReason::not_float: return "not-float";
    case SkipReason::dtype_mismatch: return "dtype-mismatch";
    case SkipReason::filtered: return "filtered";
  }
  return "?";
}

bool CompatReport::is_shared(std::string_view name) const {
  return std::binary_search(shared.begin(), shared.end(), name,
                            [](std::string_view a, std::string_view b) { return a < b; });
}

const SkippedTensor* CompatReport::find_skipped(std::string_view name) const {
  for (const auto& s : skipped) {
    if (s.name == name) return &s;
  }
  return nullptr;
}

CompatReport validate_compatibility(std::span<const WeightMap* const> maps,
                                    const NameFilters& filters) {
  if (maps.size() < 2) throw_error(ErrorKind::usage, "compatibility needs at least two models");

  std::set<std::string> all_names;
  for (const WeightMap* map : maps) {
    for (const auto& [name, _] : map->entries()) all_names.insert(name);
  }

  CompatReport report;
  for (const auto& name : all_names) {
    std::vector<std::size_t> absent;
    for (std::size_t i = 0; i < maps.size(); ++i) {
      if (!maps[i]->contains(name)) absent.push_back(i);
    }
    if (!absent.empty()) {
      report.skipped.push_back(
          {name, SkipReason::missing,
           "absent from " + std::to_string(absent.size()) + " of " + std::to_string(maps.size()) +
               " models"});
      continue;
    }
    const Shape& shape = maps.front()->meta(name).shape;
    const bool same_shape = std::all_of(maps.begin(), maps.end(), [&](const WeightMap* m) {
      return m->meta(name).shape == shape;
    });
    if (!same_shape) {
      report.skipped.push_back({name, SkipReason::shape_mismatch, "shapes differ across models"});
      continue;
    }
    const bool all_float = std::all_of(maps.begin(), maps.end(), [&](const WeightMap* m) {
      return is_float(m->meta(name).dtype);
    });
    if (!all_float) {
      const bool any_float = std::any_of(maps.begin(), maps.end(), [&](const WeightMap* m) {
        return is_float(m->meta(name).dtype);
      });
      report.skipped.push_back({name, any_float ? SkipReason::dtype_mismatch : SkipReason::not_float,
                                any_float ? "float in some models only" : "integer-typed tensor"});
      continue;
    }
    if (!filters.admits(name)) {
      report.skipped.push_back({name, SkipReason::filtered, "excluded by name filters"});
      continue;
    }
    report.shared.push_back(name);
    report.eligible_param_count += element_count(shape);
  }
  return report;
}

}  // namespace gradmerge
