#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "gradmerge/checkpoint.hpp"

namespace gradmerge {

// Shell-style globs matched against full tensor names; '*' crosses dots.
struct NameFilters {
  std::vector<std::string> include;  // empty: everything included
  std::vector<std::string> exclude;

  bool admits(std::string_view name) const;
};

enum class SkipReason { missing, shape_mismatch, not_float, dtype_mismatch, filtered };

std::string_view to_string(SkipReason reason);

struct SkippedTensor {
  std::string name;
  SkipReason reason;
  std::string detail;
};

struct CompatReport {
  std::vector<std::string> shared;  // lexicographic
  std::vector<SkippedTensor> skipped;  // lexicographic by name
  std::uint64_t eligible_param_count = 0;

  bool is_shared(std::string_view name) const;
  const SkippedTensor* find_skipped(std::string_view name) const;
};

// A tensor is shared when every map has it with the same shape and a float
// dtype and the filters admit it. Float dtypes may differ between maps.
CompatReport validate_compatibility(std::span<const WeightMap* const> maps,
                                    const NameFilters& filters = {});

}  // namespace gradmerge
