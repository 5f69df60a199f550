#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <utility>

#include "gradmerge/importance.hpp"
#include "gradmerge/mask.hpp"

namespace gradmerge {

enum class ZeroPolicy { include, exclude_exact_zero };

std::string_view to_string(SelectionScope scope);
std::string_view to_string(ZeroPolicy policy);
SelectionScope parse_scope(std::string_view name);
ZeroPolicy parse_zero_policy(std::string_view name);

// k = round(p * d), halves rounded up.
std::uint64_t selection_count(double ratio, std::uint64_t population);

// Selects exactly selection_count(p, d) parameters with the largest scores.
// Ties are broken toward the canonically earlier (tensor name, flat index).
SelectionMask select_topk(const ImportanceMap& importance, double ratio,
                          SelectionScope scope = SelectionScope::global, unsigned threads = 0);

// Smallest scores, same tie rule. Under exclude_exact_zero, parameters whose
// score is exactly zero are never selected and k is capped at the size of the
// remaining pool.
SelectionMask select_bottomk(const ImportanceMap& importance, double ratio,
                             SelectionScope scope = SelectionScope::global,
                             ZeroPolicy zero_policy = ZeroPolicy::include, unsigned threads = 0);

// Returns (a \ b, b \ a).
std::pair<SelectionMask, SelectionMask> exclude(const SelectionMask& a, const SelectionMask& b);

struct MaskStats {
  std::uint64_t count = 0;
  std::uint64_t size = 0;
  double density = 0.0;
  std::map<std::string, std::uint64_t> per_tensor;
  std::optional<std::uint64_t> overlap;  // |a ∩ b| when a second mask is given
};

MaskStats mask_stats(const SelectionMask& mask, const SelectionMask* other = nullptr);

// Knobs for the threshold search; exposed for tests.
struct SelectionTuning {
  // Boundary bins holding at most this many entries are resolved by sorting
  // them; larger ones get a second histogram over the low 16 key bits.
  std::uint64_t max_sorted_candidates = std::uint64_t{1} << 22;
};

SelectionMask select_extreme(const ImportanceMap& importance, double ratio, SelectionScope scope,
                             bool largest, ZeroPolicy zero_policy, unsigned threads,
                             const SelectionTuning& tuning);

}  // namespace gradmerge
