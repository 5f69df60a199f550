#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "gradmerge/checkpoint.hpp"
#include "gradmerge/compat.hpp"
#include "gradmerge/importance.hpp"
#include "gradmerge/json_util.hpp"
#include "gradmerge/selection.hpp"
#include "gradmerge/task_vector.hpp"

namespace gradmerge {

// Published hyperparameters for the merge and its baselines.
inline constexpr double kDefaultSelectionRatio = 0.05;
inline constexpr double kDefaultReasonAnyScale = 1.0;
inline constexpr double kDefaultBaselineScale = 0.3;
inline constexpr double kDefaultDropRate = 0.9;
inline constexpr double kDefaultTiesDensity = 0.1;  // 1 - drop rate

struct MergeOptions {
  DTypePolicy dtype_policy = DTypePolicy::keep;
  NameFilters filters;
  Precision precision = Precision::f32;
  unsigned threads = 0;
};

struct ReasonAnyParams {
  double p_t = kDefaultSelectionRatio;
  double p_r = kDefaultSelectionRatio;
  double lambda_t = kDefaultReasonAnyScale;
  double lambda_r = kDefaultReasonAnyScale;
  SelectionScope scope = SelectionScope::global;
  ZeroPolicy zero_policy = ZeroPolicy::include;
};

struct MergeReport {
  std::string method;
  std::uint64_t eligible_param_count = 0;
  // Mask bookkeeping; zero for methods that do not select.
  std::uint64_t task_selected = 0;       // |N_t|
  std::uint64_t reasoning_selected = 0;  // |N_r|
  std::uint64_t overlap = 0;             // |N_t ∩ N_r|
  std::uint64_t task_final = 0;          // |T'_t|
  std::uint64_t reasoning_final = 0;     // |T'_r|
  std::map<std::string, std::pair<std::uint64_t, std::uint64_t>> per_tensor_final;
  std::vector<SkippedTensor> skipped;
  std::vector<std::string> warnings;
  std::map<std::string, double> timing_ms;
  Json recipe;  // fully resolved recipe echo, when run from a recipe

  Json to_json() const;
};

struct ReasonAnyResult {
  WeightMap merged;
  MergeReport report;
  SelectionMask task_mask;       // M_t
  SelectionMask reasoning_mask;  // M_r
};

// base + λ_r·(τ_r ⊙ M_r) + λ_t·(τ_t ⊙ M_t) with
//   M_t = TopK(I_t, p_t) \ BottomK(I_r, p_r),  M_r = BottomK(I_r, p_r) \ TopK(I_t, p_t).
// The importance maps must cover every eligible tensor.
ReasonAnyResult reason_any_merge(const WeightMap& base, const WeightMap& task,
                                 const WeightMap& reasoning, const ImportanceMap& task_importance,
                                 const ImportanceMap& reasoning_importance,
                                 const ReasonAnyParams& params, const MergeOptions& options = {});

// Weighted elementwise average; weights must sum to 1 within 1e-9.
WeightMap linear_merge(std::span<const WeightMap> models, std::span<const double> weights,
                       const MergeOptions& options = {});

// base + λ·Σ τ_i
WeightMap task_arithmetic_merge(const WeightMap& base, std::span<const TaskVector> task_vectors,
                                double lambda, const MergeOptions& options = {});

// Trim each τ to its top-density magnitudes per tensor, elect a sign per
// coordinate by summed magnitude (ties positive), average the agreeing values.
WeightMap ties_merge(const WeightMap& base, std::span<const TaskVector> task_vectors,
                     double lambda, double density, const MergeOptions& options = {});

// Drop each delta element with probability drop_rate (keyed stream below),
// rescale survivors by 1/(1 - drop_rate), then task arithmetic.
WeightMap dare_merge(const WeightMap& base, std::span<const TaskVector> task_vectors, double lambda,
                     double drop_rate, std::uint64_t seed, const MergeOptions& options = {});

enum class InjectDirection { highest, lowest };

std::string_view to_string(InjectDirection d);
InjectDirection parse_direction(std::string_view name);

// base + τ ⊙ M with M the Top-K (highest) or Bottom-K (lowest) importance mask.
WeightMap additive_inject(const WeightMap& base, const TaskVector& tv,
                          const ImportanceMap& importance, double ratio, InjectDirection direction,
                          SelectionScope scope = SelectionScope::global,
                          const MergeOptions& options = {});

// Counter-based drop stream used by dare_merge. Definition (frozen; changing
// it changes every DARE output):
//   name_key = fnv1a64(name)
//   key      = splitmix64(seed ^ splitmix64(name_key ^ splitmix64(ordinal)))
//   bits     = splitmix64(key + index * 0x9E3779B97F4A7C15)
//   uniform  = (bits >> 11) * 2^-53
// and element `index` of tensor `name` in task vector `ordinal` is dropped iff
// uniform < drop_rate.
std::uint64_t splitmix64(std::uint64_t x);
std::uint64_t fnv1a64(std::string_view text);
double dare_uniform(std::uint64_t seed, std::uint64_t ordinal, std::string_view name,
                    std::uint64_t index);

}  // namespace gradmerge
