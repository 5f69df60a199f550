#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "gradmerge/importance.hpp"
#include "gradmerge/json_util.hpp"
#include "gradmerge/merge.hpp"

namespace gradmerge {

enum class MergeMethod { reason_any, linear, task_arithmetic, ties, dare };

std::string_view to_string(MergeMethod m);
MergeMethod parse_method(std::string_view name);

// Either a precomputed importance file, or the toy gradient oracle run on the
// fine-tuned model over a calibration file.
struct ImportanceSource {
  std::string path;
  std::string calibration;  // toy oracle when non-empty
  std::size_t samples = kDefaultCalibrationSamples;

  bool is_toy() const { return !calibration.empty(); }
  Json to_json() const;
};

struct MergeRecipe {
  MergeMethod method = MergeMethod::reason_any;
  std::string base;
  std::string task_model;
  std::string reasoning_model;
  ImportanceSource task_importance;
  ImportanceSource reasoning_importance;
  ReasonAnyParams params;  // p_t, p_r, lambda_t, lambda_r, scope, zero_policy
  std::vector<std::string> include_patterns;
  std::vector<std::string> exclude_patterns;
  DTypePolicy dtype_policy = DTypePolicy::keep;
  std::uint64_t seed = 0;
  double density = kDefaultTiesDensity;
  double drop_rate = kDefaultDropRate;
  std::vector<double> weights;
  std::string output;
  std::string report_output;  // defaults to output + ".report.json"

  // Every key that applies to the method, defaults filled in.
  Json to_json() const;
};

// Strict: unknown keys and keys that do not apply to the method are errors.
MergeRecipe parse_recipe(const Json& doc);

// `overrides` is an object of recipe keys whose values replace the file's.
MergeRecipe load_recipe(const std::filesystem::path& path, const Json& overrides = Json::object());

struct MergeOutcome {
  WeightMap merged;
  MergeReport report;
};

// The merge a recipe describes, on models already in memory. Paths in the
// recipe are not touched; importance maps are needed for reason-any only.
MergeOutcome merge_models(const MergeRecipe& recipe, const WeightMap& base, const WeightMap& task,
                          const WeightMap& reasoning, const ImportanceMap* task_importance,
                          const ImportanceMap* reasoning_importance, unsigned threads = 0);

// Runs the merge and writes the checkpoint and report. Nothing is left behind
// on failure.
MergeReport run_recipe(const MergeRecipe& recipe, unsigned threads = 0);

}  // namespace gradmerge
