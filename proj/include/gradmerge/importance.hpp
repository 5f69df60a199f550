#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "gradmerge/checkpoint.hpp"
#include "gradmerge/toy_model.hpp"

namespace gradmerge {

struct ImportanceProvenance {
  std::string calibration_id;
  std::uint64_t sample_count = 0;
  std::string model_id;
};

// Mean absolute gradient per parameter, stored as F32 tensors named like the
// model's parameters. Scores are fetched per tensor, so a map loaded from a
// file never has to be fully resident.
class ImportanceMap {
 public:
  ImportanceMap() = default;
  ImportanceMap(WeightMap scores, ImportanceProvenance provenance);

  const WeightMap& scores() const { return scores_; }
  const ImportanceProvenance& provenance() const { return provenance_; }
  std::vector<std::string> names() const { return scores_.names(); }
  const Shape& shape(std::string_view name) const { return scores_.meta(name).shape; }
  std::vector<float> values(std::string_view name) const { return scores_.values<float>(name); }

  // Same scores limited to `names`; every name must be present.
  ImportanceMap restricted_to(std::span<const std::string> names) const;

  // Scores plus calibration_id / sample_count / model_id metadata.
  WeightMap to_weight_map() const;

 private:
  WeightMap scores_;
  ImportanceProvenance provenance_;
};

// f64 mean of |g| over samples, accumulated in the order given.
GradientMap mean_abs_gradients(std::span<const GradientMap> grads);

// Same mean, emitted as F32 scores.
ImportanceMap average_abs_gradients(std::span<const GradientMap> grads,
                                    ImportanceProvenance provenance = {});

// Checks `scores` against the model: every eligible name present with the
// model's shape, F32, finite and non-negative. With no explicit eligible list,
// all float tensors of the model are required.
ImportanceMap validate_importance(const WeightMap& scores, const WeightMap& model,
                                  std::span<const std::string> eligible = {});

ImportanceMap load_importance(const std::filesystem::path& path, const WeightMap& model,
                              std::span<const std::string> eligible = {});

void write_importance(const std::filesystem::path& path, const ImportanceMap& importance);

// Samples sorted lexicographically by (input, target); accumulation follows
// this order so the result does not depend on how the file lists samples.
std::vector<std::size_t> canonical_sample_order(const CalibrationSet& calib);

// Full-precision variant of toy_importance, for callers that need the f64 mean.
GradientMap toy_importance_f64(const ToyModel& model, const CalibrationSet& calib,
                               unsigned threads = 0);

// Gradients are taken at the supplied model, which is the fine-tuned one in
// the merge pipeline.
ImportanceMap toy_importance(const ToyModel& model, const CalibrationSet& calib,
                             const std::string& model_id = "toy", unsigned threads = 0);

}  // namespace gradmerge
