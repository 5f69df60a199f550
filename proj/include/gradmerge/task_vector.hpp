#pragma once

#include <memory>
#include <span>
#include <string>
#include <vector>

#include "gradmerge/checkpoint.hpp"
#include "gradmerge/compat.hpp"
#include "gradmerge/mask.hpp"

namespace gradmerge {

// Working precision for delta arithmetic. f32 is the production setting;
// f64 is used with the toy models, whose parameters are stored as F64.
enum class Precision { f32, f64 };

inline DType working_dtype(Precision p) { return p == Precision::f64 ? DType::F64 : DType::F32; }

// Displacement of a fine-tuned model from its base, one tensor per eligible
// name. Deltas are computed when a tensor is requested, never all at once.
class TaskVector {
 public:
  TaskVector() = default;
  TaskVector(WeightMap deltas, Precision precision, std::string base_id, std::string fine_id);

  const WeightMap& deltas() const { return deltas_; }
  Precision precision() const { return precision_; }
  const std::string& base_id() const { return base_id_; }
  const std::string& fine_id() const { return fine_id_; }
  std::vector<std::string> names() const { return deltas_.names(); }
  ParameterSpace space() const;

  template <typename T>
  std::vector<T> delta(std::string_view name) const {
    return deltas_.values<T>(name);
  }

 private:
  WeightMap deltas_;
  Precision precision_ = Precision::f32;
  std::string base_id_;
  std::string fine_id_;
};

TaskVector compute_task_vector(const WeightMap& fine, const WeightMap& base,
                               const CompatReport& compat, Precision precision = Precision::f32);

struct ApplyOptions {
  DTypePolicy dtype_policy = DTypePolicy::keep;
};

struct MaskedDelta {
  std::shared_ptr<const TaskVector> task_vector;
  std::shared_ptr<const SelectionMask> mask;
  double scale = 1.0;
};

// output = base + sum_k scale_k * (delta_k masked by mask_k), applied term by
// term in the given order. Unselected elements keep the base bytes (converted
// only under force_f32); tensors outside the task vectors are copied.
WeightMap apply_masked_deltas(const WeightMap& base, std::span<const MaskedDelta> terms,
                              const ApplyOptions& options = {});

// Single-term convenience; copies tv and mask into the result's producers.
WeightMap apply_masked_delta(const WeightMap& base, const TaskVector& tv, const SelectionMask& mask,
                             double scale, const ApplyOptions& options = {});

}  // namespace gradmerge
