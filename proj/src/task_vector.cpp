#include "gradmerge/task_vector.hpp"

#include <memory>

#include "gradmerge/error.hpp"

namespace gradmerge {

TaskVector::TaskVector(WeightMap deltas, Precision precision, std::string base_id,
                       std::string fine_id)
    : deltas_(std::move(deltas)),
      precision_(precision),
      base_id_(std::move(base_id)),
      fine_id_(std::move(fine_id)) {}

ParameterSpace TaskVector::space() const {
  const auto names = deltas_.names();
  return space_of(deltas_, names);
}

namespace {

void check_fresh(const WeightMap& fine, const WeightMap& base, const std::string& name) {
  if (!fine.contains(name) || !base.contains(name)) {
    throw_error(ErrorKind::consistency,
                "stale compatibility report: '" + name + "' is not present in both models");
  }
  const auto& fm = fine.meta(name);
  const auto& bm = base.meta(name);
  if (fm.shape != bm.shape || !is_float(fm.dtype) || !is_float(bm.dtype)) {
    throw_error(ErrorKind::consistency,
                "stale compatibility report: '" + name + "' no longer matches between models");
  }
}

template <typename T>
Bytes delta_payload(const WeightMap& fine, const WeightMap& base, const std::string& name) {
  check_fresh(fine, base, name);
  const auto f = fine.values<T>(name);
  const auto b = base.values<T>(name);
  std::vector<T> d(f.size());
  for (std::size_t i = 0; i < d.size(); ++i) d[i] = f[i] - b[i];
  return encode_floats<T>(d, std::is_same_v<T, double> ? DType::F64 : DType::F32);
}

}  // namespace

TaskVector compute_task_vector(const WeightMap& fine, const WeightMap& base,
                               const CompatReport& compat, Precision precision) {
  WeightMap deltas("task-vector(" + fine.id() + " - " + base.id() + ")");
  auto fine_ref = std::make_shared<const WeightMap>(fine);
  auto base_ref = std::make_shared<const WeightMap>(base);
  for (const auto& name : compat.shared) {
    check_fresh(fine, base, name);
    TensorMeta meta{name, working_dtype(precision), base.meta(name).shape, 0, 0};
    deltas.insert(std::move(meta), [fine_ref, base_ref, name, precision] {
      return precision == Precision::f64 ? delta_payload<double>(*fine_ref, *base_ref, name)
                                         : delta_payload<float>(*fine_ref, *base_ref, name);
    });
  }
  deltas.metadata() = {{"base_id", base.id()}, {"fine_id", fine.id()}};
  return TaskVector(std::move(deltas), precision, base.id(), fine.id());
}

namespace {

template <typename T>
Bytes apply_terms(const WeightMap& base, const std::string& name,
                  const std::vector<MaskedDelta>& terms, DType out_dtype) {
  const DType base_dtype = base.meta(name).dtype;
  Bytes out = convert_payload(base.bytes(name), base_dtype, out_dtype);
  std::vector<T> values = decode_floats<T>(out, out_dtype);
  std::vector<bool> touched(values.size(), false);
  for (const auto& term : terms) {
    const BitVector& bits = term.mask->tensor(name);
    if (!bits.any()) continue;
    const auto delta = term.task_vector->delta<T>(name);
    const T scale = static_cast<T>(term.scale);
    if (scale == T(0)) continue;
    for (std::size_t i = 0; i < values.size(); ++i) {
      if (!bits.test(i)) continue;
      values[i] = values[i] + scale * delta[i];
      touched[i] = true;
    }
  }
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (touched[i]) encode_element<T>(out, out_dtype, i, values[i]);
  }
  return out;
}

}  // namespace

WeightMap apply_masked_deltas(const WeightMap& base, std::span<const MaskedDelta> terms,
                              const ApplyOptions& options) {
  if (terms.empty()) throw_error(ErrorKind::usage, "no masked deltas to apply");
  const Precision precision = terms.front().task_vector->precision();
  const ParameterSpace space = terms.front().task_vector->space();
  for (const auto& term : terms) {
    if (term.task_vector->precision() != precision) {
      throw_error(ErrorKind::consistency, "task vectors use different working precisions");
    }
    if (term.task_vector->space() != space || term.mask->space() != space) {
      throw_error(ErrorKind::consistency,
                  "mask and task vector do not cover the same parameter space");
    }
  }
  for (const auto& [name, count] : space.tensors) {
    if (!base.contains(name) || base.meta(name).element_count() != count ||
        !is_float(base.meta(name).dtype)) {
      throw_error(ErrorKind::consistency,
                  "base model does not match the task vector at '" + name + "'");
    }
  }

  auto shared_terms = std::make_shared<const std::vector<MaskedDelta>>(terms.begin(), terms.end());
  auto base_ref = std::make_shared<const WeightMap>(base);
  WeightMap out(base.id());
  out.metadata() = base.metadata();
  for (const auto& [name, entry] : base.entries()) {
    const bool eligible = terms.front().task_vector->deltas().contains(name);
    if (!eligible) {
      out.insert(entry.meta, entry.producer);
      continue;
    }
    TensorMeta meta = entry.meta;
    if (options.dtype_policy == DTypePolicy::force_f32) meta.dtype = DType::F32;
    const DType out_dtype = meta.dtype;
    out.insert(std::move(meta), [base_ref, name, shared_terms, out_dtype, precision] {
      return precision == Precision::f64
                 ? apply_terms<double>(*base_ref, name, *shared_terms, out_dtype)
                 : apply_terms<float>(*base_ref, name, *shared_terms, out_dtype);
    });
  }
  return out;
}

WeightMap apply_masked_delta(const WeightMap& base, const TaskVector& tv, const SelectionMask& mask,
                             double scale, const ApplyOptions& options) {
  const MaskedDelta term{std::make_shared<const TaskVector>(tv),
                         std::make_shared<const SelectionMask>(mask), scale};
  return apply_masked_deltas(base, std::span<const MaskedDelta>(&term, 1), options);
}

}  // namespace gradmerge
