#include "gradmerge/importance.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "gradmerge/error.hpp"
#include "gradmerge/parallel.hpp"

namespace gradmerge {

ImportanceMap::ImportanceMap(WeightMap scores, ImportanceProvenance provenance)
    : scores_(std::move(scores)), provenance_(std::move(provenance)) {}

ImportanceMap ImportanceMap::restricted_to(std::span<const std::string> names) const {
  WeightMap subset(scores_.id());
  subset.metadata() = scores_.metadata();
  for (const auto& name : names) {
    if (!scores_.contains(name)) {
      throw_error(ErrorKind::validation, "importance missing for " + name);
    }
    const auto& e = scores_.entry(name);
    subset.insert(e.meta, e.producer);
  }
  return ImportanceMap(std::move(subset), provenance_);
}

WeightMap ImportanceMap::to_weight_map() const {
  WeightMap out = scores_;
  out.metadata()["calibration_id"] = provenance_.calibration_id;
  out.metadata()["sample_count"] = std::to_string(provenance_.sample_count);
  out.metadata()["model_id"] = provenance_.model_id;
  return out;
}

GradientMap mean_abs_gradients(std::span<const GradientMap> grads) {
  if (grads.empty()) throw_error(ErrorKind::usage, "cannot average an empty gradient sequence");
  GradientMap sum;
  for (const auto& [name, array] : grads.front()) {
    sum[name] = {array.shape, std::vector<double>(array.values.size(), 0.0)};
  }
  for (std::size_t s = 0; s < grads.size(); ++s) {
    const auto& g = grads[s];
    if (g.size() != sum.size()) {
      throw_error(ErrorKind::consistency,
                  "gradient sample " + std::to_string(s) + " has a different tensor set");
    }
    for (auto& [name, acc] : sum) {
      const auto it = g.find(name);
      if (it == g.end() || it->second.shape != acc.shape ||
          it->second.values.size() != acc.values.size()) {
        throw_error(ErrorKind::consistency,
                    "gradient sample " + std::to_string(s) + " drifts at '" + name + "'");
      }
      for (std::size_t i = 0; i < acc.values.size(); ++i) acc.values[i] += std::fabs(it->second.values[i]);
    }
  }
  const double count = static_cast<double>(grads.size());
  for (auto& [_, acc] : sum) {
    for (auto& v : acc.values) v /= count;
  }
  return sum;
}

namespace {

ImportanceMap emit_f32(const GradientMap& mean, ImportanceProvenance provenance) {
  WeightMap scores(provenance.model_id);
  for (const auto& [name, array] : mean) {
    for (std::size_t i = 0; i < array.values.size(); ++i) {
      const double v = array.values[i];
      if (!std::isfinite(v) || !std::isfinite(static_cast<float>(v))) {
        throw_error(ErrorKind::validation,
                    "non-finite importance at " + name + "[" + std::to_string(i) + "]");
      }
    }
    scores.insert_values<double>(name, DType::F32, array.shape, array.values);
  }
  return ImportanceMap(std::move(scores), std::move(provenance));
}

}  // namespace

ImportanceMap average_abs_gradients(std::span<const GradientMap> grads,
                                    ImportanceProvenance provenance) {
  if (provenance.sample_count == 0) provenance.sample_count = grads.size();
  return emit_f32(mean_abs_gradients(grads), std::move(provenance));
}

ImportanceMap validate_importance(const WeightMap& scores, const WeightMap& model,
                                  std::span<const std::string> eligible) {
  std::vector<std::string> required(eligible.begin(), eligible.end());
  if (required.empty()) {
    for (const auto& [name, entry] : model.entries()) {
      if (is_float(entry.meta.dtype)) required.push_back(name);
    }
  }
  WeightMap kept(scores.id());
  kept.metadata() = scores.metadata();
  for (const auto& name : required) {
    if (!scores.contains(name)) throw_error(ErrorKind::validation, "importance missing for " + name);
    const auto& meta = scores.meta(name);
    if (!model.contains(name) || meta.shape != model.meta(name).shape) {
      throw_error(ErrorKind::validation, "importance shape mismatch for " + name + ": " +
                                             shape_string(meta.shape));
    }
    if (meta.dtype != DType::F32) {
      throw_error(ErrorKind::validation, "importance for " + name + " must be F32, found " +
                                             std::string(dtype_name(meta.dtype)));
    }
    const auto values = scores.values<float>(name);
    for (std::size_t i = 0; i < values.size(); ++i) {
      const float v = values[i];
      const std::string where = name + "[" + std::to_string(i) + "]";
      if (!std::isfinite(v)) throw_error(ErrorKind::validation, "non-finite importance at " + where);
      if (v < 0.0f) throw_error(ErrorKind::validation, "negative importance at " + where);
    }
    kept.insert(meta, scores.entry(name).producer);
  }

  ImportanceProvenance provenance;
  const auto& md = scores.metadata();
  if (auto it = md.find("calibration_id"); it != md.end()) provenance.calibration_id = it->second;
  if (auto it = md.find("model_id"); it != md.end()) provenance.model_id = it->second;
  if (auto it = md.find("sample_count"); it != md.end()) {
    try {
      provenance.sample_count = std::stoull(it->second);
    } catch (const std::exception&) {
      throw_error(ErrorKind::validation, "importance sample_count is not an integer");
    }
  }
  return ImportanceMap(std::move(kept), std::move(provenance));
}

ImportanceMap load_importance(const std::filesystem::path& path, const WeightMap& model,
                              std::span<const std::string> eligible) {
  return validate_importance(open_checkpoint(path), model, eligible);
}

void write_importance(const std::filesystem::path& path, const ImportanceMap& importance) {
  write_checkpoint(path, importance.to_weight_map());
}

std::vector<std::size_t> canonical_sample_order(const CalibrationSet& calib) {
  std::vector<std::size_t> order(calib.samples.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    const auto& sa = calib.samples[a];
    const auto& sb = calib.samples[b];
    return std::tie(sa.input, sa.target) < std::tie(sb.input, sb.target);
  });
  return order;
}

GradientMap toy_importance_f64(const ToyModel& model, const CalibrationSet& calib,
                               unsigned threads) {
  if (calib.samples.empty()) {
    throw_error(ErrorKind::usage, "calibration set '" + calib.id + "' is empty");
  }
  const auto order = canonical_sample_order(calib);
  std::vector<GradientMap> grads(order.size());
  parallel_for(
      order.size(), [&](std::size_t i) { grads[i] = toy_backward(model, calib.samples[order[i]]); },
      threads);
  return mean_abs_gradients(grads);
}

ImportanceMap toy_importance(const ToyModel& model, const CalibrationSet& calib,
                             const std::string& model_id, unsigned threads) {
  return emit_f32(toy_importance_f64(model, calib, threads),
                  {calib.id, calib.samples.size(), model_id});
}

}  // namespace gradmerge
