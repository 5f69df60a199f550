#include "gradmerge/merge.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <memory>
#include <numeric>
#include <set>

#include "gradmerge/error.hpp"

namespace gradmerge {

Json MergeReport::to_json() const {
  Json per_tensor = Json::object();
  for (const auto& [name, counts] : per_tensor_final) {
    per_tensor[name] = {{"task", counts.first}, {"reasoning", counts.second}};
  }
  Json skipped_json = Json::array();
  for (const auto& s : skipped) {
    skipped_json.push_back({{"name", s.name}, {"reason", to_string(s.reason)}, {"detail", s.detail}});
  }
  Json out = {
      {"method", method},
      {"eligible_param_count", eligible_param_count},
      {"masks",
       {{"task_selected", task_selected},
        {"reasoning_selected", reasoning_selected},
        {"overlap", overlap},
        {"task_final", task_final},
        {"reasoning_final", reasoning_final},
        {"per_tensor", per_tensor}}},
      {"skipped", skipped_json},
      {"warnings", warnings},
      {"timing_ms", timing_ms},
  };
  if (!recipe.is_null()) out["recipe"] = recipe;
  return out;
}

namespace {

using Clock = std::chrono::steady_clock;

double elapsed_ms(Clock::time_point since) {
  return std::chrono::duration<double, std::milli>(Clock::now() - since).count();
}

DType output_dtype(DType stored, DTypePolicy policy) {
  return policy == DTypePolicy::force_f32 && is_float(stored) ? DType::F32 : stored;
}

// base + lambda * delta; lambda == 0 returns the base bytes untouched.
template <typename T>
Bytes add_scaled(const WeightMap& base, const std::string& name, const std::vector<T>& delta,
                 double lambda, DType out_dtype) {
  Bytes out = convert_payload(base.bytes(name), base.meta(name).dtype, out_dtype);
  const std::vector<T> values = decode_floats<T>(out, out_dtype);
  const T scale = static_cast<T>(lambda);
  if (scale == T(0)) return out;
  for (std::size_t i = 0; i < values.size(); ++i) {
    encode_element<T>(out, out_dtype, i, values[i] + scale * delta[i]);
  }
  return out;
}

// Builds the output map for delta-based baselines. `Combiner` provides
// template <typename T> std::vector<T> delta(const std::string&) const.
template <typename Combiner>
WeightMap combine_onto_base(const WeightMap& base, const ParameterSpace& space, double lambda,
                            Precision precision, const MergeOptions& options,
                            std::shared_ptr<const Combiner> combiner) {
  auto base_ref = std::make_shared<const WeightMap>(base);
  WeightMap out(base.id());
  out.metadata() = base.metadata();
  std::set<std::string, std::less<>> eligible;
  for (const auto& [name, _] : space.tensors) eligible.insert(name);
  for (const auto& [name, entry] : base.entries()) {
    if (!eligible.contains(name)) {
      out.insert(entry.meta, entry.producer);
      continue;
    }
    TensorMeta meta = entry.meta;
    meta.dtype = output_dtype(meta.dtype, options.dtype_policy);
    const DType out_dtype = meta.dtype;
    out.insert(std::move(meta), [base_ref, combiner, name, lambda, precision, out_dtype] {
      if (precision == Precision::f64) {
        return add_scaled<double>(*base_ref, name, combiner->template delta<double>(name), lambda,
                                  out_dtype);
      }
      return add_scaled<float>(*base_ref, name, combiner->template delta<float>(name), lambda,
                               out_dtype);
    });
  }
  return out;
}

struct VectorSet {
  std::vector<TaskVector> vectors;
  ParameterSpace space;
  Precision precision = Precision::f32;
};

VectorSet check_vectors(const WeightMap& base, std::span<const TaskVector> tvs) {
  if (tvs.empty()) throw_error(ErrorKind::usage, "at least one task vector is required");
  VectorSet set;
  set.vectors.assign(tvs.begin(), tvs.end());
  set.space = tvs.front().space();
  set.precision = tvs.front().precision();
  for (const auto& tv : tvs) {
    if (tv.space() != set.space) {
      throw_error(ErrorKind::consistency, "task vectors cover different parameter spaces");
    }
    if (tv.precision() != set.precision) {
      throw_error(ErrorKind::consistency, "task vectors use different working precisions");
    }
  }
  for (const auto& [name, count] : set.space.tensors) {
    if (!base.contains(name) || base.meta(name).element_count() != count ||
        !is_float(base.meta(name).dtype)) {
      throw_error(ErrorKind::consistency,
                  "base model does not match the task vectors at '" + name + "'");
    }
  }
  return set;
}

struct SumCombiner {
  VectorSet set;

  template <typename T>
  std::vector<T> delta(const std::string& name) const {
    std::vector<T> acc = set.vectors.front().delta<T>(name);
    for (std::size_t v = 1; v < set.vectors.size(); ++v) {
      const auto d = set.vectors[v].delta<T>(name);
      for (std::size_t i = 0; i < acc.size(); ++i) acc[i] = acc[i] + d[i];
    }
    return acc;
  }
};

struct TiesCombiner {
  VectorSet set;
  double density;

  template <typename T>
  std::vector<T> delta(const std::string& name) const {
    std::vector<std::vector<T>> trimmed;
    for (const auto& tv : set.vectors) trimmed.push_back(trim(tv.delta<T>(name)));
    const std::size_t n = trimmed.front().size();
    std::vector<T> merged(n, T(0));
    for (std::size_t i = 0; i < n; ++i) {
      T positive = 0;
      T negative = 0;
      for (const auto& t : trimmed) {
        if (t[i] > 0) positive = positive + t[i];
        if (t[i] < 0) negative = negative - t[i];
      }
      const bool elect_positive = positive >= negative;
      T sum = 0;
      std::size_t agreeing = 0;
      for (const auto& t : trimmed) {
        if ((elect_positive && t[i] > 0) || (!elect_positive && t[i] < 0)) {
          sum = sum + t[i];
          ++agreeing;
        }
      }
      if (agreeing > 0) {
        merged[i] = sum / static_cast<T>(agreeing);
      } else {
        // Only zeros here; sum them like task arithmetic so signed zeros match.
        merged[i] = trimmed.front()[i];
        for (std::size_t v = 1; v < trimmed.size(); ++v) merged[i] = merged[i] + trimmed[v][i];
      }
    }
    return merged;
  }

  // Keeps the round(density * n) largest magnitudes; equal magnitudes go to
  // the lower index.
  template <typename T>
  std::vector<T> trim(std::vector<T> values) const {
    const std::uint64_t keep = selection_count(density, values.size());
    if (keep == values.size()) return values;
    std::vector<std::size_t> order(values.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::nth_element(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(keep), order.end(),
                     [&](std::size_t a, std::size_t b) {
                       const T ma = std::fabs(values[a]);
                       const T mb = std::fabs(values[b]);
                       if (ma != mb) return ma > mb;
                       return a < b;
                     });
    std::vector<T> out(values.size(), T(0));
    for (std::size_t j = 0; j < keep; ++j) out[order[j]] = values[order[j]];
    return out;
  }
};

struct DareCombiner {
  VectorSet set;
  double drop_rate;
  std::uint64_t seed;

  template <typename T>
  std::vector<T> delta(const std::string& name) const {
    const T scale = static_cast<T>(1.0 / (1.0 - drop_rate));
    std::vector<T> acc;
    for (std::size_t v = 0; v < set.vectors.size(); ++v) {
      auto d = set.vectors[v].delta<T>(name);
      for (std::size_t i = 0; i < d.size(); ++i) {
        d[i] = dare_uniform(seed, v, name, i) < drop_rate ? T(0) : d[i] * scale;
      }
      if (v == 0) {
        acc = std::move(d);
      } else {
        for (std::size_t i = 0; i < acc.size(); ++i) acc[i] = acc[i] + d[i];
      }
    }
    return acc;
  }
};

}  // namespace

std::uint64_t splitmix64(std::uint64_t x) {
  std::uint64_t z = x + 0x9E3779B97F4A7C15ull;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

std::uint64_t fnv1a64(std::string_view text) {
  std::uint64_t h = 0xCBF29CE484222325ull;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001B3ull;
  }
  return h;
}

double dare_uniform(std::uint64_t seed, std::uint64_t ordinal, std::string_view name,
                    std::uint64_t index) {
  const std::uint64_t key = splitmix64(seed ^ splitmix64(fnv1a64(name) ^ splitmix64(ordinal)));
  const std::uint64_t bits = splitmix64(key + index * 0x9E3779B97F4A7C15ull);
  return static_cast<double>(bits >> 11) * 0x1.0p-53;
}

WeightMap task_arithmetic_merge(const WeightMap& base, std::span<const TaskVector> task_vectors,
                                double lambda, const MergeOptions& options) {
  auto set = check_vectors(base, task_vectors);
  const auto space = set.space;
  const auto precision = set.precision;
  return combine_onto_base(base, space, lambda, precision, options,
                           std::make_shared<const SumCombiner>(SumCombiner{std::move(set)}));
}

WeightMap ties_merge(const WeightMap& base, std::span<const TaskVector> task_vectors, double lambda,
                     double density, const MergeOptions& options) {
  if (!(density > 0.0 && density <= 1.0)) {
    throw_error(ErrorKind::usage, "TIES density must lie in (0, 1]");
  }
  auto set = check_vectors(base, task_vectors);
  const auto space = set.space;
  const auto precision = set.precision;
  return combine_onto_base(
      base, space, lambda, precision, options,
      std::make_shared<const TiesCombiner>(TiesCombiner{std::move(set), density}));
}

WeightMap dare_merge(const WeightMap& base, std::span<const TaskVector> task_vectors, double lambda,
                     double drop_rate, std::uint64_t seed, const MergeOptions& options) {
  if (!(drop_rate >= 0.0 && drop_rate < 1.0)) {
    throw_error(ErrorKind::usage, "DARE drop rate must lie in [0, 1)");
  }
  auto set = check_vectors(base, task_vectors);
  const auto space = set.space;
  const auto precision = set.precision;
  return combine_onto_base(
      base, space, lambda, precision, options,
      std::make_shared<const DareCombiner>(DareCombiner{std::move(set), drop_rate, seed}));
}

namespace {

template <typename T>
Bytes weighted_sum(const std::vector<WeightMap>& models, const std::vector<double>& weights,
                   const std::string& name, DType out_dtype) {
  std::vector<T> acc = models.front().values<T>(name);
  const T w0 = static_cast<T>(weights.front());
  for (auto& v : acc) v = w0 * v;
  for (std::size_t m = 1; m < models.size(); ++m) {
    const auto x = models[m].values<T>(name);
    const T w = static_cast<T>(weights[m]);
    for (std::size_t i = 0; i < acc.size(); ++i) acc[i] = acc[i] + w * x[i];
  }
  return encode_floats<T>(acc, out_dtype);
}

}  // namespace

WeightMap linear_merge(std::span<const WeightMap> models, std::span<const double> weights,
                       const MergeOptions& options) {
  if (models.size() < 2) throw_error(ErrorKind::usage, "linear merge needs at least two models");
  if (weights.size() != models.size()) {
    throw_error(ErrorKind::usage, "linear merge needs one weight per model");
  }
  const double total = std::accumulate(weights.begin(), weights.end(), 0.0);
  if (std::fabs(total - 1.0) > 1e-9) {
    throw_error(ErrorKind::validation, "linear merge weights sum to " + std::to_string(total) +
                                           ", expected 1");
  }
  std::vector<const WeightMap*> ptrs;
  for (const auto& m : models) ptrs.push_back(&m);
  const CompatReport compat = validate_compatibility(ptrs, options.filters);
  for (const auto& skipped : compat.skipped) {
    if (skipped.reason == SkipReason::filtered) continue;
    if (skipped.reason == SkipReason::not_float) {
      const auto& first = models.front();
      const bool consistent = std::all_of(models.begin(), models.end(), [&](const WeightMap& m) {
        return m.contains(skipped.name) && m.meta(skipped.name).dtype == first.meta(skipped.name).dtype;
      });
      if (consistent) continue;
    }
    throw_error(ErrorKind::consistency, "linear merge: name set mismatch at '" + skipped.name +
                                            "' (" + std::string(to_string(skipped.reason)) + ")");
  }

  auto shared_models = std::make_shared<const std::vector<WeightMap>>(models.begin(), models.end());
  auto shared_weights = std::make_shared<const std::vector<double>>(weights.begin(), weights.end());
  const WeightMap& first = models.front();
  WeightMap out(first.id());
  out.metadata() = first.metadata();
  for (const auto& [name, entry] : first.entries()) {
    if (!compat.is_shared(name)) {
      out.insert(entry.meta, entry.producer);
      continue;
    }
    TensorMeta meta = entry.meta;
    meta.dtype = output_dtype(meta.dtype, options.dtype_policy);
    const DType out_dtype = meta.dtype;
    const Precision precision = options.precision;
    out.insert(std::move(meta), [shared_models, shared_weights, name, out_dtype, precision] {
      return precision == Precision::f64
                 ? weighted_sum<double>(*shared_models, *shared_weights, name, out_dtype)
                 : weighted_sum<float>(*shared_models, *shared_weights, name, out_dtype);
    });
  }
  return out;
}

std::string_view to_string(InjectDirection d) {
  return d == InjectDirection::highest ? "highest" : "lowest";
}

InjectDirection parse_direction(std::string_view name) {
  if (name == "highest") return InjectDirection::highest;
  if (name == "lowest") return InjectDirection::lowest;
  throw_error(ErrorKind::usage, "unknown injection direction '" + std::string(name) + "'");
}

namespace {

ImportanceMap restrict_checked(const ImportanceMap& importance, const WeightMap& base,
                               const std::vector<std::string>& names, const char* which) {
  for (const auto& name : names) {
    if (!importance.scores().contains(name)) {
      throw_error(ErrorKind::validation, std::string(which) + " importance missing for " + name);
    }
    if (importance.shape(name) != base.meta(name).shape) {
      throw_error(ErrorKind::validation,
                  std::string(which) + " importance shape mismatch for " + name);
    }
  }
  return importance.restricted_to(names);
}

}  // namespace

WeightMap additive_inject(const WeightMap& base, const TaskVector& tv,
                          const ImportanceMap& importance, double ratio, InjectDirection direction,
                          SelectionScope scope, const MergeOptions& options) {
  const auto names = tv.names();
  const ImportanceMap restricted = restrict_checked(importance, base, names, "injection");
  const SelectionMask mask =
      direction == InjectDirection::highest
          ? select_topk(restricted, ratio, scope, options.threads)
          : select_bottomk(restricted, ratio, scope, ZeroPolicy::include, options.threads);
  return apply_masked_delta(base, tv, mask, 1.0, {options.dtype_policy});
}

ReasonAnyResult reason_any_merge(const WeightMap& base, const WeightMap& task,
                                 const WeightMap& reasoning, const ImportanceMap& task_importance,
                                 const ImportanceMap& reasoning_importance,
                                 const ReasonAnyParams& params, const MergeOptions& options) {
  for (double p : {params.p_t, params.p_r}) {
    if (!(p >= 0.0 && p <= 1.0)) throw_error(ErrorKind::usage, "selection ratios must lie in [0, 1]");
  }
  if (!std::isfinite(params.lambda_t) || !std::isfinite(params.lambda_r)) {
    throw_error(ErrorKind::usage, "scaling factors must be finite");
  }
  ReasonAnyResult result;
  MergeReport& report = result.report;
  report.method = "reason-any";

  auto t0 = Clock::now();
  const WeightMap* maps[] = {&base, &task, &reasoning};
  const CompatReport compat = validate_compatibility(maps, options.filters);
  if (compat.shared.empty()) {
    throw_error(ErrorKind::consistency, "no eligible tensors shared by base, task and reasoning models");
  }
  report.eligible_param_count = compat.eligible_param_count;
  report.skipped = compat.skipped;
  auto tau_t = std::make_shared<const TaskVector>(
      compute_task_vector(task, base, compat, options.precision));
  auto tau_r = std::make_shared<const TaskVector>(
      compute_task_vector(reasoning, base, compat, options.precision));
  report.timing_ms["compatibility"] = elapsed_ms(t0);

  t0 = Clock::now();
  const ImportanceMap imp_t = restrict_checked(task_importance, base, compat.shared, "task");
  const ImportanceMap imp_r = restrict_checked(reasoning_importance, base, compat.shared, "reasoning");
  const SelectionMask n_t = select_topk(imp_t, params.p_t, params.scope, options.threads);
  const SelectionMask n_r =
      select_bottomk(imp_r, params.p_r, params.scope, params.zero_policy, options.threads);
  report.timing_ms["selection"] = elapsed_ms(t0);

  t0 = Clock::now();
  auto [m_t, m_r] = exclude(n_t, n_r);
  const auto stats_t = mask_stats(n_t, &n_r);
  report.task_selected = stats_t.count;
  report.reasoning_selected = n_r.cardinality();
  report.overlap = *stats_t.overlap;
  report.task_final = m_t.cardinality();
  report.reasoning_final = m_r.cardinality();
  for (const auto& [name, bits] : m_t.bits) {
    report.per_tensor_final[name] = {bits.count(), m_r.bits.find(name)->second.count()};
  }
  if (report.task_final == 0) report.warnings.push_back("task mask is empty after exclusion");
  if (report.reasoning_final == 0) {
    report.warnings.push_back("reasoning mask is empty after exclusion");
  }
  report.timing_ms["exclusion"] = elapsed_ms(t0);

  auto mask_t = std::make_shared<const SelectionMask>(std::move(m_t));
  auto mask_r = std::make_shared<const SelectionMask>(std::move(m_r));
  const MaskedDelta terms[] = {{tau_r, mask_r, params.lambda_r}, {tau_t, mask_t, params.lambda_t}};
  result.merged = apply_masked_deltas(base, terms, {options.dtype_policy});
  result.task_mask = *mask_t;
  result.reasoning_mask = *mask_r;
  return result;
}

}  // namespace gradmerge
