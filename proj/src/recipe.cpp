#include "gradmerge/recipe.hpp"

#include <algorithm>
#include <chrono>
#include <fstream>
#include <set>

#include "gradmerge/error.hpp"
#include "gradmerge/importance.hpp"
#include "gradmerge/toy_model.hpp"

namespace gradmerge {

namespace {

constexpr std::string_view kMethodNames[] = {"reason-any", "linear", "task-arithmetic", "ties",
                                             "dare"};

const std::set<std::string, std::less<>> kKnownKeys = {
    "method",          "base",         "task_model",       "reasoning_model", "task_importance",
    "reasoning_importance", "p_t",     "p_r",              "lambda_t",        "lambda_r",
    "scope",           "zero_policy",  "include_patterns", "exclude_patterns", "dtype_policy",
    "seed",            "density",      "drop_rate",        "weights",         "output",
    "report_output"};

std::set<std::string, std::less<>> required_keys(MergeMethod m) {
  switch (m) {
    case MergeMethod::reason_any:
      return {"method", "base", "task_model", "reasoning_model", "task_importance",
              "reasoning_importance", "output"};
    case MergeMethod::linear:
      return {"method", "task_model", "reasoning_model", "output"};
    default:
      return {"method", "base", "task_model", "reasoning_model", "output"};
  }
}

std::set<std::string, std::less<>> optional_keys(MergeMethod m) {
  std::set<std::string, std::less<>> keys = {"include_patterns", "exclude_patterns",
                                             "dtype_policy", "report_output"};
  switch (m) {
    case MergeMethod::reason_any:
      keys.insert({"p_t", "p_r", "lambda_t", "lambda_r", "scope", "zero_policy"});
      break;
    case MergeMethod::linear:
      keys.insert("weights");
      break;
    case MergeMethod::task_arithmetic:
      keys.insert({"lambda_t", "lambda_r"});
      break;
    case MergeMethod::ties:
      keys.insert({"lambda_t", "lambda_r", "density"});
      break;
    case MergeMethod::dare:
      keys.insert({"lambda_t", "lambda_r", "drop_rate", "seed"});
      break;
  }
  return keys;
}

const Json& field(const Json& doc, const char* key) { return doc.at(key); }

std::string get_string(const Json& doc, const char* key) {
  const Json& v = field(doc, key);
  if (!v.is_string()) throw_error(ErrorKind::validation, std::string("recipe key '") + key + "' must be a string");
  return v.get<std::string>();
}

double get_number(const Json& doc, const char* key) {
  const Json& v = field(doc, key);
  if (!v.is_number()) throw_error(ErrorKind::validation, std::string("recipe key '") + key + "' must be a number");
  const double x = v.get<double>();
  if (!std::isfinite(x)) throw_error(ErrorKind::validation, std::string("recipe key '") + key + "' must be finite");
  return x;
}

double get_ratio(const Json& doc, const char* key) {
  const double x = get_number(doc, key);
  if (x < 0.0 || x > 1.0) {
    throw_error(ErrorKind::validation, std::string("recipe key '") + key + "' must lie in [0, 1]");
  }
  return x;
}

std::vector<std::string> get_strings(const Json& doc, const char* key) {
  const Json& v = field(doc, key);
  std::vector<std::string> out;
  if (v.is_array()) {
    for (const auto& item : v) {
      if (!item.is_string()) break;
      out.push_back(item.get<std::string>());
    }
    if (out.size() == v.size()) return out;
  }
  throw_error(ErrorKind::validation, std::string("recipe key '") + key + "' must be an array of strings");
}

ImportanceSource get_importance(const Json& doc, const char* key) {
  const Json& v = field(doc, key);
  ImportanceSource src;
  if (v.is_string()) {
    src.path = v.get<std::string>();
    return src;
  }
  if (!v.is_object()) {
    throw_error(ErrorKind::validation,
                std::string("recipe key '") + key + "' must be a path or a toy oracle object");
  }
  for (const auto& [k, _] : v.items()) {
    if (k != "calibration" && k != "samples") {
      throw_error(ErrorKind::validation, std::string("unknown key '") + k + "' in " + key);
    }
  }
  if (!v.contains("calibration") || !v["calibration"].is_string() ||
      v["calibration"].get<std::string>().empty()) {
    throw_error(ErrorKind::validation, std::string(key) + ".calibration must be a non-empty path");
  }
  src.calibration = v["calibration"].get<std::string>();
  if (v.contains("samples")) {
    if (!v["samples"].is_number_integer() || v["samples"].get<std::int64_t>() <= 0) {
      throw_error(ErrorKind::validation, std::string(key) + ".samples must be a positive integer");
    }
    src.samples = v["samples"].get<std::size_t>();
  }
  return src;
}

void remove_quietly(const std::string& path) {
  std::error_code ec;
  std::filesystem::remove(path, ec);
}

}  // namespace

std::string_view to_string(MergeMethod m) { return kMethodNames[static_cast<int>(m)]; }

MergeMethod parse_method(std::string_view name) {
  for (int i = 0; i < 5; ++i) {
    if (kMethodNames[i] == name) return static_cast<MergeMethod>(i);
  }
  throw_error(ErrorKind::validation, "unknown merge method '" + std::string(name) + "'");
}

Json ImportanceSource::to_json() const {
  if (!is_toy()) return path;
  return {{"calibration", calibration}, {"samples", samples}};
}

MergeRecipe parse_recipe(const Json& doc) {
  if (!doc.is_object()) throw_error(ErrorKind::format, "recipe is not a JSON object");
  for (const auto& [key, _] : doc.items()) {
    if (!kKnownKeys.contains(key)) throw_error(ErrorKind::format, "unknown recipe key '" + key + "'");
  }
  if (!doc.contains("method")) throw_error(ErrorKind::validation, "recipe is missing 'method'");
  MergeRecipe r;
  r.method = parse_method(get_string(doc, "method"));
  const auto required = required_keys(r.method);
  const auto optional = optional_keys(r.method);
  for (const auto& key : required) {
    if (!doc.contains(key)) {
      throw_error(ErrorKind::validation, "method '" + std::string(to_string(r.method)) +
                                             "' requires recipe key '" + key + "'");
    }
  }
  for (const auto& [key, _] : doc.items()) {
    if (!required.contains(key) && !optional.contains(key)) {
      throw_error(ErrorKind::validation, "recipe key '" + key + "' does not apply to method '" +
                                             std::string(to_string(r.method)) + "'");
    }
  }

  const bool baseline = r.method == MergeMethod::task_arithmetic ||
                        r.method == MergeMethod::ties || r.method == MergeMethod::dare;
  if (baseline) r.params.lambda_t = r.params.lambda_r = kDefaultBaselineScale;

  if (doc.contains("base")) r.base = get_string(doc, "base");
  r.task_model = get_string(doc, "task_model");
  r.reasoning_model = get_string(doc, "reasoning_model");
  r.output = get_string(doc, "output");
  if (r.output.empty()) throw_error(ErrorKind::validation, "recipe key 'output' must not be empty");
  r.report_output = doc.contains("report_output") ? get_string(doc, "report_output")
                                                  : r.output + ".report.json";
  if (doc.contains("task_importance")) r.task_importance = get_importance(doc, "task_importance");
  if (doc.contains("reasoning_importance")) {
    r.reasoning_importance = get_importance(doc, "reasoning_importance");
  }
  if (doc.contains("p_t")) r.params.p_t = get_ratio(doc, "p_t");
  if (doc.contains("p_r")) r.params.p_r = get_ratio(doc, "p_r");
  if (doc.contains("lambda_t")) r.params.lambda_t = get_number(doc, "lambda_t");
  if (doc.contains("lambda_r")) r.params.lambda_r = get_number(doc, "lambda_r");
  // Baselines take one factor: a single lambda sets both.
  if (baseline && doc.contains("lambda_t") != doc.contains("lambda_r")) {
    if (doc.contains("lambda_t")) r.params.lambda_r = r.params.lambda_t;
    else r.params.lambda_t = r.params.lambda_r;
  }
  if (baseline && r.params.lambda_t != r.params.lambda_r) {
    throw_error(ErrorKind::validation, "method '" + std::string(to_string(r.method)) +
                                           "' uses one scaling factor; lambda_t and lambda_r differ");
  }
  if (doc.contains("scope")) r.params.scope = parse_scope(get_string(doc, "scope"));
  if (doc.contains("zero_policy")) r.params.zero_policy = parse_zero_policy(get_string(doc, "zero_policy"));
  if (doc.contains("include_patterns")) r.include_patterns = get_strings(doc, "include_patterns");
  if (doc.contains("exclude_patterns")) r.exclude_patterns = get_strings(doc, "exclude_patterns");
  if (doc.contains("dtype_policy")) {
    const auto policy = get_string(doc, "dtype_policy");
    if (policy == "keep") {
      r.dtype_policy = DTypePolicy::keep;
    } else if (policy == "f32") {
      r.dtype_policy = DTypePolicy::force_f32;
    } else {
      throw_error(ErrorKind::validation, "dtype_policy must be \"keep\" or \"f32\"");
    }
  }
  if (doc.contains("seed")) {
    if (!doc["seed"].is_number_unsigned()) {
      throw_error(ErrorKind::validation, "recipe key 'seed' must be an unsigned 64-bit integer");
    }
    r.seed = doc["seed"].get<std::uint64_t>();
  }
  if (doc.contains("density")) {
    r.density = get_ratio(doc, "density");
    if (r.density == 0.0) throw_error(ErrorKind::validation, "recipe key 'density' must lie in (0, 1]");
  }
  if (doc.contains("drop_rate")) {
    r.drop_rate = get_ratio(doc, "drop_rate");
    if (r.drop_rate == 1.0) throw_error(ErrorKind::validation, "recipe key 'drop_rate' must lie in [0, 1)");
  }
  if (r.method == MergeMethod::linear) {
    if (doc.contains("weights")) {
      const Json& w = doc["weights"];
      if (!w.is_array() || w.size() != 2 ||
          !std::all_of(w.begin(), w.end(), [](const Json& x) { return x.is_number(); })) {
        throw_error(ErrorKind::validation,
                    "recipe key 'weights' must hold two numbers (task, reasoning)");
      }
      r.weights = {w[0].get<double>(), w[1].get<double>()};
    } else {
      r.weights = {0.5, 0.5};
    }
  }
  return r;
}

Json MergeRecipe::to_json() const {
  Json j = {{"method", to_string(method)},
            {"task_model", task_model},
            {"reasoning_model", reasoning_model},
            {"include_patterns", include_patterns},
            {"exclude_patterns", exclude_patterns},
            {"dtype_policy", dtype_policy == DTypePolicy::keep ? "keep" : "f32"},
            {"output", output},
            {"report_output", report_output}};
  if (method != MergeMethod::linear) j["base"] = base;
  switch (method) {
    case MergeMethod::reason_any:
      j["task_importance"] = task_importance.to_json();
      j["reasoning_importance"] = reasoning_importance.to_json();
      j["p_t"] = params.p_t;
      j["p_r"] = params.p_r;
      j["scope"] = to_string(params.scope);
      j["zero_policy"] = to_string(params.zero_policy);
      break;
    case MergeMethod::linear:
      j["weights"] = weights;
      break;
    case MergeMethod::ties:
      j["density"] = density;
      break;
    case MergeMethod::dare:
      j["drop_rate"] = drop_rate;
      j["seed"] = seed;
      break;
    case MergeMethod::task_arithmetic:
      break;
  }
  if (method != MergeMethod::linear) {
    j["lambda_t"] = params.lambda_t;
    j["lambda_r"] = params.lambda_r;
  }
  return j;
}

MergeRecipe load_recipe(const std::filesystem::path& path, const Json& overrides) {
  Json doc = parse_json_strict(read_text_file(path), "recipe " + path.string());
  if (doc.is_object()) {
    for (const auto& [key, value] : overrides.items()) doc[key] = value;
  }
  return parse_recipe(doc);
}

namespace {

ImportanceMap resolve_importance(const ImportanceSource& source, const WeightMap& model,
                                 const std::string& model_path,
                                 const std::vector<std::string>& eligible, unsigned threads) {
  if (!source.is_toy()) return load_importance(source.path, model, eligible);
  const ToyModel toy = ToyModel::from_weight_map(model);
  const CalibrationSet calib = load_calibration(source.calibration, source.samples);
  return toy_importance(toy, calib, model_path, threads);
}

bool all_f64(const std::vector<const WeightMap*>& maps, const CompatReport& compat) {
  if (compat.shared.empty()) return false;
  for (const auto* m : maps) {
    for (const auto& name : compat.shared) {
      if (m->meta(name).dtype != DType::F64) return false;
    }
  }
  return true;
}

}  // namespace

MergeOutcome merge_models(const MergeRecipe& recipe, const WeightMap& base, const WeightMap& task,
                          const WeightMap& reasoning, const ImportanceMap* task_importance,
                          const ImportanceMap* reasoning_importance, unsigned threads) {
  MergeOptions options;
  options.dtype_policy = recipe.dtype_policy;
  options.filters = {recipe.include_patterns, recipe.exclude_patterns};
  options.threads = threads;

  std::vector<const WeightMap*> maps;
  if (recipe.method != MergeMethod::linear) maps.push_back(&base);
  maps.push_back(&task);
  maps.push_back(&reasoning);
  const CompatReport compat = validate_compatibility(maps, options.filters);
  if (compat.shared.empty()) {
    throw_error(ErrorKind::consistency, "no eligible tensors shared by the input models");
  }
  // All-f64 inputs keep f64 arithmetic; anything else works in f32.
  options.precision = all_f64(maps, compat) ? Precision::f64 : Precision::f32;

  MergeOutcome out;
  switch (recipe.method) {
    case MergeMethod::reason_any: {
      if (task_importance == nullptr || reasoning_importance == nullptr) {
        throw_error(ErrorKind::usage, "reason-any needs importance maps for both models");
      }
      auto result = reason_any_merge(base, task, reasoning, *task_importance,
                                     *reasoning_importance, recipe.params, options);
      out.merged = std::move(result.merged);
      out.report = std::move(result.report);
      break;
    }
    case MergeMethod::linear: {
      const WeightMap models[] = {task, reasoning};
      out.merged = linear_merge(models, recipe.weights, options);
      out.report.method = "linear";
      break;
    }
    default: {
      const TaskVector tvs[] = {compute_task_vector(task, base, compat, options.precision),
                                compute_task_vector(reasoning, base, compat, options.precision)};
      const double lambda = recipe.params.lambda_t;
      if (recipe.method == MergeMethod::task_arithmetic) {
        out.merged = task_arithmetic_merge(base, tvs, lambda, options);
      } else if (recipe.method == MergeMethod::ties) {
        out.merged = ties_merge(base, tvs, lambda, recipe.density, options);
      } else {
        out.merged = dare_merge(base, tvs, lambda, recipe.drop_rate, recipe.seed, options);
      }
      out.report.method = std::string(to_string(recipe.method));
      break;
    }
  }
  out.report.eligible_param_count = compat.eligible_param_count;
  out.report.skipped = compat.skipped;
  out.report.recipe = recipe.to_json();
  return out;
}

MergeReport run_recipe(const MergeRecipe& recipe, unsigned threads) {
  const auto start = std::chrono::steady_clock::now();
  const WeightMap task = open_checkpoint(recipe.task_model);
  const WeightMap reasoning = open_checkpoint(recipe.reasoning_model);
  WeightMap base;
  if (recipe.method != MergeMethod::linear) base = open_checkpoint(recipe.base);

  std::optional<ImportanceMap> imp_t;
  std::optional<ImportanceMap> imp_r;
  if (recipe.method == MergeMethod::reason_any) {
    const WeightMap* maps[] = {&base, &task, &reasoning};
    const auto compat =
        validate_compatibility(maps, {recipe.include_patterns, recipe.exclude_patterns});
    imp_t = resolve_importance(recipe.task_importance, task, recipe.task_model, compat.shared,
                               threads);
    imp_r = resolve_importance(recipe.reasoning_importance, reasoning, recipe.reasoning_model,
                               compat.shared, threads);
  }
  auto [merged, report] = merge_models(recipe, base, task, reasoning, imp_t ? &*imp_t : nullptr,
                                       imp_r ? &*imp_r : nullptr, threads);
  merged.metadata()["merge_method"] = std::string(to_string(recipe.method));

  const auto write_start = std::chrono::steady_clock::now();
  try {
    write_checkpoint(recipe.output, merged, {recipe.dtype_policy, true, threads});
    report.timing_ms["write"] = std::chrono::duration<double, std::milli>(
                                    std::chrono::steady_clock::now() - write_start)
                                    .count();
    report.timing_ms["total"] =
        std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
    const auto tmp = recipe.report_output + ".tmp";
    {
      std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
      out << report.to_json().dump(2) << '\n';
      out.close();
      if (!out) throw_error(ErrorKind::io, "cannot write report " + recipe.report_output);
    }
    std::filesystem::rename(tmp, recipe.report_output);
  } catch (const std::filesystem::filesystem_error& e) {
    remove_quietly(recipe.output);
    remove_quietly(recipe.report_output + ".tmp");
    throw_error(ErrorKind::io, std::string("cannot write report: ") + e.what());
  } catch (...) {
    remove_quietly(recipe.output);
    remove_quietly(recipe.report_output + ".tmp");
    throw;
  }
  return report;
}

}  // namespace gradmerge
