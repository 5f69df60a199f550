#include "gradmerge/experiment.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <sstream>

#include "gradmerge/error.hpp"
#include "gradmerge/importance.hpp"
#include "gradmerge/parallel.hpp"
#include "gradmerge/selection.hpp"

namespace gradmerge {

std::vector<std::size_t> ToyArchitecture::widths() const {
  std::vector<std::size_t> w = {input_dim};
  w.insert(w.end(), hidden.begin(), hidden.end());
  w.push_back(output_dim);
  return w;
}

namespace {

void check_keys(const Json& obj, std::initializer_list<std::string_view> allowed,
                const std::string& where) {
  if (!obj.is_object()) throw_error(ErrorKind::validation, where + " must be an object");
  for (const auto& [key, _] : obj.items()) {
    if (std::find(allowed.begin(), allowed.end(), key) == allowed.end()) {
      throw_error(ErrorKind::format, "unknown key '" + key + "' in " + where);
    }
  }
}

std::size_t get_count(const Json& obj, const char* key, std::size_t fallback, bool positive = true) {
  if (!obj.contains(key)) return fallback;
  const Json& v = obj[key];
  if (!v.is_number_unsigned() || (positive && v.get<std::uint64_t>() == 0)) {
    throw_error(ErrorKind::validation, std::string("'") + key + "' must be a " +
                                           (positive ? "positive" : "non-negative") + " integer");
  }
  return v.get<std::size_t>();
}

double get_real(const Json& obj, const char* key, double fallback) {
  if (!obj.contains(key)) return fallback;
  if (!obj[key].is_number() || !std::isfinite(obj[key].get<double>())) {
    throw_error(ErrorKind::validation, std::string("'") + key + "' must be a finite number");
  }
  return obj[key].get<double>();
}

Activation get_activation(const Json& obj, const char* key, Activation fallback) {
  if (!obj.contains(key)) return fallback;
  if (!obj[key].is_string()) throw_error(ErrorKind::validation, std::string("'") + key + "' must be a string");
  return parse_activation(obj[key].get<std::string>());
}

constexpr const char* kPathKeys[] = {"base",   "task_model", "reasoning_model", "task_importance",
                                     "reasoning_importance", "output", "report_output"};

MergeRecipe parse_grid_entry(const Json& entry) {
  if (!entry.is_object()) throw_error(ErrorKind::validation, "merge_grid entries must be objects");
  Json doc = entry;
  for (const char* key : kPathKeys) {
    if (doc.contains(key)) {
      throw_error(ErrorKind::validation, std::string("merge_grid entries take no '") + key + "'");
    }
  }
  if (!doc.contains("method")) throw_error(ErrorKind::validation, "merge_grid entry is missing 'method'");
  doc["task_model"] = "task";
  doc["reasoning_model"] = "reasoning";
  doc["output"] = "merged";
  if (doc["method"] != "linear") doc["base"] = "base";
  if (doc["method"] == "reason-any") {
    doc["task_importance"] = "task";
    doc["reasoning_importance"] = "reasoning";
  }
  return parse_recipe(doc);
}

Json grid_entry_json(const MergeRecipe& recipe) {
  Json j = recipe.to_json();
  for (const char* key : kPathKeys) j.erase(key);
  if (recipe.include_patterns.empty()) j.erase("include_patterns");
  if (recipe.exclude_patterns.empty()) j.erase("exclude_patterns");
  return j;
}

std::vector<MergeRecipe> default_grid() {
  const Json entries = Json::parse(R"([
    {"method": "reason-any"},
    {"method": "reason-any", "p_t": 0.1, "p_r": 0.1},
    {"method": "task-arithmetic"},
    {"method": "ties"},
    {"method": "dare", "seed": 0},
    {"method": "linear"}
  ])");
  std::vector<MergeRecipe> grid;
  for (const auto& e : entries) grid.push_back(parse_grid_entry(e));
  return grid;
}

void validate_config(const ToyExperimentConfig& cfg) {
  const auto& a = cfg.architecture;
  if (a.input_dim == 0 || a.output_dim == 0 ||
      std::find(a.hidden.begin(), a.hidden.end(), 0u) != a.hidden.end()) {
    throw_error(ErrorKind::validation, "architecture widths must be positive");
  }
  for (const auto& t : cfg.tasks) {
    if (t.block_begin >= t.block_end || t.block_end > a.input_dim) {
      throw_error(ErrorKind::validation, "task '" + t.name + "' has an invalid input block");
    }
    if (t.output >= a.output_dim) {
      throw_error(ErrorKind::validation, "task '" + t.name + "' targets a missing output");
    }
  }
  if (cfg.merge_grid.empty()) throw_error(ErrorKind::validation, "merge_grid must not be empty");
  if (cfg.injection_grid.empty()) throw_error(ErrorKind::validation, "injection_grid must not be empty");
  for (double p : cfg.injection_grid) {
    if (!(p >= 0.0 && p <= 1.0)) throw_error(ErrorKind::validation, "injection ratios must lie in [0, 1]");
  }
  if (!(cfg.training.learning_rate > 0.0)) {
    throw_error(ErrorKind::validation, "learning_rate must be positive");
  }
}

}  // namespace

ToyExperimentConfig default_experiment_config() {
  ToyExperimentConfig cfg;
  cfg.tasks[0] = {"task_a", 0, 4, 0, Activation::tanh, 64, 64, kDefaultCalibrationSamples};
  cfg.tasks[1] = {"task_b", 4, 8, 1, Activation::tanh, 64, 64, kDefaultCalibrationSamples};
  cfg.merge_grid = default_grid();
  return cfg;
}

ToyExperimentConfig parse_experiment_config(const Json& doc) {
  check_keys(doc,
             {"seed", "architecture", "tasks", "training", "merge_grid", "injection_grid",
              "injection_scale"},
             "experiment config");
  ToyExperimentConfig cfg = default_experiment_config();
  if (doc.contains("seed")) {
    if (!doc["seed"].is_number_unsigned()) throw_error(ErrorKind::validation, "'seed' must be an unsigned integer");
    cfg.seed = doc["seed"].get<std::uint64_t>();
  }
  if (doc.contains("architecture")) {
    const Json& a = doc["architecture"];
    check_keys(a,
               {"input_dim", "hidden", "output_dim", "hidden_activation", "output_activation",
                "init_scale"},
               "architecture");
    auto& arch = cfg.architecture;
    arch.input_dim = get_count(a, "input_dim", arch.input_dim);
    arch.output_dim = get_count(a, "output_dim", arch.output_dim);
    if (a.contains("hidden")) {
      if (!a["hidden"].is_array()) throw_error(ErrorKind::validation, "'hidden' must be an array");
      arch.hidden.clear();
      for (const auto& h : a["hidden"]) {
        if (!h.is_number_unsigned()) throw_error(ErrorKind::validation, "'hidden' widths must be integers");
        arch.hidden.push_back(h.get<std::size_t>());
      }
    }
    arch.hidden_activation = get_activation(a, "hidden_activation", arch.hidden_activation);
    arch.output_activation = get_activation(a, "output_activation", arch.output_activation);
    arch.init_scale = get_real(a, "init_scale", arch.init_scale);
  }
  if (doc.contains("tasks")) {
    const Json& tasks = doc["tasks"];
    if (!tasks.is_array() || tasks.size() != 2) {
      throw_error(ErrorKind::validation, "'tasks' must list exactly two task rules");
    }
    for (std::size_t i = 0; i < 2; ++i) {
      const Json& t = tasks[i];
      check_keys(t,
                 {"name", "block", "output", "rule", "train_samples", "eval_samples",
                  "calibration_samples"},
                 "task rule");
      auto& rule = cfg.tasks[i];
      if (t.contains("name")) {
        if (!t["name"].is_string()) throw_error(ErrorKind::validation, "task 'name' must be a string");
        rule.name = t["name"].get<std::string>();
      }
      if (t.contains("block")) {
        const Json& b = t["block"];
        if (!b.is_array() || b.size() != 2 || !b[0].is_number_unsigned() ||
            !b[1].is_number_unsigned()) {
          throw_error(ErrorKind::validation, "task 'block' must be [begin, end]");
        }
        rule.block_begin = b[0].get<std::size_t>();
        rule.block_end = b[1].get<std::size_t>();
      }
      rule.output = get_count(t, "output", rule.output, false);
      rule.rule = get_activation(t, "rule", rule.rule);
      rule.train_samples = get_count(t, "train_samples", rule.train_samples);
      rule.eval_samples = get_count(t, "eval_samples", rule.eval_samples);
      rule.calibration_samples = get_count(t, "calibration_samples", rule.calibration_samples);
    }
  }
  if (doc.contains("training")) {
    const Json& t = doc["training"];
    check_keys(t, {"base_samples", "base_steps", "specialist_steps", "learning_rate"}, "training");
    auto& tr = cfg.training;
    tr.base_samples = get_count(t, "base_samples", tr.base_samples);
    tr.base_steps = get_count(t, "base_steps", tr.base_steps, false);
    tr.specialist_steps = get_count(t, "specialist_steps", tr.specialist_steps, false);
    tr.learning_rate = get_real(t, "learning_rate", tr.learning_rate);
  }
  if (doc.contains("merge_grid")) {
    if (!doc["merge_grid"].is_array()) throw_error(ErrorKind::validation, "'merge_grid' must be an array");
    cfg.merge_grid.clear();
    for (const auto& e : doc["merge_grid"]) cfg.merge_grid.push_back(parse_grid_entry(e));
  }
  if (doc.contains("injection_grid")) {
    const Json& g = doc["injection_grid"];
    if (!g.is_array()) throw_error(ErrorKind::validation, "'injection_grid' must be an array");
    cfg.injection_grid.clear();
    for (const auto& p : g) {
      if (!p.is_number()) throw_error(ErrorKind::validation, "injection ratios must be numbers");
      cfg.injection_grid.push_back(p.get<double>());
    }
  }
  cfg.injection_scale = get_real(doc, "injection_scale", cfg.injection_scale);
  validate_config(cfg);
  return cfg;
}

ToyExperimentConfig load_experiment_config(const std::filesystem::path& path) {
  return parse_experiment_config(
      parse_json_strict(read_text_file(path), "experiment config " + path.string()));
}

Json ToyExperimentConfig::to_json() const {
  Json tasks_json = Json::array();
  for (const auto& t : tasks) {
    tasks_json.push_back({{"name", t.name},
                          {"block", {t.block_begin, t.block_end}},
                          {"output", t.output},
                          {"rule", to_string(t.rule)},
                          {"train_samples", t.train_samples},
                          {"eval_samples", t.eval_samples},
                          {"calibration_samples", t.calibration_samples}});
  }
  Json grid = Json::array();
  for (const auto& r : merge_grid) grid.push_back(grid_entry_json(r));
  return {{"seed", seed},
          {"architecture",
           {{"input_dim", architecture.input_dim},
            {"hidden", architecture.hidden},
            {"output_dim", architecture.output_dim},
            {"hidden_activation", to_string(architecture.hidden_activation)},
            {"output_activation", to_string(architecture.output_activation)},
            {"init_scale", architecture.init_scale}}},
          {"tasks", tasks_json},
          {"training",
           {{"base_samples", training.base_samples},
            {"base_steps", training.base_steps},
            {"specialist_steps", training.specialist_steps},
            {"learning_rate", training.learning_rate}}},
          {"merge_grid", grid},
          {"injection_grid", injection_grid},
          {"injection_scale", injection_scale}};
}

void snap_to_grid(ToyModel& model) {
  for (auto& layer : model.layers) {
    for (auto* values : {&layer.weight, &layer.bias}) {
      for (auto& w : *values) {
        if (!(std::fabs(w) < 0x1.0p16)) {
          throw_error(ErrorKind::validation, "toy parameter left the representable range");
        }
        w = std::nearbyint(w / kParameterGrid) * kParameterGrid;
      }
    }
  }
}

void train(ToyModel& model, const CalibrationSet& data, std::size_t steps, double learning_rate,
           unsigned threads) {
  if (data.samples.empty()) throw_error(ErrorKind::usage, "training set is empty");
  const double inv_n = 1.0 / static_cast<double>(data.samples.size());
  for (std::size_t step = 0; step < steps; ++step) {
    std::vector<GradientMap> grads(data.samples.size());
    parallel_for(
        data.samples.size(), [&](std::size_t i) { grads[i] = toy_backward(model, data.samples[i]); },
        threads);
    GradientMap params = model.parameters();
    for (auto& [name, array] : params) {
      std::vector<double> mean(array.values.size(), 0.0);
      for (const auto& g : grads) {
        const auto& gv = g.find(name)->second.values;
        for (std::size_t j = 0; j < mean.size(); ++j) mean[j] += gv[j];
      }
      for (std::size_t j = 0; j < mean.size(); ++j) {
        array.values[j] -= learning_rate * (mean[j] * inv_n);
      }
    }
    model.set_parameters(params);
    const double loss = mean_loss(model, data.samples);
    if (!std::isfinite(loss)) {
      throw_error(ErrorKind::validation,
                  "training diverged at step " + std::to_string(step) + " (loss " +
                      std::to_string(loss) + ")");
    }
    try {
      snap_to_grid(model);
    } catch (const Error&) {
      throw_error(ErrorKind::validation, "training diverged at step " + std::to_string(step));
    }
  }
}

namespace {

// Streams are keyed by purpose so changing one sample count leaves the others alone.
std::mt19937_64 stream(std::uint64_t seed, std::uint64_t purpose) {
  return std::mt19937_64(splitmix64(seed ^ splitmix64(purpose)));
}

double uniform_pm1(std::mt19937_64& rng, double grid) {
  const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53;
  return std::nearbyint((2.0 * u - 1.0) / grid) * grid;
}

constexpr double kInputGrid = 0x1.0p-8;

enum Purpose : std::uint64_t {
  kInit = 1,
  kBaseRule = 2,
  kBaseData = 3,
  kTaskRule = 16,   // + task index
  kTrain = 32,      // + task index
  kEval = 48,
  kCalibration = 64,
};

std::vector<double> random_vector(std::mt19937_64& rng, std::size_t n) {
  std::vector<double> v(n);
  for (auto& x : v) x = uniform_pm1(rng, kInputGrid);
  return v;
}

double apply_rule(Activation rule, double z) { return rule == Activation::tanh ? std::tanh(z) : z; }

CalibrationSet task_samples(const ToyExperimentConfig& cfg, const ToyModel& base,
                            std::size_t task_index, std::uint64_t purpose, std::size_t count,
                            const std::string& id) {
  const TaskRule& rule = cfg.tasks[task_index];
  auto rule_rng = stream(cfg.seed, kTaskRule + task_index);
  const auto w = random_vector(rule_rng, rule.block_end - rule.block_begin);
  auto rng = stream(cfg.seed, purpose + task_index);
  CalibrationSet set;
  set.id = id;
  for (std::size_t s = 0; s < count; ++s) {
    Sample sample;
    sample.input.assign(cfg.architecture.input_dim, 0.0);
    double z = 0.0;
    for (std::size_t i = rule.block_begin; i < rule.block_end; ++i) {
      sample.input[i] = uniform_pm1(rng, kInputGrid);
      z += w[i - rule.block_begin] * sample.input[i];
    }
    sample.target = toy_predict(base, sample.input);
    sample.target[rule.output] = apply_rule(rule.rule, z);
    set.samples.push_back(std::move(sample));
  }
  return set;
}

CalibrationSet base_samples(const ToyExperimentConfig& cfg) {
  const auto& arch = cfg.architecture;
  auto rule_rng = stream(cfg.seed, kBaseRule);
  std::vector<std::vector<double>> g(arch.output_dim);
  for (auto& row : g) row = random_vector(rule_rng, arch.input_dim);
  auto rng = stream(cfg.seed, kBaseData);
  CalibrationSet set;
  set.id = "base";
  for (std::size_t s = 0; s < cfg.training.base_samples; ++s) {
    Sample sample;
    sample.input = random_vector(rng, arch.input_dim);
    for (const auto& row : g) {
      double z = 0.0;
      for (std::size_t i = 0; i < arch.input_dim; ++i) z += row[i] * sample.input[i];
      sample.target.push_back(0.5 * std::tanh(z));
    }
    set.samples.push_back(std::move(sample));
  }
  return set;
}

ToyModel evaluate_as_toy(const WeightMap& map, const ToyArchitecture& arch) {
  return ToyModel::from_weight_map(map, arch.hidden_activation, arch.output_activation,
                                   LossKind::mse);
}

}  // namespace

TrainedModels train_experiment_models(const ToyExperimentConfig& cfg, unsigned threads) {
  validate_config(cfg);
  const auto& arch = cfg.architecture;
  const auto widths = arch.widths();
  TrainedModels out;
  out.base = ToyModel::random(widths, arch.hidden_activation, arch.output_activation,
                              LossKind::mse, splitmix64(cfg.seed ^ kInit), arch.init_scale);
  snap_to_grid(out.base);
  train(out.base, base_samples(cfg), cfg.training.base_steps, cfg.training.learning_rate, threads);
  for (std::size_t t = 0; t < 2; ++t) {
    const auto& rule = cfg.tasks[t];
    auto& data = out.data[t];
    data.train = task_samples(cfg, out.base, t, kTrain, rule.train_samples, rule.name + "-train");
    data.eval = task_samples(cfg, out.base, t, kEval, rule.eval_samples, rule.name + "-eval");
    data.calibration = task_samples(cfg, out.base, t, kCalibration, rule.calibration_samples,
                                    rule.name + "-calibration");
    out.specialists[t] = out.base;
    train(out.specialists[t], data.train, cfg.training.specialist_steps,
          cfg.training.learning_rate, threads);
  }
  return out;
}

Json Table::to_json() const {
  Json rows_json = Json::array();
  for (const auto& row : rows) {
    Json obj = Json::object();
    for (std::size_t c = 0; c < columns.size(); ++c) obj[columns[c]] = row[c];
    rows_json.push_back(std::move(obj));
  }
  return {{"columns", columns}, {"rows", rows_json}};
}

std::string Table::to_csv() const {
  std::ostringstream out;
  for (std::size_t c = 0; c < columns.size(); ++c) out << (c ? "," : "") << columns[c];
  out << '\n';
  for (const auto& row : rows) {
    for (std::size_t c = 0; c < row.size(); ++c) {
      if (c) out << ',';
      const Json& cell = row[c];
      if (cell.is_null()) continue;
      if (cell.is_string()) {
        const auto s = cell.get<std::string>();
        if (s.find_first_of(",\"\n") == std::string::npos) {
          out << s;
        } else {
          out << '"';
          for (char ch : s) out << (ch == '"' ? "\"\"" : std::string(1, ch));
          out << '"';
        }
      } else {
        out << cell.dump();
      }
    }
    out << '\n';
  }
  return out.str();
}

Table run_additive_experiment(const ToyExperimentConfig& cfg, unsigned threads) {
  return run_additive_experiment(cfg, train_experiment_models(cfg, threads), threads);
}

Table run_additive_experiment(const ToyExperimentConfig& cfg, const TrainedModels& models,
                              unsigned threads) {
  const auto& arch = cfg.architecture;
  const auto& eval = models.data[0].eval.samples;
  const WeightMap base = models.base.to_weight_map(DType::F64, "base");
  const WeightMap fine = models.specialists[0].to_weight_map(DType::F64, cfg.tasks[0].name);
  const WeightMap* maps[] = {&base, &fine};
  const CompatReport compat = validate_compatibility(maps);
  const TaskVector tv = compute_task_vector(fine, base, compat, Precision::f64);
  const ImportanceMap importance =
      toy_importance(models.specialists[0], models.data[0].calibration, cfg.tasks[0].name, threads);

  Table table;
  table.columns = {"kind", "direction", "ratio", "selected", "loss"};
  table.rows.push_back({"reference", "base", nullptr, 0, mean_loss(models.base, eval)});
  table.rows.push_back({"reference", "specialist", nullptr, compat.eligible_param_count,
                        mean_loss(models.specialists[0], eval)});
  for (double p : cfg.injection_grid) {
    for (auto direction : {InjectDirection::highest, InjectDirection::lowest}) {
      const SelectionMask mask =
          direction == InjectDirection::highest
              ? select_topk(importance, p, SelectionScope::global, threads)
              : select_bottomk(importance, p, SelectionScope::global, ZeroPolicy::include, threads);
      const WeightMap injected = apply_masked_delta(base, tv, mask, cfg.injection_scale);
      table.rows.push_back({"inject", to_string(direction), p, mask.cardinality(),
                            mean_loss(evaluate_as_toy(injected, arch), eval)});
    }
  }
  return table;
}

Table run_merge_comparison(const ToyExperimentConfig& cfg, unsigned threads) {
  return run_merge_comparison(cfg, train_experiment_models(cfg, threads), threads);
}

Table run_merge_comparison(const ToyExperimentConfig& cfg, const TrainedModels& models,
                           unsigned threads) {
  const auto& arch = cfg.architecture;
  const auto& eval_a = models.data[0].eval.samples;
  const auto& eval_b = models.data[1].eval.samples;
  const WeightMap base = models.base.to_weight_map(DType::F64, "base");
  const WeightMap task = models.specialists[0].to_weight_map(DType::F64, cfg.tasks[0].name);
  const WeightMap reasoning = models.specialists[1].to_weight_map(DType::F64, cfg.tasks[1].name);
  const ImportanceMap imp_t =
      toy_importance(models.specialists[0], models.data[0].calibration, cfg.tasks[0].name, threads);
  const ImportanceMap imp_r =
      toy_importance(models.specialists[1], models.data[1].calibration, cfg.tasks[1].name, threads);

  const double expert_a = mean_loss(models.specialists[0], eval_a);
  const double expert_b = mean_loss(models.specialists[1], eval_b);
  Table table;
  table.columns = {"method", "params", "loss_a", "loss_b", "max_degradation"};
  auto add_row = [&](const std::string& method, const std::string& params, const ToyModel& model) {
    const double la = mean_loss(model, eval_a);
    const double lb = mean_loss(model, eval_b);
    table.rows.push_back({method, params, la, lb, std::max(la - expert_a, lb - expert_b)});
  };
  add_row("base", "{}", models.base);
  add_row("expert_a", "{}", models.specialists[0]);
  add_row("expert_b", "{}", models.specialists[1]);
  for (const auto& recipe : cfg.merge_grid) {
    const auto outcome = merge_models(recipe, base, task, reasoning, &imp_t, &imp_r, threads);
    Json params = grid_entry_json(recipe);
    params.erase("method");
    add_row(std::string(to_string(recipe.method)), params.dump(), evaluate_as_toy(outcome.merged, arch));
  }
  return table;
}

std::vector<SensitivityOutcome> sensitivity_trial(std::uint64_t seed, std::span<const double> ratios,
                                                  double delta, const ToyArchitecture& architecture,
                                                  std::size_t samples) {
  const ToyModel model =
      ToyModel::random(architecture.widths(), architecture.hidden_activation,
                       architecture.output_activation, LossKind::mse, seed, architecture.init_scale);
  auto rng = stream(seed, kCalibration);
  CalibrationSet calib;
  calib.id = "sensitivity-" + std::to_string(seed);
  for (std::size_t s = 0; s < samples; ++s) {
    calib.samples.push_back({random_vector(rng, architecture.input_dim),
                             random_vector(rng, architecture.output_dim)});
  }
  const ImportanceMap importance = toy_importance(model, calib, "sensitivity", 1);
  const GradientMap params = model.parameters();
  std::map<std::string, std::vector<double>> signs;
  for (const auto& [name, array] : params) {
    auto& s = signs[name];
    for (std::size_t j = 0; j < array.values.size(); ++j) s.push_back((rng() >> 63) ? 1.0 : -1.0);
  }
  const double l0 = mean_loss(model, calib.samples);
  auto perturbed_change = [&](const SelectionMask& mask) {
    GradientMap moved = params;
    for (auto& [name, array] : moved) {
      const BitVector& bits = mask.tensor(name);
      const auto& s = signs[name];
      for (std::size_t j = 0; j < array.values.size(); ++j) {
        if (bits.test(j)) array.values[j] += delta * s[j];
      }
    }
    ToyModel m = model;
    m.set_parameters(moved);
    return std::fabs(mean_loss(m, calib.samples) - l0);
  };
  std::vector<SensitivityOutcome> out;
  for (double p : ratios) {
    SensitivityOutcome o;
    o.ratio = p;
    o.top = perturbed_change(select_topk(importance, p));
    o.bottom = perturbed_change(select_bottomk(importance, p));
    out.push_back(o);
  }
  return out;
}

}  // namespace gradmerge
