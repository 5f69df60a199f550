#include "gradmerge/cli.hpp"

#include <CLI11.hpp>
#include <spdlog/sinks/ostream_sink.h>
#include <spdlog/spdlog.h>

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <optional>

#include "gradmerge/error.hpp"
#include "gradmerge/experiment.hpp"
#include "gradmerge/importance.hpp"
#include "gradmerge/parallel.hpp"
#include "gradmerge/recipe.hpp"
#include "gradmerge/spectral.hpp"

namespace gradmerge {

namespace {

// Files a command has finished writing; removed if the command fails later.
class OutputGuard {
 public:
  void track(const std::string& path) { paths_.push_back(path); }
  void commit() { paths_.clear(); }
  ~OutputGuard() {
    for (const auto& p : paths_) {
      std::error_code ec;
      std::filesystem::remove(p, ec);
    }
  }

 private:
  std::vector<std::string> paths_;
};

void write_text(const std::string& path, const std::string& text, OutputGuard& guard) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    f << text;
    f.close();
    if (!f) {
      std::error_code ec;
      std::filesystem::remove(tmp, ec);
      throw_error(ErrorKind::io, "cannot write " + path);
    }
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw_error(ErrorKind::io, "cannot write " + path + ": " + ec.message());
  guard.track(path);
}

struct MergeFlags {
  std::string recipe;
  std::optional<std::string> method, base, task_model, reasoning_model, task_importance,
      reasoning_importance, scope, zero_policy, dtype_policy, output, report_output;
  std::optional<double> p_t, p_r, lambda_t, lambda_r, density, drop_rate;
  std::optional<std::uint64_t> seed;
  std::vector<std::string> include, exclude;
  std::vector<double> weights;

  Json overrides() const {
    Json o = Json::object();
    auto put = [&](const char* key, const auto& value) {
      if (value) o[key] = *value;
    };
    put("method", method);
    put("base", base);
    put("task_model", task_model);
    put("reasoning_model", reasoning_model);
    put("task_importance", task_importance);
    put("reasoning_importance", reasoning_importance);
    put("scope", scope);
    put("zero_policy", zero_policy);
    put("dtype_policy", dtype_policy);
    put("output", output);
    put("report_output", report_output);
    put("p_t", p_t);
    put("p_r", p_r);
    put("lambda_t", lambda_t);
    put("lambda_r", lambda_r);
    put("density", density);
    put("drop_rate", drop_rate);
    put("seed", seed);
    if (!include.empty()) o["include_patterns"] = include;
    if (!exclude.empty()) o["exclude_patterns"] = exclude;
    if (!weights.empty()) o["weights"] = weights;
    return o;
  }
};

int cmd_merge(const MergeFlags& flags, spdlog::logger& log) {
  const Json overrides = flags.overrides();
  if (!overrides.empty()) {
    const Json file = parse_json_strict(read_text_file(flags.recipe), "recipe " + flags.recipe);
    for (const auto& [key, value] : overrides.items()) {
      const std::string before = file.is_object() && file.contains(key) ? file[key].dump() : "unset";
      log.info("override {}: recipe {} -> flag {}", key, before, value.dump());
    }
  }
  const MergeRecipe recipe = load_recipe(flags.recipe, overrides);
  log.info("resolved recipe: {}", recipe.to_json().dump());
  const MergeReport report = run_recipe(recipe, default_thread_count());
  log.info("{}: wrote {} and {}", report.method, recipe.output, recipe.report_output);
  if (report.method == "reason-any") {
    log.info("|N_t|={} |N_r|={} overlap={} |T'_t|={} |T'_r|={}", report.task_selected,
             report.reasoning_selected, report.overlap, report.task_final, report.reasoning_final);
  }
  for (const auto& w : report.warnings) log.warn("{}", w);
  return 0;
}

struct ImportanceFlags {
  std::string model;
  std::string calib;
  std::size_t samples = kDefaultCalibrationSamples;
  std::string out;
  std::string model_id;
};

int cmd_importance(const ImportanceFlags& flags, spdlog::logger& log) {
  log.info("resolved: model={} calib={} samples={} out={} threads={}", flags.model, flags.calib,
           flags.samples, flags.out, default_thread_count());
  const WeightMap model_map = open_checkpoint(flags.model);
  const ToyModel model = ToyModel::from_weight_map(model_map);
  const CalibrationSet calib = load_calibration(flags.calib, flags.samples);
  const ImportanceMap importance =
      toy_importance(model, calib, flags.model_id.empty() ? flags.model : flags.model_id);
  write_importance(flags.out, importance);
  try {
    load_importance(flags.out, model_map);
  } catch (...) {
    std::error_code ec;
    std::filesystem::remove(flags.out, ec);
    throw;
  }
  log.info("wrote importance for {} tensors over {} samples to {}", importance.names().size(),
           calib.samples.size(), flags.out);
  return 0;
}

struct SpectralFlags {
  std::string dump;
  std::string pattern{kDefaultLayerPattern};
  std::string out;
  std::string csv;
  bool keep_singular_values = false;
};

int cmd_spectral(const SpectralFlags& flags, spdlog::logger& log, std::ostream& out) {
  log.info("resolved: dump={} pattern={} out={} csv={} keep_singular_values={}", flags.dump,
           flags.pattern, flags.out.empty() ? "-" : flags.out, flags.csv.empty() ? "(none)" : flags.csv,
           flags.keep_singular_values);
  const WeightMap dump = open_checkpoint(flags.dump);
  SpectralOptions options;
  options.pattern = flags.pattern;
  options.keep_singular_values = flags.keep_singular_values;
  const SpectralReport report = layerwise_spectral_report(dump, options);
  for (const auto& [name, reason] : report.skipped) log.info("skipped {}: {}", name, reason);
  for (const auto& note : report.notes) log.info("{}", note);
  OutputGuard guard;
  const std::string json = report.to_json().dump(2) + "\n";
  if (flags.out.empty() || flags.out == "-") {
    out << json;
  } else {
    write_text(flags.out, json, guard);
  }
  if (!flags.csv.empty()) write_text(flags.csv, report.to_csv(), guard);
  guard.commit();
  return 0;
}

struct InjectFlags {
  std::string base;
  std::string fine;
  std::string importance;
  std::string calib;
  std::size_t samples = kDefaultCalibrationSamples;
  double ratio = kDefaultSelectionRatio;
  std::string direction = "lowest";
  std::string scope = "global";
  std::string dtype_policy = "keep";
  std::string out;
};

int cmd_inject(const InjectFlags& flags, spdlog::logger& log) {
  if (flags.importance.empty() == flags.calib.empty()) {
    throw_error(ErrorKind::usage, "give exactly one of --importance and --calib");
  }
  if (flags.dtype_policy != "keep" && flags.dtype_policy != "f32") {
    throw_error(ErrorKind::usage, "--dtype-policy must be keep or f32");
  }
  log.info("resolved: base={} fine={} importance={} ratio={} direction={} scope={} dtype_policy={} out={}",
           flags.base, flags.fine,
           flags.importance.empty() ? "toy:" + flags.calib : flags.importance, flags.ratio,
           flags.direction, flags.scope, flags.dtype_policy, flags.out);
  const auto direction = parse_direction(flags.direction);
  const auto scope = parse_scope(flags.scope);
  const WeightMap base = open_checkpoint(flags.base);
  const WeightMap fine = open_checkpoint(flags.fine);
  const WeightMap* maps[] = {&base, &fine};
  const CompatReport compat = validate_compatibility(maps);
  if (compat.shared.empty()) throw_error(ErrorKind::consistency, "no eligible tensors shared by base and fine");
  bool f64 = true;
  for (const auto& name : compat.shared) {
    f64 = f64 && base.meta(name).dtype == DType::F64 && fine.meta(name).dtype == DType::F64;
  }
  MergeOptions options;
  options.dtype_policy = flags.dtype_policy == "f32" ? DTypePolicy::force_f32 : DTypePolicy::keep;
  options.precision = f64 ? Precision::f64 : Precision::f32;
  const TaskVector tv = compute_task_vector(fine, base, compat, options.precision);
  const ImportanceMap importance =
      flags.importance.empty()
          ? toy_importance(ToyModel::from_weight_map(fine), load_calibration(flags.calib, flags.samples),
                           flags.fine)
          : load_importance(flags.importance, fine, compat.shared);
  const WeightMap injected =
      additive_inject(base, tv, importance, flags.ratio, direction, scope, options);
  write_checkpoint(flags.out, injected, {options.dtype_policy, true, default_thread_count()});
  log.info("wrote {}", flags.out);
  return 0;
}

int cmd_inspect(const std::string& path, bool as_json, std::ostream& out) {
  const auto file = CheckpointFile::open(path);
  if (as_json) {
    Json tensors = Json::array();
    for (const auto& t : file->tensors()) {
      tensors.push_back({{"name", t.name}, {"dtype", dtype_name(t.dtype)}, {"shape", t.shape}});
    }
    out << Json({{"metadata", file->metadata()}, {"tensors", tensors}}).dump(2) << '\n';
    return 0;
  }
  for (const auto& [key, value] : file->metadata()) out << "# " << key << " = " << value << '\n';
  for (const auto& t : file->tensors()) {
    out << t.name << '\t' << dtype_name(t.dtype) << '\t' << shape_string(t.shape) << '\n';
  }
  return 0;
}

struct ExperimentFlags {
  std::string config;
  std::string out_dir;
  std::string kind = "both";
};

int cmd_experiment(const ExperimentFlags& flags, spdlog::logger& log) {
  const ToyExperimentConfig cfg =
      flags.config.empty() ? default_experiment_config() : load_experiment_config(flags.config);
  if (flags.kind != "both" && flags.kind != "additive" && flags.kind != "comparison") {
    throw_error(ErrorKind::usage, "--kind must be additive, comparison or both");
  }
  log.info("resolved config: {}", cfg.to_json().dump());
  std::filesystem::create_directories(flags.out_dir);
  const auto dir = std::filesystem::path(flags.out_dir);
  const TrainedModels models = train_experiment_models(cfg, default_thread_count());
  OutputGuard guard;
  write_text((dir / "config.json").string(), cfg.to_json().dump(2) + "\n", guard);
  auto emit = [&](const std::string& stem, const Table& table) {
    write_text((dir / (stem + ".csv")).string(), table.to_csv(), guard);
    write_text((dir / (stem + ".json")).string(), table.to_json().dump(2) + "\n", guard);
    log.info("wrote {} rows to {}/{}.{{csv,json}}", table.rows.size(), flags.out_dir, stem);
  };
  if (flags.kind != "comparison") emit("additive", run_additive_experiment(cfg, models, default_thread_count()));
  if (flags.kind != "additive") emit("comparison", run_merge_comparison(cfg, models, default_thread_count()));
  guard.commit();
  return 0;
}

std::shared_ptr<spdlog::logger> make_logger(std::ostream& err, const std::string& level) {
  auto sink = std::make_shared<spdlog::sinks::ostream_sink_mt>(err, true);
  auto log = std::make_shared<spdlog::logger>("gradmerge", sink);
  log->set_pattern("[%l] %v");
  log->set_level(spdlog::level::from_str(level));
  return log;
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Gradient-guided model merging toolkit", "gradmerge"};
  app.require_subcommand(1);
  unsigned threads = 1;
  std::string log_level = "info";
  app.add_option("--threads", threads, "Worker threads inside modules")
      ->envname("GRADMERGE_THREADS")
      ->check(CLI::Range(1u, 1024u))
      ->capture_default_str();
  app.add_option("--log-level", log_level, "trace, debug, info, warn, error or off")
      ->check(CLI::IsMember({"trace", "debug", "info", "warn", "error", "off"}))
      ->capture_default_str();

  MergeFlags merge;
  auto* merge_cmd = app.add_subcommand("merge", "Merge checkpoints as described by a recipe");
  merge_cmd->add_option("recipe", merge.recipe, "Recipe JSON file")->required();
  merge_cmd->add_option("--method", merge.method, "reason-any, linear, task-arithmetic, ties or dare");
  merge_cmd->add_option("--base", merge.base, "Base checkpoint");
  merge_cmd->add_option("--task-model", merge.task_model, "Task (domain) checkpoint");
  merge_cmd->add_option("--reasoning-model", merge.reasoning_model, "Reasoning checkpoint");
  merge_cmd->add_option("--task-importance", merge.task_importance, "Task importance file");
  merge_cmd->add_option("--reasoning-importance", merge.reasoning_importance, "Reasoning importance file");
  merge_cmd->add_option("--p-t", merge.p_t, "Top-K ratio on task importance");
  merge_cmd->add_option("--p-r", merge.p_r, "Bottom-K ratio on reasoning importance");
  merge_cmd->add_option("--lambda-t", merge.lambda_t, "Task scaling factor");
  merge_cmd->add_option("--lambda-r", merge.lambda_r, "Reasoning scaling factor");
  merge_cmd->add_option("--scope", merge.scope, "global or per_tensor");
  merge_cmd->add_option("--zero-policy", merge.zero_policy, "include or exclude_zero");
  merge_cmd->add_option("--include", merge.include, "Tensor name glob to include (repeatable)");
  merge_cmd->add_option("--exclude", merge.exclude, "Tensor name glob to exclude (repeatable)");
  merge_cmd->add_option("--dtype-policy", merge.dtype_policy, "keep or f32");
  merge_cmd->add_option("--seed", merge.seed, "Seed for DARE");
  merge_cmd->add_option("--density", merge.density, "TIES density");
  merge_cmd->add_option("--drop-rate", merge.drop_rate, "DARE drop rate");
  merge_cmd->add_option("--weights", merge.weights, "Linear weights (task reasoning)")->expected(2);
  merge_cmd->add_option("--output", merge.output, "Output checkpoint");
  merge_cmd->add_option("--report-output", merge.report_output, "Report JSON path");

  ImportanceFlags importance;
  auto* importance_cmd =
      app.add_subcommand("importance", "Mean |gradient| importance of a toy model");
  importance_cmd->add_option("--model", importance.model, "Toy model checkpoint")->required();
  importance_cmd->add_option("--calib", importance.calib, "Calibration JSON file")->required();
  importance_cmd->add_option("--samples", importance.samples, "Use the first N samples")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
  importance_cmd->add_option("--out", importance.out, "Importance checkpoint to write")->required();
  importance_cmd->add_option("--model-id", importance.model_id, "Model id recorded in metadata");

  SpectralFlags spectral;
  auto* spectral_cmd = app.add_subcommand("spectral", "Layer-wise nuclear norms of a gradient dump");
  spectral_cmd->add_option("--dump", spectral.dump, "Gradient dump checkpoint")->required();
  spectral_cmd->add_option("--pattern", spectral.pattern, "Name template with {layer} and {kind}")
      ->capture_default_str();
  spectral_cmd->add_option("--out", spectral.out, "Report JSON path (stdout when omitted)");
  spectral_cmd->add_option("--csv", spectral.csv, "Flat CSV path");
  spectral_cmd->add_flag("--keep-singular-values", spectral.keep_singular_values,
                         "Include singular values in the report");

  InjectFlags inject;
  auto* inject_cmd = app.add_subcommand("inject", "Add a masked task vector to the base model");
  inject_cmd->add_option("--base", inject.base, "Base checkpoint")->required();
  inject_cmd->add_option("--fine", inject.fine, "Fine-tuned checkpoint")->required();
  inject_cmd->add_option("--importance", inject.importance, "Importance file of the fine-tuned model");
  inject_cmd->add_option("--calib", inject.calib, "Calibration JSON for the toy oracle");
  inject_cmd->add_option("--samples", inject.samples, "Calibration sample cap")->capture_default_str();
  inject_cmd->add_option("--ratio", inject.ratio, "Selection ratio")->capture_default_str();
  inject_cmd->add_option("--direction", inject.direction, "highest or lowest")->capture_default_str();
  inject_cmd->add_option("--scope", inject.scope, "global or per_tensor")->capture_default_str();
  inject_cmd->add_option("--dtype-policy", inject.dtype_policy, "keep or f32")->capture_default_str();
  inject_cmd->add_option("--out", inject.out, "Output checkpoint")->required();

  std::string inspect_path;
  bool inspect_json = false;
  auto* inspect_cmd = app.add_subcommand("inspect", "List tensors and metadata of a checkpoint");
  inspect_cmd->add_option("checkpoint", inspect_path, "Checkpoint file")->required();
  inspect_cmd->add_flag("--json", inspect_json, "Print JSON instead of a table");

  ExperimentFlags experiment;
  auto* experiment_cmd = app.add_subcommand("experiment", "Run the toy experiments");
  experiment_cmd->add_option("--config", experiment.config, "Experiment config JSON (defaults when omitted)");
  experiment_cmd->add_option("--out-dir", experiment.out_dir, "Directory for tables")->required();
  experiment_cmd->add_option("--kind", experiment.kind, "additive, comparison or both")
      ->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? 0 : 2;
  }

  const auto log = make_logger(err, log_level);
  set_default_thread_count(threads);
  try {
    if (*merge_cmd) return cmd_merge(merge, *log);
    if (*importance_cmd) return cmd_importance(importance, *log);
    if (*spectral_cmd) return cmd_spectral(spectral, *log, out);
    if (*inject_cmd) return cmd_inject(inject, *log);
    if (*inspect_cmd) return cmd_inspect(inspect_path, inspect_json, out);
    if (*experiment_cmd) return cmd_experiment(experiment, *log);
  } catch (const Error& e) {
    err << to_string(e.kind()) << " error: " << e.what() << '\n';
    return e.kind() == ErrorKind::usage ? 2 : 1;
  } catch (const std::exception& e) {
    err << "io error: " << e.what() << '\n';
    return 1;
  }
  return 2;
}

}  // namespace gradmerge
