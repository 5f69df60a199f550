#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "gradmerge/json_util.hpp"
#include "gradmerge/recipe.hpp"
#include "gradmerge/toy_model.hpp"

namespace gradmerge {

struct ToyArchitecture {
  std::size_t input_dim = 8;
  std::vector<std::size_t> hidden = {8};
  std::size_t output_dim = 2;
  Activation hidden_activation = Activation::tanh;
  Activation output_activation = Activation::identity;
  double init_scale = 0.5;

  std::vector<std::size_t> widths() const;
};

// Inputs are zero outside [block_begin, block_end); the target on `output` is
// rule(w . x) for a seeded w, and every other output keeps the base model's
// prediction, so a specialist only has to move one block of the network.
struct TaskRule {
  std::string name;
  std::size_t block_begin = 0;
  std::size_t block_end = 0;
  std::size_t output = 0;
  Activation rule = Activation::tanh;
  std::size_t train_samples = 64;
  std::size_t eval_samples = 64;
  std::size_t calibration_samples = kDefaultCalibrationSamples;
};

struct TrainingSchedule {
  std::size_t base_samples = 64;
  std::size_t base_steps = 100;
  std::size_t specialist_steps = 100;
  double learning_rate = 0.1;
};

struct ToyExperimentConfig {
  std::uint64_t seed = 0;
  ToyArchitecture architecture;
  std::array<TaskRule, 2> tasks;  // [0]: task model, [1]: reasoning model
  TrainingSchedule training;
  std::vector<MergeRecipe> merge_grid;
  std::vector<double> injection_grid = {0.10, 0.05, 0.01};
  double injection_scale = 1.0;

  Json to_json() const;
};

ToyExperimentConfig default_experiment_config();
// Strict like recipes; merge_grid entries are recipes without paths.
ToyExperimentConfig parse_experiment_config(const Json& doc);
ToyExperimentConfig load_experiment_config(const std::filesystem::path& path);

// Parameters are kept on a 2^-32 grid (|w| < 2^16) during training so that
// base + (fine - base) reproduces fine exactly in f64.
inline constexpr double kParameterGrid = 0x1.0p-32;
void snap_to_grid(ToyModel& model);

struct TaskData {
  CalibrationSet train;
  CalibrationSet eval;
  CalibrationSet calibration;
};

struct TrainedModels {
  ToyModel base;
  std::array<ToyModel, 2> specialists;
  std::array<TaskData, 2> data;
};

// Full-batch gradient descent. Throws a validation error naming the step when
// the loss stops being finite.
void train(ToyModel& model, const CalibrationSet& data, std::size_t steps, double learning_rate,
           unsigned threads = 0);

TrainedModels train_experiment_models(const ToyExperimentConfig& cfg, unsigned threads = 0);

struct Table {
  std::vector<std::string> columns;
  std::vector<std::vector<Json>> rows;

  Json to_json() const;
  std::string to_csv() const;
};

// Injects the task-0 specialist's delta into the base through Top-K (highest)
// and Bottom-K (lowest) masks of its importance, at every grid ratio.
Table run_additive_experiment(const ToyExperimentConfig& cfg, unsigned threads = 0);
Table run_additive_experiment(const ToyExperimentConfig& cfg, const TrainedModels& models,
                              unsigned threads = 0);

// Every grid recipe on the two specialists; losses on both tasks and the
// worst degradation relative to the matching expert.
Table run_merge_comparison(const ToyExperimentConfig& cfg, unsigned threads = 0);
Table run_merge_comparison(const ToyExperimentConfig& cfg, const TrainedModels& models,
                           unsigned threads = 0);

// One seeded trial: random toy model and data, importance at the model, then
// the same random-sign perturbation of size delta applied through the Top-K
// and Bottom-K masks. Returns |dL| per ratio.
struct SensitivityOutcome {
  double ratio = 0.0;
  double bottom = 0.0;
  double top = 0.0;
};

std::vector<SensitivityOutcome> sensitivity_trial(std::uint64_t seed, std::span<const double> ratios,
                                                  double delta,
                                                  const ToyArchitecture& architecture = {},
                                                  std::size_t samples = kDefaultCalibrationSamples);

}  // namespace gradmerge
