#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "gradmerge/checkpoint.hpp"

namespace gradmerge {

// Dense f64 array with a shape; the currency of the toy gradient oracle.
struct Array {
  Shape shape;
  std::vector<double> values;

  friend bool operator==(const Array&, const Array&) = default;
};

using GradientMap = std::map<std::string, Array, std::less<>>;

enum class Activation { identity, tanh };
enum class LossKind { mse, cross_entropy };

std::string_view to_string(Activation a);
std::string_view to_string(LossKind l);
Activation parse_activation(std::string_view name);
LossKind parse_loss(std::string_view name);

struct DenseLayer {
  std::size_t inputs = 0;
  std::size_t outputs = 0;
  std::vector<double> weight;  // outputs x inputs, row-major
  std::vector<double> bias;    // outputs
  Activation activation = Activation::identity;
};

struct Sample {
  std::vector<double> input;
  std::vector<double> target;  // regression target, or class distribution for cross-entropy
};

struct CalibrationSet {
  std::string id;
  std::vector<Sample> samples;
};

inline constexpr std::size_t kDefaultCalibrationSamples = 100;

// JSON layout: {"id": str, "samples": [{"input": [..], "target": [..]}, ...]}.
// Keeps the first `sample_cap` records.
CalibrationSet load_calibration(const std::string& path,
                                std::size_t sample_cap = kDefaultCalibrationSamples);
void save_calibration(const std::string& path, const CalibrationSet& calib);

// Small multilayer perceptron with hand-written backprop. Parameters are named
// "layers.<i>.weight" and "layers.<i>.bias".
struct ToyModel {
  std::vector<DenseLayer> layers;
  LossKind loss = LossKind::mse;

  // widths = {input, hidden..., output}; hidden layers use `hidden`, the last
  // layer `output`. Parameters are uniform in [-scale, scale] from
  // mt19937_64(seed), which makes them identical on every conforming platform.
  static ToyModel random(std::span<const std::size_t> widths, Activation hidden, Activation output,
                         LossKind loss, std::uint64_t seed, double scale = 0.5);

  static ToyModel from_weight_map(const WeightMap& map, Activation hidden, Activation output,
                                  LossKind loss);
  // Architecture taken from the toy.* metadata written by to_weight_map.
  static ToyModel from_weight_map(const WeightMap& map);
  WeightMap to_weight_map(DType dtype = DType::F64, const std::string& id = "toy") const;

  std::size_t input_dim() const { return layers.front().inputs; }
  std::size_t output_dim() const { return layers.back().outputs; }
  std::size_t parameter_count() const;
  void validate() const;

  GradientMap parameters() const;
  void set_parameters(const GradientMap& params);
};

std::string weight_name(std::size_t layer);
std::string bias_name(std::size_t layer);

double toy_forward_loss(const ToyModel& model, const Sample& sample);
std::vector<double> toy_predict(const ToyModel& model, std::span<const double> input);
double mean_loss(const ToyModel& model, std::span<const Sample> samples);

// Exact reverse-mode gradient of toy_forward_loss.
GradientMap toy_backward(const ToyModel& model, const Sample& sample);

// Central differences, one parameter at a time.
GradientMap finite_diff_gradient(const ToyModel& model, const Sample& sample, double eps);

}  // namespace gradmerge
