#include "gradmerge/toy_model.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>

#include "gradmerge/error.hpp"
#include "gradmerge/json_util.hpp"

namespace gradmerge {

std::string_view to_string(Activation a) { return a == Activation::tanh ? "tanh" : "identity"; }

std::string_view to_string(LossKind l) { return l == LossKind::mse ? "mse" : "cross_entropy"; }

Activation parse_activation(std::string_view name) {
  if (name == "tanh") return Activation::tanh;
  if (name == "identity") return Activation::identity;
  throw_error(ErrorKind::usage, "unknown activation '" + std::string(name) + "'");
}

LossKind parse_loss(std::string_view name) {
  if (name == "mse") return LossKind::mse;
  if (name == "cross_entropy") return LossKind::cross_entropy;
  throw_error(ErrorKind::usage, "unknown loss '" + std::string(name) + "'");
}

std::string weight_name(std::size_t layer) { return "layers." + std::to_string(layer) + ".weight"; }
std::string bias_name(std::size_t layer) { return "layers." + std::to_string(layer) + ".bias"; }

CalibrationSet load_calibration(const std::string& path, std::size_t sample_cap) {
  const Json doc = parse_json_strict(read_text_file(path), "calibration file " + path);
  CalibrationSet calib;
  try {
    calib.id = doc.value("id", path);
    for (const auto& record : doc.at("samples")) {
      if (calib.samples.size() >= sample_cap) break;
      calib.samples.push_back({record.at("input").get<std::vector<double>>(),
                               record.at("target").get<std::vector<double>>()});
    }
  } catch (const Json::exception& e) {
    throw_error(ErrorKind::format, "calibration file " + path + ": " + e.what());
  }
  if (calib.samples.empty()) {
    throw_error(ErrorKind::validation, "calibration file " + path + " has no samples");
  }
  return calib;
}

void save_calibration(const std::string& path, const CalibrationSet& calib) {
  Json doc = {{"id", calib.id}, {"samples", Json::array()}};
  for (const auto& s : calib.samples) {
    doc["samples"].push_back({{"input", s.input}, {"target", s.target}});
  }
  std::ofstream out(path);
  if (!out) throw_error(ErrorKind::io, "cannot write " + path);
  out << doc.dump(1) << '\n';
}

ToyModel ToyModel::random(std::span<const std::size_t> widths, Activation hidden,
                          Activation output, LossKind loss, std::uint64_t seed, double scale) {
  if (widths.size() < 2) throw_error(ErrorKind::usage, "a toy model needs at least two widths");
  std::mt19937_64 rng(seed);
  auto uniform = [&] {
    const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53;
    return (2.0 * u - 1.0) * scale;
  };
  ToyModel model;
  model.loss = loss;
  for (std::size_t l = 0; l + 1 < widths.size(); ++l) {
    DenseLayer layer;
    layer.inputs = widths[l];
    layer.outputs = widths[l + 1];
    layer.activation = (l + 2 == widths.size()) ? output : hidden;
    layer.weight.resize(layer.inputs * layer.outputs);
    layer.bias.resize(layer.outputs);
    for (auto& w : layer.weight) w = uniform();
    for (auto& b : layer.bias) b = uniform();
    model.layers.push_back(std::move(layer));
  }
  return model;
}

std::size_t ToyModel::parameter_count() const {
  std::size_t n = 0;
  for (const auto& l : layers) n += l.weight.size() + l.bias.size();
  return n;
}

void ToyModel::validate() const {
  if (layers.empty()) throw_error(ErrorKind::validation, "toy model has no layers");
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const auto& layer = layers[l];
    if (layer.weight.size() != layer.inputs * layer.outputs || layer.bias.size() != layer.outputs) {
      throw_error(ErrorKind::validation, "layer " + std::to_string(l) + " has inconsistent sizes");
    }
    if (l > 0 && layers[l - 1].outputs != layer.inputs) {
      throw_error(ErrorKind::validation,
                  "layer " + std::to_string(l) + " input width does not chain");
    }
    auto finite = [](double v) { return std::isfinite(v); };
    if (!std::all_of(layer.weight.begin(), layer.weight.end(), finite) ||
        !std::all_of(layer.bias.begin(), layer.bias.end(), finite)) {
      throw_error(ErrorKind::validation, "layer " + std::to_string(l) + " has non-finite parameters");
    }
  }
}

GradientMap ToyModel::parameters() const {
  GradientMap out;
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const auto& layer = layers[l];
    out[weight_name(l)] = {{static_cast<std::int64_t>(layer.outputs),
                            static_cast<std::int64_t>(layer.inputs)},
                           layer.weight};
    out[bias_name(l)] = {{static_cast<std::int64_t>(layer.outputs)}, layer.bias};
  }
  return out;
}

void ToyModel::set_parameters(const GradientMap& params) {
  for (std::size_t l = 0; l < layers.size(); ++l) {
    auto& layer = layers[l];
    const auto& w = params.at(weight_name(l)).values;
    const auto& b = params.at(bias_name(l)).values;
    if (w.size() != layer.weight.size() || b.size() != layer.bias.size()) {
      throw_error(ErrorKind::consistency, "parameter sizes do not match layer " + std::to_string(l));
    }
    layer.weight = w;
    layer.bias = b;
  }
}

WeightMap ToyModel::to_weight_map(DType dtype, const std::string& id) const {
  WeightMap map(id);
  map.metadata()["toy.hidden"] = std::string(to_string(layers.front().activation));
  map.metadata()["toy.output"] = std::string(to_string(layers.back().activation));
  map.metadata()["toy.loss"] = std::string(to_string(loss));
  if (layers.size() == 1) map.metadata()["toy.hidden"] = "tanh";
  for (const auto& [name, array] : parameters()) {
    map.insert_values<double>(name, dtype, array.shape, array.values);
  }
  return map;
}

ToyModel ToyModel::from_weight_map(const WeightMap& map, Activation hidden, Activation output,
                                   LossKind loss) {
  ToyModel model;
  model.loss = loss;
  for (std::size_t l = 0; map.contains(weight_name(l)); ++l) {
    const auto& wm = map.meta(weight_name(l));
    if (wm.shape.size() != 2 || !map.contains(bias_name(l))) {
      throw_error(ErrorKind::validation, "'" + wm.name + "' is not a dense layer weight");
    }
    DenseLayer layer;
    layer.outputs = static_cast<std::size_t>(wm.shape[0]);
    layer.inputs = static_cast<std::size_t>(wm.shape[1]);
    layer.weight = map.values<double>(weight_name(l));
    layer.bias = map.values<double>(bias_name(l));
    model.layers.push_back(std::move(layer));
  }
  if (model.layers.empty()) {
    throw_error(ErrorKind::validation, map.id() + " has no 'layers.0.weight' tensor");
  }
  for (std::size_t l = 0; l < model.layers.size(); ++l) {
    model.layers[l].activation = (l + 1 == model.layers.size()) ? output : hidden;
  }
  model.validate();
  return model;
}

ToyModel ToyModel::from_weight_map(const WeightMap& map) {
  const auto& meta = map.metadata();
  auto field = [&](const char* key) -> const std::string& {
    auto it = meta.find(key);
    if (it == meta.end()) {
      throw_error(ErrorKind::validation,
                  map.id() + " is not a toy model checkpoint (missing metadata '" + key + "')");
    }
    return it->second;
  };
  return from_weight_map(map, parse_activation(field("toy.hidden")),
                         parse_activation(field("toy.output")), parse_loss(field("toy.loss")));
}

namespace {

double activate(Activation a, double z) { return a == Activation::tanh ? std::tanh(z) : z; }

struct ForwardTrace {
  std::vector<std::vector<double>> activations;  // activations[0] = input
};

ForwardTrace forward(const ToyModel& model, std::span<const double> input) {
  if (input.size() != model.input_dim()) {
    throw_error(ErrorKind::usage, "sample input has " + std::to_string(input.size()) +
                                      " features, model expects " +
                                      std::to_string(model.input_dim()));
  }
  ForwardTrace trace;
  trace.activations.emplace_back(input.begin(), input.end());
  for (const auto& layer : model.layers) {
    const auto& in = trace.activations.back();
    std::vector<double> out(layer.outputs);
    for (std::size_t o = 0; o < layer.outputs; ++o) {
      double z = layer.bias[o];
      const double* row = layer.weight.data() + o * layer.inputs;
      for (std::size_t i = 0; i < layer.inputs; ++i) z += row[i] * in[i];
      out[o] = activate(layer.activation, z);
    }
    trace.activations.push_back(std::move(out));
  }
  return trace;
}

void check_target(const ToyModel& model, const Sample& sample) {
  if (sample.target.size() != model.output_dim()) {
    throw_error(ErrorKind::usage, "sample target has " + std::to_string(sample.target.size()) +
                                      " values, model produces " +
                                      std::to_string(model.output_dim()));
  }
}

std::vector<double> softmax(std::span<const double> logits) {
  const double peak = *std::max_element(logits.begin(), logits.end());
  std::vector<double> p(logits.size());
  double total = 0.0;
  for (std::size_t k = 0; k < logits.size(); ++k) total += p[k] = std::exp(logits[k] - peak);
  for (auto& v : p) v /= total;
  return p;
}

double loss_value(LossKind kind, std::span<const double> output, std::span<const double> target) {
  if (kind == LossKind::mse) {
    double sum = 0.0;
    for (std::size_t k = 0; k < output.size(); ++k) {
      const double r = output[k] - target[k];
      sum += r * r;
    }
    return sum / static_cast<double>(output.size());
  }
  const double peak = *std::max_element(output.begin(), output.end());
  double total = 0.0;
  for (double z : output) total += std::exp(z - peak);
  const double log_normalizer = peak + std::log(total);
  double loss = 0.0;
  for (std::size_t k = 0; k < output.size(); ++k) loss -= target[k] * (output[k] - log_normalizer);
  return loss;
}

std::vector<double> loss_gradient(LossKind kind, std::span<const double> output,
                                  std::span<const double> target) {
  std::vector<double> g(output.size());
  if (kind == LossKind::mse) {
    const double scale = 2.0 / static_cast<double>(output.size());
    for (std::size_t k = 0; k < output.size(); ++k) g[k] = scale * (output[k] - target[k]);
    return g;
  }
  double mass = 0.0;
  for (double t : target) mass += t;
  const auto p = softmax(output);
  for (std::size_t k = 0; k < output.size(); ++k) g[k] = p[k] * mass - target[k];
  return g;
}

}  // namespace

std::vector<double> toy_predict(const ToyModel& model, std::span<const double> input) {
  return forward(model, input).activations.back();
}

double toy_forward_loss(const ToyModel& model, const Sample& sample) {
  check_target(model, sample);
  const auto trace = forward(model, sample.input);
  return loss_value(model.loss, trace.activations.back(), sample.target);
}

double mean_loss(const ToyModel& model, std::span<const Sample> samples) {
  if (samples.empty()) throw_error(ErrorKind::usage, "mean loss over an empty sample set");
  double total = 0.0;
  for (const auto& s : samples) total += toy_forward_loss(model, s);
  return total / static_cast<double>(samples.size());
}

GradientMap toy_backward(const ToyModel& model, const Sample& sample) {
  check_target(model, sample);
  const auto trace = forward(model, sample.input);
  std::vector<double> upstream = loss_gradient(model.loss, trace.activations.back(), sample.target);

  GradientMap grads;
  for (std::size_t l = model.layers.size(); l-- > 0;) {
    const auto& layer = model.layers[l];
    const auto& in = trace.activations[l];
    const auto& out = trace.activations[l + 1];
    std::vector<double> delta(layer.outputs);
    for (std::size_t o = 0; o < layer.outputs; ++o) {
      const double slope = layer.activation == Activation::tanh ? 1.0 - out[o] * out[o] : 1.0;
      delta[o] = upstream[o] * slope;
    }
    Array dw{{static_cast<std::int64_t>(layer.outputs), static_cast<std::int64_t>(layer.inputs)},
             std::vector<double>(layer.weight.size())};
    std::vector<double> next(layer.inputs, 0.0);
    for (std::size_t o = 0; o < layer.outputs; ++o) {
      const double* row = layer.weight.data() + o * layer.inputs;
      for (std::size_t i = 0; i < layer.inputs; ++i) {
        dw.values[o * layer.inputs + i] = delta[o] * in[i];
        next[i] += row[i] * delta[o];
      }
    }
    grads[weight_name(l)] = std::move(dw);
    grads[bias_name(l)] = {{static_cast<std::int64_t>(layer.outputs)}, delta};
    upstream = std::move(next);
  }
  return grads;
}

GradientMap finite_diff_gradient(const ToyModel& model, const Sample& sample, double eps) {
  if (!(eps > 0.0)) throw_error(ErrorKind::usage, "finite difference step must be positive");
  ToyModel probe = model;
  GradientMap grads;
  for (std::size_t l = 0; l < model.layers.size(); ++l) {
    for (bool is_weight : {true, false}) {
      auto& params = is_weight ? probe.layers[l].weight : probe.layers[l].bias;
      Array g;
      g.shape = is_weight ? Shape{static_cast<std::int64_t>(model.layers[l].outputs),
                                  static_cast<std::int64_t>(model.layers[l].inputs)}
                          : Shape{static_cast<std::int64_t>(model.layers[l].outputs)};
      g.values.resize(params.size());
      for (std::size_t i = 0; i < params.size(); ++i) {
        const double original = params[i];
        params[i] = original + eps;
        const double up = toy_forward_loss(probe, sample);
        params[i] = original - eps;
        const double down = toy_forward_loss(probe, sample);
        params[i] = original;
        g.values[i] = (up - down) / (2.0 * eps);
      }
      grads[is_weight ? weight_name(l) : bias_name(l)] = std::move(g);
    }
  }
  return grads;
}

}  // namespace gradmerge
