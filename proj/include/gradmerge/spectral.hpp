#pragma once

#include <Eigen/Core>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "gradmerge/checkpoint.hpp"
#include "gradmerge/json_util.hpp"

namespace gradmerge {

using Matrix = Eigen::MatrixXd;

// Singular values in descending order, computed in f64. Throws a validation
// error on non-finite input.
Eigen::VectorXd singular_values(const Matrix& m);

double nuclear_norm(const Matrix& m);

inline constexpr double kNormSlack = 1e-9;
inline constexpr double kRankCutoff = 1e-10;  // relative to the largest singular value

struct NormBounds {
  double fro = 0.0;
  double nuc = 0.0;
  std::size_t rank = 0;
  bool lower_holds = false;  // fro <= nuc
  bool upper_holds = false;  // nuc <= sqrt(rank) * fro
};

NormBounds verify_norm_bounds(const Matrix& m);

// Mean absolute difference of consecutive values; needs at least two.
double mad(std::span<const double> series);

// Tensor name template with {layer} and {kind} placeholders, plus an optional
// {sample} placeholder for per-sample dumps. Kinds are q, k, v, o in either case.
inline constexpr std::string_view kDefaultLayerPattern = "{kind}.{layer}";
inline constexpr std::string_view kTransformerLayerPattern =
    "model.layers.{layer}.self_attn.{kind}_proj.weight";

struct SpectralEntry {
  std::string name;
  char kind = 'Q';
  std::size_t layer = 0;
  std::optional<std::size_t> sample;
  double nuclear = 0.0;
  double frobenius = 0.0;
  std::size_t rank = 0;
  bool lower_holds = false;
  bool upper_holds = false;
  std::vector<double> singular_values;  // kept only on request
};

struct SpectralReport {
  std::string model_id;
  std::string pattern;
  bool per_sample = false;
  std::vector<SpectralEntry> entries;  // ordered by (kind, layer, sample)
  // Per kind: MAD over the layer series (per-layer mean over samples in
  // per-sample dumps). Absent when a kind covers fewer than two layers.
  std::map<char, double> mad_by_kind;
  std::map<char, std::vector<double>> series_by_kind;
  std::vector<std::pair<std::string, std::string>> skipped;  // name, reason
  std::vector<std::string> notes;

  Json to_json() const;
  std::string to_csv() const;
};

struct SpectralOptions {
  std::string pattern{kDefaultLayerPattern};
  bool keep_singular_values = false;
  unsigned threads = 0;
};

SpectralReport layerwise_spectral_report(const WeightMap& grad_dump,
                                         const SpectralOptions& options = {});

}  // namespace gradmerge
