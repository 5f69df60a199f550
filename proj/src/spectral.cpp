#include "gradmerge/spectral.hpp"

#include <Eigen/SVD>
#include <cmath>
#include <regex>
#include <sstream>

#include "gradmerge/error.hpp"
#include "gradmerge/parallel.hpp"

namespace gradmerge {

Eigen::VectorXd singular_values(const Matrix& m) {
  if (!m.allFinite()) throw_error(ErrorKind::validation, "matrix has non-finite entries");
  if (m.size() == 0) return Eigen::VectorXd();
  Eigen::BDCSVD<Matrix> svd(m);  // values only
  return svd.singularValues();
}

double nuclear_norm(const Matrix& m) { return singular_values(m).sum(); }

NormBounds verify_norm_bounds(const Matrix& m) {
  const Eigen::VectorXd sigma = singular_values(m);
  NormBounds b;
  b.fro = m.norm();
  b.nuc = sigma.sum();
  const double cutoff = sigma.size() > 0 ? kRankCutoff * sigma(0) : 0.0;
  for (Eigen::Index i = 0; i < sigma.size(); ++i) {
    if (sigma(i) > cutoff) ++b.rank;
  }
  b.lower_holds = b.fro <= b.nuc * (1.0 + kNormSlack);
  b.upper_holds = b.nuc <= std::sqrt(static_cast<double>(b.rank)) * b.fro * (1.0 + kNormSlack);
  return b;
}

double mad(std::span<const double> series) {
  if (series.size() < 2) throw_error(ErrorKind::validation, "MAD needs at least two values");
  double total = 0.0;
  for (std::size_t i = 1; i < series.size(); ++i) total += std::fabs(series[i] - series[i - 1]);
  return total / static_cast<double>(series.size() - 1);
}

namespace {

struct CompiledPattern {
  std::regex re;
  int layer_group = 0;
  int kind_group = 0;
  int sample_group = 0;  // 0: absent
};

CompiledPattern compile_pattern(const std::string& pattern) {
  CompiledPattern out;
  std::string re;
  int group = 0;
  for (std::size_t i = 0; i < pattern.size();) {
    if (pattern[i] == '{') {
      const auto close = pattern.find('}', i);
      if (close == std::string::npos) {
        throw_error(ErrorKind::usage, "unterminated placeholder in pattern '" + pattern + "'");
      }
      const std::string key = pattern.substr(i + 1, close - i - 1);
      int* slot = key == "layer"    ? &out.layer_group
                  : key == "kind"   ? &out.kind_group
                  : key == "sample" ? &out.sample_group
                                    : nullptr;
      if (slot == nullptr) {
        throw_error(ErrorKind::usage, "unknown placeholder {" + key + "} in pattern");
      }
      if (*slot != 0) throw_error(ErrorKind::usage, "placeholder {" + key + "} appears twice");
      *slot = ++group;
      re += key == "kind" ? "([A-Za-z])" : "([0-9]+)";
      i = close + 1;
      continue;
    }
    if (std::string_view("\\^$.|?*+()[]{}").find(pattern[i]) != std::string_view::npos) re += '\\';
    re += pattern[i++];
  }
  if (out.layer_group == 0 || out.kind_group == 0) {
    throw_error(ErrorKind::usage, "pattern must contain {layer} and {kind}");
  }
  out.re = std::regex(re);
  return out;
}

}  // namespace

SpectralReport layerwise_spectral_report(const WeightMap& grad_dump, const SpectralOptions& options) {
  const CompiledPattern pattern = compile_pattern(options.pattern);
  SpectralReport report;
  report.model_id = grad_dump.id();
  report.pattern = options.pattern;
  report.per_sample = pattern.sample_group != 0;

  for (const auto& name : grad_dump.names()) {
    std::smatch m;
    if (!std::regex_match(name, m, pattern.re)) {
      report.skipped.emplace_back(name, "name does not match pattern");
      continue;
    }
    const char kind = static_cast<char>(std::toupper(static_cast<unsigned char>(m[pattern.kind_group].str()[0])));
    if (std::string_view("QKVO").find(kind) == std::string_view::npos) {
      report.skipped.emplace_back(name, "not a Q/K/V/O projection");
      continue;
    }
    const auto& meta = grad_dump.meta(name);
    if (meta.shape.size() != 2) {
      report.skipped.emplace_back(name, "not a 2-D matrix");
      continue;
    }
    if (!is_float(meta.dtype)) {
      report.skipped.emplace_back(name, "not a float tensor");
      continue;
    }
    SpectralEntry e;
    e.name = name;
    e.kind = kind;
    e.layer = std::stoull(m[pattern.layer_group].str());
    if (pattern.sample_group != 0) e.sample = std::stoull(m[pattern.sample_group].str());
    report.entries.push_back(std::move(e));
  }
  if (report.entries.empty()) {
    throw_error(ErrorKind::validation,
                "no projection matrices matched pattern '" + options.pattern + "'");
  }
  std::sort(report.entries.begin(), report.entries.end(), [](const auto& a, const auto& b) {
    constexpr std::string_view order = "QKVO";
    return std::tuple(order.find(a.kind), a.layer, a.sample) <
           std::tuple(order.find(b.kind), b.layer, b.sample);
  });
  for (std::size_t i = 1; i < report.entries.size(); ++i) {
    const auto& a = report.entries[i - 1];
    const auto& b = report.entries[i];
    if (a.kind == b.kind && a.layer == b.layer && a.sample == b.sample) {
      throw_error(ErrorKind::consistency,
                  "'" + a.name + "' and '" + b.name + "' map to the same kind and layer");
    }
  }

  parallel_for(
      report.entries.size(),
      [&](std::size_t i) {
        auto& e = report.entries[i];
        const auto& meta = grad_dump.meta(e.name);
        const auto values = grad_dump.values<double>(e.name);
        const auto rows = static_cast<Eigen::Index>(meta.shape[0]);
        const auto cols = static_cast<Eigen::Index>(meta.shape[1]);
        const Matrix g = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic,
                                                        Eigen::RowMajor>>(values.data(), rows, cols);
        const Eigen::VectorXd sigma = singular_values(g);
        const NormBounds b = verify_norm_bounds(g);
        e.nuclear = b.nuc;
        e.frobenius = b.fro;
        e.rank = b.rank;
        e.lower_holds = b.lower_holds;
        e.upper_holds = b.upper_holds;
        if (options.keep_singular_values) e.singular_values.assign(sigma.begin(), sigma.end());
      },
      options.threads);

  // Layer series per kind, averaged over samples where present.
  for (char kind : std::string_view("QKVO")) {
    std::map<std::size_t, std::pair<double, std::size_t>> by_layer;
    for (const auto& e : report.entries) {
      if (e.kind != kind) continue;
      auto& [sum, count] = by_layer[e.layer];
      sum += e.nuclear;
      ++count;
    }
    if (by_layer.empty()) {
      report.notes.push_back(std::string("no ") + kind + " matrices in dump");
      continue;
    }
    auto& series = report.series_by_kind[kind];
    for (const auto& [layer, acc] : by_layer) {
      series.push_back(acc.first / static_cast<double>(acc.second));
    }
    if (series.size() >= 2) {
      report.mad_by_kind[kind] = mad(series);
    } else {
      report.notes.push_back(std::string(1, kind) + " covers a single layer; MAD undefined");
    }
  }
  return report;
}

Json SpectralReport::to_json() const {
  Json entries_json = Json::array();
  for (const auto& e : entries) {
    Json j = {{"name", e.name},         {"kind", std::string(1, e.kind)},
              {"layer", e.layer},       {"nuclear", e.nuclear},
              {"frobenius", e.frobenius}, {"rank", e.rank},
              {"lower_holds", e.lower_holds}, {"upper_holds", e.upper_holds}};
    if (e.sample) j["sample"] = *e.sample;
    if (!e.singular_values.empty()) j["singular_values"] = e.singular_values;
    entries_json.push_back(std::move(j));
  }
  Json mad_json = Json::object();
  for (const auto& [kind, value] : mad_by_kind) mad_json[std::string(1, kind)] = value;
  Json series_json = Json::object();
  for (const auto& [kind, series] : series_by_kind) series_json[std::string(1, kind)] = series;
  Json skipped_json = Json::array();
  for (const auto& [name, reason] : skipped) skipped_json.push_back({{"name", name}, {"reason", reason}});
  return {{"model_id", model_id},
          {"pattern", pattern},
          {"mode", per_sample ? "per_sample" : "aggregate"},
          {"entries", entries_json},
          {"layer_series", series_json},
          {"mad", mad_json},
          {"skipped", skipped_json},
          {"notes", notes}};
}

std::string SpectralReport::to_csv() const {
  std::ostringstream out;
  out.precision(17);
  out << (per_sample ? "kind,layer,sample,nuclear,frobenius,rank\n" : "kind,layer,nuclear,frobenius,rank\n");
  for (const auto& e : entries) {
    out << e.kind << ',' << e.layer << ',';
    if (per_sample) out << *e.sample << ',';
    out << e.nuclear << ',' << e.frobenius << ',' << e.rank << '\n';
  }
  return out.str();
}

}  // namespace gradmerge
