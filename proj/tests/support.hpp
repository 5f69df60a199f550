#pragma once

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <random>
#include <string>
#include <vector>

#include "gradmerge/checkpoint.hpp"
#include "gradmerge/error.hpp"
#include "gradmerge/json_util.hpp"

namespace testing {

namespace fs = std::filesystem;

class TempDir {
 public:
  TempDir() {
    std::string tmpl = (fs::temp_directory_path() / "gradmerge-test-XXXXXX").string();
    if (mkdtemp(tmpl.data()) == nullptr) throw std::runtime_error("mkdtemp failed");
    path_ = tmpl;
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const fs::path& path() const { return path_; }
  std::string file(const std::string& name) const { return (path_ / name).string(); }

 private:
  fs::path path_;
};

inline std::string slurp(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void spit(const fs::path& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out << bytes;
}

inline fs::path data_path(const std::string& name) { return fs::path(GRADMERGE_TEST_DATA) / name; }

inline gradmerge::Json fixtures() {
  static const gradmerge::Json doc =
      gradmerge::Json::parse(slurp(data_path("oracle_fixtures.json")));
  return doc;
}

// A raw checkpoint: 8-byte little-endian length, header text, data bytes.
inline std::string raw_checkpoint(const std::string& header, const std::string& data = {}) {
  std::string out(8, '\0');
  std::uint64_t n = header.size();
  for (int i = 0; i < 8; ++i) out[i] = static_cast<char>((n >> (8 * i)) & 0xFF);
  return out + header + data;
}

inline gradmerge::ErrorKind error_kind_of(auto&& fn) {
  try {
    fn();
  } catch (const gradmerge::Error& e) {
    return e.kind();
  }
  throw std::runtime_error("expected a gradmerge::Error");
}

inline std::string error_message_of(auto&& fn) {
  try {
    fn();
  } catch (const gradmerge::Error& e) {
    return e.what();
  }
  return "<no error>";
}

// Floats on a coarse dyadic grid so sums of a few of them stay exact in f32.
inline std::vector<float> grid_floats(std::mt19937_64& rng, std::size_t n, int bits = 10) {
  std::vector<float> v(n);
  const double scale = std::ldexp(1.0, bits);
  for (auto& x : v) {
    const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53;
    x = static_cast<float>(std::nearbyint((2.0 * u - 1.0) * scale) / scale);
  }
  return v;
}

inline std::vector<float> random_floats(std::mt19937_64& rng, std::size_t n, double scale = 1.0) {
  std::vector<float> v(n);
  for (auto& x : v) {
    const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53;
    x = static_cast<float>((2.0 * u - 1.0) * scale);
  }
  return v;
}

// Several f32 tensors of assorted shapes with the given names.
inline gradmerge::WeightMap random_map(std::mt19937_64& rng, const std::vector<std::string>& names,
                                       std::uint64_t max_extent = 6, const std::string& id = "m") {
  gradmerge::WeightMap map(id);
  for (const auto& name : names) {
    gradmerge::Shape shape;
    const auto rank = 1 + rng() % 2;
    for (std::uint64_t r = 0; r < rank; ++r) shape.push_back(static_cast<std::int64_t>(1 + rng() % max_extent));
    map.insert_values<float>(name, gradmerge::DType::F32, shape,
                             random_floats(rng, gradmerge::element_count(shape)));
  }
  return map;
}

// Same names and shapes as `like`, fresh values.
inline gradmerge::WeightMap map_like(const gradmerge::WeightMap& like, std::mt19937_64& rng,
                                     const std::string& id, double scale = 1.0) {
  gradmerge::WeightMap map(id);
  for (const auto& [name, entry] : like.entries()) {
    map.insert_values<float>(name, gradmerge::DType::F32, entry.meta.shape,
                             random_floats(rng, entry.meta.element_count(), scale));
  }
  return map;
}

inline bool same_bytes(const gradmerge::WeightMap& a, const gradmerge::WeightMap& b) {
  if (a.names() != b.names()) return false;
  for (const auto& name : a.names()) {
    if (a.meta(name).dtype != b.meta(name).dtype || a.meta(name).shape != b.meta(name).shape) return false;
    if (a.bytes(name) != b.bytes(name)) return false;
  }
  return true;
}

}  // namespace testing
