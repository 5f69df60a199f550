#pragma once

#include <random>
#include <string>

#include "gradmerge/toy_model.hpp"
#include "support.hpp"

namespace testing {

// Three 3-5-2 toy checkpoints sharing one architecture plus two calibration files.
struct ToyFiles {
  std::string base, task, reasoning, calib_t, calib_r;
};

inline ToyFiles write_toy_files(const TempDir& dir, std::uint64_t seed) {
  using namespace gradmerge;
  const std::size_t widths[] = {3, 5, 2};
  ToyFiles f{dir.file("base.safetensors"), dir.file("task.safetensors"),
             dir.file("reasoning.safetensors"), dir.file("calib_t.json"), dir.file("calib_r.json")};
  int k = 0;
  for (const auto* path : {&f.base, &f.task, &f.reasoning}) {
    const auto m = ToyModel::random(widths, Activation::tanh, Activation::identity, LossKind::mse, seed + k++);
    write_checkpoint(*path, m.to_weight_map(DType::F32, *path));
  }
  std::mt19937_64 rng(seed);
  for (const auto* path : {&f.calib_t, &f.calib_r}) {
    CalibrationSet c{*path, {}};
    for (int s = 0; s < 12; ++s) {
      const auto x = random_floats(rng, 3);
      c.samples.push_back({{x.begin(), x.end()}, {0.5, -0.5}});
    }
    save_calibration(*path, c);
  }
  return f;
}

}  // namespace testing
