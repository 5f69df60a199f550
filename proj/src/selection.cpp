#include "gradmerge/selection.hpp"

#include <algorithm>
#include <mutex>
#include <bit>
#include <cmath>

#include "gradmerge/error.hpp"
#include "gradmerge/parallel.hpp"

namespace gradmerge {

std::string_view to_string(SelectionScope scope) {
  return scope == SelectionScope::global ? "global" : "per_tensor";
}

std::string_view to_string(ZeroPolicy policy) {
  return policy == ZeroPolicy::include ? "include" : "exclude_zero";
}

SelectionScope parse_scope(std::string_view name) {
  if (name == "global") return SelectionScope::global;
  if (name == "per_tensor") return SelectionScope::per_tensor;
  throw_error(ErrorKind::usage, "unknown selection scope '" + std::string(name) + "'");
}

ZeroPolicy parse_zero_policy(std::string_view name) {
  if (name == "include") return ZeroPolicy::include;
  if (name == "exclude_zero") return ZeroPolicy::exclude_exact_zero;
  throw_error(ErrorKind::usage, "unknown zero policy '" + std::string(name) + "'");
}

std::uint64_t selection_count(double ratio, std::uint64_t population) {
  if (!(ratio >= 0.0 && ratio <= 1.0)) {
    throw_error(ErrorKind::usage, "selection ratio must lie in [0, 1]");
  }
  const double k = std::floor(ratio * static_cast<double>(population) + 0.5);
  return std::min(population, static_cast<std::uint64_t>(k));
}

namespace {

// Non-negative floats order like their bit patterns; clearing the sign bit
// folds -0.0 onto +0.0.
inline std::uint32_t score_key(float score) { return std::bit_cast<std::uint32_t>(score) & 0x7fffffffu; }

// Scores are re-read from the importance source on every pass, so no more
// than one tensor per worker is resident.
class ThresholdSelector {
 public:
  ThresholdSelector(const ImportanceMap& importance, std::vector<std::string> names, bool largest,
                    bool skip_zero, unsigned threads, const SelectionTuning& tuning)
      : importance_(importance),
        names_(std::move(names)),
        largest_(largest),
        skip_zero_(skip_zero),
        threads_(threads),
        tuning_(tuning) {}

  // Returns the pool size (parameters that may be selected).
  std::uint64_t build_high_histogram() {
    high_.assign(kBins, 0);
    std::mutex merge_mutex;
    parallel_for(
        names_.size(),
        [&](std::size_t t) {
          std::vector<std::uint64_t> local(kBins, 0);
          for (float s : importance_.values(names_[t])) {
            const auto key = score_key(s);
            if (eligible(key)) ++local[key >> 16];
          }
          std::lock_guard lock(merge_mutex);
          for (std::size_t b = 0; b < kBins; ++b) high_[b] += local[b];
        },
        threads_);
    std::uint64_t pool = 0;
    for (auto c : high_) pool += c;
    return pool;
  }

  std::map<std::string, BitVector, std::less<>> select(std::uint64_t k, std::uint64_t pool) {
    std::map<std::string, BitVector, std::less<>> bits;
    for (const auto& name : names_) {
      bits.emplace(name, BitVector(element_count(importance_.shape(name))));
    }
    if (k == 0) return bits;
    if (k == pool) {
      mark_all(bits);
      return bits;
    }

    // Walk bins from the preferred end until k is covered.
    std::uint64_t before = 0;
    std::uint32_t bin = 0;
    for (std::size_t step = 0; step < high_.size(); ++step) {
      const auto b = static_cast<std::uint32_t>(largest_ ? high_.size() - 1 - step : step);
      if (before + high_[b] >= k) {
        bin = b;
        break;
      }
      before += high_[b];
    }
    const std::uint64_t need = k - before;

    if (high_[bin] <= tuning_.max_sorted_candidates) {
      select_by_sorting(bits, bin, need);
    } else {
      select_by_refinement(bits, bin, need);
    }
    return bits;
  }

 private:
  static constexpr std::size_t kBins = 65536;

  bool eligible(std::uint32_t key) const { return !(skip_zero_ && key == 0); }

  // Strictly preferred over `key` in the ranking order.
  bool better(std::uint32_t candidate, std::uint32_t key) const {
    return largest_ ? candidate > key : candidate < key;
  }

  void mark_all(std::map<std::string, BitVector, std::less<>>& bits) {
    parallel_for(
        names_.size(),
        [&](std::size_t t) {
          auto& bv = bits.find(names_[t])->second;
          const auto scores = importance_.values(names_[t]);
          for (std::size_t i = 0; i < scores.size(); ++i) {
            if (eligible(score_key(scores[i]))) bv.set(i);
          }
        },
        threads_);
  }

  struct Candidate {
    std::uint32_t key;
    std::uint32_t tensor;
    std::uint64_t index;
  };

  void select_by_sorting(std::map<std::string, BitVector, std::less<>>& bits, std::uint32_t bin,
                         std::uint64_t need) {
    std::vector<std::vector<Candidate>> per_tensor(names_.size());
    parallel_for(
        names_.size(),
        [&](std::size_t t) {
          auto& bv = bits.find(names_[t])->second;
          const auto scores = importance_.values(names_[t]);
          for (std::size_t i = 0; i < scores.size(); ++i) {
            const auto key = score_key(scores[i]);
            if (!eligible(key)) continue;
            const auto key_bin = key >> 16;
            if (key_bin == bin) {
              per_tensor[t].push_back({key, static_cast<std::uint32_t>(t), i});
            } else if (better(key_bin, bin)) {
              bv.set(i);
            }
          }
        },
        threads_);
    std::vector<Candidate> candidates;
    for (auto& c : per_tensor) candidates.insert(candidates.end(), c.begin(), c.end());
    const auto order = [&](const Candidate& a, const Candidate& b) {
      if (a.key != b.key) return better(a.key, b.key);
      return std::tie(a.tensor, a.index) < std::tie(b.tensor, b.index);
    };
    std::partial_sort(candidates.begin(), candidates.begin() + static_cast<std::ptrdiff_t>(need),
                      candidates.end(), order);
    for (std::uint64_t c = 0; c < need; ++c) {
      bits.find(names_[candidates[c].tensor])->second.set(candidates[c].index);
    }
  }

  // Pins the exact threshold key with a histogram of the low 16 bits, then
  // fills ties in canonical order.
  void select_by_refinement(std::map<std::string, BitVector, std::less<>>& bits, std::uint32_t bin,
                            std::uint64_t need) {
    std::vector<std::uint64_t> low(kBins, 0);
    std::mutex merge_mutex;
    parallel_for(
        names_.size(),
        [&](std::size_t t) {
          std::vector<std::uint64_t> local(kBins, 0);
          for (float s : importance_.values(names_[t])) {
            const auto key = score_key(s);
            if (eligible(key) && (key >> 16) == bin) ++local[key & 0xffffu];
          }
          std::lock_guard lock(merge_mutex);
          for (std::size_t b = 0; b < kBins; ++b) low[b] += local[b];
        },
        threads_);
    std::uint64_t before = 0;
    std::uint32_t threshold = 0;
    for (std::size_t step = 0; step < low.size(); ++step) {
      const auto b = static_cast<std::uint32_t>(largest_ ? low.size() - 1 - step : step);
      if (before + low[b] >= need) {
        threshold = (bin << 16) | b;
        break;
      }
      before += low[b];
    }
    const std::uint64_t ties_needed = need - before;

    std::vector<std::uint64_t> tie_counts(names_.size(), 0);
    parallel_for(
        names_.size(),
        [&](std::size_t t) {
          auto& bv = bits.find(names_[t])->second;
          const auto scores = importance_.values(names_[t]);
          for (std::size_t i = 0; i < scores.size(); ++i) {
            const auto key = score_key(scores[i]);
            if (!eligible(key)) continue;
            if (better(key, threshold)) {
              bv.set(i);
            } else if (key == threshold) {
              ++tie_counts[t];
            }
          }
        },
        threads_);

    std::vector<std::uint64_t> quota(names_.size(), 0);
    std::uint64_t remaining = ties_needed;
    for (std::size_t t = 0; t < names_.size() && remaining > 0; ++t) {
      quota[t] = std::min(remaining, tie_counts[t]);
      remaining -= quota[t];
    }
    parallel_for(
        names_.size(),
        [&](std::size_t t) {
          if (quota[t] == 0) return;
          auto& bv = bits.find(names_[t])->second;
          const auto scores = importance_.values(names_[t]);
          std::uint64_t taken = 0;
          for (std::size_t i = 0; i < scores.size() && taken < quota[t]; ++i) {
            const auto key = score_key(scores[i]);
            if (eligible(key) && key == threshold) {
              bv.set(i);
              ++taken;
            }
          }
        },
        threads_);
  }

  const ImportanceMap& importance_;
  std::vector<std::string> names_;
  bool largest_;
  bool skip_zero_;
  unsigned threads_;
  SelectionTuning tuning_;
  std::vector<std::uint64_t> high_;
};

std::uint64_t target_count(double ratio, std::uint64_t population, std::uint64_t pool) {
  return std::min(selection_count(ratio, population), pool);
}

}  // namespace

SelectionMask select_extreme(const ImportanceMap& importance, double ratio, SelectionScope scope,
                             bool largest, ZeroPolicy zero_policy, unsigned threads,
                             const SelectionTuning& tuning) {
  if (!(ratio >= 0.0 && ratio <= 1.0)) {
    throw_error(ErrorKind::usage, "selection ratio must lie in [0, 1]");
  }
  const bool skip_zero = !largest && zero_policy == ZeroPolicy::exclude_exact_zero;
  SelectionMask mask;
  mask.scope = scope;
  mask.ratio = ratio;
  const auto names = importance.names();

  if (scope == SelectionScope::global) {
    ThresholdSelector selector(importance, names, largest, skip_zero, threads, tuning);
    const std::uint64_t pool = selector.build_high_histogram();
    std::uint64_t population = 0;
    for (const auto& name : names) population += element_count(importance.shape(name));
    mask.bits = selector.select(target_count(ratio, population, pool), pool);
    return mask;
  }

  std::vector<std::map<std::string, BitVector, std::less<>>> per_tensor(names.size());
  parallel_for(
      names.size(),
      [&](std::size_t t) {
        ThresholdSelector selector(importance, {names[t]}, largest, skip_zero, 1, tuning);
        const std::uint64_t pool = selector.build_high_histogram();
        const std::uint64_t population = element_count(importance.shape(names[t]));
        per_tensor[t] = selector.select(target_count(ratio, population, pool), pool);
      },
      threads);
  for (auto& part : per_tensor) mask.bits.merge(part);
  return mask;
}

SelectionMask select_topk(const ImportanceMap& importance, double ratio, SelectionScope scope,
                          unsigned threads) {
  return select_extreme(importance, ratio, scope, true, ZeroPolicy::include, threads, {});
}

SelectionMask select_bottomk(const ImportanceMap& importance, double ratio, SelectionScope scope,
                             ZeroPolicy zero_policy, unsigned threads) {
  return select_extreme(importance, ratio, scope, false, zero_policy, threads, {});
}

std::pair<SelectionMask, SelectionMask> exclude(const SelectionMask& a, const SelectionMask& b) {
  if (!a.same_space(b)) {
    throw_error(ErrorKind::consistency, "masks cover different parameter spaces");
  }
  SelectionMask only_a;
  SelectionMask only_b;
  only_a.scope = a.scope;
  only_a.ratio = a.ratio;
  only_b.scope = b.scope;
  only_b.ratio = b.ratio;
  for (const auto& [name, bits_a] : a.bits) {
    const auto& bits_b = b.bits.find(name)->second;
    only_a.bits.emplace(name, bits_a.and_not(bits_b));
    only_b.bits.emplace(name, bits_b.and_not(bits_a));
  }
  return {std::move(only_a), std::move(only_b)};
}

MaskStats mask_stats(const SelectionMask& mask, const SelectionMask* other) {
  MaskStats stats;
  for (const auto& [name, bits] : mask.bits) {
    const auto c = bits.count();
    stats.per_tensor[name] = c;
    stats.count += c;
    stats.size += bits.size();
  }
  stats.density = stats.size == 0 ? 0.0 : static_cast<double>(stats.count) / static_cast<double>(stats.size);
  if (other) {
    if (!mask.same_space(*other)) {
      throw_error(ErrorKind::consistency, "masks cover different parameter spaces");
    }
    std::uint64_t overlap = 0;
    for (const auto& [name, bits] : mask.bits) overlap += (bits & other->bits.find(name)->second).count();
    stats.overlap = overlap;
  }
  return stats;
}

}  // namespace gradmerge
