#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "gradmerge/checkpoint.hpp"

namespace gradmerge {

class BitVector {
 public:
  BitVector() = default;
  explicit BitVector(std::uint64_t size, bool value = false);

  std::uint64_t size() const { return size_; }
  bool test(std::uint64_t i) const { return (words_[i >> 6] >> (i & 63)) & 1u; }
  void set(std::uint64_t i) { words_[i >> 6] |= std::uint64_t{1} << (i & 63); }
  void reset(std::uint64_t i) { words_[i >> 6] &= ~(std::uint64_t{1} << (i & 63)); }

  std::uint64_t count() const;
  BitVector operator&(const BitVector& other) const;
  BitVector and_not(const BitVector& other) const;
  BitVector complement() const;
  bool any() const;

  const std::vector<std::uint64_t>& words() const { return words_; }
  friend bool operator==(const BitVector&, const BitVector&) = default;

 private:
  std::uint64_t size_ = 0;
  std::vector<std::uint64_t> words_;
};

// The flattened eligible parameter space: tensors in canonical order with
// their element counts. Global index = offset of the tensor + row-major index.
struct ParameterSpace {
  std::vector<std::pair<std::string, std::uint64_t>> tensors;

  std::uint64_t total() const;
  friend bool operator==(const ParameterSpace&, const ParameterSpace&) = default;
};

ParameterSpace space_of(const WeightMap& map, std::span<const std::string> names);

enum class SelectionScope { global, per_tensor };

struct SelectionMask {
  SelectionScope scope = SelectionScope::global;
  double ratio = 0.0;
  std::map<std::string, BitVector, std::less<>> bits;

  static SelectionMask filled(const ParameterSpace& space, bool value);

  ParameterSpace space() const;
  std::uint64_t cardinality() const;
  std::uint64_t size() const;
  bool same_space(const SelectionMask& other) const;
  SelectionMask complement() const;
  const BitVector& tensor(std::string_view name) const;

  friend bool operator==(const SelectionMask& a, const SelectionMask& b) { return a.bits == b.bits; }
};

}  // namespace gradmerge
