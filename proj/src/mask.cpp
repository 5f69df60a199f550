#include "gradmerge/mask.hpp"

#include <algorithm>
#include <bit>

#include "gradmerge/error.hpp"

namespace gradmerge {

BitVector::BitVector(std::uint64_t size, bool value)
    : size_(size), words_((size + 63) / 64, value ? ~std::uint64_t{0} : 0) {
  if (value && (size & 63)) words_.back() = (std::uint64_t{1} << (size & 63)) - 1;
}

std::uint64_t BitVector::count() const {
  std::uint64_t n = 0;
  for (auto w : words_) n += static_cast<std::uint64_t>(std::popcount(w));
  return n;
}

BitVector BitVector::operator&(const BitVector& other) const {
  BitVector out(size_);
  for (std::size_t i = 0; i < words_.size(); ++i) out.words_[i] = words_[i] & other.words_[i];
  return out;
}

BitVector BitVector::and_not(const BitVector& other) const {
  BitVector out(size_);
  for (std::size_t i = 0; i < words_.size(); ++i) out.words_[i] = words_[i] & ~other.words_[i];
  return out;
}

BitVector BitVector::complement() const {
  BitVector out(size_, true);
  for (std::size_t i = 0; i < words_.size(); ++i) out.words_[i] &= ~words_[i];
  return out;
}

bool BitVector::any() const {
  for (auto w : words_) {
    if (w) return true;
  }
  return false;
}

std::uint64_t ParameterSpace::total() const {
  std::uint64_t n = 0;
  for (const auto& [_, count] : tensors) n += count;
  return n;
}

ParameterSpace space_of(const WeightMap& map, std::span<const std::string> names) {
  ParameterSpace space;
  for (const auto& name : names) space.tensors.emplace_back(name, map.meta(name).element_count());
  std::sort(space.tensors.begin(), space.tensors.end());
  return space;
}

SelectionMask SelectionMask::filled(const ParameterSpace& space, bool value) {
  SelectionMask mask;
  mask.ratio = value ? 1.0 : 0.0;
  for (const auto& [name, count] : space.tensors) mask.bits.emplace(name, BitVector(count, value));
  return mask;
}

ParameterSpace SelectionMask::space() const {
  ParameterSpace space;
  for (const auto& [name, bv] : bits) space.tensors.emplace_back(name, bv.size());
  return space;
}

std::uint64_t SelectionMask::cardinality() const {
  std::uint64_t n = 0;
  for (const auto& [_, bv] : bits) n += bv.count();
  return n;
}

std::uint64_t SelectionMask::size() const {
  std::uint64_t n = 0;
  for (const auto& [_, bv] : bits) n += bv.size();
  return n;
}

bool SelectionMask::same_space(const SelectionMask& other) const {
  if (bits.size() != other.bits.size()) return false;
  auto a = bits.begin();
  auto b = other.bits.begin();
  for (; a != bits.end(); ++a, ++b) {
    if (a->first != b->first || a->second.size() != b->second.size()) return false;
  }
  return true;
}

SelectionMask SelectionMask::complement() const {
  SelectionMask out;
  out.scope = scope;
  out.ratio = 1.0 - ratio;
  for (const auto& [name, bv] : bits) out.bits.emplace(name, bv.complement());
  return out;
}

const BitVector& SelectionMask::tensor(std::string_view name) const {
  const auto it = bits.find(name);
  if (it == bits.end()) {
    throw_error(ErrorKind::lookup, "mask has no tensor named '" + std::string(name) + "'");
  }
  return it->second;
}

}  // namespace gradmerge
