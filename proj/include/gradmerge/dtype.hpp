#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

namespace gradmerge {

// Element types understood by the checkpoint reader. Only the four floating
// types take part in merging; the integer and boolean types exist so real
// checkpoints (position ids, attention masks, exported 0/1 masks) can be
// carried through verbatim.
enum class DType { F64, F32, F16, BF16, I64, I32, I16, I8, U8, BOOL };

std::string_view dtype_name(DType dtype);
std::optional<DType> parse_dtype(std::string_view name);
std::size_t dtype_size(DType dtype);
bool is_float(DType dtype);

// IEEE binary16 / bfloat16 conversions. Widening is exact; narrowing rounds to
// nearest, ties to even, with overflow to infinity and NaN kept quiet.
float half_to_float(std::uint16_t bits);
std::uint16_t float_to_half(float value);
float bfloat16_to_float(std::uint16_t bits);
std::uint16_t float_to_bfloat16(float value);

using Bytes = std::vector<std::byte>;

// Decodes little-endian float payload bytes into T (float or double). F64
// decoded to float rounds to nearest-even.
template <typename T>
std::vector<T> decode_floats(std::span<const std::byte> bytes, DType dtype);

// Encodes values into the payload representation of a float dtype.
template <typename T>
Bytes encode_floats(std::span<const T> values, DType dtype);

// Overwrites element `index` of a float payload.
template <typename T>
void encode_element(std::span<std::byte> payload, DType dtype, std::size_t index, T value);

// Re-encodes a float payload into another float dtype (widening exact).
Bytes convert_payload(std::span<const std::byte> bytes, DType from, DType to);

}  // namespace gradmerge
