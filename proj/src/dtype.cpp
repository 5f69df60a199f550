#include "gradmerge/dtype.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <string>
#include <type_traits>

#include "gradmerge/error.hpp"

static_assert(std::endian::native == std::endian::little,
              "checkpoint payloads are little-endian; big-endian hosts are not supported");

namespace gradmerge {

std::string_view dtype_name(DType dtype) {
  switch (dtype) {
    case DType::F64: return "F64";
    case DType::F32: return "F32";
    case DType::F16: return "F16";
    case DType::BF16: return "BF16";
    case DType::I64: return "I64";
    case DType::I32: return "I32";
    case DType::I16: return "I16";
    case DType::I8: return "I8";
    case DType::U8: return "U8";
    case DType::BOOL: return "BOOL";
  }
  return "?";
}

std::optional<DType> parse_dtype(std::string_view name) {
  for (DType d : {DType::F64, DType::F32, DType::F16, DType::BF16, DType::I64, DType::I32,
                  DType::I16, DType::I8, DType::U8, DType::BOOL}) {
    if (dtype_name(d) == name) return d;
  }
  return std::nullopt;
}

std::size_t dtype_size(DType dtype) {
  switch (dtype) {
    case DType::F64:
    case DType::I64: return 8;
    case DType::F32:
    case DType::I32: return 4;
    case DType::F16:
    case DType::BF16:
    case DType::I16: return 2;
    case DType::I8:
    case DType::U8:
    case DType::BOOL: return 1;
  }
  return 0;
}

bool is_float(DType dtype) {
  return dtype == DType::F64 || dtype == DType::F32 || dtype == DType::F16 ||
         dtype == DType::BF16;
}

float half_to_float(std::uint16_t bits) {
  const std::uint32_t sign = static_cast<std::uint32_t>(bits & 0x8000u) << 16;
  const std::uint32_t exponent = (bits >> 10) & 0x1fu;
  const std::uint32_t mantissa = bits & 0x3ffu;
  if (exponent == 0) {
    if (mantissa == 0) return std::bit_cast<float>(sign);
    const float magnitude = std::ldexp(static_cast<float>(mantissa), -24);
    return std::bit_cast<float>(sign | std::bit_cast<std::uint32_t>(magnitude));
  }
  if (exponent == 0x1f) {
    return std::bit_cast<float>(sign | 0x7f800000u | (mantissa << 13));
  }
  return std::bit_cast<float>(sign | ((exponent + 112u) << 23) | (mantissa << 13));
}

std::uint16_t float_to_half(float value) {
  constexpr std::uint32_t f32_infinity = 255u << 23;
  constexpr std::uint32_t f16_overflow = (127u + 16u) << 23;
  constexpr std::uint32_t denorm_magic = ((127u - 15u) + (23u - 10u) + 1u) << 23;

  std::uint32_t bits = std::bit_cast<std::uint32_t>(value);
  const std::uint32_t sign = bits & 0x80000000u;
  bits ^= sign;

  std::uint32_t out = 0;
  if (bits >= f16_overflow) {
    out = bits > f32_infinity ? 0x7e00u : 0x7c00u;
  } else if (bits < (113u << 23)) {
    // Subnormal or zero: let the FPU do the rounding by aligning the mantissa.
    const float shifted = std::bit_cast<float>(bits) + std::bit_cast<float>(denorm_magic);
    out = std::bit_cast<std::uint32_t>(shifted) - denorm_magic;
  } else {
    const std::uint32_t mantissa_odd = (bits >> 13) & 1u;
    bits += (static_cast<std::uint32_t>(15 - 127) << 23) + 0xfffu;
    bits += mantissa_odd;
    out = bits >> 13;
  }
  return static_cast<std::uint16_t>(out | (sign >> 16));
}

float bfloat16_to_float(std::uint16_t bits) {
  return std::bit_cast<float>(static_cast<std::uint32_t>(bits) << 16);
}

std::uint16_t float_to_bfloat16(float value) {
  const std::uint32_t bits = std::bit_cast<std::uint32_t>(value);
  if ((bits & 0x7fffffffu) > 0x7f800000u) {
    return static_cast<std::uint16_t>((bits >> 16) | 0x40u);
  }
  const std::uint32_t rounding = 0x7fffu + ((bits >> 16) & 1u);
  return static_cast<std::uint16_t>((bits + rounding) >> 16);
}

namespace {

template <typename Raw>
Raw load(const std::byte* p) {
  Raw r;
  std::memcpy(&r, p, sizeof(Raw));
  return r;
}

template <typename Raw>
void store(std::byte* p, Raw r) {
  std::memcpy(p, &r, sizeof(Raw));
}

// Round-to-odd narrowing keeps enough information in the 24-bit float that a
// second rounding to an 8- or 11-bit mantissa is correctly rounded.
float narrow_round_to_odd(double value) {
  float narrowed = static_cast<float>(value);
  if (std::isnan(value) || static_cast<double>(narrowed) == value) return narrowed;
  if (std::fabs(static_cast<double>(narrowed)) > std::fabs(value)) {
    narrowed = std::nextafter(narrowed, 0.0f);
  }
  return std::bit_cast<float>(std::bit_cast<std::uint32_t>(narrowed) | 1u);
}

template <typename T>
float to_half_source(T value) {
  if constexpr (std::is_same_v<T, double>) {
    return narrow_round_to_odd(value);
  } else {
    return value;
  }
}

void check_float(DType dtype) {
  if (!is_float(dtype)) {
    throw_error(ErrorKind::consistency,
                "tensor of dtype " + std::string(dtype_name(dtype)) + " is not a float tensor");
  }
}

}  // namespace

template <typename T>
std::vector<T> decode_floats(std::span<const std::byte> bytes, DType dtype) {
  check_float(dtype);
  const std::size_t width = dtype_size(dtype);
  if (bytes.size() % width != 0) {
    throw_error(ErrorKind::format, "payload length is not a multiple of the dtype width");
  }
  std::vector<T> out(bytes.size() / width);
  const std::byte* p = bytes.data();
  for (std::size_t i = 0; i < out.size(); ++i, p += width) {
    switch (dtype) {
      case DType::F64: out[i] = static_cast<T>(load<double>(p)); break;
      case DType::F32: out[i] = static_cast<T>(load<float>(p)); break;
      case DType::F16: out[i] = static_cast<T>(half_to_float(load<std::uint16_t>(p))); break;
      case DType::BF16: out[i] = static_cast<T>(bfloat16_to_float(load<std::uint16_t>(p))); break;
      default: break;
    }
  }
  return out;
}

template <typename T>
void store_value(std::byte* p, DType dtype, T value) {
  switch (dtype) {
    case DType::F64: store(p, static_cast<double>(value)); break;
    case DType::F32: store(p, static_cast<float>(value)); break;
    case DType::F16: store(p, float_to_half(to_half_source(value))); break;
    case DType::BF16: store(p, float_to_bfloat16(to_half_source(value))); break;
    default: break;
  }
}

template <typename T>
Bytes encode_floats(std::span<const T> values, DType dtype) {
  check_float(dtype);
  const std::size_t width = dtype_size(dtype);
  Bytes out(values.size() * width);
  std::byte* p = out.data();
  for (std::size_t i = 0; i < values.size(); ++i, p += width) store_value(p, dtype, values[i]);
  return out;
}

template <typename T>
void encode_element(std::span<std::byte> payload, DType dtype, std::size_t index, T value) {
  check_float(dtype);
  const std::size_t width = dtype_size(dtype);
  if ((index + 1) * width > payload.size()) {
    throw_error(ErrorKind::consistency, "element index outside payload");
  }
  store_value(payload.data() + index * width, dtype, value);
}

template std::vector<float> decode_floats<float>(std::span<const std::byte>, DType);
template std::vector<double> decode_floats<double>(std::span<const std::byte>, DType);
template Bytes encode_floats<float>(std::span<const float>, DType);
template Bytes encode_floats<double>(std::span<const double>, DType);
template void encode_element<float>(std::span<std::byte>, DType, std::size_t, float);
template void encode_element<double>(std::span<std::byte>, DType, std::size_t, double);

Bytes convert_payload(std::span<const std::byte> bytes, DType from, DType to) {
  if (from == to) return Bytes(bytes.begin(), bytes.end());
  // Doubles hold every f32/f16/bf16 value exactly, so this rounds once.
  const auto values = decode_floats<double>(bytes, from);
  return encode_floats<double>(values, to);
}

}  // namespace gradmerge
