#include <doctest.h>

#include <cmath>
#include <cstring>
#include <limits>

#include "gradmerge/checkpoint.hpp"
#include "gradmerge/compat.hpp"
#include "support.hpp"

using namespace gradmerge;
using testing::TempDir;

namespace {

std::string hex_of(const Bytes& bytes) {
  static const char* digits = "0123456789abcdef";
  std::string out;
  for (auto b : bytes) {
    const auto v = std::to_integer<unsigned>(b);
    out += digits[v >> 4];
    out += digits[v & 15];
  }
  return out;
}

ErrorKind open_kind(const TempDir& dir, const std::string& raw) {
  const auto path = dir.file("bad.safetensors");
  testing::spit(path, raw);
  return testing::error_kind_of([&] { open_checkpoint(path); });
}

std::string open_message(const TempDir& dir, const std::string& raw) {
  const auto path = dir.file("bad.safetensors");
  testing::spit(path, raw);
  return testing::error_message_of([&] { open_checkpoint(path); });
}

}  // namespace

TEST_CASE("reads a file written by the reference python implementation") {
  const auto expect = testing::fixtures()["safetensors"];
  const auto file = CheckpointFile::open(testing::data_path("python_written.safetensors"));
  CHECK(file->metadata().at("source") == "safetensors-python");
  CHECK(file->tensors().size() == expect.size());
  const WeightMap map = weight_map_from(file);
  for (const auto& [name, e] : expect.items()) {
    CAPTURE(name);
    CHECK(map.meta(name).shape == e["shape"].get<Shape>());
    CHECK(hex_of(map.bytes(name)) == e["hex"].get<std::string>());
    if (is_float(map.meta(name).dtype)) {
      const auto values = map.values<double>(name);
      REQUIRE(values.size() == e["f64"].size());
      for (std::size_t i = 0; i < values.size(); ++i) {
        CHECK(values[i] == std::strtod(e["f64"][i].get<std::string>().c_str(), nullptr));
      }
    }
  }
}

TEST_CASE("write then open round trips bit-identically") {
  TempDir dir;
  std::mt19937_64 rng(3);
  WeightMap map("round-trip");
  map.metadata()["format"] = "pt";
  map.metadata()["note"] = "x";
  map.insert_values<float>("b", DType::F32, {2}, {1.5f, -0.0f});
  map.insert_values<double>("a.f64", DType::F64, {2, 3}, {1, 2, 3, 4, 5, 1e-300});
  map.insert_values<float>("h", DType::F16, {3}, {1.0f, 0.333f, -2.0f});
  map.insert_values<float>("z", DType::BF16, {1, 1}, {3.0f});
  map.insert_values<float>("scalar", DType::F32, {}, {7.0f});
  map.insert_values<float>("empty", DType::F32, {0, 4}, {});
  Bytes ints(6 * 4);
  for (std::size_t i = 0; i < ints.size(); ++i) ints[i] = std::byte(rng() & 0xFF);
  map.insert_bytes({"ids", DType::I32, {6}, 0, 0}, ints);
  map.insert_values<float>("big", DType::F32, {64, 33}, testing::random_floats(rng, 64 * 33));

  const auto path = dir.file("m.safetensors");
  write_checkpoint(path, map);
  const WeightMap back = open_checkpoint(path);
  CHECK(back.metadata() == map.metadata());
  CHECK(testing::same_bytes(map, back));

  // Writing what was read reproduces the file byte for byte.
  const auto again = dir.file("again.safetensors");
  write_checkpoint(again, back);
  CHECK(testing::slurp(path) == testing::slurp(again));

  // Header is padded to a multiple of 8.
  const std::string raw = testing::slurp(path);
  std::uint64_t n = 0;
  std::memcpy(&n, raw.data(), 8);
  CHECK(n % 8 == 0);
}

TEST_CASE("open is lazy") {
  TempDir dir;
  std::mt19937_64 rng(1);
  WeightMap map;
  map.insert_values<float>("w", DType::F32, {2, 2}, {1, 2, 3, 4});
  map.insert_values<float>("b", DType::F32, {2}, {5, 6});
  map.insert_values<float>("large", DType::F32, {1024, 1024}, testing::random_floats(rng, 1 << 20));
  const auto path = dir.file("lazy.safetensors");
  write_checkpoint(path, map);
  const auto file = CheckpointFile::open(path);
  const std::string raw = testing::slurp(path);
  std::uint64_t n = 0;
  std::memcpy(&n, raw.data(), 8);
  CHECK(file->tensors().size() == 3);
  CHECK(file->bytes_read() == 8 + n);
  const WeightMap lazy = weight_map_from(file);
  CHECK(lazy.values<float>("b") == std::vector<float>{5, 6});
  CHECK(file->bytes_read() == 8 + n + 8);
}

TEST_CASE("read_tensor upcasts half formats and reports lookups") {
  WeightMap map;
  map.insert_bytes({"h", DType::F16, {1}, 0, 0}, Bytes{std::byte{0x00}, std::byte{0x3C}});
  map.insert_bytes({"bf", DType::BF16, {1}, 0, 0}, Bytes{std::byte{0x80}, std::byte{0x3F}});
  const Tensor h = read_tensor(map, "h", true);
  CHECK(h.meta.dtype == DType::F16);
  CHECK(h.payload_dtype == DType::F32);
  CHECK(h.values<float>() == std::vector<float>{1.0f});
  CHECK(read_tensor(map, "bf", true).values<float>() == std::vector<float>{1.0f});
  CHECK(read_tensor(map, "bf", false).payload_dtype == DType::BF16);
  CHECK(testing::error_kind_of([&] { read_tensor(map, "missing", true); }) == ErrorKind::lookup);
}

TEST_CASE("strict-finite write refuses NaN and leaves nothing behind") {
  TempDir dir;
  WeightMap map;
  map.insert_values<float>("w", DType::F32, {2}, {1.0f, std::numeric_limits<float>::quiet_NaN()});
  const auto path = dir.file("nan.safetensors");
  const auto msg = testing::error_message_of([&] { write_checkpoint(path, map, {DTypePolicy::keep, true, 1}); });
  CHECK(msg.find("non-finite value in tensor w") != std::string::npos);
  CHECK(std::distance(std::filesystem::directory_iterator(dir.path()), {}) == 0);
  write_checkpoint(path, map);  // allowed without the flag
  CHECK(std::isnan(open_checkpoint(path).values<float>("w")[1]));
}

TEST_CASE("force_f32 widens float tensors only") {
  TempDir dir;
  WeightMap map;
  map.insert_values<double>("d", DType::F64, {2}, {0.1, 2.0});
  map.insert_values<float>("h", DType::F16, {1}, {0.5f});
  map.insert_bytes({"i", DType::I8, {2}, 0, 0}, Bytes{std::byte{1}, std::byte{0xFF}});
  const auto path = dir.file("f32.safetensors");
  write_checkpoint(path, map, {DTypePolicy::force_f32, false, 1});
  const WeightMap back = open_checkpoint(path);
  CHECK(back.meta("d").dtype == DType::F32);
  CHECK(back.values<float>("d") == std::vector<float>{0.1f, 2.0f});
  CHECK(back.meta("h").dtype == DType::F32);
  CHECK(back.meta("i").dtype == DType::I8);
  CHECK(back.bytes("i") == map.bytes("i"));
}

TEST_CASE("malformed headers are format errors naming the problem") {
  TempDir dir;
  const std::string ok_entry = R"("w":{"dtype":"F32","shape":[2],"data_offsets":[0,8]})";
  const std::string data8(8, '\0');
  struct Case {
    std::string raw;
    std::string message;
  };
  std::string oversize(8, '\0');
  oversize[4] = 1;  // 2^32 bytes
  std::string longer(8, '\0');
  longer[0] = 100;
  const Case cases[] = {
      {"", "header length truncated"},
      {"abc", "header length truncated"},
      {oversize, "header length exceeds limit"},
      {longer + "{}", "header truncated"},
      {testing::raw_checkpoint("{not json"), "not valid JSON"},
      {testing::raw_checkpoint("[1,2]"), "header is not a JSON object"},
      {testing::raw_checkpoint("{" + ok_entry + "," + ok_entry + "}", data8), "duplicate key 'w'"},
      {testing::raw_checkpoint(R"({"w":{"dtype":"F8","shape":[2],"data_offsets":[0,8]}})", data8), "unknown dtype 'F8'"},
      {testing::raw_checkpoint(R"({"a":{"dtype":"F32","shape":[2],"data_offsets":[0,8]},"b":{"dtype":"F32","shape":[1],"data_offsets":[4,8]}})", data8), "overlapping data_offsets"},
      {testing::raw_checkpoint(R"({"w":{"dtype":"F32","shape":[4],"data_offsets":[0,16]}})", data8), "data range out of bounds"},
      {testing::raw_checkpoint(R"({"w":{"dtype":"F32","shape":[3],"data_offsets":[0,8]}})", data8), "does not match shape and dtype"},
      {testing::raw_checkpoint(R"({"w":{"shape":[2],"data_offsets":[0,8]}})", data8), "missing field"},
      {testing::raw_checkpoint(R"({"w":{"dtype":"F32","shape":[-2],"data_offsets":[0,8]}})", data8), "shape"},
      {testing::raw_checkpoint(R"({"w":{"dtype":"F32","shape":[2],"data_offsets":[0,8],"extra":1}})", data8), "unknown field"},
      {testing::raw_checkpoint(R"({"w":{"dtype":"F32","shape":[1],"data_offsets":[4,8]}})", data8), "not contiguous"},
      {testing::raw_checkpoint(R"({"w":{"dtype":"F32","shape":[1],"data_offsets":[0,4]}})", data8), "not covered"},
      {testing::raw_checkpoint(R"({"__metadata__":{"k":1},)" + ok_entry + "}", data8), "must be a string"},
      {testing::raw_checkpoint(R"({"w":{"dtype":"F32","shape":[2],"data_offsets":[8,0]}})", data8), "end precedes begin"},
  };
  for (const auto& c : cases) {
    CAPTURE(c.message);
    CHECK(open_kind(dir, c.raw) == ErrorKind::format);
    CHECK(open_message(dir, c.raw).find(c.message) != std::string::npos);
  }
  CHECK(testing::error_kind_of([] { open_checkpoint("/nonexistent/file.safetensors"); }) == ErrorKind::io);
}

TEST_CASE("weight map bookkeeping") {
  WeightMap map;
  map.insert_values<float>("b", DType::F32, {1}, {1});
  map.insert_values<float>("a", DType::F32, {1}, {2});
  CHECK(map.names() == std::vector<std::string>{"a", "b"});
  CHECK(testing::error_kind_of([&] { map.insert_values<float>("a", DType::F32, {1}, {2}); }) ==
        ErrorKind::consistency);
  map.insert({"bad", DType::F32, {2}, 0, 0}, [] { return Bytes(4); });
  CHECK(testing::error_kind_of([&] { map.bytes("bad"); }) == ErrorKind::consistency);
}

TEST_CASE("compatibility report") {
  std::mt19937_64 rng(9);
  WeightMap a = testing::random_map(rng, {"emb", "l0.weight", "l0.bias", "l1.weight", "l1.bias"});
  WeightMap b = testing::map_like(a, rng, "b");
  SUBCASE("identical layouts share everything") {
    const WeightMap* maps[] = {&a, &b};
    const auto r = validate_compatibility(maps);
    CHECK(r.shared == a.names());
    CHECK(r.skipped.empty());
    std::uint64_t total = 0;
    for (const auto& n : a.names()) total += a.meta(n).element_count();
    CHECK(r.eligible_param_count == total);
  }
  SUBCASE("shape mismatch, missing, integer and filtered tensors are skipped") {
    WeightMap c;
    for (const auto& [name, e] : a.entries()) {
      if (name == "emb") continue;
      c.insert(e.meta, e.producer);
    }
    c.insert_values<float>("emb", DType::F32, {100, 8}, std::vector<float>(800));
    WeightMap d = b;
    WeightMap e2;
    for (const auto& [name, e] : d.entries()) {
      if (name == "emb") continue;
      e2.insert(e.meta, e.producer);
    }
    e2.insert_values<float>("emb", DType::F32, {101, 8}, std::vector<float>(808));
    e2.insert_bytes({"steps", DType::I64, {1}, 0, 0}, Bytes(8));
    c.insert_bytes({"steps", DType::I64, {1}, 0, 0}, Bytes(8));
    e2.insert_values<float>("only_here", DType::F32, {1}, {1});
    const WeightMap* maps[] = {&c, &e2};
    const auto r = validate_compatibility(maps, NameFilters{{}, {"*.bias"}});
    CHECK(r.find_skipped("emb")->reason == SkipReason::shape_mismatch);
    CHECK(r.find_skipped("steps")->reason == SkipReason::not_float);
    CHECK(r.find_skipped("only_here")->reason == SkipReason::missing);
    CHECK(r.find_skipped("l0.bias")->reason == SkipReason::filtered);
    CHECK(r.find_skipped("l1.bias")->reason == SkipReason::filtered);
    CHECK(r.shared == std::vector<std::string>{"l0.weight", "l1.weight"});
    for (const auto& s : r.skipped) CHECK_FALSE(r.is_shared(s.name));
    // Order of the inputs does not change the outcome.
    const WeightMap* swapped[] = {&e2, &c};
    const auto r2 = validate_compatibility(swapped, NameFilters{{}, {"*.bias"}});
    CHECK(r2.shared == r.shared);
    CHECK(r2.skipped.size() == r.skipped.size());
    for (std::size_t i = 0; i < r.skipped.size(); ++i) {
      CHECK(r2.skipped[i].name == r.skipped[i].name);
      CHECK(r2.skipped[i].reason == r.skipped[i].reason);
    }
  }
  SUBCASE("include patterns") {
    const WeightMap* maps[] = {&a, &b};
    const auto r = validate_compatibility(maps, NameFilters{{"l1.*"}, {}});
    CHECK(r.shared == std::vector<std::string>{"l1.bias", "l1.weight"});
  }
  SUBCASE("needs two maps") {
    const WeightMap* maps[] = {&a};
    CHECK(testing::error_kind_of([&] { validate_compatibility(maps); }) == ErrorKind::usage);
  }
}
