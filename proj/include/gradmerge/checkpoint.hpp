#pragma once

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "gradmerge/dtype.hpp"

namespace gradmerge {

using Shape = std::vector<std::int64_t>;
using Metadata = std::map<std::string, std::string>;

std::uint64_t element_count(const Shape& shape);
std::string shape_string(const Shape& shape);

struct TensorMeta {
  std::string name;
  DType dtype = DType::F32;
  Shape shape;
  // Byte range relative to the start of the data section.
  std::uint64_t data_begin = 0;
  std::uint64_t data_end = 0;

  std::uint64_t element_count() const { return gradmerge::element_count(shape); }
  std::uint64_t byte_size() const { return element_count() * dtype_size(dtype); }
};

// Upper bound on the JSON header, matching the reference reader.
inline constexpr std::uint64_t kMaxHeaderBytes = 100'000'000;

struct ParsedHeader {
  std::vector<TensorMeta> tensors;  // lexicographic by name
  Metadata metadata;
};

// Validates a header against the size of the data section that follows it.
ParsedHeader parse_header(std::string_view header_json, std::uint64_t data_size);

// An opened checkpoint file. Only the header is read on open; payloads are
// fetched per tensor with positional reads, so one instance can serve
// concurrent readers.
class CheckpointFile {
 public:
  static std::shared_ptr<const CheckpointFile> open(const std::filesystem::path& path);

  CheckpointFile(const CheckpointFile&) = delete;
  CheckpointFile& operator=(const CheckpointFile&) = delete;
  ~CheckpointFile();

  const std::filesystem::path& path() const { return path_; }
  const std::vector<TensorMeta>& tensors() const { return header_.tensors; }
  const Metadata& metadata() const { return header_.metadata; }
  const TensorMeta& meta(std::string_view name) const;
  Bytes read(std::string_view name) const;

  // Total bytes pulled from disk so far, header included.
  std::uint64_t bytes_read() const { return bytes_read_.load(); }

 private:
  CheckpointFile(std::filesystem::path path, int fd, std::uint64_t data_start, ParsedHeader header);

  std::filesystem::path path_;
  int fd_ = -1;
  std::uint64_t data_start_ = 0;
  ParsedHeader header_;
  mutable std::atomic<std::uint64_t> bytes_read_{0};
};

// Named tensors in canonical (lexicographic) order. Payloads are produced on
// demand, which lets a map stand for an opened file, an in-memory model, or a
// merge result that is computed tensor by tensor while it is written out.
class WeightMap {
 public:
  using Producer = std::function<Bytes()>;

  struct Entry {
    TensorMeta meta;
    Producer producer;
  };

  WeightMap() = default;
  explicit WeightMap(std::string id) : id_(std::move(id)) {}

  const std::string& id() const { return id_; }
  void set_id(std::string id) { id_ = std::move(id); }

  const Metadata& metadata() const { return metadata_; }
  Metadata& metadata() { return metadata_; }

  void insert(TensorMeta meta, Producer producer);
  void insert_bytes(TensorMeta meta, Bytes payload);

  template <typename T>
  void insert_values(std::string name, DType dtype, Shape shape, const std::vector<T>& values) {
    TensorMeta meta{std::move(name), dtype, std::move(shape), 0, 0};
    insert_bytes(std::move(meta), encode_floats<T>(values, dtype));
  }

  bool contains(std::string_view name) const;
  const TensorMeta& meta(std::string_view name) const;
  const Entry& entry(std::string_view name) const;
  std::vector<std::string> names() const;
  std::size_t size() const { return entries_.size(); }
  const std::map<std::string, Entry, std::less<>>& entries() const { return entries_; }

  // Produces the payload, checking it against the declared meta.
  Bytes bytes(std::string_view name) const;

  template <typename T>
  std::vector<T> values(std::string_view name) const {
    return decode_floats<T>(bytes(name), meta(name).dtype);
  }

 private:
  std::string id_;
  Metadata metadata_;
  std::map<std::string, Entry, std::less<>> entries_;
};

WeightMap open_checkpoint(const std::filesystem::path& path);
WeightMap weight_map_from(std::shared_ptr<const CheckpointFile> file);

struct Tensor {
  TensorMeta meta;  // as stored; dtype is the original one
  DType payload_dtype = DType::F32;
  Bytes payload;

  template <typename T>
  std::vector<T> values() const { return decode_floats<T>(payload, payload_dtype); }
};

// With upcast, F16/BF16 payloads are widened to F32 (exactly); other dtypes
// are returned as stored.
Tensor read_tensor(const WeightMap& map, std::string_view name, bool upcast);

enum class DTypePolicy { keep, force_f32 };

struct WriteOptions {
  DTypePolicy dtype_policy = DTypePolicy::keep;
  bool strict_finite = false;
  unsigned threads = 0;  // 0: process default
};

// Writes atomically: data goes to a sibling temporary that is renamed into
// place, and removed if anything fails.
void write_checkpoint(const std::filesystem::path& path, const WeightMap& map,
                      const WriteOptions& options = {});

}  // namespace gradmerge
