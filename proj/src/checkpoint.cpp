#include "gradmerge/checkpoint.hpp"

#include <fcntl.h>
#include <sys/stat.h>
#include <unistd.h>

#include <algorithm>
#include <cerrno>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>

#include "gradmerge/error.hpp"
#include "gradmerge/json_util.hpp"
#include "gradmerge/parallel.hpp"

namespace gradmerge {

std::uint64_t element_count(const Shape& shape) {
  std::uint64_t n = 1;
  for (auto extent : shape) n *= static_cast<std::uint64_t>(extent);
  return n;
}

std::string shape_string(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ", ";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

namespace {

[[noreturn]] void format_error(const std::string& message) {
  throw_error(ErrorKind::format, message);
}

std::uint64_t checked_u64(const Json& value, const std::string& what) {
  if (!value.is_number_integer()) format_error(what + " must be a non-negative integer");
  if (value.is_number_unsigned()) return value.get<std::uint64_t>();
  const auto v = value.get<std::int64_t>();
  if (v < 0) format_error(what + " must be a non-negative integer");
  return static_cast<std::uint64_t>(v);
}

TensorMeta parse_tensor_entry(const std::string& name, const Json& entry) {
  if (!entry.is_object()) format_error("tensor '" + name + "': entry is not an object");
  for (const auto& [key, _] : entry.items()) {
    if (key != "dtype" && key != "shape" && key != "data_offsets") {
      format_error("tensor '" + name + "': unknown field '" + key + "'");
    }
  }
  for (const char* field : {"dtype", "shape", "data_offsets"}) {
    if (!entry.contains(field)) {
      format_error("tensor '" + name + "': missing field '" + field + "'");
    }
  }

  TensorMeta meta;
  meta.name = name;

  const Json& dtype = entry["dtype"];
  if (!dtype.is_string()) format_error("tensor '" + name + "': dtype must be a string");
  const auto parsed = parse_dtype(dtype.get<std::string>());
  if (!parsed) {
    format_error("tensor '" + name + "': unknown dtype '" + dtype.get<std::string>() + "'");
  }
  meta.dtype = *parsed;

  const Json& shape = entry["shape"];
  if (!shape.is_array()) format_error("tensor '" + name + "': shape must be an array");
  std::uint64_t elements = 1;
  for (const auto& extent : shape) {
    const auto e = checked_u64(extent, "tensor '" + name + "': shape extent");
    if (e > static_cast<std::uint64_t>(std::numeric_limits<std::int64_t>::max()) ||
        (e != 0 && elements > std::numeric_limits<std::uint64_t>::max() / e)) {
      format_error("tensor '" + name + "': shape overflows");
    }
    elements *= e;
    meta.shape.push_back(static_cast<std::int64_t>(e));
  }

  const Json& offsets = entry["data_offsets"];
  if (!offsets.is_array() || offsets.size() != 2) {
    format_error("tensor '" + name + "': data_offsets must be [begin, end]");
  }
  meta.data_begin = checked_u64(offsets[0], "tensor '" + name + "': data_offsets");
  meta.data_end = checked_u64(offsets[1], "tensor '" + name + "': data_offsets");
  if (meta.data_end < meta.data_begin) {
    format_error("tensor '" + name + "': data_offsets end precedes begin");
  }
  const auto width = dtype_size(meta.dtype);
  if (elements > std::numeric_limits<std::uint64_t>::max() / width ||
      elements * width != meta.data_end - meta.data_begin) {
    format_error("tensor '" + name + "': data_offsets length does not match shape and dtype");
  }
  return meta;
}

}  // namespace

ParsedHeader parse_header(std::string_view header_json, std::uint64_t data_size) {
  const Json header = parse_json_strict(header_json, "header");
  if (!header.is_object()) format_error("header is not a JSON object");

  ParsedHeader parsed;
  for (const auto& [key, value] : header.items()) {
    if (key == "__metadata__") {
      if (!value.is_object()) format_error("__metadata__ must be an object");
      for (const auto& [mk, mv] : value.items()) {
        if (!mv.is_string()) format_error("__metadata__ value for '" + mk + "' must be a string");
        parsed.metadata.emplace(mk, mv.get<std::string>());
      }
      continue;
    }
    parsed.tensors.push_back(parse_tensor_entry(key, value));
  }

  for (const auto& meta : parsed.tensors) {
    if (meta.data_end > data_size) {
      format_error("tensor '" + meta.name + "': data range out of bounds");
    }
  }

  std::vector<const TensorMeta*> by_offset;
  by_offset.reserve(parsed.tensors.size());
  for (const auto& meta : parsed.tensors) by_offset.push_back(&meta);
  std::sort(by_offset.begin(), by_offset.end(), [](const TensorMeta* a, const TensorMeta* b) {
    return std::tie(a->data_begin, a->data_end) < std::tie(b->data_begin, b->data_end);
  });
  std::uint64_t cursor = 0;
  const TensorMeta* previous = nullptr;
  for (const TensorMeta* meta : by_offset) {
    if (meta->data_begin < cursor) {
      format_error("overlapping data_offsets between '" + previous->name + "' and '" +
                   meta->name + "'");
    }
    if (meta->data_begin > cursor) {
      format_error("tensor '" + meta->name + "': data_offsets are not contiguous");
    }
    cursor = meta->data_end;
    previous = meta;
  }
  if (cursor != data_size) {
    format_error("data section has " + std::to_string(data_size - cursor) +
                 " bytes not covered by any tensor");
  }

  std::sort(parsed.tensors.begin(), parsed.tensors.end(),
            [](const TensorMeta& a, const TensorMeta& b) { return a.name < b.name; });
  return parsed;
}

CheckpointFile::CheckpointFile(std::filesystem::path path, int fd, std::uint64_t data_start,
                               ParsedHeader header)
    : path_(std::move(path)), fd_(fd), data_start_(data_start), header_(std::move(header)) {}

CheckpointFile::~CheckpointFile() {
  if (fd_ >= 0) ::close(fd_);
}

namespace {

// Reads exactly `size` bytes at `offset`; returns the count actually read.
std::uint64_t pread_full(int fd, std::byte* out, std::uint64_t size, std::uint64_t offset) {
  std::uint64_t done = 0;
  while (done < size) {
    const auto n = ::pread(fd, out + done, size - done, static_cast<off_t>(offset + done));
    if (n < 0) {
      if (errno == EINTR) continue;
      throw_error(ErrorKind::io, std::string("read failed: ") + std::strerror(errno));
    }
    if (n == 0) break;
    done += static_cast<std::uint64_t>(n);
  }
  return done;
}

struct FileDescriptor {
  int fd = -1;
  ~FileDescriptor() {
    if (fd >= 0) ::close(fd);
  }
  int release() { return std::exchange(fd, -1); }
};

}  // namespace

std::shared_ptr<const CheckpointFile> CheckpointFile::open(const std::filesystem::path& path) {
  FileDescriptor file{::open(path.c_str(), O_RDONLY | O_CLOEXEC)};
  if (file.fd < 0) {
    throw_error(ErrorKind::io, "cannot open " + path.string() + ": " + std::strerror(errno));
  }
  struct stat st {};
  if (::fstat(file.fd, &st) != 0) {
    throw_error(ErrorKind::io, "cannot stat " + path.string());
  }
  const auto file_size = static_cast<std::uint64_t>(st.st_size);

  std::byte length_bytes[8];
  if (pread_full(file.fd, length_bytes, 8, 0) != 8) format_error("header length truncated");
  std::uint64_t header_length = 0;
  std::memcpy(&header_length, length_bytes, 8);
  if (header_length > kMaxHeaderBytes) format_error("header length exceeds limit");
  if (header_length > file_size - 8) format_error("header truncated");

  std::string header_text(header_length, '\0');
  pread_full(file.fd, reinterpret_cast<std::byte*>(header_text.data()), header_length, 8);
  const std::uint64_t data_start = 8 + header_length;
  auto header = parse_header(header_text, file_size - data_start);

  std::shared_ptr<CheckpointFile> opened(
      new CheckpointFile(path, file.release(), data_start, std::move(header)));
  opened->bytes_read_ = data_start;
  return opened;
}

const TensorMeta& CheckpointFile::meta(std::string_view name) const {
  const auto it = std::lower_bound(
      header_.tensors.begin(), header_.tensors.end(), name,
      [](const TensorMeta& m, std::string_view n) { return m.name < n; });
  if (it == header_.tensors.end() || it->name != name) {
    throw_error(ErrorKind::lookup, "no tensor named '" + std::string(name) + "' in " + path_.string());
  }
  return *it;
}

Bytes CheckpointFile::read(std::string_view name) const {
  const TensorMeta& m = meta(name);
  Bytes out(m.data_end - m.data_begin);
  const auto got = pread_full(fd_, out.data(), out.size(), data_start_ + m.data_begin);
  bytes_read_ += got;
  if (got != out.size()) {
    throw_error(ErrorKind::io, "short read for tensor '" + m.name + "' in " + path_.string());
  }
  return out;
}

void WeightMap::insert(TensorMeta meta, Producer producer) {
  std::string name = meta.name;
  meta.data_begin = 0;
  meta.data_end = meta.byte_size();
  const auto [_, inserted] = entries_.emplace(name, Entry{std::move(meta), std::move(producer)});
  if (!inserted) throw_error(ErrorKind::consistency, "duplicate tensor name '" + name + "'");
}

void WeightMap::insert_bytes(TensorMeta meta, Bytes payload) {
  if (payload.size() != meta.byte_size()) {
    throw_error(ErrorKind::consistency,
                "payload for '" + meta.name + "' does not match its shape and dtype");
  }
  auto shared = std::make_shared<const Bytes>(std::move(payload));
  insert(std::move(meta), [shared] { return *shared; });
}

bool WeightMap::contains(std::string_view name) const { return entries_.find(name) != entries_.end(); }

const WeightMap::Entry& WeightMap::entry(std::string_view name) const {
  const auto it = entries_.find(name);
  if (it == entries_.end()) {
    throw_error(ErrorKind::lookup, "no tensor named '" + std::string(name) + "'" +
                                       (id_.empty() ? std::string() : " in " + id_));
  }
  return it->second;
}

const TensorMeta& WeightMap::meta(std::string_view name) const { return entry(name).meta; }

std::vector<std::string> WeightMap::names() const {
  std::vector<std::string> out;
  out.reserve(entries_.size());
  for (const auto& [name, _] : entries_) out.push_back(name);
  return out;
}

Bytes WeightMap::bytes(std::string_view name) const {
  const Entry& e = entry(name);
  Bytes payload = e.producer();
  if (payload.size() != e.meta.byte_size()) {
    throw_error(ErrorKind::consistency,
                "produced payload for '" + e.meta.name + "' has the wrong length");
  }
  return payload;
}

WeightMap weight_map_from(std::shared_ptr<const CheckpointFile> file) {
  WeightMap map(file->path().string());
  map.metadata() = file->metadata();
  for (const auto& meta : file->tensors()) {
    map.insert(meta, [file, name = meta.name] { return file->read(name); });
  }
  return map;
}

WeightMap open_checkpoint(const std::filesystem::path& path) {
  return weight_map_from(CheckpointFile::open(path));
}

Tensor read_tensor(const WeightMap& map, std::string_view name, bool upcast) {
  Tensor t;
  t.meta = map.meta(name);
  t.payload = map.bytes(name);
  t.payload_dtype = t.meta.dtype;
  if (upcast && (t.meta.dtype == DType::F16 || t.meta.dtype == DType::BF16)) {
    t.payload = convert_payload(t.payload, t.meta.dtype, DType::F32);
    t.payload_dtype = DType::F32;
  }
  return t;
}

namespace {

void check_finite(const Bytes& payload, DType dtype, const std::string& name) {
  if (!is_float(dtype)) return;
  const auto values = decode_floats<double>(payload, dtype);
  for (double v : values) {
    if (!std::isfinite(v)) throw_error(ErrorKind::validation, "non-finite value in tensor " + name);
  }
}

struct TempFile {
  std::filesystem::path path;
  bool committed = false;
  ~TempFile() {
    if (!committed) {
      std::error_code ec;
      std::filesystem::remove(path, ec);
    }
  }
};

}  // namespace

void write_checkpoint(const std::filesystem::path& path, const WeightMap& map,
                      const WriteOptions& options) {
  std::vector<TensorMeta> metas;
  metas.reserve(map.size());
  std::uint64_t offset = 0;
  for (const auto& [name, entry] : map.entries()) {
    TensorMeta m = entry.meta;
    if (options.dtype_policy == DTypePolicy::force_f32 && is_float(m.dtype)) m.dtype = DType::F32;
    m.data_begin = offset;
    m.data_end = offset + m.byte_size();
    offset = m.data_end;
    metas.push_back(std::move(m));
  }

  Json header = Json::object();
  if (!map.metadata().empty()) header["__metadata__"] = map.metadata();
  for (const auto& m : metas) {
    header[m.name] = {{"dtype", dtype_name(m.dtype)},
                      {"shape", m.shape},
                      {"data_offsets", {m.data_begin, m.data_end}}};
  }
  std::string header_text = header.dump();
  header_text.append((8 - header_text.size() % 8) % 8, ' ');

  TempFile temp{path.string() + ".tmp-" + std::to_string(::getpid())};
  std::ofstream out(temp.path, std::ios::binary | std::ios::trunc);
  if (!out) throw_error(ErrorKind::io, "cannot write " + path.string());

  const std::uint64_t header_length = header_text.size();
  out.write(reinterpret_cast<const char*>(&header_length), 8);
  out.write(header_text.data(), static_cast<std::streamsize>(header_text.size()));

  // Produce a window of tensors in parallel, then write them in order, so
  // memory stays bounded by window * largest tensor.
  unsigned threads = options.threads == 0 ? default_thread_count() : options.threads;
  const std::size_t window = std::max(1u, threads);
  const auto& entries = map.entries();
  auto it = entries.begin();
  std::size_t index = 0;
  while (it != entries.end()) {
    std::vector<const WeightMap::Entry*> batch;
    for (; it != entries.end() && batch.size() < window; ++it) batch.push_back(&it->second);
    std::vector<Bytes> payloads(batch.size());
    parallel_for(
        batch.size(),
        [&](std::size_t i) {
          const auto& entry = *batch[i];
          const auto& target = metas[index + i];
          Bytes payload = map.bytes(entry.meta.name);
          if (target.dtype != entry.meta.dtype) {
            payload = convert_payload(payload, entry.meta.dtype, target.dtype);
          }
          if (options.strict_finite) check_finite(payload, target.dtype, target.name);
          payloads[i] = std::move(payload);
        },
        threads);
    for (const auto& payload : payloads) {
      out.write(reinterpret_cast<const char*>(payload.data()),
                static_cast<std::streamsize>(payload.size()));
    }
    index += batch.size();
  }
  out.close();
  if (!out) throw_error(ErrorKind::io, "failed writing " + path.string());

  std::error_code ec;
  std::filesystem::rename(temp.path, path, ec);
  if (ec) throw_error(ErrorKind::io, "cannot move output into place at " + path.string());
  temp.committed = true;
}

}  // namespace gradmerge
