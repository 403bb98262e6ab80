#pragma once

// Versioned binary parameter container.
//
//   magic "LRCK" | u32 version | u64 record count
//   per record: u32 name length | name bytes | u8 dtype | u32 rank |
//               u64 dims[rank] | little-endian raw data
//
// Optimizer accumulators live under the "adagrad/" prefix and run metadata
// under "meta/".

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <type_traits>
#include <vector>

#include "lorcon/errors.hpp"
#include "lorcon/nn/tensor.hpp"

namespace lorcon::nn {

enum class DType : std::uint8_t { kFloat32 = 1, kFloat64 = 2, kInt64 = 3 };

inline std::size_t dtype_size(DType d) { return d == DType::kFloat32 ? 4 : 8; }

inline const char* dtype_name(DType d) {
  switch (d) {
    case DType::kFloat32: return "float32";
    case DType::kFloat64: return "float64";
    case DType::kInt64: return "int64";
  }
  return "unknown";
}

template <typename T>
constexpr DType dtype_of() {
  if constexpr (std::is_same_v<T, float>) return DType::kFloat32;
  else if constexpr (std::is_same_v<T, double>) return DType::kFloat64;
  else return DType::kInt64;
}

inline constexpr char kCheckpointMagic[4] = {'L', 'R', 'C', 'K'};
inline constexpr std::uint32_t kCheckpointVersion = 1;
inline const std::string kOptimizerPrefix = "adagrad/";
inline const std::string kMetaPrefix = "meta/";

struct Record {
  std::string name;
  DType dtype = DType::kFloat32;
  Shape dims;
  std::vector<unsigned char> bytes;  // little-endian
};

class Checkpoint {
 public:
  template <typename T>
  void put(const std::string& name, const Shape& dims, const std::vector<T>& values) {
    static_assert(std::is_same_v<T, float> || std::is_same_v<T, double> ||
                  std::is_same_v<T, std::int64_t>);
    if (values.size() != numel(dims)) throw ShapeError("checkpoint: size mismatch for " + name);
    Record r{name, dtype_of<T>(), dims, std::vector<unsigned char>(values.size() * sizeof(T))};
    for (std::size_t i = 0; i < values.size(); ++i) store_le(r.bytes.data() + i * sizeof(T), values[i]);
    records_[name] = std::move(r);
  }

  bool contains(const std::string& name) const { return records_.count(name) != 0; }

  const Record& record(const std::string& name) const {
    auto it = records_.find(name);
    if (it == records_.end()) throw DataError("checkpoint: missing record " + name);
    return it->second;
  }

  template <typename T>
  std::vector<T> get(const std::string& name) const {
    const Record& r = record(name);
    if (r.dtype != dtype_of<T>())
      throw DataError("checkpoint: record " + name + " has dtype " + dtype_name(r.dtype) +
                      ", expected " + dtype_name(dtype_of<T>()));
    std::vector<T> out(numel(r.dims));
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = load_le<T>(r.bytes.data() + i * sizeof(T));
    return out;
  }

  const std::map<std::string, Record>& records() const { return records_; }

  std::vector<unsigned char> serialize() const {
    std::vector<unsigned char> out;
    append(out, kCheckpointMagic, 4);
    append_int<std::uint32_t>(out, kCheckpointVersion);
    append_int<std::uint64_t>(out, records_.size());
    for (const auto& [name, r] : records_) {
      append_int<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
      append(out, name.data(), name.size());
      out.push_back(static_cast<unsigned char>(r.dtype));
      append_int<std::uint32_t>(out, static_cast<std::uint32_t>(r.dims.size()));
      for (std::size_t d : r.dims) append_int<std::uint64_t>(out, d);
      out.insert(out.end(), r.bytes.begin(), r.bytes.end());
    }
    return out;
  }

  static Checkpoint deserialize(const std::vector<unsigned char>& in, const std::string& source) {
    std::size_t pos = 0;
    auto need = [&](std::size_t n) {
      if (pos + n > in.size()) throw DataError(source + ": truncated checkpoint");
    };
    need(4);
    if (std::memcmp(in.data(), kCheckpointMagic, 4) != 0) throw DataError(source + ": not a checkpoint");
    pos = 4;
    need(4);
    const auto version = read_int<std::uint32_t>(in.data() + pos);
    pos += 4;
    if (version != kCheckpointVersion)
      throw DataError(source + ": unsupported checkpoint version " + std::to_string(version));
    need(8);
    const auto count = read_int<std::uint64_t>(in.data() + pos);
    pos += 8;
    Checkpoint ck;
    for (std::uint64_t k = 0; k < count; ++k) {
      need(4);
      const auto len = read_int<std::uint32_t>(in.data() + pos);
      pos += 4;
      need(len + 5);
      Record r;
      r.name.assign(reinterpret_cast<const char*>(in.data() + pos), len);
      pos += len;
      r.dtype = static_cast<DType>(in[pos++]);
      if (r.dtype != DType::kFloat32 && r.dtype != DType::kFloat64 && r.dtype != DType::kInt64)
        throw DataError(source + ": record " + r.name + " has unknown dtype tag");
      const auto rank = read_int<std::uint32_t>(in.data() + pos);
      pos += 4;
      need(8 * static_cast<std::size_t>(rank));
      for (std::uint32_t d = 0; d < rank; ++d) {
        r.dims.push_back(read_int<std::uint64_t>(in.data() + pos));
        pos += 8;
      }
      const std::size_t bytes = numel(r.dims) * dtype_size(r.dtype);
      need(bytes);
      r.bytes.assign(in.begin() + static_cast<std::ptrdiff_t>(pos),
                     in.begin() + static_cast<std::ptrdiff_t>(pos + bytes));
      pos += bytes;
      ck.records_[r.name] = std::move(r);
    }
    if (pos != in.size()) throw DataError(source + ": trailing bytes after checkpoint records");
    return ck;
  }

  void save(const std::filesystem::path& path) const {
    const auto bytes = serialize();
    const auto tmp = path.string() + ".tmp";
    {
      std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
      if (!out) throw DataError("cannot write " + tmp);
      out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
      if (!out) throw DataError("write failure on " + tmp);
    }
    std::filesystem::rename(tmp, path);
  }

  static Checkpoint load(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open checkpoint " + path.string());
    std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return deserialize(bytes, path.string());
  }

 private:
  template <typename U>
  static U byteswap_if_big(U v) {
    if constexpr (std::endian::native == std::endian::little) {
      return v;
    } else {
      U out{};
      auto* src = reinterpret_cast<const unsigned char*>(&v);
      auto* dst = reinterpret_cast<unsigned char*>(&out);
      for (std::size_t i = 0; i < sizeof(U); ++i) dst[i] = src[sizeof(U) - 1 - i];
      return out;
    }
  }

  template <typename T>
  static void store_le(unsigned char* dst, T v) {
    v = byteswap_if_big(v);
    std::memcpy(dst, &v, sizeof(T));
  }

  template <typename T>
  static T load_le(const unsigned char* src) {
    T v;
    std::memcpy(&v, src, sizeof(T));
    return byteswap_if_big(v);
  }

  template <typename U>
  static void append_int(std::vector<unsigned char>& out, U v) {
    unsigned char buf[sizeof(U)];
    store_le(buf, v);
    out.insert(out.end(), buf, buf + sizeof(U));
  }

  template <typename U>
  static U read_int(const unsigned char* p) {
    return load_le<U>(p);
  }

  static void append(std::vector<unsigned char>& out, const void* p, std::size_t n) {
    const auto* b = static_cast<const unsigned char*>(p);
    out.insert(out.end(), b, b + n);
  }

  std::map<std::string, Record> records_;
};

}  // namespace lorcon::nn
