#pragma once

// Tensor blob format, little-endian throughout:
//   "FTDCKPT1"  u32 count
//   per tensor: u32 name_len, name bytes (UTF-8), u32 rank, u64 extents[rank],
//               u8 dtype (1 = float32, 2 = float64), raw row-major payload

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <stdexcept>
#include <string>
#include <vector>

#include "ftd/autograd.hpp"
#include "ftd/tensor.hpp"

namespace ftd {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct BlobEntry {
  std::string name;
  Shape shape;
  DType dtype = DType::float32;
  std::vector<std::uint8_t> payload;  // little-endian element bytes

  friend bool operator==(const BlobEntry&, const BlobEntry&) = default;
};

namespace detail {

template <typename U>
void put_le(std::vector<std::uint8_t>& out, U v) {
  for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

template <typename U>
U get_le(const std::uint8_t* p) {
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(p[i]) << (8 * i);
  return v;
}

template <typename T>
using bits_t = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;

}  // namespace detail

class Checkpoint {
 public:
  static constexpr char kMagic[8] = {'F', 'T', 'D', 'C', 'K', 'P', 'T', '1'};

  template <typename T>
  void add(const std::string& name, const Tensor<T>& t) {
    if (contains(name)) throw CheckpointError("duplicate checkpoint entry '" + name + "'");
    BlobEntry e{name, t.shape(), dtype_of<T>(), {}};
    e.payload.reserve(t.size() * sizeof(T));
    for (T v : t.data()) detail::put_le(e.payload, std::bit_cast<detail::bits_t<T>>(v));
    entries_.push_back(std::move(e));
  }

  template <typename T>
  Tensor<T> get(const std::string& name) const {
    const BlobEntry& e = entry(name);
    if (e.dtype != dtype_of<T>()) throw CheckpointError("dtype mismatch for '" + name + "'");
    std::vector<T> data(shape_numel(e.shape));
    for (std::size_t i = 0; i < data.size(); ++i) {
      data[i] = std::bit_cast<T>(detail::get_le<detail::bits_t<T>>(e.payload.data() + i * sizeof(T)));
    }
    return Tensor<T>(e.shape, std::move(data));
  }

  bool contains(const std::string& name) const {
    for (const auto& e : entries_)
      if (e.name == name) return true;
    return false;
  }

  const BlobEntry& entry(const std::string& name) const {
    for (const auto& e : entries_)
      if (e.name == name) return e;
    throw CheckpointError("checkpoint has no entry '" + name + "'");
  }

  const std::vector<BlobEntry>& entries() const noexcept { return entries_; }

  /// Entries whose name starts with `prefix`, in stored order.
  Checkpoint with_prefix(const std::string& prefix) const {
    Checkpoint out;
    for (const auto& e : entries_)
      if (e.name.rfind(prefix, 0) == 0) out.entries_.push_back(e);
    return out;
  }

  void merge(const Checkpoint& other) {
    for (const auto& e : other.entries_) {
      if (contains(e.name)) throw CheckpointError("duplicate checkpoint entry '" + e.name + "'");
      entries_.push_back(e);
    }
  }

  std::vector<std::uint8_t> serialize() const {
    std::vector<std::uint8_t> out(std::begin(kMagic), std::end(kMagic));
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(entries_.size()));
    for (const auto& e : entries_) {
      detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(e.name.size()));
      out.insert(out.end(), e.name.begin(), e.name.end());
      detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(e.shape.size()));
      for (std::size_t d : e.shape) detail::put_le<std::uint64_t>(out, d);
      out.push_back(static_cast<std::uint8_t>(e.dtype));
      out.insert(out.end(), e.payload.begin(), e.payload.end());
    }
    return out;
  }

  static Checkpoint deserialize(const std::vector<std::uint8_t>& blob) {
    std::size_t pos = 0;
    auto need = [&](std::size_t n) {
      if (blob.size() - pos < n) throw CheckpointError("truncated checkpoint blob");
    };
    need(8);
    if (std::memcmp(blob.data(), kMagic, 8) != 0) throw CheckpointError("bad checkpoint magic");
    pos = 8;
    need(4);
    const auto count = detail::get_le<std::uint32_t>(blob.data() + pos);
    pos += 4;
    Checkpoint ck;
    for (std::uint32_t i = 0; i < count; ++i) {
      BlobEntry e;
      need(4);
      const auto name_len = detail::get_le<std::uint32_t>(blob.data() + pos);
      pos += 4;
      need(name_len);
      e.name.assign(reinterpret_cast<const char*>(blob.data() + pos), name_len);
      pos += name_len;
      need(4);
      const auto rank = detail::get_le<std::uint32_t>(blob.data() + pos);
      pos += 4;
      need(8ull * rank);
      for (std::uint32_t r = 0; r < rank; ++r) {
        e.shape.push_back(static_cast<std::size_t>(detail::get_le<std::uint64_t>(blob.data() + pos)));
        pos += 8;
      }
      need(1);
      const std::uint8_t tag = blob[pos++];
      if (tag != 1 && tag != 2) throw CheckpointError("unknown dtype tag " + std::to_string(tag));
      e.dtype = static_cast<DType>(tag);
      const std::size_t bytes = shape_numel(e.shape) * (tag == 1 ? 4 : 8);
      need(bytes);
      e.payload.assign(blob.begin() + static_cast<std::ptrdiff_t>(pos),
                       blob.begin() + static_cast<std::ptrdiff_t>(pos + bytes));
      pos += bytes;
      ck.entries_.push_back(std::move(e));
    }
    if (pos != blob.size()) throw CheckpointError("trailing bytes after checkpoint entries");
    return ck;
  }

  void save(const std::filesystem::path& path) const {
    const auto bytes = serialize();
    std::ofstream os(path, std::ios::binary);
    if (!os) throw CheckpointError("cannot open " + path.string() + " for writing");
    os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!os) throw CheckpointError("write failed: " + path.string());
  }

  static Checkpoint load(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw CheckpointError("cannot open checkpoint " + path.string());
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    return deserialize(bytes);
  }

 private:
  std::vector<BlobEntry> entries_;
};

template <typename T>
void save_params(Checkpoint& ck, const std::vector<NamedParam<T>>& params) {
  for (const auto& p : params) ck.add(p.name, p.param->value);
}

/// Overwrites parameter values from `ck`; shapes must match exactly.
template <typename T>
void load_params(const Checkpoint& ck, const std::vector<NamedParam<T>>& params) {
  for (const auto& p : params) {
    Tensor<T> t = ck.get<T>(p.name);
    if (t.shape() != p.param->value.shape()) {
      throw CheckpointError("shape mismatch for '" + p.name + "': checkpoint " + shape_str(t.shape()) +
                            " vs model " + shape_str(p.param->value.shape()));
    }
    p.param->value = std::move(t);
  }
}

template <typename T>
std::vector<std::uint8_t> serialize_params(const std::vector<NamedParam<T>>& params) {
  Checkpoint ck;
  save_params(ck, params);
  return ck.serialize();
}

}  // namespace ftd
