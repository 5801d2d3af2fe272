#pragma once

// HVWT: named-tensor weight file.
//
//   magic "HVWT" | u32 version (1) | u32 tensor count
//   per tensor: u32 name length | UTF-8 name | u8 dtype | u8 rank |
//               u64 dims[rank] | little-endian payload
//
// dtype 0 = f32, 1 = f64. All integers are little-endian.

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>
#include <string>
#include <type_traits>
#include <unordered_map>
#include <vector>

#include "histovit/error.hpp"
#include "histovit/tensor.hpp"
#include "histovit/vit.hpp"

namespace histovit {

enum class DType : std::uint8_t { f32 = 0, f64 = 1 };

inline std::size_t dtype_size(DType d) { return d == DType::f32 ? 4 : 8; }
inline const char* dtype_name(DType d) { return d == DType::f32 ? "f32" : "f64"; }

template <typename T>
constexpr DType dtype_of() {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
  return std::is_same_v<T, float> ? DType::f32 : DType::f64;
}

/// One tensor record as stored on disk; the payload is kept as raw bytes.
struct HvwtRecord {
  std::string name;
  DType dtype = DType::f32;
  Shape shape;
  std::vector<std::uint8_t> payload;

  template <typename T>
  Tensor<T> to_tensor() const {
    const std::size_t n = shape_size(shape);
    std::vector<T> out(n);
    for (std::size_t i = 0; i < n; ++i) {
      const std::uint8_t* p = payload.data() + i * dtype_size(dtype);
      if (dtype == DType::f32) {
        std::uint32_t bits = 0;
        for (int b = 3; b >= 0; --b) bits = (bits << 8) | p[b];
        out[i] = static_cast<T>(std::bit_cast<float>(bits));
      } else {
        std::uint64_t bits = 0;
        for (int b = 7; b >= 0; --b) bits = (bits << 8) | p[b];
        out[i] = static_cast<T>(std::bit_cast<double>(bits));
      }
    }
    return Tensor<T>(shape, std::move(out));
  }

  template <typename T>
  static HvwtRecord from_tensor(std::string name, const Tensor<T>& t) {
    HvwtRecord r;
    r.name = std::move(name);
    r.dtype = dtype_of<T>();
    r.shape = t.shape();
    r.payload.resize(t.size() * sizeof(T));
    for (std::size_t i = 0; i < t.size(); ++i) {
      std::uint8_t* p = r.payload.data() + i * sizeof(T);
      if constexpr (std::is_same_v<T, float>) {
        std::uint32_t bits = std::bit_cast<std::uint32_t>(t[i]);
        for (int b = 0; b < 4; ++b, bits >>= 8) p[b] = static_cast<std::uint8_t>(bits & 0xff);
      } else {
        std::uint64_t bits = std::bit_cast<std::uint64_t>(t[i]);
        for (int b = 0; b < 8; ++b, bits >>= 8) p[b] = static_cast<std::uint8_t>(bits & 0xff);
      }
    }
    return r;
  }
};

namespace detail {

template <typename U>
void put_le(std::ostream& os, U value) {
  std::array<char, sizeof(U)> buf{};
  auto v = static_cast<std::uint64_t>(value);
  for (std::size_t i = 0; i < sizeof(U); ++i, v >>= 8) buf[i] = static_cast<char>(v & 0xff);
  os.write(buf.data(), sizeof(U));
}

template <typename U>
U get_le(std::istream& is, const std::string& what) {
  std::array<unsigned char, sizeof(U)> buf{};
  if (!is.read(reinterpret_cast<char*>(buf.data()), sizeof(U))) throw FormatError("HVWT: truncated file while reading " + what);
  std::uint64_t v = 0;
  for (std::size_t i = sizeof(U); i-- > 0;) v = (v << 8) | buf[i];
  return static_cast<U>(v);
}

}  // namespace detail

inline constexpr std::uint32_t kHvwtVersion = 1;

inline void write_hvwt(std::ostream& os, const std::vector<HvwtRecord>& records) {
  os.write("HVWT", 4);
  detail::put_le<std::uint32_t>(os, kHvwtVersion);
  detail::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(records.size()));
  for (const auto& r : records) {
    detail::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(r.name.size()));
    os.write(r.name.data(), static_cast<std::streamsize>(r.name.size()));
    detail::put_le<std::uint8_t>(os, static_cast<std::uint8_t>(r.dtype));
    detail::put_le<std::uint8_t>(os, static_cast<std::uint8_t>(r.shape.size()));
    for (std::size_t d : r.shape) detail::put_le<std::uint64_t>(os, d);
    os.write(reinterpret_cast<const char*>(r.payload.data()), static_cast<std::streamsize>(r.payload.size()));
  }
}

inline std::vector<HvwtRecord> read_hvwt(std::istream& is) {
  char magic[4] = {};
  if (!is.read(magic, 4) || std::memcmp(magic, "HVWT", 4) != 0) throw FormatError("HVWT: bad magic");
  const auto version = detail::get_le<std::uint32_t>(is, "version");
  if (version != kHvwtVersion) throw FormatError("HVWT: unsupported version " + std::to_string(version));
  const auto count = detail::get_le<std::uint32_t>(is, "tensor count");
  std::vector<HvwtRecord> out;
  std::set<std::string> seen;
  for (std::uint32_t i = 0; i < count; ++i) {
    HvwtRecord r;
    const auto len = detail::get_le<std::uint32_t>(is, "name length of entry " + std::to_string(i));
    if (len > (1u << 16)) throw FormatError("HVWT: implausible name length in entry " + std::to_string(i));
    r.name.resize(len);
    if (!is.read(r.name.data(), len)) throw FormatError("HVWT: truncated name in entry " + std::to_string(i));
    const auto dt = detail::get_le<std::uint8_t>(is, "dtype of '" + r.name + "'");
    if (dt > 1) throw FormatError("HVWT: unknown dtype code " + std::to_string(dt) + " for '" + r.name + "'");
    r.dtype = static_cast<DType>(dt);
    const auto rank = detail::get_le<std::uint8_t>(is, "rank of '" + r.name + "'");
    for (std::uint8_t k = 0; k < rank; ++k) r.shape.push_back(detail::get_le<std::uint64_t>(is, "dims of '" + r.name + "'"));
    r.payload.resize(shape_size(r.shape) * dtype_size(r.dtype));
    if (!is.read(reinterpret_cast<char*>(r.payload.data()), static_cast<std::streamsize>(r.payload.size()))) {
      throw FormatError("HVWT: truncated payload for '" + r.name + "'");
    }
    if (!seen.insert(r.name).second) throw FormatError("HVWT: duplicate tensor '" + r.name + "'");
    out.push_back(std::move(r));
  }
  if (is.peek() != std::char_traits<char>::eof()) throw FormatError("HVWT: trailing bytes after the last tensor");
  return out;
}

inline std::vector<HvwtRecord> read_hvwt_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open weight file " + path.string());
  return read_hvwt(in);
}

inline void write_hvwt_file(const std::filesystem::path& path, const std::vector<HvwtRecord>& records) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write weight file " + path.string());
  write_hvwt(out, records);
  if (!out) throw IoError("write failed for " + path.string());
}

template <typename T>
std::vector<HvwtRecord> to_records(const VitModel<T>& model) {
  std::vector<HvwtRecord> out;
  for (const auto& p : model.parameters()) out.push_back(HvwtRecord::from_tensor(p.name, p.value));
  return out;
}

template <typename T>
void save_weights(const VitModel<T>& model, std::ostream& os) {
  write_hvwt(os, to_records(model));
}

template <typename T>
void save_weights(const VitModel<T>& model, const std::filesystem::path& path) {
  write_hvwt_file(path, to_records(model));
}

enum class LoadPolicy {
  strict,             // every model tensor present, nothing unexpected
  backbone_only_ok,  // head tensors may be absent; they are initialised from `head_seed`
};

struct LoadReport {
  std::vector<std::string> missing;
  std::vector<std::string> unexpected;
};

/// Builds a model for `config` from HVWT records, validating every name and
/// shape. Errors name the offending tensor.
template <typename T>
VitModel<T> load_weights(const std::vector<HvwtRecord>& records, const VitConfig& config,
                         LoadPolicy policy = LoadPolicy::strict, std::uint64_t head_seed = 0,
                         LoadReport* report = nullptr) {
  VitModel<T> model(config);
  std::unordered_map<std::string, const HvwtRecord*> by_name;
  LoadReport rep;
  for (const auto& r : records) {
    if (!model.contains(r.name)) {
      rep.unexpected.push_back(r.name);
      continue;
    }
    by_name.emplace(r.name, &r);
  }
  if (!rep.unexpected.empty()) throw FormatError("HVWT: unexpected tensor '" + rep.unexpected.front() + "'");
  bool head_missing = false;
  for (std::size_t i = 0; i < model.parameters().size(); ++i) {
    auto& p = model.parameters()[i];
    auto it = by_name.find(p.name);
    if (it == by_name.end()) {
      rep.missing.push_back(p.name);
      if (policy == LoadPolicy::backbone_only_ok && model.is_head(i)) {
        head_missing = true;
        continue;
      }
      throw FormatError("HVWT: missing tensor '" + p.name + "'");
    }
    const HvwtRecord& r = *it->second;
    if (r.shape != p.value.shape()) {
      throw FormatError("HVWT: tensor '" + p.name + "' has shape " + shape_str(r.shape) + ", expected " +
                        shape_str(p.value.shape()));
    }
    p.value = r.to_tensor<T>();
  }
  if (head_missing) {
    // Keep the loaded head tensors if only some were absent; re-initialise the rest.
    VitModel<T> fresh(config);
    fresh.initialize_head(head_seed);
    for (const auto& name : rep.missing) model.parameter(name).value = fresh.parameter(name).value;
  }
  if (report) *report = rep;
  return model;
}

template <typename T>
VitModel<T> load_weights(const std::filesystem::path& path, const VitConfig& config,
                         LoadPolicy policy = LoadPolicy::strict, std::uint64_t head_seed = 0,
                         LoadReport* report = nullptr) {
  return load_weights<T>(read_hvwt_file(path), config, policy, head_seed, report);
}

/// Copies values from `src` into `dst` (same layout); frozen flags of `dst` are kept.
template <typename T>
void copy_weights(const VitModel<T>& src, VitModel<T>& dst) {
  auto& d = dst.parameters();
  const auto& s = src.parameters();
  if (d.size() != s.size()) throw ContractError("copy_weights: models have different layouts");
  for (std::size_t i = 0; i < d.size(); ++i) d[i].value = s[i].value;
}

}  // namespace histovit
