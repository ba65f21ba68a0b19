#pragma once

// Binary dump format (.shpk) carrying the tensors a post-hoc scoring rule
// needs: logits, per-layer features, labels and the classifier head.
//
// Layout (all integers little-endian):
//   bytes 0..3    "SHPK"
//   bytes 4..7    u32 format version (1)
//   bytes 8..15   u64 header byte length
//   header        UTF-8 JSON index: role, class_count, metadata, and one
//                 {name, dtype, shape, offset} record per tensor
//   payloads      row-major little-endian data at the absolute offsets
//                 named in the header

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <iterator>
#include <limits>
#include <map>
#include <optional>
#include <ostream>
#include <set>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "json.hpp"
#include "shiftlab/error.hpp"
#include "shiftlab/matrix.hpp"

namespace shiftlab {

inline constexpr std::uint32_t kPackVersion = 1;
inline constexpr char kPackMagic[4] = {'S', 'H', 'P', 'K'};

enum class DType { float32, int64 };

enum class Role { id_train, id_test, ood_test, covariate_test, aux_train };

inline std::string_view to_string(DType d) { return d == DType::float32 ? "float32" : "int64"; }

inline std::string_view to_string(Role r) {
  switch (r) {
    case Role::id_train: return "id_train";
    case Role::id_test: return "id_test";
    case Role::ood_test: return "ood_test";
    case Role::covariate_test: return "covariate_test";
    case Role::aux_train: return "aux_train";
  }
  return "id_test";
}

inline std::optional<Role> parse_role(std::string_view s) {
  for (Role r : {Role::id_train, Role::id_test, Role::ood_test, Role::covariate_test, Role::aux_train}) {
    if (to_string(r) == s) return r;
  }
  return std::nullopt;
}

enum class PackErrc { bad_magic, unsupported_version, truncated, malformed_header, non_finite, validation, io };

class PackError : public DataError {
 public:
  PackError(PackErrc kind, const std::string& what) : DataError(what), kind_(kind) {}
  PackErrc kind() const noexcept { return kind_; }

 private:
  PackErrc kind_;
};

struct TensorRecord {
  std::string name;
  std::vector<std::uint64_t> shape;
  std::variant<std::vector<float>, std::vector<std::int64_t>> payload;
  std::uint64_t offset = 0;  // absolute file offset; filled by read/write

  DType dtype() const noexcept { return payload.index() == 0 ? DType::float32 : DType::int64; }
  std::size_t element_size() const noexcept { return dtype() == DType::float32 ? 4 : 8; }

  std::uint64_t element_count() const {
    std::uint64_t n = 1;
    for (auto e : shape) {
      if (e != 0 && n > std::numeric_limits<std::uint64_t>::max() / e) {
        throw PackError(PackErrc::malformed_header, "tensor '" + name + "': shape overflows");
      }
      n *= e;
    }
    return n;
  }

  std::size_t payload_count() const {
    return std::visit([](const auto& v) { return v.size(); }, payload);
  }

  const std::vector<float>& floats() const { return std::get<std::vector<float>>(payload); }
  const std::vector<std::int64_t>& ints() const { return std::get<std::vector<std::int64_t>>(payload); }

  /// Identity of index entry and payload bits. Offsets are a property of a
  /// particular file and are not compared.
  friend bool operator==(const TensorRecord& a, const TensorRecord& b) {
    if (a.name != b.name || a.shape != b.shape || a.dtype() != b.dtype()) return false;
    if (a.dtype() == DType::int64) return a.ints() == b.ints();
    const auto& fa = a.floats();
    const auto& fb = b.floats();
    return fa.size() == fb.size() && (fa.empty() || std::memcmp(fa.data(), fb.data(), fa.size() * 4) == 0);
  }
};

inline TensorRecord make_float_tensor(std::string name, std::vector<std::uint64_t> shape, std::vector<float> data) {
  return TensorRecord{std::move(name), std::move(shape), std::move(data), 0};
}

inline TensorRecord make_int_tensor(std::string name, std::vector<std::uint64_t> shape, std::vector<std::int64_t> data) {
  return TensorRecord{std::move(name), std::move(shape), std::move(data), 0};
}

inline TensorRecord make_float_tensor(std::string name, const MatrixD& m) {
  std::vector<float> data(m.size());
  for (std::size_t i = 0; i < m.size(); ++i) data[i] = static_cast<float>(m.data()[i]);
  return make_float_tensor(std::move(name), {m.rows(), m.cols()}, std::move(data));
}

struct ShiftPack {
  std::uint32_t version = kPackVersion;
  Role role = Role::id_test;
  std::uint64_t class_count = 0;
  std::vector<TensorRecord> tensors;
  std::map<std::string, std::string> metadata;

  const TensorRecord* find(std::string_view name) const {
    for (const auto& t : tensors) {
      if (t.name == name) return &t;
    }
    return nullptr;
  }

  bool has(std::string_view name) const { return find(name) != nullptr; }

  const TensorRecord& at(std::string_view name) const {
    if (const auto* t = find(name)) return *t;
    throw DataError("pack has no tensor '" + std::string(name) + "'");
  }

  /// Adds or replaces a tensor.
  void put(TensorRecord t) {
    for (auto& existing : tensors) {
      if (existing.name == t.name) {
        existing = std::move(t);
        return;
      }
    }
    tensors.push_back(std::move(t));
  }

  /// A float tensor of rank 1 or 2 widened to double. Rank-1 tensors become
  /// a single column.
  MatrixD matrix(std::string_view name) const {
    const auto& t = at(name);
    if (t.dtype() != DType::float32) throw DataError("tensor '" + t.name + "' is not float32");
    if (t.shape.empty() || t.shape.size() > 2) throw DataError("tensor '" + t.name + "' is not rank 1 or 2");
    const std::size_t rows = t.shape[0];
    const std::size_t cols = t.shape.size() == 2 ? t.shape[1] : 1;
    const auto& f = t.floats();
    return MatrixD(rows, cols, std::vector<double>(f.begin(), f.end()));
  }

  std::vector<std::int64_t> labels() const {
    const auto& t = at("labels");
    if (t.dtype() != DType::int64) throw DataError("labels tensor is not int64");
    return t.ints();
  }

  /// Number of samples (leading extent of any per-sample tensor), if known.
  std::optional<std::uint64_t> sample_count() const {
    for (const auto& t : tensors) {
      if (t.name == "logits" || t.name == "labels" || t.name == "perturbed_logits" || t.name.starts_with("features/")) {
        if (!t.shape.empty()) return t.shape[0];
      }
    }
    return std::nullopt;
  }

  std::vector<std::string> feature_names() const {
    std::vector<std::string> out;
    for (const auto& t : tensors) {
      if (t.name.starts_with("features/")) out.push_back(t.name);
    }
    return out;
  }

  /// The features feeding the classifier head: metadata "penultimate" when
  /// it names a feature tensor, else the last "features/*" tensor (in pack
  /// order) whose width matches fc.weight, else the last feature tensor.
  std::optional<std::string> penultimate_name() const {
    if (auto it = metadata.find("penultimate"); it != metadata.end()) {
      if (const auto* t = find(it->second); t && t->name.starts_with("features/")) return t->name;
    }
    const auto names = feature_names();
    if (names.empty()) return std::nullopt;
    if (const auto* w = find("fc.weight"); w && w->shape.size() == 2) {
      for (auto it = names.rbegin(); it != names.rend(); ++it) {
        const auto& s = at(*it).shape;
        if (s.size() == 2 && s[1] == w->shape[1]) return *it;
      }
    }
    return names.back();
  }

  MatrixD penultimate() const {
    auto name = penultimate_name();
    if (!name) throw DataError("pack has no features/* tensor");
    return matrix(*name);
  }

  friend bool operator==(const ShiftPack&, const ShiftPack&) = default;
};

/// One human-readable message per broken invariant; empty when valid.
inline std::vector<std::string> validate_pack(const ShiftPack& pack) {
  std::vector<std::string> out;
  std::set<std::string> seen;
  for (const auto& t : pack.tensors) {
    if (!seen.insert(t.name).second) out.push_back("duplicate tensor name '" + t.name + "'");
  }
  if (pack.version != kPackVersion) out.push_back("unsupported version " + std::to_string(pack.version));

  const auto C = pack.class_count;
  std::optional<std::uint64_t> n_samples;
  auto check_rows = [&](const TensorRecord& t) {
    if (t.shape.empty()) return;
    if (!n_samples) {
      n_samples = t.shape[0];
    } else if (*n_samples != t.shape[0]) {
      out.push_back("tensor '" + t.name + "' has leading extent " + std::to_string(t.shape[0]) + ", expected " +
                    std::to_string(*n_samples));
    }
  };

  for (const auto& t : pack.tensors) {
    std::uint64_t expected = 0;
    try {
      expected = t.element_count();
    } catch (const PackError& e) {
      out.push_back(e.what());
      continue;
    }
    if (expected != t.payload_count()) {
      out.push_back("tensor '" + t.name + "' payload has " + std::to_string(t.payload_count()) +
                    " elements, shape implies " + std::to_string(expected));
      continue;
    }
    if (t.dtype() == DType::float32) {
      for (float v : t.floats()) {
        if (!std::isfinite(v)) {
          out.push_back("tensor '" + t.name + "' contains a non-finite value");
          break;
        }
      }
    }

    const bool per_sample =
        t.name == "logits" || t.name == "perturbed_logits" || t.name == "labels" || t.name.starts_with("features/");
    if (t.name == "labels") {
      if (t.dtype() != DType::int64 || t.shape.size() != 1) {
        out.push_back("tensor 'labels' must be int64 with shape [N]");
      } else {
        for (auto v : t.ints()) {
          if (v < -1 || (v >= 0 && static_cast<std::uint64_t>(v) >= C)) {
            out.push_back("tensor 'labels' has value " + std::to_string(v) + " outside {-1} U [0, " +
                          std::to_string(C) + ")");
            break;
          }
        }
      }
    } else if (t.dtype() != DType::float32) {
      out.push_back("tensor '" + t.name + "' must be float32");
    }
    if (t.name == "logits" || t.name == "perturbed_logits") {
      if (t.shape.size() != 2 || t.shape[1] != C) {
        out.push_back("tensor '" + t.name + "' must have shape [N, " + std::to_string(C) + "]");
      }
    }
    if (t.name.starts_with("features/") && t.shape.size() != 2) {
      out.push_back("tensor '" + t.name + "' must have shape [N, D]");
    }
    if (per_sample) check_rows(t);
  }

  if (const auto* w = pack.find("fc.weight")) {
    if (w->shape.size() != 2 || w->shape[0] != C) {
      out.push_back("tensor 'fc.weight' must have shape [" + std::to_string(C) + ", D]");
    } else {
      const auto names = pack.feature_names();
      bool matched = names.empty();
      for (const auto& n : names) {
        const auto& s = pack.at(n).shape;
        if (s.size() == 2 && s[1] == w->shape[1]) matched = true;
      }
      if (!matched) out.push_back("tensor 'fc.weight' width matches no features/* tensor");
    }
  }
  if (const auto* b = pack.find("fc.bias")) {
    if (b->shape.size() != 1 || b->shape[0] != C) {
      out.push_back("tensor 'fc.bias' must have shape [" + std::to_string(C) + "]");
    }
  }
  return out;
}

namespace detail {

template <typename T>
void append_le(std::string& buf, T value) {
  static_assert(std::is_trivially_copyable_v<T>);
  unsigned char bytes[sizeof(T)];
  std::memcpy(bytes, &value, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
  buf.append(reinterpret_cast<const char*>(bytes), sizeof(T));
}

template <typename T>
T load_le(const char* p) {
  unsigned char bytes[sizeof(T)];
  std::memcpy(bytes, p, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
  T v;
  std::memcpy(&v, bytes, sizeof(T));
  return v;
}

inline std::string pack_header(const ShiftPack& pack, std::uint64_t payload_base) {
  nlohmann::json h;
  h["role"] = std::string(to_string(pack.role));
  h["class_count"] = pack.class_count;
  h["metadata"] = pack.metadata;
  auto records = nlohmann::json::array();
  std::uint64_t offset = payload_base;
  for (const auto& t : pack.tensors) {
    records.push_back({{"name", t.name}, {"dtype", std::string(to_string(t.dtype()))}, {"shape", t.shape},
                       {"offset", offset}});
    offset += t.payload_count() * t.element_size();
  }
  h["tensors"] = std::move(records);
  return h.dump();
}

}  // namespace detail

/// Serializes a valid pack. Invariants are checked before any byte is
/// written.
inline std::string encode_pack(const ShiftPack& pack) {
  if (auto v = validate_pack(pack); !v.empty()) {
    throw PackError(PackErrc::validation, "invalid pack: " + v.front());
  }
  // Header length and the offsets it contains depend on each other; the
  // length is non-decreasing in the base offset, so this settles quickly.
  std::string header;
  std::uint64_t header_len = 0;
  for (;;) {
    header = detail::pack_header(pack, 16 + header_len);
    if (header.size() == header_len) break;
    header_len = header.size();
  }

  std::string buf;
  buf.append(kPackMagic, 4);
  detail::append_le<std::uint32_t>(buf, pack.version);
  detail::append_le<std::uint64_t>(buf, header.size());
  buf += header;
  for (const auto& t : pack.tensors) {
    if (t.dtype() == DType::float32) {
      for (float v : t.floats()) detail::append_le(buf, v);
    } else {
      for (auto v : t.ints()) detail::append_le(buf, v);
    }
  }
  return buf;
}

inline void write_pack(const ShiftPack& pack, std::ostream& out) {
  const auto bytes = encode_pack(pack);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw PackError(PackErrc::io, "failed writing pack");
}

inline void write_pack_file(const ShiftPack& pack, const std::string& path) {
  const auto bytes = encode_pack(pack);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("failed writing '" + path + "'");
}

inline ShiftPack decode_pack(std::string_view bytes) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kPackMagic, 4) != 0) {
    throw PackError(PackErrc::bad_magic, "not a shift pack (bad magic)");
  }
  if (bytes.size() < 16) throw PackError(PackErrc::truncated, "truncated pack preamble");
  ShiftPack pack;
  pack.version = detail::load_le<std::uint32_t>(bytes.data() + 4);
  if (pack.version == 0 || pack.version > kPackVersion) {
    throw PackError(PackErrc::unsupported_version, "unsupported pack version " + std::to_string(pack.version));
  }
  const auto header_len = detail::load_le<std::uint64_t>(bytes.data() + 8);
  if (header_len > bytes.size() - 16) throw PackError(PackErrc::truncated, "truncated pack header");

  nlohmann::json h;
  try {
    h = nlohmann::json::parse(bytes.substr(16, header_len));
    auto role = parse_role(h.at("role").get<std::string>());
    if (!role) throw PackError(PackErrc::malformed_header, "unknown role '" + h.at("role").get<std::string>() + "'");
    pack.role = *role;
    pack.class_count = h.at("class_count").get<std::uint64_t>();
    if (h.contains("metadata")) pack.metadata = h["metadata"].get<std::map<std::string, std::string>>();
    for (const auto& rec : h.at("tensors")) {
      TensorRecord t;
      t.name = rec.at("name").get<std::string>();
      t.shape = rec.at("shape").get<std::vector<std::uint64_t>>();
      t.offset = rec.at("offset").get<std::uint64_t>();
      const auto dtype = rec.at("dtype").get<std::string>();
      if (dtype != "float32" && dtype != "int64") {
        throw PackError(PackErrc::malformed_header, "tensor '" + t.name + "' has unknown dtype '" + dtype + "'");
      }
      const std::uint64_t count = t.element_count();
      const std::uint64_t esize = dtype == "float32" ? 4 : 8;
      if (count > std::numeric_limits<std::uint64_t>::max() / esize) {
        throw PackError(PackErrc::malformed_header, "tensor '" + t.name + "' is too large");
      }
      const std::uint64_t nbytes = count * esize;
      if (t.offset > bytes.size() || nbytes > bytes.size() - t.offset) {
        throw PackError(PackErrc::truncated, "tensor '" + t.name + "' payload truncated: declared " +
                                                 std::to_string(nbytes) + " bytes at offset " +
                                                 std::to_string(t.offset) + ", file has " +
                                                 std::to_string(bytes.size()) + " bytes");
      }
      const char* p = bytes.data() + t.offset;
      if (dtype == "float32") {
        std::vector<float> v(count);
        for (std::uint64_t i = 0; i < count; ++i) {
          v[i] = detail::load_le<float>(p + 4 * i);
          if (!std::isfinite(v[i])) {
            throw PackError(PackErrc::non_finite, "tensor '" + t.name + "' contains a non-finite value at element " +
                                                      std::to_string(i));
          }
        }
        t.payload = std::move(v);
      } else {
        std::vector<std::int64_t> v(count);
        for (std::uint64_t i = 0; i < count; ++i) v[i] = detail::load_le<std::int64_t>(p + 8 * i);
        t.payload = std::move(v);
      }
      pack.tensors.push_back(std::move(t));
    }
  } catch (const nlohmann::json::exception& e) {
    throw PackError(PackErrc::malformed_header, std::string("malformed pack header: ") + e.what());
  }

  if (auto v = validate_pack(pack); !v.empty()) {
    throw PackError(PackErrc::validation, "invalid pack: " + v.front());
  }
  return pack;
}

inline ShiftPack read_pack(std::istream& in) {
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (in.bad()) throw PackError(PackErrc::io, "failed reading pack stream");
  return decode_pack(bytes);
}

inline ShiftPack read_pack_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path + "'");
  return read_pack(in);
}

}  // namespace shiftlab
