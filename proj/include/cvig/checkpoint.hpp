#pragma once

#include <algorithm>
#include <bit>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

#include "cvig/model.hpp"
#include "cvig/tensor.hpp"

// Container layout: "CVIGCKPT", u32 version, u64 manifest length, JSON
// manifest [{name, shape, dtype, offset}], then the little-endian payload.

namespace cvig {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class CorruptManifestError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};

class TruncatedPayloadError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};

class ShapeMismatchError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};

inline constexpr char kCheckpointMagic[8] = {'C', 'V', 'I', 'G', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

using AnyTensor = std::variant<Tensor<float>, Tensor<double>>;

inline const Shape& shape_of(const AnyTensor& t) {
  return std::visit([](const auto& x) -> const Shape& { return x.shape(); }, t);
}

inline DType dtype_of_any(const AnyTensor& t) { return t.index() == 0 ? DType::f32 : DType::f64; }

struct CheckpointEntry {
  std::string name;
  AnyTensor tensor;
};

struct Checkpoint {
  std::vector<CheckpointEntry> entries;

  const AnyTensor* find(const std::string& name) const {
    for (const auto& e : entries)
      if (e.name == name) return &e.tensor;
    return nullptr;
  }

  template <class T>
  void add(std::string name, Tensor<T> t) {
    entries.push_back({std::move(name), AnyTensor(std::move(t))});
  }
};

namespace detail {

template <class U>
void put_le(std::string& out, U v) {
  if constexpr (std::endian::native == std::endian::big) {
    unsigned char b[sizeof(U)];
    std::memcpy(b, &v, sizeof(U));
    std::reverse(b, b + sizeof(U));
    std::memcpy(&v, b, sizeof(U));
  }
  out.append(reinterpret_cast<const char*>(&v), sizeof(U));
}

template <class U>
U get_le(const char* p) {
  U v;
  std::memcpy(&v, p, sizeof(U));
  if constexpr (std::endian::native == std::endian::big) {
    unsigned char b[sizeof(U)];
    std::memcpy(b, &v, sizeof(U));
    std::reverse(b, b + sizeof(U));
    std::memcpy(&v, b, sizeof(U));
  }
  return v;
}

}  // namespace detail

inline std::string serialize(const Checkpoint& ck) {
  nlohmann::json manifest = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& e : ck.entries) {
    const Shape& s = shape_of(e.tensor);
    const DType dt = dtype_of_any(e.tensor);
    manifest.push_back({{"name", e.name}, {"shape", s}, {"dtype", dtype_name(dt)}, {"offset", offset}});
    offset += numel(s) * dtype_size(dt);
  }
  const std::string text = manifest.dump();
  std::string out(kCheckpointMagic, sizeof kCheckpointMagic);
  detail::put_le<std::uint32_t>(out, kCheckpointVersion);
  detail::put_le<std::uint64_t>(out, text.size());
  out += text;
  for (const auto& e : ck.entries)
    std::visit([&](const auto& t) {
      for (auto v : t.data()) detail::put_le(out, v);
    }, e.tensor);
  return out;
}

inline Checkpoint parse_checkpoint(const std::string& bytes) {
  constexpr std::size_t header = sizeof kCheckpointMagic + 4 + 8;
  if (bytes.size() < header) throw TruncatedPayloadError("checkpoint header is truncated");
  if (std::memcmp(bytes.data(), kCheckpointMagic, sizeof kCheckpointMagic) != 0)
    throw CheckpointError("not a checkpoint file (bad magic)");
  const auto version = detail::get_le<std::uint32_t>(bytes.data() + 8);
  if (version != kCheckpointVersion) throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
  const auto mlen = detail::get_le<std::uint64_t>(bytes.data() + 12);
  if (mlen > bytes.size() - header) throw TruncatedPayloadError("checkpoint manifest is truncated");

  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(bytes.begin() + header, bytes.begin() + static_cast<std::ptrdiff_t>(header + mlen));
  } catch (const nlohmann::json::exception& e) {
    throw CorruptManifestError(std::string("checkpoint manifest is not valid JSON: ") + e.what());
  }
  if (!manifest.is_array()) throw CorruptManifestError("checkpoint manifest must be a list");

  const std::size_t base = header + mlen;
  const std::size_t payload = bytes.size() - base;
  Checkpoint ck;
  std::uint64_t expected = 0;
  for (const auto& m : manifest) {
    std::string name;
    Shape shape;
    DType dt;
    std::uint64_t offset;
    try {
      name = m.at("name").get<std::string>();
      shape = m.at("shape").get<Shape>();
      dt = parse_dtype(m.at("dtype").get<std::string>());
      offset = m.at("offset").get<std::uint64_t>();
    } catch (const std::exception& e) {
      throw CorruptManifestError(std::string("checkpoint manifest entry is malformed: ") + e.what());
    }
    for (auto d : shape)
      if (d == 0) throw CorruptManifestError("tensor '" + name + "' has a zero extent");
    if (offset != expected)
      throw CorruptManifestError("tensor '" + name + "' has offset " + std::to_string(offset) + ", expected " +
                                 std::to_string(expected));
    const std::uint64_t len = numel(shape) * dtype_size(dt);
    if (offset + len > payload)
      throw TruncatedPayloadError("payload ends before tensor '" + name + "' (" + std::to_string(payload) + " of " +
                                  std::to_string(offset + len) + " bytes)");
    const char* p = bytes.data() + base + offset;
    auto fill = [&](auto tag) {
      using T = decltype(tag);
      Tensor<T> t(shape);
      for (std::size_t i = 0; i < t.size(); ++i) t[i] = detail::get_le<T>(p + i * sizeof(T));
      ck.entries.push_back({name, AnyTensor(std::move(t))});
    };
    if (dt == DType::f32)
      fill(float{});
    else
      fill(double{});
    expected = offset + len;
  }
  if (expected != payload)
    throw CorruptManifestError("payload has " + std::to_string(payload - expected) + " trailing bytes");
  return ck;
}

inline void save_checkpoint(const std::string& path, const Checkpoint& ck) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw CheckpointError("cannot open '" + path + "' for writing");
  const std::string bytes = serialize(ck);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw CheckpointError("failed writing '" + path + "'");
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open '" + path + "'");
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return parse_checkpoint(bytes);
}

template <class T>
Checkpoint to_checkpoint(const Model<T>& model) {
  Checkpoint ck;
  for (const auto& e : model.params.entries()) ck.add(e.spec.name, e.var->value);
  return ck;
}

/// Rebuilds a model; every tensor the config declares must be present with
/// the declared shape. Values stored in the other dtype are converted.
template <class T>
Model<T> model_from_checkpoint(const Checkpoint& ck, const ModelConfig& config) {
  validate(config, true);
  Model<T> model{config, {}};
  for (const auto& spec : model_layout(config)) {
    const AnyTensor* t = ck.find(spec.name);
    if (!t) throw ShapeMismatchError("checkpoint lacks tensor '" + spec.name + "' required by config '" + config.name + "'");
    if (shape_of(*t) != spec.shape)
      throw ShapeMismatchError("tensor '" + spec.name + "' has shape " + to_string(shape_of(*t)) + " but config '" +
                               config.name + "' expects " + to_string(spec.shape));
    model.params.add(spec, std::visit([](const auto& x) { return x.template cast<T>(); }, *t));
  }
  return model;
}

}  // namespace cvig
