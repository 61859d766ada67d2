#pragma once

// Bit-exact model serialization.
//
// File layout (all integers and floats little-endian):
//   magic "FSTN"
//   u32 format version (currently 1)
//   u64 architecture fingerprint
//   u32 tensor count
//   per tensor: u16 name length, UTF-8 name, u8 rank, u32 extent per axis,
//               IEEE-754 binary32 payload in row-major order
//   u32 CRC-32 (polynomial 0xEDB88320, init 0xFFFFFFFF, final xor
//               0xFFFFFFFF) over everything after the magic
//
// Tensors are written in a canonical order (input stats, then per layer
// bn.gamma, bn.beta, bn.running_mean, bn.running_var, conv.weight,
// conv.bias), so saving the same model twice yields identical bytes.
// Adam moments are not part of the format; the deploy artifact carries
// only what inference needs.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "fastnet/bytes.hpp"
#include "fastnet/network.hpp"

namespace fastnet {

namespace detail {

inline std::uint32_t crc32(const std::uint8_t* data, std::size_t len) {
  static const auto table = [] {
    std::array<std::uint32_t, 256> t{};
    for (std::uint32_t i = 0; i < 256; ++i) {
      std::uint32_t c = i;
      for (int k = 0; k < 8; ++k) c = (c >> 1) ^ (0xEDB88320u & (0u - (c & 1u)));
      t[i] = c;
    }
    return t;
  }();
  std::uint32_t crc = 0xFFFFFFFFu;
  for (std::size_t i = 0; i < len; ++i) crc = (crc >> 8) ^ table[(crc ^ data[i]) & 0xFFu];
  return crc ^ 0xFFFFFFFFu;
}

inline void put_u16(std::vector<std::uint8_t>& out, std::uint16_t v) {
  out.push_back(static_cast<std::uint8_t>(v & 0xFF));
  out.push_back(static_cast<std::uint8_t>(v >> 8));
}

inline void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>((v >> (8 * i)) & 0xFF));
}

inline void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>((v >> (8 * i)) & 0xFF));
}

struct ByteReader {
  const std::uint8_t* p;
  std::size_t remaining;

  void need(std::size_t n) const {
    if (remaining < n) fail(ErrorCode::bad_layout, "model file: truncated");
  }
  std::uint16_t u16() {
    need(2);
    const std::uint16_t v = static_cast<std::uint16_t>(p[0] | (p[1] << 8));
    p += 2;
    remaining -= 2;
    return v;
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(p[i]) << (8 * i);
    p += 4;
    remaining -= 4;
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
    p += 8;
    remaining -= 8;
    return v;
  }
  std::uint8_t u8() {
    need(1);
    --remaining;
    return *p++;
  }
};

// Canonical (name, tensor pointer) listing; shared by save and load so the
// two sides cannot drift apart.
template <typename T>
std::vector<std::pair<std::string, Tensor<T>*>> named_tensors(ModelState<T>& model) {
  std::vector<std::pair<std::string, Tensor<T>*>> out;
  out.emplace_back("input.mean", &model.input_mean);
  out.emplace_back("input.std", &model.input_std);
  for (std::size_t li = 0; li < model.layers.size(); ++li) {
    char prefix[16];
    std::snprintf(prefix, sizeof(prefix), "layer%02d", static_cast<int>(li));
    auto& layer = model.layers[li];
    if (layer.bn.has_value()) {
      out.emplace_back(std::string(prefix) + ".bn.gamma", &layer.bn->gamma);
      out.emplace_back(std::string(prefix) + ".bn.beta", &layer.bn->beta);
      out.emplace_back(std::string(prefix) + ".bn.running_mean", &layer.bn->running_mean);
      out.emplace_back(std::string(prefix) + ".bn.running_var", &layer.bn->running_var);
    }
    out.emplace_back(std::string(prefix) + ".conv.weight", &layer.conv.weight);
    if (layer.conv.has_bias()) out.emplace_back(std::string(prefix) + ".conv.bias", &layer.conv.bias);
  }
  return out;
}

}  // namespace detail

constexpr std::uint32_t kModelFormatVersion = 1;

inline std::vector<std::uint8_t> save_model(const ModelState<float>& model) {
  auto& mutable_model = const_cast<ModelState<float>&>(model);  // read-only traversal
  const auto tensors = detail::named_tensors(mutable_model);
  std::vector<std::uint8_t> out;
  out.reserve(64);
  out.insert(out.end(), {'F', 'S', 'T', 'N'});
  detail::put_u32(out, kModelFormatVersion);
  detail::put_u64(out, model.spec.fingerprint());
  detail::put_u32(out, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, tensor] : tensors) {
    tensor->check_finite("model tensor " + name);
    detail::put_u16(out, static_cast<std::uint16_t>(name.size()));
    out.insert(out.end(), name.begin(), name.end());
    out.push_back(static_cast<std::uint8_t>(tensor->rank()));
    for (int a = 0; a < tensor->rank(); ++a)
      detail::put_u32(out, static_cast<std::uint32_t>(tensor->extent(a)));
    for (std::size_t i = 0; i < tensor->size(); ++i)
      detail::put_u32(out, std::bit_cast<std::uint32_t>((*tensor)[i]));
  }
  detail::put_u32(out, detail::crc32(out.data() + 4, out.size() - 4));
  return out;
}

inline std::size_t save_model_file(const ModelState<float>& model, const std::filesystem::path& path) {
  const auto bytes = save_model(model);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorCode::io_error, "cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) fail(ErrorCode::io_error, "write failed for " + path.string());
  return bytes.size();
}

// Parse and validate a model file against the expected architecture.
// Distinct failures raise distinct error codes: bad_magic, bad_version,
// bad_crc, fingerprint_mismatch, bad_layout (structure/extent/payload),
// non_finite (values).
inline ModelState<float> load_model(const std::uint8_t* data, std::size_t len, const ArchitectureSpec& expected) {
  if (len < 4 || std::memcmp(data, "FSTN", 4) != 0) fail(ErrorCode::bad_magic, "model file: bad magic");
  if (len < 24) fail(ErrorCode::bad_layout, "model file: truncated");
  std::uint32_t stored_crc = 0;
  for (int i = 0; i < 4; ++i) stored_crc |= static_cast<std::uint32_t>(data[len - 4 + i]) << (8 * i);
  if (detail::crc32(data + 4, len - 8) != stored_crc) fail(ErrorCode::bad_crc, "model file: CRC mismatch");

  detail::ByteReader r{data + 4, len - 8};
  const std::uint32_t version = r.u32();
  if (version != kModelFormatVersion)
    fail(ErrorCode::bad_version, "model file: unsupported format version " + std::to_string(version));
  const std::uint64_t fingerprint = r.u64();
  if (fingerprint != expected.fingerprint())
    fail(ErrorCode::fingerprint_mismatch, "model file: architecture fingerprint mismatch");
  const std::uint32_t count = r.u32();

  std::map<std::string, TensorF> loaded;
  for (std::uint32_t t = 0; t < count; ++t) {
    const std::uint16_t name_len = r.u16();
    r.need(name_len);
    std::string name(reinterpret_cast<const char*>(r.p), name_len);
    r.p += name_len;
    r.remaining -= name_len;
    const std::uint8_t rank = r.u8();
    if (rank < 1 || rank > 4) fail(ErrorCode::bad_layout, "model file: bad rank for " + name);
    Shape shape;
    shape.rank = rank;
    std::size_t total = 1;
    for (int a = 0; a < rank; ++a) {
      const std::uint32_t e = r.u32();
      if (e == 0 || e > (1u << 28)) fail(ErrorCode::bad_layout, "model file: bad extent for " + name);
      shape.dims[static_cast<std::size_t>(a)] = static_cast<int>(e);
      total *= e;
    }
    r.need(total * 4);
    TensorF tensor(shape);
    for (std::size_t i = 0; i < total; ++i) {
      std::uint32_t bits = 0;
      for (int b = 0; b < 4; ++b) bits |= static_cast<std::uint32_t>(r.p[4 * i + b]) << (8 * b);
      tensor[i] = std::bit_cast<float>(bits);
    }
    r.p += total * 4;
    r.remaining -= total * 4;
    if (!loaded.emplace(std::move(name), std::move(tensor)).second)
      fail(ErrorCode::bad_layout, "model file: duplicate tensor name");
  }
  if (r.remaining != 0) fail(ErrorCode::bad_layout, "model file: trailing bytes");

  // Materialize the expected layout and fill it by name.
  ModelState<float> model;
  model.spec = expected;
  for (const auto& def : expected.layers()) {
    LayerState<float> layer;
    if (def.has_bn) layer.bn = BatchNormParams<float>::make(def.in_channels);
    layer.conv.weight = TensorF::zeros({def.out_channels, def.in_channels, def.kernel, def.kernel});
    if (expected.conv_bias) layer.conv.bias = TensorF::zeros({def.out_channels});
    layer.conv.padding = def.kernel == 3 ? 1 : 0;
    model.layers.push_back(std::move(layer));
  }
  model.input_mean = TensorF::zeros({expected.input_channels});
  model.input_std = TensorF::full({expected.input_channels}, 1.f);

  const auto expected_tensors = detail::named_tensors(model);
  if (expected_tensors.size() != loaded.size())
    fail(ErrorCode::bad_layout, "model file: tensor count does not match architecture");
  for (const auto& [name, slot] : expected_tensors) {
    auto it = loaded.find(name);
    if (it == loaded.end()) fail(ErrorCode::bad_layout, "model file: missing tensor " + name);
    if (it->second.shape() != slot->shape())
      fail(ErrorCode::bad_layout, "model file: shape mismatch for " + name + ": " + it->second.shape().str() +
                                      " vs " + slot->shape().str());
    it->second.check_finite("model tensor " + name);
    *slot = std::move(it->second);
  }
  for (const auto& layer : model.layers) {
    if (!layer.bn.has_value()) continue;
    for (std::size_t i = 0; i < layer.bn->running_var.size(); ++i)
      if (layer.bn->running_var[i] < 0.f)
        fail(ErrorCode::bad_layout, "model file: negative running variance");
  }
  return model;
}

inline ModelState<float> load_model(const std::vector<std::uint8_t>& bytes, const ArchitectureSpec& expected) {
  return load_model(bytes.data(), bytes.size(), expected);
}

inline ModelState<float> load_model_file(const std::filesystem::path& path, const ArchitectureSpec& expected) {
  if (!std::filesystem::exists(path)) fail(ErrorCode::io_error, "model file not found: " + path.string());
  const auto bytes = read_file_bytes(path);
  return load_model(bytes.data(), bytes.size(), expected);
}

}  // namespace fastnet
