#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "oudefend/config.hpp"
#include "oudefend/errors.hpp"
#include "oudefend/io.hpp"
#include "oudefend/models.hpp"

namespace oudefend {

inline constexpr std::uint32_t kCheckpointVersion = 1;

/// A trained model with the configuration that built it.
struct Checkpoint {
  RunConfig config;
  Model model;
  std::size_t epoch = 0;
};

namespace detail {

inline constexpr std::string_view kRunningPrefix = "running:";
inline constexpr std::string_view kEpochName = "meta:epoch";

inline void write_tensor(io::ByteWriter& out, const std::string& name, const Tensor& t) {
  if (name.size() > 0xFFFF) throw FormatError("tensor name too long: " + name);
  if (t.rank() > 0xFF) throw FormatError("tensor rank too large: " + name);
  out.u16(static_cast<std::uint16_t>(name.size()));
  out.bytes(name);
  out.u8(0);  // 64-bit real
  out.u8(static_cast<std::uint8_t>(t.rank()));
  for (auto d : t.shape()) out.u32(static_cast<std::uint32_t>(d));
  for (double v : t.data()) out.f64(v);
}

}  // namespace detail

/// Every stored tensor by name: parameters, BN statistics, epoch.
inline std::map<std::string, Tensor> checkpoint_tensors(const Checkpoint& c) {
  std::map<std::string, Tensor> all(c.model.params.begin(), c.model.params.end());
  for (const auto& [name, s] : c.model.bn) {
    const std::string base = std::string(detail::kRunningPrefix) + name;
    all.emplace(base + ".mean", s.mean);
    all.emplace(base + ".var", s.var);
  }
  all.emplace(std::string(detail::kEpochName), Tensor::scalar(static_cast<double>(c.epoch)));
  return all;
}

/// "OUDF", u32 version, u32 tensor count, tensors sorted by name, then the
/// configuration text as u32 length + UTF-8.
inline std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& c) {
  io::ByteWriter out;
  out.bytes("OUDF");
  out.u32(kCheckpointVersion);
  const auto tensors = checkpoint_tensors(c);
  out.u32(static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, t] : tensors) detail::write_tensor(out, name, t);
  const auto text = to_text(c.config);
  out.u32(static_cast<std::uint32_t>(text.size()));
  out.bytes(text);
  return out.buffer();
}

inline Checkpoint decode_checkpoint(std::vector<std::uint8_t> bytes) {
  io::ByteReader in(std::move(bytes));
  if (in.remaining() < 4 || in.bytes(4) != "OUDF") throw FormatError("bad checkpoint magic");
  const auto version = in.u32();
  if (version != kCheckpointVersion) {
    throw FormatError("checkpoint version " + std::to_string(version) + " found, expected " +
                      std::to_string(kCheckpointVersion));
  }
  const auto count = in.u32();
  std::map<std::string, Tensor> tensors;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto len = in.u16();
    auto name = in.bytes(len);
    if (in.u8() != 0) throw FormatError("unsupported dtype for " + name);
    const auto ndim = in.u8();
    Shape shape(ndim);
    for (auto& d : shape) d = in.u32();
    const auto n = numel(shape);
    in.need(n * 8);
    std::vector<double> v(n);
    for (auto& x : v) x = in.f64();
    if (!tensors.emplace(name, Tensor(std::move(shape), std::move(v))).second) {
      throw FormatError("duplicate tensor " + name);
    }
  }
  const auto text_len = in.u32();
  const auto text = in.bytes(text_len);
  if (in.remaining() != 0) throw FormatError("trailing bytes after checkpoint");

  Checkpoint c;
  try {
    c.config = parse_run_config(text);
  } catch (const ConfigError& e) {
    throw FormatError(std::string("embedded config: ") + e.what());
  }
  c.model = c.config.make_model(0);
  auto take = [&](const std::string& name, const Shape& shape) {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw FormatError("checkpoint lacks tensor " + name);
    if (it->second.shape() != shape) {
      throw FormatError("tensor " + name + " has shape " + to_string(it->second.shape()) +
                        ", model expects " + to_string(shape));
    }
    Tensor t = std::move(it->second);
    tensors.erase(it);
    return t;
  };
  for (auto& [name, p] : c.model.params) p = take(name, p.shape());
  for (auto& [name, s] : c.model.bn) {
    const std::string base = std::string(detail::kRunningPrefix) + name;
    s.mean = take(base + ".mean", s.mean.shape());
    s.var = take(base + ".var", s.var.shape());
  }
  c.epoch = static_cast<std::size_t>(take(std::string(detail::kEpochName), {}).item());
  if (!tensors.empty()) throw FormatError("unexpected tensor " + tensors.begin()->first);
  return c;
}

inline void save_checkpoint(const std::string& path, const Checkpoint& c) {
  io::write_file(path, encode_checkpoint(c));
}

inline Checkpoint load_checkpoint(const std::string& path) { return decode_checkpoint(io::read_file(path)); }

}  // namespace oudefend
