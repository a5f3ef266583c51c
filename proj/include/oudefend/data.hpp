#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "oudefend/errors.hpp"
#include "oudefend/io.hpp"
#include "oudefend/tensor.hpp"

namespace oudefend {

/// Labeled videos (N, C, T, H, W) with pixels in [0, 1].
struct VideoBatch {
  Tensor pixels;
  std::vector<int> labels;
  std::size_t num_classes = 0;

  std::size_t size() const { return labels.size(); }
  std::size_t sample_elems() const { return size() ? pixels.size() / size() : 0; }

  /// Copy of the samples at `indices`, in that order.
  VideoBatch select(std::span<const std::size_t> indices) const {
    Shape shape = pixels.shape();
    shape[0] = indices.size();
    const auto per = sample_elems();
    std::vector<double> data(indices.size() * per);
    std::vector<int> y(indices.size());
    for (std::size_t i = 0; i < indices.size(); ++i) {
      const auto src = pixels.data().subspan(indices[i] * per, per);
      std::copy(src.begin(), src.end(), data.begin() + static_cast<std::ptrdiff_t>(i * per));
      y[i] = labels[indices[i]];
    }
    return {Tensor(std::move(shape), std::move(data)), std::move(y), num_classes};
  }

  VideoBatch slice(std::size_t begin, std::size_t end) const {
    std::vector<std::size_t> idx(end - begin);
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = begin + i;
    return select(idx);
  }

  friend bool operator==(const VideoBatch&, const VideoBatch&) = default;
};

/// Moving-square video task: a bright square slides left, right, up, down
/// or stays put over Gaussian noise. One frame alone cannot tell the moving
/// classes apart.
struct DatasetSpec {
  std::size_t num_train = 250;
  std::size_t num_test = 100;
  std::size_t classes = 5;
  std::size_t frames = 8;
  std::size_t height = 32;
  std::size_t width = 32;
  std::size_t channels = 3;
  std::size_t square = 6;
  std::size_t speed = 2;
  double noise_std = 0.1;
  double background = 0.2;
  double intensity = 0.9;
  std::uint64_t seed = 0;

  void validate() const {
    if (classes != 5) throw ConfigError("the motion task has exactly 5 classes");
    if (frames < 1 || channels < 1) throw ConfigError("frames and channels must be >= 1");
    const auto travel = speed * (frames - 1);
    if (square + travel > height || square + travel > width) {
      throw ConfigError("square of size " + std::to_string(square) + " moving " +
                        std::to_string(travel) + " px does not fit a " + std::to_string(height) +
                        "x" + std::to_string(width) + " frame");
    }
    if (noise_std < 0) throw ConfigError("noise_std must be >= 0");
  }
};

inline std::vector<std::string> class_names(const DatasetSpec& = {}) {
  return {"left", "right", "up", "down", "static"};
}

namespace detail {

inline VideoBatch generate_split(const DatasetSpec& s, std::size_t count, std::mt19937_64& rng) {
  const auto C = s.channels, T = s.frames, H = s.height, W = s.width;
  const auto travel = static_cast<long>(s.speed * (T - 1));
  std::vector<int> labels(count);
  for (std::size_t i = 0; i < count; ++i) labels[i] = static_cast<int>(i % s.classes);
  for (std::size_t i = count; i > 1; --i) {
    std::swap(labels[i - 1], labels[rng() % i]);
  }
  // Per class: (dx, dy) per frame.
  constexpr std::array<std::array<int, 2>, 5> motion{{{-1, 0}, {1, 0}, {0, -1}, {0, 1}, {0, 0}}};
  std::normal_distribution<double> noise(0.0, 1.0);
  Tensor pixels = Tensor::zeros({count, C, T, H, W});
  for (std::size_t n = 0; n < count; ++n) {
    const auto [dx, dy] = motion[labels[n]];
    auto start = [&](int d, std::size_t extent) {
      const long lo = d < 0 ? travel : 0;
      const long hi = static_cast<long>(extent - s.square) - (d > 0 ? travel : 0);
      return lo + static_cast<long>(rng() % static_cast<std::uint64_t>(hi - lo + 1));
    };
    const long x0 = start(dx, W), y0 = start(dy, H);
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t t = 0; t < T; ++t) {
        const long sx = x0 + dx * static_cast<long>(s.speed * t);
        const long sy = y0 + dy * static_cast<long>(s.speed * t);
        for (std::size_t h = 0; h < H; ++h)
          for (std::size_t w = 0; w < W; ++w) {
            const bool inside = static_cast<long>(h) >= sy && static_cast<long>(h) < sy + static_cast<long>(s.square) &&
                                static_cast<long>(w) >= sx && static_cast<long>(w) < sx + static_cast<long>(s.square);
            double v = inside ? s.intensity : s.background;
            if (s.noise_std > 0) v += s.noise_std * noise(rng);
            // Stored as float32 on disk; keep the in-memory value exact.
            pixels.at({n, c, t, h, w}) = static_cast<double>(static_cast<float>(std::clamp(v, 0.0, 1.0)));
          }
      }
  }
  return {std::move(pixels), std::move(labels), s.classes};
}

inline void write_split(io::ByteWriter& out, const VideoBatch& b) {
  const auto& s = b.pixels.shape();
  out.u32(static_cast<std::uint32_t>(b.size()));
  out.u32(static_cast<std::uint32_t>(b.num_classes));
  for (std::size_t i = 1; i < 5; ++i) out.u32(static_cast<std::uint32_t>(s[i]));
  for (int y : b.labels) out.u32(static_cast<std::uint32_t>(y));
  for (double v : b.pixels.data()) out.f32(static_cast<float>(v));
}

inline VideoBatch read_split(io::ByteReader& in) {
  const std::size_t n = in.u32();
  const std::size_t k = in.u32();
  Shape shape{n, 0, 0, 0, 0};
  for (std::size_t i = 1; i < 5; ++i) shape[i] = in.u32();
  in.need(n * 4);
  std::vector<int> labels(n);
  for (auto& y : labels) {
    const auto v = in.u32();
    if (v >= k) throw FormatError("label " + std::to_string(v) + " outside [0," + std::to_string(k) + ")");
    y = static_cast<int>(v);
  }
  const auto count = numel(shape);
  in.need(count * 4);
  std::vector<double> px(count);
  for (auto& v : px) v = static_cast<double>(in.f32());
  return {Tensor(std::move(shape), std::move(px)), std::move(labels), k};
}

}  // namespace detail

struct Dataset {
  VideoBatch train;
  VideoBatch test;
};

inline Dataset generate_dataset(const DatasetSpec& spec) {
  spec.validate();
  std::mt19937_64 rng(spec.seed);
  Dataset d;
  d.train = detail::generate_split(spec, spec.num_train, rng);
  d.test = detail::generate_split(spec, spec.num_test, rng);
  return d;
}

inline constexpr std::uint32_t kDatasetVersion = 1;

/// "OUDS", u32 version, then train and test splits.
inline std::vector<std::uint8_t> encode_dataset(const Dataset& d) {
  io::ByteWriter out;
  out.bytes("OUDS");
  out.u32(kDatasetVersion);
  detail::write_split(out, d.train);
  detail::write_split(out, d.test);
  return out.buffer();
}

inline Dataset decode_dataset(std::vector<std::uint8_t> bytes) {
  io::ByteReader in(std::move(bytes));
  if (in.remaining() < 4 || in.bytes(4) != "OUDS") throw FormatError("bad dataset magic");
  const auto version = in.u32();
  if (version != kDatasetVersion) {
    throw FormatError("dataset version " + std::to_string(version) + ", expected " +
                      std::to_string(kDatasetVersion));
  }
  Dataset d;
  d.train = detail::read_split(in);
  d.test = detail::read_split(in);
  if (in.remaining() != 0) throw FormatError("trailing bytes after dataset");
  return d;
}

inline void save_dataset(const std::string& path, const Dataset& d) {
  io::write_file(path, encode_dataset(d));
}

inline Dataset load_dataset(const std::string& path) { return decode_dataset(io::read_file(path)); }

}  // namespace oudefend
