#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "oudefend/attacks.hpp"
#include "oudefend/errors.hpp"
#include "oudefend/models.hpp"

namespace oudefend {

/// 8-bit image, `channels` 1 (P5) or 3 (P6), interleaved row-major.
struct Image {
  std::size_t width = 0, height = 0, channels = 1;
  std::vector<std::uint8_t> pixels;

  friend bool operator==(const Image&, const Image&) = default;
};

inline void write_pnm(const std::string& path, const Image& img) {
  if (img.channels != 1 && img.channels != 3) throw FormatError("PNM images have 1 or 3 channels");
  if (img.pixels.size() != img.width * img.height * img.channels) throw FormatError("image size mismatch");
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot write " + path);
  out << (img.channels == 1 ? "P5" : "P6") << '\n' << img.width << ' ' << img.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
  if (!out) throw FormatError("write failed for " + path);
}

/// Reads binary P5/P6 with maxval 255.
inline Image read_pnm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path);
  std::string magic;
  std::size_t maxval = 0;
  Image img;
  in >> magic >> img.width >> img.height >> maxval;
  if (!in || (magic != "P5" && magic != "P6")) throw FormatError(path + ": not a binary PGM/PPM file");
  if (maxval != 255) throw FormatError(path + ": maxval must be 255");
  in.get();
  img.channels = magic == "P5" ? 1 : 3;
  img.pixels.resize(img.width * img.height * img.channels);
  in.read(reinterpret_cast<char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
  if (in.gcount() != static_cast<std::streamsize>(img.pixels.size())) throw FormatError(path + ": truncated");
  in.peek();
  if (!in.eof()) throw FormatError(path + ": trailing bytes");
  return img;
}

/// Min-max to [0, 255]; a constant map becomes uniform 128.
inline std::vector<std::uint8_t> normalize_to_bytes(std::span<const double> v) {
  const auto [lo, hi] = std::minmax_element(v.begin(), v.end());
  std::vector<std::uint8_t> out(v.size(), 128);
  if (v.empty() || *hi == *lo) return out;
  const double span = *hi - *lo;
  for (std::size_t i = 0; i < v.size(); ++i) {
    out[i] = static_cast<std::uint8_t>(std::lround(255.0 * (v[i] - *lo) / span));
  }
  return out;
}

/// Channel mean of a (1, C, T, H, W) activation, one normalised image per frame.
inline std::vector<Image> feature_frames(const Tensor& act) {
  if (act.rank() != 5 || act.dim(0) != 1) throw ShapeError("feature export expects (1,C,T,H,W)");
  const auto C = act.dim(1), T = act.dim(2), H = act.dim(3), W = act.dim(4);
  std::vector<Image> frames;
  std::vector<double> mean(H * W);
  for (std::size_t t = 0; t < T; ++t) {
    std::fill(mean.begin(), mean.end(), 0.0);
    for (std::size_t c = 0; c < C; ++c) {
      const double* src = act.data().data() + (c * T + t) * H * W;
      for (std::size_t i = 0; i < H * W; ++i) mean[i] += src[i];
    }
    for (double& m : mean) m /= static_cast<double>(C);
    frames.push_back({W, H, 1, normalize_to_bytes(mean)});
  }
  return frames;
}

/// Pixel frames of a (1, C, T, H, W) video in [0, 1], quantised as round(255 x).
/// Three channels become RGB; any other count is shown as its channel mean.
inline std::vector<Image> video_frames(const Tensor& x) {
  if (x.rank() != 5 || x.dim(0) != 1) throw ShapeError("video export expects (1,C,T,H,W)");
  const auto C = x.dim(1), T = x.dim(2), H = x.dim(3), W = x.dim(4);
  auto q = [](double v) { return static_cast<std::uint8_t>(std::lround(255.0 * std::clamp(v, 0.0, 1.0))); };
  std::vector<Image> frames;
  for (std::size_t t = 0; t < T; ++t) {
    Image img{W, H, 3, std::vector<std::uint8_t>(W * H * 3)};
    for (std::size_t s = 0; s < H * W; ++s) {
      if (C == 3) {
        for (std::size_t c = 0; c < 3; ++c) img.pixels[s * 3 + c] = q(x[(c * T + t) * H * W + s]);
      } else {
        double m = 0;
        for (std::size_t c = 0; c < C; ++c) m += x[(c * T + t) * H * W + s];
        img.pixels[s * 3] = img.pixels[s * 3 + 1] = img.pixels[s * 3 + 2] = q(m / static_cast<double>(C));
      }
    }
    frames.push_back(std::move(img));
  }
  return frames;
}

/// Frames tiled left to right, top to bottom, in rows of `columns`.
inline Image tile(const std::vector<Image>& frames, std::size_t columns = 4) {
  if (frames.empty()) return {};
  const auto w = frames[0].width, h = frames[0].height, ch = frames[0].channels;
  columns = std::min(columns, frames.size());
  const auto rows = (frames.size() + columns - 1) / columns;
  Image grid{w * columns, h * rows, ch, std::vector<std::uint8_t>(w * columns * h * rows * ch, 0)};
  for (std::size_t i = 0; i < frames.size(); ++i) {
    const auto ox = (i % columns) * w, oy = (i / columns) * h;
    for (std::size_t y = 0; y < h; ++y) {
      std::copy_n(frames[i].pixels.data() + y * w * ch, w * ch,
                  grid.pixels.data() + ((oy + y) * grid.width + ox) * ch);
    }
  }
  return grid;
}

/// Stage output for one video (post-OUDefend where the block sits there).
inline Tensor stage_activation(const Model& model, const Tensor& x, Stage stage) {
  if (stage == Stage::none) throw ConfigError("no activation for stage 'none'");
  Tape tape;
  ParamBinder p(tape, model.params);
  StageTaps taps;
  model_forward(tape.constant_ref(x), model, p, &taps);
  return taps.at(stage).value();
}

struct FeatureExport {
  std::vector<std::string> files;
  Tensor input;  // the (possibly attacked) video that was exported
};

/// Writes `<stage>_t<k>.pgm` per frame and `<stage>_grid.pgm`, plus
/// `input_t<k>.ppm` and `input_grid.ppm` for the input video.
inline FeatureExport export_feature_maps(const Model& model, const Tensor& video, int label, Stage stage,
                                         const std::optional<AttackConfig>& attack,
                                         const std::string& out_dir) {
  if (stage == Stage::none) throw ConfigError("unknown stage 'none' for feature export");
  std::filesystem::create_directories(out_dir);
  FeatureExport result{{}, video};
  if (attack) result.input = run_attack(model_objective(model, {label}), video, *attack).x_adv;
  auto emit = [&](const std::vector<Image>& frames, const std::string& stem, const char* ext) {
    for (std::size_t t = 0; t < frames.size(); ++t) {
      const auto path = (std::filesystem::path(out_dir) / (stem + "_t" + std::to_string(t) + ext)).string();
      write_pnm(path, frames[t]);
      result.files.push_back(path);
    }
    const auto grid = (std::filesystem::path(out_dir) / (stem + "_grid" + ext)).string();
    write_pnm(grid, tile(frames));
    result.files.push_back(grid);
  };
  emit(feature_frames(stage_activation(model, result.input, stage)), std::string(to_string(stage)), ".pgm");
  emit(video_frames(result.input), "input", ".ppm");
  return result;
}

}  // namespace oudefend
