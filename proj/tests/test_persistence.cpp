#include <filesystem>

#include <gtest/gtest.h>

#include "oudefend/oudefend.hpp"

namespace oudefend {
namespace {

namespace fs = std::filesystem;

fs::path scratch_dir(const std::string& name) {
  auto p = fs::temp_directory_path() / ("oudefend_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

RunConfig tiny_run() {
  RunConfig c;
  c.data.num_train = 8;
  c.data.num_test = 10;
  c.data.frames = 4;
  c.data.height = c.data.width = 16;
  c.backbone.widths = {4, 4, 8, 8};
  c.oudefend.in_channels = 8;
  c.oudefend.reduce_ratio = 4;
  c.train.batch_size = 4;
  c.train.epochs = 1;
  return c;
}

// ---------------------------------------------------------------------------
// Config text.

TEST(Config, SectionsCommentsAndFractions) {
  const auto kv = parse_key_values(
      "# top comment\n"
      "[attack]\n"
      "kind = pgd_linf   # trailing comment\n"
      "eps = 4/255\n"
      "\n"
      "[train]\n"
      "epochs=3\n");
  EXPECT_EQ(kv.at("attack.kind"), "pgd_linf");
  EXPECT_EQ(kv.at("attack.eps"), "4/255");
  EXPECT_EQ(kv.at("train.epochs"), "3");
  EXPECT_DOUBLE_EQ(parse_real("4/255"), 4.0 / 255);
  EXPECT_DOUBLE_EQ(parse_real(" 0.25 "), 0.25);
  EXPECT_THROW(parse_real("1/0"), ConfigError);
  EXPECT_THROW(parse_real("abc"), ConfigError);
  EXPECT_THROW(parse_count("-3"), ConfigError);
}

TEST(Config, MalformedLinesNameTheLine) {
  try {
    parse_key_values("[a]\nno equals sign\n", "f.cfg");
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("f.cfg:2"), std::string::npos) << e.what();
  }
  EXPECT_THROW(parse_key_values("[open\n"), ConfigError);
  EXPECT_THROW(parse_key_values(" = 3\n"), ConfigError);
}

TEST(Config, OverlaysOntoDefaults) {
  const auto c = parse_run_config(
      "[backbone]\nwidths = 4, 8, 16, 32\ninsert_after = conv3\n"
      "[oudefend]\nbranch_mode = u_only\nreduce_ratio = 2\n"
      "[train]\nmode = adversarial\nlr = 1/100\n"
      "[train_attack]\nkind = pgd_linf\neps = 16/255\nalpha = 6/255\nsteps = 3\n"
      "[attack]\nkind = roa\nrect_h = 10\n");
  EXPECT_EQ(c.backbone.widths[1], 8u);
  EXPECT_EQ(c.backbone.insert_after, Stage::conv3);
  EXPECT_EQ(c.oudefend.in_channels, 8u);
  EXPECT_EQ(c.oudefend.branch_mode, BranchMode::u_only);
  EXPECT_EQ(c.train.mode, TrainMode::adversarial);
  EXPECT_DOUBLE_EQ(c.train.lr, 0.01);
  const auto& ta = std::get<PgdLinf>(c.train.train_attack);
  EXPECT_DOUBLE_EQ(ta.eps, 16.0 / 255);
  EXPECT_EQ(ta.steps, 3u);
  const auto& roa = std::get<Roa>(c.attack);
  EXPECT_EQ(roa.rect_h, 10u);
  EXPECT_EQ(roa.rect_w, Roa{}.rect_w);
}

TEST(Config, UnknownOrMisplacedKeysAreErrors) {
  EXPECT_THROW(parse_run_config("[train]\nepochz = 3\n"), ConfigError);
  EXPECT_THROW(parse_run_config("[attack]\nkind = af\neps = 0.1\n"), ConfigError);
  EXPECT_THROW(parse_run_config("[attack]\nkind = nope\n"), ConfigError);
  EXPECT_THROW(parse_run_config("[backbone]\nwidths = 1,2\n"), ConfigError);
  EXPECT_THROW(parse_run_config("[oudefend]\nenabled = maybe\n"), ConfigError);
}

TEST(Config, TextRoundTripIsExact) {
  RunConfig c = tiny_run();
  c.train.lr = 1.0 / 3.0;
  c.train.decay_at = {0.5};
  c.attack = Spa{7, 70.0 / 255, 4};
  c.train.train_attack = PgdL2{160, 0.7, 2};
  c.use_oudefend = false;
  const auto text = to_text(c);
  const auto back = parse_run_config(text);
  EXPECT_EQ(to_text(back), text);
  EXPECT_EQ(back.train.lr, c.train.lr);
  EXPECT_EQ(std::get<Spa>(back.attack).pixels_per_frame, 7u);
  EXPECT_FALSE(back.block().has_value());
  EXPECT_EQ(to_text(parse_run_config(to_text(RunConfig{}))), to_text(RunConfig{}));
}

// ---------------------------------------------------------------------------
// Checkpoints.

Checkpoint trained_checkpoint(std::uint64_t seed) {
  Checkpoint ck{tiny_run(), {}, 0};
  ck.config.train.seed = seed;
  auto data = generate_dataset(ck.config.data);
  TrainState s(ck.config.make_model(seed));
  train_epoch(s, data.train, ck.config.train);
  ck.model = s.model;
  ck.epoch = s.epoch;
  return ck;
}

TEST(Checkpoint, SaveLoadSaveIsByteIdentical) {
  const auto dir = scratch_dir("ckpt");
  const auto ck = trained_checkpoint(1);
  save_checkpoint((dir / "a.oudf").string(), ck);
  const auto back = load_checkpoint((dir / "a.oudf").string());
  save_checkpoint((dir / "b.oudf").string(), back);
  EXPECT_EQ(io::read_file((dir / "a.oudf").string()), io::read_file((dir / "b.oudf").string()));
  EXPECT_EQ(back.model.params, ck.model.params);
  EXPECT_EQ(back.epoch, 1u);
  for (const auto& [name, s] : ck.model.bn) {
    EXPECT_EQ(back.model.bn.at(name).mean, s.mean);
    EXPECT_EQ(back.model.bn.at(name).var, s.var);
  }
}

TEST(Checkpoint, EvaluationSurvivesRoundTrip) {
  const auto ck = trained_checkpoint(2);
  const auto back = decode_checkpoint(encode_checkpoint(ck));
  const auto data = generate_dataset(ck.config.data);
  EXPECT_EQ(evaluate(back.model, data.test), evaluate(ck.model, data.test));
  EXPECT_EQ(predict(back.model, data.test.pixels), predict(ck.model, data.test.pixels));
}

TEST(Checkpoint, SameSeedSameBytes) {
  EXPECT_EQ(encode_checkpoint(trained_checkpoint(3)), encode_checkpoint(trained_checkpoint(3)));
  EXPECT_NE(encode_checkpoint(trained_checkpoint(3)), encode_checkpoint(trained_checkpoint(4)));
}

TEST(Checkpoint, HeaderLayout) {
  const auto bytes = encode_checkpoint(trained_checkpoint(1));
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 4), "OUDF");
  io::ByteReader in(std::vector<std::uint8_t>(bytes.begin() + 4, bytes.end()));
  EXPECT_EQ(in.u32(), 1u);
  const auto ck = trained_checkpoint(1);
  const auto tensors = checkpoint_tensors(ck);
  EXPECT_EQ(in.u32(), tensors.size());
  const auto first = tensors.begin();
  EXPECT_EQ(in.u16(), first->first.size());
  EXPECT_EQ(in.bytes(first->first.size()), first->first);
  EXPECT_EQ(in.u8(), 0u);
  EXPECT_EQ(in.u8(), first->second.rank());
}

TEST(Checkpoint, VersionMismatchNamesBothVersions) {
  auto bytes = encode_checkpoint(trained_checkpoint(1));
  bytes[4] = 2;
  try {
    decode_checkpoint(bytes);
    FAIL() << "expected FormatError";
  } catch (const FormatError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("version 2 found"), std::string::npos) << msg;
    EXPECT_NE(msg.find("expected 1"), std::string::npos) << msg;
  }
}

TEST(Checkpoint, CorruptFilesAreRejected) {
  const auto bytes = encode_checkpoint(trained_checkpoint(1));
  auto bad = bytes;
  bad[1] = 'X';
  EXPECT_THROW(decode_checkpoint(bad), FormatError);
  for (std::size_t keep : {std::size_t{0}, std::size_t{6}, bytes.size() / 3, bytes.size() - 1}) {
    EXPECT_THROW(decode_checkpoint(std::vector<std::uint8_t>(bytes.begin(), bytes.begin() + static_cast<std::ptrdiff_t>(keep))),
                 FormatError)
        << keep;
  }
  bad = bytes;
  bad.push_back(7);
  EXPECT_THROW(decode_checkpoint(bad), FormatError);
  EXPECT_THROW(load_checkpoint((fs::temp_directory_path() / "oudefend_missing.oudf").string()), FormatError);
}

TEST(Checkpoint, ShapeMismatchAgainstConfigIsRejected) {
  auto ck = trained_checkpoint(1);
  ck.model.params.at("fc.bias") = Tensor::zeros({7});
  EXPECT_THROW(decode_checkpoint(encode_checkpoint(ck)), FormatError);
  ck = trained_checkpoint(1);
  ck.model.params.emplace("extra.weight", Tensor::zeros({1}));
  EXPECT_THROW(decode_checkpoint(encode_checkpoint(ck)), FormatError);
  ck = trained_checkpoint(1);
  ck.model.params.erase("fc.bias");
  EXPECT_THROW(decode_checkpoint(encode_checkpoint(ck)), FormatError);
}

// ---------------------------------------------------------------------------
// Feature export.

TEST(Features, ConstantMapsBecomeMidGray) {
  for (auto v : normalize_to_bytes(std::vector<double>(9, -3.5))) EXPECT_EQ(v, 128);
  const auto frames = feature_frames(Tensor::full({1, 3, 2, 4, 5}, 0.7));
  ASSERT_EQ(frames.size(), 2u);
  for (const auto& f : frames) {
    EXPECT_EQ(f.width, 5u);
    EXPECT_EQ(f.height, 4u);
    for (auto v : f.pixels) EXPECT_EQ(v, 128);
  }
  const auto ramp = normalize_to_bytes(std::vector<double>{-1.0, 0.0, 1.0});
  EXPECT_EQ(ramp, (std::vector<std::uint8_t>{0, 128, 255}));
}

TEST(Features, PnmRoundTripAndValidation) {
  const auto dir = scratch_dir("pnm");
  Image gray{3, 2, 1, {0, 10, 20, 30, 40, 255}};
  Image rgb{1, 2, 3, {1, 2, 3, 4, 5, 6}};
  write_pnm((dir / "g.pgm").string(), gray);
  write_pnm((dir / "c.ppm").string(), rgb);
  EXPECT_EQ(read_pnm((dir / "g.pgm").string()), gray);
  EXPECT_EQ(read_pnm((dir / "c.ppm").string()), rgb);
  auto raw = io::read_file((dir / "g.pgm").string());
  EXPECT_EQ(std::string(raw.begin(), raw.begin() + 2), "P5");
  raw.pop_back();
  io::write_file((dir / "short.pgm").string(), raw);
  EXPECT_THROW(read_pnm((dir / "short.pgm").string()), FormatError);
  EXPECT_THROW(write_pnm((dir / "bad.pgm").string(), Image{2, 2, 2, std::vector<std::uint8_t>(8)}), FormatError);
}

TEST(Features, TileLaysOutRowMajor) {
  std::vector<Image> frames;
  for (std::uint8_t i = 0; i < 5; ++i) frames.push_back({2, 1, 1, {i, i}});
  const auto grid = tile(frames, 4);
  EXPECT_EQ(grid.width, 8u);
  EXPECT_EQ(grid.height, 2u);
  EXPECT_EQ(grid.pixels[6], 3);
  EXPECT_EQ(grid.pixels[8], 4);
  EXPECT_EQ(grid.pixels[10], 0);
}

TEST(Features, ExportWritesFramesAndGrids) {
  const auto cfg = tiny_run();
  const auto model = cfg.make_model(1);
  const auto data = generate_dataset(cfg.data);
  const auto video = data.test.slice(0, 1);
  for (Stage s : {Stage::conv2, Stage::conv3, Stage::conv4, Stage::conv5}) {
    const auto dir = scratch_dir(std::string("export_") + std::string(to_string(s)));
    const auto out = export_feature_maps(model, video.pixels, video.labels[0], s, std::nullopt, dir.string());
    EXPECT_EQ(out.files.size(), 2 * (cfg.data.frames + 1));
    std::size_t pgm = 0, ppm = 0;
    for (const auto& f : out.files) {
      const auto img = read_pnm(f);
      (img.channels == 1 ? pgm : ppm) += 1;
      EXPECT_EQ(fs::path(f).parent_path(), dir);
    }
    EXPECT_EQ(pgm, cfg.data.frames + 1);
    EXPECT_EQ(ppm, cfg.data.frames + 1);
    EXPECT_TRUE(fs::exists(dir / (std::string(to_string(s)) + "_grid.pgm")));
    EXPECT_TRUE(fs::exists(dir / "input_t0.ppm"));
  }
  EXPECT_THROW(export_feature_maps(model, video.pixels, 0, Stage::none, std::nullopt, "unused"), ConfigError);
}

TEST(Features, FramingExportDiffersOnlyInBorder) {
  const auto cfg = tiny_run();
  const auto model = cfg.make_model(2);
  const auto data = generate_dataset(cfg.data);
  const auto video = data.test.slice(1, 2);
  const std::size_t width = 2;
  const auto clean_dir = scratch_dir("af_clean"), adv_dir = scratch_dir("af_adv");
  export_feature_maps(model, video.pixels, video.labels[0], Stage::conv2, std::nullopt, clean_dir.string());
  export_feature_maps(model, video.pixels, video.labels[0], Stage::conv2, Framing{width, 70.0 / 255, 5},
                      adv_dir.string());
  std::size_t border_changes = 0;
  for (std::size_t t = 0; t < cfg.data.frames; ++t) {
    const auto name = "input_t" + std::to_string(t) + ".ppm";
    const auto a = read_pnm((clean_dir / name).string());
    const auto b = read_pnm((adv_dir / name).string());
    for (std::size_t y = 0; y < a.height; ++y) {
      for (std::size_t x = 0; x < a.width; ++x) {
        const bool border = y < width || x < width || y >= a.height - width || x >= a.width - width;
        for (std::size_t c = 0; c < 3; ++c) {
          const auto i = (y * a.width + x) * 3 + c;
          if (!border) {
            ASSERT_EQ(a.pixels[i], b.pixels[i]) << t << ' ' << y << ' ' << x;
          } else {
            border_changes += a.pixels[i] != b.pixels[i];
          }
        }
      }
    }
  }
  EXPECT_GT(border_changes, 0u);
}

// ---------------------------------------------------------------------------
// Gradient-check suite.

TEST(GradCheck, SuiteCoversEveryLayerAndPasses) {
  const auto results = run_gradient_checks(2, 11, 1);
  std::set<std::string> names;
  for (const auto& r : results) {
    names.insert(r.name);
    EXPECT_TRUE(r.passed()) << r.name << " worst " << r.worst;
  }
  for (const char* n : {"conv3d", "max_pool3d", "upsample_nearest3d", "relu", "batch_norm3d_train",
                        "batch_norm3d_eval", "linear", "global_avg_pool", "softmax_cross_entropy",
                        "oudefend_block", "full_model_loss"}) {
    EXPECT_EQ(names.count(n), 1u) << n;
  }
}

}  // namespace
}  // namespace oudefend
