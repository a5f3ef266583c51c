#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "oudefend/autodiff.hpp"
#include "oudefend/errors.hpp"
#include "oudefend/layers.hpp"
#include "oudefend/tensor.hpp"

namespace oudefend {

/// Parameter name (dotted path) -> tensor. std::map keeps iteration order
/// sorted and therefore deterministic.
using ModelParams = std::map<std::string, Tensor>;
using BnStates = std::map<std::string, BnRunning>;

enum class BranchMode { full, u_only, o_only };

inline std::string_view to_string(BranchMode m) {
  switch (m) {
    case BranchMode::full: return "full";
    case BranchMode::u_only: return "u_only";
    case BranchMode::o_only: return "o_only";
  }
  return "full";
}

inline BranchMode parse_branch_mode(std::string_view s) {
  if (s == "full") return BranchMode::full;
  if (s == "u_only") return BranchMode::u_only;
  if (s == "o_only") return BranchMode::o_only;
  throw ConfigError("unknown branch mode '" + std::string(s) + "'");
}

/// The restoration block: a shared 1x1x1 channel reduction feeding an
/// overcomplete branch (conv then spatial upsample, mirrored by conv then
/// max-pool, with 1x1x1 skips) and a shallow undercomplete branch, fused by
/// addition, expanded back to C channels and added to the input.
struct OUDefendConfig {
  std::size_t in_channels = 32;
  std::size_t reduce_ratio = 8;
  std::size_t o_depth = 3;
  std::size_t u_depth = 1;
  std::size_t scale = 2;
  BranchMode branch_mode = BranchMode::full;
  /// Upper bound on elements of one overcomplete activation per sample.
  std::size_t max_activation_elems = std::size_t{1} << 26;

  std::size_t branch_channels() const { return in_channels / reduce_ratio; }

  void validate() const {
    if (reduce_ratio == 0 || in_channels % reduce_ratio != 0 || branch_channels() < 1) {
      throw ConfigError("in_channels " + std::to_string(in_channels) +
                        " not divisible by reduce_ratio " + std::to_string(reduce_ratio));
    }
    if (o_depth < 1 || u_depth < 1) throw ConfigError("branch depths must be >= 1");
    if (scale < 2) throw ConfigError("resampling scale must be >= 2");
  }

  /// Checks a (C, T, H, W) feature shape against the block.
  void validate_input(const Shape& s) const {
    validate();
    if (s.size() != 5) throw ConfigError("OUDefend input must be (N,C,T,H,W)");
    if (s[1] != in_channels) {
      throw ConfigError("OUDefend expects " + std::to_string(in_channels) + " channels, got " +
                        std::to_string(s[1]));
    }
    std::size_t down = 1;
    for (std::size_t i = 0; i < u_depth; ++i) down *= scale;
    if (s[3] % down || s[4] % down) {
      throw ConfigError("spatial dims " + std::to_string(s[3]) + "x" + std::to_string(s[4]) +
                        " not divisible by " + std::to_string(down) + " for the U-branch");
    }
    double up = 1;
    for (std::size_t i = 0; i < o_depth; ++i) up *= static_cast<double>(scale * scale);
    if (static_cast<double>(branch_channels() * s[2] * s[3] * s[4]) * up >
        static_cast<double>(max_activation_elems)) {
      throw ConfigError("overcomplete activations exceed the configured memory bound");
    }
  }
};

enum class Stage { conv2 = 0, conv3 = 1, conv4 = 2, conv5 = 3, none = 4 };

inline std::string_view to_string(Stage s) {
  static constexpr std::array<std::string_view, 5> names{"conv2", "conv3", "conv4", "conv5", "none"};
  return names[static_cast<int>(s)];
}

inline Stage parse_stage(std::string_view s) {
  for (int i = 0; i <= 4; ++i) {
    if (to_string(static_cast<Stage>(i)) == s) return static_cast<Stage>(i);
  }
  throw ConfigError("unknown stage '" + std::string(s) + "'");
}

/// ResNet-18-shaped 3-D backbone at desk scale.
struct BackboneConfig {
  std::size_t in_channels = 3;
  std::array<std::size_t, 4> widths{8, 16, 32, 64};
  std::size_t blocks_per_stage = 1;
  std::size_t num_classes = 5;
  /// Spatial stride of the stem convolution.
  std::size_t stem_stride = 2;
  Stage insert_after = Stage::conv4;

  std::size_t stage_width(Stage s) const { return widths.at(static_cast<int>(s)); }

  void validate() const {
    if (blocks_per_stage < 1 || num_classes < 1 || in_channels < 1 || stem_stride < 1) {
      throw ConfigError("backbone sizes must be >= 1");
    }
    for (auto w : widths) {
      if (w < 1) throw ConfigError("stage widths must be >= 1");
    }
  }
};

// ---------------------------------------------------------------------------
// Parameter enumeration and initialisation.

enum class InitKind { he_normal, zeros, ones };

struct ParamSpec {
  std::string name;
  Shape shape;
  InitKind init;
  std::size_t fan_in = 0;
};

namespace detail {

inline void add_conv(std::vector<ParamSpec>& out, const std::string& name, std::size_t cin,
                     std::size_t cout, std::size_t k, bool bias) {
  out.push_back({name + ".weight", {cout, cin, k, k, k}, InitKind::he_normal, cin * k * k * k});
  if (bias) out.push_back({name + ".bias", {cout}, InitKind::zeros});
}

inline void add_bn(std::vector<ParamSpec>& out, const std::string& name, std::size_t c) {
  out.push_back({name + ".weight", {c}, InitKind::ones});
  out.push_back({name + ".bias", {c}, InitKind::zeros});
}

inline std::string block_name(std::size_t stage, std::size_t block) {
  return "conv" + std::to_string(stage + 2) + "." + std::to_string(block);
}

inline bool block_has_projection(const BackboneConfig& b, std::size_t stage, std::size_t block) {
  const auto cin = stage == 0 ? b.widths[0] : b.widths[stage - 1];
  return block == 0 && (stage > 0 || cin != b.widths[stage]);
}

}  // namespace detail

/// Every OUDefend parameter, in initialisation order.
inline std::vector<ParamSpec> oudefend_param_specs(const OUDefendConfig& cfg,
                                                   const std::string& prefix = "oudefend") {
  cfg.validate();
  const auto C = cfg.in_channels, c = cfg.branch_channels();
  std::vector<ParamSpec> out;
  detail::add_conv(out, prefix + ".reduce", C, c, 1, true);
  for (std::size_t i = 0; i < cfg.o_depth; ++i) {
    detail::add_conv(out, prefix + ".o.enc" + std::to_string(i), c, c, 3, true);
  }
  for (std::size_t i = 0; i < cfg.o_depth; ++i) {
    detail::add_conv(out, prefix + ".o.dec" + std::to_string(i), c, c, 3, true);
    detail::add_conv(out, prefix + ".o.skip" + std::to_string(i), c, c, 1, true);
  }
  for (std::size_t i = 0; i < cfg.u_depth; ++i) {
    detail::add_conv(out, prefix + ".u.enc" + std::to_string(i), c, c, 3, true);
  }
  for (std::size_t i = 0; i < cfg.u_depth; ++i) {
    detail::add_conv(out, prefix + ".u.dec" + std::to_string(i), c, c, 3, true);
  }
  detail::add_conv(out, prefix + ".u.adjust", c, c, 1, true);
  detail::add_conv(out, prefix + ".expand", c, C, 1, true);
  detail::add_conv(out, prefix + ".final", C, C, 1, true);
  return out;
}

/// Backbone convolutions carry no bias; each is followed by batch norm.
inline std::vector<ParamSpec> backbone_param_specs(const BackboneConfig& b) {
  b.validate();
  std::vector<ParamSpec> out;
  detail::add_conv(out, "stem.conv", b.in_channels, b.widths[0], 3, false);
  detail::add_bn(out, "stem.bn", b.widths[0]);
  for (std::size_t s = 0; s < 4; ++s) {
    for (std::size_t k = 0; k < b.blocks_per_stage; ++k) {
      const auto name = detail::block_name(s, k);
      const auto cin = k > 0 ? b.widths[s] : (s == 0 ? b.widths[0] : b.widths[s - 1]);
      detail::add_conv(out, name + ".conv1", cin, b.widths[s], 3, false);
      detail::add_bn(out, name + ".bn1", b.widths[s]);
      detail::add_conv(out, name + ".conv2", b.widths[s], b.widths[s], 3, false);
      detail::add_bn(out, name + ".bn2", b.widths[s]);
      if (detail::block_has_projection(b, s, k)) {
        detail::add_conv(out, name + ".shortcut.conv", cin, b.widths[s], 1, false);
        detail::add_bn(out, name + ".shortcut.bn", b.widths[s]);
      }
    }
  }
  out.push_back({"fc.weight", {b.num_classes, b.widths[3]}, InitKind::he_normal, b.widths[3]});
  out.push_back({"fc.bias", {b.num_classes}, InitKind::zeros});
  return out;
}

inline std::vector<ParamSpec> model_param_specs(const BackboneConfig& b,
                                                const std::optional<OUDefendConfig>& o) {
  auto specs = backbone_param_specs(b);
  if (o && b.insert_after != Stage::none) {
    if (o->in_channels != b.stage_width(b.insert_after)) {
      throw ConfigError("OUDefend in_channels " + std::to_string(o->in_channels) +
                        " != width of " + std::string(to_string(b.insert_after)));
    }
    auto extra = oudefend_param_specs(*o);
    specs.insert(specs.end(), extra.begin(), extra.end());
  }
  return specs;
}

/// He-normal N(0, 2 / fan_in) weights, zero biases, BN gamma 1 beta 0;
/// a single mt19937_64 stream consumed in spec order.
inline ModelParams init_params(const std::vector<ParamSpec>& specs, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  ModelParams params;
  for (const auto& spec : specs) {
    Tensor t = Tensor::zeros(spec.shape);
    if (spec.init == InitKind::ones) {
      for (double& v : t.storage()) v = 1.0;
    } else if (spec.init == InitKind::he_normal) {
      std::normal_distribution<double> normal(0.0, std::sqrt(2.0 / static_cast<double>(spec.fan_in)));
      for (double& v : t.storage()) v = normal(rng);
    }
    if (!params.emplace(spec.name, std::move(t)).second) {
      throw ConfigError("duplicate parameter name " + spec.name);
    }
  }
  return params;
}

inline ModelParams init_params(const BackboneConfig& b, const std::optional<OUDefendConfig>& o,
                               std::uint64_t seed) {
  return init_params(model_param_specs(b, o), seed);
}

inline BnStates init_bn_states(const BackboneConfig& b) {
  BnStates bn;
  for (const auto& spec : backbone_param_specs(b)) {
    constexpr std::string_view suffix = ".weight";
    if (spec.init != InitKind::ones) continue;
    const auto base = spec.name.substr(0, spec.name.size() - suffix.size());
    bn.emplace(base, BnRunning::init(spec.shape[0]));
  }
  return bn;
}

/// Element count over parameters whose name starts with `prefix`.
inline std::size_t param_count(const ModelParams& params, std::string_view prefix = {}) {
  std::size_t n = 0;
  for (const auto& [name, t] : params) {
    if (std::string_view(name).substr(0, prefix.size()) == prefix) n += t.size();
  }
  return n;
}

// ---------------------------------------------------------------------------
// Binding parameters to a tape.

/// Registers parameters on a tape on first use. In tracking mode every
/// parameter is a gradient leaf; otherwise parameters are read-only views.
class ParamBinder {
 public:
  /// Tracking binder: all parameters become leaves immediately, so unused
  /// ones still receive an (all-zero) gradient.
  ParamBinder(Tape& tape, ModelParams& params) : tape_(tape), read_(&params) {
    for (auto& [name, t] : params) {
      t.set_requires_grad(true);
      t.clear_grad();
      bound_.emplace(name, tape.leaf(t));
    }
  }

  ParamBinder(Tape& tape, const ModelParams& params) : tape_(tape), read_(&params) {}

  Var operator()(const std::string& name) {
    if (auto it = bound_.find(name); it != bound_.end()) return it->second;
    auto p = read_->find(name);
    if (p == read_->end()) throw ParamError("missing parameter " + name);
    Var v = tape_.constant_ref(p->second);
    bound_.emplace(name, v);
    return v;
  }

  Tape& tape() { return tape_; }

 private:
  Tape& tape_;
  const ModelParams* read_;
  std::map<std::string, Var> bound_;
};

/// Batch-norm statistics access for one forward pass.
struct BnContext {
  const BnStates* stats = nullptr;
  BnStates* update = nullptr;
  Mode mode = Mode::eval;

  Var apply(Var x, ParamBinder& p, const std::string& name) const {
    auto it = stats->find(name);
    if (it == stats->end()) throw ParamError("missing batch-norm statistics " + name);
    Var gamma = p(name + ".weight");
    Var beta = p(name + ".bias");
    if (mode == Mode::train) {
      if (!update) throw ConfigError("train-mode forward needs writable batch-norm statistics");
      return batch_norm3d(x, gamma, beta, update->at(name), Mode::train);
    }
    return batch_norm3d(x, gamma, beta, it->second);
  }
};

// ---------------------------------------------------------------------------
// Forward passes.

/// Intermediate activations captured from one OUDefend pass.
struct OUDefendTrace {
  std::optional<Var> o_bottleneck;  // deepest overcomplete activation
  std::optional<Var> u_bottleneck;  // lowest-resolution undercomplete activation
  std::optional<Var> o_out;
  std::optional<Var> u_out;
};

namespace detail {

inline Var conv_named(ParamBinder& p, Var x, const std::string& name, std::size_t k,
                      bool bias = true, Triple stride = {1, 1, 1}) {
  std::optional<Var> b;
  if (bias) b = p(name + ".bias");
  Conv3dGeometry g{stride, {k / 2, k / 2, k / 2}};
  return conv3d(x, p(name + ".weight"), b, g);
}

}  // namespace detail

inline Var oudefend_forward(Var x, const OUDefendConfig& cfg, ParamBinder& p,
                            OUDefendTrace* trace = nullptr, const std::string& prefix = "oudefend") {
  cfg.validate_input(x.shape());
  const Triple up{1, cfg.scale, cfg.scale};
  Var reduced = detail::conv_named(p, x, prefix + ".reduce", 1);

  std::optional<Var> o_out, u_out;
  if (cfg.branch_mode != BranchMode::u_only) {
    std::vector<Var> levels;
    Var e = reduced;
    for (std::size_t i = 0; i < cfg.o_depth; ++i) {
      Var c = relu(detail::conv_named(p, e, prefix + ".o.enc" + std::to_string(i), 3));
      levels.push_back(c);
      e = upsample_nearest3d(c, up);
    }
    if (trace) trace->o_bottleneck = e;
    Var d = e;
    for (std::size_t j = 0; j < cfg.o_depth; ++j) {
      d = max_pool3d(relu(detail::conv_named(p, d, prefix + ".o.dec" + std::to_string(j), 3)), up);
      const auto level = cfg.o_depth - 1 - j;
      d = add(d, detail::conv_named(p, levels[level], prefix + ".o.skip" + std::to_string(level), 1));
    }
    o_out = d;
  }
  if (cfg.branch_mode != BranchMode::o_only) {
    Var u = reduced;
    for (std::size_t i = 0; i < cfg.u_depth; ++i) {
      u = max_pool3d(relu(detail::conv_named(p, u, prefix + ".u.enc" + std::to_string(i), 3)), up);
    }
    for (std::size_t i = 0; i < cfg.u_depth; ++i) {
      Var c = relu(detail::conv_named(p, u, prefix + ".u.dec" + std::to_string(i), 3));
      if (i == 0 && trace) trace->u_bottleneck = c;
      u = upsample_nearest3d(c, up);
    }
    u_out = detail::conv_named(p, u, prefix + ".u.adjust", 1);
  }
  if (trace) {
    trace->o_out = o_out;
    trace->u_out = u_out;
  }
  Var fused = o_out && u_out ? add(*o_out, *u_out) : (o_out ? *o_out : *u_out);
  Var expanded = detail::conv_named(p, fused, prefix + ".expand", 1);
  Var restored = detail::conv_named(p, expanded, prefix + ".final", 1);
  return add(restored, x);
}

/// Backbone plus optional OUDefend block.
struct Model {
  BackboneConfig backbone;
  std::optional<OUDefendConfig> oudefend;
  ModelParams params;
  BnStates bn;

  static Model create(const BackboneConfig& b, const std::optional<OUDefendConfig>& o,
                      std::uint64_t seed) {
    Model m{b, (b.insert_after == Stage::none) ? std::nullopt : o, {}, init_bn_states(b)};
    m.params = init_params(b, m.oudefend, seed);
    return m;
  }

  bool has_block() const { return oudefend.has_value() && backbone.insert_after != Stage::none; }
};

/// Stage outputs captured during a forward pass (post-OUDefend where the
/// block is inserted).
using StageTaps = std::map<Stage, Var>;

inline Var backbone_forward(Var x, const BackboneConfig& b, const std::optional<OUDefendConfig>& o,
                            ParamBinder& p, const BnContext& bn, StageTaps* taps = nullptr,
                            OUDefendTrace* trace = nullptr) {
  b.validate();
  const Tensor& xv = x.value();
  if (xv.rank() != 5 || xv.dim(1) != b.in_channels) {
    throw ConfigError("backbone expects (N," + std::to_string(b.in_channels) + ",T,H,W), got " +
                      to_string(xv.shape()));
  }
  const bool block = o && b.insert_after != Stage::none;
  Var h = detail::conv_named(p, x, "stem.conv", 3, false, {1, b.stem_stride, b.stem_stride});
  h = relu(bn.apply(h, p, "stem.bn"));
  for (std::size_t s = 0; s < 4; ++s) {
    for (std::size_t k = 0; k < b.blocks_per_stage; ++k) {
      const auto name = detail::block_name(s, k);
      const std::size_t st = (s > 0 && k == 0) ? 2 : 1;
      Var r = detail::conv_named(p, h, name + ".conv1", 3, false, {1, st, st});
      r = relu(bn.apply(r, p, name + ".bn1"));
      r = bn.apply(detail::conv_named(p, r, name + ".conv2", 3, false), p, name + ".bn2");
      Var shortcut = h;
      if (detail::block_has_projection(b, s, k)) {
        shortcut = detail::conv_named(p, h, name + ".shortcut.conv", 1, false, {1, st, st});
        shortcut = bn.apply(shortcut, p, name + ".shortcut.bn");
      }
      h = relu(add(r, shortcut));
    }
    const auto stage = static_cast<Stage>(s);
    if (block && stage == b.insert_after) h = oudefend_forward(h, *o, p, trace);
    if (taps) taps->insert_or_assign(stage, h);
  }
  Var pooled = global_avg_pool(h);
  return linear(pooled, p("fc.weight"), p("fc.bias"));
}

/// Convenience: forward a model, capturing BN updates in train mode.
inline Var model_forward(Var x, Model& m, ParamBinder& p, Mode mode, StageTaps* taps = nullptr) {
  BnContext ctx{&m.bn, mode == Mode::train ? &m.bn : nullptr, mode};
  return backbone_forward(x, m.backbone, m.oudefend, p, ctx, taps);
}

inline Var model_forward(Var x, const Model& m, ParamBinder& p, StageTaps* taps = nullptr) {
  BnContext ctx{&m.bn, nullptr, Mode::eval};
  return backbone_forward(x, m.backbone, m.oudefend, p, ctx, taps);
}

}  // namespace oudefend
