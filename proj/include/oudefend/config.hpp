#pragma once

#include <charconv>
#include <cstdio>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "oudefend/attacks.hpp"
#include "oudefend/data.hpp"
#include "oudefend/errors.hpp"
#include "oudefend/models.hpp"
#include "oudefend/training.hpp"

namespace oudefend {

/// Flat "section.key" -> value map in insertion-independent order.
using KeyValues = std::map<std::string, std::string>;

namespace detail {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

}  // namespace detail

/// `key = value` lines, `#` comments, `[section]` headers.
inline KeyValues parse_key_values(std::string_view text, const std::string& origin = "config") {
  KeyValues kv;
  std::string section;
  std::size_t lineno = 0;
  std::istringstream in{std::string(text)};
  for (std::string raw; std::getline(in, raw);) {
    ++lineno;
    const auto hash = raw.find('#');
    const std::string line = detail::trim(std::string_view(raw).substr(0, hash));
    if (line.empty()) continue;
    const auto where = origin + ":" + std::to_string(lineno);
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError(where + ": unterminated section header");
      section = detail::trim(std::string_view(line).substr(1, line.size() - 2));
      if (section.empty()) throw ConfigError(where + ": empty section name");
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(where + ": expected 'key = value'");
    const auto key = detail::trim(std::string_view(line).substr(0, eq));
    if (key.empty()) throw ConfigError(where + ": empty key");
    kv[section.empty() ? key : section + "." + key] = detail::trim(std::string_view(line).substr(eq + 1));
  }
  return kv;
}

inline KeyValues load_key_values(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_key_values(ss.str(), path);
}

/// Real number or fraction "a/b".
inline double parse_real(std::string_view s, const std::string& key = "value") {
  auto one = [&](std::string_view p) {
    const std::string t = detail::trim(p);
    double v = 0;
    const auto* end = t.data() + t.size();
    auto [ptr, ec] = std::from_chars(t.data(), end, v);
    if (t.empty() || ec != std::errc() || ptr != end) {
      throw ConfigError("'" + std::string(s) + "' is not a number for " + key);
    }
    return v;
  };
  if (const auto slash = s.find('/'); slash != std::string_view::npos) {
    const double den = one(s.substr(slash + 1));
    if (den == 0) throw ConfigError("zero denominator in " + key);
    return one(s.substr(0, slash)) / den;
  }
  return one(s);
}

inline std::size_t parse_count(std::string_view s, const std::string& key = "value") {
  const std::string t = detail::trim(s);
  std::size_t v = 0;
  const auto* end = t.data() + t.size();
  auto [ptr, ec] = std::from_chars(t.data(), end, v);
  if (t.empty() || ec != std::errc() || ptr != end) {
    throw ConfigError("'" + std::string(s) + "' is not a non-negative integer for " + key);
  }
  return v;
}

inline bool parse_bool(std::string_view s, const std::string& key = "value") {
  if (s == "true" || s == "1" || s == "yes") return true;
  if (s == "false" || s == "0" || s == "no") return false;
  throw ConfigError("'" + std::string(s) + "' is not a boolean for " + key);
}

inline std::vector<std::string> split_list(std::string_view s) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (start <= s.size()) {
    const auto comma = s.find(',', start);
    const auto end = comma == std::string_view::npos ? s.size() : comma;
    out.push_back(detail::trim(s.substr(start, end - start)));
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return out;
}

/// Shortest text that parses back to exactly `v`.
inline std::string format_real(double v) {
  char buf[64];
  for (int prec = 1; prec <= 17; ++prec) {
    std::snprintf(buf, sizeof buf, "%.*g", prec, v);
    if (std::strtod(buf, nullptr) == v) break;
  }
  return buf;
}

/// Everything a command needs: data, model, training and evaluation attack.
struct RunConfig {
  DatasetSpec data;
  BackboneConfig backbone;
  bool use_oudefend = true;
  OUDefendConfig oudefend;
  TrainConfig train;
  AttackConfig attack = PgdLinf{};

  std::optional<OUDefendConfig> block() const {
    if (!use_oudefend || backbone.insert_after == Stage::none) return std::nullopt;
    return oudefend;
  }

  Model make_model(std::uint64_t seed) const { return Model::create(backbone, block(), seed); }
};

namespace detail {

inline void apply_attack_key(AttackConfig& a, const std::string& key, const std::string& field,
                             const std::string& v) {
  auto bad = [&] {
    throw ConfigError("key " + key + " does not apply to attack " + std::string(attack_name(a)));
  };
  std::visit(
      [&](auto& c) {
        using T = std::decay_t<decltype(c)>;
        if (field == "steps") {
          c.steps = parse_count(v, key);
        } else if constexpr (std::is_same_v<T, MultAvLinf>) {
          if (field == "eps_m") c.eps_m = parse_real(v, key);
          else if (field == "alpha_m") c.alpha_m = parse_real(v, key);
          else bad();
        } else {
          if (field == "alpha") {
            c.alpha = parse_real(v, key);
          } else if constexpr (std::is_same_v<T, PgdLinf> || std::is_same_v<T, PgdL2>) {
            if (field == "eps") c.eps = parse_real(v, key);
            else bad();
          } else if constexpr (std::is_same_v<T, Roa>) {
            if (field == "rect_h") c.rect_h = parse_count(v, key);
            else if (field == "rect_w") c.rect_w = parse_count(v, key);
            else if (field == "search_stride") c.search_stride = parse_count(v, key);
            else bad();
          } else if constexpr (std::is_same_v<T, Framing>) {
            if (field == "width") c.width = parse_count(v, key);
            else bad();
          } else {
            if (field == "pixels_per_frame") c.pixels_per_frame = parse_count(v, key);
            else bad();
          }
        }
      },
      a);
}

/// Applies `prefix.kind` first so parameter keys land on the right variant.
inline void apply_attack_section(AttackConfig& a, const KeyValues& kv, const std::string& prefix,
                                 std::set<std::string>& used) {
  if (auto it = kv.find(prefix + ".kind"); it != kv.end()) {
    a = default_attack(parse_attack_kind(it->second));
    used.insert(it->first);
  }
  for (const auto& [key, value] : kv) {
    if (key.rfind(prefix + ".", 0) != 0 || key == prefix + ".kind") continue;
    apply_attack_key(a, key, key.substr(prefix.size() + 1), value);
    used.insert(key);
  }
}

inline void write_attack(std::ostringstream& out, const AttackConfig& a) {
  out << "kind = " << attack_name(a) << '\n';
  std::visit(
      [&](const auto& c) {
        using T = std::decay_t<decltype(c)>;
        if constexpr (std::is_same_v<T, PgdLinf> || std::is_same_v<T, PgdL2>) {
          out << "eps = " << format_real(c.eps) << "\nalpha = " << format_real(c.alpha) << '\n';
        } else if constexpr (std::is_same_v<T, MultAvLinf>) {
          out << "eps_m = " << format_real(c.eps_m) << "\nalpha_m = " << format_real(c.alpha_m) << '\n';
        } else if constexpr (std::is_same_v<T, Roa>) {
          out << "rect_h = " << c.rect_h << "\nrect_w = " << c.rect_w
              << "\nsearch_stride = " << c.search_stride << "\nalpha = " << format_real(c.alpha) << '\n';
        } else if constexpr (std::is_same_v<T, Framing>) {
          out << "width = " << c.width << "\nalpha = " << format_real(c.alpha) << '\n';
        } else {
          out << "pixels_per_frame = " << c.pixels_per_frame << "\nalpha = " << format_real(c.alpha) << '\n';
        }
        out << "steps = " << c.steps << '\n';
      },
      a);
}

}  // namespace detail

/// Overlays `kv` onto `cfg`. Unknown keys are errors.
inline void apply_key_values(RunConfig& cfg, const KeyValues& kv) {
  std::set<std::string> used;
  auto take = [&](const std::string& key, auto&& apply) {
    if (auto it = kv.find(key); it != kv.end()) {
      apply(it->second, key);
      used.insert(key);
    }
  };
  auto count = [&](const std::string& key, std::size_t& field) {
    take(key, [&](const std::string& v, const std::string& k) { field = parse_count(v, k); });
  };
  auto real = [&](const std::string& key, double& field) {
    take(key, [&](const std::string& v, const std::string& k) { field = parse_real(v, k); });
  };
  auto seed = [&](const std::string& key, std::uint64_t& field) {
    take(key, [&](const std::string& v, const std::string& k) { field = parse_count(v, k); });
  };

  auto& d = cfg.data;
  count("data.num_train", d.num_train);
  count("data.num_test", d.num_test);
  count("data.classes", d.classes);
  count("data.frames", d.frames);
  count("data.height", d.height);
  count("data.width", d.width);
  count("data.channels", d.channels);
  count("data.square", d.square);
  count("data.speed", d.speed);
  real("data.noise_std", d.noise_std);
  real("data.background", d.background);
  real("data.intensity", d.intensity);
  seed("data.seed", d.seed);

  auto& b = cfg.backbone;
  count("backbone.in_channels", b.in_channels);
  take("backbone.widths", [&](const std::string& v, const std::string& k) {
    const auto parts = split_list(v);
    if (parts.size() != 4) throw ConfigError(k + " needs 4 comma-separated widths");
    for (std::size_t i = 0; i < 4; ++i) b.widths[i] = parse_count(parts[i], k);
  });
  count("backbone.blocks_per_stage", b.blocks_per_stage);
  count("backbone.num_classes", b.num_classes);
  count("backbone.stem_stride", b.stem_stride);
  take("backbone.insert_after", [&](const std::string& v, const std::string&) { b.insert_after = parse_stage(v); });

  auto& o = cfg.oudefend;
  take("oudefend.enabled", [&](const std::string& v, const std::string& k) { cfg.use_oudefend = parse_bool(v, k); });
  count("oudefend.reduce_ratio", o.reduce_ratio);
  count("oudefend.o_depth", o.o_depth);
  count("oudefend.u_depth", o.u_depth);
  count("oudefend.scale", o.scale);
  take("oudefend.branch_mode", [&](const std::string& v, const std::string&) { o.branch_mode = parse_branch_mode(v); });
  if (b.insert_after != Stage::none) o.in_channels = b.stage_width(b.insert_after);

  auto& t = cfg.train;
  count("train.epochs", t.epochs);
  count("train.batch_size", t.batch_size);
  real("train.lr", t.lr);
  real("train.momentum", t.momentum);
  real("train.weight_decay", t.weight_decay);
  seed("train.seed", t.seed);
  take("train.mode", [&](const std::string& v, const std::string&) { t.mode = parse_train_mode(v); });
  take("train.decay_at", [&](const std::string& v, const std::string& k) {
    t.decay_at.clear();
    if (detail::trim(v).empty()) return;
    for (const auto& p : split_list(v)) t.decay_at.push_back(parse_real(p, k));
  });
  real("train.decay_factor", t.decay_factor);
  detail::apply_attack_section(t.train_attack, kv, "train_attack", used);
  detail::apply_attack_section(cfg.attack, kv, "attack", used);

  for (const auto& [key, value] : kv) {
    if (!used.count(key)) throw ConfigError("unknown config key '" + key + "'");
  }
}

inline RunConfig parse_run_config(std::string_view text) {
  RunConfig cfg;
  apply_key_values(cfg, parse_key_values(text));
  return cfg;
}

/// Canonical text; parse_run_config(to_text(c)) reproduces c exactly.
inline std::string to_text(const RunConfig& c) {
  std::ostringstream out;
  const auto& d = c.data;
  out << "[data]\nnum_train = " << d.num_train << "\nnum_test = " << d.num_test
      << "\nclasses = " << d.classes << "\nframes = " << d.frames << "\nheight = " << d.height
      << "\nwidth = " << d.width << "\nchannels = " << d.channels << "\nsquare = " << d.square
      << "\nspeed = " << d.speed << "\nnoise_std = " << format_real(d.noise_std)
      << "\nbackground = " << format_real(d.background) << "\nintensity = " << format_real(d.intensity)
      << "\nseed = " << d.seed << "\n\n";
  const auto& b = c.backbone;
  out << "[backbone]\nin_channels = " << b.in_channels << "\nwidths = " << b.widths[0] << ','
      << b.widths[1] << ',' << b.widths[2] << ',' << b.widths[3]
      << "\nblocks_per_stage = " << b.blocks_per_stage << "\nnum_classes = " << b.num_classes
      << "\nstem_stride = " << b.stem_stride << "\ninsert_after = " << to_string(b.insert_after) << "\n\n";
  const auto& o = c.oudefend;
  out << "[oudefend]\nenabled = " << (c.use_oudefend ? "true" : "false")
      << "\nreduce_ratio = " << o.reduce_ratio << "\no_depth = " << o.o_depth
      << "\nu_depth = " << o.u_depth << "\nscale = " << o.scale
      << "\nbranch_mode = " << to_string(o.branch_mode) << "\n\n";
  const auto& t = c.train;
  out << "[train]\nepochs = " << t.epochs << "\nbatch_size = " << t.batch_size
      << "\nlr = " << format_real(t.lr) << "\nmomentum = " << format_real(t.momentum)
      << "\nweight_decay = " << format_real(t.weight_decay) << "\nseed = " << t.seed
      << "\nmode = " << to_string(t.mode) << "\ndecay_at = ";
  for (std::size_t i = 0; i < t.decay_at.size(); ++i) out << (i ? "," : "") << format_real(t.decay_at[i]);
  out << "\ndecay_factor = " << format_real(t.decay_factor) << "\n\n[train_attack]\n";
  detail::write_attack(out, t.train_attack);
  out << "\n[attack]\n";
  detail::write_attack(out, c.attack);
  return out.str();
}

}  // namespace oudefend
