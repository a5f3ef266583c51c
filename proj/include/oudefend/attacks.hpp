#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "oudefend/autodiff.hpp"
#include "oudefend/errors.hpp"
#include "oudefend/layers.hpp"
#include "oudefend/models.hpp"
#include "oudefend/tensor.hpp"

namespace oudefend {

// ---------------------------------------------------------------------------
// Configurations. Defaults are the standard settings; spatial geometry
// (rectangle, framing width, pixel count) is sized for 32x32 frames.

struct PgdLinf {
  double eps = 4.0 / 255.0;
  double alpha = 1.0 / 255.0;
  std::size_t steps = 5;
};

/// eps and alpha in 255-scale pixel units.
struct PgdL2 {
  double eps = 160.0;
  double alpha = 1.0;
  std::size_t steps = 5;
};

struct MultAvLinf {
  double eps_m = 1.04;
  double alpha_m = 1.01;
  std::size_t steps = 5;
};

struct Roa {
  std::size_t rect_h = 8;
  std::size_t rect_w = 8;
  double alpha = 70.0 / 255.0;
  std::size_t steps = 5;
  std::size_t search_stride = 4;
};

struct Framing {
  std::size_t width = 2;
  double alpha = 70.0 / 255.0;
  std::size_t steps = 5;
};

struct Spa {
  std::size_t pixels_per_frame = 20;
  double alpha = 70.0 / 255.0;
  std::size_t steps = 5;
};

using AttackConfig = std::variant<PgdLinf, PgdL2, MultAvLinf, Roa, Framing, Spa>;

enum class AttackKind { pgd_linf, pgd_l2, multav_linf, roa, af, spa };

inline constexpr std::array<AttackKind, 6> kAllAttacks{AttackKind::pgd_linf, AttackKind::pgd_l2,
                                                       AttackKind::multav_linf, AttackKind::roa,
                                                       AttackKind::af, AttackKind::spa};

inline std::string_view to_string(AttackKind k) {
  static constexpr std::array<std::string_view, 6> names{"pgd_linf", "pgd_l2", "multav_linf",
                                                         "roa", "af", "spa"};
  return names[static_cast<int>(k)];
}

inline AttackKind parse_attack_kind(std::string_view s) {
  for (auto k : kAllAttacks) {
    if (to_string(k) == s) return k;
  }
  throw ConfigError("unknown attack '" + std::string(s) + "'");
}

inline AttackKind kind_of(const AttackConfig& cfg) { return static_cast<AttackKind>(cfg.index()); }

inline std::string_view attack_name(const AttackConfig& cfg) { return to_string(kind_of(cfg)); }

/// Standard settings with 32x32-scaled geometry.
inline AttackConfig default_attack(AttackKind k) {
  switch (k) {
    case AttackKind::pgd_linf: return PgdLinf{};
    case AttackKind::pgd_l2: return PgdL2{};
    case AttackKind::multav_linf: return MultAvLinf{};
    case AttackKind::roa: return Roa{};
    case AttackKind::af: return Framing{};
    case AttackKind::spa: return Spa{};
  }
  return PgdLinf{};
}

/// Standard settings with the full-resolution geometry: 30x30 rectangle,
/// framing width 10, 100 pixels per frame.
inline AttackConfig full_geometry_attack(AttackKind k) {
  switch (k) {
    case AttackKind::roa: return Roa{30, 30, 70.0 / 255.0, 5, 5};
    case AttackKind::af: return Framing{10, 70.0 / 255.0, 5};
    case AttackKind::spa: return Spa{100, 70.0 / 255.0, 5};
    default: return default_attack(k);
  }
}

/// Checks hyperparameters, and geometry against (N, C, T, H, W) when given.
inline void validate_attack(const AttackConfig& cfg, const Shape* shape = nullptr) {
  const std::size_t H = shape ? (*shape)[3] : 0, W = shape ? (*shape)[4] : 0;
  auto need = [](bool ok, const std::string& what) {
    if (!ok) throw ConfigError(what);
  };
  std::visit(
      [&](const auto& c) {
        using T = std::decay_t<decltype(c)>;
        need(c.steps >= 1, "attack steps must be >= 1");
        if constexpr (std::is_same_v<T, PgdLinf> || std::is_same_v<T, PgdL2>) {
          need(c.eps >= 0, "eps must be >= 0");
          need(c.alpha > 0, "alpha must be > 0");
        } else if constexpr (std::is_same_v<T, MultAvLinf>) {
          need(c.eps_m >= 1, "eps_m must be >= 1");
          need(c.alpha_m > 1, "alpha_m must be > 1");
        } else {
          need(c.alpha > 0, "alpha must be > 0");
          if constexpr (std::is_same_v<T, Roa>) {
            need(c.rect_h >= 1 && c.rect_w >= 1 && c.search_stride >= 1,
                 "rectangle sides and search stride must be >= 1");
            if (shape) {
              need(c.rect_h <= H && c.rect_w <= W,
                   "rectangle " + std::to_string(c.rect_h) + "x" + std::to_string(c.rect_w) +
                       " larger than " + std::to_string(H) + "x" + std::to_string(W) + " frame");
            }
          } else if constexpr (std::is_same_v<T, Framing>) {
            if (shape) need(2 * c.width <= std::min(H, W), "framing width exceeds half the frame");
          } else {
            if (shape) need(c.pixels_per_frame <= H * W, "pixels_per_frame exceeds frame size");
          }
        }
      },
      cfg);
}

// ---------------------------------------------------------------------------
// Model access.

/// Loss oracle for one labeled batch of videos.
struct AttackObjective {
  /// Per-sample cross-entropy at `x`.
  std::function<std::vector<double>(const Tensor& x)> losses;
  /// Summed cross-entropy at `x`; writes d(loss)/dx into `grad`.
  std::function<double(const Tensor& x, std::vector<double>& grad)> loss_and_grad;
};

/// Eval-mode objective; reads the model without modifying it.
inline AttackObjective model_objective(const Model& model, std::vector<int> labels) {
  AttackObjective obj;
  obj.losses = [&model, labels](const Tensor& x) {
    Tape tape;
    ParamBinder p(tape, model.params);
    return cross_entropy_per_sample(model_forward(tape.constant_ref(x), model, p).value(), labels);
  };
  obj.loss_and_grad = [&model, labels](const Tensor& x, std::vector<double>& grad) {
    Tensor xin(x.shape(), x.storage(), true);
    Tape tape;
    ParamBinder p(tape, model.params);
    auto logits = model_forward(tape.leaf(xin), model, p);
    auto loss = softmax_cross_entropy(logits, labels, LossReduction::sum);
    tape.backward(loss);
    grad = *xin.grad();
    return loss.value().item();
  };
  return obj;
}

struct AttackResult {
  Tensor x_adv;
  /// Summed loss at each iterate x^0 .. x^T.
  std::vector<double> loss_trace;
  /// 1 where the attack may write, 0 elsewhere (ROA, AF, SPA).
  std::optional<Tensor> mask;
};

namespace detail {

inline double sign(double v) { return v > 0 ? 1.0 : (v < 0 ? -1.0 : 0.0); }
inline double clip01(double v) { return std::clamp(v, 0.0, 1.0); }

inline double total(const std::vector<double>& v) { return std::accumulate(v.begin(), v.end(), 0.0); }

inline void require_video(const Tensor& x) {
  if (x.rank() != 5) throw ShapeError("attack input must be (N,C,T,H,W), got " + to_string(x.shape()));
}

/// x^{t+1} = clip(x^t + alpha * sign(g) on the mask); shared by ROA, SPA.
inline AttackResult masked_sign_ascent(const AttackObjective& obj, Tensor start,
                                       const Tensor& mask, double alpha, std::size_t steps,
                                       std::optional<std::vector<double>> first_grad = {},
                                       std::optional<double> first_loss = {}) {
  AttackResult r{std::move(start), {}, mask};
  std::vector<double> g;
  for (std::size_t t = 0; t < steps; ++t) {
    if (t == 0 && first_grad) {
      g = std::move(*first_grad);
      r.loss_trace.push_back(*first_loss);
    } else {
      r.loss_trace.push_back(obj.loss_and_grad(r.x_adv, g));
    }
    auto xs = r.x_adv.storage().data();
    const auto m = mask.data();
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (m[i] != 0.0) xs[i] = clip01(xs[i] + alpha * sign(g[i]));
    }
  }
  r.loss_trace.push_back(total(obj.losses(r.x_adv)));
  return r;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Generators.

inline AttackResult pgd_linf(const AttackObjective& obj, const Tensor& x, const PgdLinf& c) {
  validate_attack(c);
  detail::require_video(x);
  AttackResult r{x, {}, std::nullopt};
  std::vector<double> g;
  for (std::size_t t = 0; t < c.steps; ++t) {
    r.loss_trace.push_back(obj.loss_and_grad(r.x_adv, g));
    auto xs = r.x_adv.storage().data();
    const auto x0 = x.data();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double stepped = xs[i] + c.alpha * detail::sign(g[i]);
      xs[i] = detail::clip01(std::clamp(stepped, x0[i] - c.eps, x0[i] + c.eps));
    }
  }
  r.loss_trace.push_back(detail::total(obj.losses(r.x_adv)));
  return r;
}

inline AttackResult pgd_l2(const AttackObjective& obj, const Tensor& x, const PgdL2& c) {
  validate_attack(c);
  detail::require_video(x);
  const double eps = c.eps / 255.0, alpha = c.alpha / 255.0;
  const std::size_t N = x.dim(0), per = x.size() / N;
  AttackResult r{x, {}, std::nullopt};
  std::vector<double> g, delta(per);
  for (std::size_t t = 0; t < c.steps; ++t) {
    r.loss_trace.push_back(obj.loss_and_grad(r.x_adv, g));
    auto xs = r.x_adv.storage().data();
    const auto x0 = x.data();
    for (std::size_t n = 0; n < N; ++n) {
      const std::size_t o = n * per;
      double gn = 0.0;
      for (std::size_t i = 0; i < per; ++i) gn += g[o + i] * g[o + i];
      gn = std::sqrt(gn);
      const double step = gn > 0 ? alpha / gn : 0.0;
      double dn = 0.0;
      for (std::size_t i = 0; i < per; ++i) {
        delta[i] = xs[o + i] + step * g[o + i] - x0[o + i];
        dn += delta[i] * delta[i];
      }
      dn = std::sqrt(dn);
      const double shrink = dn > eps ? eps / dn : 1.0;
      for (std::size_t i = 0; i < per; ++i) {
        xs[o + i] = detail::clip01(x0[o + i] + delta[i] * shrink);
      }
    }
  }
  r.loss_trace.push_back(detail::total(obj.losses(r.x_adv)));
  return r;
}

inline AttackResult multav_linf(const AttackObjective& obj, const Tensor& x, const MultAvLinf& c) {
  validate_attack(c);
  detail::require_video(x);
  const double lo = 1.0 / c.eps_m, hi = c.eps_m;
  std::vector<double> ratio(x.size(), 1.0), g;
  AttackResult r{x, {}, std::nullopt};
  for (std::size_t t = 0; t < c.steps; ++t) {
    r.loss_trace.push_back(obj.loss_and_grad(r.x_adv, g));
    auto xs = r.x_adv.storage().data();
    const auto x0 = x.data();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double s = detail::sign(g[i]);
      if (s > 0) ratio[i] *= c.alpha_m;
      if (s < 0) ratio[i] /= c.alpha_m;
      ratio[i] = std::clamp(ratio[i], lo, hi);
      xs[i] = detail::clip01(x0[i] * ratio[i]);
    }
  }
  r.loss_trace.push_back(detail::total(obj.losses(r.x_adv)));
  return r;
}

/// Grid-searches one gray rectangle per video (same place on every frame),
/// then runs sign ascent inside it starting from the clean video.
inline AttackResult roa(const AttackObjective& obj, const Tensor& x, const Roa& c) {
  detail::require_video(x);
  validate_attack(c, &x.shape());
  const auto N = x.dim(0), C = x.dim(1), T = x.dim(2), H = x.dim(3), W = x.dim(4);
  std::vector<double> best(N, -std::numeric_limits<double>::infinity());
  std::vector<std::size_t> best_r(N, 0), best_c(N, 0);
  for (std::size_t i = 0; i + c.rect_h <= H; i += c.search_stride) {
    for (std::size_t j = 0; j + c.rect_w <= W; j += c.search_stride) {
      Tensor probe = x;
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t ch = 0; ch < C; ++ch)
          for (std::size_t t = 0; t < T; ++t)
            for (std::size_t h = i; h < i + c.rect_h; ++h)
              for (std::size_t w = j; w < j + c.rect_w; ++w) probe.at({n, ch, t, h, w}) = 0.5;
      const auto losses = obj.losses(probe);
      for (std::size_t n = 0; n < N; ++n) {
        if (losses[n] > best[n]) {
          best[n] = losses[n];
          best_r[n] = i;
          best_c[n] = j;
        }
      }
    }
  }
  Tensor mask = Tensor::zeros(x.shape());
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t ch = 0; ch < C; ++ch)
      for (std::size_t t = 0; t < T; ++t)
        for (std::size_t h = best_r[n]; h < best_r[n] + c.rect_h; ++h)
          for (std::size_t w = best_c[n]; w < best_c[n] + c.rect_w; ++w) mask.at({n, ch, t, h, w}) = 1.0;
  return detail::masked_sign_ascent(obj, x, mask, c.alpha, c.steps);
}

/// Border band of `width` pixels on every frame.
inline Tensor framing_mask(const Shape& shape, std::size_t width) {
  Tensor mask = Tensor::zeros(shape);
  const auto H = shape[3], W = shape[4];
  const auto plane = H * W;
  auto m = mask.storage().data();
  for (std::size_t base = 0; base < mask.size(); base += plane) {
    for (std::size_t h = 0; h < H; ++h)
      for (std::size_t w = 0; w < W; ++w) {
        const bool band = h < width || w < width || h + width >= H || w + width >= W;
        m[base + h * W + w] = band ? 1.0 : 0.0;
      }
  }
  return mask;
}

/// One framing per video, replicated over frames, initialised to gray.
inline AttackResult adversarial_framing(const AttackObjective& obj, const Tensor& x, const Framing& c) {
  detail::require_video(x);
  validate_attack(c, &x.shape());
  const auto N = x.dim(0), C = x.dim(1), T = x.dim(2), H = x.dim(3), W = x.dim(4);
  Tensor mask = framing_mask(x.shape(), c.width);
  if (c.width == 0) {
    AttackResult r{x, {}, mask};
    r.loss_trace.assign(c.steps + 1, detail::total(obj.losses(x)));
    return r;
  }
  // frame[n, c, h, w]
  std::vector<double> frame(N * C * H * W, 0.5);
  auto compose = [&](Tensor& out) {
    auto o = out.storage().data();
    const auto m = mask.data();
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t ch = 0; ch < C; ++ch)
        for (std::size_t t = 0; t < T; ++t)
          for (std::size_t s = 0; s < H * W; ++s) {
            const std::size_t i = (((n * C + ch) * T + t) * H * W) + s;
            if (m[i] != 0.0) o[i] = frame[(n * C + ch) * H * W + s];
          }
  };
  AttackResult r{x, {}, mask};
  compose(r.x_adv);
  std::vector<double> g, gf(frame.size());
  for (std::size_t step = 0; step < c.steps; ++step) {
    r.loss_trace.push_back(obj.loss_and_grad(r.x_adv, g));
    std::fill(gf.begin(), gf.end(), 0.0);
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t ch = 0; ch < C; ++ch)
        for (std::size_t t = 0; t < T; ++t)
          for (std::size_t s = 0; s < H * W; ++s) {
            gf[(n * C + ch) * H * W + s] += g[(((n * C + ch) * T + t) * H * W) + s];
          }
    for (std::size_t i = 0; i < frame.size(); ++i) {
      frame[i] = detail::clip01(frame[i] + c.alpha * detail::sign(gf[i]));
    }
    compose(r.x_adv);
  }
  r.loss_trace.push_back(detail::total(obj.losses(r.x_adv)));
  return r;
}

/// Picks the k sites per frame with the largest channel-summed |gradient|
/// at the clean video, then runs sign ascent on those sites only.
inline AttackResult spa(const AttackObjective& obj, const Tensor& x, const Spa& c) {
  detail::require_video(x);
  validate_attack(c, &x.shape());
  const auto N = x.dim(0), C = x.dim(1), T = x.dim(2), H = x.dim(3), W = x.dim(4);
  const auto plane = H * W;
  std::vector<double> g;
  const double loss0 = obj.loss_and_grad(x, g);
  Tensor mask = Tensor::zeros(x.shape());
  std::vector<double> score(plane);
  std::vector<std::size_t> order(plane);
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t t = 0; t < T; ++t) {
      std::fill(score.begin(), score.end(), 0.0);
      for (std::size_t ch = 0; ch < C; ++ch) {
        const std::size_t base = ((n * C + ch) * T + t) * plane;
        for (std::size_t s = 0; s < plane; ++s) score[s] += std::abs(g[base + s]);
      }
      std::iota(order.begin(), order.end(), std::size_t{0});
      std::stable_sort(order.begin(), order.end(),
                       [&](std::size_t a, std::size_t b) { return score[a] > score[b]; });
      for (std::size_t k = 0; k < c.pixels_per_frame; ++k) {
        for (std::size_t ch = 0; ch < C; ++ch) {
          mask.storage()[((n * C + ch) * T + t) * plane + order[k]] = 1.0;
        }
      }
    }
  return detail::masked_sign_ascent(obj, x, mask, c.alpha, c.steps, std::move(g), loss0);
}

inline AttackResult run_attack(const AttackObjective& obj, const Tensor& x, const AttackConfig& cfg) {
  return std::visit(
      [&](const auto& c) -> AttackResult {
        using T = std::decay_t<decltype(c)>;
        if constexpr (std::is_same_v<T, PgdLinf>) return pgd_linf(obj, x, c);
        if constexpr (std::is_same_v<T, PgdL2>) return pgd_l2(obj, x, c);
        if constexpr (std::is_same_v<T, MultAvLinf>) return multav_linf(obj, x, c);
        if constexpr (std::is_same_v<T, Roa>) return roa(obj, x, c);
        if constexpr (std::is_same_v<T, Framing>) return adversarial_framing(obj, x, c);
        if constexpr (std::is_same_v<T, Spa>) return spa(obj, x, c);
      },
      cfg);
}

// ---------------------------------------------------------------------------
// Constraint verification.

struct ConstraintCheck {
  std::string name;
  bool passed = false;
  double measured = 0.0;
  double bound = 0.0;
};

struct ConstraintReport {
  std::string attack;
  std::vector<ConstraintCheck> checks;

  bool passed() const {
    return std::all_of(checks.begin(), checks.end(), [](const auto& c) { return c.passed; });
  }
};

namespace detail {

inline void add_check(ConstraintReport& rep, std::string name, double measured, double bound) {
  rep.checks.push_back({std::move(name), measured <= bound, measured, bound});
}

}  // namespace detail

inline ConstraintReport verify_attack_constraints(const Tensor& x, const AttackResult& result,
                                                  const AttackConfig& cfg) {
  const Tensor& xa = result.x_adv;
  if (xa.shape() != x.shape()) {
    throw ShapeError("x_adv shape " + to_string(xa.shape()) + " != x shape " + to_string(x.shape()));
  }
  detail::require_video(x);
  if (result.mask && result.mask->shape() != x.shape()) throw ShapeError("mask shape mismatch");
  ConstraintReport rep{std::string(attack_name(cfg)), {}};
  const auto N = x.dim(0), C = x.dim(1), T = x.dim(2), H = x.dim(3), W = x.dim(4);
  const auto plane = H * W, per = x.size() / N;
  const auto a = x.data(), b = xa.data();

  double range = 0.0;
  for (double v : b) {
    range = std::max({range, -v, v - 1.0});
    if (!std::isfinite(v)) range = std::numeric_limits<double>::infinity();
  }
  detail::add_check(rep, "range_violation", range, 0.0);

  // Sites (n, t, h, w) where any channel changed.
  auto changed = [&](std::size_t n, std::size_t t, std::size_t s) {
    for (std::size_t ch = 0; ch < C; ++ch) {
      const std::size_t i = ((n * C + ch) * T + t) * plane + s;
      if (a[i] != b[i]) return true;
    }
    return false;
  };

  std::visit(
      [&](const auto& c) {
        using Cfg = std::decay_t<decltype(c)>;
        if constexpr (std::is_same_v<Cfg, PgdLinf>) {
          double m = 0.0;
          for (std::size_t i = 0; i < x.size(); ++i) m = std::max(m, std::abs(b[i] - a[i]));
          detail::add_check(rep, "linf_displacement", m, c.eps + 1e-12);
        } else if constexpr (std::is_same_v<Cfg, PgdL2>) {
          double m = 0.0;
          for (std::size_t n = 0; n < N; ++n) {
            double s = 0.0;
            for (std::size_t i = n * per; i < (n + 1) * per; ++i) s += (b[i] - a[i]) * (b[i] - a[i]);
            m = std::max(m, std::sqrt(s));
          }
          detail::add_check(rep, "l2_displacement", m, c.eps / 255.0 + 1e-9);
        } else if constexpr (std::is_same_v<Cfg, MultAvLinf>) {
          double m = 1.0;
          for (std::size_t i = 0; i < x.size(); ++i) {
            if (a[i] > 0) {
              const double q = b[i] / a[i];
              m = std::max({m, q, 1.0 / q});
            } else if (b[i] != 0.0) {
              m = std::numeric_limits<double>::infinity();
            }
          }
          detail::add_check(rep, "max_ratio", m, c.eps_m + 1e-12);
        } else if constexpr (std::is_same_v<Cfg, Roa>) {
          // Changed sites across all frames of a video must fit one rectangle.
          double mh = 0, mw = 0;
          for (std::size_t n = 0; n < N; ++n) {
            std::size_t h0 = H, h1 = 0, w0 = W, w1 = 0;
            bool any = false;
            for (std::size_t t = 0; t < T; ++t)
              for (std::size_t s = 0; s < plane; ++s) {
                if (!changed(n, t, s)) continue;
                any = true;
                h0 = std::min(h0, s / W);
                h1 = std::max(h1, s / W);
                w0 = std::min(w0, s % W);
                w1 = std::max(w1, s % W);
              }
            if (any) {
              mh = std::max(mh, static_cast<double>(h1 - h0 + 1));
              mw = std::max(mw, static_cast<double>(w1 - w0 + 1));
            }
          }
          detail::add_check(rep, "rect_height", mh, static_cast<double>(c.rect_h));
          detail::add_check(rep, "rect_width", mw, static_cast<double>(c.rect_w));
        } else if constexpr (std::is_same_v<Cfg, Framing>) {
          const Tensor band = framing_mask(x.shape(), c.width);
          double outside = 0, spread = 0;
          for (std::size_t i = 0; i < x.size(); ++i) {
            if (band[i] == 0.0 && a[i] != b[i]) outside += 1;
          }
          // The framing content must be the same on every frame.
          for (std::size_t n = 0; n < N; ++n)
            for (std::size_t ch = 0; ch < C; ++ch)
              for (std::size_t t = 1; t < T; ++t)
                for (std::size_t s = 0; s < plane; ++s) {
                  const std::size_t i0 = ((n * C + ch) * T) * plane + s;
                  const std::size_t i = ((n * C + ch) * T + t) * plane + s;
                  if (band[i] != 0.0 && (a[i] != b[i] || a[i0] != b[i0])) {
                    spread = std::max(spread, std::abs(b[i] - b[i0]));
                  }
                }
          detail::add_check(rep, "changes_outside_border", outside, 0.0);
          detail::add_check(rep, "border_frame_spread", spread, 0.0);
        } else if constexpr (std::is_same_v<Cfg, Spa>) {
          double worst = 0;
          for (std::size_t n = 0; n < N; ++n)
            for (std::size_t t = 0; t < T; ++t) {
              std::size_t count = 0;
              for (std::size_t s = 0; s < plane; ++s) count += changed(n, t, s);
              worst = std::max(worst, static_cast<double>(count));
            }
          detail::add_check(rep, "changed_sites_per_frame", worst, static_cast<double>(c.pixels_per_frame));
        }
      },
      cfg);
  if (result.mask) {
    double outside = 0;
    const auto m = result.mask->data();
    for (std::size_t i = 0; i < x.size(); ++i) {
      if (m[i] == 0.0 && a[i] != b[i]) outside += 1;
    }
    detail::add_check(rep, "changes_outside_mask", outside, 0.0);
  }
  return rep;
}

}  // namespace oudefend
