#pragma once

#include <algorithm>
#include <functional>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "oudefend/autodiff.hpp"
#include "oudefend/layers.hpp"
#include "oudefend/models.hpp"

namespace oudefend {

/// Builds an output from the given input Vars.
using GraphFn = std::function<Var(Tape&, const std::vector<Var>&)>;

/// Worst relative error, over all inputs, between the analytic gradient of
/// <graph(inputs), r> (r a fixed random tensor) and central differences.
inline double max_gradient_error(const GraphFn& graph, std::vector<Tensor> inputs,
                                 std::mt19937_64& rng, double h = 1e-5) {
  Tensor weights;
  {
    Tape probe;
    std::vector<Var> vars;
    for (auto& t : inputs) vars.push_back(probe.constant(t));
    const Shape s = graph(probe, vars).shape();
    std::normal_distribution<double> n(0.0, 1.0);
    std::vector<double> v(numel(s));
    for (double& x : v) x = n(rng);
    weights = Tensor(s, std::move(v));
  }
  auto scalar_of = [&](std::vector<Tensor>& in, bool grad) {
    Tape tape;
    std::vector<Var> vars;
    for (auto& t : in) {
      t.set_requires_grad(grad);
      vars.push_back(tape.leaf(t));
    }
    auto out = graph(tape, vars);
    auto loss = sum(mul(out, tape.constant_ref(weights)));
    const double value = loss.value().item();
    if (grad) tape.backward(loss);
    return value;
  };
  scalar_of(inputs, true);
  double worst = 0.0;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    const std::vector<double> analytic = *inputs[i].grad();
    auto f = [&](const Tensor& probe) {
      std::vector<Tensor> copy = inputs;
      copy[i] = probe;
      return scalar_of(copy, false);
    };
    auto numeric = finite_difference_gradient(f, inputs[i], h);
    worst = std::max(worst, relative_error(analytic, numeric.data()));
  }
  return worst;
}

struct GradCheckResult {
  std::string name;
  std::size_t trials = 0;
  double worst = 0.0;
  double tolerance = 0.0;

  bool passed() const { return worst < tolerance; }
};

namespace detail {

/// Distinct values at least 0.05 apart and at least 0.025 from zero, so no
/// central difference straddles a ReLU kink or a max tie.
inline Tensor spaced_tensor(Shape shape, std::mt19937_64& rng) {
  const auto n = numel(shape);
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  std::shuffle(perm.begin(), perm.end(), rng);
  std::uniform_real_distribution<double> jitter(-0.01, 0.01);
  std::vector<double> v(n);
  for (std::size_t i = 0; i < n; ++i) {
    v[i] = (static_cast<double>(perm[i]) - static_cast<double>(n) / 2.0 + 0.5) * 0.05 + jitter(rng);
  }
  return Tensor(std::move(shape), std::move(v));
}

inline Tensor normal_tensor(Shape shape, std::mt19937_64& rng, double sd = 1.0) {
  std::normal_distribution<double> n(0.0, sd);
  std::vector<double> v(numel(shape));
  for (double& x : v) x = n(rng);
  return Tensor(std::move(shape), std::move(v));
}

inline std::size_t pick(std::mt19937_64& rng, std::size_t lo, std::size_t hi) {
  return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

}  // namespace detail

/// Finite-difference checks of every layer (`trials` random instances each,
/// tolerance 1e-5) and of the full backbone + OUDefend loss on one tiny
/// video (tolerance 1e-4).
inline std::vector<GradCheckResult> run_gradient_checks(std::size_t trials, std::uint64_t seed,
                                                        std::size_t model_trials = 1) {
  using detail::normal_tensor;
  using detail::pick;
  using detail::spaced_tensor;
  std::mt19937_64 rng(seed);
  std::vector<GradCheckResult> out;
  auto run = [&](const std::string& name, double tol, std::size_t n, auto&& once) {
    GradCheckResult r{name, n, 0.0, tol};
    for (std::size_t i = 0; i < n; ++i) r.worst = std::max(r.worst, once());
    out.push_back(r);
  };

  run("conv3d", 1e-5, trials, [&] {
    const std::size_t cin = pick(rng, 1, 2), cout = pick(rng, 1, 2);
    const std::size_t k = pick(rng, 0, 1) ? 3 : 1;
    Conv3dGeometry g{{1, pick(rng, 1, 2), pick(rng, 1, 2)}, {k / 2, k / 2, pick(rng, 0, k / 2)}};
    Shape xs{1, cin, pick(rng, k, 3), pick(rng, k, 4), pick(rng, k, 4)};
    const bool bias = pick(rng, 0, 1);
    std::vector<Tensor> in{normal_tensor(xs, rng), normal_tensor({cout, cin, k, k, k}, rng)};
    if (bias) in.push_back(normal_tensor({cout}, rng));
    return max_gradient_error(
        [&](Tape&, const std::vector<Var>& v) {
          return conv3d(v[0], v[1], bias ? std::optional(v[2]) : std::nullopt, g);
        },
        in, rng);
  });
  run("max_pool3d", 1e-5, trials, [&] {
    const Triple win{1, pick(rng, 1, 2), 2};
    Shape xs{pick(rng, 1, 2), pick(rng, 1, 2), pick(rng, 1, 2), win[1] * pick(rng, 1, 2), 2 * pick(rng, 1, 2)};
    return max_gradient_error([&](Tape&, const std::vector<Var>& v) { return max_pool3d(v[0], win); },
                              {spaced_tensor(xs, rng)}, rng);
  });
  run("upsample_nearest3d", 1e-5, trials, [&] {
    const Triple f{1, pick(rng, 1, 3), pick(rng, 2, 3)};
    Shape xs{1, pick(rng, 1, 2), pick(rng, 1, 2), pick(rng, 1, 3), pick(rng, 1, 3)};
    return max_gradient_error([&](Tape&, const std::vector<Var>& v) { return upsample_nearest3d(v[0], f); },
                              {normal_tensor(xs, rng)}, rng);
  });
  run("relu", 1e-5, trials, [&] {
    Shape xs{1, 2, pick(rng, 1, 2), pick(rng, 1, 4), pick(rng, 1, 4)};
    return max_gradient_error([](Tape&, const std::vector<Var>& v) { return relu(v[0]); },
                              {spaced_tensor(xs, rng)}, rng);
  });
  for (Mode mode : {Mode::train, Mode::eval}) {
    run(mode == Mode::train ? "batch_norm3d_train" : "batch_norm3d_eval", 1e-5, trials, [&] {
      const std::size_t C = pick(rng, 1, 3);
      Shape xs{pick(rng, 1, 2), C, pick(rng, 1, 2), pick(rng, 2, 3), pick(rng, 2, 3)};
      BnRunning stats{normal_tensor({C}, rng), Tensor::full({C}, 1.5)};
      return max_gradient_error(
          [&](Tape&, const std::vector<Var>& v) {
            BnRunning scratch = stats;
            return mode == Mode::train ? batch_norm3d(v[0], v[1], v[2], scratch, Mode::train)
                                       : batch_norm3d(v[0], v[1], v[2], std::as_const(stats));
          },
          {normal_tensor(xs, rng, 2.0), normal_tensor({C}, rng), normal_tensor({C}, rng)}, rng);
    });
  }
  run("linear", 1e-5, trials, [&] {
    const std::size_t N = pick(rng, 1, 4), D = pick(rng, 1, 6), K = pick(rng, 1, 5);
    return max_gradient_error(
        [](Tape&, const std::vector<Var>& v) { return linear(v[0], v[1], v[2]); },
        {normal_tensor({N, D}, rng), normal_tensor({K, D}, rng), normal_tensor({K}, rng)}, rng);
  });
  run("global_avg_pool", 1e-5, trials, [&] {
    Shape xs{pick(rng, 1, 2), pick(rng, 1, 3), pick(rng, 1, 2), pick(rng, 1, 3), pick(rng, 1, 3)};
    return max_gradient_error([](Tape&, const std::vector<Var>& v) { return global_avg_pool(v[0]); },
                              {normal_tensor(xs, rng)}, rng);
  });
  run("softmax_cross_entropy", 1e-5, trials, [&] {
    const std::size_t N = pick(rng, 1, 4), K = pick(rng, 2, 6);
    std::vector<int> labels(N);
    for (auto& y : labels) y = static_cast<int>(pick(rng, 0, K - 1));
    return max_gradient_error(
        [&](Tape&, const std::vector<Var>& v) { return softmax_cross_entropy(v[0], labels); },
        {normal_tensor({N, K}, rng, 2.0)}, rng);
  });
  run("oudefend_block", 1e-5, trials, [&] {
    OUDefendConfig cfg;
    cfg.reduce_ratio = pick(rng, 1, 2);
    cfg.in_channels = 2 * cfg.reduce_ratio;
    cfg.o_depth = pick(rng, 1, 2);
    cfg.branch_mode = static_cast<BranchMode>(pick(rng, 0, 2));
    auto params = init_params(oudefend_param_specs(cfg), rng());
    Shape xs{1, cfg.in_channels, pick(rng, 1, 2), 2 * pick(rng, 1, 2), 2 * pick(rng, 1, 2)};
    return max_gradient_error(
        [&](Tape& t, const std::vector<Var>& v) {
          ParamBinder p(t, std::as_const(params));
          return oudefend_forward(v[0], cfg, p);
        },
        {normal_tensor(xs, rng)}, rng);
  });

  // Full model: cross-entropy of backbone + OUDefend w.r.t. input pixels.
  run("full_model_loss", 1e-4, model_trials, [&] {
    auto model = Model::create(BackboneConfig{}, OUDefendConfig{}, rng());
    std::uniform_real_distribution<double> u(0.0, 1.0);
    Tensor x = Tensor::zeros({1, 3, 4, 16, 16});
    for (double& v : x.storage()) v = u(rng);
    const std::vector<int> label{static_cast<int>(pick(rng, 0, 4))};
    auto loss_of = [&](Tensor& in, bool grad) {
      Tape tape;
      ParamBinder p(tape, std::as_const(model.params));
      in.set_requires_grad(grad);
      auto loss = softmax_cross_entropy(model_forward(tape.leaf(in), std::as_const(model), p), label);
      if (grad) tape.backward(loss);
      return loss.value().item();
    };
    loss_of(x, true);
    const std::vector<double> analytic = *x.grad();
    auto numeric = finite_difference_gradient(
        [&](const Tensor& probe) {
          Tensor copy = probe;
          return loss_of(copy, false);
        },
        x, 1e-5);
    return relative_error(analytic, numeric.data());
  });
  return out;
}

}  // namespace oudefend
