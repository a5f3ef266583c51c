#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <iomanip>
#include <map>
#include <optional>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "oudefend/attacks.hpp"
#include "oudefend/data.hpp"
#include "oudefend/errors.hpp"
#include "oudefend/models.hpp"

namespace oudefend {

enum class TrainMode { clean, adversarial };

inline std::string_view to_string(TrainMode m) { return m == TrainMode::clean ? "clean" : "adversarial"; }

inline TrainMode parse_train_mode(std::string_view s) {
  if (s == "clean") return TrainMode::clean;
  if (s == "adversarial") return TrainMode::adversarial;
  throw ConfigError("unknown train mode '" + std::string(s) + "'");
}

struct TrainConfig {
  std::size_t epochs = 10;
  std::size_t batch_size = 8;
  double lr = 0.05;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  std::uint64_t seed = 0;
  TrainMode mode = TrainMode::clean;
  AttackConfig train_attack = PgdLinf{};
  /// Fractions of `epochs` at which the learning rate is multiplied by
  /// `decay_factor`.
  std::vector<double> decay_at{0.6, 0.85};
  double decay_factor = 0.1;

  void validate() const {
    if (batch_size < 4) throw ConfigError("batch_size must be >= 4");
    if (!(lr > 0)) throw ConfigError("lr must be > 0");
    if (momentum < 0 || weight_decay < 0) throw ConfigError("momentum and weight_decay must be >= 0");
    validate_attack(train_attack);
  }

  double lr_at(std::size_t epoch) const {
    double rate = lr;
    for (double f : decay_at) {
      if (epoch >= static_cast<std::size_t>(f * static_cast<double>(epochs))) rate *= decay_factor;
    }
    return rate;
  }
};

using GradMap = std::map<std::string, std::vector<double>>;
using Velocity = std::map<std::string, std::vector<double>>;

/// Gradients stored on the parameters by the last backward pass.
inline GradMap collect_grads(const ModelParams& params) {
  GradMap g;
  for (const auto& [name, t] : params) {
    g.emplace(name, t.grad() ? *t.grad() : std::vector<double>(t.size(), 0.0));
  }
  return g;
}

/// v <- momentum v + g + wd w;  w <- w - lr v.
inline void sgd_step(ModelParams& params, const GradMap& grads, double lr, double momentum,
                     double weight_decay, Velocity& velocity) {
  if (grads.size() != params.size()) {
    throw ParamError("gradient set has " + std::to_string(grads.size()) + " entries for " +
                     std::to_string(params.size()) + " parameters");
  }
  for (const auto& [name, g] : grads) {
    auto it = params.find(name);
    if (it == params.end()) throw ParamError("gradient for unknown parameter " + name);
    if (g.size() != it->second.size()) throw ParamError("gradient size mismatch for " + name);
  }
  for (auto& [name, t] : params) {
    const auto& g = grads.at(name);
    auto& v = velocity[name];
    if (v.empty()) v.assign(t.size(), 0.0);
    auto w = t.storage().data();
    for (std::size_t i = 0; i < g.size(); ++i) {
      v[i] = momentum * v[i] + g[i] + weight_decay * w[i];
      w[i] -= lr * v[i];
    }
  }
}

struct TrainState {
  TrainState() = default;
  explicit TrainState(Model m) : model(std::move(m)) {}

  Model model;
  Velocity velocity;
  std::size_t epoch = 0;
  /// Updates computed on raw and on attacked batches.
  std::size_t clean_updates = 0;
  std::size_t adversarial_updates = 0;
};

struct EpochStats {
  double train_loss = 0.0;
  std::size_t batches = 0;
};

/// Deterministic batch order for (seed, epoch).
inline std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, std::size_t epoch) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(epoch)};
  std::mt19937_64 rng(seq);
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng() % i]);
  return order;
}

/// Audit hook called just before (`generated` false) and just after
/// (`generated` true) adversarial generation for each batch.
using GenerationProbe = std::function<void(const TrainState&, bool generated)>;

/// One pass over `data` in shuffled full batches (the remainder is dropped).
inline EpochStats train_epoch(TrainState& state, const VideoBatch& data, const TrainConfig& cfg,
                              const GenerationProbe& probe = {}) {
  cfg.validate();
  if (data.size() == 0) throw ConfigError("empty training set");
  if (cfg.batch_size > data.size()) {
    throw ConfigError("batch_size " + std::to_string(cfg.batch_size) + " exceeds dataset size " +
                      std::to_string(data.size()));
  }
  const auto order = epoch_order(data.size(), cfg.seed, state.epoch);
  const double lr = cfg.lr_at(state.epoch);
  EpochStats stats;
  for (std::size_t b = 0; b + cfg.batch_size <= data.size(); b += cfg.batch_size) {
    VideoBatch batch = data.select(std::span(order).subspan(b, cfg.batch_size));
    if (cfg.mode == TrainMode::adversarial) {
      if (probe) probe(state, false);
      const Model& frozen = state.model;
      batch.pixels = run_attack(model_objective(frozen, batch.labels), batch.pixels, cfg.train_attack).x_adv;
      if (probe) probe(state, true);
    }
    Tape tape;
    ParamBinder p(tape, state.model.params);
    auto logits = model_forward(tape.constant_ref(batch.pixels), state.model, p, Mode::train);
    auto loss = softmax_cross_entropy(logits, batch.labels);
    tape.backward(loss);
    sgd_step(state.model.params, collect_grads(state.model.params), lr, cfg.momentum,
             cfg.weight_decay, state.velocity);
    (cfg.mode == TrainMode::adversarial ? state.adversarial_updates : state.clean_updates) += 1;
    stats.train_loss += loss.value().item();
    ++stats.batches;
  }
  stats.train_loss /= static_cast<double>(stats.batches);
  ++state.epoch;
  return stats;
}

/// Predicted class per sample (first maximal logit).
inline std::vector<int> predict(const Model& model, const Tensor& pixels) {
  Tape tape;
  ParamBinder p(tape, model.params);
  const Tensor logits = model_forward(tape.constant_ref(pixels), model, p).value();
  const auto N = logits.dim(0), K = logits.dim(1);
  std::vector<int> out(N);
  for (std::size_t n = 0; n < N; ++n) {
    const double* row = logits.data().data() + n * K;
    out[n] = static_cast<int>(std::max_element(row, row + K) - row);
  }
  return out;
}

/// Accuracy in percent; with an attack, each batch is attacked first.
inline double evaluate(const Model& model, const VideoBatch& data,
                       const std::optional<AttackConfig>& attack = std::nullopt,
                       std::size_t batch_size = 25) {
  if (data.size() == 0) return 0.0;
  std::size_t correct = 0;
  for (std::size_t b = 0; b < data.size(); b += batch_size) {
    VideoBatch batch = data.slice(b, std::min(data.size(), b + batch_size));
    if (attack) {
      batch.pixels = run_attack(model_objective(model, batch.labels), batch.pixels, *attack).x_adv;
    }
    const auto pred = predict(model, batch.pixels);
    for (std::size_t i = 0; i < pred.size(); ++i) correct += pred[i] == batch.labels[i];
  }
  return 100.0 * static_cast<double>(correct) / static_cast<double>(data.size());
}

/// Mean of the six per-attack accuracies, rounded to 2 decimals.
inline double avg_adv(std::span<const double> accuracies) {
  if (accuracies.size() != 6) {
    throw ArityError("avg_adv needs 6 accuracies, got " + std::to_string(accuracies.size()));
  }
  double s = 0.0;
  for (double a : accuracies) s += a;
  return std::round(s / 6.0 * 100.0) / 100.0;
}

// ---------------------------------------------------------------------------
// Reports.

struct EpochRecord {
  std::string run;
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double clean_acc = 0.0;
  std::map<AttackKind, double> robust;
  double seconds = 0.0;

  std::optional<double> avg() const {
    if (robust.size() != kAllAttacks.size()) return std::nullopt;
    std::vector<double> v;
    for (auto k : kAllAttacks) v.push_back(robust.at(k));
    return avg_adv(v);
  }
};

struct TrainReport {
  std::vector<EpochRecord> epochs;

  /// Tab-separated, one epoch per line, "-" for absent values.
  std::string to_tsv(bool timing = true) const {
    std::ostringstream out;
    out << "run\tepoch\ttrain_loss\tclean_acc";
    for (auto k : kAllAttacks) out << '\t' << to_string(k);
    out << "\tavg_adv";
    if (timing) out << "\tseconds";
    out << '\n';
    out << std::fixed;
    for (const auto& e : epochs) {
      out << (e.run.empty() ? "-" : e.run) << '\t' << e.epoch << '\t' << std::setprecision(6)
          << e.train_loss << '\t' << std::setprecision(2) << e.clean_acc;
      for (auto k : kAllAttacks) {
        out << '\t';
        if (auto it = e.robust.find(k); it != e.robust.end()) {
          out << it->second;
        } else {
          out << '-';
        }
      }
      out << '\t';
      if (auto a = e.avg()) {
        out << *a;
      } else {
        out << '-';
      }
      if (timing) out << '\t' << std::setprecision(3) << e.seconds;
      out << '\n';
    }
    return out.str();
  }
};

/// Trains for cfg.epochs, logging clean test accuracy each epoch and the
/// accuracy under each of `eval_attacks` after the last epoch.
inline TrainReport fit(TrainState& state, const VideoBatch& train, const VideoBatch& test,
                       const TrainConfig& cfg, const std::vector<AttackConfig>& eval_attacks = {},
                       const std::string& run = {}) {
  TrainReport report;
  while (state.epoch < cfg.epochs) {
    const auto t0 = std::chrono::steady_clock::now();
    const auto stats = train_epoch(state, train, cfg);
    EpochRecord rec;
    rec.run = run;
    rec.epoch = state.epoch;
    rec.train_loss = stats.train_loss;
    rec.clean_acc = evaluate(state.model, test);
    if (state.epoch == cfg.epochs) {
      for (const auto& a : eval_attacks) rec.robust[kind_of(a)] = evaluate(state.model, test, a);
    }
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    report.epochs.push_back(std::move(rec));
  }
  return report;
}

}  // namespace oudefend
