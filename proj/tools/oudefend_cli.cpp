// oudefend: data generation, training, evaluation, attacks, gradient checks
// and feature-map export from the command line.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "oudefend/oudefend.hpp"

namespace {

using namespace oudefend;

constexpr int kExitUsage = 1;
constexpr int kExitRuntime = 2;

struct Common {
  std::string config_path;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
};

/// Per-attack flags; each maps onto `attack.<field>`.
struct AttackFlags {
  std::string kind = "none";
  std::map<std::string, std::string> fields;

  void add_to(CLI::App* cmd, const std::string& kind_help) {
    cmd->add_option("--attack", kind, kind_help);
    for (const char* f : {"eps", "alpha", "steps", "eps-m", "alpha-m", "rect-h", "rect-w", "search-stride",
                          "width", "pixels-per-frame"}) {
      std::string key = f;
      for (char& c : key) c = c == '-' ? '_' : c;
      cmd->add_option_function<std::string>(
          std::string("--") + f, [this, key](const std::string& v) { fields[key] = v; },
          "attack parameter " + key + " (fractions like 4/255 accepted)");
    }
  }
};

std::string fixed2(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

std::string real(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

RunConfig load_config(const Common& c) {
  RunConfig cfg;
  KeyValues kv;
  if (!c.config_path.empty()) kv = load_key_values(c.config_path);
  for (const auto& s : c.overrides) {
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + s + "'");
    kv[detail::trim(std::string_view(s).substr(0, eq))] = detail::trim(std::string_view(s).substr(eq + 1));
  }
  apply_key_values(cfg, kv);
  return cfg;
}

/// The attack named by the flags, starting from `base` when the kind matches.
std::optional<AttackConfig> resolve_attack(const AttackFlags& f, const AttackConfig& base) {
  if (f.kind == "none") {
    if (!f.fields.empty()) throw ConfigError("attack parameters given without --attack");
    return std::nullopt;
  }
  RunConfig scratch;
  scratch.attack = base;
  KeyValues kv;
  if (to_string(kind_of(base)) != f.kind) kv["attack.kind"] = f.kind;
  for (const auto& [k, v] : f.fields) kv["attack." + k] = v;
  apply_key_values(scratch, kv);
  validate_attack(scratch.attack);
  return scratch.attack;
}

Dataset data_or_generate(const std::string& path, const RunConfig& cfg) {
  return path.empty() ? generate_dataset(cfg.data) : load_dataset(path);
}

/// Checkpointed model, or a freshly initialised one from the config.
Model model_or_init(const std::string& checkpoint, const RunConfig& cfg, std::uint64_t seed) {
  return checkpoint.empty() ? cfg.make_model(seed) : load_checkpoint(checkpoint).model;
}

VideoBatch pick_samples(const VideoBatch& split, std::size_t index, std::size_t count) {
  if (index >= split.size()) {
    throw ConfigError("sample index " + std::to_string(index) + " out of range for " +
                      std::to_string(split.size()) + " test samples");
  }
  return split.slice(index, std::min(split.size(), index + count));
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"OUDefend video classifier toolkit"};
  app.require_subcommand(1);
  app.fallthrough();
  Common common;
  app.add_option("--config", common.config_path, "key = value configuration file")->check(CLI::ExistingFile);
  app.add_option("--set", common.overrides, "override a config key (section.key=value); repeatable");
  app.add_option("--seed", common.seed, "seed for every random choice of the command");

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "generate the synthetic motion dataset");
  std::string gen_out;
  gen->add_option("--out", gen_out, "dataset file to write")->required();

  // train
  auto* train = app.add_subcommand("train", "train a model and write a checkpoint");
  std::string train_data, train_out, train_report, train_mode, eval_attacks = "none";
  std::optional<std::size_t> train_epochs;
  train->add_option("--data", train_data, "dataset file (generated from the config when omitted)");
  train->add_option("--out", train_out, "checkpoint file to write")->required();
  train->add_option("--report", train_report, "also write the per-epoch report here");
  train->add_option("--mode", train_mode, "clean or adversarial");
  train->add_option("--epochs", train_epochs, "number of epochs");
  train->add_option("--eval-attacks", eval_attacks, "attacks evaluated after the last epoch: none, all, or the configured one")
      ->check(CLI::IsMember({"none", "all", "configured"}));

  // eval
  auto* eval = app.add_subcommand("eval", "test accuracy of a checkpoint");
  std::string eval_ckpt, eval_data;
  AttackFlags eval_attack;
  eval->add_option("--checkpoint", eval_ckpt, "checkpoint file")->required()->check(CLI::ExistingFile);
  eval->add_option("--data", eval_data, "dataset file (generated from the checkpoint config when omitted)");
  eval_attack.add_to(eval, "none, all, or one attack kind");

  // attack
  auto* attack = app.add_subcommand("attack", "attack test videos and certify the constraints");
  std::string atk_ckpt, atk_data;
  std::size_t atk_index = 0, atk_count = 8;
  AttackFlags atk_flags;
  atk_flags.kind = "pgd_linf";
  attack->add_option("--checkpoint", atk_ckpt, "checkpoint file (a fresh model when omitted)")->check(CLI::ExistingFile);
  attack->add_option("--data", atk_data, "dataset file (generated from the config when omitted)");
  attack->add_option("--index", atk_index, "first test sample");
  attack->add_option("--count", atk_count, "number of test samples")->check(CLI::PositiveNumber);
  atk_flags.add_to(attack, "attack kind");

  // grad-check
  auto* grad = app.add_subcommand("grad-check", "finite-difference check of every layer and the full model");
  std::size_t trials = 20, model_trials = 1;
  grad->add_option("--trials", trials, "random instances per layer")->check(CLI::PositiveNumber);
  grad->add_option("--model-trials", model_trials, "full-model instances")->check(CLI::PositiveNumber);

  // export-features
  auto* feat = app.add_subcommand("export-features", "write per-frame stage activations as images");
  std::string feat_ckpt, feat_data, feat_out, feat_stage = "conv2";
  std::size_t feat_index = 0;
  AttackFlags feat_attack;
  feat->add_option("--checkpoint", feat_ckpt, "checkpoint file (a fresh model when omitted)")->check(CLI::ExistingFile);
  feat->add_option("--data", feat_data, "dataset file (generated from the config when omitted)");
  feat->add_option("--index", feat_index, "test sample to export");
  feat->add_option("--stage", feat_stage, "conv2, conv3, conv4 or conv5");
  feat->add_option("--out", feat_out, "output directory")->required();
  feat_attack.add_to(feat, "none or one attack kind");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitUsage;
  }

  try {
    RunConfig cfg = load_config(common);

    if (*gen) {
      if (common.seed) cfg.data.seed = *common.seed;
      const auto d = generate_dataset(cfg.data);
      save_dataset(gen_out, d);
      std::cout << "wrote " << gen_out << " train=" << d.train.size() << " test=" << d.test.size() << '\n';
      return 0;
    }

    if (*train) {
      if (common.seed) cfg.train.seed = *common.seed;
      if (!train_mode.empty()) cfg.train.mode = parse_train_mode(train_mode);
      if (train_epochs) cfg.train.epochs = *train_epochs;
      cfg.train.validate();
      const auto d = data_or_generate(train_data, cfg);
      std::vector<AttackConfig> attacks;
      if (eval_attacks == "all") {
        for (auto k : kAllAttacks) attacks.push_back(default_attack(k));
      } else if (eval_attacks == "configured") {
        attacks.push_back(cfg.attack);
      }
      TrainState state(cfg.make_model(cfg.train.seed));
      const auto report = fit(state, d.train, d.test, cfg.train, attacks);
      save_checkpoint(train_out, Checkpoint{cfg, state.model, state.epoch});
      const auto tsv = report.to_tsv();
      std::cout << tsv;
      if (!train_report.empty()) {
        std::ofstream out(train_report);
        out << tsv;
        if (!out) throw FormatError("cannot write " + train_report);
      }
      return 0;
    }

    if (*eval) {
      const auto ck = load_checkpoint(eval_ckpt);
      const auto d = data_or_generate(eval_data, ck.config);
      std::cout << "clean_acc=" << fixed2(evaluate(ck.model, d.test)) << '\n';
      if (eval_attack.kind == "all") {
        if (!eval_attack.fields.empty()) throw ConfigError("attack parameters need a single --attack kind");
        std::vector<double> accs;
        for (auto k : kAllAttacks) {
          accs.push_back(evaluate(ck.model, d.test, default_attack(k)));
          std::cout << to_string(k) << "_acc=" << fixed2(accs.back()) << '\n';
        }
        std::cout << "avg_adv=" << fixed2(avg_adv(accs)) << '\n';
      } else if (auto a = resolve_attack(eval_attack, ck.config.attack)) {
        std::cout << attack_name(*a) << "_acc=" << fixed2(evaluate(ck.model, d.test, *a)) << '\n';
      }
      return 0;
    }

    if (*attack) {
      const auto a = resolve_attack(atk_flags, cfg.attack);
      if (!a) throw ConfigError("attack needs an attack kind");
      const auto model = model_or_init(atk_ckpt, cfg, common.seed.value_or(cfg.train.seed));
      const auto batch = pick_samples(data_or_generate(atk_data, cfg).test, atk_index, atk_count);
      const auto result = run_attack(model_objective(model, batch.labels), batch.pixels, *a);
      const auto report = verify_attack_constraints(batch.pixels, result, *a);
      std::cout << "attack=" << report.attack << " samples=" << batch.size() << '\n';
      for (const auto& c : report.checks) {
        std::cout << c.name << " measured=" << real(c.measured) << " bound=" << real(c.bound) << ' '
                  << (c.passed ? "pass" : "FAIL") << '\n';
      }
      std::cout << "loss_start=" << real(result.loss_trace.front()) << " loss_end=" << real(result.loss_trace.back())
                << '\n';
      const auto clean_pred = predict(model, batch.pixels), adv_pred = predict(model, result.x_adv);
      std::size_t clean_ok = 0, adv_ok = 0;
      for (std::size_t i = 0; i < batch.size(); ++i) {
        clean_ok += clean_pred[i] == batch.labels[i];
        adv_ok += adv_pred[i] == batch.labels[i];
      }
      std::cout << "correct_clean=" << clean_ok << " correct_adv=" << adv_ok << '\n';
      std::cout << "constraints=" << (report.passed() ? "pass" : "FAIL") << '\n';
      return report.passed() ? 0 : kExitRuntime;
    }

    if (*grad) {
      const auto results = run_gradient_checks(trials, common.seed.value_or(0), model_trials);
      bool ok = true;
      for (const auto& r : results) {
        std::cout << r.name << " trials=" << r.trials << " worst=" << real(r.worst) << " tol=" << real(r.tolerance)
                  << ' ' << (r.passed() ? "pass" : "FAIL") << '\n';
        ok = ok && r.passed();
      }
      std::cout << "gradcheck=" << (ok ? "pass" : "FAIL") << '\n';
      return ok ? 0 : kExitRuntime;
    }

    if (*feat) {
      const Stage stage = parse_stage(feat_stage);
      if (stage == Stage::none) throw ConfigError("unknown stage 'none'");
      RunConfig model_cfg = feat_ckpt.empty() ? cfg : load_checkpoint(feat_ckpt).config;
      const auto model = model_or_init(feat_ckpt, cfg, common.seed.value_or(cfg.train.seed));
      const auto sample = pick_samples(data_or_generate(feat_data, model_cfg).test, feat_index, 1);
      const auto a = resolve_attack(feat_attack, model_cfg.attack);
      const auto out = export_feature_maps(model, sample.pixels, sample.labels[0], stage, a, feat_out);
      for (const auto& f : out.files) std::cout << f << '\n';
      std::cout << "files=" << out.files.size() << '\n';
      return 0;
    }
  } catch (const ConfigError& e) {
    std::cerr << "oudefend: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "oudefend: " << e.what() << '\n';
    return kExitRuntime;
  }
  return kExitUsage;
}
