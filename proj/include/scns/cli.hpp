#pragma once

#include <CLI11.hpp>
#include <json.hpp>

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "scns/config.hpp"
#include "scns/stats.hpp"
#include "scns/theory.hpp"
#include "scns/training.hpp"

namespace scns {

inline const std::vector<std::string>& cli_commands() {
  static const std::vector<std::string> c{"train", "kd", "sample-audit", "theory-ccp", "theory-mi", "convergence"};
  return c;
}

inline std::string cli_usage() {
  return "usage: scns <command> [options]\n"
         "commands:\n"
         "  train         supervised training (CE, optionally InfoNCE with sampled negatives)\n"
         "  kd            teacher-student distillation\n"
         "  sample-audit  chi-square check of the configured negative sampler\n"
         "  theory-ccp    coupon-collector sample complexity: analytic vs Monte Carlo\n"
         "  theory-mi     mutual-information bounds for uniform and top-k negatives\n"
         "  convergence   epochs to a train-accuracy threshold per sampler and seed\n"
         "options: --config PATH --seed INT --out DIR --trials INT --threads INT\n"
         "         theory-ccp also takes --M --k --b --probs p1,p2,...\n"
         "run 'scns <command> --help' for details\n";
}

namespace cli_detail {

struct Options {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out = "out";
  std::optional<std::uint64_t> trials;
  unsigned threads = 1;
  bool timing = false;
  std::optional<std::size_t> m, k, b;
  std::string probs;
  std::ostream* err = nullptr;  // progress notes and warnings
};

inline std::string fmt(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  std::ostringstream os;
  os << std::setprecision(9) << v;
  return os.str();
}

// JSON number, or null for NaN / infinity.
inline nlohmann::json jnum(double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); }

/// Config for a command. Theory commands may run without a file; their seed
/// then defaults to 0.
inline ExperimentConfig load_config(const Options& o, bool file_optional) {
  if (o.config.empty()) {
    if (!file_optional && !o.seed) throw Error("cli: --config is required (or at least --seed)");
    return parse_config_text("", o.seed.value_or(0));
  }
  return parse_config(o.config, o.seed);
}

struct Output {
  std::filesystem::path dir;

  Output(const Options& o, const std::string& command, const ExperimentConfig& cfg) {
    dir = std::filesystem::path(o.out) / (command + "-" + std::to_string(cfg.seed.value()));
    std::filesystem::create_directories(dir);
    write("config.resolved", serialize_config(cfg));
  }

  std::ofstream open(const std::string& name) const {
    std::ofstream f(dir / name, std::ios::binary);
    if (!f) throw Error("cli: cannot write " + (dir / name).string());
    return f;
  }

  void write(const std::string& name, const std::string& text) const { open(name) << text; }

  void json(const nlohmann::json& j) const { write("summary.json", j.dump(2) + "\n"); }
};

inline nlohmann::json log_summary(const MetricsLog& log) {
  const auto& last = log.rows.back();
  return {{"epochs", last.epoch},
          {"final_train_loss", jnum(last.train_loss)},
          {"final_train_acc", jnum(last.train_acc)},
          {"final_eval_acc", jnum(last.eval_acc)}};
}

inline TrainingOptions training_options(const Options& o) {
  TrainingOptions t;
  t.record_timing = o.timing;
  return t;
}

inline Mlp obtain_teacher(const ExperimentConfig& cfg, const PreparedData& data, const Output& out,
                          const TrainingOptions& opts, std::ostream& log) {
  if (!cfg.model.teacher_checkpoint.empty()) {
    std::ifstream in(cfg.model.teacher_checkpoint);
    if (!in) throw Error("cli: cannot open teacher checkpoint " + cfg.model.teacher_checkpoint);
    Mlp t = Mlp::load(in);
    if (t.shape().input != data.train.dim() || t.shape().classes != data.train.classes) {
      throw ShapeError("cli: teacher checkpoint does not match the dataset");
    }
    return t;
  }
  Mlp t = train_teacher(cfg, data, opts);
  auto f = out.open("teacher.ckpt");
  t.save(f);
  log << "teacher: trained " << cfg.model.teacher_epochs << " epochs, train acc " << fmt(evaluate(t, data.train))
      << '\n';
  return t;
}

inline void write_metrics(const Output& out, const TrainResult& r) {
  auto f = out.open("metrics.csv");
  r.log.write_csv(f);
  auto ck = out.open("model.ckpt");
  r.model.save(ck);
}

inline int cmd_train(const Options& o, std::ostream& log) {
  const ExperimentConfig cfg = load_config(o, false);
  const Output out(o, "train", cfg);
  const PreparedData data = prepare_data(cfg);
  const auto opts = training_options(o);
  std::optional<Mlp> teacher;
  if (cfg.loss.alpha > 0.0 && cfg.sampler.variant == SamplerVariant::InstanceScns) {
    teacher = obtain_teacher(cfg, data, out, opts, *o.err);
  }
  const TrainResult r = train_supervised(cfg, data, teacher ? &*teacher : nullptr, opts);
  for (const auto& w : r.warnings) *o.err << "warning: " << w << '\n';
  write_metrics(out, r);
  nlohmann::json j = log_summary(r.log);
  j["command"] = "train";
  j["seed"] = *cfg.seed;
  j["variant"] = to_string(cfg.sampler.variant);
  out.json(j);
  const auto& last = r.log.rows.back();
  log << "train: " << last.epoch << " epochs, train acc " << fmt(last.train_acc) << ", eval acc "
      << fmt(last.eval_acc) << " -> " << out.dir.string() << '\n';
  return 0;
}

inline int cmd_kd(const Options& o, std::ostream& log) {
  const ExperimentConfig cfg = load_config(o, false);
  const Output out(o, "kd", cfg);
  const PreparedData data = prepare_data(cfg);
  const auto opts = training_options(o);
  const Mlp teacher = obtain_teacher(cfg, data, out, opts, *o.err);
  const TrainResult r = train_kd(cfg, data, teacher, opts);
  for (const auto& w : r.warnings) *o.err << "warning: " << w << '\n';
  write_metrics(out, r);
  nlohmann::json j = log_summary(r.log);
  j["command"] = "kd";
  j["seed"] = *cfg.seed;
  j["variant"] = to_string(cfg.sampler.variant);
  j["teacher_train_acc"] = jnum(evaluate(teacher, data.train));
  j["teacher_eval_acc"] = jnum(evaluate(teacher, data.eval));
  out.json(j);
  const auto& last = r.log.rows.back();
  log << "kd: " << last.epoch << " epochs, student train acc " << fmt(last.train_acc) << ", eval acc "
      << fmt(last.eval_acc) << " -> " << out.dir.string() << '\n';
  return 0;
}

// Draws negatives for the first sample of every class and tests the counts
// against the declared probabilities. The per-anchor significance is
// Bonferroni-corrected so the overall level stays 0.01.
inline int cmd_sample_audit(const Options& o, std::ostream& log) {
  const ExperimentConfig cfg = load_config(o, false);
  const Output out(o, "sample-audit", cfg);
  const PreparedData data = prepare_data(cfg);
  std::optional<Matrix> hidden;
  if (cfg.sampler.variant == SamplerVariant::InstanceScns) {
    const Mlp teacher = obtain_teacher(cfg, data, out, training_options(o), *o.err);
    hidden = teacher.forward(data.train.inputs).hidden;
  }
  const auto dist = build_sampler(cfg, data, hidden ? &*hidden : nullptr);
  for (const auto& w : dist.warnings()) *o.err << "warning: " << w << '\n';
  const std::uint64_t draws = o.trials.value_or(100000);
  const auto& index = dist.index();
  std::vector<std::size_t> anchors;
  for (std::size_t c = 0; c < index.class_count(); ++c) {
    if (!index.members(c).empty()) anchors.push_back(index.members(c).front());
  }
  const double level = 0.01 / static_cast<double>(anchors.size());
  CounterRng rng(*cfg.seed, kSamplerStream);
  auto csv = out.open("metrics.csv");
  csv << "anchor,class,draws,chi2,dof,p_value,same_class_draws\n";
  double min_p = 1.0;
  std::uint64_t same_class = 0;
  for (auto a : anchors) {
    std::vector<std::uint64_t> counts(index.size(), 0);
    std::uint64_t same = 0;
    for (std::uint64_t t = 0; t < draws; ++t) {
      const auto d = dist.draw(a, rng);
      ++counts[d.sample];
      same += index.label(d.sample) == index.label(a);
    }
    std::vector<double> probs(index.size());
    for (std::size_t j = 0; j < probs.size(); ++j) probs[j] = dist.probability(a, j);
    const auto chi = chi_square_gof(counts, probs);
    min_p = std::min(min_p, chi.p_value);
    same_class += same;
    csv << a << ',' << index.label(a) << ',' << draws << ',' << fmt(chi.statistic) << ',' << chi.dof << ','
        << fmt(chi.p_value) << ',' << same << '\n';
  }
  {
    auto f = out.open("distribution.csv");
    write_distribution_csv(f, dist);
  }
  const bool pass = min_p > level && same_class == 0;
  out.json({{"command", "sample-audit"},
            {"seed", *cfg.seed},
            {"variant", to_string(cfg.sampler.variant)},
            {"anchors", anchors.size()},
            {"draws_per_anchor", draws},
            {"min_p_value", jnum(min_p)},
            {"level_per_anchor", level},
            {"same_class_draws", same_class},
            {"pass", pass}});
  log << "sample-audit: " << to_string(cfg.sampler.variant) << " chi-square " << (pass ? "PASS" : "FAIL")
      << " (min p " << fmt(min_p) << ", level " << fmt(level) << ", same-class draws " << same_class << ")\n";
  return pass ? 0 : 1;
}

inline int cmd_theory_ccp(const Options& o, std::ostream& log) {
  ExperimentConfig cfg = load_config(o, true);
  if (o.m) cfg.theory.m = *o.m;
  if (o.k) cfg.theory.k = *o.k;
  if (o.b) cfg.theory.b = *o.b;
  if (o.trials) cfg.theory.trials = *o.trials;
  if (!o.probs.empty()) {
    cfg.theory.probs.clear();
    for (const auto& p : config_detail::split(o.probs, ',')) {
      try {
        cfg.theory.probs.push_back(config_detail::to_real(p));
      } catch (const std::invalid_argument&) {
        throw Error("cli: --probs entry '" + p + "' is not a number");
      }
    }
  }
  validate(cfg);
  const Output out(o, "theory-ccp", cfg);
  const auto& t = cfg.theory;
  MonteCarloOptions mc{t.trials, *cfg.seed, o.threads};
  auto csv = out.open("metrics.csv");
  csv << "estimator,M,k_or_b,analytic,mc_mean,mc_ci95,trials\n";
  nlohmann::json rows = nlohmann::json::array();
  auto emit = [&](const std::string& name, std::size_t m, std::size_t kb, const CcpEstimate& e) {
    csv << name << ',' << m << ',' << kb << ',' << fmt(e.analytic) << ',' << fmt(e.mc_mean) << ','
        << fmt(e.mc_ci95) << ',' << e.trials << '\n';
    rows.push_back({{"estimator", name},
                    {"M", m},
                    {"k_or_b", kb},
                    {"analytic", jnum(e.analytic)},
                    {"mc_mean", jnum(e.mc_mean)},
                    {"mc_ci95", jnum(e.mc_ci95)},
                    {"trials", e.trials}});
    log << "theory-ccp: " << name << " M=" << m << " k_or_b=" << kb << " analytic " << fmt(e.analytic)
        << ", Monte Carlo " << fmt(e.mc_mean) << " +/- " << fmt(e.mc_ci95) << " (" << e.trials << " trials)\n";
  };
  emit("uniform_draws", t.m, t.k, ccp_uniform_draws(t.m, t.k, mc));
  if (o.b || t.b > 1) emit("batched", t.m, t.b, ccp_batched(t.m, t.b, mc));
  if (!t.probs.empty()) emit("unequal", t.probs.size(), t.probs.size(), ccp_unequal(t.probs, mc));
  out.json({{"command", "theory-ccp"}, {"seed", *cfg.seed}, {"rows", rows}});
  return 0;
}

// Mutual-information bounds on the configured data: for [theory].anchors
// anchors, the top-k set is the anchor's k most cosine-similar other-class
// samples and the rest set all other other-class samples.
inline int cmd_theory_mi(const Options& o, std::ostream& log) {
  ExperimentConfig cfg = load_config(o, true);
  const Output out(o, "theory-mi", cfg);
  const PreparedData data = prepare_data(cfg);
  const auto& t = cfg.theory;
  const DatasetIndex index(data.train.labels, data.train.classes);
  const std::size_t n = index.size();
  if (t.anchors > n) throw BoundsError("cli: [theory].anchors exceeds the dataset size");
  const EmbeddingMatrix reps(data.train.inputs);
  const auto dist = build_instance_scns(reps, index, t.k, cfg.sampler.sharpness);
  CounterRng rng(*cfg.seed, kSamplerStream);
  std::vector<std::size_t> pool(n);
  for (std::size_t i = 0; i < n; ++i) pool[i] = i;
  detail::shuffle(pool, rng);
  std::vector<AnchorNegatives> anchors;
  for (std::size_t a = 0; a < t.anchors; ++a) {
    AnchorNegatives e;
    e.anchor = pool[a];
    const auto idx = dist.table()->indices(e.anchor);
    e.topk.assign(idx.begin(), idx.end());
    std::vector<std::uint8_t> in_top(n, 0);
    for (auto j : e.topk) in_top[j] = 1;
    for (std::size_t j = 0; j < n; ++j) {
      if (!in_top[j] && index.label(j) != index.label(e.anchor)) e.rest.push_back(j);
    }
    anchors.push_back(std::move(e));
  }
  const auto r = alignment_report(reps, anchors, t.loss);
  auto csv = out.open("metrics.csv");
  csv << "anchor,a_topk,a_rest,omega\n";
  for (std::size_t i = 0; i < anchors.size(); ++i) {
    csv << anchors[i].anchor << ',' << fmt(r.a_topk[i]) << ',' << fmt(r.a_rest[i]) << ','
        << fmt(r.omega_per_anchor[i]) << '\n';
  }
  out.json({{"command", "theory-mi"},
            {"seed", *cfg.seed},
            {"anchors", anchors.size()},
            {"k", t.k},
            {"loss", t.loss},
            {"omega_total", jnum(r.omega_total)},
            {"bound_uniform", jnum(r.bound_uniform)},
            {"bound_scns", jnum(r.bound_scns)}});
  log << "theory-mi: " << anchors.size() << " anchors, k=" << t.k << ", omega " << fmt(r.omega_total)
      << ", bound uniform " << fmt(r.bound_uniform) << ", bound top-k " << fmt(r.bound_scns) << '\n';
  return 0;
}

inline int cmd_convergence(const Options& o, std::ostream& log) {
  const ExperimentConfig cfg = load_config(o, false);
  const Output out(o, "convergence", cfg);
  const auto table = convergence_experiment(cfg, o.threads, training_options(o));
  {
    auto f = out.open("metrics.csv");
    table.write_csv(f);
  }
  {
    auto f = out.open("summary.csv");
    table.write_summary_csv(f);
  }
  nlohmann::json summary = nlohmann::json::array();
  for (const auto& s : table.summary) {
    summary.push_back({{"variant", to_string(s.variant)}, {"median_epochs", jnum(s.median)},
                       {"mean_epochs", jnum(s.mean)}});
  }
  out.json({{"command", "convergence"},
            {"seed", *cfg.seed},
            {"mode", to_string(cfg.convergence.mode)},
            {"threshold", cfg.convergence.threshold},
            {"seeds", cfg.convergence.seeds},
            {"summary", summary}});
  log << "convergence:";
  for (const auto& s : table.summary) log << ' ' << to_string(s.variant) << " median " << fmt(s.median);
  log << " (epochs to train acc " << fmt(cfg.convergence.threshold) << ")\n";
  return 0;
}

}  // namespace cli_detail

/// Runs one command. Returns the process exit status: 0 success, 1 on any
/// error, 2 for usage errors.
inline int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  using namespace cli_detail;
  if (args.empty() || args[0] == "--help" || args[0] == "-h") {
    (args.empty() ? err : out) << cli_usage();
    return args.empty() ? 2 : 0;
  }
  const std::string command = args[0];
  if (std::find(cli_commands().begin(), cli_commands().end(), command) == cli_commands().end()) {
    err << "unknown command '" << command << "'\n" << cli_usage();
    return 2;
  }

  CLI::App app("scns " + command, "scns " + command);
  Options o;
  o.err = &err;
  app.add_option("--config", o.config, "config file");
  app.add_option("--seed", o.seed, "seed (overrides the config)");
  app.add_option("--out", o.out, "output root; results go to <out>/<command>-<seed>/")->capture_default_str();
  app.add_option("--threads", o.threads, "worker threads")->check(CLI::PositiveNumber)->capture_default_str();
  if (command == "theory-ccp" || command == "theory-mi" || command == "sample-audit") {
    app.add_option("--trials", o.trials, "Monte Carlo trials (draws per anchor for sample-audit)")
        ->check(CLI::PositiveNumber);
  }
  if (command == "theory-ccp") {
    app.add_option("--M", o.m, "number of negatives");
    app.add_option("--k", o.k, "size of the top-k set");
    app.add_option("--b", o.b, "batch size");
    app.add_option("--probs", o.probs, "comma-separated probabilities for unequal draws");
  }
  if (command == "train" || command == "kd" || command == "convergence") {
    app.add_flag("--timing", o.timing, "record wall-clock ms per epoch (output is then not reproducible)");
  }
  std::vector<std::string> rest(args.begin() + 1, args.end());
  std::reverse(rest.begin(), rest.end());  // CLI11 consumes a reversed vector
  try {
    app.parse(rest);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::ParseError& e) {
    err << command << ": " << e.what() << '\n' << app.help();
    return 2;
  }

  try {
    if (command == "train") return cmd_train(o, out);
    if (command == "kd") return cmd_kd(o, out);
    if (command == "sample-audit") return cmd_sample_audit(o, out);
    if (command == "theory-ccp") return cmd_theory_ccp(o, out);
    if (command == "theory-mi") return cmd_theory_mi(o, out);
    return cmd_convergence(o, out);
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }
}

}  // namespace scns
