// Acceptance checks. One PASS/FAIL line per criterion; exit status 1 if any
// criterion fails. Pass criterion names as arguments to run a subset.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "scns/config.hpp"
#include "scns/contrast_memory.hpp"
#include "scns/gradient_check.hpp"
#include "scns/losses.hpp"
#include "scns/sampling.hpp"
#include "scns/stats.hpp"
#include "scns/theory.hpp"
#include "scns/training.hpp"

using namespace scns;

namespace {

// Tolerances and budgets.
constexpr double kCcpMcRelTol = 0.005;
constexpr std::uint64_t kCcpTrials = 1000000;
constexpr double kCcpBatchedTol = 1e-9;
constexpr double kCcpUnequalRelTol = 1e-6;
constexpr double kCcpBudgetSec = 300.0;

constexpr double kFdStep = 1e-5;
constexpr double kSmoothRelTol = 1e-6;
constexpr double kHingeRelTol = 1e-5;
constexpr int kGradInstances = 100;
constexpr double kGradBudgetSec = 120.0;

constexpr std::uint64_t kSamplerDraws = 100000;
constexpr double kChiSquareLevel = 0.01;

constexpr double kNormTol = 1e-9;
constexpr int kNormStates = 10000;

constexpr double kMixupTol = 1e-12;
constexpr std::uint64_t kBetaDraws = 100000;
constexpr double kBetaMeanTol = 0.01;

constexpr double kSymmetricTol = 1e-12;

constexpr double kExperimentBudgetSec = 900.0;
constexpr double kKdMinGainPoints = 1.0;

struct Outcome {
  bool pass = false;
  std::string detail;
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string num(double v, int precision = 6) {
  std::ostringstream os;
  os.precision(precision);
  os << v;
  return os.str();
}

Vector randn(std::size_t n, CounterRng& rng, double scale = 1.0) {
  Vector v(n);
  for (double& x : v) x = scale * rng.normal();
  return v;
}

Vector unit(std::size_t d, CounterRng& rng) {
  Vector v = randn(d, rng);
  const double n = norm2(v);
  for (double& x : v) x /= n;
  return v;
}

Matrix as_matrix(const Vector& v, std::size_t rows, std::size_t cols) { return Matrix(rows, cols, v); }

// ---------------------------------------------------------------------------

Outcome ccp_exactness() {
  const auto t0 = std::chrono::steady_clock::now();
  double worst_mc = 0.0;
  std::string worst_at;
  for (std::size_t m = 2; m <= 12; ++m) {
    for (std::size_t k = 1; k <= m; ++k) {
      MonteCarloOptions mc;
      mc.trials = kCcpTrials;
      mc.seed = 1000 * m + k;
      const auto e = ccp_uniform_draws(m, k, mc);
      const double rel = std::abs(e.mc_mean - e.analytic) / e.analytic;
      if (rel > worst_mc) {
        worst_mc = rel;
        worst_at = "M=" + std::to_string(m) + ",k=" + std::to_string(k);
      }
    }
  }
  double worst_batched = 0.0;
  for (std::size_t m = 1; m <= 20; ++m) {
    double h = 0.0;
    for (std::size_t i = 1; i <= m; ++i) h += 1.0 / static_cast<double>(i);
    worst_batched = std::max(worst_batched, std::abs(ccp_batched_analytic(m, 1) - static_cast<double>(m) * h));
  }
  CounterRng rng(77, 0);
  double worst_unequal = 0.0;
  for (int t = 0; t < 100; ++t) {
    Vector p(2 + rng.index(11));
    for (double& x : p) x = 0.05 + rng.uniform();
    const double s = std::accumulate(p.begin(), p.end(), 0.0);
    for (double& x : p) x /= s;
    const double ie = ccp_unequal_inclusion_exclusion(p);
    worst_unequal = std::max(worst_unequal, std::abs(ccp_unequal_quadrature(p) - ie) / ie);
  }
  const double secs = seconds_since(t0);
  const bool pass = worst_mc < kCcpMcRelTol && worst_batched < kCcpBatchedTol &&
                    worst_unequal < kCcpUnequalRelTol && secs <= kCcpBudgetSec;
  return {pass, "max MC rel err " + num(worst_mc) + " (" + worst_at + "), batched abs err " + num(worst_batched) +
                    ", unequal rel err " + num(worst_unequal) + ", " + num(secs, 3) + " s"};
}

// ---------------------------------------------------------------------------

Outcome gradient_suite() {
  const auto t0 = std::chrono::steady_clock::now();
  struct Case {
    std::string name;
    double tol;
    std::function<GradientReport(CounterRng&)> run;
  };
  std::vector<Case> cases;
  cases.push_back({"ce", kSmoothRelTol, [](CounterRng& rng) {
                     const std::size_t target = rng.index(5);
                     const double tau = 0.5 + 3.0 * rng.uniform();
                     return check_gradient(
                         [&](const GradientInputs& in) { return cross_entropy(in.at("logits"), target, tau); },
                         {{"logits", randn(5, rng, 2.0)}}, kFdStep, kSmoothRelTol);
                   }});
  cases.push_back({"kld", kSmoothRelTol, [](CounterRng& rng) {
                     const Vector teacher = randn(6, rng, 2.0);
                     const double tau = 1.0 + 4.0 * rng.uniform();
                     return check_gradient(
                         [&](const GradientInputs& in) { return kld(teacher, in.at("student"), tau); },
                         {{"student", randn(6, rng, 2.0)}}, kFdStep, kSmoothRelTol);
                   }});
  cases.push_back({"kd_combined", kSmoothRelTol, [](CounterRng& rng) {
                     const Vector teacher = randn(5, rng, 2.0);
                     const std::size_t target = rng.index(5);
                     const double alpha = rng.uniform(), tau = 1.0 + 4.0 * rng.uniform();
                     return check_gradient(
                         [&](const GradientInputs& in) {
                           return kd_combined(in.at("student"), teacher, target, alpha, tau);
                         },
                         {{"student", randn(5, rng, 2.0)}}, kFdStep, kSmoothRelTol);
                   }});
  // Moderate input scale: saturated softmax weights fall below what central
  // differences can resolve.
  cases.push_back({"infonce", kSmoothRelTol, [](CounterRng& rng) {
                     const std::size_t m = 1 + rng.index(5), d = 4;
                     const double tau = 0.3 + rng.uniform();
                     return check_gradient(
                         [&](const GradientInputs& in) {
                           return infonce(in.at("z_star"), in.at("z_plus"), as_matrix(in.at("negatives"), m, d),
                                          tau);
                         },
                         {{"z_star", randn(d, rng, 0.5)},
                          {"z_plus", randn(d, rng, 0.5)},
                          {"negatives", randn(m * d, rng, 0.5)}},
                         kFdStep, kSmoothRelTol);
                   }});
  cases.push_back({"mixup_kld", kSmoothRelTol, [](CounterRng& rng) {
                     const Vector teacher = mixup(randn(4, rng), randn(4, rng), rng.uniform());
                     const double tau = 1.0 + 4.0 * rng.uniform();
                     return check_gradient(
                         [&](const GradientInputs& in) { return mixup_kld(in.at("student"), teacher, tau); },
                         {{"student", randn(4, rng)}}, kFdStep, kSmoothRelTol);
                   }});
  for (Kernel kernel : {Kernel::Linear, Kernel::Rbf}) {
    cases.push_back({"triplet_cka_" + to_string(kernel), kHingeRelTol, [kernel](CounterRng& rng) {
                       const std::size_t m = 4;
                       const double zeta = 0.3 + 0.6 * rng.uniform();
                       // Margin 2 exceeds any alignment difference, so the hinge is active.
                       auto fn = [&](const GradientInputs& in) {
                         return triplet_cka_loss(as_matrix(in.at("zs_star"), m, 3), as_matrix(in.at("zs_plus"), m, 3),
                                                 as_matrix(in.at("zs_minus"), m, 3),
                                                 as_matrix(in.at("zt_star"), m, 3), zeta, 2.0, kernel);
                       };
                       GradientInputs in{{"zs_star", randn(m * 3, rng)},
                                         {"zs_plus", randn(m * 3, rng)},
                                         {"zs_minus", randn(m * 3, rng)},
                                         {"zt_star", randn(m * 3, rng)}};
                       auto r = check_gradient(fn, in, kFdStep, kHingeRelTol);
                       if (!(fn(in).value > 0.0)) r.pass = false;
                       return r;
                     }});
  }
  cases.push_back({"pearson_triplet", kHingeRelTol, [](CounterRng& rng) {
                     const std::size_t m = 1 + rng.index(4), d = 6;
                     const double zeta = rng.uniform();
                     auto fn = [&](const GradientInputs& in) {
                       return pearson_triplet_loss(as_matrix(in.at("zs_minus"), m, d), in.at("zs_plus"),
                                                   as_matrix(in.at("zt_minus"), m, d), in.at("zt_plus"), zeta, 2.5);
                     };
                     GradientInputs in{{"zs_minus", randn(m * d, rng)},
                                       {"zs_plus", randn(d, rng)},
                                       {"zt_minus", randn(m * d, rng)},
                                       {"zt_plus", randn(d, rng)}};
                     auto r = check_gradient(fn, in, kFdStep, kHingeRelTol);
                     if (!(fn(in).value > 0.0)) r.pass = false;
                     return r;
                   }});
  cases.push_back({"memory_nce", kSmoothRelTol, [](CounterRng& rng) {
                     const std::size_t nv = 1 + rng.index(6), nq = 1 + rng.index(4), d = 5;
                     const double tau = 0.1 + rng.uniform();
                     ContrastMemory mem(nv, nq, d, 0.5, tau, rng);
                     const std::size_t fill = rng.index(nq + 1);
                     for (std::size_t n = 0; n < fill; ++n) mem.enqueue(unit(d, rng));
                     const std::size_t target = rng.index(nv);
                     return check_gradient(
                         [&](const GradientInputs& in) { return mem.nce_objective(in.at("z"), target); },
                         {{"z", unit(d, rng)}}, kFdStep, kSmoothRelTol);
                   }});

  bool pass = true;
  std::string detail;
  std::uint64_t seed = 100;
  for (const auto& c : cases) {
    CounterRng rng(seed++, 0);
    double worst = 0.0;
    int failures = 0;
    for (int t = 0; t < kGradInstances; ++t) {
      const auto r = c.run(rng);
      worst = std::max(worst, r.max_relative_error);
      failures += !r.pass;
    }
    pass = pass && failures == 0 && worst < c.tol;
    detail += (detail.empty() ? "" : ", ") + c.name + " " + num(worst, 2);
  }
  const double secs = seconds_since(t0);
  pass = pass && secs <= kGradBudgetSec;
  return {pass, "max rel err: " + detail + "; " + num(secs, 3) + " s"};
}

// ---------------------------------------------------------------------------

Outcome sampler_fidelity() {
  // 5 classes x 50 samples.
  std::vector<std::size_t> labels;
  for (std::size_t c = 0; c < 5; ++c) labels.insert(labels.end(), 50, c);
  CounterRng rng(2024, 0);
  Matrix class_emb(5, 8), reps(250, 8);
  for (double& v : class_emb.data()) v = rng.normal();
  for (double& v : reps.data()) v = rng.normal();
  std::vector<std::pair<std::string, NegativeSamplingDistribution>> variants;
  variants.emplace_back("uniform", NegativeSamplingDistribution::uniform(DatasetIndex(labels)));
  variants.emplace_back("class", build_class_scns(EmbeddingMatrix(class_emb), DatasetIndex(labels), 2, 5.0));
  variants.emplace_back("instance", build_instance_scns(EmbeddingMatrix(reps), DatasetIndex(labels), 5, 5.0));
  bool pass = true;
  std::string detail;
  const std::size_t anchor = 63;
  for (const auto& [name, dist] : variants) {
    CounterRng draw_rng(31, 0);
    std::vector<std::uint64_t> counts(labels.size(), 0);
    std::uint64_t same = 0;
    for (std::uint64_t t = 0; t < kSamplerDraws; ++t) {
      const std::size_t s = dist.draw(anchor, draw_rng).sample;
      ++counts[s];
      same += labels[s] == labels[anchor];
    }
    std::vector<double> probs(labels.size());
    for (std::size_t j = 0; j < probs.size(); ++j) probs[j] = dist.probability(anchor, j);
    const auto chi = chi_square_gof(counts, probs);
    pass = pass && chi.p_value > kChiSquareLevel && same == 0;
    detail += (detail.empty() ? "" : ", ") + name + " p=" + num(chi.p_value, 3) + " (dof " +
              std::to_string(chi.dof) + ", same-class " + std::to_string(same) + ")";
  }
  return {pass, detail};
}

// ---------------------------------------------------------------------------

Outcome memory_normalization() {
  CounterRng rng(9, 0);
  double worst = 0.0;
  for (int t = 0; t < kNormStates; ++t) {
    const std::size_t nv = 1 + rng.index(6), nq = 1 + rng.index(5), fill = rng.index(nq + 3), d = 4;
    const double tau = 0.05 + rng.uniform();
    ContrastMemory mem(nv, nq, d, 0.5, tau, rng);
    for (std::size_t n = 0; n < fill; ++n) mem.enqueue(unit(d, rng));
    const Vector z = unit(d, rng);
    double total = 0.0;
    for (std::size_t i = 0; i < nv; ++i) total += mem.positive_prob(z, i);
    for (std::size_t n = 0; n < mem.queue_size(); ++n) total += mem.negative_prob(z, n);
    worst = std::max(worst, std::abs(total - 1.0));
  }
  // Symmetric case: every stored row equals e1.
  double worst_sym = 0.0;
  const std::size_t nv = 5, nq = 3;
  ContrastMemory mem(nv, nq, 3, 0.5, 0.07, rng);
  const Vector e1{1, 0, 0};
  for (std::size_t i = 0; i < nv; ++i) mem.set_value(i, e1);
  for (std::size_t n = 0; n < nq; ++n) mem.enqueue(e1);
  const Vector z{0.6, 0.8, 0.0};
  const double k = static_cast<double>(nv + nq);
  for (std::size_t i = 0; i < nv; ++i) worst_sym = std::max(worst_sym, std::abs(mem.positive_prob(z, i) - 1.0 / k));
  for (std::size_t n = 0; n < nq; ++n) worst_sym = std::max(worst_sym, std::abs(mem.negative_prob(z, n) - 1.0 / k));
  worst_sym = std::max(worst_sym, std::abs(mem.nce_loss_and_grad(z, 2).value - std::log(k)));
  return {worst < kNormTol && worst_sym < kNormTol,
          "max |sum - 1| " + num(worst, 3) + " over " + std::to_string(kNormStates) + " states, symmetric err " +
              num(worst_sym, 3)};
}

// ---------------------------------------------------------------------------

Outcome mixup_reductions() {
  CounterRng rng(10, 0);
  double worst = 0.0;
  for (int t = 0; t < 1000; ++t) {
    const Vector si = randn(6, rng, 2.0), sj = randn(6, rng, 2.0);
    const Vector ti = randn(6, rng, 2.0), tj = randn(6, rng, 2.0);
    const double tau = 1.0 + 4.0 * rng.uniform();
    const double mixed = mixup_kld(mixup(si, sj, 1.0), mixup(ti, tj, 1.0), tau).value;
    worst = std::max(worst, std::abs(mixed - kld(ti, si, tau).value));
  }
  CounterRng beta_rng(11, 0);
  double mean = 0.0;
  for (std::uint64_t t = 0; t < kBetaDraws; ++t) mean += sample_mixup(0.5, beta_rng).nu;
  mean /= static_cast<double>(kBetaDraws);
  return {worst <= kMixupTol && std::abs(mean - 0.5) <= kBetaMeanTol,
          "nu=1 max |mixup_kld - kld| " + num(worst, 3) + ", Beta(0.5,0.5) mean " + num(mean, 6)};
}

// ---------------------------------------------------------------------------

Outcome symmetric_alignment() {
  // Anchor e1; every negative is orthogonal to it, so both mean alignments are 1/2.
  const EmbeddingMatrix reps(Matrix{{1, 0, 0}, {0, 1, 0}, {0, 0, 1}, {0, -1, 0}, {0, 0, -1}});
  const std::size_t m = 8;
  std::vector<AnchorNegatives> anchors(m, AnchorNegatives{0, {1, 2}, {3, 4}});
  const double loss = 0.4;
  const auto r = alignment_report(reps, anchors, loss);
  const double omega_err = std::abs(r.omega_total - static_cast<double>(m) / 2.0);
  const double bound_err = std::abs(r.bound_scns - r.bound_uniform);
  return {omega_err <= kSymmetricTol && bound_err <= kSymmetricTol,
          "omega " + num(r.omega_total, 17) + " (M/2 = " + num(m / 2.0) + "), |bound_scns - bound_uniform| " +
              num(bound_err, 3)};
}

// ---------------------------------------------------------------------------

// Benchmark for the convergence ordering: distillation from a 30-epoch
// teacher, CE and mixed-feature KLD weighted equally, no memory NCE.
const char* kConvergenceConfig = R"(seed = 1
[dataset]
classes = 10
per_class = 500
dim = 32
separation = 3
eval_per_class = 0
[sampler]
k = 3
sharpness = 5
negatives = 4
[loss]
alpha = 0.5
nce_weight = 0
[optimizer]
epochs = 60
[model]
teacher_epochs = 30
[convergence]
mode = kd
variants = uniform,class,instance
seeds = 5
threshold = 0.95
)";

Outcome convergence_ordering() {
  const auto t0 = std::chrono::steady_clock::now();
  const ExperimentConfig cfg = parse_config_text(kConvergenceConfig);
  TrainingOptions opts;
  opts.record_timing = false;
  const auto table = convergence_experiment(cfg, 1, opts);
  const double u = table.of(SamplerVariant::Uniform).median;
  const double c = table.of(SamplerVariant::ClassScns).median;
  const double i = table.of(SamplerVariant::InstanceScns).median;
  std::string runs;
  for (const auto& r : table.runs) {
    runs += " " + to_string(r.variant).substr(0, 1) + std::to_string(r.seed) + "=" +
            (r.epochs ? std::to_string(*r.epochs) : "inf");
  }
  const double secs = seconds_since(t0);
  const bool pass = i <= c && c <= u && i < u && secs <= kExperimentBudgetSec;
  return {pass, "median epochs instance " + num(i) + ", class " + num(c) + ", uniform " + num(u) + "; " +
                    num(secs, 4) + " s;" + runs};
}

// ---------------------------------------------------------------------------

// Teacher epochs stay short: trained longer, the wider teacher overfits the
// overlapping classes and ends below the CE-only student.
const char* kKdConfig = R"(seed = 1
[dataset]
classes = 10
per_class = 500
dim = 32
separation = 2
eval_per_class = 500
[sampler]
variant = instance
k = 3
negatives = 4
[loss]
alpha = 0.9
[optimizer]
epochs = 30
[model]
teacher_epochs = 8
)";

constexpr std::size_t kKdSeeds = 5;

Outcome kd_benefit() {
  const auto t0 = std::chrono::steady_clock::now();
  const ExperimentConfig base = parse_config_text(kKdConfig);
  TrainingOptions opts;
  opts.record_timing = false;
  double gain = 0.0;
  std::string per_seed;
  for (std::size_t s = 0; s < kKdSeeds; ++s) {
    ExperimentConfig cfg = base;
    cfg.seed = *base.seed + s;
    const PreparedData data = prepare_data(cfg);
    const Mlp teacher = train_teacher(cfg, data, opts);
    ExperimentConfig ce = cfg;
    ce.loss = LossSpec{};
    const double acc_ce = train_supervised(ce, data, nullptr, opts).log.rows.back().eval_acc;
    const double acc_kd = train_kd(cfg, data, teacher, opts).log.rows.back().eval_acc;
    gain += 100.0 * (acc_kd - acc_ce) / static_cast<double>(kKdSeeds);
    per_seed += " seed " + std::to_string(*cfg.seed) + ": teacher " + num(100.0 * evaluate(teacher, data.eval), 4) +
                " ce " + num(100.0 * acc_ce, 4) + " kd " + num(100.0 * acc_kd, 4) + ";";
  }
  const double secs = seconds_since(t0);
  return {gain >= kKdMinGainPoints && secs <= kExperimentBudgetSec,
          "mean eval gain " + num(gain, 4) + " points; " + num(secs, 4) + " s;" + per_seed};
}

// ---------------------------------------------------------------------------

Outcome reduction_lattice() {
  ExperimentConfig base = parse_config_text(kConvergenceConfig);
  base.optimizer.epochs = 3;
  base.dataset.eval_per_class = 50;
  base.model.teacher_epochs = 3;
  TrainingOptions opts;
  opts.record_timing = false;
  opts.preflight = false;
  const PreparedData data = prepare_data(base);
  const Mlp teacher = train_teacher(base, data, opts);
  ExperimentConfig plain = base;
  plain.loss = LossSpec{};
  const auto reference = train_supervised(plain, data, nullptr, opts);

  // Every auxiliary weight zeroed while the other knobs keep non-default values.
  ExperimentConfig zeroed = base;
  zeroed.loss.alpha = 0.0;
  zeroed.loss.gamma_plus = 0.0;
  zeroed.loss.gamma_minus = 0.0;
  zeroed.loss.beta = 0.0;
  zeroed.loss.triplet_weight = 0.0;
  zeroed.loss.zeta = 0.8;
  zeroed.loss.margin = 1.0;
  zeroed.loss.tau = 2.0;
  zeroed.loss.nce_weight = 0.7;
  int checked = 0, matched = 0;
  auto same = [&](const TrainResult& r) {
    ++checked;
    if (r.log.same_trajectory(reference.log) && r.model.params() == reference.model.params()) ++matched;
  };
  for (auto variant : {SamplerVariant::Uniform, SamplerVariant::ClassScns, SamplerVariant::InstanceScns}) {
    ExperimentConfig c = zeroed;
    c.sampler.variant = variant;
    same(train_supervised(c, data, &teacher, opts));
    same(train_kd(c, data, teacher, opts));
  }
  // beta alone is inert while the term it mixes (alpha) is off.
  ExperimentConfig beta_only = zeroed;
  beta_only.loss.beta = 0.5;
  same(train_supervised(beta_only, data, &teacher, opts));
  same(train_kd(beta_only, data, teacher, opts));
  return {matched == checked, std::to_string(matched) + "/" + std::to_string(checked) +
                                  " zeroed-term runs bit-identical to plain cross-entropy"};
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"ccp_exactness", ccp_exactness},
      {"gradient_suite", gradient_suite},
      {"sampler_fidelity", sampler_fidelity},
      {"memory_normalization", memory_normalization},
      {"mixup_reductions", mixup_reductions},
      {"symmetric_alignment", symmetric_alignment},
      {"convergence_ordering", convergence_ordering},
      {"kd_benefit", kd_benefit},
      {"reduction_lattice", reduction_lattice},
  };
  std::vector<std::string> only(argv + 1, argv + argc);
  int failures = 0;
  for (const auto& [name, run] : criteria) {
    if (!only.empty() && std::find(only.begin(), only.end(), name) == only.end()) continue;
    Outcome o;
    try {
      o = run();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    failures += !o.pass;
    std::printf("%s %s: %s\n", o.pass ? "PASS" : "FAIL", name.c_str(), o.detail.c_str());
    std::fflush(stdout);
  }
  return failures == 0 ? 0 : 1;
}
