// End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
// exits non-zero when any criterion fails.
//
// Usage: acceptance [--episode-scale x]   (x < 1 shortens training for
// development runs; verdicts are only meaningful at 1)

#include <algorithm>
#include <chrono>
#include <cmath>
#include <complex>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <numbers>
#include <sstream>
#include <string>
#include <vector>

#include "flowrl/closed_loop.hpp"
#include "flowrl/dqn.hpp"
#include "flowrl/replay.hpp"
#include "flowrl/runtime.hpp"
#include "flowrl/sim_env.hpp"
#include "flowrl/trainer.hpp"
#include "flowrl/vision_geometry.hpp"

namespace {

using namespace flowrl;
using Net = QNetwork<double>;
using Mat = Net::Mat;

int failures = 0;

void report(int id, const char* name, bool pass, const std::string& detail) {
  std::printf("[%s] %2d %s: %s\n", pass ? "PASS" : "FAIL", id, name, detail.c_str());
  std::fflush(stdout);
  failures += !pass;
}

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

// ---- 1 --------------------------------------------------------------------

void architecture() {
  const std::size_t n = Net(NetShape{}).param_count();
  report(1, "Architecture fidelity", n == 47082, fmt("%zu parameters", n));
}

// ---- 2 --------------------------------------------------------------------

void gradient_check() {
  const NetShape small{33, 2, 8, 4, 6, 10};
  Rng rng(2);
  auto net = Net::initialized(small, rng);
  Batch<double> b;
  const int n = 16;
  b.states.resize(small.input_dim(), n);
  b.next_states.resize(small.input_dim(), n);
  for (Eigen::Index i = 0; i < b.states.size(); ++i) {
    b.states.data()[i] = rng.uniform(-1, 1);
    b.next_states.data()[i] = rng.uniform(-1, 1);
  }
  TdTargets y;
  for (int i = 0; i < n; ++i) {
    b.flow_action.push_back(static_cast<int>(rng.below(kActionsPerHead)));
    b.temp_action.push_back(i % 3 == 0 ? static_cast<int>(rng.below(kActionsPerHead)) : kNoAction);
    b.reward.push_back(rng.uniform(-1, 1));
    b.terminal.push_back(0);
    y.flow.push_back(rng.uniform(-1, 1));
    y.temp.push_back(b.temp_action.back() == kNoAction ? std::nan("") : rng.uniform(-1, 1));
  }
  const auto analytic = loss_and_gradient(net, b, y).grad;
  const double h = 1e-6;
  double worst = 0.0;
  for (Eigen::Index k = 0; k < net.params().size(); ++k) {
    const double keep = net.params()[k];
    net.params()[k] = keep + h;
    const double up = loss_and_gradient(net, b, y).loss;
    net.params()[k] = keep - h;
    const double down = loss_and_gradient(net, b, y).loss;
    net.params()[k] = keep;
    const double numeric = (up - down) / (2 * h);
    worst = std::max(worst, std::abs(analytic[k] - numeric) /
                                std::max({std::abs(analytic[k]), std::abs(numeric), 1e-6}));
  }
  report(2, "Gradient correctness", worst < 1e-4,
         fmt("%lld parameters, worst relative error %.2e", static_cast<long long>(net.params().size()), worst));
}

// ---- 3 --------------------------------------------------------------------

// Independent evaluation: rotate the displacement as a complex number.
double reward_oracle(double q, double u, double a, double b, double deg) {
  const std::complex<double> d(q - 100.0, u - 210.0);
  const std::complex<double> r = d * std::polar(1.0, deg * std::numbers::pi / 180.0);
  const double norm = std::sqrt(r.real() * r.real() / (a * a) + r.imag() * r.imag() / (b * b));
  return 2.0 / (1.0 + norm) - 1.0;
}

void reward_law() {
  const PhaseConfig p1{};
  const double th = 70.0 * std::numbers::pi / 180.0;
  const double at_opt = reward(100, 210, p1);
  const double on_ellipse = reward(100 + 40 * std::cos(th), 210 - 40 * std::sin(th), p1);
  const double far = reward(300, 230, p1);
  const double oracle = reward_oracle(300, 230, 40, 20, 70);
  const bool pass = at_opt == 1.0 && std::abs(on_ellipse) < 1e-9 && std::abs(far - oracle) < 1e-9;
  report(3, "Reward law", pass,
         fmt("r(100,210)=%.17g, on-ellipse r=%.2e, r(300,230)=%.12f (oracle %.12f)", at_opt, on_ellipse, far,
             oracle));
}

// ---- 4 --------------------------------------------------------------------

void reward_dominance() {
  const auto phases = Curriculum::defaults().phases;
  std::size_t bad = 0;
  for (int i = 0; i < 100; ++i)
    for (int j = 0; j < 100; ++j) {
      const double q = 5.0 + 395.0 * i / 99.0, u = 180.0 + 60.0 * j / 99.0;
      bad += !(reward(q, u, phases[1]) <= reward(q, u, phases[0]));
      bad += !(reward(q, u, phases[2]) <= reward(q, u, phases[1]));
    }
  report(4, "Reward-shaping dominance", bad == 0, fmt("%zu violations on the 100x100 grid", bad));
}

// ---- 5 --------------------------------------------------------------------

void thermal_contraction() {
  double worst = 0.0;
  for (double delta : {1.0, 2.0, 4.0, 7.5})
    for (double gap : {-60.0, -5.0, 30.0}) {
      double u_hat = 210.0 + gap;
      for (int k = 1; k <= 40; ++k) {
        u_hat = thermal_step(u_hat, 210.0, delta);
        const double expected = std::pow(1.0 - 1.0 / delta, k) * std::abs(gap);
        worst = std::max(worst, std::abs(std::abs(u_hat - 210.0) - expected));
      }
    }
  report(5, "Thermal contraction", worst < 1e-9, fmt("max deviation %.2e over 40 steps", worst));
}

// ---- 6 --------------------------------------------------------------------

// E[clamp(mu + sigma Z, 0, 1)] by composite Simpson over z in [-10, 10].
double clipped_gaussian_mean(double mu, double sigma) {
  const int n = 20000;
  const double lo = -10.0, hi = 10.0, h = (hi - lo) / n;
  double acc = 0.0;
  for (int i = 0; i <= n; ++i) {
    const double z = lo + i * h;
    const double f = std::clamp(mu + sigma * z, 0.0, 1.0) * std::exp(-0.5 * z * z) / std::sqrt(2 * std::numbers::pi);
    acc += f * (i == 0 || i == n ? 1 : (i % 2 ? 4 : 2));
  }
  return acc * h / 3.0;
}

void synth_law() {
  bool pass = true;
  double worst_exact = 0.0;
  SynthDistConfig clean{1.0, 0.0};
  Rng rng(6);
  for (int x0 = 0; x0 < kNumClasses; ++x0) {
    const auto d = synth_distribution(class_from_int(x0), clean, rng);
    for (int i = 0; i < kNumClasses; ++i)
      worst_exact = std::max(worst_exact, std::abs(d.p[i] - std::exp(-1.0 * std::abs(i - x0))));
  }
  pass &= worst_exact < 1e-12;

  const SynthDistConfig noisy{};
  const int draws = 100000;
  double worst_law = 0.0, worst_oracle_z = 0.0;
  for (int x0 = 0; x0 < kNumClasses; ++x0) {
    std::array<double, 3> sum{}, sum2{};
    for (int k = 0; k < draws; ++k) {
      const auto d = synth_distribution(class_from_int(x0), noisy, rng);
      for (int i = 0; i < kNumClasses; ++i) {
        sum[i] += d.p[i];
        sum2[i] += d.p[i] * d.p[i];
      }
    }
    for (int i = 0; i < kNumClasses; ++i) {
      if (i == x0) continue;
      const double mean = sum[i] / draws;
      const double sd = std::sqrt(std::max(0.0, sum2[i] / draws - mean * mean));
      const double law = std::exp(-noisy.alpha * std::abs(i - x0));
      const double oracle = clipped_gaussian_mean(law, noisy.sigma);
      worst_law = std::max(worst_law, std::abs(mean - law));
      worst_oracle_z = std::max(worst_oracle_z, std::abs(mean - oracle) / (sd / std::sqrt(double(draws))));
      // Clipping bias must itself stay inside the tolerance.
      pass &= std::abs(oracle - law) < 0.01;
    }
  }
  pass &= worst_law <= 0.01 && worst_oracle_z < 5.0;
  report(6, "Synthetic distribution law", pass,
         fmt("sigma=0 max error %.1e; sigma=%.2f max |mean-law| %.4f, max |mean-oracle| %.2f SE", worst_exact,
             noisy.sigma, worst_law, worst_oracle_z));
}

// ---- 7 --------------------------------------------------------------------

void misclassification() {
  Rng rng(7);
  const int n = 1000000;
  std::array<int, 3> counts{};
  for (int k = 0; k < n; ++k) ++counts[index(present_class(ExtrusionClass::optimal, 0.7, rng))];
  const int wrong = counts[0] + counts[2];
  const double rate = double(wrong) / n;
  const double split = double(counts[0]) / wrong;
  report(7, "Misclassification rate", std::abs(rate - 0.3) <= 0.005 && std::abs(split - 0.5) <= 0.01,
         fmt("wrong %.4f, split %.4f / %.4f", rate, split, 1 - split));
}

// ---- 11 -------------------------------------------------------------------

vision::IntensityGrid ray_image(std::size_t n, vision::Point c, double angle_deg, double length) {
  const double a = angle_deg * std::numbers::pi / 180.0;
  const double dx = std::cos(a), dy = std::sin(a);
  vision::IntensityGrid g(n, n, 20);
  for (std::size_t y = 0; y < n; ++y)
    for (std::size_t x = 0; x < n; ++x) {
      const double px = double(x) - c.x, py = double(y) - c.y;
      const double along = px * dx + py * dy;
      if (along >= 0 && along <= length + 1 && std::abs(-px * dy + py * dx) <= 1.5) g.at(x, y) = 240;
    }
  return g;
}

void vision_geometry() {
  Rng rng(11);
  int ok = 0;
  double worst = 0.0;
  for (int k = 0; k < 50; ++k) {
    const double angle = rng.uniform(0.0, 360.0);
    const vision::Point c{100.0 + rng.uniform(-5, 5), 100.0 + rng.uniform(-5, 5)};
    const auto img = ray_image(200, c, angle, 87.0);
    const auto sweep = vision::sweep_max_intensity(img, c, 87.0);
    double err = std::fmod(std::abs(sweep.angle_deg - angle), 360.0);
    err = std::min(err, 360.0 - err);
    worst = std::max(worst, err);
    ok += err <= 2.0;
  }
  auto same = [](vision::Point a, vision::Point b) { return a.x == b.x && a.y == b.y; };
  const auto r1 = vision::rect_vertices({{10, 0}, {0, 0}}, 5);
  const auto r2 = vision::rect_vertices({{0, 0}, {0, 10}}, 2);
  const bool fixtures = same(r1.v1, {10, 5}) && same(r1.v2, {10, -5}) && same(r1.v3, {0, 5}) &&
                        same(r1.v4, {0, -5}) && same(r2.v1, {2, 0}) && same(r2.v2, {-2, 0}) &&
                        same(r2.v3, {2, 10}) && same(r2.v4, {-2, 10});
  report(11, "Vision geometry", ok >= 48 && fixtures,
         fmt("%d/50 angles within 2 deg (worst %.2f), rectangle fixtures %s", ok, worst,
             fixtures ? "exact" : "mismatch"));
}

// ---- 12 -------------------------------------------------------------------

TrainConfig small_config(std::uint64_t seed) {
  TrainConfig cfg;
  cfg.seed = seed;
  cfg.hyper.episode_length = 20;
  cfg.hyper.batch = 16;
  cfg.hyper.learn_start = 40;
  cfg.hyper.replay_capacity = 300;
  cfg.curriculum.phases.resize(3);
  cfg.curriculum.phases[0].episodes = 3;
  cfg.curriculum.phases[1].episodes = 2;
  cfg.curriculum.phases[2].episodes = 3;
  cfg.curriculum.phases[2].rho = 0.7;
  return cfg;
}

std::vector<SetpointCommand> closed_loop_commands(const Net& net, double settle, std::uint64_t seed,
                                                  std::vector<PlantState>* traj = nullptr,
                                                  double start_q = 30, double start_u = 190) {
  ClosedLoopConfig cl;
  cl.seed = seed;
  cl.start_q = start_q;
  cl.start_u = start_u;
  ClosedLoopPlant plant(cl);
  RuntimeConfig rt;
  rt.settle_seconds = settle;
  rt.initial_flow = start_q;
  auto log = run_session(plant, plant, net, rt);
  if (traj) *traj = plant.trajectory();
  return log.commands;
}

void determinism() {
  Trainer a(small_config(12)), b(small_config(12));
  a.run_curriculum();
  b.run_curriculum();
  const bool logs = a.log() == b.log() && a.policy() == b.policy();

  const bool sessions = closed_loop_commands(a.policy(), 6.0, 3) == closed_loop_commands(b.policy(), 6.0, 3);

  const auto path = std::filesystem::temp_directory_path() / "flowrl_acceptance_resume.bin";
  {
    Trainer part(small_config(12));
    part.run_curriculum({}, 4);
    part.save(path);
  }
  Trainer resumed = Trainer::load(path);
  resumed.run_curriculum();
  std::filesystem::remove(path);
  const bool resume = resumed.log() == a.log() && resumed.policy() == a.policy() &&
                      resumed.target() == a.target() && resumed.optimizer() == a.optimizer() &&
                      resumed.global_step() == a.global_step();
  report(12, "Determinism & persistence", logs && sessions && resume,
         fmt("train logs %s, session commands %s, resume %s", logs ? "identical" : "differ",
             sessions ? "identical" : "differ", resume ? "bit-identical" : "differs"));
}

// ---- 8, 9, 10, 13 -----------------------------------------------------------

struct SeedRun {
  std::uint64_t seed;
  Net post_p3, post_p4;
  TrainLog log;
};

struct GridStats {
  std::size_t converged = 0;
  double mean_reversals = 0.0;
};

GridStats grid_eval(const Net& net, double rho) {
  GridStats s;
  std::uint64_t eval_seed = 0;
  for (double q : kEvalFlows)
    for (double u : kEvalTemps) {
      const auto r = evaluate(net, q, u, 100, rho, 5000 + eval_seed++);
      s.converged += r.converged;
      s.mean_reversals += static_cast<double>(flow_reversals(r.trajectory));
    }
  s.mean_reversals /= static_cast<double>(eval_seed);
  return s;
}

double mean_of(const std::vector<double>& v, std::size_t begin, std::size_t end) {
  double s = 0.0;
  for (std::size_t i = begin; i < end; ++i) s += v[i];
  return s / static_cast<double>(end - begin);
}

void training_criteria(double episode_scale) {
  std::vector<SeedRun> runs;
  for (std::uint64_t seed : {1, 2, 3}) {
    TrainConfig cfg;
    cfg.seed = seed;
    for (auto& p : cfg.curriculum.phases)
      p.episodes = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(p.episodes * episode_scale)));
    const auto t0 = std::chrono::steady_clock::now();
    Trainer t(cfg);
    SeedRun run{seed, Net{}, Net{}, {}};
    t.run_curriculum([&](std::size_t phase, const Trainer& tr) {
      if (phase == 2) run.post_p3 = tr.policy();
      if (phase == 3) run.post_p4 = tr.policy();
    });
    run.log = t.log();
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::printf("  trained seed %llu in %.0f s\n", static_cast<unsigned long long>(seed), secs);
    std::fflush(stdout);
    runs.push_back(std::move(run));
  }

  // 8: post-P4 convergence at rho 0.7.
  {
    bool pass = true;
    std::string detail;
    for (const auto& r : runs) {
      const auto s = grid_eval(r.post_p4, 0.7);
      pass &= s.converged >= 18;
      detail += fmt("%sseed %llu %zu/21", detail.empty() ? "" : ", ", static_cast<unsigned long long>(r.seed),
                    s.converged);
    }
    report(8, "Curriculum convergence", pass, detail + " converged (need >= 18 each)");
  }

  // 9: reversal ordering at rho 0.7.
  {
    double p3 = 0.0, p4 = 0.0;
    for (const auto& r : runs) {
      p3 += grid_eval(r.post_p3, 0.7).mean_reversals / static_cast<double>(runs.size());
      p4 += grid_eval(r.post_p4, 0.7).mean_reversals / static_cast<double>(runs.size());
    }
    report(9, "Phase-4 robustness ordering", p3 > p4,
           fmt("mean flow reversals post-P3 %.2f, post-P4 %.2f", p3, p4));
  }

  // 10: dip after each reward-tightening boundary, then recovery.
  {
    const std::size_t w = 30;
    int seeds_ok = 0;
    std::string detail;
    for (const auto& r : runs) {
      std::vector<double> rewards;
      for (const auto& e : r.log.records()) rewards.push_back(e.cumulative_reward);
      const auto& starts = r.log.phase_starts();
      bool ok = true;
      std::string seed_detail;
      for (std::size_t b = 1; b <= 2; ++b) {
        const std::size_t start = starts[b], end = starts[b + 1];
        const std::size_t n = std::min({w, start - starts[b - 1], end - start});
        const double before = mean_of(rewards, start - n, start);
        const double after = mean_of(rewards, start, start + n);
        const double final = mean_of(rewards, end - n, end);
        const bool dip = after < before;
        const bool recovered = final >= before - 0.1 * std::abs(before);
        ok &= dip && recovered;
        seed_detail += fmt("%sP%zu->P%zu %.1f/%.1f/%.1f", b == 1 ? "" : " ", b, b + 1, before, after, final);
      }
      seeds_ok += ok;
      detail += fmt("%sseed %llu [%s]%s", detail.empty() ? "" : "; ", static_cast<unsigned long long>(r.seed),
                    seed_detail.c_str(), ok ? "" : " x");
    }
    report(10, "Reward-tightening dip", seeds_ok >= 2,
           fmt("%d/3 seeds (before/after/phase-end): ", seeds_ok) + detail);
  }

  // 13: settle time in closed loop, final policy of the first seed.
  {
    double with_settle = 0.0, without = 0.0;
    for (std::uint64_t s = 0; s < 10; ++s) {
      std::vector<PlantState> traj;
      closed_loop_commands(runs.front().post_p4, 6.0, 100 + s, &traj);
      with_settle += static_cast<double>(decisions_to_convergence(traj)) / 10.0;
      closed_loop_commands(runs.front().post_p4, 0.0, 100 + s, &traj);
      without += static_cast<double>(decisions_to_convergence(traj)) / 10.0;
    }
    report(13, "Settle-time ordering", with_settle < without,
           fmt("mean decisions to convergence from (30%%, 190 C): settle 6 s %.1f, settle 0 s %.1f (cap 100)",
               with_settle, without));
  }

  // Informational: the final policy on a clean optimal window at target.
  {
    const Net& net = runs.front().post_p4;
    RuntimeConfig rt;
    Controller<double> ctl(net, rt);
    const std::vector<ExtrusionClass> window(rt.window, ExtrusionClass::optimal);
    const auto d = ctl.decide(window, 210.0, 210.0);
    std::printf("  info: final policy at the optimum with an all-optimal window chooses flow delta %+d\n",
                d.action.flow_delta());
  }
}

}  // namespace

int main(int argc, char** argv) {
  double episode_scale = 1.0;
  for (int i = 1; i < argc; ++i) {
    if (std::strcmp(argv[i], "--episode-scale") == 0 && i + 1 < argc) {
      episode_scale = std::atof(argv[++i]);
    } else {
      std::fprintf(stderr, "usage: %s [--episode-scale x]\n", argv[0]);
      return 2;
    }
  }
  if (!(episode_scale > 0.0)) {
    std::fprintf(stderr, "--episode-scale must be positive\n");
    return 2;
  }
  if (episode_scale != 1.0) std::printf("note: episode budgets scaled by %g\n", episode_scale);

  architecture();
  gradient_check();
  reward_law();
  reward_dominance();
  thermal_contraction();
  synth_law();
  misclassification();
  vision_geometry();
  determinism();
  training_criteria(episode_scale);

  std::printf("%d criteria failed\n", failures);
  return failures == 0 ? 0 : 1;
}
