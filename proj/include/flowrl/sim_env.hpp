#pragma once

// Stochastic extrusion process simulator. Each step is one printing segment:
// the flow setpoint moves immediately, the nozzle temperature tracks its target
// with a first-order lag, and the vision system is replaced by a noisy
// exponential-decay class distribution around the presented class.

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "flowrl/error.hpp"
#include "flowrl/rng.hpp"
#include "flowrl/state_codec.hpp"

namespace flowrl {

inline constexpr int kActionsPerHead = 5;
// Index 0 is "hold" so that argmax ties fall back to no change.
inline constexpr std::array<int, kActionsPerHead> kFlowDeltas{0, -5, 5, -10, 10};
inline constexpr std::array<int, kActionsPerHead> kTempDeltas{0, -10, 10, -20, 20};

inline int flow_action_index(int delta) {
  for (int i = 0; i < kActionsPerHead; ++i)
    if (kFlowDeltas[i] == delta) return i;
  throw ContractError("inadmissible flow delta " + std::to_string(delta));
}

inline int temp_action_index(int delta) {
  for (int i = 0; i < kActionsPerHead; ++i)
    if (kTempDeltas[i] == delta) return i;
  throw ContractError("inadmissible temperature delta " + std::to_string(delta));
}

// One joint action. The temperature head only acts on scheduled steps.
struct Action {
  int flow_index = 0;
  std::optional<int> temp_index;

  int flow_delta() const { return kFlowDeltas.at(flow_index); }
  int temp_delta() const { return temp_index ? kTempDeltas.at(*temp_index) : 0; }
  bool temp_active() const { return temp_index.has_value(); }

  static Action from_deltas(int flow_delta, std::optional<int> temp_delta = std::nullopt) {
    Action a;
    a.flow_index = flow_action_index(flow_delta);
    if (temp_delta) a.temp_index = temp_action_index(*temp_delta);
    return a;
  }

  friend bool operator==(const Action&, const Action&) = default;
};

// True iff a temperature action may execute at step t.
inline bool temp_scheduled(std::uint64_t t, std::uint64_t lambda) { return t % lambda == 0; }

struct PhaseConfig {
  double a = 40.0;             // semi-major axis, flow %
  double b = 20.0;             // semi-minor axis, deg C
  double rotation_deg = 70.0;
  double rho = 1.0;            // probability the true class is presented
  std::size_t episodes = 300;

  void validate() const {
    if (!(b > 0.0 && a >= b)) throw ConfigError("PhaseConfig: need a >= b > 0");
    if (!(rho > 0.0 && rho <= 1.0)) throw ConfigError("PhaseConfig: rho must lie in (0, 1]");
    if (!std::isfinite(rotation_deg)) throw ConfigError("PhaseConfig: rotation must be finite");
  }
};

struct SynthDistConfig {
  double alpha = 1.0;
  double sigma = 0.1;

  void validate() const {
    if (!(alpha > 0.0)) throw ConfigError("SynthDistConfig: alpha must be > 0");
    if (!(sigma >= 0.0)) throw ConfigError("SynthDistConfig: sigma must be >= 0");
  }
};

struct EnvConfig {
  double delta = 4.0;  // thermal lag divisor
  SynthDistConfig synth;
  double q_min = 5.0, q_max = 400.0;
  double u_bar_min = 180.0, u_bar_max = 240.0;
  double q_opt = 100.0, u_opt = 210.0;
  std::size_t eta = 30;
  std::uint64_t lambda = 10;
  std::vector<double> init_flows = [] {
    std::vector<double> v;
    for (int q = 30; q <= 300; q += 5) v.push_back(q);
    return v;
  }();
  std::vector<double> init_temps{190.0, 200.0, 210.0, 220.0, 230.0};

  void validate() const {
    if (!(delta >= 1.0)) throw ConfigError("EnvConfig: delta must be >= 1");
    synth.validate();
    if (!(q_min < q_max) || !(u_bar_min < u_bar_max)) throw ConfigError("EnvConfig: empty clamp range");
    if (eta == 0 || lambda == 0) throw ConfigError("EnvConfig: eta and lambda must be >= 1");
    if (init_flows.empty() || init_temps.empty()) throw ConfigError("EnvConfig: empty reset ranges");
    for (double q : init_flows)
      if (q < q_min || q > q_max) throw ConfigError("EnvConfig: reset flow outside clamp range");
    for (double u : init_temps)
      if (u < u_bar_min || u > u_bar_max) throw ConfigError("EnvConfig: reset temperature outside clamp range");
  }
};

struct PlantState {
  double q = 100.0;
  double u_hat = 210.0;
  double u_bar = 210.0;
  std::uint64_t t = 0;

  friend bool operator==(const PlantState&, const PlantState&) = default;
};

// u_hat' = u_hat + (u_bar - u_hat) / delta
inline double thermal_step(double u_hat, double u_bar, double delta) {
  if (!(delta >= 1.0)) throw ConfigError("thermal_step: delta must be >= 1");
  return u_hat + (u_bar - u_hat) / delta;
}

// <90 insufficient, [90, 110] optimal, >110 excessive.
inline ExtrusionClass ground_truth_class(double q) {
  if (q < 90.0) return ExtrusionClass::insufficient;
  if (q <= 110.0) return ExtrusionClass::optimal;
  return ExtrusionClass::excessive;
}

// The true class with probability rho, otherwise one of the other two
// uniformly. Always consumes one uniform draw, plus one on a miss.
inline ExtrusionClass present_class(ExtrusionClass truth, double rho, Rng& rng) {
  if (!(rho > 0.0 && rho <= 1.0)) throw ConfigError("present_class: rho must lie in (0, 1]");
  if (rng.uniform() < rho) return truth;
  const int t = index(truth);
  const int pick = static_cast<int>(rng.below(2));
  return class_from_int((t + 1 + pick) % kNumClasses);
}

// Scaled synthetic distribution centered at x0: entry x0 is 1, the others
// clamp(exp(-alpha |i - x0|) + N(0, sigma^2), 0, 1). Two normal draws are
// consumed per call regardless of sigma.
inline ClassDistribution synth_distribution(ExtrusionClass x0, const SynthDistConfig& cfg, Rng& rng) {
  ClassDistribution d;
  d.kind = DistKind::scaled;
  const int c = index(x0);
  for (int i = 0; i < kNumClasses; ++i) {
    if (i == c) {
      d.p[i] = 1.0;
      continue;
    }
    const double noise = rng.normal();
    d.p[i] = std::clamp(std::exp(-cfg.alpha * std::abs(i - c)) + cfg.sigma * noise, 0.0, 1.0);
  }
  return d;
}

// Elliptical norm of the displacement from the optimum after rotating it by
// the phase angle.
inline double elliptical_norm(double q, double u, const PhaseConfig& ph, double q_opt = 100.0,
                              double u_opt = 210.0) {
  const double th = ph.rotation_deg * std::numbers::pi / 180.0;
  const double c = std::cos(th), s = std::sin(th);
  const double dq = q - q_opt, du = u - u_opt;
  const double rq = dq * c - du * s;
  const double ru = dq * s + du * c;
  return std::sqrt(rq * rq / (ph.a * ph.a) + ru * ru / (ph.b * ph.b));
}

// r = 2 / (1 + norm) - 1, in (-1, 1] with r = 1 only at the optimum.
inline double reward(double q, double u, const PhaseConfig& ph, double q_opt = 100.0, double u_opt = 210.0) {
  return 2.0 / (1.0 + elliptical_norm(q, u, ph, q_opt, u_opt)) - 1.0;
}

struct StepOutcome {
  ProcessState state;
  double reward = 0.0;
  ExtrusionClass truth = ExtrusionClass::optimal;
  ExtrusionClass shown = ExtrusionClass::optimal;
  PlantState plant;  // after the step
};

class SimEnv {
 public:
  explicit SimEnv(EnvConfig cfg = {}) : cfg_(std::move(cfg)), history_(cfg_.eta) { cfg_.validate(); }

  const EnvConfig& config() const noexcept { return cfg_; }
  const PlantState& plant() const noexcept { return plant_; }
  const ProcessState& state() const noexcept { return state_; }

  // Random episode start: flow and (equal) temperatures drawn from the reset
  // grids, history at 1/3. The first distribution is drawn around the
  // presented class at `rho`.
  const ProcessState& reset(Rng& rng, double rho = 1.0) {
    PlantState p;
    p.q = cfg_.init_flows[rng.below(cfg_.init_flows.size())];
    p.u_bar = p.u_hat = cfg_.init_temps[rng.below(cfg_.init_temps.size())];
    return reset_to(p, rng, rho);
  }

  const ProcessState& reset_to(const PlantState& start, Rng& rng, double rho = 1.0) {
    plant_ = start;
    plant_.q = std::clamp(plant_.q, cfg_.q_min, cfg_.q_max);
    plant_.u_bar = std::clamp(plant_.u_bar, cfg_.u_bar_min, cfg_.u_bar_max);
    history_ = HistoryVector(cfg_.eta);
    const auto shown = present_class(ground_truth_class(plant_.q), rho, rng);
    state_ = assemble_state(history_, synth_distribution(shown, cfg_.synth, rng), plant_.u_hat, plant_.u_bar,
                            plant_.t);
    return state_;
  }

  StepOutcome step(const Action& action, const PhaseConfig& phase, Rng& rng) {
    if (action.flow_index < 0 || action.flow_index >= kActionsPerHead ||
        (action.temp_index && (*action.temp_index < 0 || *action.temp_index >= kActionsPerHead)))
      throw ContractError("SimEnv::step: action index out of range");
    if (action.temp_active() && !temp_scheduled(plant_.t, cfg_.lambda))
      throw ContractError("SimEnv::step: temperature action outside its schedule");

    plant_.q = std::clamp(plant_.q + action.flow_delta(), cfg_.q_min, cfg_.q_max);
    if (action.temp_active())
      plant_.u_bar = std::clamp(plant_.u_bar + action.temp_delta(), cfg_.u_bar_min, cfg_.u_bar_max);
    plant_.u_hat = thermal_step(plant_.u_hat, plant_.u_bar, cfg_.delta);
    ++plant_.t;

    StepOutcome out;
    out.truth = ground_truth_class(plant_.q);
    out.shown = present_class(out.truth, phase.rho, rng);
    history_.push(out.shown);
    state_ = assemble_state(history_, synth_distribution(out.shown, cfg_.synth, rng), plant_.u_hat,
                            plant_.u_bar, plant_.t);
    out.state = state_;
    out.reward = reward(plant_.q, plant_.u_hat, phase, cfg_.q_opt, cfg_.u_opt);
    out.plant = plant_;
    return out;
  }

 private:
  EnvConfig cfg_;
  PlantState plant_;
  HistoryVector history_;
  ProcessState state_{HistoryVector(1), {}, 210.0, 210.0, 0};
};

// ---- episode traces -------------------------------------------------------

struct TraceRow {
  std::uint64_t step = 0;
  double q = 0.0, u_hat = 0.0, u_bar = 0.0;
  ExtrusionClass shown = ExtrusionClass::optimal;
  ExtrusionClass truth = ExtrusionClass::optimal;
  std::array<double, 3> p{};
  int flow_delta = 0;
  int temp_delta = 0;
  double reward = 0.0;
};

inline TraceRow trace_row(const Action& a, const StepOutcome& o) {
  return {o.plant.t,       o.plant.q,    o.plant.u_hat,  o.plant.u_bar, o.shown, o.truth,
          o.state.dist.p, a.flow_delta(), a.temp_delta(), o.reward};
}

inline void write_trace_csv(std::ostream& out, const std::vector<TraceRow>& rows) {
  out << "step,q,u_hat,u_bar,shown_class,truth_class,p0,p1,p2,flow_delta,temp_delta,reward\n";
  const auto old = out.precision(17);
  for (const auto& r : rows) {
    out << r.step << ',' << r.q << ',' << r.u_hat << ',' << r.u_bar << ',' << index(r.shown) << ','
        << index(r.truth) << ',' << r.p[0] << ',' << r.p[1] << ',' << r.p[2] << ',' << r.flow_delta << ','
        << r.temp_delta << ',' << r.reward << '\n';
  }
  out.precision(old);
}

}  // namespace flowrl
