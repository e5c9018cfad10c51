#pragma once

// Simulated printer that acts as both the telemetry source and the command
// sink of a runtime session. Frames arrive at a fixed rate; for a while after
// every action the labels are pure noise, standing in for extrusion
// transients.

#include <cstdint>
#include <optional>
#include <vector>

#include "flowrl/rng.hpp"
#include "flowrl/runtime.hpp"
#include "flowrl/sim_env.hpp"
#include "flowrl/trainer.hpp"

namespace flowrl {

struct ClosedLoopConfig {
  double frame_rate = 20.0;      // images per second
  double rho = 0.7;              // per-image classifier precision
  double noise_seconds = 2.0;    // post-action window of uniformly random labels
  std::size_t max_decisions = 100;
  double delta = 4.0;            // thermal lag per decision
  double start_q = 100.0;
  double start_u = 210.0;
  std::uint64_t seed = 0;
};

class ClosedLoopPlant {
 public:
  explicit ClosedLoopPlant(ClosedLoopConfig cfg)
      : cfg_(cfg), rng_(cfg.seed), plant_{cfg.start_q, cfg.start_u, cfg.start_u, 0} {
    if (!(cfg_.frame_rate > 0.0)) throw ConfigError("ClosedLoopPlant: frame rate must be positive");
  }

  std::optional<TelemetryRecord> next() {
    settle_pending();
    if (decisions_ >= cfg_.max_decisions) return std::nullopt;
    const double t = static_cast<double>(frame_++) / cfg_.frame_rate;
    now_ = t;
    TelemetryRecord r;
    r.t = t;
    r.u_hat = plant_.u_hat;
    r.u_bar = plant_.u_bar;
    if (last_action_ && t - *last_action_ < cfg_.noise_seconds)
      r.label = class_from_int(static_cast<long long>(rng_.below(kNumClasses)));
    else
      r.label = present_class(ground_truth_class(plant_.q), cfg_.rho, rng_);
    return r;
  }

  void emit(const SetpointCommand& c) {
    if (c.kind == CommandKind::flow) {
      plant_.q = c.new_value;
      ++decisions_;
      pending_ = true;
    } else {
      plant_.u_bar = c.new_value;
    }
    last_action_ = now_;
  }

  // Plant state after each decision.
  const std::vector<PlantState>& trajectory() {
    settle_pending();
    return trajectory_;
  }

 private:
  // Applies the thermal response once all commands of a decision are in.
  void settle_pending() {
    if (!pending_) return;
    pending_ = false;
    plant_.u_hat = thermal_step(plant_.u_hat, plant_.u_bar, cfg_.delta);
    ++plant_.t;
    trajectory_.push_back(plant_);
  }

  ClosedLoopConfig cfg_;
  Rng rng_;
  PlantState plant_;
  std::uint64_t frame_ = 0;
  double now_ = 0.0;
  std::optional<double> last_action_;
  std::size_t decisions_ = 0;
  bool pending_ = false;
  std::vector<PlantState> trajectory_;
};

// Index of the first decision from which the plant stays inside the bands
// for `bands.tail` consecutive decisions; trajectory size when it never does.
inline std::size_t decisions_to_convergence(const std::vector<PlantState>& traj, const ConvergenceBands& bands = {}) {
  std::size_t run = 0;
  for (std::size_t i = 0; i < traj.size(); ++i) {
    run = bands.inside(traj[i].q, traj[i].u_hat) ? run + 1 : 0;
    if (run == bands.tail) return i + 1 - bands.tail;
  }
  return traj.size();
}

}  // namespace flowrl
