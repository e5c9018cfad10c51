#pragma once

#include <vector>

#include "flowrl/error.hpp"
#include "flowrl/sim_env.hpp"

namespace flowrl {

// Ordered training phases sharing one network and replay buffer.
struct Curriculum {
  std::vector<PhaseConfig> phases;

  // Three reward-shaping phases with ideal classification (minor axis halved,
  // then both axes halved) followed by a misclassification phase at rho = 0.7.
  static Curriculum defaults() {
    return {{
        {40.0, 20.0, 70.0, 1.0, 300},
        {40.0, 10.0, 70.0, 1.0, 300},
        {20.0, 10.0, 70.0, 1.0, 300},
        {20.0, 10.0, 70.0, 0.7, 400},
    }};
  }

  // Axes never widen from one phase to the next, and once a phase trains
  // with misclassification every later phase does too.
  void validate() const {
    if (phases.empty()) throw ConfigError("Curriculum: no phases");
    bool noisy = false;
    for (std::size_t i = 0; i < phases.size(); ++i) {
      phases[i].validate();
      if (i > 0 && (phases[i].a > phases[i - 1].a || phases[i].b > phases[i - 1].b))
        throw ConfigError("Curriculum: ellipse axes must be non-increasing across phases");
      if (noisy && phases[i].rho == 1.0)
        throw ConfigError("Curriculum: ideal-classification phases must precede misclassification phases");
      noisy = noisy || phases[i].rho < 1.0;
    }
  }

  std::size_t total_episodes() const {
    std::size_t n = 0;
    for (const auto& p : phases) n += p.episodes;
    return n;
  }
};

}  // namespace flowrl
