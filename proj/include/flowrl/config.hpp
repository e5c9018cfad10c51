#pragma once

// JSON form of the training configuration. Files are partial overrides of the
// built-in defaults; unknown keys are rejected.
//
//   {
//     "seed": 7,
//     "env": {"delta": 4, "alpha": 1.0, "sigma": 0.1, "eta": 30, "lambda": 10, ...},
//     "hyper": {"gamma": 0.99, "tau": 0.005, "batch": 512, ...},
//     "curriculum": [{"a": 40, "b": 20, "rotation_deg": 70, "rho": 1.0, "episodes": 300}, ...]
//   }

#include <cstdint>
#include <set>
#include <string>

#include <nlohmann/json.hpp>

#include "flowrl/curriculum.hpp"
#include "flowrl/dqn.hpp"
#include "flowrl/error.hpp"
#include "flowrl/sim_env.hpp"

namespace flowrl {

struct TrainConfig {
  EnvConfig env;
  TrainHyper hyper;
  Curriculum curriculum = Curriculum::defaults();
  std::uint64_t seed = 0;

  void validate() const {
    env.validate();
    hyper.validate();
    curriculum.validate();
  }
};

namespace detail {

inline void reject_unknown(const nlohmann::json& j, std::initializer_list<const char*> known, const char* where) {
  if (!j.is_object()) throw ConfigError(std::string(where) + ": expected a JSON object");
  const std::set<std::string> allowed(known.begin(), known.end());
  for (const auto& [key, _] : j.items())
    if (!allowed.contains(key)) throw ConfigError(std::string(where) + ": unknown key '" + key + "'");
}

template <typename T>
void read_if(const nlohmann::json& j, const char* key, T& out) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config key '") + key + "': " + e.what());
  }
}

}  // namespace detail

inline nlohmann::json to_json(const PhaseConfig& p) {
  return {{"a", p.a}, {"b", p.b}, {"rotation_deg", p.rotation_deg}, {"rho", p.rho}, {"episodes", p.episodes}};
}

inline void merge(PhaseConfig& p, const nlohmann::json& j) {
  detail::reject_unknown(j, {"a", "b", "rotation_deg", "rho", "episodes"}, "phase");
  detail::read_if(j, "a", p.a);
  detail::read_if(j, "b", p.b);
  detail::read_if(j, "rotation_deg", p.rotation_deg);
  detail::read_if(j, "rho", p.rho);
  detail::read_if(j, "episodes", p.episodes);
}

inline nlohmann::json to_json(const EnvConfig& e) {
  return {{"delta", e.delta},         {"alpha", e.synth.alpha},     {"sigma", e.synth.sigma},
          {"q_min", e.q_min},         {"q_max", e.q_max},           {"u_bar_min", e.u_bar_min},
          {"u_bar_max", e.u_bar_max}, {"q_opt", e.q_opt},           {"u_opt", e.u_opt},
          {"eta", e.eta},             {"lambda", e.lambda},         {"init_flows", e.init_flows},
          {"init_temps", e.init_temps}};
}

inline void merge(EnvConfig& e, const nlohmann::json& j) {
  detail::reject_unknown(j,
                         {"delta", "alpha", "sigma", "q_min", "q_max", "u_bar_min", "u_bar_max", "q_opt", "u_opt",
                          "eta", "lambda", "init_flows", "init_temps"},
                         "env");
  detail::read_if(j, "delta", e.delta);
  detail::read_if(j, "alpha", e.synth.alpha);
  detail::read_if(j, "sigma", e.synth.sigma);
  detail::read_if(j, "q_min", e.q_min);
  detail::read_if(j, "q_max", e.q_max);
  detail::read_if(j, "u_bar_min", e.u_bar_min);
  detail::read_if(j, "u_bar_max", e.u_bar_max);
  detail::read_if(j, "q_opt", e.q_opt);
  detail::read_if(j, "u_opt", e.u_opt);
  detail::read_if(j, "eta", e.eta);
  detail::read_if(j, "lambda", e.lambda);
  detail::read_if(j, "init_flows", e.init_flows);
  detail::read_if(j, "init_temps", e.init_temps);
}

inline nlohmann::json to_json(const TrainHyper& h) {
  return {{"gamma", h.gamma},
          {"tau", h.tau},
          {"batch", h.batch},
          {"learning_rate", h.learning_rate},
          {"episode_length", h.episode_length},
          {"replay_capacity", h.replay_capacity},
          {"learn_start", h.learn_start},
          {"eps_end", h.eps_end},
          {"eps_span", h.eps_span},
          {"eps_decay_steps", h.eps_decay_steps}};
}

inline void merge(TrainHyper& h, const nlohmann::json& j) {
  detail::reject_unknown(j,
                         {"gamma", "tau", "batch", "learning_rate", "episode_length", "replay_capacity",
                          "learn_start", "eps_end", "eps_span", "eps_decay_steps"},
                         "hyper");
  detail::read_if(j, "gamma", h.gamma);
  detail::read_if(j, "tau", h.tau);
  detail::read_if(j, "batch", h.batch);
  detail::read_if(j, "learning_rate", h.learning_rate);
  detail::read_if(j, "episode_length", h.episode_length);
  detail::read_if(j, "replay_capacity", h.replay_capacity);
  detail::read_if(j, "learn_start", h.learn_start);
  detail::read_if(j, "eps_end", h.eps_end);
  detail::read_if(j, "eps_span", h.eps_span);
  detail::read_if(j, "eps_decay_steps", h.eps_decay_steps);
}

inline nlohmann::json to_json(const Curriculum& c) {
  auto arr = nlohmann::json::array();
  for (const auto& p : c.phases) arr.push_back(to_json(p));
  return arr;
}

// A curriculum array replaces the default phase list; each entry overrides
// the default phase at the same position (or phase 4's values past the end).
inline Curriculum curriculum_from_json(const nlohmann::json& j) {
  if (!j.is_array()) throw ConfigError("curriculum: expected an array of phases");
  const auto defaults = Curriculum::defaults();
  Curriculum c;
  for (std::size_t i = 0; i < j.size(); ++i) {
    PhaseConfig p = defaults.phases[std::min(i, defaults.phases.size() - 1)];
    merge(p, j[i]);
    c.phases.push_back(p);
  }
  return c;
}

inline nlohmann::json to_json(const TrainConfig& c) {
  return {{"seed", c.seed}, {"env", to_json(c.env)}, {"hyper", to_json(c.hyper)}, {"curriculum", to_json(c.curriculum)}};
}

inline void merge(TrainConfig& c, const nlohmann::json& j) {
  detail::reject_unknown(j, {"seed", "env", "hyper", "curriculum"}, "config");
  detail::read_if(j, "seed", c.seed);
  if (j.contains("env")) merge(c.env, j.at("env"));
  if (j.contains("hyper")) merge(c.hyper, j.at("hyper"));
  if (j.contains("curriculum")) c.curriculum = curriculum_from_json(j.at("curriculum"));
}

inline TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig c;
  merge(c, j);
  c.validate();
  return c;
}

}  // namespace flowrl
