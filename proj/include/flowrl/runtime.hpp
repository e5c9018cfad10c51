#pragma once

// Deployment loop: aggregate per-image labels into windows, wait out the
// settle time after each action, query the policy greedily and emit setpoint
// commands.

#include <algorithm>
#include <array>
#include <cctype>
#include <chrono>
#include <cmath>
#include <concepts>
#include <cstdint>
#include <istream>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "flowrl/dqn.hpp"
#include "flowrl/error.hpp"
#include "flowrl/sim_env.hpp"
#include "flowrl/state_codec.hpp"

namespace flowrl {

enum class RunMode { live, replay };

struct RuntimeConfig {
  std::size_t window = 20;
  double settle_seconds = 6.0;
  std::uint64_t lambda = 10;
  double q_min = 5.0, q_max = 400.0;
  double u_bar_min = 180.0, u_bar_max = 240.0;
  double initial_flow = 100.0;
  std::size_t eta = 30;
  RunMode mode = RunMode::replay;

  void validate() const {
    if (window == 0) throw ConfigError("RuntimeConfig: window must be >= 1");
    if (!(settle_seconds >= 0.0)) throw ConfigError("RuntimeConfig: settle_seconds must be >= 0");
    if (lambda == 0 || eta == 0) throw ConfigError("RuntimeConfig: lambda and eta must be >= 1");
    if (!(q_min < q_max && u_bar_min < u_bar_max)) throw ConfigError("RuntimeConfig: empty clamp range");
    if (initial_flow < q_min || initial_flow > q_max)
      throw ConfigError("RuntimeConfig: initial flow outside clamp range");
  }
};

struct TelemetryRecord {
  double t = 0.0;  // seconds
  ExtrusionClass label = ExtrusionClass::optimal;
  double u_hat = 210.0;
  double u_bar = 210.0;
};

enum class CommandKind { flow, temperature };

struct SetpointCommand {
  CommandKind kind = CommandKind::flow;
  double new_value = 0.0;
  double delta = 0.0;  // applied change after clamping
  std::uint64_t step = 0;

  friend bool operator==(const SetpointCommand&, const SetpointCommand&) = default;
};

// Majority label of a window. Ties resolve toward the more severe class:
// excessive, then insufficient, then optimal.
inline ExtrusionClass modal_label(std::span<const ExtrusionClass> labels) {
  if (labels.empty()) throw ContractError("modal_label: empty window");
  std::array<std::size_t, 3> counts{};
  for (auto c : labels) ++counts[index(c)];
  ExtrusionClass best = ExtrusionClass::excessive;
  for (auto c : {ExtrusionClass::insufficient, ExtrusionClass::optimal})
    if (counts[index(c)] > counts[index(best)]) best = c;
  return best;
}

struct Decision {
  Action action;
  ProcessState state;
  std::vector<SetpointCommand> commands;
};

// Decision state carried between windows: label history, decision counter and
// the current flow setpoint.
template <typename Scalar = double>
class Controller {
 public:
  Controller(const QNetwork<Scalar>& net, RuntimeConfig cfg)
      : net_(net), cfg_((cfg.validate(), cfg)), history_(cfg_.eta), flow_(cfg_.initial_flow) {
    if (net.shape().input_dim() != static_cast<int>(cfg_.eta) + 5)
      throw ConfigError("Controller: network input does not match eta = " + std::to_string(cfg_.eta));
  }

  Decision decide(std::span<const ExtrusionClass> window, double u_hat, double u_bar) {
    if (window.size() != cfg_.window)
      throw ContractError("decide: window holds " + std::to_string(window.size()) + " labels, expected " +
                          std::to_string(cfg_.window));
    const ClassDistribution dist = scale_distribution(window_distribution(window));
    history_.push(modal_label(window));
    Decision d;
    d.state = assemble_state(history_, dist, u_hat, u_bar, step_);
    d.action = greedy_action(net_, flatten(d.state), step_, cfg_.lambda);

    const double q_new = std::clamp(flow_ + d.action.flow_delta(), cfg_.q_min, cfg_.q_max);
    d.commands.push_back({CommandKind::flow, q_new, q_new - flow_, step_});
    flow_ = q_new;
    if (d.action.temp_active()) {
      const double u_new = std::clamp(u_bar + d.action.temp_delta(), cfg_.u_bar_min, cfg_.u_bar_max);
      d.commands.push_back({CommandKind::temperature, u_new, u_new - u_bar, step_});
    }
    ++step_;
    return d;
  }

  double flow_setpoint() const noexcept { return flow_; }
  std::uint64_t step() const noexcept { return step_; }
  const HistoryVector& history() const noexcept { return history_; }
  const RuntimeConfig& config() const noexcept { return cfg_; }

 private:
  const QNetwork<Scalar>& net_;
  RuntimeConfig cfg_;
  HistoryVector history_;
  double flow_;
  std::uint64_t step_ = 0;
};

// ---- streams --------------------------------------------------------------

// Newline-delimited JSON telemetry: {"t": s, "label": 0|1|2, "u_hat": C, "u_bar": C}.
// Blank lines are ignored; timestamps must not decrease.
class TelemetryReader {
 public:
  explicit TelemetryReader(std::istream& in) : in_(in) {}

  std::optional<TelemetryRecord> next() {
    std::string text;
    while (std::getline(in_, text)) {
      ++line_;
      if (std::all_of(text.begin(), text.end(), [](unsigned char c) { return std::isspace(c); })) continue;
      TelemetryRecord r;
      try {
        const auto j = nlohmann::json::parse(text);
        r.t = j.at("t").get<double>();
        r.label = class_from_int(j.at("label").get<long long>());
        r.u_hat = j.at("u_hat").get<double>();
        r.u_bar = j.at("u_bar").get<double>();
      } catch (const std::exception& e) {
        throw SessionError(std::string("malformed telemetry record: ") + e.what(), line_);
      }
      if (!std::isfinite(r.t) || !std::isfinite(r.u_hat) || !std::isfinite(r.u_bar))
        throw SessionError("non-finite telemetry value", line_);
      if (last_t_ && r.t < *last_t_) throw SessionError("timestamp decreases", line_);
      last_t_ = r.t;
      return r;
    }
    return std::nullopt;
  }

  std::size_t line() const noexcept { return line_; }

 private:
  std::istream& in_;
  std::size_t line_ = 0;
  std::optional<double> last_t_;
};

inline void write_telemetry(std::ostream& out, const TelemetryRecord& r) {
  out << nlohmann::json{{"t", r.t}, {"label", index(r.label)}, {"u_hat", r.u_hat}, {"u_bar", r.u_bar}}.dump()
      << '\n';
}

inline nlohmann::json to_json(const SetpointCommand& c) {
  return {{"step", c.step},
          {"kind", c.kind == CommandKind::flow ? "flow" : "temperature"},
          {"delta", c.delta},
          {"new_value", c.new_value}};
}

inline SetpointCommand command_from_json(const nlohmann::json& j) {
  try {
    SetpointCommand c;
    c.step = j.at("step").get<std::uint64_t>();
    const auto kind = j.at("kind").get<std::string>();
    if (kind != "flow" && kind != "temperature") throw FormatError("unknown command kind '" + kind + "'");
    c.kind = kind == "flow" ? CommandKind::flow : CommandKind::temperature;
    c.delta = j.at("delta").get<double>();
    c.new_value = j.at("new_value").get<double>();
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("command: ") + e.what());
  }
}

// M221 sets the flow multiplier, M104 the hotend target.
inline std::string to_gcode(const SetpointCommand& c) {
  nlohmann::json v = c.new_value;
  if (c.new_value == std::round(c.new_value)) v = static_cast<long long>(std::llround(c.new_value));
  return std::string(c.kind == CommandKind::flow ? "M221 S" : "M104 S") + v.dump();
}

// Writes commands as NDJSON, or as G-code lines when `gcode` is set.
class CommandWriter {
 public:
  CommandWriter(std::ostream& out, bool gcode = false) : out_(out), gcode_(gcode) {}

  void emit(const SetpointCommand& c) {
    if (gcode_)
      out_ << to_gcode(c) << '\n';
    else
      out_ << to_json(c).dump() << '\n';
    out_.flush();
  }

 private:
  std::ostream& out_;
  bool gcode_;
};

// ---- session --------------------------------------------------------------

struct SessionLog {
  std::vector<SetpointCommand> commands;
  std::vector<ProcessState> states;  // state used for each decision
  std::size_t decisions = 0;
  std::size_t records_read = 0;
  std::size_t records_skipped = 0;   // dropped while settling
  std::size_t partial_discarded = 0; // labels in an unfinished final window
};

template <typename T>
concept TelemetrySource = requires(T s) {
  { s.next() } -> std::same_as<std::optional<TelemetryRecord>>;
};

template <typename T>
concept CommandSink = requires(T s, const SetpointCommand& c) { s.emit(c); };

// Collect `window` records, decide, emit, then skip every record that arrives
// within `settle_seconds` of the decision. Replay mode measures the settle
// time with record timestamps, live mode with a monotonic clock.
template <TelemetrySource Source, CommandSink Sink, typename Scalar>
SessionLog run_session(Source& source, Sink& sink, const QNetwork<Scalar>& net, const RuntimeConfig& cfg) {
  using Clock = std::chrono::steady_clock;
  Controller<Scalar> ctl(net, cfg);
  SessionLog log;
  std::vector<ExtrusionClass> window;
  window.reserve(cfg.window);
  std::optional<double> settle_until;
  std::optional<Clock::time_point> settle_deadline;

  while (auto rec = source.next()) {
    ++log.records_read;
    if (cfg.mode == RunMode::replay && settle_until && rec->t < *settle_until) {
      ++log.records_skipped;
      continue;
    }
    if (cfg.mode == RunMode::live && settle_deadline && Clock::now() < *settle_deadline) {
      ++log.records_skipped;
      continue;
    }
    window.push_back(rec->label);
    if (window.size() < cfg.window) continue;

    Decision d = ctl.decide(window, rec->u_hat, rec->u_bar);
    for (const auto& c : d.commands) {
      sink.emit(c);
      log.commands.push_back(c);
    }
    log.states.push_back(std::move(d.state));
    ++log.decisions;
    window.clear();
    settle_until = rec->t + cfg.settle_seconds;
    settle_deadline = Clock::now() + std::chrono::duration_cast<Clock::duration>(
                                         std::chrono::duration<double>(cfg.settle_seconds));
  }
  log.partial_discarded = window.size();
  return log;
}

}  // namespace flowrl
