#pragma once

// Curriculum training loop, greedy evaluation, and trajectory metrics.

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "flowrl/checkpoint.hpp"
#include "flowrl/config.hpp"
#include "flowrl/curriculum.hpp"
#include "flowrl/dqn.hpp"
#include "flowrl/replay.hpp"
#include "flowrl/rng.hpp"
#include "flowrl/sim_env.hpp"

namespace flowrl {

struct EpisodeRecord {
  std::uint64_t episode = 0;
  std::uint32_t phase = 0;
  double cumulative_reward = 0.0;

  friend bool operator==(const EpisodeRecord&, const EpisodeRecord&) = default;
};

// Append-only per-episode training record.
class TrainLog {
 public:
  void append(const EpisodeRecord& r) {
    if (!records_.empty() && r.episode <= records_.back().episode)
      throw ContractError("TrainLog: episode indices must be strictly increasing");
    if (r.phase >= phase_starts_.size() || (records_.empty() ? false : r.phase < records_.back().phase))
      throw ContractError("TrainLog: episode logged outside an open phase");
    records_.push_back(r);
  }

  // Marks the start of `phase` at the next record index.
  void begin_phase(std::uint32_t phase) {
    if (phase != phase_starts_.size()) throw ContractError("TrainLog: phases must begin in order");
    phase_starts_.push_back(records_.size());
  }

  const std::vector<EpisodeRecord>& records() const noexcept { return records_; }
  const std::vector<std::size_t>& phase_starts() const noexcept { return phase_starts_; }
  std::size_t size() const noexcept { return records_.size(); }

  // Records belonging to `phase`.
  std::vector<EpisodeRecord> phase_records(std::uint32_t phase) const {
    std::vector<EpisodeRecord> out;
    for (const auto& r : records_)
      if (r.phase == phase) out.push_back(r);
    return out;
  }

  void write_csv(std::ostream& out) const {
    out << "episode,phase,cumulative_reward\n";
    const auto old = out.precision(17);
    for (const auto& r : records_) out << r.episode << ',' << r.phase + 1 << ',' << r.cumulative_reward << '\n';
    out.precision(old);
  }

  nlohmann::json summary() const {
    auto phases = nlohmann::json::array();
    for (std::uint32_t p = 0; p < phase_starts_.size(); ++p) {
      const auto recs = phase_records(p);
      double sum = 0.0, last = 0.0;
      for (const auto& r : recs) sum += r.cumulative_reward;
      const std::size_t tail = std::min<std::size_t>(30, recs.size());
      for (std::size_t i = recs.size() - tail; i < recs.size(); ++i) last += recs[i].cumulative_reward;
      phases.push_back({{"phase", p + 1},
                        {"episodes", recs.size()},
                        {"mean_cumulative_reward", recs.empty() ? 0.0 : sum / recs.size()},
                        {"final_30_mean", tail == 0 ? 0.0 : last / tail}});
    }
    return {{"episodes", records_.size()}, {"phases", phases}};
  }

  friend bool operator==(const TrainLog&, const TrainLog&) = default;

 private:
  std::vector<EpisodeRecord> records_;
  std::vector<std::size_t> phase_starts_;
};

// Trailing moving average; entry i averages values[max(0, i-window+1) .. i].
inline std::vector<double> moving_average(std::span<const double> values, std::size_t window) {
  if (window == 0) throw ContractError("moving_average: window must be >= 1");
  std::vector<double> out(values.size());
  double run = 0.0;
  for (std::size_t i = 0; i < values.size(); ++i) {
    run += values[i];
    if (i >= window) run -= values[i - window];
    out[i] = run / static_cast<double>(std::min(window, i + 1));
  }
  return out;
}

class Trainer {
 public:
  using Net = QNetwork<double>;
  // Called after the last episode of each phase (also for empty phases).
  using PhaseCallback = std::function<void(std::size_t phase_index, const Trainer&)>;

  explicit Trainer(TrainConfig cfg)
      : cfg_((cfg.validate(), std::move(cfg))),
        env_(cfg_.env),
        rng_(cfg_.seed),
        policy_(Net::initialized(NetShape::for_eta(cfg_.env.eta), rng_)),
        target_(policy_),
        adam_(policy_.param_count(), cfg_.hyper.learning_rate),
        buffer_(cfg_.hyper.replay_capacity, static_cast<std::size_t>(policy_.shape().input_dim())) {}

  const TrainConfig& config() const noexcept { return cfg_; }
  const Net& policy() const noexcept { return policy_; }
  const Net& target() const noexcept { return target_; }
  const Adam<double>& optimizer() const noexcept { return adam_; }
  const ReplayBuffer<double>& buffer() const noexcept { return buffer_; }
  const TrainLog& log() const noexcept { return log_; }
  const Rng& rng() const noexcept { return rng_; }
  std::uint64_t global_step() const noexcept { return global_step_; }
  std::size_t phase_index() const noexcept { return phase_; }
  std::size_t episode_in_phase() const noexcept { return episode_in_phase_; }
  bool finished() const noexcept { return phase_ >= cfg_.curriculum.phases.size(); }

  // Runs one episode of `phase` and returns its cumulative reward. Does not
  // touch curriculum progress or the log.
  double run_episode(const PhaseConfig& phase) {
    const auto& h = cfg_.hyper;
    std::vector<double> state = flatten(env_.reset(rng_, phase.rho));
    double total = 0.0;
    for (std::size_t k = 0; k < h.episode_length; ++k) {
      const Action a = select_action(policy_, state, h.epsilon(global_step_), env_.plant().t, cfg_.env.lambda, rng_);
      StepOutcome out = env_.step(a, phase, rng_);
      std::vector<double> next = flatten(out.state);
      // Episodes end on a time limit, not a terminal process state, so the
      // last transition still bootstraps.
      buffer_.push({std::move(state), a.flow_index, a.temp_index.value_or(kNoAction), out.reward, next, false});
      ++global_step_;
      total += out.reward;
      if (buffer_.size() >= std::max(h.learn_start, h.batch)) learn();
      state = std::move(next);
    }
    return total;
  }

  // Continues the curriculum from the current progress. Stops early once
  // `max_episodes` episodes have run in this call.
  void run_curriculum(const PhaseCallback& on_phase_end = {},
                      std::optional<std::size_t> max_episodes = std::nullopt) {
    std::size_t ran = 0;
    const auto& phases = cfg_.curriculum.phases;
    while (phase_ < phases.size()) {
      const auto phase_no = static_cast<std::uint32_t>(phase_);
      if (episode_in_phase_ == 0 && log_.phase_starts().size() == phase_) log_.begin_phase(phase_no);
      const PhaseConfig& ph = phases[phase_];
      while (episode_in_phase_ < ph.episodes) {
        if (max_episodes && ran >= *max_episodes) return;
        const double r = run_episode(ph);
        log_.append({episodes_done_++, phase_no, r});
        ++episode_in_phase_;
        ++ran;
      }
      if (on_phase_end) on_phase_end(phase_, *this);
      ++phase_;
      episode_in_phase_ = 0;
    }
  }

  void save(const std::filesystem::path& path, bool include_replay = true) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw FormatError("checkpoint: cannot write " + path.string());
    BinaryWriter w(out);
    write_header(w, to_json(cfg_), policy_.shape());
    write_params(w, policy_);
    write_params(w, target_);
    w.put<std::uint64_t>(adam_.steps());
    w.put_array(adam_.first_moment().data(), static_cast<std::size_t>(adam_.first_moment().size()));
    w.put_array(adam_.second_moment().data(), static_cast<std::size_t>(adam_.second_moment().size()));
    w.put<std::uint64_t>(global_step_);
    w.put<std::uint64_t>(episodes_done_);
    w.put<std::uint64_t>(phase_);
    w.put<std::uint64_t>(episode_in_phase_);
    w.put_string(rng_.state());

    w.put<std::uint64_t>(log_.size());
    for (const auto& r : log_.records()) {
      w.put(r.episode);
      w.put(r.phase);
      w.put(r.cumulative_reward);
    }
    std::vector<std::uint64_t> starts(log_.phase_starts().begin(), log_.phase_starts().end());
    w.put_vector(starts);

    w.put<std::uint8_t>(include_replay ? 1 : 0);
    if (include_replay) {
      w.put<std::uint64_t>(buffer_.size());
      w.put<std::uint64_t>(buffer_.next_slot());
      w.put_eigen(buffer_.states());
      w.put_eigen(buffer_.next_states());
      w.put_vector(buffer_.flow_actions());
      w.put_vector(buffer_.temp_actions());
      w.put_vector(buffer_.rewards());
      w.put_vector(buffer_.terminals());
    }
    if (!w.ok()) throw FormatError("checkpoint: write failed for " + path.string());
  }

  // Restores a full training state. A checkpoint saved without its replay
  // buffer resumes with an empty buffer.
  static Trainer load(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("checkpoint: cannot open " + path.string());
    BinaryReader r(in);
    const auto header = read_header(r);
    Trainer t(train_config_from_json(header.config));
    if (!(header.shape == t.policy_.shape())) throw FormatError("checkpoint: network shape does not match config");
    read_params_into(r, t.policy_);
    read_params_into(r, t.target_);
    const auto adam_steps = r.get<std::uint64_t>();
    auto m = r.get_vector<double>();
    auto v = r.get_vector<double>();
    t.adam_.restore(Eigen::Map<Eigen::VectorXd>(m.data(), static_cast<Eigen::Index>(m.size())),
                    Eigen::Map<Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size())), adam_steps);
    t.global_step_ = r.get<std::uint64_t>();
    t.episodes_done_ = r.get<std::uint64_t>();
    t.phase_ = r.get<std::uint64_t>();
    t.episode_in_phase_ = r.get<std::uint64_t>();
    t.rng_.restore(r.get_string());

    const auto n = r.get<std::uint64_t>();
    std::vector<EpisodeRecord> recs(n);
    for (auto& rec : recs) {
      rec.episode = r.get<std::uint64_t>();
      rec.phase = r.get<std::uint32_t>();
      rec.cumulative_reward = r.get<double>();
    }
    const auto starts = r.get_vector<std::uint64_t>();
    std::size_t next = 0;
    for (std::uint32_t p = 0; p < starts.size(); ++p) {
      while (next < recs.size() && next < starts[p]) t.log_.append(recs[next++]);
      t.log_.begin_phase(p);
    }
    while (next < recs.size()) t.log_.append(recs[next++]);

    if (r.get<std::uint8_t>() != 0) {
      typename ReplayBuffer<double>::Storage s;
      s.size = r.get<std::uint64_t>();
      s.head = r.get<std::uint64_t>();
      s.states = r.get_eigen<Eigen::MatrixXd>();
      s.next_states = r.get_eigen<Eigen::MatrixXd>();
      s.flow = r.get_vector<int>();
      s.temp = r.get_vector<int>();
      s.reward = r.get_vector<double>();
      s.terminal = r.get_vector<std::uint8_t>();
      t.buffer_.restore(std::move(s));
    }
    return t;
  }

 private:
  void learn() {
    const auto& h = cfg_.hyper;
    auto& ws = workspace_;
    buffer_.gather_into(buffer_.sample_slots(h.batch, rng_), ws.batch);
    td_targets_into(ws.batch, target_, h.gamma, ws.next_cache, ws.y);
    loss_and_gradient_into(policy_, ws.batch, ws.y, ws);
    adam_.step(policy_.params(), ws.out.grad);
    soft_update(target_, policy_, h.tau);
  }

  TrainConfig cfg_;
  SimEnv env_;
  Rng rng_;
  Net policy_;
  Net target_;
  Adam<double> adam_;
  ReplayBuffer<double> buffer_;
  LearnWorkspace<double> workspace_;
  TrainLog log_;
  std::uint64_t global_step_ = 0;
  std::uint64_t episodes_done_ = 0;
  std::size_t phase_ = 0;
  std::size_t episode_in_phase_ = 0;
};

// ---- evaluation -----------------------------------------------------------

inline constexpr std::array<double, 7> kEvalFlows{30, 60, 80, 120, 150, 200, 300};
inline constexpr std::array<double, 3> kEvalTemps{190, 210, 230};

struct ConvergenceBands {
  double q_lo = 90.0, q_hi = 110.0;
  double u_center = 210.0, u_tol = 10.0;
  std::size_t tail = 20;

  bool inside(double q, double u_hat) const {
    return q >= q_lo && q <= q_hi && std::abs(u_hat - u_center) <= u_tol;
  }
};

struct EvalResult {
  std::vector<TraceRow> trajectory;
  bool converged = false;
};

inline bool converged(const std::vector<TraceRow>& traj, const ConvergenceBands& bands = {}) {
  if (traj.size() < bands.tail) return false;
  return std::all_of(traj.end() - static_cast<std::ptrdiff_t>(bands.tail), traj.end(),
                     [&](const TraceRow& r) { return bands.inside(r.q, r.u_hat); });
}

// Greedy rollout from (start_q, start_u) with targets equal to the start
// temperature. `phase` only supplies the reward used for logging and rho.
template <typename Scalar>
EvalResult evaluate(const QNetwork<Scalar>& net, double start_q, double start_u, std::size_t steps, double rho,
                    std::uint64_t seed, const EnvConfig& env_cfg = {},
                    PhaseConfig phase = Curriculum::defaults().phases[2], const ConvergenceBands& bands = {}) {
  phase.rho = rho;
  phase.validate();
  SimEnv env(env_cfg);
  Rng rng(seed);
  std::vector<double> state = flatten(env.reset_to({start_q, start_u, start_u, 0}, rng, rho));
  EvalResult res;
  res.trajectory.reserve(steps);
  for (std::size_t k = 0; k < steps; ++k) {
    const Action a = greedy_action(net, state, env.plant().t, env_cfg.lambda);
    const StepOutcome out = env.step(a, phase, rng);
    res.trajectory.push_back(trace_row(a, out));
    state = flatten(out.state);
  }
  res.converged = converged(res.trajectory, bands);
  return res;
}

// Sign changes between consecutive non-zero flow deltas in the last `last_n`
// steps.
inline std::size_t flow_reversals(const std::vector<TraceRow>& traj, std::size_t last_n = 50) {
  const std::size_t begin = traj.size() > last_n ? traj.size() - last_n : 0;
  std::size_t count = 0;
  int prev = 0;
  for (std::size_t i = begin; i < traj.size(); ++i) {
    const int d = traj[i].flow_delta;
    if (d == 0) continue;
    if (prev != 0 && (d > 0) != (prev > 0)) ++count;
    prev = d;
  }
  return count;
}

}  // namespace flowrl
