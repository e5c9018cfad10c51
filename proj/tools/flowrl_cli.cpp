// flowrl: train, evaluate, simulate, extract vision patches and replay
// deployment sessions.
//
// Exit codes: 0 success, 2 usage / configuration / missing input, 1 runtime
// failure.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "flowrl/checkpoint.hpp"
#include "flowrl/config.hpp"
#include "flowrl/pgm.hpp"
#include "flowrl/runtime.hpp"
#include "flowrl/trainer.hpp"
#include "flowrl/vision_geometry.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// Input problems that map to exit code 2.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

void print_config(const json& j) { std::cerr << "config: " << j.dump() << '\n'; }

json read_json_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw UsageError("cannot open config file " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw UsageError("config file " + path.string() + ": " + e.what());
  }
}

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw std::runtime_error("cannot create directory " + dir.string() + ": " + ec.message());
}

std::ofstream open_out(const fs::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  return out;
}

flowrl::QNetwork<double> load_net(const std::string& path, flowrl::CheckpointHeader* header = nullptr) {
  if (!fs::exists(path)) throw UsageError("checkpoint not found: " + path);
  try {
    return flowrl::load_policy(path, header);
  } catch (const flowrl::FormatError& e) {
    throw UsageError(e.what());
  }
}

// Environment settings stored in a checkpoint, or defaults.
flowrl::EnvConfig env_from_header(const flowrl::CheckpointHeader& h) {
  if (h.config.is_null()) return {};
  return flowrl::train_config_from_json(h.config).env;
}

std::string fmt_num(double v) {
  std::ostringstream s;
  s << v;
  return s.str();
}

// ---- train ----------------------------------------------------------------

struct TrainArgs {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out_dir = ".";
  std::optional<std::size_t> phases;
  std::string resume;
  bool save_replay = false;
};

int cmd_train(const TrainArgs& a) {
  std::optional<flowrl::Trainer> trainer;
  if (!a.resume.empty()) {
    if (!fs::exists(a.resume)) throw UsageError("checkpoint not found: " + a.resume);
    trainer.emplace(flowrl::Trainer::load(a.resume));
  } else {
    flowrl::TrainConfig cfg;
    if (!a.config.empty()) flowrl::merge(cfg, read_json_file(a.config));
    if (a.seed) cfg.seed = *a.seed;
    if (a.phases) {
      if (*a.phases == 0 || *a.phases > cfg.curriculum.phases.size())
        throw UsageError("--phases must lie in [1, " + std::to_string(cfg.curriculum.phases.size()) + "]");
      cfg.curriculum.phases.resize(*a.phases);
    }
    cfg.validate();
    trainer.emplace(cfg);
  }
  auto& t = *trainer;
  print_config(to_json(t.config()));
  ensure_dir(a.out_dir);
  const fs::path out(a.out_dir);
  open_out(out / "config.json") << to_json(t.config()).dump(2) << '\n';

  t.run_curriculum([&](std::size_t phase, const flowrl::Trainer& tr) {
    const auto path = out / ("checkpoint_phase" + std::to_string(phase + 1) + ".bin");
    tr.save(path, a.save_replay);
    const auto recs = tr.log().phase_records(static_cast<std::uint32_t>(phase));
    double tail = 0.0;
    const std::size_t n = std::min<std::size_t>(30, recs.size());
    for (std::size_t i = recs.size() - n; i < recs.size(); ++i) tail += recs[i].cumulative_reward;
    std::cout << "phase " << phase + 1 << ": " << recs.size() << " episodes, final-30 mean reward "
              << (n ? tail / static_cast<double>(n) : 0.0) << ", saved " << path.string() << std::endl;
  });

  auto csv = open_out(out / "train_log.csv");
  t.log().write_csv(csv);
  open_out(out / "train_summary.json") << t.log().summary().dump(2) << '\n';
  return 0;
}

// ---- eval -----------------------------------------------------------------

struct EvalArgs {
  std::string checkpoint;
  double start_flow = 100.0;
  double start_temp = 210.0;
  double rho = 1.0;
  std::uint64_t seed = 0;
  std::size_t steps = 100;
  bool grid = false;
  std::string out_dir = ".";
};

int cmd_eval(const EvalArgs& a) {
  flowrl::CheckpointHeader header;
  const auto net = load_net(a.checkpoint, &header);
  const auto env = env_from_header(header);
  if (!(a.rho > 0.0 && a.rho <= 1.0)) throw UsageError("--rho must lie in (0, 1]");
  print_config({{"checkpoint", a.checkpoint}, {"rho", a.rho}, {"seed", a.seed}, {"steps", a.steps},
                {"grid", a.grid}, {"start_flow", a.start_flow}, {"start_temp", a.start_temp}, {"env", to_json(env)}});
  ensure_dir(a.out_dir);
  const fs::path out(a.out_dir);

  std::vector<std::pair<double, double>> starts;
  if (a.grid) {
    for (double q : flowrl::kEvalFlows)
      for (double u : flowrl::kEvalTemps) starts.emplace_back(q, u);
  } else {
    starts.emplace_back(a.start_flow, a.start_temp);
  }

  auto runs = json::array();
  std::size_t n_conv = 0;
  for (auto [q, u] : starts) {
    const auto r = flowrl::evaluate(net, q, u, a.steps, a.rho, a.seed, env);
    const auto file = out / ("trajectory_q" + fmt_num(q) + "_u" + fmt_num(u) + ".csv");
    auto csv = open_out(file);
    flowrl::write_trace_csv(csv, r.trajectory);
    const auto& last = r.trajectory.back();
    n_conv += r.converged;
    runs.push_back({{"start_flow", q}, {"start_temp", u}, {"converged", r.converged}, {"final_flow", last.q},
                    {"final_temp", last.u_hat}, {"flow_reversals", flowrl::flow_reversals(r.trajectory)},
                    {"trajectory", file.filename().string()}});
    std::printf("start %6.1f%% %5.1fC -> final %6.1f%% %6.2fC  %s\n", q, u, last.q, last.u_hat,
                r.converged ? "converged" : "not converged");
  }
  std::printf("%zu/%zu converged\n", n_conv, starts.size());
  open_out(out / "eval_summary.json") << json{{"rho", a.rho}, {"seed", a.seed}, {"converged", n_conv},
                                              {"runs", runs}}.dump(2)
                                      << '\n';
  return 0;
}

// ---- run ------------------------------------------------------------------

struct RunArgs {
  std::string checkpoint;
  std::string input = "-";
  std::string output = "-";
  bool gcode = false;
  std::size_t window = 20;
  double settle = 6.0;
  double start_flow = 100.0;
  bool live = false;
};

int cmd_run(const RunArgs& a) {
  flowrl::CheckpointHeader header;
  const auto net = load_net(a.checkpoint, &header);
  const auto env = env_from_header(header);
  flowrl::RuntimeConfig cfg;
  cfg.window = a.window;
  cfg.settle_seconds = a.settle;
  cfg.initial_flow = a.start_flow;
  cfg.lambda = env.lambda;
  cfg.eta = env.eta;
  cfg.q_min = env.q_min;
  cfg.q_max = env.q_max;
  cfg.u_bar_min = env.u_bar_min;
  cfg.u_bar_max = env.u_bar_max;
  cfg.mode = a.live ? flowrl::RunMode::live : flowrl::RunMode::replay;
  try {
    cfg.validate();
  } catch (const flowrl::ConfigError& e) {
    throw UsageError(e.what());
  }
  print_config({{"checkpoint", a.checkpoint}, {"window", cfg.window}, {"settle_seconds", cfg.settle_seconds},
                {"initial_flow", cfg.initial_flow}, {"lambda", cfg.lambda}, {"mode", a.live ? "live" : "replay"},
                {"gcode", a.gcode}});

  std::ifstream in_file;
  if (a.input != "-") {
    in_file.open(a.input);
    if (!in_file) throw UsageError("cannot open input " + a.input);
  }
  std::ofstream out_file;
  if (a.output != "-") {
    out_file.open(a.output);
    if (!out_file) throw std::runtime_error("cannot write " + a.output);
  }
  std::istream& in = a.input == "-" ? std::cin : in_file;
  std::ostream& out = a.output == "-" ? std::cout : out_file;

  flowrl::TelemetryReader reader(in);
  flowrl::CommandWriter writer(out, a.gcode);
  const auto log = flowrl::run_session(reader, writer, net, cfg);
  std::cerr << "session: " << log.decisions << " decisions, " << log.records_read << " records read, "
            << log.records_skipped << " skipped while settling, " << log.partial_discarded
            << " in a discarded partial window\n";
  return 0;
}

// ---- vision ---------------------------------------------------------------

struct VisionArgs {
  std::string image;
  double radius = 87.0;
  double h = 10.0;
  std::optional<double> center_x, center_y;
  bool equalize = false;
  std::string patch = "patch.pgm";
  std::string meta = "patch.json";
};

int cmd_vision(const VisionArgs& a) {
  if (!fs::exists(a.image)) throw UsageError("image not found: " + a.image);
  auto img = flowrl::vision::read_pgm(fs::path(a.image));
  if (a.equalize) img = flowrl::vision::equalize(img);
  const flowrl::vision::Point center{a.center_x.value_or((static_cast<double>(img.width()) - 1) / 2),
                                     a.center_y.value_or((static_cast<double>(img.height()) - 1) / 2)};
  print_config({{"image", a.image}, {"radius", a.radius}, {"h", a.h}, {"center", {center.x, center.y}},
                {"equalize", a.equalize}});
  const auto sweep = flowrl::vision::sweep_max_intensity(img, center, a.radius);
  const auto rect = flowrl::vision::rect_vertices(sweep.segment, a.h);
  const auto patch = flowrl::vision::extract_patch(img, rect);
  flowrl::vision::write_pgm(fs::path(a.patch), patch);
  const flowrl::vision::PatchMetadata meta{static_cast<double>(sweep.angle_deg), a.h, a.radius, sweep.mean_intensity,
                                           patch.width(), patch.height()};
  open_out(a.meta) << flowrl::vision::to_json(meta).dump(2) << '\n';
  std::cout << "angle " << sweep.angle_deg << " deg, mean intensity " << sweep.mean_intensity << ", patch "
            << patch.width() << "x" << patch.height() << " -> " << a.patch << '\n';
  return 0;
}

// ---- sim ------------------------------------------------------------------

struct SimArgs {
  std::string checkpoint;
  std::string policy = "hold";
  std::string output = "-";
  std::size_t steps = 100;
  std::uint64_t seed = 0;
  std::size_t phase = 1;
  std::optional<double> rho;
  std::optional<double> start_flow, start_temp;
};

int cmd_sim(const SimArgs& a) {
  flowrl::EnvConfig env;
  std::optional<flowrl::QNetwork<double>> net;
  if (a.policy == "greedy") {
    if (a.checkpoint.empty()) throw UsageError("--policy greedy needs --checkpoint");
    flowrl::CheckpointHeader header;
    net = load_net(a.checkpoint, &header);
    env = env_from_header(header);
  }
  const auto curriculum = flowrl::Curriculum::defaults();
  if (a.phase < 1 || a.phase > curriculum.phases.size()) throw UsageError("--phase must lie in [1, 4]");
  flowrl::PhaseConfig phase = curriculum.phases[a.phase - 1];
  if (a.rho) phase.rho = *a.rho;
  try {
    phase.validate();
  } catch (const flowrl::ConfigError& e) {
    throw UsageError(e.what());
  }
  print_config({{"policy", a.policy}, {"steps", a.steps}, {"seed", a.seed}, {"phase", flowrl::to_json(phase)},
                {"env", flowrl::to_json(env)}});

  flowrl::SimEnv sim(env);
  flowrl::Rng rng(a.seed);
  std::vector<double> state;
  if (a.start_flow || a.start_temp) {
    const double u = a.start_temp.value_or(210.0);
    state = flowrl::flatten(sim.reset_to({a.start_flow.value_or(100.0), u, u, 0}, rng, phase.rho));
  } else {
    state = flowrl::flatten(sim.reset(rng, phase.rho));
  }
  std::vector<flowrl::TraceRow> rows;
  for (std::size_t k = 0; k < a.steps; ++k) {
    const auto t = sim.plant().t;
    flowrl::Action act;
    if (net) {
      act = flowrl::greedy_action(*net, state, t, env.lambda);
    } else if (a.policy == "random") {
      act.flow_index = static_cast<int>(rng.below(flowrl::kActionsPerHead));
      if (flowrl::temp_scheduled(t, env.lambda)) act.temp_index = static_cast<int>(rng.below(flowrl::kActionsPerHead));
    } else if (flowrl::temp_scheduled(t, env.lambda)) {
      act.temp_index = 0;
    }
    const auto o = sim.step(act, phase, rng);
    rows.push_back(flowrl::trace_row(act, o));
    state = flowrl::flatten(o.state);
  }
  if (a.output == "-") {
    flowrl::write_trace_csv(std::cout, rows);
  } else {
    auto out = open_out(a.output);
    flowrl::write_trace_csv(out, rows);
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Closed-loop extrusion control with a curriculum-trained deep Q-network", "flowrl"};
  app.require_subcommand(1);

  TrainArgs train;
  auto* c_train = app.add_subcommand("train", "Train the four-phase curriculum");
  c_train->add_option("--config", train.config, "JSON file overriding the built-in defaults")->check(CLI::ExistingFile);
  c_train->add_option("--seed", train.seed, "Random seed (overrides the config file)");
  c_train->add_option("--out-dir", train.out_dir, "Directory for checkpoints and logs")->capture_default_str();
  c_train->add_option("--phases", train.phases, "Run only the first N phases");
  c_train->add_option("--resume", train.resume, "Continue training from a checkpoint");
  c_train->add_flag("--save-replay", train.save_replay, "Store the replay buffer in each checkpoint (resumable)");

  EvalArgs eval;
  auto* c_eval = app.add_subcommand("eval", "Greedy rollouts of a trained policy");
  c_eval->add_option("--checkpoint", eval.checkpoint, "Checkpoint file")->required();
  c_eval->add_option("--start-flow", eval.start_flow, "Initial flow rate (%)")->capture_default_str();
  c_eval->add_option("--start-temp", eval.start_temp, "Initial nozzle temperature (C)")->capture_default_str();
  c_eval->add_option("--rho", eval.rho, "Probability the true class is presented")->capture_default_str();
  c_eval->add_option("--seed", eval.seed, "Random seed")->capture_default_str();
  c_eval->add_option("--steps", eval.steps, "Rollout length")->capture_default_str()->check(CLI::PositiveNumber);
  c_eval->add_flag("--grid", eval.grid, "Evaluate all 21 grid start points");
  c_eval->add_option("--out-dir", eval.out_dir, "Directory for trajectories and the summary")->capture_default_str();

  RunArgs run;
  auto* c_run = app.add_subcommand("run", "Replay or stream telemetry through a trained policy");
  c_run->add_option("--checkpoint", run.checkpoint, "Checkpoint file")->required();
  c_run->add_option("--input", run.input, "NDJSON telemetry file, '-' for stdin")->capture_default_str();
  c_run->add_option("--output", run.output, "Command output file, '-' for stdout")->capture_default_str();
  c_run->add_flag("--gcode", run.gcode, "Emit M221/M104 lines instead of JSON");
  c_run->add_option("--window", run.window, "Images per decision")->capture_default_str();
  c_run->add_option("--settle", run.settle, "Seconds to wait after each action")->capture_default_str();
  c_run->add_option("--start-flow", run.start_flow, "Flow setpoint when the session starts (%)")->capture_default_str();
  c_run->add_flag("--live", run.live, "Measure settle time with the wall clock instead of record timestamps");

  VisionArgs vision;
  auto* c_vision = app.add_subcommand("vision", "Locate the nozzle ray and extract the 48x16 patch");
  c_vision->set_help_flag("--help", "Print this help message and exit");  // the half-height option is named h
  c_vision->add_option("--image", vision.image, "Binary PGM image")->required();
  c_vision->add_option("--radius", vision.radius, "Sweep radius (px)")->capture_default_str();
  c_vision->add_option("--h", vision.h, "Half-height of the key rectangle (px)")->capture_default_str();
  c_vision->add_option("--center-x", vision.center_x, "Sweep centre x (default: image centre)");
  c_vision->add_option("--center-y", vision.center_y, "Sweep centre y (default: image centre)");
  c_vision->add_flag("--equalize", vision.equalize, "Histogram-equalize before the sweep");
  c_vision->add_option("--patch", vision.patch, "Output patch PGM")->capture_default_str();
  c_vision->add_option("--meta", vision.meta, "Output metadata JSON")->capture_default_str();

  SimArgs sim;
  auto* c_sim = app.add_subcommand("sim", "Roll out the simulator and export a trace CSV");
  c_sim->add_option("--policy", sim.policy, "hold, random or greedy")
      ->capture_default_str()
      ->check(CLI::IsMember({"hold", "random", "greedy"}));
  c_sim->add_option("--checkpoint", sim.checkpoint, "Checkpoint for --policy greedy");
  c_sim->add_option("--output", sim.output, "Trace CSV, '-' for stdout")->capture_default_str();
  c_sim->add_option("--steps", sim.steps, "Number of steps")->capture_default_str();
  c_sim->add_option("--seed", sim.seed, "Random seed")->capture_default_str();
  c_sim->add_option("--phase", sim.phase, "Curriculum phase supplying reward and rho (1-4)")->capture_default_str();
  c_sim->add_option("--rho", sim.rho, "Override the phase's rho");
  c_sim->add_option("--start-flow", sim.start_flow, "Initial flow rate instead of a random reset");
  c_sim->add_option("--start-temp", sim.start_temp, "Initial temperature instead of a random reset");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (*c_train) return cmd_train(train);
    if (*c_eval) return cmd_eval(eval);
    if (*c_run) return cmd_run(run);
    if (*c_vision) return cmd_vision(vision);
    if (*c_sim) return cmd_sim(sim);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const flowrl::ConfigError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const flowrl::SessionError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 2;
}
