// setcon: command-line front end for the SetCon lab.
//
//   setcon generate  --dataset balls --num-sequences 1000 --out data/balls
//   setcon train     --config configs/gridworld_setcon.json --set train.steps=200 --out runs/a
//   setcon sweep     --config configs/balls_setcon.json --out runs/sweep
//   setcon eval      --checkpoint runs/a/checkpoint
//   setcon rollout   --checkpoint runs/a/checkpoint --steps 5 --out runs/a/rollout
//   setcon gradcheck
//   setcon plot      --checkpoint runs/a/checkpoint --out runs/a/figures
//
// Exit status: 0 success, 1 validation or runtime failure, 2 usage error.

#include <CLI11.hpp>

#include <fstream>
#include <iomanip>
#include <iostream>
#include <json.hpp>
#include <optional>

#include "setcon/config.hpp"
#include "setcon/datasets.hpp"
#include "setcon/errors.hpp"
#include "setcon/figures.hpp"
#include "setcon/gradient_gate.hpp"
#include "setcon/harness.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace setcon;

namespace {

struct ExperimentArgs {
  std::string config_path;
  std::vector<std::string> overrides;
  std::string out_dir;
  std::optional<std::uint64_t> seed;
};

void add_experiment_flags(CLI::App* cmd, ExperimentArgs& a) {
  cmd->add_option("--config", a.config_path, "JSON experiment config");
  cmd->add_option("--set", a.overrides, "Override a config key (key=value), repeatable")->take_all();
  cmd->add_option("--out", a.out_dir, "Run directory")->required();
  cmd->add_option("--seed", a.seed, "Root seed (overrides the config)");
}

ExperimentConfig resolve(const ExperimentArgs& a) {
  json j = json::object();
  if (!a.config_path.empty()) {
    std::ifstream in(a.config_path);
    if (!in) throw ConfigError("--config", "cannot open " + a.config_path);
    try {
      j = json::parse(in);
    } catch (const json::parse_error& e) {
      throw ConfigError("--config", std::string("malformed JSON: ") + e.what());
    }
  }
  for (const auto& o : a.overrides) apply_override(j, o);
  if (a.seed) j["seed"] = *a.seed;
  return config_from_json(j);
}

void print_metrics(const std::vector<eval::HeadMetrics>& metrics, std::size_t step, const std::string& split,
                   const std::string& out_dir) {
  std::optional<std::ofstream> sink;
  if (!out_dir.empty()) {
    fs::create_directories(out_dir);
    sink.emplace(fs::path(out_dir) / harness::kMetricsLog, std::ios::app);
  }
  for (const auto& m : metrics) {
    const auto r = harness::metrics_record(m, step, split);
    std::cout << r.dump() << "\n";
    if (sink) *sink << r.dump() << "\n";
  }
}

std::vector<data::VideoSequence> checkpoint_sequences(const fs::path& checkpoint) {
  const auto c = harness::checkpoint_config(checkpoint);
  std::optional<data::Dataset> ds;
  if (c.data.dataset == DatasetKind::balls) ds = harness::load_dataset(c);
  return harness::evaluation_sequences(c, ds ? &*ds : nullptr);
}

int cmd_generate(const std::string& dataset, std::size_t count, std::optional<std::size_t> eval_count,
                 std::uint64_t seed, std::size_t colors, std::size_t objects, std::size_t resolution,
                 const std::string& out) {
  data::Dataset ds;
  if (dataset == "balls") {
    data::BallsConfig bc;
    bc.resolution = resolution;
    bc.num_balls = objects;
    ds = data::make_balls_dataset(count, seed, eval_count.value_or(data::kBallsEvalCount), bc);
  } else {
    ds = data::make_gridworld_dataset(count, seed, eval_count.value_or(0), colors, objects);
  }
  data::dataset_write(ds, out);
  std::cout << "wrote " << ds.sequences.size() << " " << ds.name << " sequences to " << out << " (train "
            << ds.train_count() << ", eval " << ds.sequences.size() - ds.train_count() << ")\n";
  return 0;
}

int cmd_train(const ExperimentArgs& a, std::size_t stop_after, bool fresh) {
  const auto c = resolve(a);
  harness::TrainOptions o;
  o.out_dir = a.out_dir;
  o.resume = !fresh;
  o.stop_after = stop_after;
  o.progress = &std::cout;
  const auto r = harness::train(c, o);
  if (r.diverged) {
    std::cerr << "error: " << r.error << "\n";
    return 1;
  }
  for (const auto& m : r.training_metrics)
    std::cout << harness::metrics_record(m, r.steps_completed, "train_window").dump() << "\n";
  for (const auto& m : r.heldout_metrics)
    std::cout << harness::metrics_record(m, r.steps_completed, "heldout").dump() << "\n";
  std::cout << "checkpoint: " << r.checkpoint.string() << "\n";
  return 0;
}

int cmd_sweep(const ExperimentArgs& a) {
  const auto c = resolve(a);
  const auto r = harness::lr_sweep(c, a.out_dir, &std::cout);
  for (std::size_t i = 0; i < r.runs.size(); ++i) {
    const auto& run = r.runs[i];
    std::cout << (i == r.best ? "* " : "  ") << "lr " << run.lr << "  "
              << (run.diverged ? std::string("diverged") : "slot mse " + std::to_string(run.slot_mse)) << "  "
              << run.dir.string() << "\n";
  }
  return 0;
}

int cmd_eval(const std::string& checkpoint, const std::string& out) {
  const auto metrics = harness::evaluate_checkpoint(checkpoint, checkpoint_sequences(checkpoint));
  const auto step = checkpoint_metadata(checkpoint).value("step", std::size_t(0));
  print_metrics(metrics, step, "heldout", out);
  return 0;
}

int cmd_rollout(const std::string& checkpoint, std::size_t steps, std::size_t index, const std::string& out) {
  const auto sequences = checkpoint_sequences(checkpoint);
  const auto report = harness::rollout_checkpoint(checkpoint, sequences, steps);
  fs::create_directories(out);
  std::ofstream log(fs::path(out) / "rollout.jsonl");
  for (std::size_t k = 0; k < report.mse.size(); ++k) {
    const json r{{"step", k + 1}, {"mse", report.mse[k]}, {"n", sequences.size()}};
    std::cout << r.dump() << "\n";
    log << r.dump() << "\n";
  }
  if (index >= sequences.size()) throw ArgumentError("--index: only " + std::to_string(sequences.size()) + " sequences");
  const auto png = fs::path(out) / ("rollout_" + std::to_string(index) + ".png");
  figures::plot_rollout(checkpoint, sequences[index], steps, png);
  std::cout << "figure: " << png.string() << "\n";
  return 0;
}

int cmd_gradcheck(std::size_t trials, std::uint64_t seed) {
  gate::GateOptions o;
  o.trials = trials;
  o.seed = seed;
  bool ok = true;
  for (const auto& c : gate::run_gradient_gate(o)) {
    std::cout << (c.passed ? "PASS " : "FAIL ") << std::left << std::setw(34) << c.name << " max rel err "
              << std::scientific << std::setprecision(2) << c.result.max_rel_error << std::defaultfloat
              << "  (" << c.result.coordinates << " coords, worst " << c.result.worst_name << ")\n";
    ok = ok && c.passed;
  }
  return ok ? 0 : 1;
}

int cmd_plot(const std::string& checkpoint, std::size_t index, std::size_t count, const std::string& out) {
  const auto sequences = checkpoint_sequences(checkpoint);
  fs::create_directories(out);
  for (std::size_t i = index; i < std::min(sequences.size(), index + count); ++i) {
    const auto png = fs::path(out) / ("sequence_" + std::to_string(i) + ".png");
    figures::plot_sequence(checkpoint, sequences[i], png);
    std::cout << "figure: " << png.string() << "\n";
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"SetCon object-centric video lab"};
  app.require_subcommand(1);

  auto* generate = app.add_subcommand("generate", "Write a dataset container");
  std::string gen_dataset = "balls", gen_out;
  std::size_t gen_count = 1000, gen_colors = 3, gen_objects = 3, gen_resolution = 32;
  std::optional<std::size_t> gen_eval;
  std::uint64_t gen_seed = 0;
  generate->add_option("--dataset", gen_dataset)->check(CLI::IsMember({"balls", "gridworld"}));
  generate->add_option("--num-sequences", gen_count)->check(CLI::PositiveNumber);
  generate->add_option("--eval-count", gen_eval, "Held-out sequences (balls default 128, gridworld 0)");
  generate->add_option("--num-colors", gen_colors);
  generate->add_option("--num-objects", gen_objects);
  generate->add_option("--resolution", gen_resolution);
  generate->add_option("--seed", gen_seed);
  generate->add_option("--out", gen_out)->required();

  auto* train = app.add_subcommand("train", "Train one configuration");
  ExperimentArgs train_args;
  std::size_t stop_after = 0;
  bool fresh = false;
  add_experiment_flags(train, train_args);
  train->add_option("--stop-after", stop_after, "Stop and checkpoint after this many steps");
  train->add_flag("--fresh", fresh, "Ignore an existing checkpoint in --out");

  auto* sweep = app.add_subcommand("sweep", "Learning-rate sweep over 1e-4..5e-4");
  ExperimentArgs sweep_args;
  add_experiment_flags(sweep, sweep_args);

  auto* evaluate = app.add_subcommand("eval", "Report MSE / ARI of a checkpoint's decoder probe");
  std::string eval_ckpt, eval_out;
  evaluate->add_option("--checkpoint", eval_ckpt)->required();
  evaluate->add_option("--out", eval_out, "Append records to DIR/metrics.jsonl");

  auto* rollout = app.add_subcommand("rollout", "Multi-step prediction without re-encoding");
  std::string roll_ckpt, roll_out;
  std::size_t roll_steps = eval::kMaxRolloutSteps, roll_index = 0;
  rollout->add_option("--checkpoint", roll_ckpt)->required();
  rollout->add_option("--steps", roll_steps)->check(CLI::Range(std::size_t(1), eval::kMaxRolloutSteps));
  rollout->add_option("--index", roll_index, "Sequence drawn in the figure");
  rollout->add_option("--out", roll_out)->required();

  auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference gradient suite");
  std::size_t gc_trials = 3;
  std::uint64_t gc_seed = 0;
  gradcheck->add_option("--trials", gc_trials, "Random draws per operation")->check(CLI::PositiveNumber);
  gradcheck->add_option("--seed", gc_seed);

  auto* plot = app.add_subcommand("plot", "Input / reconstruction / attention / alpha grids");
  std::string plot_ckpt, plot_out;
  std::size_t plot_index = 0, plot_count = 1;
  plot->add_option("--checkpoint", plot_ckpt)->required();
  plot->add_option("--index", plot_index);
  plot->add_option("--count", plot_count);
  plot->add_option("--out", plot_out)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n\n" << app.help();
    return 2;
  }

  try {
    if (*generate)
      return cmd_generate(gen_dataset, gen_count, gen_eval, gen_seed, gen_colors, gen_objects, gen_resolution,
                          gen_out);
    if (*train) return cmd_train(train_args, stop_after, fresh);
    if (*sweep) return cmd_sweep(sweep_args);
    if (*evaluate) return cmd_eval(eval_ckpt, eval_out);
    if (*rollout) return cmd_rollout(roll_ckpt, roll_steps, roll_index, roll_out);
    if (*gradcheck) return cmd_gradcheck(gc_trials, gc_seed);
    if (*plot) return cmd_plot(plot_ckpt, plot_index, plot_count, plot_out);
  } catch (const ConfigError& e) {
    std::cerr << "error: invalid configuration: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
