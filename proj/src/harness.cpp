#include "setcon/harness.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <ostream>
#include <sstream>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include "setcon/errors.hpp"
#include "setcon/objectives.hpp"
#include "setcon/optim.hpp"
#include "setcon/rng.hpp"

namespace setcon::harness {

namespace fs = std::filesystem;
using nlohmann::json;

double resolve_lr(double base_lr, std::size_t batch_size) {
  if (!(base_lr > 0)) throw ArgumentError("resolve_lr: learning rate must be positive");
  if (batch_size == 0) throw ArgumentError("resolve_lr: batch size must be at least 1");
  return base_lr * double(batch_size) / 256.0;
}

double TrainResult::slot_mse() const {
  for (const auto& m : training_metrics)
    if (m.head == "slots") return m.mse.mean;
  return std::nan("");
}

data::Dataset load_dataset(const ExperimentConfig& c) {
  if (c.data.dataset != DatasetKind::balls) throw ConfigError("data.dataset", "only Bouncing Balls uses a stored dataset");
  if (!c.data.path.empty()) {
    auto ds = data::dataset_read(c.data.path);
    if (ds.name != "balls") throw ConfigError("data.path", "container holds " + ds.name + ", not balls");
    if (ds.sequences.front().height() != c.data.resolution)
      throw ConfigError("data.resolution", "container frames are " + std::to_string(ds.sequences.front().height()) +
                                               " pixels, config says " + std::to_string(c.data.resolution));
    return ds;
  }
  data::BallsConfig bc;
  bc.resolution = c.data.resolution;
  bc.num_balls = c.data.num_objects;
  return data::make_balls_dataset(c.data.num_sequences, derive_seed(c.seed, "dataset", 0), c.data.eval_sequences, bc);
}

std::vector<data::VideoSequence> training_batch(const ExperimentConfig& c, const data::Dataset* dataset,
                                                std::size_t step) {
  const std::size_t B = c.train.batch_size;
  std::vector<data::VideoSequence> batch;
  batch.reserve(B);
  if (c.data.dataset == DatasetKind::gridworld) {
    for (std::size_t i = 0; i < B; ++i)
      batch.push_back(
          data::gridworld_sequence(derive_seed(c.seed, "data", step * B + i), c.data.num_colors, c.data.num_objects));
    return batch;
  }
  if (dataset == nullptr || dataset->train_count() == 0) throw ArgumentError("training_batch: no training split");
  auto rng = make_rng(c.seed, "data", step);
  std::uniform_int_distribution<std::size_t> pick(0, dataset->train_count() - 1);
  for (std::size_t i = 0; i < B; ++i) batch.push_back(dataset->sequences[pick(rng)]);
  return batch;
}

std::vector<data::VideoSequence> evaluation_sequences(const ExperimentConfig& c, const data::Dataset* dataset) {
  if (c.data.dataset == DatasetKind::balls) {
    if (dataset == nullptr) throw ArgumentError("evaluation_sequences: Bouncing Balls needs its dataset");
    return {dataset->sequences.begin() + std::ptrdiff_t(dataset->eval_begin), dataset->sequences.end()};
  }
  std::vector<data::VideoSequence> out;
  for (std::size_t i = 0; i < c.data.eval_sequences; ++i)
    out.push_back(data::gridworld_sequence(derive_seed(c.seed, "eval", i), c.data.num_colors, c.data.num_objects));
  return out;
}

json metrics_record(const eval::HeadMetrics& m, std::size_t step, const std::string& split) {
  json r{{"step", step},
         {"split", split},
         {"head", m.head},
         {"units", "1e-2"},
         {"mse_mean", m.mse.mean * 100},
         {"mse_sem", m.mse.sem * 100},
         {"ari_mean", nullptr},
         {"ari_sem", nullptr},
         {"n", m.mse.n}};
  if (m.ari) {
    r["ari_mean"] = m.ari->mean * 100;
    r["ari_sem"] = m.ari->sem * 100;
  }
  return r;
}

namespace {

void append_line(const fs::path& file, const json& record) {
  std::ofstream out(file, std::ios::app);
  out << record.dump() << '\n';
}

// Drops log records past `step` so a resumed run keeps steps increasing.
void truncate_log(const fs::path& file, std::size_t step) {
  if (!fs::exists(file)) return;
  std::ifstream in(file);
  std::ostringstream kept;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto r = json::parse(line, nullptr, false);
    if (r.is_discarded() || !r.contains("step") || r["step"].get<std::size_t>() > step) continue;
    kept << line << '\n';
  }
  in.close();
  std::ofstream(file, std::ios::trunc) << kept.str();
}

template <typename T>
struct RunState {
  ParameterTree<T> model;
  ParameterTree<T> decoder;
  OptimizerState<T> model_opt;
  OptimizerState<T> decoder_opt;
  std::size_t step = 0;
  std::vector<double> window_slots;
  std::vector<double> window_predictions;
};

template <typename T>
void save_state(const fs::path& dir, const ExperimentConfig& c, const RunState<T>& s, std::size_t steps_done) {
  Checkpoint<T> ck;
  ck.metadata = {{"config", config_to_json(c)},
                 {"step", steps_done},
                 {"optimizer_steps", {{"model", s.model_opt.step}, {"decoder", s.decoder_opt.step}}},
                 {"window", {{"slots", s.window_slots}, {"predictions", s.window_predictions}}}};
  ck.trees.emplace("model", s.model);
  ck.trees.emplace("decoder", s.decoder);
  ck.trees.emplace("adam.model.m", s.model_opt.first_moment);
  ck.trees.emplace("adam.model.v", s.model_opt.second_moment);
  ck.trees.emplace("adam.decoder.m", s.decoder_opt.first_moment);
  ck.trees.emplace("adam.decoder.v", s.decoder_opt.second_moment);
  // Write next to the live checkpoint, then swap, so a crash never leaves a half-written one.
  const fs::path tmp = dir.string() + ".tmp";
  fs::remove_all(tmp);
  save_checkpoint(tmp, ck);
  fs::remove_all(dir);
  fs::rename(tmp, dir);
}

template <typename T>
ParameterTree<T> take_tree(Checkpoint<T>& ck, const std::string& name) {
  auto it = ck.trees.find(name);
  if (it == ck.trees.end()) throw StructuralError("checkpoint is missing tree " + name);
  return std::move(it->second);
}

template <typename T>
RunState<T> load_state(const fs::path& dir, const AdamConfig& hyper) {
  auto ck = load_checkpoint<T>(dir);
  RunState<T> s{take_tree(ck, "model"), take_tree(ck, "decoder"), {}, {}, 0, {}, {}};
  s.model_opt = {ck.metadata.at("optimizer_steps").at("model").template get<std::uint64_t>(),
                 take_tree(ck, "adam.model.m"), take_tree(ck, "adam.model.v"), hyper};
  s.decoder_opt = {ck.metadata.at("optimizer_steps").at("decoder").template get<std::uint64_t>(),
                   take_tree(ck, "adam.decoder.m"), take_tree(ck, "adam.decoder.v"), hyper};
  s.step = ck.metadata.at("step").template get<std::size_t>();
  s.window_slots = ck.metadata.at("window").at("slots").template get<std::vector<double>>();
  s.window_predictions = ck.metadata.at("window").at("predictions").template get<std::vector<double>>();
  return s;
}

template <typename T>
TrainResult train_impl(const ExperimentConfig& c, const TrainOptions& o) {
  c.validate();
  const auto mc = c.model_config();
  const auto dc = c.decoder_config();
  const auto opts = c.contrastive_options();
  const std::size_t B = c.train.batch_size, total = c.train.steps;
  const std::size_t end = o.stop_after == 0 ? total : std::min(o.stop_after, total);
  const std::size_t window = std::min(c.train.eval_batches, total);
  const bool reconstruction = c.loss.kind == LossKind::reconstruction;

  AdamConfig hyper;
  hyper.lr = resolve_lr(c.train.lr, B);
  hyper.weight_decay = c.train.weight_decay;

  fs::create_directories(o.out_dir);
  const fs::path ck_dir = o.out_dir / kCheckpointDir, log_path = o.out_dir / kTrainLog,
                 metrics_path = o.out_dir / kMetricsLog;

  RunState<T> s;
  if (o.resume && fs::exists(ck_dir / kCheckpointManifest)) {
    if (config_to_json(checkpoint_config(ck_dir)) != config_to_json(c))
      throw ConfigError("--out", "existing checkpoint in " + o.out_dir.string() + " was made with a different config");
    s = load_state<T>(ck_dir, hyper);
    truncate_log(log_path, s.step);
    truncate_log(metrics_path, s.step);
  } else {
    s.model = model::init_model<T>(mc, derive_seed(c.seed, "init", 0));
    s.decoder = eval::init_decoder<T>(dc, derive_seed(c.seed, "init", 1));
    s.model_opt = OptimizerState<T>::init(s.model, hyper);
    s.decoder_opt = OptimizerState<T>::init(s.decoder, hyper);
    std::ofstream(log_path, std::ios::trunc);
    std::ofstream(metrics_path, std::ios::trunc);
  }

  std::optional<data::Dataset> dataset;
  if (c.data.dataset == DatasetKind::balls) dataset = load_dataset(c);

  TrainResult result;
  result.checkpoint = ck_dir;
  const auto started = std::chrono::steady_clock::now();
  for (; s.step < end; ++s.step) {
    const auto sequences = training_batch(c, dataset ? &*dataset : nullptr, s.step);
    const auto frames = eval::stack_frames<T>(sequences);
    auto noise = make_rng(c.seed, "slot-noise", s.step);
    const std::size_t L = frames.dim(1);

    Tape<T> tape;
    BoundParameters<T> mp(tape, s.model);
    auto out = model::forward_sequence(mp, mc, tape.constant(frames), &noise);
    double mse_slots = 0, mse_predictions = 0, loss_value = 0;
    bool ok = true;
    if (reconstruction) {
      BoundParameters<T> dp(tape, s.decoder);
      auto d_s = eval::broadcast_decode(dp, dc, out.slots);
      auto d_p = eval::broadcast_decode(dp, dc, out.predictions);
      auto loss = objectives::reconstruction_loss(d_s.composite, d_p.composite, frames);
      loss_value = double(loss.value().data()[0]);
      mse_slots = eval::mse(d_s.composite.value(), objectives::frame_targets(frames, 0));
      mse_predictions = eval::mse(d_p.composite.value(), objectives::frame_targets(frames, 2));
      ok = std::isfinite(loss_value);
      if (ok) {
        tape.backward(loss);
        adam_step(s.model, mp.gradients(), s.model_opt);
        adam_step(s.decoder, dp.gradients(), s.decoder_opt);
      }
    } else {
      auto loss = c.loss.kind == LossKind::setcon
                      ? objectives::setcon_loss(out.set_slots, out.set_predictions, B, L, opts)
                      : objectives::slotwise_loss(out.slots, out.predictions, B, L, mc.num_slots, opts);
      loss_value = double(loss.value().data()[0]);
      ok = std::isfinite(loss_value);
      if (ok) {
        tape.backward(loss);
        adam_step(s.model, mp.gradients(), s.model_opt);
        const auto probe = eval::probe_train_step(s.decoder, s.decoder_opt, dc, out.slots.value(),
                                                  out.predictions.value(), frames);
        mse_slots = probe.mse_slots;
        mse_predictions = probe.mse_predictions;
        ok = std::isfinite(mse_slots) && std::isfinite(mse_predictions);
      }
    }
    ok = ok && s.model.all_finite() && s.decoder.all_finite();
    if (!ok) {
      result.diverged = true;
      result.error = "non-finite loss at step " + std::to_string(s.step + 1);
      append_line(log_path, {{"step", s.step + 1}, {"event", "diverged"}, {"loss", loss_value}});
      if (o.progress) *o.progress << "warning: " << result.error << "; keeping the last checkpoint\n";
      result.steps_completed = s.step;
      return result;
    }

    if (s.step + window >= total) {
      s.window_slots.push_back(mse_slots);
      s.window_predictions.push_back(mse_predictions);
    }
    const std::size_t done = s.step + 1;
    if (done % c.train.log_every == 0 || done == 1 || done == total) {
      const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
      append_line(log_path, {{"step", done},
                             {"loss", loss_value},
                             {"lr", hyper.lr},
                             {"wall_time", wall},
                             {"probe_mse_slots", mse_slots},
                             {"probe_mse_predictions", mse_predictions}});
      if (o.progress)
        *o.progress << "step " << done << "/" << total << " loss " << loss_value << " mse_s " << mse_slots
                    << " mse_p " << mse_predictions << " (" << wall << " s)\n";
    }
    if (done % c.train.checkpoint_every == 0 && done != end) save_state(ck_dir, c, s, done);
  }
  save_state(ck_dir, c, s, s.step);
  result.steps_completed = s.step;
  if (s.step < total) return result;

  eval::HeadMetrics ms{"slots", eval::mean_sem(s.window_slots), std::nullopt};
  eval::HeadMetrics mp{"predictions", eval::mean_sem(s.window_predictions), std::nullopt};
  result.training_metrics = {ms, mp};
  for (const auto& m : result.training_metrics) append_line(metrics_path, metrics_record(m, total, "train_window"));
  if (dataset) {
    const auto heldout = evaluation_sequences(c, &*dataset);
    result.heldout_metrics = eval::evaluate_sequences<T>(s.model, mc, s.decoder, dc, heldout, true,
                                                         derive_seed(c.seed, "eval-noise", 0));
    for (const auto& m : result.heldout_metrics) append_line(metrics_path, metrics_record(m, total, "heldout"));
  }
  append_line(log_path, {{"step", total}, {"event", "eval"}, {"metrics", kMetricsLog}});
  return result;
}

}  // namespace

TrainResult train(const ExperimentConfig& config, const TrainOptions& options) {
#if defined(__GLIBC__)
  // Keep large activation buffers on the heap between steps instead of
  // returning them to the kernel; re-faulting them dominates small models.
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
  return config.precision == Precision::f32 ? train_impl<float>(config, options)
                                            : train_impl<double>(config, options);
}

std::size_t select_best(const std::vector<SweepRun>& runs) {
  std::optional<std::size_t> best;
  for (std::size_t i = 0; i < runs.size(); ++i) {
    const auto& r = runs[i];
    if (r.diverged || !std::isfinite(r.slot_mse)) continue;
    if (!best || r.slot_mse < runs[*best].slot_mse ||
        (r.slot_mse == runs[*best].slot_mse && r.lr < runs[*best].lr))
      best = i;
  }
  if (!best) throw NumericError("lr_sweep: every run diverged");
  return *best;
}

SweepResult lr_sweep(const ExperimentConfig& config, const fs::path& out_dir, std::ostream* progress) {
  SweepResult result;
  for (double lr : kSweepLearningRates) {
    auto c = config;
    c.train.lr = lr;
    std::ostringstream name;
    name << "lr_" << lr;
    TrainOptions o;
    o.out_dir = out_dir / name.str();
    o.progress = progress;
    if (progress) *progress << "sweep: lr " << lr << " -> " << o.out_dir.string() << "\n";
    const auto r = train(c, o);
    SweepRun run{lr, r.diverged, r.diverged ? std::nan("") : r.slot_mse(), o.out_dir};
    if (r.diverged && progress) *progress << "warning: lr " << lr << " diverged and is excluded\n";
    result.runs.push_back(run);
  }
  result.best = select_best(result.runs);
  json summary = json::array();
  for (const auto& r : result.runs)
    summary.push_back({{"lr", r.lr},
                       {"diverged", r.diverged},
                       {"slot_mse", r.diverged ? json(nullptr) : json(r.slot_mse)},
                       {"dir", r.dir.string()}});
  std::ofstream(out_dir / "sweep.json") << json{{"runs", summary}, {"best", result.best}}.dump(2) << '\n';
  return result;
}

ExperimentConfig checkpoint_config(const fs::path& dir) {
  const auto meta = checkpoint_metadata(dir);
  if (!meta.contains("config")) throw ConfigError("config", "checkpoint " + dir.string() + " has no embedded config");
  return config_from_json(meta.at("config"));
}

namespace {

template <typename T>
std::pair<ParameterTree<T>, ParameterTree<T>> load_model_and_decoder(const fs::path& dir) {
  auto ck = load_checkpoint<T>(dir);
  if (!ck.trees.count("decoder")) throw ConfigError("decoder", "checkpoint " + dir.string() + " has no decoder probe");
  return {take_tree(ck, "model"), take_tree(ck, "decoder")};
}

template <typename T>
std::vector<eval::HeadMetrics> evaluate_impl(const fs::path& dir, const ExperimentConfig& c,
                                             const std::vector<data::VideoSequence>& sequences) {
  auto [m, d] = load_model_and_decoder<T>(dir);
  return eval::evaluate_sequences<T>(m, c.model_config(), d, c.decoder_config(), sequences,
                                     c.data.dataset == DatasetKind::balls, derive_seed(c.seed, "eval-noise", 0));
}

template <typename T>
RolloutReport rollout_impl(const fs::path& dir, const ExperimentConfig& c,
                           const std::vector<data::VideoSequence>& sequences, std::size_t steps) {
  auto [m, d] = load_model_and_decoder<T>(dir);
  const auto frames = eval::stack_frames<T>(sequences);
  auto noise = make_rng(c.seed, "eval-noise", 0);
  const auto predicted = eval::rollout(m, c.model_config(), frames, steps, &noise);
  return {eval::rollout_mse(d, c.decoder_config(), predicted, frames)};
}

}  // namespace

std::vector<eval::HeadMetrics> evaluate_checkpoint(const fs::path& dir,
                                                   const std::vector<data::VideoSequence>& sequences) {
  const auto c = checkpoint_config(dir);
  return checkpoint_dtype(dir) == "f32" ? evaluate_impl<float>(dir, c, sequences)
                                        : evaluate_impl<double>(dir, c, sequences);
}

RolloutReport rollout_checkpoint(const fs::path& dir, const std::vector<data::VideoSequence>& sequences,
                                 std::size_t steps) {
  const auto c = checkpoint_config(dir);
  return checkpoint_dtype(dir) == "f32" ? rollout_impl<float>(dir, c, sequences, steps)
                                        : rollout_impl<double>(dir, c, sequences, steps);
}

}  // namespace setcon::harness
