#pragma once

// Training loop, learning-rate sweep and checkpoint evaluation.
//
// A run directory holds:
//   checkpoint/        latest checkpoint (model, decoder, both optimizer states)
//   train_log.jsonl    one record per logged step, plus eval records
//   metrics.jsonl      one record per head per evaluation

#include <array>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "setcon/config.hpp"
#include "setcon/datasets.hpp"
#include "setcon/evaluation.hpp"

namespace setcon::harness {

/// lr * batch_size / 256.
double resolve_lr(double base_lr, std::size_t batch_size);

inline constexpr std::array<double, 5> kSweepLearningRates{1e-4, 2e-4, 3e-4, 4e-4, 5e-4};

inline constexpr const char* kCheckpointDir = "checkpoint";
inline constexpr const char* kTrainLog = "train_log.jsonl";
inline constexpr const char* kMetricsLog = "metrics.jsonl";

struct TrainOptions {
  std::filesystem::path out_dir;
  /// Continue from out_dir/checkpoint when it exists.
  bool resume = true;
  /// Stop (and checkpoint) once this many steps are done; 0 runs to config.train.steps.
  std::size_t stop_after = 0;
  std::ostream* progress = nullptr;
};

struct TrainResult {
  std::size_t steps_completed = 0;
  bool diverged = false;
  std::string error;
  /// Pre-update probe error over the trailing training batches, per head.
  std::vector<eval::HeadMetrics> training_metrics;
  /// Held-out report (Bouncing Balls eval split); empty for GridWorld, whose
  /// report is the training-batch window itself.
  std::vector<eval::HeadMetrics> heldout_metrics;
  std::filesystem::path checkpoint;

  /// Selection key: slot-head MSE over the trailing training batches.
  double slot_mse() const;
};

/// Runs (or resumes) one experiment. Non-finite losses stop the run with
/// `diverged` set; the last checkpoint written before that is kept.
TrainResult train(const ExperimentConfig& config, const TrainOptions& options);

struct SweepRun {
  double lr = 0;
  bool diverged = false;
  double slot_mse = 0;
  std::filesystem::path dir;
};

struct SweepResult {
  std::vector<SweepRun> runs;
  std::size_t best = 0;
};

/// Trains one run per learning rate in kSweepLearningRates under
/// out_dir/lr_<value>. The best run has the lowest training slot MSE; ties
/// go to the lower learning rate; diverged runs are skipped with a warning.
/// Throws NumericError when every run diverges.
SweepResult lr_sweep(const ExperimentConfig& config, const std::filesystem::path& out_dir,
                     std::ostream* progress = nullptr);

/// Picks the best run from finished sweep entries (same rule as lr_sweep).
std::size_t select_best(const std::vector<SweepRun>& runs);

/// Training batch for `step`: [B, T, H, W, 3] frames as float.
std::vector<data::VideoSequence> training_batch(const ExperimentConfig& config, const data::Dataset* dataset,
                                                std::size_t step);

/// Held-out sequences: the Bouncing Balls eval split, or freshly seeded
/// GridWorld sequences.
std::vector<data::VideoSequence> evaluation_sequences(const ExperimentConfig& config, const data::Dataset* dataset);

/// Dataset for a Bouncing Balls config (read from data.path or generated).
data::Dataset load_dataset(const ExperimentConfig& config);

/// Resolved config stored in a checkpoint's metadata.
ExperimentConfig checkpoint_config(const std::filesystem::path& checkpoint_dir);

/// Decodes `sequences` with a checkpoint's model and decoder probe. Throws
/// ConfigError("decoder") when the checkpoint has no decoder.
std::vector<eval::HeadMetrics> evaluate_checkpoint(const std::filesystem::path& checkpoint_dir,
                                                   const std::vector<data::VideoSequence>& sequences);

/// One metrics.jsonl record. Values are in units of 1e-2.
nlohmann::json metrics_record(const eval::HeadMetrics& m, std::size_t step, const std::string& split);

struct RolloutReport {
  std::vector<double> mse;  ///< per step, 1..k
};

RolloutReport rollout_checkpoint(const std::filesystem::path& checkpoint_dir,
                                 const std::vector<data::VideoSequence>& sequences, std::size_t steps);

}  // namespace setcon::harness
