#pragma once

// Experiment configuration: nested JSON with sections data / model / loss /
// train plus the root seed and arithmetic precision.
//
//   {"seed": 0, "precision": "f32",
//    "data":  {"dataset": "gridworld", "num_colors": 3, ...},
//    "model": {"encoder": "slot_attention", "num_slots": 4, ...},
//    "loss":  {"kind": "setcon", "tau": 0.5, "denominator_mode": "literal"},
//    "train": {"lr": 3e-4, "batch_size": 64, "steps": 5000, ...}}
//
// Overrides use dotted keys ("model.num_slots=6").

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "setcon/evaluation.hpp"
#include "setcon/model.hpp"
#include "setcon/objectives.hpp"

namespace setcon {

enum class DatasetKind { gridworld, balls };
enum class LossKind { setcon, slotwise, reconstruction };
enum class Precision { f32, f64 };

std::string to_string(DatasetKind d);
std::string to_string(LossKind l);
std::string to_string(Precision p);

struct DataConfig {
  DatasetKind dataset = DatasetKind::gridworld;
  std::size_t num_colors = 3;
  std::size_t num_objects = 3;
  /// Bouncing Balls only: container to read; generated in memory when empty.
  std::string path;
  std::size_t num_sequences = 1000;
  std::size_t eval_sequences = 128;
  std::size_t resolution = 32;
};

struct ModelSection {
  model::Encoder encoder = model::Encoder::slot_attention;
  std::size_t num_slots = 4;
  std::size_t slot_dim = 16;
  std::size_t enc_dim = 32;
  std::size_t hidden = 128;
  model::SlotInit slot_init = model::SlotInit::learned;
  std::size_t attention_iterations = 1;
  std::size_t decoder_filters = 16;
};

struct LossSection {
  LossKind kind = LossKind::setcon;
  double tau = objectives::kDefaultTemperature;
  objectives::DenominatorMode denominator_mode = objectives::DenominatorMode::literal;
};

struct TrainSection {
  double lr = 3e-4;
  std::size_t batch_size = 64;
  std::size_t steps = 5000;
  double weight_decay = 1e-6;
  std::size_t log_every = 50;
  std::size_t checkpoint_every = 1000;
  /// Trailing training batches whose pre-update probe error forms the
  /// training-set report (capped at `steps`).
  std::size_t eval_batches = 250;
};

struct ExperimentConfig {
  std::uint64_t seed = 0;
  Precision precision = Precision::f32;
  DataConfig data;
  ModelSection model;
  LossSection loss;
  TrainSection train;

  /// Throws ConfigError naming the first offending key.
  void validate() const;

  std::size_t frame_size() const;
  model::ModelConfig model_config() const;
  eval::DecoderConfig decoder_config() const;
  objectives::ContrastiveOptions contrastive_options() const;
};

/// Throws ConfigError on unknown keys, wrong types or invalid values.
ExperimentConfig config_from_json(const nlohmann::json& j);
nlohmann::json config_to_json(const ExperimentConfig& c);

ExperimentConfig load_config(const std::string& path);

/// Applies "a.b=value" overrides to a JSON document. The value is parsed
/// as JSON when possible and taken as a string otherwise.
void apply_override(nlohmann::json& j, const std::string& assignment);

/// Defaults for a dataset: GridWorld batch 64 / 5,000 steps, Bouncing Balls
/// batch 32 / 10,000 steps with 32 decoder filters.
ExperimentConfig default_config(DatasetKind dataset);

}  // namespace setcon
