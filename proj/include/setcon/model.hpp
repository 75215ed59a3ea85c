#pragma once

// Slot-based video encoder: backbone, Slot Attention (or the FeatureMap MLP
// baseline), per-slot residual transition, and DeepSets aggregation.
//
// Batched layouts used throughout (G = number of frames in the batch):
//   frames      [G, H, W, 3]
//   features    [G * N, enc_dim]         N = H * W, row g * N + n
//   slots       [G * K, slot_dim]        row g * K + k
//   attention   [G, N, K]
//   embeddings  [G, slot_dim]

#include <cstdint>
#include <optional>
#include <random>
#include <string>

#include "setcon/params.hpp"

namespace setcon::model {

enum class Encoder { slot_attention, fm_mlp };
enum class SlotInit { learned, random };

std::string to_string(Encoder e);
std::string to_string(SlotInit s);

struct ModelConfig {
  std::size_t height = 5;
  std::size_t width = 5;
  std::size_t num_slots = 4;
  std::size_t slot_dim = 16;
  std::size_t enc_dim = 32;
  /// Hidden width of every two-layer MLP, and the transition bottleneck.
  std::size_t hidden = 128;
  Encoder encoder = Encoder::slot_attention;
  SlotInit slot_init = SlotInit::learned;
  std::size_t attention_iterations = 1;

  std::size_t num_pixels() const { return height * width; }
  /// Throws ArgumentError on an unusable configuration.
  void validate() const;
};

/// Fresh parameters for `config`, deterministic in `seed`.
template <typename T>
ParameterTree<T> init_model(const ModelConfig& config, std::uint64_t seed);

/// Constant [H * W, 2] ramp; channel 0 follows the row, channel 1 the
/// column, each going from 0 to 1 across the image.
template <typename T>
Tensor<T> position_ramp(std::size_t height, std::size_t width);

/// Two-layer MLP `prefix`.{w1,b1,w2,b2} with a ReLU between the layers.
template <typename T>
Var<T> mlp(const BoundParameters<T>& p, const std::string& prefix, Var<T> x);

/// GRU update over rows: z = sig(x Wz + h Uz + bz), r = sig(x Wr + h Ur + br),
/// c = tanh(x Wh + (r * h) Uh + bh), h' = (1 - z) * h + z * c.
template <typename T>
Var<T> gru_cell(const BoundParameters<T>& p, const std::string& prefix, Var<T> h, Var<T> x);

/// frames [G, H, W, 3] -> features [G * N, enc_dim].
template <typename T>
Var<T> encode_backbone(const BoundParameters<T>& p, const ModelConfig& config, Var<T> frames);

template <typename T>
struct SlotResult {
  Var<T> slots;      ///< [G * K, D]
  Var<T> attention;  ///< [G, N, K]; attention of the last iteration
};

/// Initial slot values for G frames: [G * K, D] (learned: the rows of
/// slots.init repeated per frame; random: mu + eps * sigma with eps drawn
/// from `rng`, one draw per slot and frame).
template <typename T>
Var<T> slot_init(const BoundParameters<T>& p, const ModelConfig& config, std::size_t groups, std::mt19937_64* rng);

/// Slot Attention over features [G * N, enc_dim] from initial slots
/// [G * K, D].
template <typename T>
SlotResult<T> slot_attention(const BoundParameters<T>& p, const ModelConfig& config, Var<T> features,
                             Var<T> initial_slots, std::size_t iterations);

/// FeatureMap MLP: per-pixel linear map to K channels; channel k over all
/// pixels is slot k's raw vector, then an MLP maps it to D.
template <typename T>
Var<T> fm_mlp_slots(const BoundParameters<T>& p, const ModelConfig& config, Var<T> features);

/// p_{t+2} = s_{t+1} + up(LayerNorm(down([s_t, s_{t+1}, s_{t+1} - s_t]))) per slot row.
template <typename T>
Var<T> transition(const BoundParameters<T>& p, Var<T> slots_t, Var<T> slots_t1);

/// DeepSets: outer(LayerNorm(sum_k inner(s_k))). slots [G * K, D] -> [G, D].
template <typename T>
Var<T> set_encode(const BoundParameters<T>& p, std::size_t num_slots, Var<T> slots);

template <typename T>
struct SequenceOutput {
  std::size_t batch = 0;
  std::size_t length = 0;
  Var<T> slots;                    ///< [B * T * K, D], row (b * T + t) * K + k
  Var<T> predictions;              ///< [B * (T - 2) * K, D], row (b * (T - 2) + t - 2) * K + k
  std::optional<Var<T>> attention; ///< [B * T, N, K]; absent for the FM-MLP encoder
  Var<T> set_slots;                ///< [B * T, D]
  Var<T> set_predictions;          ///< [B * (T - 2), D]
};

/// Encodes every frame of a batch of sequences ([B, T, H, W, 3]) and
/// predicts frames 2..T-1 from their two predecessors.
template <typename T>
SequenceOutput<T> forward_sequence(const BoundParameters<T>& p, const ModelConfig& config, Var<T> frames,
                                   std::mt19937_64* slot_noise);

/// Encodes G frames ([G, H, W, 3]) to slots (+ attention).
template <typename T>
SlotResult<T> encode_frames(const BoundParameters<T>& p, const ModelConfig& config, Var<T> frames,
                            std::mt19937_64* slot_noise);

}  // namespace setcon::model
