#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "setcon/datasets.hpp"
#include "setcon/model.hpp"
#include "setcon/optim.hpp"

namespace setcon::eval {

// Spatial broadcast decoder ------------------------------------------------------

struct DecoderConfig {
  std::size_t height = 5;
  std::size_t width = 5;
  std::size_t num_slots = 4;
  std::size_t slot_dim = 16;
  /// Width of the 1x1 convolution stack: 16 for GridWorld, 32 for Bouncing Balls.
  std::size_t filters = 16;

  std::size_t num_pixels() const { return height * width; }
};

/// Parameters decoder.in.{w_slot,w_pos,b}, decoder.hidden.{w,b}, decoder.out.{w,b}.
template <typename T>
ParameterTree<T> init_decoder(const DecoderConfig& config, std::uint64_t seed);

template <typename T>
struct DecoderOutput {
  Var<T> rgb;           ///< [R, K, N, 3]
  Var<T> alpha_logits;  ///< [R, K, N]
  Var<T> alpha;         ///< [R, K, N], softmax over K
  Var<T> composite;     ///< [R, N, 3]
};

/// Decodes slot sets [R * K, D]: each slot is tiled over the pixel grid,
/// joined with the position ramp, and mapped by three 1x1 layers to RGB and
/// an alpha logit. Alphas are normalized across slots and composite the RGBs.
template <typename T>
DecoderOutput<T> broadcast_decode(const BoundParameters<T>& decoder, const DecoderConfig& config, Var<T> slots);

// Metrics -----------------------------------------------------------------------

/// Mean of squared differences over all elements.
template <typename T>
double mse(const Tensor<T>& prediction, const Tensor<T>& target);

/// Adjusted Rand index from the contingency table of two labelings of the
/// same items. Both-sides-single-cluster (and fewer than two items) score 1.
/// nullopt when there are no items.
std::optional<double> adjusted_rand_index(std::span<const int> truth, std::span<const int> predicted);

/// Ground-truth ids and predicted labels restricted to non-background pixels.
struct SegmentationPair {
  std::vector<int> truth;
  std::vector<int> predicted;
};

/// Predicted label = argmax over slots of the normalized alpha ([K, N]);
/// pixels whose ground-truth id is 0 are dropped.
template <typename T>
SegmentationPair segmentation_pair(std::span<const T> alpha, std::size_t num_slots,
                                   std::span<const std::uint8_t> truth_mask);

/// ARI on foreground pixels; nullopt when the frame has none.
std::optional<double> foreground_ari(const SegmentationPair& pair);

struct MeanSem {
  double mean = 0;
  double sem = 0;
  std::size_t n = 0;
};

/// Mean and standard error (sample standard deviation / sqrt(n)).
MeanSem mean_sem(std::span<const double> values);

// Decoder probe -------------------------------------------------------------------

struct ProbeStepResult {
  double mse_slots = 0;
  double mse_predictions = 0;
};

/// One Adam step on the decoder alone. `slots` [B * T * K, D] and
/// `predictions` [B * (T - 2) * K, D] are plain values (no gradient path to
/// the encoder); targets are frames [B, T, H, W, 3]. The loss is the sum of
/// both heads' composite-vs-frame MSE; the reported values are measured
/// before the update.
template <typename T>
ProbeStepResult probe_train_step(ParameterTree<T>& decoder, OptimizerState<T>& optimizer,
                                 const DecoderConfig& config, const Tensor<T>& slots, const Tensor<T>& predictions,
                                 const Tensor<T>& frames);

// Rollout ---------------------------------------------------------------------------

inline constexpr std::size_t kMaxRolloutSteps = 5;

/// Encodes frames 0 and 1 of each sequence ([B, T, H, W, 3]) and applies the
/// transition model `steps` times without re-encoding. Step 1 uses
/// (s_0, s_1); each later step shifts the newest prediction into the pair.
/// Returns one [B * K, D] slot set per step, predicting frame 1 + step.
template <typename T>
std::vector<Tensor<T>> rollout(const ParameterTree<T>& model, const model::ModelConfig& config,
                               const Tensor<T>& frames, std::size_t steps, std::mt19937_64* slot_noise = nullptr);

/// Decodes each rollout step and scores it against frame 1 + step.
template <typename T>
std::vector<double> rollout_mse(const ParameterTree<T>& decoder, const DecoderConfig& config,
                                const std::vector<Tensor<T>>& steps, const Tensor<T>& frames);

// Aggregate evaluation ------------------------------------------------------------------

struct HeadMetrics {
  std::string head;  ///< "slots" or "predictions"
  MeanSem mse;
  std::optional<MeanSem> ari;
};

/// Per-sequence MSE (and foreground ARI when `with_ari`) for both heads,
/// aggregated as mean and standard error over sequences.
template <typename T>
std::vector<HeadMetrics> evaluate_sequences(const ParameterTree<T>& model, const model::ModelConfig& model_config,
                                            const ParameterTree<T>& decoder, const DecoderConfig& decoder_config,
                                            std::span<const data::VideoSequence> sequences, bool with_ari,
                                            std::uint64_t noise_seed = 0);

/// Frames of the given sequences as [B, T, H, W, 3].
template <typename T>
Tensor<T> stack_frames(std::span<const data::VideoSequence> sequences);

}  // namespace setcon::eval
