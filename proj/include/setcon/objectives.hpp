#pragma once

// Contrastive objectives over the outputs of model::forward_sequence, and
// the decoder-driven reconstruction objective.

#include "setcon/model.hpp"

namespace setcon::objectives {

enum class DenominatorMode {
  /// Every embedding of both kinds in the batch, including the positive and
  /// the anchor itself.
  literal,
  /// As literal, minus the anchor's own prediction embedding.
  exclude_self,
};

std::string to_string(DenominatorMode m);

inline constexpr double kDefaultTemperature = 0.5;

struct ContrastiveOptions {
  double tau = kDefaultTemperature;
  DenominatorMode denominator = DenominatorMode::literal;
};

/// Set Contrastive loss. `set_slots` [B * T, D] holds z_s for every frame,
/// `set_predictions` [B * (T - 2), D] holds z_p for frames 2..T-1. Each z_p
/// is an anchor whose positive is z_s of the same sequence and frame; the
/// denominator runs over all z_s and z_p in the batch. Mean over anchors.
template <typename T>
Var<T> setcon_loss(Var<T> set_slots, Var<T> set_predictions, std::size_t batch, std::size_t length,
                   const ContrastiveOptions& options = {});

/// Slotwise baseline: the same objective per slot index k, contrasting
/// p^k against s^k and p^k of every sequence and frame, averaged over k.
/// slots [B * T * K, D], predictions [B * (T - 2) * K, D].
template <typename T>
Var<T> slotwise_loss(Var<T> slots, Var<T> predictions, std::size_t batch, std::size_t length,
                     std::size_t num_slots, const ContrastiveOptions& options = {});

/// Frames [B, T, H, W, C] -> frames t in [first, T) of each sequence as [B * (T - first), H * W, C].
template <typename T>
Tensor<T> frame_targets(const Tensor<T>& frames, std::size_t first);

/// Reconstruction objective: MSE of the composited s_t reconstructions
/// ([B * T, N, 3]) against every frame plus MSE of the p_t reconstructions
/// ([B * (T - 2), N, 3]) against frames 2..T-1.
template <typename T>
Var<T> reconstruction_loss(Var<T> composite_slots, Var<T> composite_predictions, const Tensor<T>& frames);

}  // namespace setcon::objectives
