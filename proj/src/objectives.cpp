#include "setcon/objectives.hpp"

namespace setcon::objectives {

using namespace setcon::ops;

std::string to_string(DenominatorMode m) { return m == DenominatorMode::literal ? "literal" : "exclude_self"; }

namespace {

struct AnchorIndex {
  std::vector<std::size_t> positive;
  std::vector<long> excluded;
};

// Candidate pool layout: [s rows (B * T) ; p rows (B * (T - 2))].
AnchorIndex anchor_index(std::size_t batch, std::size_t length, DenominatorMode mode) {
  const std::size_t preds = length - 2;
  AnchorIndex idx;
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t t = 2; t < length; ++t) {
      const std::size_t anchor = b * preds + (t - 2);
      idx.positive.push_back(b * length + t);
      idx.excluded.push_back(mode == DenominatorMode::exclude_self ? static_cast<long>(batch * length + anchor) : -1L);
    }
  return idx;
}

void check_options(const ContrastiveOptions& o) {
  if (!(o.tau > 0)) throw ArgumentError("contrastive loss: temperature must be positive");
}

void check_layout(std::size_t batch, std::size_t length) {
  if (batch == 0) throw ArgumentError("contrastive loss: empty batch");
  if (length < 3) throw ArgumentError("contrastive loss: sequences need at least 3 frames");
}

}  // namespace

template <typename T>
Var<T> setcon_loss(Var<T> set_slots, Var<T> set_predictions, std::size_t batch, std::size_t length,
                   const ContrastiveOptions& options) {
  check_options(options);
  check_layout(batch, length);
  if (set_slots.value().rows() != batch * length || set_predictions.value().rows() != batch * (length - 2))
    throw DimensionError("setcon_loss: embeddings " + shape_string(set_slots.shape()) + " / " +
                         shape_string(set_predictions.shape()) + " do not match batch " + std::to_string(batch) +
                         " x length " + std::to_string(length));
  const auto idx = anchor_index(batch, length, options.denominator);
  auto pool = concat_rows<T>({set_slots, set_predictions});
  return info_nce(set_predictions, pool, idx.positive, idx.excluded, T(options.tau));
}

template <typename T>
Var<T> slotwise_loss(Var<T> slots, Var<T> predictions, std::size_t batch, std::size_t length,
                     std::size_t num_slots, const ContrastiveOptions& options) {
  check_options(options);
  check_layout(batch, length);
  const std::size_t K = num_slots;
  if (K == 0 || slots.value().rows() != batch * length * K || predictions.value().rows() != batch * (length - 2) * K)
    throw DimensionError("slotwise_loss: slot sets " + shape_string(slots.shape()) + " / " +
                         shape_string(predictions.shape()) + " do not match " + std::to_string(K) + " slots");
  const auto idx = anchor_index(batch, length, options.denominator);
  Var<T> total;
  for (std::size_t k = 0; k < K; ++k) {
    std::vector<std::size_t> s_rows, p_rows;
    for (std::size_t r = 0; r < batch * length; ++r) s_rows.push_back(r * K + k);
    for (std::size_t r = 0; r < batch * (length - 2); ++r) p_rows.push_back(r * K + k);
    auto anchors = gather_rows(predictions, p_rows);
    auto pool = concat_rows<T>({gather_rows(slots, s_rows), anchors});
    auto term = info_nce(anchors, pool, idx.positive, idx.excluded, T(options.tau));
    total = k == 0 ? term : add(total, term);
  }
  return affine(total, T(1) / T(K), T(0));
}

template <typename T>
Tensor<T> frame_targets(const Tensor<T>& frames, std::size_t first) {
  if (frames.rank() != 5) throw DimensionError("frame_targets: expected [B,T,H,W,C], got " + shape_string(frames.shape()));
  const std::size_t B = frames.dim(0), L = frames.dim(1);
  if (first >= L) throw ArgumentError("frame_targets: first frame " + std::to_string(first) + " out of range");
  const std::size_t N = frames.dim(2) * frames.dim(3), C = frames.dim(4), per = N * C;
  Tensor<T> out(Shape{B * (L - first), N, C});
  for (std::size_t b = 0; b < B; ++b)
    std::copy_n(frames.ptr() + (b * L + first) * per, (L - first) * per, out.ptr() + b * (L - first) * per);
  return out;
}

template <typename T>
Var<T> reconstruction_loss(Var<T> composite_slots, Var<T> composite_predictions, const Tensor<T>& frames) {
  auto targets_s = frame_targets(frames, 0);
  auto targets_p = frame_targets(frames, 2);
  if (composite_slots.value().size() != targets_s.size() || composite_predictions.value().size() != targets_p.size())
    throw DimensionError("reconstruction_loss: reconstructions " + shape_string(composite_slots.shape()) + " / " +
                         shape_string(composite_predictions.shape()) + " do not match frames " +
                         shape_string(frames.shape()));
  return add(mse(composite_slots, targets_s.reshaped(composite_slots.shape())),
             mse(composite_predictions, targets_p.reshaped(composite_predictions.shape())));
}

template Var<float> setcon_loss(Var<float>, Var<float>, std::size_t, std::size_t, const ContrastiveOptions&);
template Var<double> setcon_loss(Var<double>, Var<double>, std::size_t, std::size_t, const ContrastiveOptions&);
template Var<float> slotwise_loss(Var<float>, Var<float>, std::size_t, std::size_t, std::size_t,
                                  const ContrastiveOptions&);
template Var<double> slotwise_loss(Var<double>, Var<double>, std::size_t, std::size_t, std::size_t,
                                   const ContrastiveOptions&);

template Tensor<float> frame_targets(const Tensor<float>&, std::size_t);
template Tensor<double> frame_targets(const Tensor<double>&, std::size_t);
template Var<float> reconstruction_loss(Var<float>, Var<float>, const Tensor<float>&);
template Var<double> reconstruction_loss(Var<double>, Var<double>, const Tensor<double>&);

}  // namespace setcon::objectives
