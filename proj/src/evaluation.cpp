#include "setcon/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>

#include "setcon/objectives.hpp"
#include "setcon/rng.hpp"

namespace setcon::eval {

using namespace setcon::ops;

template <typename T>
ParameterTree<T> init_decoder(const DecoderConfig& c, std::uint64_t seed) {
  if (c.filters == 0 || c.slot_dim == 0 || c.num_slots == 0 || c.height == 0 || c.width == 0)
    throw ArgumentError("decoder: extents must be positive");
  auto rng = make_rng(seed, "decoder");
  const std::size_t F = c.filters;
  ParameterTree<T> tree;
  // The first layer sees [slot, x, y]; its weight is kept as two blocks.
  const auto joint = init_weight<T>(c.slot_dim + 2, F, rng);
  Tensor<T> w_slot(Shape{c.slot_dim, F}), w_pos(Shape{2, F});
  std::copy_n(joint.ptr(), c.slot_dim * F, w_slot.ptr());
  std::copy_n(joint.ptr() + c.slot_dim * F, 2 * F, w_pos.ptr());
  tree.add("decoder.in.w_slot", std::move(w_slot), Role::weight);
  tree.add("decoder.in.w_pos", std::move(w_pos), Role::weight);
  tree.add("decoder.in.b", Tensor<T>(Shape{F}, T(0)), Role::bias);
  tree.add("decoder.hidden.w", init_weight<T>(F, F, rng), Role::weight);
  tree.add("decoder.hidden.b", Tensor<T>(Shape{F}, T(0)), Role::bias);
  tree.add("decoder.out.w", init_weight<T>(F, 4, rng), Role::weight);
  tree.add("decoder.out.b", Tensor<T>(Shape{4}, T(0)), Role::bias);
  return tree;
}

template <typename T>
DecoderOutput<T> broadcast_decode(const BoundParameters<T>& p, const DecoderConfig& c, Var<T> slots) {
  const std::size_t K = c.num_slots, N = c.num_pixels();
  if (slots.value().cols() != c.slot_dim || slots.value().rows() % K != 0)
    throw DimensionError("broadcast_decode: slots " + shape_string(slots.shape()) + " are not rows of " +
                         std::to_string(K) + " x " + std::to_string(c.slot_dim));
  const std::size_t R = slots.value().rows() / K;
  auto ramp = slots.tape().constant(model::position_ramp<T>(c.height, c.width));
  auto pos = linear(ramp, p["decoder.in.w_pos"], p["decoder.in.b"]);
  auto h = relu(broadcast_add(matmul(slots, p["decoder.in.w_slot"]), pos));  // [R * K * N, F]
  h = relu(linear(h, p["decoder.hidden.w"], p["decoder.hidden.b"]));
  auto out = linear(h, p["decoder.out.w"], p["decoder.out.b"]);
  DecoderOutput<T> d;
  d.rgb = reshape(slice(out, 0, 3), Shape{R, K, N, 3});
  d.alpha_logits = reshape(slice(out, 3, 4), Shape{R, K, N});
  d.alpha = softmax(d.alpha_logits, 1);
  d.composite = composite(d.alpha, d.rgb);
  return d;
}

template <typename T>
double mse(const Tensor<T>& prediction, const Tensor<T>& target) {
  if (prediction.size() != target.size())
    throw DimensionError("mse: " + shape_string(prediction.shape()) + " vs " + shape_string(target.shape()));
  double acc = 0;
  auto a = prediction.data();
  auto b = target.data();
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = double(a[i]) - double(b[i]);
    acc += d * d;
  }
  return acc / double(a.size());
}

std::optional<double> adjusted_rand_index(std::span<const int> truth, std::span<const int> predicted) {
  if (truth.size() != predicted.size())
    throw DimensionError("adjusted_rand_index: " + std::to_string(truth.size()) + " truth labels vs " +
                         std::to_string(predicted.size()) + " predicted");
  if (truth.empty()) return std::nullopt;
  std::map<std::pair<int, int>, std::int64_t> table;
  std::map<int, std::int64_t> rows, cols;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    ++table[{truth[i], predicted[i]}];
    ++rows[truth[i]];
    ++cols[predicted[i]];
  }
  auto pairs = [](std::int64_t n) { return double(n) * double(n - 1) / 2.0; };
  double index = 0, a = 0, b = 0;
  for (const auto& [_, n] : table) index += pairs(n);
  for (const auto& [_, n] : rows) a += pairs(n);
  for (const auto& [_, n] : cols) b += pairs(n);
  const double total = pairs(static_cast<std::int64_t>(truth.size()));
  if (total == 0) return 1.0;
  const double expected = a * b / total;
  const double maximum = 0.5 * (a + b);
  if (maximum == expected) return 1.0;
  return (index - expected) / (maximum - expected);
}

template <typename T>
SegmentationPair segmentation_pair(std::span<const T> alpha, std::size_t K, std::span<const std::uint8_t> mask) {
  const std::size_t N = mask.size();
  if (K == 0 || alpha.size() != K * N)
    throw DimensionError("segmentation_pair: alpha has " + std::to_string(alpha.size()) + " values for " +
                         std::to_string(K) + " slots x " + std::to_string(N) + " pixels");
  SegmentationPair out;
  for (std::size_t n = 0; n < N; ++n) {
    if (mask[n] == 0) continue;
    std::size_t best = 0;
    for (std::size_t k = 1; k < K; ++k)
      if (alpha[k * N + n] > alpha[best * N + n]) best = k;
    out.truth.push_back(mask[n]);
    out.predicted.push_back(static_cast<int>(best));
  }
  return out;
}

std::optional<double> foreground_ari(const SegmentationPair& pair) {
  return adjusted_rand_index(pair.truth, pair.predicted);
}

MeanSem mean_sem(std::span<const double> values) {
  MeanSem out;
  out.n = values.size();
  if (values.empty()) return out;
  out.mean = std::accumulate(values.begin(), values.end(), 0.0) / double(out.n);
  if (out.n < 2) return out;
  double ss = 0;
  for (double v : values) ss += (v - out.mean) * (v - out.mean);
  out.sem = std::sqrt(ss / double(out.n - 1)) / std::sqrt(double(out.n));
  return out;
}

template <typename T>
ProbeStepResult probe_train_step(ParameterTree<T>& decoder, OptimizerState<T>& optimizer, const DecoderConfig& c,
                                 const Tensor<T>& slots, const Tensor<T>& predictions, const Tensor<T>& frames) {
  Tape<T> tape;
  BoundParameters<T> p(tape, decoder);
  auto ds = broadcast_decode(p, c, tape.constant(slots));
  auto dp = broadcast_decode(p, c, tape.constant(predictions));
  auto loss = objectives::reconstruction_loss(ds.composite, dp.composite, frames);
  tape.backward(loss);
  ProbeStepResult r{mse(ds.composite.value(), objectives::frame_targets(frames, 0)),
                    mse(dp.composite.value(), objectives::frame_targets(frames, 2))};
  adam_step(decoder, p.gradients(), optimizer);
  return r;
}

template <typename T>
std::vector<Tensor<T>> rollout(const ParameterTree<T>& model_params, const model::ModelConfig& c,
                               const Tensor<T>& frames, std::size_t steps, std::mt19937_64* slot_noise) {
  if (steps == 0 || steps > kMaxRolloutSteps)
    throw ArgumentError("rollout: steps must be in [1, " + std::to_string(kMaxRolloutSteps) + "], got " +
                        std::to_string(steps));
  if (frames.rank() != 5 || frames.dim(1) < 2)
    throw DimensionError("rollout: expected at least two context frames [B,T,H,W,3], got " +
                         shape_string(frames.shape()));
  const std::size_t B = frames.dim(0), L = frames.dim(1), per = frames.size() / (B * L);
  Tensor<T> context(Shape{B * 2, frames.dim(2), frames.dim(3), frames.dim(4)});
  for (std::size_t b = 0; b < B; ++b) std::copy_n(frames.ptr() + b * L * per, 2 * per, context.ptr() + b * 2 * per);

  Tape<T> tape;
  BoundParameters<T> p(tape, model_params, false);
  auto encoded = model::encode_frames(p, c, tape.constant(std::move(context)), slot_noise).slots;
  const std::size_t K = c.num_slots;
  std::vector<std::size_t> first, second;
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t k = 0; k < K; ++k) {
      first.push_back((b * 2) * K + k);
      second.push_back((b * 2 + 1) * K + k);
    }
  auto older = gather_rows(encoded, first);
  auto newest = gather_rows(encoded, second);
  std::vector<Tensor<T>> out;
  for (std::size_t s = 0; s < steps; ++s) {
    auto next = model::transition(p, older, newest);
    out.push_back(next.value());
    older = newest;
    newest = next;
  }
  return out;
}

template <typename T>
std::vector<double> rollout_mse(const ParameterTree<T>& decoder, const DecoderConfig& c,
                                const std::vector<Tensor<T>>& steps, const Tensor<T>& frames) {
  if (frames.rank() != 5) throw DimensionError("rollout_mse: expected frames [B,T,H,W,3]");
  const std::size_t B = frames.dim(0), L = frames.dim(1), per = frames.size() / (B * L);
  if (L < steps.size() + 2)
    throw ArgumentError("rollout_mse: " + std::to_string(steps.size()) + " steps need " +
                        std::to_string(steps.size() + 2) + " frames, sequence has " + std::to_string(L));
  std::vector<double> out;
  for (std::size_t s = 0; s < steps.size(); ++s) {
    Tape<T> tape;
    BoundParameters<T> p(tape, decoder, false);
    auto d = broadcast_decode(p, c, tape.constant(steps[s]));
    Tensor<T> target(d.composite.shape());
    for (std::size_t b = 0; b < B; ++b)
      std::copy_n(frames.ptr() + (b * L + s + 2) * per, per, target.ptr() + b * per);
    out.push_back(mse(d.composite.value(), target));
  }
  return out;
}

template <typename T>
Tensor<T> stack_frames(std::span<const data::VideoSequence> sequences) {
  if (sequences.empty()) throw ArgumentError("stack_frames: no sequences");
  const auto& first = sequences.front().frames;
  for (const auto& s : sequences)
    if (s.frames.shape() != first.shape())
      throw DimensionError("stack_frames: sequences have different shapes " + shape_string(s.frames.shape()) +
                           " and " + shape_string(first.shape()));
  Shape shape{sequences.size()};
  shape.insert(shape.end(), first.shape().begin(), first.shape().end());
  Tensor<T> out(shape);
  const std::size_t per = first.size();
  for (std::size_t i = 0; i < sequences.size(); ++i) {
    const auto src = sequences[i].frames.data();
    std::transform(src.begin(), src.end(), out.ptr() + i * per, [](float v) { return static_cast<T>(v); });
  }
  return out;
}

template <typename T>
std::vector<HeadMetrics> evaluate_sequences(const ParameterTree<T>& model_params, const model::ModelConfig& mc,
                                            const ParameterTree<T>& decoder, const DecoderConfig& dc,
                                            std::span<const data::VideoSequence> sequences, bool with_ari,
                                            std::uint64_t noise_seed) {
  if (sequences.empty()) throw ArgumentError("evaluate_sequences: no sequences");
  const std::size_t K = mc.num_slots, N = mc.num_pixels();
  std::vector<double> mse_s, mse_p, ari_s, ari_p;
  auto noise = make_rng(noise_seed, "eval-slots");
  for (std::size_t i = 0; i < sequences.size(); ++i) {
    const auto& seq = sequences[i];
    const std::size_t L = seq.length();
    auto frames = stack_frames<T>(sequences.subspan(i, 1));
    Tape<T> tape;
    BoundParameters<T> mp(tape, model_params, false);
    BoundParameters<T> dp(tape, decoder, false);
    auto out = model::forward_sequence(mp, mc, tape.constant(frames), &noise);
    auto ds = broadcast_decode(dp, dc, out.slots);
    auto dpred = broadcast_decode(dp, dc, out.predictions);
    mse_s.push_back(mse(ds.composite.value(), objectives::frame_targets(frames, 0)));
    mse_p.push_back(mse(dpred.composite.value(), objectives::frame_targets(frames, 2)));
    if (!with_ari) continue;
    auto frame_ari = [&](const Tensor<T>& alpha, std::size_t first_frame) {
      std::vector<double> scores;
      for (std::size_t t = first_frame; t < L; ++t) {
        std::span<const T> a(alpha.ptr() + (t - first_frame) * K * N, K * N);
        std::span<const std::uint8_t> m(seq.masks.data() + t * N, N);
        if (auto v = foreground_ari(segmentation_pair(a, K, m))) scores.push_back(*v);
      }
      return scores;
    };
    if (auto scores = frame_ari(ds.alpha.value(), 0); !scores.empty()) ari_s.push_back(mean_sem(scores).mean);
    if (auto scores = frame_ari(dpred.alpha.value(), 2); !scores.empty()) ari_p.push_back(mean_sem(scores).mean);
  }
  std::vector<HeadMetrics> out(2);
  out[0].head = "slots";
  out[0].mse = mean_sem(mse_s);
  out[1].head = "predictions";
  out[1].mse = mean_sem(mse_p);
  if (with_ari) {
    out[0].ari = mean_sem(ari_s);
    out[1].ari = mean_sem(ari_p);
  }
  return out;
}

#define SETCON_INSTANTIATE_EVAL(T)                                                                             \
  template ParameterTree<T> init_decoder(const DecoderConfig&, std::uint64_t);                                \
  template DecoderOutput<T> broadcast_decode(const BoundParameters<T>&, const DecoderConfig&, Var<T>);          \
  template double mse(const Tensor<T>&, const Tensor<T>&);                                                     \
  template SegmentationPair segmentation_pair(std::span<const T>, std::size_t, std::span<const std::uint8_t>); \
  template ProbeStepResult probe_train_step(ParameterTree<T>&, OptimizerState<T>&, const DecoderConfig&,       \
                                            const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);             \
  template std::vector<Tensor<T>> rollout(const ParameterTree<T>&, const model::ModelConfig&, const Tensor<T>&, \
                                          std::size_t, std::mt19937_64*);                                      \
  template std::vector<double> rollout_mse(const ParameterTree<T>&, const DecoderConfig&,                      \
                                           const std::vector<Tensor<T>>&, const Tensor<T>&);                   \
  template Tensor<T> stack_frames(std::span<const data::VideoSequence>);                                       \
  template std::vector<HeadMetrics> evaluate_sequences(const ParameterTree<T>&, const model::ModelConfig&,     \
                                                       const ParameterTree<T>&, const DecoderConfig&,          \
                                                       std::span<const data::VideoSequence>, bool, std::uint64_t);

SETCON_INSTANTIATE_EVAL(float)
SETCON_INSTANTIATE_EVAL(double)

#undef SETCON_INSTANTIATE_EVAL

}  // namespace setcon::eval
