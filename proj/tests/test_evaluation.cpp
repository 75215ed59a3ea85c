#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "setcon/datasets.hpp"
#include "setcon/evaluation.hpp"
#include "oracles.hpp"

using namespace setcon;
using oracle::pair_count_ari;

namespace {

std::vector<data::VideoSequence> gridworld_seqs(std::size_t n, std::uint64_t seed) {
  std::vector<data::VideoSequence> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back(data::gridworld_sequence(seed + i));
  return out;
}

ParameterTree<double> zero_decoder(const eval::DecoderConfig& dc) {
  return eval::init_decoder<double>(dc, 0).zeros_like();
}

}  // namespace

TEST_SUITE("evaluation") {

TEST_CASE("ARI matches pair counting on 100 random labelings") {
  std::mt19937_64 rng(1);
  double worst = 0;
  for (int i = 0; i < 100; ++i) {
    const std::size_t n = 2 + rng() % 49;
    const int ka = 1 + int(rng() % 6), kb = 1 + int(rng() % 6);
    std::vector<int> a(n), b(n);
    for (auto& v : a) v = int(rng() % ka);
    for (auto& v : b) v = int(rng() % kb) + 10;
    worst = std::max(worst, std::abs(*eval::adjusted_rand_index(a, b) - pair_count_ari(a, b)));
  }
  CHECK(worst <= 1e-12);
}

TEST_CASE("ARI reference cases") {
  const std::vector<int> gt{1, 1, 2, 2}, pred{1, 1, 1, 2};
  CHECK(std::abs(*eval::adjusted_rand_index(gt, pred)) <= 1e-12);
  const std::vector<int> truth{0, 0, 1, 1, 2, 2, 2}, relabeled{5, 5, 3, 3, 9, 9, 9};
  CHECK(*eval::adjusted_rand_index(truth, truth) == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(*eval::adjusted_rand_index(truth, relabeled) == doctest::Approx(1.0).epsilon(1e-15));
  const std::vector<int> one{4, 4, 4};
  CHECK(*eval::adjusted_rand_index(one, one) == 1.0);
  CHECK_FALSE(eval::adjusted_rand_index({}, {}).has_value());
  CHECK_THROWS_AS(eval::adjusted_rand_index(gt, one), DimensionError);
}

TEST_CASE("ARI is invariant to permuting items") {
  std::mt19937_64 rng(2);
  std::vector<int> a(30), b(30);
  for (auto& v : a) v = int(rng() % 4);
  for (auto& v : b) v = int(rng() % 3);
  const double base = *eval::adjusted_rand_index(a, b);
  std::vector<std::size_t> idx(30);
  std::iota(idx.begin(), idx.end(), 0);
  std::shuffle(idx.begin(), idx.end(), rng);
  std::vector<int> pa, pb;
  for (auto i : idx) pa.push_back(a[i]), pb.push_back(b[i]);
  CHECK(*eval::adjusted_rand_index(pa, pb) == doctest::Approx(base).epsilon(1e-12));
}

TEST_CASE("segmentation pair drops background and takes the argmax slot") {
  // K = 2, N = 3
  const std::vector<double> alpha{0.9, 0.2, 0.4, 0.1, 0.8, 0.6};
  const std::vector<std::uint8_t> mask{1, 0, 2};
  const auto pair = eval::segmentation_pair<double>(alpha, 2, mask);
  CHECK(pair.truth == std::vector<int>{1, 2});
  CHECK(pair.predicted == std::vector<int>{0, 1});
  CHECK(*eval::foreground_ari(pair) == 1.0);
  const std::vector<std::uint8_t> empty{0, 0, 0};
  CHECK_FALSE(eval::foreground_ari(eval::segmentation_pair<double>(alpha, 2, empty)).has_value());
}

TEST_CASE("mean and standard error") {
  const std::vector<double> v{1, 2, 3, 4};
  const auto m = eval::mean_sem(v);
  CHECK(m.mean == 2.5);
  CHECK(m.sem == doctest::Approx(std::sqrt(5.0 / 3.0) / 2.0));
  CHECK(m.n == 4);
}

TEST_CASE("mse examples") {
  const auto a = Tensor<double>::vector({1, 2, 3});
  const auto b = Tensor<double>::vector({1, 0, 0});
  CHECK(eval::mse(a, a) == 0.0);
  CHECK(eval::mse(a, b) == doctest::Approx(13.0 / 3.0));
  CHECK_THROWS_AS(eval::mse(a, Tensor<double>::vector({1, 2})), DimensionError);
}

TEST_CASE("decoder output shapes and alpha normalization") {
  eval::DecoderConfig dc;
  const auto dec = eval::init_decoder<double>(dc, 3);
  std::mt19937_64 rng(4);
  Tensor<double> slots(Shape{2 * 4, 16});
  std::normal_distribution<double> n(0, 1);
  for (auto& v : slots.storage()) v = n(rng);
  Tape<double> tape;
  BoundParameters<double> p(tape, dec, false);
  const auto out = eval::broadcast_decode(p, dc, tape.constant(slots));
  CHECK(out.rgb.shape() == Shape{2, 4, 25, 3});
  CHECK(out.alpha.shape() == Shape{2, 4, 25});
  CHECK(out.composite.shape() == Shape{2, 25, 3});
  const auto& a = out.alpha.value();
  for (std::size_t r = 0; r < 2; ++r)
    for (std::size_t px = 0; px < 25; ++px) {
      double s = 0;
      for (std::size_t k = 0; k < 4; ++k) s += a[(r * 4 + k) * 25 + px];
      CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
    }
  CHECK_THROWS_AS(eval::broadcast_decode(p, dc, tape.constant(Tensor<double>(Shape{6, 16}))), DimensionError);
}

TEST_CASE("equal alpha logits composite the mean colour") {
  eval::DecoderConfig dc;
  auto dec = zero_decoder(dc);
  // rgb follows slot dim 0 through the first hidden unit; alpha logit stays 0.
  dec.at("decoder.in.w_slot").at(0, 0) = 1.0;
  dec.at("decoder.hidden.w").at(0, 0) = 1.0;
  dec.at("decoder.out.w").at(0, 0) = 1.0;
  Tensor<double> slots(Shape{4, 16});
  for (std::size_t k = 0; k < 4; ++k) slots.at(k, 0) = double(k);
  Tape<double> tape;
  BoundParameters<double> p(tape, dec, false);
  const auto out = eval::broadcast_decode(p, dc, tape.constant(slots));
  for (std::size_t px = 0; px < 25; ++px) CHECK(out.composite.value()[px * 3] == doctest::Approx(1.5));
}

TEST_CASE("saturated alpha passes one slot's colour through") {
  eval::DecoderConfig dc;
  auto dec = zero_decoder(dc);
  dec.at("decoder.in.w_slot").at(0, 0) = 1.0;
  dec.at("decoder.hidden.w").at(0, 0) = 1.0;
  dec.at("decoder.out.w").at(0, 3) = 100.0;
  dec.at("decoder.out.w").at(0, 1) = 0.5;
  dec.at("decoder.out.b")[1] = -0.25;
  Tensor<double> slots(Shape{4, 16});
  slots.at(2, 0) = 1.0;
  Tape<double> tape;
  BoundParameters<double> p(tape, dec, false);
  const auto out = eval::broadcast_decode(p, dc, tape.constant(slots));
  for (std::size_t px = 0; px < 25; ++px) {
    CHECK(out.alpha.value()[2 * 25 + px] == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(out.composite.value()[px * 3 + 1] == doctest::Approx(0.25).epsilon(1e-12));
  }
}

TEST_CASE("100 probe steps leave the model bit-identical") {
  model::ModelConfig mc;
  eval::DecoderConfig dc;
  const auto model = model::init_model<double>(mc, 1);
  const auto model_before = model;
  auto decoder = eval::init_decoder<double>(dc, 2);
  const auto decoder_before = decoder;
  auto opt = OptimizerState<double>::init(decoder, AdamConfig{1e-3});
  double first = 0, last = 0;
  for (std::size_t step = 0; step < 100; ++step) {
    const auto frames = eval::stack_frames<double>(gridworld_seqs(2, 10 * step));
    Tape<double> tape;
    BoundParameters<double> p(tape, model, true);
    auto out = model::forward_sequence(p, mc, tape.constant(frames), nullptr);
    const auto r = eval::probe_train_step(decoder, opt, dc, out.slots.value(), out.predictions.value(), frames);
    if (step == 0) first = r.mse_slots;
    last = r.mse_slots;
  }
  CHECK(bit_equal(model, model_before));
  CHECK_FALSE(bit_equal(decoder, decoder_before));
  CHECK(opt.step == 100);
  CHECK(last < first);
}

TEST_CASE("probe with zero learning rate leaves the decoder unchanged") {
  model::ModelConfig mc;
  eval::DecoderConfig dc;
  const auto model = model::init_model<double>(mc, 1);
  auto decoder = eval::init_decoder<double>(dc, 2);
  const auto before = decoder;
  auto opt = OptimizerState<double>::init(decoder, AdamConfig{0.0});
  const auto frames = eval::stack_frames<double>(gridworld_seqs(2, 0));
  Tape<double> tape;
  BoundParameters<double> p(tape, model, false);
  auto out = model::forward_sequence(p, mc, tape.constant(frames), nullptr);
  const auto r1 = eval::probe_train_step(decoder, opt, dc, out.slots.value(), out.predictions.value(), frames);
  const auto r2 = eval::probe_train_step(decoder, opt, dc, out.slots.value(), out.predictions.value(), frames);
  CHECK(bit_equal(decoder, before));
  CHECK(r1.mse_slots == r2.mse_slots);
  CHECK(r1.mse_slots > 0);
}

TEST_CASE("one-step rollout is the transition output") {
  model::ModelConfig mc;
  const auto model = model::init_model<double>(mc, 6);
  const auto frames = eval::stack_frames<double>(gridworld_seqs(3, 20));
  const auto roll = eval::rollout(model, mc, frames, 1);
  REQUIRE(roll.size() == 1);

  // Reference: encode frames 0 and 1 of each sequence, then one transition.
  const std::size_t K = mc.num_slots, per = 5 * 5 * 3;
  Tensor<double> context(Shape{3 * 2, 5, 5, 3});
  for (std::size_t b = 0; b < 3; ++b) std::copy_n(frames.ptr() + b * 8 * per, 2 * per, context.ptr() + b * 2 * per);
  Tape<double> tape;
  BoundParameters<double> p(tape, model, false);
  auto slots = model::encode_frames(p, mc, tape.constant(context), nullptr).slots;
  std::vector<std::size_t> s0, s1;
  for (std::size_t b = 0; b < 3; ++b)
    for (std::size_t k = 0; k < K; ++k) s0.push_back(2 * b * K + k), s1.push_back((2 * b + 1) * K + k);
  const auto expected = model::transition(p, ops::gather_rows(slots, s0), ops::gather_rows(slots, s1)).value();
  CHECK(bit_equal(roll[0], expected));
}

TEST_CASE("zero transition update repeats the last context slots") {
  model::ModelConfig mc;
  auto model = model::init_model<double>(mc, 7);
  model.at("transition.up.w").fill(0.0);
  model.at("transition.up.b").fill(0.0);
  const auto frames = eval::stack_frames<double>(gridworld_seqs(2, 30));
  const auto roll = eval::rollout(model, mc, frames, 5);
  REQUIRE(roll.size() == 5);
  Tape<double> tape;
  BoundParameters<double> p(tape, model, false);
  const auto f1 = tape.constant(frames);
  auto enc = model::forward_sequence(p, mc, f1, nullptr).slots.value();
  for (const auto& step : roll)
    for (std::size_t b = 0; b < 2; ++b)
      for (std::size_t i = 0; i < 4 * 16; ++i) CHECK(step[b * 64 + i] == enc[(b * 8 + 1) * 64 + i]);
}

TEST_CASE("rollout step limits") {
  model::ModelConfig mc;
  const auto model = model::init_model<double>(mc, 8);
  const auto frames = eval::stack_frames<double>(gridworld_seqs(1, 0));
  CHECK_THROWS_AS(eval::rollout(model, mc, frames, 6), ArgumentError);
  CHECK_THROWS_AS(eval::rollout(model, mc, frames, 0), ArgumentError);
  const auto roll = eval::rollout(model, mc, frames, 5);
  eval::DecoderConfig dc;
  const auto mse = eval::rollout_mse(eval::init_decoder<double>(dc, 1), dc, roll, frames);
  CHECK(mse.size() == 5);
  for (double v : mse) CHECK(std::isfinite(v));
}

TEST_CASE("evaluation aggregates per-sequence scores") {
  model::ModelConfig mc;
  eval::DecoderConfig dc;
  const auto model = model::init_model<double>(mc, 1);
  const auto dec = eval::init_decoder<double>(dc, 1);
  const auto seqs = gridworld_seqs(5, 40);
  const auto heads = eval::evaluate_sequences(model, mc, dec, dc, seqs, true);
  REQUIRE(heads.size() == 2);
  CHECK(heads[0].head == "slots");
  CHECK(heads[1].head == "predictions");
  CHECK(heads[0].mse.n == 5);
  REQUIRE(heads[0].ari.has_value());
  CHECK(heads[0].ari->mean <= 1.0);
  CHECK_FALSE(eval::evaluate_sequences(model, mc, dec, dc, seqs, false)[0].ari.has_value());
}

}  // TEST_SUITE
