#include <doctest.h>

#include <algorithm>
#include <numeric>
#include <random>

#include "setcon/datasets.hpp"
#include "setcon/evaluation.hpp"
#include "setcon/model.hpp"

using namespace setcon;

namespace {

template <typename T>
Tensor<T> random_tensor(Shape shape, std::mt19937_64& rng) {
  Tensor<T> t(std::move(shape));
  std::normal_distribution<double> n(0, 1);
  for (auto& v : t.storage()) v = T(n(rng));
  return t;
}

Tensor<double> gridworld_batch(std::size_t b, std::uint64_t seed) {
  std::vector<data::VideoSequence> seqs;
  for (std::size_t i = 0; i < b; ++i) seqs.push_back(data::gridworld_sequence(seed + i));
  return eval::stack_frames<double>(seqs);
}

}  // namespace

TEST_SUITE("model") {

TEST_CASE("set encoder is invariant to all 24 slot orders in 32-bit") {
  model::ModelConfig mc;
  const auto params = model::init_model<float>(mc, 3);
  std::mt19937_64 rng(4);
  double worst = 0;
  for (int draw = 0; draw < 5; ++draw) {
    const auto slots = random_tensor<float>(Shape{4, mc.slot_dim}, rng);
    Tape<float> tape;
    BoundParameters<float> p(tape, params, false);
    const auto ref = model::set_encode(p, 4, tape.constant(slots)).value();
    std::vector<std::size_t> perm(4);
    std::iota(perm.begin(), perm.end(), 0);
    int count = 0;
    do {
      Tensor<float> shuffled(slots.shape());
      for (std::size_t k = 0; k < 4; ++k)
        std::copy_n(slots.ptr() + perm[k] * mc.slot_dim, mc.slot_dim, shuffled.ptr() + k * mc.slot_dim);
      const auto out = model::set_encode(p, 4, tape.constant(shuffled)).value();
      worst = std::max(worst, double(max_abs_diff(out, ref)));
      ++count;
    } while (std::next_permutation(perm.begin(), perm.end()));
    CHECK(count == 24);
  }
  CHECK(worst <= 1e-6);
}

TEST_CASE("forward pass shapes for both encoders") {
  for (auto enc : {model::Encoder::slot_attention, model::Encoder::fm_mlp}) {
    model::ModelConfig mc;
    mc.encoder = enc;
    const auto params = model::init_model<double>(mc, 1);
    Tape<double> tape;
    BoundParameters<double> p(tape, params);
    const auto frames = gridworld_batch(2, 7);
    std::mt19937_64 noise(0);
    auto out = model::forward_sequence(p, mc, tape.constant(frames), &noise);
    CHECK(out.batch == 2);
    CHECK(out.length == 8);
    CHECK(out.slots.shape() == Shape{2 * 8 * 4, 16});
    CHECK(out.predictions.shape() == Shape{2 * 6 * 4, 16});
    CHECK(out.set_slots.shape() == Shape{16, 16});
    CHECK(out.set_predictions.shape() == Shape{12, 16});
    CHECK(out.attention.has_value() == (enc == model::Encoder::slot_attention));
    if (out.attention) {
      const auto& a = out.attention->value();
      CHECK(a.shape() == Shape{16, 25, 4});
      for (std::size_t r = 0; r < 16 * 25; ++r) {
        double s = 0;
        for (std::size_t k = 0; k < 4; ++k) s += a[r * 4 + k];
        CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
      }
    }
  }
}

TEST_CASE("predictions use only the two preceding frames") {
  model::ModelConfig mc;
  const auto params = model::init_model<double>(mc, 2);
  auto frames = gridworld_batch(1, 3);
  auto run = [&](const Tensor<double>& f) {
    Tape<double> tape;
    BoundParameters<double> p(tape, params, false);
    return model::forward_sequence(p, mc, tape.constant(f), nullptr).predictions.value();
  };
  const auto a = run(frames);
  // Change frame 7: only its own encoding is affected, no prediction reads it.
  for (std::size_t i = 7 * 75; i < 8 * 75; ++i) frames[i] = -frames[i];
  const auto b = run(frames);
  CHECK(bit_equal(a, b));
}

TEST_CASE("learned slot init repeats per frame, random init draws noise") {
  model::ModelConfig mc;
  mc.slot_init = model::SlotInit::random;
  const auto params = model::init_model<double>(mc, 5);
  Tape<double> tape;
  BoundParameters<double> p(tape, params, false);
  std::mt19937_64 r1(9), r2(9), r3(10);
  const auto a = model::slot_init(p, mc, 3, &r1).value();
  const auto b = model::slot_init(p, mc, 3, &r2).value();
  const auto c = model::slot_init(p, mc, 3, &r3).value();
  CHECK(a.shape() == Shape{12, 16});
  CHECK(bit_equal(a, b));
  CHECK_FALSE(bit_equal(a, c));

  model::ModelConfig learned;
  const auto lp = model::init_model<double>(learned, 5);
  BoundParameters<double> q(tape, lp, false);
  const auto l = model::slot_init(q, learned, 2, nullptr).value();
  for (std::size_t i = 0; i < 4 * 16; ++i) CHECK(l[i] == l[4 * 16 + i]);
}

TEST_CASE("position ramp spans zero to one") {
  const auto ramp = model::position_ramp<double>(5, 5);
  CHECK(ramp.shape() == Shape{25, 2});
  CHECK(ramp.at(0, 0) == 0.0);
  CHECK(ramp.at(24, 0) == 1.0);
  CHECK(ramp.at(4, 1) == 1.0);
  CHECK(ramp.at(5, 0) == doctest::Approx(0.25));
}

TEST_CASE("invalid model configuration is rejected") {
  model::ModelConfig mc;
  mc.num_slots = 0;
  CHECK_THROWS_AS(mc.validate(), ArgumentError);
  mc = {};
  mc.attention_iterations = 0;
  CHECK_THROWS_AS(mc.validate(), ArgumentError);
}

TEST_CASE("initialization is deterministic in the seed") {
  model::ModelConfig mc;
  CHECK(bit_equal(model::init_model<double>(mc, 1), model::init_model<double>(mc, 1)));
  CHECK_FALSE(bit_equal(model::init_model<double>(mc, 1), model::init_model<double>(mc, 2)));
}

}  // TEST_SUITE
