#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>

#include "setcon/datasets.hpp"
#include "oracles.hpp"

using namespace setcon;
using namespace setcon::data;
using oracle::hsv_full;
using oracle::oracle_gridworld;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  auto dir = fs::temp_directory_path() / ("setcon_unit_" + name);
  fs::remove_all(dir);
  return dir;
}

}  // namespace

TEST_SUITE("datasets") {

TEST_CASE("gridworld generator equals the reference on 1000 seeds") {
  std::size_t mismatches = 0;
  for (std::uint64_t seed = 0; seed < 1000; ++seed) {
    const auto seq = gridworld_sequence(seed, 3, 3);
    const auto ref = oracle_gridworld(seed, 3, 3);
    if (!std::equal(ref.frames.begin(), ref.frames.end(), seq.frames.ptr()) || ref.masks != seq.masks) ++mismatches;
  }
  CHECK(mismatches == 0);
}

TEST_CASE("gridworld reference agrees for other color and object counts") {
  for (std::uint64_t seed = 0; seed < 50; ++seed)
    for (auto [nc, no] : {std::pair<std::size_t, std::size_t>{1, 3}, {5, 3}, {2, 6}, {3, 1}}) {
      const auto seq = gridworld_sequence(seed, nc, no);
      const auto ref = oracle_gridworld(seed, nc, no);
      CHECK(std::equal(ref.frames.begin(), ref.frames.end(), seq.frames.ptr()));
      CHECK(ref.masks == seq.masks);
    }
}

TEST_CASE("gridworld boundary rule") {
  GridWorldState s;
  s.objects.push_back({0, 2, Direction::up, {}});
  s.objects.push_back({4, 4, Direction::right, {}});
  s.objects.push_back({2, 2, Direction::left, {}});
  const auto n = gridworld_step(s);
  CHECK(n.objects[0] == GridObject{1, 2, Direction::down, {}});
  CHECK(n.objects[1] == GridObject{4, 3, Direction::left, {}});
  CHECK(n.objects[2] == GridObject{2, 1, Direction::left, {}});
}

TEST_CASE("gridworld initial states are distinct (position, direction) pairs") {
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    const auto ep = gridworld_episode(seed, 3, 8);
    std::vector<int> codes;
    for (const auto& o : ep.states[0].objects) codes.push_back((o.row * 5 + o.col) * 4 + int(o.direction));
    std::sort(codes.begin(), codes.end());
    CHECK(std::adjacent_find(codes.begin(), codes.end()) == codes.end());
  }
}

TEST_CASE("gridworld state count") {
  CHECK(gridworld_state_count(3) == 970200u);
  CHECK(gridworld_state_count(3) == 100u * 99u * 98u);
  CHECK(gridworld_state_count(1) == 100u);
  CHECK(gridworld_state_count(101) == 0u);
  CHECK_THROWS_AS(gridworld_sequence(0, 3, 101), ArgumentError);
  CHECK_THROWS_AS(gridworld_sequence(0, 3, 0), ArgumentError);
}

TEST_CASE("palette examples") {
  const auto p3 = palette(3, 0.0);
  CHECK(p3[0] == Rgb{255, 0, 0});
  CHECK(p3[1] == Rgb{0, 255, 0});
  CHECK(p3[2] == Rgb{0, 0, 255});
  CHECK(palette(1, 0.5)[0] == Rgb{0, 255, 255});
  CHECK(palette(2, 1.25) == palette(2, 0.25));
  for (double h : {0.0, 0.1, 0.37, 0.5, 0.83, 0.99}) CHECK(palette(1, h)[0] == hsv_full(h));
  CHECK_THROWS_AS(palette(0, 0.0), ArgumentError);
}

TEST_CASE("bouncing balls keep speed and stay in bounds over 100 seeds") {
  const BallsConfig cfg;
  double worst_speed = 0;
  bool in_bounds = true;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const auto ep = bouncing_balls_episode(seed, palette(3, 0.2), cfg);
    for (const auto& frame : ep.states)
      for (const auto& b : frame) {
        worst_speed = std::max(worst_speed, std::abs(std::hypot(b.vx, b.vy) - cfg.speed));
        in_bounds = in_bounds && b.x >= b.radius && b.x <= 1 - b.radius && b.y >= b.radius && b.y <= 1 - b.radius;
      }
  }
  CHECK(worst_speed <= 1e-9);
  CHECK(in_bounds);
}

TEST_CASE("ball reflects off a wall") {
  Ball b;
  b.x = 0.85;
  b.y = 0.5;
  b.vx = 0.06;
  b.vy = 0.0;
  const auto n = balls_step({b}, 0.06);
  // 0.91 overshoots the 0.9 limit and folds back to 0.89.
  CHECK(n[0].x == doctest::Approx(0.89));
  CHECK(n[0].vx == doctest::Approx(-0.06));
  const auto m = balls_step(n, 0.06);
  CHECK(m[0].x == doctest::Approx(0.83));
}

TEST_CASE("head-on collision exchanges velocities") {
  Ball a, b;
  a.x = 0.4, a.y = 0.5, a.vx = 0.06;
  b.x = 0.6, b.y = 0.5, b.vx = -0.06;
  const auto n = balls_step({a, b}, 0.06);
  CHECK(n[0].vx == doctest::Approx(-0.06));
  CHECK(n[1].vx == doctest::Approx(0.06));
  CHECK(n[0].vy == doctest::Approx(0.0));
  CHECK(n[1].x - n[0].x == doctest::Approx(0.2));
}

TEST_CASE("balls render masks every ball") {
  const auto seq = bouncing_balls_sequence(11);
  CHECK(seq.frames.shape() == Shape{12, 32, 32, 3});
  std::vector<bool> seen(4, false);
  for (auto m : std::vector<std::uint8_t>(seq.masks.begin(), seq.masks.begin() + 32 * 32)) seen.at(m) = true;
  CHECK(seen[1]);
  CHECK(seen[2]);
  CHECK(seen[3]);
}

TEST_CASE("balls dataset reserves 128 evaluation sequences and shares one palette") {
  BallsConfig cfg;
  cfg.resolution = 8;
  cfg.frames = 4;
  const auto ds = make_balls_dataset(140, 3, kBallsEvalCount, cfg);
  CHECK(ds.eval_count() == 128);
  CHECK(ds.train_count() == 12);
  for (const auto& s : ds.sequences) CHECK(s.palette == ds.sequences[0].palette);
  CHECK_THROWS_AS(make_balls_dataset(100, 3, kBallsEvalCount, cfg), ArgumentError);
}

TEST_CASE("dataset container round trip") {
  const auto dir = scratch("dataset");
  BallsConfig cfg;
  cfg.resolution = 8;
  cfg.frames = 5;
  const auto ds = make_balls_dataset(6, 9, 2, cfg);
  dataset_write(ds, dir);
  CHECK(fs::exists(dir / kDatasetManifest));
  CHECK(fs::file_size(dir / kFramesBlob) == 6u * 5 * 8 * 8 * 3 * 4);
  CHECK(fs::file_size(dir / kMasksBlob) == 6u * 5 * 8 * 8);
  const auto back = dataset_read(dir);
  CHECK(back.name == ds.name);
  CHECK(back.eval_begin == ds.eval_begin);
  REQUIRE(back.sequences.size() == ds.sequences.size());
  for (std::size_t i = 0; i < ds.sequences.size(); ++i) {
    CHECK(bit_equal(back.sequences[i].frames, ds.sequences[i].frames));
    CHECK(back.sequences[i].masks == ds.sequences[i].masks);
    CHECK(back.sequences[i].seed == ds.sequences[i].seed);
    CHECK(back.sequences[i].palette == ds.sequences[i].palette);
  }
  fs::remove_all(dir);
}

TEST_CASE("truncated dataset blob is rejected") {
  const auto dir = scratch("dataset_bad");
  dataset_write(make_gridworld_dataset(4, 1, 1), dir);
  fs::resize_file(dir / kFramesBlob, fs::file_size(dir / kFramesBlob) - 4);
  CHECK_THROWS_AS(dataset_read(dir), FormatError);
  dataset_write(make_gridworld_dataset(4, 1, 1), dir);
  std::ofstream(dir / kDatasetManifest) << "[1, 2";
  CHECK_THROWS_AS(dataset_read(dir), FormatError);
  fs::remove_all(dir);
}

}  // TEST_SUITE
