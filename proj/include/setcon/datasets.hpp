#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "setcon/tensor.hpp"

namespace setcon::data {

struct Rgb {
  std::uint8_t r = 0, g = 0, b = 0;
  friend bool operator==(const Rgb&, const Rgb&) = default;
};

/// n colors at hues offset + i/n (mod 1), full saturation and value.
std::vector<Rgb> palette(std::size_t n, double offset);

/// 8-bit channel value to the model's input range: 2c/255 - 1.
inline float to_unit_range(double channel) { return static_cast<float>(2.0 * channel / 255.0 - 1.0); }

/// One simulated episode. Frames are [T, H, W, 3] in [-1, 1]; masks are
/// [T, H, W] with 0 = background and k = object k (1-based).
struct VideoSequence {
  std::string dataset;
  std::uint64_t seed = 0;
  std::vector<Rgb> palette;
  std::size_t num_objects = 0;
  Tensor<float> frames;
  std::vector<std::uint8_t> masks;

  std::size_t length() const { return frames.dim(0); }
  std::size_t height() const { return frames.dim(1); }
  std::size_t width() const { return frames.dim(2); }
  /// Frame t as [H, W, 3].
  Tensor<float> frame(std::size_t t) const;
  std::uint8_t mask_at(std::size_t t, std::size_t row, std::size_t col) const {
    return masks[(t * height() + row) * width() + col];
  }
};

// Multi-object GridWorld ----------------------------------------------------

inline constexpr int kGridSize = 5;
inline constexpr std::size_t kGridFrames = 8;
inline constexpr std::size_t kGridStates = kGridSize * kGridSize * 4;

enum class Direction : std::uint8_t { up = 0, down = 1, left = 2, right = 3 };

struct GridObject {
  int row = 0;
  int col = 0;
  Direction direction = Direction::up;
  Rgb color;
  friend bool operator==(const GridObject&, const GridObject&) = default;
};

struct GridWorldState {
  std::vector<GridObject> objects;
  /// Drawing order for the current frame; the last index is drawn on top.
  std::vector<std::size_t> z_order;
  friend bool operator==(const GridWorldState&, const GridWorldState&) = default;
};

/// Moves every object one cell along its direction. An object that would
/// leave the grid reverses direction and moves one cell the other way.
/// The z-order is carried over unchanged.
GridWorldState gridworld_step(const GridWorldState& state);

/// Renders one frame into `frame` ([H, W, 3], unit range) and `mask` ([H, W]).
void gridworld_render(const GridWorldState& state, std::span<float> frame, std::span<std::uint8_t> mask);

/// Number of ordered initial configurations of `num_objects` distinguishable
/// objects with pairwise distinct (position, direction) pairs.
std::uint64_t gridworld_state_count(std::size_t num_objects);

struct GridWorldEpisode {
  /// State at every frame, including the per-frame z-order.
  std::vector<GridWorldState> states;
  VideoSequence sequence;
};

GridWorldEpisode gridworld_episode(std::uint64_t seed, std::size_t num_colors = 3, std::size_t num_objects = 3);
VideoSequence gridworld_sequence(std::uint64_t seed, std::size_t num_colors = 3, std::size_t num_objects = 3);

// Bouncing Balls -------------------------------------------------------------

struct BallsConfig {
  std::size_t resolution = 32;
  std::size_t frames = 12;
  std::size_t num_balls = 3;
  double radius = 0.1;
  double speed = 0.06;
};

struct Ball {
  double x = 0, y = 0;
  double vx = 0, vy = 0;
  double radius = 0.1;
  Rgb color;
};

/// One physics step: advance, resolve ball-ball contacts (equal-mass elastic
/// exchange along the line of centers, positional projection apart), then
/// reflect off the walls of the unit box. Speeds are held at `speed`.
std::vector<Ball> balls_step(std::vector<Ball> balls, double speed);

void balls_render(const std::vector<Ball>& balls, std::size_t resolution, std::span<float> frame,
                  std::span<std::uint8_t> mask);

struct BallsEpisode {
  std::vector<std::vector<Ball>> states;
  VideoSequence sequence;
};

BallsEpisode bouncing_balls_episode(std::uint64_t seed, const std::vector<Rgb>& colors, const BallsConfig& config = {});
VideoSequence bouncing_balls_sequence(std::uint64_t seed, const std::vector<Rgb>& colors,
                                      const BallsConfig& config = {});
/// Uses the palette every Bouncing Balls dataset derives from `seed`.
VideoSequence bouncing_balls_sequence(std::uint64_t seed);

// Container ------------------------------------------------------------------

/// A set of sequences of one shape; sequences [eval_begin, size) form the
/// evaluation split.
struct Dataset {
  std::string name;
  std::uint64_t seed = 0;
  std::vector<VideoSequence> sequences;
  std::size_t eval_begin = 0;

  std::size_t train_count() const { return eval_begin; }
  std::size_t eval_count() const { return sequences.size() - eval_begin; }
};

inline constexpr std::size_t kBallsEvalCount = 128;

/// Palette shared by every sequence of a Bouncing Balls dataset.
std::vector<Rgb> balls_palette(std::uint64_t dataset_seed, std::size_t n = 3);

Dataset make_balls_dataset(std::size_t count, std::uint64_t seed, std::size_t eval_count = kBallsEvalCount,
                           const BallsConfig& config = {});
Dataset make_gridworld_dataset(std::size_t count, std::uint64_t seed, std::size_t eval_count,
                               std::size_t num_colors = 3, std::size_t num_objects = 3);

inline constexpr const char* kDatasetManifest = "manifest.json";
inline constexpr const char* kFramesBlob = "frames.f32le";
inline constexpr const char* kMasksBlob = "masks.u8";

void dataset_write(const Dataset& dataset, const std::filesystem::path& dir);
/// Throws FormatError (with the failing byte position) on a corrupt manifest
/// or blob size mismatch; nothing is returned on failure.
Dataset dataset_read(const std::filesystem::path& dir);

}  // namespace setcon::data
