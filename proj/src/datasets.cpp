#include "setcon/datasets.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

#include <json.hpp>

#include "setcon/rng.hpp"

namespace setcon::data {

namespace fs = std::filesystem;
using nlohmann::json;

std::vector<Rgb> palette(std::size_t n, double offset) {
  if (n == 0) throw ArgumentError("palette: need at least one color");
  std::vector<Rgb> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    double hue = std::fmod(offset + static_cast<double>(i) / static_cast<double>(n), 1.0);
    if (hue < 0) hue += 1.0;
    const double h6 = hue * 6.0;
    const int sector = static_cast<int>(std::floor(h6)) % 6;
    const double f = h6 - std::floor(h6);
    // saturation = value = 1
    const double q = 1.0 - f, t = f;
    double r = 0, g = 0, b = 0;
    switch (sector) {
      case 0: r = 1, g = t, b = 0; break;
      case 1: r = q, g = 1, b = 0; break;
      case 2: r = 0, g = 1, b = t; break;
      case 3: r = 0, g = q, b = 1; break;
      case 4: r = t, g = 0, b = 1; break;
      default: r = 1, g = 0, b = q; break;
    }
    auto to8 = [](double c) { return static_cast<std::uint8_t>(std::lround(std::clamp(c, 0.0, 1.0) * 255.0)); };
    out.push_back(Rgb{to8(r), to8(g), to8(b)});
  }
  return out;
}

Tensor<float> VideoSequence::frame(std::size_t t) const {
  const std::size_t h = height(), w = width();
  const std::size_t n = h * w * 3;
  std::vector<float> values(frames.ptr() + t * n, frames.ptr() + (t + 1) * n);
  return Tensor<float>(Shape{h, w, 3}, std::move(values));
}

// GridWorld -------------------------------------------------------------------

GridWorldState gridworld_step(const GridWorldState& state) {
  GridWorldState next = state;
  for (auto& obj : next.objects) {
    int dr = 0, dc = 0;
    switch (obj.direction) {
      case Direction::up: dr = -1; break;
      case Direction::down: dr = 1; break;
      case Direction::left: dc = -1; break;
      case Direction::right: dc = 1; break;
    }
    const int r = obj.row + dr, c = obj.col + dc;
    if (r < 0 || r >= kGridSize || c < 0 || c >= kGridSize) {
      switch (obj.direction) {
        case Direction::up: obj.direction = Direction::down; break;
        case Direction::down: obj.direction = Direction::up; break;
        case Direction::left: obj.direction = Direction::right; break;
        case Direction::right: obj.direction = Direction::left; break;
      }
      obj.row -= dr;
      obj.col -= dc;
    } else {
      obj.row = r;
      obj.col = c;
    }
  }
  return next;
}

void gridworld_render(const GridWorldState& state, std::span<float> frame, std::span<std::uint8_t> mask) {
  const std::size_t pixels = static_cast<std::size_t>(kGridSize) * kGridSize;
  if (frame.size() != pixels * 3 || mask.size() != pixels)
    throw DimensionError("gridworld_render: buffers must hold one 5x5 frame");
  std::fill(frame.begin(), frame.end(), to_unit_range(0));
  std::fill(mask.begin(), mask.end(), std::uint8_t{0});
  for (auto idx : state.z_order) {
    const auto& obj = state.objects.at(idx);
    const std::size_t p = static_cast<std::size_t>(obj.row) * kGridSize + static_cast<std::size_t>(obj.col);
    frame[p * 3 + 0] = to_unit_range(obj.color.r);
    frame[p * 3 + 1] = to_unit_range(obj.color.g);
    frame[p * 3 + 2] = to_unit_range(obj.color.b);
    mask[p] = static_cast<std::uint8_t>(idx + 1);
  }
}

std::uint64_t gridworld_state_count(std::size_t num_objects) {
  if (num_objects > kGridStates) return 0;
  std::uint64_t n = 1;
  for (std::size_t i = 0; i < num_objects; ++i) n *= kGridStates - i;
  return n;
}

GridWorldEpisode gridworld_episode(std::uint64_t seed, std::size_t num_colors, std::size_t num_objects) {
  if (num_objects == 0 || num_objects > kGridStates)
    throw ArgumentError("gridworld: cannot place " + std::to_string(num_objects) +
                        " objects on distinct (position, direction) states");
  if (num_objects > 255) throw ArgumentError("gridworld: mask ids are 8-bit");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  // Partial Fisher-Yates over the 100 (position, direction) states.
  std::vector<std::size_t> states(kGridStates);
  std::iota(states.begin(), states.end(), 0);
  for (std::size_t i = 0; i < num_objects; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, kGridStates - 1);
    std::swap(states[i], states[pick(rng)]);
  }
  const auto colors = palette(num_colors, unit(rng));
  std::vector<std::size_t> color_order(num_colors);
  std::iota(color_order.begin(), color_order.end(), 0);
  std::shuffle(color_order.begin(), color_order.end(), rng);

  GridWorldState state;
  for (std::size_t i = 0; i < num_objects; ++i) {
    const std::size_t s = states[i];
    GridObject obj;
    obj.row = static_cast<int>(s / (kGridSize * 4));
    obj.col = static_cast<int>((s / 4) % kGridSize);
    obj.direction = static_cast<Direction>(s % 4);
    obj.color = colors[color_order[i % num_colors]];
    state.objects.push_back(obj);
  }

  GridWorldEpisode ep;
  ep.sequence.dataset = "gridworld";
  ep.sequence.seed = seed;
  ep.sequence.palette = colors;
  ep.sequence.num_objects = num_objects;
  ep.sequence.frames = Tensor<float>(Shape{kGridFrames, kGridSize, kGridSize, 3});
  ep.sequence.masks.assign(kGridFrames * kGridSize * kGridSize, 0);
  const std::size_t pixels = kGridSize * kGridSize;
  for (std::size_t t = 0; t < kGridFrames; ++t) {
    if (t > 0) state = gridworld_step(state);
    state.z_order.resize(num_objects);
    std::iota(state.z_order.begin(), state.z_order.end(), 0);
    std::shuffle(state.z_order.begin(), state.z_order.end(), rng);
    gridworld_render(state, ep.sequence.frames.data().subspan(t * pixels * 3, pixels * 3),
                     std::span(ep.sequence.masks).subspan(t * pixels, pixels));
    ep.states.push_back(state);
  }
  return ep;
}

VideoSequence gridworld_sequence(std::uint64_t seed, std::size_t num_colors, std::size_t num_objects) {
  return gridworld_episode(seed, num_colors, num_objects).sequence;
}

// Bouncing Balls --------------------------------------------------------------

namespace {

void set_speed(Ball& b, double speed, double fallback_x, double fallback_y) {
  const double norm = std::hypot(b.vx, b.vy);
  if (norm < 1e-12 * std::max(speed, 1e-300)) {
    b.vx = fallback_x * speed;
    b.vy = fallback_y * speed;
    return;
  }
  b.vx *= speed / norm;
  b.vy *= speed / norm;
}

void reflect_axis(double& pos, double& vel, double lo, double hi) {
  if (pos < lo) {
    pos = 2 * lo - pos;
    vel = std::abs(vel);
  } else if (pos > hi) {
    pos = 2 * hi - pos;
    vel = -std::abs(vel);
  }
  pos = std::clamp(pos, lo, hi);
}

}  // namespace

std::vector<Ball> balls_step(std::vector<Ball> balls, double speed) {
  for (auto& b : balls) {
    b.x += b.vx;
    b.y += b.vy;
  }
  for (std::size_t i = 0; i < balls.size(); ++i)
    for (std::size_t j = i + 1; j < balls.size(); ++j) {
      Ball& a = balls[i];
      Ball& b = balls[j];
      const double dx = b.x - a.x, dy = b.y - a.y;
      const double dist = std::hypot(dx, dy);
      const double contact = a.radius + b.radius;
      if (dist >= contact) continue;
      const double nx = dist > 0 ? dx / dist : 1.0, ny = dist > 0 ? dy / dist : 0.0;
      const double approach = (b.vx - a.vx) * nx + (b.vy - a.vy) * ny;
      if (approach < 0) {
        a.vx += approach * nx;
        a.vy += approach * ny;
        b.vx -= approach * nx;
        b.vy -= approach * ny;
        set_speed(a, speed, -nx, -ny);
        set_speed(b, speed, nx, ny);
      }
      const double push = 0.5 * (contact - dist);
      a.x -= push * nx;
      a.y -= push * ny;
      b.x += push * nx;
      b.y += push * ny;
    }
  for (auto& b : balls) {
    reflect_axis(b.x, b.vx, b.radius, 1.0 - b.radius);
    reflect_axis(b.y, b.vy, b.radius, 1.0 - b.radius);
  }
  return balls;
}

void balls_render(const std::vector<Ball>& balls, std::size_t resolution, std::span<float> frame,
                  std::span<std::uint8_t> mask) {
  const std::size_t pixels = resolution * resolution;
  if (frame.size() != pixels * 3 || mask.size() != pixels)
    throw DimensionError("balls_render: buffer size does not match resolution");
  std::vector<double> rgb(pixels * 3, 0.0);
  std::fill(mask.begin(), mask.end(), std::uint8_t{0});
  const double res = static_cast<double>(resolution);
  for (std::size_t k = 0; k < balls.size(); ++k) {
    const Ball& b = balls[k];
    const double color[3] = {double(b.color.r), double(b.color.g), double(b.color.b)};
    for (std::size_t row = 0; row < resolution; ++row)
      for (std::size_t col = 0; col < resolution; ++col) {
        const double px = (static_cast<double>(col) + 0.5) / res;
        const double py = (static_cast<double>(row) + 0.5) / res;
        // Coverage ramps linearly across one pixel width at the rim.
        const double alpha = std::clamp((b.radius - std::hypot(px - b.x, py - b.y)) * res + 0.5, 0.0, 1.0);
        if (alpha <= 0) continue;
        const std::size_t p = row * resolution + col;
        for (int c = 0; c < 3; ++c) rgb[p * 3 + c] = rgb[p * 3 + c] * (1 - alpha) + color[c] * alpha;
        if (alpha >= 0.5) mask[p] = static_cast<std::uint8_t>(k + 1);
      }
  }
  for (std::size_t i = 0; i < rgb.size(); ++i) frame[i] = to_unit_range(rgb[i]);
}

BallsEpisode bouncing_balls_episode(std::uint64_t seed, const std::vector<Rgb>& colors, const BallsConfig& config) {
  if (config.num_balls == 0 || config.num_balls > 255) throw ArgumentError("bouncing balls: bad ball count");
  if (colors.empty()) throw ArgumentError("bouncing balls: empty palette");
  if (!(config.radius > 0 && config.radius < 0.5)) throw ArgumentError("bouncing balls: radius must be in (0, 0.5)");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> pos(config.radius, 1.0 - config.radius);
  std::uniform_real_distribution<double> angle(0.0, 2.0 * std::acos(-1.0));

  std::vector<Ball> balls;
  for (std::size_t attempt = 0; balls.size() < config.num_balls; ++attempt) {
    if (attempt > 100000) throw ArgumentError("bouncing balls: cannot place non-overlapping balls");
    Ball b;
    b.radius = config.radius;
    b.x = pos(rng);
    b.y = pos(rng);
    const bool clear = std::all_of(balls.begin(), balls.end(), [&](const Ball& o) {
      return std::hypot(o.x - b.x, o.y - b.y) >= o.radius + b.radius;
    });
    if (!clear) continue;
    const double a = angle(rng);
    b.vx = config.speed * std::cos(a);
    b.vy = config.speed * std::sin(a);
    b.color = colors[balls.size() % colors.size()];
    balls.push_back(b);
  }

  BallsEpisode ep;
  const std::size_t res = config.resolution, pixels = res * res;
  ep.sequence.dataset = "balls";
  ep.sequence.seed = seed;
  ep.sequence.palette = colors;
  ep.sequence.num_objects = config.num_balls;
  ep.sequence.frames = Tensor<float>(Shape{config.frames, res, res, 3});
  ep.sequence.masks.assign(config.frames * pixels, 0);
  for (std::size_t t = 0; t < config.frames; ++t) {
    if (t > 0) balls = balls_step(std::move(balls), config.speed);
    balls_render(balls, res, ep.sequence.frames.data().subspan(t * pixels * 3, pixels * 3),
                 std::span(ep.sequence.masks).subspan(t * pixels, pixels));
    ep.states.push_back(balls);
  }
  return ep;
}

VideoSequence bouncing_balls_sequence(std::uint64_t seed, const std::vector<Rgb>& colors, const BallsConfig& config) {
  return bouncing_balls_episode(seed, colors, config).sequence;
}

std::vector<Rgb> balls_palette(std::uint64_t dataset_seed, std::size_t n) {
  auto rng = make_rng(dataset_seed, "palette");
  return palette(n, std::uniform_real_distribution<double>(0.0, 1.0)(rng));
}

VideoSequence bouncing_balls_sequence(std::uint64_t seed) { return bouncing_balls_sequence(seed, balls_palette(seed)); }

Dataset make_balls_dataset(std::size_t count, std::uint64_t seed, std::size_t eval_count, const BallsConfig& config) {
  if (eval_count > count) throw ArgumentError("evaluation split larger than the dataset");
  Dataset ds{"balls", seed, {}, count - eval_count};
  const auto colors = balls_palette(seed, config.num_balls);
  for (std::size_t i = 0; i < count; ++i)
    ds.sequences.push_back(bouncing_balls_sequence(derive_seed(seed, "sequence", i), colors, config));
  return ds;
}

Dataset make_gridworld_dataset(std::size_t count, std::uint64_t seed, std::size_t eval_count, std::size_t num_colors,
                               std::size_t num_objects) {
  if (eval_count > count) throw ArgumentError("evaluation split larger than the dataset");
  Dataset ds{"gridworld", seed, {}, count - eval_count};
  for (std::size_t i = 0; i < count; ++i)
    ds.sequences.push_back(gridworld_sequence(derive_seed(seed, "sequence", i), num_colors, num_objects));
  return ds;
}

// Container ---------------------------------------------------------------------

namespace {

json palette_json(const std::vector<Rgb>& colors) {
  json out = json::array();
  for (const auto& c : colors) out.push_back({c.r, c.g, c.b});
  return out;
}

std::vector<Rgb> palette_from_json(const json& j) {
  std::vector<Rgb> out;
  for (const auto& c : j) out.push_back(Rgb{c.at(0).get<std::uint8_t>(), c.at(1).get<std::uint8_t>(), c.at(2).get<std::uint8_t>()});
  return out;
}

std::vector<char> read_all(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string(), 0);
  return std::vector<char>((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

}  // namespace

void dataset_write(const Dataset& dataset, const fs::path& dir) {
  if (dataset.sequences.empty()) throw ArgumentError("dataset_write: no sequences");
  const auto& first = dataset.sequences.front();
  const Shape frame_shape = first.frames.shape();
  fs::create_directories(dir);
  std::ofstream frames(dir / kFramesBlob, std::ios::binary | std::ios::trunc);
  std::ofstream masks(dir / kMasksBlob, std::ios::binary | std::ios::trunc);
  if (!frames || !masks) throw FormatError("cannot write dataset blobs in " + dir.string(), 0);
  json seqs = json::array();
  for (const auto& s : dataset.sequences) {
    if (s.frames.shape() != frame_shape)
      throw DimensionError("dataset_write: sequence shapes differ, " + shape_string(s.frames.shape()) + " vs " +
                           shape_string(frame_shape));
    frames.write(reinterpret_cast<const char*>(s.frames.ptr()), static_cast<std::streamsize>(s.frames.size() * 4));
    masks.write(reinterpret_cast<const char*>(s.masks.data()), static_cast<std::streamsize>(s.masks.size()));
    seqs.push_back({{"seed", s.seed}, {"palette", palette_json(s.palette)}, {"num_objects", s.num_objects}});
  }
  json manifest = {{"format", "setcon-dataset"},
                   {"version", 1},
                   {"dataset", dataset.name},
                   {"seed", dataset.seed},
                   {"count", dataset.sequences.size()},
                   {"frame_shape", frame_shape},
                   {"frames_dtype", "f32le"},
                   {"masks_dtype", "u8"},
                   {"split", {{"train", {0, dataset.eval_begin}}, {"eval", {dataset.eval_begin, dataset.sequences.size()}}}},
                   {"sequences", seqs}};
  std::ofstream out(dir / kDatasetManifest, std::ios::trunc);
  out << manifest.dump(1) << "\n";
}

Dataset dataset_read(const fs::path& dir) {
  const auto manifest_bytes = read_all(dir / kDatasetManifest);
  json manifest;
  try {
    manifest = json::parse(manifest_bytes.begin(), manifest_bytes.end());
  } catch (const json::parse_error& e) {
    throw FormatError(std::string("corrupt dataset manifest: ") + e.what(), e.byte);
  }
  Dataset ds;
  Shape frame_shape;
  std::size_t count = 0;
  try {
    if (manifest.at("format").get<std::string>() != "setcon-dataset") throw FormatError("not a dataset manifest", 0);
    ds.name = manifest.at("dataset").get<std::string>();
    ds.seed = manifest.at("seed").get<std::uint64_t>();
    count = manifest.at("count").get<std::size_t>();
    frame_shape = manifest.at("frame_shape").get<Shape>();
    ds.eval_begin = manifest.at("split").at("eval").at(0).get<std::size_t>();
    if (frame_shape.size() != 4 || frame_shape[3] != 3) throw FormatError("frame_shape must be [T,H,W,3]", 0);
    if (manifest.at("sequences").size() != count || ds.eval_begin > count)
      throw FormatError("sequence table does not match count", 0);
  } catch (const json::exception& e) {
    throw FormatError(std::string("corrupt dataset manifest: ") + e.what(), 0);
  }
  const std::size_t frame_values = shape_size(frame_shape);
  const std::size_t mask_values = frame_values / 3;
  const auto frames = read_all(dir / kFramesBlob);
  const auto masks = read_all(dir / kMasksBlob);
  if (frames.size() != count * frame_values * 4)
    throw FormatError("frames blob holds " + std::to_string(frames.size()) + " bytes, expected " +
                          std::to_string(count * frame_values * 4),
                      frames.size());
  if (masks.size() != count * mask_values)
    throw FormatError("masks blob holds " + std::to_string(masks.size()) + " bytes, expected " +
                          std::to_string(count * mask_values),
                      masks.size());
  for (std::size_t i = 0; i < count; ++i) {
    const auto& meta = manifest["sequences"][i];
    VideoSequence s;
    s.dataset = ds.name;
    s.seed = meta.at("seed").get<std::uint64_t>();
    s.palette = palette_from_json(meta.at("palette"));
    s.num_objects = meta.at("num_objects").get<std::size_t>();
    s.frames = Tensor<float>(frame_shape);
    std::memcpy(s.frames.ptr(), frames.data() + i * frame_values * 4, frame_values * 4);
    s.masks.assign(masks.begin() + static_cast<std::ptrdiff_t>(i * mask_values),
                   masks.begin() + static_cast<std::ptrdiff_t>((i + 1) * mask_values));
    ds.sequences.push_back(std::move(s));
  }
  return ds;
}

}  // namespace setcon::data
