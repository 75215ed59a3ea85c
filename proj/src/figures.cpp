#include "setcon/figures.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <memory>
#include <stdexcept>

#include "setcon/errors.hpp"
#include "setcon/evaluation.hpp"
#include "setcon/harness.hpp"
#include "setcon/rng.hpp"

namespace setcon::figures {

namespace fs = std::filesystem;

void write_png(const fs::path& path, const Image& image) {
  if (image.width == 0 || image.height == 0) throw ArgumentError("write_png: empty image");
  std::unique_ptr<FILE, int (*)(FILE*)> file(std::fopen(path.c_str(), "wb"), &std::fclose);
  if (!file) throw std::runtime_error("write_png: cannot open " + path.string());
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    throw std::runtime_error("write_png: libpng initialisation failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw std::runtime_error("write_png: libpng error while writing " + path.string());
  }
  png_init_io(png, file.get());
  png_set_IHDR(png, info, png_uint_32(image.width), png_uint_32(image.height), 8, PNG_COLOR_TYPE_RGB,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (std::size_t y = 0; y < image.height; ++y)
    png_write_row(png, const_cast<png_bytep>(image.rgb.data() + y * image.width * 3));
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

Grid::Grid(std::size_t rows, std::size_t cols, std::size_t cell_height, std::size_t cell_width, std::size_t scale)
    : rows_(rows), cols_(cols), cell_h_(cell_height), cell_w_(cell_width), scale_(scale),
      image_(cols * (cell_width * scale + kBorder) + kBorder, rows * (cell_height * scale + kBorder) + kBorder) {
  if (rows == 0 || cols == 0 || cell_height == 0 || cell_width == 0 || scale == 0)
    throw ArgumentError("Grid: extents must be positive");
}

void Grid::put(std::size_t row, std::size_t col, std::size_t y, std::size_t x, const std::uint8_t* c) {
  const std::size_t top = kBorder + row * (cell_h_ * scale_ + kBorder) + y * scale_;
  const std::size_t left = kBorder + col * (cell_w_ * scale_ + kBorder) + x * scale_;
  for (std::size_t dy = 0; dy < scale_; ++dy)
    for (std::size_t dx = 0; dx < scale_; ++dx) std::copy_n(c, 3, &image_.rgb[((top + dy) * image_.width + left + dx) * 3]);
}

namespace {

std::uint8_t to_byte(double unit) { return std::uint8_t(std::lround(std::clamp(unit, 0.0, 1.0) * 255.0)); }

}  // namespace

void Grid::put_rgb(std::size_t row, std::size_t col, std::span<const float> v) {
  if (row >= rows_ || col >= cols_ || v.size() != cell_h_ * cell_w_ * 3)
    throw DimensionError("Grid::put_rgb: cell (" + std::to_string(row) + ", " + std::to_string(col) + ") with " +
                         std::to_string(v.size()) + " values");
  for (std::size_t y = 0; y < cell_h_; ++y)
    for (std::size_t x = 0; x < cell_w_; ++x) {
      const float* p = &v[(y * cell_w_ + x) * 3];
      const std::uint8_t c[3] = {to_byte((p[0] + 1) / 2), to_byte((p[1] + 1) / 2), to_byte((p[2] + 1) / 2)};
      put(row, col, y, x, c);
    }
}

void Grid::put_mask(std::size_t row, std::size_t col, std::span<const float> v) {
  if (row >= rows_ || col >= cols_ || v.size() != cell_h_ * cell_w_)
    throw DimensionError("Grid::put_mask: cell (" + std::to_string(row) + ", " + std::to_string(col) + ") with " +
                         std::to_string(v.size()) + " values");
  for (std::size_t y = 0; y < cell_h_; ++y)
    for (std::size_t x = 0; x < cell_w_; ++x) {
      const std::uint8_t g = to_byte(v[y * cell_w_ + x]);
      const std::uint8_t c[3] = {g, g, g};
      put(row, col, y, x, c);
    }
}

namespace {

std::size_t scale_for(std::size_t side) { return std::max<std::size_t>(1, 64 / side); }

template <typename T>
std::vector<float> as_float(const T* p, std::size_t n) {
  return std::vector<float>(p, p + n);
}

template <typename T>
void plot_sequence_impl(const fs::path& dir, const ExperimentConfig& c, const data::VideoSequence& seq,
                        const fs::path& png) {
  auto ck = load_checkpoint<T>(dir);
  if (!ck.trees.count("decoder")) throw ConfigError("decoder", "checkpoint has no decoder probe");
  const auto mc = c.model_config();
  const auto dc = c.decoder_config();
  const std::size_t K = mc.num_slots, N = mc.num_pixels(), L = seq.length(), H = seq.height(), W = seq.width();
  const auto frames = eval::stack_frames<T>(std::span(&seq, 1));
  if (H != mc.height || W != mc.width) throw DimensionError("plot: sequence size does not match the checkpoint");

  Tape<T> tape;
  BoundParameters<T> mp(tape, ck.trees.at("model"), false);
  BoundParameters<T> dp(tape, ck.trees.at("decoder"), false);
  auto noise = make_rng(c.seed, "eval-noise", 0);
  auto encoded = model::encode_frames(mp, mc, tape.constant(frames.reshaped(Shape{L, H, W, 3})), &noise);
  auto decoded = eval::broadcast_decode(dp, dc, encoded.slots);

  const bool with_attention = encoded.attention.valid();
  const std::size_t rows = 2 + K + (with_attention ? K : 0);
  Grid grid(rows, L, H, W, scale_for(std::max(H, W)));
  const auto& recon = decoded.composite.value();
  const auto& alpha = decoded.alpha.value();  // [L, K, N]
  for (std::size_t t = 0; t < L; ++t) {
    grid.put_rgb(0, t, seq.frame(t).data());
    grid.put_rgb(1, t, as_float(recon.ptr() + t * N * 3, N * 3));
    std::size_t row = 2;
    if (with_attention) {
      const auto& attn = encoded.attention.value();  // [L, N, K]
      for (std::size_t k = 0; k < K; ++k, ++row) {
        std::vector<float> mask(N);
        for (std::size_t n = 0; n < N; ++n) mask[n] = float(attn.ptr()[(t * N + n) * K + k]);
        grid.put_mask(row, t, mask);
      }
    }
    for (std::size_t k = 0; k < K; ++k, ++row) grid.put_mask(row, t, as_float(alpha.ptr() + (t * K + k) * N, N));
  }
  write_png(png, grid.image());
}

template <typename T>
void plot_rollout_impl(const fs::path& dir, const ExperimentConfig& c, const data::VideoSequence& seq,
                       std::size_t steps, const fs::path& png) {
  auto ck = load_checkpoint<T>(dir);
  if (!ck.trees.count("decoder")) throw ConfigError("decoder", "checkpoint has no decoder probe");
  const auto mc = c.model_config();
  const auto dc = c.decoder_config();
  const std::size_t N = mc.num_pixels(), H = seq.height(), W = seq.width();
  if (seq.length() < steps + 2) throw ArgumentError("plot_rollout: sequence too short for " + std::to_string(steps) + " steps");
  const auto frames = eval::stack_frames<T>(std::span(&seq, 1));
  auto noise = make_rng(c.seed, "eval-noise", 0);
  const auto predicted = eval::rollout(ck.trees.at("model"), mc, frames, steps, &noise);
  Grid grid(2, steps + 2, H, W, scale_for(std::max(H, W)));
  for (std::size_t t = 0; t < steps + 2; ++t) grid.put_rgb(0, t, seq.frame(t).data());
  for (std::size_t s = 0; s < steps; ++s) {
    Tape<T> tape;
    BoundParameters<T> dp(tape, ck.trees.at("decoder"), false);
    auto d = eval::broadcast_decode(dp, dc, tape.constant(predicted[s]));
    grid.put_rgb(1, s + 2, as_float(d.composite.value().ptr(), N * 3));
  }
  write_png(png, grid.image());
}

}  // namespace

void plot_sequence(const fs::path& dir, const data::VideoSequence& sequence, const fs::path& png) {
  const auto c = harness::checkpoint_config(dir);
  if (checkpoint_dtype(dir) == "f32")
    plot_sequence_impl<float>(dir, c, sequence, png);
  else
    plot_sequence_impl<double>(dir, c, sequence, png);
}

void plot_rollout(const fs::path& dir, const data::VideoSequence& sequence, std::size_t steps, const fs::path& png) {
  const auto c = harness::checkpoint_config(dir);
  if (checkpoint_dtype(dir) == "f32")
    plot_rollout_impl<float>(dir, c, sequence, steps, png);
  else
    plot_rollout_impl<double>(dir, c, sequence, steps, png);
}

}  // namespace setcon::figures
