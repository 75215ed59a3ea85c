#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "setcon/datasets.hpp"

namespace setcon::figures {

struct Image {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> rgb;  ///< row-major, 3 bytes per pixel

  Image() = default;
  Image(std::size_t w, std::size_t h, std::uint8_t fill = 255) : width(w), height(h), rgb(w * h * 3, fill) {}
};

/// 8-bit RGB PNG. Throws std::runtime_error when the file cannot be written.
void write_png(const std::filesystem::path& path, const Image& image);

/// Table of equally sized cells separated by a white border; each source
/// pixel becomes a `scale` x `scale` block.
class Grid {
 public:
  Grid(std::size_t rows, std::size_t cols, std::size_t cell_height, std::size_t cell_width, std::size_t scale);

  /// Values in [-1, 1], [H, W, 3] row-major.
  void put_rgb(std::size_t row, std::size_t col, std::span<const float> values);
  /// Values in [0, 1], [H, W], drawn in grayscale.
  void put_mask(std::size_t row, std::size_t col, std::span<const float> values);

  const Image& image() const { return image_; }

 private:
  void put(std::size_t row, std::size_t col, std::size_t y, std::size_t x, const std::uint8_t* c);

  std::size_t rows_, cols_, cell_h_, cell_w_, scale_;
  Image image_;
};

inline constexpr std::size_t kBorder = 2;

/// Inputs, reconstructions, per-slot attention masks (Slot Attention only)
/// and per-slot normalized alpha masks for every frame of one sequence,
/// using a checkpoint's model and decoder probe.
void plot_sequence(const std::filesystem::path& checkpoint_dir, const data::VideoSequence& sequence,
                   const std::filesystem::path& png);

/// Ground-truth future frames over predicted reconstructions for a k-step
/// rollout of one sequence.
void plot_rollout(const std::filesystem::path& checkpoint_dir, const data::VideoSequence& sequence, std::size_t steps,
                  const std::filesystem::path& png);

}  // namespace setcon::figures
