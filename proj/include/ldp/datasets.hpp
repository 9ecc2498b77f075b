#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "ldp/tensor.hpp"

namespace ldp {

/// One scene: 8-bit pixels (value = round(255 * intensity)) and per-pixel
/// ownership bitmasks. Bit j (1..7) is set when object j covers the pixel;
/// bit 0 is unused, so an all-zero mask is background.
struct SceneSample {
  std::vector<std::uint8_t> pixels;
  std::vector<std::uint8_t> labels;

  bool operator==(const SceneSample&) const = default;
};

constexpr std::size_t kMaxObjects = 7;

struct Dataset {
  std::uint16_t height = 0;
  std::uint16_t width = 0;
  std::uint8_t max_objects = 0;
  std::vector<SceneSample> samples;

  std::size_t pixels() const { return std::size_t{height} * width; }
  std::size_t size() const { return samples.size(); }
  bool operator==(const Dataset&) const = default;

  /// Intensities of samples [first, first + count) as [count, M].
  Tensor images(std::size_t first, std::size_t count) const;
  Tensor images(std::span<const std::size_t> indices) const;
  /// Fraction of samples with at least one pixel owned by two or more objects.
  double overlap_fraction() const;
  /// ContractError when a sample does not match the declared layout.
  void validate() const;
};

enum class Sprite { Square, TriangleUp, TriangleDown };

/// Binary stencil of a sprite, row-major.
struct Stencil {
  std::size_t rows = 0, cols = 0;
  std::vector<std::uint8_t> mask;
};
Stencil sprite_stencil(Sprite sprite);

struct ShapesConfig {
  std::size_t count = 1000;
  std::size_t size = 20;
  std::size_t objects = 2;
  std::uint64_t seed = 0;

  void validate() const;
};

/// Binary scenes of `objects` random sprites composited by union. Sprites may
/// hang over the border by up to a third of their extent and are clipped.
Dataset generate_multi_shapes(const ShapesConfig& config);

/// Decoded IDX array: element type code, dimensions and raw unsigned bytes.
struct IdxArray {
  std::vector<std::size_t> dims;
  std::vector<std::uint8_t> data;

  std::size_t count() const { return dims.empty() ? 0 : dims[0]; }
  /// Values scaled to [0, 1] with the header's dimensions.
  Tensor as_tensor() const;
};

/// Accepts unsigned-byte IDX files (magic 0x00000801 labels, 0x00000803 images).
IdxArray parse_idx(std::span<const std::uint8_t> bytes);
IdxArray read_idx_file(const std::filesystem::path& path);

constexpr std::size_t kGlyphSide = 28;
constexpr std::size_t kGlyphPixels = kGlyphSide * kGlyphSide;

struct GlyphBank {
  std::vector<std::array<std::uint8_t, kGlyphPixels>> glyphs;

  std::size_t size() const { return glyphs.size(); }
  static GlyphBank from_idx(const IdxArray& images);
};

enum class Split { Train, Test };

struct MnistConfig {
  std::size_t count = 1000;
  std::size_t size = 48;
  std::size_t objects = 2;
  /// Number of distinct glyphs used; 0 draws from the whole bank.
  std::size_t unique = 0;
  /// With unique = 0: train and test draw from disjoint glyph pools.
  bool holdout = false;
  Split split = Split::Train;
  std::uint64_t seed = 0;

  void validate(const GlyphBank& bank) const;
};

/// Foreground threshold on glyph bytes: intensity > 0.5.
constexpr std::uint8_t kForegroundByte = 128;

/// Glyphs placed fully inside the canvas, composited by per-pixel maximum.
Dataset compose_multi_mnist(const GlyphBank& bank, const MnistConfig& config);
/// Glyph ids of each sample, in object order (for tests and inspection).
std::vector<std::vector<std::size_t>> multi_mnist_glyph_ids(const GlyphBank& bank, const MnistConfig& config);

std::vector<std::uint8_t> write_container(const Dataset& d);
Dataset read_container(std::span<const std::uint8_t> bytes);
void save_dataset(const Dataset& d, const std::filesystem::path& path);
Dataset load_dataset(const std::filesystem::path& path);

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path);
void write_file_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);

}  // namespace ldp
