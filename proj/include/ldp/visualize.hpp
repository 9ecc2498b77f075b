#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "ldp/datasets.hpp"
#include "ldp/em.hpp"

namespace ldp {

struct Rgb {
  std::uint8_t r = 0, g = 0, b = 0;
  bool operator==(const Rgb&) const = default;
};

/// Fixed colours for components 0..K-2; the last component is black.
std::vector<Rgb> component_palette(std::size_t components);

/// Binary PPM: "P6\n<W> <H>\n255\n" then W*H RGB triples.
std::vector<std::uint8_t> encode_ppm(std::size_t width, std::size_t height, std::span<const Rgb> pixels);
/// Gray image from intensities, clamped to [0, 1].
std::vector<std::uint8_t> gray_ppm(std::size_t width, std::size_t height, std::span<const double> values);

struct NamedImage {
  std::string name;
  std::vector<std::uint8_t> ppm;
};

/// Views of one sample: the input, the argmax assignment map, and one
/// reconstruction per component (background last). Latents are seeded as in
/// evaluation.
std::vector<NamedImage> render_sample(const Dataset& data, std::size_t index, ParamStore& params,
                                      const ArchConfig& arch, const EmConfig& config, std::uint64_t seed);

}  // namespace ldp
