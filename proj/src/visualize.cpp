#include "ldp/visualize.hpp"

#include <algorithm>
#include <cmath>
#include <optional>

#include "ldp/error.hpp"
#include "ldp/eval.hpp"

namespace ldp {

std::vector<Rgb> component_palette(std::size_t components) {
  static const Rgb colours[] = {{230, 25, 75},  {60, 180, 75},  {255, 225, 25}, {0, 130, 200},
                                {245, 130, 48}, {145, 30, 180}, {70, 240, 240}, {240, 50, 230}};
  std::vector<Rgb> out;
  for (std::size_t k = 0; k + 1 < components; ++k) out.push_back(colours[k % std::size(colours)]);
  if (components > 0) out.push_back(Rgb{});
  return out;
}

std::vector<std::uint8_t> encode_ppm(std::size_t width, std::size_t height, std::span<const Rgb> pixels) {
  if (pixels.size() != width * height) throw ContractError("encode_ppm: pixel count does not match the size");
  const std::string header = "P6\n" + std::to_string(width) + " " + std::to_string(height) + "\n255\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  for (const Rgb& p : pixels) {
    out.push_back(p.r);
    out.push_back(p.g);
    out.push_back(p.b);
  }
  return out;
}

std::vector<std::uint8_t> gray_ppm(std::size_t width, std::size_t height, std::span<const double> values) {
  std::vector<Rgb> px(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) {
    const auto v = static_cast<std::uint8_t>(std::lround(255.0 * std::clamp(values[i], 0.0, 1.0)));
    px[i] = Rgb{v, v, v};
  }
  return encode_ppm(width, height, px);
}

std::vector<NamedImage> render_sample(const Dataset& data, std::size_t index, ParamStore& params,
                                      const ArchConfig& arch, const EmConfig& config, std::uint64_t seed) {
  if (index >= data.size()) throw ConfigError("sample " + std::to_string(index) + " is out of range");
  if (data.height != arch.height || data.width != arch.width)
    throw ConfigError("dataset images do not match the model's image size");
  const std::size_t w = data.width, h = data.height, m = data.pixels(), k = config.components;
  const std::uint64_t seeds[1] = {sample_seed(seed, index)};
  std::optional<NoGradGuard> guard;
  if (config.mode == UpdateMode::Rnn) guard.emplace();
  Tape tape;
  const Tensor image = data.images(index, 1);
  const EmTrace trace = run_em(tape, image, seeds, params, arch, config);
  const std::vector<int> labels = trace.labels();

  const std::string stem = "sample" + std::to_string(index) + "_";
  std::vector<NamedImage> out;
  out.push_back({stem + "input.ppm", gray_ppm(w, h, image.data())});
  const std::vector<Rgb> palette = component_palette(k);
  std::vector<Rgb> assignment(m);
  for (std::size_t px = 0; px < m; ++px) assignment[px] = palette[static_cast<std::size_t>(labels[px])];
  out.push_back({stem + "assignment.ppm", encode_ppm(w, h, assignment)});

  // Shape-weighted appearance over the prior background; the per-pixel
  // baseline has no shapes and uses its posterior instead.
  const EStep& e = trace.esteps.at(trace.esteps.size() - 2);
  const Tensor& means = e.means.value();
  const Tensor weights = config.method == Method::Nem ? e.mix.gamma.value() : e.mix.pi();
  const bool per_pixel = means.dim(2) == m;
  const double bg = config.prior.mean_param(config.model);
  std::vector<double> recon(m);
  for (std::size_t c = 0; c < k; ++c) {
    for (std::size_t px = 0; px < m; ++px) {
      const double wgt = weights[c * m + px], mean = means[c * means.dim(2) + (per_pixel ? px : 0)];
      recon[px] = config.method == Method::Nem ? wgt * mean : wgt * mean + (1.0 - wgt) * bg;
    }
    out.push_back({stem + "component" + std::to_string(c) + ".ppm", gray_ppm(w, h, recon)});
  }
  return out;
}

}  // namespace ldp
