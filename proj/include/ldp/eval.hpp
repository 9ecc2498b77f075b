#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "ldp/datasets.hpp"
#include "ldp/em.hpp"

namespace ldp {

/// Ground-truth grouping of a scene: 0 background, j for pixels owned by
/// object j alone, -1 for overlaps.
std::vector<int> truth_labels(const SceneSample& sample);

/// 1 where AMI ignores the pixel (background or overlap).
std::vector<std::uint8_t> exclusion_mask(const SceneSample& sample);

/// Adjusted mutual information over the pixels not excluded, arithmetic-mean
/// normalisation, expected MI under the hypergeometric model. 1 when both
/// sides are a single cluster, 0 when only one is. Throws UndefinedMetric
/// when every pixel is excluded.
double ami(std::span<const int> pred, std::span<const int> truth, std::span<const std::uint8_t> excluded);
double ami(std::span<const int> pred, std::span<const int> truth);

/// Minimum-cost perfect matching of a square n x n row-major cost matrix;
/// result[row] = column.
std::vector<std::size_t> hungarian_assign(std::span<const double> cost, std::size_t n);
double assignment_cost(std::span<const double> cost, std::size_t n, std::span<const std::size_t> assignment);

/// Mean over matched pairs of the all-pixel MSE between reconstructions
/// [R, M] and truths [J, M]; the shorter side is padded with background
/// images of value `background`.
double hungarian_mse(const Tensor& recons, const Tensor& truths, double background = 0.0);

/// Images [J, M] of every object present in the scene rendered alone over
/// `background`: the covered pixels keep the scene's intensity.
Tensor truth_object_images(const SceneSample& sample, double background = 0.0);

struct MetricsReport {
  std::vector<double> ami;         ///< per sample; NaN when undefined
  std::vector<double> mse;         ///< per sample
  std::vector<double> background_peak;  ///< per sample mean over background pixels of max_k gamma
  std::vector<double> background_last;  ///< per sample fraction of background pixels labelled with the last component
  std::size_t samples = 0;
  std::size_t undefined_ami = 0;

  double mean_ami() const;
  double mean_mse() const;
  double mean_background_peak() const;
  double mean_background_last() const;
  /// Line-oriented table of the per-sample scores.
  std::string table() const;
  /// key=value summary.
  std::string summary() const;
};

struct EvalOptions {
  std::uint64_t seed = 0;
  std::size_t batch = 32;
  std::size_t workers = 1;
  /// Evaluate at most this many samples (0 = all).
  std::size_t limit = 0;
};

/// Runs the unrolled loop on every sample and scores labels and reconstructions.
MetricsReport evaluate_dataset(const Dataset& data, ParamStore& params, const ArchConfig& arch, const EmConfig& config,
                               const EvalOptions& options);

/// Latent stream seed of sample `index` under `seed`.
inline std::uint64_t sample_seed(std::uint64_t seed, std::size_t index) { return stream_seed(seed, index); }

/// Runs fn(i) for i in [0, count) on up to `workers` threads; exceptions are
/// rethrown for the lowest failing index.
void parallel_for(std::size_t count, std::size_t workers, const std::function<void(std::size_t)>& fn);

}  // namespace ldp
