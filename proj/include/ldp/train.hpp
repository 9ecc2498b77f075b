#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "ldp/datasets.hpp"
#include "ldp/em.hpp"
#include "ldp/eval.hpp"
#include "ldp/networks.hpp"

namespace ldp {

struct TrainConfig {
  std::size_t epochs = 50;
  std::size_t batch = 32;
  /// Images per unrolled run inside a batch; gradients of the chunks are summed
  /// in batch order, so results do not depend on the worker count.
  std::size_t chunk = 32;
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  /// Rescale the batch gradient to this global norm when larger; 0 disables.
  double clip_norm = 0.0;
  std::uint64_t seed = 0;
  std::size_t workers = 1;
  /// Validation samples scored after each epoch (0 = all).
  std::size_t validation_limit = 200;

  void validate() const;
};

/// First and second moment estimates per parameter plus the step counter.
struct AdamState {
  std::map<std::string, Tensor> first;
  std::map<std::string, Tensor> second;
  std::uint64_t steps = 0;

  static AdamState zeros_like(const ParamStore& params);
  bool operator==(const AdamState& other) const;
};

/// One Adam update from the gradients accumulated in `params`.
void adam_step(ParamStore& params, AdamState& state, const TrainConfig& config);

struct HistoryRecord {
  std::size_t epoch = 0;
  double loss = 0.0;
  double ami = 0.0;
  double mse = 0.0;

  /// "epoch=<n> loss=<f> ami=<f> mse=<f>"
  std::string line() const;
};

struct TrainResult {
  std::vector<HistoryRecord> history;
  std::size_t epochs_done = 0;
};

/// Mean weighted loss of one batch; leaves d(loss)/d(parameter) in each
/// Parameter's grad.
double batch_gradient(const Dataset& data, std::span<const std::size_t> indices, std::span<const std::uint64_t> seeds,
                      ParamStore& params, const ArchConfig& arch, const EmConfig& em, const TrainConfig& config);

/// Sample order of an epoch.
std::vector<std::size_t> epoch_order(std::size_t count, std::uint64_t seed, std::size_t epoch);

/// Latent seeds of the images visited in an epoch.
std::uint64_t training_latent_seed(std::uint64_t seed, std::size_t epoch, std::size_t sample);

using EpochCallback = std::function<void(const HistoryRecord&, const ParamStore&, const AdamState&)>;

/// Epochs [first_epoch, config.epochs) of minibatch BPTT with Adam. `validation`
/// may be empty, in which case ami and mse are NaN. Numerical failures are
/// rethrown naming the epoch and batch.
TrainResult train_bptt(const Dataset& train, const Dataset& validation, ParamStore& params, AdamState& optimizer,
                       const ArchConfig& arch, const EmConfig& em, const TrainConfig& config,
                       std::size_t first_epoch = 0, const EpochCallback& on_epoch = {});

}  // namespace ldp
