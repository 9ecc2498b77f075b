#include "ldp/train.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

#include "ldp/error.hpp"

namespace ldp {

void TrainConfig::validate() const {
  if (batch == 0) throw ConfigError("batch must be positive");
  if (chunk == 0) throw ConfigError("chunk must be positive");
  if (!(learning_rate >= 0.0)) throw ConfigError("learning rate must be non-negative");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("Adam decay rates must lie in [0, 1)");
  if (!(epsilon > 0.0)) throw ConfigError("Adam epsilon must be positive");
  if (!(clip_norm >= 0.0)) throw ConfigError("clip norm must be non-negative");
  if (workers == 0) throw ConfigError("workers must be positive");
}

AdamState AdamState::zeros_like(const ParamStore& params) {
  AdamState s;
  for (const auto& [name, p] : params.entries()) {
    s.first.emplace(name, Tensor(p.value.shape(), 0.0));
    s.second.emplace(name, Tensor(p.value.shape(), 0.0));
  }
  return s;
}

bool AdamState::operator==(const AdamState& other) const {
  if (steps != other.steps || first.size() != other.first.size() || second.size() != other.second.size()) return false;
  for (const auto& [name, t] : first) {
    auto it = other.first.find(name);
    if (it == other.first.end() || !it->second.identical(t)) return false;
  }
  for (const auto& [name, t] : second) {
    auto it = other.second.find(name);
    if (it == other.second.end() || !it->second.identical(t)) return false;
  }
  return true;
}

void adam_step(ParamStore& params, AdamState& state, const TrainConfig& config) {
  double scale = 1.0;
  if (config.clip_norm > 0.0) {
    double sq = 0.0;
    for (const auto& [name, p] : params.entries())
      for (double g : p.grad.data()) sq += g * g;
    const double norm = std::sqrt(sq);
    if (norm > config.clip_norm) scale = config.clip_norm / norm;
  }
  ++state.steps;
  const double t = static_cast<double>(state.steps);
  const double c1 = 1.0 - std::pow(config.beta1, t), c2 = 1.0 - std::pow(config.beta2, t);
  for (auto& [name, p] : params.entries()) {
    auto f = state.first.find(name), s = state.second.find(name);
    if (f == state.first.end() || s == state.second.end() || f->second.shape() != p.value.shape())
      throw ContractError("optimizer state does not match parameter " + name);
    Tensor& m = f->second;
    Tensor& v = s->second;
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      const double g = p.grad[i] * scale;
      m[i] = config.beta1 * m[i] + (1.0 - config.beta1) * g;
      v[i] = config.beta2 * v[i] + (1.0 - config.beta2) * g * g;
      p.value[i] -= config.learning_rate * (m[i] / c1) / (std::sqrt(v[i] / c2) + config.epsilon);
    }
  }
}

std::string HistoryRecord::line() const {
  std::ostringstream os;
  os.precision(9);
  os << "epoch=" << epoch << " loss=" << loss << " ami=" << ami << " mse=" << mse;
  return os.str();
}

std::vector<std::size_t> epoch_order(std::size_t count, std::uint64_t seed, std::size_t epoch) {
  std::vector<std::size_t> order(count);
  std::iota(order.begin(), order.end(), 0);
  Rng rng(stream_seed(seed ^ 0x5EEDF00DULL, epoch));
  for (std::size_t i = count; i > 1; --i) std::swap(order[i - 1], order[rng.uniform_int(i)]);
  return order;
}

std::uint64_t training_latent_seed(std::uint64_t seed, std::size_t epoch, std::size_t sample) {
  return stream_seed(stream_seed(seed, epoch), sample);
}

double batch_gradient(const Dataset& data, std::span<const std::size_t> indices, std::span<const std::uint64_t> seeds,
                      ParamStore& params, const ArchConfig& arch, const EmConfig& em, const TrainConfig& config) {
  const std::size_t b = indices.size();
  if (b == 0) throw ContractError("empty batch");
  const std::size_t chunks = (b + config.chunk - 1) / config.chunk;
  std::vector<std::vector<std::pair<Parameter*, Tensor>>> grads(chunks);
  std::vector<double> losses(chunks, 0.0);
  const double inv = 1.0 / static_cast<double>(b);
  parallel_for(chunks, config.workers, [&](std::size_t c) {
    const std::size_t first = c * config.chunk, count = std::min(config.chunk, b - first);
    Tensor images = data.images(indices.subspan(first, count));
    Tape tape;
    EmTrace trace = run_em(tape, images, seeds.subspan(first, count), params, arch, em);
    Var root = scale(sum_all(trace.weighted_loss), inv);
    losses[c] = root.value().item();
    grads[c] = tape.parameter_grads(root);
  });
  params.zero_grad();
  double loss = 0.0;
  for (std::size_t c = 0; c < chunks; ++c) {
    loss += losses[c];
    for (auto& [p, g] : grads[c])
      for (std::size_t i = 0; i < g.size(); ++i) p->grad[i] += g[i];
  }
  return loss;
}

TrainResult train_bptt(const Dataset& train, const Dataset& validation, ParamStore& params, AdamState& optimizer,
                       const ArchConfig& arch, const EmConfig& em, const TrainConfig& config, std::size_t first_epoch,
                       const EpochCallback& on_epoch) {
  config.validate();
  em.validate();
  if (train.size() == 0) throw ConfigError("training set is empty");
  if (train.height != arch.height || train.width != arch.width)
    throw ConfigError("training images do not match the model's image size");
  TrainResult result;
  for (std::size_t epoch = first_epoch; epoch < config.epochs; ++epoch) {
    const std::vector<std::size_t> order = epoch_order(train.size(), config.seed, epoch);
    double total = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += config.batch, ++batches) {
      const std::size_t count = std::min(config.batch, order.size() - start);
      std::span<const std::size_t> idx(order.data() + start, count);
      std::vector<std::uint64_t> seeds(count);
      for (std::size_t i = 0; i < count; ++i) seeds[i] = training_latent_seed(config.seed, epoch, idx[i]);
      try {
        total += batch_gradient(train, idx, seeds, params, arch, em, config);
        adam_step(params, optimizer, config);
      } catch (const NumericalError& e) {
        throw NumericalError("epoch " + std::to_string(epoch) + " batch " + std::to_string(batches) + ": " +
                             e.what());
      }
      for (const auto& [name, p] : params.entries())
        if (!p.value.all_finite())
          throw NumericalError("epoch " + std::to_string(epoch) + " batch " + std::to_string(batches) +
                               ": parameter " + name + " became non-finite");
    }
    HistoryRecord rec;
    rec.epoch = epoch + 1;
    rec.loss = total / static_cast<double>(batches);
    rec.ami = rec.mse = std::numeric_limits<double>::quiet_NaN();
    if (validation.size() > 0) {
      EvalOptions opts;
      opts.seed = stream_seed(config.seed, 0xE7A1ULL);
      opts.batch = config.chunk;
      opts.workers = config.workers;
      opts.limit = config.validation_limit;
      MetricsReport r = evaluate_dataset(validation, params, arch, em, opts);
      rec.ami = r.mean_ami();
      rec.mse = r.mean_mse();
    }
    result.history.push_back(rec);
    result.epochs_done = epoch + 1;
    if (on_epoch) on_epoch(rec, params, optimizer);
  }
  return result;
}

}  // namespace ldp
