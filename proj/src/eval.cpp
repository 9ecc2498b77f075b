#include "ldp/eval.hpp"

#include <algorithm>
#include <atomic>
#include <bit>
#include <cmath>
#include <exception>
#include <limits>
#include <map>
#include <optional>
#include <mutex>
#include <sstream>
#include <thread>

#include "ldp/error.hpp"

namespace ldp {

std::vector<int> truth_labels(const SceneSample& sample) {
  std::vector<int> out(sample.labels.size());
  for (std::size_t m = 0; m < out.size(); ++m) {
    const std::uint8_t b = sample.labels[m];
    const int owners = std::popcount(b);
    out[m] = owners == 0 ? 0 : owners == 1 ? std::countr_zero(b) : -1;
  }
  return out;
}

std::vector<std::uint8_t> exclusion_mask(const SceneSample& sample) {
  std::vector<std::uint8_t> out(sample.labels.size());
  for (std::size_t m = 0; m < out.size(); ++m) out[m] = std::popcount(sample.labels[m]) != 1;
  return out;
}

namespace {

struct Contingency {
  std::vector<double> rows, cols;  // cluster sizes
  std::vector<double> cells;       // rows x cols counts
  double total = 0;
};

Contingency contingency(std::span<const int> a, std::span<const int> b, std::span<const std::uint8_t> excluded) {
  std::map<int, std::size_t> ra, rb;
  std::vector<std::pair<int, int>> kept;
  for (std::size_t m = 0; m < a.size(); ++m) {
    if (!excluded.empty() && excluded[m]) continue;
    kept.emplace_back(a[m], b[m]);
    ra.emplace(a[m], 0);
    rb.emplace(b[m], 0);
  }
  std::size_t idx = 0;
  for (auto& [k, v] : ra) v = idx++;
  idx = 0;
  for (auto& [k, v] : rb) v = idx++;
  Contingency c;
  c.rows.assign(ra.size(), 0.0);
  c.cols.assign(rb.size(), 0.0);
  c.cells.assign(ra.size() * rb.size(), 0.0);
  for (auto [x, y] : kept) {
    const std::size_t i = ra[x], j = rb[y];
    c.rows[i] += 1;
    c.cols[j] += 1;
    c.cells[i * rb.size() + j] += 1;
  }
  c.total = static_cast<double>(kept.size());
  return c;
}

double entropy(const std::vector<double>& sizes, double n) {
  double h = 0;
  for (double s : sizes)
    if (s > 0) h -= s / n * std::log(s / n);
  return h;
}

// Expected MI under the permutation model. Walks each cell's hypergeometric
// support with the ratio recurrence of consecutive probabilities.
double expected_mi(const Contingency& c) {
  const double n = c.total;
  double emi = 0;
  for (double a : c.rows)
    for (double b : c.cols) {
      const double lo = std::max(1.0, a + b - n), hi = std::min(a, b);
      if (lo > hi) continue;
      double log_p = std::lgamma(a + 1) + std::lgamma(b + 1) + std::lgamma(n - a + 1) + std::lgamma(n - b + 1) -
                     std::lgamma(n + 1) - std::lgamma(lo + 1) - std::lgamma(a - lo + 1) - std::lgamma(b - lo + 1) -
                     std::lgamma(n - a - b + lo + 1);
      double p = std::exp(log_p);
      for (double k = lo; k <= hi; k += 1) {
        emi += p * (k / n) * std::log(n * k / (a * b));
        p *= (a - k) * (b - k) / ((k + 1) * (n - a - b + k + 1));
      }
    }
  return emi;
}

}  // namespace

double ami(std::span<const int> pred, std::span<const int> truth, std::span<const std::uint8_t> excluded) {
  if (pred.size() != truth.size() || (!excluded.empty() && excluded.size() != pred.size()))
    throw ContractError("ami: label and mask lengths differ");
  const Contingency c = contingency(pred, truth, excluded);
  if (c.total == 0) throw UndefinedMetric("ami: every pixel is excluded");
  // Two unsplit labelings agree; one unsplit side carries no information.
  if (c.rows.size() < 2 || c.cols.size() < 2) return c.rows.size() == c.cols.size() ? 1.0 : 0.0;
  // A one-to-one contingency means the labelings agree up to renaming.
  bool bijective = c.rows.size() == c.cols.size();
  for (std::size_t i = 0; bijective && i < c.rows.size(); ++i) {
    std::size_t nonzero = 0;
    for (std::size_t j = 0; j < c.cols.size(); ++j) nonzero += c.cells[i * c.cols.size() + j] > 0;
    bijective = nonzero == 1;
  }
  if (bijective) return 1.0;
  const double n = c.total;
  double mi = 0;
  for (std::size_t i = 0; i < c.rows.size(); ++i)
    for (std::size_t j = 0; j < c.cols.size(); ++j) {
      const double nij = c.cells[i * c.cols.size() + j];
      if (nij > 0) mi += nij / n * std::log(n * nij / (c.rows[i] * c.cols[j]));
    }
  const double emi = expected_mi(c);
  const double norm = 0.5 * (entropy(c.rows, n) + entropy(c.cols, n));
  const double denom = norm - emi;
  if (std::abs(denom) < 1e-15) return 0.0;
  return (mi - emi) / denom;
}

double ami(std::span<const int> pred, std::span<const int> truth) { return ami(pred, truth, {}); }

std::vector<std::size_t> hungarian_assign(std::span<const double> cost, std::size_t n) {
  if (cost.size() != n * n) throw ContractError("hungarian_assign: cost must be n x n");
  for (double v : cost)
    if (!std::isfinite(v)) throw DomainError("hungarian_assign: non-finite cost");
  if (n == 0) return {};
  // Shortest augmenting paths with row/column potentials; 1-based, column 0
  // is the virtual start.
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0);
  std::vector<std::size_t> match(n + 1, 0), way(n + 1, 0);
  for (std::size_t i = 1; i <= n; ++i) {
    match[0] = i;
    std::size_t j0 = 0;
    std::vector<double> minv(n + 1, inf);
    std::vector<char> used(n + 1, false);
    do {
      used[j0] = true;
      const std::size_t i0 = match[j0];
      double delta = inf;
      std::size_t j1 = 0;
      for (std::size_t j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const double cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= n; ++j) {
        if (used[j]) {
          u[match[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (match[j0] != 0);
    do {
      const std::size_t j1 = way[j0];
      match[j0] = match[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  std::vector<std::size_t> result(n);
  for (std::size_t j = 1; j <= n; ++j) result[match[j] - 1] = j - 1;
  return result;
}

double assignment_cost(std::span<const double> cost, std::size_t n, std::span<const std::size_t> assignment) {
  double total = 0;
  for (std::size_t i = 0; i < n; ++i) total += cost[i * n + assignment[i]];
  return total;
}

double hungarian_mse(const Tensor& recons, const Tensor& truths, double background) {
  if (recons.rank() != 2 || truths.rank() != 2 || recons.dim(1) != truths.dim(1))
    throw ContractError("hungarian_mse: images must be [R, M] and [J, M] with equal M");
  const std::size_t r = recons.dim(0), j = truths.dim(0), m = recons.dim(1);
  const std::size_t n = std::max(r, j);
  if (n == 0) return 0.0;
  auto pixel = [&](const Tensor& t, std::size_t rows, std::size_t i, std::size_t px) {
    return i < rows ? t[i * m + px] : background;
  };
  std::vector<double> cost(n * n);
  for (std::size_t a = 0; a < n; ++a)
    for (std::size_t b = 0; b < n; ++b) {
      double acc = 0;
      for (std::size_t px = 0; px < m; ++px) {
        const double d = pixel(recons, r, a, px) - pixel(truths, j, b, px);
        acc += d * d;
      }
      cost[a * n + b] = acc / static_cast<double>(m);
    }
  const auto assignment = hungarian_assign(cost, n);
  return assignment_cost(cost, n, assignment) / static_cast<double>(n);
}

Tensor truth_object_images(const SceneSample& sample, double background) {
  std::uint8_t present = 0;
  for (std::uint8_t b : sample.labels) present |= b;
  const std::size_t m = sample.pixels.size();
  std::vector<int> bits;
  for (int bit = 1; bit < 8; ++bit)
    if (present & (1u << bit)) bits.push_back(bit);
  Tensor out(Shape{bits.size(), m}, background);
  for (std::size_t o = 0; o < bits.size(); ++o)
    for (std::size_t px = 0; px < m; ++px)
      if (sample.labels[px] & (1u << bits[o])) out[o * m + px] = sample.pixels[px] / 255.0;
  return out;
}

namespace {

double mean_defined(const std::vector<double>& v) {
  double s = 0;
  std::size_t n = 0;
  for (double x : v)
    if (!std::isnan(x)) {
      s += x;
      ++n;
    }
  return n == 0 ? std::numeric_limits<double>::quiet_NaN() : s / static_cast<double>(n);
}

}  // namespace

double MetricsReport::mean_ami() const { return mean_defined(ami); }
double MetricsReport::mean_mse() const { return mean_defined(mse); }
double MetricsReport::mean_background_peak() const { return mean_defined(background_peak); }
double MetricsReport::mean_background_last() const { return mean_defined(background_last); }

std::string MetricsReport::table() const {
  std::ostringstream os;
  os.precision(9);
  os << "sample ami mse background_peak background_last\n";
  for (std::size_t i = 0; i < samples; ++i)
    os << i << ' ' << ami[i] << ' ' << mse[i] << ' ' << background_peak[i] << ' ' << background_last[i] << '\n';
  return os.str();
}

std::string MetricsReport::summary() const {
  std::ostringstream os;
  os.precision(9);
  os << "samples=" << samples << '\n'
     << "undefined_ami=" << undefined_ami << '\n'
     << "ami=" << mean_ami() << '\n'
     << "mse=" << mean_mse() << '\n'
     << "background_peak=" << mean_background_peak() << '\n'
     << "background_last=" << mean_background_last() << '\n';
  return os.str();
}

void parallel_for(std::size_t count, std::size_t workers, const std::function<void(std::size_t)>& fn) {
  workers = std::max<std::size_t>(1, std::min(workers, count));
  if (workers == 1) {
    for (std::size_t i = 0; i < count; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::mutex lock;
  std::size_t failed_at = count;
  std::exception_ptr failure;
  auto run = [&]() {
    for (std::size_t i; (i = next.fetch_add(1)) < count;) {
      try {
        fn(i);
      } catch (...) {
        std::lock_guard<std::mutex> g(lock);
        if (i < failed_at) {
          failed_at = i;
          failure = std::current_exception();
        }
      }
    }
  };
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(run);
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);
}

MetricsReport evaluate_dataset(const Dataset& data, ParamStore& params, const ArchConfig& arch, const EmConfig& config,
                               const EvalOptions& options) {
  if (data.size() > 0 && (data.height != arch.height || data.width != arch.width))
    throw ConfigError("dataset is " + std::to_string(data.height) + "x" + std::to_string(data.width) +
                      " but the model expects " + std::to_string(arch.height) + "x" + std::to_string(arch.width));
  const std::size_t total = options.limit > 0 ? std::min(options.limit, data.size()) : data.size();
  const std::size_t batch = std::max<std::size_t>(1, options.batch);
  const std::size_t batches = (total + batch - 1) / batch;
  const std::size_t m = data.pixels(), k = config.components;
  const double background = config.prior.mean_param(config.model);

  MetricsReport report;
  report.samples = total;
  report.ami.assign(total, 0.0);
  report.mse.assign(total, 0.0);
  report.background_peak.assign(total, 0.0);
  report.background_last.assign(total, 0.0);

  parallel_for(batches, options.workers, [&](std::size_t bi) {
    const std::size_t first = bi * batch, count = std::min(batch, total - first);
    std::vector<std::uint64_t> seeds(count);
    for (std::size_t i = 0; i < count; ++i) seeds[i] = sample_seed(options.seed, first + i);
    Tensor images = data.images(first, count);
    // Gradient-mode updates differentiate internally, so only the recurrent
    // mode can run without recording.
    std::optional<NoGradGuard> guard;
    if (config.mode == UpdateMode::Rnn) guard.emplace();
    Tape tape;
    EmTrace trace = run_em(tape, images, seeds, params, arch, config);
    const std::vector<int> labels = trace.labels();
    const Tensor& gamma = trace.final_gamma();
    const Tensor recons = object_reconstructions(trace, config);
    const std::size_t r = recons.dim(1);
    for (std::size_t i = 0; i < count; ++i) {
      const SceneSample& s = data.samples[first + i];
      const std::size_t idx = first + i;
      std::span<const int> pred(labels.data() + i * m, m);
      const std::vector<int> truth = truth_labels(s);
      const std::vector<std::uint8_t> mask = exclusion_mask(s);
      try {
        report.ami[idx] = ami(pred, truth, mask);
      } catch (const UndefinedMetric&) {
        report.ami[idx] = std::numeric_limits<double>::quiet_NaN();
      }
      Tensor rec(Shape{r, m});
      std::copy_n(recons.raw() + i * r * m, r * m, rec.raw());
      report.mse[idx] = hungarian_mse(rec, truth_object_images(s, background), background);
      double peak = 0, last = 0;
      std::size_t bg = 0;
      for (std::size_t px = 0; px < m; ++px) {
        if (s.labels[px] != 0) continue;
        double best = 0;
        for (std::size_t c = 0; c < k; ++c) best = std::max(best, gamma[(i * k + c) * m + px]);
        peak += best;
        last += pred[px] == static_cast<int>(k - 1);
        ++bg;
      }
      report.background_peak[idx] = bg ? peak / static_cast<double>(bg) : std::numeric_limits<double>::quiet_NaN();
      report.background_last[idx] = bg ? last / static_cast<double>(bg) : std::numeric_limits<double>::quiet_NaN();
    }
  });
  for (double a : report.ami) report.undefined_ami += std::isnan(a);
  return report;
}

}  // namespace ldp
