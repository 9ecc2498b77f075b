// Desk-scale training runs on Multi-Shapes and the quantitative checks built
// on them. Checkpoints are cached per run and resumed, so an interrupted or
// repeated invocation only trains what is missing. One PASS/FAIL line per
// criterion.
//
//   acceptance_desk [--cache DIR] [--only N[,N...]]

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "ldp/checkpoint.hpp"
#include "ldp/datasets.hpp"
#include "ldp/eval.hpp"
#include "ldp/run_config.hpp"
#include "ldp/train.hpp"
#include "verdict.hpp"

using namespace ldp;
using namespace ldp::acceptance;
namespace fs = std::filesystem;

namespace {

constexpr std::uint64_t kSeeds[] = {1, 2, 3};

// Shared settings of every desk run: 20x20 shapes, K=3, T=10, fc networks,
// 50 epochs over 5000 images.
RunConfig desk_config() { return RunConfig::from_file(LDP_DESK_CONFIG).resolved(); }

struct DeskData {
  Dataset train2, train3, validation, test2, test4;
};

DeskData make_data() {
  DeskData d;
  d.train2 = generate_multi_shapes(ShapesConfig{5000, 20, 2, 101});
  d.train3 = generate_multi_shapes(ShapesConfig{5000, 20, 3, 111});
  d.validation = generate_multi_shapes(ShapesConfig{200, 20, 2, 102});
  d.test2 = generate_multi_shapes(ShapesConfig{1000, 20, 2, 103});
  d.test4 = generate_multi_shapes(ShapesConfig{1000, 20, 4, 114});
  return d;
}

class Runs {
 public:
  explicit Runs(fs::path cache) : cache_(std::move(cache)) { fs::create_directories(cache_); }

  // Trains `config` on `train` unless the cache already holds the finished
  // run; a cached run with a different configuration is discarded.
  const Checkpoint& get(const std::string& name, const RunConfig& config, const Dataset& train,
                        const Dataset& validation) {
    if (auto it = done_.find(name); it != done_.end()) return it->second;
    const fs::path path = cache_ / (name + ".ldpc"), history = cache_ / (name + ".history");
    Checkpoint ck;
    bool fresh = true;
    if (fs::exists(path)) {
      ck = load_checkpoint(path);
      fresh = ck.config.to_text() != config.to_text();
      if (fresh) std::printf("[%s] cached run has another configuration; retraining\n", name.c_str());
    }
    if (fresh) {
      ck = initial_checkpoint(config);
      std::ofstream(history, std::ios::trunc);
    }
    if (ck.epoch < config.train.epochs) {
      std::printf("[%s] training from epoch %zu\n", name.c_str(), static_cast<std::size_t>(ck.epoch));
      std::fflush(stdout);
      save_checkpoint(ck, path);
      train_bptt(train, validation, ck.params, ck.optimizer, config.architecture(), config.em, config.training(),
                 ck.epoch, [&](const HistoryRecord& rec, const ParamStore&, const AdamState&) {
                   ck.epoch = rec.epoch;
                   save_checkpoint(ck, path);
                   std::ofstream(history, std::ios::app) << rec.line() << "\n";
                   std::printf("[%s] %s\n", name.c_str(), rec.line().c_str());
                   std::fflush(stdout);
                 });
    }
    return done_.emplace(name, std::move(ck)).first->second;
  }

 private:
  fs::path cache_;
  std::map<std::string, Checkpoint> done_;
};

// Scores a trained run on `test` with `components` mixture components.
MetricsReport score(const Checkpoint& ck, const Dataset& test, std::size_t components = 0) {
  RunConfig cfg = ck.config;
  if (components) cfg.em.components = components;
  ParamStore params = ck.params;
  EvalOptions opts;
  opts.seed = stream_seed(cfg.seed, 7);
  opts.workers = cfg.workers;
  return evaluate_dataset(test, params, cfg.architecture(), cfg.em, opts);
}

struct SeedMeans {
  double ami = 0, mse = 0, background_peak = 0, background_last = 0;
  std::string per_seed;
};

class Desk {
 public:
  Desk(fs::path cache) : runs_(std::move(cache)), data_(make_data()) {}

  // Mean test scores over the three seeds of one method and family under the
  // two-object configuration.
  const SeedMeans& means(Method method, Family family) {
    const std::string key = to_string(method) + "-" + to_string(family);
    if (auto it = means_.find(key); it != means_.end()) return it->second;
    SeedMeans m;
    for (std::uint64_t seed : kSeeds) {
      RunConfig cfg = desk_config();
      cfg.em.method = method;
      cfg.em.model.family = family;
      cfg.seed = seed;
      const Checkpoint& ck = runs_.get(key + "-s" + std::to_string(seed), cfg, data_.train2, data_.validation);
      const MetricsReport r = score(ck, data_.test2);
      m.ami += r.mean_ami() / 3.0;
      m.mse += r.mean_mse() / 3.0;
      m.background_peak += r.mean_background_peak() / 3.0;
      m.background_last += r.mean_background_last() / 3.0;
      m.per_seed += (m.per_seed.empty() ? "" : " ") + fmt(r.mean_ami());
    }
    return means_.emplace(key, m).first->second;
  }

  const Checkpoint& three_object_run() {
    RunConfig cfg = desk_config();
    cfg.objects = 3;
    cfg.em.components = 4;
    cfg.seed = kSeeds[0];
    return runs_.get("ldp-" + to_string(cfg.em.model.family) + "-3obj-s1", cfg, data_.train3, Dataset{});
  }

  const DeskData& data() const { return data_; }

 private:
  Runs runs_;
  DeskData data_;
  std::map<std::string, SeedMeans> means_;
};

std::string describe(const char* label, const SeedMeans& m) {
  return std::string(label) + " AMI " + fmt(m.ami) + " [" + m.per_seed + "]";
}

}  // namespace

int main(int argc, char** argv) {
  fs::path cache = "desk_cache";
  std::set<int> only;
  for (int i = 1; i < argc; ++i) {
    const std::string arg = argv[i];
    if (arg == "--cache" && i + 1 < argc) {
      cache = argv[++i];
    } else if (arg == "--only" && i + 1 < argc) {
      std::stringstream ss(argv[++i]);
      for (std::string item; std::getline(ss, item, ',');) only.insert(std::stoi(item));
    } else {
      std::fprintf(stderr, "usage: acceptance_desk [--cache DIR] [--only N[,N...]]\n");
      return 2;
    }
  }
  auto wanted = [&](int id) { return only.empty() || only.count(id) > 0; };

  Desk desk(cache);
  const Family family = desk_config().em.model.family;
  const Family other = family == Family::Gaussian ? Family::Bernoulli : Family::Gaussian;
  bool ok = true;

  if (wanted(6))
    ok &= report(6, "desk-scale segmentation quality", [&]() -> Verdict {
      const SeedMeans& m = desk.means(Method::Ldp, family);
      return {m.ami >= 0.70 && m.mse <= 2.0e-2,
              describe("mean", m) + ", mean MSE " + fmt(m.mse) + " (need AMI >= 0.7, MSE <= 0.02)"};
    });

  if (wanted(7))
    ok &= report(7, "stick-breaking at least matches softmax weights", [&]() -> Verdict {
      const SeedMeans& sb = desk.means(Method::Ldp, family);
      const SeedMeans& sm = desk.means(Method::Softmax, family);
      return {sb.ami >= sm.ami, describe("stick-breaking", sb) + ", " + describe("softmax", sm)};
    });

  if (wanted(8))
    ok &= report(8, "component family matters less than for N-EM", [&]() -> Verdict {
      const SeedMeans& nb = desk.means(Method::Nem, Family::Bernoulli);
      const SeedMeans& ng = desk.means(Method::Nem, Family::Gaussian);
      const SeedMeans& lf = desk.means(Method::Ldp, family);
      const SeedMeans& lo = desk.means(Method::Ldp, other);
      const double nem_gap = nb.ami - ng.ami, ldp_gap = std::abs(lf.ami - lo.ami);
      return {ng.ami < nb.ami && ldp_gap < nem_gap,
              describe("N-EM bernoulli", nb) + ", " + describe("N-EM gaussian", ng) + ", " +
                  describe(("ldp " + to_string(family)).c_str(), lf) + ", " +
                  describe(("ldp " + to_string(other)).c_str(), lo) + ", gaps ldp " + fmt(ldp_gap) + " N-EM " +
                  fmt(nem_gap)};
    });

  if (wanted(9))
    ok &= report(9, "trained on 3 objects, fewer objects score higher", [&]() -> Verdict {
      const Checkpoint& ck = desk.three_object_run();
      const MetricsReport two = score(ck, desk.data().test2, 3);
      const MetricsReport four = score(ck, desk.data().test4, 5);
      return {two.mean_ami() >= four.mean_ami(),
              "2 objects AMI " + fmt(two.mean_ami()) + " MSE " + fmt(two.mean_mse()) + ", 4 objects AMI " +
                  fmt(four.mean_ami()) + " MSE " + fmt(four.mean_mse())};
    });

  if (wanted(10))
    ok &= report(10, "background claimed by the last component, not by N-EM", [&]() -> Verdict {
      const SeedMeans& l = desk.means(Method::Ldp, family);
      const SeedMeans& n = desk.means(Method::Nem, family);
      return {l.background_peak > 0.9 && l.background_last > 0.9 && n.background_peak < 0.6,
              "ldp background max gamma " + fmt(l.background_peak) + " with last-component share " +
                  fmt(l.background_last) + ", N-EM background max gamma " + fmt(n.background_peak)};
    });

  return ok ? 0 : 1;
}
