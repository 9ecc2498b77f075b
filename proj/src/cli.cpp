#include "ldp/cli.hpp"

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <sstream>

#include "ldp/checkpoint.hpp"
#include "ldp/datasets.hpp"
#include "ldp/error.hpp"
#include "ldp/eval.hpp"
#include "ldp/random.hpp"
#include "ldp/run_config.hpp"
#include "ldp/train.hpp"
#include "ldp/visualize.hpp"

namespace fs = std::filesystem;

namespace ldp {

namespace {

std::string flag_of(const std::string& key) {
  std::string f = key;
  for (char& c : f)
    if (c == '_') c = '-';
  return "--" + f;
}

// Options shared by every command: a config file, the output directory and
// one flag per configuration key.
struct Common {
  std::string config_path;
  std::string out = ".";
  std::map<std::string, std::string> values;
  std::map<std::string, CLI::Option*> options;

  void attach(CLI::App& cmd) {
    cmd.add_option("--config", config_path, "key=value configuration file; flags override it");
    cmd.add_option("--out", out, "output directory")->capture_default_str();
    const RunConfig defaults;
    for (const ConfigKey& key : config_keys()) {
      std::string names = flag_of(key.name);
      if (key.name == "count") names += ",--n";
      CLI::Option* opt = cmd.add_option(names, values[key.name], key.help)->group("Configuration keys");
      opt->default_str(defaults.get(key.name));
      options[key.name] = opt;
    }
  }

  // Config file, then flags, over `base`.
  RunConfig build(RunConfig base) const {
    if (!config_path.empty()) base = RunConfig::from_file(config_path, std::move(base));
    for (const auto& [key, opt] : options)
      if (opt->count() > 0) base.set(key, values.at(key));
    return base;
  }
};

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
}

void write_text(const fs::path& path, const std::string& text) {
  write_file_bytes(path, std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

void append_text(const fs::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::app | std::ios::binary);
  if (!f || !(f << text) || !f.flush()) throw IoError("cannot append to " + path.string());
}

// Takes the image size from the data unless the config fixes it.
RunConfig fit_to_data(RunConfig cfg, const Dataset& data) {
  if (data.size() == 0) return cfg.resolved();
  if (data.height != data.width) throw ConfigError("images must be square");
  if (cfg.size == 0) cfg.size = data.height;
  cfg = cfg.resolved();
  if (cfg.size != data.height)
    throw ConfigError("dataset images are " + std::to_string(data.height) + "x" + std::to_string(data.width) +
                      " but size=" + std::to_string(cfg.size));
  return cfg;
}

Dataset generate_split(const RunConfig& cfg, std::size_t count, std::uint64_t seed, Split split,
                       const GlyphBank* bank) {
  if (cfg.dataset == DatasetKind::Shapes) return generate_multi_shapes(ShapesConfig{count, cfg.size, cfg.objects, seed});
  MnistConfig m;
  m.count = count;
  m.size = cfg.size;
  m.objects = cfg.objects;
  m.unique = cfg.unique;
  m.holdout = cfg.holdout;
  m.split = split;
  m.seed = seed;
  return compose_multi_mnist(*bank, m);
}

int cmd_generate(const Common& common, const std::string& kind, std::ostream& out) {
  RunConfig cfg = common.build(RunConfig{});
  if (!kind.empty()) cfg.set("dataset", kind);
  cfg = cfg.resolved();
  cfg.validate();
  std::unique_ptr<GlyphBank> bank;
  if (cfg.dataset == DatasetKind::Mnist) {
    if (cfg.idx_images.empty()) throw ConfigError("mnist generation needs --idx-images");
    bank = std::make_unique<GlyphBank>(GlyphBank::from_idx(read_idx_file(cfg.idx_images)));
  }
  ensure_dir(common.out);
  const struct {
    const char* name;
    std::size_t count;
    std::uint64_t seed;
    Split split;
  } splits[] = {{"train", cfg.count, cfg.seed, Split::Train},
                {"validation", cfg.validation_count, stream_seed(cfg.seed, 1), Split::Test},
                {"test", cfg.test_count, stream_seed(cfg.seed, 2), Split::Test}};
  for (const auto& s : splits) {
    if (s.count == 0) continue;
    const Dataset d = generate_split(cfg, s.count, s.seed, s.split, bank.get());
    const fs::path path = fs::path(common.out) / (std::string(s.name) + ".ldpd");
    save_dataset(d, path);
    out << path.string() << ": count=" << d.size() << " size=" << d.height << " objects=" << cfg.objects
        << " overlap=" << d.overlap_fraction() << "\n";
  }
  return kExitOk;
}

int cmd_train(const Common& common, const std::string& data_path, const std::string& validation_path,
              const std::string& resume, std::ostream& out) {
  const Dataset train = load_dataset(data_path);
  const Dataset validation = validation_path.empty() ? Dataset{} : load_dataset(validation_path);
  Checkpoint ck;
  if (!resume.empty()) {
    ck = load_checkpoint(resume);
    RunConfig cfg = fit_to_data(common.build(ck.config), train);
    check_compatible(ck.config, cfg);
    ck.config = cfg;
  } else {
    RunConfig cfg = fit_to_data(common.build(RunConfig{}), train);
    ck = initial_checkpoint(cfg);
  }
  ck.config.validate();
  const fs::path dir = common.out;
  ensure_dir(dir);
  write_text(dir / "config.txt", ck.config.to_text());
  const fs::path ckpt = dir / "checkpoint.ldpc", history = dir / "history.txt";
  if (resume.empty()) write_text(history, "");
  save_checkpoint(ck, ckpt);
  const RunConfig& cfg = ck.config;
  train_bptt(train, validation, ck.params, ck.optimizer, cfg.architecture(), cfg.em, cfg.training(), ck.epoch,
             [&](const HistoryRecord& rec, const ParamStore&, const AdamState&) {
               ck.epoch = rec.epoch;
               save_checkpoint(ck, ckpt);
               append_text(history, rec.line() + "\n");
               out << rec.line() << std::endl;
             });
  return kExitOk;
}

int cmd_eval(const Common& common, const std::string& checkpoint, const std::string& data_path,
             const std::string& name, std::size_t limit, std::ostream& out) {
  Checkpoint ck = load_checkpoint(checkpoint);
  const Dataset data = load_dataset(data_path);
  RunConfig cfg = common.build(ck.config).resolved();
  check_compatible(ck.config, cfg);
  cfg.validate();
  EvalOptions opts;
  opts.seed = cfg.seed;
  opts.batch = cfg.train.chunk;
  opts.workers = cfg.workers;
  opts.limit = limit;
  const MetricsReport report = evaluate_dataset(data, ck.params, cfg.architecture(), cfg.em, opts);
  const fs::path dir = common.out;
  ensure_dir(dir);
  write_text(dir / (name + ".txt"), report.table());
  write_text(dir / (name + ".kv"), report.summary());
  out << "AMI " << report.mean_ami() << " MSE " << report.mean_mse() << "\n";
  return kExitOk;
}

int cmd_visualize(const Common& common, const std::string& checkpoint, const std::string& data_path,
                  const std::vector<std::size_t>& samples, std::ostream& out) {
  Checkpoint ck = load_checkpoint(checkpoint);
  const Dataset data = load_dataset(data_path);
  RunConfig cfg = common.build(ck.config).resolved();
  check_compatible(ck.config, cfg);
  cfg.validate();
  const fs::path dir = common.out;
  ensure_dir(dir);
  for (std::size_t index : samples)
    for (const NamedImage& img : render_sample(data, index, ck.params, cfg.architecture(), cfg.em, cfg.seed)) {
      write_file_bytes(dir / img.name, img.ppm);
      out << (dir / img.name).string() << "\n";
    }
  return kExitOk;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Perceptual grouping with a stick-breaking spatial mixture and learned priors", "ldp"};
  app.require_subcommand(1);

  Common gen_opts, train_opts, eval_opts, vis_opts;
  std::string kind, data, validation, resume, checkpoint, report_name = "report";
  std::size_t limit = 0;
  std::vector<std::size_t> samples{0};

  CLI::App* gen = app.add_subcommand("generate", "write LDPD dataset containers (train, validation, test)");
  gen->add_option("kind", kind, "shapes | mnist (same as --dataset)")->check(CLI::IsMember({"shapes", "mnist"}));
  gen_opts.attach(*gen);

  CLI::App* tr = app.add_subcommand("train", "train by backpropagation through the unrolled EM loop");
  tr->add_option("--data", data, "training container")->required();
  tr->add_option("--validation", validation, "validation container scored after every epoch");
  tr->add_option("--resume", resume, "checkpoint to continue from");
  train_opts.attach(*tr);

  CLI::App* ev = app.add_subcommand("eval", "score a checkpoint on a dataset (AMI, MSE)");
  ev->add_option("--checkpoint", checkpoint, "LDPC checkpoint")->required();
  ev->add_option("--data", data, "dataset container")->required();
  ev->add_option("--name", report_name, "report file stem")->capture_default_str();
  ev->add_option("--limit", limit, "score at most this many samples (0: all)")->capture_default_str();
  eval_opts.attach(*ev);

  CLI::App* vis = app.add_subcommand("visualize", "write PPM images of inputs, assignments and reconstructions");
  vis->add_option("--checkpoint", checkpoint, "LDPC checkpoint")->required();
  vis->add_option("--data", data, "dataset container")->required();
  vis->add_option("--samples", samples, "sample indices")->delimiter(',')->capture_default_str();
  vis_opts.attach(*vis);

  std::vector<std::string> storage{"ldp"};
  storage.insert(storage.end(), args.begin(), args.end());
  std::vector<char*> argv;
  for (std::string& s : storage) argv.push_back(s.data());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitConfig;
  }

  try {
    if (*gen) return cmd_generate(gen_opts, kind, out);
    if (*tr) return cmd_train(train_opts, data, validation, resume, out);
    if (*ev) return cmd_eval(eval_opts, checkpoint, data, report_name, limit, out);
    if (*vis) return cmd_visualize(vis_opts, checkpoint, data, samples, out);
  } catch (const ConfigError& e) {
    err << "configuration error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const IoError& e) {
    err << "I/O error: " << e.what() << "\n";
    return kExitIo;
  } catch (const FormatError& e) {
    err << "I/O error: " << e.what() << "\n";
    return kExitIo;
  } catch (const NumericalError& e) {
    err << "numerical failure: " << e.what() << "\n";
    return kExitNumerical;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitFailure;
  }
  return kExitFailure;
}

}  // namespace ldp
