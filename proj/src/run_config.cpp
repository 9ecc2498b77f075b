#include "ldp/run_config.hpp"

#include <charconv>
#include <functional>
#include <map>
#include <sstream>

#include "ldp/datasets.hpp"
#include "ldp/error.hpp"

namespace ldp {

namespace {

std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

std::string trim(const std::string& s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string::npos) return "";
  const auto last = s.find_last_not_of(" \t\r");
  return s.substr(first, last - first + 1);
}

double parse_double(const std::string& key, const std::string& v) {
  double out = 0;
  auto res = std::from_chars(v.data(), v.data() + v.size(), out);
  if (res.ec != std::errc() || res.ptr != v.data() + v.size())
    throw ConfigError(key + ": expected a number, got '" + v + "'");
  return out;
}

std::uint64_t parse_u64(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  auto res = std::from_chars(v.data(), v.data() + v.size(), out);
  if (res.ec != std::errc() || res.ptr != v.data() + v.size())
    throw ConfigError(key + ": expected a non-negative integer, got '" + v + "'");
  return out;
}

std::size_t parse_size(const std::string& key, const std::string& v) {
  return static_cast<std::size_t>(parse_u64(key, v));
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "1" || v == "true" || v == "yes") return true;
  if (v == "0" || v == "false" || v == "no") return false;
  throw ConfigError(key + ": expected true or false, got '" + v + "'");
}

// 0 stands for "auto" in the keys that have dataset-dependent defaults.
std::size_t parse_auto_size(const std::string& key, const std::string& v) {
  return v == "auto" ? 0 : parse_size(key, v);
}
std::string format_auto(std::size_t v) { return v == 0 ? "auto" : std::to_string(v); }

std::vector<double> parse_list(const std::string& key, const std::string& v) {
  std::vector<double> out;
  if (v.empty()) return out;
  std::stringstream ss(v);
  for (std::string item; std::getline(ss, item, ',');) out.push_back(parse_double(key, trim(item)));
  return out;
}

std::string format_list(const std::vector<double>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + format_double(v[i]);
  return out;
}

struct Entry {
  ConfigKey key;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

#define LDP_NUMBER(name, field, help, arch)                                                            \
  Entry {                                                                                             \
    {name, help, arch}, [](const RunConfig& c) { return format_double(c.field); },                    \
        [](RunConfig& c, const std::string& v) { c.field = parse_double(name, v); }                   \
  }
#define LDP_SIZE(name, field, help, arch)                                                              \
  Entry {                                                                                             \
    {name, help, arch}, [](const RunConfig& c) { return std::to_string(c.field); },                   \
        [](RunConfig& c, const std::string& v) { c.field = parse_size(name, v); }                     \
  }

const std::vector<Entry>& entries() {
  static const std::vector<Entry> table = {
      {{"method", "ldp | ldp-softmax | nem", true},
       [](const RunConfig& c) { return to_string(c.em.method); },
       [](RunConfig& c, const std::string& v) { c.em.method = parse_method(v); }},
      {{"mode", "latent update: rnn | gradient", false},
       [](const RunConfig& c) { return to_string(c.em.mode); },
       [](RunConfig& c, const std::string& v) { c.em.mode = parse_update_mode(v); }},
      {{"family", "component distribution: gaussian | bernoulli", true},
       [](const RunConfig& c) { return to_string(c.em.model.family); },
       [](RunConfig& c, const std::string& v) { c.em.model.family = parse_family(v); }},
      LDP_SIZE("components", em.components, "mixture components K, background last", false),
      {{"steps", "EM steps T (auto: 10 shapes, 15 mnist)", false},
       [](const RunConfig& c) { return format_auto(c.em.steps); },
       [](RunConfig& c, const std::string& v) { c.em.steps = parse_auto_size("steps", v); }},
      {{"alpha", "Gaussian inverse variance (auto: 4 shapes, 16 mnist)", false},
       [](const RunConfig& c) { return c.em.model.alpha == 0.0 ? std::string("auto") : format_double(c.em.model.alpha); },
       [](RunConfig& c, const std::string& v) { c.em.model.alpha = v == "auto" ? 0.0 : parse_double("alpha", v); }},
      LDP_NUMBER("lambda", em.prior.lambda, "weight of the background KL term", false),
      LDP_NUMBER("prior_mean", em.prior.gaussian_mean, "Gaussian background prior mean", false),
      LDP_NUMBER("prior_theta", em.prior.bernoulli_theta, "Bernoulli background prior parameter", false),
      LDP_NUMBER("latent_init", em.latent_init_scale, "standard deviation of the initial latents", false),
      {{"step_weights", "comma-separated per-step loss weights (empty: proportional to t)", false},
       [](const RunConfig& c) { return format_list(c.em.step_weights); },
       [](RunConfig& c, const std::string& v) { c.em.step_weights = parse_list("step_weights", v); }},
      {{"detach_gamma", "cut the posterior path between steps", false},
       [](const RunConfig& c) { return std::string(c.em.detach_gamma ? "true" : "false"); },
       [](RunConfig& c, const std::string& v) { c.em.detach_gamma = parse_bool("detach_gamma", v); }},
      {{"bounded_mean", "squash Gaussian means through a sigmoid", false},
       [](const RunConfig& c) { return std::string(c.em.bounded_mean ? "true" : "false"); },
       [](RunConfig& c, const std::string& v) { c.em.bounded_mean = parse_bool("bounded_mean", v); }},
      {{"preset", "network preset: fc | conv", true},
       [](const RunConfig& c) { return to_string(c.arch.preset); },
       [](RunConfig& c, const std::string& v) { c.arch.preset = parse_preset(v); }},
      LDP_SIZE("latent_dim", arch.latent_dim, "latent size N", true),
      LDP_SIZE("feature_dim", arch.feature_dim, "encoder feature size F", true),
      LDP_SIZE("hidden", arch.hidden, "hidden layer width", true),
      LDP_SIZE("conv_channels1", arch.conv_channels1, "conv preset: first channel count", true),
      LDP_SIZE("conv_channels2", arch.conv_channels2, "conv preset: second channel count", true),
      LDP_SIZE("kernel", arch.kernel, "conv preset: kernel size", true),
      LDP_NUMBER("latent_step", latent_step, "initial latent step size per pixel", false),
      LDP_NUMBER("background_step", background_step, "initial background step size per pixel", false),
      LDP_SIZE("epochs", train.epochs, "training epochs", false),
      LDP_SIZE("batch", train.batch, "images per Adam step", false),
      LDP_SIZE("chunk", train.chunk, "images per unrolled run inside a batch", false),
      LDP_NUMBER("learning_rate", train.learning_rate, "Adam learning rate", false),
      LDP_NUMBER("beta1", train.beta1, "Adam first moment decay", false),
      LDP_NUMBER("beta2", train.beta2, "Adam second moment decay", false),
      LDP_NUMBER("epsilon", train.epsilon, "Adam epsilon", false),
      LDP_NUMBER("clip_norm", train.clip_norm, "global gradient norm limit (0: off)", false),
      LDP_SIZE("validation_limit", train.validation_limit, "validation samples scored per epoch (0: all)", false),
      {{"dataset", "generator: shapes | mnist", false},
       [](const RunConfig& c) { return std::string(c.dataset == DatasetKind::Shapes ? "shapes" : "mnist"); },
       [](RunConfig& c, const std::string& v) {
         if (v == "shapes") c.dataset = DatasetKind::Shapes;
         else if (v == "mnist") c.dataset = DatasetKind::Mnist;
         else throw ConfigError("dataset: expected shapes or mnist, got '" + v + "'");
       }},
      LDP_SIZE("count", count, "generated training images", false),
      LDP_SIZE("validation_count", validation_count, "generated validation images", false),
      LDP_SIZE("test_count", test_count, "generated test images", false),
      {{"size", "image side (auto: 20 shapes, 48 mnist)", true},
       [](const RunConfig& c) { return format_auto(c.size); },
       [](RunConfig& c, const std::string& v) { c.size = parse_auto_size("size", v); }},
      LDP_SIZE("objects", objects, "objects per generated image", false),
      LDP_SIZE("unique", unique, "mnist: distinct glyphs (0: all)", false),
      {{"holdout", "mnist: disjoint glyph pools for train and test", false},
       [](const RunConfig& c) { return std::string(c.holdout ? "true" : "false"); },
       [](RunConfig& c, const std::string& v) { c.holdout = parse_bool("holdout", v); }},
      {{"idx_images", "mnist: path of the IDX image file", false},
       [](const RunConfig& c) { return c.idx_images; },
       [](RunConfig& c, const std::string& v) { c.idx_images = v; }},
      {{"seed", "seed of generation, initialisation, training and evaluation", false},
       [](const RunConfig& c) { return std::to_string(c.seed); },
       [](RunConfig& c, const std::string& v) { c.seed = parse_u64("seed", v); }},
      LDP_SIZE("workers", workers, "worker threads", false),
  };
  return table;
}

#undef LDP_NUMBER
#undef LDP_SIZE

const Entry& find_entry(const std::string& key) {
  for (const Entry& e : entries())
    if (e.key.name == key) return e;
  throw ConfigError("unknown configuration key '" + key + "'");
}

}  // namespace

RunConfig::RunConfig() {
  em.steps = 0;
  em.model.alpha = 0.0;
  size = 0;
}

RunConfig RunConfig::resolved() const {
  RunConfig r = *this;
  const bool shapes = dataset == DatasetKind::Shapes;
  if (r.em.steps == 0) r.em.steps = shapes ? 10 : 15;
  if (r.em.model.alpha == 0.0) r.em.model.alpha = shapes ? 4.0 : 16.0;
  if (r.size == 0) r.size = shapes ? 20 : 48;
  return r;
}

ArchConfig RunConfig::architecture() const {
  const RunConfig r = resolved();
  ArchConfig base = r.arch;
  base.height = base.width = r.size;
  const double pixels = static_cast<double>(r.size * r.size);
  base.latent_step_init = r.latent_step / pixels;
  base.background_step_init = r.background_step / pixels;
  return arch_for(r.em, base);
}

TrainConfig RunConfig::training() const {
  TrainConfig t = train;
  t.seed = seed;
  t.workers = workers;
  return t;
}

void RunConfig::set(const std::string& key, const std::string& value) { find_entry(key).set(*this, trim(value)); }

std::string RunConfig::get(const std::string& key) const { return find_entry(key).get(*this); }

void RunConfig::validate() const {
  const RunConfig r = resolved();
  r.em.validate();
  r.training().validate();
  if (!(latent_step > 0.0) || !(background_step > 0.0)) throw ConfigError("step sizes must be positive");
  if (r.objects == 0 || r.objects > kMaxObjects)
    throw ConfigError("objects must lie in [1, " + std::to_string(kMaxObjects) + "]");
  r.architecture().validate();
}

std::string RunConfig::to_text() const {
  std::string out;
  for (const Entry& e : entries()) out += e.key.name + "=" + e.get(*this) + "\n";
  return out;
}

RunConfig RunConfig::from_text(const std::string& text, RunConfig base) {
  std::stringstream ss(text);
  std::size_t line_no = 0;
  for (std::string line; std::getline(ss, line);) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("line " + std::to_string(line_no) + ": expected key=value");
    try {
      base.set(trim(line.substr(0, eq)), line.substr(eq + 1));
    } catch (const ConfigError& e) {
      throw ConfigError("line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return base;
}

RunConfig RunConfig::from_file(const std::filesystem::path& path, RunConfig base) {
  const std::vector<std::uint8_t> bytes = read_file_bytes(path);
  return from_text(std::string(bytes.begin(), bytes.end()), std::move(base));
}

std::string RunConfig::architecture_text() const {
  const RunConfig r = resolved();
  std::string out;
  for (const Entry& e : entries())
    if (e.key.architecture) out += e.key.name + "=" + e.get(r) + "\n";
  return out;
}

const std::vector<ConfigKey>& config_keys() {
  static const std::vector<ConfigKey> keys = [] {
    std::vector<ConfigKey> out;
    for (const Entry& e : entries()) out.push_back(e.key);
    return out;
  }();
  return keys;
}

void check_compatible(const RunConfig& stored, const RunConfig& requested) {
  if (stored.em.method != requested.em.method)
    throw ConfigError("checkpoint was trained with method " + to_string(stored.em.method) + ", not " +
                      to_string(requested.em.method));
  const std::string a = stored.architecture_text(), b = requested.architecture_text();
  if (a != b) throw ConfigError("architecture mismatch:\ncheckpoint:\n" + a + "requested:\n" + b);
}

}  // namespace ldp
