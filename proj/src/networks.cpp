#include "ldp/networks.hpp"

#include <cmath>

#include "ldp/error.hpp"
#include "ldp/random.hpp"

namespace ldp {

namespace {

constexpr ConvGeometry kDown{2, 1};

std::size_t conv_out(std::size_t in, std::size_t k) { return (in + 2 * kDown.padding - k) / kDown.stride + 1; }

void require_cols(const Var& v, std::size_t cols, const char* what) {
  if (v.shape().size() != 2 || v.shape()[1] != cols)
    throw ContractError(std::string(what) + ": expected [R, " + std::to_string(cols) + "], got " +
                        to_string(v.shape()));
}

Var dense(Tape& tape, ParamStore& params, const std::string& name, const Var& x) {
  return add(matmul(x, tape.param(params.at(name + ".w"))), tape.param(params.at(name + ".b")));
}

Var norm(Tape& tape, ParamStore& params, const std::string& name, const Var& x) {
  return layer_norm(x, tape.param(params.at(name + ".gain")), tape.param(params.at(name + ".bias")));
}

// FC -> LN -> ReLU
Var hidden_layer(Tape& tape, ParamStore& params, const std::string& prefix, int index, const Var& x) {
  const std::string id = std::to_string(index);
  return relu(norm(tape, params, prefix + ".ln" + id, dense(tape, params, prefix + ".fc" + id, x)));
}

class Initializer {
 public:
  Initializer(ParamStore& store, std::uint64_t seed) : store_(store), rng_(seed) {}

  void dense(const std::string& name, std::size_t in, std::size_t out) {
    glorot(name + ".w", Shape{in, out}, in, out);
    store_.add(name + ".b", Tensor(Shape{out}, 0.0));
  }
  void norm(const std::string& name, std::size_t width) {
    store_.add(name + ".gain", Tensor(Shape{width}, 1.0));
    store_.add(name + ".bias", Tensor(Shape{width}, 0.0));
  }
  void conv(const std::string& name, std::size_t out_ch, std::size_t in_ch, std::size_t k) {
    glorot(name + ".w", Shape{out_ch, in_ch, k, k}, in_ch * k * k, out_ch * k * k);
  }
  void bias(const std::string& name, std::size_t width) { store_.add(name, Tensor(Shape{width}, 0.0)); }
  void weight(const std::string& name, std::size_t in, std::size_t out) { glorot(name, Shape{in, out}, in, out); }

 private:
  void glorot(const std::string& name, Shape shape, std::size_t fan_in, std::size_t fan_out) {
    const double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    Tensor w(std::move(shape));
    for (double& v : w.data()) v = a * (2.0 * rng_.uniform() - 1.0);
    store_.add(name, std::move(w));
  }

  ParamStore& store_;
  Rng rng_;
};

}  // namespace

std::string to_string(Preset preset) { return preset == Preset::Fc ? "fc" : "conv"; }

Preset parse_preset(const std::string& name) {
  if (name == "fc") return Preset::Fc;
  if (name == "conv") return Preset::Conv;
  throw ConfigError("unknown architecture preset '" + name + "'");
}

void ArchConfig::validate() const {
  if (height == 0 || width == 0 || latent_dim == 0 || feature_dim == 0 || hidden == 0)
    throw ConfigError("network dimensions must be positive");
  if (encoder_input == 0) throw ConfigError("encoder input width must be positive");
  if (!(latent_step_init > 0.0) || !(background_step_init > 0.0))
    throw ConfigError("step sizes must be positive");
  if (preset == Preset::Conv) {
    if (conv_channels1 == 0 || conv_channels2 == 0) throw ConfigError("conv channels must be positive");
    if (height % 4 != 0 || width % 4 != 0) throw ConfigError("conv preset needs height and width divisible by 4");
    if (kernel < 3 || kernel > 4) throw ConfigError("conv preset supports kernel sizes 3 and 4");
    if (encoder_input < pixels()) throw ConfigError("conv encoder input must contain the full image");
  }
}

Parameter& ParamStore::add(const std::string& name, Tensor value) {
  auto [it, inserted] = params_.try_emplace(name, std::move(value));
  if (!inserted) throw ContractError("duplicate parameter '" + name + "'");
  return it->second;
}

Parameter& ParamStore::at(const std::string& name) {
  auto it = params_.find(name);
  if (it == params_.end()) throw ContractError("missing parameter '" + name + "'");
  return it->second;
}

const Parameter& ParamStore::at(const std::string& name) const {
  auto it = params_.find(name);
  if (it == params_.end()) throw ContractError("missing parameter '" + name + "'");
  return it->second;
}

std::vector<std::string> ParamStore::names() const {
  std::vector<std::string> out;
  out.reserve(params_.size());
  for (const auto& [name, p] : params_) out.push_back(name);
  return out;
}

std::size_t ParamStore::total_size() const {
  std::size_t n = 0;
  for (const auto& [name, p] : params_) n += p.value.size();
  return n;
}

void ParamStore::zero_grad() {
  for (auto& [name, p] : params_) p.zero_grad();
}

bool ParamStore::identical(const ParamStore& other) const {
  if (params_.size() != other.params_.size()) return false;
  auto a = params_.begin();
  for (auto b = other.params_.begin(); b != other.params_.end(); ++a, ++b)
    if (a->first != b->first || !a->second.value.identical(b->second.value)) return false;
  return true;
}

double inverse_softplus(double y) {
  if (!(y > 0.0)) throw DomainError("inverse_softplus needs a positive argument");
  return y > 30.0 ? y + std::log1p(-std::exp(-y)) : std::log(std::expm1(y));
}

ParamStore init_params(std::uint64_t seed, const ArchConfig& arch) {
  arch.validate();
  ParamStore store;
  Initializer init(store, seed);
  const std::size_t n = arch.latent_dim, f = arch.feature_dim, h = arch.hidden, m = arch.pixels();

  if (arch.preset == Preset::Fc) {
    init.dense("shape.fc1", n, h);
    init.norm("shape.ln1", h);
    init.dense("shape.fc2", h, h);
    init.norm("shape.ln2", h);
    init.dense("shape.fc3", h, m);

    init.dense("encoder.fc1", arch.encoder_input, h);
    init.norm("encoder.ln1", h);
    init.dense("encoder.fc2", h, f);
  } else {
    const std::size_t c1 = arch.conv_channels1, c2 = arch.conv_channels2, k = arch.kernel;
    const std::size_t gh = conv_out(conv_out(arch.height, k), k), gw = conv_out(conv_out(arch.width, k), k);
    init.dense("shape.fc1", n, h);
    init.norm("shape.ln1", h);
    init.dense("shape.fc2", h, c2 * gh * gw);
    init.norm("shape.ln2", c2 * gh * gw);
    init.conv("shape.up1", c2, c1, k);
    init.bias("shape.up1.b", c1);
    init.conv("shape.up2", c1, 1, k);
    init.bias("shape.out.b", m);

    init.conv("encoder.down1", c1, 1, k);
    init.bias("encoder.down1.b", c1);
    init.conv("encoder.down2", c2, c1, k);
    init.bias("encoder.down2.b", c2);
    init.dense("encoder.fc1", c2 * gh * gw + (arch.encoder_input - m), h);
    init.norm("encoder.ln1", h);
    init.dense("encoder.fc2", h, f);
  }

  if (arch.appearance_dim > 0) init.dense("appearance", n, arch.appearance_dim);

  init.dense("rnn.in", f, n);
  init.weight("rnn.state.w", n, n);
  init.norm("rnn.ln", n);

  store.add("eta.latent", Tensor::scalar(inverse_softplus(arch.latent_step_init)));
  store.add("eta.background", Tensor::scalar(inverse_softplus(arch.background_step_init)));
  return store;
}

Var decode_shape_logits(Tape& tape, ParamStore& params, const ArchConfig& arch, const Var& latents) {
  require_cols(latents, arch.latent_dim, "decode_shape_logits");
  Var h = hidden_layer(tape, params, "shape", 1, latents);
  if (arch.preset == Preset::Fc) {
    h = hidden_layer(tape, params, "shape", 2, h);
    return dense(tape, params, "shape.fc3", h);
  }
  const std::size_t rows = latents.shape()[0], k = arch.kernel;
  const std::size_t h1 = conv_out(arch.height, k), w1 = conv_out(arch.width, k);
  const std::size_t gh = conv_out(h1, k), gw = conv_out(w1, k);
  h = hidden_layer(tape, params, "shape", 2, h);
  Var grid = reshape(h, {rows, arch.conv_channels2, gh, gw});
  Var up = conv2d_input_grad(grid, tape.param(params.at("shape.up1.w")), h1, w1, kDown);
  up = relu(add(up, reshape(tape.param(params.at("shape.up1.b")), {1, arch.conv_channels1, 1, 1})));
  Var img = conv2d_input_grad(up, tape.param(params.at("shape.up2.w")), arch.height, arch.width, kDown);
  return add(reshape(img, {rows, arch.pixels()}), tape.param(params.at("shape.out.b")));
}

Var appearance_logits(Tape& tape, ParamStore& params, const ArchConfig& arch, const Var& latents) {
  require_cols(latents, arch.latent_dim, "decode_appearance");
  if (arch.appearance_dim == 0) throw ContractError("architecture has no appearance head");
  return dense(tape, params, "appearance", latents);
}

Var decode_appearance(Tape& tape, ParamStore& params, const ArchConfig& arch, const Var& latents) {
  Var a = appearance_logits(tape, params, arch, latents);
  return arch.family == Family::Bernoulli ? sigmoid(a) : a;
}

Var encode_update_signal(Tape& tape, ParamStore& params, const ArchConfig& arch, const Var& signal) {
  require_cols(signal, arch.encoder_input, "encode_update_signal");
  if (arch.preset == Preset::Fc) {
    Var h = hidden_layer(tape, params, "encoder", 1, signal);
    return dense(tape, params, "encoder.fc2", h);
  }
  const std::size_t rows = signal.shape()[0], m = arch.pixels(), extra = arch.encoder_input - m;
  Var img = reshape(slice(signal, 1, extra, arch.encoder_input), {rows, 1, arch.height, arch.width});
  Var d1 = conv2d(img, tape.param(params.at("encoder.down1.w")), kDown);
  d1 = relu(add(d1, reshape(tape.param(params.at("encoder.down1.b")), {1, arch.conv_channels1, 1, 1})));
  Var d2 = conv2d(d1, tape.param(params.at("encoder.down2.w")), kDown);
  d2 = relu(add(d2, reshape(tape.param(params.at("encoder.down2.b")), {1, arch.conv_channels2, 1, 1})));
  Var flat = reshape(d2, {rows, d2.size() / rows});
  if (extra > 0) flat = concat({slice(signal, 1, 0, extra), flat}, 1);
  Var h = hidden_layer(tape, params, "encoder", 1, flat);
  return dense(tape, params, "encoder.fc2", h);
}

Var rnn_step(Tape& tape, ParamStore& params, const ArchConfig& arch, const Var& features, const Var& state) {
  require_cols(features, arch.feature_dim, "rnn_step");
  require_cols(state, arch.latent_dim, "rnn_step");
  if (features.shape()[0] != state.shape()[0]) throw ContractError("rnn_step: row count mismatch");
  Var pre = add(dense(tape, params, "rnn.in", features), matmul(state, tape.param(params.at("rnn.state.w"))));
  return tanh(norm(tape, params, "rnn.ln", pre));
}

Var latent_step_size(Tape& tape, ParamStore& params) { return softplus(tape.param(params.at("eta.latent"))); }

Var background_step_size(Tape& tape, ParamStore& params) {
  return softplus(tape.param(params.at("eta.background")));
}

}  // namespace ldp
