#include "ldp/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <string>

#include "bytes.hpp"
#include "ldp/datasets.hpp"
#include "ldp/error.hpp"

namespace ldp {

namespace {

using namespace bytes;

constexpr char kMagic[4] = {'L', 'D', 'P', 'C'};
constexpr std::uint16_t kVersion = 1;

void put_text(std::vector<std::uint8_t>& out, const std::string& s) {
  put_u32(out, static_cast<std::uint32_t>(s.size()));
  out.insert(out.end(), s.begin(), s.end());
}

void put_values(std::vector<std::uint8_t>& out, const Tensor& t) {
  for (double v : t.data()) put_u64(out, std::bit_cast<std::uint64_t>(v));
}

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> b) : b_(b) {}

  std::size_t pos() const { return pos_; }
  void need(std::size_t n) const {
    if (b_.size() - pos_ < n) throw FormatError("truncated checkpoint", b_.size());
  }
  std::uint32_t uint(std::size_t n) {
    need(n);
    const std::uint32_t v = get_le(b_, pos_, n);
    pos_ += n;
    return v;
  }
  std::uint64_t u64() {
    need(8);
    const std::uint64_t v = get_u64(b_, pos_);
    pos_ += 8;
    return v;
  }
  std::string text(std::size_t n) {
    need(n);
    std::string s(b_.begin() + pos_, b_.begin() + pos_ + n);
    pos_ += n;
    return s;
  }
  void values(Tensor& t) {
    need(t.size() * 8);
    for (double& v : t.data()) v = std::bit_cast<double>(u64());
  }

 private:
  std::span<const std::uint8_t> b_;
  std::size_t pos_ = 0;
};

}  // namespace

Checkpoint initial_checkpoint(const RunConfig& config) {
  Checkpoint c;
  c.config = config.resolved();
  c.config.validate();
  c.params = init_params(c.config.seed, c.config.architecture());
  c.optimizer = AdamState::zeros_like(c.params);
  return c;
}

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& c) {
  std::vector<std::uint8_t> out(std::begin(kMagic), std::end(kMagic));
  put_u16(out, kVersion);
  put_text(out, c.config.architecture_text());
  put_text(out, c.config.to_text());
  put_u32(out, static_cast<std::uint32_t>(c.params.count()));
  for (const auto& [name, p] : c.params.entries()) {
    put_u16(out, static_cast<std::uint16_t>(name.size()));
    out.insert(out.end(), name.begin(), name.end());
    out.push_back(static_cast<std::uint8_t>(p.value.rank()));
    for (std::size_t d : p.value.shape()) put_u32(out, static_cast<std::uint32_t>(d));
    put_values(out, p.value);
  }
  put_u64(out, c.optimizer.steps);
  for (const auto& [name, p] : c.params.entries()) {
    auto f = c.optimizer.first.find(name), s = c.optimizer.second.find(name);
    if (f == c.optimizer.first.end() || s == c.optimizer.second.end())
      throw ContractError("optimizer state lacks parameter " + name);
    put_values(out, f->second);
    put_values(out, s->second);
  }
  put_u64(out, c.epoch);
  put_u32(out, crc_of(out));
  return out;
}

Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kMagic, 4) != 0) throw FormatError("not a checkpoint", 0);
  if (bytes.size() < 10) throw FormatError("truncated checkpoint", bytes.size());
  const std::size_t body = bytes.size() - 4;
  if (crc_of(bytes.first(body)) != get_le(bytes, body, 4)) throw FormatError("checkpoint checksum mismatch", body);
  Reader r(bytes.first(body));
  r.text(4);
  if (const std::uint32_t v = r.uint(2); v != kVersion)
    throw FormatError("unsupported checkpoint version " + std::to_string(v), 4);
  const std::string arch_text = r.text(r.uint(4));
  const std::size_t config_at = r.pos();
  Checkpoint c;
  try {
    c.config = RunConfig::from_text(r.text(r.uint(4)));
  } catch (const ConfigError& e) {
    throw FormatError(std::string("bad configuration record: ") + e.what(), config_at);
  }
  if (c.config.architecture_text() != arch_text)
    throw FormatError("architecture record disagrees with the configuration", config_at);
  c.params = init_params(0, c.config.architecture());
  const std::size_t count = r.uint(4);
  if (count != c.params.count())
    throw FormatError("checkpoint holds " + std::to_string(count) + " tensors, architecture needs " +
                          std::to_string(c.params.count()),
                      r.pos());
  for (auto& [name, p] : c.params.entries()) {
    const std::size_t at = r.pos();
    const std::string stored = r.text(r.uint(2));
    Shape shape(r.uint(1));
    for (std::size_t& d : shape) d = r.uint(4);
    if (stored != name || shape != p.value.shape())
      throw FormatError("tensor " + stored + " " + to_string(shape) + " does not match parameter " + name + " " +
                            to_string(p.value.shape()),
                        at);
    r.values(p.value);
  }
  c.optimizer = AdamState::zeros_like(c.params);
  c.optimizer.steps = r.u64();
  for (const auto& [name, p] : c.params.entries()) {
    r.values(c.optimizer.first.at(name));
    r.values(c.optimizer.second.at(name));
  }
  c.epoch = r.u64();
  if (r.pos() != body) throw FormatError("trailing bytes in checkpoint", r.pos());
  return c;
}

void save_checkpoint(const Checkpoint& c, const std::filesystem::path& path) {
  const std::vector<std::uint8_t> bytes = encode_checkpoint(c);
  // Write beside the target and rename, so an interrupted save keeps the old file.
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  write_file_bytes(tmp, bytes);
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot replace " + path.string() + ": " + ec.message());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) { return decode_checkpoint(read_file_bytes(path)); }

}  // namespace ldp
