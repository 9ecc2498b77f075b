#include "ldp/datasets.hpp"

#include <algorithm>
#include <bit>
#include <fstream>
#include <iterator>
#include <numeric>

#include "ldp/error.hpp"
#include "ldp/random.hpp"
#include "bytes.hpp"

namespace ldp {

namespace {

using namespace bytes;

constexpr std::array<std::uint8_t, 4> kMagic{'L', 'D', 'P', 'D'};
constexpr std::uint16_t kVersion = 1;
constexpr std::size_t kHeaderBytes = 4 + 2 + 2 + 2 + 4 + 1;

double intensity(std::uint8_t b) { return static_cast<double>(b) / 255.0; }

std::uint32_t get_be32(std::span<const std::uint8_t> b, std::size_t at) {
  return (std::uint32_t{b[at]} << 24) | (std::uint32_t{b[at + 1]} << 16) | (std::uint32_t{b[at + 2]} << 8) |
         std::uint32_t{b[at + 3]};
}

// Stamps a stencil at (top, left), clipping to the canvas.
void stamp(SceneSample& s, std::size_t h, std::size_t w, const Stencil& st, long top, long left, std::size_t object) {
  const std::uint8_t bit = static_cast<std::uint8_t>(1u << object);
  for (std::size_t r = 0; r < st.rows; ++r)
    for (std::size_t c = 0; c < st.cols; ++c) {
      if (!st.mask[r * st.cols + c]) continue;
      const long y = top + static_cast<long>(r), x = left + static_cast<long>(c);
      if (y < 0 || x < 0 || y >= static_cast<long>(h) || x >= static_cast<long>(w)) continue;
      const std::size_t m = static_cast<std::size_t>(y) * w + static_cast<std::size_t>(x);
      s.pixels[m] = 255;
      s.labels[m] |= bit;
    }
}

long offset_in(Rng& rng, std::size_t canvas, std::size_t extent) {
  const long overhang = static_cast<long>(extent / 3);
  const long lo = -overhang, hi = static_cast<long>(canvas) - static_cast<long>(extent) + overhang;
  return lo + static_cast<long>(rng.uniform_int(static_cast<std::uint64_t>(hi - lo + 1)));
}

struct GlyphPlacement {
  std::size_t glyph;
  std::size_t top, left;
};

// Glyph pool for a config: a seeded subset for the small settings, the whole
// bank (optionally split by holdout) otherwise.
std::vector<std::size_t> glyph_pool(const GlyphBank& bank, const MnistConfig& config) {
  std::vector<std::size_t> pool;
  if (config.unique > 0) {
    std::vector<std::size_t> order(bank.size());
    std::iota(order.begin(), order.end(), 0);
    // Fisher-Yates with a pool-specific stream so every split shares the subset.
    Rng rng(stream_seed(config.seed, 0xA11CEull));
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.uniform_int(i)]);
    pool.assign(order.begin(), order.begin() + static_cast<long>(config.unique));
    return pool;
  }
  for (std::size_t i = 0; i < bank.size(); ++i) {
    const bool test_glyph = i % 7 == 6;
    if (!config.holdout || test_glyph == (config.split == Split::Test)) pool.push_back(i);
  }
  return pool;
}

std::vector<std::vector<GlyphPlacement>> place_glyphs(const GlyphBank& bank, const MnistConfig& config) {
  config.validate(bank);
  const std::vector<std::size_t> pool = glyph_pool(bank, config);
  const std::uint64_t split_tag = config.split == Split::Test ? 1 : 0;
  std::vector<std::vector<GlyphPlacement>> out(config.count);
  const std::size_t span = config.size - kGlyphSide + 1;
  for (std::size_t i = 0; i < config.count; ++i) {
    Rng rng(stream_seed(config.seed ^ (split_tag << 63), i));
    for (std::size_t j = 0; j < config.objects; ++j) {
      GlyphPlacement p;
      p.glyph = pool[rng.uniform_int(pool.size())];
      p.top = rng.uniform_int(span);
      p.left = rng.uniform_int(span);
      out[i].push_back(p);
    }
  }
  return out;
}

}  // namespace

Tensor Dataset::images(std::size_t first, std::size_t count) const {
  if (first + count > samples.size()) throw ContractError("image range past the end of the dataset");
  std::vector<std::size_t> idx(count);
  std::iota(idx.begin(), idx.end(), first);
  return images(idx);
}

Tensor Dataset::images(std::span<const std::size_t> indices) const {
  const std::size_t m = pixels();
  Tensor t(Shape{indices.size(), m});
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const auto& px = samples.at(indices[i]).pixels;
    for (std::size_t p = 0; p < m; ++p) t[i * m + p] = intensity(px[p]);
  }
  return t;
}

double Dataset::overlap_fraction() const {
  if (samples.empty()) return 0.0;
  std::size_t hit = 0;
  for (const auto& s : samples)
    if (std::any_of(s.labels.begin(), s.labels.end(), [](std::uint8_t b) { return std::popcount(b) >= 2; })) ++hit;
  return static_cast<double>(hit) / static_cast<double>(samples.size());
}

void Dataset::validate() const {
  if (max_objects > kMaxObjects) throw ContractError("at most 7 objects per scene");
  const std::uint8_t allowed = static_cast<std::uint8_t>(((1u << (max_objects + 1)) - 1) & ~1u);
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto& s = samples[i];
    if (s.pixels.size() != pixels() || s.labels.size() != pixels())
      throw ContractError("sample " + std::to_string(i) + " has the wrong pixel count");
    for (std::uint8_t b : s.labels)
      if (b & ~allowed) throw ContractError("sample " + std::to_string(i) + " uses an undeclared object bit");
  }
}

Stencil sprite_stencil(Sprite sprite) {
  Stencil s;
  switch (sprite) {
    case Sprite::Square:
      s.rows = s.cols = 6;
      s.mask.assign(36, 1);
      return s;
    case Sprite::TriangleUp:
    case Sprite::TriangleDown: {
      s.rows = 5;
      s.cols = 9;
      s.mask.assign(45, 0);
      for (std::size_t r = 0; r < 5; ++r) {
        const std::size_t row = sprite == Sprite::TriangleUp ? r : 4 - r;
        for (std::size_t c = 4 - r; c <= 4 + r; ++c) s.mask[row * 9 + c] = 1;
      }
      return s;
    }
  }
  throw ContractError("unknown sprite");
}

void ShapesConfig::validate() const {
  if (objects < 1 || objects > kMaxObjects) throw ConfigError("objects must be in 1..7");
  if (size > 0xFFFF) throw ConfigError("image size too large");
  for (Sprite sp : {Sprite::Square, Sprite::TriangleUp, Sprite::TriangleDown}) {
    const Stencil st = sprite_stencil(sp);
    if (st.rows > size || st.cols > size)
      throw ConfigError("sprite of " + std::to_string(st.rows) + "x" + std::to_string(st.cols) +
                        " does not fit a " + std::to_string(size) + "x" + std::to_string(size) + " image");
  }
}

Dataset generate_multi_shapes(const ShapesConfig& config) {
  config.validate();
  const std::array<Stencil, 3> stencils{sprite_stencil(Sprite::Square), sprite_stencil(Sprite::TriangleUp),
                                        sprite_stencil(Sprite::TriangleDown)};
  Dataset d;
  d.height = d.width = static_cast<std::uint16_t>(config.size);
  d.max_objects = static_cast<std::uint8_t>(config.objects);
  d.samples.resize(config.count);
  const std::size_t m = d.pixels();
  for (std::size_t i = 0; i < config.count; ++i) {
    Rng rng(stream_seed(config.seed, i));
    SceneSample& s = d.samples[i];
    s.pixels.assign(m, 0);
    s.labels.assign(m, 0);
    for (std::size_t j = 1; j <= config.objects; ++j) {
      const Stencil& st = stencils[rng.uniform_int(3)];
      const long top = offset_in(rng, config.size, st.rows);
      const long left = offset_in(rng, config.size, st.cols);
      stamp(s, config.size, config.size, st, top, left, j);
    }
  }
  return d;
}

Tensor IdxArray::as_tensor() const {
  Shape shape(dims.begin(), dims.end());
  Tensor t(shape);
  for (std::size_t i = 0; i < data.size(); ++i) t[i] = intensity(data[i]);
  return t;
}

IdxArray parse_idx(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 4) throw FormatError("IDX header truncated", bytes.size());
  const std::uint32_t magic = get_be32(bytes, 0);
  if (magic != 0x00000801u && magic != 0x00000803u) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "0x%08X", magic);
    throw FormatError(std::string("unsupported IDX magic ") + buf, 0);
  }
  const std::size_t rank = magic & 0xFF;
  if (bytes.size() < 4 + 4 * rank) throw FormatError("IDX dimensions truncated", bytes.size());
  IdxArray a;
  std::size_t total = 1;
  for (std::size_t i = 0; i < rank; ++i) {
    a.dims.push_back(get_be32(bytes, 4 + 4 * i));
    total *= a.dims.back();
  }
  const std::size_t start = 4 + 4 * rank;
  if (bytes.size() - start < total)
    throw FormatError("IDX payload truncated: need " + std::to_string(total) + " bytes", bytes.size());
  if (bytes.size() - start > total) throw FormatError("trailing bytes after IDX payload", start + total);
  a.data.assign(bytes.begin() + static_cast<long>(start), bytes.end());
  return a;
}

IdxArray read_idx_file(const std::filesystem::path& path) { return parse_idx(read_file_bytes(path)); }

GlyphBank GlyphBank::from_idx(const IdxArray& images) {
  if (images.dims.size() != 3 || images.dims[1] != kGlyphSide || images.dims[2] != kGlyphSide)
    throw ConfigError("glyph images must be N x 28 x 28");
  GlyphBank bank;
  bank.glyphs.resize(images.dims[0]);
  for (std::size_t i = 0; i < bank.glyphs.size(); ++i)
    std::copy_n(images.data.begin() + static_cast<long>(i * kGlyphPixels), kGlyphPixels, bank.glyphs[i].begin());
  return bank;
}

void MnistConfig::validate(const GlyphBank& bank) const {
  if (objects < 1 || objects > kMaxObjects) throw ConfigError("objects must be in 1..7");
  if (size < kGlyphSide || size > 0xFFFF) throw ConfigError("canvas must be at least 28 pixels wide");
  if (bank.size() == 0) throw ConfigError("empty glyph bank");
  if (unique > bank.size())
    throw ConfigError("unique=" + std::to_string(unique) + " exceeds the " + std::to_string(bank.size()) +
                      " available glyphs");
  if (holdout && unique == 0 && bank.size() < 7) throw ConfigError("glyph bank too small for a holdout split");
}

std::vector<std::vector<std::size_t>> multi_mnist_glyph_ids(const GlyphBank& bank, const MnistConfig& config) {
  std::vector<std::vector<std::size_t>> ids;
  for (const auto& sample : place_glyphs(bank, config)) {
    ids.emplace_back();
    for (const auto& p : sample) ids.back().push_back(p.glyph);
  }
  return ids;
}

Dataset compose_multi_mnist(const GlyphBank& bank, const MnistConfig& config) {
  const auto placements = place_glyphs(bank, config);
  Dataset d;
  d.height = d.width = static_cast<std::uint16_t>(config.size);
  d.max_objects = static_cast<std::uint8_t>(config.objects);
  const std::size_t w = config.size;
  for (const auto& sample : placements) {
    SceneSample s;
    s.pixels.assign(w * w, 0);
    s.labels.assign(w * w, 0);
    for (std::size_t j = 0; j < sample.size(); ++j) {
      const auto& g = bank.glyphs[sample[j].glyph];
      const std::uint8_t bit = static_cast<std::uint8_t>(1u << (j + 1));
      for (std::size_t r = 0; r < kGlyphSide; ++r)
        for (std::size_t c = 0; c < kGlyphSide; ++c) {
          const std::uint8_t v = g[r * kGlyphSide + c];
          const std::size_t m = (sample[j].top + r) * w + sample[j].left + c;
          s.pixels[m] = std::max(s.pixels[m], v);
          if (v >= kForegroundByte) s.labels[m] |= bit;
        }
    }
    d.samples.push_back(std::move(s));
  }
  return d;
}

std::vector<std::uint8_t> write_container(const Dataset& d) {
  d.validate();
  std::vector<std::uint8_t> out(kMagic.begin(), kMagic.end());
  put_u16(out, kVersion);
  put_u16(out, d.height);
  put_u16(out, d.width);
  put_u32(out, static_cast<std::uint32_t>(d.samples.size()));
  out.push_back(d.max_objects);
  out.reserve(out.size() + d.samples.size() * 2 * d.pixels() + 4);
  for (const auto& s : d.samples) {
    out.insert(out.end(), s.pixels.begin(), s.pixels.end());
    out.insert(out.end(), s.labels.begin(), s.labels.end());
  }
  put_u32(out, crc_of(out));
  return out;
}

Dataset read_container(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < kHeaderBytes + 4) throw FormatError("dataset header truncated", bytes.size());
  if (!std::equal(kMagic.begin(), kMagic.end(), bytes.begin())) throw FormatError("not an LDPD dataset", 0);
  const std::uint32_t version = get_le(bytes, 4, 2);
  if (version != kVersion) throw FormatError("unsupported dataset version " + std::to_string(version), 4);
  Dataset d;
  d.height = static_cast<std::uint16_t>(get_le(bytes, 6, 2));
  d.width = static_cast<std::uint16_t>(get_le(bytes, 8, 2));
  const std::size_t count = get_le(bytes, 10, 4);
  d.max_objects = bytes[14];
  const std::size_t m = d.pixels();
  const std::size_t expected = kHeaderBytes + count * 2 * m + 4;
  if (bytes.size() != expected)
    throw FormatError("dataset declares " + std::to_string(count) + " samples but holds " +
                          std::to_string(bytes.size()) + " bytes, expected " + std::to_string(expected),
                      std::min(bytes.size(), expected));
  const std::size_t body = bytes.size() - 4;
  if (crc_of(bytes.first(body)) != get_le(bytes, body, 4)) throw FormatError("dataset checksum mismatch", body);
  d.samples.resize(count);
  std::size_t pos = kHeaderBytes;
  for (auto& s : d.samples) {
    s.pixels.assign(bytes.begin() + static_cast<long>(pos), bytes.begin() + static_cast<long>(pos + m));
    pos += m;
    s.labels.assign(bytes.begin() + static_cast<long>(pos), bytes.begin() + static_cast<long>(pos + m));
    pos += m;
  }
  try {
    d.validate();
  } catch (const ContractError& e) {
    throw FormatError(e.what(), kHeaderBytes);
  }
  return d;
}

void save_dataset(const Dataset& d, const std::filesystem::path& path) { write_file_bytes(path, write_container(d)); }

Dataset load_dataset(const std::filesystem::path& path) { return read_container(read_file_bytes(path)); }

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (in.bad()) throw IoError("read failed: " + path.string());
  return bytes;
}

void write_file_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed: " + path.string());
}

}  // namespace ldp
