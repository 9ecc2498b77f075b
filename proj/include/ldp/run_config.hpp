#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "ldp/em.hpp"
#include "ldp/networks.hpp"
#include "ldp/train.hpp"

namespace ldp {

enum class DatasetKind { Shapes, Mnist };

/// Every tunable of a run as one flat key=value record. `steps`, `alpha` and
/// `size` may be left at 0 ("auto") and are then chosen by dataset kind.
struct RunConfig {
  EmConfig em;
  ArchConfig arch;  ///< image size and method-dependent fields are filled by architecture()
  TrainConfig train;
  /// Latent and background step sizes per pixel; the learnable steps start at
  /// these values divided by the pixel count.
  double latent_step = 0.5;
  double background_step = 0.1;

  DatasetKind dataset = DatasetKind::Shapes;
  std::size_t count = 1000;
  std::size_t validation_count = 0;
  std::size_t test_count = 0;
  std::size_t size = 20;
  std::size_t objects = 2;
  std::size_t unique = 0;
  bool holdout = false;
  std::string idx_images;

  std::uint64_t seed = 0;
  std::size_t workers = 1;

  RunConfig();

  /// Copy with every "auto" value replaced by its dataset default.
  RunConfig resolved() const;
  /// Network shapes implied by the config for images of `size` x `size`.
  ArchConfig architecture() const;
  /// Training options with the shared seed and worker count applied.
  TrainConfig training() const;

  /// Throws ConfigError for unknown keys or malformed values.
  void set(const std::string& key, const std::string& value);
  std::string get(const std::string& key) const;
  void validate() const;

  /// All keys in canonical order, one "key=value" per line.
  std::string to_text() const;
  /// Applies "key=value" lines ('#' starts a comment) on top of `base`.
  static RunConfig from_text(const std::string& text, RunConfig base = RunConfig{});
  static RunConfig from_file(const std::filesystem::path& path, RunConfig base = RunConfig{});

  /// Canonical text of the keys that fix parameter names and shapes.
  std::string architecture_text() const;
};

struct ConfigKey {
  std::string name;
  std::string help;
  bool architecture = false;
};

/// Key table in canonical order.
const std::vector<ConfigKey>& config_keys();

/// Throws ConfigError when a checkpoint written under `stored` cannot serve
/// a run configured as `requested` (different method or network shapes).
void check_compatible(const RunConfig& stored, const RunConfig& requested);

}  // namespace ldp
