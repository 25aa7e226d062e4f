#pragma once

// Flat key=value run configuration. One table maps every key onto a field of
// the data, model, loss or training config; files and command-line overrides
// go through the same type-checked setters, and the effective values are
// written back out as a run manifest.

#include <filesystem>
#include <iosfwd>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "sitsmamba/data.hpp"
#include "sitsmamba/model.hpp"
#include "sitsmamba/trainer.hpp"

namespace sitsmamba {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct RunConfig {
  SyntheticConfig data;
  ModelConfig model;
  TrainConfig train;
  std::size_t valid_samples = 50;
  std::size_t test_samples = 50;
  std::size_t eval_batch_size = 8;

  RunConfig();

  /// Sets one key from its text form. Unknown keys and values that do not
  /// parse as the field's type throw ConfigError.
  void set(const std::string& key, const std::string& value);
  std::string get(const std::string& key) const;

  /// "key=value" lines; '#' starts a comment; blank lines ignored.
  void load_file(const std::filesystem::path& path);
  void parse(std::istream& in, const std::string& origin);

  /// Every key in table order, one "key=value" per line.
  void write(std::ostream& out) const;
  void write_manifest(const std::filesystem::path& path, const std::string& command) const;

  bool explicitly_set(const std::string& key) const;
  static const std::vector<std::string>& keys();

  /// Fills defaults that depend on other keys (curve_seed follows seed;
  /// a 20-class task ignores void 19 and averages classes 1-18) and
  /// validates every section. Throws ConfigError.
  void finalize();

 private:
  std::set<std::string> explicit_;
};

/// Parses "1,2,5" (or empty) into a set; throws ConfigError.
std::set<std::size_t> parse_index_set(const std::string& text);

}  // namespace sitsmamba
