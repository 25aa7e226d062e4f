#pragma once

// Image time series samples, the synthetic phenology generator, temporal
// padding / subsampling, batching and the SITSDS01 container.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "sitsmamba/rng.hpp"

namespace sitsmamba {

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// One patch: series [T, C, H, W] in [0, 1], labels [H, W]. Only the first
/// valid_length frames carry observations.
struct SitsSample {
  std::uint32_t t = 0, c = 0, h = 0, w = 0;
  std::uint32_t valid_length = 0;
  std::vector<float> series;
  std::vector<std::uint16_t> labels;
  std::uint64_t id = 0;

  std::size_t frame_size() const { return std::size_t(c) * h * w; }
  bool operator==(const SitsSample&) const = default;
};

using Dataset = std::vector<SitsSample>;

/// Stacked samples: series [N, T, C, H, W], labels [N, H, W].
struct SitsBatch {
  std::size_t n = 0, t = 0, c = 0, h = 0, w = 0;
  std::vector<float> series;
  std::vector<std::size_t> valid_length;
  std::vector<std::uint16_t> labels;

  /// valid[n * t + i] = 1 when frame i of sample n is an observation.
  std::vector<std::uint8_t> frame_mask() const;
};

enum class TemporalMode { Pad, Sample30 };

TemporalMode parse_temporal_mode(const std::string& s);
std::string to_string(TemporalMode mode);

struct SyntheticConfig {
  std::uint64_t seed = 0;
  std::size_t samples = 100;
  std::size_t classes = 6;
  std::size_t length = 20;  // T
  std::size_t channels = 4;
  std::size_t height = 16;
  std::size_t width = 16;
  double noise = 0.02;
  /// Maximum per-sample shift of the season, as a fraction of it.
  double jitter = 0.02;
  /// Draw valid_length uniformly in [max(4, T/2), T]; shorter series are
  /// zero-padded to T.
  bool variable_length = false;
  std::size_t min_parcels = 4;
  std::size_t max_parcels = 10;
  /// Seed of the class phenology curves. Splits generated with different
  /// `seed` but the same `curve_seed` share one class definition.
  std::uint64_t curve_seed = 0;
};

/// Double-logistic curve v(p) = base + amp (s((p - onset)/rise) - s((p - offset)/fall)),
/// p in [0, 1] the position in the season.
struct Phenology {
  double base, amp, onset, offset, rise, fall;
  double operator()(double p) const;
};

/// classes x channels curves used by generate_synthetic.
std::vector<Phenology> class_curves(const SyntheticConfig& config);

Dataset generate_synthetic(const SyntheticConfig& config);

/// Zero-pads every series to the longest valid length in the group.
SitsBatch pad_batch(const std::vector<const SitsSample*>& samples);

inline constexpr std::size_t kSampledLength = 30;

/// 30 frame indices from [0, valid_length). Evaluation (rng == nullptr):
/// floor(i * valid_length / 30). Training: uniform without replacement,
/// sorted; with replacement when valid_length < 30.
std::vector<std::size_t> sample_indices(std::size_t valid_length, Rng* rng);
SitsSample sample_30(const SitsSample& sample, Rng* rng);

/// Assembles a batch in either temporal mode. `rng` selects random
/// (training) sampling in Sample30 mode; ignored in Pad mode.
SitsBatch make_batch(const Dataset& data, const std::vector<std::size_t>& indices, TemporalMode mode,
                     Rng* rng);

void save_dataset(const Dataset& data, const std::filesystem::path& path);
Dataset load_dataset(const std::filesystem::path& path);

/// Label map as 8-bit binary PGM, class index as gray level.
void write_pgm(const std::filesystem::path& path, const std::vector<std::uint16_t>& labels, std::size_t height,
               std::size_t width);
std::vector<std::uint16_t> read_pgm(const std::filesystem::path& path, std::size_t& height, std::size_t& width);
/// "gray,class" rows; `names` may be empty.
void write_legend(const std::filesystem::path& path, std::size_t classes, const std::vector<std::string>& names);

/// Hook for messages such as with-replacement sampling. Defaults to stderr.
void set_data_log(std::function<void(const std::string&)> sink);

}  // namespace sitsmamba
