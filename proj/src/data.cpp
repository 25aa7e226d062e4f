#include "sitsmamba/data.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iostream>
#include <limits>
#include <numeric>

namespace sitsmamba {

namespace {

std::function<void(const std::string&)>& log_sink() {
  static std::function<void(const std::string&)> sink = [](const std::string& m) { std::cerr << m << '\n'; };
  return sink;
}

double logistic(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// Little-endian primitives, independent of the host byte order.
template <typename U>
void put_le(std::ostream& os, U v) {
  static_assert(std::is_unsigned_v<U>);
  char bytes[sizeof(U)];
  for (std::size_t i = 0; i < sizeof(U); ++i) bytes[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
  os.write(bytes, sizeof(U));
}

template <typename U>
U get_le(std::istream& is) {
  unsigned char bytes[sizeof(U)];
  if (!is.read(reinterpret_cast<char*>(bytes), sizeof(U))) throw FormatError("dataset: truncated file");
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(bytes[i]) << (8 * i);
  return v;
}

constexpr char kMagic[8] = {'S', 'I', 'T', 'S', 'D', 'S', '0', '1'};

}  // namespace

void set_data_log(std::function<void(const std::string&)> sink) { log_sink() = std::move(sink); }

std::vector<std::uint8_t> SitsBatch::frame_mask() const {
  std::vector<std::uint8_t> m(n * t, 0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t k = 0; k < valid_length[i]; ++k) m[i * t + k] = 1;
  }
  return m;
}

TemporalMode parse_temporal_mode(const std::string& s) {
  if (s == "pad") return TemporalMode::Pad;
  if (s == "sample30") return TemporalMode::Sample30;
  throw std::invalid_argument("unknown temporal mode '" + s + "' (pad | sample30)");
}

std::string to_string(TemporalMode mode) { return mode == TemporalMode::Pad ? "pad" : "sample30"; }

double Phenology::operator()(double p) const {
  return base + amp * (logistic((p - onset) / rise) - logistic((p - offset) / fall));
}

std::vector<Phenology> class_curves(const SyntheticConfig& cfg) {
  Rng rng(cfg.curve_seed ^ 0x5eedc0ffeeull);
  std::vector<Phenology> curves;
  curves.reserve(cfg.classes * cfg.channels);
  for (std::size_t k = 0; k < cfg.classes; ++k) {
    // Onsets staggered across classes so every pair differs in timing.
    const double onset = 0.1 + 0.4 * (static_cast<double>(k) + 0.5) / static_cast<double>(cfg.classes);
    const double duration = rng.uniform(0.25, 0.45);
    for (std::size_t c = 0; c < cfg.channels; ++c) {
      Phenology ph;
      ph.base = rng.uniform(0.05, 0.3);
      ph.amp = rng.uniform(0.1, 0.6);
      ph.onset = onset + rng.uniform(-0.03, 0.03);
      ph.offset = ph.onset + duration;
      ph.rise = rng.uniform(0.03, 0.08);
      ph.fall = rng.uniform(0.03, 0.08);
      curves.push_back(ph);
    }
  }
  return curves;
}

Dataset generate_synthetic(const SyntheticConfig& cfg) {
  if (cfg.classes < 2) throw std::invalid_argument("generate_synthetic: need at least 2 classes");
  if (cfg.length < 4) throw std::invalid_argument("generate_synthetic: need at least 4 time steps");
  if (cfg.channels == 0 || cfg.height == 0 || cfg.width == 0) {
    throw std::invalid_argument("generate_synthetic: channels, height and width must be positive");
  }
  if (cfg.classes > std::numeric_limits<std::uint16_t>::max()) {
    throw std::invalid_argument("generate_synthetic: too many classes");
  }
  if (cfg.min_parcels == 0 || cfg.min_parcels > cfg.max_parcels) {
    throw std::invalid_argument("generate_synthetic: need 1 <= min_parcels <= max_parcels");
  }
  if (cfg.noise < 0 || cfg.jitter < 0) throw std::invalid_argument("generate_synthetic: negative noise/jitter");

  const auto curves = class_curves(cfg);
  const std::size_t T = cfg.length, C = cfg.channels, H = cfg.height, W = cfg.width;
  Rng rng(cfg.seed);
  Dataset out;
  out.reserve(cfg.samples);
  for (std::size_t s = 0; s < cfg.samples; ++s) {
    Rng sr(rng.fork());
    SitsSample smp;
    smp.id = s;
    smp.t = static_cast<std::uint32_t>(T);
    smp.c = static_cast<std::uint32_t>(C);
    smp.h = static_cast<std::uint32_t>(H);
    smp.w = static_cast<std::uint32_t>(W);
    smp.valid_length = static_cast<std::uint32_t>(
        cfg.variable_length ? sr.uniform_int(std::max<std::size_t>(4, T / 2), T) : T);

    const std::size_t parcels = sr.uniform_int(cfg.min_parcels, cfg.max_parcels);
    std::vector<double> py(parcels), px(parcels);
    std::vector<std::uint16_t> pclass(parcels);
    for (std::size_t p = 0; p < parcels; ++p) {
      py[p] = sr.uniform(0.0, static_cast<double>(H));
      px[p] = sr.uniform(0.0, static_cast<double>(W));
      pclass[p] = static_cast<std::uint16_t>(sr.uniform_int(0, cfg.classes - 1));
    }
    smp.labels.resize(H * W);
    for (std::size_t i = 0; i < H; ++i) {
      for (std::size_t j = 0; j < W; ++j) {
        std::size_t best = 0;
        double best_d = std::numeric_limits<double>::infinity();
        for (std::size_t p = 0; p < parcels; ++p) {
          const double dy = static_cast<double>(i) + 0.5 - py[p];
          const double dx = static_cast<double>(j) + 0.5 - px[p];
          const double d = dy * dy + dx * dx;
          if (d < best_d) {
            best_d = d;
            best = p;
          }
        }
        smp.labels[i * W + j] = pclass[best];
      }
    }

    const double shift = cfg.jitter > 0 ? sr.uniform(-cfg.jitter, cfg.jitter) : 0.0;
    const std::size_t lv = smp.valid_length;
    smp.series.assign(T * C * H * W, 0.0f);
    for (std::size_t t = 0; t < lv; ++t) {
      const double pos = (lv == 1 ? 0.5 : static_cast<double>(t) / static_cast<double>(lv - 1)) + shift;
      for (std::size_t c = 0; c < C; ++c) {
        for (std::size_t px_i = 0; px_i < H * W; ++px_i) {
          double v = curves[smp.labels[px_i] * C + c](pos);
          if (cfg.noise > 0) v += sr.normal(0.0, cfg.noise);
          smp.series[(t * C + c) * H * W + px_i] = static_cast<float>(std::clamp(v, 0.0, 1.0));
        }
      }
    }
    out.push_back(std::move(smp));
  }
  return out;
}

namespace {

void require_compatible(const SitsSample& a, const SitsSample& b) {
  if (a.c != b.c || a.h != b.h || a.w != b.w) {
    throw std::invalid_argument("batch: samples differ in channels or spatial extent");
  }
}

void check_sample(const SitsSample& s) {
  if (s.valid_length == 0 || s.valid_length > s.t) {
    throw std::invalid_argument("sample " + std::to_string(s.id) + ": valid_length must be in [1, T]");
  }
  if (s.series.size() != std::size_t(s.t) * s.frame_size() || s.labels.size() != std::size_t(s.h) * s.w) {
    throw std::invalid_argument("sample " + std::to_string(s.id) + ": buffer sizes disagree with extents");
  }
}

}  // namespace

SitsBatch pad_batch(const std::vector<const SitsSample*>& samples) {
  if (samples.empty()) throw std::invalid_argument("pad_batch: no samples");
  SitsBatch b;
  const SitsSample& first = *samples.front();
  b.n = samples.size();
  b.c = first.c;
  b.h = first.h;
  b.w = first.w;
  for (const auto* s : samples) {
    check_sample(*s);
    require_compatible(first, *s);
    b.t = std::max<std::size_t>(b.t, s->valid_length);
  }
  const std::size_t frame = first.frame_size();
  b.series.assign(b.n * b.t * frame, 0.0f);
  b.labels.reserve(b.n * b.h * b.w);
  for (std::size_t i = 0; i < b.n; ++i) {
    const SitsSample& s = *samples[i];
    std::copy_n(s.series.begin(), std::size_t(s.valid_length) * frame, b.series.begin() + i * b.t * frame);
    b.valid_length.push_back(s.valid_length);
    b.labels.insert(b.labels.end(), s.labels.begin(), s.labels.end());
  }
  return b;
}

std::vector<std::size_t> sample_indices(std::size_t valid_length, Rng* rng) {
  if (valid_length == 0) throw std::invalid_argument("sample_30: empty series");
  std::vector<std::size_t> idx(kSampledLength);
  if (valid_length < kSampledLength) {
    log_sink()("sample_30: only " + std::to_string(valid_length) + " frames, sampling with replacement");
  }
  if (!rng) {
    for (std::size_t i = 0; i < kSampledLength; ++i) idx[i] = i * valid_length / kSampledLength;
    return idx;
  }
  if (valid_length < kSampledLength) {
    for (auto& v : idx) v = rng->uniform_int(0, valid_length - 1);
  } else {
    std::vector<std::size_t> pool(valid_length);
    std::iota(pool.begin(), pool.end(), std::size_t{0});
    for (std::size_t i = 0; i < kSampledLength; ++i) {
      std::swap(pool[i], pool[rng->uniform_int(i, valid_length - 1)]);
    }
    std::copy_n(pool.begin(), kSampledLength, idx.begin());
  }
  std::sort(idx.begin(), idx.end());
  return idx;
}

SitsSample sample_30(const SitsSample& sample, Rng* rng) {
  check_sample(sample);
  const auto idx = sample_indices(sample.valid_length, rng);
  SitsSample out = sample;
  const std::size_t frame = sample.frame_size();
  out.t = out.valid_length = static_cast<std::uint32_t>(kSampledLength);
  out.series.resize(kSampledLength * frame);
  for (std::size_t i = 0; i < kSampledLength; ++i) {
    std::copy_n(sample.series.begin() + idx[i] * frame, frame, out.series.begin() + i * frame);
  }
  return out;
}

SitsBatch make_batch(const Dataset& data, const std::vector<std::size_t>& indices, TemporalMode mode, Rng* rng) {
  std::vector<const SitsSample*> ptrs;
  std::vector<SitsSample> sampled;
  if (mode == TemporalMode::Sample30) {
    sampled.reserve(indices.size());
    for (auto i : indices) sampled.push_back(sample_30(data.at(i), rng));
    for (const auto& s : sampled) ptrs.push_back(&s);
  } else {
    for (auto i : indices) ptrs.push_back(&data.at(i));
  }
  return pad_batch(ptrs);
}

void save_dataset(const Dataset& data, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open " + path.string() + " for writing");
  if (data.size() > std::numeric_limits<std::uint32_t>::max()) throw std::invalid_argument("dataset too large");
  os.write(kMagic, sizeof(kMagic));
  put_le<std::uint32_t>(os, static_cast<std::uint32_t>(data.size()));
  for (const auto& s : data) {
    check_sample(s);
    for (auto v : {s.t, s.c, s.h, s.w, s.valid_length}) put_le<std::uint32_t>(os, v);
    for (float f : s.series) put_le<std::uint32_t>(os, std::bit_cast<std::uint32_t>(f));
    for (auto l : s.labels) put_le<std::uint16_t>(os, l);
  }
  if (!os) throw std::runtime_error("write failed: " + path.string());
}

Dataset load_dataset(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + path.string());
  char magic[sizeof(kMagic)];
  if (!is.read(magic, sizeof(magic)) || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    throw FormatError("dataset: bad magic in " + path.string());
  }
  const auto count = get_le<std::uint32_t>(is);
  Dataset out;
  for (std::uint32_t k = 0; k < count; ++k) {
    SitsSample s;
    s.id = k;
    s.t = get_le<std::uint32_t>(is);
    s.c = get_le<std::uint32_t>(is);
    s.h = get_le<std::uint32_t>(is);
    s.w = get_le<std::uint32_t>(is);
    s.valid_length = get_le<std::uint32_t>(is);
    if (s.t == 0 || s.c == 0 || s.h == 0 || s.w == 0 || s.valid_length == 0 || s.valid_length > s.t) {
      throw FormatError("dataset: bad extents in sample " + std::to_string(k));
    }
    const unsigned __int128 values = static_cast<unsigned __int128>(s.t) * s.c * s.h * s.w;
    if (values > (std::uint64_t{1} << 34)) throw FormatError("dataset: implausible sample size");
    if (!out.empty() && (s.c != out.front().c || s.h != out.front().h || s.w != out.front().w)) {
      throw FormatError("dataset: sample " + std::to_string(k) + " has different C/H/W than sample 0");
    }
    s.series.resize(static_cast<std::size_t>(values));
    for (auto& f : s.series) f = std::bit_cast<float>(get_le<std::uint32_t>(is));
    s.labels.resize(std::size_t(s.h) * s.w);
    for (auto& l : s.labels) l = get_le<std::uint16_t>(is);
    out.push_back(std::move(s));
  }
  if (is.peek() != std::char_traits<char>::eof()) throw FormatError("dataset: trailing bytes in " + path.string());
  return out;
}

void write_pgm(const std::filesystem::path& path, const std::vector<std::uint16_t>& labels, std::size_t height,
               std::size_t width) {
  if (labels.size() != height * width) throw std::invalid_argument("write_pgm: size mismatch");
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open " + path.string() + " for writing");
  os << "P5\n" << width << ' ' << height << "\n255\n";
  for (auto l : labels) {
    if (l > 255) throw std::invalid_argument("write_pgm: class index above 255");
    os.put(static_cast<char>(l));
  }
}

std::vector<std::uint16_t> read_pgm(const std::filesystem::path& path, std::size_t& height, std::size_t& width) {
  std::ifstream is(path, std::ios::binary);
  std::string magic;
  std::size_t maxval = 0;
  if (!(is >> magic >> width >> height >> maxval) || magic != "P5" || maxval != 255) {
    throw FormatError("pgm: bad header in " + path.string());
  }
  is.get();
  std::vector<std::uint16_t> out(height * width);
  for (auto& v : out) {
    const int ch = is.get();
    if (ch == std::char_traits<char>::eof()) throw FormatError("pgm: truncated " + path.string());
    v = static_cast<std::uint16_t>(ch);
  }
  return out;
}

void write_legend(const std::filesystem::path& path, std::size_t classes, const std::vector<std::string>& names) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot open " + path.string() + " for writing");
  os << "gray,class\n";
  for (std::size_t k = 0; k < classes; ++k) {
    os << k << ',' << (k < names.size() ? names[k] : "class_" + std::to_string(k)) << '\n';
  }
}

}  // namespace sitsmamba
