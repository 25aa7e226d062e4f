#include "sitsmamba/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <map>

namespace sitsmamba {

namespace {

constexpr char kMagic[8] = {'S', 'I', 'T', 'S', 'M', 'B', '0', '1'};

void put_u64(std::ostream& os, std::uint64_t v) {
  char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
  os.write(b, 8);
}

bool get_u64(std::istream& is, std::uint64_t& v) {
  unsigned char b[8];
  if (!is.read(reinterpret_cast<char*>(b), 8)) return false;
  v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return true;
}

std::uint64_t need_u64(std::istream& is) {
  std::uint64_t v;
  if (!get_u64(is, v)) throw FormatError("checkpoint: truncated entry");
  return v;
}

bool starts_with(const std::string& s, const char* prefix) { return s.rfind(prefix, 0) == 0; }

}  // namespace

void write_checkpoint(const std::filesystem::path& path, const std::vector<CheckpointEntry>& entries) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open " + path.string() + " for writing");
  os.write(kMagic, sizeof(kMagic));
  for (const auto& e : entries) {
    if (numel_of(e.shape) != e.values.size()) throw std::invalid_argument("checkpoint entry " + e.name + ": bad size");
    put_u64(os, e.name.size());
    os.write(e.name.data(), static_cast<std::streamsize>(e.name.size()));
    put_u64(os, e.shape.size());
    for (auto d : e.shape) put_u64(os, d);
    for (float f : e.values) {
      const auto u = std::bit_cast<std::uint32_t>(f);
      char b[4];
      for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((u >> (8 * i)) & 0xFF);
      os.write(b, 4);
    }
  }
  if (!os) throw std::runtime_error("write failed: " + path.string());
}

std::vector<CheckpointEntry> read_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open checkpoint " + path.string());
  char magic[sizeof(kMagic)];
  if (!is.read(magic, sizeof(magic)) || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    throw FormatError("checkpoint: bad magic in " + path.string());
  }
  std::vector<CheckpointEntry> out;
  std::uint64_t name_len;
  while (get_u64(is, name_len)) {
    if (name_len > 4096) throw FormatError("checkpoint: implausible name length");
    CheckpointEntry e;
    e.name.resize(name_len);
    if (!is.read(e.name.data(), static_cast<std::streamsize>(name_len))) throw FormatError("checkpoint: truncated name");
    const auto rank = need_u64(is);
    if (rank > 8) throw FormatError("checkpoint: implausible rank for " + e.name);
    std::uint64_t count = 1;
    for (std::uint64_t i = 0; i < rank; ++i) {
      const auto d = need_u64(is);
      if (d > (std::uint64_t{1} << 32)) throw FormatError("checkpoint: implausible extent for " + e.name);
      e.shape.push_back(d);
      count *= d;
      if (count > (std::uint64_t{1} << 32)) throw FormatError("checkpoint: implausible size for " + e.name);
    }
    e.values.resize(count);
    for (auto& f : e.values) {
      unsigned char b[4];
      if (!is.read(reinterpret_cast<char*>(b), 4)) throw FormatError("checkpoint: truncated payload of " + e.name);
      std::uint32_t u = 0;
      for (int i = 0; i < 4; ++i) u |= static_cast<std::uint32_t>(b[i]) << (8 * i);
      f = std::bit_cast<float>(u);
    }
    out.push_back(std::move(e));
  }
  if (!is.eof() || is.gcount() != 0) throw FormatError("checkpoint: trailing bytes in " + path.string());
  return out;
}

template <typename T>
void save_model(SitsMamba<T>& model, const std::filesystem::path& path) {
  std::vector<CheckpointEntry> entries;
  for (const auto& p : model.parameters()) {
    const auto& v = p.tensor->values();
    entries.push_back({p.name, p.tensor->shape(), std::vector<float>(v.begin(), v.end())});
  }
  write_checkpoint(path, entries);
}

template <typename T>
void load_model(SitsMamba<T>& model, const std::filesystem::path& path) {
  std::map<std::string, CheckpointEntry> by_name;
  for (auto& e : read_checkpoint(path)) {
    const std::string name = e.name;
    if (!by_name.emplace(name, std::move(e)).second) throw FormatError("checkpoint: duplicate entry " + name);
  }
  auto params = model.parameters();
  std::size_t used = 0;
  for (const auto& p : params) {
    auto it = by_name.find(p.name);
    if (it == by_name.end()) {
      if (starts_with(p.name, "rbranch.")) continue;
      throw FormatError("checkpoint: missing entry " + p.name);
    }
    if (it->second.shape != p.tensor->shape()) {
      throw FormatError("checkpoint: " + p.name + " has shape " + to_string(it->second.shape) + ", model expects " +
                        to_string(p.tensor->shape()));
    }
    ++used;
  }
  if (used != by_name.size()) throw FormatError("checkpoint: contains entries this model does not have");
  for (const auto& p : params) {
    auto it = by_name.find(p.name);
    if (it == by_name.end()) continue;
    auto dst = p.tensor->values_mut();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<T>(it->second.values[i]);
  }
}

template void save_model(SitsMamba<float>&, const std::filesystem::path&);
template void save_model(SitsMamba<double>&, const std::filesystem::path&);
template void load_model(SitsMamba<float>&, const std::filesystem::path&);
template void load_model(SitsMamba<double>&, const std::filesystem::path&);

}  // namespace sitsmamba
