#pragma once

// SITSMB01 container: magic, then entries until end of file, each
// u64 name length, name bytes, u64 rank, u64 extents, f32 payload, all
// little-endian.

#include <filesystem>
#include <string>
#include <vector>

#include "sitsmamba/model.hpp"

namespace sitsmamba {

struct CheckpointEntry {
  std::string name;
  Shape shape;
  std::vector<float> values;
};

void write_checkpoint(const std::filesystem::path& path, const std::vector<CheckpointEntry>& entries);
std::vector<CheckpointEntry> read_checkpoint(const std::filesystem::path& path);

template <typename T>
void save_model(SitsMamba<T>& model, const std::filesystem::path& path);

/// Every entry must match a model tensor by name and shape. Entries of
/// the reconstruction branch may be missing; they keep their values.
template <typename T>
void load_model(SitsMamba<T>& model, const std::filesystem::path& path);

}  // namespace sitsmamba
