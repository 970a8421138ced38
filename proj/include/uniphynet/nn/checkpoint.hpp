#pragma once

#include "uniphynet/nn/tensor.hpp"

#include <cstdint>
#include <filesystem>
#include <vector>

namespace uniphynet::nn {

// Flat binary parameter file:
//   "UPN1" | u8 precision (4 or 8 bytes per value) | u32 count
//   per record: u32 name length | name | u32 rank | i64 dims[rank] | values
// All integers and values little-endian.
struct CheckpointRecord {
  std::string name;
  Shape shape;
  std::vector<double> values;
};

template <typename T>
void save_checkpoint(const std::filesystem::path& path, const std::vector<Parameter<T>>& params);

std::vector<CheckpointRecord> read_checkpoint(const std::filesystem::path& path);

// Copies records into same-named parameters; every parameter must be present
// with a matching shape.
template <typename T>
void load_checkpoint(const std::filesystem::path& path, std::vector<Parameter<T>>& params);

}  // namespace uniphynet::nn
