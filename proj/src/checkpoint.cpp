#include "uniphynet/nn/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <map>

namespace uniphynet::nn {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {
constexpr char kMagic[4] = {'U', 'P', 'N', '1'};

template <typename V>
void put(std::ostream& os, V v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(V));
}

template <typename V>
V get(std::istream& is, const std::filesystem::path& path) {
  V v{};
  if (!is.read(reinterpret_cast<char*>(&v), sizeof(V))) throw ParseError(path.string() + ": truncated checkpoint", 0);
  return v;
}
}  // namespace

template <typename T>
void save_checkpoint(const std::filesystem::path& path, const std::vector<Parameter<T>>& params) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw StateError("cannot write " + path.string());
  os.write(kMagic, 4);
  put<std::uint8_t>(os, sizeof(T));
  put<std::uint32_t>(os, static_cast<std::uint32_t>(params.size()));
  for (const auto& p : params) {
    put<std::uint32_t>(os, static_cast<std::uint32_t>(p.name.size()));
    os.write(p.name.data(), static_cast<std::streamsize>(p.name.size()));
    put<std::uint32_t>(os, static_cast<std::uint32_t>(p.tensor.rank()));
    for (Index d : p.tensor.shape()) put<std::int64_t>(os, d);
    os.write(reinterpret_cast<const char*>(p.tensor.data()), static_cast<std::streamsize>(p.tensor.numel() * sizeof(T)));
  }
  if (!os) throw StateError("write failed: " + path.string());
}

std::vector<CheckpointRecord> read_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw StateError("cannot open " + path.string());
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0) throw ParseError(path.string() + ": not a UPN1 checkpoint", 0);
  const auto width = get<std::uint8_t>(is, path);
  if (width != 4 && width != 8) throw ParseError(path.string() + ": unknown precision", 0);
  const auto count = get<std::uint32_t>(is, path);
  std::vector<CheckpointRecord> out(count);
  for (auto& rec : out) {
    rec.name.resize(get<std::uint32_t>(is, path));
    is.read(rec.name.data(), static_cast<std::streamsize>(rec.name.size()));
    const auto rank = get<std::uint32_t>(is, path);
    for (std::uint32_t d = 0; d < rank; ++d) rec.shape.push_back(get<std::int64_t>(is, path));
    const Index n = numel(rec.shape);
    rec.values.resize(static_cast<std::size_t>(n));
    for (auto& v : rec.values) v = width == 4 ? static_cast<double>(get<float>(is, path)) : get<double>(is, path);
  }
  return out;
}

template <typename T>
void load_checkpoint(const std::filesystem::path& path, std::vector<Parameter<T>>& params) {
  std::map<std::string, CheckpointRecord> by_name;
  for (auto& rec : read_checkpoint(path)) by_name.emplace(rec.name, std::move(rec));
  for (auto& p : params) {
    auto it = by_name.find(p.name);
    if (it == by_name.end()) throw SchemaError("checkpoint lacks parameter " + p.name);
    if (it->second.shape != p.tensor.shape())
      throw ShapeError(p.name + ": checkpoint shape " + shape_string(it->second.shape) + " vs " +
                       shape_string(p.tensor.shape()));
    for (Index i = 0; i < p.tensor.numel(); ++i) p.tensor.value()[i] = static_cast<T>(it->second.values[i]);
  }
}

template void save_checkpoint<float>(const std::filesystem::path&, const std::vector<Parameter<float>>&);
template void save_checkpoint<double>(const std::filesystem::path&, const std::vector<Parameter<double>>&);
template void load_checkpoint<float>(const std::filesystem::path&, std::vector<Parameter<float>>&);
template void load_checkpoint<double>(const std::filesystem::path&, std::vector<Parameter<double>>&);

}  // namespace uniphynet::nn
