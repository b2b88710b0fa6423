#include "dmf/checkpoint.hpp"

#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <unordered_map>

#include "dmf/version.hpp"

namespace dmf {

namespace {

constexpr char kMagic[4] = {'D', 'M', 'F', '1'};

template <typename T>
void put(std::ofstream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(v));   // little-endian host
}

template <typename T>
T take(std::ifstream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(v));
  if (!is) throw CheckpointError("truncated tensor file");
  return v;
}

} // namespace

void write_tensor_file(const std::string& path, const NamedTensors& items) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw CheckpointError("cannot open for writing: " + tmp);
    os.write(kMagic, 4);
    put<std::uint32_t>(os, kCheckpointVersion);
    put<std::uint64_t>(os, items.size());
    for (const auto& [name, t] : items) {
      put<std::uint32_t>(os, std::uint32_t(name.size()));
      os.write(name.data(), std::streamsize(name.size()));
      put<std::uint32_t>(os, std::uint32_t(t.rank()));
      for (std::int64_t d : t.shape) put<std::uint64_t>(os, std::uint64_t(d));
      put<std::uint8_t>(os, 0);   // dtype f32
      os.write(reinterpret_cast<const char*>(t.ptr()),
               std::streamsize(std::size_t(t.numel()) * sizeof(float)));
    }
    if (!os) throw CheckpointError("write failed: " + tmp);
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0)
    throw CheckpointError("cannot move into place: " + path);
}

NamedTensors read_tensor_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointError("cannot open: " + path);
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kMagic, 4) != 0)
    throw CheckpointError("not a tensor file: " + path);
  const auto version = take<std::uint32_t>(is);
  if (version != kCheckpointVersion)
    throw CheckpointVersionError("tensor file version " + std::to_string(version) +
                                 " (expected " + std::to_string(kCheckpointVersion) + "): " + path);
  const auto count = take<std::uint64_t>(is);
  NamedTensors items;
  items.reserve(count);
  for (std::uint64_t i = 0; i < count; ++i) {
    const auto name_len = take<std::uint32_t>(is);
    std::string name(name_len, '\0');
    is.read(name.data(), name_len);
    const auto rank = take<std::uint32_t>(is);
    if (rank > 8) throw CheckpointError("implausible tensor rank in " + path);
    std::vector<std::int64_t> shape(rank);
    for (auto& d : shape) d = std::int64_t(take<std::uint64_t>(is));
    const auto dtype = take<std::uint8_t>(is);
    if (dtype != 0) throw CheckpointError("unsupported dtype in " + path);
    Tensor<float> t(shape);
    is.read(reinterpret_cast<char*>(t.ptr()),
            std::streamsize(std::size_t(t.numel()) * sizeof(float)));
    if (!is) throw CheckpointError("truncated tensor file: " + path);
    items.emplace_back(std::move(name), std::move(t));
  }
  return items;
}

void save_checkpoint(const std::string& path, const ParamStore& store) {
  NamedTensors items;
  items.reserve(store.size() * 2);
  for (std::size_t i = 0; i < store.size(); ++i)
    items.emplace_back(store.at(i).path, store.at(i).value);
  for (std::size_t i = 0; i < store.size(); ++i)
    items.emplace_back("ema/" + store.at(i).path, store.at(i).ema);
  write_tensor_file(path, items);
}

void load_checkpoint(const std::string& path, ParamStore& store) {
  NamedTensors items = read_tensor_file(path);
  std::unordered_map<std::string, const Tensor<float>*> by_name;
  for (const auto& [name, t] : items) by_name[name] = &t;
  for (std::size_t i = 0; i < store.size(); ++i) {
    ParamStore::Entry& e = store.at(i);
    auto it = by_name.find(e.path);
    if (it == by_name.end()) throw CheckpointError("checkpoint missing param: " + e.path);
    if (it->second->shape != e.value.shape)
      throw CheckpointError("checkpoint shape mismatch for " + e.path + ": got " +
                            shape_str(it->second->shape) + ", want " + shape_str(e.value.shape));
    std::copy(it->second->ptr(), it->second->ptr() + e.value.numel(), e.value.ptr());
    auto eit = by_name.find("ema/" + e.path);
    const Tensor<float>* src = (eit != by_name.end()) ? eit->second : it->second;
    if (src->shape != e.value.shape)
      throw CheckpointError("checkpoint EMA shape mismatch for " + e.path);
    std::copy(src->ptr(), src->ptr() + e.value.numel(), e.ema.ptr());
  }
}

} // namespace dmf
