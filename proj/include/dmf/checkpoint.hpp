#pragma once

#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "dmf/param_store.hpp"
#include "dmf/tensor.hpp"

namespace dmf {

struct CheckpointError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct CheckpointVersionError : CheckpointError {
  using CheckpointError::CheckpointError;
};

// Binary container: magic "DMF1", u32 format version, then records of
// {u32 path length, path bytes, u32 rank, u64 extents, u8 dtype (0=f32), raw LE data}.
using NamedTensors = std::vector<std::pair<std::string, Tensor<float>>>;

void write_tensor_file(const std::string& path, const NamedTensors& items);
NamedTensors read_tensor_file(const std::string& path);

// Model checkpoints store every parameter plus its EMA shadow under "ema/<path>".
// Adam moments are deliberately not persisted.
void save_checkpoint(const std::string& path, const ParamStore& store);

// Restores values (and EMA shadows when present; otherwise EMA := value) into an
// already-constructed store. Shapes must match exactly.
void load_checkpoint(const std::string& path, ParamStore& store);

} // namespace dmf
