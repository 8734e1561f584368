#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "cortexplain/model.hpp"
#include "cortexplain/optim.hpp"

namespace cx {

// "NEXC", u32 version, u32 count, then per tensor: u32 name length, UTF-8
// name, u32 rank, u32 extents[rank], f32 data. Then a u32 flag; when 1 the
// optimizer section follows: u64 step, f64 lr, beta1, beta2, eps, u32
// count, and the first- and second-moment tensors in the same record
// layout, interleaved per parameter.

struct NamedTensor {
  std::string name;
  Tensor value;
};

struct OptimizerSection {
  AdamConfig config;
  std::uint64_t step = 0;
  std::vector<NamedTensor> m;
  std::vector<NamedTensor> v;
};

struct CheckpointFile {
  std::vector<NamedTensor> tensors;  // parameters, then buffers
  std::optional<OptimizerSection> optimizer;
};

void write_checkpoint(const std::filesystem::path& path, const CheckpointFile& file);
CheckpointFile read_checkpoint(const std::filesystem::path& path);

CheckpointFile snapshot(const ModelState& state, const AdamState* optimizer);
// Every model tensor must be present with a matching shape. Optimizer
// moments are restored when both the file and `optimizer` have them.
void restore(const CheckpointFile& file, ModelState& state, AdamState* optimizer);

void save_checkpoint(const std::filesystem::path& path, const ModelState& state,
                     const AdamState* optimizer = nullptr);
void load_checkpoint(const std::filesystem::path& path, ModelState& state,
                     AdamState* optimizer = nullptr);

}  // namespace cx
