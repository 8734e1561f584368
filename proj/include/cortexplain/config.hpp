#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "cortexplain/data.hpp"
#include "cortexplain/losses.hpp"
#include "cortexplain/model.hpp"
#include "cortexplain/optim.hpp"
#include "json.hpp"

namespace cx {

struct TrainConfig {
  int epochs = 100;
  int batch_size = 20;
  // Randomized coarsening from the stored high-resolution surfaces.
  bool augment = true;
  // Draws per class per epoch; 0 = size of the larger class.
  std::size_t per_class = 0;
  CoarsenOptions coarsen{};
  AdamConfig adam{};
  std::uint64_t seed = 1;
  // Steps between checkpoints (0 = end of each epoch only).
  std::size_t checkpoint_every = 0;
  // Stop after this many optimizer steps in total (0 = no limit).
  std::size_t max_steps = 0;
  int threads = 1;
  std::string precision = "f64";

  void validate() const;
};

struct PathConfig {
  std::string data_dir = "data";
  // Empty: <data_dir>/manifest.jsonl.
  std::string manifest;
  std::string out_dir = "run";

  std::filesystem::path manifest_path() const;
};

// Every field has a default; the defaults train the desk-scale model.
struct RunConfig {
  SynthConfig synth{};
  ModelConfig model = ModelConfig::desk();
  LossConfig loss{};
  TrainConfig train{};
  PathConfig paths{};

  void validate() const;

  nlohmann::ordered_json to_json() const;
  // Missing keys keep their defaults; unknown keys are rejected.
  static RunConfig from_json(const nlohmann::json& j);
  static RunConfig load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;
};

}  // namespace cx
