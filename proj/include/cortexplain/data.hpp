#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cortexplain/icomesh.hpp"
#include "cortexplain/rng.hpp"
#include "cortexplain/sample.hpp"

namespace cx {

// ---------------------------------------------------------------------------
// Feature / mask files
//
// "ICOF", then u32 version, level, n_vertices, n_channels (20-byte header),
// then n_vertices * n_channels little-endian f32 values, vertex-major. A
// mask file is a one-channel ICOF whose values are 0 or 1.

inline constexpr std::size_t kIcofHeaderBytes = 20;

struct IcofFile {
  int level = 0;
  Tensor values;  // V x C
};

void write_icof(const std::filesystem::path& path, int level, const Tensor& values);
IcofFile read_icof(const std::filesystem::path& path);
void write_mask(const std::filesystem::path& path, int level, const VertexMask& mask);
VertexMask read_mask(const std::filesystem::path& path, int expected_level);

// ---------------------------------------------------------------------------
// Manifest: one JSON object per line with subject_id, label, lh, rh,
// lh_mask, rh_mask (null when absent) and split. Paths are relative to the
// manifest's directory.

struct ManifestRecord {
  std::string subject_id;
  int label = kFullterm;
  std::string lh;
  std::string rh;
  std::optional<std::string> lh_mask;
  std::optional<std::string> rh_mask;
  std::string split = "train";
};

struct Manifest {
  std::filesystem::path base_dir;
  std::vector<ManifestRecord> records;

  std::size_t size() const { return records.size(); }
  Manifest filter_split(const std::string& split) const;
  std::size_t count_label(int label) const;
};

Manifest read_manifest(const std::filesystem::path& path);
void write_manifest(const std::filesystem::path& path, const Manifest& manifest);

// Writes <dir>/<id>_lh.icof, <id>_rh.icof and, when present, the mask files.
// Returns a record with paths relative to `dir`.
ManifestRecord save_sample(const SurfaceSample& sample, const std::filesystem::path& dir);
SurfaceSample load_sample(const ManifestRecord& record, const std::filesystem::path& base_dir);
std::vector<SurfaceSample> load_samples(const Manifest& manifest);

// ---------------------------------------------------------------------------
// Synthetic cohort

struct Lesion {
  int hemisphere = 0;
  Vec3 center{0.0, 0.0, 1.0};  // normalized on use
};

struct SynthConfig {
  int n_per_class = 200;
  int high_level = 5;
  int input_level = 3;
  int smoothing_passes = 6;
  std::vector<Lesion> lesions{{0, {0.6, 0.3, 0.74}}, {1, {-0.5, 0.6, 0.62}}};
  double radius_deg = 30.0;
  // Bump height in units of each channel's noise scale. At 3/4 of this
  // height the desk model stops at 0.89 test accuracy.
  std::array<double, kInputChannels> amplitude{-2.0, 1.6, 1.6};
  // Per-subject angular jitter of lesion centers; negative means radius / 2.
  double jitter_deg = -1.0;
  double train_fraction = 0.75;
  std::uint64_t seed = 2024;

  void validate() const;
  double jitter() const { return jitter_deg < 0.0 ? radius_deg / 2.0 : jitter_deg; }
};

// Stored attribute = offset + scale * (smoothed z-scored noise + bump).
inline constexpr std::array<double, kInputChannels> kChannelOffset{2.5, 0.0, 0.0};
inline constexpr std::array<double, kInputChannels> kChannelScale{0.4, 0.15, 1.0};

// One subject at cfg.high_level, seeded by (cfg.seed, subject_id).
SurfaceSample synth_subject(const SynthConfig& cfg, const MeshPyramid& pyramid,
                            const std::string& subject_id, int label);

// Generates the cohort under `out_dir`, assigns stratified splits and
// writes manifest.jsonl. Returns the manifest.
Manifest synth_generate(const SynthConfig& cfg, const std::filesystem::path& out_dir);

// Vertices whose angular distance to `center` is below `radius_deg`.
VertexMask cap_mask(const IcoMesh& mesh, const Vec3& center, double radius_deg);

// ---------------------------------------------------------------------------
// Randomized coarsening

struct CoarsenOptions {
  double rho_min = 0.5;
  double rho_max = 1.0;

  static CoarsenOptions deterministic() { return {1.0, 1.0}; }
};

// Each target vertex averages a uniformly drawn subset (fraction rho per
// vertex, at least one element) of its pooling footprint on the source
// level. Masks are coarsened by majority vote over the full footprint.
SurfaceSample coarsen_random(const SurfaceSample& sample, int target_level, Rng& rng,
                             const CoarsenOptions& options = {});

// ---------------------------------------------------------------------------
// Splits, normalization, augmentation schedule

struct SplitResult {
  Manifest train;
  Manifest test;
};
// Stratified by label: round(n_class * train_fraction) of each class go to
// training. Records in the returned manifests carry their split tag.
SplitResult make_splits(const Manifest& manifest, double train_fraction, std::uint64_t seed);

struct ChannelStats {
  std::vector<double> mean;
  std::vector<double> stddev;
  std::vector<std::string> warnings;
};

// Per-channel statistics over every vertex of both hemispheres of the
// given (training) samples. A zero-variance channel keeps stddev 1 and
// records a warning.
ChannelStats compute_channel_stats(std::span<const SurfaceSample> train);
void apply_normalization(SurfaceSample& sample, const ChannelStats& stats);

struct AugmentedItem {
  std::size_t index = 0;  // into the training set
  std::uint64_t seed = 0;
};

// Per epoch, `per_class` draws from each class (0 = size of the largest
// class), cycling through a shuffled order of that class's subjects, then
// shuffled together.
std::vector<AugmentedItem> balanced_schedule(std::span<const int> labels, std::size_t per_class,
                                             std::uint64_t seed, std::uint64_t epoch);

}  // namespace cx
