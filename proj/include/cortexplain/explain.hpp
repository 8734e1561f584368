#pragma once

#include <array>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "cortexplain/model.hpp"
#include "cortexplain/rng.hpp"
#include "cortexplain/sample.hpp"

namespace cx {

enum class ExplainMethod { kAttention, kCam, kGradCam };
const char* method_name(ExplainMethod m);
ExplainMethod parse_method(const std::string& name);

// Per-hemisphere vertex maps in [0, 1].
struct ExplanationMap {
  ExplainMethod method = ExplainMethod::kAttention;
  int level = 0;
  std::string subject_id;
  std::array<std::vector<double>, kHemispheres> values;

  std::size_t vertices() const { return values[0].size(); }
  // Throws unless both hemispheres have the level's vertex count and every
  // value lies in [0, 1].
  void validate() const;
};

// Min-max to [0, 1]; ranges <= 1e-12 give all 0.5.
std::vector<double> normalize_map(std::span<const double> values);

// Normalized attention of stage 0 (encoder) .. 3 (last decoder block),
// inference mode.
ExplanationMap extract_attention(const AttentionDecoderNet& model, const SurfaceSample& sample, int stage);

// Per-vertex dot product of the attention-gated head features with the
// classifier column of `target_class`, ReLU, normalized per hemisphere.
ExplanationMap cam(const AttentionDecoderNet& model, const SurfaceSample& sample, int target_class);

// Grad-CAM on a named activation ("eb1".."eb4", "sa", "db1".."db3",
// "head"). Channel weights are the vertex mean of d logit / d activation;
// coarse maps are upsampled to the input level after the ReLU.
ExplanationMap grad_cam(const AttentionDecoderNet& model, const SurfaceSample& sample, int target_class,
                        const std::string& layer = "head");

// Grad-CAM weights and map for one sample from an already recorded graph.
// `activation` is 2V x C. Throws NumericError when the tape is frozen or
// no gradient reaches `activation`.
std::vector<double> grad_cam_raw(const Var& activation, const Var& logits, int target_class);

// Upsamples a per-hemisphere map from `from_level` to `to_level`, averaging
// the two parents of edge vertices at every step.
std::vector<double> upsample_map(std::span<const double> values, int from_level, int to_level);

// Class with the larger logit.
int predicted_class(const std::array<double, 2>& logits);

// Dispatches on `method`; target_class < 0 means the predicted class.
ExplanationMap explain(const AttentionDecoderNet& model, const SurfaceSample& sample, ExplainMethod method,
                       int target_class = -1, const std::string& gradcam_layer = "head");

// Uniform noise map, normalized per hemisphere.
ExplanationMap random_map(int level, const std::string& subject_id, Rng& rng);

// Single-channel ICOF per hemisphere: <dir>/<id>_<method>_lh.icof etc.
void export_map_icof(const std::filesystem::path& dir, const ExplanationMap& map);
// ASCII PLY of the icosphere with per-vertex color from a blue-white-red
// ramp; `hemisphere` selects which map is drawn.
void export_map_ply(const std::filesystem::path& path, const ExplanationMap& map, int hemisphere);

}  // namespace cx
