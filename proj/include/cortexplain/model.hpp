#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "cortexplain/autodiff.hpp"
#include "cortexplain/icomesh.hpp"
#include "cortexplain/sample.hpp"

namespace cx {

inline constexpr int kEncoderDepth = 4;
inline constexpr int kDecoderDepth = 3;
inline constexpr int kStageCount = 4;  // encoder head + three decoder blocks

struct ModelConfig {
  int input_level = 5;
  int input_channels = kInputChannels;
  std::array<int, kEncoderDepth> encoder_channels{32, 64, 128, 256};
  std::array<int, kDecoderDepth> decoder_channels{256, 128, 64};
  int head_channels = 32;
  int n_classes = 2;
  int attention_heads = 1;
  double bn_momentum = 0.9;
  double bn_eps = 1e-5;
  std::uint64_t seed = 1;

  // Three poolings need input_level >= 3.
  void validate() const;
  int encoder_level(int block) const { return input_level - block; }
  int stage_level(int stage) const { return input_level - (kEncoderDepth - 1) + stage; }

  // Input level 3 with every channel count halved.
  static ModelConfig desk();
};

enum class Mode { kTrain, kInference };

enum class Stage { kEncoder = 0, kDecoder1 = 1, kDecoder2 = 2, kDecoder3 = 3 };
const char* stage_name(int stage);

// Named parameters plus non-learnable buffers (batch-norm running stats),
// in a fixed insertion order.
class ModelState {
 public:
  ModelState() = default;
  ModelState(const ModelState& other);
  ModelState& operator=(const ModelState& other);
  ModelState(ModelState&&) = default;
  ModelState& operator=(ModelState&&) = default;

  Parameter& add_parameter(const std::string& name, Tensor init);
  Tensor& add_buffer(const std::string& name, Tensor init);

  Parameter& parameter(const std::string& name);
  const Parameter& parameter(const std::string& name) const;
  Tensor& buffer(const std::string& name);
  const Tensor& buffer(const std::string& name) const;
  bool has_parameter(const std::string& name) const { return param_index_.count(name) != 0; }

  std::vector<Parameter*> parameters();
  std::vector<const Parameter*> parameters() const;
  const std::vector<std::pair<std::string, Tensor>>& buffers() const { return buffers_; }
  std::vector<std::pair<std::string, Tensor>>& buffers() { return buffers_; }
  std::size_t parameter_count() const;
  void zero_grad();

  // Gradients accumulate through read-only model access: a const forward
  // pass still records parameters as gradient leaves.
  Parameter& gradient_sink(const std::string& name) const;

 private:
  std::vector<std::unique_ptr<Parameter>> params_;
  std::map<std::string, std::size_t> param_index_;
  std::vector<std::pair<std::string, Tensor>> buffers_;
};

// Index tables of one mesh level replicated over `copies` stacked meshes.
struct LevelTables {
  int level = 0;
  std::size_t copies = 0;
  std::size_t vertices = 0;  // per copy
  IndexList ring;            // copies*V*7 rows of the same level
  IndexList pool;            // copies*V_coarse*7 rows of this level (level >= 1)
  IndexList parent_first;    // copies*V rows of level - 1
  IndexList parent_second;
  Tensor self_mask;  // (copies*V) x 1: 1 for prefix vertices
  Tensor edge_mask;  // (copies*V) x 1: 1 for edge-midpoint vertices
};
std::shared_ptr<const LevelTables> level_tables(int level, std::size_t copies);

struct HeadOutput {
  Var class_attention;  // A: (B*2V) x 2
  Var score;            // s: B x 2
  Var attention;        // normalized per hemisphere: (B*2V) x 1
};

struct StageOutput {
  int level = 0;
  std::size_t vertices = 0;  // per hemisphere
  Var features;              // (B*2V) x M
  Var class_attention;
  Var score;
  Var attention;
};

struct ForwardResult {
  std::size_t batch = 0;
  Var input;
  std::array<StageOutput, kStageCount> stages;
  Var head_features;   // input level, (B*2V) x head_channels
  Var gated_features;  // head_features gated by the last stage attention
  Var logits;          // B x n_classes
  std::map<std::string, Var> layers;  // eb1..eb4, sa, db1..db3, head
  // Training mode only: batch statistics per normalization layer prefix.
  std::vector<std::pair<std::string, BatchStats>> batch_stats;
};

namespace layers {

// Gathers each vertex's ordered 7-point ring, flattens and applies the
// (7*Cin) x Cout kernel plus bias.
Var hex_conv(const Var& x, const LevelTables& tables, const Var& kernel, const Var& bias);
Var hex_conv(const Var& x, const LevelTables& tables, const Var& kernel);
// Per coarse vertex and channel, max over its 7-point fine footprint.
Var hex_max_pool(const Var& x, const LevelTables& fine_tables);
// Fine vertex = its own coarse row times the self block, or the sum of its
// two parent rows times the edge block; weight is [self; edge] (2*Cin x Cout).
Var transposed_conv(const Var& x, const LevelTables& fine_tables, const Var& weight, const Var& bias);
Var transposed_conv(const Var& x, const LevelTables& fine_tables, const Var& weight);
// Coarse map to the finer level; edge vertices average their two parents.
Var upsample_mean(const Var& x, const LevelTables& fine_tables);
// Scaled dot-product attention over each sample's `tokens` rows, plus the
// residual input. No output projection.
Var self_attention(const Var& x, std::size_t tokens, const Var& wq, const Var& wk, const Var& wv,
                   int heads);
// A = F W, s = GAP(F) W over all 2V rows of a sample, and the per-hemisphere
// min-max normalized mixture sum_i softmax(s)_i A[:, i].
HeadOutput attention_head(const Var& features, const Var& w, std::size_t batch, std::size_t vertices);
// Batch statistics in training mode (reported through `stats`), running
// buffers in inference mode.
Var normalize(const Var& x, const Var& gamma, const Var& beta, const Tensor& running_mean,
              const Tensor& running_var, Mode mode, double eps, BatchStats* stats);

}  // namespace layers

struct ForwardOptions {
  Mode mode = Mode::kTrain;
  // false records parameters as constants, leaving their gradients untouched.
  bool parameter_gradients = true;
  // Records the input as a differentiable leaf, so activations carry
  // gradients even with frozen parameters.
  bool input_gradients = false;
};

// Four encoder blocks, cross-hemisphere self-attention, the encoder
// attention head, three attention-decoding blocks and the attention-gated
// classifier.
class AttentionDecoderNet {
 public:
  explicit AttentionDecoderNet(ModelConfig config);

  const ModelConfig& config() const { return config_; }
  ModelState& state() { return state_; }
  const ModelState& state() const { return state_; }

  // `input` is (2B * V) x C, rows ordered (sample, hemisphere, vertex).
  ForwardResult forward(Tape& tape, const Tensor& input, std::size_t batch,
                        const ForwardOptions& options) const;
  ForwardResult forward(Tape& tape, std::span<const SurfaceSample* const> batch,
                        const ForwardOptions& options) const;

  // Folds a training forward pass's batch statistics into the running
  // buffers: running = momentum * running + (1 - momentum) * batch.
  void commit_batch_stats(const ForwardResult& result);

  // Inference-mode class logits for one sample; safe to call concurrently.
  std::array<double, 2> predict(const SurfaceSample& sample) const;

 private:
  void init_parameters();
  Var param(Tape& tape, const std::string& name, const ForwardOptions& options) const;
  Var conv_block(Tape& tape, const Var& x, const std::string& prefix, const LevelTables& tables,
                 const ForwardOptions& options, ForwardResult& result) const;
  StageOutput decoder_block(Tape& tape, const StageOutput& prev, const Var& skip, int block,
                            std::size_t batch, const ForwardOptions& options,
                            ForwardResult& result) const;

  ModelConfig config_;
  ModelState state_;
};

}  // namespace cx
