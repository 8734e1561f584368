#include "cortexplain/model.hpp"

#include <cmath>
#include <mutex>

#include "cortexplain/error.hpp"
#include "cortexplain/rng.hpp"

namespace cx {

// ---------------------------------------------------------------------------
// Config

void ModelConfig::validate() const {
  if (input_level < kEncoderDepth - 1 || input_level > kMaxIcoLevel) {
    throw ConfigError("model: input_level must be in [3, 7] for three poolings, got " +
                      std::to_string(input_level));
  }
  if (input_channels <= 0 || head_channels <= 0) throw ConfigError("model: channels must be positive");
  for (int c : encoder_channels) {
    if (c <= 0) throw ConfigError("model: encoder channels must be positive");
  }
  for (int c : decoder_channels) {
    if (c <= 0) throw ConfigError("model: decoder channels must be positive");
  }
  if (n_classes != 2) throw ConfigError("model: only two-class heads are supported");
  if (attention_heads <= 0 || encoder_channels[3] % attention_heads != 0) {
    throw ConfigError("model: attention heads must divide the last encoder width");
  }
  if (bn_momentum < 0.0 || bn_momentum >= 1.0) throw ConfigError("model: bn_momentum must be in [0, 1)");
}

ModelConfig ModelConfig::desk() {
  ModelConfig c;
  c.input_level = 3;
  c.encoder_channels = {16, 32, 64, 128};
  c.decoder_channels = {128, 64, 32};
  c.head_channels = 16;
  return c;
}

const char* stage_name(int stage) {
  switch (stage) {
    case 0: return "encoder";
    case 1: return "db1";
    case 2: return "db2";
    case 3: return "db3";
    default: throw InvalidArgument("invalid stage index " + std::to_string(stage));
  }
}

// ---------------------------------------------------------------------------
// ModelState

ModelState::ModelState(const ModelState& other)
    : param_index_(other.param_index_), buffers_(other.buffers_) {
  for (const auto& p : other.params_) params_.push_back(std::make_unique<Parameter>(*p));
}

ModelState& ModelState::operator=(const ModelState& other) {
  if (this != &other) {
    ModelState copy(other);
    *this = std::move(copy);
  }
  return *this;
}

Parameter& ModelState::add_parameter(const std::string& name, Tensor init) {
  if (param_index_.count(name)) throw InvalidArgument("duplicate parameter " + name);
  param_index_[name] = params_.size();
  params_.push_back(std::make_unique<Parameter>(Parameter{name, std::move(init), {}}));
  return *params_.back();
}

Tensor& ModelState::add_buffer(const std::string& name, Tensor init) {
  for (const auto& b : buffers_) {
    if (b.first == name) throw InvalidArgument("duplicate buffer " + name);
  }
  buffers_.emplace_back(name, std::move(init));
  return buffers_.back().second;
}

Parameter& ModelState::parameter(const std::string& name) { return gradient_sink(name); }

const Parameter& ModelState::parameter(const std::string& name) const { return gradient_sink(name); }

Parameter& ModelState::gradient_sink(const std::string& name) const {
  const auto it = param_index_.find(name);
  if (it == param_index_.end()) throw InvalidArgument("unknown parameter " + name);
  return *params_[it->second];
}

Tensor& ModelState::buffer(const std::string& name) {
  for (auto& b : buffers_) {
    if (b.first == name) return b.second;
  }
  throw InvalidArgument("unknown buffer " + name);
}

const Tensor& ModelState::buffer(const std::string& name) const {
  for (const auto& b : buffers_) {
    if (b.first == name) return b.second;
  }
  throw InvalidArgument("unknown buffer " + name);
}

std::vector<Parameter*> ModelState::parameters() {
  std::vector<Parameter*> out;
  for (auto& p : params_) out.push_back(p.get());
  return out;
}

std::vector<const Parameter*> ModelState::parameters() const {
  std::vector<const Parameter*> out;
  for (const auto& p : params_) out.push_back(p.get());
  return out;
}

std::size_t ModelState::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p->value.size();
  return n;
}

void ModelState::zero_grad() {
  for (auto& p : params_) p->zero_grad();
}

// ---------------------------------------------------------------------------
// Index tables

std::shared_ptr<const LevelTables> level_tables(int level, std::size_t copies) {
  static std::mutex mu;
  static std::map<std::pair<int, std::size_t>, std::shared_ptr<const LevelTables>> cache;
  std::lock_guard lock(mu);
  const auto key = std::make_pair(level, copies);
  if (auto it = cache.find(key); it != cache.end()) return it->second;

  const auto pyramid = shared_pyramid(level);
  const IcoMesh& mesh = pyramid->at(level);
  auto t = std::make_shared<LevelTables>();
  t->level = level;
  t->copies = copies;
  t->vertices = mesh.size();
  const auto V = static_cast<std::uint32_t>(mesh.size());
  const auto ring = mesh.ring_table();
  std::vector<std::uint32_t> rows;
  rows.reserve(copies * ring.size());
  for (std::uint32_t k = 0; k < copies; ++k) {
    for (const auto i : ring) rows.push_back(k * V + i);
  }
  t->ring = make_indices(std::move(rows));
  if (level > 0) {
    const auto Vc = static_cast<std::uint32_t>(mesh.coarse_size());
    std::vector<std::uint32_t> pool;
    pool.reserve(copies * mesh.pool_map().size());
    for (std::uint32_t k = 0; k < copies; ++k) {
      for (const auto i : mesh.pool_map()) pool.push_back(k * V + i);
    }
    t->pool = make_indices(std::move(pool));
    std::vector<std::uint32_t> first, second;
    t->self_mask = Tensor::matrix(copies * V, 1);
    t->edge_mask = Tensor::matrix(copies * V, 1);
    const auto parents = mesh.unpool_map();
    for (std::uint32_t k = 0; k < copies; ++k) {
      for (std::uint32_t v = 0; v < V; ++v) {
        first.push_back(k * Vc + parents[v][0]);
        second.push_back(k * Vc + parents[v][1]);
        const bool prefix = parents[v][0] == parents[v][1];
        t->self_mask[std::size_t{k} * V + v] = prefix ? 1.0 : 0.0;
        t->edge_mask[std::size_t{k} * V + v] = prefix ? 0.0 : 1.0;
      }
    }
    t->parent_first = make_indices(std::move(first));
    t->parent_second = make_indices(std::move(second));
  }
  cache[key] = t;
  return t;
}

// ---------------------------------------------------------------------------
// Layers

namespace layers {

Var hex_conv(const Var& x, const LevelTables& tables, const Var& kernel) {
  const std::size_t n = tables.copies * tables.vertices;
  if (x.rows() != n) {
    throw ShapeError("hex_conv: " + std::to_string(x.rows()) + " feature rows for a mesh of " +
                     std::to_string(n) + " vertices");
  }
  const std::size_t cin = x.cols();
  if (kernel.rows() != kRingSize * cin) {
    throw ShapeError("hex_conv: kernel has " + std::to_string(kernel.rows()) + " rows, expected " +
                     std::to_string(kRingSize * cin));
  }
  const Var rings = reshape(gather_rows(x, tables.ring), n, kRingSize * cin);
  return matmul(rings, kernel);
}

Var hex_conv(const Var& x, const LevelTables& tables, const Var& kernel, const Var& bias) {
  return add_row(hex_conv(x, tables, kernel), bias);
}

Var hex_max_pool(const Var& x, const LevelTables& fine_tables) {
  if (fine_tables.level == 0) throw ShapeError("hex_max_pool: level 0 has no coarser level");
  if (x.rows() != fine_tables.copies * fine_tables.vertices) {
    throw ShapeError("hex_max_pool: feature rows do not match the fine mesh");
  }
  return max_over_groups(x, fine_tables.pool, kRingSize);
}

Var transposed_conv(const Var& x, const LevelTables& fine_tables, const Var& weight) {
  if (fine_tables.level == 0) throw ShapeError("transposed_conv: level 0 has no coarser level");
  const std::size_t coarse = fine_tables.copies * ico_vertex_count(fine_tables.level - 1);
  if (x.rows() != coarse) throw ShapeError("transposed_conv: feature rows do not match the coarse mesh");
  if (weight.rows() != 2 * x.cols()) throw ShapeError("transposed_conv: weight must be (2*Cin) x Cout");
  Tape& tape = x.tape();
  Tensor half_self = fine_tables.self_mask;
  for (auto& v : half_self.values()) v *= 0.5;
  const Var both = add(gather_rows(x, fine_tables.parent_first), gather_rows(x, fine_tables.parent_second));
  const Var self_part = mul_col(both, tape.constant(std::move(half_self)));
  const Var edge_part = mul_col(both, tape.constant(fine_tables.edge_mask));
  return matmul(concat({self_part, edge_part}, 1), weight);
}

Var transposed_conv(const Var& x, const LevelTables& fine_tables, const Var& weight, const Var& bias) {
  return add_row(transposed_conv(x, fine_tables, weight), bias);
}

Var upsample_mean(const Var& x, const LevelTables& fine_tables) {
  if (fine_tables.level == 0) throw ShapeError("upsample_mean: level 0 has no coarser level");
  const std::size_t coarse = fine_tables.copies * ico_vertex_count(fine_tables.level - 1);
  if (x.rows() != coarse) throw ShapeError("upsample_mean: rows do not match the coarse mesh");
  return scale(add(gather_rows(x, fine_tables.parent_first), gather_rows(x, fine_tables.parent_second)), 0.5);
}

Var self_attention(const Var& x, std::size_t tokens, const Var& wq, const Var& wk, const Var& wv,
                   int heads) {
  const std::size_t M = x.cols();
  if (tokens == 0 || x.rows() % tokens != 0) throw ShapeError("self_attention: rows not a multiple of tokens");
  if (heads <= 0 || M % static_cast<std::size_t>(heads) != 0) {
    throw ShapeError("self_attention: heads must divide the channel count");
  }
  const std::size_t batch = x.rows() / tokens;
  const std::size_t d = M / static_cast<std::size_t>(heads);
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
  const Var q = matmul(x, wq);
  const Var k = matmul(x, wk);
  const Var v = matmul(x, wv);
  std::vector<Var> samples;
  for (std::size_t b = 0; b < batch; ++b) {
    const Var qb = slice_rows(q, b * tokens, tokens);
    const Var kb = slice_rows(k, b * tokens, tokens);
    const Var vb = slice_rows(v, b * tokens, tokens);
    std::vector<Var> outs;
    for (int h = 0; h < heads; ++h) {
      const std::size_t off = static_cast<std::size_t>(h) * d;
      const Var qh = heads == 1 ? qb : slice_cols(qb, off, d);
      const Var kh = heads == 1 ? kb : slice_cols(kb, off, d);
      const Var vh = heads == 1 ? vb : slice_cols(vb, off, d);
      const Var weights = softmax(scale(matmul(qh, transpose(kh)), inv_sqrt_d), 1);
      outs.push_back(matmul(weights, vh));
    }
    samples.push_back(heads == 1 ? outs[0] : concat(outs, 1));
  }
  const Var attended = batch == 1 ? samples[0] : concat(samples, 0);
  return add(x, attended);
}

HeadOutput attention_head(const Var& features, const Var& w, std::size_t batch, std::size_t vertices) {
  const std::size_t rows_per_sample = kHemispheres * vertices;
  if (features.rows() != batch * rows_per_sample) {
    throw ShapeError("attention_head: feature rows do not match batch x 2 x vertices");
  }
  if (w.rows() != features.cols()) throw ShapeError("attention_head: weight rows differ from channels");
  HeadOutput out;
  out.class_attention = matmul(features, w);
  out.score = matmul(segment_mean(features, rows_per_sample), w);
  const Var mix = softmax(out.score, 1);
  std::vector<std::uint32_t> owner(batch * rows_per_sample);
  for (std::size_t r = 0; r < owner.size(); ++r) owner[r] = static_cast<std::uint32_t>(r / rows_per_sample);
  const Var weights = gather_rows(mix, make_indices(std::move(owner)));
  const Var raw = sum(mul(weights, out.class_attention), Axis::kCols);
  out.attention = minmax_normalize(raw, vertices);
  return out;
}

Var normalize(const Var& x, const Var& gamma, const Var& beta, const Tensor& running_mean,
              const Tensor& running_var, Mode mode, double eps, BatchStats* stats) {
  if (mode == Mode::kTrain) return batch_norm(x, gamma, beta, eps, stats);
  Tape& tape = x.tape();
  const std::size_t C = x.cols();
  if (running_mean.size() != C || running_var.size() != C) {
    throw ShapeError("normalize: running statistics do not match channels");
  }
  Tensor shift = Tensor::matrix(1, C), inv_std = Tensor::matrix(1, C);
  for (std::size_t c = 0; c < C; ++c) {
    shift[c] = -running_mean[c];
    inv_std[c] = 1.0 / std::sqrt(running_var[c] + eps);
  }
  const Var centered = add_row(x, tape.constant(std::move(shift)));
  const Var scaled = mul_row(centered, tape.constant(std::move(inv_std)));
  return add_row(mul_row(scaled, gamma), beta);
}

}  // namespace layers

// ---------------------------------------------------------------------------
// Network

namespace {

Tensor uniform_init(std::uint64_t seed, const std::string& name, std::size_t rows, std::size_t cols,
                    double bound) {
  Rng rng(derive_seed(seed, name));
  Tensor t = Tensor::matrix(rows, cols);
  for (auto& v : t.values()) v = rng.uniform(-bound, bound);
  return t;
}

void check_finite(const Var& v, const std::string& stage) {
  if (!all_finite(v.value())) throw NumericError("forward: non-finite activation in " + stage);
}

}  // namespace

AttentionDecoderNet::AttentionDecoderNet(ModelConfig config) : config_(config) {
  config_.validate();
  init_parameters();
}

void AttentionDecoderNet::init_parameters() {
  const auto& c = config_;
  const auto seed = c.seed;
  // Every conv feeds a normalization layer, which cancels a constant shift,
  // so convs carry no bias. The transposed conv only reaches the next
  // normalization through the (linear) fuse conv, same reasoning.
  auto conv = [&](const std::string& prefix, std::size_t cin, std::size_t cout) {
    const std::size_t fan_in = kRingSize * cin;
    state_.add_parameter(prefix + ".conv.weight",
                         uniform_init(seed, prefix + ".conv.weight", fan_in, cout,
                                      std::sqrt(6.0 / static_cast<double>(fan_in))));
    state_.add_parameter(prefix + ".bn.gamma", Tensor::matrix(1, cout, 1.0));
    state_.add_parameter(prefix + ".bn.beta", Tensor::matrix(1, cout));
    state_.add_buffer(prefix + ".bn.running_mean", Tensor::matrix(1, cout));
    state_.add_buffer(prefix + ".bn.running_var", Tensor::matrix(1, cout, 1.0));
  };
  auto linear = [&](const std::string& name, std::size_t cin, std::size_t cout) {
    state_.add_parameter(name, uniform_init(seed, name, cin, cout, std::sqrt(3.0 / static_cast<double>(cin))));
  };
  const auto& enc = c.encoder_channels;
  const auto& dec = c.decoder_channels;
  const auto nc = static_cast<std::size_t>(c.n_classes);
  for (int b = 0; b < kEncoderDepth; ++b) {
    const int cin = b == 0 ? c.input_channels : enc[static_cast<std::size_t>(b - 1)];
    conv("eb" + std::to_string(b + 1), static_cast<std::size_t>(cin), static_cast<std::size_t>(enc[static_cast<std::size_t>(b)]));
  }
  const auto m0 = static_cast<std::size_t>(enc[3]);
  for (const char* w : {"sa.wq", "sa.wk", "sa.wv"}) {
    Tensor t = uniform_init(seed, w, m0, m0, 0.01);
    for (std::size_t i = 0; i < m0; ++i) t(i, i) += 1.0;
    state_.add_parameter(w, std::move(t));
  }
  linear("head0.weight", m0, nc);
  std::size_t prev = m0;
  for (int k = 0; k < kDecoderDepth; ++k) {
    const std::string p = "db" + std::to_string(k + 1);
    const auto d = static_cast<std::size_t>(dec[static_cast<std::size_t>(k)]);
    const auto skip = static_cast<std::size_t>(enc[static_cast<std::size_t>(2 - k)]);
    linear(p + ".tconv.weight", 2 * prev, d);
    conv(p, d + skip, d);
    linear(p + ".head.weight", d, nc);
    prev = d;
  }
  conv("final", prev, static_cast<std::size_t>(c.head_channels));
  linear("final.cls.weight", static_cast<std::size_t>(c.head_channels), nc);
  state_.add_parameter("final.cls.bias", Tensor::matrix(1, nc));
}

Var AttentionDecoderNet::param(Tape& tape, const std::string& name, const ForwardOptions& options) const {
  if (options.parameter_gradients && tape.recording()) return tape.parameter(state_.gradient_sink(name));
  return tape.constant(state_.parameter(name).value);
}

Var AttentionDecoderNet::conv_block(Tape& tape, const Var& x, const std::string& prefix,
                                    const LevelTables& tables, const ForwardOptions& options,
                                    ForwardResult& result) const {
  const Var y = layers::hex_conv(x, tables, param(tape, prefix + ".conv.weight", options));
  BatchStats stats;
  const Var n = layers::normalize(y, param(tape, prefix + ".bn.gamma", options),
                                  param(tape, prefix + ".bn.beta", options),
                                  state_.buffer(prefix + ".bn.running_mean"),
                                  state_.buffer(prefix + ".bn.running_var"), options.mode,
                                  config_.bn_eps, &stats);
  if (options.mode == Mode::kTrain) result.batch_stats.emplace_back(prefix + ".bn", std::move(stats));
  return relu(n);
}

StageOutput AttentionDecoderNet::decoder_block(Tape& tape, const StageOutput& prev, const Var& skip,
                                               int block, std::size_t batch,
                                               const ForwardOptions& options,
                                               ForwardResult& result) const {
  const std::string p = "db" + std::to_string(block);
  const int level = prev.level + 1;
  const auto tables = level_tables(level, kHemispheres * batch);
  if (skip.rows() != tables->copies * tables->vertices) {
    throw ShapeError("decoder_block: skip features are not at level " + std::to_string(level));
  }
  const Var gated = mul_col(prev.features, prev.attention);
  const Var up = layers::transposed_conv(gated, *tables, param(tape, p + ".tconv.weight", options));
  const Var fused = conv_block(tape, concat({up, skip}, 1), p, *tables, options, result);
  const HeadOutput head = layers::attention_head(fused, param(tape, p + ".head.weight", options), batch,
                                                 tables->vertices);
  StageOutput out{level, tables->vertices, fused, head.class_attention, head.score, head.attention};
  check_finite(out.features, p);
  check_finite(out.attention, p);
  return out;
}

ForwardResult AttentionDecoderNet::forward(Tape& tape, const Tensor& input, std::size_t batch,
                                           const ForwardOptions& options) const {
  const auto& c = config_;
  const std::size_t copies = kHemispheres * batch;
  const int L = c.input_level;
  const auto t0 = level_tables(L, copies);
  if (batch == 0 || input.rows() != copies * t0->vertices ||
      input.cols() != static_cast<std::size_t>(c.input_channels)) {
    throw ShapeError("forward: input " + shape_string(input.shape()) + " does not match batch " +
                     std::to_string(batch) + " at level " + std::to_string(L));
  }
  ForwardResult r;
  r.batch = batch;
  Var x = options.input_gradients ? tape.variable(input) : tape.constant(input);
  r.input = x;
  std::array<Var, kEncoderDepth> enc;
  for (int b = 0; b < kEncoderDepth; ++b) {
    const auto tables = level_tables(L - b, copies);
    if (b > 0) x = layers::hex_max_pool(x, *level_tables(L - b + 1, copies));
    enc[static_cast<std::size_t>(b)] =
        conv_block(tape, x, "eb" + std::to_string(b + 1), *tables, options, r);
    x = enc[static_cast<std::size_t>(b)];
    check_finite(x, "eb" + std::to_string(b + 1));
    r.layers["eb" + std::to_string(b + 1)] = x;
  }
  const auto coarse = level_tables(L - 3, copies);
  const Var sa = layers::self_attention(enc[3], kHemispheres * coarse->vertices, param(tape, "sa.wq", options),
                                        param(tape, "sa.wk", options), param(tape, "sa.wv", options),
                                        c.attention_heads);
  check_finite(sa, "self-attention");
  r.layers["sa"] = sa;
  const HeadOutput h0 = layers::attention_head(sa, param(tape, "head0.weight", options), batch, coarse->vertices);
  r.stages[0] = {L - 3, coarse->vertices, sa, h0.class_attention, h0.score, h0.attention};
  check_finite(h0.attention, "encoder attention");
  for (int k = 1; k <= kDecoderDepth; ++k) {
    r.stages[static_cast<std::size_t>(k)] =
        decoder_block(tape, r.stages[static_cast<std::size_t>(k - 1)], enc[static_cast<std::size_t>(3 - k)],
                      k, batch, options, r);
    r.layers["db" + std::to_string(k)] = r.stages[static_cast<std::size_t>(k)].features;
  }
  const StageOutput& last = r.stages[3];
  r.head_features = conv_block(tape, last.features, "final", *t0, options, r);
  r.layers["head"] = r.head_features;
  r.gated_features = mul_col(r.head_features, last.attention);
  const Var pooled = segment_mean(r.gated_features, kHemispheres * t0->vertices);
  r.logits = add_row(matmul(pooled, param(tape, "final.cls.weight", options)),
                     param(tape, "final.cls.bias", options));
  check_finite(r.logits, "classifier");
  return r;
}

ForwardResult AttentionDecoderNet::forward(Tape& tape, std::span<const SurfaceSample* const> batch,
                                           const ForwardOptions& options) const {
  for (const auto* s : batch) {
    if (s->level != config_.input_level) {
      throw ShapeError("forward: sample " + s->subject_id + " is at level " + std::to_string(s->level) +
                       ", model expects " + std::to_string(config_.input_level));
    }
  }
  return forward(tape, stack_features(batch), batch.size(), options);
}

void AttentionDecoderNet::commit_batch_stats(const ForwardResult& result) {
  const double m = config_.bn_momentum;
  for (const auto& [prefix, stats] : result.batch_stats) {
    Tensor& rm = state_.buffer(prefix + ".running_mean");
    Tensor& rv = state_.buffer(prefix + ".running_var");
    for (std::size_t c = 0; c < rm.size(); ++c) {
      rm[c] = m * rm[c] + (1.0 - m) * stats.mean[c];
      rv[c] = m * rv[c] + (1.0 - m) * stats.var[c];
    }
  }
}

std::array<double, 2> AttentionDecoderNet::predict(const SurfaceSample& sample) const {
  Tape tape(false);
  const SurfaceSample* one[] = {&sample};
  const ForwardResult r = forward(tape, one, {Mode::kInference, false});
  return {r.logits.value()[0], r.logits.value()[1]};
}

}  // namespace cx
