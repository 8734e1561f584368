#include "cortexplain/explain.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "cortexplain/data.hpp"
#include "cortexplain/error.hpp"

namespace cx {

namespace {

int level_of(std::size_t vertices) {
  for (int l = 0; l <= kMaxIcoLevel; ++l) {
    if (ico_vertex_count(l) == vertices) return l;
  }
  throw ShapeError("no icosphere level has " + std::to_string(vertices) + " vertices");
}

ExplanationMap split_hemispheres(ExplainMethod method, int level, const std::string& id,
                                 std::span<const double> rows, bool normalize) {
  const std::size_t V = ico_vertex_count(level);
  if (rows.size() != kHemispheres * V) throw ShapeError("explanation map has the wrong length");
  ExplanationMap m;
  m.method = method;
  m.level = level;
  m.subject_id = id;
  for (int h = 0; h < kHemispheres; ++h) {
    const auto part = rows.subspan(static_cast<std::size_t>(h) * V, V);
    m.values[static_cast<std::size_t>(h)] =
        normalize ? normalize_map(part) : std::vector<double>(part.begin(), part.end());
  }
  return m;
}

ForwardResult run_inference(const AttentionDecoderNet& model, Tape& tape, const SurfaceSample& sample,
                            bool input_gradients) {
  const SurfaceSample* one[] = {&sample};
  ForwardOptions opts;
  opts.mode = Mode::kInference;
  opts.parameter_gradients = false;
  opts.input_gradients = input_gradients;
  return model.forward(tape, one, opts);
}

void check_class(int c) {
  if (c != kFullterm && c != kPreterm) throw InvalidArgument("target class must be 0 or 1");
}

}  // namespace

const char* method_name(ExplainMethod m) {
  switch (m) {
    case ExplainMethod::kAttention: return "attention";
    case ExplainMethod::kCam: return "cam";
    case ExplainMethod::kGradCam: return "gradcam";
  }
  return "?";
}

ExplainMethod parse_method(const std::string& name) {
  if (name == "attention") return ExplainMethod::kAttention;
  if (name == "cam") return ExplainMethod::kCam;
  if (name == "gradcam") return ExplainMethod::kGradCam;
  throw InvalidArgument("unknown explanation method '" + name + "' (attention|cam|gradcam)");
}

void ExplanationMap::validate() const {
  const std::size_t V = ico_vertex_count(level);
  for (const auto& v : values) {
    if (v.size() != V) throw ShapeError("explanation map size does not match its level");
    for (double x : v) {
      if (!(x >= 0.0 && x <= 1.0)) throw NumericError("explanation map value outside [0, 1]");
    }
  }
}

std::vector<double> normalize_map(std::span<const double> values) {
  std::vector<double> out(values.size(), 0.5);
  if (values.empty()) return out;
  const auto [lo, hi] = std::minmax_element(values.begin(), values.end());
  const double range = *hi - *lo;
  if (!(range > 1e-12)) return out;
  for (std::size_t i = 0; i < values.size(); ++i) out[i] = std::clamp((values[i] - *lo) / range, 0.0, 1.0);
  return out;
}

int predicted_class(const std::array<double, 2>& logits) { return logits[1] > logits[0] ? 1 : 0; }

ExplanationMap extract_attention(const AttentionDecoderNet& model, const SurfaceSample& sample, int stage) {
  if (stage < 0 || stage >= kStageCount) {
    throw InvalidArgument("stage must lie in [0, " + std::to_string(kStageCount - 1) + "]");
  }
  Tape tape(false);
  const ForwardResult r = run_inference(model, tape, sample, false);
  const auto& st = r.stages[static_cast<std::size_t>(stage)];
  return split_hemispheres(ExplainMethod::kAttention, st.level, sample.subject_id, st.attention.value().values(),
                           false);
}

ExplanationMap cam(const AttentionDecoderNet& model, const SurfaceSample& sample, int target_class) {
  check_class(target_class);
  Tape tape(false);
  const ForwardResult r = run_inference(model, tape, sample, false);
  const Tensor& g = r.gated_features.value();
  const Tensor& w = model.state().parameter("final.cls.weight").value;
  std::vector<double> raw(g.rows());
  for (std::size_t v = 0; v < g.rows(); ++v) {
    double s = 0.0;
    for (std::size_t c = 0; c < g.cols(); ++c) s += g(v, c) * w(c, static_cast<std::size_t>(target_class));
    raw[v] = std::max(s, 0.0);
  }
  return split_hemispheres(ExplainMethod::kCam, model.config().input_level, sample.subject_id, raw, true);
}

std::vector<double> grad_cam_raw(const Var& activation, const Var& logits, int target_class) {
  check_class(target_class);
  Tape& tape = activation.tape();
  if (!tape.recording() || tape.consumed()) {
    throw NumericError("grad_cam: gradient unavailable (graph is frozen)");
  }
  if (logits.rows() != 1) throw ShapeError("grad_cam: expects the logits of one sample");
  Tensor onehot = Tensor::matrix(1, logits.cols());
  onehot[static_cast<std::size_t>(target_class)] = 1.0;
  const Var target = sum(mul(logits, tape.constant(std::move(onehot))), Axis::kAll);
  tape.backward(target);
  if (!activation.has_grad()) throw NumericError("grad_cam: no gradient reaches the chosen layer");
  const Tensor& a = activation.value();
  const Tensor& g = activation.grad();
  const std::size_t R = a.rows(), C = a.cols();
  std::vector<double> w(C, 0.0);
  for (std::size_t v = 0; v < R; ++v) {
    for (std::size_t c = 0; c < C; ++c) w[c] += g(v, c);
  }
  for (auto& x : w) x /= static_cast<double>(R);
  std::vector<double> map(R);
  for (std::size_t v = 0; v < R; ++v) {
    double s = 0.0;
    for (std::size_t c = 0; c < C; ++c) s += w[c] * a(v, c);
    map[v] = std::max(s, 0.0);
  }
  return map;
}

std::vector<double> upsample_map(std::span<const double> values, int from_level, int to_level) {
  if (from_level > to_level) throw InvalidArgument("upsample_map: target level is coarser than the source");
  if (values.size() != ico_vertex_count(from_level)) throw ShapeError("upsample_map: size does not match level");
  std::vector<double> cur(values.begin(), values.end());
  if (from_level == to_level) return cur;
  const auto pyramid = shared_pyramid(to_level);
  for (int l = from_level + 1; l <= to_level; ++l) {
    const auto parents = pyramid->at(l).unpool_map();
    std::vector<double> next(parents.size());
    for (std::size_t v = 0; v < parents.size(); ++v) next[v] = 0.5 * (cur[parents[v][0]] + cur[parents[v][1]]);
    cur = std::move(next);
  }
  return cur;
}

ExplanationMap grad_cam(const AttentionDecoderNet& model, const SurfaceSample& sample, int target_class,
                        const std::string& layer) {
  Tape tape(true);
  const ForwardResult r = run_inference(model, tape, sample, true);
  const auto it = r.layers.find(layer);
  if (it == r.layers.end()) throw InvalidArgument("grad_cam: unknown layer '" + layer + "'");
  const std::vector<double> raw = grad_cam_raw(it->second, r.logits, target_class);
  const std::size_t V = raw.size() / kHemispheres;
  const int from = level_of(V);
  const int to = model.config().input_level;
  ExplanationMap m;
  m.method = ExplainMethod::kGradCam;
  m.level = to;
  m.subject_id = sample.subject_id;
  for (int h = 0; h < kHemispheres; ++h) {
    const auto part = std::span<const double>(raw).subspan(static_cast<std::size_t>(h) * V, V);
    m.values[static_cast<std::size_t>(h)] = normalize_map(upsample_map(part, from, to));
  }
  return m;
}

ExplanationMap explain(const AttentionDecoderNet& model, const SurfaceSample& sample, ExplainMethod method,
                       int target_class, const std::string& gradcam_layer) {
  if (method == ExplainMethod::kAttention) return extract_attention(model, sample, kStageCount - 1);
  if (target_class < 0) target_class = predicted_class(model.predict(sample));
  if (method == ExplainMethod::kCam) return cam(model, sample, target_class);
  return grad_cam(model, sample, target_class, gradcam_layer);
}

ExplanationMap random_map(int level, const std::string& subject_id, Rng& rng) {
  ExplanationMap m;
  m.level = level;
  m.subject_id = subject_id;
  const std::size_t V = ico_vertex_count(level);
  for (auto& hemi : m.values) {
    std::vector<double> raw(V);
    for (auto& x : raw) x = rng.uniform();
    hemi = normalize_map(raw);
  }
  return m;
}

void export_map_icof(const std::filesystem::path& dir, const ExplanationMap& map) {
  std::filesystem::create_directories(dir);
  static const char* kSuffix[] = {"lh", "rh"};
  for (int h = 0; h < kHemispheres; ++h) {
    const auto& v = map.values[static_cast<std::size_t>(h)];
    Tensor t(Shape{v.size(), 1}, v);
    write_icof(dir / (map.subject_id + "_" + method_name(map.method) + "_" + kSuffix[h] + ".icof"), map.level, t);
  }
}

void export_map_ply(const std::filesystem::path& path, const ExplanationMap& map, int hemisphere) {
  if (hemisphere < 0 || hemisphere >= kHemispheres) throw InvalidArgument("hemisphere must be 0 or 1");
  const auto pyramid = shared_pyramid(map.level);
  const IcoMesh& mesh = pyramid->at(map.level);
  const auto& values = map.values[static_cast<std::size_t>(hemisphere)];
  if (values.size() != mesh.size()) throw ShapeError("export_map_ply: map does not match its level");
  std::ofstream out(path);
  if (!out) throw IoError("cannot open for writing: " + path.string());
  out << "ply\nformat ascii 1.0\ncomment " << map.subject_id << ' ' << method_name(map.method) << '\n'
      << "element vertex " << mesh.size() << "\nproperty float x\nproperty float y\nproperty float z\n"
      << "property uchar red\nproperty uchar green\nproperty uchar blue\n"
      << "element face " << mesh.faces().size() << "\nproperty list uchar int vertex_indices\nend_header\n";
  const auto pos = mesh.positions();
  for (std::size_t v = 0; v < mesh.size(); ++v) {
    const double t = std::clamp(values[v], 0.0, 1.0);
    // blue (0) -> white (0.5) -> red (1)
    const double r = t < 0.5 ? 2.0 * t : 1.0;
    const double g = t < 0.5 ? 2.0 * t : 2.0 * (1.0 - t);
    const double b = t < 0.5 ? 1.0 : 2.0 * (1.0 - t);
    out << static_cast<float>(pos[v][0]) << ' ' << static_cast<float>(pos[v][1]) << ' '
        << static_cast<float>(pos[v][2]) << ' ' << std::lround(255.0 * r) << ' ' << std::lround(255.0 * g) << ' '
        << std::lround(255.0 * b) << '\n';
  }
  for (const auto& f : mesh.faces()) out << "3 " << f[0] << ' ' << f[1] << ' ' << f[2] << '\n';
  if (!out) throw IoError("failed writing " + path.string());
}

}  // namespace cx
