#include "cortexplain/config.hpp"

#include <fstream>
#include <set>

#include "cortexplain/error.hpp"

namespace cx {

using nlohmann::json;
using nlohmann::ordered_json;

namespace {

// Reads optional keys of one object and rejects any it was not asked for.
class Section {
 public:
  Section(const json& j, std::string name) : j_(j), name_(std::move(name)) {
    if (!j_.is_object()) throw ConfigError("config: '" + name_ + "' must be an object");
  }

  template <typename T>
  void get(const char* key, T& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const json::exception& e) {
      throw ConfigError("config: " + name_ + "." + key + ": " + e.what());
    }
  }

  const json* child(const char* key) {
    seen_.insert(key);
    return j_.contains(key) ? &j_.at(key) : nullptr;
  }

  void finish() const {
    for (const auto& [k, v] : j_.items()) {
      if (!seen_.count(k)) throw ConfigError("config: unknown key '" + name_ + "." + k + "'");
    }
  }

 private:
  const json& j_;
  std::string name_;
  std::set<std::string> seen_;
};

const char* reduction_name(Reduction r) { return r == Reduction::kSum ? "sum" : "mean"; }
Reduction parse_reduction(const std::string& s) {
  if (s == "sum") return Reduction::kSum;
  if (s == "mean") return Reduction::kMean;
  throw ConfigError("config: reduction must be 'sum' or 'mean', got '" + s + "'");
}

}  // namespace

void TrainConfig::validate() const {
  if (epochs < 1) throw ConfigError("train.epochs must be positive");
  if (batch_size < 1) throw ConfigError("train.batch_size must be positive");
  if (!(coarsen.rho_min > 0.0 && coarsen.rho_min <= coarsen.rho_max && coarsen.rho_max <= 1.0)) {
    throw ConfigError("train: need 0 < rho_min <= rho_max <= 1");
  }
  if (!(adam.lr > 0.0)) throw ConfigError("train.lr must be positive");
  if (threads < 1) throw ConfigError("train.threads must be positive");
  if (precision != "f64" && precision != "f32") throw ConfigError("train.precision must be f32 or f64");
}

std::filesystem::path PathConfig::manifest_path() const {
  return manifest.empty() ? std::filesystem::path(data_dir) / "manifest.jsonl" : std::filesystem::path(manifest);
}

void RunConfig::validate() const {
  synth.validate();
  model.validate();
  loss.validate();
  train.validate();
  if (synth.input_level != model.input_level) {
    throw ConfigError("synth.input_level (" + std::to_string(synth.input_level) + ") differs from model.input_level (" +
                      std::to_string(model.input_level) + ")");
  }
}

ordered_json RunConfig::to_json() const {
  ordered_json j;
  ordered_json lesions = ordered_json::array();
  for (const auto& l : synth.lesions) lesions.push_back({{"hemisphere", l.hemisphere}, {"center", l.center}});
  j["synth"] = {{"n_per_class", synth.n_per_class},
                {"high_level", synth.high_level},
                {"input_level", synth.input_level},
                {"smoothing_passes", synth.smoothing_passes},
                {"lesions", lesions},
                {"radius_deg", synth.radius_deg},
                {"amplitude", synth.amplitude},
                {"jitter_deg", synth.jitter_deg},
                {"train_fraction", synth.train_fraction},
                {"seed", synth.seed}};
  j["model"] = {{"input_level", model.input_level},
                {"input_channels", model.input_channels},
                {"encoder_channels", model.encoder_channels},
                {"decoder_channels", model.decoder_channels},
                {"head_channels", model.head_channels},
                {"n_classes", model.n_classes},
                {"attention_heads", model.attention_heads},
                {"bn_momentum", model.bn_momentum},
                {"bn_eps", model.bn_eps},
                {"seed", model.seed}};
  j["loss"] = {{"lambda_contrast", loss.lambda_contrast},
               {"lambda_entropy", loss.lambda_entropy},
               {"lambda_consistency", loss.lambda_consistency},
               {"margin", loss.margin},
               {"ce_stages", loss.ce_stages},
               {"entropy_sign", loss.entropy_sign == EntropySign::kAsWritten ? "as_written" : "prose_intent"},
               {"normalize_features", loss.normalize_features},
               {"pair_reduction", reduction_name(loss.pair_reduction)},
               {"vertex_reduction", reduction_name(loss.vertex_reduction)},
               {"regularizer_stages", loss.regularizer_stages == RegularizerStages::kFinal ? "final" : "all"}};
  j["train"] = {{"epochs", train.epochs},
                {"batch_size", train.batch_size},
                {"augment", train.augment},
                {"per_class", train.per_class},
                {"rho_min", train.coarsen.rho_min},
                {"rho_max", train.coarsen.rho_max},
                {"lr", train.adam.lr},
                {"beta1", train.adam.beta1},
                {"beta2", train.adam.beta2},
                {"adam_eps", train.adam.eps},
                {"seed", train.seed},
                {"checkpoint_every", train.checkpoint_every},
                {"max_steps", train.max_steps},
                {"threads", train.threads},
                {"precision", train.precision}};
  j["paths"] = {{"data_dir", paths.data_dir}, {"manifest", paths.manifest}, {"out_dir", paths.out_dir}};
  return j;
}

RunConfig RunConfig::from_json(const json& root) {
  RunConfig c;
  Section top(root, "config");
  if (const json* s = top.child("synth")) {
    Section r(*s, "synth");
    r.get("n_per_class", c.synth.n_per_class);
    r.get("high_level", c.synth.high_level);
    r.get("input_level", c.synth.input_level);
    r.get("smoothing_passes", c.synth.smoothing_passes);
    if (const json* ls = r.child("lesions")) {
      if (!ls->is_array()) throw ConfigError("config: synth.lesions must be an array");
      c.synth.lesions.clear();
      for (const auto& l : *ls) {
        Lesion lesion;
        Section e(l, "synth.lesions[]");
        e.get("hemisphere", lesion.hemisphere);
        e.get("center", lesion.center);
        e.finish();
        c.synth.lesions.push_back(lesion);
      }
    }
    r.get("radius_deg", c.synth.radius_deg);
    r.get("amplitude", c.synth.amplitude);
    r.get("jitter_deg", c.synth.jitter_deg);
    r.get("train_fraction", c.synth.train_fraction);
    r.get("seed", c.synth.seed);
    r.finish();
  }
  if (const json* s = top.child("model")) {
    Section r(*s, "model");
    r.get("input_level", c.model.input_level);
    r.get("input_channels", c.model.input_channels);
    r.get("encoder_channels", c.model.encoder_channels);
    r.get("decoder_channels", c.model.decoder_channels);
    r.get("head_channels", c.model.head_channels);
    r.get("n_classes", c.model.n_classes);
    r.get("attention_heads", c.model.attention_heads);
    r.get("bn_momentum", c.model.bn_momentum);
    r.get("bn_eps", c.model.bn_eps);
    r.get("seed", c.model.seed);
    r.finish();
  }
  if (const json* s = top.child("loss")) {
    Section r(*s, "loss");
    r.get("lambda_contrast", c.loss.lambda_contrast);
    r.get("lambda_entropy", c.loss.lambda_entropy);
    r.get("lambda_consistency", c.loss.lambda_consistency);
    r.get("margin", c.loss.margin);
    r.get("ce_stages", c.loss.ce_stages);
    std::string sign = "as_written", pair = "sum", vert = "sum", stages = "final";
    if (c.loss.entropy_sign == EntropySign::kProseIntent) sign = "prose_intent";
    pair = reduction_name(c.loss.pair_reduction);
    vert = reduction_name(c.loss.vertex_reduction);
    r.get("entropy_sign", sign);
    r.get("normalize_features", c.loss.normalize_features);
    r.get("pair_reduction", pair);
    r.get("vertex_reduction", vert);
    r.get("regularizer_stages", stages);
    r.finish();
    if (sign == "as_written") {
      c.loss.entropy_sign = EntropySign::kAsWritten;
    } else if (sign == "prose_intent") {
      c.loss.entropy_sign = EntropySign::kProseIntent;
    } else {
      throw ConfigError("config: loss.entropy_sign must be as_written or prose_intent");
    }
    c.loss.pair_reduction = parse_reduction(pair);
    c.loss.vertex_reduction = parse_reduction(vert);
    if (stages == "final") {
      c.loss.regularizer_stages = RegularizerStages::kFinal;
    } else if (stages == "all") {
      c.loss.regularizer_stages = RegularizerStages::kAll;
    } else {
      throw ConfigError("config: loss.regularizer_stages must be final or all");
    }
  }
  if (const json* s = top.child("train")) {
    Section r(*s, "train");
    r.get("epochs", c.train.epochs);
    r.get("batch_size", c.train.batch_size);
    r.get("augment", c.train.augment);
    r.get("per_class", c.train.per_class);
    r.get("rho_min", c.train.coarsen.rho_min);
    r.get("rho_max", c.train.coarsen.rho_max);
    r.get("lr", c.train.adam.lr);
    r.get("beta1", c.train.adam.beta1);
    r.get("beta2", c.train.adam.beta2);
    r.get("adam_eps", c.train.adam.eps);
    r.get("seed", c.train.seed);
    r.get("checkpoint_every", c.train.checkpoint_every);
    r.get("max_steps", c.train.max_steps);
    r.get("threads", c.train.threads);
    r.get("precision", c.train.precision);
    r.finish();
  }
  if (const json* s = top.child("paths")) {
    Section r(*s, "paths");
    r.get("data_dir", c.paths.data_dir);
    r.get("manifest", c.paths.manifest);
    r.get("out_dir", c.paths.out_dir);
    r.finish();
  }
  top.finish();
  c.validate();
  return c;
}

RunConfig RunConfig::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path.string());
  json j;
  try {
    j = json::parse(in, nullptr, true, /*ignore_comments=*/true);
  } catch (const json::exception& e) {
    throw ConfigError("config " + path.string() + ": " + e.what());
  }
  return from_json(j);
}

void RunConfig::save(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write config " + path.string());
  out << to_json().dump(2) << '\n';
}

}  // namespace cx
