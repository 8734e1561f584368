// cortexplain: synthesize cohorts, train, evaluate and explain attention
// decoders on icosphere surfaces.

#include <iostream>
#include <optional>

#include "CLI11.hpp"
#include "cortexplain/commands.hpp"
#include "cortexplain/error.hpp"

namespace {

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::optional<int> threads;
  std::string precision;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config, "JSON run configuration (defaults for missing keys)");
  cmd->add_option("--seed", c.seed, "Seed override");
  cmd->add_option("--out", c.out, "Output directory");
  cmd->add_option("--threads", c.threads, "Worker threads for evaluation")->check(CLI::PositiveNumber);
  cmd->add_option("--precision", c.precision, "f32 or f64 (arithmetic always runs in f64)")
      ->check(CLI::IsMember({"f32", "f64"}));
}

cx::RunConfig resolve(const Common& c) {
  cx::RunConfig cfg = c.config.empty() ? cx::RunConfig{} : cx::RunConfig::load(c.config);
  if (c.seed) {
    cfg.synth.seed = *c.seed;
    cfg.model.seed = *c.seed;
    cfg.train.seed = *c.seed;
  }
  if (c.threads) cfg.train.threads = *c.threads;
  if (!c.precision.empty()) cfg.train.precision = c.precision;
  cfg.validate();
  return cfg;
}

std::string out_or(const Common& c, const std::string& fallback) { return c.out.empty() ? fallback : c.out; }

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Attention-decoder networks on icosphere cortical surfaces"};
  app.require_subcommand(1);

  Common synth_c, train_c, eval_c, explain_c, metrics_c, grad_c, ablate_c;
  auto* synth = app.add_subcommand("synth", "Generate a synthetic cohort with lesion masks");
  add_common(synth, synth_c);

  auto* train = app.add_subcommand("train", "Train a model; writes checkpoint, log and test metrics");
  add_common(train, train_c);
  bool resume = false;
  std::optional<int> epochs;
  std::optional<std::size_t> max_steps;
  std::string manifest;
  train->add_flag("--resume", resume, "Continue from <out>/checkpoint.nexc");
  train->add_option("--epochs", epochs, "Override train.epochs")->check(CLI::PositiveNumber);
  train->add_option("--max-steps", max_steps, "Stop after this many optimizer steps");
  train->add_option("--manifest", manifest, "Override paths.manifest");

  auto* eval = app.add_subcommand("eval", "ACC, AUC, SEN and SPE of a checkpoint");
  add_common(eval, eval_c);
  std::string eval_ckpt, eval_split = "test";
  eval->add_option("--checkpoint", eval_ckpt, "Checkpoint file")->required();
  eval->add_option("--split", eval_split, "train or test");
  eval->add_option("--manifest", manifest, "Override paths.manifest");

  auto* explain = app.add_subcommand("explain", "Export explanation maps");
  add_common(explain, explain_c);
  std::string explain_ckpt;
  cx::ExplainOptions xopt;
  explain->add_option("--checkpoint", explain_ckpt, "Checkpoint file")->required();
  explain->add_option("--method", xopt.method, "attention, cam or gradcam")
      ->check(CLI::IsMember({"attention", "cam", "gradcam"}));
  explain->add_option("--tau", xopt.tau, "Threshold for the summary statistics");
  explain->add_option("--class", xopt.target_class, "Target class for cam/gradcam (-1 = predicted)");
  explain->add_option("--layer", xopt.gradcam_layer, "Grad-CAM layer");
  explain->add_option("--split", xopt.split, "train or test");
  explain->add_option("--max-subjects", xopt.max_subjects, "Limit the number of subjects");
  explain->add_flag("--ply", xopt.ply, "Also write colored PLY meshes");
  explain->add_option("--manifest", manifest, "Override paths.manifest");

  auto* metrics = app.add_subcommand("metrics", "Fidelity, sparsity, stability and mask overlap");
  add_common(metrics, metrics_c);
  std::string metrics_ckpt;
  cx::MetricsCommandOptions mopt;
  metrics->add_option("--checkpoint", metrics_ckpt, "Checkpoint file")->required();
  metrics->add_option("--methods", mopt.methods, "Any of attention, cam, gradcam, random")->delimiter(',');
  metrics->add_option("--tau", mopt.metric.tau, "Threshold");
  metrics->add_option("--k", mopt.metric.stability_k, "Stability perturbations")->check(CLI::Range(2, 1000000));
  metrics->add_option("--layer", mopt.gradcam_layer, "Grad-CAM layer");
  metrics->add_option("--split", mopt.split, "train or test");
  metrics->add_option("--max-subjects", mopt.max_subjects, "Limit the number of subjects");
  metrics->add_option("--manifest", manifest, "Override paths.manifest");

  auto* grad = app.add_subcommand("gradcheck", "Finite-difference check of every layer and loss");
  add_common(grad, grad_c);
  cx::GradCheckOptions gopt;
  grad->add_option("--step", gopt.step, "Central difference step");
  grad->add_option("--tolerance", gopt.tolerance, "Maximum relative error");

  auto* ablate = app.add_subcommand("ablate", "Train the full model and the three single-term ablations");
  add_common(ablate, ablate_c);
  ablate->add_option("--epochs", epochs, "Override train.epochs")->check(CLI::PositiveNumber);
  ablate->add_option("--max-steps", max_steps, "Stop each run after this many steps");
  ablate->add_option("--manifest", manifest, "Override paths.manifest");

  CLI11_PARSE(app, argc, argv);

  try {
    auto with_overrides = [&](const Common& c) {
      cx::RunConfig cfg = resolve(c);
      if (!manifest.empty()) cfg.paths.manifest = manifest;
      if (epochs) cfg.train.epochs = *epochs;
      if (max_steps) cfg.train.max_steps = *max_steps;
      cfg.validate();
      return cfg;
    };
    if (*synth) {
      const cx::RunConfig cfg = with_overrides(synth_c);
      cx::cmd_synth(cfg, out_or(synth_c, cfg.paths.data_dir), std::cout);
    } else if (*train) {
      const cx::RunConfig cfg = with_overrides(train_c);
      cx::cmd_train(cfg, out_or(train_c, cfg.paths.out_dir), resume, std::cout);
    } else if (*eval) {
      const cx::RunConfig cfg = with_overrides(eval_c);
      cx::cmd_eval(cfg, eval_ckpt, eval_split, std::cout);
    } else if (*explain) {
      const cx::RunConfig cfg = with_overrides(explain_c);
      cx::cmd_explain(cfg, explain_ckpt, xopt, out_or(explain_c, cfg.paths.out_dir + "/maps"), std::cout);
    } else if (*metrics) {
      const cx::RunConfig cfg = with_overrides(metrics_c);
      if (metrics_c.seed) mopt.metric.seed = *metrics_c.seed;
      cx::cmd_metrics(cfg, metrics_ckpt, mopt, out_or(metrics_c, cfg.paths.out_dir + "/metrics"), std::cout);
    } else if (*grad) {
      return cx::cmd_gradcheck(gopt, std::cout, grad_c.seed.value_or(11)) ? 0 : 1;
    } else if (*ablate) {
      const cx::RunConfig cfg = with_overrides(ablate_c);
      cx::cmd_ablate(cfg, out_or(ablate_c, cfg.paths.out_dir + "/ablation"), std::cout);
    }
  } catch (const cx::Error& e) {
    std::cerr << app.get_subcommands().front()->get_name() << ": " << e.what() << '\n';
    return static_cast<int>(e.kind());
  } catch (const std::exception& e) {
    std::cerr << app.get_subcommands().front()->get_name() << ": " << e.what() << '\n';
    return 1;
  }
  return 0;
}
