#include "cortexplain/commands.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "cortexplain/checkpoint.hpp"
#include "cortexplain/error.hpp"
#include "json.hpp"

namespace cx {

namespace fs = std::filesystem;

namespace {

void warn_precision(const RunConfig& cfg, std::ostream& log) {
  if (cfg.train.precision == "f32") log << "warning: f32 requested; all arithmetic runs in f64\n";
}

std::vector<SurfaceSample> pick_split(const PreparedData& d, const std::string& split, bool high) {
  if (split == "train") return high ? d.train_high : d.train_input;
  if (split == "test") return high ? d.test_high : d.test_input;
  throw InvalidArgument("split must be train or test, got '" + split + "'");
}

nlohmann::ordered_json metrics_json(const ClassificationMetrics& m) {
  return {{"n", m.n}, {"acc", m.accuracy}, {"auc", m.auc}, {"sen", m.sensitivity}, {"spe", m.specificity}};
}

std::string format_metrics(const ClassificationMetrics& m) {
  char buf[160];
  std::snprintf(buf, sizeof buf, "ACC %.4f  AUC %.4f  SEN %.4f  SPE %.4f  (n=%zu)", m.accuracy, m.auc,
                m.sensitivity, m.specificity, m.n);
  return buf;
}

}  // namespace

Manifest cmd_synth(const RunConfig& cfg, const fs::path& out_dir, std::ostream& log) {
  cfg.validate();
  fs::create_directories(out_dir);
  cfg.save(out_dir / "config.json");
  Manifest m = synth_generate(cfg.synth, out_dir);
  log << "synth: " << m.size() << " subjects (" << m.count_label(kPreterm) << " preterm, "
      << m.count_label(kFullterm) << " fullterm) at level " << cfg.synth.high_level << " -> "
      << (out_dir / "manifest.jsonl").string() << '\n';
  return m;
}

AttentionDecoderNet load_model(const RunConfig& cfg, const fs::path& checkpoint) {
  AttentionDecoderNet net(cfg.model);
  load_checkpoint(checkpoint, net.state());
  return net;
}

TrainOutcome cmd_train(const RunConfig& cfg, const fs::path& out_dir, bool resume, std::ostream& log) {
  cfg.validate();
  warn_precision(cfg, log);
  fs::create_directories(out_dir);
  TrainOutcome outcome;
  outcome.checkpoint = out_dir / "checkpoint.nexc";
  const PreparedData data = prepare_data(read_manifest(cfg.paths.manifest_path()), cfg.model.input_level);
  for (const auto& w : data.stats.warnings) log << "warning: " << w << '\n';
  AttentionDecoderNet net(cfg.model);
  AdamState adam;
  adam.config = cfg.train.adam;
  const fs::path log_path = out_dir / "train_log.tsv";
  std::ofstream train_log;
  if (resume) {
    if (!fs::exists(outcome.checkpoint)) throw IoError("resume: no checkpoint at " + outcome.checkpoint.string());
    load_checkpoint(outcome.checkpoint, net.state(), &adam);
    log << "resuming at step " << adam.step << '\n';
    train_log.open(log_path, std::ios::app);
  } else {
    cfg.save(out_dir / "config.json");
    train_log.open(log_path, std::ios::trunc);
    train_log << "# step\tce\tcontrast\tentropy\tconsistency\ttotal\n";
  }
  if (!train_log) throw IoError("cannot write " + log_path.string());

  const std::size_t spe = steps_per_epoch(data, cfg);
  log << "train: " << data.train_input.size() << " subjects, " << data.test_input.size() << " test, " << spe
      << " steps/epoch, " << cfg.train.epochs << " epochs, " << net.state().parameter_count() << " parameters\n";
  TrainHooks hooks;
  hooks.log = &train_log;
  hooks.checkpoint = outcome.checkpoint;
  hooks.on_step = [&](std::size_t step, const BatchLossReport& r) {
    if ((step + 1) % spe == 0) {
      log << "epoch " << (step + 1) / spe << "  step " << step << "  " << format_loss_line(step, r) << '\n'
          << std::flush;
    }
  };
  outcome.summary = train_model(net, adam, data, cfg, hooks);
  save_checkpoint(outcome.checkpoint, net.state(), &adam);
  if (!data.test_input.empty()) {
    outcome.test = evaluate_model(net, data.test_input, cfg.train.threads);
    log << "test: " << format_metrics(outcome.test.metrics) << '\n';
    std::ofstream ev(out_dir / "eval.json");
    ev << metrics_json(outcome.test.metrics).dump(2) << '\n';
  }
  return outcome;
}

EvalResult cmd_eval(const RunConfig& cfg, const fs::path& checkpoint, const std::string& split, std::ostream& log) {
  warn_precision(cfg, log);
  const AttentionDecoderNet net = load_model(cfg, checkpoint);
  const PreparedData data = prepare_data(read_manifest(cfg.paths.manifest_path()), cfg.model.input_level);
  const auto samples = pick_split(data, split, false);
  if (samples.empty()) throw InvalidArgument("split '" + split + "' is empty");
  EvalResult r = evaluate_model(net, samples, cfg.train.threads);
  log << split << ": " << format_metrics(r.metrics) << '\n';
  return r;
}

std::vector<ExplanationMap> explain_all(const AttentionDecoderNet& model, std::span<const SurfaceSample> samples,
                                        const std::string& method, const std::string& layer, std::uint64_t seed,
                                        int threads) {
  std::vector<ExplanationMap> maps(samples.size());
  if (method == "random") {
    for (std::size_t i = 0; i < samples.size(); ++i) {
      Rng rng(derive_seed(seed, samples[i].subject_id));
      maps[i] = random_map(samples[i].level, samples[i].subject_id, rng);
    }
    return maps;
  }
  const ExplainMethod m = parse_method(method);
  parallel_for(samples.size(), threads, [&](std::size_t i) { maps[i] = explain(model, samples[i], m, -1, layer); });
  return maps;
}

std::vector<ExplanationMap> cmd_explain(const RunConfig& cfg, const fs::path& checkpoint, const ExplainOptions& opt,
                                        const fs::path& out_dir, std::ostream& log) {
  check_tau(opt.tau);
  const ExplainMethod method = parse_method(opt.method);
  const AttentionDecoderNet net = load_model(cfg, checkpoint);
  const PreparedData data = prepare_data(read_manifest(cfg.paths.manifest_path()), cfg.model.input_level);
  auto samples = pick_split(data, opt.split, false);
  if (opt.max_subjects > 0 && samples.size() > opt.max_subjects) samples.resize(opt.max_subjects);
  fs::create_directories(out_dir);
  std::vector<ExplanationMap> maps(samples.size());
  parallel_for(samples.size(), cfg.train.threads, [&](std::size_t i) {
    maps[i] = explain(net, samples[i], method, opt.target_class, opt.gradcam_layer);
  });
  nlohmann::ordered_json rows = nlohmann::ordered_json::array();
  for (std::size_t i = 0; i < maps.size(); ++i) {
    export_map_icof(out_dir, maps[i]);
    if (opt.ply) {
      for (int h = 0; h < kHemispheres; ++h) {
        export_map_ply(out_dir / (maps[i].subject_id + "_" + opt.method + (h == 0 ? "_lh.ply" : "_rh.ply")), maps[i], h);
      }
    }
    nlohmann::ordered_json row{{"subject_id", maps[i].subject_id},
                               {"label", samples[i].label},
                               {"sparsity", sparsity(maps[i], opt.tau)}};
    if (samples[i].mask) {
      const Overlap o = gt_overlap(maps[i], *samples[i].mask, opt.tau);
      row["gt_iou"] = o.iou;
      row["gt_dice"] = o.dice;
    }
    rows.push_back(std::move(row));
  }
  std::ofstream summary(out_dir / "summary.json");
  summary << nlohmann::ordered_json{{"method", opt.method}, {"tau", opt.tau}, {"subjects", rows}}.dump(2) << '\n';
  log << "explain: " << maps.size() << " " << opt.method << " maps -> " << out_dir.string() << '\n';
  return maps;
}

std::vector<MetricReport> cmd_metrics(const RunConfig& cfg, const fs::path& checkpoint,
                                      const MetricsCommandOptions& opt, const fs::path& out_dir, std::ostream& log) {
  const AttentionDecoderNet net = load_model(cfg, checkpoint);
  const PreparedData data = prepare_data(read_manifest(cfg.paths.manifest_path()), cfg.model.input_level);
  auto samples = pick_split(data, opt.split, false);
  auto high = pick_split(data, opt.split, true);
  if (opt.max_subjects > 0 && samples.size() > opt.max_subjects) {
    samples.resize(opt.max_subjects);
    high.resize(opt.max_subjects);
  }
  if (samples.empty()) throw InvalidArgument("split '" + opt.split + "' is empty");
  fs::create_directories(out_dir);
  const Predictor predict = model_predictor(net);
  std::vector<MetricReport> reports;
  for (const auto& method : opt.methods) {
    const auto maps = explain_all(net, samples, method, opt.gradcam_layer, opt.metric.seed, cfg.train.threads);
    MetricReport r = evaluate_explanations(predict, samples, maps, data.baseline, opt.metric, high, &data.stats);
    r.method = method;
    write_metric_report(out_dir / ("metrics_" + method + ".json"), r);
    char buf[200];
    std::snprintf(buf, sizeof buf, "%-10s fidelity %+.4f  sparsity %.4f  stability %.4f  gt_iou %s", method.c_str(),
                  r.fidelity, r.sparsity, r.stability.value_or(std::nan("")),
                  r.gt_iou ? std::to_string(*r.gt_iou).c_str() : "n/a");
    log << buf << '\n';
    reports.push_back(std::move(r));
  }
  return reports;
}

bool cmd_gradcheck(const GradCheckOptions& options, std::ostream& log, std::uint64_t suite_seed) {
  const auto results = gradcheck_suite(options, suite_seed);
  bool ok = true;
  for (const auto& r : results) {
    char buf[160];
    std::snprintf(buf, sizeof buf, "%-30s max_rel %.3e  coords %6zu  kinks %3zu  redraws %zu  %s",
                  r.name.c_str(), r.report.max_rel_error, r.report.coords_checked, r.report.kinks, r.redraws,
                  r.report.passed ? "PASS" : "FAIL");
    log << buf << '\n';
    ok = ok && r.report.passed;
  }
  log << (ok ? "gradcheck: all passed" : "gradcheck: FAILED") << " (tolerance " << options.tolerance << ")\n";
  return ok;
}

std::vector<AblationRow> cmd_ablate(const RunConfig& cfg, const fs::path& out_dir, std::ostream& log) {
  std::vector<std::pair<std::string, RunConfig>> variants;
  variants.emplace_back("full", cfg);
  RunConfig c = cfg;
  c.loss.lambda_contrast = 0.0;
  variants.emplace_back("w/o contrast", c);
  c = cfg;
  c.loss.lambda_entropy = 0.0;
  variants.emplace_back("w/o entropy", c);
  c = cfg;
  c.loss.lambda_consistency = 0.0;
  variants.emplace_back("w/o consistency", c);
  std::vector<AblationRow> rows;
  for (const auto& [name, vc] : variants) {
    std::string dir = name;
    for (auto& ch : dir) {
      if (ch == '/' || ch == ' ') ch = '_';
    }
    log << "ablate: " << name << '\n';
    std::ostringstream sink;
    TrainOutcome o = cmd_train(vc, out_dir / dir, false, sink);
    AblationRow row;
    row.variant = name;
    row.metrics = o.test.metrics;
    row.step0_ce = o.summary.reports.empty() ? std::nan("") : o.summary.reports.front().ce;
    rows.push_back(row);
  }
  std::ofstream tsv(out_dir / "ablation.tsv");
  tsv << "variant\tacc\tauc\tsen\tspe\tstep0_ce\n";
  for (const auto& r : rows) {
    tsv << r.variant << '\t' << r.metrics.accuracy << '\t' << r.metrics.auc << '\t' << r.metrics.sensitivity << '\t'
        << r.metrics.specificity << '\t' << std::setprecision(17) << r.step0_ce << std::setprecision(6) << '\n';
  }
  log << format_ablation_table(rows);
  return rows;
}

std::string format_ablation_table(const std::vector<AblationRow>& rows) {
  std::ostringstream s;
  char buf[160];
  std::snprintf(buf, sizeof buf, "%-18s %7s %7s %7s %7s\n", "variant", "ACC", "AUC", "SEN", "SPE");
  s << buf;
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%-18s %7.4f %7.4f %7.4f %7.4f\n", r.variant.c_str(), r.metrics.accuracy,
                  r.metrics.auc, r.metrics.sensitivity, r.metrics.specificity);
    s << buf;
  }
  return s.str();
}

}  // namespace cx
