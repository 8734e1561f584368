#include <cmath>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <sstream>
#include <string>
#include <vector>

#include "cortexplain/checkpoint.hpp"
#include "cortexplain/commands.hpp"
#include "cortexplain/config.hpp"
#include "cortexplain/error.hpp"
#include "doctest.h"

using namespace cx;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("cx_test_run_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::vector<std::string> lines(const fs::path& p) {
  std::ifstream in(p);
  std::vector<std::string> out;
  for (std::string l; std::getline(in, l);) out.push_back(l);
  return out;
}

RunConfig small_run(const fs::path& data) {
  RunConfig c;
  c.synth.n_per_class = 6;
  c.synth.high_level = 4;
  c.synth.input_level = 3;
  c.model.input_level = 3;
  c.model.encoder_channels = {4, 4, 6, 8};
  c.model.decoder_channels = {8, 6, 4};
  c.model.head_channels = 4;
  c.train.epochs = 2;
  c.train.batch_size = 4;
  c.paths.data_dir = data.string();
  return c;
}

// One shared cohort for every training test in this file.
const fs::path& cohort() {
  static const fs::path dir = [] {
    const fs::path d = scratch("cohort");
    std::ostringstream log;
    cmd_synth(small_run(d), d, log);
    return d;
  }();
  return dir;
}

std::vector<double> column(const std::vector<std::string>& rows, std::size_t col) {
  std::vector<double> out;
  for (const auto& r : rows) {
    if (r.empty() || r[0] == '#') continue;
    std::istringstream in(r);
    std::string cell;
    for (std::size_t k = 0; k <= col; ++k) std::getline(in, cell, '\t');
    out.push_back(std::stod(cell));
  }
  return out;
}

}  // namespace

TEST_CASE("config: JSON round trip, defaults for missing keys, unknown keys rejected") {
  RunConfig c = small_run("somewhere");
  c.loss.lambda_contrast = 0.25;
  c.train.adam.lr = 3e-4;
  const auto j = c.to_json();
  const RunConfig back = RunConfig::from_json(j);
  CHECK(back.to_json().dump() == j.dump());

  const RunConfig empty = RunConfig::from_json(nlohmann::json::object());
  CHECK(empty.to_json().dump() == RunConfig{}.to_json().dump());

  nlohmann::json bad = j;
  bad["train"]["learning_rte"] = 0.1;
  CHECK_THROWS_AS(RunConfig::from_json(bad), ConfigError);
  nlohmann::json top = j;
  top["extra"] = 1;
  CHECK_THROWS_AS(RunConfig::from_json(top), ConfigError);
  nlohmann::json wrong = j;
  wrong["train"]["epochs"] = "many";
  CHECK_THROWS_AS(RunConfig::from_json(wrong), ConfigError);

  const auto dir = scratch("config");
  c.save(dir / "c.json");
  CHECK(RunConfig::load(dir / "c.json").to_json().dump() == j.dump());
  CHECK_THROWS_AS(RunConfig::load(dir / "missing.json"), IoError);

  RunConfig mismatch = c;
  mismatch.synth.input_level = 4;
  CHECK_THROWS_AS(mismatch.validate(), ConfigError);
}

TEST_CASE("checkpoint: byte-identical rewrite and exact f32 restore") {
  const auto dir = scratch("ckpt");
  ModelConfig mc = small_run(dir).model;
  AttentionDecoderNet net(mc);
  AdamState adam;
  // A few moments so the optimizer section is non-trivial.
  for (auto* p : net.state().parameters()) {
    p->grad = Tensor(p->value.shape(), 0.01);
  }
  adam_step(net.state().parameters(), adam);
  adam_step(net.state().parameters(), adam);

  save_checkpoint(dir / "a.nexc", net.state(), &adam);
  const CheckpointFile f = read_checkpoint(dir / "a.nexc");
  write_checkpoint(dir / "b.nexc", f);
  CHECK(slurp(dir / "a.nexc") == slurp(dir / "b.nexc"));
  REQUIRE(f.optimizer.has_value());
  CHECK(f.optimizer->step == 2);

  mc.seed = 99;
  AttentionDecoderNet other(mc);
  AdamState adam2;
  load_checkpoint(dir / "a.nexc", other.state(), &adam2);
  CHECK(adam2.step == 2);
  const auto pa = net.state().parameters();
  const auto pb = other.state().parameters();
  REQUIRE(pa.size() == pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i) {
    for (std::size_t k = 0; k < pa[i]->value.size(); ++k) {
      CHECK(pb[i]->value[k] == static_cast<double>(static_cast<float>(pa[i]->value[k])));
    }
  }
  save_checkpoint(dir / "c.nexc", other.state(), &adam2);
  CHECK(slurp(dir / "a.nexc") == slurp(dir / "c.nexc"));
}

TEST_CASE("checkpoint: corrupt or mismatched files are rejected") {
  const auto dir = scratch("ckpt_bad");
  ModelConfig mc = small_run(dir).model;
  AttentionDecoderNet net(mc);
  save_checkpoint(dir / "a.nexc", net.state());
  std::string bytes = slurp(dir / "a.nexc");

  std::string bad = bytes;
  bad[0] = 'X';
  std::ofstream(dir / "magic.nexc", std::ios::binary) << bad;
  CHECK_THROWS_AS(read_checkpoint(dir / "magic.nexc"), FormatError);
  std::ofstream(dir / "short.nexc", std::ios::binary) << bytes.substr(0, bytes.size() / 2);
  CHECK_THROWS_AS(read_checkpoint(dir / "short.nexc"), FormatError);
  CHECK_THROWS(read_checkpoint(dir / "none.nexc"));

  ModelConfig wider = mc;
  wider.head_channels = 5;
  AttentionDecoderNet w(wider);
  CHECK_THROWS(load_checkpoint(dir / "a.nexc", w.state()));

  CheckpointFile f = read_checkpoint(dir / "a.nexc");
  f.tensors.pop_back();
  CHECK_THROWS(restore(f, net.state(), nullptr));
}

TEST_CASE("training is deterministic and resume continues the same trajectory") {
  const RunConfig base = small_run(cohort());
  std::ostringstream log;

  RunConfig full = base;
  full.train.max_steps = 6;
  const auto d_full = scratch("full");
  const auto d_again = scratch("again");
  cmd_train(full, d_full, false, log);
  cmd_train(full, d_again, false, log);
  const auto a = lines(d_full / "train_log.tsv");
  CHECK(a == lines(d_again / "train_log.tsv"));
  CHECK(slurp(d_full / "checkpoint.nexc") == slurp(d_again / "checkpoint.nexc"));
  REQUIRE(a.size() == 7);
  for (std::size_t i = 1; i < a.size(); ++i) {
    CHECK(a[i].rfind(std::to_string(i - 1) + "\t", 0) == 0);
  }

  RunConfig half = base;
  half.train.max_steps = 3;
  const auto d_split = scratch("split");
  cmd_train(half, d_split, false, log);
  cmd_train(full, d_split, true, log);
  const auto b = lines(d_split / "train_log.tsv");
  REQUIRE(b.size() == a.size());
  // Steps before the interruption match exactly.
  for (std::size_t i = 0; i < 4; ++i) CHECK(a[i] == b[i]);
  // Afterwards the only difference is the f32 rounding of the stored state.
  for (std::size_t col = 1; col <= 5; ++col) {
    const auto x = column(a, col), y = column(b, col);
    for (std::size_t k = 3; k < x.size(); ++k) {
      CHECK(std::abs(x[k] - y[k]) <= 1e-4 * std::max(1.0, std::abs(x[k])));
    }
  }
  CHECK_THROWS_AS(cmd_train(full, scratch("nothing"), true, log), IoError);
}

TEST_CASE("eval and explain run from a saved checkpoint") {
  const RunConfig cfg = [] {
    RunConfig c = small_run(cohort());
    c.train.max_steps = 2;
    return c;
  }();
  const auto dir = scratch("eval");
  std::ostringstream log;
  const auto outcome = cmd_train(cfg, dir, false, log);
  const auto ev = cmd_eval(cfg, outcome.checkpoint, "test", log);
  REQUIRE(ev.scores.size() == 2);  // 6 per class, 5 of each in train
  REQUIRE(outcome.test.scores.size() == 2);
  // The checkpoint holds f32 parameters; the in-memory model is f64.
  for (std::size_t i = 0; i < 2; ++i) CHECK(ev.scores[i] == doctest::Approx(outcome.test.scores[i]).epsilon(1e-4));
  ExplainOptions eo;
  eo.method = "cam";
  const auto maps = cmd_explain(cfg, outcome.checkpoint, eo, dir / "maps", log);
  CHECK(maps.size() == 2);
  CHECK(fs::exists(dir / "maps" / "summary.json"));
  CHECK_THROWS(cmd_eval(cfg, outcome.checkpoint, "validation", log));
}
