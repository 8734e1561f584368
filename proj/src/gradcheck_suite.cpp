#include <memory>

#include "cortexplain/gradcheck.hpp"
#include "cortexplain/losses.hpp"
#include "cortexplain/model.hpp"
#include "cortexplain/rng.hpp"

namespace cx {

namespace {

Tensor random_tensor(Rng& rng, std::size_t r, std::size_t c, double s = 1.0) {
  Tensor t = Tensor::matrix(r, c);
  for (auto& v : t.values()) v = s * rng.normal();
  return t;
}

// Fixed random projection so a check never reduces to a plain sum.
Var probe(const Var& y, std::uint64_t seed) {
  Rng rng(seed);
  return sum(mul(y, y.tape().constant(random_tensor(rng, y.rows(), y.cols()))), Axis::kAll);
}

constexpr int kMaxRedraws = 5;

struct Case {
  std::string name;
  std::vector<std::unique_ptr<Parameter>> params;
  ScalarFunction fn;

  Parameter& add(const std::string& n, Tensor v) {
    params.push_back(std::make_unique<Parameter>(Parameter{n, std::move(v), {}}));
    return *params.back();
  }
  std::vector<Parameter*> raw() const {
    std::vector<Parameter*> out;
    for (const auto& p : params) out.push_back(p.get());
    return out;
  }
};

}  // namespace

std::vector<SuiteResult> gradcheck_suite(const GradCheckOptions& options, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<SuiteResult> out;
  auto run = [&](Case& c) { out.push_back({c.name, grad_check(c.fn, c.raw(), options)}); };

  const std::size_t copies = 2 * kHemispheres;  // two samples
  const auto t1 = level_tables(1, copies);
  const auto t0 = level_tables(0, copies);
  const std::size_t r1 = copies * t1->vertices, r0 = copies * t0->vertices;

  {
    Case c{"hex_conv", {}, {}};
    c.add("x", random_tensor(rng, r1, 3));
    c.add("kernel", random_tensor(rng, 7 * 3, 4, 0.3));
    c.add("bias", random_tensor(rng, 1, 4));
    c.fn = [t1](Tape&, const std::vector<Var>& p) { return probe(layers::hex_conv(p[0], *t1, p[1], p[2]), 1); };
    run(c);
  }
  {
    Case c{"hex_max_pool", {}, {}};
    c.add("x", random_tensor(rng, r1, 3));
    c.fn = [t1](Tape&, const std::vector<Var>& p) { return probe(layers::hex_max_pool(p[0], *t1), 2); };
    run(c);
  }
  {
    Case c{"transposed_conv", {}, {}};
    c.add("x", random_tensor(rng, r0, 3));
    c.add("weight", random_tensor(rng, 6, 4, 0.5));
    c.add("bias", random_tensor(rng, 1, 4));
    c.fn = [t1](Tape&, const std::vector<Var>& p) {
      return probe(layers::transposed_conv(p[0], *t1, p[1], p[2]), 3);
    };
    run(c);
  }
  {
    Case c{"upsample_mean", {}, {}};
    c.add("x", random_tensor(rng, r0, 3));
    c.fn = [t1](Tape&, const std::vector<Var>& p) { return probe(layers::upsample_mean(p[0], *t1), 4); };
    run(c);
  }
  for (int heads : {1, 2}) {
    Case c{heads == 1 ? "self_attention" : "self_attention_2heads", {}, {}};
    const std::size_t tokens = kHemispheres * t0->vertices;
    c.add("x", random_tensor(rng, r0, 4));
    for (const char* n : {"wq", "wk", "wv"}) c.add(n, random_tensor(rng, 4, 4, 0.5));
    c.fn = [tokens, heads](Tape&, const std::vector<Var>& p) {
      return probe(layers::self_attention(p[0], tokens, p[1], p[2], p[3], heads), 5);
    };
    run(c);
  }
  {
    Case c{"attention_head", {}, {}};
    const std::size_t V = t1->vertices;
    c.add("features", random_tensor(rng, r1, 4));
    c.add("w", random_tensor(rng, 4, 2));
    c.fn = [V](Tape&, const std::vector<Var>& p) {
      const HeadOutput h = layers::attention_head(p[0], p[1], 2, V);
      return add(add(probe(h.class_attention, 6), probe(h.score, 7)), probe(h.attention, 8));
    };
    run(c);
  }
  {
    Case c{"normalization", {}, {}};
    c.add("x", random_tensor(rng, r1, 4));
    c.add("gamma", random_tensor(rng, 1, 4));
    c.add("beta", random_tensor(rng, 1, 4));
    c.fn = [](Tape&, const std::vector<Var>& p) { return probe(batch_norm(p[0], p[1], p[2], 1e-5), 9); };
    run(c);
  }

  // Loss terms over four samples at level 1, attention squashed into (0, 1).
  const std::vector<int> labels{1, 0, 1, 0};
  const std::size_t rows = kHemispheres * t1->vertices;
  const std::size_t n4 = labels.size() * rows;
  for (const bool normalized : {false, true}) {
    Case c{normalized ? "contrast_loss_normalized" : "contrast_loss", {}, {}};
    c.add("attention_logit", random_tensor(rng, n4, 1, 2.0));
    c.add("features", random_tensor(rng, n4, 3, 0.05));
    LossConfig cfg;
    cfg.normalize_features = normalized;
    c.fn = [labels, rows, cfg](Tape&, const std::vector<Var>& p) {
      return contrast_loss(sigmoid(p[0]), p[1], labels, rows, cfg);
    };
    run(c);
  }
  for (const auto sign : {EntropySign::kAsWritten, EntropySign::kProseIntent}) {
    Case c{sign == EntropySign::kAsWritten ? "entropy_loss" : "entropy_loss_prose", {}, {}};
    c.add("attention_logit", random_tensor(rng, n4, 1, 2.0));
    LossConfig cfg;
    cfg.entropy_sign = sign;
    c.fn = [labels, rows, cfg](Tape&, const std::vector<Var>& p) {
      return entropy_loss(sigmoid(p[0]), labels, rows, cfg);
    };
    run(c);
  }
  {
    Case c{"consistency_loss", {}, {}};
    const auto t2 = level_tables(2, copies);
    c.add("a0", random_tensor(rng, r0, 1, 2.0));
    c.add("a1", random_tensor(rng, r1, 1, 2.0));
    c.add("a2", random_tensor(rng, copies * t2->vertices, 1, 2.0));
    c.fn = [](Tape&, const std::vector<Var>& p) {
      return consistency_loss({{0, sigmoid(p[0])}, {1, sigmoid(p[1])}, {2, sigmoid(p[2])}}, 2);
    };
    run(c);
  }

  // Weighted total through the whole network. With tens of thousands of
  // ReLU/max units a random point sometimes sits within one step of a
  // switch that moves with most parameters; the central difference is no
  // oracle there, so such a point (too many kinked coordinates) is redrawn.
  for (const auto stages : {RegularizerStages::kFinal, RegularizerStages::kAll}) {
    ModelConfig mc;
    mc.input_level = 3;
    mc.encoder_channels = {3, 3, 3, 4};
    mc.decoder_channels = {3, 3, 3};
    mc.head_channels = 3;
    mc.seed = seed;
    auto net = std::make_shared<AttentionDecoderNet>(mc);
    const auto tin = level_tables(3, kHemispheres * 2);
    LossConfig lc;
    lc.regularizer_stages = stages;
    // Keep the hinges active at this feature scale.
    lc.margin = 50.0;
    const std::vector<int> y{1, 0};
    SuiteResult res{stages == RegularizerStages::kFinal ? "total_loss_model" : "total_loss_model_all_stages", {}};
    for (int attempt = 0; attempt < kMaxRedraws; ++attempt) {
      Tensor input = random_tensor(rng, tin->copies * tin->vertices, 3);
      ScalarFunction fn = [net, input, lc, y](Tape& tape, const std::vector<Var>&) {
        const ForwardResult r = net->forward(tape, input, 2, {Mode::kTrain, true});
        return compute_losses(r, y, lc).total;
      };
      res.report = grad_check(fn, net->state().parameters(), options);
      const bool kinked = static_cast<double>(res.report.kinks) >
                          options.max_kink_fraction * static_cast<double>(res.report.coords_checked);
      if (!kinked) break;
      ++res.redraws;
    }
    out.push_back(std::move(res));
  }
  return out;
}

}  // namespace cx
