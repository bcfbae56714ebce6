// Copyright 2026 The refseq Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "refseq/probe.hpp"
#include "refseq/tinymodel.hpp"
#include "test_util.hpp"

namespace refseq {
namespace {

struct Instance {
  Params params;
  AssembledSequence seq;
  int target = 0;
};

// A probe episode under cfg with freshly initialised parameters. Gains and
// biases are jittered so that no block sits at a special point.
Instance make_instance(const ModelConfig& cfg, std::uint64_t seed, int images = 3) {
  ProbeSpec spec;
  spec.vocab = cfg.vocab;
  Rng rng(seed);
  Instance inst;
  inst.params = init_params(cfg, rng);
  auto jitter = [&](Matrix& m, double base) {
    for (double& v : m.flat()) v = base + 0.1 * rng.normal();
  };
  for (auto& L : inst.params.layers) {
    jitter(L.ln1_g, 1.0), jitter(L.ln1_b, 0.0), jitter(L.ln2_g, 1.0), jitter(L.ln2_b, 0.0);
    jitter(L.b1, 0.0), jitter(L.b2, 0.0);
  }
  jitter(inst.params.final_g, 1.0), jitter(inst.params.final_b, 0.0);
  jitter(inst.params.input_b, 0.0), jitter(inst.params.head_b, 0.0);
  const ProbeEpisode ep = gen_episode(seed, 0, spec, images);
  inst.seq = episode_sequence(ep, spec, probe_codebook(spec, cfg.channels), cfg,
                              inst.params.separator);
  inst.target = ep.label;
  return inst;
}

ModelConfig with_flags(bool sep, bool index, bool rope) {
  ModelConfig cfg;
  cfg.flags = {sep, index, rope};
  return cfg;
}

TEST(ModelConfig, Validation) {
  EXPECT_NO_THROW(ModelConfig{}.validate());
  ModelConfig bad;
  bad.heads = 3;
  EXPECT_THROW(bad.validate(), ConfigError);
  bad = ModelConfig{};
  bad.layers = 0;
  EXPECT_THROW(bad.validate(), ConfigError);
}

TEST(InitParams, DeterministicPerSeed) {
  const ModelConfig cfg;
  Rng a(3), b(3), c(4);
  const Params pa = init_params(cfg, a);
  EXPECT_EQ(pa, init_params(cfg, b));
  EXPECT_NE(pa, init_params(cfg, c));
}

TEST(InitParams, SeparatorStatistics) {
  ModelConfig cfg;
  cfg.separator_width = 313;  // 313 x 32 = 10016 draws
  Rng rng(5);
  const Params p = init_params(cfg, rng);
  double s = 0.0, s2 = 0.0;
  for (double v : p.separator.flat()) {
    s += v;
    s2 += v * v;
  }
  const double n = static_cast<double>(p.separator.size());
  const double sd = std::sqrt(s2 / n - (s / n) * (s / n));
  EXPECT_GE(sd, 0.015);
  EXPECT_LE(sd, 0.025);
}

TEST(Forward, ZeroParamsGiveUniformLogits) {
  const ModelConfig cfg;
  Instance inst = make_instance(cfg, 1);
  const Params zero = Params::zeros(cfg);
  const auto logits = forward(zero, inst.seq, cfg);
  ASSERT_EQ(logits.size(), 64u);
  for (double v : logits) EXPECT_EQ(v, logits[0]);
}

TEST(Forward, UniformLossIsLogVocab) {
  ModelConfig cfg;
  cfg.vocab = 16;
  ProbeSpec spec;
  spec.vocab = 16;
  Rng rng(2);
  const Params zero = Params::zeros(cfg);
  const ProbeEpisode ep = gen_episode(2, 0, spec, 2);
  const auto seq = episode_sequence(ep, spec, probe_codebook(spec, cfg.channels), cfg,
                                    zero.separator);
  const auto lg = loss_and_backward(zero, seq, ep.label, cfg);
  EXPECT_NEAR(lg.loss, std::log(16.0), 1e-12);
}

// Logits for an episode with images a and b (0-based) exchanged. Assembly
// runs again, so index metadata follows the new order.
std::vector<double> logits_swapped(const Params& params, const ModelConfig& cfg,
                                   ProbeEpisode ep, int a, int b) {
  ProbeSpec spec;
  spec.vocab = cfg.vocab;
  std::swap(ep.images[a], ep.images[b]);
  std::swap(ep.payloads[a], ep.payloads[b]);
  std::swap(ep.payload_cells[a], ep.payload_cells[b]);
  const auto seq =
      episode_sequence(ep, spec, probe_codebook(spec, cfg.channels), cfg, params.separator);
  return forward(params, seq, cfg);
}

double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

TEST(Forward, BlockPermutationInvariantWithAllFlagsOff) {
  const ModelConfig cfg = with_flags(false, false, false);
  const Instance inst = make_instance(cfg, 3);
  ProbeSpec spec;
  const ProbeEpisode ep = gen_episode(3, 0, spec, 3);
  const auto base = logits_swapped(inst.params, cfg, ep, 0, 0);
  // Only the summation order over keys changes.
  EXPECT_LT(max_abs_diff(base, logits_swapped(inst.params, cfg, ep, 0, 2)), 1e-12);
  EXPECT_LT(max_abs_diff(base, logits_swapped(inst.params, cfg, ep, 1, 2)), 1e-12);
}

TEST(Forward, DuplicateContentsGiveIdenticalLogits) {
  // Two identical images and no identity mechanism: nothing distinguishes
  // slot 1 from slot 2, so the exchange is invisible bit for bit.
  const ModelConfig cfg = with_flags(false, false, false);
  const Instance inst = make_instance(cfg, 4, 2);
  ProbeSpec spec;
  ProbeEpisode ep = gen_episode(4, 0, spec, 2);
  ep.images[1] = ep.images[0];
  ep.payloads[1] = ep.payloads[0];
  ep.payload_cells[1] = ep.payload_cells[0];
  EXPECT_EQ(logits_swapped(inst.params, cfg, ep, 0, 0), logits_swapped(inst.params, cfg, ep, 0, 1));
}

TEST(Forward, IdentitySensitiveWithIndexEmbeddingOrRope) {
  // A separator alone does not qualify: without positions the token
  // multiset, and so the readout, is unchanged by the exchange.
  for (const ModelConfig& cfg : {with_flags(false, true, false), with_flags(false, false, true)}) {
    const Instance inst = make_instance(cfg, 5);
    ProbeSpec spec;
    const ProbeEpisode ep = gen_episode(5, 0, spec, 3);
    const auto base = logits_swapped(inst.params, cfg, ep, 0, 0);
    EXPECT_GT(max_abs_diff(base, logits_swapped(inst.params, cfg, ep, 0, 2)), 1e-6);
  }
}

TEST(Forward, FastPathMatchesCachedLogitsBitwise) {
  const ModelConfig cfg;
  const Instance inst = make_instance(cfg, 6);
  const auto fast = forward(inst.params, inst.seq, cfg);
  const auto lg = loss_and_backward(inst.params, inst.seq, inst.target, cfg);
  EXPECT_EQ(fast, lg.logits);
}

TEST(Forward, SerialAndParallelBitIdentical) {
  const ModelConfig cfg;
  const Instance inst = make_instance(cfg, 7, 4);
  EXPECT_EQ(forward(inst.params, inst.seq, cfg, kernels::Exec::serial),
            forward(inst.params, inst.seq, cfg, kernels::Exec::parallel));
  const auto a = loss_and_backward(inst.params, inst.seq, inst.target, cfg, kernels::Exec::serial);
  const auto b = loss_and_backward(inst.params, inst.seq, inst.target, cfg, kernels::Exec::parallel);
  EXPECT_EQ(a.loss, b.loss);
  EXPECT_EQ(a.grads, b.grads);
}

TEST(Forward, RejectsShapeMismatch) {
  const ModelConfig cfg;
  const Instance inst = make_instance(cfg, 8);
  ModelConfig narrow = cfg;
  narrow.channels = 16;
  narrow.heads = 2;
  narrow.index_embed.channels = 16;
  EXPECT_THROW(forward(inst.params, inst.seq, narrow), Error);
  EXPECT_THROW(loss_and_backward(inst.params, inst.seq, 64, cfg), Error);
}

TEST(Attention, ValuesAreNotRotated) {
  // Scaling the value projection scales the sublayer output by the same
  // factor at any positions: rotations touch queries and keys only.
  const ModelConfig cfg;
  const Instance inst = make_instance(cfg, 9);
  const ModelInput<double> in = prepare_input<double>(inst.seq, cfg);
  Matrix h(inst.seq.length(), 32);
  Rng rng(10);
  for (double& v : h.flat()) v = rng.normal();
  LayerParams<double> W = inst.params.layers[0];
  const Matrix base = attention_sublayer(W, h, in, cfg);
  for (double& v : W.wv.flat()) v *= 2.5;
  const Matrix scaled = attention_sublayer(W, h, in, cfg);
  for (std::size_t i = 0; i < base.size(); ++i) {
    EXPECT_NEAR(scaled.flat()[i], 2.5 * base.flat()[i], 1e-12);
  }
  // And the positions do matter through the scores.
  ModelInput<double> flat = in;
  flat.angles.fill(0.0);
  const Matrix unrotated = attention_sublayer(inst.params.layers[0], h, flat, cfg);
  double diff = 0.0;
  for (std::size_t i = 0; i < base.size(); ++i) {
    diff = std::max(diff, std::abs(unrotated.flat()[i] - base.flat()[i]));
  }
  EXPECT_GT(diff, 1e-6);
}

TEST(Backward, UnusedSeparatorGradientIsExactlyZero) {
  const ModelConfig cfg = with_flags(false, true, true);
  const Instance inst = make_instance(cfg, 11);
  const auto lg = loss_and_backward(inst.params, inst.seq, inst.target, cfg);
  for (double g : lg.grads.separator.flat()) EXPECT_EQ(g, 0.0);
}

TEST(Backward, GradientsFinite) {
  const ModelConfig cfg;
  const Instance inst = make_instance(cfg, 12);
  const auto lg = loss_and_backward(inst.params, inst.seq, inst.target, cfg);
  lg.grads.visit([](const std::string& name, const Matrix& m) {
    for (double v : m.flat()) ASSERT_TRUE(std::isfinite(v)) << name;
  });
}

TEST(Backward, NonFiniteLossRaises) {
  const ModelConfig cfg;
  Instance inst = make_instance(cfg, 13);
  inst.params.head_b(0, 0) = INFINITY;
  EXPECT_THROW(loss_and_backward(inst.params, inst.seq, inst.target, cfg), TrainingError);
}

TEST(GradCheck, FullConfigPasses) {
  const ModelConfig cfg;
  const Instance inst = make_instance(cfg, 14);
  const auto report = grad_check(inst.params, inst.seq, inst.target, cfg);
  EXPECT_LT(report.max_rel_error, 1e-4) << report.worst_block;
  EXPECT_EQ(report.blocks.size(), 31u);
  bool saw_separator = false;
  for (const auto& b : report.blocks) saw_separator |= b.block == "separator";
  EXPECT_TRUE(saw_separator);
}

TEST(GradCheck, SingleLayerEveryFlagCombination) {
  for (int mask = 0; mask < 8; ++mask) {
    ModelConfig cfg = with_flags(mask & 1, mask & 2, mask & 4);
    cfg.layers = 1;
    const Instance inst = make_instance(cfg, 15 + mask, 2);
    const auto report = grad_check(inst.params, inst.seq, inst.target, cfg);
    EXPECT_LT(report.max_rel_error, 1e-4) << "flags " << mask << " " << report.worst_block;
  }
}

TEST(GradCheck, Fp32WithinRelaxedThreshold) {
  const ModelConfig cfg;
  const Instance inst = make_instance(cfg, 16);
  const auto report =
      grad_check(inst.params, inst.seq, inst.target, cfg, GradCheckOptions::fp32_defaults());
  EXPECT_LT(report.max_rel_error, 1e-2) << report.worst_block;
}

TEST(GradCheck, CorruptedBlockIsNamed) {
  ModelConfig cfg;
  cfg.layers = 1;
  const Instance inst = make_instance(cfg, 17, 2);
  GradCheckOptions opt;
  opt.corrupt_block = "layer0.attn.wv";
  const auto report = grad_check(inst.params, inst.seq, inst.target, cfg, opt);
  EXPECT_EQ(report.worst_block, "layer0.attn.wv");
  EXPECT_GT(report.max_rel_error, 1e-2);
  opt.corrupt_block = "no.such.block";
  EXPECT_THROW(grad_check(inst.params, inst.seq, inst.target, cfg, opt), Error);
}

TEST(GradCheck, RejectsNonPositiveStep) {
  const ModelConfig cfg;
  const Instance inst = make_instance(cfg, 18);
  GradCheckOptions opt;
  opt.eps = 0.0;
  EXPECT_THROW(grad_check(inst.params, inst.seq, inst.target, cfg, opt), DomainError);
}

TEST(Optimizer, ZeroGradientsLeaveParamsUnchanged) {
  const ModelConfig cfg;
  Rng rng(19);
  Params p = init_params(cfg, rng);
  const Params before = p;
  OptState st = OptState::zeros_like(cfg);
  opt_step(p, Gradients::zeros(cfg), st, OptHyper{});
  EXPECT_EQ(p, before);
  EXPECT_EQ(st.step, 1);
}

TEST(Optimizer, DescendsOnSumOfSquares) {
  // f(w) = sum w^2 over every entry, gradient 2w.
  const ModelConfig cfg;
  Rng rng(20);
  Params p = init_params(cfg, rng);
  auto f = [](const Params& q) {
    double s = 0.0;
    q.visit([&](const std::string&, const Matrix& m) {
      for (double v : m.flat()) s += v * v;
    });
    return s;
  };
  OptState st = OptState::zeros_like(cfg);
  OptHyper hyper;
  hyper.lr = 0.1;
  double last = f(p);
  for (int i = 0; i < 5; ++i) {
    Gradients g = p;
    g.visit([](const std::string&, Matrix& m) {
      for (double& v : m.flat()) v *= 2.0;
    });
    opt_step(p, g, st, hyper);
    const double now = f(p);
    EXPECT_LT(now, last);
    last = now;
  }
}

TEST(Optimizer, NonFiniteUpdateRaisesAndLeavesParams) {
  const ModelConfig cfg;
  Rng rng(21);
  Params p = init_params(cfg, rng);
  const Params before = p;
  OptState st = OptState::zeros_like(cfg);
  Gradients g = Gradients::zeros(cfg);
  g.head_w(0, 0) = NAN;
  EXPECT_THROW(opt_step(p, g, st, OptHyper{}), TrainingError);
  EXPECT_EQ(p, before);
}

TEST(Training, ReplayIsBitIdentical) {
  ProbeSpec spec;
  spec.steps = 100;
  spec.episodes_per_step = 2;
  const ModelConfig cfg;
  const TrainedRun a = train_run(spec, cfg, "full", 3);
  const TrainedRun b = train_run(spec, cfg, "full", 3);
  ASSERT_TRUE(a.checkpoint && b.checkpoint);
  EXPECT_EQ(a.checkpoint->params, b.checkpoint->params);
  EXPECT_EQ(a.checkpoint->opt, b.checkpoint->opt);
}

TEST(Training, SeparatorLearnsOnlyWhenUsed) {
  ProbeSpec spec;
  spec.steps = 10;
  spec.episodes_per_step = 4;
  for (bool use : {true, false}) {
    const ModelConfig cfg = with_flags(use, true, true);
    Rng init(Rng::derive(0, 1));
    const Params start = init_params(cfg, init);
    const TrainedRun run = train_run(spec, cfg, "x", 0);
    ASSERT_TRUE(run.checkpoint);
    if (use) {
      EXPECT_NE(run.checkpoint->params.separator, start.separator);
    } else {
      EXPECT_EQ(run.checkpoint->params.separator, start.separator);
    }
  }
}

TEST(Checkpoint, RoundTripIsBitExact) {
  ProbeSpec spec;
  spec.steps = 5;
  spec.episodes_per_step = 2;
  const TrainedRun run = train_run(spec, ModelConfig{}, "full", 1);
  ASSERT_TRUE(run.checkpoint);
  const std::string text = checkpoint_to_string(*run.checkpoint);
  const Checkpoint back = checkpoint_from_string(text);
  EXPECT_EQ(back.config, run.checkpoint->config);
  EXPECT_EQ(back.params, run.checkpoint->params);
  EXPECT_EQ(back.opt, run.checkpoint->opt);
  EXPECT_EQ(checkpoint_to_string(back), text);

  const auto path = std::filesystem::temp_directory_path() / "refseq_ckpt_test.json";
  save_checkpoint(*run.checkpoint, path.string());
  EXPECT_EQ(load_checkpoint(path.string()).params, run.checkpoint->params);
  std::filesystem::remove(path);
}

TEST(Checkpoint, MalformedRejected) {
  EXPECT_THROW(checkpoint_from_string("{}"), ConfigError);
  EXPECT_THROW(checkpoint_from_string("not json"), ConfigError);
  EXPECT_THROW(load_checkpoint("/nonexistent/ckpt.json"), IoError);
}

}  // namespace
}  // namespace refseq
