// Copyright 2026 The refseq Authors
// SPDX-License-Identifier: Apache-2.0

// Synthetic image-identity probe.
//
// Each episode shows N small images. Every cell holds the BLANK token except
// one randomly placed cell per image, which holds a payload token distinct
// across the episode. The instruction names a target ordinal k; the label is
// the payload of image k. Since payload cells move every episode, the label
// can only be read off by working out which block of tokens is "image k".

#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "refseq/assembler.hpp"
#include "refseq/canonical_json.hpp"
#include "refseq/core.hpp"
#include "refseq/tinymodel.hpp"

namespace refseq {

// Reserved token ids. Payloads are drawn from [reserved_tokens, vocab).
inline constexpr int kBlankToken = 0;
inline constexpr int kSelectToken = 1;
inline constexpr int kQueryToken = 2;

struct ProbeSpec {
  int vocab = 64;
  int reserved_tokens = 8;
  GridShape grid{1, 3, 3};
  int train_min_images = 2;
  int train_max_images = 4;
  std::vector<int> eval_in_distribution{2, 3, 4};
  std::vector<int> eval_extrapolated{5, 6};
  int episodes_per_step = 16;
  int steps = 3000;
  std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4};
  int eval_episodes = 500;  // per image count
  std::uint64_t eval_seed = 99;
  std::uint64_t codebook_seed = 7;
  double codebook_scale = 0.5;
  int curve_every = 100;
  OptHyper optimizer;

  // Throws SpecError.
  void validate() const;
};

Json to_json(const ProbeSpec& spec);
ProbeSpec probe_spec_from_json(const Json& j);

struct ProbeEpisode {
  int num_images = 0;
  int target = 1;                          // ordinal k in [1, N]
  std::vector<int> payloads;               // per image
  std::vector<int> payload_cells;          // flat cell index per image
  std::vector<std::vector<int>> images;    // token ids per image, row-major cells
  std::vector<int> instruction;            // {SELECT, QUERY}; the ordinal rides on QUERY
  int label = 0;
};

// Deterministic in (seed, counter). Throws SpecError if N < 2 or the vocab
// cannot supply N distinct payloads.
ProbeEpisode gen_episode(std::uint64_t seed, std::uint64_t counter,
                         const ProbeSpec& spec, int num_images);
ProbeEpisode gen_episode(Rng& rng, const ProbeSpec& spec, int num_images);

// Frozen token latents, vocab x channels.
Matrix probe_codebook(const ProbeSpec& spec, int channels);

// Latent sequence for an episode. Image cells become codebook rows; the
// instruction is [cb[SELECT], cb[QUERY] + E(k, N)]. The ordinal code is the
// same sinusoid the index embedding uses, present in every configuration.
AssembledSequence episode_sequence(const ProbeEpisode& ep, const ProbeSpec& spec,
                                   const Matrix& codebook, const ModelConfig& cfg,
                                   const Matrix& separator);

// The four ablation configurations, in output order.
struct AblationConfig {
  std::string name;
  bool use_separator = false;
  bool use_index_embed = false;
};
std::vector<AblationConfig> ablation_grid();
ModelConfig apply_ablation(ModelConfig cfg, const AblationConfig& ab);

struct EvalCell {
  int image_count = 0;
  std::int64_t episodes = 0;
  std::int64_t correct = 0;
  double accuracy() const {
    return episodes == 0 ? 0.0 : static_cast<double>(correct) / episodes;
  }
};

// Accuracy on eval episodes of the given counts. Episodes are drawn from
// spec.eval_seed, so every model sees the same set. Per-episode outcomes are
// reduced in episode order whatever the thread count.
std::vector<EvalCell> evaluate(const Params& params, const ModelConfig& cfg,
                               const ProbeSpec& spec, const std::vector<int>& counts,
                               kernels::Exec exec = kernels::Exec::parallel);

struct CurvePoint {
  int step = 0;
  double loss = 0.0;  // mean batch loss over the preceding window
};

struct RunRecord {
  std::string config;
  std::uint64_t seed = 0;
  bool ok = true;
  std::string error;
  std::vector<EvalCell> in_distribution;
  std::vector<EvalCell> extrapolated;
  std::vector<CurvePoint> curve;
  double wall_seconds = 0.0;
};

struct TrainedRun {
  RunRecord record;
  std::optional<Checkpoint> checkpoint;  // absent if training failed
};

// Trains one configuration on spec.train_min..max-image episodes. A
// non-finite loss ends the run with ok = false instead of throwing.
TrainedRun train_run(const ProbeSpec& spec, const ModelConfig& cfg,
                     const std::string& config_name, std::uint64_t seed);

struct ProbeResult {
  std::vector<RunRecord> runs;  // sorted by (config order, seed)
};

// Trains and evaluates (in distribution) the four configs x spec.seeds.
// Runs fan out across workers; each run is single-threaded. Checkpoints are
// returned alongside in the same order.
struct AblationOutput {
  ProbeResult result;
  std::vector<std::optional<Checkpoint>> checkpoints;
};
AblationOutput run_ablation(const ProbeSpec& spec, const ModelConfig& base);

// Evaluates trained checkpoints on spec.eval_extrapolated without touching
// the parameters. Fills `extrapolated` on the matching runs. Throws
// ConfigError if a checkpoint does not match its run's configuration.
void run_extrapolation(const ProbeSpec& spec, const ModelConfig& base,
                       ProbeResult& result,
                       const std::vector<std::optional<Checkpoint>>& checkpoints);

// Output formats. Both are deterministic functions of the result.
std::string results_csv(const ProbeResult& result);
std::string curves_csv(const ProbeResult& result);
Json summary_json(const ProbeResult& result);

}  // namespace refseq
