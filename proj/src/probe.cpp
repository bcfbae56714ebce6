// Copyright 2026 The refseq Authors
// SPDX-License-Identifier: Apache-2.0

#include "refseq/probe.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <exception>
#include <map>
#include <sstream>

#include "refseq/config_io.hpp"
#include "refseq/index_embed.hpp"

namespace refseq {

using kernels::Exec;

void ProbeSpec::validate() const {
  if (reserved_tokens < 3) {
    throw SpecError("reserved_tokens must cover BLANK, SELECT and QUERY (>= 3)");
  }
  if (vocab <= reserved_tokens) throw SpecError("vocab must exceed reserved_tokens");
  try {
    grid.validate();
  } catch (const Error& e) {
    throw SpecError(std::string("grid: ") + e.what());
  }
  if (train_min_images < 2) throw SpecError("train_min_images must be >= 2");
  if (train_max_images < train_min_images) {
    throw SpecError("train_max_images must be >= train_min_images");
  }
  if (eval_in_distribution.empty()) throw SpecError("eval_in_distribution is empty");
  for (int n : eval_in_distribution) {
    if (n < 2 || n > train_max_images) {
      throw SpecError("in-distribution count " + std::to_string(n) +
                      " outside [2, train_max_images]");
    }
  }
  for (int n : eval_extrapolated) {
    if (n <= train_max_images) {
      throw SpecError("extrapolated count " + std::to_string(n) +
                      " must exceed train_max_images (" +
                      std::to_string(train_max_images) + ")");
    }
  }
  int most = train_max_images;
  for (int n : eval_extrapolated) most = std::max(most, n);
  if (vocab - reserved_tokens < most) {
    throw SpecError("vocab leaves " + std::to_string(vocab - reserved_tokens) +
                    " payload tokens but episodes need up to " + std::to_string(most));
  }
  if (episodes_per_step < 1) throw SpecError("episodes_per_step must be >= 1");
  if (steps < 0) throw SpecError("steps must be >= 0");
  if (seeds.empty()) throw SpecError("seeds is empty");
  if (eval_episodes < 1) throw SpecError("eval_episodes must be >= 1");
  if (!(codebook_scale > 0.0)) throw SpecError("codebook_scale must be > 0");
  if (curve_every < 1) throw SpecError("curve_every must be >= 1");
  if (!(optimizer.lr > 0.0)) throw SpecError("optimizer.lr must be > 0");
}

Json to_json(const ProbeSpec& s) {
  return Json{{"vocab", s.vocab},
              {"reserved_tokens", s.reserved_tokens},
              {"grid", Json{{"frames", s.grid.frames},
                            {"height", s.grid.height},
                            {"width", s.grid.width}}},
              {"train_min_images", s.train_min_images},
              {"train_max_images", s.train_max_images},
              {"eval_in_distribution", s.eval_in_distribution},
              {"eval_extrapolated", s.eval_extrapolated},
              {"episodes_per_step", s.episodes_per_step},
              {"steps", s.steps},
              {"seeds", s.seeds},
              {"eval_episodes", s.eval_episodes},
              {"eval_seed", s.eval_seed},
              {"codebook_seed", s.codebook_seed},
              {"codebook_scale", s.codebook_scale},
              {"curve_every", s.curve_every},
              {"optimizer", Json{{"lr", s.optimizer.lr},
                                 {"beta1", s.optimizer.beta1},
                                 {"beta2", s.optimizer.beta2},
                                 {"eps", s.optimizer.eps}}}};
}

ProbeSpec probe_spec_from_json(const Json& j) {
  const std::string w = "probe";
  reject_unknown_keys(j,
                      {"vocab", "reserved_tokens", "grid", "train_min_images",
                       "train_max_images", "eval_in_distribution", "eval_extrapolated",
                       "episodes_per_step", "steps", "seeds", "eval_episodes",
                       "eval_seed", "codebook_seed", "codebook_scale", "curve_every",
                       "optimizer"},
                      w);
  ProbeSpec s;
  read_key(j, "vocab", s.vocab, w);
  read_key(j, "reserved_tokens", s.reserved_tokens, w);
  if (j.contains("grid")) {
    const Json& g = j["grid"];
    reject_unknown_keys(g, {"frames", "height", "width"}, "probe.grid");
    read_key(g, "frames", s.grid.frames, "probe.grid");
    read_key(g, "height", s.grid.height, "probe.grid");
    read_key(g, "width", s.grid.width, "probe.grid");
  }
  read_key(j, "train_min_images", s.train_min_images, w);
  read_key(j, "train_max_images", s.train_max_images, w);
  read_key(j, "eval_in_distribution", s.eval_in_distribution, w);
  read_key(j, "eval_extrapolated", s.eval_extrapolated, w);
  read_key(j, "episodes_per_step", s.episodes_per_step, w);
  read_key(j, "steps", s.steps, w);
  read_key(j, "seeds", s.seeds, w);
  read_key(j, "eval_episodes", s.eval_episodes, w);
  read_key(j, "eval_seed", s.eval_seed, w);
  read_key(j, "codebook_seed", s.codebook_seed, w);
  read_key(j, "codebook_scale", s.codebook_scale, w);
  read_key(j, "curve_every", s.curve_every, w);
  if (j.contains("optimizer")) {
    const Json& o = j["optimizer"];
    reject_unknown_keys(o, {"lr", "beta1", "beta2", "eps"}, "probe.optimizer");
    read_key(o, "lr", s.optimizer.lr, "probe.optimizer");
    read_key(o, "beta1", s.optimizer.beta1, "probe.optimizer");
    read_key(o, "beta2", s.optimizer.beta2, "probe.optimizer");
    read_key(o, "eps", s.optimizer.eps, "probe.optimizer");
  }
  s.validate();
  return s;
}

// ---------------------------------------------------------------------------
// Episodes

ProbeEpisode gen_episode(Rng& rng, const ProbeSpec& spec, int num_images) {
  if (num_images < 2) throw SpecError("an episode needs at least 2 images");
  const int pool_size = spec.vocab - spec.reserved_tokens;
  if (pool_size < num_images) {
    throw SpecError("vocab " + std::to_string(spec.vocab) + " cannot supply " +
                    std::to_string(num_images) + " distinct payload tokens");
  }
  const auto cells = static_cast<std::uint64_t>(spec.grid.token_count());

  ProbeEpisode ep;
  ep.num_images = num_images;
  // Partial Fisher-Yates over the payload pool.
  std::vector<int> pool(static_cast<std::size_t>(pool_size));
  for (int i = 0; i < pool_size; ++i) pool[static_cast<std::size_t>(i)] = spec.reserved_tokens + i;
  for (int i = 0; i < num_images; ++i) {
    const auto left = static_cast<std::uint64_t>(pool_size - i);
    const auto pick = static_cast<std::size_t>(i) + rng.uniform_int(left);
    std::swap(pool[static_cast<std::size_t>(i)], pool[pick]);
    ep.payloads.push_back(pool[static_cast<std::size_t>(i)]);
  }
  ep.target = 1 + static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(num_images)));
  for (int i = 0; i < num_images; ++i) {
    const int cell = static_cast<int>(rng.uniform_int(cells));
    ep.payload_cells.push_back(cell);
    std::vector<int> img(cells, kBlankToken);
    img[static_cast<std::size_t>(cell)] = ep.payloads[static_cast<std::size_t>(i)];
    ep.images.push_back(std::move(img));
  }
  ep.instruction = {kSelectToken, kQueryToken};
  ep.label = ep.payloads[static_cast<std::size_t>(ep.target - 1)];
  return ep;
}

ProbeEpisode gen_episode(std::uint64_t seed, std::uint64_t counter,
                         const ProbeSpec& spec, int num_images) {
  Rng rng(Rng::derive(seed, counter));
  return gen_episode(rng, spec, num_images);
}

Matrix probe_codebook(const ProbeSpec& spec, int channels) {
  Rng rng(spec.codebook_seed);
  Matrix cb(static_cast<std::size_t>(spec.vocab), static_cast<std::size_t>(channels));
  for (double& v : cb.flat()) v = spec.codebook_scale * rng.normal();
  return cb;
}

AssembledSequence episode_sequence(const ProbeEpisode& ep, const ProbeSpec& spec,
                                   const Matrix& codebook, const ModelConfig& cfg,
                                   const Matrix& separator) {
  const std::size_t C = codebook.cols();
  std::vector<LatentImage> images;
  images.reserve(ep.images.size());
  for (std::size_t j = 0; j < ep.images.size(); ++j) {
    LatentImage img;
    img.image_index = static_cast<int>(j) + 1;
    img.grid = spec.grid;
    img.data = Matrix(ep.images[j].size(), C);
    for (std::size_t c = 0; c < ep.images[j].size(); ++c) {
      auto src = codebook.row(static_cast<std::size_t>(ep.images[j][c]));
      std::copy(src.begin(), src.end(), img.data.row(c).begin());
    }
    images.push_back(std::move(img));
  }
  Matrix text(2, C);
  const IndexEmbedding ordinal = index_embedding(ep.target, ep.num_images, cfg.index_embed);
  for (std::size_t c = 0; c < C; ++c) {
    text(0, c) = codebook(kSelectToken, c);
    text(1, c) = codebook(kQueryToken, c) + ordinal.values[c];
  }
  AssemblyOptions opt;
  opt.use_separator = cfg.flags.use_separator;
  opt.use_index_embed = cfg.flags.use_index_embed;
  return assemble(images, SeparatorToken{separator, true}, cfg.index_embed, text, opt);
}

namespace {

void check_model_for_spec(const ProbeSpec& spec, const ModelConfig& cfg) {
  cfg.validate();
  if (cfg.vocab != spec.vocab) {
    throw ConfigError("model vocab " + std::to_string(cfg.vocab) +
                      " differs from probe vocab " + std::to_string(spec.vocab));
  }
}

std::size_t argmax(const std::vector<double>& v) {
  return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

}  // namespace

// ---------------------------------------------------------------------------
// Ablation grid

std::vector<AblationConfig> ablation_grid() {
  return {{"rope-only", false, false},
          {"rope+sep", true, false},
          {"rope+index", false, true},
          {"full", true, true}};
}

ModelConfig apply_ablation(ModelConfig cfg, const AblationConfig& ab) {
  cfg.flags.use_rope = true;
  cfg.flags.use_separator = ab.use_separator;
  cfg.flags.use_index_embed = ab.use_index_embed;
  return cfg;
}

// ---------------------------------------------------------------------------
// Evaluation

std::vector<EvalCell> evaluate(const Params& params, const ModelConfig& cfg,
                               const ProbeSpec& spec, const std::vector<int>& counts,
                               Exec exec) {
  spec.validate();
  check_model_for_spec(spec, cfg);
  const Matrix codebook = probe_codebook(spec, cfg.channels);
  std::vector<EvalCell> out;
  for (int n : counts) {
    const std::uint64_t stream = Rng::derive(spec.eval_seed, static_cast<std::uint64_t>(n));
    const std::ptrdiff_t E = spec.eval_episodes;
    std::vector<char> hit(static_cast<std::size_t>(E), 0);
    std::exception_ptr failure;
#pragma omp parallel for schedule(static) num_threads(kernels::worker_count()) \
    if (exec == Exec::parallel)
    for (std::ptrdiff_t i = 0; i < E; ++i) {
      try {
        const ProbeEpisode ep =
            gen_episode(stream, static_cast<std::uint64_t>(i), spec, n);
        const AssembledSequence seq =
            episode_sequence(ep, spec, codebook, cfg, params.separator);
        const std::vector<double> logits = forward(params, seq, cfg, Exec::serial);
        hit[static_cast<std::size_t>(i)] =
            argmax(logits) == static_cast<std::size_t>(ep.label) ? 1 : 0;
      } catch (...) {
#pragma omp critical(refseq_eval_failure)
        if (!failure) failure = std::current_exception();
      }
    }
    if (failure) std::rethrow_exception(failure);
    EvalCell cell;
    cell.image_count = n;
    cell.episodes = E;
    for (char h : hit) cell.correct += h;
    out.push_back(cell);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Training

TrainedRun train_run(const ProbeSpec& spec, const ModelConfig& cfg,
                     const std::string& config_name, std::uint64_t seed) {
  spec.validate();
  check_model_for_spec(spec, cfg);
  const auto t0 = std::chrono::steady_clock::now();
  TrainedRun out;
  out.record.config = config_name;
  out.record.seed = seed;

  const Matrix codebook = probe_codebook(spec, cfg.channels);
  Rng init_rng(Rng::derive(seed, 1));
  Params params = init_params(cfg, init_rng);
  OptState state = OptState::zeros_like(cfg);
  const std::uint64_t episode_stream = Rng::derive(seed, 2);
  Rng count_rng(Rng::derive(seed, 3));
  const auto span =
      static_cast<std::uint64_t>(spec.train_max_images - spec.train_min_images + 1);
  const double inv_batch = 1.0 / spec.episodes_per_step;

  std::uint64_t counter = 0;
  double window = 0.0;
  int window_steps = 0;
  try {
    for (int step = 1; step <= spec.steps; ++step) {
      const int n = spec.train_min_images + static_cast<int>(count_rng.uniform_int(span));
      Gradients grads = Gradients::zeros(cfg);
      double loss = 0.0;
      for (int b = 0; b < spec.episodes_per_step; ++b) {
        const ProbeEpisode ep = gen_episode(episode_stream, counter++, spec, n);
        const AssembledSequence seq =
            episode_sequence(ep, spec, codebook, cfg, params.separator);
        LossAndGrad<double> lg = loss_and_backward(params, seq, ep.label, cfg);
        accumulate(grads, lg.grads, inv_batch);
        loss += lg.loss * inv_batch;
      }
      opt_step(params, grads, state, spec.optimizer);
      window += loss;
      ++window_steps;
      if (step % spec.curve_every == 0 || step == spec.steps) {
        out.record.curve.push_back({step, window / window_steps});
        window = 0.0;
        window_steps = 0;
      }
    }
    out.checkpoint = Checkpoint{cfg, std::move(params), std::move(state)};
  } catch (const TrainingError& e) {
    out.record.ok = false;
    out.record.error = e.what();
  }
  out.record.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return out;
}

AblationOutput run_ablation(const ProbeSpec& spec, const ModelConfig& base) {
  spec.validate();
  const auto grid = ablation_grid();
  for (const auto& ab : grid) check_model_for_spec(spec, apply_ablation(base, ab));

  struct Job {
    std::size_t config_rank;
    std::uint64_t seed;
  };
  std::vector<Job> jobs;
  for (std::size_t c = 0; c < grid.size(); ++c) {
    for (std::uint64_t s : spec.seeds) jobs.push_back({c, s});
  }
  std::sort(jobs.begin(), jobs.end(), [](const Job& a, const Job& b) {
    return a.config_rank != b.config_rank ? a.config_rank < b.config_rank
                                          : a.seed < b.seed;
  });

  std::vector<TrainedRun> runs(jobs.size());
  const std::ptrdiff_t J = static_cast<std::ptrdiff_t>(jobs.size());
#pragma omp parallel for schedule(dynamic, 1) num_threads(kernels::worker_count())
  for (std::ptrdiff_t i = 0; i < J; ++i) {
    const Job& job = jobs[static_cast<std::size_t>(i)];
    const AblationConfig& ab = grid[job.config_rank];
    TrainedRun& run = runs[static_cast<std::size_t>(i)];
    try {
      const ModelConfig cfg = apply_ablation(base, ab);
      run = train_run(spec, cfg, ab.name, job.seed);
      if (run.record.ok) {
        run.record.in_distribution = evaluate(run.checkpoint->params, cfg, spec,
                                              spec.eval_in_distribution, Exec::serial);
      }
    } catch (const std::exception& e) {
      run.record.config = ab.name;
      run.record.seed = job.seed;
      run.record.ok = false;
      run.record.error = e.what();
      run.checkpoint.reset();
    }
  }

  AblationOutput out;
  for (auto& r : runs) {
    out.result.runs.push_back(std::move(r.record));
    out.checkpoints.push_back(std::move(r.checkpoint));
  }
  return out;
}

void run_extrapolation(const ProbeSpec& spec, const ModelConfig& base,
                       ProbeResult& result,
                       const std::vector<std::optional<Checkpoint>>& checkpoints) {
  spec.validate();
  if (checkpoints.size() != result.runs.size()) {
    throw ConfigError("expected one checkpoint slot per run");
  }
  const auto grid = ablation_grid();
  for (std::size_t i = 0; i < result.runs.size(); ++i) {
    RunRecord& run = result.runs[i];
    if (!run.ok || !checkpoints[i]) continue;
    auto it = std::find_if(grid.begin(), grid.end(),
                           [&](const AblationConfig& a) { return a.name == run.config; });
    if (it == grid.end()) throw ConfigError("unknown configuration " + run.config);
    const ModelConfig expected = apply_ablation(base, *it);
    const Checkpoint& ck = *checkpoints[i];
    if (!(ck.config == expected)) {
      throw ConfigError("checkpoint for " + run.config + " seed " +
                        std::to_string(run.seed) + " does not match its configuration");
    }
    run.extrapolated = evaluate(ck.params, ck.config, spec, spec.eval_extrapolated);
  }
}

// ---------------------------------------------------------------------------
// Output

namespace {

std::string join_counts(const std::vector<EvalCell>& cells) {
  std::string s;
  for (const auto& c : cells) {
    if (!s.empty()) s += ";";
    s += std::to_string(c.image_count);
  }
  return s;
}

std::string fixed6(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

struct Totals {
  std::int64_t episodes = 0;
  std::int64_t correct = 0;
  double accuracy() const {
    return episodes == 0 ? 0.0 : static_cast<double>(correct) / episodes;
  }
};

Totals totals(const std::vector<EvalCell>& cells) {
  Totals t;
  for (const auto& c : cells) {
    t.episodes += c.episodes;
    t.correct += c.correct;
  }
  return t;
}

Json cells_json(const std::vector<EvalCell>& cells) {
  Json j = Json::array();
  for (const auto& c : cells) {
    j.push_back(Json{{"image_count", c.image_count},
                     {"episodes", c.episodes},
                     {"correct", c.correct},
                     {"accuracy", c.accuracy()}});
  }
  return j;
}

}  // namespace

std::string results_csv(const ProbeResult& result) {
  std::ostringstream out;
  out << "config,seed,eval_set,image_counts,episodes,correct,accuracy,status\n";
  for (const auto& r : result.runs) {
    const std::pair<const char*, const std::vector<EvalCell>*> sets[] = {
        {"in_distribution", &r.in_distribution}, {"extrapolated", &r.extrapolated}};
    for (const auto& [name, cells] : sets) {
      const Totals t = totals(*cells);
      out << r.config << ',' << r.seed << ',' << name << ',' << join_counts(*cells)
          << ',' << t.episodes << ',' << t.correct << ','
          << (r.ok ? fixed6(t.accuracy()) : std::string()) << ','
          << (r.ok ? "ok" : "failed") << '\n';
    }
  }
  return out.str();
}

std::string curves_csv(const ProbeResult& result) {
  std::ostringstream out;
  out << "config,seed,step,loss\n";
  for (const auto& r : result.runs) {
    for (const auto& p : r.curve) {
      out << r.config << ',' << r.seed << ',' << p.step << ',' << format_double(p.loss)
          << '\n';
    }
  }
  return out.str();
}

Json summary_json(const ProbeResult& result) {
  Json configs = Json::object();
  for (const auto& ab : ablation_grid()) {
    Json entry = Json::object();
    for (const char* set : {"in_distribution", "extrapolated"}) {
      std::vector<double> acc;
      int failed = 0;
      for (const auto& r : result.runs) {
        if (r.config != ab.name) continue;
        if (!r.ok) {
          ++failed;
          continue;
        }
        const auto& cells =
            std::string(set) == "in_distribution" ? r.in_distribution : r.extrapolated;
        if (!cells.empty()) acc.push_back(totals(cells).accuracy());
      }
      Json cell{{"runs", acc.size()}, {"failed", failed}};
      if (!acc.empty()) {
        double sum = 0.0;
        for (double a : acc) sum += a;
        cell["mean"] = sum / static_cast<double>(acc.size());
        cell["min"] = *std::min_element(acc.begin(), acc.end());
        cell["max"] = *std::max_element(acc.begin(), acc.end());
      }
      entry[set] = cell;
    }
    configs[ab.name] = entry;
  }

  Json runs = Json::array();
  for (const auto& r : result.runs) {
    Json j{{"config", r.config},
           {"seed", r.seed},
           {"ok", r.ok},
           {"in_distribution", cells_json(r.in_distribution)},
           {"extrapolated", cells_json(r.extrapolated)}};
    if (!r.ok) j["error"] = r.error;
    runs.push_back(j);
  }

  // Full against rope-only on the extrapolated set, per seed.
  Json comparison = Json::array();
  for (const auto& full : result.runs) {
    if (full.config != "full" || !full.ok || full.extrapolated.empty()) continue;
    for (const auto& base : result.runs) {
      if (base.config != "rope-only" || base.seed != full.seed || !base.ok ||
          base.extrapolated.empty()) {
        continue;
      }
      const double a = totals(full.extrapolated).accuracy();
      const double b = totals(base.extrapolated).accuracy();
      comparison.push_back(Json{{"seed", full.seed},
                                {"full", a},
                                {"rope_only", b},
                                {"difference", a - b}});
    }
  }
  return Json{{"configs", configs},
              {"runs", runs},
              {"extrapolation_full_vs_rope_only", comparison}};
}

}  // namespace refseq
