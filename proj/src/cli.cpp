// Copyright 2026 The refseq Authors
// SPDX-License-Identifier: Apache-2.0

#include "refseq/cli.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <iomanip>
#include <ostream>
#include <sstream>

#include "CLI11.hpp"
#include "refseq/assembler.hpp"
#include "refseq/config_io.hpp"
#include "refseq/index_embed.hpp"
#include "refseq/mrope.hpp"
#include "refseq/probe.hpp"
#include "refseq/tinymodel.hpp"

namespace fs = std::filesystem;

namespace refseq {

// ---------------------------------------------------------------------------
// Digests and manifests

std::string sha256_hex(const std::string& bytes) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), md, &len, EVP_sha256(), nullptr) != 1) {
    throw Error("sha256 failed");
  }
  std::ostringstream hex;
  for (unsigned int i = 0; i < len; ++i) {
    hex << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(md[i]);
  }
  return hex.str();
}

std::string sha256_file(const std::string& path) {
  return sha256_hex(read_text_file(path));
}

namespace {

constexpr const char* kManifestName = "manifest.json";

// Regular files under dir, relative, sorted, manifest excluded.
std::vector<std::string> list_outputs(const std::string& dir) {
  std::vector<std::string> files;
  for (const auto& entry : fs::recursive_directory_iterator(dir)) {
    if (!entry.is_regular_file()) continue;
    const std::string rel = fs::relative(entry.path(), dir).generic_string();
    if (rel == kManifestName) continue;
    files.push_back(rel);
  }
  std::sort(files.begin(), files.end());
  return files;
}

}  // namespace

void write_manifest(const std::string& dir, const ManifestInfo& info) {
  Json outputs = Json::array();
  for (const std::string& rel : list_outputs(dir)) {
    const std::string path = (fs::path(dir) / rel).string();
    outputs.push_back(Json{{"path", rel},
                           {"bytes", fs::file_size(path)},
                           {"sha256", sha256_file(path)}});
  }
  Json inputs = Json::array();
  for (const std::string& in : info.inputs) {
    inputs.push_back(Json{{"path", in}, {"sha256", sha256_file(in)}});
  }
  const Json manifest{{"tool", "refseq"},
                      {"version", kToolVersion},
                      {"command", info.command},
                      {"config", info.config},
                      {"seeds", info.seeds},
                      {"inputs", inputs},
                      {"outputs", outputs},
                      {"wall_seconds", info.wall_seconds}};
  write_text_file((fs::path(dir) / kManifestName).string(), dump_canonical(manifest));
}

std::vector<std::string> verify_run_dir(const std::string& dir) {
  std::vector<std::string> problems;
  const fs::path mpath = fs::path(dir) / kManifestName;
  if (!fs::is_directory(dir)) return {dir + ": not a directory"};
  if (!fs::exists(mpath)) return {dir + ": no manifest"};
  Json manifest;
  try {
    manifest = read_json_file(mpath.string());
  } catch (const Error& e) {
    return {dir + ": unreadable manifest: " + e.what()};
  }
  if (!manifest.contains("outputs") || !manifest["outputs"].is_array()) {
    return {dir + ": manifest has no output list"};
  }
  std::vector<std::string> listed;
  for (const Json& o : manifest["outputs"]) {
    const std::string rel = o.value("path", "");
    listed.push_back(rel);
    const fs::path p = fs::path(dir) / rel;
    if (!fs::exists(p)) {
      problems.push_back(dir + ": missing " + rel);
      continue;
    }
    if (sha256_file(p.string()) != o.value("sha256", "")) {
      problems.push_back(dir + ": digest mismatch " + rel);
    }
  }
  for (const std::string& rel : list_outputs(dir)) {
    if (std::find(listed.begin(), listed.end(), rel) == listed.end()) {
      problems.push_back(dir + ": unlisted file " + rel);
    }
  }
  return problems;
}

// ---------------------------------------------------------------------------
// Subcommands

namespace {

void ensure_dir(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) {
    throw IoError("cannot create output directory " + dir +
                  (ec ? ": " + ec.message() : std::string()));
  }
}

void emit(const std::string& text, const std::string& out_path, std::ostream& out) {
  if (out_path.empty()) {
    out << text;
    return;
  }
  const fs::path parent = fs::path(out_path).parent_path();
  if (!parent.empty()) ensure_dir(parent.string());
  write_text_file(out_path, text);
}

Json load_config(const std::string& path) {
  return path.empty() ? Json::object() : read_json_file(path);
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

struct DumpRopeArgs {
  std::string config, out;
  std::optional<double> theta;
  std::vector<int> axes;
};

int cmd_dump_rope(const DumpRopeArgs& a, std::ostream& out) {
  const Json j = load_config(a.config);
  RopeConfig cfg = rope_config_from_json(j.contains("rope") ? j["rope"] : j);
  if (a.theta) cfg.theta = *a.theta;
  if (!a.axes.empty()) {
    if (a.axes.size() != 3) throw ConfigError("--axes takes three values");
    cfg.axes_dim = {a.axes[0], a.axes[1], a.axes[2]};
  }
  cfg.validate();
  emit(freq_table_json(cfg, build_freq_table(cfg)), a.out, out);
  return kExitOk;
}

struct DumpIndexArgs {
  std::string config, out;
  int n = 64;
  std::optional<double> tau;
  std::optional<int> channels;
};

int cmd_dump_index(const DumpIndexArgs& a, std::ostream& out) {
  const Json j = load_config(a.config);
  IndexEmbedConfig cfg =
      index_embed_config_from_json(j.contains("index_embed") ? j["index_embed"] : j);
  if (a.tau) cfg.tau = *a.tau;
  if (a.channels) cfg.channels = *a.channels;
  cfg.validate();
  emit(embedding_table_json(a.n, cfg), a.out, out);
  return kExitOk;
}

struct AssembleArgs {
  std::string config, out;
  std::optional<std::uint64_t> seed;
};

int cmd_assemble(const AssembleArgs& a, std::ostream& out) {
  const auto t0 = std::chrono::steady_clock::now();
  const Json j = load_config(a.config);
  reject_unknown_keys(j,
                      {"images", "channels", "separator_width", "use_separator",
                       "use_index_embed", "trailing_separator", "separator_positions",
                       "text_length", "index_embed", "seed"},
                      "assemble");
  int channels = 8;
  int sep_width = 1;
  int text_length = 0;
  std::uint64_t seed = 0;
  std::string sep_positions = "identity";
  AssemblyOptions opt;
  read_key(j, "channels", channels, "assemble");
  read_key(j, "separator_width", sep_width, "assemble");
  read_key(j, "text_length", text_length, "assemble");
  read_key(j, "seed", seed, "assemble");
  read_key(j, "use_separator", opt.use_separator, "assemble");
  read_key(j, "use_index_embed", opt.use_index_embed, "assemble");
  read_key(j, "trailing_separator", opt.trailing_separator, "assemble");
  read_key(j, "separator_positions", sep_positions, "assemble");
  if (a.seed) seed = *a.seed;
  if (sep_positions == "identity") {
    opt.separator_positions = SeparatorPositions::identity;
  } else if (sep_positions == "inherit_frame") {
    opt.separator_positions = SeparatorPositions::inherit_frame;
  } else {
    throw ConfigError("assemble.separator_positions must be identity or inherit_frame");
  }
  if (channels < 1 || sep_width < 1 || text_length < 0) {
    throw ConfigError("assemble: channels and separator_width must be >= 1, "
                      "text_length >= 0");
  }
  IndexEmbedConfig icfg;
  icfg.channels = channels;
  if (j.contains("index_embed")) icfg = index_embed_config_from_json(j["index_embed"], icfg);

  std::vector<GridShape> grids;
  if (j.contains("images")) {
    for (const Json& g : j["images"]) {
      reject_unknown_keys(g, {"frames", "height", "width"}, "assemble.images[]");
      GridShape s;
      read_key(g, "frames", s.frames, "assemble.images[]");
      read_key(g, "height", s.height, "assemble.images[]");
      read_key(g, "width", s.width, "assemble.images[]");
      grids.push_back(s);
    }
  } else {
    grids = {GridShape{1, 2, 2}, GridShape{1, 2, 2}};
  }

  Rng rng(seed);
  std::vector<LatentImage> images;
  for (std::size_t i = 0; i < grids.size(); ++i) {
    grids[i].validate();
    LatentImage img;
    img.image_index = static_cast<int>(i) + 1;
    img.grid = grids[i];
    img.data = Matrix(static_cast<std::size_t>(grids[i].token_count()),
                      static_cast<std::size_t>(channels));
    for (double& v : img.data.flat()) v = rng.normal();
    images.push_back(std::move(img));
  }
  Matrix text(static_cast<std::size_t>(text_length), static_cast<std::size_t>(channels));
  for (double& v : text.flat()) v = rng.normal();
  const SeparatorToken sep = SeparatorToken::random(
      static_cast<std::size_t>(sep_width), static_cast<std::size_t>(channels), rng);

  const AssembledSequence seq = assemble(images, sep, icfg, text, opt);
  if (auto diag = validate_sequence(seq)) {
    throw ValidationError("assembled sequence failed validation at row " +
                          std::to_string(diag->row) + ": " + diag->message);
  }
  const SequenceReport report = sequence_report(seq);
  out << report.text;
  if (!a.out.empty()) {
    ensure_dir(a.out);
    write_text_file((fs::path(a.out) / "sequence.json").string(),
                    dump_canonical(report.json));
    ManifestInfo info;
    info.command = "assemble";
    info.config = j;
    info.config["seed"] = seed;
    info.seeds = {seed};
    if (!a.config.empty()) info.inputs.push_back(a.config);
    info.wall_seconds = seconds_since(t0);
    write_manifest(a.out, info);
  }
  return kExitOk;
}

struct GradcheckArgs {
  std::string config, out, corrupt;
  std::optional<std::uint64_t> seed;
  std::optional<double> eps;
  bool fp32 = false;
};

int cmd_gradcheck(const GradcheckArgs& a, std::ostream& out) {
  const auto t0 = std::chrono::steady_clock::now();
  const Json j = load_config(a.config);
  reject_unknown_keys(j, {"model", "num_images", "seed", "eps", "fp32"}, "gradcheck");
  ModelConfig cfg = model_config_from_json(j.value("model", Json::object()));
  int num_images = 3;
  std::uint64_t seed = 0;
  read_key(j, "num_images", num_images, "gradcheck");
  read_key(j, "seed", seed, "gradcheck");
  bool fp32 = a.fp32;
  if (!a.fp32) read_key(j, "fp32", fp32, "gradcheck");
  GradCheckOptions opt = fp32 ? GradCheckOptions::fp32_defaults() : GradCheckOptions{};
  read_key(j, "eps", opt.eps, "gradcheck");
  if (a.seed) seed = *a.seed;
  if (a.eps) opt.eps = *a.eps;
  opt.corrupt_block = a.corrupt;
  const double threshold = fp32 ? 1e-2 : 1e-4;

  // A probe episode as the instance.
  ProbeSpec spec;
  spec.vocab = cfg.vocab;
  spec.reserved_tokens = std::min(spec.reserved_tokens, cfg.vocab - num_images);
  Rng rng(seed);
  const Params params = init_params(cfg, rng);
  const ProbeEpisode ep = gen_episode(Rng::derive(seed, 7), 0, spec, num_images);
  const AssembledSequence seq = episode_sequence(
      ep, spec, probe_codebook(spec, cfg.channels), cfg, params.separator);
  const GradCheckReport report = grad_check(params, seq, ep.label, cfg, opt);

  std::ostringstream text;
  text << "gradcheck: " << (fp32 ? "32-bit" : "64-bit") << ", eps " << opt.eps
       << ", L=" << seq.length() << ", threshold " << threshold << "\n";
  Json blocks = Json::array();
  for (const auto& b : report.blocks) {
    char line[160];
    std::snprintf(line, sizeof line, "  %-18s max rel err %.3e\n", b.block.c_str(),
                  b.max_rel_error);
    text << line;
    blocks.push_back(Json{{"block", b.block},
                          {"max_rel_error", b.max_rel_error},
                          {"worst_index", b.worst_index},
                          {"analytic", b.analytic},
                          {"numeric", b.numeric}});
  }
  const bool pass = report.passed(threshold);
  char verdict[200];
  std::snprintf(verdict, sizeof verdict, "%s: worst block %s, max rel err %.3e\n",
                pass ? "PASS" : "FAIL", report.worst_block.c_str(), report.max_rel_error);
  text << verdict;
  out << text.str();

  if (!a.out.empty()) {
    ensure_dir(a.out);
    const Json rj{{"passed", pass},
                  {"threshold", threshold},
                  {"eps", opt.eps},
                  {"fp32", fp32},
                  {"worst_block", report.worst_block},
                  {"max_rel_error", report.max_rel_error},
                  {"blocks", blocks}};
    write_text_file((fs::path(a.out) / "gradcheck.json").string(), dump_canonical(rj));
    ManifestInfo info;
    info.command = "gradcheck";
    info.config = Json{{"model", to_json(cfg)},
                       {"num_images", num_images},
                       {"seed", seed},
                       {"eps", opt.eps},
                       {"fp32", fp32}};
    info.seeds = {seed};
    if (!a.config.empty()) info.inputs.push_back(a.config);
    info.wall_seconds = seconds_since(t0);
    write_manifest(a.out, info);
  }
  return pass ? kExitOk : kExitFailure;
}

struct ProbeArgs {
  std::string config, out;
  std::optional<std::uint64_t> seed;
  std::optional<int> steps;
  std::optional<int> eval_episodes;
};

std::string checkpoint_name(const RunRecord& r) {
  return "checkpoints/" + r.config + "-seed" + std::to_string(r.seed) + ".json";
}

int cmd_probe(const ProbeArgs& a, std::ostream& out) {
  const auto t0 = std::chrono::steady_clock::now();
  if (a.out.empty()) throw ConfigError("probe needs --out");
  const Json j = load_config(a.config);
  reject_unknown_keys(j, {"probe", "model"}, "probe config");
  ProbeSpec spec = probe_spec_from_json(j.value("probe", Json::object()));
  const ModelConfig model = model_config_from_json(j.value("model", Json::object()));
  if (a.seed) spec.seeds = {*a.seed};
  if (a.steps) spec.steps = *a.steps;
  if (a.eval_episodes) spec.eval_episodes = *a.eval_episodes;
  spec.validate();
  ensure_dir(a.out);
  ensure_dir((fs::path(a.out) / "checkpoints").string());

  AblationOutput ab = run_ablation(spec, model);

  // Extrapolation reads the checkpoints back from disk.
  std::vector<std::optional<Checkpoint>> loaded(ab.checkpoints.size());
  for (std::size_t i = 0; i < ab.checkpoints.size(); ++i) {
    if (!ab.checkpoints[i]) continue;
    const std::string path = (fs::path(a.out) / checkpoint_name(ab.result.runs[i])).string();
    save_checkpoint(*ab.checkpoints[i], path);
    loaded[i] = load_checkpoint(path);
  }
  run_extrapolation(spec, model, ab.result, loaded);

  const Json resolved{{"probe", to_json(spec)}, {"model", to_json(model)}};
  write_text_file((fs::path(a.out) / "config.json").string(), dump_canonical(resolved));
  write_text_file((fs::path(a.out) / "results.csv").string(), results_csv(ab.result));
  write_text_file((fs::path(a.out) / "curves.csv").string(), curves_csv(ab.result));
  write_text_file((fs::path(a.out) / "summary.json").string(),
                  dump_canonical(summary_json(ab.result)));

  out << "config       seed  in-dist  extrapolated\n";
  for (const auto& r : ab.result.runs) {
    auto acc = [](const std::vector<EvalCell>& cells) {
      std::int64_t e = 0, c = 0;
      for (const auto& x : cells) {
        e += x.episodes;
        c += x.correct;
      }
      return e == 0 ? 0.0 : static_cast<double>(c) / e;
    };
    char line[160];
    if (r.ok) {
      std::snprintf(line, sizeof line, "%-12s %4llu  %7.3f  %12.3f  (%.0fs)\n",
                    r.config.c_str(), static_cast<unsigned long long>(r.seed),
                    acc(r.in_distribution), acc(r.extrapolated), r.wall_seconds);
    } else {
      std::snprintf(line, sizeof line, "%-12s %4llu  failed: %s\n", r.config.c_str(),
                    static_cast<unsigned long long>(r.seed), r.error.c_str());
    }
    out << line;
  }

  ManifestInfo info;
  info.command = "probe";
  info.config = resolved;
  info.seeds = spec.seeds;
  if (!a.config.empty()) info.inputs.push_back(a.config);
  info.wall_seconds = seconds_since(t0);
  write_manifest(a.out, info);
  out << "wrote " << a.out << "\n";
  return kExitOk;
}

int cmd_verify(const std::vector<std::string>& dirs, std::ostream& out) {
  bool ok = true;
  for (const std::string& d : dirs) {
    const auto problems = verify_run_dir(d);
    if (problems.empty()) {
      out << "OK " << d << "\n";
    } else {
      ok = false;
      for (const auto& p : problems) out << "FAIL " << p << "\n";
    }
  }
  return ok ? kExitOk : kExitFailure;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"refseq: multi-image sequence encoding toolkit"};
  app.require_subcommand(1);
  app.set_version_flag("--version", kToolVersion);

  DumpRopeArgs rope_args;
  auto* rope = app.add_subcommand("dump-rope", "Write the 3D RoPE frequency table as JSON");
  rope->add_option("--config", rope_args.config, "Rope config JSON");
  rope->add_option("--out", rope_args.out, "Output file (stdout if omitted)");
  rope->add_option("--theta", rope_args.theta, "Frequency base");
  rope->add_option("--axes", rope_args.axes, "Per-axis dims: frame height width")
      ->expected(3);

  DumpIndexArgs index_args;
  auto* index = app.add_subcommand("dump-index", "Write the image-index embedding table");
  index->add_option("--config", index_args.config, "Index embedding config JSON");
  index->add_option("--out", index_args.out, "Output file (stdout if omitted)");
  index->add_option("-n,--images", index_args.n, "Image count N")->capture_default_str();
  index->add_option("--tau", index_args.tau, "Sinusoidal base");
  index->add_option("--channels", index_args.channels, "Channels C");

  AssembleArgs asm_args;
  auto* asmb = app.add_subcommand("assemble", "Assemble a multi-image sequence from a spec");
  asmb->add_option("--config", asm_args.config, "Assembly spec JSON");
  asmb->add_option("--out", asm_args.out, "Output directory");
  asmb->add_option("--seed", asm_args.seed, "Latent seed");

  GradcheckArgs gc_args;
  auto* gc = app.add_subcommand("gradcheck", "Check analytic gradients by central differences");
  gc->add_option("--config", gc_args.config, "Gradcheck config JSON");
  gc->add_option("--out", gc_args.out, "Output directory");
  gc->add_option("--seed", gc_args.seed, "Init and instance seed");
  gc->add_option("--eps", gc_args.eps, "Finite-difference step");
  gc->add_flag("--fp32", gc_args.fp32, "32-bit mode (threshold 1e-2)");
  gc->add_option("--corrupt", gc_args.corrupt, "Debug: corrupt this block's gradient");

  ProbeArgs probe_args;
  auto* probe = app.add_subcommand("probe", "Run the ablation and extrapolation probe");
  probe->add_option("--config", probe_args.config, "Probe config JSON");
  probe->add_option("--out", probe_args.out, "Output directory")->required();
  probe->add_option("--seed", probe_args.seed, "Run a single seed");
  probe->add_option("--steps", probe_args.steps, "Training steps per run");
  probe->add_option("--eval-episodes", probe_args.eval_episodes,
                    "Evaluation episodes per image count");

  std::vector<std::string> verify_dirs;
  auto* verify = app.add_subcommand("verify", "Check run directories against their manifests");
  verify->add_option("dirs", verify_dirs, "Run directories")->required();

  std::vector<std::string> argv_store = args;
  std::reverse(argv_store.begin(), argv_store.end());
  try {
    app.parse(argv_store);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForVersion&) {
    out << kToolVersion << "\n";
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    return kExitBadInput;
  }

  try {
    if (*rope) return cmd_dump_rope(rope_args, out);
    if (*index) return cmd_dump_index(index_args, out);
    if (*asmb) return cmd_assemble(asm_args, out);
    if (*gc) return cmd_gradcheck(gc_args, out);
    if (*probe) return cmd_probe(probe_args, out);
    if (*verify) return cmd_verify(verify_dirs, out);
  } catch (const IoError& e) {
    err << "error: " << e.what() << "\n";
    return kExitIo;
  } catch (const TrainingError& e) {
    err << "error: " << e.what() << "\n";
    return kExitFailure;
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return kExitBadInput;
  } catch (const fs::filesystem_error& e) {
    err << "error: " << e.what() << "\n";
    return kExitIo;
  }
  return kExitBadInput;
}

}  // namespace refseq
