// Copyright 2026 The refseq Authors
// SPDX-License-Identifier: Apache-2.0

// A small pre-norm attention classifier over assembled sequences, with
// hand-written backward pass, central-difference gradient checker and an
// adaptive-moment optimizer.
//
// Layout of one forward pass (L rows, C channels):
//
//   X      = sequence rows, separator rows bound to params.separator
//   H      = X W_in + b_in
//   repeat layers:
//     A    = LN1(H)
//     Q,K  = rope(A Wq), rope(A Wk)        (values are never rotated)
//     H   += softmax(Q K^T / sqrt(hd)) (A Wv) Wo      per head
//     H   += gelu(LN2(H) W1 + b1) W2 + b2
//   logits = LN_f(H[L-1]) W_head + b_head
//
// The last row is the final text token; its logits classify the payload.

#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "refseq/assembler.hpp"
#include "refseq/core.hpp"
#include "refseq/index_embed.hpp"
#include "refseq/kernels.hpp"
#include "refseq/mrope.hpp"

namespace refseq {

struct ModelFlags {
  bool use_separator = true;
  bool use_index_embed = true;
  bool use_rope = true;
  bool operator==(const ModelFlags&) const = default;
};

struct ModelConfig {
  int vocab = 64;
  int channels = 32;
  int heads = 4;
  int head_dim = 8;
  int layers = 2;
  int ffn_hidden = 64;
  RopeConfig rope{{2, 2, 4}, 10000.0};
  IndexEmbedConfig index_embed{10000.0, 32};
  ModelFlags flags;
  int separator_width = 1;
  // Weight matrices draw from N(0, weight_std^2); the separator from
  // N(0, separator_std^2). Gains start at 1, biases at 0.
  double weight_std = 0.18;
  double separator_std = 0.02;
  double ln_eps = 1e-5;

  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

template <typename T>
struct LayerParams {
  BasicMatrix<T> ln1_g, ln1_b;
  BasicMatrix<T> wq, wk, wv, wo;
  BasicMatrix<T> ln2_g, ln2_b;
  BasicMatrix<T> w1, b1, w2, b2;
  bool operator==(const LayerParams&) const = default;
};

// Parameter blocks. Gradients and optimizer moments share this layout.
template <typename T>
struct ParamsT {
  BasicMatrix<T> input_w, input_b;
  std::vector<LayerParams<T>> layers;
  BasicMatrix<T> final_g, final_b;
  BasicMatrix<T> head_w, head_b;
  BasicMatrix<T> separator;  // separator_width x C

  // Zero-filled blocks shaped for cfg.
  static ParamsT zeros(const ModelConfig& cfg);

  // Visits every block in a fixed order with its name.
  template <typename F>
  void visit(F&& f) {
    visit_impl(*this, f);
  }
  template <typename F>
  void visit(F&& f) const {
    visit_impl(*this, f);
  }

  std::size_t parameter_count() const;
  bool operator==(const ParamsT&) const = default;

 private:
  template <typename Self, typename F>
  static void visit_impl(Self& p, F& f) {
    f("input.w", p.input_w);
    f("input.b", p.input_b);
    for (std::size_t l = 0; l < p.layers.size(); ++l) {
      auto& L = p.layers[l];
      const std::string pre = "layer" + std::to_string(l) + ".";
      f(pre + "ln1.g", L.ln1_g);
      f(pre + "ln1.b", L.ln1_b);
      f(pre + "attn.wq", L.wq);
      f(pre + "attn.wk", L.wk);
      f(pre + "attn.wv", L.wv);
      f(pre + "attn.wo", L.wo);
      f(pre + "ln2.g", L.ln2_g);
      f(pre + "ln2.b", L.ln2_b);
      f(pre + "ffn.w1", L.w1);
      f(pre + "ffn.b1", L.b1);
      f(pre + "ffn.w2", L.w2);
      f(pre + "ffn.b2", L.b2);
    }
    f("final.g", p.final_g);
    f("final.b", p.final_b);
    f("head.w", p.head_w);
    f("head.b", p.head_b);
    f("separator", p.separator);
  }
};

using Params = ParamsT<double>;
using Gradients = ParamsT<double>;

template <typename To, typename From>
ParamsT<To> params_cast(const ParamsT<From>& p);

Params init_params(const ModelConfig& cfg, Rng& rng);

// The model's view of the shared separator parameter.
SeparatorToken separator_of(const Params& params);

// Sequence rows in the model's scalar type, ready for forward.
template <typename T>
struct ModelInput {
  BasicMatrix<T> tokens;                    // L x C
  std::vector<std::int64_t> separator_slot; // slot per row, -1 if not a separator
  BasicMatrix<T> angles;                    // L x head_dim/2
};

template <typename T>
ModelInput<T> prepare_input(const AssembledSequence& seq, const ModelConfig& cfg);

template <typename T>
std::vector<T> forward(const ParamsT<T>& params, const ModelInput<T>& input,
                       const ModelConfig& cfg,
                       kernels::Exec exec = kernels::Exec::serial);

std::vector<double> forward(const Params& params, const AssembledSequence& seq,
                            const ModelConfig& cfg,
                            kernels::Exec exec = kernels::Exec::serial);

// The attention sublayer of one block on its own (LN1, projections, RoPE on
// queries and keys, softmax, output projection) for block input h.
Matrix attention_sublayer(const LayerParams<double>& W, const Matrix& h,
                          const ModelInput<double>& in, const ModelConfig& cfg);

template <typename T>
struct LossAndGrad {
  T loss{};
  ParamsT<T> grads;
  std::vector<T> logits;
};

// Cross-entropy of the last row's logits against target, with gradients for
// every block. Throws TrainingError on a non-finite loss.
template <typename T>
LossAndGrad<T> loss_and_backward(const ParamsT<T>& params,
                                 const ModelInput<T>& input, int target,
                                 const ModelConfig& cfg,
                                 kernels::Exec exec = kernels::Exec::serial);

LossAndGrad<double> loss_and_backward(const Params& params,
                                      const AssembledSequence& seq, int target,
                                      const ModelConfig& cfg,
                                      kernels::Exec exec = kernels::Exec::serial);

template <typename T>
T loss_only(const ParamsT<T>& params, const ModelInput<T>& input, int target,
            const ModelConfig& cfg);

// ---------------------------------------------------------------------------
// Gradient checking

struct BlockError {
  std::string block;
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
};

struct GradCheckReport {
  std::vector<BlockError> blocks;
  std::string worst_block;
  double max_rel_error = 0.0;
  double eps = 0.0;
  bool passed(double threshold) const { return max_rel_error < threshold; }
};

struct GradCheckOptions {
  double eps = 1e-5;
  // Entries with |analytic| and |numeric| both below this are compared in
  // absolute terms against it.
  double abs_floor = 1e-8;
  // 64-bit mode: entries disagreeing by more than this are re-evaluated with
  // the loss in extended precision before being reported.
  double refine_above = 1e-5;
  // Debug hook: scales the analytic gradient of this block by 1.5.
  std::string corrupt_block;
  bool fp32 = false;

  // 32-bit defaults: a larger step, refinement against a 64-bit quotient
  // above a tenth of the relaxed 1e-2 threshold, and an absolute floor at
  // the rounding noise of a float gradient (entries near 1e-8 carry
  // absolute errors of a few 1e-9 from float accumulation alone).
  static GradCheckOptions fp32_defaults() {
    GradCheckOptions o;
    o.fp32 = true;
    o.eps = 1e-3;
    o.refine_above = 1e-3;
    o.abs_floor = 1e-6;
    return o;
  }
};

// Central differences on every parameter entry.
GradCheckReport grad_check(const Params& params, const AssembledSequence& seq,
                           int target, const ModelConfig& cfg,
                           const GradCheckOptions& options = {});

// ---------------------------------------------------------------------------
// Optimizer

struct OptHyper {
  double lr = 3e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct OptState {
  std::int64_t step = 0;
  Params m;
  Params v;

  static OptState zeros_like(const ModelConfig& cfg);
  bool operator==(const OptState&) const = default;
};

// Bias-corrected adaptive-moment update, no weight decay. Throws
// TrainingError if the update would produce a non-finite parameter.
void opt_step(Params& params, const Gradients& grads, OptState& state,
              const OptHyper& hyper);

// Adds `src` scaled by `scale` into `dst` block by block.
void accumulate(Gradients& dst, const Gradients& src, double scale = 1.0);

double global_norm(const Params& p);

// ---------------------------------------------------------------------------
// Checkpoints (canonical JSON, exact round trip)

struct Checkpoint {
  ModelConfig config;
  Params params;
  OptState opt;
};

std::string checkpoint_to_string(const Checkpoint& ck);
Checkpoint checkpoint_from_string(const std::string& text);
void save_checkpoint(const Checkpoint& ck, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace refseq
