// Copyright 2026 The refseq Authors
// SPDX-License-Identifier: Apache-2.0

// Serial reference vs OpenMP kernels. Worker count follows REFSEQ_WORKERS.

#include <benchmark/benchmark.h>

#include "refseq/kernels.hpp"
#include "refseq/tinymodel.hpp"

namespace refseq {
namespace {

using kernels::Exec;

Matrix random_matrix(std::size_t r, std::size_t c, std::uint64_t seed) {
  Rng rng(seed);
  Matrix m(r, c);
  for (double& v : m.flat()) v = rng.normal();
  return m;
}

void BM_Matmul(benchmark::State& state, Exec exec) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const Matrix a = random_matrix(n, n, 1), b = random_matrix(n, n, 2);
  Matrix out(n, n);
  for (auto _ : state) {
    kernels::matmul(a, b, out, false, exec);
    benchmark::DoNotOptimize(out.data());
  }
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(n * n * n));
}
BENCHMARK_CAPTURE(BM_Matmul, serial, Exec::serial)->Arg(64)->Arg(256);
BENCHMARK_CAPTURE(BM_Matmul, parallel, Exec::parallel)->Arg(64)->Arg(256);

void BM_MatmulAtB(benchmark::State& state, Exec exec) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const Matrix a = random_matrix(n, 32, 3), b = random_matrix(n, 64, 4);
  Matrix out(32, 64);
  for (auto _ : state) {
    kernels::matmul_at_b(a, b, out, false, exec);
    benchmark::DoNotOptimize(out.data());
  }
}
BENCHMARK_CAPTURE(BM_MatmulAtB, serial, Exec::serial)->Arg(1024);
BENCHMARK_CAPTURE(BM_MatmulAtB, parallel, Exec::parallel)->Arg(1024);

void BM_RopeRows(benchmark::State& state, Exec exec) {
  const auto rows = static_cast<std::size_t>(state.range(0));
  Matrix x = random_matrix(rows, 32, 5);
  const Matrix ang = random_matrix(rows, 4, 6);
  for (auto _ : state) {
    kernels::rope_rows(x, ang, 4, false, exec);
    benchmark::DoNotOptimize(x.data());
  }
}
BENCHMARK_CAPTURE(BM_RopeRows, serial, Exec::serial)->Arg(4096);
BENCHMARK_CAPTURE(BM_RopeRows, parallel, Exec::parallel)->Arg(4096);

// One forward/backward of the probe model on a side x side image.
void BM_LossAndGrad(benchmark::State& state, Exec exec) {
  ModelConfig cfg;
  Rng rng(7);
  const Params p = init_params(cfg, rng);
  const auto side = state.range(0);
  LatentImage img;
  img.image_index = 1;
  img.grid = {1, side, side};
  img.data = random_matrix(static_cast<std::size_t>(side * side),
                           static_cast<std::size_t>(cfg.channels), 8);
  const AssembledSequence seq =
      assemble(std::vector<LatentImage>{img}, separator_of(p), cfg.index_embed,
               random_matrix(2, static_cast<std::size_t>(cfg.channels), 9));
  for (auto _ : state) {
    benchmark::DoNotOptimize(loss_and_backward(p, seq, 9, cfg, exec).loss);
  }
}
BENCHMARK_CAPTURE(BM_LossAndGrad, serial, Exec::serial)->Arg(8)->Arg(24);
BENCHMARK_CAPTURE(BM_LossAndGrad, parallel, Exec::parallel)->Arg(8)->Arg(24);

}  // namespace
}  // namespace refseq

BENCHMARK_MAIN();
