// Copyright 2026 The refseq Authors
// SPDX-License-Identifier: Apache-2.0

// Data-parallel inner loops. Each kernel has an OpenMP version and a serial
// reference with the same arithmetic order per output element, so both
// produce bit-identical results.

#pragma once

#include <cstddef>
#include <span>

#include "refseq/core.hpp"

namespace refseq::kernels {

enum class Exec { serial, parallel };

// Worker cap from REFSEQ_WORKERS, or the OpenMP default when unset.
int worker_count();

// out[r, :] (+)= a[r, :] * b   (a: n x k, b: k x m, out: n x m)
template <typename T>
void matmul(const BasicMatrix<T>& a, const BasicMatrix<T>& b,
            BasicMatrix<T>& out, bool accumulate, Exec exec);

// out (+)= a^T * b   (a: n x k, b: n x m, out: k x m). Gradient of weights.
template <typename T>
void matmul_at_b(const BasicMatrix<T>& a, const BasicMatrix<T>& b,
                 BasicMatrix<T>& out, bool accumulate, Exec exec);

// out (+)= a * b^T   (a: n x m, b: k x m, out: n x k). Gradient of inputs.
template <typename T>
void matmul_a_bt(const BasicMatrix<T>& a, const BasicMatrix<T>& b,
                 BasicMatrix<T>& out, bool accumulate, Exec exec);

// In-place interleaved rotation of every head of every row.
// x: L x (heads * head_dim), angles: L x (head_dim / 2).
// inverse = true rotates by -angle (the adjoint, used in backward).
template <typename T>
void rope_rows(BasicMatrix<T>& x, const BasicMatrix<T>& angles,
               std::size_t heads, bool inverse, Exec exec);

namespace serial {
template <typename T>
void matmul(const BasicMatrix<T>& a, const BasicMatrix<T>& b,
            BasicMatrix<T>& out, bool accumulate);
template <typename T>
void rope_rows(BasicMatrix<T>& x, const BasicMatrix<T>& angles,
               std::size_t heads, bool inverse);
}  // namespace serial

}  // namespace refseq::kernels
