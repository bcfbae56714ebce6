// Copyright 2026 The refseq Authors
// SPDX-License-Identifier: Apache-2.0

#include "refseq/kernels.hpp"

#include <cmath>
#include <cstdlib>
#include <string>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace refseq::kernels {

int worker_count() {
  if (const char* env = std::getenv("REFSEQ_WORKERS")) {
    const int n = std::atoi(env);
    if (n >= 1) return n;
  }
#ifdef _OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

namespace {

template <typename T>
void check_matmul(const BasicMatrix<T>& a, const BasicMatrix<T>& b,
                  const BasicMatrix<T>& out) {
  if (a.cols() != b.rows() || out.rows() != a.rows() || out.cols() != b.cols()) {
    throw ValidationError("matmul shape mismatch");
  }
}

// One output row: out_row (+)= a_row * b. Shared by both paths so the
// summation order is identical.
template <typename T>
inline void matmul_row(const T* a_row, const BasicMatrix<T>& b, T* out_row,
                       bool accumulate) {
  const std::size_t k = b.rows();
  const std::size_t m = b.cols();
  if (!accumulate) {
    for (std::size_t j = 0; j < m; ++j) out_row[j] = T{0};
  }
  for (std::size_t p = 0; p < k; ++p) {
    const T av = a_row[p];
    const T* b_row = b.data() + p * m;
    for (std::size_t j = 0; j < m; ++j) out_row[j] += av * b_row[j];
  }
}

template <typename T>
inline void rope_row(T* x, const T* ang, std::size_t heads,
                     std::size_t half, bool inverse) {
  for (std::size_t i = 0; i < half; ++i) {
    const T a = inverse ? -ang[i] : ang[i];
    if (a == T{0}) continue;
    const T c = std::cos(a);
    const T s = std::sin(a);
    for (std::size_t h = 0; h < heads; ++h) {
      T* pair = x + h * 2 * half + 2 * i;
      const T e = pair[0];
      const T o = pair[1];
      pair[0] = e * c - o * s;
      pair[1] = e * s + o * c;
    }
  }
}

}  // namespace

namespace serial {

template <typename T>
void matmul(const BasicMatrix<T>& a, const BasicMatrix<T>& b,
            BasicMatrix<T>& out, bool accumulate) {
  check_matmul(a, b, out);
  for (std::size_t r = 0; r < a.rows(); ++r) {
    matmul_row(a.data() + r * a.cols(), b, out.data() + r * out.cols(),
               accumulate);
  }
}

template <typename T>
void rope_rows(BasicMatrix<T>& x, const BasicMatrix<T>& angles,
               std::size_t heads, bool inverse) {
  const std::size_t half = angles.cols();
  if (x.rows() != angles.rows() || x.cols() != heads * 2 * half) {
    throw ValidationError("rope_rows shape mismatch");
  }
  for (std::size_t r = 0; r < x.rows(); ++r) {
    rope_row(x.data() + r * x.cols(), angles.data() + r * half, heads, half,
             inverse);
  }
}

}  // namespace serial

template <typename T>
void matmul(const BasicMatrix<T>& a, const BasicMatrix<T>& b,
            BasicMatrix<T>& out, bool accumulate, Exec exec) {
  if (exec == Exec::serial) {
    serial::matmul(a, b, out, accumulate);
    return;
  }
  check_matmul(a, b, out);
  const std::ptrdiff_t n = static_cast<std::ptrdiff_t>(a.rows());
#pragma omp parallel for schedule(static) num_threads(worker_count())
  for (std::ptrdiff_t r = 0; r < n; ++r) {
    matmul_row(a.data() + r * a.cols(), b, out.data() + r * out.cols(),
               accumulate);
  }
}

template <typename T>
void matmul_at_b(const BasicMatrix<T>& a, const BasicMatrix<T>& b,
                 BasicMatrix<T>& out, bool accumulate, Exec exec) {
  if (a.rows() != b.rows() || out.rows() != a.cols() || out.cols() != b.cols()) {
    throw ValidationError("matmul_at_b shape mismatch");
  }
  const std::size_t n = a.rows();
  const std::size_t k = a.cols();
  const std::size_t m = b.cols();
  // Each output row p accumulates over n in ascending order on both paths.
  auto row = [&](std::size_t p) {
    T* o = out.data() + p * m;
    if (!accumulate) {
      for (std::size_t j = 0; j < m; ++j) o[j] = T{0};
    }
    for (std::size_t i = 0; i < n; ++i) {
      const T av = a.data()[i * k + p];
      if (av == T{0}) continue;
      const T* br = b.data() + i * m;
      for (std::size_t j = 0; j < m; ++j) o[j] += av * br[j];
    }
  };
  if (exec == Exec::serial) {
    for (std::size_t p = 0; p < k; ++p) row(p);
    return;
  }
#pragma omp parallel for schedule(static) num_threads(worker_count())
  for (std::ptrdiff_t p = 0; p < static_cast<std::ptrdiff_t>(k); ++p) {
    row(static_cast<std::size_t>(p));
  }
}

template <typename T>
void matmul_a_bt(const BasicMatrix<T>& a, const BasicMatrix<T>& b,
                 BasicMatrix<T>& out, bool accumulate, Exec exec) {
  if (a.cols() != b.cols() || out.rows() != a.rows() || out.cols() != b.rows()) {
    throw ValidationError("matmul_a_bt shape mismatch");
  }
  const std::size_t m = a.cols();
  const std::size_t k = b.rows();
  auto row = [&](std::size_t r) {
    const T* ar = a.data() + r * m;
    T* o = out.data() + r * k;
    for (std::size_t p = 0; p < k; ++p) {
      const T* br = b.data() + p * m;
      T acc{0};
      for (std::size_t j = 0; j < m; ++j) acc += ar[j] * br[j];
      o[p] = accumulate ? o[p] + acc : acc;
    }
  };
  if (exec == Exec::serial) {
    for (std::size_t r = 0; r < a.rows(); ++r) row(r);
    return;
  }
#pragma omp parallel for schedule(static) num_threads(worker_count())
  for (std::ptrdiff_t r = 0; r < static_cast<std::ptrdiff_t>(a.rows()); ++r) {
    row(static_cast<std::size_t>(r));
  }
}

template <typename T>
void rope_rows(BasicMatrix<T>& x, const BasicMatrix<T>& angles,
               std::size_t heads, bool inverse, Exec exec) {
  if (exec == Exec::serial) {
    serial::rope_rows(x, angles, heads, inverse);
    return;
  }
  const std::size_t half = angles.cols();
  if (x.rows() != angles.rows() || x.cols() != heads * 2 * half) {
    throw ValidationError("rope_rows shape mismatch");
  }
  const std::ptrdiff_t n = static_cast<std::ptrdiff_t>(x.rows());
#pragma omp parallel for schedule(static) num_threads(worker_count())
  for (std::ptrdiff_t r = 0; r < n; ++r) {
    rope_row(x.data() + r * x.cols(), angles.data() + r * half, heads, half,
             inverse);
  }
}

#define REFSEQ_INSTANTIATE(T)                                                  \
  template void matmul<T>(const BasicMatrix<T>&, const BasicMatrix<T>&,        \
                          BasicMatrix<T>&, bool, Exec);                        \
  template void matmul_at_b<T>(const BasicMatrix<T>&, const BasicMatrix<T>&,   \
                               BasicMatrix<T>&, bool, Exec);                   \
  template void matmul_a_bt<T>(const BasicMatrix<T>&, const BasicMatrix<T>&,   \
                               BasicMatrix<T>&, bool, Exec);                   \
  template void rope_rows<T>(BasicMatrix<T>&, const BasicMatrix<T>&,           \
                             std::size_t, bool, Exec);                         \
  template void serial::matmul<T>(const BasicMatrix<T>&, const BasicMatrix<T>&, \
                                  BasicMatrix<T>&, bool);                      \
  template void serial::rope_rows<T>(BasicMatrix<T>&, const BasicMatrix<T>&,   \
                                     std::size_t, bool);

REFSEQ_INSTANTIATE(float)
REFSEQ_INSTANTIATE(double)
REFSEQ_INSTANTIATE(long double)

#undef REFSEQ_INSTANTIATE

}  // namespace refseq::kernels
