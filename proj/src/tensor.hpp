#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "common.hpp"

namespace steer {

// Counts the work done by the numeric kernels inside one inference session.
// fused_multiply_adds counts one unit per a*b+c inside matmul;
// softmax_rows counts normalized attention rows. Both only ever grow.
struct OpCounter {
  uint64_t fused_multiply_adds = 0;
  uint64_t softmax_rows = 0;
};

// Dense row-major matrix of doubles. All engine math runs in 64-bit;
// only the on-disk formats narrow to f32.
struct Tensor2D {
  size_t rows = 0;
  size_t cols = 0;
  std::vector<double> data;

  Tensor2D() = default;
  Tensor2D(size_t r, size_t c) : rows(r), cols(c), data(r * c, 0.0) {}

  double& at(size_t i, size_t j) { return data[i * cols + j]; }
  double at(size_t i, size_t j) const { return data[i * cols + j]; }
  double* row(size_t i) { return data.data() + i * cols; }
  const double* row(size_t i) const { return data.data() + i * cols; }
  bool same_shape(const Tensor2D& o) const { return rows == o.rows && cols == o.cols; }
};

// Dense row-major rank-3 array; index order (i, j, k) with k fastest.
struct Tensor3D {
  size_t d0 = 0;
  size_t d1 = 0;
  size_t d2 = 0;
  std::vector<double> data;

  Tensor3D() = default;
  Tensor3D(size_t a, size_t b, size_t c) : d0(a), d1(b), d2(c), data(a * b * c, 0.0) {}

  double& at(size_t i, size_t j, size_t k) { return data[(i * d1 + j) * d2 + k]; }
  double at(size_t i, size_t j, size_t k) const { return data[(i * d1 + j) * d2 + k]; }
  double* row(size_t i, size_t j) { return data.data() + (i * d1 + j) * d2; }
  const double* row(size_t i, size_t j) const { return data.data() + (i * d1 + j) * d2; }
  bool same_shape(const Tensor3D& o) const { return d0 == o.d0 && d1 == o.d1 && d2 == o.d2; }
};

// a(m,k) * b(k,n). Accumulation over k runs in ascending order for every
// output element, so partial products are bit-reproducible across the
// prefill and extend paths.
Tensor2D matmul(const Tensor2D& a, const Tensor2D& b, OpCounter* counter = nullptr);

Tensor2D transpose(const Tensor2D& a);

// Row-wise softmax, stabilized by per-row max subtraction. With
// causal_mask set the input must be square and entries above the
// diagonal come out exactly zero.
Tensor2D row_softmax(const Tensor2D& a, bool causal_mask);

// Causal softmax for rows that sit at absolute positions
// query_offset..query_offset+rows-1 of a longer sequence: entry (i, j)
// is masked iff j > i + query_offset. A row with no unmasked entries is
// rejected. row_softmax(a, true) == row_softmax_masked(a, 0).
Tensor2D row_softmax_masked(const Tensor2D& a, size_t query_offset, OpCounter* counter = nullptr);

// Each row scaled to unit root-mean-square (plus epsilon), then
// multiplied elementwise by gain. gain.size() must equal x.cols.
Tensor2D rms_norm(const Tensor2D& x, std::span<const double> gain, double epsilon);

bool all_finite(const Tensor2D& t);
bool all_finite(const Tensor3D& t);

}  // namespace steer
