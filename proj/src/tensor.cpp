#include "tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

namespace steer {

namespace {

std::string shape_str(const Tensor2D& t) {
  return std::to_string(t.rows) + "x" + std::to_string(t.cols);
}

}  // namespace

Tensor2D matmul(const Tensor2D& a, const Tensor2D& b, OpCounter* counter) {
  if (a.cols != b.rows) {
    fail(ErrorCode::invalid_argument,
         "matmul: dimension mismatch " + shape_str(a) + " * " + shape_str(b));
  }
  Tensor2D c(a.rows, b.cols);
  for (size_t i = 0; i < a.rows; ++i) {
    const double* arow = a.row(i);
    double* crow = c.row(i);
    for (size_t k = 0; k < a.cols; ++k) {
      const double aik = arow[k];
      const double* brow = b.row(k);
      for (size_t j = 0; j < b.cols; ++j) {
        crow[j] += aik * brow[j];
      }
    }
  }
  if (counter != nullptr) {
    counter->fused_multiply_adds += static_cast<uint64_t>(a.rows) * a.cols * b.cols;
  }
  return c;
}

Tensor2D transpose(const Tensor2D& a) {
  Tensor2D t(a.cols, a.rows);
  for (size_t i = 0; i < a.rows; ++i) {
    for (size_t j = 0; j < a.cols; ++j) {
      t.at(j, i) = a.at(i, j);
    }
  }
  return t;
}

Tensor2D row_softmax(const Tensor2D& a, bool causal_mask) {
  if (causal_mask) {
    if (a.rows != a.cols) {
      fail(ErrorCode::invalid_argument,
           "row_softmax: causal mask requires a square matrix, got " + shape_str(a));
    }
    return row_softmax_masked(a, 0);
  }
  Tensor2D out(a.rows, a.cols);
  for (size_t i = 0; i < a.rows; ++i) {
    if (a.cols == 0) {
      fail(ErrorCode::invalid_argument, "row_softmax: row " + std::to_string(i) +
                                            " has no entries to normalize");
    }
    const double* in = a.row(i);
    double* o = out.row(i);
    double mx = in[0];
    for (size_t j = 1; j < a.cols; ++j) mx = std::max(mx, in[j]);
    double sum = 0.0;
    for (size_t j = 0; j < a.cols; ++j) {
      o[j] = std::exp(in[j] - mx);
      sum += o[j];
    }
    for (size_t j = 0; j < a.cols; ++j) o[j] /= sum;
  }
  return out;
}

Tensor2D row_softmax_masked(const Tensor2D& a, size_t query_offset, OpCounter* counter) {
  Tensor2D out(a.rows, a.cols);
  for (size_t i = 0; i < a.rows; ++i) {
    const size_t limit = std::min(a.cols, i + query_offset + 1);  // unmasked: j < limit
    if (limit == 0) {
      fail(ErrorCode::invalid_argument,
           "row_softmax: row " + std::to_string(i) + " is fully masked, cannot normalize");
    }
    const double* in = a.row(i);
    double* o = out.row(i);
    double mx = in[0];
    for (size_t j = 1; j < limit; ++j) mx = std::max(mx, in[j]);
    double sum = 0.0;
    for (size_t j = 0; j < limit; ++j) {
      o[j] = std::exp(in[j] - mx);
      sum += o[j];
    }
    for (size_t j = 0; j < limit; ++j) o[j] /= sum;
    // entries at j >= limit stay exactly 0
  }
  if (counter != nullptr) counter->softmax_rows += a.rows;
  return out;
}

Tensor2D rms_norm(const Tensor2D& x, std::span<const double> gain, double epsilon) {
  if (gain.size() != x.cols) {
    fail(ErrorCode::invalid_argument,
         "rms_norm: gain length " + std::to_string(gain.size()) + " != cols " +
             std::to_string(x.cols));
  }
  Tensor2D out(x.rows, x.cols);
  for (size_t i = 0; i < x.rows; ++i) {
    const double* in = x.row(i);
    double* o = out.row(i);
    double ms = 0.0;
    for (size_t j = 0; j < x.cols; ++j) ms += in[j] * in[j];
    ms = x.cols == 0 ? 0.0 : ms / static_cast<double>(x.cols);
    const double inv = 1.0 / std::sqrt(ms + epsilon);
    for (size_t j = 0; j < x.cols; ++j) o[j] = in[j] * inv * gain[j];
  }
  return out;
}

bool all_finite(const Tensor2D& t) {
  return std::all_of(t.data.begin(), t.data.end(), [](double v) { return std::isfinite(v); });
}

bool all_finite(const Tensor3D& t) {
  return std::all_of(t.data.begin(), t.data.end(), [](double v) { return std::isfinite(v); });
}

std::string to_hex16(uint64_t value) {
  static const char* digits = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i) {
    s[static_cast<size_t>(i)] = digits[value & 0xF];
    value >>= 4;
  }
  return s;
}

bool parse_hex16(std::string_view text, uint64_t& out) {
  if (text.size() != 16) return false;
  uint64_t v = 0;
  for (char c : text) {
    v <<= 4;
    if (c >= '0' && c <= '9') {
      v |= static_cast<uint64_t>(c - '0');
    } else if (c >= 'a' && c <= 'f') {
      v |= static_cast<uint64_t>(c - 'a' + 10);
    } else if (c >= 'A' && c <= 'F') {
      v |= static_cast<uint64_t>(c - 'A' + 10);
    } else {
      return false;
    }
  }
  out = v;
  return true;
}

}  // namespace steer
