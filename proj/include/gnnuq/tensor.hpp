#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "gnnuq/error.hpp"

namespace gnnuq {

// Dense row-major f64 tensor. Everything the model needs is rank 1 or 2;
// rank is kept as an explicit (rows, cols) pair with rank-1 tensors stored
// as a single row.
struct Tensor {
  std::int64_t rows = 0;
  std::int64_t cols = 0;
  std::vector<double> data;

  Tensor() = default;
  Tensor(std::int64_t r, std::int64_t c)
      : rows(r), cols(c), data(static_cast<std::size_t>(r * c), 0.0) {}

  static Tensor zeros(std::int64_t r, std::int64_t c) { return Tensor(r, c); }

  static Tensor full(std::int64_t r, std::int64_t c, double v) {
    Tensor t(r, c);
    for (double& x : t.data) x = v;
    return t;
  }

  static Tensor row(std::vector<double> v) {
    Tensor t;
    t.rows = 1;
    t.cols = static_cast<std::int64_t>(v.size());
    t.data = std::move(v);
    return t;
  }

  static Tensor column(std::vector<double> v) {
    Tensor t;
    t.rows = static_cast<std::int64_t>(v.size());
    t.cols = 1;
    t.data = std::move(v);
    return t;
  }

  std::size_t size() const { return data.size(); }

  double& at(std::int64_t r, std::int64_t c) {
    return data[static_cast<std::size_t>(r * cols + c)];
  }
  double at(std::int64_t r, std::int64_t c) const {
    return data[static_cast<std::size_t>(r * cols + c)];
  }

  double* row_ptr(std::int64_t r) { return data.data() + r * cols; }
  const double* row_ptr(std::int64_t r) const { return data.data() + r * cols; }

  bool same_shape(const Tensor& o) const {
    return rows == o.rows && cols == o.cols;
  }

  std::string shape_str() const {
    return "[" + std::to_string(rows) + "," + std::to_string(cols) + "]";
  }

  void fill(double v) {
    for (double& x : data) x = v;
  }
};

inline void require_same_shape(const Tensor& a, const Tensor& b,
                               const char* op) {
  if (!a.same_shape(b))
    throw Error(errc::ShapeMismatch, std::string(op) + ": " + a.shape_str() +
                                         " vs " + b.shape_str());
}

}  // namespace gnnuq
