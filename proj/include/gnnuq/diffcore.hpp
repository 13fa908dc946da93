#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <span>
#include <utility>
#include <vector>

#include "gnnuq/error.hpp"
#include "gnnuq/tensor.hpp"

namespace gnnuq {

constexpr double kLog2Pi = 1.8378770664093454836;

// Activation menu. Order matches the architecture gene so indices map 1:1.
enum class Act : std::uint8_t {
  Sigmoid,
  Tanh,
  Relu,
  Linear,
  Softplus,
  LeakyRelu,
  Relu6,
  Elu,
};

constexpr double kLeakySlope = 0.2;

inline double act_forward(Act k, double x) {
  switch (k) {
    case Act::Sigmoid:
      return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x))
                      : std::exp(x) / (1.0 + std::exp(x));
    case Act::Tanh:
      return std::tanh(x);
    case Act::Relu:
      return x > 0.0 ? x : 0.0;
    case Act::Linear:
      return x;
    case Act::Softplus:
      // overflow-safe branches: log(1+e^x) -> x for large x, e^x for small
      if (x > 30.0) return x;
      if (x < -30.0) return std::exp(x);
      return std::log1p(std::exp(x));
    case Act::LeakyRelu:
      return x > 0.0 ? x : kLeakySlope * x;
    case Act::Relu6:
      return x < 0.0 ? 0.0 : (x > 6.0 ? 6.0 : x);
    case Act::Elu:
      return x > 0.0 ? x : std::expm1(x);
  }
  return x;
}

// Derivative given input x and the already-computed output y.
inline double act_deriv(Act k, double x, double y) {
  switch (k) {
    case Act::Sigmoid:
      return y * (1.0 - y);
    case Act::Tanh:
      return 1.0 - y * y;
    case Act::Relu:
      return x > 0.0 ? 1.0 : 0.0;
    case Act::Linear:
      return 1.0;
    case Act::Softplus:
      return act_forward(Act::Sigmoid, x);
    case Act::LeakyRelu:
      return x > 0.0 ? 1.0 : kLeakySlope;
    case Act::Relu6:
      return (x > 0.0 && x < 6.0) ? 1.0 : 0.0;
    case Act::Elu:
      return x > 0.0 ? 1.0 : y + 1.0;
  }
  return 1.0;
}

enum class Red : std::uint8_t { Sum, Mean, Max };

// Reverse-mode tape over dense f64 tensors.
//
// Usage: record leaves with var() (trainable) or constant() (no gradient),
// build the graph with the op methods (forward values are computed eagerly),
// then backward(loss) fills gradients for every var-reachable node.
//
// Segment ops keep non-owning views of their id/mask arrays; callers must
// keep those alive until the tape is reset. An empty mask span means
// "everything unmasked". reset() keeps the value buffers pooled so a tape
// reused across many small graphs stops allocating after warm-up.
class Tape {
 public:
  int constant(Tensor v) { return push_leaf(std::move(v), false); }
  int var(Tensor v) { return push_leaf(std::move(v), true); }

  int matmul(int a, int b) {
    const Tensor& A = val(a);
    const Tensor& B = val(b);
    if (A.cols != B.rows)
      throw Error(errc::ShapeMismatch,
                  "matmul: " + A.shape_str() + " x " + B.shape_str());
    Tensor out = take(A.rows, B.cols);
    matmul_acc(A, B, out);
    return push(Op::MatMul, a, b, std::move(out));
  }

  int add(int a, int b) { return ew(Op::Add, a, b); }
  int sub(int a, int b) { return ew(Op::Sub, a, b); }
  int mul(int a, int b) { return ew(Op::Mul, a, b); }
  int div(int a, int b) { return ew(Op::Div, a, b); }

  // A [R,C] + v [1,C], broadcast over rows (bias add)
  int add_rowvec(int a, int b) { return rowvec(Op::AddRow, a, b); }
  // A [R,C] * v [1,C], broadcast over rows (feature-wise scale)
  int mul_rowvec(int a, int b) { return rowvec(Op::MulRow, a, b); }

  // A [R,C] * u [R,1], broadcast over columns (row-wise scale)
  int mul_colvec(int a, int b) {
    const Tensor& A = val(a);
    const Tensor& u = val(b);
    if (u.cols != 1 || u.rows != A.rows)
      throw Error(errc::ShapeMismatch,
                  "mul_colvec: " + A.shape_str() + " vs " + u.shape_str());
    Tensor out = take(A.rows, A.cols);
    for (std::int64_t r = 0; r < A.rows; ++r) {
      const double s = u.data[static_cast<std::size_t>(r)];
      const double* ap = A.row_ptr(r);
      double* op = out.row_ptr(r);
      for (std::int64_t c = 0; c < A.cols; ++c) op[c] = ap[c] * s;
    }
    return push(Op::MulCol, a, b, std::move(out));
  }

  int add_scalar(int a, double s) {
    const Tensor& A = val(a);
    Tensor out = take(A.rows, A.cols);
    for (std::size_t i = 0; i < A.size(); ++i) out.data[i] = A.data[i] + s;
    int id = push(Op::AddScalar, a, -1, std::move(out));
    nodes_[static_cast<std::size_t>(id)].scalar = s;
    return id;
  }

  int mul_scalar(int a, double s) {
    const Tensor& A = val(a);
    Tensor out = take(A.rows, A.cols);
    for (std::size_t i = 0; i < A.size(); ++i) out.data[i] = A.data[i] * s;
    int id = push(Op::MulScalar, a, -1, std::move(out));
    nodes_[static_cast<std::size_t>(id)].scalar = s;
    return id;
  }

  int concat_cols(int a, int b) {
    const Tensor& A = val(a);
    const Tensor& B = val(b);
    if (A.rows != B.rows)
      throw Error(errc::ShapeMismatch,
                  "concat_cols: " + A.shape_str() + " vs " + B.shape_str());
    Tensor out = take(A.rows, A.cols + B.cols);
    for (std::int64_t r = 0; r < A.rows; ++r) {
      double* op = out.row_ptr(r);
      const double* ap = A.row_ptr(r);
      const double* bp = B.row_ptr(r);
      for (std::int64_t c = 0; c < A.cols; ++c) op[c] = ap[c];
      for (std::int64_t c = 0; c < B.cols; ++c) op[A.cols + c] = bp[c];
    }
    return push(Op::ConcatCols, a, b, std::move(out));
  }

  int reshape(int a, std::int64_t r, std::int64_t c) {
    const Tensor& A = val(a);
    if (r * c != A.rows * A.cols)
      throw Error(errc::ShapeMismatch,
                  "reshape: " + A.shape_str() + " -> [" + std::to_string(r) +
                      "," + std::to_string(c) + "]");
    Tensor out = take(r, c);
    out.data = A.data;  // row-major relayout is a straight copy
    return push(Op::Reshape, a, -1, std::move(out));
  }

  // Y[i,:] = A[idx[i],:]
  int gather_rows(int a, std::span<const std::int32_t> idx) {
    const Tensor& A = val(a);
    Tensor out = take(static_cast<std::int64_t>(idx.size()), A.cols);
    for (std::size_t i = 0; i < idx.size(); ++i) {
      const double* ap = A.row_ptr(idx[i]);
      double* op = out.row_ptr(static_cast<std::int64_t>(i));
      for (std::int64_t c = 0; c < A.cols; ++c) op[c] = ap[c];
    }
    int id = push(Op::GatherRows, a, -1, std::move(out));
    nodes_[static_cast<std::size_t>(id)].seg = idx;
    return id;
  }

  // zero-pad to new_rows rows (new_rows >= A.rows)
  int pad_rows(int a, std::int64_t new_rows) {
    const Tensor& A = val(a);
    if (new_rows < A.rows)
      throw Error(errc::ShapeMismatch, "pad_rows: shrinking not allowed");
    Tensor out = take(new_rows, A.cols);  // take() zero-fills
    for (std::int64_t r = 0; r < A.rows; ++r) {
      const double* ap = A.row_ptr(r);
      double* op = out.row_ptr(r);
      for (std::int64_t c = 0; c < A.cols; ++c) op[c] = ap[c];
    }
    return push(Op::PadRows, a, -1, std::move(out));
  }

  // [R,C] -> [R,1] reduction across the feature axis
  int row_reduce(int a, Red kind) {
    const Tensor& A = val(a);
    Tensor out = take(A.rows, 1);
    for (std::int64_t r = 0; r < A.rows; ++r) {
      const double* ap = A.row_ptr(r);
      double acc;
      if (kind == Red::Max) {
        acc = ap[0];
        for (std::int64_t c = 1; c < A.cols; ++c)
          if (ap[c] > acc) acc = ap[c];
      } else {
        acc = 0.0;
        for (std::int64_t c = 0; c < A.cols; ++c) acc += ap[c];
        if (kind == Red::Mean) acc /= static_cast<double>(A.cols);
      }
      out.data[static_cast<std::size_t>(r)] = acc;
    }
    int id = push(Op::RowReduce, a, -1, std::move(out));
    nodes_[static_cast<std::size_t>(id)].red = kind;
    return id;
  }

  // Rows of A grouped by seg ids into n_seg output rows. Masked rows (mask
  // entry 0) contribute nothing; a fully masked segment yields zeros under
  // mean/max by convention (counted in empty_segment_events()).
  int segment_reduce(int a, Red kind, std::span<const std::int32_t> seg,
                     std::span<const double> mask, std::int64_t n_seg) {
    const Tensor& A = val(a);
    check_segments(A, seg, mask, n_seg, "segment_reduce");
    Tensor out = take(n_seg, A.cols);
    counts_.assign(static_cast<std::size_t>(n_seg), 0);
    if (kind == Red::Max)
      out.fill(-std::numeric_limits<double>::infinity());
    for (std::size_t i = 0; i < seg.size(); ++i) {
      if (!mask.empty() && mask[i] == 0.0) continue;
      const std::int32_t s = seg[i];
      ++counts_[static_cast<std::size_t>(s)];
      const double* ap = A.row_ptr(static_cast<std::int64_t>(i));
      double* op = out.row_ptr(s);
      if (kind == Red::Max) {
        for (std::int64_t c = 0; c < A.cols; ++c)
          if (ap[c] > op[c]) op[c] = ap[c];
      } else {
        for (std::int64_t c = 0; c < A.cols; ++c) op[c] += ap[c];
      }
    }
    for (std::int64_t s = 0; s < n_seg; ++s) {
      const std::int64_t n = counts_[static_cast<std::size_t>(s)];
      double* op = out.row_ptr(s);
      if (n == 0) {
        if (kind != Red::Sum) ++empty_segment_events_;
        for (std::int64_t c = 0; c < A.cols; ++c) op[c] = 0.0;
      } else if (kind == Red::Mean) {
        const double inv = 1.0 / static_cast<double>(n);
        for (std::int64_t c = 0; c < A.cols; ++c) op[c] *= inv;
      }
    }
    int id = push(Op::SegReduce, a, -1, std::move(out));
    Node& nd = nodes_[static_cast<std::size_t>(id)];
    nd.red = kind;
    nd.seg = seg;
    nd.mask = mask;
    return id;
  }

  // Softmax of a score column within each segment; masked entries get zero
  // probability, an empty segment produces no output mass at all.
  int segment_softmax(int a, std::span<const std::int32_t> seg,
                      std::span<const double> mask, std::int64_t n_seg) {
    const Tensor& A = val(a);
    if (A.cols != 1)
      throw Error(errc::ShapeMismatch,
                  "segment_softmax: expected a score column, got " +
                      A.shape_str());
    check_segments(A, seg, mask, n_seg, "segment_softmax");
    scratch_.assign(static_cast<std::size_t>(n_seg),
                    -std::numeric_limits<double>::infinity());
    for (std::size_t i = 0; i < seg.size(); ++i) {
      if (!mask.empty() && mask[i] == 0.0) continue;
      double x = A.data[i];
      double& m = scratch_[static_cast<std::size_t>(seg[i])];
      if (x > m) m = x;
    }
    Tensor out = take(A.rows, 1);
    scratch2_.assign(static_cast<std::size_t>(n_seg), 0.0);
    for (std::size_t i = 0; i < seg.size(); ++i) {
      if (!mask.empty() && mask[i] == 0.0) {
        out.data[i] = 0.0;
        continue;
      }
      double e = std::exp(A.data[i] - scratch_[static_cast<std::size_t>(seg[i])]);
      out.data[i] = e;
      scratch2_[static_cast<std::size_t>(seg[i])] += e;
    }
    for (std::size_t i = 0; i < seg.size(); ++i) {
      if (!mask.empty() && mask[i] == 0.0) continue;
      out.data[i] /= scratch2_[static_cast<std::size_t>(seg[i])];
    }
    int id = push(Op::SegSoftmax, a, -1, std::move(out));
    Node& nd = nodes_[static_cast<std::size_t>(id)];
    nd.seg = seg;
    nd.mask = mask;
    nd.n_seg = n_seg;
    return id;
  }

  // Per-row matrix-vector product: M [E, d*d] as E row-major d x d matrices,
  // x [E, d] -> y [E, d]. This is the Gilmer edge-network application.
  int batched_matvec(int m, int x, std::int64_t d) {
    const Tensor& M = val(m);
    const Tensor& X = val(x);
    if (M.cols != d * d || X.cols != d || M.rows != X.rows)
      throw Error(errc::ShapeMismatch, "batched_matvec: " + M.shape_str() +
                                           " vs " + X.shape_str() + " d=" +
                                           std::to_string(d));
    Tensor out = take(X.rows, d);
    for (std::int64_t e = 0; e < X.rows; ++e) {
      const double* mp = M.row_ptr(e);
      const double* xp = X.row_ptr(e);
      double* op = out.row_ptr(e);
      for (std::int64_t r = 0; r < d; ++r) {
        const double* mr = mp + r * d;
        double acc = 0.0;
        for (std::int64_t c = 0; c < d; ++c) acc += mr[c] * xp[c];
        op[r] = acc;
      }
    }
    int id = push(Op::BatchedMatVec, m, x, std::move(out));
    nodes_[static_cast<std::size_t>(id)].n_seg = d;
    return id;
  }

  int activation(int a, Act k) {
    const Tensor& A = val(a);
    Tensor out = take(A.rows, A.cols);
    for (std::size_t i = 0; i < A.size(); ++i)
      out.data[i] = act_forward(k, A.data[i]);
    int id = push(Op::Activation, a, -1, std::move(out));
    nodes_[static_cast<std::size_t>(id)].act = k;
    return id;
  }

  int log_(int a) {
    const Tensor& A = val(a);
    Tensor out = take(A.rows, A.cols);
    for (std::size_t i = 0; i < A.size(); ++i) out.data[i] = std::log(A.data[i]);
    return push(Op::Log, a, -1, std::move(out));
  }

  int slice_col(int a, std::int64_t j) {
    const Tensor& A = val(a);
    if (j < 0 || j >= A.cols)
      throw Error(errc::ShapeMismatch, "slice_col: column out of range");
    Tensor out = take(A.rows, 1);
    for (std::int64_t r = 0; r < A.rows; ++r)
      out.data[static_cast<std::size_t>(r)] = A.at(r, j);
    int id = push(Op::SliceCol, a, -1, std::move(out));
    nodes_[static_cast<std::size_t>(id)].n_seg = j;
    return id;
  }

  struct GruParams {
    int Wz, Uz, bz, Wr, Ur, br, Wh, Uh, bh;
  };

  // z = sigmoid(x Wz + h Uz + bz);  r = sigmoid(x Wr + h Ur + br)
  // htilde = tanh(x Wh + (r*h) Uh + bh);  h' = (1-z)*h + z*htilde
  // Composed from primitives so the backward pass needs no special case.
  int gru_cell(int h, int x, const GruParams& p) {
    int z = activation(
        add_rowvec(add(matmul(x, p.Wz), matmul(h, p.Uz)), p.bz), Act::Sigmoid);
    int r = activation(
        add_rowvec(add(matmul(x, p.Wr), matmul(h, p.Ur)), p.br), Act::Sigmoid);
    int ht = activation(
        add_rowvec(add(matmul(x, p.Wh), matmul(mul(r, h), p.Uh)), p.bh),
        Act::Tanh);
    int one_minus_z = add_scalar(mul_scalar(z, -1.0), 1.0);
    return add(mul(one_minus_z, h), mul(z, ht));
  }

  const Tensor& value(int id) const {
    return vals_[static_cast<std::size_t>(id)];
  }

  bool has_grad(int id) const {
    return static_cast<std::size_t>(id) < grads_.size() &&
           !grads_[static_cast<std::size_t>(id)].data.empty();
  }

  const Tensor& grad(int id) const {
    return grads_[static_cast<std::size_t>(id)];
  }

  // Reverse accumulation from a scalar loss node.
  void backward(int loss) {
    const Tensor& L = val(loss);
    if (L.size() != 1)
      throw Error(errc::NonScalarLoss,
                  "backward: loss has shape " + L.shape_str());
    for (Tensor& g : grads_) release(g);
    grads_.assign(nodes_.size(), Tensor{});
    if (!nodes_[static_cast<std::size_t>(loss)].needs) return;
    grads_[static_cast<std::size_t>(loss)] = take(1, 1);
    grads_[static_cast<std::size_t>(loss)].data[0] = 1.0;
    for (int id = loss; id >= 0; --id) {
      const Node& nd = nodes_[static_cast<std::size_t>(id)];
      Tensor& gy = grads_[static_cast<std::size_t>(id)];
      if (!nd.needs || gy.data.empty()) continue;
      backprop(id, nd, gy);
    }
  }

  std::size_t size() const { return nodes_.size(); }
  std::size_t empty_segment_events() const { return empty_segment_events_; }

  // Clears the graph but pools every buffer for reuse.
  void reset() {
    for (Tensor& t : vals_) release(t);
    for (Tensor& t : grads_) release(t);
    vals_.clear();
    grads_.clear();
    nodes_.clear();
  }

 private:
  enum class Op : std::uint8_t {
    Const,
    Var,
    MatMul,
    Add,
    Sub,
    Mul,
    Div,
    AddRow,
    MulRow,
    MulCol,
    AddScalar,
    MulScalar,
    ConcatCols,
    Reshape,
    GatherRows,
    PadRows,
    RowReduce,
    SegReduce,
    SegSoftmax,
    BatchedMatVec,
    Activation,
    Log,
    SliceCol,
  };

  struct Node {
    Op op;
    Act act = Act::Linear;
    Red red = Red::Sum;
    bool needs = false;
    int a = -1;
    int b = -1;
    double scalar = 0.0;
    std::int64_t n_seg = 0;  // also: batched_matvec d, slice_col j
    std::span<const std::int32_t> seg;
    std::span<const double> mask;
  };

  const Tensor& val(int id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= vals_.size())
      throw Error(errc::ShapeMismatch, "bad node id");
    return vals_[static_cast<std::size_t>(id)];
  }

  int push_leaf(Tensor v, bool needs) {
    Node nd;
    nd.op = needs ? Op::Var : Op::Const;
    nd.needs = needs;
    nodes_.push_back(nd);
    vals_.push_back(std::move(v));
    return static_cast<int>(nodes_.size() - 1);
  }

  int push(Op op, int a, int b, Tensor out) {
    Node nd;
    nd.op = op;
    nd.a = a;
    nd.b = b;
    nd.needs = (a >= 0 && nodes_[static_cast<std::size_t>(a)].needs) ||
               (b >= 0 && nodes_[static_cast<std::size_t>(b)].needs);
    nodes_.push_back(nd);
    vals_.push_back(std::move(out));
    return static_cast<int>(nodes_.size() - 1);
  }

  int ew(Op op, int a, int b) {
    const Tensor& A = val(a);
    const Tensor& B = val(b);
    require_same_shape(A, B, "elementwise");
    Tensor out = take(A.rows, A.cols);
    switch (op) {
      case Op::Add:
        for (std::size_t i = 0; i < A.size(); ++i)
          out.data[i] = A.data[i] + B.data[i];
        break;
      case Op::Sub:
        for (std::size_t i = 0; i < A.size(); ++i)
          out.data[i] = A.data[i] - B.data[i];
        break;
      case Op::Mul:
        for (std::size_t i = 0; i < A.size(); ++i)
          out.data[i] = A.data[i] * B.data[i];
        break;
      case Op::Div:
        for (std::size_t i = 0; i < A.size(); ++i)
          out.data[i] = A.data[i] / B.data[i];
        break;
      default:
        break;
    }
    return push(op, a, b, std::move(out));
  }

  int rowvec(Op op, int a, int b) {
    const Tensor& A = val(a);
    const Tensor& v = val(b);
    if (v.rows != 1 || v.cols != A.cols)
      throw Error(errc::ShapeMismatch,
                  "rowvec broadcast: " + A.shape_str() + " vs " + v.shape_str());
    Tensor out = take(A.rows, A.cols);
    const bool is_add = (op == Op::AddRow);
    for (std::int64_t r = 0; r < A.rows; ++r) {
      const double* ap = A.row_ptr(r);
      double* outp = out.row_ptr(r);
      if (is_add) {
        for (std::int64_t c = 0; c < A.cols; ++c) outp[c] = ap[c] + v.data[c];
      } else {
        for (std::int64_t c = 0; c < A.cols; ++c) outp[c] = ap[c] * v.data[c];
      }
    }
    return push(op, a, b, std::move(out));
  }

  void check_segments(const Tensor& A, std::span<const std::int32_t> seg,
                      std::span<const double> mask, std::int64_t n_seg,
                      const char* who) const {
    if (static_cast<std::int64_t>(seg.size()) != A.rows)
      throw Error(errc::ShapeMismatch,
                  std::string(who) + ": segment ids length mismatch");
    if (!mask.empty() && mask.size() != seg.size())
      throw Error(errc::ShapeMismatch,
                  std::string(who) + ": mask length mismatch");
    for (std::int32_t s : seg)
      if (s < 0 || s >= n_seg)
        throw Error(errc::ShapeMismatch,
                    std::string(who) + ": segment id out of range");
  }

  Tensor take(std::int64_t r, std::int64_t c) {
    Tensor t;
    t.rows = r;
    t.cols = c;
    if (!pool_.empty()) {
      t.data = std::move(pool_.back());
      pool_.pop_back();
    }
    t.data.assign(static_cast<std::size_t>(r * c), 0.0);
    return t;
  }

  void release(Tensor& t) {
    if (t.data.capacity() > 0) pool_.push_back(std::move(t.data));
    t.data = {};
    t.rows = t.cols = 0;
  }

  Tensor& grad_buf(int id) {
    Tensor& g = grads_[static_cast<std::size_t>(id)];
    if (g.data.empty()) {
      const Tensor& v = vals_[static_cast<std::size_t>(id)];
      g = take(v.rows, v.cols);
    }
    return g;
  }

  bool wants(int id) const {
    return id >= 0 && nodes_[static_cast<std::size_t>(id)].needs;
  }

  static void matmul_acc(const Tensor& A, const Tensor& B, Tensor& C) {
    // ikj order: streams B and C rows, vectorizes well
    for (std::int64_t i = 0; i < A.rows; ++i) {
      const double* ap = A.row_ptr(i);
      double* cp = C.row_ptr(i);
      for (std::int64_t k = 0; k < A.cols; ++k) {
        const double t = ap[k];
        if (t == 0.0) continue;
        const double* bp = B.row_ptr(k);
        for (std::int64_t j = 0; j < B.cols; ++j) cp[j] += t * bp[j];
      }
    }
  }

  void backprop(int id, const Node& nd, const Tensor& gy) {
    switch (nd.op) {
      case Op::Const:
      case Op::Var:
        break;
      case Op::MatMul: {
        const Tensor& A = vals_[static_cast<std::size_t>(nd.a)];
        const Tensor& B = vals_[static_cast<std::size_t>(nd.b)];
        if (wants(nd.a)) {
          Tensor& ga = grad_buf(nd.a);
          // dA = dY B^T  -> dA[i,k] += dot(dY[i,:], B[k,:])
          for (std::int64_t i = 0; i < A.rows; ++i) {
            const double* gyp = gy.row_ptr(i);
            double* gap = ga.row_ptr(i);
            for (std::int64_t k = 0; k < A.cols; ++k) {
              const double* bp = B.row_ptr(k);
              double acc = 0.0;
              for (std::int64_t j = 0; j < B.cols; ++j) acc += gyp[j] * bp[j];
              gap[k] += acc;
            }
          }
        }
        if (wants(nd.b)) {
          Tensor& gb = grad_buf(nd.b);
          // dB = A^T dY -> accumulate row by row
          for (std::int64_t i = 0; i < A.rows; ++i) {
            const double* ap = A.row_ptr(i);
            const double* gyp = gy.row_ptr(i);
            for (std::int64_t k = 0; k < A.cols; ++k) {
              const double t = ap[k];
              if (t == 0.0) continue;
              double* gbp = gb.row_ptr(k);
              for (std::int64_t j = 0; j < B.cols; ++j) gbp[j] += t * gyp[j];
            }
          }
        }
        break;
      }
      case Op::Add:
        if (wants(nd.a)) acc_full(nd.a, gy, 1.0);
        if (wants(nd.b)) acc_full(nd.b, gy, 1.0);
        break;
      case Op::Sub:
        if (wants(nd.a)) acc_full(nd.a, gy, 1.0);
        if (wants(nd.b)) acc_full(nd.b, gy, -1.0);
        break;
      case Op::Mul: {
        const Tensor& A = vals_[static_cast<std::size_t>(nd.a)];
        const Tensor& B = vals_[static_cast<std::size_t>(nd.b)];
        if (wants(nd.a)) {
          Tensor& ga = grad_buf(nd.a);
          for (std::size_t i = 0; i < gy.size(); ++i)
            ga.data[i] += gy.data[i] * B.data[i];
        }
        if (wants(nd.b)) {
          Tensor& gb = grad_buf(nd.b);
          for (std::size_t i = 0; i < gy.size(); ++i)
            gb.data[i] += gy.data[i] * A.data[i];
        }
        break;
      }
      case Op::Div: {
        const Tensor& A = vals_[static_cast<std::size_t>(nd.a)];
        const Tensor& B = vals_[static_cast<std::size_t>(nd.b)];
        if (wants(nd.a)) {
          Tensor& ga = grad_buf(nd.a);
          for (std::size_t i = 0; i < gy.size(); ++i)
            ga.data[i] += gy.data[i] / B.data[i];
        }
        if (wants(nd.b)) {
          Tensor& gb = grad_buf(nd.b);
          for (std::size_t i = 0; i < gy.size(); ++i)
            gb.data[i] -= gy.data[i] * A.data[i] / (B.data[i] * B.data[i]);
        }
        break;
      }
      case Op::AddRow: {
        if (wants(nd.a)) acc_full(nd.a, gy, 1.0);
        if (wants(nd.b)) {
          Tensor& gb = grad_buf(nd.b);
          for (std::int64_t r = 0; r < gy.rows; ++r) {
            const double* gyp = gy.row_ptr(r);
            for (std::int64_t c = 0; c < gy.cols; ++c) gb.data[c] += gyp[c];
          }
        }
        break;
      }
      case Op::MulRow: {
        const Tensor& A = vals_[static_cast<std::size_t>(nd.a)];
        const Tensor& v = vals_[static_cast<std::size_t>(nd.b)];
        if (wants(nd.a)) {
          Tensor& ga = grad_buf(nd.a);
          for (std::int64_t r = 0; r < gy.rows; ++r) {
            const double* gyp = gy.row_ptr(r);
            double* gap = ga.row_ptr(r);
            for (std::int64_t c = 0; c < gy.cols; ++c)
              gap[c] += gyp[c] * v.data[c];
          }
        }
        if (wants(nd.b)) {
          Tensor& gb = grad_buf(nd.b);
          for (std::int64_t r = 0; r < gy.rows; ++r) {
            const double* gyp = gy.row_ptr(r);
            const double* ap = A.row_ptr(r);
            for (std::int64_t c = 0; c < gy.cols; ++c)
              gb.data[c] += gyp[c] * ap[c];
          }
        }
        break;
      }
      case Op::MulCol: {
        const Tensor& A = vals_[static_cast<std::size_t>(nd.a)];
        const Tensor& u = vals_[static_cast<std::size_t>(nd.b)];
        if (wants(nd.a)) {
          Tensor& ga = grad_buf(nd.a);
          for (std::int64_t r = 0; r < gy.rows; ++r) {
            const double s = u.data[static_cast<std::size_t>(r)];
            const double* gyp = gy.row_ptr(r);
            double* gap = ga.row_ptr(r);
            for (std::int64_t c = 0; c < gy.cols; ++c) gap[c] += gyp[c] * s;
          }
        }
        if (wants(nd.b)) {
          Tensor& gb = grad_buf(nd.b);
          for (std::int64_t r = 0; r < gy.rows; ++r) {
            const double* gyp = gy.row_ptr(r);
            const double* ap = A.row_ptr(r);
            double acc = 0.0;
            for (std::int64_t c = 0; c < gy.cols; ++c) acc += gyp[c] * ap[c];
            gb.data[static_cast<std::size_t>(r)] += acc;
          }
        }
        break;
      }
      case Op::AddScalar:
        if (wants(nd.a)) acc_full(nd.a, gy, 1.0);
        break;
      case Op::MulScalar:
        if (wants(nd.a)) acc_full(nd.a, gy, nd.scalar);
        break;
      case Op::ConcatCols: {
        const Tensor& A = vals_[static_cast<std::size_t>(nd.a)];
        const Tensor& B = vals_[static_cast<std::size_t>(nd.b)];
        if (wants(nd.a)) {
          Tensor& ga = grad_buf(nd.a);
          for (std::int64_t r = 0; r < A.rows; ++r) {
            const double* gyp = gy.row_ptr(r);
            double* gap = ga.row_ptr(r);
            for (std::int64_t c = 0; c < A.cols; ++c) gap[c] += gyp[c];
          }
        }
        if (wants(nd.b)) {
          Tensor& gb = grad_buf(nd.b);
          for (std::int64_t r = 0; r < B.rows; ++r) {
            const double* gyp = gy.row_ptr(r) + A.cols;
            double* gbp = gb.row_ptr(r);
            for (std::int64_t c = 0; c < B.cols; ++c) gbp[c] += gyp[c];
          }
        }
        break;
      }
      case Op::Reshape:
        if (wants(nd.a)) {
          Tensor& ga = grad_buf(nd.a);
          for (std::size_t i = 0; i < gy.size(); ++i) ga.data[i] += gy.data[i];
        }
        break;
      case Op::GatherRows:
        if (wants(nd.a)) {
          Tensor& ga = grad_buf(nd.a);
          for (std::size_t i = 0; i < nd.seg.size(); ++i) {
            const double* gyp = gy.row_ptr(static_cast<std::int64_t>(i));
            double* gap = ga.row_ptr(nd.seg[i]);
            for (std::int64_t c = 0; c < gy.cols; ++c) gap[c] += gyp[c];
          }
        }
        break;
      case Op::PadRows:
        if (wants(nd.a)) {
          Tensor& ga = grad_buf(nd.a);
          for (std::int64_t r = 0; r < ga.rows; ++r) {
            const double* gyp = gy.row_ptr(r);
            double* gap = ga.row_ptr(r);
            for (std::int64_t c = 0; c < ga.cols; ++c) gap[c] += gyp[c];
          }
        }
        break;
      case Op::RowReduce: {
        if (!wants(nd.a)) break;
        const Tensor& A = vals_[static_cast<std::size_t>(nd.a)];
        const Tensor& Y = vals_[static_cast<std::size_t>(id)];
        Tensor& ga = grad_buf(nd.a);
        for (std::int64_t r = 0; r < A.rows; ++r) {
          const double g = gy.data[static_cast<std::size_t>(r)];
          double* gap = ga.row_ptr(r);
          const double* ap = A.row_ptr(r);
          if (nd.red == Red::Sum) {
            for (std::int64_t c = 0; c < A.cols; ++c) gap[c] += g;
          } else if (nd.red == Red::Mean) {
            const double gm = g / static_cast<double>(A.cols);
            for (std::int64_t c = 0; c < A.cols; ++c) gap[c] += gm;
          } else {
            const double m = Y.data[static_cast<std::size_t>(r)];
            for (std::int64_t c = 0; c < A.cols; ++c) {
              if (ap[c] == m) {  // first argmax takes the subgradient
                gap[c] += g;
                break;
              }
            }
          }
        }
        break;
      }
      case Op::SegReduce: {
        if (!wants(nd.a)) break;
        const Tensor& A = vals_[static_cast<std::size_t>(nd.a)];
        const Tensor& Y = vals_[static_cast<std::size_t>(id)];
        Tensor& ga = grad_buf(nd.a);
        if (nd.red == Red::Max) {
          // route to the first unmasked argmax per (segment, column)
          taken_.assign(static_cast<std::size_t>(Y.rows * Y.cols), 0);
          for (std::size_t i = 0; i < nd.seg.size(); ++i) {
            if (!nd.mask.empty() && nd.mask[i] == 0.0) continue;
            const std::int32_t s = nd.seg[i];
            const double* ap = A.row_ptr(static_cast<std::int64_t>(i));
            const double* yp = Y.row_ptr(s);
            const double* gyp = gy.row_ptr(s);
            double* gap = ga.row_ptr(static_cast<std::int64_t>(i));
            char* tk = taken_.data() + static_cast<std::size_t>(s) * Y.cols;
            for (std::int64_t c = 0; c < A.cols; ++c) {
              if (!tk[c] && ap[c] == yp[c]) {
                gap[c] += gyp[c];
                tk[c] = 1;
              }
            }
          }
        } else {
          counts_.assign(static_cast<std::size_t>(Y.rows), 0);
          if (nd.red == Red::Mean) {
            for (std::size_t i = 0; i < nd.seg.size(); ++i)
              if (nd.mask.empty() || nd.mask[i] != 0.0)
                ++counts_[static_cast<std::size_t>(nd.seg[i])];
          }
          for (std::size_t i = 0; i < nd.seg.size(); ++i) {
            if (!nd.mask.empty() && nd.mask[i] == 0.0) continue;
            const std::int32_t s = nd.seg[i];
            const double* gyp = gy.row_ptr(s);
            double* gap = ga.row_ptr(static_cast<std::int64_t>(i));
            if (nd.red == Red::Sum) {
              for (std::int64_t c = 0; c < A.cols; ++c) gap[c] += gyp[c];
            } else {
              const double inv =
                  1.0 / static_cast<double>(counts_[static_cast<std::size_t>(s)]);
              for (std::int64_t c = 0; c < A.cols; ++c) gap[c] += gyp[c] * inv;
            }
          }
        }
        break;
      }
      case Op::SegSoftmax: {
        if (!wants(nd.a)) break;
        const Tensor& alpha = vals_[static_cast<std::size_t>(id)];
        Tensor& ga = grad_buf(nd.a);
        scratch_.assign(static_cast<std::size_t>(nd.n_seg), 0.0);
        for (std::size_t i = 0; i < nd.seg.size(); ++i) {
          if (!nd.mask.empty() && nd.mask[i] == 0.0) continue;
          scratch_[static_cast<std::size_t>(nd.seg[i])] +=
              gy.data[i] * alpha.data[i];
        }
        for (std::size_t i = 0; i < nd.seg.size(); ++i) {
          if (!nd.mask.empty() && nd.mask[i] == 0.0) continue;
          ga.data[i] += alpha.data[i] *
                        (gy.data[i] - scratch_[static_cast<std::size_t>(nd.seg[i])]);
        }
        break;
      }
      case Op::BatchedMatVec: {
        const Tensor& M = vals_[static_cast<std::size_t>(nd.a)];
        const Tensor& X = vals_[static_cast<std::size_t>(nd.b)];
        const std::int64_t d = nd.n_seg;
        if (wants(nd.a)) {
          Tensor& gm = grad_buf(nd.a);
          for (std::int64_t e = 0; e < X.rows; ++e) {
            const double* gyp = gy.row_ptr(e);
            const double* xp = X.row_ptr(e);
            double* gmp = gm.row_ptr(e);
            for (std::int64_t r = 0; r < d; ++r) {
              const double g = gyp[r];
              if (g == 0.0) continue;
              double* gmr = gmp + r * d;
              for (std::int64_t c = 0; c < d; ++c) gmr[c] += g * xp[c];
            }
          }
        }
        if (wants(nd.b)) {
          Tensor& gx = grad_buf(nd.b);
          for (std::int64_t e = 0; e < X.rows; ++e) {
            const double* gyp = gy.row_ptr(e);
            const double* mp = M.row_ptr(e);
            double* gxp = gx.row_ptr(e);
            for (std::int64_t r = 0; r < d; ++r) {
              const double g = gyp[r];
              if (g == 0.0) continue;
              const double* mr = mp + r * d;
              for (std::int64_t c = 0; c < d; ++c) gxp[c] += g * mr[c];
            }
          }
        }
        break;
      }
      case Op::Activation: {
        if (!wants(nd.a)) break;
        const Tensor& A = vals_[static_cast<std::size_t>(nd.a)];
        const Tensor& Y = vals_[static_cast<std::size_t>(id)];
        Tensor& ga = grad_buf(nd.a);
        for (std::size_t i = 0; i < gy.size(); ++i)
          ga.data[i] += gy.data[i] * act_deriv(nd.act, A.data[i], Y.data[i]);
        break;
      }
      case Op::Log: {
        if (!wants(nd.a)) break;
        const Tensor& A = vals_[static_cast<std::size_t>(nd.a)];
        Tensor& ga = grad_buf(nd.a);
        for (std::size_t i = 0; i < gy.size(); ++i)
          ga.data[i] += gy.data[i] / A.data[i];
        break;
      }
      case Op::SliceCol:
        if (wants(nd.a)) {
          Tensor& ga = grad_buf(nd.a);
          for (std::int64_t r = 0; r < gy.rows; ++r)
            ga.at(r, nd.n_seg) += gy.data[static_cast<std::size_t>(r)];
        }
        break;
    }
  }

  void acc_full(int id, const Tensor& gy, double scale) {
    Tensor& g = grad_buf(id);
    if (scale == 1.0) {
      for (std::size_t i = 0; i < gy.size(); ++i) g.data[i] += gy.data[i];
    } else {
      for (std::size_t i = 0; i < gy.size(); ++i)
        g.data[i] += scale * gy.data[i];
    }
  }

  std::vector<Node> nodes_;
  std::vector<Tensor> vals_;
  std::vector<Tensor> grads_;
  std::vector<std::vector<double>> pool_;
  std::vector<std::int64_t> counts_;
  std::vector<double> scratch_, scratch2_;
  std::vector<char> taken_;
  std::size_t empty_segment_events_ = 0;
};

// Central-difference comparison against analytic gradients. `f` is evaluated
// with one element of one parameter nudged by +/-step; the relative error
// denominator is max(|analytic|, |numeric|, 1e-8).
// `floor` sets the scale below which a gradient entry counts as zero: the
// relative-error denominator never drops beneath it. The default suits
// single-op checks where values are O(1); checks of deep compositions should
// raise it, since central differences on a long op chain carry roundoff of
// ~1e-11 in absolute terms, which would swamp entries that are genuinely tiny.
inline double finite_diff_check(
    const std::function<double(const std::vector<Tensor>&)>& f,
    std::vector<Tensor> params, const std::vector<Tensor>& analytic,
    double step = 1e-5, double floor = 1e-8) {
  if (params.size() != analytic.size())
    throw Error(errc::LengthMismatch, "finite_diff_check: grad count");
  double worst = 0.0;
  for (std::size_t p = 0; p < params.size(); ++p) {
    if (params[p].size() != analytic[p].size())
      throw Error(errc::ShapeMismatch, "finite_diff_check: grad shape");
    for (std::size_t i = 0; i < params[p].size(); ++i) {
      const double orig = params[p].data[i];
      params[p].data[i] = orig + step;
      const double fp = f(params);
      params[p].data[i] = orig - step;
      const double fm = f(params);
      params[p].data[i] = orig;
      const double numeric = (fp - fm) / (2.0 * step);
      const double a = analytic[p].data[i];
      const double denom =
          std::max({std::fabs(a), std::fabs(numeric), floor});
      const double rel = std::fabs(a - numeric) / denom;
      if (rel > worst) worst = rel;
    }
  }
  return worst;
}

}  // namespace gnnuq
