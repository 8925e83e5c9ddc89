#pragma once

#include <algorithm>
#include <map>
#include <string>
#include <vector>

#include "core/params.hpp"
#include "core/tensor.hpp"

namespace pgns {

using VarId = int32_t;
constexpr VarId kNoVar = -1;

enum class Op : uint8_t {
  Const,
  Param,
  Matmul,       // i0 = transpose A, i1 = transpose B
  Add,
  Sub,
  Mul,
  Div,
  Neg,
  Scale,        // c0 = factor
  AddScalar,    // c0 = addend
  ScaleVar,     // inputs: x, scalar var
  Sigmoid,
  Softplus,     // c0 = beta
  Exp,
  Log,
  Abs,
  Square,
  Sqrt,
  Sin,
  Cos,
  Relu,
  ClampMin,     // c0 = floor
  Sum,
  Mean,
  RowSum,
  RowMean,
  RowNorm,      // L2 norm per row -> {n,1}
  AddRowVec,    // {n,d} + {1,d}
  AddColVec,    // {n,d} + {n,1}
  MulColVec,    // {n,d} * {n,1}
  ConcatCols,
  SliceCols,    // i0 = first col, i1 = count
  PadCols,      // i0 = left zeros, i1 = right zeros
  GatherRows,   // idx = row indices
  Reshape,      // i0 = rows, i1 = cols
  SegSumRows,   // i0 = consecutive rows summed per output row
  CumprodExcl,  // exclusive cumulative product along each row
  Bilerp,       // input: {n,2} pixel coords; img payload
};

inline const char* op_name(Op op) {
  switch (op) {
    case Op::Const: return "const";
    case Op::Param: return "param";
    case Op::Matmul: return "matmul";
    case Op::Add: return "add";
    case Op::Sub: return "sub";
    case Op::Mul: return "mul";
    case Op::Div: return "div";
    case Op::Neg: return "neg";
    case Op::Scale: return "scale";
    case Op::AddScalar: return "add_scalar";
    case Op::ScaleVar: return "scale_var";
    case Op::Sigmoid: return "sigmoid";
    case Op::Softplus: return "softplus";
    case Op::Exp: return "exp";
    case Op::Log: return "log";
    case Op::Abs: return "abs";
    case Op::Square: return "square";
    case Op::Sqrt: return "sqrt";
    case Op::Sin: return "sin";
    case Op::Cos: return "cos";
    case Op::Relu: return "relu";
    case Op::ClampMin: return "clamp_min";
    case Op::Sum: return "sum";
    case Op::Mean: return "mean";
    case Op::RowSum: return "row_sum";
    case Op::RowMean: return "row_mean";
    case Op::RowNorm: return "row_norm";
    case Op::AddRowVec: return "add_rowvec";
    case Op::AddColVec: return "add_colvec";
    case Op::MulColVec: return "mul_colvec";
    case Op::ConcatCols: return "concat_cols";
    case Op::SliceCols: return "slice_cols";
    case Op::PadCols: return "pad_cols";
    case Op::GatherRows: return "gather_rows";
    case Op::Reshape: return "reshape";
    case Op::SegSumRows: return "seg_sum_rows";
    case Op::CumprodExcl: return "cumprod_excl";
    case Op::Bilerp: return "bilerp";
  }
  return "?";
}

// Deterministic parallel GEMM: the output is split into fixed 128-row blocks,
// each accumulated sequentially, so results are bitwise stable regardless of
// thread count.
template <class T>
void matmul_block(Tensor<T>& out, const Tensor<T>& a, const Tensor<T>& b, bool ta, bool tb, bool accumulate);

template <class T>
class Tape {
 public:
  struct Node {
    Op op;
    VarId in0 = kNoVar, in1 = kNoVar;
    std::vector<VarId> extra_in;  // ConcatCols beyond two inputs
    Tensor<T> val;
    Tensor<T> grad;  // allocated lazily during backward
    bool needs_grad = false;
    double c0 = 0;
    int i0 = 0, i1 = 0;
    std::vector<int> idx;
    const Tensor<T>* img = nullptr;
    std::string pname;  // Param only
  };

  // --- leaves ---

  VarId constant(Tensor<T> v) { return push(Op::Const, kNoVar, kNoVar, std::move(v), false); }

  VarId constant_scalar(double v) { return constant(Tensor<T>::scalar(T(v))); }

  // One node per parameter per tape; repeated requests share it so gradients
  // from every use accumulate in one place.
  VarId param(ParamStore<T>& store, const std::string& name) {
    auto it = param_cache_.find(name);
    if (it != param_cache_.end()) return it->second;
    Tensor<T> v = store.get(name);
    VarId id = push(Op::Param, kNoVar, kNoVar, std::move(v), true);
    nodes_[id].pname = name;
    param_cache_[name] = id;
    return id;
  }

  // --- elementwise / structural ops (forward runs eagerly at record time) ---

  VarId matmul(VarId a, VarId b, bool ta = false, bool tb = false) {
    const auto& A = val(a);
    const auto& B = val(b);
    int ar = ta ? A.cols() : A.rows(), ac = ta ? A.rows() : A.cols();
    int br = tb ? B.cols() : B.rows(), bc = tb ? B.rows() : B.cols();
    require(ac == br, "matmul: inner dimension mismatch");
    Tensor<T> out(ar, bc);
    matmul_block(out, A, B, ta, tb, false);
    VarId id = push2(Op::Matmul, a, b, std::move(out));
    nodes_[id].i0 = ta;
    nodes_[id].i1 = tb;
    return id;
  }

  VarId add(VarId a, VarId b) { return binary(Op::Add, a, b, [](T x, T y) { return x + y; }); }
  VarId sub(VarId a, VarId b) { return binary(Op::Sub, a, b, [](T x, T y) { return x - y; }); }
  VarId mul(VarId a, VarId b) { return binary(Op::Mul, a, b, [](T x, T y) { return x * y; }); }
  VarId div(VarId a, VarId b) { return binary(Op::Div, a, b, [](T x, T y) { return x / y; }); }

  VarId neg(VarId a) { return unary(Op::Neg, a, [](T x) { return -x; }); }
  VarId scale(VarId a, double c) {
    VarId id = unary(Op::Scale, a, [c](T x) { return T(c) * x; });
    nodes_[id].c0 = c;
    return id;
  }
  VarId add_scalar(VarId a, double c) {
    VarId id = unary(Op::AddScalar, a, [c](T x) { return x + T(c); });
    nodes_[id].c0 = c;
    return id;
  }
  VarId scale_var(VarId a, VarId s) {
    require(val(s).size() == 1, "scale_var: scalar expected");
    T sv = val(s).data[0];
    const auto& A = val(a);
    Tensor<T> out(A.rows(), A.cols());
    for (size_t i = 0; i < A.size(); ++i) out.data[i] = A.data[i] * sv;
    return push2(Op::ScaleVar, a, s, std::move(out));
  }
  VarId sigmoid_op(VarId a) { return unary(Op::Sigmoid, a, [](T x) { return sigmoid(x); }); }
  VarId softplus_op(VarId a, double beta = 1.0) {
    VarId id = unary(Op::Softplus, a, [beta](T x) { return T(softplus_stable(double(x) * beta) / beta); });
    nodes_[id].c0 = beta;
    return id;
  }
  VarId exp_op(VarId a) { return unary(Op::Exp, a, [](T x) { return std::exp(x); }); }
  VarId log_op(VarId a) { return unary(Op::Log, a, [](T x) { return std::log(x); }); }
  VarId abs_op(VarId a) { return unary(Op::Abs, a, [](T x) { return std::abs(x); }); }
  VarId square(VarId a) { return unary(Op::Square, a, [](T x) { return x * x; }); }
  VarId sqrt_op(VarId a) { return unary(Op::Sqrt, a, [](T x) { return std::sqrt(x); }); }
  VarId sin_op(VarId a) { return unary(Op::Sin, a, [](T x) { return std::sin(x); }); }
  VarId cos_op(VarId a) { return unary(Op::Cos, a, [](T x) { return std::cos(x); }); }
  VarId relu(VarId a) { return unary(Op::Relu, a, [](T x) { return x > T(0) ? x : T(0); }); }
  VarId clamp_min(VarId a, double c) {
    VarId id = unary(Op::ClampMin, a, [c](T x) { return x > T(c) ? x : T(c); });
    nodes_[id].c0 = c;
    return id;
  }

  VarId sum(VarId a) {
    T acc = ordered_sum(val(a).data);
    return push1(Op::Sum, a, Tensor<T>::scalar(acc));
  }
  VarId mean(VarId a) {
    require(val(a).size() > 0, "mean: empty tensor");
    T acc = ordered_sum(val(a).data);
    return push1(Op::Mean, a, Tensor<T>::scalar(acc / T(val(a).size())));
  }
  VarId row_sum(VarId a) { return row_reduce(Op::RowSum, a, false); }
  VarId row_mean(VarId a) { return row_reduce(Op::RowMean, a, true); }

  VarId row_norm(VarId a) {
    const auto& A = val(a);
    Tensor<T> out(A.rows(), 1);
    for (int r = 0; r < A.rows(); ++r) {
      T acc = 0;
      for (int c = 0; c < A.cols(); ++c) acc += A.at(r, c) * A.at(r, c);
      out.data[r] = std::sqrt(acc);
    }
    return push1(Op::RowNorm, a, std::move(out));
  }

  VarId add_rowvec(VarId a, VarId v) {
    const auto& A = val(a);
    const auto& V = val(v);
    require(V.rows() == 1 && V.cols() == A.cols(), "add_rowvec: shape mismatch");
    Tensor<T> out(A.rows(), A.cols());
    for (int r = 0; r < A.rows(); ++r)
      for (int c = 0; c < A.cols(); ++c) out.at(r, c) = A.at(r, c) + V.data[c];
    return push2(Op::AddRowVec, a, v, std::move(out));
  }

  VarId add_colvec(VarId a, VarId v) {
    const auto& A = val(a);
    const auto& V = val(v);
    require(V.cols() == 1 && V.rows() == A.rows(), "add_colvec: shape mismatch");
    Tensor<T> out(A.rows(), A.cols());
    for (int r = 0; r < A.rows(); ++r)
      for (int c = 0; c < A.cols(); ++c) out.at(r, c) = A.at(r, c) + V.data[r];
    return push2(Op::AddColVec, a, v, std::move(out));
  }

  VarId mul_colvec(VarId a, VarId v) {
    const auto& A = val(a);
    const auto& V = val(v);
    require(V.cols() == 1 && V.rows() == A.rows(), "mul_colvec: shape mismatch");
    Tensor<T> out(A.rows(), A.cols());
    for (int r = 0; r < A.rows(); ++r)
      for (int c = 0; c < A.cols(); ++c) out.at(r, c) = A.at(r, c) * V.data[r];
    return push2(Op::MulColVec, a, v, std::move(out));
  }

  VarId concat_cols(const std::vector<VarId>& parts) {
    require(!parts.empty(), "concat_cols: no inputs");
    int rows = val(parts[0]).rows(), cols = 0;
    for (VarId p : parts) {
      require(val(p).rows() == rows, "concat_cols: row mismatch");
      cols += val(p).cols();
    }
    Tensor<T> out(rows, cols);
    int at = 0;
    for (VarId p : parts) {
      const auto& P = val(p);
      for (int r = 0; r < rows; ++r)
        for (int c = 0; c < P.cols(); ++c) out.at(r, at + c) = P.at(r, c);
      at += P.cols();
    }
    VarId id = push(Op::ConcatCols, parts[0], parts.size() > 1 ? parts[1] : kNoVar, std::move(out), false);
    for (size_t i = 2; i < parts.size(); ++i) nodes_[id].extra_in.push_back(parts[i]);
    bool ng = false;
    for (VarId p : parts) ng = ng || nodes_[p].needs_grad;
    nodes_[id].needs_grad = ng;
    return id;
  }

  VarId slice_cols(VarId a, int first, int count) {
    const auto& A = val(a);
    require(first >= 0 && count >= 0 && first + count <= A.cols(), "slice_cols: out of range");
    Tensor<T> out(A.rows(), count);
    for (int r = 0; r < A.rows(); ++r)
      for (int c = 0; c < count; ++c) out.at(r, c) = A.at(r, first + c);
    VarId id = push1(Op::SliceCols, a, std::move(out));
    nodes_[id].i0 = first;
    nodes_[id].i1 = count;
    return id;
  }

  VarId pad_cols(VarId a, int left, int right) {
    const auto& A = val(a);
    Tensor<T> out(A.rows(), left + A.cols() + right);
    for (int r = 0; r < A.rows(); ++r)
      for (int c = 0; c < A.cols(); ++c) out.at(r, left + c) = A.at(r, c);
    VarId id = push1(Op::PadCols, a, std::move(out));
    nodes_[id].i0 = left;
    nodes_[id].i1 = right;
    return id;
  }

  VarId gather_rows(VarId a, std::vector<int> idx) {
    const auto& A = val(a);
    Tensor<T> out(int(idx.size()), A.cols());
    for (size_t r = 0; r < idx.size(); ++r) {
      require(idx[r] >= 0 && idx[r] < A.rows(), "gather_rows: index out of range");
      for (int c = 0; c < A.cols(); ++c) out.at(int(r), c) = A.at(idx[r], c);
    }
    VarId id = push1(Op::GatherRows, a, std::move(out));
    nodes_[id].idx = std::move(idx);
    return id;
  }

  VarId reshape(VarId a, int r, int c) {
    const auto& A = val(a);
    require(size_t(r) * c == A.size(), "reshape: element count mismatch");
    Tensor<T> out(r, c, A.data);
    VarId id = push1(Op::Reshape, a, std::move(out));
    nodes_[id].i0 = A.rows();
    nodes_[id].i1 = A.cols();
    return id;
  }

  VarId seg_sum_rows(VarId a, int seg) {
    const auto& A = val(a);
    require(seg > 0 && A.rows() % seg == 0, "seg_sum_rows: rows not divisible");
    Tensor<T> out(A.rows() / seg, A.cols());
    for (int r = 0; r < out.rows(); ++r)
      for (int s = 0; s < seg; ++s)
        for (int c = 0; c < A.cols(); ++c) out.at(r, c) += A.at(r * seg + s, c);
    VarId id = push1(Op::SegSumRows, a, std::move(out));
    nodes_[id].i0 = seg;
    return id;
  }

  // out[r][j] = prod_{k<j} a[r][k]; out[r][0] = 1.
  VarId cumprod_exclusive(VarId a) {
    const auto& A = val(a);
    Tensor<T> out(A.rows(), A.cols());
    for (int r = 0; r < A.rows(); ++r) {
      T acc = 1;
      for (int c = 0; c < A.cols(); ++c) {
        out.at(r, c) = acc;
        acc *= A.at(r, c);
      }
    }
    return push1(Op::CumprodExcl, a, std::move(out));
  }

  // Bilinear sample of a grayscale image at pixel coords ({0.5,0.5} = center
  // of the top-left texel). `img` must outlive the tape. Differentiable in
  // the coordinates; the image itself is data.
  VarId bilerp(VarId uv, const Tensor<T>* img) {
    const auto& U = val(uv);
    require(U.cols() == 2, "bilerp: expected {n,2} coords");
    Tensor<T> out(U.rows(), 1);
    for (int r = 0; r < U.rows(); ++r) out.data[r] = bilerp_eval(*img, U.at(r, 0), U.at(r, 1), nullptr, nullptr);
    VarId id = push1(Op::Bilerp, uv, std::move(out));
    nodes_[id].img = img;
    return id;
  }

  // --- access ---

  const Tensor<T>& val(VarId id) const { return nodes_[id].val; }
  const Tensor<T>& grad(VarId id) const { return nodes_[id].grad; }
  size_t size() const { return nodes_.size(); }
  bool recorded(VarId id) const { return id >= 0 && size_t(id) < nodes_.size(); }

  void clear() {
    nodes_.clear();
    param_cache_.clear();
  }

  // --- differentiable gradient (record mode) ---
  //
  // Builds, as tape operations, the gradient of y w.r.t. x seeded with ones,
  // so the result stays differentiable w.r.t. anything upstream. For row-wise
  // maps (every row of y depends only on the same row of x) the seed-of-ones
  // contraction yields exactly the per-row spatial gradient.
  VarId gradient(VarId y, VarId x) {
    require(recorded(x), "gradient: x was not recorded on the tape");
    require(recorded(y), "gradient: y was not recorded on the tape");
    std::vector<char> desc(y + 1, 0), anc(y + 1, 0);
    desc[x] = 1;
    for (VarId i = x + 1; i <= y; ++i)
      for_each_input(i, [&](VarId j) { desc[i] |= (j <= y && desc[j]); });
    anc[y] = 1;
    for (VarId i = y; i > x; --i)
      if (anc[i]) for_each_input(i, [&](VarId j) { anc[j] = 1; });

    std::vector<VarId> cot(y + 1, kNoVar);
    Tensor<T> seed(val(y).rows(), val(y).cols());
    seed.fill(T(1));
    cot[y] = constant(std::move(seed));
    for (VarId i = y; i > x; --i) {
      if (cot[i] == kNoVar || !desc[i] || !anc[i]) continue;
      emit_vjp(i, cot[i], [&](VarId input, VarId contrib) {
        if (!(input <= y && desc[input] && (anc[input] || input == x))) return;
        cot[input] = cot[input] == kNoVar ? contrib : add(cot[input], contrib);
      });
    }
    if (cot[x] == kNoVar) {
      Tensor<T> z(val(x).rows(), val(x).cols());
      return constant(std::move(z));
    }
    return cot[x];
  }

  // --- eager reverse pass ---
  //
  // Returns one gradient per parameter recorded on this tape; parameters the
  // loss never reaches come back zero-filled.
  std::map<std::string, Tensor<T>> backward(VarId loss) {
    require(recorded(loss), "backward: unknown variable");
    require(val(loss).size() == 1, "backward: loss must be a scalar");
    if (!std::isfinite(double(val(loss).data[0]))) diagnose_nonfinite();

    for (auto& n : nodes_) n.grad = Tensor<T>();
    nodes_[loss].grad = Tensor<T>::scalar(T(1));
    for (VarId i = loss; i >= 0; --i) {
      Node& n = nodes_[i];
      if (n.grad.size() == 0 || !n.needs_grad) continue;
      vjp_eager(i);
    }
    std::map<std::string, Tensor<T>> grads;
    for (auto& [name, id] : param_cache_) {
      Node& n = nodes_[id];
      if (n.grad.size() == 0) {
        grads[name] = Tensor<T>(n.val.rows(), n.val.cols());
      } else {
        grads[name] = std::move(n.grad);
      }
    }
    return grads;
  }

  // Locates the first non-finite forward value and reports its op; called
  // when a loss comes out NaN/inf.
  [[noreturn]] void diagnose_nonfinite() const {
    for (size_t i = 0; i < nodes_.size(); ++i) {
      if (!nodes_[i].val.all_finite()) {
        throw NumericError("non-finite forward value at node " + std::to_string(i) + " (op " +
                           op_name(nodes_[i].op) + (nodes_[i].pname.empty() ? "" : ", param " + nodes_[i].pname) +
                           ")");
      }
    }
    throw NumericError("non-finite loss but all recorded values finite");
  }

 private:
  std::vector<Node> nodes_;
  std::map<std::string, VarId> param_cache_;

  template <class F>
  void for_each_input(VarId i, F&& f) const {
    const Node& n = nodes_[i];
    if (n.in0 != kNoVar) f(n.in0);
    if (n.in1 != kNoVar) f(n.in1);
    for (VarId j : n.extra_in) f(j);
  }

  VarId push(Op op, VarId a, VarId b, Tensor<T> out, bool needs_grad) {
    Node n;
    n.op = op;
    n.in0 = a;
    n.in1 = b;
    n.val = std::move(out);
    n.needs_grad = needs_grad;
    nodes_.push_back(std::move(n));
    return VarId(nodes_.size() - 1);
  }

  VarId push1(Op op, VarId a, Tensor<T> out) { return push(op, a, kNoVar, std::move(out), nodes_[a].needs_grad); }

  VarId push2(Op op, VarId a, VarId b, Tensor<T> out) {
    return push(op, a, b, std::move(out), nodes_[a].needs_grad || nodes_[b].needs_grad);
  }

  template <class F>
  VarId unary(Op op, VarId a, F&& f) {
    const auto& A = val(a);
    Tensor<T> out(A.rows(), A.cols());
    for (size_t i = 0; i < A.size(); ++i) out.data[i] = f(A.data[i]);
    return push1(op, a, std::move(out));
  }

  template <class F>
  VarId binary(Op op, VarId a, VarId b, F&& f) {
    const auto& A = val(a);
    const auto& B = val(b);
    require(A.same_shape(B), std::string(op_name(op)) + ": shape mismatch");
    Tensor<T> out(A.rows(), A.cols());
    for (size_t i = 0; i < A.size(); ++i) out.data[i] = f(A.data[i], B.data[i]);
    return push2(op, a, b, std::move(out));
  }

  VarId row_reduce(Op op, VarId a, bool mean_flag) {
    const auto& A = val(a);
    Tensor<T> out(A.rows(), 1);
    for (int r = 0; r < A.rows(); ++r) {
      T acc = 0;
      for (int c = 0; c < A.cols(); ++c) acc += A.at(r, c);
      out.data[r] = mean_flag ? acc / T(A.cols()) : acc;
    }
    return push1(op, a, std::move(out));
  }

  // Fixed-order pairwise-free serial sum; deterministic by construction.
  static T ordered_sum(const std::vector<T>& v) {
    T acc = 0;
    for (T x : v) acc += x;
    return acc;
  }

  static T bilerp_eval(const Tensor<T>& img, T px, T py, T* dx, T* dy) {
    int w = img.cols(), h = img.rows();
    double x = double(px) - 0.5, y = double(py) - 0.5;
    int ix = int(std::floor(x)), iy = int(std::floor(y));
    double fx = x - ix, fy = y - iy;
    auto cl = [](int v, int n) { return v < 0 ? 0 : (v >= n ? n - 1 : v); };
    int x0 = cl(ix, w), x1 = cl(ix + 1, w), y0 = cl(iy, h), y1 = cl(iy + 1, h);
    double v00 = img.at(y0, x0), v01 = img.at(y0, x1), v10 = img.at(y1, x0), v11 = img.at(y1, x1);
    if (dx) *dx = T((v01 - v00) * (1 - fy) + (v11 - v10) * fy);
    if (dy) *dy = T((v10 - v00) * (1 - fx) + (v11 - v01) * fx);
    return T(v00 * (1 - fx) * (1 - fy) + v01 * fx * (1 - fy) + v10 * (1 - fx) * fy + v11 * fx * fy);
  }

  Tensor<T>& grad_buf(VarId id) {
    Node& n = nodes_[id];
    if (n.grad.size() == 0) n.grad = Tensor<T>(n.val.rows(), n.val.cols());
    return n.grad;
  }

  bool wants(VarId id) const { return id != kNoVar && nodes_[id].needs_grad; }

  // --- eager VJP ---

  void vjp_eager(VarId i) {
    Node& n = nodes_[i];
    const Tensor<T>& g = n.grad;
    const Tensor<T>& y = n.val;
    VarId a = n.in0, b = n.in1;
    switch (n.op) {
      case Op::Const:
      case Op::Param:
        return;
      case Op::Matmul: {
        bool ta = n.i0, tb = n.i1;
        if (wants(a)) {
          if (!ta)
            matmul_block(grad_buf(a), g, val(b), false, !tb, true);
          else
            matmul_block(grad_buf(a), val(b), g, tb, true, true);
        }
        if (wants(b)) {
          if (!tb)
            matmul_block(grad_buf(b), val(a), g, !ta, false, true);
          else
            matmul_block(grad_buf(b), g, val(a), true, ta, true);
        }
        return;
      }
      case Op::Add:
        if (wants(a)) acc(a, g);
        if (wants(b)) acc(b, g);
        return;
      case Op::Sub:
        if (wants(a)) acc(a, g);
        if (wants(b)) acc_scaled(b, g, T(-1));
        return;
      case Op::Mul:
        if (wants(a)) acc_mul(a, g, val(b));
        if (wants(b)) acc_mul(b, g, val(a));
        return;
      case Op::Div: {
        const auto& A = val(a);
        const auto& B = val(b);
        if (wants(a)) {
          auto& ga = grad_buf(a);
          for (size_t k = 0; k < ga.size(); ++k) ga.data[k] += g.data[k] / B.data[k];
        }
        if (wants(b)) {
          auto& gb = grad_buf(b);
          for (size_t k = 0; k < gb.size(); ++k) gb.data[k] -= g.data[k] * A.data[k] / (B.data[k] * B.data[k]);
        }
        return;
      }
      case Op::Neg:
        if (wants(a)) acc_scaled(a, g, T(-1));
        return;
      case Op::Scale:
        if (wants(a)) acc_scaled(a, g, T(n.c0));
        return;
      case Op::AddScalar:
        if (wants(a)) acc(a, g);
        return;
      case Op::ScaleVar: {
        T sv = val(b).data[0];
        if (wants(a)) acc_scaled(a, g, sv);
        if (wants(b)) {
          const auto& A = val(a);
          T acc_v = 0;
          for (size_t k = 0; k < A.size(); ++k) acc_v += g.data[k] * A.data[k];
          grad_buf(b).data[0] += acc_v;
        }
        return;
      }
      case Op::Sigmoid:
        if (wants(a)) {
          auto& ga = grad_buf(a);
          for (size_t k = 0; k < ga.size(); ++k) ga.data[k] += g.data[k] * y.data[k] * (T(1) - y.data[k]);
        }
        return;
      case Op::Softplus:
        if (wants(a)) {
          auto& ga = grad_buf(a);
          const auto& A = val(a);
          for (size_t k = 0; k < ga.size(); ++k) ga.data[k] += g.data[k] * sigmoid(T(n.c0) * A.data[k]);
        }
        return;
      case Op::Exp:
        if (wants(a)) acc_mul(a, g, y);
        return;
      case Op::Log:
        if (wants(a)) {
          auto& ga = grad_buf(a);
          const auto& A = val(a);
          for (size_t k = 0; k < ga.size(); ++k) ga.data[k] += g.data[k] / A.data[k];
        }
        return;
      case Op::Abs:
        if (wants(a)) {
          auto& ga = grad_buf(a);
          const auto& A = val(a);
          for (size_t k = 0; k < ga.size(); ++k)
            ga.data[k] += A.data[k] > T(0) ? g.data[k] : (A.data[k] < T(0) ? -g.data[k] : T(0));
        }
        return;
      case Op::Square:
        if (wants(a)) {
          auto& ga = grad_buf(a);
          const auto& A = val(a);
          for (size_t k = 0; k < ga.size(); ++k) ga.data[k] += T(2) * g.data[k] * A.data[k];
        }
        return;
      case Op::Sqrt:
        if (wants(a)) {
          auto& ga = grad_buf(a);
          for (size_t k = 0; k < ga.size(); ++k) {
            T d = y.data[k] > T(1e-12) ? y.data[k] : T(1e-12);
            ga.data[k] += g.data[k] / (T(2) * d);
          }
        }
        return;
      case Op::Sin:
        if (wants(a)) {
          auto& ga = grad_buf(a);
          const auto& A = val(a);
          for (size_t k = 0; k < ga.size(); ++k) ga.data[k] += g.data[k] * std::cos(A.data[k]);
        }
        return;
      case Op::Cos:
        if (wants(a)) {
          auto& ga = grad_buf(a);
          const auto& A = val(a);
          for (size_t k = 0; k < ga.size(); ++k) ga.data[k] -= g.data[k] * std::sin(A.data[k]);
        }
        return;
      case Op::Relu:
        if (wants(a)) {
          auto& ga = grad_buf(a);
          const auto& A = val(a);
          for (size_t k = 0; k < ga.size(); ++k) ga.data[k] += A.data[k] > T(0) ? g.data[k] : T(0);
        }
        return;
      case Op::ClampMin:
        if (wants(a)) {
          auto& ga = grad_buf(a);
          const auto& A = val(a);
          for (size_t k = 0; k < ga.size(); ++k) ga.data[k] += A.data[k] > T(n.c0) ? g.data[k] : T(0);
        }
        return;
      case Op::Sum:
        if (wants(a)) acc_broadcast(a, g.data[0]);
        return;
      case Op::Mean:
        if (wants(a)) acc_broadcast(a, g.data[0] / T(val(a).size()));
        return;
      case Op::RowSum:
        if (wants(a)) {
          auto& ga = grad_buf(a);
          for (int r = 0; r < ga.rows(); ++r)
            for (int c = 0; c < ga.cols(); ++c) ga.at(r, c) += g.data[r];
        }
        return;
      case Op::RowMean:
        if (wants(a)) {
          auto& ga = grad_buf(a);
          T inv = T(1) / T(ga.cols());
          for (int r = 0; r < ga.rows(); ++r)
            for (int c = 0; c < ga.cols(); ++c) ga.at(r, c) += g.data[r] * inv;
        }
        return;
      case Op::RowNorm:
        if (wants(a)) {
          auto& ga = grad_buf(a);
          const auto& A = val(a);
          for (int r = 0; r < ga.rows(); ++r) {
            T d = y.data[r] > T(1e-12) ? y.data[r] : T(1e-12);
            T s = g.data[r] / d;
            for (int c = 0; c < ga.cols(); ++c) ga.at(r, c) += s * A.at(r, c);
          }
        }
        return;
      case Op::AddRowVec:
        if (wants(a)) acc(a, g);
        if (wants(b)) {
          auto& gb = grad_buf(b);
          for (int r = 0; r < g.rows(); ++r)
            for (int c = 0; c < g.cols(); ++c) gb.data[c] += g.at(r, c);
        }
        return;
      case Op::AddColVec:
        if (wants(a)) acc(a, g);
        if (wants(b)) {
          auto& gb = grad_buf(b);
          for (int r = 0; r < g.rows(); ++r)
            for (int c = 0; c < g.cols(); ++c) gb.data[r] += g.at(r, c);
        }
        return;
      case Op::MulColVec: {
        const auto& A = val(a);
        const auto& V = val(b);
        if (wants(a)) {
          auto& ga = grad_buf(a);
          for (int r = 0; r < g.rows(); ++r)
            for (int c = 0; c < g.cols(); ++c) ga.at(r, c) += g.at(r, c) * V.data[r];
        }
        if (wants(b)) {
          auto& gb = grad_buf(b);
          for (int r = 0; r < g.rows(); ++r)
            for (int c = 0; c < g.cols(); ++c) gb.data[r] += g.at(r, c) * A.at(r, c);
        }
        return;
      }
      case Op::ConcatCols: {
        int at = 0;
        std::vector<VarId> parts{a};
        if (b != kNoVar) parts.push_back(b);
        for (VarId e : n.extra_in) parts.push_back(e);
        for (VarId p : parts) {
          int pc = val(p).cols();
          if (wants(p)) {
            auto& gp = grad_buf(p);
            for (int r = 0; r < gp.rows(); ++r)
              for (int c = 0; c < pc; ++c) gp.at(r, c) += g.at(r, at + c);
          }
          at += pc;
        }
        return;
      }
      case Op::SliceCols:
        if (wants(a)) {
          auto& ga = grad_buf(a);
          for (int r = 0; r < g.rows(); ++r)
            for (int c = 0; c < g.cols(); ++c) ga.at(r, n.i0 + c) += g.at(r, c);
        }
        return;
      case Op::PadCols:
        if (wants(a)) {
          auto& ga = grad_buf(a);
          for (int r = 0; r < ga.rows(); ++r)
            for (int c = 0; c < ga.cols(); ++c) ga.at(r, c) += g.at(r, n.i0 + c);
        }
        return;
      case Op::GatherRows:
        if (wants(a)) {
          auto& ga = grad_buf(a);
          for (size_t r = 0; r < n.idx.size(); ++r)
            for (int c = 0; c < g.cols(); ++c) ga.at(n.idx[r], c) += g.at(int(r), c);
        }
        return;
      case Op::Reshape:
        if (wants(a)) {
          auto& ga = grad_buf(a);
          for (size_t k = 0; k < ga.size(); ++k) ga.data[k] += g.data[k];
        }
        return;
      case Op::SegSumRows:
        if (wants(a)) {
          auto& ga = grad_buf(a);
          int seg = n.i0;
          for (int r = 0; r < ga.rows(); ++r)
            for (int c = 0; c < ga.cols(); ++c) ga.at(r, c) += g.at(r / seg, c);
        }
        return;
      case Op::CumprodExcl:
        if (wants(a)) {
          auto& ga = grad_buf(a);
          const auto& A = val(a);
          // dx_j = sum_{l>j} dT_l * T_l / x_j, accumulated right-to-left.
          for (int r = 0; r < ga.rows(); ++r) {
            T suffix = 0;
            for (int c = ga.cols() - 1; c >= 0; --c) {
              T x = A.at(r, c);
              T d = std::abs(x) > T(1e-12) ? x : (x >= T(0) ? T(1e-12) : T(-1e-12));
              ga.at(r, c) += suffix / d;
              suffix += g.at(r, c) * y.at(r, c);
            }
          }
        }
        return;
      case Op::Bilerp:
        if (wants(a)) {
          auto& ga = grad_buf(a);
          const auto& U = val(a);
          for (int r = 0; r < U.rows(); ++r) {
            T dx, dy;
            bilerp_eval(*n.img, U.at(r, 0), U.at(r, 1), &dx, &dy);
            ga.at(r, 0) += g.data[r] * dx;
            ga.at(r, 1) += g.data[r] * dy;
          }
        }
        return;
    }
  }

  void acc(VarId id, const Tensor<T>& g) {
    auto& t = grad_buf(id);
    for (size_t k = 0; k < t.size(); ++k) t.data[k] += g.data[k];
  }
  void acc_scaled(VarId id, const Tensor<T>& g, T s) {
    auto& t = grad_buf(id);
    for (size_t k = 0; k < t.size(); ++k) t.data[k] += s * g.data[k];
  }
  void acc_mul(VarId id, const Tensor<T>& g, const Tensor<T>& other) {
    auto& t = grad_buf(id);
    for (size_t k = 0; k < t.size(); ++k) t.data[k] += g.data[k] * other.data[k];
  }
  void acc_broadcast(VarId id, T v) {
    auto& t = grad_buf(id);
    for (size_t k = 0; k < t.size(); ++k) t.data[k] += v;
  }

  // --- record-mode VJP (used by gradient()) ---

  template <class Sink>
  void emit_vjp(VarId i, VarId cot, Sink&& sink) {
    // Copy the payload up front: recording VJP ops grows nodes_ and would
    // invalidate any reference held across the switch.
    const Node meta = [&] {
      Node m;
      m.op = nodes_[i].op;
      m.in0 = nodes_[i].in0;
      m.in1 = nodes_[i].in1;
      m.extra_in = nodes_[i].extra_in;
      m.c0 = nodes_[i].c0;
      m.i0 = nodes_[i].i0;
      m.i1 = nodes_[i].i1;
      return m;
    }();
    const Node& n = meta;
    VarId a = n.in0, b = n.in1;
    switch (n.op) {
      case Op::Const:
      case Op::Param:
        return;
      case Op::Matmul: {
        bool ta = n.i0, tb = n.i1;
        if (a != kNoVar) sink(a, ta ? matmul(b, cot, tb, true) : matmul(cot, b, false, !tb));
        if (b != kNoVar) sink(b, tb ? matmul(cot, a, true, ta) : matmul(a, cot, !ta, false));
        return;
      }
      case Op::Add:
        sink(a, cot);
        sink(b, cot);
        return;
      case Op::Sub:
        sink(a, cot);
        sink(b, neg(cot));
        return;
      case Op::Mul:
        sink(a, mul(cot, b));
        sink(b, mul(cot, a));
        return;
      case Op::Div:
        sink(a, div(cot, b));
        sink(b, neg(div(mul(cot, a), square(b))));
        return;
      case Op::Neg:
        sink(a, neg(cot));
        return;
      case Op::Scale:
        sink(a, scale(cot, n.c0));
        return;
      case Op::AddScalar:
        sink(a, cot);
        return;
      case Op::ScaleVar:
        sink(a, scale_var(cot, b));
        sink(b, sum(mul(cot, a)));
        return;
      case Op::Sigmoid: {
        VarId one_minus = add_scalar(neg(i), 1.0);
        sink(a, mul(cot, mul(VarId(i), one_minus)));
        return;
      }
      case Op::Softplus:
        sink(a, mul(cot, sigmoid_op(scale(a, n.c0))));
        return;
      case Op::Exp:
        sink(a, mul(cot, i));
        return;
      case Op::Log:
        sink(a, div(cot, a));
        return;
      case Op::Square:
        sink(a, scale(mul(cot, a), 2.0));
        return;
      case Op::Sqrt:
        sink(a, div(cot, scale(clamp_min(VarId(i), 1e-12), 2.0)));
        return;
      case Op::Sin:
        sink(a, mul(cot, cos_op(a)));
        return;
      case Op::Cos:
        sink(a, neg(mul(cot, sin_op(a))));
        return;
      case Op::Relu: {
        // Mask as (x > 0) via the saved output: y/x is unstable, so rebuild
        // the mask from a clamp comparison instead.
        sink(a, mul(cot, step_mask(a, 0.0)));
        return;
      }
      case Op::ClampMin:
        sink(a, mul(cot, step_mask(a, n.c0)));
        return;
      case Op::Sum: {
        const auto& A = val(a);
        VarId ones = ones_like(A.rows(), A.cols());
        sink(a, scale_var(ones, cot));
        return;
      }
      case Op::Mean: {
        const auto& A = val(a);
        VarId ones = ones_like(A.rows(), A.cols());
        sink(a, scale(scale_var(ones, cot), 1.0 / double(A.size())));
        return;
      }
      case Op::RowNorm: {
        VarId denom = clamp_min(VarId(i), 1e-12);
        sink(a, mul_colvec(VarId(a), div(cot, denom)));
        return;
      }
      case Op::RowSum:
        sink(a, mul_colvec(ones_like(val(a).rows(), val(a).cols()), cot));
        return;
      case Op::RowMean:
        sink(a, scale(mul_colvec(ones_like(val(a).rows(), val(a).cols()), cot), 1.0 / double(val(a).cols())));
        return;
      case Op::AddRowVec:
        sink(a, cot);
        // Row-vector side is a bias; second-order paths never need it.
        return;
      case Op::AddColVec:
        sink(a, cot);
        sink(b, row_sum(cot));
        return;
      case Op::MulColVec:
        sink(a, mul_colvec(cot, b));
        sink(b, row_sum(mul(cot, a)));
        return;
      case Op::ConcatCols: {
        int at = 0;
        std::vector<VarId> parts{a};
        if (b != kNoVar) parts.push_back(b);
        for (VarId e : n.extra_in) parts.push_back(e);
        for (VarId p : parts) {
          int pc = val(p).cols();
          sink(p, slice_cols(cot, at, pc));
          at += pc;
        }
        return;
      }
      case Op::SliceCols: {
        int total = val(a).cols();
        sink(a, pad_cols(cot, n.i0, total - n.i0 - n.i1));
        return;
      }
      case Op::PadCols:
        sink(a, slice_cols(cot, n.i0, val(a).cols()));
        return;
      case Op::Reshape:
        sink(a, reshape(cot, n.i0, n.i1));
        return;
      case Op::GatherRows:
      case Op::SegSumRows:
      case Op::CumprodExcl:
      case Op::Bilerp:
      default:
        throw Error(std::string("gradient(): op not supported in differentiable-gradient paths: ") +
                    op_name(n.op));
    }
  }

  VarId ones_like(int r, int c) {
    Tensor<T> t(r, c);
    t.fill(T(1));
    return constant(std::move(t));
  }

  // 1 where val(x) > thresh else 0, recorded as a constant mask of the
  // current values (the mask is piecewise constant, so this is the exact
  // a.e. derivative).
  VarId step_mask(VarId x, double thresh) {
    const auto& X = val(x);
    Tensor<T> m(X.rows(), X.cols());
    for (size_t k = 0; k < X.size(); ++k) m.data[k] = X.data[k] > T(thresh) ? T(1) : T(0);
    return constant(std::move(m));
  }
};

template <class T>
void matmul_block(Tensor<T>& out, const Tensor<T>& a, const Tensor<T>& b, bool ta, bool tb, bool accumulate) {
  auto A = a.mat();
  auto B = b.mat();
  auto C = out.mat();
  const int rows = out.rows();
  const long flops = 2L * out.rows() * out.cols() * (ta ? a.rows() : a.cols());
  const int kBlock = 128;
  if (flops < (1L << 21) || rows < 2 * kBlock) {
    if (!ta && !tb)
      accumulate ? void(C.noalias() += A * B) : void(C.noalias() = A * B);
    else if (ta && !tb)
      accumulate ? void(C.noalias() += A.transpose() * B) : void(C.noalias() = A.transpose() * B);
    else if (!ta && tb)
      accumulate ? void(C.noalias() += A * B.transpose()) : void(C.noalias() = A * B.transpose());
    else
      accumulate ? void(C.noalias() += A.transpose() * B.transpose())
                 : void(C.noalias() = A.transpose() * B.transpose());
    return;
  }
#pragma omp parallel for schedule(dynamic, 1)
  for (int r0 = 0; r0 < rows; r0 += kBlock) {
    int len = std::min(kBlock, rows - r0);
    auto Cb = C.middleRows(r0, len);
    if (!ta && !tb)
      accumulate ? void(Cb.noalias() += A.middleRows(r0, len) * B) : void(Cb.noalias() = A.middleRows(r0, len) * B);
    else if (ta && !tb)
      accumulate ? void(Cb.noalias() += A.middleCols(r0, len).transpose() * B)
                 : void(Cb.noalias() = A.middleCols(r0, len).transpose() * B);
    else if (!ta && tb)
      accumulate ? void(Cb.noalias() += A.middleRows(r0, len) * B.transpose())
                 : void(Cb.noalias() = A.middleRows(r0, len) * B.transpose());
    else
      accumulate ? void(Cb.noalias() += A.middleCols(r0, len).transpose() * B.transpose())
                 : void(Cb.noalias() = A.middleCols(r0, len).transpose() * B.transpose());
  }
}

}  // namespace pgns
