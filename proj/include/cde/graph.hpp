#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "cde/tensor.hpp"

namespace cde {

enum class Op : std::uint8_t {
  Leaf,
  MatMul,
  Conv2d,
  Add,        // same shape, [N,D]+[D], or [N,C,H,W]+[C]
  AddScalar,
  Mul,        // elementwise, same shape
  MulScalar,
  Relu,
  Tanh,
  Sigmoid,
  Mean,
  Sum,
  Clip,
  Concat,     // 2-D tensors along dim 1
  Reshape,
  AvgPool2,
  Upsample2,
  BceLogits,
  Minimum,
};

inline const char* op_name(Op op) {
  switch (op) {
    case Op::Leaf: return "leaf";
    case Op::MatMul: return "matmul";
    case Op::Conv2d: return "conv2d";
    case Op::Add: return "add";
    case Op::AddScalar: return "add_scalar";
    case Op::Mul: return "mul";
    case Op::MulScalar: return "mul_scalar";
    case Op::Relu: return "relu";
    case Op::Tanh: return "tanh";
    case Op::Sigmoid: return "sigmoid";
    case Op::Mean: return "mean";
    case Op::Sum: return "sum";
    case Op::Clip: return "clip";
    case Op::Concat: return "concat";
    case Op::Reshape: return "reshape";
    case Op::AvgPool2: return "avg_pool2";
    case Op::Upsample2: return "upsample2";
    case Op::BceLogits: return "bce_logits";
    case Op::Minimum: return "minimum";
  }
  return "?";
}

[[noreturn]] inline void op_fail(Op op, const std::string& msg) {
  throw std::invalid_argument(std::string(op_name(op)) + ": " + msg);
}

/// Reverse-mode tape. Nodes are appended in construction order, which is a
/// topological order by construction; backward walks the list in reverse and
/// visits each reachable node once. A graph is built for one forward pass and
/// discarded; a second backward on the same graph is an error.
template <typename T>
class Graph {
 public:
  struct Node {
    Op op = Op::Leaf;
    std::vector<int> parents;
    Tensor<T> value;
    std::vector<T> grad;
    bool needs_grad = false;
    bool reached = false;
    // op-specific extras
    int i0 = 0, i1 = 0;
    T s0{}, s1{};
    Shape saved_shape;
  };

  bool grad_enabled = true;

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  // Node buffers go back to a per-thread free list so the next graph reuses
  // warm, already-sized memory instead of paying allocation plus zero-fill on
  // every op. Ops write every element of a fresh value buffer, so the stale
  // contents are never observable. Leaf values are exempt: their storage
  // comes from the caller, not the pool, and recycling them would grow the
  // pool by one leaf-sized buffer per graph with nothing ever taking them.
  ~Graph() {
    for (Node& n : nodes_) {
      if (n.op != Op::Leaf) pool_put(std::move(n.value.v));
      pool_put(std::move(n.grad));
    }
  }

  int size() const { return static_cast<int>(nodes_.size()); }
  const Tensor<T>& val(int id) const { return nodes_[check(id)].value; }

  const std::vector<T>& grad(int id) const {
    const Node& n = nodes_[check(id)];
    if (!backward_ran_) throw std::runtime_error("grad: backward has not run");
    if (n.grad.empty()) throw std::runtime_error("grad: node not reached by backward");
    return n.grad;
  }

  bool grad_defined(int id) const { return !nodes_[check(id)].grad.empty(); }

  int leaf(Tensor<T> t) {
    Node n;
    n.op = Op::Leaf;
    n.needs_grad = t.requires_grad && grad_enabled;
    n.value = std::move(t);
    return push(std::move(n));
  }

  int constant(Tensor<T> t) {
    t.requires_grad = false;
    return leaf(std::move(t));
  }

  // ---- ops ------------------------------------------------------------

  int matmul(int a, int b) {
    const Tensor<T>& A = val(a);
    const Tensor<T>& B = val(b);
    if (A.ndim() != 2 || B.ndim() != 2)
      op_fail(Op::MatMul, "expects 2-D operands, got " + shape_str(A.shape) + " and " + shape_str(B.shape));
    if (A.dim(1) != B.dim(0))
      op_fail(Op::MatMul, "inner dims differ: " + shape_str(A.shape) + " x " + shape_str(B.shape));
    Node n = make(Op::MatMul, {a, b});
    n.value = fresh(Shape{A.dim(0), B.dim(1)});
    mm(A.data(), A.dim(0), A.dim(1), B.data(), B.dim(1), n.value.data(), false, false);
    return push(std::move(n));
  }

  /// x: [N,Ci,H,W], w: [Co,Ci,kh,kw]; stride 1, zero padding `pad`.
  int conv2d(int x, int w, int pad) {
    const Tensor<T>& X = val(x);
    const Tensor<T>& W = val(w);
    if (X.ndim() != 4 || W.ndim() != 4)
      op_fail(Op::Conv2d, "expects 4-D input/weight, got " + shape_str(X.shape) + " and " + shape_str(W.shape));
    if (pad < 0) op_fail(Op::Conv2d, "negative padding");
    if (X.dim(1) != W.dim(1))
      op_fail(Op::Conv2d, "channel mismatch: input " + shape_str(X.shape) + " vs weight " + shape_str(W.shape));
    const std::int64_t H = X.dim(2), Wd = X.dim(3), kh = W.dim(2), kw = W.dim(3);
    const std::int64_t Ho = H + 2 * pad - kh + 1, Wo = Wd + 2 * pad - kw + 1;
    if (Ho <= 0 || Wo <= 0)
      op_fail(Op::Conv2d, "kernel " + shape_str(W.shape) + " too large for input " + shape_str(X.shape));
    Node n = make(Op::Conv2d, {x, w});
    n.i0 = pad;
    n.value = fresh(Shape{X.dim(0), W.dim(0), Ho, Wo});
    conv_forward(X, W, pad, n.value);
    return push(std::move(n));
  }

  int add(int a, int b) {
    const Tensor<T>& A = val(a);
    const Tensor<T>& B = val(b);
    int mode = add_mode(A.shape, B.shape);
    if (mode < 0)
      op_fail(Op::Add, "incompatible shapes " + shape_str(A.shape) + " and " + shape_str(B.shape));
    Node n = make(Op::Add, {a, b});
    n.i0 = mode;
    n.value = fresh(A.shape);
    const std::int64_t total = A.numel();
    const T* pa = A.data();
    const T* pb = B.data();
    T* o = n.value.data();
    if (mode == 0) {
      for (std::int64_t i = 0; i < total; ++i) o[i] = pa[i] + pb[i];
    } else {
      const std::int64_t C = B.numel();
      const std::int64_t inner = (mode == 1) ? 1 : A.dim(2) * A.dim(3);
      if (inner == 1) {
        for (std::int64_t r = 0; r < total / C; ++r)
          for (std::int64_t c = 0; c < C; ++c) o[r * C + c] = pa[r * C + c] + pb[c];
      } else {
        for (std::int64_t blk = 0; blk < total / inner; ++blk) {
          const T bias = pb[blk % C];
          const T* src = pa + blk * inner;
          T* dst = o + blk * inner;
          for (std::int64_t k = 0; k < inner; ++k) dst[k] = src[k] + bias;
        }
      }
    }
    return push(std::move(n));
  }

  int add_scalar(int a, T s) {
    Node n = make(Op::AddScalar, {a});
    n.s0 = s;
    const Tensor<T>& A = val(a);
    n.value = fresh(A.shape);
    for (std::int64_t i = 0; i < A.numel(); ++i) n.value[i] = A[i] + s;
    return push(std::move(n));
  }

  int mul(int a, int b) {
    const Tensor<T>& A = val(a);
    const Tensor<T>& B = val(b);
    if (A.shape != B.shape)
      op_fail(Op::Mul, "shape mismatch " + shape_str(A.shape) + " vs " + shape_str(B.shape));
    Node n = make(Op::Mul, {a, b});
    n.value = fresh(A.shape);
    for (std::int64_t i = 0; i < A.numel(); ++i) n.value[i] = A[i] * B[i];
    return push(std::move(n));
  }

  int mul_scalar(int a, T s) {
    Node n = make(Op::MulScalar, {a});
    n.s0 = s;
    const Tensor<T>& A = val(a);
    n.value = fresh(A.shape);
    for (std::int64_t i = 0; i < A.numel(); ++i) n.value[i] = A[i] * s;
    return push(std::move(n));
  }

  int relu(int a) { return unary(Op::Relu, a); }
  int tanh_(int a) { return unary(Op::Tanh, a); }
  int sigmoid(int a) { return unary(Op::Sigmoid, a); }

  int mean(int a) { return reduce(Op::Mean, a); }
  int sum(int a) { return reduce(Op::Sum, a); }

  int clip(int a, T lo, T hi) {
    if (!(lo <= hi)) op_fail(Op::Clip, "lo > hi");
    Node n = make(Op::Clip, {a});
    n.s0 = lo;
    n.s1 = hi;
    const Tensor<T>& A = val(a);
    n.value = fresh(A.shape);
    for (std::int64_t i = 0; i < A.numel(); ++i) n.value[i] = std::min(hi, std::max(lo, A[i]));
    return push(std::move(n));
  }

  /// Concatenate two 2-D tensors along dim 1.
  int concat(int a, int b) {
    const Tensor<T>& A = val(a);
    const Tensor<T>& B = val(b);
    if (A.ndim() != 2 || B.ndim() != 2 || A.dim(0) != B.dim(0))
      op_fail(Op::Concat, "expects 2-D with equal rows, got " + shape_str(A.shape) + " and " + shape_str(B.shape));
    Node n = make(Op::Concat, {a, b});
    const std::int64_t N = A.dim(0), da = A.dim(1), db = B.dim(1);
    n.value = fresh(Shape{N, da + db});
    for (std::int64_t r = 0; r < N; ++r) {
      std::copy_n(A.data() + r * da, da, n.value.data() + r * (da + db));
      std::copy_n(B.data() + r * db, db, n.value.data() + r * (da + db) + da);
    }
    return push(std::move(n));
  }

  int reshape(int a, Shape s) {
    const Tensor<T>& A = val(a);
    if (shape_numel(s) != A.numel())
      op_fail(Op::Reshape, "cannot view " + shape_str(A.shape) + " as " + shape_str(s));
    Node n = make(Op::Reshape, {a});
    n.saved_shape = A.shape;
    n.value = fresh(s);
    std::copy(A.v.begin(), A.v.end(), n.value.v.begin());
    return push(std::move(n));
  }

  /// 2x2 average pooling, stride 2; [N,C,H,W] with even H and W.
  int avg_pool2(int a) {
    const Tensor<T>& A = val(a);
    if (A.ndim() != 4 || A.dim(2) % 2 || A.dim(3) % 2)
      op_fail(Op::AvgPool2, "expects 4-D with even spatial dims, got " + shape_str(A.shape));
    const std::int64_t NC = A.dim(0) * A.dim(1), H = A.dim(2), W = A.dim(3);
    Node n = make(Op::AvgPool2, {a});
    n.value = fresh(Shape{A.dim(0), A.dim(1), H / 2, W / 2});
    const T* src = A.data();
    T* dst = n.value.data();
    for (std::int64_t c = 0; c < NC; ++c) {
      const T* p = src + c * H * W;
      T* q = dst + c * (H / 2) * (W / 2);
      for (std::int64_t y = 0; y < H; y += 2) {
        const T* r0 = p + y * W;
        const T* r1 = r0 + W;
        T* out = q + (y / 2) * (W / 2);
        for (std::int64_t x = 0; x < W; x += 2)
          out[x / 2] = (r0[x] + r0[x + 1] + r1[x] + r1[x + 1]) * T(0.25);
      }
    }
    return push(std::move(n));
  }

  /// Nearest-neighbour 2x upsampling of [N,C,H,W].
  int upsample2(int a) {
    const Tensor<T>& A = val(a);
    if (A.ndim() != 4) op_fail(Op::Upsample2, "expects 4-D, got " + shape_str(A.shape));
    const std::int64_t NC = A.dim(0) * A.dim(1), H = A.dim(2), W = A.dim(3);
    Node n = make(Op::Upsample2, {a});
    n.value = fresh(Shape{A.dim(0), A.dim(1), H * 2, W * 2});
    const T* src = A.data();
    T* dst = n.value.data();
    for (std::int64_t c = 0; c < NC; ++c) {
      const T* p = src + c * H * W;
      T* q = dst + c * 4 * H * W;
      for (std::int64_t y = 0; y < H; ++y) {
        const T* row = p + y * W;
        T* q0 = q + 2 * y * 2 * W;
        for (std::int64_t x = 0; x < W; ++x) q0[2 * x] = q0[2 * x + 1] = row[x];
        std::copy_n(q0, 2 * W, q0 + 2 * W);
      }
    }
    return push(std::move(n));
  }

  /// Mean binary cross-entropy between sigmoid(logits) and a {0,1} target,
  /// in the stable log-sum-exp form. Scalar output; no gradient to target.
  int bce_with_logits(int logits, int target) {
    const Tensor<T>& X = val(logits);
    const Tensor<T>& Y = val(target);
    if (X.shape != Y.shape)
      op_fail(Op::BceLogits, "shape mismatch " + shape_str(X.shape) + " vs " + shape_str(Y.shape));
    Node n = make(Op::BceLogits, {logits, target});
    double acc = 0.0;
    for (std::int64_t i = 0; i < X.numel(); ++i) {
      const double x = static_cast<double>(X[i]);
      const double y = static_cast<double>(Y[i]);
      acc += std::max(x, 0.0) - x * y + std::log1p(std::exp(-std::abs(x)));
    }
    n.value = fresh(Shape{1});
    n.value.v[0] = static_cast<T>(acc / static_cast<double>(X.numel()));
    return push(std::move(n));
  }

  int minimum(int a, int b) {
    const Tensor<T>& A = val(a);
    const Tensor<T>& B = val(b);
    if (A.shape != B.shape)
      op_fail(Op::Minimum, "shape mismatch " + shape_str(A.shape) + " vs " + shape_str(B.shape));
    Node n = make(Op::Minimum, {a, b});
    n.value = fresh(A.shape);
    for (std::int64_t i = 0; i < A.numel(); ++i) n.value[i] = std::min(A[i], B[i]);
    return push(std::move(n));
  }

  // ---- backward -------------------------------------------------------

  void backward(int loss) {
    if (backward_ran_)
      throw std::runtime_error("backward: called twice on one graph; build a fresh graph per pass");
    const Node& L = nodes_[check(loss)];
    if (L.value.numel() != 1)
      throw std::invalid_argument("backward: loss must be scalar, got " + shape_str(L.value.shape));
    backward_ran_ = true;
    if (!L.needs_grad) return;  // nothing requires grad

    // reachability over needs_grad nodes
    std::vector<int> stack{loss};
    nodes_[loss].reached = true;
    while (!stack.empty()) {
      int id = stack.back();
      stack.pop_back();
      for (int p : nodes_[id].parents)
        if (nodes_[p].needs_grad && !nodes_[p].reached) {
          nodes_[p].reached = true;
          stack.push_back(p);
        }
    }
    for (Node& n : nodes_)
      if (n.reached) {
        n.grad = pool_take(static_cast<std::size_t>(n.value.numel()));
        std::fill(n.grad.begin(), n.grad.end(), T(0));
      }
    nodes_[loss].grad[0] = T(1);

    for (int id = loss; id >= 0; --id) {
      Node& n = nodes_[id];
      if (!n.reached || n.op == Op::Leaf) continue;
      backprop(n);
    }
  }

  bool backward_ran() const { return backward_ran_; }

 private:
  std::vector<Node> nodes_;
  bool backward_ran_ = false;

  int check(int id) const {
    if (id < 0 || id >= size()) throw std::out_of_range("graph: bad node id");
    return id;
  }

  static std::unordered_map<std::size_t, std::vector<std::vector<T>>>& buffer_pool() {
    thread_local std::unordered_map<std::size_t, std::vector<std::vector<T>>> pool;
    return pool;
  }

  static std::vector<T> pool_take(std::size_t count) {
    auto& pool = buffer_pool();
    auto it = pool.find(count);
    if (it != pool.end() && !it->second.empty()) {
      std::vector<T> v = std::move(it->second.back());
      it->second.pop_back();
      return v;
    }
    return std::vector<T>(count);
  }

  static void pool_put(std::vector<T>&& v) {
    if (v.empty()) return;
    buffer_pool()[v.size()].push_back(std::move(v));
  }

  // Uninitialized-content tensor backed by the buffer pool; the caller must
  // write every element.
  static Tensor<T> fresh(Shape s) {
    const auto count = static_cast<std::size_t>(shape_numel(s));
    return Tensor<T>(std::move(s), pool_take(count));
  }

  Node make(Op op, std::vector<int> parents) {
    Node n;
    n.op = op;
    bool ng = false;
    for (int p : parents) ng = ng || nodes_[check(p)].needs_grad;
    n.needs_grad = ng && grad_enabled;
    n.parents = std::move(parents);
    return n;
  }

  int push(Node n) {
    nodes_.push_back(std::move(n));
    return size() - 1;
  }

  int unary(Op op, int a) {
    Node n = make(op, {a});
    const Tensor<T>& A = val(a);
    n.value = fresh(A.shape);
    const std::int64_t total = A.numel();
    const T* x = A.data();
    T* o = n.value.data();
    switch (op) {
      case Op::Relu:
        for (std::int64_t i = 0; i < total; ++i) o[i] = x[i] > T(0) ? x[i] : T(0);
        break;
      case Op::Tanh:
        for (std::int64_t i = 0; i < total; ++i) o[i] = std::tanh(x[i]);
        break;
      case Op::Sigmoid:
        for (std::int64_t i = 0; i < total; ++i) o[i] = T(1) / (T(1) + std::exp(-x[i]));
        break;
      default:
        op_fail(op, "not unary");
    }
    return push(std::move(n));
  }

  int reduce(Op op, int a) {
    Node n = make(op, {a});
    const Tensor<T>& A = val(a);
    double acc = 0.0;
    for (std::int64_t i = 0; i < A.numel(); ++i) acc += static_cast<double>(A[i]);
    if (op == Op::Mean) acc /= static_cast<double>(A.numel());
    n.value = fresh(Shape{1});
    n.value.v[0] = static_cast<T>(acc);
    return push(std::move(n));
  }

  // add broadcast mode: 0 same shape, 1 [N,D]+[D], 2 [N,C,H,W]+[C], -1 invalid
  static int add_mode(const Shape& a, const Shape& b) {
    if (a == b) return 0;
    if (a.size() == 2 && b.size() == 1 && a[1] == b[0]) return 1;
    if (a.size() == 4 && b.size() == 1 && a[1] == b[0]) return 2;
    return -1;
  }

  // C[m,n] (+)= A[m,k] * B[k,n]; row-major buffers. transA/transB swap the
  // logical orientation of A/B without materializing transposes.
  static void mm(const T* A, std::int64_t m, std::int64_t k, const T* B, std::int64_t n, T* C,
                 bool accumulate, bool dummy) {
    (void)dummy;
    using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    Eigen::Map<const Mat> a(A, m, k), b(B, k, n);
    Eigen::Map<Mat> c(C, m, n);
    if (accumulate)
      c.noalias() += a * b;
    else
      c.noalias() = a * b;
  }

  static void mm_at_b(const T* A, std::int64_t k, std::int64_t m, const T* B, std::int64_t n, T* C,
                      bool accumulate) {
    using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    Eigen::Map<const Mat> a(A, k, m), b(B, k, n);
    Eigen::Map<Mat> c(C, m, n);
    if (accumulate)
      c.noalias() += a.transpose() * b;
    else
      c.noalias() = a.transpose() * b;
  }

  static void mm_a_bt(const T* A, std::int64_t m, std::int64_t k, const T* B, std::int64_t n, T* C,
                      bool accumulate) {
    using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    Eigen::Map<const Mat> a(A, m, k), b(B, n, k);
    Eigen::Map<Mat> c(C, m, n);
    if (accumulate)
      c.noalias() += a * b.transpose();
    else
      c.noalias() = a * b.transpose();
  }

  static std::vector<T>& scratch_cols() {
    thread_local std::vector<T> buf;
    return buf;
  }

  // Writes one sample's patches into a [Ci*kh*kw, ld] column matrix at column
  // offset `col0`; all samples of a batch share the matrix so the convolution
  // becomes a single GEMM instead of N narrow ones.
  static void im2col(const T* x, std::int64_t Ci, std::int64_t H, std::int64_t W, std::int64_t kh,
                     std::int64_t kw, int pad, std::int64_t Ho, std::int64_t Wo, T* cols,
                     std::int64_t col0, std::int64_t ld) {
    for (std::int64_t ci = 0; ci < Ci; ++ci)
      for (std::int64_t ky = 0; ky < kh; ++ky)
        for (std::int64_t kx = 0; kx < kw; ++kx) {
          T* row = cols + ((ci * kh + ky) * kw + kx) * ld + col0;
          const std::int64_t dx = kx - pad;
          const std::int64_t x0 = std::max<std::int64_t>(0, -dx);
          const std::int64_t x1 = std::min(Wo, W - dx);
          for (std::int64_t oy = 0; oy < Ho; ++oy) {
            T* dst = row + oy * Wo;
            const std::int64_t iy = oy + ky - pad;
            if (iy < 0 || iy >= H) {
              std::fill_n(dst, Wo, T(0));
              continue;
            }
            const T* src = x + (ci * H + iy) * W + dx;
            if (x0 > 0) std::fill_n(dst, x0, T(0));
            if (x1 > x0) std::copy(src + x0, src + x1, dst + x0);
            if (x1 < Wo) std::fill_n(dst + x1, Wo - x1, T(0));
          }
        }
  }

  static void col2im_add(const T* cols, std::int64_t Ci, std::int64_t H, std::int64_t W,
                         std::int64_t kh, std::int64_t kw, int pad, std::int64_t Ho,
                         std::int64_t Wo, T* gx, std::int64_t col0, std::int64_t ld) {
    for (std::int64_t ci = 0; ci < Ci; ++ci)
      for (std::int64_t ky = 0; ky < kh; ++ky)
        for (std::int64_t kx = 0; kx < kw; ++kx) {
          const T* row = cols + ((ci * kh + ky) * kw + kx) * ld + col0;
          const std::int64_t dx = kx - pad;
          const std::int64_t x0 = std::max<std::int64_t>(0, -dx);
          const std::int64_t x1 = std::min(Wo, W - dx);
          for (std::int64_t oy = 0; oy < Ho; ++oy) {
            const std::int64_t iy = oy + ky - pad;
            if (iy < 0 || iy >= H) continue;
            T* dst = gx + (ci * H + iy) * W + dx;
            const T* src = row + oy * Wo;
            for (std::int64_t ox = x0; ox < x1; ++ox) dst[ox] += src[ox];
          }
        }
  }

  static void conv_forward(const Tensor<T>& X, const Tensor<T>& W, int pad, Tensor<T>& out) {
    const std::int64_t N = X.dim(0), Ci = X.dim(1), H = X.dim(2), Wd = X.dim(3);
    const std::int64_t Co = W.dim(0), kh = W.dim(2), kw = W.dim(3);
    const std::int64_t Ho = out.dim(2), Wo = out.dim(3);
    const std::int64_t K = Ci * kh * kw;
    const std::int64_t P = Ho * Wo;
    auto& cols = scratch_cols();
    cols.resize(static_cast<std::size_t>(K * P));
    for (std::int64_t n = 0; n < N; ++n) {
      im2col(X.data() + n * Ci * H * Wd, Ci, H, Wd, kh, kw, pad, Ho, Wo, cols.data(), 0, P);
      mm(W.data(), Co, K, cols.data(), P, out.data() + n * Co * P, false, false);
    }
  }

  void conv_backward(Node& n) {
    Node& xn = nodes_[n.parents[0]];
    Node& wn = nodes_[n.parents[1]];
    const Tensor<T>& X = xn.value;
    const Tensor<T>& W = wn.value;
    const int pad = n.i0;
    const std::int64_t N = X.dim(0), Ci = X.dim(1), H = X.dim(2), Wd = X.dim(3);
    const std::int64_t Co = W.dim(0), kh = W.dim(2), kw = W.dim(3);
    const std::int64_t Ho = n.value.dim(2), Wo = n.value.dim(3);
    const std::int64_t K = Ci * kh * kw;
    const std::int64_t P = Ho * Wo;
    auto& cols = scratch_cols();
    cols.resize(static_cast<std::size_t>(K * P));
    thread_local std::vector<T> gcols;
    gcols.resize(static_cast<std::size_t>(K * P));
    for (std::int64_t s = 0; s < N; ++s) {
      const T* gout = n.grad.data() + s * Co * P;
      if (wn.reached) {
        im2col(X.data() + s * Ci * H * Wd, Ci, H, Wd, kh, kw, pad, Ho, Wo, cols.data(), 0, P);
        mm_a_bt(gout, Co, P, cols.data(), K, wn.grad.data(), true);
      }
      if (xn.reached) {
        mm_at_b(W.data(), Co, K, gout, P, gcols.data(), false);
        col2im_add(gcols.data(), Ci, H, Wd, kh, kw, pad, Ho, Wo, xn.grad.data() + s * Ci * H * Wd,
                   0, P);
      }
    }
  }

  void backprop(Node& n) {
    Node* pa = n.parents.empty() ? nullptr : &nodes_[n.parents[0]];
    Node* pb = n.parents.size() > 1 ? &nodes_[n.parents[1]] : nullptr;
    const std::int64_t total = n.value.numel();
    switch (n.op) {
      case Op::MatMul: {
        const std::int64_t m = pa->value.dim(0), k = pa->value.dim(1), c = pb->value.dim(1);
        if (pa->reached) mm_a_bt(n.grad.data(), m, c, pb->value.data(), k, pa->grad.data(), true);
        if (pb->reached) mm_at_b(pa->value.data(), m, k, n.grad.data(), c, pb->grad.data(), true);
        break;
      }
      case Op::Conv2d:
        conv_backward(n);
        break;
      case Op::Add: {
        if (pa->reached) {
          T* ga = pa->grad.data();
          const T* gn = n.grad.data();
          for (std::int64_t i = 0; i < total; ++i) ga[i] += gn[i];
        }
        if (pb->reached) {
          T* gb = pb->grad.data();
          const T* gn = n.grad.data();
          if (n.i0 == 0) {
            for (std::int64_t i = 0; i < total; ++i) gb[i] += gn[i];
          } else {
            // Per-channel accumulation in the same element order the flat
            // index walk used, so sums round identically.
            const std::int64_t C = pb->value.numel();
            const std::int64_t inner = (n.i0 == 1) ? 1 : pa->value.dim(2) * pa->value.dim(3);
            if (inner == 1) {
              for (std::int64_t r = 0; r < total / C; ++r) {
                const T* row = gn + r * C;
                for (std::int64_t c = 0; c < C; ++c) gb[c] += row[c];
              }
            } else {
              for (std::int64_t blk = 0; blk < total / inner; ++blk) {
                const T* src = gn + blk * inner;
                T* acc = gb + blk % C;
                for (std::int64_t k = 0; k < inner; ++k) *acc += src[k];
              }
            }
          }
        }
        break;
      }
      case Op::AddScalar:
        if (pa->reached) {
          T* ga = pa->grad.data();
          const T* gn = n.grad.data();
          for (std::int64_t i = 0; i < total; ++i) ga[i] += gn[i];
        }
        break;
      case Op::Mul:
        if (pa->reached) {
          T* ga = pa->grad.data();
          const T* gn = n.grad.data();
          const T* vb = pb->value.data();
          for (std::int64_t i = 0; i < total; ++i) ga[i] += gn[i] * vb[i];
        }
        if (pb->reached) {
          T* gb = pb->grad.data();
          const T* gn = n.grad.data();
          const T* va = pa->value.data();
          for (std::int64_t i = 0; i < total; ++i) gb[i] += gn[i] * va[i];
        }
        break;
      case Op::MulScalar:
        if (pa->reached) {
          T* ga = pa->grad.data();
          const T* gn = n.grad.data();
          const T s = n.s0;
          for (std::int64_t i = 0; i < total; ++i) ga[i] += gn[i] * s;
        }
        break;
      case Op::Relu:
        if (pa->reached) {
          T* ga = pa->grad.data();
          const T* gn = n.grad.data();
          const T* va = pa->value.data();
          for (std::int64_t i = 0; i < total; ++i) ga[i] += va[i] > T(0) ? gn[i] : T(0);
        }
        break;
      case Op::Tanh:
        if (pa->reached) {
          T* ga = pa->grad.data();
          const T* gn = n.grad.data();
          const T* vn = n.value.data();
          for (std::int64_t i = 0; i < total; ++i) ga[i] += gn[i] * (T(1) - vn[i] * vn[i]);
        }
        break;
      case Op::Sigmoid:
        if (pa->reached) {
          T* ga = pa->grad.data();
          const T* gn = n.grad.data();
          const T* vn = n.value.data();
          for (std::int64_t i = 0; i < total; ++i) ga[i] += gn[i] * vn[i] * (T(1) - vn[i]);
        }
        break;
      case Op::Mean: {
        if (pa->reached) {
          const T g = n.grad[0] / static_cast<T>(pa->value.numel());
          for (std::int64_t i = 0; i < pa->value.numel(); ++i) pa->grad[i] += g;
        }
        break;
      }
      case Op::Sum:
        if (pa->reached)
          for (std::int64_t i = 0; i < pa->value.numel(); ++i) pa->grad[i] += n.grad[0];
        break;
      case Op::Clip:
        if (pa->reached) {
          T* ga = pa->grad.data();
          const T* gn = n.grad.data();
          const T* va = pa->value.data();
          const T lo = n.s0, hi = n.s1;
          for (std::int64_t i = 0; i < total; ++i)
            ga[i] += (va[i] >= lo && va[i] <= hi) ? gn[i] : T(0);
        }
        break;
      case Op::Concat: {
        const std::int64_t N = n.value.dim(0);
        const std::int64_t da = pa->value.dim(1), db = pb->value.dim(1);
        for (std::int64_t r = 0; r < N; ++r) {
          if (pa->reached)
            for (std::int64_t i = 0; i < da; ++i) pa->grad[r * da + i] += n.grad[r * (da + db) + i];
          if (pb->reached)
            for (std::int64_t i = 0; i < db; ++i)
              pb->grad[r * db + i] += n.grad[r * (da + db) + da + i];
        }
        break;
      }
      case Op::Reshape:
        if (pa->reached)
          for (std::int64_t i = 0; i < total; ++i) pa->grad[i] += n.grad[i];
        break;
      case Op::AvgPool2: {
        if (pa->reached) {
          const std::int64_t NC = pa->value.dim(0) * pa->value.dim(1);
          const std::int64_t H = pa->value.dim(2), W = pa->value.dim(3);
          for (std::int64_t c = 0; c < NC; ++c) {
            T* gp = pa->grad.data() + c * H * W;
            const T* gq = n.grad.data() + c * (H / 2) * (W / 2);
            for (std::int64_t y = 0; y < H; ++y) {
              T* row = gp + y * W;
              const T* src = gq + (y / 2) * (W / 2);
              for (std::int64_t x = 0; x < W; x += 2) {
                const T g = src[x / 2] * T(0.25);
                row[x] += g;
                row[x + 1] += g;
              }
            }
          }
        }
        break;
      }
      case Op::Upsample2: {
        if (pa->reached) {
          const std::int64_t NC = pa->value.dim(0) * pa->value.dim(1);
          const std::int64_t H = pa->value.dim(2), W = pa->value.dim(3);
          for (std::int64_t c = 0; c < NC; ++c) {
            T* gp = pa->grad.data() + c * H * W;
            const T* gq = n.grad.data() + c * 4 * H * W;
            // Row pairs folded in the same order the flat target walk visited
            // them, so each source cell accumulates identically.
            for (std::int64_t y = 0; y < 2 * H; ++y) {
              T* row = gp + (y / 2) * W;
              const T* src = gq + y * 2 * W;
              for (std::int64_t x = 0; x < W; ++x) {
                row[x] += src[2 * x];
                row[x] += src[2 * x + 1];
              }
            }
          }
        }
        break;
      }
      case Op::BceLogits: {
        if (pa->reached) {
          const std::int64_t m = pa->value.numel();
          const T g = n.grad[0] / static_cast<T>(m);
          for (std::int64_t i = 0; i < m; ++i) {
            const T s = T(1) / (T(1) + std::exp(-pa->value[i]));
            pa->grad[i] += g * (s - pb->value[i]);
          }
        }
        break;
      }
      case Op::Minimum:
        for (std::int64_t i = 0; i < total; ++i) {
          const bool a_min = pa->value[i] <= pb->value[i];
          if (a_min && pa->reached) pa->grad[i] += n.grad[i];
          if (!a_min && pb->reached) pb->grad[i] += n.grad[i];
        }
        break;
      case Op::Leaf:
        break;
      default:
        throw std::runtime_error("backprop: unhandled op");
    }
  }
};

/// RAII guard: ops created while active do not track gradients.
template <typename T>
class NoGrad {
 public:
  explicit NoGrad(Graph<T>& g) : g_(g), prev_(g.grad_enabled) { g_.grad_enabled = false; }
  ~NoGrad() { g_.grad_enabled = prev_; }

 private:
  Graph<T>& g_;
  bool prev_;
};

}  // namespace cde
