#pragma once
// Minimal dense-tensor engine with reverse-mode differentiation. Tensors are
// immutable value handles onto a tape; every primitive records a backward
// closure, and backward() replays the tape once in reverse, accumulating
// gradients additively across fan-out. Two scalar types are supported: float
// for training, double for verification (finite-difference checks).
//
// Matrix-multiply-shaped work (conv via im2col, linear, batched matmul) is
// lowered to cblas_{s,d}gemm; everything else is explicit loops. BLAS must be
// pinned to one thread for bit-stable results (done in blas_single_thread()).

#include <cblas.h>

#include <cmath>
#include <cstdint>
#include <deque>
#include <functional>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace dosegen {

inline void blas_single_thread() { openblas_set_num_threads(1); }

inline void blas_gemm(bool ta, bool tb, int m, int n, int k, float alpha,
                      const float* a, int lda, const float* b, int ldb,
                      float beta, float* c, int ldc) {
  cblas_sgemm(CblasRowMajor, ta ? CblasTrans : CblasNoTrans,
              tb ? CblasTrans : CblasNoTrans, m, n, k, alpha, a, lda, b, ldb,
              beta, c, ldc);
}
inline void blas_gemm(bool ta, bool tb, int m, int n, int k, double alpha,
                      const double* a, int lda, const double* b, int ldb,
                      double beta, double* c, int ldc) {
  cblas_dgemm(CblasRowMajor, ta ? CblasTrans : CblasNoTrans,
              tb ? CblasTrans : CblasNoTrans, m, n, k, alpha, a, lda, b, ldb,
              beta, c, ldc);
}

using Shape = std::vector<int>;

inline int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int e : s) {
    if (e < 1) throw std::invalid_argument("tensor extents must be >= 1");
    n *= e;
  }
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string r = "[";
  for (size_t i = 0; i < s.size(); i++) r += (i ? "," : "") + std::to_string(s[i]);
  return r + "]";
}

template <class T>
struct Param {
  std::string name;
  Shape shape;
  std::vector<T> w;       // weights
  std::vector<T> g;       // gradient accumulator (summed across steps' backwards)
  std::vector<T> m, v;    // optimizer moments, sized lazily
  int64_t numel() const { return static_cast<int64_t>(w.size()); }
};

template <class T>
class Tape;

template <class T>
struct Tensor {
  Tape<T>* tape = nullptr;
  int id = -1;

  const Shape& shape() const { return tape->shape(id); }
  int64_t numel() const { return static_cast<int64_t>(tape->val(id).size()); }
  std::vector<T>& v() { return tape->val(id); }
  const std::vector<T>& v() const { return tape->val(id); }
  bool rq() const { return tape->rq(id); }
  // gradient after backward(); zeros when the node is off the loss path
  std::vector<T> grad() const { return tape->grad_of(id); }
};

template <class T>
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Tensor<T> alloc(Shape shape, bool requires_grad) {
    Node n;
    n.shape = std::move(shape);
    int64_t count = shape_numel(n.shape);
    n.val.assign(static_cast<size_t>(count), T(0));
    n.rq = requires_grad;
    if (requires_grad) n.grad.assign(static_cast<size_t>(count), T(0));
    nodes_.push_back(std::move(n));
    return Tensor<T>{this, static_cast<int>(nodes_.size()) - 1};
  }

  Tensor<T> input(const Shape& shape, const T* data, bool requires_grad = false) {
    Tensor<T> t = alloc(shape, requires_grad);
    std::copy(data, data + t.numel(), val(t.id).begin());
    return t;
  }
  Tensor<T> input(const Shape& shape, const std::vector<T>& data,
                  bool requires_grad = false) {
    if (static_cast<int64_t>(data.size()) != shape_numel(shape))
      throw std::invalid_argument("input: buffer does not match shape");
    return input(shape, data.data(), requires_grad);
  }

  // Leaf bound to a persistent parameter; backward() adds into p.g.
  Tensor<T> leaf(Param<T>& p) {
    Tensor<T> t = input(p.shape, p.w.data(), true);
    param_links_.push_back({t.id, &p});
    return t;
  }

  void push(std::function<void()> back) { ops_.push_back(std::move(back)); }

  std::vector<T>& val(int id) { return nodes_[id].val; }
  std::vector<T>& grad(int id) { return nodes_[id].grad; }
  const Shape& shape(int id) const { return nodes_[id].shape; }
  bool rq(int id) const { return nodes_[id].rq; }
  std::vector<T> grad_of(int id) const {
    if (nodes_[id].rq) return nodes_[id].grad;
    return std::vector<T>(nodes_[id].val.size(), T(0));
  }

  void backward(const Tensor<T>& loss) {
    if (loss.tape != this) throw std::invalid_argument("backward: foreign tensor");
    if (nodes_[loss.id].val.size() != 1)
      throw std::invalid_argument("backward: loss must be scalar");
    if (!nodes_[loss.id].rq)
      throw std::invalid_argument("backward: loss does not require grad");
    if (ran_backward_) throw std::logic_error("backward: tape already consumed");
    ran_backward_ = true;
    nodes_[loss.id].grad[0] = T(1);
    for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) (*it)();
    for (auto& [id, p] : param_links_) {
      auto& g = nodes_[id].grad;
      for (size_t i = 0; i < g.size(); i++) p->g[i] += g[i];
    }
  }

  void clear() {
    nodes_.clear();
    ops_.clear();
    param_links_.clear();
    ran_backward_ = false;
  }

  size_t node_count() const { return nodes_.size(); }

 private:
  struct Node {
    Shape shape;
    std::vector<T> val, grad;
    bool rq = false;
  };
  // deque: ops hold references to node payloads across later alloc() calls,
  // so element addresses must survive end-insertion
  std::deque<Node> nodes_;
  std::vector<std::function<void()>> ops_;
  std::vector<std::pair<int, Param<T>*>> param_links_;
  bool ran_backward_ = false;
};

namespace detail {

template <class T>
Tape<T>& same_tape(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.tape == nullptr || a.tape != b.tape)
    throw std::invalid_argument("operands must live on one tape");
  return *a.tape;
}

inline void require(bool ok, const std::string& msg) {
  if (!ok) throw std::invalid_argument(msg);
}

}  // namespace detail

// ---------- elementwise ----------

template <class T>
Tensor<T> add(Tensor<T> a, Tensor<T> b) {
  Tape<T>& tp = detail::same_tape(a, b);
  detail::require(a.shape() == b.shape(), "add: shape mismatch " +
                      shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  auto out = tp.alloc(a.shape(), a.rq() || b.rq());
  const auto& av = tp.val(a.id);
  const auto& bv = tp.val(b.id);
  auto& ov = tp.val(out.id);
  for (size_t i = 0; i < ov.size(); i++) ov[i] = av[i] + bv[i];
  if (out.rq()) {
    tp.push([&tp, ai = a.id, bi = b.id, oi = out.id] {
      const auto& og = tp.grad(oi);
      if (tp.rq(ai)) {
        auto& ag = tp.grad(ai);
        for (size_t i = 0; i < og.size(); i++) ag[i] += og[i];
      }
      if (tp.rq(bi)) {
        auto& bg = tp.grad(bi);
        for (size_t i = 0; i < og.size(); i++) bg[i] += og[i];
      }
    });
  }
  return out;
}

template <class T>
Tensor<T> sub(Tensor<T> a, Tensor<T> b) {
  Tape<T>& tp = detail::same_tape(a, b);
  detail::require(a.shape() == b.shape(), "sub: shape mismatch");
  auto out = tp.alloc(a.shape(), a.rq() || b.rq());
  const auto& av = tp.val(a.id);
  const auto& bv = tp.val(b.id);
  auto& ov = tp.val(out.id);
  for (size_t i = 0; i < ov.size(); i++) ov[i] = av[i] - bv[i];
  if (out.rq()) {
    tp.push([&tp, ai = a.id, bi = b.id, oi = out.id] {
      const auto& og = tp.grad(oi);
      if (tp.rq(ai)) {
        auto& ag = tp.grad(ai);
        for (size_t i = 0; i < og.size(); i++) ag[i] += og[i];
      }
      if (tp.rq(bi)) {
        auto& bg = tp.grad(bi);
        for (size_t i = 0; i < og.size(); i++) bg[i] -= og[i];
      }
    });
  }
  return out;
}

template <class T>
Tensor<T> mul(Tensor<T> a, Tensor<T> b) {
  Tape<T>& tp = detail::same_tape(a, b);
  detail::require(a.shape() == b.shape(), "mul: shape mismatch");
  auto out = tp.alloc(a.shape(), a.rq() || b.rq());
  const auto& av = tp.val(a.id);
  const auto& bv = tp.val(b.id);
  auto& ov = tp.val(out.id);
  for (size_t i = 0; i < ov.size(); i++) ov[i] = av[i] * bv[i];
  if (out.rq()) {
    tp.push([&tp, ai = a.id, bi = b.id, oi = out.id] {
      const auto& og = tp.grad(oi);
      const auto& av2 = tp.val(ai);
      const auto& bv2 = tp.val(bi);
      if (tp.rq(ai)) {
        auto& ag = tp.grad(ai);
        for (size_t i = 0; i < og.size(); i++) ag[i] += og[i] * bv2[i];
      }
      if (tp.rq(bi)) {
        auto& bg = tp.grad(bi);
        for (size_t i = 0; i < og.size(); i++) bg[i] += og[i] * av2[i];
      }
    });
  }
  return out;
}

template <class T>
Tensor<T> scale(Tensor<T> a, T c) {
  Tape<T>& tp = *a.tape;
  auto out = tp.alloc(a.shape(), a.rq());
  const auto& av = tp.val(a.id);
  auto& ov = tp.val(out.id);
  for (size_t i = 0; i < ov.size(); i++) ov[i] = av[i] * c;
  if (out.rq()) {
    tp.push([&tp, ai = a.id, oi = out.id, c] {
      const auto& og = tp.grad(oi);
      auto& ag = tp.grad(ai);
      for (size_t i = 0; i < og.size(); i++) ag[i] += og[i] * c;
    });
  }
  return out;
}

template <class T>
Tensor<T> silu(Tensor<T> a) {
  Tape<T>& tp = *a.tape;
  auto out = tp.alloc(a.shape(), a.rq());
  const auto& av = tp.val(a.id);
  auto& ov = tp.val(out.id);
  for (size_t i = 0; i < ov.size(); i++) {
    T s = T(1) / (T(1) + std::exp(-av[i]));
    ov[i] = av[i] * s;
  }
  if (out.rq()) {
    tp.push([&tp, ai = a.id, oi = out.id] {
      const auto& og = tp.grad(oi);
      const auto& av2 = tp.val(ai);
      auto& ag = tp.grad(ai);
      for (size_t i = 0; i < og.size(); i++) {
        T s = T(1) / (T(1) + std::exp(-av2[i]));
        ag[i] += og[i] * s * (T(1) + av2[i] * (T(1) - s));
      }
    });
  }
  return out;
}

// |x|; subgradient at 0 taken as 0
template <class T>
Tensor<T> abs_val(Tensor<T> a) {
  Tape<T>& tp = *a.tape;
  auto out = tp.alloc(a.shape(), a.rq());
  const auto& av = tp.val(a.id);
  auto& ov = tp.val(out.id);
  for (size_t i = 0; i < ov.size(); i++) ov[i] = std::abs(av[i]);
  if (out.rq()) {
    tp.push([&tp, ai = a.id, oi = out.id] {
      const auto& og = tp.grad(oi);
      const auto& av2 = tp.val(ai);
      auto& ag = tp.grad(ai);
      for (size_t i = 0; i < og.size(); i++) {
        T s = av2[i] > T(0) ? T(1) : (av2[i] < T(0) ? T(-1) : T(0));
        ag[i] += og[i] * s;
      }
    });
  }
  return out;
}

template <class T>
Tensor<T> sum_all(Tensor<T> a) {
  Tape<T>& tp = *a.tape;
  auto out = tp.alloc({1}, a.rq());
  const auto& av = tp.val(a.id);
  T s = 0;
  for (T x : av) s += x;
  tp.val(out.id)[0] = s;
  if (out.rq()) {
    tp.push([&tp, ai = a.id, oi = out.id] {
      T g = tp.grad(oi)[0];
      auto& ag = tp.grad(ai);
      for (size_t i = 0; i < ag.size(); i++) ag[i] += g;
    });
  }
  return out;
}

template <class T>
Tensor<T> mean_all(Tensor<T> a) {
  Tape<T>& tp = *a.tape;
  auto out = tp.alloc({1}, a.rq());
  const auto& av = tp.val(a.id);
  T s = 0;
  for (T x : av) s += x;
  T inv_n = T(1) / T(av.size());
  tp.val(out.id)[0] = s * inv_n;
  if (out.rq()) {
    tp.push([&tp, ai = a.id, oi = out.id, inv_n] {
      T g = tp.grad(oi)[0] * inv_n;
      auto& ag = tp.grad(ai);
      for (size_t i = 0; i < ag.size(); i++) ag[i] += g;
    });
  }
  return out;
}

// ---------- convolution ----------

namespace detail {

template <class T>
void im2col(const T* x, int C, int H, int W, int k, int stride, int pad,
            int Ho, int Wo, T* col) {
  const size_t plane = static_cast<size_t>(Ho) * Wo;
  for (int c = 0; c < C; c++)
    for (int dy = 0; dy < k; dy++)
      for (int dx = 0; dx < k; dx++) {
        T* dst = col + (static_cast<size_t>(c) * k * k + dy * k + dx) * plane;
        for (int oy = 0; oy < Ho; oy++) {
          int iy = oy * stride - pad + dy;
          const bool row_ok = iy >= 0 && iy < H;
          for (int ox = 0; ox < Wo; ox++) {
            int ix = ox * stride - pad + dx;
            dst[static_cast<size_t>(oy) * Wo + ox] =
                (row_ok && ix >= 0 && ix < W)
                    ? x[(static_cast<size_t>(c) * H + iy) * W + ix]
                    : T(0);
          }
        }
      }
}

template <class T>
void col2im_add(const T* col, int C, int H, int W, int k, int stride, int pad,
                int Ho, int Wo, T* dx) {
  const size_t plane = static_cast<size_t>(Ho) * Wo;
  for (int c = 0; c < C; c++)
    for (int dy = 0; dy < k; dy++)
      for (int dx_ = 0; dx_ < k; dx_++) {
        const T* src = col + (static_cast<size_t>(c) * k * k + dy * k + dx_) * plane;
        for (int oy = 0; oy < Ho; oy++) {
          int iy = oy * stride - pad + dy;
          if (iy < 0 || iy >= H) continue;
          for (int ox = 0; ox < Wo; ox++) {
            int ix = ox * stride - pad + dx_;
            if (ix < 0 || ix >= W) continue;
            dx[(static_cast<size_t>(c) * H + iy) * W + ix] +=
                src[static_cast<size_t>(oy) * Wo + ox];
          }
        }
      }
}

}  // namespace detail

template <class T>
Tensor<T> conv2d(Tensor<T> x, Tensor<T> w, int stride, int pad) {
  Tape<T>& tp = detail::same_tape(x, w);
  const Shape& xs = x.shape();
  const Shape& ws = w.shape();
  detail::require(xs.size() == 4 && ws.size() == 4, "conv2d: rank-4 operands required");
  detail::require(ws[2] == ws[3] && (ws[2] == 1 || ws[2] == 3),
                  "conv2d: kernel must be 1x1 or 3x3");
  detail::require(xs[1] == ws[1],
                  "conv2d: input channels " + std::to_string(xs[1]) +
                      " do not match kernel channels " + std::to_string(ws[1]));
  detail::require(stride >= 1 && pad >= 0, "conv2d: bad stride/padding");
  const int N = xs[0], C = xs[1], H = xs[2], W = xs[3];
  const int O = ws[0], k = ws[2];
  const int Ho = (H + 2 * pad - k) / stride + 1;
  const int Wo = (W + 2 * pad - k) / stride + 1;
  detail::require(Ho >= 1 && Wo >= 1, "conv2d: output would be empty");

  auto out = tp.alloc({N, O, Ho, Wo}, x.rq() || w.rq());
  const int CK2 = C * k * k;
  const size_t plane = static_cast<size_t>(Ho) * Wo;
  {
    std::vector<T> col(static_cast<size_t>(CK2) * plane);
    const auto& xv = tp.val(x.id);
    const auto& wv = tp.val(w.id);
    auto& ov = tp.val(out.id);
    for (int n = 0; n < N; n++) {
      detail::im2col(xv.data() + static_cast<size_t>(n) * C * H * W, C, H, W, k,
                     stride, pad, Ho, Wo, col.data());
      blas_gemm(false, false, O, static_cast<int>(plane), CK2, T(1), wv.data(),
                CK2, col.data(), static_cast<int>(plane), T(0),
                ov.data() + static_cast<size_t>(n) * O * plane,
                static_cast<int>(plane));
    }
  }
  if (out.rq()) {
    tp.push([&tp, xi = x.id, wi = w.id, oi = out.id, N, C, H, W, O, k, stride,
             pad, Ho, Wo, CK2, plane] {
      std::vector<T> col(static_cast<size_t>(CK2) * plane);
      std::vector<T> dcol(static_cast<size_t>(CK2) * plane);
      const auto& xv = tp.val(xi);
      const auto& wv = tp.val(wi);
      const auto& og = tp.grad(oi);
      for (int n = 0; n < N; n++) {
        const T* dout_n = og.data() + static_cast<size_t>(n) * O * plane;
        detail::im2col(xv.data() + static_cast<size_t>(n) * C * H * W, C, H, W,
                       k, stride, pad, Ho, Wo, col.data());
        if (tp.rq(wi)) {
          blas_gemm(false, true, O, CK2, static_cast<int>(plane), T(1), dout_n,
                    static_cast<int>(plane), col.data(), static_cast<int>(plane),
                    T(1), tp.grad(wi).data(), CK2);
        }
        if (tp.rq(xi)) {
          blas_gemm(true, false, CK2, static_cast<int>(plane), O, T(1),
                    wv.data(), CK2, dout_n, static_cast<int>(plane), T(0),
                    dcol.data(), static_cast<int>(plane));
          detail::col2im_add(dcol.data(), C, H, W, k, stride, pad, Ho, Wo,
                             tp.grad(xi).data() + static_cast<size_t>(n) * C * H * W);
        }
      }
    });
  }
  return out;
}

// y[n,c,h,w] = x[n,c,h,w] + b[c]
template <class T>
Tensor<T> bias_c(Tensor<T> x, Tensor<T> b) {
  Tape<T>& tp = detail::same_tape(x, b);
  const Shape& xs = x.shape();
  detail::require(xs.size() == 4, "bias_c: rank-4 input required");
  detail::require(b.shape().size() == 1 && b.shape()[0] == xs[1],
                  "bias_c: bias length must equal channel count");
  auto out = tp.alloc(xs, x.rq() || b.rq());
  const int N = xs[0], C = xs[1];
  const size_t hw = static_cast<size_t>(xs[2]) * xs[3];
  const auto& xv = tp.val(x.id);
  const auto& bv = tp.val(b.id);
  auto& ov = tp.val(out.id);
  for (int n = 0; n < N; n++)
    for (int c = 0; c < C; c++) {
      size_t base = (static_cast<size_t>(n) * C + c) * hw;
      T bc = bv[c];
      for (size_t i = 0; i < hw; i++) ov[base + i] = xv[base + i] + bc;
    }
  if (out.rq()) {
    tp.push([&tp, xi = x.id, bi = b.id, oi = out.id, N, C, hw] {
      const auto& og = tp.grad(oi);
      if (tp.rq(xi)) {
        auto& xg = tp.grad(xi);
        for (size_t i = 0; i < og.size(); i++) xg[i] += og[i];
      }
      if (tp.rq(bi)) {
        auto& bg = tp.grad(bi);
        for (int n = 0; n < N; n++)
          for (int c = 0; c < C; c++) {
            size_t base = (static_cast<size_t>(n) * C + c) * hw;
            T s = 0;
            for (size_t i = 0; i < hw; i++) s += og[base + i];
            bg[c] += s;
          }
      }
    });
  }
  return out;
}

// ---------- normalization ----------

template <class T>
Tensor<T> group_norm(Tensor<T> x, int groups, Tensor<T> gamma, Tensor<T> beta,
                     T eps) {
  Tape<T>& tp = detail::same_tape(x, gamma);
  detail::same_tape(x, beta);
  const Shape& xs = x.shape();
  detail::require(xs.size() == 4, "group_norm: rank-4 input required");
  const int N = xs[0], C = xs[1];
  detail::require(groups >= 1 && C % groups == 0,
                  "group_norm: groups must divide channels");
  detail::require(gamma.shape() == Shape{C} && beta.shape() == Shape{C},
                  "group_norm: affine params must have shape [C]");
  detail::require(eps > T(0), "group_norm: eps must be positive");
  const int cg = C / groups;
  const size_t hw = static_cast<size_t>(xs[2]) * xs[3];
  const size_t gsz = cg * hw;

  auto out = tp.alloc(xs, x.rq() || gamma.rq() || beta.rq());
  std::vector<T> mean(static_cast<size_t>(N) * groups),
      invstd(static_cast<size_t>(N) * groups);
  const auto& xv = tp.val(x.id);
  const auto& gv = tp.val(gamma.id);
  const auto& bv = tp.val(beta.id);
  auto& ov = tp.val(out.id);
  for (int n = 0; n < N; n++)
    for (int g = 0; g < groups; g++) {
      size_t base = (static_cast<size_t>(n) * C + static_cast<size_t>(g) * cg) * hw;
      T mu = 0;
      for (size_t i = 0; i < gsz; i++) mu += xv[base + i];
      mu /= T(gsz);
      T var = 0;
      for (size_t i = 0; i < gsz; i++) {
        T d = xv[base + i] - mu;
        var += d * d;
      }
      var /= T(gsz);
      T is = T(1) / std::sqrt(var + eps);
      mean[n * groups + g] = mu;
      invstd[n * groups + g] = is;
      for (int c = 0; c < cg; c++) {
        size_t cbase = base + static_cast<size_t>(c) * hw;
        T ga = gv[g * cg + c], be = bv[g * cg + c];
        for (size_t i = 0; i < hw; i++)
          ov[cbase + i] = (xv[cbase + i] - mu) * is * ga + be;
      }
    }
  if (out.rq()) {
    tp.push([&tp, xi = x.id, gi = gamma.id, bi = beta.id, oi = out.id, N, C,
             groups, cg, hw, gsz, mean, invstd] {
      const auto& og = tp.grad(oi);
      const auto& xv2 = tp.val(xi);
      const auto& gv2 = tp.val(gi);
      for (int n = 0; n < N; n++)
        for (int g = 0; g < groups; g++) {
          size_t base =
              (static_cast<size_t>(n) * C + static_cast<size_t>(g) * cg) * hw;
          T mu = mean[n * groups + g], is = invstd[n * groups + g];
          // per-channel reductions for gamma/beta, per-group sums for x
          T sum_dxhat = 0, sum_dxhat_xhat = 0;
          for (int c = 0; c < cg; c++) {
            size_t cbase = base + static_cast<size_t>(c) * hw;
            T ga = gv2[g * cg + c];
            T dg = 0, db = 0;
            for (size_t i = 0; i < hw; i++) {
              T xhat = (xv2[cbase + i] - mu) * is;
              T dxhat = og[cbase + i] * ga;
              sum_dxhat += dxhat;
              sum_dxhat_xhat += dxhat * xhat;
              dg += og[cbase + i] * xhat;
              db += og[cbase + i];
            }
            if (tp.rq(gi)) tp.grad(gi)[g * cg + c] += dg;
            if (tp.rq(bi)) tp.grad(bi)[g * cg + c] += db;
          }
          if (tp.rq(xi)) {
            auto& xg = tp.grad(xi);
            const auto& gv3 = tp.val(gi);
            T inv_m = T(1) / T(gsz);
            for (int c = 0; c < cg; c++) {
              size_t cbase = base + static_cast<size_t>(c) * hw;
              T ga = gv3[g * cg + c];
              for (size_t i = 0; i < hw; i++) {
                T xhat = (xv2[cbase + i] - mu) * is;
                T dxhat = og[cbase + i] * ga;
                xg[cbase + i] +=
                    is * (dxhat - inv_m * (sum_dxhat + xhat * sum_dxhat_xhat));
              }
            }
          }
        }
    });
  }
  return out;
}

// normalization over the last axis; x rank >= 1, gamma/beta shape [D]
template <class T>
Tensor<T> layer_norm(Tensor<T> x, Tensor<T> gamma, Tensor<T> beta, T eps) {
  Tape<T>& tp = detail::same_tape(x, gamma);
  detail::same_tape(x, beta);
  const Shape& xs = x.shape();
  const int D = xs.back();
  detail::require(gamma.shape() == Shape{D} && beta.shape() == Shape{D},
                  "layer_norm: affine params must have shape [D]");
  detail::require(eps > T(0), "layer_norm: eps must be positive");
  const int64_t rows = shape_numel(xs) / D;

  auto out = tp.alloc(xs, x.rq() || gamma.rq() || beta.rq());
  std::vector<T> mean(rows), invstd(rows);
  const auto& xv = tp.val(x.id);
  const auto& gv = tp.val(gamma.id);
  const auto& bv = tp.val(beta.id);
  auto& ov = tp.val(out.id);
  for (int64_t r = 0; r < rows; r++) {
    size_t base = static_cast<size_t>(r) * D;
    T mu = 0;
    for (int i = 0; i < D; i++) mu += xv[base + i];
    mu /= T(D);
    T var = 0;
    for (int i = 0; i < D; i++) {
      T d = xv[base + i] - mu;
      var += d * d;
    }
    var /= T(D);
    T is = T(1) / std::sqrt(var + eps);
    mean[r] = mu;
    invstd[r] = is;
    for (int i = 0; i < D; i++)
      ov[base + i] = (xv[base + i] - mu) * is * gv[i] + bv[i];
  }
  if (out.rq()) {
    tp.push([&tp, xi = x.id, gi = gamma.id, bi = beta.id, oi = out.id, rows, D,
             mean, invstd] {
      const auto& og = tp.grad(oi);
      const auto& xv2 = tp.val(xi);
      const auto& gv2 = tp.val(gi);
      for (int64_t r = 0; r < rows; r++) {
        size_t base = static_cast<size_t>(r) * D;
        T mu = mean[r], is = invstd[r];
        T s1 = 0, s2 = 0;
        for (int i = 0; i < D; i++) {
          T xhat = (xv2[base + i] - mu) * is;
          T dxhat = og[base + i] * gv2[i];
          s1 += dxhat;
          s2 += dxhat * xhat;
          if (tp.rq(gi)) tp.grad(gi)[i] += og[base + i] * xhat;
          if (tp.rq(bi)) tp.grad(bi)[i] += og[base + i];
        }
        if (tp.rq(xi)) {
          auto& xg = tp.grad(xi);
          T inv_d = T(1) / T(D);
          for (int i = 0; i < D; i++) {
            T xhat = (xv2[base + i] - mu) * is;
            T dxhat = og[base + i] * gv2[i];
            xg[base + i] += is * (dxhat - inv_d * (s1 + xhat * s2));
          }
        }
      }
    });
  }
  return out;
}

// ---------- linear / matmul ----------

// x[..., In] @ w[Out, In]^T + b[Out]; pass b with 0 extent sentinel omitted via
// separate overload (bias optional to keep the primitive minimal).
template <class T>
Tensor<T> linear(Tensor<T> x, Tensor<T> w, Tensor<T> b) {
  Tape<T>& tp = detail::same_tape(x, w);
  detail::same_tape(x, b);
  const Shape& xs = x.shape();
  const Shape& ws = w.shape();
  detail::require(ws.size() == 2, "linear: weight must be rank 2");
  const int In = ws[1], Out = ws[0];
  detail::require(xs.back() == In, "linear: trailing extent must match weight");
  detail::require(b.shape() == Shape{Out}, "linear: bias must have shape [Out]");
  const int64_t M = shape_numel(xs) / In;

  Shape os = xs;
  os.back() = Out;
  auto out = tp.alloc(os, x.rq() || w.rq() || b.rq());
  const auto& xv = tp.val(x.id);
  const auto& wv = tp.val(w.id);
  const auto& bv = tp.val(b.id);
  auto& ov = tp.val(out.id);
  blas_gemm(false, true, static_cast<int>(M), Out, In, T(1), xv.data(), In,
            wv.data(), In, T(0), ov.data(), Out);
  for (int64_t r = 0; r < M; r++)
    for (int o = 0; o < Out; o++) ov[static_cast<size_t>(r) * Out + o] += bv[o];
  if (out.rq()) {
    tp.push([&tp, xi = x.id, wi = w.id, bi = b.id, oi = out.id, M, In, Out] {
      const auto& og = tp.grad(oi);
      if (tp.rq(xi))
        blas_gemm(false, false, static_cast<int>(M), In, Out, T(1), og.data(),
                  Out, tp.val(wi).data(), In, T(1), tp.grad(xi).data(), In);
      if (tp.rq(wi))
        blas_gemm(true, false, Out, In, static_cast<int>(M), T(1), og.data(),
                  Out, tp.val(xi).data(), In, T(1), tp.grad(wi).data(), In);
      if (tp.rq(bi)) {
        auto& bg = tp.grad(bi);
        for (int64_t r = 0; r < M; r++)
          for (int o = 0; o < Out; o++) bg[o] += og[static_cast<size_t>(r) * Out + o];
      }
    });
  }
  return out;
}

// a[N,L,D] @ b[N,M,D]^T -> [N,L,M]
template <class T>
Tensor<T> bmm_nt(Tensor<T> a, Tensor<T> b) {
  Tape<T>& tp = detail::same_tape(a, b);
  const Shape& as = a.shape();
  const Shape& bs = b.shape();
  detail::require(as.size() == 3 && bs.size() == 3 && as[0] == bs[0] &&
                      as[2] == bs[2],
                  "bmm_nt: shapes must be [N,L,D] and [N,M,D]");
  const int N = as[0], L = as[1], D = as[2], M = bs[1];
  auto out = tp.alloc({N, L, M}, a.rq() || b.rq());
  const auto& av = tp.val(a.id);
  const auto& bv = tp.val(b.id);
  auto& ov = tp.val(out.id);
  for (int n = 0; n < N; n++)
    blas_gemm(false, true, L, M, D, T(1),
              av.data() + static_cast<size_t>(n) * L * D, D,
              bv.data() + static_cast<size_t>(n) * M * D, D, T(0),
              ov.data() + static_cast<size_t>(n) * L * M, M);
  if (out.rq()) {
    tp.push([&tp, ai = a.id, bi = b.id, oi = out.id, N, L, M, D] {
      const auto& og = tp.grad(oi);
      for (int n = 0; n < N; n++) {
        const T* do_ = og.data() + static_cast<size_t>(n) * L * M;
        if (tp.rq(ai))
          blas_gemm(false, false, L, D, M, T(1), do_, M,
                    tp.val(bi).data() + static_cast<size_t>(n) * M * D, D, T(1),
                    tp.grad(ai).data() + static_cast<size_t>(n) * L * D, D);
        if (tp.rq(bi))
          blas_gemm(true, false, M, D, L, T(1), do_, M,
                    tp.val(ai).data() + static_cast<size_t>(n) * L * D, D, T(1),
                    tp.grad(bi).data() + static_cast<size_t>(n) * M * D, D);
      }
    });
  }
  return out;
}

// a[N,L,M] @ b[N,M,D] -> [N,L,D]
template <class T>
Tensor<T> bmm(Tensor<T> a, Tensor<T> b) {
  Tape<T>& tp = detail::same_tape(a, b);
  const Shape& as = a.shape();
  const Shape& bs = b.shape();
  detail::require(as.size() == 3 && bs.size() == 3 && as[0] == bs[0] &&
                      as[2] == bs[1],
                  "bmm: shapes must be [N,L,M] and [N,M,D]");
  const int N = as[0], L = as[1], M = as[2], D = bs[2];
  auto out = tp.alloc({N, L, D}, a.rq() || b.rq());
  const auto& av = tp.val(a.id);
  const auto& bv = tp.val(b.id);
  auto& ov = tp.val(out.id);
  for (int n = 0; n < N; n++)
    blas_gemm(false, false, L, D, M, T(1),
              av.data() + static_cast<size_t>(n) * L * M, M,
              bv.data() + static_cast<size_t>(n) * M * D, D, T(0),
              ov.data() + static_cast<size_t>(n) * L * D, D);
  if (out.rq()) {
    tp.push([&tp, ai = a.id, bi = b.id, oi = out.id, N, L, M, D] {
      const auto& og = tp.grad(oi);
      for (int n = 0; n < N; n++) {
        const T* do_ = og.data() + static_cast<size_t>(n) * L * D;
        if (tp.rq(ai))
          blas_gemm(false, true, L, M, D, T(1), do_, D,
                    tp.val(bi).data() + static_cast<size_t>(n) * M * D, D, T(1),
                    tp.grad(ai).data() + static_cast<size_t>(n) * L * M, M);
        if (tp.rq(bi))
          blas_gemm(true, false, M, D, L, T(1),
                    tp.val(ai).data() + static_cast<size_t>(n) * L * M, M, do_,
                    D, T(1), tp.grad(bi).data() + static_cast<size_t>(n) * M * D,
                    D);
      }
    });
  }
  return out;
}

// ---------- softmax ----------

template <class T>
Tensor<T> softmax_last(Tensor<T> x) {
  Tape<T>& tp = *x.tape;
  const Shape& xs = x.shape();
  const int L = xs.back();
  const int64_t rows = shape_numel(xs) / L;
  const auto& xv = tp.val(x.id);
  for (T v : xv)
    if (!std::isfinite(v))
      throw std::invalid_argument("softmax: non-finite input rejected");

  auto out = tp.alloc(xs, x.rq());
  auto& ov = tp.val(out.id);
  for (int64_t r = 0; r < rows; r++) {
    size_t base = static_cast<size_t>(r) * L;
    T mx = xv[base];
    for (int i = 1; i < L; i++) mx = std::max(mx, xv[base + i]);
    T sum = 0;
    for (int i = 0; i < L; i++) {
      T e = std::exp(xv[base + i] - mx);
      ov[base + i] = e;
      sum += e;
    }
    T inv = T(1) / sum;
    for (int i = 0; i < L; i++) ov[base + i] *= inv;
  }
  if (out.rq()) {
    tp.push([&tp, xi = x.id, oi = out.id, rows, L] {
      const auto& og = tp.grad(oi);
      const auto& yv = tp.val(oi);
      auto& xg = tp.grad(xi);
      for (int64_t r = 0; r < rows; r++) {
        size_t base = static_cast<size_t>(r) * L;
        T dot = 0;
        for (int i = 0; i < L; i++) dot += og[base + i] * yv[base + i];
        for (int i = 0; i < L; i++)
          xg[base + i] += yv[base + i] * (og[base + i] - dot);
      }
    });
  }
  return out;
}

// ---------- shape movement ----------

template <class T>
Tensor<T> upsample_nearest2(Tensor<T> x) {
  Tape<T>& tp = *x.tape;
  const Shape& xs = x.shape();
  detail::require(xs.size() == 4, "upsample_nearest2: rank-4 input required");
  const int N = xs[0], C = xs[1], H = xs[2], W = xs[3];
  auto out = tp.alloc({N, C, 2 * H, 2 * W}, x.rq());
  const auto& xv = tp.val(x.id);
  auto& ov = tp.val(out.id);
  for (int64_t nc = 0; nc < static_cast<int64_t>(N) * C; nc++) {
    const T* src = xv.data() + nc * H * W;
    T* dst = ov.data() + nc * 4 * H * W;
    for (int y = 0; y < 2 * H; y++)
      for (int x2 = 0; x2 < 2 * W; x2++)
        dst[static_cast<size_t>(y) * 2 * W + x2] =
            src[static_cast<size_t>(y / 2) * W + x2 / 2];
  }
  if (out.rq()) {
    tp.push([&tp, xi = x.id, oi = out.id, N, C, H, W] {
      const auto& og = tp.grad(oi);
      auto& xg = tp.grad(xi);
      for (int64_t nc = 0; nc < static_cast<int64_t>(N) * C; nc++) {
        const T* src = og.data() + nc * 4 * H * W;
        T* dst = xg.data() + nc * H * W;
        for (int y = 0; y < 2 * H; y++)
          for (int x2 = 0; x2 < 2 * W; x2++)
            dst[static_cast<size_t>(y / 2) * W + x2 / 2] +=
                src[static_cast<size_t>(y) * 2 * W + x2];
      }
    });
  }
  return out;
}

template <class T>
Tensor<T> concat_c(const std::vector<Tensor<T>>& xs) {
  detail::require(!xs.empty(), "concat_c: need at least one input");
  Tape<T>& tp = *xs[0].tape;
  const Shape& s0 = xs[0].shape();
  detail::require(s0.size() == 4, "concat_c: rank-4 inputs required");
  int ctotal = 0;
  bool rq = false;
  for (const auto& t : xs) {
    detail::same_tape(xs[0], t);
    const Shape& s = t.shape();
    detail::require(s.size() == 4 && s[0] == s0[0] && s[2] == s0[2] &&
                        s[3] == s0[3],
                    "concat_c: spatial/batch extents must agree");
    ctotal += s[1];
    rq = rq || t.rq();
  }
  const int N = s0[0];
  const size_t hw = static_cast<size_t>(s0[2]) * s0[3];
  auto out = tp.alloc({N, ctotal, s0[2], s0[3]}, rq);
  auto& ov = tp.val(out.id);
  std::vector<int> ids, chans;
  for (const auto& t : xs) {
    ids.push_back(t.id);
    chans.push_back(t.shape()[1]);
  }
  for (int n = 0; n < N; n++) {
    size_t off = static_cast<size_t>(n) * ctotal * hw;
    for (size_t p = 0; p < ids.size(); p++) {
      const auto& xv = tp.val(ids[p]);
      size_t src = static_cast<size_t>(n) * chans[p] * hw;
      std::copy(xv.begin() + src, xv.begin() + src + chans[p] * hw,
                ov.begin() + off);
      off += chans[p] * hw;
    }
  }
  if (out.rq()) {
    tp.push([&tp, ids, chans, oi = out.id, N, ctotal, hw] {
      const auto& og = tp.grad(oi);
      for (int n = 0; n < N; n++) {
        size_t off = static_cast<size_t>(n) * ctotal * hw;
        for (size_t p = 0; p < ids.size(); p++) {
          if (tp.rq(ids[p])) {
            auto& xg = tp.grad(ids[p]);
            size_t dst = static_cast<size_t>(n) * chans[p] * hw;
            for (size_t i = 0; i < chans[p] * hw; i++) xg[dst + i] += og[off + i];
          }
          off += chans[p] * hw;
        }
      }
    });
  }
  return out;
}

template <class T>
Tensor<T> concat_c(Tensor<T> a, Tensor<T> b) {
  return concat_c(std::vector<Tensor<T>>{a, b});
}

// [N,C,H,W] -> [N, (H/2)(W/2), 4C]; token feature index = c*4 + dy*2 + dx
template <class T>
Tensor<T> patchify2(Tensor<T> x) {
  Tape<T>& tp = *x.tape;
  const Shape& xs = x.shape();
  detail::require(xs.size() == 4, "patchify2: rank-4 input required");
  const int N = xs[0], C = xs[1], H = xs[2], W = xs[3];
  detail::require(H % 2 == 0 && W % 2 == 0,
                  "patchify2: spatial extents must be even");
  const int Hp = H / 2, Wp = W / 2, L = Hp * Wp, D = 4 * C;
  auto out = tp.alloc({N, L, D}, x.rq());
  const auto& xv = tp.val(x.id);
  auto& ov = tp.val(out.id);
  for (int n = 0; n < N; n++)
    for (int c = 0; c < C; c++)
      for (int py = 0; py < Hp; py++)
        for (int px = 0; px < Wp; px++)
          for (int dy = 0; dy < 2; dy++)
            for (int dx = 0; dx < 2; dx++) {
              size_t src = ((static_cast<size_t>(n) * C + c) * H + 2 * py + dy) * W +
                           2 * px + dx;
              size_t dst = (static_cast<size_t>(n) * L + py * Wp + px) * D + c * 4 +
                           dy * 2 + dx;
              ov[dst] = xv[src];
            }
  if (out.rq()) {
    tp.push([&tp, xi = x.id, oi = out.id, N, C, H, W, Hp, Wp, L, D] {
      const auto& og = tp.grad(oi);
      auto& xg = tp.grad(xi);
      for (int n = 0; n < N; n++)
        for (int c = 0; c < C; c++)
          for (int py = 0; py < Hp; py++)
            for (int px = 0; px < Wp; px++)
              for (int dy = 0; dy < 2; dy++)
                for (int dx = 0; dx < 2; dx++) {
                  size_t src =
                      ((static_cast<size_t>(n) * C + c) * H + 2 * py + dy) * W +
                      2 * px + dx;
                  size_t dst = (static_cast<size_t>(n) * L + py * Wp + px) * D +
                               c * 4 + dy * 2 + dx;
                  xg[src] += og[dst];
                }
    });
  }
  return out;
}

// inverse of patchify2; needs the target spatial extents
template <class T>
Tensor<T> unpatchify2(Tensor<T> x, int H, int W) {
  Tape<T>& tp = *x.tape;
  const Shape& xs = x.shape();
  detail::require(xs.size() == 3, "unpatchify2: rank-3 input required");
  detail::require(H % 2 == 0 && W % 2 == 0 && xs[1] == (H / 2) * (W / 2) &&
                      xs[2] % 4 == 0,
                  "unpatchify2: token layout does not match target extents");
  const int N = xs[0], L = xs[1], D = xs[2], C = D / 4;
  const int Hp = H / 2, Wp = W / 2;
  auto out = tp.alloc({N, C, H, W}, x.rq());
  const auto& xv = tp.val(x.id);
  auto& ov = tp.val(out.id);
  for (int n = 0; n < N; n++)
    for (int c = 0; c < C; c++)
      for (int py = 0; py < Hp; py++)
        for (int px = 0; px < Wp; px++)
          for (int dy = 0; dy < 2; dy++)
            for (int dx = 0; dx < 2; dx++) {
              size_t dst = ((static_cast<size_t>(n) * C + c) * H + 2 * py + dy) * W +
                           2 * px + dx;
              size_t src = (static_cast<size_t>(n) * L + py * Wp + px) * D + c * 4 +
                           dy * 2 + dx;
              ov[dst] = xv[src];
            }
  if (out.rq()) {
    tp.push([&tp, xi = x.id, oi = out.id, N, C, H, W, Hp, Wp, L, D] {
      const auto& og = tp.grad(oi);
      auto& xg = tp.grad(xi);
      for (int n = 0; n < N; n++)
        for (int c = 0; c < C; c++)
          for (int py = 0; py < Hp; py++)
            for (int px = 0; px < Wp; px++)
              for (int dy = 0; dy < 2; dy++)
                for (int dx = 0; dx < 2; dx++) {
                  size_t dst =
                      ((static_cast<size_t>(n) * C + c) * H + 2 * py + dy) * W +
                      2 * px + dx;
                  size_t src = (static_cast<size_t>(n) * L + py * Wp + px) * D +
                               c * 4 + dy * 2 + dx;
                  xg[src] += og[dst];
                }
    });
  }
  return out;
}

// y[n,c,h,w] = x[n,c,h,w] * s[n,c] + b[n,c]  (per-sample channel modulation)
template <class T>
Tensor<T> scale_shift_nc(Tensor<T> x, Tensor<T> s, Tensor<T> b) {
  Tape<T>& tp = detail::same_tape(x, s);
  detail::same_tape(x, b);
  const Shape& xs = x.shape();
  detail::require(xs.size() == 4, "scale_shift_nc: rank-4 input required");
  const int N = xs[0], C = xs[1];
  detail::require(s.shape() == Shape({N, C}) && b.shape() == Shape({N, C}),
                  "scale_shift_nc: modulation must have shape [N,C]");
  const size_t hw = static_cast<size_t>(xs[2]) * xs[3];
  auto out = tp.alloc(xs, x.rq() || s.rq() || b.rq());
  const auto& xv = tp.val(x.id);
  const auto& sv = tp.val(s.id);
  const auto& bv = tp.val(b.id);
  auto& ov = tp.val(out.id);
  for (int n = 0; n < N; n++)
    for (int c = 0; c < C; c++) {
      size_t base = (static_cast<size_t>(n) * C + c) * hw;
      T sc = sv[n * C + c], sh = bv[n * C + c];
      for (size_t i = 0; i < hw; i++) ov[base + i] = xv[base + i] * sc + sh;
    }
  if (out.rq()) {
    tp.push([&tp, xi = x.id, si = s.id, bi = b.id, oi = out.id, N, C, hw] {
      const auto& og = tp.grad(oi);
      const auto& xv2 = tp.val(xi);
      const auto& sv2 = tp.val(si);
      for (int n = 0; n < N; n++)
        for (int c = 0; c < C; c++) {
          size_t base = (static_cast<size_t>(n) * C + c) * hw;
          if (tp.rq(xi)) {
            auto& xg = tp.grad(xi);
            T sc = sv2[n * C + c];
            for (size_t i = 0; i < hw; i++) xg[base + i] += og[base + i] * sc;
          }
          if (tp.rq(si)) {
            T ds = 0;
            for (size_t i = 0; i < hw; i++) ds += og[base + i] * xv2[base + i];
            tp.grad(si)[n * C + c] += ds;
          }
          if (tp.rq(bi)) {
            T db = 0;
            for (size_t i = 0; i < hw; i++) db += og[base + i];
            tp.grad(bi)[n * C + c] += db;
          }
        }
    });
  }
  return out;
}

// columns [start, start+len) of a [N,D] tensor
template <class T>
Tensor<T> slice_cols(Tensor<T> x, int start, int len) {
  Tape<T>& tp = *x.tape;
  const Shape& xs = x.shape();
  detail::require(xs.size() == 2, "slice_cols: rank-2 input required");
  const int N = xs[0], D = xs[1];
  detail::require(start >= 0 && len >= 1 && start + len <= D,
                  "slice_cols: slice out of range");
  auto out = tp.alloc({N, len}, x.rq());
  const auto& xv = tp.val(x.id);
  auto& ov = tp.val(out.id);
  for (int n = 0; n < N; n++)
    for (int i = 0; i < len; i++)
      ov[static_cast<size_t>(n) * len + i] = xv[static_cast<size_t>(n) * D + start + i];
  if (out.rq()) {
    tp.push([&tp, xi = x.id, oi = out.id, N, D, start, len] {
      const auto& og = tp.grad(oi);
      auto& xg = tp.grad(xi);
      for (int n = 0; n < N; n++)
        for (int i = 0; i < len; i++)
          xg[static_cast<size_t>(n) * D + start + i] +=
              og[static_cast<size_t>(n) * len + i];
    });
  }
  return out;
}

}  // namespace dosegen
