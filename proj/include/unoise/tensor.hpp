#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "unoise/rng.hpp"

#if defined(_OPENMP)
#include <omp.h>
#endif

namespace unoise {

using Shape = std::vector<int>;

inline long long shape_numel(const Shape& s) {
  long long n = 1;
  for (int d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << "]";
  return os.str();
}

// Worker threads used inside the heavy kernels (conv2d). 0 = all hardware
// threads. The partitioning is over disjoint output rows, so results are
// bitwise identical for any thread count.
int& kernel_threads();

namespace detail {

inline int resolved_threads();

#if defined(UNOISE_USE_BLAS)
// Row-major GEMM via CBLAS (OpenBLAS). Thread partitioning in BLAS level-3
// never splits the k dimension, so results are bitwise deterministic for any
// thread count.
void blas_gemm(bool trans_a, bool trans_b, int M, int N, int K, const float* A,
               int lda, const float* B, int ldb, float beta, float* C, int ldc);
void blas_gemm(bool trans_a, bool trans_b, int M, int N, int K, const double* A,
               int lda, const double* B, int ldb, double beta, double* C, int ldc);
#endif

// C[M x N] (+)= A[M x K] * B[K x N], all row-major. accumulate=false
// overwrites C without requiring it to be initialized.
template <typename S>
void gemm_accum(int M, int K, int N, const S* A, const S* B, S* C,
                bool accumulate = true) {
#if defined(UNOISE_USE_BLAS)
  blas_gemm(false, false, M, N, K, A, K, B, N, accumulate ? S(1) : S(0), C, N);
#else
  const long long ln = N;
  if (!accumulate) std::fill_n(C, static_cast<long long>(M) * N, S(0));
#if defined(_OPENMP)
#pragma omp parallel for schedule(static) num_threads(detail::resolved_threads())
#endif
  for (int i = 0; i < M; ++i) {
    S* __restrict crow = C + i * ln;
    const S* arow = A + static_cast<long long>(i) * K;
    for (int k = 0; k < K; ++k) {
      const S a = arow[k];
      if (a == S(0)) continue;
      const S* __restrict brow = B + k * ln;
      for (int j = 0; j < N; ++j) crow[j] += a * brow[j];
    }
  }
#endif
}

// C[M x N] (+)= A^T * B where A is [K x M], B is [K x N].
template <typename S>
void gemm_at_b(int K, int M, int N, const S* A, const S* B, S* C,
               bool accumulate = true) {
#if defined(UNOISE_USE_BLAS)
  blas_gemm(true, false, M, N, K, A, M, B, N, accumulate ? S(1) : S(0), C, N);
#else
  const long long ln = N;
  if (!accumulate) std::fill_n(C, static_cast<long long>(M) * N, S(0));
#if defined(_OPENMP)
#pragma omp parallel for schedule(static) num_threads(detail::resolved_threads())
#endif
  for (int m = 0; m < M; ++m) {
    S* __restrict crow = C + m * ln;
    for (int k = 0; k < K; ++k) {
      const S a = A[static_cast<long long>(k) * M + m];
      if (a == S(0)) continue;
      const S* __restrict brow = B + k * ln;
      for (int j = 0; j < N; ++j) crow[j] += a * brow[j];
    }
  }
#endif
}

// C[M x N] (+)= A * B^T where A is [M x K], B is [N x K].
template <typename S>
void gemm_a_bt(int M, int N, int K, const S* A, const S* B, S* C,
               bool accumulate = true) {
#if defined(UNOISE_USE_BLAS)
  blas_gemm(false, true, M, N, K, A, K, B, K, accumulate ? S(1) : S(0), C, N);
#else
#if defined(_OPENMP)
#pragma omp parallel for schedule(static) num_threads(detail::resolved_threads())
#endif
  for (int i = 0; i < M; ++i) {
    const S* arow = A + static_cast<long long>(i) * K;
    for (int j = 0; j < N; ++j) {
      const S* brow = B + static_cast<long long>(j) * K;
      S acc = S(0);
      for (int k = 0; k < K; ++k) acc += arow[k] * brow[k];
      S& out = C[static_cast<long long>(i) * N + j];
      out = accumulate ? out + acc : acc;
    }
  }
#endif
}

// Reusable per-thread scratch for convolution transients; grows, never
// shrinks, and is always fully overwritten before use.
template <typename S>
S* scratch_buffer(int slot, std::size_t count) {
  thread_local std::vector<S> bufs[4];
  auto& b = bufs[slot];
  if (b.size() < count) b.resize(count);
  return b.data();
}

// Keeps large repeated allocations (graph node buffers) in the heap arena
// instead of cycling mmap/munmap, which costs a page-fault sweep per tensor.
void tune_allocator();

// Unrolls one C x H x W image into a [C*K*K, Ho*Wo] patch matrix written at
// column stride `ld` (several samples share one wide matrix side by side).
// Stride-1 rows reduce to zero edges plus one contiguous copy.
template <typename S>
void im2col(const S* x, int C, int H, int W, int K, int stride, int pad,
            int Ho, int Wo, S* col, long long ld) {
  for (int c = 0; c < C; ++c) {
    for (int kh = 0; kh < K; ++kh) {
      for (int kw = 0; kw < K; ++kw) {
        S* dst = col + (static_cast<long long>(c) * K * K + kh * K + kw) * ld;
        for (int ho = 0; ho < Ho; ++ho) {
          const int hin = ho * stride - pad + kh;
          S* drow = dst + static_cast<long long>(ho) * Wo;
          if (hin < 0 || hin >= H) {
            std::fill(drow, drow + Wo, S(0));
            continue;
          }
          const S* srow = x + (static_cast<long long>(c) * H + hin) * W;
          if (stride == 1) {
            const int wo_start = std::max(0, pad - kw);
            const int wo_end = std::min(Wo, W + pad - kw);
            std::fill(drow, drow + wo_start, S(0));
            std::copy_n(srow + (wo_start - pad + kw), wo_end - wo_start,
                        drow + wo_start);
            std::fill(drow + wo_end, drow + Wo, S(0));
          } else {
            for (int wo = 0; wo < Wo; ++wo) {
              const int win = wo * stride - pad + kw;
              drow[wo] = (win >= 0 && win < W) ? srow[win] : S(0);
            }
          }
        }
      }
    }
  }
}

// Transpose of im2col: scatter-adds a patch-matrix gradient back onto the image.
template <typename S>
void col2im_accum(const S* col, int C, int H, int W, int K, int stride, int pad,
                  int Ho, int Wo, S* x, long long ld) {
  for (int c = 0; c < C; ++c) {
    for (int kh = 0; kh < K; ++kh) {
      for (int kw = 0; kw < K; ++kw) {
        const S* src = col + (static_cast<long long>(c) * K * K + kh * K + kw) * ld;
        for (int ho = 0; ho < Ho; ++ho) {
          const int hin = ho * stride - pad + kh;
          if (hin < 0 || hin >= H) continue;
          const S* srow = src + static_cast<long long>(ho) * Wo;
          S* drow = x + (static_cast<long long>(c) * H + hin) * W;
          if (stride == 1) {
            const int wo_start = std::max(0, pad - kw);
            const int wo_end = std::min(Wo, W + pad - kw);
            S* __restrict d = drow + (wo_start - pad + kw);
            const S* __restrict s = srow + wo_start;
            const int count = wo_end - wo_start;
            for (int i = 0; i < count; ++i) d[i] += s[i];
          } else {
            for (int wo = 0; wo < Wo; ++wo) {
              const int win = wo * stride - pad + kw;
              if (win >= 0 && win < W) drow[win] += srow[wo];
            }
          }
        }
      }
    }
  }
}

}  // namespace detail

// Dense n-dimensional tensor with reverse-mode automatic differentiation.
// A TensorT is a cheap handle onto a graph node; ops return new nodes wired
// to their inputs. Data is immutable after construction except through
// mutable_data() (parameter updates) and the grad buffer.
template <typename S>
class TensorT {
 public:
  struct Node {
    Shape shape;
    std::vector<S> data;
    std::vector<S> grad;  // empty until first backward touches it
    bool needs_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward_fn;

    void ensure_grad() {
      if (grad.empty()) grad.assign(data.size(), S(0));
    }
    bool is_leaf() const { return !backward_fn; }
  };

  TensorT() = default;
  explicit TensorT(std::shared_ptr<Node> n) : node_(std::move(n)) {}

  static TensorT zeros(const Shape& shape, bool requires_grad = false) {
    return full(shape, S(0), requires_grad);
  }

  static TensorT full(const Shape& shape, S value, bool requires_grad = false) {
    auto n = std::make_shared<Node>();
    n->shape = shape;
    n->data.assign(static_cast<std::size_t>(shape_numel(shape)), value);
    n->needs_grad = requires_grad;
    return TensorT(std::move(n));
  }

  static TensorT from_data(const Shape& shape, std::vector<S> values,
                           bool requires_grad = false) {
    if (static_cast<long long>(values.size()) != shape_numel(shape)) {
      throw std::invalid_argument("tensor: data length " +
                                  std::to_string(values.size()) +
                                  " does not match shape " + shape_str(shape));
    }
    auto n = std::make_shared<Node>();
    n->shape = shape;
    n->data = std::move(values);
    n->needs_grad = requires_grad;
    return TensorT(std::move(n));
  }

  static TensorT scalar(S value) { return full({1}, value); }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int dim(int i) const { return node_->shape[static_cast<std::size_t>(i)]; }
  int ndim() const { return static_cast<int>(node_->shape.size()); }
  long long size() const { return static_cast<long long>(node_->data.size()); }

  const std::vector<S>& vec() const { return node_->data; }
  const S* data() const { return node_->data.data(); }
  // In-place access for initializers and optimizers. Using this on a tensor
  // that is part of a live graph invalidates recorded forward values.
  S* mutable_data() { return node_->data.data(); }

  S item() const {
    if (size() != 1) {
      throw std::invalid_argument("item: tensor has " + std::to_string(size()) +
                                  " elements, expected 1");
    }
    return node_->data[0];
  }
  S at(long long i) const { return node_->data[static_cast<std::size_t>(i)]; }

  bool requires_grad() const { return node_->needs_grad; }
  void set_requires_grad(bool b) { node_->needs_grad = b; }

  bool has_grad() const { return !node_->grad.empty(); }
  const std::vector<S>& grad() const { return node_->grad; }
  std::vector<S>& mutable_grad() { return node_->grad; }
  void zero_grad() { node_->grad.assign(node_->data.size(), S(0)); }
  void clear_grad() { node_->grad.clear(); }

  // Detached copy of the values (new leaf, no graph history).
  TensorT detach_copy() const {
    return from_data(node_->shape, node_->data, false);
  }

  std::shared_ptr<Node> node() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

using Tensor = TensorT<float>;    // training precision
using Tensor64 = TensorT<double>;  // oracle / gradient-check precision

namespace detail {

template <typename S>
std::shared_ptr<typename TensorT<S>::Node> result_node(Shape shape,
                                                       std::vector<S> data) {
  auto n = std::make_shared<typename TensorT<S>::Node>();
  n->shape = std::move(shape);
  n->data = std::move(data);
  return n;
}

template <typename S>
void check_same_shape(const TensorT<S>& a, const TensorT<S>& b,
                      const char* op) {
  if (a.shape() != b.shape()) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch " +
                                shape_str(a.shape()) + " vs " +
                                shape_str(b.shape()));
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise ops
// ---------------------------------------------------------------------------

template <typename S>
TensorT<S> add(const TensorT<S>& a, const TensorT<S>& b) {
  detail::check_same_shape(a, b, "add");
  std::vector<S> out(a.vec());
  const S* pb = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += pb[i];
  auto n = detail::result_node<S>(a.shape(), std::move(out));
  if (a.node()->needs_grad || b.node()->needs_grad) {
    n->needs_grad = true;
    n->parents = {a.node(), b.node()};
    n->backward_fn = [](typename TensorT<S>::Node& self) {
      for (auto& p : self.parents) {
        if (!p->needs_grad) continue;
        p->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i)
          p->grad[i] += self.grad[i];
      }
    };
  }
  return TensorT<S>(std::move(n));
}

template <typename S>
TensorT<S> sub(const TensorT<S>& a, const TensorT<S>& b) {
  detail::check_same_shape(a, b, "sub");
  std::vector<S> out(a.vec());
  const S* pb = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= pb[i];
  auto n = detail::result_node<S>(a.shape(), std::move(out));
  if (a.node()->needs_grad || b.node()->needs_grad) {
    n->needs_grad = true;
    n->parents = {a.node(), b.node()};
    n->backward_fn = [](typename TensorT<S>::Node& self) {
      auto& pa = self.parents[0];
      auto& pb2 = self.parents[1];
      if (pa->needs_grad) {
        pa->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i)
          pa->grad[i] += self.grad[i];
      }
      if (pb2->needs_grad) {
        pb2->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i)
          pb2->grad[i] -= self.grad[i];
      }
    };
  }
  return TensorT<S>(std::move(n));
}

template <typename S>
TensorT<S> mul(const TensorT<S>& a, const TensorT<S>& b) {
  detail::check_same_shape(a, b, "mul");
  std::vector<S> out(a.vec());
  const S* pb = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= pb[i];
  auto n = detail::result_node<S>(a.shape(), std::move(out));
  if (a.node()->needs_grad || b.node()->needs_grad) {
    n->needs_grad = true;
    n->parents = {a.node(), b.node()};
    n->backward_fn = [](typename TensorT<S>::Node& self) {
      auto& pa = self.parents[0];
      auto& pb2 = self.parents[1];
      if (pa->needs_grad) {
        pa->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i)
          pa->grad[i] += self.grad[i] * pb2->data[i];
      }
      if (pb2->needs_grad) {
        pb2->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i)
          pb2->grad[i] += self.grad[i] * pa->data[i];
      }
    };
  }
  return TensorT<S>(std::move(n));
}

template <typename S>
TensorT<S> scalar_mul(const TensorT<S>& a, S c) {
  std::vector<S> out(a.vec());
  for (S& v : out) v *= c;
  auto n = detail::result_node<S>(a.shape(), std::move(out));
  if (a.node()->needs_grad) {
    n->needs_grad = true;
    n->parents = {a.node()};
    n->backward_fn = [c](typename TensorT<S>::Node& self) {
      auto& p = self.parents[0];
      p->ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i)
        p->grad[i] += self.grad[i] * c;
    };
  }
  return TensorT<S>(std::move(n));
}

template <typename S>
TensorT<S> scalar_add(const TensorT<S>& a, S c) {
  std::vector<S> out(a.vec());
  for (S& v : out) v += c;
  auto n = detail::result_node<S>(a.shape(), std::move(out));
  if (a.node()->needs_grad) {
    n->needs_grad = true;
    n->parents = {a.node()};
    n->backward_fn = [](typename TensorT<S>::Node& self) {
      auto& p = self.parents[0];
      p->ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i)
        p->grad[i] += self.grad[i];
    };
  }
  return TensorT<S>(std::move(n));
}

template <typename S>
TensorT<S> relu(const TensorT<S>& a) {
  std::vector<S> out(a.vec());
  for (S& v : out) v = v > S(0) ? v : S(0);
  auto n = detail::result_node<S>(a.shape(), std::move(out));
  if (a.node()->needs_grad) {
    n->needs_grad = true;
    n->parents = {a.node()};
    // subgradient at 0 is 0
    n->backward_fn = [](typename TensorT<S>::Node& self) {
      auto& p = self.parents[0];
      p->ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i)
        if (p->data[i] > S(0)) p->grad[i] += self.grad[i];
    };
  }
  return TensorT<S>(std::move(n));
}

// Output is clamped into the open interval (0, 1): the exact sigmoid of a
// large finite input rounds to 1.0 in finite precision, which would violate
// downstream preconditions (log of 1-B, noise-mask range).
template <typename S>
TensorT<S> sigmoid(const TensorT<S>& a) {
  const S lo = std::numeric_limits<S>::min();
  const S hi = S(1) - std::numeric_limits<S>::epsilon() / S(2);
  std::vector<S> out(a.vec());
  for (S& v : out) {
    S y;
    if (v >= S(0)) {
      y = S(1) / (S(1) + std::exp(-v));
    } else {
      const S e = std::exp(v);
      y = e / (S(1) + e);
    }
    v = std::min(hi, std::max(lo, y));
  }
  auto n = detail::result_node<S>(a.shape(), std::move(out));
  if (a.node()->needs_grad) {
    n->needs_grad = true;
    n->parents = {a.node()};
    n->backward_fn = [](typename TensorT<S>::Node& self) {
      auto& p = self.parents[0];
      p->ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) {
        const S y = self.data[i];
        p->grad[i] += self.grad[i] * y * (S(1) - y);
      }
    };
  }
  return TensorT<S>(std::move(n));
}

template <typename S>
TensorT<S> log(const TensorT<S>& a) {
  std::vector<S> out(a.vec());
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (!(out[i] > S(0))) {
      throw std::invalid_argument(
          "log: non-positive input " + std::to_string(out[i]) + " at index " +
          std::to_string(i) + "; clamp before taking log");
    }
    out[i] = std::log(out[i]);
  }
  auto n = detail::result_node<S>(a.shape(), std::move(out));
  if (a.node()->needs_grad) {
    n->needs_grad = true;
    n->parents = {a.node()};
    n->backward_fn = [](typename TensorT<S>::Node& self) {
      auto& p = self.parents[0];
      p->ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i)
        p->grad[i] += self.grad[i] / p->data[i];
    };
  }
  return TensorT<S>(std::move(n));
}

// max(a, floor) elementwise; gradient passes only where a > floor.
template <typename S>
TensorT<S> clamp_min(const TensorT<S>& a, S floor) {
  std::vector<S> out(a.vec());
  for (S& v : out) v = v > floor ? v : floor;
  auto n = detail::result_node<S>(a.shape(), std::move(out));
  if (a.node()->needs_grad) {
    n->needs_grad = true;
    n->parents = {a.node()};
    n->backward_fn = [floor](typename TensorT<S>::Node& self) {
      auto& p = self.parents[0];
      p->ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i)
        if (p->data[i] > floor) p->grad[i] += self.grad[i];
    };
  }
  return TensorT<S>(std::move(n));
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

template <typename S>
TensorT<S> sum(const TensorT<S>& a) {
  S acc = S(0);
  for (S v : a.vec()) acc += v;
  auto n = detail::result_node<S>({1}, {acc});
  if (a.node()->needs_grad) {
    n->needs_grad = true;
    n->parents = {a.node()};
    n->backward_fn = [](typename TensorT<S>::Node& self) {
      auto& p = self.parents[0];
      p->ensure_grad();
      const S g = self.grad[0];
      for (std::size_t i = 0; i < p->grad.size(); ++i) p->grad[i] += g;
    };
  }
  return TensorT<S>(std::move(n));
}

template <typename S>
TensorT<S> mean(const TensorT<S>& a) {
  const S inv = S(1) / static_cast<S>(a.size());
  S acc = S(0);
  for (S v : a.vec()) acc += v;
  auto n = detail::result_node<S>({1}, {acc * inv});
  if (a.node()->needs_grad) {
    n->needs_grad = true;
    n->parents = {a.node()};
    n->backward_fn = [inv](typename TensorT<S>::Node& self) {
      auto& p = self.parents[0];
      p->ensure_grad();
      const S g = self.grad[0] * inv;
      for (std::size_t i = 0; i < p->grad.size(); ++i) p->grad[i] += g;
    };
  }
  return TensorT<S>(std::move(n));
}

// ---------------------------------------------------------------------------
// Shape / channel ops (NCHW)
// ---------------------------------------------------------------------------

template <typename S>
TensorT<S> concat_channels(const TensorT<S>& a, const TensorT<S>& b) {
  if (a.ndim() != 4 || b.ndim() != 4 || a.dim(0) != b.dim(0) ||
      a.dim(2) != b.dim(2) || a.dim(3) != b.dim(3)) {
    throw std::invalid_argument("concat_channels: incompatible shapes " +
                                shape_str(a.shape()) + " vs " +
                                shape_str(b.shape()));
  }
  const int N = a.dim(0), Ca = a.dim(1), Cb = b.dim(1), H = a.dim(2), W = a.dim(3);
  const long long plane = static_cast<long long>(H) * W;
  std::vector<S> out(static_cast<std::size_t>(N) * (Ca + Cb) * plane);
  for (int nidx = 0; nidx < N; ++nidx) {
    std::copy_n(a.data() + nidx * Ca * plane, Ca * plane,
                out.data() + static_cast<long long>(nidx) * (Ca + Cb) * plane);
    std::copy_n(b.data() + nidx * Cb * plane, Cb * plane,
                out.data() + static_cast<long long>(nidx) * (Ca + Cb) * plane +
                    Ca * plane);
  }
  auto n = detail::result_node<S>({N, Ca + Cb, H, W}, std::move(out));
  if (a.node()->needs_grad || b.node()->needs_grad) {
    n->needs_grad = true;
    n->parents = {a.node(), b.node()};
    n->backward_fn = [N, Ca, Cb, plane](typename TensorT<S>::Node& self) {
      auto& pa = self.parents[0];
      auto& pb = self.parents[1];
      for (int nidx = 0; nidx < N; ++nidx) {
        const S* g = self.grad.data() +
                     static_cast<long long>(nidx) * (Ca + Cb) * plane;
        if (pa->needs_grad) {
          pa->ensure_grad();
          S* ga = pa->grad.data() + nidx * Ca * plane;
          for (long long i = 0; i < Ca * plane; ++i) ga[i] += g[i];
        }
        if (pb->needs_grad) {
          pb->ensure_grad();
          S* gb = pb->grad.data() + nidx * Cb * plane;
          for (long long i = 0; i < Cb * plane; ++i) gb[i] += g[Ca * plane + i];
        }
      }
    };
  }
  return TensorT<S>(std::move(n));
}

// N x H x W -> N x C x H x W by channel replication.
template <typename S>
TensorT<S> expand_channels(const TensorT<S>& a, int channels) {
  if (a.ndim() != 3) {
    throw std::invalid_argument("expand_channels: expected NxHxW input, got " +
                                shape_str(a.shape()));
  }
  const int N = a.dim(0), H = a.dim(1), W = a.dim(2);
  const long long plane = static_cast<long long>(H) * W;
  std::vector<S> out(static_cast<std::size_t>(N) * channels * plane);
  for (int nidx = 0; nidx < N; ++nidx)
    for (int c = 0; c < channels; ++c)
      std::copy_n(a.data() + nidx * plane, plane,
                  out.data() + (static_cast<long long>(nidx) * channels + c) * plane);
  auto n = detail::result_node<S>({N, channels, H, W}, std::move(out));
  if (a.node()->needs_grad) {
    n->needs_grad = true;
    n->parents = {a.node()};
    n->backward_fn = [N, channels, plane](typename TensorT<S>::Node& self) {
      auto& p = self.parents[0];
      p->ensure_grad();
      for (int nidx = 0; nidx < N; ++nidx) {
        S* g = p->grad.data() + nidx * plane;
        for (int c = 0; c < channels; ++c) {
          const S* gs = self.grad.data() +
                        (static_cast<long long>(nidx) * channels + c) * plane;
          for (long long i = 0; i < plane; ++i) g[i] += gs[i];
        }
      }
    };
  }
  return TensorT<S>(std::move(n));
}

// N x K x H x W -> N x H x W, picking channel k.
template <typename S>
TensorT<S> select_channel(const TensorT<S>& a, int k) {
  if (a.ndim() != 4 || k < 0 || k >= a.dim(1)) {
    throw std::invalid_argument("select_channel: channel " + std::to_string(k) +
                                " out of range for " + shape_str(a.shape()));
  }
  const int N = a.dim(0), C = a.dim(1), H = a.dim(2), W = a.dim(3);
  const long long plane = static_cast<long long>(H) * W;
  std::vector<S> out(static_cast<std::size_t>(N) * plane);
  for (int nidx = 0; nidx < N; ++nidx)
    std::copy_n(a.data() + (static_cast<long long>(nidx) * C + k) * plane, plane,
                out.data() + nidx * plane);
  auto n = detail::result_node<S>({N, H, W}, std::move(out));
  if (a.node()->needs_grad) {
    n->needs_grad = true;
    n->parents = {a.node()};
    n->backward_fn = [N, C, k, plane](typename TensorT<S>::Node& self) {
      auto& p = self.parents[0];
      p->ensure_grad();
      for (int nidx = 0; nidx < N; ++nidx) {
        S* g = p->grad.data() + (static_cast<long long>(nidx) * C + k) * plane;
        const S* gs = self.grad.data() + nidx * plane;
        for (long long i = 0; i < plane; ++i) g[i] += gs[i];
      }
    };
  }
  return TensorT<S>(std::move(n));
}

// ---------------------------------------------------------------------------
// Convolution / pooling / upsampling
// ---------------------------------------------------------------------------

// Cross-correlation (deep-learning convention). input N x C x H x W,
// weight O x C x K x K, bias O. Output N x O x Ho x Wo.
template <typename S>
TensorT<S> conv2d(const TensorT<S>& input, const TensorT<S>& weight,
                  const TensorT<S>& bias, int stride = 1, int padding = 0) {
  if (input.ndim() != 4)
    throw std::invalid_argument("conv2d: input must be NxCxHxW, got " +
                                shape_str(input.shape()));
  if (weight.ndim() != 4 || weight.dim(2) != weight.dim(3))
    throw std::invalid_argument("conv2d: weight must be OxCxKxK, got " +
                                shape_str(weight.shape()));
  const int N = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
  const int O = weight.dim(0), K = weight.dim(2);
  if (weight.dim(1) != C)
    throw std::invalid_argument(
        "conv2d: input has " + std::to_string(C) + " channels but weight expects " +
        std::to_string(weight.dim(1)));
  if (K % 2 == 0) throw std::invalid_argument("conv2d: kernel size must be odd");
  if (stride <= 0 || padding < 0)
    throw std::invalid_argument("conv2d: stride must be positive, padding non-negative");
  if (bias.ndim() != 1 || bias.dim(0) != O)
    throw std::invalid_argument("conv2d: bias must have shape [O]");
  if ((H + 2 * padding - K) % stride != 0 || (W + 2 * padding - K) % stride != 0 ||
      H + 2 * padding < K || W + 2 * padding < K)
    throw std::invalid_argument(
        "conv2d: spatial dims " + std::to_string(H) + "x" + std::to_string(W) +
        " incompatible with kernel " + std::to_string(K) + ", stride " +
        std::to_string(stride) + ", padding " + std::to_string(padding));

  const int Ho = (H + 2 * padding - K) / stride + 1;
  const int Wo = (W + 2 * padding - K) / stride + 1;
  const long long in_plane = static_cast<long long>(C) * H * W;
  const long long out_plane = static_cast<long long>(O) * Ho * Wo;
  const int ckk = C * K * K;
  const long long cols = static_cast<long long>(Ho) * Wo;
  const long long cols_all = cols * N;  // samples side by side: one wide GEMM

  detail::tune_allocator();
  S* col = detail::scratch_buffer<S>(0, static_cast<std::size_t>(ckk) * cols_all);
  for (int nidx = 0; nidx < N; ++nidx)
    detail::im2col(input.data() + nidx * in_plane, C, H, W, K, stride, padding,
                   Ho, Wo, col + nidx * cols, cols_all);
  S* prod = detail::scratch_buffer<S>(1, static_cast<std::size_t>(O) * cols_all);
  detail::gemm_accum(O, ckk, static_cast<int>(cols_all), weight.data(), col, prod,
                     /*accumulate=*/false);

  std::vector<S> out(static_cast<std::size_t>(N) * out_plane);
  for (int nidx = 0; nidx < N; ++nidx)
    for (int o = 0; o < O; ++o) {
      const S b = bias.at(o);
      const S* src = prod + o * cols_all + nidx * cols;
      S* dst = out.data() + nidx * out_plane + o * cols;
      for (long long j = 0; j < cols; ++j) dst[j] = src[j] + b;
    }

  auto n = detail::result_node<S>({N, O, Ho, Wo}, std::move(out));
  if (input.node()->needs_grad || weight.node()->needs_grad ||
      bias.node()->needs_grad) {
    n->needs_grad = true;
    n->parents = {input.node(), weight.node(), bias.node()};
    n->backward_fn = [N, C, H, W, O, K, stride, padding, Ho, Wo, ckk, cols,
                      cols_all, in_plane, out_plane](typename TensorT<S>::Node& self) {
      auto& in = self.parents[0];
      auto& wt = self.parents[1];
      auto& bs = self.parents[2];

      // gradient rearranged to [O x N*cols] to match the batched col matrix
      S* gy = detail::scratch_buffer<S>(1, static_cast<std::size_t>(O) * cols_all);
      for (int nidx = 0; nidx < N; ++nidx)
        for (int o = 0; o < O; ++o)
          std::copy_n(self.grad.data() + nidx * out_plane + o * cols, cols,
                      gy + o * cols_all + nidx * cols);

      if (bs->needs_grad) {
        bs->ensure_grad();
        for (int o = 0; o < O; ++o) {
          S acc = S(0);
          const S* row = gy + o * cols_all;
          for (long long j = 0; j < cols_all; ++j) acc += row[j];
          bs->grad[o] += acc;
        }
      }
      {
        if (wt->needs_grad) {
          // the unrolled patch matrix is only needed for weight gradients
          S* col = detail::scratch_buffer<S>(
              0, static_cast<std::size_t>(ckk) * cols_all);
          for (int nidx = 0; nidx < N; ++nidx)
            detail::im2col(in->data.data() + nidx * in_plane, C, H, W, K, stride,
                           padding, Ho, Wo, col + nidx * cols, cols_all);
          wt->ensure_grad();
          // dW[o, ckk] += sum_j gy[o, j] * col[ckk, j]
          detail::gemm_a_bt(O, ckk, static_cast<int>(cols_all), gy, col,
                            wt->grad.data());
        }
        if (in->needs_grad) {
          in->ensure_grad();
          S* dcol =
              detail::scratch_buffer<S>(2, static_cast<std::size_t>(ckk) * cols_all);
          // dcol[ckk, j] = sum_o W[o, ckk] * gy[o, j]
          detail::gemm_at_b(O, ckk, static_cast<int>(cols_all), wt->data.data(),
                            gy, dcol, /*accumulate=*/false);
          for (int nidx = 0; nidx < N; ++nidx)
            detail::col2im_accum(dcol + nidx * cols, C, H, W, K, stride, padding,
                                 Ho, Wo, in->grad.data() + nidx * in_plane,
                                 cols_all);
        }
      }
    };
  }
  return TensorT<S>(std::move(n));
}

// Non-overlapping window maxima; ties route the gradient to the first
// element of the window in row-major order.
template <typename S>
TensorT<S> max_pool2d(const TensorT<S>& input, int window = 2) {
  if (input.ndim() != 4)
    throw std::invalid_argument("max_pool2d: input must be NxCxHxW");
  const int N = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
  if (window <= 0 || H % window != 0 || W % window != 0)
    throw std::invalid_argument(
        "max_pool2d: spatial dims " + std::to_string(H) + "x" + std::to_string(W) +
        " not divisible by window " + std::to_string(window));
  const int Ho = H / window, Wo = W / window;
  std::vector<S> out(static_cast<std::size_t>(N) * C * Ho * Wo);
  auto argmax = std::make_shared<std::vector<long long>>(out.size());
  long long oi = 0;
  for (int nc = 0; nc < N * C; ++nc) {
    const S* plane = input.data() + static_cast<long long>(nc) * H * W;
    for (int ho = 0; ho < Ho; ++ho) {
      for (int wo = 0; wo < Wo; ++wo, ++oi) {
        S best = std::numeric_limits<S>::lowest();
        long long best_idx = -1;
        for (int dy = 0; dy < window; ++dy) {
          const int y = ho * window + dy;
          for (int dx = 0; dx < window; ++dx) {
            const int x = wo * window + dx;
            const S v = plane[static_cast<long long>(y) * W + x];
            if (v > best) {
              best = v;
              best_idx = static_cast<long long>(nc) * H * W + y * W + x;
            }
          }
        }
        out[oi] = best;
        (*argmax)[oi] = best_idx;
      }
    }
  }
  auto n = detail::result_node<S>({N, C, Ho, Wo}, std::move(out));
  if (input.node()->needs_grad) {
    n->needs_grad = true;
    n->parents = {input.node()};
    n->backward_fn = [argmax](typename TensorT<S>::Node& self) {
      auto& p = self.parents[0];
      p->ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i)
        p->grad[(*argmax)[i]] += self.grad[i];
    };
  }
  return TensorT<S>(std::move(n));
}

namespace detail {

// align-corners-false source coordinate tables for 2x upsampling.
inline void bilinear2x_axis(int in, std::vector<int>& i0, std::vector<int>& i1,
                            std::vector<double>& w1) {
  const int out = in * 2;
  i0.resize(out);
  i1.resize(out);
  w1.resize(out);
  for (int o = 0; o < out; ++o) {
    const double src = (o + 0.5) / 2.0 - 0.5;
    const double fl = std::floor(src);
    int a = static_cast<int>(fl);
    double t = src - fl;
    int b = a + 1;
    if (a < 0) a = 0;
    if (b > in - 1) b = in - 1;
    i0[o] = a;
    i1[o] = b;
    w1[o] = t;
  }
}

}  // namespace detail

// Doubles H and W with align-corners-false bilinear interpolation.
template <typename S>
TensorT<S> upsample_bilinear2x(const TensorT<S>& input) {
  if (input.ndim() != 4)
    throw std::invalid_argument("upsample_bilinear2x: input must be NxCxHxW");
  const int N = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
  if (H < 1 || W < 1)
    throw std::invalid_argument("upsample_bilinear2x: empty spatial dims");
  const int Ho = H * 2, Wo = W * 2;
  std::vector<int> y0, y1, x0, x1;
  std::vector<double> ty, tx;
  detail::bilinear2x_axis(H, y0, y1, ty);
  detail::bilinear2x_axis(W, x0, x1, tx);
  std::vector<S> out(static_cast<std::size_t>(N) * C * Ho * Wo);
  for (int nc = 0; nc < N * C; ++nc) {
    const S* src = input.data() + static_cast<long long>(nc) * H * W;
    S* dst = out.data() + static_cast<long long>(nc) * Ho * Wo;
    for (int y = 0; y < Ho; ++y) {
      const S wy1 = static_cast<S>(ty[y]);
      const S wy0 = S(1) - wy1;
      const S* r0 = src + static_cast<long long>(y0[y]) * W;
      const S* r1 = src + static_cast<long long>(y1[y]) * W;
      for (int x = 0; x < Wo; ++x) {
        const S wx1 = static_cast<S>(tx[x]);
        const S wx0 = S(1) - wx1;
        dst[static_cast<long long>(y) * Wo + x] =
            wy0 * (wx0 * r0[x0[x]] + wx1 * r0[x1[x]]) +
            wy1 * (wx0 * r1[x0[x]] + wx1 * r1[x1[x]]);
      }
    }
  }
  auto n = detail::result_node<S>({N, C, Ho, Wo}, std::move(out));
  if (input.node()->needs_grad) {
    n->needs_grad = true;
    n->parents = {input.node()};
    n->backward_fn = [N, C, H, W, Ho, Wo, y0, y1, x0, x1, ty,
                      tx](typename TensorT<S>::Node& self) {
      auto& p = self.parents[0];
      p->ensure_grad();
      for (int nc = 0; nc < N * C; ++nc) {
        S* gin = p->grad.data() + static_cast<long long>(nc) * H * W;
        const S* g = self.grad.data() + static_cast<long long>(nc) * Ho * Wo;
        for (int y = 0; y < Ho; ++y) {
          const S wy1 = static_cast<S>(ty[y]);
          const S wy0 = S(1) - wy1;
          for (int x = 0; x < Wo; ++x) {
            const S gv = g[static_cast<long long>(y) * Wo + x];
            if (gv == S(0)) continue;
            const S wx1 = static_cast<S>(tx[x]);
            const S wx0 = S(1) - wx1;
            gin[static_cast<long long>(y0[y]) * W + x0[x]] += gv * wy0 * wx0;
            gin[static_cast<long long>(y0[y]) * W + x1[x]] += gv * wy0 * wx1;
            gin[static_cast<long long>(y1[y]) * W + x0[x]] += gv * wy1 * wx0;
            gin[static_cast<long long>(y1[y]) * W + x1[x]] += gv * wy1 * wx1;
          }
        }
      }
    };
  }
  return TensorT<S>(std::move(n));
}

// ---------------------------------------------------------------------------
// Loss
// ---------------------------------------------------------------------------

// Mean over all N*H*W positions of -log softmax(logits)[target].
// logits N x K x H x W, target N x H x W of integral class indices.
template <typename S>
TensorT<S> softmax_cross_entropy(const TensorT<S>& logits,
                                 const TensorT<S>& target) {
  if (logits.ndim() != 4)
    throw std::invalid_argument("softmax_cross_entropy: logits must be NxKxHxW");
  const int N = logits.dim(0), K = logits.dim(1), H = logits.dim(2),
            W = logits.dim(3);
  if (target.ndim() != 3 || target.dim(0) != N || target.dim(1) != H ||
      target.dim(2) != W)
    throw std::invalid_argument(
        "softmax_cross_entropy: target shape " + shape_str(target.shape()) +
        " does not match logits " + shape_str(logits.shape()));
  const long long plane = static_cast<long long>(H) * W;
  const long long positions = static_cast<long long>(N) * plane;
  auto cls = std::make_shared<std::vector<int>>(positions);
  for (long long i = 0; i < positions; ++i) {
    const S t = target.at(i);
    const int ti = static_cast<int>(t);
    if (static_cast<S>(ti) != t || ti < 0 || ti >= K)
      throw std::invalid_argument("softmax_cross_entropy: class index " +
                                  std::to_string(static_cast<double>(t)) +
                                  " outside [0, " + std::to_string(K) + ")");
    (*cls)[i] = ti;
  }

  double loss = 0.0;
  const S* lo = logits.data();
  for (int nidx = 0; nidx < N; ++nidx) {
    for (long long px = 0; px < plane; ++px) {
      const long long base = nidx * K * plane + px;
      S m = lo[base];
      for (int k = 1; k < K; ++k) m = std::max(m, lo[base + k * plane]);
      double se = 0.0;
      for (int k = 0; k < K; ++k)
        se += std::exp(static_cast<double>(lo[base + k * plane] - m));
      const double lse = static_cast<double>(m) + std::log(se);
      loss += lse - static_cast<double>(lo[base + (*cls)[nidx * plane + px] * plane]);
    }
  }
  loss /= static_cast<double>(positions);

  auto n = detail::result_node<S>({1}, {static_cast<S>(loss)});
  if (logits.node()->needs_grad) {
    n->needs_grad = true;
    n->parents = {logits.node()};
    n->backward_fn = [N, K, plane, positions, cls](typename TensorT<S>::Node& self) {
      auto& p = self.parents[0];
      p->ensure_grad();
      const S gout = self.grad[0] / static_cast<S>(positions);
      const S* lo = p->data.data();
      for (int nidx = 0; nidx < N; ++nidx) {
        for (long long px = 0; px < plane; ++px) {
          const long long base = nidx * K * plane + px;
          S m = lo[base];
          for (int k = 1; k < K; ++k) m = std::max(m, lo[base + k * plane]);
          double se = 0.0;
          for (int k = 0; k < K; ++k)
            se += std::exp(static_cast<double>(lo[base + k * plane] - m));
          const int t = (*cls)[nidx * plane + px];
          for (int k = 0; k < K; ++k) {
            const double soft =
                std::exp(static_cast<double>(lo[base + k * plane] - m)) / se;
            p->grad[base + k * plane] +=
                gout * static_cast<S>(soft - (k == t ? 1.0 : 0.0));
          }
        }
      }
    };
  }
  return TensorT<S>(std::move(n));
}

// ---------------------------------------------------------------------------
// Random tensors
// ---------------------------------------------------------------------------

// I.i.d. standard normal draws, deterministic per stream state.
template <typename S>
TensorT<S> randn(const Shape& shape, RngStream& stream) {
  const long long n = shape_numel(shape);
  std::vector<S> data(static_cast<std::size_t>(n));
  for (long long i = 0; i + 1 < n; i += 2) {
    auto [a, b] = stream.next_normal_pair();
    data[static_cast<std::size_t>(i)] = static_cast<S>(a);
    data[static_cast<std::size_t>(i + 1)] = static_cast<S>(b);
  }
  if (n % 2 != 0)
    data[static_cast<std::size_t>(n - 1)] = static_cast<S>(stream.next_normal());
  return TensorT<S>::from_data(shape, std::move(data));
}

// ---------------------------------------------------------------------------
// Backward pass
// ---------------------------------------------------------------------------

// Reverse-mode sweep from a scalar loss. Gradients of interior nodes are
// recomputed per call; gradients of leaves accumulate across calls until
// zero_grad/clear_grad.
template <typename S>
void backward(const TensorT<S>& loss) {
  if (loss.size() != 1)
    throw std::invalid_argument("backward: loss must be scalar, got " +
                                shape_str(loss.shape()));
  using Node = typename TensorT<S>::Node;
  if (!loss.node()->needs_grad) return;

  // Post-order over the needs_grad subgraph, iterative to survive deep chains.
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  struct Frame {
    Node* node;
    std::size_t next;
  };
  std::vector<Frame> stack;
  stack.push_back({loss.node().get(), 0});
  visited.insert(loss.node().get());
  while (!stack.empty()) {
    Frame& f = stack.back();
    if (f.next < f.node->parents.size()) {
      Node* p = f.node->parents[f.next++].get();
      if (p->needs_grad && !visited.count(p)) {
        visited.insert(p);
        stack.push_back({p, 0});
      }
    } else {
      order.push_back(f.node);
      stack.pop_back();
    }
  }

  // Interior grads are per-call values; reset them before seeding.
  for (Node* n : order)
    if (!n->is_leaf()) n->grad.assign(n->data.size(), S(0));

  loss.node()->ensure_grad();
  loss.node()->grad[0] += S(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it)
    if ((*it)->backward_fn) (*it)->backward_fn(**it);
}

// Convenience operators (same-shape elementwise).
template <typename S>
TensorT<S> operator+(const TensorT<S>& a, const TensorT<S>& b) {
  return add(a, b);
}
template <typename S>
TensorT<S> operator-(const TensorT<S>& a, const TensorT<S>& b) {
  return sub(a, b);
}
template <typename S>
TensorT<S> operator*(const TensorT<S>& a, const TensorT<S>& b) {
  return mul(a, b);
}

namespace detail {

inline int resolved_threads() {
#if defined(_OPENMP)
  const int req = kernel_threads();
  return req > 0 ? req : omp_get_max_threads();
#else
  return 1;
#endif
}

}  // namespace detail

}  // namespace unoise
