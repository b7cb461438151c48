// Copyright 2026 The changedet Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <limits>
#include <stdexcept>
#include <vector>

#include "changedet/gemm.hpp"
#include "changedet/tensor.hpp"

namespace changedet {

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

namespace detail {

template <typename T>
void check_binary_shapes(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape() && a.numel() != 1 && b.numel() != 1)
    throw std::invalid_argument("elementwise: shape mismatch " +
                                shape_str(a.shape()) + " vs " +
                                shape_str(b.shape()));
}

}  // namespace detail

// Binary elementwise ops accept equal shapes or a scalar (1-element) operand.
template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_binary_shapes(a, b);
  const bool sa = a.numel() == 1, sb = b.numel() == 1;
  const auto& av = a.values();
  const auto& bv = b.values();
  const Shape& shape = sa ? b.shape() : a.shape();
  std::vector<T> out(shape_numel(shape));
  for (size_t i = 0; i < out.size(); ++i)
    out[i] = av[sa ? 0 : i] + bv[sb ? 0 : i];
  return make_op<T>(shape, std::move(out), {a, b}, [sa, sb](TensorNode<T>& n) {
    auto& pa = n.parents[0];
    auto& pb = n.parents[1];
    if (pa->requires_grad) {
      pa->ensure_grad();
      for (size_t i = 0; i < n.grad.size(); ++i) pa->grad[sa ? 0 : i] += n.grad[i];
    }
    if (pb->requires_grad) {
      pb->ensure_grad();
      for (size_t i = 0; i < n.grad.size(); ++i) pb->grad[sb ? 0 : i] += n.grad[i];
    }
  });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_binary_shapes(a, b);
  const bool sa = a.numel() == 1, sb = b.numel() == 1;
  const auto& av = a.values();
  const auto& bv = b.values();
  const Shape& shape = sa ? b.shape() : a.shape();
  std::vector<T> out(shape_numel(shape));
  for (size_t i = 0; i < out.size(); ++i)
    out[i] = av[sa ? 0 : i] - bv[sb ? 0 : i];
  return make_op<T>(shape, std::move(out), {a, b}, [sa, sb](TensorNode<T>& n) {
    auto& pa = n.parents[0];
    auto& pb = n.parents[1];
    if (pa->requires_grad) {
      pa->ensure_grad();
      for (size_t i = 0; i < n.grad.size(); ++i) pa->grad[sa ? 0 : i] += n.grad[i];
    }
    if (pb->requires_grad) {
      pb->ensure_grad();
      for (size_t i = 0; i < n.grad.size(); ++i) pb->grad[sb ? 0 : i] -= n.grad[i];
    }
  });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_binary_shapes(a, b);
  const bool sa = a.numel() == 1, sb = b.numel() == 1;
  const auto& av = a.values();
  const auto& bv = b.values();
  const Shape& shape = sa ? b.shape() : a.shape();
  std::vector<T> out(shape_numel(shape));
  for (size_t i = 0; i < out.size(); ++i)
    out[i] = av[sa ? 0 : i] * bv[sb ? 0 : i];
  return make_op<T>(shape, std::move(out), {a, b}, [sa, sb](TensorNode<T>& n) {
    auto& pa = n.parents[0];
    auto& pb = n.parents[1];
    if (pa->requires_grad) {
      pa->ensure_grad();
      for (size_t i = 0; i < n.grad.size(); ++i)
        pa->grad[sa ? 0 : i] += n.grad[i] * pb->data[sb ? 0 : i];
    }
    if (pb->requires_grad) {
      pb->ensure_grad();
      for (size_t i = 0; i < n.grad.size(); ++i)
        pb->grad[sb ? 0 : i] += n.grad[i] * pa->data[sa ? 0 : i];
    }
  });
}

template <typename T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_binary_shapes(a, b);
  const bool sa = a.numel() == 1, sb = b.numel() == 1;
  const auto& av = a.values();
  const auto& bv = b.values();
  const Shape& shape = sa ? b.shape() : a.shape();
  std::vector<T> out(shape_numel(shape));
  for (size_t i = 0; i < out.size(); ++i)
    out[i] = av[sa ? 0 : i] / bv[sb ? 0 : i];
  return make_op<T>(shape, std::move(out), {a, b}, [sa, sb](TensorNode<T>& n) {
    auto& pa = n.parents[0];
    auto& pb = n.parents[1];
    if (pa->requires_grad) {
      pa->ensure_grad();
      for (size_t i = 0; i < n.grad.size(); ++i)
        pa->grad[sa ? 0 : i] += n.grad[i] / pb->data[sb ? 0 : i];
    }
    if (pb->requires_grad) {
      pb->ensure_grad();
      for (size_t i = 0; i < n.grad.size(); ++i) {
        T bb = pb->data[sb ? 0 : i];
        pb->grad[sb ? 0 : i] -= n.grad[i] * pa->data[sa ? 0 : i] / (bb * bb);
      }
    }
  });
}

template <typename T>
Tensor<T> scalar_mul(const Tensor<T>& a, T s) {
  std::vector<T> out(a.values());
  for (auto& v : out) v *= s;
  return make_op<T>(a.shape(), std::move(out), {a}, [s](TensorNode<T>& n) {
    auto& p = n.parents[0];
    if (!p->requires_grad) return;
    p->ensure_grad();
    for (size_t i = 0; i < n.grad.size(); ++i) p->grad[i] += s * n.grad[i];
  });
}

template <typename T>
Tensor<T> scalar_add(const Tensor<T>& a, T s) {
  std::vector<T> out(a.values());
  for (auto& v : out) v += s;
  return make_op<T>(a.shape(), std::move(out), {a}, [](TensorNode<T>& n) {
    auto& p = n.parents[0];
    if (!p->requires_grad) return;
    p->ensure_grad();
    for (size_t i = 0; i < n.grad.size(); ++i) p->grad[i] += n.grad[i];
  });
}

template <typename T>
Tensor<T> abs(const Tensor<T>& a) {
  std::vector<T> out(a.values());
  for (auto& v : out) v = v < T(0) ? -v : v;
  return make_op<T>(a.shape(), std::move(out), {a}, [](TensorNode<T>& n) {
    auto& p = n.parents[0];
    if (!p->requires_grad) return;
    p->ensure_grad();
    for (size_t i = 0; i < n.grad.size(); ++i) {
      T x = p->data[i];
      T s = x > T(0) ? T(1) : (x < T(0) ? T(-1) : T(0));
      p->grad[i] += s * n.grad[i];
    }
  });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& a) {
  std::vector<T> out(a.values());
  for (auto& v : out) v = v > T(0) ? v : T(0);
  return make_op<T>(a.shape(), std::move(out), {a}, [](TensorNode<T>& n) {
    auto& p = n.parents[0];
    if (!p->requires_grad) return;
    p->ensure_grad();
    for (size_t i = 0; i < n.grad.size(); ++i)
      if (p->data[i] > T(0)) p->grad[i] += n.grad[i];
  });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& a) {
  std::vector<T> out(a.values());
  for (auto& v : out) v = T(1) / (T(1) + std::exp(-v));
  return make_op<T>(a.shape(), std::move(out), {a}, [](TensorNode<T>& n) {
    auto& p = n.parents[0];
    if (!p->requires_grad) return;
    p->ensure_grad();
    for (size_t i = 0; i < n.grad.size(); ++i) {
      T y = n.data[i];
      p->grad[i] += y * (T(1) - y) * n.grad[i];
    }
  });
}

template <typename T>
Tensor<T> log(const Tensor<T>& a) {
  std::vector<T> out(a.values());
  for (auto& v : out) {
    if (v <= T(0))
      throw std::invalid_argument("log: non-positive value " + std::to_string(v));
    v = std::log(v);
  }
  return make_op<T>(a.shape(), std::move(out), {a}, [](TensorNode<T>& n) {
    auto& p = n.parents[0];
    if (!p->requires_grad) return;
    p->ensure_grad();
    for (size_t i = 0; i < n.grad.size(); ++i) p->grad[i] += n.grad[i] / p->data[i];
  });
}

template <typename T>
Tensor<T> exp(const Tensor<T>& a) {
  std::vector<T> out(a.values());
  for (auto& v : out) v = std::exp(v);
  return make_op<T>(a.shape(), std::move(out), {a}, [](TensorNode<T>& n) {
    auto& p = n.parents[0];
    if (!p->requires_grad) return;
    p->ensure_grad();
    for (size_t i = 0; i < n.grad.size(); ++i) p->grad[i] += n.data[i] * n.grad[i];
  });
}

template <typename T>
Tensor<T> sqrt(const Tensor<T>& a) {
  std::vector<T> out(a.values());
  for (auto& v : out) v = std::sqrt(v);
  return make_op<T>(a.shape(), std::move(out), {a}, [](TensorNode<T>& n) {
    auto& p = n.parents[0];
    if (!p->requires_grad) return;
    p->ensure_grad();
    for (size_t i = 0; i < n.grad.size(); ++i)
      p->grad[i] += n.grad[i] / (T(2) * n.data[i]);
  });
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  T acc = 0;
  for (T v : a.values()) acc += v;
  return make_op<T>({1}, {acc}, {a}, [](TensorNode<T>& n) {
    auto& p = n.parents[0];
    if (!p->requires_grad) return;
    p->ensure_grad();
    T g = n.grad[0];
    for (auto& v : p->grad) v += g;
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a) {
  T acc = 0;
  for (T v : a.values()) acc += v;
  T inv = T(1) / static_cast<T>(a.numel());
  return make_op<T>({1}, {acc * inv}, {a}, [inv](TensorNode<T>& n) {
    auto& p = n.parents[0];
    if (!p->requires_grad) return;
    p->ensure_grad();
    T g = n.grad[0] * inv;
    for (auto& v : p->grad) v += g;
  });
}

// ---------------------------------------------------------------------------
// matrix ops (2-D tensors)
// ---------------------------------------------------------------------------

namespace detail {
template <typename T>
void check_matrix(const Tensor<T>& a, const char* who) {
  if (a.shape().size() != 2)
    throw std::invalid_argument(std::string(who) + ": expected 2-D tensor, got " +
                                shape_str(a.shape()));
}
}  // namespace detail

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_matrix(a, "matmul");
  detail::check_matrix(b, "matmul");
  int64_t m = a.dim(0), k = a.dim(1), k2 = b.dim(0), n = b.dim(1);
  if (k != k2)
    throw std::invalid_argument("matmul: inner dims " + shape_str(a.shape()) +
                                " vs " + shape_str(b.shape()));
  std::vector<T> out(m * n);
  gemm(false, false, (int)m, (int)n, (int)k, T(1), a.values().data(), (int)k,
       b.values().data(), (int)n, T(0), out.data(), (int)n);
  return make_op<T>({m, n}, std::move(out), {a, b}, [m, n, k](TensorNode<T>& n_) {
    auto& pa = n_.parents[0];
    auto& pb = n_.parents[1];
    if (pa->requires_grad) {
      pa->ensure_grad();
      // dA += dC * B^T
      gemm(false, true, (int)m, (int)k, (int)n, T(1), n_.grad.data(), (int)n,
           pb->data.data(), (int)n, T(1), pa->grad.data(), (int)k);
    }
    if (pb->requires_grad) {
      pb->ensure_grad();
      // dB += A^T * dC
      gemm(true, false, (int)k, (int)n, (int)m, T(1), pa->data.data(), (int)k,
           n_.grad.data(), (int)n, T(1), pb->grad.data(), (int)n);
    }
  });
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& a) {
  detail::check_matrix(a, "transpose");
  int64_t m = a.dim(0), n = a.dim(1);
  std::vector<T> out(m * n);
  const auto& av = a.values();
  for (int64_t i = 0; i < m; ++i)
    for (int64_t j = 0; j < n; ++j) out[j * m + i] = av[i * n + j];
  return make_op<T>({n, m}, std::move(out), {a}, [m, n](TensorNode<T>& nd) {
    auto& p = nd.parents[0];
    if (!p->requires_grad) return;
    p->ensure_grad();
    for (int64_t i = 0; i < m; ++i)
      for (int64_t j = 0; j < n; ++j) p->grad[i * n + j] += nd.grad[j * m + i];
  });
}

// row mean of [m x n] -> [m x 1]
template <typename T>
Tensor<T> rowmean(const Tensor<T>& a) {
  detail::check_matrix(a, "rowmean");
  int64_t m = a.dim(0), n = a.dim(1);
  std::vector<T> out(m, T(0));
  const auto& av = a.values();
  for (int64_t i = 0; i < m; ++i) {
    T acc = 0;
    for (int64_t j = 0; j < n; ++j) acc += av[i * n + j];
    out[i] = acc / static_cast<T>(n);
  }
  return make_op<T>({m, 1}, std::move(out), {a}, [m, n](TensorNode<T>& nd) {
    auto& p = nd.parents[0];
    if (!p->requires_grad) return;
    p->ensure_grad();
    T inv = T(1) / static_cast<T>(n);
    for (int64_t i = 0; i < m; ++i) {
      T g = nd.grad[i] * inv;
      for (int64_t j = 0; j < n; ++j) p->grad[i * n + j] += g;
    }
  });
}

// A - v * 1^T with column vector v [m x 1]
template <typename T>
Tensor<T> sub_colvec(const Tensor<T>& a, const Tensor<T>& v) {
  detail::check_matrix(a, "sub_colvec");
  int64_t m = a.dim(0), n = a.dim(1);
  if (v.dim(0) != m || v.dim(1) != 1)
    throw std::invalid_argument("sub_colvec: vector shape " + shape_str(v.shape()) +
                                " does not match matrix " + shape_str(a.shape()));
  std::vector<T> out(m * n);
  const auto& av = a.values();
  const auto& vv = v.values();
  for (int64_t i = 0; i < m; ++i)
    for (int64_t j = 0; j < n; ++j) out[i * n + j] = av[i * n + j] - vv[i];
  return make_op<T>({m, n}, std::move(out), {a, v}, [m, n](TensorNode<T>& nd) {
    auto& pa = nd.parents[0];
    auto& pv = nd.parents[1];
    if (pa->requires_grad) {
      pa->ensure_grad();
      for (size_t i = 0; i < nd.grad.size(); ++i) pa->grad[i] += nd.grad[i];
    }
    if (pv->requires_grad) {
      pv->ensure_grad();
      for (int64_t i = 0; i < m; ++i) {
        T acc = 0;
        for (int64_t j = 0; j < n; ++j) acc += nd.grad[i * n + j];
        pv->grad[i] -= acc;
      }
    }
  });
}

template <typename T>
Tensor<T> trace(const Tensor<T>& a) {
  detail::check_matrix(a, "trace");
  int64_t m = a.dim(0);
  if (m != a.dim(1))
    throw std::invalid_argument("trace: matrix not square " + shape_str(a.shape()));
  T acc = 0;
  for (int64_t i = 0; i < m; ++i) acc += a.values()[i * m + i];
  return make_op<T>({1}, {acc}, {a}, [m](TensorNode<T>& nd) {
    auto& p = nd.parents[0];
    if (!p->requires_grad) return;
    p->ensure_grad();
    for (int64_t i = 0; i < m; ++i) p->grad[i * m + i] += nd.grad[0];
  });
}

template <typename T>
Tensor<T> add_scaled_identity(const Tensor<T>& a, T c) {
  detail::check_matrix(a, "add_scaled_identity");
  int64_t m = a.dim(0);
  if (m != a.dim(1))
    throw std::invalid_argument("add_scaled_identity: matrix not square " +
                                shape_str(a.shape()));
  std::vector<T> out(a.values());
  for (int64_t i = 0; i < m; ++i) out[i * m + i] += c;
  return make_op<T>(a.shape(), std::move(out), {a}, [](TensorNode<T>& nd) {
    auto& p = nd.parents[0];
    if (!p->requires_grad) return;
    p->ensure_grad();
    for (size_t i = 0; i < nd.grad.size(); ++i) p->grad[i] += nd.grad[i];
  });
}

template <typename T>
Tensor<T> identity_matrix(int64_t m) {
  std::vector<T> d(m * m, T(0));
  for (int64_t i = 0; i < m; ++i) d[i * m + i] = T(1);
  return Tensor<T>::from_data({m, m}, std::move(d));
}

// ---------------------------------------------------------------------------
// region gather / scatter, for local whitening
// ---------------------------------------------------------------------------

struct Box {
  int64_t row0 = 0, col0 = 0, rows = 0, cols = 0;
  int64_t pixels() const { return rows * cols; }
};

// Extracts sample n's box of x [N x C x H x W] as a [C x M] matrix (M = box
// pixels, row-major within the box).
template <typename T>
Tensor<T> region_gather(const Tensor<T>& x, int64_t n, const Box& box) {
  const Shape& s = x.shape();
  if (s.size() != 4)
    throw std::invalid_argument("region_gather: expected NCHW, got " + shape_str(s));
  int64_t C = s[1], H = s[2], W = s[3];
  int64_t M = box.pixels();
  std::vector<T> out(C * M);
  const auto& xv = x.values();
  const int64_t base = n * C * H * W;
  for (int64_t c = 0; c < C; ++c) {
    int64_t o = c * M;
    for (int64_t r = 0; r < box.rows; ++r) {
      const T* src = &xv[base + c * H * W + (box.row0 + r) * W + box.col0];
      for (int64_t q = 0; q < box.cols; ++q) out[o++] = src[q];
    }
  }
  return make_op<T>({C, M}, std::move(out), {x}, [n, box, C, H, W, M](TensorNode<T>& nd) {
    auto& p = nd.parents[0];
    if (!p->requires_grad) return;
    p->ensure_grad();
    const int64_t base = n * C * H * W;
    for (int64_t c = 0; c < C; ++c) {
      int64_t o = c * M;
      for (int64_t r = 0; r < box.rows; ++r) {
        T* dst = &p->grad[base + c * H * W + (box.row0 + r) * W + box.col0];
        for (int64_t q = 0; q < box.cols; ++q) dst[q] += nd.grad[o++];
      }
    }
  });
}

// Inverse of region_gather over a full tiling: writes each [C x M] part into
// its (sample, box) slot of an [N x C x H x W] output.
template <typename T>
Tensor<T> assemble_regions(const std::vector<Tensor<T>>& parts,
                           const std::vector<std::pair<int64_t, Box>>& slots,
                           int64_t N, int64_t C, int64_t H, int64_t W) {
  if (parts.size() != slots.size())
    throw std::invalid_argument("assemble_regions: parts/slots length mismatch");
  std::vector<T> out(N * C * H * W, T(0));
  for (size_t i = 0; i < parts.size(); ++i) {
    const auto& [n, box] = slots[i];
    int64_t M = box.pixels();
    if (parts[i].dim(0) != C || parts[i].dim(1) != M)
      throw std::invalid_argument("assemble_regions: part shape mismatch");
    const auto& pv = parts[i].values();
    const int64_t base = n * C * H * W;
    for (int64_t c = 0; c < C; ++c) {
      int64_t o = c * M;
      for (int64_t r = 0; r < box.rows; ++r) {
        T* dst = &out[base + c * H * W + (box.row0 + r) * W + box.col0];
        for (int64_t q = 0; q < box.cols; ++q) dst[q] = pv[o++];
      }
    }
  }
  return make_op<T>({N, C, H, W}, std::move(out), parts,
                    [slots, C, H, W](TensorNode<T>& nd) {
                      for (size_t i = 0; i < slots.size(); ++i) {
                        auto& p = nd.parents[i];
                        if (!p->requires_grad) continue;
                        p->ensure_grad();
                        const auto& [n, box] = slots[i];
                        int64_t M = box.pixels();
                        const int64_t base = n * C * H * W;
                        for (int64_t c = 0; c < C; ++c) {
                          int64_t o = c * M;
                          for (int64_t r = 0; r < box.rows; ++r) {
                            const T* src = &nd.grad[base + c * H * W +
                                                    (box.row0 + r) * W + box.col0];
                            for (int64_t q = 0; q < box.cols; ++q)
                              p->grad[o++] += src[q];
                          }
                        }
                      }
                    });
}

// ---------------------------------------------------------------------------
// conv2d
// ---------------------------------------------------------------------------

namespace detail {

template <typename T>
void im2col(const T* x, int64_t C, int64_t H, int64_t W, int64_t k,
            int64_t stride, int64_t pad, int64_t Ho, int64_t Wo, T* cols) {
  // cols is [C*k*k x Ho*Wo]
  const int64_t plane = Ho * Wo;
  for (int64_t c = 0; c < C; ++c) {
    for (int64_t ki = 0; ki < k; ++ki) {
      for (int64_t kj = 0; kj < k; ++kj) {
        T* dst = cols + ((c * k + ki) * k + kj) * plane;
        for (int64_t i = 0; i < Ho; ++i) {
          int64_t y = i * stride + ki - pad;
          if (y < 0 || y >= H) {
            for (int64_t j = 0; j < Wo; ++j) dst[i * Wo + j] = T(0);
            continue;
          }
          const T* src = x + c * H * W + y * W;
          for (int64_t j = 0; j < Wo; ++j) {
            int64_t xcol = j * stride + kj - pad;
            dst[i * Wo + j] = (xcol >= 0 && xcol < W) ? src[xcol] : T(0);
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const T* cols, int64_t C, int64_t H, int64_t W, int64_t k,
                int64_t stride, int64_t pad, int64_t Ho, int64_t Wo, T* x) {
  const int64_t plane = Ho * Wo;
  for (int64_t c = 0; c < C; ++c) {
    for (int64_t ki = 0; ki < k; ++ki) {
      for (int64_t kj = 0; kj < k; ++kj) {
        const T* src = cols + ((c * k + ki) * k + kj) * plane;
        for (int64_t i = 0; i < Ho; ++i) {
          int64_t y = i * stride + ki - pad;
          if (y < 0 || y >= H) continue;
          T* dst = x + c * H * W + y * W;
          for (int64_t j = 0; j < Wo; ++j) {
            int64_t xcol = j * stride + kj - pad;
            if (xcol >= 0 && xcol < W) dst[xcol] += src[i * Wo + j];
          }
        }
      }
    }
  }
}

}  // namespace detail

// x [N x Cin x H x W], w [Cout x Cin x k x k], b [Cout]; zero padding.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b,
                 int64_t stride, int64_t pad) {
  const Shape& xs = x.shape();
  const Shape& ws = w.shape();
  if (xs.size() != 4 || ws.size() != 4)
    throw std::invalid_argument("conv2d: expected NCHW input and OIKK kernel");
  int64_t N = xs[0], Cin = xs[1], H = xs[2], W = xs[3];
  int64_t Cout = ws[0], k = ws[2];
  if (ws[1] != Cin)
    throw std::invalid_argument("conv2d: input channels " + std::to_string(Cin) +
                                " do not match kernel channels " +
                                std::to_string(ws[1]));
  if (ws[3] != k) throw std::invalid_argument("conv2d: kernel must be square");
  if (b.numel() != Cout)
    throw std::invalid_argument("conv2d: bias length != output channels");
  if (k > H + 2 * pad || k > W + 2 * pad)
    throw std::invalid_argument("conv2d: kernel larger than padded input");
  int64_t Ho = (H + 2 * pad - k) / stride + 1;
  int64_t Wo = (W + 2 * pad - k) / stride + 1;
  const int64_t K = Cin * k * k, P = Ho * Wo;

  std::vector<T> out(N * Cout * P);
  std::vector<T> cols(K * P);
  const auto& xv = x.values();
  const auto& wv = w.values();
  const auto& bv = b.values();
  for (int64_t n = 0; n < N; ++n) {
    detail::im2col(&xv[n * Cin * H * W], Cin, H, W, k, stride, pad, Ho, Wo,
                   cols.data());
    T* y = &out[n * Cout * P];
    gemm(false, false, (int)Cout, (int)P, (int)K, T(1), wv.data(), (int)K,
         cols.data(), (int)P, T(0), y, (int)P);
    for (int64_t co = 0; co < Cout; ++co) {
      T bias = bv[co];
      for (int64_t p = 0; p < P; ++p) y[co * P + p] += bias;
    }
  }

  auto bw = [N, Cin, H, W, Cout, k, stride, pad, Ho, Wo, K, P](TensorNode<T>& nd) {
    auto& px = nd.parents[0];
    auto& pw = nd.parents[1];
    auto& pb = nd.parents[2];
    std::vector<T> cols(K * P);
    std::vector<T> dcols;
    if (px->requires_grad) {
      px->ensure_grad();
      dcols.resize(K * P);
    }
    if (pw->requires_grad) pw->ensure_grad();
    if (pb->requires_grad) pb->ensure_grad();
    for (int64_t n = 0; n < N; ++n) {
      const T* dy = &nd.grad[n * Cout * P];
      if (pb->requires_grad) {
        for (int64_t co = 0; co < Cout; ++co) {
          T acc = 0;
          for (int64_t p = 0; p < P; ++p) acc += dy[co * P + p];
          pb->grad[co] += acc;
        }
      }
      if (pw->requires_grad) {
        detail::im2col(&px->data[n * Cin * H * W], Cin, H, W, k, stride, pad, Ho,
                       Wo, cols.data());
        // dW += dY * cols^T
        gemm(false, true, (int)Cout, (int)K, (int)P, T(1), dy, (int)P,
             cols.data(), (int)P, T(1), pw->grad.data(), (int)K);
      }
      if (px->requires_grad) {
        // dcols = W^T * dY, then scatter back
        gemm(true, false, (int)K, (int)P, (int)Cout, T(1), pw->data.data(),
             (int)K, dy, (int)P, T(0), dcols.data(), (int)P);
        detail::col2im_add(dcols.data(), Cin, H, W, k, stride, pad, Ho, Wo,
                           &px->grad[n * Cin * H * W]);
      }
    }
  };
  return make_op<T>({N, Cout, Ho, Wo}, std::move(out), {x, w, b}, std::move(bw));
}

// ---------------------------------------------------------------------------
// bilinear resize (align-corners: corner pixels map to corners, so same-size
// resize is an exact identity)
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> bilinear_resize(const Tensor<T>& x, int64_t H2, int64_t W2) {
  const Shape& s = x.shape();
  if (s.size() != 4)
    throw std::invalid_argument("bilinear_resize: expected NCHW, got " + shape_str(s));
  if (H2 < 1 || W2 < 1)
    throw std::invalid_argument("bilinear_resize: target size must be >= 1");
  int64_t N = s[0], C = s[1], H = s[2], W = s[3];

  struct Tap {
    int64_t lo, hi;
    T w_hi;
  };
  auto make_taps = [](int64_t in, int64_t out) {
    std::vector<Tap> taps(out);
    for (int64_t i = 0; i < out; ++i) {
      if (out == 1 || in == 1) {
        taps[i] = {0, 0, T(0)};
        continue;
      }
      double pos = static_cast<double>(i) * static_cast<double>(in - 1) /
                   static_cast<double>(out - 1);
      int64_t lo = static_cast<int64_t>(pos);
      if (lo >= in - 1) lo = in - 2;
      taps[i] = {lo, lo + 1, static_cast<T>(pos - static_cast<double>(lo))};
    }
    return taps;
  };
  auto ytaps = make_taps(H, H2);
  auto xtaps = make_taps(W, W2);

  std::vector<T> out(N * C * H2 * W2);
  const auto& xv = x.values();
  for (int64_t nc = 0; nc < N * C; ++nc) {
    const T* src = &xv[nc * H * W];
    T* dst = &out[nc * H2 * W2];
    for (int64_t i = 0; i < H2; ++i) {
      const auto& ty = ytaps[i];
      for (int64_t j = 0; j < W2; ++j) {
        const auto& tx = xtaps[j];
        T v00 = src[ty.lo * W + tx.lo], v01 = src[ty.lo * W + tx.hi];
        T v10 = src[ty.hi * W + tx.lo], v11 = src[ty.hi * W + tx.hi];
        // two-multiply form keeps w in {0,1} exact, so same-size resize is
        // a bit-exact identity
        T wx1 = tx.w_hi, wx0 = T(1) - wx1;
        T wy1 = ty.w_hi, wy0 = T(1) - wy1;
        T top = wx0 * v00 + wx1 * v01;
        T bot = wx0 * v10 + wx1 * v11;
        dst[i * W2 + j] = wy0 * top + wy1 * bot;
      }
    }
  }
  auto bw = [N, C, H, W, H2, W2, ytaps, xtaps](TensorNode<T>& nd) {
    auto& p = nd.parents[0];
    if (!p->requires_grad) return;
    p->ensure_grad();
    for (int64_t nc = 0; nc < N * C; ++nc) {
      T* dx = &p->grad[nc * H * W];
      const T* dy = &nd.grad[nc * H2 * W2];
      for (int64_t i = 0; i < H2; ++i) {
        const auto& ty = ytaps[i];
        for (int64_t j = 0; j < W2; ++j) {
          const auto& tx = xtaps[j];
          T g = dy[i * W2 + j];
          T wy1 = ty.w_hi, wy0 = T(1) - wy1;
          T wx1 = tx.w_hi, wx0 = T(1) - wx1;
          dx[ty.lo * W + tx.lo] += g * wy0 * wx0;
          dx[ty.lo * W + tx.hi] += g * wy0 * wx1;
          dx[ty.hi * W + tx.lo] += g * wy1 * wx0;
          dx[ty.hi * W + tx.hi] += g * wy1 * wx1;
        }
      }
    }
  };
  return make_op<T>({N, C, H2, W2}, std::move(out), {x}, std::move(bw));
}

// ---------------------------------------------------------------------------
// channel concat
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> concat_channels(const std::vector<Tensor<T>>& xs) {
  if (xs.empty()) throw std::invalid_argument("concat_channels: empty input list");
  const Shape& s0 = xs[0].shape();
  if (s0.size() != 4)
    throw std::invalid_argument("concat_channels: expected NCHW, got " + shape_str(s0));
  int64_t N = s0[0], H = s0[2], W = s0[3];
  int64_t Ctotal = 0;
  for (const auto& x : xs) {
    const Shape& s = x.shape();
    if (s.size() != 4 || s[0] != N || s[2] != H || s[3] != W)
      throw std::invalid_argument("concat_channels: spatial/batch mismatch " +
                                  shape_str(s0) + " vs " + shape_str(s));
    Ctotal += s[1];
  }
  std::vector<T> out(N * Ctotal * H * W);
  const int64_t plane = H * W;
  int64_t coff = 0;
  std::vector<int64_t> offsets;
  for (const auto& x : xs) {
    offsets.push_back(coff);
    int64_t C = x.dim(1);
    const auto& xv = x.values();
    for (int64_t n = 0; n < N; ++n)
      std::copy(xv.begin() + n * C * plane, xv.begin() + (n + 1) * C * plane,
                out.begin() + (n * Ctotal + coff) * plane);
    coff += C;
  }
  auto bw = [N, Ctotal, plane, offsets](TensorNode<T>& nd) {
    for (size_t i = 0; i < nd.parents.size(); ++i) {
      auto& p = nd.parents[i];
      if (!p->requires_grad) continue;
      p->ensure_grad();
      int64_t C = p->shape[1];
      for (int64_t n = 0; n < N; ++n) {
        const T* src = &nd.grad[(n * Ctotal + offsets[i]) * plane];
        T* dst = &p->grad[n * C * plane];
        for (int64_t q = 0; q < C * plane; ++q) dst[q] += src[q];
      }
    }
  };
  return make_op<T>({N, Ctotal, H, W}, std::move(out), xs, std::move(bw));
}

// Slice a channel range back out; inverse of concat_channels.
template <typename T>
Tensor<T> slice_channels(const Tensor<T>& x, int64_t c0, int64_t count) {
  const Shape& s = x.shape();
  if (s.size() != 4)
    throw std::invalid_argument("slice_channels: expected NCHW");
  int64_t N = s[0], C = s[1], H = s[2], W = s[3];
  if (c0 < 0 || c0 + count > C)
    throw std::invalid_argument("slice_channels: range out of bounds");
  const int64_t plane = H * W;
  std::vector<T> out(N * count * plane);
  const auto& xv = x.values();
  for (int64_t n = 0; n < N; ++n)
    std::copy(xv.begin() + (n * C + c0) * plane,
              xv.begin() + (n * C + c0 + count) * plane,
              out.begin() + n * count * plane);
  auto bw = [N, C, c0, count, plane](TensorNode<T>& nd) {
    auto& p = nd.parents[0];
    if (!p->requires_grad) return;
    p->ensure_grad();
    for (int64_t n = 0; n < N; ++n) {
      const T* src = &nd.grad[n * count * plane];
      T* dst = &p->grad[(n * C + c0) * plane];
      for (int64_t q = 0; q < count * plane; ++q) dst[q] += src[q];
    }
  };
  return make_op<T>({N, count, H, W}, std::move(out), {x}, std::move(bw));
}

// ---------------------------------------------------------------------------
// 2x2 max pool (stride 2, floor semantics; first element in row-major scan
// wins ties)
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> maxpool2(const Tensor<T>& x) {
  const Shape& s = x.shape();
  if (s.size() != 4)
    throw std::invalid_argument("maxpool2: expected NCHW, got " + shape_str(s));
  int64_t N = s[0], C = s[1], H = s[2], W = s[3];
  int64_t Ho = H / 2, Wo = W / 2;
  std::vector<T> out(N * C * Ho * Wo);
  auto argmax = std::make_shared<std::vector<int64_t>>(out.size());
  const auto& xv = x.values();
  for (int64_t nc = 0; nc < N * C; ++nc) {
    const T* src = &xv[nc * H * W];
    T* dst = &out[nc * Ho * Wo];
    int64_t* am = &(*argmax)[nc * Ho * Wo];
    for (int64_t i = 0; i < Ho; ++i) {
      for (int64_t j = 0; j < Wo; ++j) {
        int64_t idx[4] = {(2 * i) * W + 2 * j, (2 * i) * W + 2 * j + 1,
                          (2 * i + 1) * W + 2 * j, (2 * i + 1) * W + 2 * j + 1};
        int64_t best = idx[0];
        T bv = src[idx[0]];
        for (int q = 1; q < 4; ++q)
          if (src[idx[q]] > bv) {
            bv = src[idx[q]];
            best = idx[q];
          }
        dst[i * Wo + j] = bv;
        am[i * Wo + j] = nc * H * W + best;
      }
    }
  }
  auto bw = [argmax](TensorNode<T>& nd) {
    auto& p = nd.parents[0];
    if (!p->requires_grad) return;
    p->ensure_grad();
    for (size_t i = 0; i < nd.grad.size(); ++i)
      p->grad[(*argmax)[i]] += nd.grad[i];
  };
  return make_op<T>({N, C, Ho, Wo}, std::move(out), {x}, std::move(bw));
}

// Values clamped to [lo, hi]; gradient passes through only where unclamped.
template <typename T>
Tensor<T> clamp(const Tensor<T>& x, T lo, T hi) {
  std::vector<T> out(x.values());
  for (auto& v : out) v = v < lo ? lo : (v > hi ? hi : v);
  return make_op<T>(x.shape(), std::move(out), {x}, [lo, hi](TensorNode<T>& nd) {
    auto& p = nd.parents[0];
    if (!p->requires_grad) return;
    p->ensure_grad();
    for (size_t i = 0; i < nd.grad.size(); ++i) {
      T v = p->data[i];
      if (v > lo && v < hi) p->grad[i] += nd.grad[i];
    }
  });
}

}  // namespace changedet
