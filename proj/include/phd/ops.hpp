#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <vector>

#include "phd/common.hpp"
#include "phd/gemm.hpp"
#include "phd/tensor.hpp"

namespace phd {

namespace detail {
template <class T>
inline bool want_grad(Tape<T>* tape, std::initializer_list<const Tensor<T>*> ins) {
  if (!tape) return false;
  for (const Tensor<T>* t : ins)
    if (t->requires_grad) return true;
  return false;
}
template <class T>
inline void mark_output(Tape<T>* tape, Tensor<T>& out) {
  out.set_requires_grad();
  out.tape = tape;
}
}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise / reduction ops
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> add(Tape<T>* tape, const Tensor<T>& a, const Tensor<T>& b) {
  require(a.shape == b.shape, "add: shape mismatch");
  Tensor<T> out = Tensor<T>::zeros(a.shape);
  const int64_t n = out.numel();
  for (int64_t i = 0; i < n; ++i) (*out.data)[i] = (*a.data)[i] + (*b.data)[i];
  if (detail::want_grad(tape, {&a, &b})) {
    detail::mark_output(tape, out);
    Tensor<T> pa = a, pb = b, po = out;
    tape->record([pa, pb, po]() mutable {
      const int64_t n2 = po.numel();
      if (pa.requires_grad)
        for (int64_t i = 0; i < n2; ++i) (*pa.grad)[i] += (*po.grad)[i];
      if (pb.requires_grad)
        for (int64_t i = 0; i < n2; ++i) (*pb.grad)[i] += (*po.grad)[i];
    });
  }
  return out;
}

template <class T>
Tensor<T> mul(Tape<T>* tape, const Tensor<T>& a, const Tensor<T>& b) {
  require(a.shape == b.shape, "mul: shape mismatch");
  Tensor<T> out = Tensor<T>::zeros(a.shape);
  const int64_t n = out.numel();
  for (int64_t i = 0; i < n; ++i) (*out.data)[i] = (*a.data)[i] * (*b.data)[i];
  if (detail::want_grad(tape, {&a, &b})) {
    detail::mark_output(tape, out);
    Tensor<T> pa = a, pb = b, po = out;
    tape->record([pa, pb, po]() mutable {
      const int64_t n2 = po.numel();
      if (pa.requires_grad)
        for (int64_t i = 0; i < n2; ++i) (*pa.grad)[i] += (*po.grad)[i] * (*pb.data)[i];
      if (pb.requires_grad)
        for (int64_t i = 0; i < n2; ++i) (*pb.grad)[i] += (*po.grad)[i] * (*pa.data)[i];
    });
  }
  return out;
}

template <class T>
Tensor<T> scale(Tape<T>* tape, const Tensor<T>& a, T factor) {
  Tensor<T> out = Tensor<T>::zeros(a.shape);
  const int64_t n = out.numel();
  for (int64_t i = 0; i < n; ++i) (*out.data)[i] = (*a.data)[i] * factor;
  if (detail::want_grad(tape, {&a})) {
    detail::mark_output(tape, out);
    Tensor<T> pa = a, po = out;
    tape->record([pa, po, factor]() mutable {
      const int64_t n2 = po.numel();
      for (int64_t i = 0; i < n2; ++i) (*pa.grad)[i] += (*po.grad)[i] * factor;
    });
  }
  return out;
}

template <class T>
Tensor<T> sum_all(Tape<T>* tape, const Tensor<T>& a) {
  Tensor<T> out = Tensor<T>::zeros({1});
  T acc = T(0);
  for (T x : *a.data) acc += x;
  (*out.data)[0] = acc;
  if (detail::want_grad(tape, {&a})) {
    detail::mark_output(tape, out);
    Tensor<T> pa = a, po = out;
    tape->record([pa, po]() mutable {
      const T g = (*po.grad)[0];
      const int64_t n2 = pa.numel();
      for (int64_t i = 0; i < n2; ++i) (*pa.grad)[i] += g;
    });
  }
  return out;
}

template <class T>
Tensor<T> silu(Tape<T>* tape, const Tensor<T>& a) {
  Tensor<T> out = Tensor<T>::zeros(a.shape);
  const int64_t n = out.numel();
  for (int64_t i = 0; i < n; ++i) {
    const T x = (*a.data)[i];
    (*out.data)[i] = x / (T(1) + std::exp(-x));
  }
  if (detail::want_grad(tape, {&a})) {
    detail::mark_output(tape, out);
    Tensor<T> pa = a, po = out;
    tape->record([pa, po]() mutable {
      const int64_t n2 = po.numel();
      for (int64_t i = 0; i < n2; ++i) {
        const T x = (*pa.data)[i];
        const T s = T(1) / (T(1) + std::exp(-x));
        (*pa.grad)[i] += (*po.grad)[i] * s * (T(1) + x * (T(1) - s));
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// matmul
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> matmul(Tape<T>* tape, const Tensor<T>& a, const Tensor<T>& b) {
  require(a.shape.size() == 2 && b.shape.size() == 2, "matmul: operands must be 2-d");
  require(a.shape[1] == b.shape[0], "matmul: inner extents do not match");
  const int64_t m = a.shape[0], k = a.shape[1], n = b.shape[1];
  Tensor<T> out = Tensor<T>::zeros({m, n});
  gemm_nn(out.ptr(), a.ptr(), b.ptr(), m, k, n);
  if (detail::want_grad(tape, {&a, &b})) {
    detail::mark_output(tape, out);
    Tensor<T> pa = a, pb = b, po = out;
    tape->record([pa, pb, po, m, k, n]() mutable {
      if (pa.requires_grad)  // dA += dC * B^T
        gemm_nt(pa.grad_ptr(), po.grad_ptr(), pb.ptr(), m, n, k, true);
      if (pb.requires_grad)  // dB += A^T * dC
        gemm_tn(pb.grad_ptr(), pa.ptr(), po.grad_ptr(), m, k, n, true);
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Masked row softmax
// ---------------------------------------------------------------------------

// Masked entries are excluded from the max/sum (the -inf surrogate) and come
// out exactly zero. A fully masked row is a malformed mask.
template <class T>
Tensor<T> softmax_rows(Tape<T>* tape, const Tensor<T>& x, const BoolMatrix& mask) {
  require(x.shape.size() == 2, "softmax_rows: input must be 2-d");
  require(mask.rows == x.shape[0] && mask.cols == x.shape[1],
          "softmax_rows: mask shape mismatch");
  const int64_t rows = x.shape[0], cols = x.shape[1];
  Tensor<T> out = Tensor<T>::zeros({rows, cols});
  for (int64_t r = 0; r < rows; ++r) {
    const T* xr = x.ptr() + r * cols;
    T* or_ = out.ptr() + r * cols;
    T mx = -std::numeric_limits<T>::infinity();
    for (int64_t c = 0; c < cols; ++c)
      if (mask.at(r, c)) mx = std::max(mx, xr[c]);
    require(std::isfinite(static_cast<double>(mx)), "softmax_rows: fully masked row");
    T denom = T(0);
    for (int64_t c = 0; c < cols; ++c) {
      if (mask.at(r, c)) {
        or_[c] = std::exp(xr[c] - mx);
        denom += or_[c];
      } else {
        or_[c] = T(0);
      }
    }
    for (int64_t c = 0; c < cols; ++c) or_[c] /= denom;
  }
  if (detail::want_grad(tape, {&x})) {
    detail::mark_output(tape, out);
    Tensor<T> px = x, po = out;
    auto pmask = std::make_shared<BoolMatrix>(mask);
    tape->record([px, po, pmask, rows, cols]() mutable {
      for (int64_t r = 0; r < rows; ++r) {
        const T* p = po.ptr() + r * cols;
        const T* dp = po.grad_ptr() + r * cols;
        T* dx = px.grad_ptr() + r * cols;
        T dot = T(0);
        for (int64_t c = 0; c < cols; ++c) dot += dp[c] * p[c];
        for (int64_t c = 0; c < cols; ++c)
          if (pmask->at(r, c)) dx[c] += p[c] * (dp[c] - dot);
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// RMS normalization: y = x / sqrt(mean(x^2) + eps) * gain, over the last axis.
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> rmsnorm(Tape<T>* tape, const Tensor<T>& x, const Tensor<T>& gain, T eps) {
  require(!x.shape.empty(), "rmsnorm: input must have at least one axis");
  const int64_t d = x.shape.back();
  require(d > 0 && gain.numel() == d, "rmsnorm: gain extent mismatch");
  require(eps >= T(0), "rmsnorm: eps must be nonnegative");
  const int64_t rows = x.numel() / d;
  Tensor<T> out = Tensor<T>::zeros(x.shape);
  auto inv_rms = std::make_shared<std::vector<T>>(static_cast<size_t>(rows));
  for (int64_t r = 0; r < rows; ++r) {
    const T* xr = x.ptr() + r * d;
    T ms = T(0);
    for (int64_t c = 0; c < d; ++c) ms += xr[c] * xr[c];
    const T inv = T(1) / std::sqrt(ms / T(d) + eps);
    (*inv_rms)[static_cast<size_t>(r)] = inv;
    T* yr = out.ptr() + r * d;
    for (int64_t c = 0; c < d; ++c) yr[c] = xr[c] * inv * (*gain.data)[static_cast<size_t>(c)];
  }
  if (detail::want_grad(tape, {&x, &gain})) {
    detail::mark_output(tape, out);
    Tensor<T> px = x, pg = gain, po = out;
    tape->record([px, pg, po, inv_rms, rows, d]() mutable {
      for (int64_t r = 0; r < rows; ++r) {
        const T* xr = px.ptr() + r * d;
        const T* dy = po.grad_ptr() + r * d;
        const T inv = (*inv_rms)[static_cast<size_t>(r)];
        if (px.requires_grad) {
          // dx = inv * g .* dy - x * inv^3/d * sum(dy .* g .* x)
          T dot = T(0);
          for (int64_t c = 0; c < d; ++c) dot += dy[c] * (*pg.data)[static_cast<size_t>(c)] * xr[c];
          const T k = inv * inv * inv * dot / T(d);
          T* dx = px.grad_ptr() + r * d;
          for (int64_t c = 0; c < d; ++c)
            dx[c] += inv * (*pg.data)[static_cast<size_t>(c)] * dy[c] - xr[c] * k;
        }
        if (pg.requires_grad) {
          T* dg = pg.grad_ptr();
          for (int64_t c = 0; c < d; ++c) dg[c] += dy[c] * xr[c] * inv;
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// SwiGLU feed-forward: down( silu(x w_gate) .* (x w_up) )
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> swiglu_ffn(Tape<T>* tape, const Tensor<T>& x, const Tensor<T>& w_gate,
                     const Tensor<T>& w_up, const Tensor<T>& w_down) {
  Tensor<T> g = matmul(tape, x, w_gate);
  Tensor<T> u = matmul(tape, x, w_up);
  Tensor<T> h = mul(tape, silu(tape, g), u);
  return matmul(tape, h, w_down);
}

// ---------------------------------------------------------------------------
// Cross entropy: mean over rows of -log softmax(logits)[target]
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> cross_entropy(Tape<T>* tape, const Tensor<T>& logits,
                        const std::vector<int64_t>& targets) {
  require(logits.shape.size() == 2, "cross_entropy: logits must be 2-d");
  const int64_t n = logits.shape[0], vocab = logits.shape[1];
  require(static_cast<int64_t>(targets.size()) == n, "cross_entropy: target count mismatch");
  for (int64_t t : targets)
    require(t >= 0 && t < vocab, "cross_entropy: target out of range");
  Tensor<T> out = Tensor<T>::zeros({1});
  auto probs = std::make_shared<std::vector<T>>(static_cast<size_t>(n * vocab));
  T loss = T(0);
  for (int64_t r = 0; r < n; ++r) {
    const T* zr = logits.ptr() + r * vocab;
    T* pr = probs->data() + r * vocab;
    T mx = zr[0];
    for (int64_t c = 1; c < vocab; ++c) mx = std::max(mx, zr[c]);
    T denom = T(0);
    for (int64_t c = 0; c < vocab; ++c) {
      pr[c] = std::exp(zr[c] - mx);
      denom += pr[c];
    }
    for (int64_t c = 0; c < vocab; ++c) pr[c] /= denom;
    loss -= std::log(pr[targets[static_cast<size_t>(r)]]);
  }
  (*out.data)[0] = loss / T(n);
  if (detail::want_grad(tape, {&logits})) {
    detail::mark_output(tape, out);
    Tensor<T> pl = logits, po = out;
    auto ptarg = std::make_shared<std::vector<int64_t>>(targets);
    tape->record([pl, po, probs, ptarg, n, vocab]() mutable {
      const T g = (*po.grad)[0] / T(n);
      for (int64_t r = 0; r < n; ++r) {
        const T* pr = probs->data() + r * vocab;
        T* dz = pl.grad_ptr() + r * vocab;
        const int64_t t = (*ptarg)[static_cast<size_t>(r)];
        for (int64_t c = 0; c < vocab; ++c) dz[c] += g * pr[c];
        dz[t] -= g;
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Lookup / layout ops
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> embedding_rows(Tape<T>* tape, const Tensor<T>& table,
                         const std::vector<int64_t>& ids) {
  require(table.shape.size() == 2, "embedding_rows: table must be 2-d");
  const int64_t vocab = table.shape[0], d = table.shape[1];
  const int64_t n = static_cast<int64_t>(ids.size());
  for (int64_t id : ids)
    require(id >= 0 && id < vocab, "embedding_rows: token id out of range");
  Tensor<T> out = Tensor<T>::zeros({n, d});
  for (int64_t r = 0; r < n; ++r)
    std::copy_n(table.ptr() + ids[static_cast<size_t>(r)] * d, d, out.ptr() + r * d);
  if (detail::want_grad(tape, {&table})) {
    detail::mark_output(tape, out);
    Tensor<T> pt = table, po = out;
    auto pids = std::make_shared<std::vector<int64_t>>(ids);
    tape->record([pt, po, pids, n, d]() mutable {
      for (int64_t r = 0; r < n; ++r) {
        const T* dy = po.grad_ptr() + r * d;
        T* dt = pt.grad_ptr() + (*pids)[static_cast<size_t>(r)] * d;
        for (int64_t c = 0; c < d; ++c) dt[c] += dy[c];
      }
    });
  }
  return out;
}

template <class T>
Tensor<T> row_gather(Tape<T>* tape, const Tensor<T>& x, const std::vector<int64_t>& rows) {
  require(x.shape.size() == 2, "row_gather: input must be 2-d");
  const int64_t cols = x.shape[1];
  for (int64_t r : rows)
    require(r >= 0 && r < x.shape[0], "row_gather: row index out of range");
  const int64_t n = static_cast<int64_t>(rows.size());
  Tensor<T> out = Tensor<T>::zeros({n, cols});
  for (int64_t r = 0; r < n; ++r)
    std::copy_n(x.ptr() + rows[static_cast<size_t>(r)] * cols, cols, out.ptr() + r * cols);
  if (detail::want_grad(tape, {&x})) {
    detail::mark_output(tape, out);
    Tensor<T> px = x, po = out;
    auto prows = std::make_shared<std::vector<int64_t>>(rows);
    tape->record([px, po, prows, n, cols]() mutable {
      for (int64_t r = 0; r < n; ++r) {
        const T* dy = po.grad_ptr() + r * cols;
        T* dx = px.grad_ptr() + (*prows)[static_cast<size_t>(r)] * cols;
        for (int64_t c = 0; c < cols; ++c) dx[c] += dy[c];
      }
    });
  }
  return out;
}

template <class T>
Tensor<T> col_slice(Tape<T>* tape, const Tensor<T>& x, int64_t c0, int64_t width) {
  require(x.shape.size() == 2, "col_slice: input must be 2-d");
  const int64_t rows = x.shape[0], cols = x.shape[1];
  require(c0 >= 0 && width > 0 && c0 + width <= cols, "col_slice: range out of bounds");
  Tensor<T> out = Tensor<T>::zeros({rows, width});
  for (int64_t r = 0; r < rows; ++r)
    std::copy_n(x.ptr() + r * cols + c0, width, out.ptr() + r * width);
  if (detail::want_grad(tape, {&x})) {
    detail::mark_output(tape, out);
    Tensor<T> px = x, po = out;
    tape->record([px, po, c0, width, rows, cols]() mutable {
      for (int64_t r = 0; r < rows; ++r) {
        const T* dy = po.grad_ptr() + r * width;
        T* dx = px.grad_ptr() + r * cols + c0;
        for (int64_t c = 0; c < width; ++c) dx[c] += dy[c];
      }
    });
  }
  return out;
}

template <class T>
Tensor<T> concat_cols(Tape<T>* tape, const std::vector<Tensor<T>>& parts) {
  require(!parts.empty(), "concat_cols: empty part list");
  const int64_t rows = parts[0].shape[0];
  int64_t total = 0;
  for (const auto& p : parts) {
    require(p.shape.size() == 2 && p.shape[0] == rows, "concat_cols: row extent mismatch");
    total += p.shape[1];
  }
  Tensor<T> out = Tensor<T>::zeros({rows, total});
  int64_t off = 0;
  for (const auto& p : parts) {
    const int64_t w = p.shape[1];
    for (int64_t r = 0; r < rows; ++r)
      std::copy_n(p.ptr() + r * w, w, out.ptr() + r * total + off);
    off += w;
  }
  bool any = false;
  for (const auto& p : parts) any = any || p.requires_grad;
  if (tape && any) {
    detail::mark_output(tape, out);
    auto pparts = std::make_shared<std::vector<Tensor<T>>>(parts);
    Tensor<T> po = out;
    tape->record([pparts, po, rows, total]() mutable {
      int64_t o = 0;
      for (auto& p : *pparts) {
        const int64_t w = p.shape[1];
        if (p.requires_grad) {
          for (int64_t r = 0; r < rows; ++r) {
            const T* dy = po.grad_ptr() + r * total + o;
            T* dx = p.grad_ptr() + r * w;
            for (int64_t c = 0; c < w; ++c) dx[c] += dy[c];
          }
        }
        o += w;
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Rotary position embedding. Rotates consecutive pairs within each head by
// angle pos * theta^(-2i/d_head); rows with equal position ids get equal
// rotations.
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> rope_apply(Tape<T>* tape, const Tensor<T>& x, const std::vector<T>& positions,
                     int64_t d_head, T theta) {
  require(x.shape.size() == 2, "rope_apply: input must be 2-d");
  require(d_head > 0 && d_head % 2 == 0, "rope_apply: d_head must be even");
  const int64_t rows = x.shape[0], cols = x.shape[1];
  require(cols % d_head == 0, "rope_apply: width must be a multiple of d_head");
  require(static_cast<int64_t>(positions.size()) == rows, "rope_apply: position count mismatch");
  const int64_t half = d_head / 2;
  std::vector<T> inv_freq(static_cast<size_t>(half));
  for (int64_t i = 0; i < half; ++i)
    inv_freq[static_cast<size_t>(i)] =
        std::pow(theta, -T(2 * i) / T(d_head));
  Tensor<T> out = Tensor<T>::zeros({rows, cols});
  for (int64_t r = 0; r < rows; ++r) {
    const T pos = positions[static_cast<size_t>(r)];
    for (int64_t h = 0; h < cols / d_head; ++h) {
      const T* s = x.ptr() + r * cols + h * d_head;
      T* o = out.ptr() + r * cols + h * d_head;
      for (int64_t i = 0; i < half; ++i) {
        const T ang = pos * inv_freq[static_cast<size_t>(i)];
        const T c = std::cos(ang), sn = std::sin(ang);
        const T x0 = s[2 * i], x1 = s[2 * i + 1];
        o[2 * i] = x0 * c - x1 * sn;
        o[2 * i + 1] = x0 * sn + x1 * c;
      }
    }
  }
  if (detail::want_grad(tape, {&x})) {
    detail::mark_output(tape, out);
    Tensor<T> px = x, po = out;
    auto ppos = std::make_shared<std::vector<T>>(positions);
    tape->record([px, po, ppos, d_head, theta, rows, cols]() mutable {
      // inverse rotation of the output gradient
      const int64_t half2 = d_head / 2;
      std::vector<T> inv_freq2(static_cast<size_t>(half2));
      for (int64_t i = 0; i < half2; ++i)
        inv_freq2[static_cast<size_t>(i)] = std::pow(theta, -T(2 * i) / T(d_head));
      for (int64_t r = 0; r < rows; ++r) {
        const T pos = (*ppos)[static_cast<size_t>(r)];
        for (int64_t h = 0; h < cols / d_head; ++h) {
          const T* dy = po.grad_ptr() + r * cols + h * d_head;
          T* dx = px.grad_ptr() + r * cols + h * d_head;
          for (int64_t i = 0; i < half2; ++i) {
            const T ang = -pos * inv_freq2[static_cast<size_t>(i)];
            const T c = std::cos(ang), sn = std::sin(ang);
            const T g0 = dy[2 * i], g1 = dy[2 * i + 1];
            dx[2 * i] += g0 * c - g1 * sn;
            dx[2 * i + 1] += g0 * sn + g1 * c;
          }
        }
      }
    });
  }
  return out;
}

}  // namespace phd
