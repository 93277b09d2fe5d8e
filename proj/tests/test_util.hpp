#pragma once

// Shared test oracles. These stay independent of the library's compute paths:
// plain loops and direct formulas only.

#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "phd/tensor.hpp"

namespace phd::testing {

// Naive triple-loop matmul oracle.
inline std::vector<double> naive_matmul(const std::vector<double>& a,
                                        const std::vector<double>& b, int64_t m, int64_t k,
                                        int64_t n) {
  std::vector<double> c(static_cast<size_t>(m * n), 0.0);
  for (int64_t i = 0; i < m; ++i)
    for (int64_t j = 0; j < n; ++j)
      for (int64_t p = 0; p < k; ++p)
        c[static_cast<size_t>(i * n + j)] +=
            a[static_cast<size_t>(i * k + p)] * b[static_cast<size_t>(p * n + j)];
  return c;
}

// Direct masked softmax of one row.
inline std::vector<double> softmax_row_oracle(const std::vector<double>& row,
                                              const std::vector<bool>& keep) {
  double mx = -1e300;
  for (size_t i = 0; i < row.size(); ++i)
    if (keep[i]) mx = std::max(mx, row[i]);
  double denom = 0.0;
  std::vector<double> out(row.size(), 0.0);
  for (size_t i = 0; i < row.size(); ++i)
    if (keep[i]) denom += std::exp(row[i] - mx);
  for (size_t i = 0; i < row.size(); ++i)
    if (keep[i]) out[i] = std::exp(row[i] - mx) / denom;
  return out;
}

struct FdReport {
  double max_rel_err = 0.0;
  int64_t checked = 0;
};

// Central-difference gradient check. `build` must run the full forward pass
// from the current leaf values and return the scalar loss; when called with a
// tape it is also differentiated analytically. `denom_floor` guards the
// relative error against the fd noise floor (~1e-11 for an O(1) loss at
// h=1e-5): per-op checks keep the tight 1e-8 floor, whole-model checks use
// 1e-6 so near-zero gradients are compared absolutely instead.
inline FdReport fd_check(const std::function<Tensor<double>(Tape<double>*)>& build,
                         std::vector<Tensor<double>> leaves, double h = 1e-5,
                         double denom_floor = 1e-8) {
  Tape<double> tape;
  Tensor<double> loss = build(&tape);
  tape.backward(loss);
  FdReport rep;
  for (auto& leaf : leaves) {
    for (int64_t i = 0; i < leaf.numel(); ++i) {
      const double saved = (*leaf.data)[static_cast<size_t>(i)];
      (*leaf.data)[static_cast<size_t>(i)] = saved + h;
      const double lp = build(nullptr).scalar();
      (*leaf.data)[static_cast<size_t>(i)] = saved - h;
      const double lm = build(nullptr).scalar();
      (*leaf.data)[static_cast<size_t>(i)] = saved;
      const double fd = (lp - lm) / (2.0 * h);
      const double an = (*leaf.grad)[static_cast<size_t>(i)];
      const double rel = std::abs(an - fd) / (std::abs(fd) + denom_floor);
      rep.max_rel_err = std::max(rep.max_rel_err, rel);
      ++rep.checked;
    }
  }
  return rep;
}

inline Tensor<double> random_tensor(std::vector<int64_t> shape, std::mt19937_64& rng,
                                    bool requires_grad = false, double lo = -1.0,
                                    double hi = 1.0) {
  Tensor<double> t = Tensor<double>::zeros(std::move(shape), requires_grad);
  std::uniform_real_distribution<double> dist(lo, hi);
  for (double& x : *t.data) x = dist(rng);
  return t;
}

}  // namespace phd::testing
