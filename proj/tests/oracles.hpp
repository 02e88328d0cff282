// Independent reference implementations used by the tests. Deliberately naive:
// nothing here calls into the library's own counting or search routines.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <vector>

#include "triadpi/phantom.hpp"
#include "triadpi/random.hpp"
#include "triadpi/tensor.hpp"

namespace oracle {

using triadpi::Grid3;
using triadpi::Rng;
using triadpi::Tensor;

/// Argmax (first maximum wins) and count by explicit (z, y, x) loops, in mL.
template <typename T>
std::vector<double> argmax_volumes(const Tensor<T>& p, double voxel_mm3) {
  const Grid3 g = p.grid();
  std::vector<long> count(p.channels(), 0);
  for (int z = 0; z < g.d; ++z)
    for (int y = 0; y < g.h; ++y)
      for (int x = 0; x < g.w; ++x) {
        int best = 0;
        for (int c = 1; c < p.channels(); ++c)
          if (p.at(c, z, y, x) > p.at(best, z, y, x)) best = c;
        ++count[best];
      }
  std::vector<double> v;
  for (int c = 1; c < p.channels(); ++c) v.push_back(double(count[c]) * voxel_mm3 / 1000.0);
  return v;
}

inline std::vector<double> label_volumes(const std::vector<std::uint8_t>& labels, const Grid3& g, int n_classes,
                                         double voxel_mm3) {
  std::vector<long> count(n_classes, 0);
  for (int z = 0; z < g.d; ++z)
    for (int y = 0; y < g.h; ++y)
      for (int x = 0; x < g.w; ++x) ++count[labels[(std::size_t(z) * g.h + y) * g.w + x]];
  std::vector<double> v;
  for (int c = 1; c < n_classes; ++c) v.push_back(double(count[c]) * voxel_mm3 / 1000.0);
  return v;
}

/// Smallest q on the grid lo, lo + step, ... for which the closed intervals
/// [l - q, u + q] cover at least (n + 1)(1 - alpha) of the n truths (the
/// finite-sample corrected level). Coverage is counted directly, without scores.
struct Rec {
  double lower, upper, truth;
};

inline double grid_smallest_q(const std::vector<Rec>& recs, double alpha, double lo, double hi, double step) {
  const long n_steps = long(std::ceil((hi - lo) / step));
  for (long i = 0; i <= n_steps; ++i) {
    const double q = lo + double(i) * step;
    long hit = 0;
    for (const auto& r : recs) hit += (r.lower - q <= r.truth && r.truth <= r.upper + q);
    if (double(hit) >= (1.0 - alpha) * double(recs.size() + 1) - 1e-9) return q;
  }
  return INFINITY;
}

/// Max relative error of an analytic gradient against central differences.
/// Relative to max(|fd|, |analytic|, floor) so near-zero entries do not blow up.
inline double fd_max_rel_error(std::vector<double>& x, const std::vector<double>& analytic,
                               const std::function<double()>& f, double h = 1e-6, double floor = 1e-6) {
  double worst = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double keep = x[i];
    x[i] = keep + h;
    const double up = f();
    x[i] = keep - h;
    const double down = f();
    x[i] = keep;
    const double fd = (up - down) / (2 * h);
    const double scale = std::max({std::abs(fd), std::abs(analytic[i]), floor});
    worst = std::max(worst, std::abs(fd - analytic[i]) / scale);
  }
  return worst;
}

/// Random per-voxel distributions over n classes (Dirichlet(1) draws).
inline Tensor<double> random_probs(int n, Grid3 g, Rng& rng) {
  Tensor<double> p(n, g);
  const std::size_t nv = g.voxels();
  for (std::size_t v = 0; v < nv; ++v) {
    double s = 0;
    for (int c = 0; c < n; ++c) {
      double e = -std::log(1.0 - rng.uniform());
      p.data()[c * nv + v] = e;
      s += e;
    }
    for (int c = 0; c < n; ++c) p.data()[c * nv + v] /= s;
  }
  return p;
}

inline std::vector<std::uint8_t> random_labels(int n, std::size_t voxels, Rng& rng) {
  std::vector<std::uint8_t> l(voxels);
  for (auto& v : l) v = std::uint8_t(rng.uniform_int(0, n - 1));
  return l;
}

inline Tensor<double> one_hot(const std::vector<std::uint8_t>& labels, int n, Grid3 g) {
  Tensor<double> t(n, g);
  for (std::size_t v = 0; v < labels.size(); ++v) t.data()[labels[v] * g.voxels() + v] = 1.0;
  return t;
}

}  // namespace oracle
