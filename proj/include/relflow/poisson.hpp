#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <numeric>
#include <vector>

#include "relflow/core/error.hpp"
#include "relflow/core/grid.hpp"

namespace relflow {

struct PoissonResult {
  Field depth;                  // H x W x 1; zero on masked pixels
  std::vector<bool> valid;      // per pixel, row-major
  double coverage = 0.0;        // fraction of valid pixels
};

/// Depth gradients implied by a camera-space normal (x right, y down, z toward the viewer):
/// d(depth)/d(col) = n_x / n_z and d(depth)/d(row) = n_y / n_z, times `scale` (depth units per pixel).
inline void normal_to_gradient(double nx, double ny, double nz, double scale, double& gx, double& gy) {
  gx = scale * nx / nz;
  gy = scale * ny / nz;
}

namespace detail {

struct PoissonSystem {
  int n = 0;
  std::vector<int> index;  // pixel -> unknown, -1 if masked
  std::vector<int> component;
  std::vector<int> component_size;
  struct Edge {
    int a, b;
    double g;
  };
  std::vector<Edge> edges;
};

inline int find_root(std::vector<int>& parent, int x) {
  while (parent[x] != x) x = parent[x] = parent[parent[x]];
  return x;
}

inline PoissonSystem build_poisson_system(const ImageF& normals, double scale, double min_nz,
                                          std::vector<bool>& valid) {
  const int h = normals.height, w = normals.width;
  PoissonSystem sys;
  sys.index.assign(static_cast<std::size_t>(h) * w, -1);
  valid.assign(sys.index.size(), false);
  std::vector<double> gx(sys.index.size()), gy(sys.index.size());
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c) {
      const std::size_t p = static_cast<std::size_t>(r) * w + c;
      const double nz = normals(r, c, 2);
      if (!(nz > min_nz) || !std::isfinite(normals(r, c, 0)) || !std::isfinite(normals(r, c, 1))) continue;
      valid[p] = true;
      sys.index[p] = sys.n++;
      normal_to_gradient(normals(r, c, 0), normals(r, c, 1), nz, scale, gx[p], gy[p]);
    }
  std::vector<int> parent(sys.n);
  std::iota(parent.begin(), parent.end(), 0);
  auto link = [&](std::size_t p, std::size_t q, double g) {
    if (!valid[p] || !valid[q]) return;
    sys.edges.push_back({sys.index[p], sys.index[q], g});
    parent[find_root(parent, sys.index[p])] = find_root(parent, sys.index[q]);
  };
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c) {
      const std::size_t p = static_cast<std::size_t>(r) * w + c;
      if (c + 1 < w) link(p, p + 1, 0.5 * (gx[p] + gx[p + 1]));
      if (r + 1 < h) link(p, p + w, 0.5 * (gy[p] + gy[p + w]));
    }
  sys.component.resize(sys.n);
  std::vector<int> root_id(sys.n, -1);
  for (int i = 0; i < sys.n; ++i) {
    const int root = find_root(parent, i);
    if (root_id[root] < 0) {
      root_id[root] = static_cast<int>(sys.component_size.size());
      sys.component_size.push_back(0);
    }
    sys.component[i] = root_id[root];
    ++sys.component_size[root_id[root]];
  }
  return sys;
}

/// (Laplacian + per-component mean penalty) * x.
inline Eigen::VectorXd apply_poisson(const PoissonSystem& sys, const Eigen::VectorXd& x) {
  Eigen::VectorXd y = Eigen::VectorXd::Zero(sys.n);
  for (const auto& e : sys.edges) {
    const double d = x[e.b] - x[e.a];
    y[e.b] += d;
    y[e.a] -= d;
  }
  std::vector<double> sums(sys.component_size.size(), 0.0);
  for (int i = 0; i < sys.n; ++i) sums[sys.component[i]] += x[i];
  for (int i = 0; i < sys.n; ++i) y[i] += sums[sys.component[i]] / sys.component_size[sys.component[i]];
  return y;
}

}  // namespace detail

/// Least-squares integration of the gradient field implied by `normals`: minimizes the squared
/// mismatch between neighbour depth differences and the averaged gradients along each edge
/// (Neumann boundary). Pixels with n_z <= min_nz are masked out. Each connected region of the
/// result has zero mean. Dense solve up to 4096 pixels, conjugate gradient above.
inline PoissonResult poisson_integrate(const ImageF& normals, double scale = 1.0, double min_nz = 1e-3) {
  if (normals.channels != 3) throw ShapeError("poisson_integrate: expected 3-channel normals");
  PoissonResult out;
  const auto sys = detail::build_poisson_system(normals, scale, min_nz, out.valid);
  out.depth = Field(normals.height, normals.width, 1);
  out.coverage = normals.pixels() ? static_cast<double>(sys.n) / normals.pixels() : 0.0;
  if (sys.n == 0) return out;

  Eigen::VectorXd rhs = Eigen::VectorXd::Zero(sys.n);
  for (const auto& e : sys.edges) {
    rhs[e.b] += e.g;
    rhs[e.a] -= e.g;
  }

  Eigen::VectorXd x;
  if (sys.n <= 4096) {
    Eigen::MatrixXd a = Eigen::MatrixXd::Zero(sys.n, sys.n);
    for (const auto& e : sys.edges) {
      a(e.a, e.a) += 1.0;
      a(e.b, e.b) += 1.0;
      a(e.a, e.b) -= 1.0;
      a(e.b, e.a) -= 1.0;
    }
    for (int i = 0; i < sys.n; ++i)
      for (int j = 0; j < sys.n; ++j)
        if (sys.component[i] == sys.component[j]) a(i, j) += 1.0 / sys.component_size[sys.component[i]];
    x = a.llt().solve(rhs);
  } else {
    x = Eigen::VectorXd::Zero(sys.n);
    Eigen::VectorXd r = rhs - detail::apply_poisson(sys, x), p = r;
    double rr = r.squaredNorm();
    const double tol = 1e-10 * std::max(1.0, rhs.norm());
    for (int it = 0; it < 20 * sys.n && std::sqrt(rr) > tol; ++it) {
      const Eigen::VectorXd ap = detail::apply_poisson(sys, p);
      const double alpha = rr / p.dot(ap);
      x += alpha * p;
      r -= alpha * ap;
      const double rr_new = r.squaredNorm();
      p = r + (rr_new / rr) * p;
      rr = rr_new;
    }
  }
  for (std::size_t p = 0; p < out.valid.size(); ++p)
    if (out.valid[p]) out.depth.data[p] = x[sys.index[p]];
  return out;
}

}  // namespace relflow
