#include "psaq/losses.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace psaq {

using ad::Tensor;

namespace {

constexpr double kInvSqrt2Pi = 0.3989422804014327;  // 1/sqrt(2*pi)
constexpr double kKernelCutoff = 12.0;              // exp(-72) is below any resolvable density

}  // namespace

// ---- patch similarity ----------------------------------------------------

Tensor patch_similarity_tensor(const Tensor& o_l) {
  if (o_l.rank() != 4) throw DimensionError("patch_similarity: expected [B, H, N, d], got " + ad::shape_str(o_l.shape()));
  const std::size_t b = o_l.dim(0), h = o_l.dim(1), n = o_l.dim(2), d = o_l.dim(3);
  const std::size_t hd = h * d;
  // u[b][i] = concat over heads of o_l[b, head, i, :]
  std::vector<double> u(b * n * hd);
  for (std::size_t s = 0; s < b; ++s)
    for (std::size_t head = 0; head < h; ++head)
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t k = 0; k < d; ++k)
          u[(s * n + i) * hd + head * d + k] = o_l[((s * h + head) * n + i) * d + k];
  std::vector<double> norm(b * n);
  for (std::size_t r = 0; r < b * n; ++r) {
    double acc = 0.0;
    for (std::size_t k = 0; k < hd; ++k) acc += u[r * hd + k] * u[r * hd + k];
    norm[r] = std::max(std::sqrt(acc), kNormFloor);
  }
  Tensor out({b, n, n});
  for (std::size_t s = 0; s < b; ++s) {
    for (std::size_t i = 0; i < n; ++i) {
      const double* ui = u.data() + (s * n + i) * hd;
      for (std::size_t j = i; j < n; ++j) {
        const double* uj = u.data() + (s * n + j) * hd;
        double dot = 0.0;
        for (std::size_t k = 0; k < hd; ++k) dot += ui[k] * uj[k];
        const double c = dot / (norm[s * n + i] * norm[s * n + j]);
        out[(s * n + i) * n + j] = c;
        out[(s * n + j) * n + i] = c;
      }
    }
  }
  if (!ad::should_record({&o_l})) return out;
  const int on = o_l.node();
  std::vector<double> gam = out.vec();
  return ad::Tape::active()->record(
      std::move(out), [on, b, h, n, d, hd, u = std::move(u), norm = std::move(norm), gam = std::move(gam)](
                          std::span<const double> g, ad::GradientSink& sink) {
        auto go = sink.grad(on);
        std::vector<double> gu(hd);
        for (std::size_t s = 0; s < b; ++s) {
          for (std::size_t i = 0; i < n; ++i) {
            std::fill(gu.begin(), gu.end(), 0.0);
            const double ni = norm[s * n + i];
            const double* ui = u.data() + (s * n + i) * hd;
            for (std::size_t j = 0; j < n; ++j) {
              const double w = g[(s * n + i) * n + j] + g[(s * n + j) * n + i];
              if (w == 0.0) continue;
              const double nj = norm[s * n + j];
              const double c = gam[(s * n + i) * n + j];
              const double* uj = u.data() + (s * n + j) * hd;
              // d(cos_ij)/du_i = u_j/(n_i n_j) - cos_ij * u_i / n_i^2
              for (std::size_t k = 0; k < hd; ++k) gu[k] += w * (uj[k] / (ni * nj) - c * ui[k] / (ni * ni));
            }
            for (std::size_t head = 0; head < h; ++head)
              for (std::size_t k = 0; k < d; ++k) go[((s * h + head) * n + i) * d + k] += gu[head * d + k];
          }
        }
      });
}

std::vector<PatchSimilarity> patch_similarity(const Tensor& o_l) {
  Tensor g;
  {
    ad::Tape::Pause pause;
    g = patch_similarity_tensor(o_l);
  }
  const std::size_t b = g.dim(0), n = g.dim(1);
  std::vector<PatchSimilarity> out(b);
  for (std::size_t s = 0; s < b; ++s) {
    out[s].n = n;
    out[s].gamma.assign(g.vec().begin() + static_cast<std::ptrdiff_t>(s * n * n),
                        g.vec().begin() + static_cast<std::ptrdiff_t>((s + 1) * n * n));
  }
  return out;
}

double similarity_reduction_factor(std::size_t heads, std::size_t head_dim, std::size_t patches) {
  if (patches == 0) throw ContractError("similarity_reduction_factor: zero patches");
  return static_cast<double>(heads * head_dim) / static_cast<double>(patches);
}

// ---- kernel density ------------------------------------------------------

double silverman_bandwidth(double sigma, std::size_t m) {
  if (m == 0) throw ContractError("silverman_bandwidth: no points");
  return std::max(1.06 * sigma * std::pow(static_cast<double>(m), -0.2), kBandwidthFloor);
}

double silverman_bandwidth(std::span<const double> points) {
  const std::size_t m = points.size();
  if (m == 0) throw ContractError("silverman_bandwidth: no points");
  double mu = 0.0;
  for (double p : points) mu += p;
  mu /= static_cast<double>(m);
  double ss = 0.0;
  for (double p : points) ss += (p - mu) * (p - mu);
  const double sigma = m > 1 ? std::sqrt(ss / static_cast<double>(m - 1)) : 0.0;
  return silverman_bandwidth(sigma, m);
}

KernelDensity::KernelDensity(std::vector<double> pts, double bandwidth) : points(std::move(pts)), h(bandwidth) {
  if (points.empty()) throw ContractError("KernelDensity: no points");
  if (!(h > 0)) throw ContractError("KernelDensity: bandwidth must be positive");
}

KernelDensity::KernelDensity(std::vector<double> pts) : points(std::move(pts)) {
  h = silverman_bandwidth(points);
}

double KernelDensity::operator()(double x) const {
  double acc = 0.0;
  for (double p : points) {
    const double z = (x - p) / h;
    acc += std::exp(-0.5 * z * z);
  }
  return acc * kInvSqrt2Pi / (static_cast<double>(points.size()) * h);
}

double kde_density(const KernelDensity& kd, double x) { return kd(x); }

EntropyGrid entropy_grid(double h, std::size_t min_points) {
  if (!(h > 0)) throw ContractError("entropy_grid: bandwidth must be positive");
  EntropyGrid g;
  g.lo = -1.0 - 4.0 * h;
  g.hi = 1.0 + 4.0 * h;
  const double needed = std::ceil(2.0 * (g.hi - g.lo) / h) + 1.0;
  g.count = std::max<std::size_t>(std::max<std::size_t>(min_points, 2), static_cast<std::size_t>(needed));
  return g;
}

namespace {

// Index window [first, last] of grid points within the kernel cutoff of p.
std::pair<std::size_t, std::size_t> kernel_window(double p, double h, const EntropyGrid& grid) {
  const double dx = grid.step();
  const double a = std::ceil((p - kKernelCutoff * h - grid.lo) / dx);
  const double b = std::floor((p + kKernelCutoff * h - grid.lo) / dx);
  const double last = static_cast<double>(grid.count - 1);
  const double first = std::clamp(a, 0.0, last + 1.0);
  const double end = std::clamp(b, -1.0, last);
  if (end < first) return {1, 0};
  return {static_cast<std::size_t>(first), static_cast<std::size_t>(end)};
}

}  // namespace

std::vector<double> density_on_grid(std::span<const double> points, double h, const EntropyGrid& grid) {
  std::vector<double> f(grid.count, 0.0);
  const double norm = kInvSqrt2Pi / (static_cast<double>(points.size()) * h);
  for (double p : points) {
    auto [first, last] = kernel_window(p, h, grid);
    for (std::size_t q = first; q <= last && first <= last; ++q) {
      const double z = (grid.x(q) - p) / h;
      f[q] += std::exp(-0.5 * z * z);
    }
  }
  for (auto& v : f) v *= norm;
  return f;
}

double kde_integral(std::span<const double> points, double h) {
  const EntropyGrid grid = entropy_grid(h);
  const auto f = density_on_grid(points, h, grid);
  double acc = 0.0;
  for (std::size_t q = 0; q < grid.count; ++q) acc += grid.weight(q) * f[q];
  return acc;
}

double differential_entropy(std::span<const double> points, double h, std::vector<double>* grad) {
  if (points.empty()) throw ContractError("differential_entropy: no points");
  const EntropyGrid grid = entropy_grid(h);
  const auto f = density_on_grid(points, h, grid);
  double e = 0.0;
  std::vector<double> de_df(grid.count);
  for (std::size_t q = 0; q < grid.count; ++q) {
    const double w = grid.weight(q);
    if (f[q] >= kDensityClamp) {
      const double lf = std::log(f[q]);
      e -= w * f[q] * lf;
      de_df[q] = -w * (lf + 1.0);
    } else {
      e -= w * f[q] * std::log(kDensityClamp);
      de_df[q] = -w * std::log(kDensityClamp);
    }
  }
  if (grad) {
    grad->assign(points.size(), 0.0);
    const double norm = kInvSqrt2Pi / (static_cast<double>(points.size()) * h);
    for (std::size_t m = 0; m < points.size(); ++m) {
      auto [first, last] = kernel_window(points[m], h, grid);
      double acc = 0.0;
      for (std::size_t q = first; q <= last && first <= last; ++q) {
        const double z = (grid.x(q) - points[m]) / h;
        // d/dx_m K((x_q - x_m)/h) = K(z) * z / h
        acc += de_df[q] * std::exp(-0.5 * z * z) * z;
      }
      (*grad)[m] = acc * norm / h;
    }
  }
  return e;
}

double differential_entropy(const PatchSimilarity& gamma) {
  return differential_entropy(gamma.gamma, silverman_bandwidth(gamma.gamma));
}

Tensor entropy_tensor(const Tensor& gamma, std::span<const double> bandwidths) {
  if (gamma.rank() != 3 || gamma.dim(1) != gamma.dim(2)) {
    throw DimensionError("entropy: expected [B, N, N], got " + ad::shape_str(gamma.shape()));
  }
  const std::size_t b = gamma.dim(0), m = gamma.dim(1) * gamma.dim(2);
  if (!bandwidths.empty() && bandwidths.size() != b) throw DimensionError("entropy: one bandwidth per sample expected");
  Tensor out({b});
  const bool record = ad::should_record({&gamma});
  std::vector<double> grads(record ? b * m : 0);
  std::vector<double> g;
  for (std::size_t s = 0; s < b; ++s) {
    std::span<const double> pts = gamma.data().subspan(s * m, m);
    const double h = bandwidths.empty() ? silverman_bandwidth(pts) : bandwidths[s];
    out[s] = differential_entropy(pts, h, record ? &g : nullptr);
    if (record) std::copy(g.begin(), g.end(), grads.begin() + static_cast<std::ptrdiff_t>(s * m));
  }
  if (!record) return out;
  const int gn = gamma.node();
  return ad::Tape::active()->record(std::move(out), [gn, m, grads = std::move(grads)](std::span<const double> go,
                                                                                        ad::GradientSink& sink) {
    auto gg = sink.grad(gn);
    for (std::size_t i = 0; i < gg.size(); ++i) gg[i] += go[i / m] * grads[i];
  });
}

Tensor pse_loss(const MsaHooks& hooks, std::span<const std::vector<double>> bandwidths) {
  if (hooks.empty()) throw ContractError("pse_loss: no MSA hooks captured");
  if (!bandwidths.empty() && bandwidths.size() != hooks.size()) throw DimensionError("pse_loss: bandwidths per block");
  Tensor total;
  for (std::size_t l = 0; l < hooks.size(); ++l) {
    Tensor e = ad::mean(entropy_tensor(patch_similarity_tensor(hooks[l]),
                                       bandwidths.empty() ? std::span<const double>{} : bandwidths[l]));
    total = l == 0 ? e : ad::add(total, e);
  }
  return total;
}

std::vector<std::vector<double>> pse_bandwidths(const MsaHooks& hooks) {
  std::vector<std::vector<double>> out;
  for (const auto& o : hooks) {
    std::vector<double> hs;
    for (const auto& g : patch_similarity(o)) hs.push_back(silverman_bandwidth(g.gamma));
    out.push_back(std::move(hs));
  }
  return out;
}

// ---- discrepancies -------------------------------------------------------

Tensor discrepancy_mae(const Tensor& o_q, const Tensor& o_p) {
  if (o_q.shape() != o_p.shape() || o_q.rank() != 2) {
    throw DimensionError("discrepancy_mae: expected equal [B, n] logits, got " + ad::shape_str(o_q.shape()) + " vs " +
                         ad::shape_str(o_p.shape()));
  }
  // (1/B) sum_b (1/n) sum_i |.| is the mean over all B*n entries.
  return ad::mean(ad::abs(ad::sub(o_q, o_p)));
}

Tensor kld_discrepancy(const Tensor& o_q, const Tensor& o_p, double temperature) {
  if (o_q.shape() != o_p.shape() || o_q.rank() != 2) throw DimensionError("kld_discrepancy: expected equal [B, n] logits");
  if (!(temperature > 0)) throw ContractError("kld_discrepancy: temperature must be positive");
  const double inv_t = 1.0 / temperature;
  Tensor lp = ad::log_softmax(ad::scale(o_p, inv_t), 1);
  Tensor lq = ad::log_softmax(ad::scale(o_q, inv_t), 1);
  Tensor p = ad::softmax(ad::scale(o_p, inv_t), 1);
  return ad::scale(ad::sum(ad::mul(p, ad::sub(lp, lq))), 1.0 / static_cast<double>(o_q.dim(0)));
}

Tensor generator_loss(const Tensor& l_pse, const Tensor& l_d, double alpha) {
  return ad::sub(ad::scale(l_pse, -1.0), ad::scale(l_d, alpha));
}

DensityCurve density_curve(std::span<const double> points, std::size_t count) {
  if (points.empty()) throw ContractError("density_curve: no points");
  if (count < 2) throw ContractError("density_curve: need at least two abscissae");
  DensityCurve c;
  c.h = silverman_bandwidth(points);
  KernelDensity kd(std::vector<double>(points.begin(), points.end()), c.h);
  const auto [mn, mx] = std::minmax_element(points.begin(), points.end());
  const double lo = *mn - 4.0 * c.h, hi = *mx + 4.0 * c.h;
  for (std::size_t q = 0; q < count; ++q) {
    const double x = lo + (hi - lo) * static_cast<double>(q) / static_cast<double>(count - 1);
    c.x.push_back(x);
    c.f.push_back(kd(x));
  }
  return c;
}

}  // namespace psaq
