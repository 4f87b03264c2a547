#pragma once

#include <span>
#include <vector>

#include "psaq/autodiff.hpp"
#include "psaq/vit.hpp"

namespace psaq {

/// N x N cosine similarities between the per-patch MSA output vectors of
/// one block for one sample.
struct PatchSimilarity {
  std::size_t n = 0;
  std::vector<double> gamma;  // row-major n*n

  double operator()(std::size_t i, std::size_t j) const { return gamma[i * n + j]; }
};

inline constexpr double kNormFloor = 1e-12;

// o_l [B, H, N, d] -> [B, N, N]. Row i compares the flattened H*d vector
// of patch i with every other patch. Recorded on the active tape.
ad::Tensor patch_similarity_tensor(const ad::Tensor& o_l);
std::vector<PatchSimilarity> patch_similarity(const ad::Tensor& o_l);

// Hd/N: how much smaller the similarity matrix is than the MSA output.
double similarity_reduction_factor(std::size_t heads, std::size_t head_dim, std::size_t patches);

inline constexpr double kBandwidthFloor = 1e-3;

// max(1.06 * sigma * M^(-1/5), kBandwidthFloor).
double silverman_bandwidth(double sigma, std::size_t m);
// Uses the sample standard deviation (M - 1 denominator; 0 when M == 1).
double silverman_bandwidth(std::span<const double> points);

/// Gaussian-kernel density estimate f_h(x) = 1/(Mh) sum_m K((x - x_m)/h).
struct KernelDensity {
  std::vector<double> points;
  double h = 1.0;

  KernelDensity(std::vector<double> pts, double bandwidth);
  // Bandwidth from Silverman's rule.
  explicit KernelDensity(std::vector<double> pts);

  double operator()(double x) const;  // exact sum over every kernel
};

double kde_density(const KernelDensity& kd, double x);

/// Uniform trapezoid grid over [-1 - 4h, 1 + 4h]. Uses at least
/// kEntropyGridPoints abscissae and more when needed to keep the spacing
/// at or below h/2.
struct EntropyGrid {
  double lo = 0.0;
  double hi = 0.0;
  std::size_t count = 0;

  double step() const { return (hi - lo) / static_cast<double>(count - 1); }
  double x(std::size_t q) const { return lo + static_cast<double>(q) * step(); }
  double weight(std::size_t q) const { return (q == 0 || q + 1 == count) ? 0.5 * step() : step(); }
};

inline constexpr std::size_t kEntropyGridPoints = 512;
inline constexpr double kDensityClamp = 1e-12;

EntropyGrid entropy_grid(double h, std::size_t min_points = kEntropyGridPoints);

// Density on `grid`, skipping kernel tails beyond 12 bandwidths.
std::vector<double> density_on_grid(std::span<const double> points, double h, const EntropyGrid& grid);

// Trapezoid integral of f_h over the entropy grid.
double kde_integral(std::span<const double> points, double h);

// -int f_h log f_h dx by the trapezoid rule on entropy_grid(h), with f_h
// clamped at kDensityClamp inside the log. When `grad` is given it receives
// dE/dx_m for every point (h held constant).
double differential_entropy(std::span<const double> points, double h, std::vector<double>* grad = nullptr);

// Entropy of all N^2 entries of gamma with the Silverman bandwidth.
double differential_entropy(const PatchSimilarity& gamma);

// gamma [B, N, N] -> per-sample entropies [B]; Silverman bandwidth is a
// stop-gradient constant. Recorded on the active tape. `bandwidths`, when
// given, replaces the per-sample Silverman values.
ad::Tensor entropy_tensor(const ad::Tensor& gamma, std::span<const double> bandwidths = {});

// sum over blocks of the batch-mean patch-similarity entropy.
// bandwidths[l][b] optionally pins the bandwidth of sample b in block l.
ad::Tensor pse_loss(const MsaHooks& hooks, std::span<const std::vector<double>> bandwidths = {});

// The Silverman bandwidths pse_loss would use, per block and sample.
std::vector<std::vector<double>> pse_bandwidths(const MsaHooks& hooks);

// (1/n) * ||o_q - o_p||_1 per sample, averaged over the batch.
ad::Tensor discrepancy_mae(const ad::Tensor& o_q, const ad::Tensor& o_p);

// KL(softmax(o_p / T) || softmax(o_q / T)) averaged over the batch.
ad::Tensor kld_discrepancy(const ad::Tensor& o_q, const ad::Tensor& o_p, double temperature = 1.0);

inline constexpr double kDefaultAlpha = 1.0;

// -l_pse - alpha * l_d; minimizing it maximizes both terms.
ad::Tensor generator_loss(const ad::Tensor& l_pse, const ad::Tensor& l_d, double alpha = kDefaultAlpha);

struct DensityCurve {
  double h = 0.0;
  std::vector<double> x;
  std::vector<double> f;
};

// Exact KDE of `points` sampled on `count` uniform abscissae spanning
// [min - 4h, max + 4h] of the points.
DensityCurve density_curve(std::span<const double> points, std::size_t count = kEntropyGridPoints);

}  // namespace psaq
