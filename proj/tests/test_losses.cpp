#include <doctest.h>

#include <cmath>
#include <numbers>

#include "psaq/losses.hpp"
#include "support.hpp"

using namespace psaq;
using namespace psaq::testing;
using ad::Tensor;

namespace {

// Independent scalar-loop cosine between patches i and j of sample s.
double cosine(const Tensor& o, std::size_t s, std::size_t i, std::size_t j) {
  const std::size_t h = o.dim(1), n = o.dim(2), d = o.dim(3);
  double dot = 0, ni = 0, nj = 0;
  for (std::size_t a = 0; a < h; ++a)
    for (std::size_t c = 0; c < d; ++c) {
      const double u = o[((s * h + a) * n + i) * d + c], v = o[((s * h + a) * n + j) * d + c];
      dot += u * v;
      ni += u * u;
      nj += v * v;
    }
  return dot / (std::max(std::sqrt(ni), 1e-12) * std::max(std::sqrt(nj), 1e-12));
}

double gaussian_entropy(double sd) { return 0.5 * std::log(2 * std::numbers::pi * std::numbers::e * sd * sd); }

// Entropy by brute-force midpoint integration on a much finer grid.
double fine_entropy(const std::vector<double>& pts, double h) {
  const double lo = -1 - 8 * h, hi = 1 + 8 * h;
  const std::size_t q = 40000;
  const double dx = (hi - lo) / q;
  double e = 0;
  for (std::size_t k = 0; k < q; ++k) {
    const double x = lo + (static_cast<double>(k) + 0.5) * dx;
    double f = 0;
    for (double p : pts) f += std::exp(-0.5 * (x - p) * (x - p) / (h * h));
    f /= static_cast<double>(pts.size()) * h * std::sqrt(2 * std::numbers::pi);
    if (f > 0) e -= f * std::log(f) * dx;
  }
  return e;
}

}  // namespace

TEST_CASE("patch similarity examples") {
  // two heads of dim 2, three patches
  Tensor o({1, 2, 3, 2}, {1, 0, 1, 0, 0, 1, /* head 1 */ 0, 0, 0, 0, 0, 0});
  auto g = patch_similarity(o)[0];
  CHECK(g(0, 1) == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(g(0, 2) == 0.0);

  CounterRng rng(21);
  Tensor r = normal_tensor({2, 4, 3, 5}, rng);
  auto sims = patch_similarity(r);
  for (std::size_t s = 0; s < 2; ++s)
    for (std::size_t i = 0; i < 3; ++i)
      for (std::size_t j = 0; j < 3; ++j) CHECK(std::abs(sims[s](i, j) - cosine(r, s, i, j)) < 1e-12);
}

TEST_CASE("patch similarity invariants on random tensors") {
  CounterRng rng(22);
  for (int rep = 0; rep < 100; ++rep) {
    Tensor o = normal_tensor({1, 3, 6, 4}, rng, rng.uniform(0.1, 5.0));
    const auto g = patch_similarity(o)[0];
    const double c = rng.uniform(0.01, 100.0);
    const auto gs = patch_similarity(ad::scale(o, c))[0];
    for (std::size_t i = 0; i < 6; ++i) {
      CHECK(std::abs(g(i, i) - 1.0) < 1e-9);
      for (std::size_t j = 0; j < 6; ++j) {
        CHECK(g(i, j) == g(j, i));
        CHECK(g(i, j) >= -1 - 1e-12);
        CHECK(g(i, j) <= 1 + 1e-12);
        CHECK(std::abs(gs(i, j) - g(i, j)) < 1e-12);
      }
    }
  }
}

TEST_CASE("dimension reduction factor") {
  // DeiT-B: 12 heads of 64 dims over 196 patches
  CHECK(similarity_reduction_factor(12, 64, 196) == doctest::Approx(768.0 / 196.0));
  CHECK(std::abs(similarity_reduction_factor(12, 64, 196) - 3.92) <= 0.01);
}

TEST_CASE("silverman bandwidth") {
  std::vector<double> same(50, 0.3);
  CHECK(silverman_bandwidth(same) == kBandwidthFloor);
  CHECK(silverman_bandwidth(1.0, 1) == doctest::Approx(1.06));
  CounterRng rng(23);
  std::vector<double> pts(10000);
  for (auto& p : pts) p = rng.normal();
  double mean = 0, var = 0;
  for (double p : pts) mean += p / 1e4;
  for (double p : pts) var += (p - mean) * (p - mean) / (1e4 - 1);
  CHECK(silverman_bandwidth(pts) == doctest::Approx(1.06 * std::sqrt(var) * std::pow(10.0, -0.8)).epsilon(1e-12));
}

TEST_CASE("kernel density") {
  KernelDensity one({0.0}, 1.0);
  CHECK(one(0.0) == doctest::Approx(1 / std::sqrt(2 * std::numbers::pi)).epsilon(1e-15));
  KernelDensity sym({-0.3, 0.3}, 0.1);
  for (double x : {0.0, 0.1, 0.25, 0.7}) {
    CHECK(sym(x) >= 0);
    CHECK(sym(x) == doctest::Approx(sym(-x)).epsilon(1e-15));
  }
  CounterRng rng(24);
  std::vector<double> pts(37);
  for (auto& p : pts) p = rng.uniform(-1, 1);
  KernelDensity kd(pts, 0.07);
  for (int k = 0; k < 20; ++k) {
    const double x = rng.uniform(-1.2, 1.2);
    double f = 0;
    for (double p : pts) f += std::exp(-(x - p) * (x - p) / (2 * 0.07 * 0.07));
    f /= 37 * 0.07 * std::sqrt(2 * std::numbers::pi);
    CHECK(std::abs(kde_density(kd, x) - f) < 1e-14);
  }
}

TEST_CASE("density integrates to one") {
  CounterRng rng(25);
  for (int rep = 0; rep < 100; ++rep) {
    std::vector<double> pts(1 + rng.below(200));
    const double spread = rng.uniform(0.0, 1.0);
    for (auto& p : pts) p = std::clamp(rng.uniform(-1, 1) * spread, -1.0, 1.0);
    const double h = silverman_bandwidth(pts);
    CHECK(std::abs(kde_integral(pts, h) - 1.0) <= 1e-3);
  }
}

TEST_CASE("differential entropy references") {
  std::vector<double> same(256, 0.4);
  const double h = silverman_bandwidth(same);
  CHECK(h == 1e-3);
  CHECK(std::abs(differential_entropy(same, h) - gaussian_entropy(1e-3)) <= 1e-3);
  CHECK(gaussian_entropy(1e-3) == doctest::Approx(-5.49).epsilon(1e-3));

  CounterRng rng(26);
  for (std::size_t m : {400, 1000, 4000}) {
    std::vector<double> pts(m);
    for (auto& p : pts) p = 0.1 * rng.normal();
    CHECK(std::abs(differential_entropy(pts, silverman_bandwidth(pts)) - gaussian_entropy(0.1)) <= 0.1);
  }

  std::vector<double> pts(60);
  for (auto& p : pts) p = 0.2 * rng.uniform(-1, 1) + (rng.uniform() < 0.5 ? -0.4 : 0.4);
  const double hb = silverman_bandwidth(pts);
  CHECK(differential_entropy(pts, hb) == doctest::Approx(fine_entropy(pts, hb)).epsilon(1e-4));
}

TEST_CASE("two modes carry more entropy than one") {
  CounterRng rng(27);
  for (int rep = 0; rep < 50; ++rep) {
    const std::size_t m = 100 + rng.below(200);
    const double sd = rng.uniform(0.02, 0.1);
    std::vector<double> one(m), two(m);
    for (std::size_t i = 0; i < m; ++i) {
      const double z = sd * rng.normal();
      one[i] = z;
      two[i] = z + (i % 2 ? 0.5 : -0.5);
    }
    const double h = silverman_bandwidth(one);
    CHECK(differential_entropy(two, h) > differential_entropy(one, h));
    CHECK(differential_entropy(two, silverman_bandwidth(two)) > differential_entropy(one, h));
  }
}

TEST_CASE("entropy gradient matches finite differences at fixed bandwidth") {
  CounterRng rng(28);
  for (int rep = 0; rep < 10; ++rep) {
    std::vector<double> pts(40);
    for (auto& p : pts) p = std::tanh(rng.normal());
    const double h = silverman_bandwidth(pts);
    std::vector<double> g;
    differential_entropy(pts, h, &g);
    double diff = 0, norm = 0;
    for (std::size_t i = 0; i < pts.size(); ++i) {
      auto p = pts, m = pts;
      p[i] += 1e-5;
      m[i] -= 1e-5;
      const double num = (differential_entropy(p, h) - differential_entropy(m, h)) / 2e-5;
      diff += (num - g[i]) * (num - g[i]);
      norm += num * num;
    }
    CHECK(std::sqrt(diff / norm) <= 1e-4);
  }
}

TEST_CASE("pse_loss reductions") {
  CounterRng rng(29);
  Tensor o = normal_tensor({1, 4, 6, 8}, rng);
  const double single = differential_entropy(patch_similarity(o)[0]);
  CHECK(pse_loss({o}).item() == doctest::Approx(single).epsilon(1e-14));

  Tensor dup({2, 4, 6, 8});
  for (std::size_t i = 0; i < dup.numel(); ++i) dup[i] = o[i % o.numel()];
  CHECK(pse_loss({dup}).item() == doctest::Approx(single).epsilon(1e-14));

  ViTConfig cfg;
  auto params = ViTParams::init(cfg, 4);
  auto fwd = model_forward(normal_tensor({3, 3, 32, 32}, rng), params, cfg, true);
  double sum = 0;
  for (const auto& h : fwd.hooks) {
    double block = 0;
    for (const auto& g : patch_similarity(h)) block += differential_entropy(g) / 3;
    sum += block;
  }
  CHECK(pse_loss(fwd.hooks).item() == doctest::Approx(sum).epsilon(1e-12));
}

TEST_CASE("discrepancies") {
  Tensor a({1, 2}, {1, 2}), z({1, 2}, {0, 0});
  CHECK(discrepancy_mae(a, a).item() == 0.0);
  CHECK(discrepancy_mae(a, z).item() == 1.5);
  CHECK(kld_discrepancy(a, a).item() == doctest::Approx(0.0).scale(1.0).epsilon(1e-15));

  CounterRng rng(30);
  Tensor p = normal_tensor({4, 5}, rng, 2.0), q = normal_tensor({4, 5}, rng, 2.0), r = normal_tensor({4, 5}, rng, 2.0);
  double flat = 0;
  for (std::size_t i = 0; i < 20; ++i) flat += std::abs(q[i] - p[i]);
  CHECK(std::abs(discrepancy_mae(q, p).item() - flat / 20) < 1e-14);
  CHECK(discrepancy_mae(q, r).item() <= discrepancy_mae(q, p).item() + discrepancy_mae(p, r).item() + 1e-15);

  double kl = 0;
  for (std::size_t b = 0; b < 4; ++b) {
    double zp = 0, zq = 0;
    for (std::size_t c = 0; c < 5; ++c) {
      zp += std::exp(p[b * 5 + c]);
      zq += std::exp(q[b * 5 + c]);
    }
    for (std::size_t c = 0; c < 5; ++c) {
      const double pp = std::exp(p[b * 5 + c]) / zp, qq = std::exp(q[b * 5 + c]) / zq;
      kl += pp * std::log(pp / qq) / 4;
    }
  }
  CHECK(std::abs(kld_discrepancy(q, p, 1.0).item() - kl) < 1e-12);
  for (int rep = 0; rep < 50; ++rep) {
    Tensor x = normal_tensor({3, 4}, rng, 3.0), y = normal_tensor({3, 4}, rng, 3.0);
    CHECK(kld_discrepancy(x, y, rng.uniform(0.5, 4.0)).item() >= 0.0);
    CHECK(discrepancy_mae(x, y).item() >= 0.0);
  }
  CHECK_THROWS_AS(discrepancy_mae(Tensor({2, 3}), Tensor({2, 4})), DimensionError);
}

TEST_CASE("generator loss") {
  CHECK(generator_loss(Tensor::scalar(2.0), Tensor::scalar(0.5), 1.0).item() == -2.5);
  CHECK(generator_loss(Tensor::scalar(2.0), Tensor::scalar(0.5), 0.0).item() == -2.0);
  CHECK(kDefaultAlpha == 1.0);
}

TEST_CASE("composed losses match finite differences on image pixels") {
  ViTConfig cfg;
  cfg.image_size = 16;  // 4 patches keeps the sweep short
  CounterRng rng(31);
  auto teacher = ViTParams::init(cfg, 6);
  auto student = teacher;
  for (auto& [name, t] : student.named())
    for (auto& v : t->data()) v += 0.01 * rng.normal();
  for (int point = 0; point < 3; ++point) {
    Tensor img = normal_tensor({1, 3, 16, 16}, rng);
    const auto bw = pse_bandwidths(model_forward(img, teacher, cfg, true).hooks);
    auto l_pse = [&](const auto& v) { return pse_loss(model_forward(v[0], teacher, cfg, true).hooks, bw); };
    auto l_d = [&](const auto& v) {
      return discrepancy_mae(model_forward(v[0], student, cfg).logits, model_forward(v[0], teacher, cfg).logits);
    };
    auto l_g = [&](const auto& v) { return generator_loss(l_pse(v), l_d(v), 1.0); };
    CHECK(gradient_error(l_pse, {img}) <= 1e-4);
    CHECK(gradient_error(l_d, {img}) <= 1e-4);
    CHECK(gradient_error(l_g, {img}) <= 1e-4);
  }
}

TEST_CASE("density curve") {
  CounterRng rng(32);
  std::vector<double> pts(300);
  for (auto& p : pts) p = std::tanh(0.5 * rng.normal());
  auto c = density_curve(pts);
  CHECK(c.x.size() == 512);
  CHECK(c.x.front() == doctest::Approx(*std::min_element(pts.begin(), pts.end()) - 4 * c.h));
  CHECK(c.x.back() == doctest::Approx(*std::max_element(pts.begin(), pts.end()) + 4 * c.h));
  double integral = 0;
  for (std::size_t i = 1; i < c.x.size(); ++i) integral += 0.5 * (c.f[i] + c.f[i - 1]) * (c.x[i] - c.x[i - 1]);
  CHECK(integral >= 0.999);
  CHECK(integral <= 1.001);
}
