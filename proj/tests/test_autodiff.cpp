#include <doctest.h>

#include <cmath>
#include <numeric>

#include "psaq/autodiff.hpp"
#include "support.hpp"

using namespace psaq;
using namespace psaq::testing;
using ad::Tensor;

TEST_CASE("matmul small cases") {
  Tensor eye({2, 2}, {1, 0, 0, 1});
  Tensor a({2, 2}, {1, 2, 3, 4});
  CHECK(ad::matmul(eye, a).vec() == a.vec());
  Tensor proj({2, 2}, {1, 0, 0, 0});
  Tensor b({2, 2}, {5, 6, 7, 8});
  CHECK(ad::matmul(proj, b).vec() == std::vector<double>{5, 6, 0, 0});
}

TEST_CASE("matmul matches a triple loop") {
  CounterRng rng(1);
  Tensor a = random_tensor({3, 4}, rng), b = random_tensor({4, 2}, rng);
  Tensor c = ad::matmul(a, b);
  REQUIRE(c.shape() == ad::Shape{3, 2});
  for (std::size_t i = 0; i < 3; ++i) {
    for (std::size_t j = 0; j < 2; ++j) {
      double acc = 0;
      for (std::size_t k = 0; k < 4; ++k) acc += a[i * 4 + k] * b[k * 2 + j];
      CHECK(std::abs(c[i * 2 + j] - acc) < 1e-12);
    }
  }
}

TEST_CASE("matmul broadcasts leading axes and rejects bad shapes") {
  CounterRng rng(2);
  Tensor a = random_tensor({2, 3, 4}, rng), w = random_tensor({4, 5}, rng);
  Tensor c = ad::matmul(a, w);
  CHECK(c.shape() == ad::Shape{2, 3, 5});
  Tensor second = ad::matmul(Tensor({3, 4}, std::vector<double>(a.vec().begin() + 12, a.vec().end())), w);
  for (std::size_t i = 0; i < 15; ++i) CHECK(c[15 + i] == second[i]);
  CHECK_THROWS_AS(ad::matmul(random_tensor({3, 4}, rng), random_tensor({3, 4}, rng)), DimensionError);
}

TEST_CASE("softmax examples") {
  Tensor s = ad::softmax(Tensor({2}, {0, 0}), 0);
  CHECK(s[0] == 0.5);
  CHECK(s[1] == 0.5);
  Tensor big = ad::softmax(Tensor({2}, {1000, 0}), 0);
  CHECK(std::isfinite(big[0]));
  CHECK(big[0] == doctest::Approx(1.0));
  CHECK(big[1] < 1e-300);
  Tensor t = ad::softmax(Tensor({3}, {1, 2, 3}), 0);
  const double z = std::exp(1.0) + std::exp(2.0) + std::exp(3.0);
  for (int i = 0; i < 3; ++i) CHECK(std::abs(t[i] - std::exp(i + 1.0) / z) < 1e-15);
}

TEST_CASE("softmax rows sum to one for large magnitudes") {
  CounterRng rng(3);
  for (int rep = 0; rep < 20; ++rep) {
    Tensor x = random_tensor({4, 7}, rng, -1000, 1000);
    Tensor s = ad::softmax(x, 1);
    for (std::size_t r = 0; r < 4; ++r) {
      double acc = 0;
      for (std::size_t c = 0; c < 7; ++c) acc += s[r * 7 + c];
      CHECK(std::abs(acc - 1.0) < 1e-12);
    }
  }
}

TEST_CASE("gelu examples") {
  Tensor y = ad::gelu(Tensor({3}, {0.0, 10.0, 1.0}));
  CHECK(y[0] == 0.0);
  CHECK(std::abs(y[1] - 10.0) < 1e-8);
  // 1 * Phi(1), Phi(1) = 0.5 * (1 + erf(1 / sqrt 2))
  CHECK(std::abs(y[2] - 0.8413447460685429) < 1e-12);
}

TEST_CASE("layer_norm examples") {
  Tensor ones({4}, 1.0), zeros({4}, 0.0);
  Tensor c = ad::layer_norm(Tensor({4}, 3.0), ones, zeros);
  for (double v : c.vec()) CHECK(v == 0.0);

  CounterRng rng(4);
  Tensor x = random_tensor({2, 6}, rng, -3, 3);
  Tensor beta = random_tensor({6}, rng);
  Tensor collapsed = ad::layer_norm(x, Tensor({6}, 0.0), beta);
  for (std::size_t i = 0; i < 12; ++i) CHECK(collapsed[i] == beta[i % 6]);

  Tensor v = random_tensor({8}, rng, -5, 5);
  Tensor n = ad::layer_norm(v, Tensor({8}, 1.0), Tensor({8}, 0.0));
  double mean = 0, var = 0, raw_var = 0, raw_mean = 0;
  for (double e : v.vec()) raw_mean += e / 8;
  for (double e : v.vec()) raw_var += (e - raw_mean) * (e - raw_mean) / 8;
  for (double e : n.vec()) mean += e / 8;
  for (double e : n.vec()) var += (e - mean) * (e - mean) / 8;
  CHECK(std::abs(mean) < 1e-12);
  CHECK(std::abs(var - raw_var / (raw_var + ad::kLayerNormEps)) < 1e-12);
}

TEST_CASE("backward basics") {
  ad::Tape tape;
  ad::Tape::Scope scope(tape);
  Tensor x = tape.leaf(Tensor({2, 3}, {1, 2, 3, 4, 5, 6}));
  auto g = tape.backward(ad::sum(x), {x});
  for (double v : g.at(x).vec()) CHECK(v == 1.0);

  Tensor y = tape.leaf(Tensor({2}, {3, -4}));
  Tensor half = ad::scale(ad::sum(ad::mul(y, y)), 0.5);
  auto gy = tape.backward(half, {y});
  CHECK(gy.at(y).vec() == std::vector<double>{3, -4});
  CHECK(gy.at(y).shape() == y.shape());
}

TEST_CASE("unreached leaf gets a zero gradient of its own shape") {
  ad::Tape tape;
  ad::Tape::Scope scope(tape);
  Tensor x = tape.leaf(Tensor({3}, 1.0));
  Tensor unused = tape.leaf(Tensor({2, 2}, 5.0));
  auto g = tape.backward(ad::sum(x), {x, unused});
  CHECK(g.at(unused).shape() == ad::Shape{2, 2});
  for (double v : g.at(unused).vec()) CHECK(v == 0.0);
}

TEST_CASE("replaying a tape gives bit-identical gradients") {
  CounterRng rng(5);
  ad::Tape tape;
  ad::Tape::Scope scope(tape);
  Tensor x = tape.leaf(random_tensor({3, 5}, rng));
  Tensor w = tape.leaf(random_tensor({5, 4}, rng));
  Tensor loss = ad::sum(ad::gelu(ad::softmax(ad::matmul(x, w), 1)));
  auto a = tape.backward(loss, {x, w});
  auto b = tape.backward(loss, {x, w});
  CHECK(a.at(x).vec() == b.at(x).vec());
  CHECK(a.at(w).vec() == b.at(w).vec());
}

TEST_CASE("pause stops recording") {
  ad::Tape tape;
  ad::Tape::Scope scope(tape);
  Tensor x = tape.leaf(Tensor({2}, 1.0));
  const auto before = tape.size();
  {
    ad::Tape::Pause pause;
    Tensor y = ad::scale(x, 2.0);
    CHECK_FALSE(y.tracked());
  }
  CHECK(tape.size() == before);
  CHECK(ad::scale(x, 2.0).tracked());
}

TEST_CASE("shape errors") {
  CHECK_THROWS_AS(ad::add(Tensor({2, 3}), Tensor({2})), DimensionError);
  CHECK_THROWS_AS(ad::reshape(Tensor({2, 3}), {4}), DimensionError);
  CHECK_THROWS_AS(ad::permute(Tensor({2, 3}), {0, 0}), DimensionError);
  CHECK_THROWS_AS(ad::softmax(Tensor({2, 3}), 2), DimensionError);
  CHECK_THROWS(Tensor({2, 2}, std::vector<double>{1, 2, 3}));
}

TEST_CASE("permute and reshape move values as expected") {
  Tensor x({2, 3}, {0, 1, 2, 3, 4, 5});
  Tensor t = ad::permute(x, {1, 0});
  CHECK(t.shape() == ad::Shape{3, 2});
  CHECK(t.vec() == std::vector<double>{0, 3, 1, 4, 2, 5});
  CHECK(ad::transpose_last(x).vec() == t.vec());
  CHECK(ad::reshape(x, {3, 2}).vec() == x.vec());
  Tensor m = ad::mean_axis(x, 0);
  CHECK(m.vec() == std::vector<double>{1.5, 2.5, 3.5});
}

TEST_CASE("cross entropy of uniform logits is log C") {
  std::vector<int> labels{0, 3};
  Tensor ce = ad::cross_entropy(Tensor({2, 4}, 0.0), labels);
  CHECK(std::abs(ce.item() - std::log(4.0)) < 1e-15);
}

TEST_CASE("primitive gradients match central differences") {
  CounterRng rng(6);
  struct Case {
    const char* name;
    std::vector<ad::Shape> shapes;
    ScalarFn fn;
    double lo = -1.5, hi = 1.5;
  };
  const std::vector<int> labels{1, 0, 2};
  const std::vector<Case> cases = {
      {"matmul", {{2, 3, 4}, {4, 2}}, [](const auto& v) { return project(ad::matmul(v[0], v[1]), 1); }},
      {"transpose", {{2, 3, 4}}, [](const auto& v) { return project(ad::transpose_last(v[0]), 2); }},
      {"permute", {{2, 3, 4}}, [](const auto& v) { return project(ad::permute(v[0], {2, 0, 1}), 3); }},
      {"reshape", {{2, 6}}, [](const auto& v) { return project(ad::reshape(v[0], {3, 4}), 4); }},
      {"add", {{2, 3}, {3}}, [](const auto& v) { return project(ad::add(v[0], v[1]), 5); }},
      {"sub", {{2, 3}, {2, 3}}, [](const auto& v) { return project(ad::sub(v[0], v[1]), 6); }},
      {"mul", {{2, 3}, {2, 3}}, [](const auto& v) { return project(ad::mul(v[0], v[1]), 7); }},
      {"scale", {{4}}, [](const auto& v) { return project(ad::scale(v[0], -2.5), 8); }},
      {"abs", {{5}}, [](const auto& v) { return project(ad::abs(v[0]), 9); }, 0.2, 1.5},
      {"sum", {{2, 2}}, [](const auto& v) { return ad::scale(ad::sum(ad::mul(v[0], v[0])), 1.0); }},
      {"mean", {{3, 2}}, [](const auto& v) { return ad::mean(ad::mul(v[0], v[0])); }},
      {"mean_axis", {{2, 3, 4}}, [](const auto& v) { return project(ad::mean_axis(v[0], 1), 10); }},
      {"softmax", {{3, 5}}, [](const auto& v) { return project(ad::softmax(v[0], 1), 11); }},
      {"log_softmax", {{3, 5}}, [](const auto& v) { return project(ad::log_softmax(v[0], 1), 12); }},
      {"gelu", {{6}}, [](const auto& v) { return project(ad::gelu(v[0]), 13); }},
      {"layer_norm", {{2, 5}, {5}, {5}}, [](const auto& v) { return project(ad::layer_norm(v[0], v[1], v[2]), 14); }},
      {"cross_entropy", {{3, 4}}, [&](const auto& v) { return ad::cross_entropy(v[0], labels); }},
  };
  for (const auto& c : cases) {
    SUBCASE(c.name) {
      for (int point = 0; point < 10; ++point) {
        std::vector<Tensor> inputs;
        for (std::size_t k = 0; k < c.shapes.size(); ++k) {
          Tensor t = random_tensor(c.shapes[k], rng, c.lo, c.hi);
          // abs needs points away from the kink; flip signs at random
          if (std::string(c.name) == "abs") {
            for (auto& e : t.data()) e = rng.uniform() < 0.5 ? -e : e;
          }
          inputs.push_back(t);
        }
        CHECK(gradient_error(c.fn, inputs) <= 1e-4);
      }
    }
  }
}
