#include <cmath>

#include "doctest.h"
#include "fedmepd/lacca.hpp"
#include "support.hpp"

using namespace fedmepd;
using fedmepd::testing::grad_close;
using fedmepd::testing::random_matrix;

namespace {

struct Case {
  Tensor f, a, w0, w1, w2;
};

Case random_case(std::size_t t, std::size_t k, std::size_t c, Rng& rng) {
  return {random_matrix(t, c, rng), random_matrix(k, c, rng), random_matrix(c, c, rng),
          random_matrix(c, c, rng), random_matrix(c, c, rng)};
}

/// softmax[(F W0)(A W1)ᵀ / √d] A W2 for one head, written with explicit loops
/// over the full matrices restricted to columns [off, off + d).
Tensor dense_attention(const Case& cs, std::size_t off, std::size_t d) {
  const std::size_t t = cs.f.rows(), k = cs.a.rows(), c = cs.f.cols();
  auto proj = [&](const Tensor& x, const Tensor& w, std::size_t r, std::size_t col) {
    double s = 0;
    for (std::size_t p = 0; p < c; ++p) s += x(r, p) * w(p, col);
    return s;
  };
  Tensor out = Tensor::matrix(t, d);
  for (std::size_t i = 0; i < t; ++i) {
    std::vector<double> logit(k);
    double mx = -1e300;
    for (std::size_t j = 0; j < k; ++j) {
      double s = 0;
      for (std::size_t x = 0; x < d; ++x) s += proj(cs.f, cs.w0, i, off + x) * proj(cs.a, cs.w1, j, off + x);
      logit[j] = s / std::sqrt(static_cast<double>(d));
      mx = std::max(mx, logit[j]);
    }
    double z = 0;
    for (double& l : logit) z += (l = std::exp(l - mx));
    for (std::size_t j = 0; j < k; ++j)
      for (std::size_t x = 0; x < d; ++x) out(i, x) += logit[j] / z * proj(cs.a, cs.w2, j, off + x);
  }
  return out;
}

double objective(const Case& cs, const Tensor& u, std::size_t heads) {
  const auto out = lacca::calibrate(cs.f, cs.a, {cs.w0, cs.w1, cs.w2}, heads).output;
  double s = 0;
  for (std::size_t i = 0; i < out.size(); ++i) s += u[i] * out[i];
  return s;
}

}  // namespace

TEST_CASE("single anchor: every row equals the anchor's value projection") {
  Rng rng(1);
  auto cs = random_case(6, 1, 4, rng);
  const auto fwd = lacca::calibrate(cs.f, cs.a, {cs.w0, cs.w1, cs.w2}, 2);
  const auto v = matmul(cs.a, cs.w2);
  for (std::size_t i = 0; i < 6; ++i)
    for (std::size_t c = 0; c < 4; ++c) CHECK(fwd.output(i, c) == doctest::Approx(v(0, c)).epsilon(1e-14));
}

TEST_CASE("attention rows are stochastic") {
  Rng rng(2);
  for (int trial = 0; trial < 30; ++trial) {
    auto cs = random_case(1 + rng.below(20), 1 + rng.below(16), 8, rng);
    for (double& v : cs.f.values()) v *= 50.0;  // push scores far apart
    const auto fwd = lacca::calibrate(cs.f, cs.a, {cs.w0, cs.w1, cs.w2}, std::size_t{1} << rng.below(4));
    for (const auto& attn : fwd.attention)
      for (std::size_t r = 0; r < attn.rows(); ++r) {
        double s = 0;
        for (double p : attn.row(r)) s += p;
        CHECK(std::abs(s - 1.0) <= 1e-12);
      }
  }
}

TEST_CASE("matches an independent dense computation") {
  Rng rng(3);
  for (std::size_t heads : {1, 2, 4}) {
    auto cs = random_case(7, 5, 8, rng);
    const auto fwd = lacca::calibrate(cs.f, cs.a, {cs.w0, cs.w1, cs.w2}, heads);
    const std::size_t d = 8 / heads;
    for (std::size_t h = 0; h < heads; ++h) {
      const auto want = dense_attention(cs, h * d, d);
      for (std::size_t i = 0; i < 7; ++i)
        for (std::size_t x = 0; x < d; ++x) CHECK(std::abs(fwd.output(i, h * d + x) - want(i, x)) <= 1e-10);
    }
  }
}

TEST_CASE("scores scale linearly with the key projection") {
  Rng rng(4);
  auto cs = random_case(5, 6, 4, rng);
  const auto base = lacca::calibrate(cs.f, cs.a, {cs.w0, cs.w1, cs.w2}, 2);
  Case scaled = cs;
  for (double& v : scaled.w1.values()) v *= 3.0;
  const auto fwd = lacca::calibrate(scaled.f, scaled.a, {scaled.w0, scaled.w1, scaled.w2}, 2);
  CHECK(fwd.output.shape() == base.output.shape());
  for (std::size_t h = 0; h < 2; ++h)
    for (std::size_t i = 0; i < base.scores[h].size(); ++i)
      CHECK(fwd.scores[h][i] == doctest::Approx(3.0 * base.scores[h][i]).epsilon(1e-12));
}

TEST_CASE("head count must divide the channel count") {
  Rng rng(5);
  auto cs = random_case(3, 2, 6, rng);
  CHECK_THROWS_AS(lacca::calibrate(cs.f, cs.a, {cs.w0, cs.w1, cs.w2}, 4), ParameterError);
  CHECK_THROWS_AS(lacca::calibrate(cs.f, cs.a, {cs.w0, cs.w1, cs.w2}, 0), ParameterError);
}

TEST_CASE("calibrate_backward matches finite differences") {
  Rng rng(6);
  for (std::size_t heads : {1, 2}) {
    auto cs = random_case(5, 4, 4, rng);
    const auto u = random_matrix(5, 4, rng);
    const auto fwd = lacca::calibrate(cs.f, cs.a, {cs.w0, cs.w1, cs.w2}, heads);
    const auto g = lacca::calibrate_backward(fwd, cs.f, cs.a, {cs.w0, cs.w1, cs.w2}, u);
    const double h = 1e-5;
    auto check = [&](Tensor Case::*member, const Tensor& grad) {
      Case work = cs;
      Tensor& p = work.*member;
      for (std::size_t i = 0; i < p.size(); ++i) {
        const double orig = p[i];
        p[i] = orig + h;
        const double up = objective(work, u, heads);
        p[i] = orig - h;
        const double down = objective(work, u, heads);
        p[i] = orig;
        CHECK(grad_close(grad[i], (up - down) / (2 * h)));
      }
    };
    check(&Case::f, g.features);
    check(&Case::a, g.anchors);
    check(&Case::w0, g.w0);
    check(&Case::w1, g.w1);
    check(&Case::w2, g.w2);
  }
}

TEST_CASE("calibrate_backward block structure") {
  Rng rng(7);
  auto cs = random_case(6, 3, 4, rng);
  const auto fwd = lacca::calibrate(cs.f, cs.a, {cs.w0, cs.w1, cs.w2}, 2);
  SUBCASE("zero upstream gives zero gradients") {
    const auto g = lacca::calibrate_backward(fwd, cs.f, cs.a, {cs.w0, cs.w1, cs.w2}, Tensor::matrix(6, 4));
    for (const Tensor* t : {&g.features, &g.anchors, &g.w0, &g.w1, &g.w2})
      for (double v : t->values()) CHECK(v == 0.0);
  }
  SUBCASE("a head with zero upstream gets zero projection gradients") {
    auto u = random_matrix(6, 4, rng);
    for (std::size_t i = 0; i < 6; ++i) u(i, 2) = u(i, 3) = 0.0;  // head 1
    const auto g = lacca::calibrate_backward(fwd, cs.f, cs.a, {cs.w0, cs.w1, cs.w2}, u);
    for (const Tensor* t : {&g.w0, &g.w1, &g.w2})
      for (std::size_t r = 0; r < 4; ++r) {
        CHECK((*t)(r, 2) == 0.0);
        CHECK((*t)(r, 3) == 0.0);
      }
  }
}
