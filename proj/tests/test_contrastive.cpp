#include "doctest_torch.hpp"

#include <cmath>

#include "mtuda/contrastive.hpp"
#include "oracles.hpp"

using namespace mtuda;

namespace {

torch::Tensor unit_rows(std::int64_t n, std::int64_t d, std::uint64_t seed) {
  torch::manual_seed(seed);
  return torch::nn::functional::normalize(torch::randn({n, d}, torch::kFloat64),
                                          torch::nn::functional::NormalizeFuncOptions().dim(1));
}

torch::Tensor e(std::int64_t i, std::int64_t d) {
  auto v = torch::zeros({1, d}, torch::kFloat64);
  v[0][i] = 1.0;
  return v;
}

}  // namespace

TEST_SUITE("contrastive") {
  TEST_CASE("queue is a FIFO of exact copies") {
    NegativeQueue q(2, 3, torch::kFloat64);
    const auto v = unit_rows(3, 3, 1);
    q.push(v);
    CHECK(q.size() == 2);
    CHECK(torch::equal(q.entries(), v.narrow(0, 1, 2)));
    q.push(torch::empty({0, 3}, torch::kFloat64));
    CHECK(torch::equal(q.entries(), v.narrow(0, 1, 2)));
    NegativeQueue big(5, 3, torch::kFloat64);
    big.push(v);
    CHECK(torch::equal(big.entries(), v));
    CHECK_THROWS_AS(big.push(torch::ones({1, 3}, torch::kFloat64)), Error);
    // entries are a copy
    auto copy = big.entries();
    copy.zero_();
    CHECK(torch::equal(big.entries(), v));
  }

  TEST_CASE("queue never carries gradient") {
    NegativeQueue q(4, 3, torch::kFloat64);
    auto keys = unit_rows(2, 3, 2).requires_grad_(true);
    q.push(keys);
    CHECK_FALSE(q.entries().requires_grad());
    auto anchor = unit_rows(1, 3, 3).requires_grad_(true);
    global_contrastive_loss(anchor, anchor, torch::Tensor(), q, 0.5).backward();
    CHECK_FALSE(keys.grad().defined());
  }

  TEST_CASE("global loss closed form over an orthogonal queue") {
    for (int m : {1, 4, 16}) {
      NegativeQueue q(32, 17, torch::kFloat64);
      for (int i = 1; i <= m; ++i) q.push(e(i, 17));
      const auto a = e(0, 17);
      const double got = global_contrastive_loss(a, a, torch::Tensor(), q, 1.0).item<double>();
      const double closed = -std::log(std::exp(1.0) / (std::exp(1.0) + m));
      CHECK(std::abs(got - closed) <= 1e-9);
      CHECK(std::abs(got - oracle::nce(1.0, std::vector<double>(static_cast<std::size_t>(m), 0.0))) <= 1e-9);
    }
  }

  TEST_CASE("global loss: lone positive, duplicates, empty anchors") {
    NegativeQueue empty(4, 3, torch::kFloat64);
    const auto a = unit_rows(1, 3, 4);
    CHECK(global_contrastive_loss(a, a, torch::Tensor(), empty, 0.07).item<double>() == doctest::Approx(0.0));
    NegativeQueue q(8, 3, torch::kFloat64), qq(8, 3, torch::kFloat64);
    const auto keys = unit_rows(2, 3, 5);
    q.push(keys);
    qq.push(keys);
    qq.push(keys);
    const auto p = unit_rows(1, 3, 6);
    CHECK(global_contrastive_loss(a, p, torch::Tensor(), qq, 0.5).item<double>() >
          global_contrastive_loss(a, p, torch::Tensor(), q, 0.5).item<double>());
    CHECK_THROWS_AS(global_contrastive_loss(torch::empty({0, 3}, torch::kFloat64), torch::empty({0, 3}, torch::kFloat64),
                                            torch::Tensor(), q, 0.5),
                    Error);
    CHECK_THROWS_AS(global_contrastive_loss(a, a, torch::Tensor(), q, 0.0), Error);
  }

  TEST_CASE("global loss matches a brute-force denominator") {
    const auto anchors = unit_rows(3, 4, 7), pos = unit_rows(3, 4, 8), cross = unit_rows(2, 4, 9);
    NegativeQueue q(8, 4, torch::kFloat64);
    q.push(unit_rows(3, 4, 10));
    const double tau = 0.3;
    double expect = 0;
    const auto qe = q.entries();
    for (int i = 0; i < 3; ++i) {
      auto dot = [&](const torch::Tensor& a, const torch::Tensor& b) { return (a * b).sum().item<double>() / tau; };
      std::vector<double> neg;
      for (int j = 0; j < 3; ++j)
        if (j != i) neg.push_back(dot(anchors[i], anchors[j]));
      for (int k = 0; k < 2; ++k) neg.push_back(dot(anchors[i], cross[k]));
      for (int k = 0; k < 3; ++k) neg.push_back(dot(anchors[i], qe[k]));
      expect += oracle::nce(dot(anchors[i], pos[i]), neg);
    }
    CHECK(global_contrastive_loss(anchors, pos, cross, q, tau).item<double>() == doctest::Approx(expect / 3).epsilon(1e-12));
  }

  TEST_CASE("local loss: S=1, orthonormal closed form, permutation") {
    const auto one = unit_rows(1, 4, 11);
    CHECK(local_contrastive_loss(one, unit_rows(1, 4, 12), 0.07).item<double>() == doctest::Approx(0.0));

    const auto grid = torch::eye(4, torch::kFloat64);  // S=2, K=4
    const double tau = 0.07;
    const double closed = -std::log(std::exp(1 / tau) / (std::exp(1 / tau) + 3.0));
    CHECK(local_contrastive_loss(grid, grid, tau).item<double>() == doctest::Approx(closed).epsilon(1e-12));
    CHECK(closed == doctest::Approx(oracle::nce(1 / tau, {0, 0, 0})).epsilon(1e-12));

    const auto a = unit_rows(4, 5, 13), b = unit_rows(4, 5, 14);
    const auto perm = torch::tensor({2, 0, 3, 1}, torch::kLong);
    CHECK(local_contrastive_loss(a, b, 0.2).item<double>() ==
          doctest::Approx(local_contrastive_loss(a.index_select(0, perm), b.index_select(0, perm), 0.2).item<double>())
              .epsilon(1e-12));
    CHECK_THROWS_AS(local_contrastive_loss(a, b, -1.0), Error);
  }

  TEST_CASE("local positives are the argmax of cosine similarity") {
    const auto a = unit_rows(9, 3, 15), b = unit_rows(9, 3, 16);
    const auto idx = select_local_positives(a, b);
    for (int m = 0; m < 9; ++m) {
      int best = 0;
      double best_v = -2;
      for (int j = 0; j < 9; ++j) {
        const double v = (a[m] * b[j]).sum().item<double>();
        if (v > best_v) {
          best_v = v;
          best = j;
        }
      }
      CHECK(idx[static_cast<std::size_t>(m)] == best);
    }
    // ties go to the lowest index
    const auto dup = torch::cat({e(0, 2), e(0, 2)});
    CHECK(select_local_positives(e(0, 2), dup)[0] == 0);
  }

  TEST_CASE("losses are invariant under a common rotation") {
    torch::manual_seed(17);
    const auto q = std::get<0>(torch::linalg_qr(torch::randn({4, 4}, torch::kFloat64)));
    const auto a = unit_rows(4, 4, 18), b = unit_rows(4, 4, 19);
    CHECK(local_contrastive_loss(a, b, 0.1).item<double>() ==
          doctest::Approx(local_contrastive_loss(a.matmul(q), b.matmul(q), 0.1).item<double>()).epsilon(1e-10));
    NegativeQueue q1(4, 4, torch::kFloat64), q2(4, 4, torch::kFloat64);
    const auto keys = unit_rows(2, 4, 20);
    q1.push(keys);
    q2.push(keys.matmul(q));
    const double g1 = global_contrastive_loss(a, b, torch::Tensor(), q1, 0.1).item<double>();
    const double g2 = global_contrastive_loss(a.matmul(q), b.matmul(q), torch::Tensor(), q2, 0.1).item<double>();
    CHECK(g1 == doctest::Approx(g2).epsilon(1e-10));
    CHECK(g1 >= 0.0);
  }

  TEST_CASE("gradients match central differences") {
    NegativeQueue q(4, 3, torch::kFloat64);
    q.push(unit_rows(2, 3, 21));
    const auto pos = unit_rows(3, 3, 22), paired = unit_rows(3, 3, 23);
    auto anchors = unit_rows(3, 3, 24).requires_grad_(true);

    auto g_loss = [&] { return global_contrastive_loss(anchors, pos, paired, q, 0.5); };
    g_loss().backward();
    const auto analytic = anchors.grad().clone();
    const auto numeric = oracle::numeric_gradient([&] { return g_loss().item<double>(); }, anchors.detach());
    CHECK(oracle::max_relative_error(analytic, numeric, 1e-6) < 1e-4);

    anchors.grad().zero_();
    auto l_loss = [&] { return local_contrastive_loss(anchors, paired, 0.5, PositiveSelection::same_index); };
    l_loss().backward();
    const auto analytic_l = anchors.grad().clone();
    const auto numeric_l = oracle::numeric_gradient([&] { return l_loss().item<double>(); }, anchors.detach());
    CHECK(oracle::max_relative_error(analytic_l, numeric_l, 1e-6) < 1e-4);
  }

  TEST_CASE("glcl mixes the two terms and pushes teacher keys afterwards") {
    ContrastiveBatch b;
    b.local_s = unit_rows(4, 3, 30).view({1, 4, 3});
    b.local_st = unit_rows(4, 3, 31).view({1, 4, 3});
    b.local_t = unit_rows(4, 3, 32).view({1, 4, 3});
    b.local_ts = unit_rows(4, 3, 33).view({1, 4, 3});
    b.global_s = unit_rows(2, 3, 34);
    b.global_st = unit_rows(2, 3, 35);
    b.global_t = unit_rows(2, 3, 36);
    b.global_ts = unit_rows(2, 3, 37);
    b.tau = 0.2;
    NegativeQueue q(8, 3, torch::kFloat64);
    const auto g = glcl_loss(b, q, 1.0);
    CHECK(g.total.item<double>() == doctest::Approx(g.global.item<double>()));
    const auto l = glcl_loss(b, q, 0.0);
    CHECK(l.total.item<double>() == doctest::Approx(l.local.item<double>()));
    const auto h = glcl_loss(b, q, 0.5);
    CHECK(h.total.item<double>() ==
          doctest::Approx(0.5 * h.global.item<double>() + 0.5 * h.local.item<double>()).epsilon(1e-12));
    CHECK(q.size() == 0);
    b.teacher_keys = unit_rows(2, 3, 38);
    NegativeQueue before(8, 3, torch::kFloat64);
    const auto first = glcl_loss(b, before, 0.5);
    CHECK(before.size() == 2);
    CHECK(first.total.item<double>() == doctest::Approx(h.total.item<double>()));
    CHECK_THROWS_AS(glcl_loss(b, q, 1.5), Error);
  }
}
