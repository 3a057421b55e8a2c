#include "doctest_torch.hpp"

#include <cmath>

#include "mtuda/error.hpp"
#include "mtuda/prototype.hpp"

using namespace mtuda;

namespace {

PrototypeBank bank_with(const std::vector<std::vector<double>>& rows, std::vector<bool> init, double m = 0.01) {
  PrototypeBank b(static_cast<int>(rows.size()), static_cast<int>(rows[0].size()), m, torch::kFloat64);
  for (std::size_t c = 0; c < rows.size(); ++c)
    for (std::size_t d = 0; d < rows[c].size(); ++d) b.prototypes[static_cast<long>(c)][static_cast<long>(d)] = rows[c][d];
  b.initialized = std::move(init);
  return b;
}

}  // namespace

TEST_SUITE("prototype") {
  TEST_CASE("batch prototypes are class means over valid pixels") {
    const auto f = torch::tensor({1.0, 3.0, 5.0, 7.0}, torch::kFloat64).view({1, 2, 2});
    const auto y = torch::tensor({0, 0, 1, 1}, torch::kLong).view({2, 2});
    const auto p = batch_prototypes(f, y, std::nullopt, 3);
    CHECK(p[0]->item<double>() == 2.0);
    CHECK(p[1]->item<double>() == 6.0);
    CHECK_FALSE(p[2].has_value());

    const auto f3 = torch::tensor({1.0, 4.0, 10.0, 0.0}, torch::kFloat64).view({1, 2, 2});
    const auto y3 = torch::tensor({1, 1, 1, 0}, torch::kLong).view({2, 2});
    const auto v = torch::tensor({true, false, true, true}).view({2, 2});
    const auto q = batch_prototypes(f3, y3, v, 2);
    CHECK(q[1]->item<double>() == doctest::Approx((1.0 + 10.0) / 2.0));
    CHECK_THROWS_AS(batch_prototypes(f3, torch::zeros({3, 3}, torch::kLong), std::nullopt, 2), Error);
  }

  TEST_CASE("class means lie in the convex hull") {
    torch::manual_seed(3);
    const auto f = torch::randn({2, 3, 4, 4}, torch::kFloat64);
    const auto y = torch::randint(0, 2, {2, 4, 4}, torch::kLong);
    const auto p = batch_prototypes(f, y, std::nullopt, 2);
    const auto vecs = f.permute({0, 2, 3, 1}).reshape({-1, 3});
    const auto sel = vecs.index({y.flatten() == 1});
    CHECK((p[1]->lt(std::get<0>(sel.min(0)) - 1e-12)).sum().item<int>() == 0);
    CHECK((p[1]->gt(std::get<0>(sel.max(0)) + 1e-12)).sum().item<int>() == 0);
  }

  TEST_CASE("momentum update") {
    PrototypeBank fresh(2, 2, 0.01, torch::kFloat64);
    BatchPrototypes batch(2);
    batch[0] = torch::tensor({1.0, 2.0}, torch::kFloat64);
    const auto a = momentum_update(fresh, batch);
    CHECK(a.initialized[0]);
    CHECK_FALSE(a.initialized[1]);
    CHECK(torch::equal(a.prototypes[0], *batch[0]));
    CHECK(torch::equal(a.prototypes[1], fresh.prototypes[1]));

    auto b = bank_with({{0.0}}, {true});
    BatchPrototypes one{torch::tensor({1.0}, torch::kFloat64)};
    CHECK(momentum_update(b, one).prototypes[0][0].item<double>() == doctest::Approx(0.99).epsilon(1e-15));

    // contraction: |new - batch| = m |old - batch|
    auto c = bank_with({{3.0, -1.0}}, {true}, 0.3);
    BatchPrototypes t{torch::tensor({1.0, 1.0}, torch::kFloat64)};
    const auto n = momentum_update(c, t);
    CHECK((n.prototypes[0] - *t[0]).norm().item<double>() ==
          doctest::Approx(0.3 * (c.prototypes[0] - *t[0]).norm().item<double>()).epsilon(1e-12));

    BatchPrototypes wrong{torch::tensor({1.0, 2.0, 3.0}, torch::kFloat64)};
    CHECK_THROWS_AS(momentum_update(c, wrong), Error);
  }

  TEST_CASE("prototype loss cases") {
    const auto a = bank_with({{1.0, 0.0}}, {true});
    CHECK(prototype_loss(a, a).item<double>() == 0.0);
    const auto b = bank_with({{0.0, 1.0}}, {true});
    CHECK(prototype_loss(a, b).item<double>() == doctest::Approx(std::sqrt(2.0)).epsilon(1e-15));
    CHECK(prototype_loss(b, a).item<double>() == prototype_loss(a, b).item<double>());
    const auto s = bank_with({{0.0, 0.0}, {0.0, 0.0}}, {true, true});
    const auto t = bank_with({{3.0, 0.0}, {0.0, 4.0}}, {true, true});
    CHECK(prototype_loss(s, t).item<double>() == doctest::Approx(7.0).epsilon(1e-15));
    // uninitialized classes are skipped
    const auto u = bank_with({{3.0, 0.0}, {0.0, 4.0}}, {true, false});
    CHECK(prototype_loss(s, u).item<double>() == doctest::Approx(3.0).epsilon(1e-15));
  }

  TEST_CASE("gradient reaches only the current batch") {
    auto bank = bank_with({{1.0, 1.0}}, {true}, 0.5);
    auto feat = torch::ones({1, 2, 1, 1}, torch::dtype(torch::kFloat64).requires_grad(true));
    const auto batch = batch_prototypes(feat, torch::zeros({1, 1, 1}, torch::kLong), std::nullopt, 1);
    const auto updated = momentum_update(bank, batch);
    const auto target = bank_with({{0.0, 0.0}}, {true});
    prototype_loss(updated, target).backward();
    // d/dfeat of |0.5*1 + 0.5*feat| at feat=1 is 0.5 * unit vector
    CHECK(feat.grad().flatten()[0].item<double>() == doctest::Approx(0.5 / std::sqrt(2.0)).epsilon(1e-12));
    CHECK_FALSE(updated.detached().prototypes.requires_grad());
  }

  TEST_CASE("nearest downsampling of label maps") {
    auto y = torch::arange(16, torch::kLong).view({4, 4});
    const auto d = downsample_nearest(y, 2, 2);
    CHECK(d[0][0].item<long>() == 5);
    CHECK(d[1][1].item<long>() == 15);
  }
}
