#include "doctest_torch.hpp"

#include <cmath>
#include <random>

#include "mtuda/metrics.hpp"
#include "oracles.hpp"

using namespace mtuda;

TEST_SUITE("metrics") {
  TEST_CASE("closed-form counts") {
    const ConfusionCounts c{1, 1, 2};
    CHECK(iou(c) == 0.25);
    CHECK(dice_score(c) == 0.4);
    CHECK(iou(ConfusionCounts{}) == 1.0);
    CHECK(dice_score(ConfusionCounts{}) == 1.0);
  }

  TEST_CASE("perfect and disjoint masks") {
    Mask a(4, 4, 0), b(4, 4, 0);
    a(0, 0) = a(1, 1) = 1;
    CHECK(iou(a, a, 1) == 1.0);
    b(3, 3) = 1;
    CHECK(iou(a, b, 1) == 0.0);
    CHECK(dice_score(a, b, 1) == 0.0);
  }

  TEST_CASE("random masks agree with the set oracle") {
    std::mt19937_64 rng(42);
    for (int k = 0; k < 1000; ++k) {
      const auto p = oracle::random_mask(rng, 8, 8, 3, 0.4), t = oracle::random_mask(rng, 8, 8, 3, 0.4);
      for (std::uint8_t cls : {0, 1, 2}) {
        const double i = iou(p, t, cls), d = dice_score(p, t, cls);
        CHECK(std::abs(i - oracle::set_iou(p, t, cls)) <= 1e-12);
        CHECK(std::abs(d - oracle::set_dice(p, t, cls)) <= 1e-12);
        CHECK(std::abs(d - 2 * i / (1 + i)) <= 1e-12);
      }
    }
  }

  TEST_CASE("confusion counts add up") {
    std::mt19937_64 rng(1);
    const auto p = oracle::random_mask(rng, 8, 8, 2), t = oracle::random_mask(rng, 8, 8, 2);
    auto c = confusion_counts(p, t, 1);
    c += confusion_counts(p, t, 1);
    CHECK(iou(c) == doctest::Approx(iou(p, t, 1)));
    CHECK_THROWS_AS(confusion_counts(p, Mask(4, 4), 1), Error);
  }

  TEST_CASE("selection score") {
    CHECK(selection_score(0.5, 0.4) == doctest::Approx(0.7));
    CHECK(selection_score(0, 0) == 0.0);
    CHECK(selection_score(0.5, 0.5) > selection_score(0.5, 0.4));
    CHECK(selection_score(0.6, 0.4) > selection_score(0.5, 0.4));
  }

  TEST_CASE("sample statistics match the hand computation") {
    const auto s = sample_stats({0.60, 0.61, 0.62, 0.63, 0.64});
    CHECK(std::abs(s.mean - 0.62) <= 1e-9);
    CHECK(std::abs(s.std - 0.0158113883) <= 1e-9);
    CHECK(s.count == 5);
    CHECK(sample_stats({0.3}).std == 0.0);
  }
}
