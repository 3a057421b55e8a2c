#include "doctest_torch.hpp"

#include <cmath>
#include <random>

#include "mtuda/mean_teacher.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace mtuda;

namespace {

torch::Tensor random_prob(std::int64_t c, std::int64_t h, std::int64_t w, std::uint64_t seed, double scale = 3.0) {
  torch::manual_seed(seed);
  return torch::softmax(torch::randn({c, h, w}, torch::kFloat64) * scale, 0);
}

}  // namespace

TEST_SUITE("mean_teacher") {
  TEST_CASE("ema endpoints and scalar arithmetic") {
    auto cfg = test::tiny_config().network;
    torch::manual_seed(0);
    SegNet student(cfg), teacher(cfg);
    student->to(torch::kFloat64);
    teacher->to(torch::kFloat64);
    auto t0 = clone_network(teacher);
    ema_update(teacher, student, 1.0);
    for (std::size_t i = 0; i < teacher->parameters().size(); ++i)
      CHECK(torch::equal(teacher->parameters()[i], t0->parameters()[i]));
    ema_update(teacher, student, 0.0);
    for (std::size_t i = 0; i < teacher->parameters().size(); ++i)
      CHECK(torch::equal(teacher->parameters()[i], student->parameters()[i]));
    CHECK(teacher->step_count == 2);

    torch::NoGradGuard g;
    teacher->parameters()[0].fill_(1.0);
    student->parameters()[0].fill_(0.0);
    ema_update(teacher, student, 0.99);
    CHECK(teacher->parameters()[0].flatten()[0].item<double>() == 0.99);
  }

  TEST_CASE("ema is affine at float64") {
    auto cfg = test::tiny_config().network;
    torch::manual_seed(1);
    SegNet student(cfg), teacher(cfg);
    student->to(torch::kFloat64);
    teacher->to(torch::kFloat64);
    std::vector<torch::Tensor> before;
    for (const auto& p : teacher->parameters()) before.push_back(p.detach().clone());
    const double alpha = 0.7315;
    ema_update(teacher, student, alpha);
    for (std::size_t i = 0; i < before.size(); ++i) {
      const auto expect = alpha * before[i] + (1.0 - alpha) * student->parameters()[i].detach();
      CHECK(torch::equal(teacher->parameters()[i], expect));
    }
  }

  TEST_CASE("ema rejects mismatched networks and bad alpha") {
    auto a = test::tiny_config().network;
    auto b = a;
    b.fpn_channels = 4;
    SegNet s(a), t(b);
    CHECK_THROWS_AS(ema_update(t, s, 0.5), Error);
    SegNet t2(a);
    CHECK_THROWS_AS(ema_update(t2, s, 1.5), Error);
  }

  TEST_CASE("ema schedule ramps then holds") {
    EmaSchedule s{0.9, 0.99, 10};
    CHECK(s.alpha_at(0) == doctest::Approx(0.9));
    CHECK(s.alpha_at(5) == doctest::Approx(0.945));
    CHECK(s.alpha_at(10) == doctest::Approx(0.99));
    CHECK(s.alpha_at(1000) == doctest::Approx(0.99));
    CHECK_THROWS_AS((EmaSchedule{0.99, 0.9, 10}.validate()), Error);
  }

  TEST_CASE("entropy values and bounds") {
    auto p = torch::tensor({0.5, 0.5}, torch::kFloat64).view({2, 1, 1});
    CHECK(pixel_entropy(p).item<double>() == doctest::Approx(std::log(2.0)).epsilon(1e-12));
    auto q = torch::tensor({1.0, 0.0}, torch::kFloat64).view({2, 1, 1});
    CHECK(pixel_entropy(q).item<double>() == 0.0);
    auto u = torch::full({4, 1, 1}, 0.25, torch::kFloat64);
    CHECK(pixel_entropy(u).item<double>() == doctest::Approx(std::log(4.0)).epsilon(1e-12));
    const auto e = pixel_entropy(random_prob(5, 16, 16, 3));
    CHECK(e.min().item<double>() >= 0.0);
    CHECK(e.max().item<double>() <= std::log(5.0) + 1e-12);
    CHECK_THROWS_AS(pixel_entropy(torch::full({2, 1, 1}, 1.5, torch::kFloat64)), Error);
  }

  TEST_CASE("pseudo-labels: keep all, ties, sort oracle") {
    const auto prob = random_prob(3, 6, 7, 4);
    const auto all = make_pseudo_labels(prob, 1.0);
    CHECK(all.valid.all().item<bool>());
    CHECK(torch::equal(all.labels, prob.argmax(0)));

    const auto flat = torch::full({2, 10, 10}, 0.5, torch::kFloat64);
    const auto tie = make_pseudo_labels(flat, 0.8);
    const auto v = tie.valid.flatten();
    for (int i = 0; i < 100; ++i) CHECK(v[i].item<bool>() == (i < 80));

    // entropies {0.1, 0.2, 0.9, 1.0} in some pixel order
    auto two = torch::zeros({2, 2, 2}, torch::kFloat64);
    const double ps[4] = {0.5, 0.98, 0.9, 0.6};  // entropies: ln2, low, mid-low, high-ish
    for (int i = 0; i < 4; ++i) {
      two[0][i / 2][i % 2] = ps[i];
      two[1][i / 2][i % 2] = 1 - ps[i];
    }
    const auto pl = make_pseudo_labels(two, 0.5);
    const auto ent = pixel_entropy(two).flatten();
    std::vector<double> ev(4);
    for (int i = 0; i < 4; ++i) ev[static_cast<std::size_t>(i)] = ent[i].item<double>();
    const auto expect = oracle::keep_lowest(ev, 0.5);
    for (int i = 0; i < 4; ++i) CHECK(pl.valid.flatten()[i].item<bool>() == expect[static_cast<std::size_t>(i)]);
  }

  TEST_CASE("pseudo-labels are permutation-equivariant") {
    const auto prob = random_prob(3, 5, 5, 8);
    const auto perm = torch::randperm(25, torch::kLong);
    const auto permuted = prob.reshape({3, 25}).index_select(1, perm).reshape({3, 5, 5});
    const auto a = make_pseudo_labels(prob, 0.6), b = make_pseudo_labels(permuted, 0.6);
    CHECK(torch::equal(a.labels.flatten().index_select(0, perm), b.labels.flatten()));
    CHECK(torch::equal(a.valid.flatten().index_select(0, perm), b.valid.flatten()));
  }

  TEST_CASE("pseudo-labels on batches and keep 0") {
    const auto prob = torch::softmax(torch::randn({3, 2, 4, 4}, torch::kFloat64), 1);
    const auto p = make_pseudo_labels(prob, 0.5);
    CHECK(p.valid.sizes() == torch::IntArrayRef({3, 4, 4}));
    for (int b = 0; b < 3; ++b) CHECK(p.valid[b].sum().item<int>() == 8);
    CHECK(make_pseudo_labels(prob, 0.0).valid.sum().item<int>() == 0);
  }

  TEST_CASE("dice loss examples") {
    auto y = torch::zeros({4, 4}, torch::kLong);
    y[1][1] = 1;
    y[2][2] = 1;
    auto onehot = torch::one_hot(y, 2).permute({2, 0, 1}).to(torch::kFloat64);
    CHECK(dice_loss(onehot, y).item<double>() < 1e-6);
    auto bg = torch::zeros({2, 4, 4}, torch::kFloat64);
    bg[0].fill_(1.0);
    CHECK(dice_loss(bg, y).item<double>() == doctest::Approx(1.0 - 1.0 / 3.0).epsilon(1e-12));
    CHECK(dice_loss(bg, torch::zeros({4, 4}, torch::kLong)).item<double>() == 0.0);
    CHECK_THROWS_AS(dice_loss(bg, torch::zeros({3, 4}, torch::kLong)), Error);
  }

  TEST_CASE("dice loss matches the pixel-counting oracle") {
    std::mt19937_64 rng(11);
    for (int k = 0; k < 20; ++k) {
      const auto p = random_prob(2, 4, 4, 100 + static_cast<std::uint64_t>(k));
      const auto y = torch::randint(0, 2, {4, 4}, torch::kLong);
      const auto v = torch::randint(0, 2, {4, 4}, torch::kLong).to(torch::kBool);
      std::vector<std::vector<double>> pv(2, std::vector<double>(16));
      std::vector<int> yv(16);
      std::vector<bool> vv(16);
      for (int i = 0; i < 16; ++i) {
        for (int c = 0; c < 2; ++c) pv[static_cast<std::size_t>(c)][static_cast<std::size_t>(i)] = p[c][i / 4][i % 4].item<double>();
        yv[static_cast<std::size_t>(i)] = static_cast<int>(y[i / 4][i % 4].item<std::int64_t>());
        vv[static_cast<std::size_t>(i)] = v[i / 4][i % 4].item<bool>();
      }
      PseudoLabel pl{y, v, 0.5};
      CHECK(std::abs(consistency_loss(p, pl).item<double>() - oracle::pixel_dice_loss(pv, yv, vv)) <= 1e-9);
    }
  }

  TEST_CASE("consistency with no valid pixels is zero with zero gradient") {
    auto logits = torch::randn({1, 2, 4, 4}, torch::dtype(torch::kFloat64).requires_grad(true));
    const auto p = torch::softmax(logits, 1);
    PseudoLabel pl{torch::ones({1, 4, 4}, torch::kLong), torch::zeros({1, 4, 4}, torch::kBool), 0.0};
    const auto l = consistency_loss(p, pl);
    CHECK(l.item<double>() == 0.0);
    l.backward();
    CHECK(logits.grad().abs().max().item<double>() == 0.0);
  }

  TEST_CASE("dice loss stays in [0,1] and is zero only when correct") {
    for (int k = 0; k < 10; ++k) {
      const auto p = random_prob(3, 5, 5, 300 + static_cast<std::uint64_t>(k));
      const auto y = torch::randint(0, 3, {5, 5}, torch::kLong);
      const double l = dice_loss(p, y).item<double>();
      CHECK(l >= 0.0);
      CHECK(l <= 1.0);
      CHECK(l > 1e-6);
    }
  }
}
