#include "doctest_torch.hpp"

#include <cmath>
#include <limits>

#include "mtuda/trainer.hpp"
#include "test_util.hpp"

using namespace mtuda;

namespace {

torch::Tensor scalar(double v) { return torch::full({}, v, torch::kFloat64); }

TrainData tiny_train_data(std::uint64_t seed = 7) {
  auto d = gen_synthetic_domains(test::tiny_data(), seed);
  TrainData data{d.source, d.target};
  for (auto& im : data.target) im.seal_mask();
  return data;
}

}  // namespace

TEST_SUITE("trainer") {
  TEST_CASE("total loss weighting and warm-up gating") {
    const LossComponents c{scalar(1), scalar(1), scalar(1), scalar(1), scalar(1)};
    LossWeights w{1.0, 1.0, 0.1, 1.0, 0.5};
    CHECK(total_loss(c, w, false).item<double>() == doctest::Approx(3.6).epsilon(1e-15));
    CHECK(total_loss(c, w, true).item<double>() == doctest::Approx(1.0));
    const LossComponents parts{scalar(2), scalar(3), scalar(5), scalar(7), scalar(11)};
    CHECK(total_loss(parts, w, false).item<double>() == doctest::Approx(2 + 3 + 0.5 + 7 + 5.5));
  }

  TEST_CASE("non-finite components raise a divergence naming the term") {
    LossWeights w;
    const double nan = std::numeric_limits<double>::quiet_NaN();
    const LossComponents bad{scalar(1), scalar(1), scalar(nan), scalar(1), scalar(1)};
    try {
      (void)total_loss(bad, w, false);
      FAIL("expected a divergence");
    } catch (const Error& e) {
      CHECK(e.kind() == ErrorKind::divergence);
      CHECK(std::string(e.what()).find("pro") != std::string::npos);
    }
    // unused during warm-up
    CHECK_NOTHROW((void)total_loss(bad, w, true));
    const LossComponents inf{scalar(std::numeric_limits<double>::infinity()), scalar(1), scalar(1), scalar(1), scalar(1)};
    CHECK_THROWS_AS((void)total_loss(inf, w, true), Error);
  }

  TEST_CASE("config json round trip and errors") {
    auto c = test::tiny_config();
    c.lr_warmup_steps = 12;
    c.patch_strategy = PatchStrategy::random;
    const auto back = TrainConfig::from_json(c.to_json());
    CHECK(back.to_json() == c.to_json());
    CHECK(back.hash() == c.hash());
    auto j = c.to_json();
    j["loss"]["bogus"] = 1;
    CHECK_THROWS_AS(TrainConfig::from_json(j), Error);
    j = c.to_json();
    j["pseudo"]["keep_fraction"] = 1.5;
    CHECK_THROWS_AS(TrainConfig::from_json(j), Error);
    CHECK(TrainConfig::from_json(nlohmann::json::object()).to_json() == TrainConfig{}.to_json());
  }

  TEST_CASE("defaults") {
    const TrainConfig c;
    CHECK(c.weights.pro == 0.1);
    CHECK(c.weights.contrast == 0.5);
    CHECK(c.beta == 0.04);
    CHECK(c.keep_fraction == 0.8);
    CHECK(c.temperature == 0.07);
    CHECK(c.gamma == 0.05);
    CHECK(c.delta == 0.025);
    CHECK(c.ema.alpha_end == 0.999);
  }

  TEST_CASE("compute_losses does not mutate the state") {
    auto cfg = test::tiny_config();
    auto data = tiny_train_data();
    auto state = TrainState::init(cfg, 3);
    std::mt19937_64 rng(1);
    std::vector<const LabeledImage*> src{&data.source[0], &data.source[1]};
    std::vector<const Image*> tgt{&data.target[0].pixels, &data.target[1].pixels};
    const auto batch = make_step_batch(src, tgt, cfg, rng, false);
    const auto before = state.student->parameters()[0].clone();
    const auto queue_before = state.queue.size();
    StepUpdates updates;
    const auto loss = compute_losses(state, batch, cfg, false, rng, &updates);
    for (const auto& t : {loss.seg, loss.consistency, loss.pro, loss.aalp, loss.contrast})
      CHECK(std::isfinite(t.item<double>()));
    CHECK(torch::equal(before, state.student->parameters()[0]));
    CHECK(state.queue.size() == queue_before);
    CHECK(updates.queue_keys.size(0) == 4);
    const auto warm = compute_losses(state, batch, cfg, true, rng);
    CHECK(warm.consistency.item<double>() == 0.0);
    CHECK(warm.contrast.item<double>() == 0.0);
  }

  TEST_CASE("training is deterministic and tracks the best epoch") {
    const auto cfg = test::tiny_config();
    const auto data = tiny_train_data();
    const auto a = train(cfg, data, 11), b = train(cfg, data, 11);
    REQUIRE(a.history.size() == static_cast<std::size_t>(cfg.epochs));
    for (std::size_t i = 0; i < a.history.size(); ++i) {
      CHECK(a.history[i].seg == b.history[i].seg);
      CHECK(a.history[i].consistency == b.history[i].consistency);
      CHECK(a.history[i].selection_score == b.history[i].selection_score);
    }
    double best = -1;
    int arg = 0;
    for (const auto& r : a.history)
      if (r.selection_score > best) best = r.selection_score, arg = r.epoch;
    CHECK(a.best_epoch == arg);
    CHECK(a.best_score == best);
    CHECK(a.history[0].consistency == 0.0);
    CHECK(a.history[2].consistency > 0.0);
    const auto c = train(cfg, data, 12);
    CHECK(c.history.back().seg != a.history.back().seg);
  }

  TEST_CASE("target masks are never read during training") {
    auto cfg = test::tiny_config();
    cfg.epochs = 2;
    const auto data = tiny_train_data();
    LabeledImage::reset_target_mask_reads();
    CHECK_NOTHROW(train(cfg, data, 0));
    CHECK(LabeledImage::target_mask_reads() == 0);
    CHECK_THROWS_AS((void)data.target[0].mask(), Error);
  }

  TEST_CASE("source-only mode stays in warm-up") {
    auto cfg = test::tiny_config();
    cfg.mode = TrainMode::source_only;
    const auto r = train(cfg, tiny_train_data(), 1);
    for (const auto& rec : r.history) {
      CHECK(rec.consistency == 0.0);
      CHECK(rec.contrast == 0.0);
    }
  }

  TEST_CASE("splits are disjoint by case") {
    const auto data = tiny_train_data();
    const auto s = make_splits(data, 0.25, 0);
    for (const auto& v : s.source.val)
      CHECK(std::find(s.source.train.begin(), s.source.train.end(), v) == s.source.train.end());
    CHECK(RunSplits::from_json(s.to_json()).to_json() == s.to_json());
  }
}
