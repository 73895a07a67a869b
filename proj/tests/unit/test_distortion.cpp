#include <catch2/catch_amalgamated.hpp>
#include <filesystem>

#include "support/oracles.hpp"
#include "xcal/distortion.hpp"
#include "xcal/rng.hpp"

using Catch::Approx;
using namespace xcal;

namespace {

std::vector<DistortionSample> random_samples(int n, Rng& rng, bool constant_value = false) {
  std::vector<DistortionSample> out(n);
  for (auto& s : out) {
    s.location = {rng.uniform(-512, 512), rng.uniform(-512, 512)};
    s.value = constant_value ? Vector2d(0.75, -1.25)
                             : Vector2d(rng.normal(0, 0.5), rng.normal(0, 0.5));
    s.weight = Matrix2d::Identity() * rng.uniform(0.05, 0.5);
  }
  return out;
}

}  // namespace

TEST_CASE("knn_predict basics") {
  Rng rng(4);

  SECTION("k=1 interpolates exactly at every training location") {
    auto samples = random_samples(50, rng);
    DistortionModel model(samples, 1, 0.0);
    for (const auto& s : samples) {
      REQUIRE((model.predict(s.location) - s.value).norm() == 0.0);
    }
  }

  SECTION("constant field predicts the constant for any k and query") {
    auto samples = random_samples(40, rng, /*constant_value=*/true);
    for (int k : {1, 3, 17, 40}) {
      DistortionModel model(samples, k, 0.0);
      for (int q = 0; q < 10; ++q) {
        const Vector2d query(rng.uniform(-800, 800), rng.uniform(-800, 800));
        REQUIRE((model.predict(query) - Vector2d(0.75, -1.25)).norm() <= 1e-12);
      }
    }
  }

  SECTION("hand-placed samples, k=3 mean cross-checked") {
    std::vector<DistortionSample> s(5);
    s[0] = {{1, 0}, {1.0, 0.0}, Matrix2d::Identity()};
    s[1] = {{0, 2}, {2.0, 1.0}, Matrix2d::Identity()};
    s[2] = {{-3, 0}, {3.0, -1.0}, Matrix2d::Identity()};
    s[3] = {{0, -4}, {4.0, 2.0}, Matrix2d::Identity()};
    s[4] = {{5, 5}, {5.0, -2.0}, Matrix2d::Identity()};
    DistortionModel model(s, 3, 0.0);
    const Vector2d got = model.predict({0, 0});
    const Vector2d want = oracle::brute_force_predict(s, {0, 0}, 3);
    REQUIRE((got - want).norm() == 0.0);
    REQUIRE(got.x() == Approx(2.0));  // (1+2+3)/3
    REQUIRE(got.y() == Approx(0.0));  // (0+1-1)/3
  }

  SECTION("insufficient samples") {
    auto samples = random_samples(3, rng);
    DistortionModel model(samples, 3, 0.0);
    REQUIRE_NOTHROW(model.predict({0, 0}));
    REQUIRE_THROWS_AS(DistortionModel(samples, 4, 0.0), ValidationError);
    REQUIRE_THROWS_AS(DistortionModel().predict({0, 0}), InsufficientSamples);
  }

  SECTION("range boundedness: predictions stay within training extremes") {
    auto samples = random_samples(200, rng);
    DistortionModel model(samples, 7, 0.0);
    double lo_x = 1e30, hi_x = -1e30, lo_y = 1e30, hi_y = -1e30;
    for (const auto& s : samples) {
      lo_x = std::min(lo_x, s.value.x());
      hi_x = std::max(hi_x, s.value.x());
      lo_y = std::min(lo_y, s.value.y());
      hi_y = std::max(hi_y, s.value.y());
    }
    for (int q = 0; q < 200; ++q) {
      const Vector2d query(rng.uniform(-1500, 1500), rng.uniform(-1500, 1500));
      const Vector2d pred = model.predict(query);
      REQUIRE(pred.x() >= lo_x);
      REQUIRE(pred.x() <= hi_x);
      REQUIRE(pred.y() >= lo_y);
      REQUIRE(pred.y() <= hi_y);
    }
  }
}

TEST_CASE("cv_select_k") {
  Rng rng(9);

  SECTION("constant field: G = 0 everywhere, tie-break to smallest k") {
    auto samples = random_samples(60, rng, /*constant_value=*/true);
    CvConfig cfg;
    cfg.k_grid = {2, 5, 11};
    const auto cv = cv_select_k(samples, cfg);
    REQUIRE(cv.best_k == 2);
    for (const auto& [k, g] : cv.cost_table) REQUIRE(g == 0.0);
  }

  SECTION("matches the brute-force CV oracle exactly (<= 200 samples)") {
    for (std::uint64_t seed : {1u, 2u, 3u}) {
      Rng r2(seed);
      auto samples = random_samples(150, r2);
      // correlated weights to exercise the blockwise metric
      for (auto& s : samples) {
        s.weight << 0.09, 0.02, 0.02, 0.12;
      }
      CvConfig cfg;
      cfg.k_grid = {1, 2, 3, 5, 8, 13};
      cfg.shuffle_seed = seed;
      const auto fast = cv_select_k(samples, cfg);
      const auto slow = oracle::brute_force_cv(samples, cfg);
      REQUIRE(fast.best_k == slow.best_k);
      REQUIRE(fast.cost_table.size() == slow.cost_table.size());
      for (std::size_t i = 0; i < fast.cost_table.size(); ++i) {
        REQUIRE(fast.cost_table[i].first == slow.cost_table[i].first);
        REQUIRE(fast.cost_table[i].second ==
                Approx(slow.cost_table[i].second).epsilon(1e-12));
      }
    }
  }

  SECTION("smooth field with noise selects k > 1") {
    Rng r2(31);
    std::vector<DistortionSample> samples(1000);
    for (auto& s : samples) {
      s.location = {r2.uniform(-512, 512), r2.uniform(-512, 512)};
      const double fx = 1.2 * std::sin(s.location.x() / 150.0) + 0.5;
      const double fy = 0.8 * std::cos(s.location.y() / 200.0);
      s.value = {fx + r2.normal(0, 0.3), fy + r2.normal(0, 0.3)};
      s.weight = Matrix2d::Identity() * 0.09;
    }
    CvConfig cfg;
    const auto cv = cv_select_k(samples, cfg);
    REQUIRE(cv.best_k > 1);
    REQUIRE(cv.best_cost < cv.cost_table.front().second);  // beats k = 1
  }

  SECTION("errors") {
    auto samples = random_samples(8, rng);
    CvConfig cfg;
    REQUIRE_THROWS_AS(cv_select_k(samples, cfg), InsufficientSamples);  // n < folds
    auto more = random_samples(20, rng);
    CvConfig big;
    big.k_grid = {1, 19};
    REQUIRE_THROWS_AS(cv_select_k(more, big), GridTooLarge);
    CvConfig bad;
    bad.k_grid = {3, 3};
    REQUIRE_THROWS_AS(cv_select_k(more, bad), ValidationError);
  }

  SECTION("determinism: same samples and seed give the same selection") {
    auto samples = random_samples(120, rng);
    CvConfig cfg;
    cfg.shuffle_seed = 99;
    const auto a = cv_select_k(samples, cfg);
    const auto b = cv_select_k(samples, cfg);
    REQUIRE(a.best_k == b.best_k);
    for (std::size_t i = 0; i < a.cost_table.size(); ++i) {
      REQUIRE(a.cost_table[i].second == b.cost_table[i].second);
    }
  }
}

TEST_CASE("fit_distortion") {
  Rng rng(13);

  SECTION("all-zero residuals give a near-null model") {
    auto raw = random_samples(60, rng);
    for (auto& s : raw) s.value = Vector2d::Zero();
    const auto model = fit_distortion(raw, nullptr, CvConfig{});
    for (int q = 0; q < 30; ++q) {
      const Vector2d query(rng.uniform(-512, 512), rng.uniform(-512, 512));
      REQUIRE(model.predict(query).norm() <= 1e-12);
    }
  }

  SECTION("zero new residuals preserve the prior field at training locations") {
    // constant prior so the kNN mean reproduces it everywhere
    std::vector<DistortionSample> prior_raw = random_samples(50, rng);
    for (auto& s : prior_raw) s.value = Vector2d(1.5, -0.5);
    const auto prior = fit_distortion(prior_raw, nullptr, CvConfig{});

    auto raw = random_samples(50, rng);
    for (auto& s : raw) s.value = Vector2d::Zero();
    const auto next = fit_distortion(raw, &prior, CvConfig{});
    for (const auto& s : raw) {
      const Vector2d at = s.location - prior.predict(s.location);
      REQUIRE((next.predict(at) - Vector2d(1.5, -0.5)).norm() <= 1e-12);
    }
  }

  SECTION("learns a synthetic field better than no correction") {
    Rng r2(47);
    std::vector<DistortionSample> raw(800);
    auto field = [](const Vector2d& p) {
      return Vector2d(1.0 * std::sin(p.x() / 180.0) + 0.6 * (p.y() / 512.0),
                      -0.9 * std::cos(p.y() / 140.0));
    };
    for (auto& s : raw) {
      s.location = {r2.uniform(-512, 512), r2.uniform(-512, 512)};
      s.value = field(s.location) + Vector2d(r2.normal(0, 0.3), r2.normal(0, 0.3));
      s.weight = Matrix2d::Identity() * 0.09;
    }
    const auto model = fit_distortion(raw, nullptr, CvConfig{});

    double err_model = 0.0, err_raw = 0.0;
    int count = 0;
    for (int q = 0; q < 500; ++q) {
      const Vector2d query(r2.uniform(-450, 450), r2.uniform(-450, 450));
      err_model += (model.predict(query) - field(query)).squaredNorm();
      err_raw += field(query).squaredNorm();
      ++count;
    }
    REQUIRE(std::sqrt(err_model / count) < std::sqrt(err_raw / count));
  }

  SECTION("insufficient inliers") {
    auto raw = random_samples(5, rng);
    REQUIRE_THROWS_AS(fit_distortion(raw, nullptr, CvConfig{}), InsufficientSamples);
  }
}

TEST_CASE("distortion model serialization round trip") {
  Rng rng(3);
  auto raw = random_samples(40, rng);
  const auto model = fit_distortion(raw, nullptr, CvConfig{});

  namespace fs = std::filesystem;
  const auto path = fs::temp_directory_path() / "xcal_distortion_model.csv";
  save_distortion_model(path.string(), model);
  const auto loaded = load_distortion_model(path.string());
  REQUIRE(loaded.k() == model.k());
  REQUIRE(loaded.samples().size() == model.samples().size());
  for (int q = 0; q < 50; ++q) {
    const Vector2d query(rng.uniform(-800, 800), rng.uniform(-800, 800));
    REQUIRE((loaded.predict(query) - model.predict(query)).norm() == 0.0);
  }
}
