#include <catch2/catch_amalgamated.hpp>

#include "support/oracles.hpp"
#include "xcal/kdtree.hpp"
#include "xcal/rng.hpp"

using namespace xcal;

TEST_CASE("single point tree") {
  KdTree2d tree({{3.0, -4.0}});
  for (double x : {-100.0, 0.0, 55.5}) {
    const auto nn = tree.knn({x, 2.0}, 1);
    REQUIRE(nn.size() == 1);
    REQUIRE(nn[0].index == 0);
  }
  REQUIRE_THROWS_AS(tree.knn({0, 0}, 2), InsufficientSamples);
}

TEST_CASE("neighbour sets equal an exhaustive scan") {
  Rng rng(17);
  std::vector<Eigen::Vector2d> pts(1000);
  for (auto& p : pts) p = {rng.uniform(-512, 512), rng.uniform(-512, 512)};
  const KdTree2d tree(pts);
  for (int q = 0; q < 100; ++q) {
    const Eigen::Vector2d query(rng.uniform(-600, 600), rng.uniform(-600, 600));
    for (int k : {1, 5, 20}) {
      const auto got = tree.knn(query, k);
      const auto want = oracle::brute_force_knn(pts, query, k);
      REQUIRE(got.size() == want.size());
      for (int i = 0; i < k; ++i) REQUIRE(got[i].index == want[i]);
    }
  }
}

TEST_CASE("duplicate locations are returned before any farther point") {
  std::vector<Eigen::Vector2d> pts = {{5, 5}, {1, 1}, {1, 1}, {9, 9}, {1.5, 1.0}};
  const KdTree2d tree(pts);
  const auto nn = tree.knn({1, 1}, 3);
  REQUIRE(nn[0].index == 1);  // smaller index first on the zero-distance tie
  REQUIRE(nn[1].index == 2);
  REQUIRE(nn[2].index == 4);
}

TEST_CASE("grid points with many distance ties match the oracle") {
  std::vector<Eigen::Vector2d> pts;
  for (int y = 0; y < 12; ++y) {
    for (int x = 0; x < 12; ++x) pts.push_back({double(x), double(y)});
  }
  const KdTree2d tree(pts);
  Rng rng(23);
  for (int q = 0; q < 50; ++q) {
    const Eigen::Vector2d query(double(rng.bounded(12)), double(rng.bounded(12)));
    for (int k : {1, 4, 9, 25}) {
      const auto got = tree.knn(query, k);
      const auto want = oracle::brute_force_knn(pts, query, k);
      for (int i = 0; i < k; ++i) REQUIRE(got[i].index == want[i]);
    }
  }
}
