#include <cmath>
#include <numbers>

#include "doctest.h"
#include "helpers.hpp"
#include "lamatch/neighborhood.hpp"
#include "oracles.hpp"

using namespace lamatch;
using testing::random_matrix;

namespace {

// Mutual nearest neighbors plus ratio test by exhaustive distance tables.
RatioMatchSet brute_ratio_match(const Matrix& s, const Matrix& t, double theta) {
  RatioMatchSet out;
  const auto n = s.rows(), m = t.rows();
  for (Eigen::Index i = 0; i < n; ++i) {
    Eigen::Index best = -1;
    double d1 = kInf, d2 = kInf;
    for (Eigen::Index j = 0; j < m; ++j) {
      const double d = (s.row(i) - t.row(j)).norm();
      if (d < d1) {
        d2 = d1;
        d1 = d;
        best = j;
      } else if (d < d2) {
        d2 = d;
      }
    }
    if (best < 0) continue;
    Eigen::Index back = -1;
    double db = kInf;
    for (Eigen::Index i2 = 0; i2 < n; ++i2) {
      const double d = (s.row(i2) - t.row(best)).norm();
      if (d < db) {
        db = d;
        back = i2;
      }
    }
    if (back != i || d1 / d2 > theta) continue;
    out.matches.emplace_back(static_cast<std::uint32_t>(i), static_cast<std::uint32_t>(best));
    out.ratio_score.push_back(d2 / d1);
  }
  return out;
}

RatioMatchSet random_matches(std::size_t count, Rng& rng, bool ties) {
  RatioMatchSet m;
  for (std::uint32_t k = 0; k < count; ++k) {
    m.matches.emplace_back(k, static_cast<std::uint32_t>(count - 1 - k));
    m.ratio_score.push_back(ties ? 1.0 + static_cast<double>(rng.below(3)) : rng.uniform(1, 5));
  }
  return m;
}

std::vector<Point2> random_points(std::size_t count, double w, double h, Rng& rng) {
  std::vector<Point2> p;
  for (std::size_t k = 0; k < count; ++k) p.emplace_back(rng.uniform(0, w), rng.uniform(0, h));
  return p;
}

}  // namespace

TEST_SUITE("neighborhood") {
  TEST_CASE("default radius") {
    CHECK(default_radius(100, 100) == doctest::Approx(std::sqrt(100.0 / std::numbers::pi)));
    CHECK(default_radius(100, 100) == doctest::Approx(5.6419).epsilon(1e-4));
    CHECK(default_radius(628, 50) == doctest::Approx(9.9975).epsilon(1e-4));
    CHECK(default_radius(640, 480) * 2 == doctest::Approx(default_radius(1280, 960)));
    CHECK_THROWS_AS(default_radius(0, 10), ConfigError);
  }

  TEST_CASE("resolve radii honours overrides") {
    KeypointSet s, t;
    s.width = t.width = 100;
    s.height = t.height = 100;
    t.width = 400;
    NeighborhoodConfig cfg;
    const Radii r = resolve_radii(cfg, s, t);
    CHECK(r.seed == doctest::Approx(default_radius(100, 100)));
    CHECK(r.source == doctest::Approx(default_radius(100, 100)));
    CHECK(r.target == doctest::Approx(default_radius(400, 100)));
    cfg.radius = 3;
    cfg.radius_t = 7;
    const Radii r2 = resolve_radii(cfg, s, t);
    CHECK(r2.seed == 3.0);
    CHECK(r2.target == 7.0);
  }

  TEST_CASE("ratio match on exact one-hot descriptors") {
    const std::vector<std::uint32_t> perm{3, 0, 4, 1, 2};
    Matrix s = Matrix::Zero(5, 5), t = Matrix::Zero(5, 5);
    for (std::uint32_t i = 0; i < 5; ++i) {
      s(i, i) = 1;
      t(perm[i], i) = 1;
    }
    const auto m = ratio_match(s, t, 1.0);
    REQUIRE(m.size() == 5);
    for (std::uint32_t i = 0; i < 5; ++i) {
      CHECK(m.matches[i] == IndexPair{i, perm[i]});
      CHECK(std::isinf(m.ratio_score[i]));
    }
  }

  TEST_CASE("ratio match equals brute force") {
    Rng rng(derive_seed(1, "nb"));
    for (double theta : {1.0, 0.9, 0.7}) {
      for (int rep = 0; rep < 20; ++rep) {
        const Matrix s = random_matrix(16, 6, rng), t = random_matrix(16, 6, rng);
        const auto got = ratio_match(s, t, theta);
        const auto want = brute_ratio_match(s, t, theta);
        CHECK(got.matches == want.matches);
        REQUIRE(got.ratio_score.size() == want.ratio_score.size());
        for (std::size_t k = 0; k < got.size(); ++k) {
          CHECK(got.ratio_score[k] == doctest::Approx(want.ratio_score[k]));
        }
      }
    }
    // theta = 1 never blocks a mutual pair; tighter thresholds only remove.
    const Matrix s = random_matrix(40, 6, rng), t = random_matrix(30, 6, rng);
    const auto all = ratio_match(s, t, 1.0);
    const auto tight = ratio_match(s, t, 0.8);
    CHECK(tight.size() <= all.size());
    for (const auto& p : tight.matches) {
      CHECK(std::find(all.matches.begin(), all.matches.end(), p) != all.matches.end());
    }
  }

  TEST_CASE("single target row") {
    Rng rng(derive_seed(2, "nb"));
    const Matrix s = random_matrix(4, 3, rng), t = random_matrix(1, 3, rng);
    const auto m = ratio_match(s, t, 0.5);
    REQUIRE(m.size() == 1);
    CHECK(std::isinf(m.ratio_score[0]));
    CHECK(ratio_match(Matrix(0, 3), t, 1.0).size() == 0);
  }

  TEST_CASE("seed selection examples") {
    RatioMatchSet m;
    m.matches = {{0, 0}, {1, 1}, {2, 2}};
    m.ratio_score = {2.0, 3.0, 1.5};
    const std::vector<Point2> far{{0, 0}, {100, 0}, {0, 100}};
    CHECK(select_seeds(m, far, 10.0) == std::vector<std::size_t>{0, 1, 2});
    const std::vector<Point2> near{{0, 0}, {5, 0}, {0, 100}};
    CHECK(select_seeds(m, near, 10.0) == std::vector<std::size_t>{1, 2});
    m.ratio_score = {3.0, 3.0, 1.5};
    CHECK(select_seeds(m, near, 10.0) == std::vector<std::size_t>{0, 2});
  }

  TEST_CASE("seed selection equals quadratic check") {
    Rng rng(derive_seed(3, "nb"));
    for (int rep = 0; rep < 50; ++rep) {
      const bool ties = rep % 2 == 1;
      const auto m = random_matches(64, rng, ties);
      const auto kps = random_points(64, 200, 150, rng);
      const double r = rng.uniform(5, 40);
      const auto want = oracle::seeds(m.matches, m.ratio_score, kps, r);
      CHECK(select_seeds(m, kps, r, SpatialSearch::kBruteForce) == want);
      CHECK(select_seeds(m, kps, r, SpatialSearch::kGrid) == want);
    }
  }

  TEST_CASE("neighborhood construction") {
    RatioMatchSet one;
    one.matches = {{4, 7}};
    one.ratio_score = {2.0};
    const std::vector<Point2> ks(5, Point2(1, 1)), kt(8, Point2(2, 2));
    const auto single = build_neighborhoods({0}, one, ks, kt, 2.0, 5.0, 5.0);
    REQUIRE(single.size() == 1);
    CHECK(single[0].source_set == std::vector<std::uint32_t>{4});
    CHECK(single[0].target_set == std::vector<std::uint32_t>{7});

    Rng rng(derive_seed(4, "nb"));
    const auto m = random_matches(80, rng, false);
    const auto src = random_points(80, 200, 150, rng);
    const auto tgt = random_points(80, 200, 150, rng);
    const auto seeds = select_seeds(m, src, 20.0);
    REQUIRE_FALSE(seeds.empty());

    const auto huge = build_neighborhoods(seeds, m, src, tgt, 1e6, 20.0, 20.0);
    for (const auto& p : huge) CHECK(p.source_set.size() == 80);

    for (double lambda : {0.5, 1.0, 2.0, 3.0}) {
      const auto brute = build_neighborhoods(seeds, m, src, tgt, lambda, 20.0, 25.0, 1,
                                             SpatialSearch::kBruteForce);
      const auto grid = build_neighborhoods(seeds, m, src, tgt, lambda, 20.0, 25.0, 1,
                                            SpatialSearch::kGrid);
      REQUIRE(brute.size() == seeds.size());
      REQUIRE(grid.size() == seeds.size());
      for (std::size_t p = 0; p < seeds.size(); ++p) {
        const auto [si, ti] = m.matches[seeds[p]];
        std::vector<std::uint32_t> want_s, want_t;
        for (const auto& [a, b] : m.matches) {
          if ((src[a] - src[si]).norm() <= lambda * 20.0 &&
              (tgt[b] - tgt[ti]).norm() <= lambda * 25.0) {
            want_s.push_back(a);
            want_t.push_back(b);
          }
        }
        CHECK(brute[p].seed == m.matches[seeds[p]]);
        CHECK(brute[p].source_set == want_s);
        CHECK(brute[p].target_set == want_t);
        CHECK(grid[p].source_set == want_s);
        CHECK(grid[p].target_set == want_t);
      }
    }

    // Enlarging lambda never shrinks a neighborhood.
    const auto small = build_neighborhoods(seeds, m, src, tgt, 1.0, 20.0, 20.0);
    const auto big = build_neighborhoods(seeds, m, src, tgt, 2.0, 20.0, 20.0);
    for (std::size_t p = 0; p < seeds.size(); ++p) {
      for (auto i : small[p].source_set) {
        CHECK(std::find(big[p].source_set.begin(), big[p].source_set.end(), i) !=
              big[p].source_set.end());
      }
    }

    const auto filtered = build_neighborhoods(seeds, m, src, tgt, 1.0, 20.0, 20.0, 3);
    for (const auto& p : filtered) CHECK(p.source_set.size() >= 3);
  }

  TEST_CASE("select_neighborhoods composes the three steps") {
    const auto pair = generate_pair(5, 200, 320, 240, 8, {0.05, 0.5, 0.1, false, 0});
    NeighborhoodConfig cfg;
    cfg.theta = 0.9;
    const auto got = select_neighborhoods(pair.source.descriptors, pair.target.descriptors,
                                          pair.source, pair.target, cfg);
    const auto m = ratio_match(pair.source.descriptors, pair.target.descriptors, 0.9);
    const Radii r = resolve_radii(cfg, pair.source, pair.target);
    const auto seeds = select_seeds(m, pair.source.keypoints, r.seed);
    const auto want = build_neighborhoods(seeds, m, pair.source.keypoints, pair.target.keypoints,
                                          cfg.lambda, r.source, r.target);
    REQUIRE(got.size() == want.size());
    for (std::size_t p = 0; p < got.size(); ++p) {
      CHECK(got[p].seed == want[p].seed);
      CHECK(got[p].source_set == want[p].source_set);
    }
  }

  TEST_CASE("config validation") {
    NeighborhoodConfig cfg;
    cfg.theta = 0.0;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg.theta = 1.5;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg.theta = 0.8;
    cfg.lambda = -1;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
  }
}
