#include <cmath>

#include "doctest.h"
#include "helpers.hpp"
#include "lamatch/training.hpp"
#include "oracles.hpp"

using namespace lamatch;
using testing::random_matrix;

namespace {

std::vector<double> flatten(const NetworkWeights& w) {
  std::vector<double> out;
  w.for_each_tensor([&](const std::string&, const auto& t) {
    for (Eigen::Index k = 0; k < t.size(); ++k) out.push_back(t.data()[k]);
  });
  return out;
}

EncodedPair encoded(const Matrix& xs, const Matrix& xt, const Matrix& fs, const Matrix& ft) {
  EncodedPair e;
  e.xs_hat = xs;
  e.xt_hat = xt;
  e.fs_hat = fs;
  e.ft_hat = ft;
  return e;
}

}  // namespace

TEST_SUITE("training") {
  TEST_CASE("ranking loss examples") {
    const LossConfig cfg;
    Matrix xs(3, 2), xt(3, 2);
    xs << 0, 0, 5, 0, 0, 5;
    xt << 0, 0, -5, 0, 0, -5;
    CHECK(ranking_loss(xs, xt, 0, 0, cfg) == 0.0);

    // Positive at squared distance m_p + 0.3, hardest negative exactly m_n.
    Matrix a(2, 1), b(2, 1);
    a << 0, 10;
    b << std::sqrt(cfg.m_p + 0.3), std::sqrt(cfg.m_n);
    const auto term = ranking_term(a, b, 0, 0, cfg);
    CHECK(term.positive == doctest::Approx(cfg.m_p + 0.3));
    CHECK(term.value == doctest::Approx(0.3));
    CHECK_FALSE(term.negative_active);

    CHECK_THROWS_AS(ranking_loss(a.topRows(1), b, 0, 0, cfg), Error);
  }

  TEST_CASE("ranking loss equals exhaustive negative mining") {
    Rng rng(derive_seed(1, "train"));
    LossConfig cfg;
    for (int rep = 0; rep < 40; ++rep) {
      const Matrix xs = random_matrix(8, 3, rng) * 0.4, xt = random_matrix(8, 3, rng) * 0.4;
      const std::size_t i = rng.below(8), j = rng.below(8);
      const auto term = ranking_term(xs, xt, i, j, cfg);
      CHECK(term.value == doctest::Approx(oracle::ranking_loss(xs, xt, i, j, cfg.m_p, cfg.m_n)));
      double best = kInf;
      for (std::size_t k = 0; k < 8; ++k) {
        if (k != j) best = std::min(best, squared_distance(xs, i, xt, k));
        if (k != i) best = std::min(best, squared_distance(xs, k, xt, j));
      }
      CHECK(term.negative == best);
      const double chosen = term.on_target ? squared_distance(xs, i, xt, term.negative_index)
                                           : squared_distance(xs, term.negative_index, xt, j);
      CHECK(chosen == best);
    }
  }

  TEST_CASE("confidence") {
    Matrix u(2, 3);
    u << 0.6, 0.8, 0, 0, 0, 1;
    CHECK(confidence(u, 0, u, 0) == doctest::Approx(1.0));
    CHECK(confidence(u, 0, u, 1) == 0.0);
    Rng rng(derive_seed(2, "train"));
    const Matrix a = random_matrix(3, 7, rng), b = random_matrix(4, 7, rng);
    double s = 0;
    for (Eigen::Index k = 0; k < 7; ++k) s += a(2, k) * b(1, k);
    CHECK(confidence(a, 2, b, 1) == doctest::Approx(s));
  }

  TEST_CASE("triplet loss") {
    const LossConfig cfg;
    Matrix xs(2, 1), xt(2, 1), fs(2, 2), ft(2, 2);
    xs << 0, 10;
    xt << std::sqrt(cfg.m_p + 0.3), 20;
    fs << 1, 1, 0, 0;
    ft << 1, 1, 0, 0;
    GroundTruth gt;
    gt.pairs = {{0, 0}};
    CHECK(triplet_loss(encoded(xs, xt, fs, ft), gt, cfg) == doctest::Approx(0.6));

    // Negative confidence is clamped so the loss stays non-negative.
    ft << -1, -1, 0, 0;
    CHECK(triplet_loss(encoded(xs, xt, fs, ft), gt, cfg) == 0.0);

    gt.pairs.clear();
    CHECK_THROWS_AS(triplet_loss(encoded(xs, xt, fs, ft), gt, cfg), Error);

    Rng rng(derive_seed(3, "train"));
    const Matrix rs = random_matrix(6, 3, rng) * 0.5, rt = random_matrix(5, 3, rng) * 0.5;
    const Matrix rfs = random_matrix(6, 4, rng), rft = random_matrix(5, 4, rng);
    GroundTruth g;
    g.pairs = {{0, 1}, {2, 2}, {3, 0}, {5, 4}};
    double sum = 0;
    for (const auto& [i, j] : g.pairs) {
      double s = 0;
      for (Eigen::Index k = 0; k < 4; ++k) s += rfs(i, k) * rft(j, k);
      sum += std::max(s, 0.0) * oracle::ranking_loss(rs, rt, i, j, cfg.m_p, cfg.m_n);
    }
    CHECK(triplet_loss(encoded(rs, rt, rfs, rft), g, cfg) == doctest::Approx(sum / 4));
  }

  TEST_CASE("gradient matches finite differences") {
    const auto pair = generate_pair(4, 24, 120, 90, 8, {0.3, 0.5, 0.0, false, 4});
    const LossConfig cfg;
    const auto plain = gradcheck(init_weights({8, 4, 1, 1, 0}, 1), pair, cfg, 0, 1);
    CHECK(plain.entries.size() == init_weights({8, 4, 1, 1, 0}, 1).parameter_count());
    CHECK(plain.max_rel_error < 1e-4);
    CHECK(plain.pass_fraction == 1.0);

    const auto pairwise = gradcheck(init_weights({8, 4, 1, 1, 1}, 2), pair, cfg, 150, 2);
    CHECK(pairwise.max_rel_error < 1e-4);

    const auto heads = gradcheck(init_weights({8, 4, 2, 1, 1}, 3), pair, cfg, 150, 3);
    CHECK(heads.max_rel_error < 1e-4);
  }

  TEST_CASE("zero loss has zero gradient") {
    GenNoiseConfig noise;
    noise.identity_homography = true;
    const auto pair = generate_pair(5, 24, 200, 200, 64, noise);
    const auto w = identity_weights({64, 64, 1, 1, 0});
    const auto lg = loss_gradient(w, pair, LossConfig{});
    REQUIRE(lg.loss == 0.0);
    for (double g : flatten(lg.gradient)) CHECK(g == 0.0);
  }

  TEST_CASE("backward pass is linear in the upstream gradient") {
    const auto pair = generate_pair(6, 20, 120, 90, 8, {0.2, 0.5, 0.0, false, 0});
    const auto w = init_weights({8, 4, 1, 1, 1}, 5);
    ForwardCache cache;
    const auto enc = forward(pair.source, pair.target, w, {}, {}, &cache);
    Rng rng(derive_seed(7, "train"));
    const auto ns = enc.xs_hat.rows(), nt = enc.xt_hat.rows();
    const Matrix a = random_matrix(ns, 4, rng), b = random_matrix(nt, 4, rng),
                 c = random_matrix(ns, 4, rng), d = random_matrix(nt, 4, rng);
    const double alpha = -2.5;
    const auto g1 = flatten(forward_backward(enc, cache, w, a, b, c, d));
    const auto g2 = flatten(forward_backward(enc, cache, w, alpha * a, alpha * b, alpha * c, alpha * d));
    REQUIRE(g1.size() == g2.size());
    for (std::size_t k = 0; k < g1.size(); ++k) {
      CHECK(g2[k] == doctest::Approx(alpha * g1[k]).epsilon(1e-12).scale(1e-12));
    }
  }

  TEST_CASE("training with zero learning rate changes nothing") {
    ToyDataConfig dc;
    dc.pairs = 4;
    dc.keypoints = 32;
    dc.descriptor_dim = 8;
    const auto data = make_toy_dataset(dc, 1);
    const auto init = init_weights({8, 4, 1, 1, 1}, 1);
    LossConfig cfg;
    cfg.learning_rate = 0.0;
    const auto r = train_toy(init, data, cfg, 6, 3);
    CHECK(flatten(r.weights) == flatten(init));
    REQUIRE(r.trace.size() == 6);
    for (const auto& t : r.trace) CHECK(t.lr == 0.0);
    // Each step's loss depends only on which pair was drawn.
    std::vector<double> per_pair;
    for (const auto& p : data) per_pair.push_back(pair_loss(init, p, cfg));
    for (const auto& t : r.trace) {
      const bool known = std::any_of(per_pair.begin(), per_pair.end(),
                                     [&](double l) { return std::abs(l - t.loss) < 1e-12; });
      CHECK(known);
    }
    const auto single = train_toy(init, {data[0]}, cfg, 4, 3);
    for (const auto& t : single.trace) CHECK(t.loss == single.trace[0].loss);
  }

  TEST_CASE("training is deterministic and decays the rate") {
    ToyDataConfig dc;
    dc.pairs = 4;
    dc.keypoints = 32;
    dc.descriptor_dim = 8;
    const auto data = make_toy_dataset(dc, 2);
    const auto init = init_weights({8, 4, 1, 1, 1}, 2);
    LossConfig cfg;
    cfg.decay = 0.5;
    const auto a = train_toy(init, data, cfg, 5, 9);
    const auto b = train_toy(init, data, cfg, 5, 9);
    REQUIRE(a.trace.size() == b.trace.size());
    for (std::size_t k = 0; k < a.trace.size(); ++k) {
      CHECK(a.trace[k].loss == b.trace[k].loss);
      CHECK(a.trace[k].lr == doctest::Approx(cfg.learning_rate * std::pow(0.5, static_cast<double>(k))));
    }
    CHECK(flatten(a.weights) == flatten(b.weights));
    CHECK(flatten(a.weights) != flatten(init));
    CHECK(a.optimizer.t == 5);
    CHECK(trace_to_csv(a.trace).rfind("step,loss,lr\n", 0) == 0);
  }

  TEST_CASE("non-finite loss aborts naming the step") {
    auto pair = generate_pair(3, 16, 100, 100, 8, {0.1, 0.0, 0.0, false, 0});
    pair.source.descriptors(0, 0) = std::numeric_limits<double>::quiet_NaN();
    const auto init = init_weights({8, 4, 1, 1, 0}, 1);
    try {
      train_toy(init, {pair}, LossConfig{}, 3, 1);
      FAIL("expected an error");
    } catch (const Error& e) {
      CHECK(std::string(e.what()).find("step 0") != std::string::npos);
    }
  }

  TEST_CASE("optimizer state round trip") {
    testing::TempDir dir("optim");
    ToyDataConfig dc;
    dc.pairs = 2;
    dc.keypoints = 24;
    dc.descriptor_dim = 8;
    const auto data = make_toy_dataset(dc, 3);
    const auto r = train_toy(init_weights({8, 4, 1, 1, 1}, 3), data, LossConfig{}, 3, 1);
    save_optimizer(dir / "opt.lawt", r.optimizer);
    const auto back = load_optimizer(dir / "opt.lawt", 1);
    CHECK(back.t == r.optimizer.t);
    const auto m0 = flatten(r.optimizer.m), m1 = flatten(back.m);
    REQUIRE(m0.size() == m1.size());
    for (std::size_t k = 0; k < m0.size(); ++k) CHECK(m1[k] == static_cast<float>(m0[k]));
  }

  TEST_CASE("loss config validation") {
    LossConfig cfg;
    cfg.m_n = cfg.m_p;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = {};
    cfg.decay = 0.0;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = {};
    cfg.learning_rate = -1;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
  }

  TEST_CASE("toy dataset is deterministic per pair index") {
    ToyDataConfig dc;
    dc.pairs = 3;
    dc.keypoints = 20;
    dc.descriptor_dim = 4;
    const auto a = make_toy_dataset(dc, 5);
    const auto b = make_toy_dataset(dc, 5, 1);
    CHECK(a[1].source.keypoints == b[0].source.keypoints);
    CHECK(a[2].target.descriptors == b[1].target.descriptors);
  }
}
