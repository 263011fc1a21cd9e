#include <cmath>

#include "doctest.h"
#include "helpers.hpp"
#include "lamatch/encoder.hpp"
#include "lamatch/formats.hpp"
#include "lamatch/neighborhood.hpp"
#include "oracles.hpp"

using namespace lamatch;
using testing::max_abs_diff;
using testing::random_matrix;

namespace {

// Layer output written out step by step from a given message.
Matrix scripted_layer(const Matrix& x, const Matrix& msg, const LayerWeights& w, bool project) {
  const Eigen::Index in = x.cols(), c = msg.cols();
  Matrix out(x.rows(), c);
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    Eigen::VectorXd cat(in + c);
    for (Eigen::Index a = 0; a < in; ++a) cat[a] = x(r, a);
    for (Eigen::Index a = 0; a < c; ++a) cat[in + a] = msg(r, a);
    Eigen::VectorXd h(2 * c);
    for (Eigen::Index o = 0; o < 2 * c; ++o) {
      double s = 0;
      for (Eigen::Index a = 0; a < in + c; ++a) s += cat[a] * w.mlp0(a, o);
      h[o] = s;
    }
    double mean = 0;
    for (Eigen::Index o = 0; o < 2 * c; ++o) mean += h[o];
    mean /= static_cast<double>(2 * c);
    double var = 0;
    for (Eigen::Index o = 0; o < 2 * c; ++o) var += (h[o] - mean) * (h[o] - mean);
    var /= static_cast<double>(2 * c);
    for (Eigen::Index o = 0; o < 2 * c; ++o) {
      const double n = (h[o] - mean) / std::sqrt(var + kLayerNormEps);
      h[o] = std::max(0.0, n * w.ln_g[o] + w.ln_b[o]);
    }
    for (Eigen::Index b = 0; b < c; ++b) {
      double s = 0;
      for (Eigen::Index o = 0; o < 2 * c; ++o) s += h[o] * w.mlp1(o, b);
      double res = 0;
      if (project) {
        for (Eigen::Index a = 0; a < in; ++a) res += x(r, a) * w.wv(a, b);
      } else {
        res = x(r, b);
      }
      out(r, b) = res + s;
    }
  }
  return out;
}

Matrix oracle_message(const Matrix& xq, const Matrix& xs, const LayerWeights& w) {
  if (xs.rows() == 0) return Matrix::Zero(xq.rows(), w.wq.cols());
  const Matrix q = xq * w.wq, k = xs * w.wk, v = xs * w.wv;
  return oracle::linear_attention(q, k, v).cast<double>();
}

Matrix oracle_pair_message(const Matrix& xq, const Matrix& xs, const LayerWeights& w,
                           const std::vector<NeighborhoodPair>& pairs) {
  return oracle::pairwise_attention(xq * w.wq, xs * w.wk, xs * w.wv, pairs);
}

LayerWeights random_layer(std::size_t in, std::size_t c, Rng& rng) {
  LayerWeights w = LayerWeights::zeros(in, c);
  const auto in_i = static_cast<Eigen::Index>(in), c_i = static_cast<Eigen::Index>(c);
  w.wq = random_matrix(in_i, c_i, rng) * 0.5;
  w.wk = random_matrix(in_i, c_i, rng) * 0.5;
  w.wv = random_matrix(in_i, c_i, rng) * 0.5;
  w.mlp0 = random_matrix(in_i + c_i, 2 * c_i, rng) * 0.5;
  w.mlp1 = random_matrix(2 * c_i, c_i, rng) * 0.5;
  w.ln_g = Vector::Constant(2 * c_i, 1.0) + 0.1 * random_matrix(2 * c_i, 1, rng).col(0);
  w.ln_b = 0.1 * random_matrix(2 * c_i, 1, rng).col(0);
  return w;
}

Matrix select_rows(const Matrix& m, const std::vector<std::uint32_t>& rows) {
  Matrix out(static_cast<Eigen::Index>(rows.size()), m.cols());
  for (std::size_t r = 0; r < rows.size(); ++r) out.row(static_cast<Eigen::Index>(r)) = m.row(rows[r]);
  return out;
}

}  // namespace

TEST_SUITE("encoder") {
  TEST_CASE("zero MLP output is the residual") {
    Rng rng(derive_seed(1, "enc"));
    LayerWeights w = random_layer(4, 4, rng);
    w.mlp1.setZero();
    const Matrix x = random_matrix(7, 4, rng), y = random_matrix(5, 4, rng);
    CHECK(encoder_layer(x, y, w, MessageKernel::linear(), 1) == x);
  }

  TEST_CASE("single row scalar path") {
    Rng rng(derive_seed(2, "enc"));
    const LayerWeights w = random_layer(4, 4, rng);
    const Matrix x = random_matrix(1, 4, rng), y = random_matrix(1, 4, rng);
    // With one key the message is that key's value row.
    const Matrix msg = y * w.wv;
    const Matrix expected = scripted_layer(x, msg, w, false);
    CHECK(max_abs_diff(encoder_layer(x, y, w, MessageKernel::linear(), 1), expected) < 1e-12);
    CHECK(max_abs_diff(encoder_layer(x, y, w, MessageKernel::linear(), 2), expected) < 1e-12);
  }

  TEST_CASE("layer is not idempotent") {
    Rng rng(derive_seed(3, "enc"));
    const LayerWeights w = random_layer(4, 4, rng);
    const Matrix x = random_matrix(6, 4, rng);
    const Matrix once = encoder_layer(x, x, w, MessageKernel::linear(), 1);
    const Matrix twice = encoder_layer(once, once, w, MessageKernel::linear(), 1);
    CHECK((twice - once).norm() > 0.0);
  }

  TEST_CASE("shape errors") {
    Rng rng(derive_seed(4, "enc"));
    const LayerWeights w = random_layer(4, 4, rng);
    CHECK_THROWS_AS(encoder_layer(random_matrix(3, 5, rng), random_matrix(3, 4, rng), w,
                                  MessageKernel::linear(), 1),
                    DataError);
    const LayerWeights wide = random_layer(6, 4, rng);
    const Matrix x6 = random_matrix(3, 6, rng);
    CHECK_THROWS_AS(encoder_layer(x6, x6, wide, MessageKernel::linear(), 1), DataError);
    CHECK(encoder_layer(x6, x6, wide, MessageKernel::linear(), 1, true).cols() == 4);
  }

  TEST_CASE("self and cross updates compose from single layers") {
    Rng rng(derive_seed(5, "enc"));
    const LayerWeights w = random_layer(4, 4, rng);
    const Matrix xs = random_matrix(6, 4, rng), xt = random_matrix(9, 4, rng);

    const auto self = self_attention_update(xs, xt, w, 2);
    CHECK(self.source == encoder_layer(xs, xs, w, MessageKernel::linear(), 2));
    CHECK(self.target == encoder_layer(xt, xt, w, MessageKernel::linear(), 2));
    const auto self1 = self_attention_update(xs, xt, w, 1);
    CHECK(max_abs_diff(self1.source, scripted_layer(xs, oracle_message(xs, xs, w), w, false)) < 1e-12);
    const auto same = self_attention_update(xs, xs, w, 2);
    CHECK(same.source == same.target);

    const auto cross = cross_attention_update(xs, xt, w, 2);
    CHECK(cross.source == encoder_layer(xs, xt, w, MessageKernel::linear(), 2));
    CHECK(cross.target == encoder_layer(xt, xs, w, MessageKernel::linear(), 2));
    const auto swapped = cross_attention_update(xt, xs, w, 2);
    CHECK(swapped.source == cross.target);
    CHECK(swapped.target == cross.source);

    const Matrix one = random_matrix(1, 4, rng);
    const Matrix msg = one * w.wv;
    const auto single = cross_attention_update(xs, one, w, 1);
    CHECK(max_abs_diff(single.source, scripted_layer(xs, msg.replicate(6, 1), w, false)) < 1e-12);
  }

  TEST_CASE("pairwise layer") {
    Rng rng(derive_seed(6, "enc"));
    const LayerWeights w = random_layer(4, 4, rng);
    const Matrix xs = random_matrix(10, 4, rng), xt = random_matrix(8, 4, rng);

    const auto none = pairwise_layer_update(xs, xt, {}, w, 1);
    CHECK(max_abs_diff(none.source, scripted_layer(xs, Matrix::Zero(10, 4), w, false)) < 1e-12);
    CHECK(max_abs_diff(none.target, scripted_layer(xt, Matrix::Zero(8, 4), w, false)) < 1e-12);

    NeighborhoodPair all{{0, 0}, {}, {}};
    for (std::uint32_t i = 0; i < 8; ++i) {
      all.source_set.push_back(i);
      all.target_set.push_back(i);
    }
    const Matrix xs8 = xs.topRows(8);
    const auto full = pairwise_layer_update(xs8, xt, {&all, 1}, w, 2);
    const auto cross = cross_attention_update(xs8, xt, w, 2);
    CHECK(max_abs_diff(full.source, cross.source) < 1e-12);
    CHECK(max_abs_diff(full.target, cross.target) < 1e-12);

    const std::vector<NeighborhoodPair> two{{{1, 2}, {1, 3, 4}, {2, 0, 5}},
                                            {{6, 7}, {6, 8}, {7, 6}}};
    const auto out = pairwise_layer_update(xs, xt, two, w, 1);
    Matrix expected_s = scripted_layer(xs, Matrix::Zero(10, 4), w, false);
    Matrix expected_t = scripted_layer(xt, Matrix::Zero(8, 4), w, false);
    for (const auto& p : two) {
      const auto block = cross_attention_update(select_rows(xs, p.source_set),
                                                select_rows(xt, p.target_set), w, 1);
      for (std::size_t r = 0; r < p.source_set.size(); ++r) {
        expected_s.row(p.source_set[r]) = block.source.row(static_cast<Eigen::Index>(r));
        expected_t.row(p.target_set[r]) = block.target.row(static_cast<Eigen::Index>(r));
      }
    }
    CHECK(max_abs_diff(out.source, expected_s) < 1e-12);
    CHECK(max_abs_diff(out.target, expected_t) < 1e-12);
  }

  TEST_CASE("tiny network matches scripted forward pass") {
    const NetworkConfig cfg{8, 4, 1, 1, 1};
    const auto weights = init_weights(cfg, 12);
    const auto pair = generate_pair(3, 60, 200, 150, 8, {0.05, 0.3, 0.0, false, 0});
    NeighborhoodConfig ncfg;
    const auto enc = forward(pair.source, pair.target, weights, ncfg);

    const auto& l0 = weights.layers[0];
    const auto& l1 = weights.layers[1];
    const auto& l2 = weights.layers[2];
    const Matrix& ds = pair.source.descriptors;
    const Matrix& dt = pair.target.descriptors;
    Matrix s1 = scripted_layer(ds, oracle_message(ds, ds, l0), l0, true);
    Matrix t1 = scripted_layer(dt, oracle_message(dt, dt, l0), l0, true);
    Matrix s2 = scripted_layer(s1, oracle_message(s1, t1, l1), l1, false);
    Matrix t2 = scripted_layer(t1, oracle_message(t1, s1, l1), l1, false);
    CHECK(max_abs_diff(enc.fs_hat, s2) < 1e-10);
    CHECK(max_abs_diff(enc.ft_hat, t2) < 1e-10);

    const auto pairs = select_neighborhoods(s2, t2, pair.source, pair.target, ncfg);
    REQUIRE_FALSE(pairs.empty());
    std::vector<NeighborhoodPair> swapped;
    for (const auto& p : pairs) swapped.push_back(p.swapped());
    const Matrix s3 = scripted_layer(s2, oracle_pair_message(s2, t2, l2, pairs), l2, false);
    const Matrix t3 = scripted_layer(t2, oracle_pair_message(t2, s2, l2, swapped), l2, false);
    CHECK(max_abs_diff(enc.xs_hat, normalize_rows(s3)) < 1e-10);
    CHECK(max_abs_diff(enc.xt_hat, normalize_rows(t3)) < 1e-10);
    for (Eigen::Index r = 0; r < enc.xs_hat.rows(); ++r) {
      CHECK(enc.xs_hat.row(r).norm() == doctest::Approx(1.0));
    }
  }

  TEST_CASE("without pairwise layers the output is the normalized capture") {
    const NetworkConfig cfg{8, 4, 2, 2, 0};
    const auto weights = init_weights(cfg, 5);
    const auto pair = generate_pair(4, 40, 200, 150, 8, {0.05, 0.3, 0.1, false, 0});
    const auto enc = forward(pair.source, pair.target, weights, {});
    CHECK(enc.xs_hat == normalize_rows(enc.fs_hat));
    CHECK(enc.xt_hat == normalize_rows(enc.ft_hat));
    CHECK(enc.neighborhoods.empty());

    // Coordinates never enter the computation.
    auto moved_s = pair.source, moved_t = pair.target;
    for (auto& p : moved_s.keypoints) p += Point2(13.0, -4.0);
    for (auto& p : moved_t.keypoints) p += Point2(13.0, -4.0);
    const auto enc2 = forward(moved_s, moved_t, weights, {});
    CHECK(enc2.xs_hat == enc.xs_hat);

    // Rows permute with the input.
    auto perm_s = pair.source;
    std::reverse(perm_s.keypoints.begin(), perm_s.keypoints.end());
    perm_s.descriptors = perm_s.descriptors.colwise().reverse().eval();
    const auto enc3 = forward(perm_s, pair.target, weights, {});
    CHECK(max_abs_diff(enc3.xs_hat, enc.xs_hat.colwise().reverse()) < 1e-12);
    CHECK(max_abs_diff(enc3.xt_hat, enc.xt_hat) < 1e-12);
  }

  TEST_CASE("empty side and dimension mismatch") {
    const NetworkConfig cfg{8, 4, 1, 1, 1};
    const auto weights = init_weights(cfg, 5);
    auto pair = generate_pair(4, 20, 100, 100, 8);
    KeypointSet empty;
    empty.descriptors = Matrix(0, 8);
    empty.width = 100;
    empty.height = 100;
    const auto enc = forward(empty, pair.target, weights, {});
    CHECK(enc.xs_hat.rows() == 0);
    CHECK(enc.xt_hat.rows() == static_cast<Eigen::Index>(pair.target.size()));
    CHECK(enc.neighborhoods.empty());

    auto bad = generate_pair(4, 20, 100, 100, 6);
    CHECK_THROWS_AS(forward(bad.source, bad.target, weights, {}), DataError);
  }

  TEST_CASE("identity weights pass descriptors through") {
    const NetworkConfig cfg{8, 8, 2, 2, 1};
    const auto weights = identity_weights(cfg);
    const auto pair = generate_pair(8, 30, 100, 100, 8);
    const auto enc = forward(pair.source, pair.target, weights, {});
    CHECK(max_abs_diff(enc.xs_hat, normalize_rows(pair.source.descriptors)) < 1e-12);
    CHECK(max_abs_diff(enc.xt_hat, normalize_rows(pair.target.descriptors)) < 1e-12);
  }

  TEST_CASE("weights init and persistence") {
    testing::TempDir dir("weights");
    const NetworkConfig cfg{16, 8, 2, 2, 1};
    const auto a = init_weights(cfg, 3);
    const auto b = init_weights(cfg, 3);
    const auto c = init_weights(cfg, 4);
    CHECK(encode_lawt(weights_to_tensors(a)) == encode_lawt(weights_to_tensors(b)));
    CHECK(encode_lawt(weights_to_tensors(a)) != encode_lawt(weights_to_tensors(c)));

    save_weights(dir / "w1.lawt", a);
    const auto loaded = load_weights(dir / "w1.lawt", 2);
    save_weights(dir / "w2.lawt", loaded);
    CHECK(read_file(dir / "w1.lawt") == read_file(dir / "w2.lawt"));
    CHECK(loaded.config.l1 == 2);
    CHECK(loaded.config.l2 == 1);
    CHECK(loaded.config.hidden_dim == 8);

    auto bytes = read_file(dir / "w1.lawt");
    bytes.resize(bytes.size() - 10);
    write_file(dir / "trunc.lawt", bytes);
    CHECK_THROWS_AS(load_weights(dir / "trunc.lawt", 2), DataError);
    CHECK_THROWS_AS(load_weights(dir / "w1.lawt", 3), Error);
  }

  TEST_CASE("normalize rows keeps zero rows") {
    Matrix x(2, 3);
    x << 3, 0, 4, 0, 0, 0;
    const Matrix n = normalize_rows(x);
    CHECK(n(0, 0) == doctest::Approx(0.6));
    CHECK(n(0, 2) == doctest::Approx(0.8));
    CHECK(n.row(1).isZero(0.0));
  }
}
