#include "lamatch/attention.hpp"

namespace lamatch {

void validate_neighborhoods(std::span<const NeighborhoodPair> pairs, std::size_t n_source,
                            std::size_t n_target) {
  for (std::size_t p = 0; p < pairs.size(); ++p) {
    const auto& pair = pairs[p];
    const std::string tag = "neighborhood " + std::to_string(p);
    if (pair.source_set.empty() || pair.target_set.empty()) throw DataError(tag + " is empty");
    for (auto i : pair.source_set) {
      if (i >= n_source) throw DataError(tag + ": source index out of range");
    }
    for (auto j : pair.target_set) {
      if (j >= n_target) throw DataError(tag + ": target index out of range");
    }
    const auto has = [](const std::vector<std::uint32_t>& set, std::uint32_t x) {
      return std::find(set.begin(), set.end(), x) != set.end();
    };
    if (!has(pair.source_set, pair.seed.first) || !has(pair.target_set, pair.seed.second)) {
      throw DataError(tag + ": seed is not a member of its own sets");
    }
  }
}

namespace {

// Accumulates the gradient of restricted linear attention (query rows
// `rows_q`, key rows `rows_k`) into grads.
template <typename RowsQ, typename RowsK>
void restricted_backward(const Matrix& q, const Matrix& k, const Matrix& v, const Matrix& dout,
                         const RowsQ& rows_q, const RowsK& rows_k, AttentionGrads& grads) {
  const auto c = static_cast<std::size_t>(q.cols());
  const auto stats = detail::key_stats<double, double>(k, v, rows_k);

  std::vector<double> d_kv(c * c, 0.0), d_km(c, 0.0);
  std::vector<double> pq(c), num(c), dnum(c);
  for (auto i : rows_q) {
    const double* qrow = q.data() + static_cast<std::size_t>(i) * c;
    const double* grow = dout.data() + static_cast<std::size_t>(i) * c;
    double den = 0.0;
    for (std::size_t a = 0; a < c; ++a) pq[a] = phi(qrow[a]);
    std::fill(num.begin(), num.end(), 0.0);
    for (std::size_t a = 0; a < c; ++a) {
      for (std::size_t b = 0; b < c; ++b) num[b] += pq[a] * stats.kv[a * c + b];
      den += pq[a] * stats.km[a];
    }
    // out = num / den
    double g_dot_out = 0.0;
    for (std::size_t b = 0; b < c; ++b) {
      dnum[b] = grow[b] / den;
      g_dot_out += grow[b] * num[b] / den;
    }
    const double dden = -g_dot_out / den;
    double* dq = grads.dq.data() + static_cast<std::size_t>(i) * c;
    for (std::size_t a = 0; a < c; ++a) {
      double dpq = dden * stats.km[a];
      for (std::size_t b = 0; b < c; ++b) dpq += stats.kv[a * c + b] * dnum[b];
      dq[a] += dpq * phi_derivative(qrow[a]);
      for (std::size_t b = 0; b < c; ++b) d_kv[a * c + b] += pq[a] * dnum[b];
      d_km[a] += dden * pq[a];
    }
  }
  std::vector<double> pk(c);
  for (auto j : rows_k) {
    const double* krow = k.data() + static_cast<std::size_t>(j) * c;
    const double* vrow = v.data() + static_cast<std::size_t>(j) * c;
    double* dk = grads.dk.data() + static_cast<std::size_t>(j) * c;
    double* dv = grads.dv.data() + static_cast<std::size_t>(j) * c;
    for (std::size_t a = 0; a < c; ++a) pk[a] = phi(krow[a]);
    for (std::size_t a = 0; a < c; ++a) {
      double dpk = d_km[a];
      for (std::size_t b = 0; b < c; ++b) {
        dpk += d_kv[a * c + b] * vrow[b];
        dv[b] += pk[a] * d_kv[a * c + b];
      }
      dk[a] += dpk * phi_derivative(krow[a]);
    }
  }
}

AttentionGrads zero_grads(const Matrix& q, const Matrix& k, const Matrix& v) {
  return {Matrix::Zero(q.rows(), q.cols()), Matrix::Zero(k.rows(), k.cols()),
          Matrix::Zero(v.rows(), v.cols())};
}

}  // namespace

AttentionGrads linear_attention_backward(const Matrix& q, const Matrix& k, const Matrix& v,
                                         const Matrix& dout) {
  AttentionGrads g = zero_grads(q, k, v);
  restricted_backward(q, k, v, dout, detail::IndexRange{static_cast<std::size_t>(q.rows())},
                      detail::IndexRange{static_cast<std::size_t>(k.rows())}, g);
  return g;
}

AttentionGrads pairwise_attention_backward(const Matrix& q, const Matrix& k, const Matrix& v,
                                           std::span<const NeighborhoodPair> pairs,
                                           const Matrix& dout) {
  AttentionGrads g = zero_grads(q, k, v);
  for (const auto& p : pairs) restricted_backward(q, k, v, dout, p.source_set, p.target_set, g);
  return g;
}

AttentionGrads multi_head_backward(const AttentionBackward& backward, const Matrix& q,
                                   const Matrix& k, const Matrix& v, const Matrix& dout,
                                   int heads) {
  if (heads < 1 || q.cols() % heads != 0) {
    throw ConfigError("hidden dimension not divisible by heads");
  }
  if (heads == 1) return backward(q, k, v, dout);
  AttentionGrads g = zero_grads(q, k, v);
  const Eigen::Index width = q.cols() / heads;
  for (int h = 0; h < heads; ++h) {
    const Eigen::Index c0 = h * width;
    Matrix qh = q.middleCols(c0, width), kh = k.middleCols(c0, width),
           vh = v.middleCols(c0, width), dh = dout.middleCols(c0, width);
    const AttentionGrads gh = backward(qh, kh, vh, dh);
    g.dq.middleCols(c0, width) = gh.dq;
    g.dk.middleCols(c0, width) = gh.dk;
    g.dv.middleCols(c0, width) = gh.dv;
  }
  return g;
}

}  // namespace lamatch
