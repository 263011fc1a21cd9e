#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "lamatch/common.hpp"
#include "lamatch/geometry.hpp"
#include "lamatch/op_counter.hpp"
#include "lamatch/parallel.hpp"

namespace lamatch {

// Accumulator type used by the kernels for storage type T.
template <typename T>
struct Accumulator {
  using type = double;
};

template <>
struct Accumulator<float> {
#ifdef LAMATCH_F64_ACCUM
  using type = double;
#else
  using type = float;
#endif
};

template <typename T>
using AccumulatorT = typename Accumulator<T>::type;

template <typename T>
struct ProjectedTriplet {
  RowMatrix<T> q;  // N x C'
  RowMatrix<T> k;  // M x C'
  RowMatrix<T> v;  // M x C'

  void validate() const {
    if (k.rows() != v.rows()) throw DataError("K and V row counts differ");
    if (q.cols() != k.cols() || k.cols() != v.cols()) {
      throw DataError("Q, K, V column counts differ");
    }
  }
};

// A matching seed together with the index sets of its neighborhood.
// source_set[n] and target_set[n] are the two endpoints of the n-th member
// match; both lists therefore have equal length and are ordered by member.
struct NeighborhoodPair {
  IndexPair seed;
  std::vector<std::uint32_t> source_set;
  std::vector<std::uint32_t> target_set;

  NeighborhoodPair swapped() const {
    return {{seed.second, seed.first}, target_set, source_set};
  }
};

// Throws DataError on empty sets, out-of-range indices, or a seed that is
// not a member of its own sets.
void validate_neighborhoods(std::span<const NeighborhoodPair> pairs, std::size_t n_source,
                            std::size_t n_target);

// elu(x) + 1: x + 1 for x >= 0, exp(x) otherwise. Strictly positive.
template <typename T>
inline T phi(T x) {
  return x >= T(0) ? x + T(1) : std::exp(x);
}

template <typename T>
inline T phi_derivative(T x) {
  return x >= T(0) ? T(1) : std::exp(x);
}

template <typename T>
RowMatrix<T> phi(const RowMatrix<T>& x) {
  return x.unaryExpr([](T v) { return phi(v); });
}

namespace detail {

// Streamed key/value statistics of one attention call: Kv = sum phi(K_j) V_j^T
// and Km = sum phi(K_j), over the selected key rows.
template <typename Acc>
struct KeyStats {
  std::vector<Acc> kv;  // c x c, row-major
  std::vector<Acc> km;  // c
};

template <typename T, typename Acc, typename Rows>
KeyStats<Acc> key_stats(const RowMatrix<T>& k, const RowMatrix<T>& v, const Rows& rows) {
  const auto c = static_cast<std::size_t>(k.cols());
  KeyStats<Acc> s{std::vector<Acc>(c * c, Acc(0)), std::vector<Acc>(c, Acc(0))};
  std::vector<Acc> pk(c);
  for (auto j : rows) {
    const T* krow = k.data() + static_cast<std::size_t>(j) * c;
    const T* vrow = v.data() + static_cast<std::size_t>(j) * c;
    for (std::size_t a = 0; a < c; ++a) pk[a] = static_cast<Acc>(phi(krow[a]));
    for (std::size_t a = 0; a < c; ++a) {
      Acc* dst = s.kv.data() + a * c;
      const Acc pa = pk[a];
      for (std::size_t b = 0; b < c; ++b) dst[b] += pa * static_cast<Acc>(vrow[b]);
      s.km[a] += pa;
    }
  }
  return s;
}

// out_row (+)= phi(q_row)^T Kv / phi(q_row)^T Km. `pq` and `num` are
// caller-provided scratch of length c.
template <typename T, typename Acc>
void query_row(const T* qrow, const KeyStats<Acc>& s, std::size_t c, T* out_row, bool add,
               std::vector<Acc>& pq, std::vector<Acc>& num) {
  Acc den = 0;
  for (std::size_t a = 0; a < c; ++a) pq[a] = static_cast<Acc>(phi(qrow[a]));
  std::fill(num.begin(), num.end(), Acc(0));
  for (std::size_t a = 0; a < c; ++a) {
    const Acc pa = pq[a];
    const Acc* src = s.kv.data() + a * c;
    for (std::size_t b = 0; b < c; ++b) num[b] += pa * src[b];
    den += pa * s.km[a];
  }
  for (std::size_t b = 0; b < c; ++b) {
    const T value = static_cast<T>(num[b] / den);
    out_row[b] = add ? out_row[b] + value : value;
  }
}

struct IndexRange {
  std::size_t n;
  struct iterator {
    std::size_t i;
    std::size_t operator*() const { return i; }
    iterator& operator++() {
      ++i;
      return *this;
    }
    bool operator!=(const iterator& o) const { return i != o.i; }
  };
  iterator begin() const { return {0}; }
  iterator end() const { return {n}; }
};

}  // namespace detail

// Linear attention: V'_i = phi(Q_i)^T [sum_j phi(K_j) V_j^T] / phi(Q_i)^T [sum_j phi(K_j)].
// The two key statistics are accumulated once, then queries are swept, so the
// cost is O((M + N) C'^2) and no N x M buffer is formed.
template <typename T, typename Acc = AccumulatorT<T>>
RowMatrix<T> linear_attention(const RowMatrix<T>& q, const RowMatrix<T>& k, const RowMatrix<T>& v) {
  if (k.rows() != v.rows() || q.cols() != k.cols() || k.cols() != v.cols()) {
    throw DataError("linear_attention: inconsistent Q/K/V shapes");
  }
  if (k.rows() < 1) throw DataError("linear_attention: needs at least one key");
  const auto n = static_cast<std::size_t>(q.rows());
  const auto m = static_cast<std::size_t>(k.rows());
  const auto c = static_cast<std::size_t>(q.cols());

  const auto stats = detail::key_stats<T, Acc>(k, v, detail::IndexRange{m});
  RowMatrix<T> out(q.rows(), q.cols());
  parallel_for(n, [&](std::size_t begin, std::size_t end) {
    std::vector<Acc> pq(c), num(c);
    for (std::size_t i = begin; i < end; ++i) {
      detail::query_row(q.data() + i * c, stats, c, out.data() + i * c, false, pq, num);
    }
  });

  ops::add_multiplies((m + n) * c * c + 2 * n * c);
  ops::note_buffer(c, c);
  ops::note_buffer(c, 1);
  ops::note_buffer(n, c);
  return out;
}

template <typename T, typename Acc = AccumulatorT<T>>
RowMatrix<T> linear_attention(const ProjectedTriplet<T>& t) {
  return linear_attention<T, Acc>(t.q, t.k, t.v);
}

// Standard scaled dot-product attention, softmax(Q K^T / sqrt(C')) V. It
// deliberately materializes the N x M score matrix; used as the quadratic
// baseline and as an independent reference.
template <typename T>
RowMatrix<T> softmax_attention_reference(const RowMatrix<T>& q, const RowMatrix<T>& k,
                                         const RowMatrix<T>& v) {
  if (k.rows() != v.rows() || q.cols() != k.cols() || k.cols() != v.cols()) {
    throw DataError("softmax_attention_reference: inconsistent Q/K/V shapes");
  }
  if (k.rows() < 1) throw DataError("softmax_attention_reference: needs at least one key");
  const auto n = static_cast<std::size_t>(q.rows());
  const auto m = static_cast<std::size_t>(k.rows());
  const auto c = static_cast<std::size_t>(q.cols());
  const T scale = T(1) / std::sqrt(static_cast<T>(c));

  RowMatrix<T> scores = (q * k.transpose()) * scale;
  ops::note_buffer(n, m);
  parallel_for(n, [&](std::size_t begin, std::size_t end) {
    for (std::size_t i = begin; i < end; ++i) {
      auto row = scores.row(static_cast<Eigen::Index>(i));
      const T mx = row.maxCoeff();
      row = (row.array() - mx).exp();
      row /= row.sum();
    }
  });
  RowMatrix<T> out = scores * v;
  ops::add_multiplies(2 * n * m * c + n * m);
  ops::note_buffer(n, c);
  return out;
}

template <typename T>
RowMatrix<T> softmax_attention_reference(const ProjectedTriplet<T>& t) {
  return softmax_attention_reference(t.q, t.k, t.v);
}

// Pairwise neighborhood attention. For each pair p, rows in source_set get
// linear attention restricted to keys in target_set; rows outside every
// source set are zero; overlapping pairs are summed (superposition).
template <typename T, typename Acc = AccumulatorT<T>>
RowMatrix<T> pairwise_attention(const RowMatrix<T>& q, const RowMatrix<T>& k, const RowMatrix<T>& v,
                                std::span<const NeighborhoodPair> pairs) {
  if (k.rows() != v.rows() || q.cols() != k.cols() || k.cols() != v.cols()) {
    throw DataError("pairwise_attention: inconsistent Q/K/V shapes");
  }
  validate_neighborhoods(pairs, static_cast<std::size_t>(q.rows()),
                         static_cast<std::size_t>(k.rows()));
  const auto c = static_cast<std::size_t>(q.cols());
  RowMatrix<T> out = RowMatrix<T>::Zero(q.rows(), q.cols());
  ops::note_buffer(static_cast<std::uint64_t>(q.rows()), c);

  std::vector<detail::KeyStats<Acc>> stats(pairs.size());
  parallel_for(
      pairs.size(),
      [&](std::size_t begin, std::size_t end) {
        for (std::size_t p = begin; p < end; ++p) {
          stats[p] = detail::key_stats<T, Acc>(k, v, pairs[p].target_set);
        }
      },
      1);
  // Superposition in pair order keeps the summation order fixed.
  std::uint64_t mults = 0;
  std::vector<Acc> pq(c), num(c);
  for (std::size_t p = 0; p < pairs.size(); ++p) {
    for (auto i : pairs[p].source_set) {
      detail::query_row(q.data() + static_cast<std::size_t>(i) * c, stats[p], c,
                        out.data() + static_cast<std::size_t>(i) * c, true, pq, num);
    }
    mults += (pairs[p].target_set.size() + pairs[p].source_set.size()) * c * c +
             2 * pairs[p].source_set.size() * c;
    ops::note_buffer(c, c);
    ops::note_buffer(c, 1);
  }
  ops::add_multiplies(mults);
  return out;
}

template <typename T, typename Acc = AccumulatorT<T>>
RowMatrix<T> pairwise_attention(const ProjectedTriplet<T>& t, std::span<const NeighborhoodPair> pairs) {
  return pairwise_attention<T, Acc>(t.q, t.k, t.v, pairs);
}

template <typename T>
using AttentionKernel =
    std::function<RowMatrix<T>(const RowMatrix<T>&, const RowMatrix<T>&, const RowMatrix<T>&)>;

// Splits the C' columns into `heads` contiguous groups, runs the kernel per
// group and concatenates the results in order.
template <typename T>
RowMatrix<T> multi_head(const AttentionKernel<T>& kernel, const RowMatrix<T>& q,
                        const RowMatrix<T>& k, const RowMatrix<T>& v, int heads) {
  if (heads < 1 || q.cols() % heads != 0) {
    throw ConfigError("hidden dimension " + std::to_string(q.cols()) +
                      " is not divisible by heads=" + std::to_string(heads));
  }
  if (heads == 1) return kernel(q, k, v);
  const Eigen::Index width = q.cols() / heads;
  RowMatrix<T> out(q.rows(), q.cols());
  for (int h = 0; h < heads; ++h) {
    const Eigen::Index c0 = h * width;
    RowMatrix<T> qh = q.middleCols(c0, width);
    RowMatrix<T> kh = k.middleCols(c0, width);
    RowMatrix<T> vh = v.middleCols(c0, width);
    out.middleCols(c0, width) = kernel(qh, kh, vh);
  }
  return out;
}

template <typename T>
RowMatrix<T> multi_head(const AttentionKernel<T>& kernel, const ProjectedTriplet<T>& t, int heads) {
  return multi_head(kernel, t.q, t.k, t.v, heads);
}

// Reverse-mode derivatives of the double-precision kernels.
struct AttentionGrads {
  Matrix dq, dk, dv;
};

AttentionGrads linear_attention_backward(const Matrix& q, const Matrix& k, const Matrix& v,
                                         const Matrix& dout);

AttentionGrads pairwise_attention_backward(const Matrix& q, const Matrix& k, const Matrix& v,
                                           std::span<const NeighborhoodPair> pairs,
                                           const Matrix& dout);

using AttentionBackward =
    std::function<AttentionGrads(const Matrix&, const Matrix&, const Matrix&, const Matrix&)>;

AttentionGrads multi_head_backward(const AttentionBackward& backward, const Matrix& q,
                                   const Matrix& k, const Matrix& v, const Matrix& dout, int heads);

}  // namespace lamatch
