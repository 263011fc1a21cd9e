#include "lamatch/encoder.hpp"

#include <cmath>

namespace lamatch {

namespace {

Matrix compute_message(const Matrix& q, const Matrix& k, const Matrix& v,
                       const MessageKernel& kernel, int heads) {
  switch (kernel.kind) {
    case MessageKernel::Kind::kLinear:
      if (k.rows() == 0) return Matrix::Zero(q.rows(), q.cols());
      return multi_head<double>(
          [](const Matrix& a, const Matrix& b, const Matrix& c) {
            return linear_attention<double>(a, b, c);
          },
          q, k, v, heads);
    case MessageKernel::Kind::kSoftmax:
      if (k.rows() == 0) return Matrix::Zero(q.rows(), q.cols());
      return multi_head<double>(
          [](const Matrix& a, const Matrix& b, const Matrix& c) {
            return softmax_attention_reference<double>(a, b, c);
          },
          q, k, v, heads);
    case MessageKernel::Kind::kPairwise: {
      const auto pairs = kernel.pairs;
      return multi_head<double>(
          [pairs](const Matrix& a, const Matrix& b, const Matrix& c) {
            return pairwise_attention<double>(a, b, c, pairs);
          },
          q, k, v, heads);
    }
  }
  throw ConfigError("unknown message kernel");
}

AttentionGrads message_backward(const Matrix& q, const Matrix& k, const Matrix& v,
                                const Matrix& d_msg, const MessageKernel& kernel, int heads) {
  switch (kernel.kind) {
    case MessageKernel::Kind::kLinear:
      if (k.rows() == 0) {
        return {Matrix::Zero(q.rows(), q.cols()), Matrix::Zero(0, k.cols()),
                Matrix::Zero(0, v.cols())};
      }
      return multi_head_backward(
          [](const Matrix& a, const Matrix& b, const Matrix& c, const Matrix& d) {
            return linear_attention_backward(a, b, c, d);
          },
          q, k, v, d_msg, heads);
    case MessageKernel::Kind::kPairwise: {
      const auto pairs = kernel.pairs;
      return multi_head_backward(
          [pairs](const Matrix& a, const Matrix& b, const Matrix& c, const Matrix& d) {
            return pairwise_attention_backward(a, b, c, pairs, d);
          },
          q, k, v, d_msg, heads);
    }
    case MessageKernel::Kind::kSoftmax:
      break;
  }
  throw ConfigError("backward is not implemented for the softmax reference kernel");
}

void check_layer_shapes(const Matrix& x_query, const Matrix& x_source, const LayerWeights& w) {
  const auto in = w.wq.rows();
  if (x_query.cols() != in || x_source.cols() != in) {
    throw DataError("encoder_layer: input width " + std::to_string(x_query.cols()) + "/" +
                    std::to_string(x_source.cols()) + " does not match weights (" +
                    std::to_string(in) + ")");
  }
  const auto c = w.wq.cols();
  if (w.wk.rows() != in || w.wv.rows() != in || w.wk.cols() != c || w.wv.cols() != c ||
      w.mlp0.rows() != in + c || w.mlp0.cols() != 2 * c || w.mlp1.rows() != 2 * c ||
      w.mlp1.cols() != c || w.ln_g.size() != 2 * c || w.ln_b.size() != 2 * c) {
    throw DataError("encoder_layer: inconsistent layer weight shapes");
  }
}

}  // namespace

Matrix encoder_layer(const Matrix& x_query, const Matrix& x_source, const LayerWeights& w,
                     const MessageKernel& kernel, int heads, bool project_residual,
                     LayerCache* cache) {
  check_layer_shapes(x_query, x_source, w);
  const Eigen::Index rows = x_query.rows();
  const Eigen::Index in = x_query.cols();
  const Eigen::Index c = w.wq.cols();

  Matrix q = x_query * w.wq;
  Matrix k = x_source * w.wk;
  Matrix v = x_source * w.wv;
  const Matrix message = compute_message(q, k, v, kernel, heads);

  Matrix concat(rows, in + c);
  concat.leftCols(in) = x_query;
  concat.rightCols(c) = message;
  const Matrix h1 = concat * w.mlp0;

  Matrix normed(rows, 2 * c);
  Vector inv_std(rows);
  for (Eigen::Index r = 0; r < rows; ++r) {
    const double mean = h1.row(r).mean();
    const double var = (h1.row(r).array() - mean).square().mean();
    inv_std[r] = 1.0 / std::sqrt(var + kLayerNormEps);
    normed.row(r) = (h1.row(r).array() - mean) * inv_std[r];
  }
  Matrix pre_act = (normed.array().rowwise() * w.ln_g.transpose().array()).rowwise() +
                   w.ln_b.transpose().array();
  Matrix act = pre_act.cwiseMax(0.0);

  Matrix out = act * w.mlp1;
  if (project_residual) {
    out += x_query * w.wv;
  } else {
    if (in != c) throw DataError("encoder_layer: residual needs input width == hidden width");
    out += x_query;
  }

  if (cache) {
    cache->x_query = x_query;
    cache->x_source = x_source;
    cache->q = std::move(q);
    cache->k = std::move(k);
    cache->v = std::move(v);
    cache->concat = std::move(concat);
    cache->normed = std::move(normed);
    cache->inv_std = std::move(inv_std);
    cache->pre_act = std::move(pre_act);
    cache->act = std::move(act);
    cache->project_residual = project_residual;
  }
  return out;
}

void encoder_layer_backward(const LayerCache& cache, const LayerWeights& w,
                            const MessageKernel& kernel, int heads, const Matrix& d_out,
                            LayerWeights& grads, Matrix& d_query, Matrix& d_source) {
  const Eigen::Index in = cache.x_query.cols();
  const Eigen::Index c = w.wq.cols();
  const Eigen::Index rows = cache.x_query.rows();

  // out = act * W1 + residual
  grads.mlp1.noalias() += cache.act.transpose() * d_out;
  Matrix d_act = d_out * w.mlp1.transpose();
  if (cache.project_residual) {
    grads.wv.noalias() += cache.x_query.transpose() * d_out;
    d_query.noalias() += d_out * w.wv.transpose();
  } else {
    d_query += d_out;
  }

  // act = relu(pre_act); pre_act = normed * g + b
  Matrix d_pre = (cache.pre_act.array() > 0.0).select(d_act, 0.0);
  grads.ln_g += (d_pre.array() * cache.normed.array()).colwise().sum().transpose().matrix();
  grads.ln_b += d_pre.colwise().sum().transpose();
  Matrix d_normed = d_pre.array().rowwise() * w.ln_g.transpose().array();

  // Layer norm.
  Matrix d_h1(rows, 2 * c);
  for (Eigen::Index r = 0; r < rows; ++r) {
    const double mean_d = d_normed.row(r).mean();
    const double mean_dn = d_normed.row(r).dot(cache.normed.row(r)) / static_cast<double>(2 * c);
    d_h1.row(r) = cache.inv_std[r] *
                  (d_normed.row(r).array() - mean_d - cache.normed.row(r).array() * mean_dn);
  }

  // h1 = concat * W0
  grads.mlp0.noalias() += cache.concat.transpose() * d_h1;
  const Matrix d_concat = d_h1 * w.mlp0.transpose();
  d_query += d_concat.leftCols(in);
  const Matrix d_msg = d_concat.rightCols(c);

  const AttentionGrads ag = message_backward(cache.q, cache.k, cache.v, d_msg, kernel, heads);
  grads.wq.noalias() += cache.x_query.transpose() * ag.dq;
  grads.wk.noalias() += cache.x_source.transpose() * ag.dk;
  grads.wv.noalias() += cache.x_source.transpose() * ag.dv;
  d_query.noalias() += ag.dq * w.wq.transpose();
  d_source.noalias() += ag.dk * w.wk.transpose();
  d_source.noalias() += ag.dv * w.wv.transpose();
}

DescriptorPair self_attention_update(const Matrix& xs, const Matrix& xt, const LayerWeights& w,
                                     int heads, bool project_residual) {
  return {encoder_layer(xs, xs, w, MessageKernel::linear(), heads, project_residual),
          encoder_layer(xt, xt, w, MessageKernel::linear(), heads, project_residual)};
}

DescriptorPair cross_attention_update(const Matrix& xs, const Matrix& xt, const LayerWeights& w,
                                      int heads) {
  return {encoder_layer(xs, xt, w, MessageKernel::linear(), heads),
          encoder_layer(xt, xs, w, MessageKernel::linear(), heads)};
}

DescriptorPair pairwise_layer_update(const Matrix& xs, const Matrix& xt,
                                     std::span<const NeighborhoodPair> pairs,
                                     const LayerWeights& w, int heads) {
  std::vector<NeighborhoodPair> swapped;
  swapped.reserve(pairs.size());
  for (const auto& p : pairs) swapped.push_back(p.swapped());
  return {encoder_layer(xs, xt, w, MessageKernel::pairwise(pairs), heads),
          encoder_layer(xt, xs, w, MessageKernel::pairwise(swapped), heads)};
}

Matrix normalize_rows(const Matrix& x) {
  Matrix out = x;
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const double n = x.row(r).norm();
    if (n > 0.0) out.row(r) /= n;
  }
  return out;
}

namespace {

MessageKernel global_kernel(const ForwardOptions& options) {
  return options.global_kernel == MessageKernel::Kind::kSoftmax ? MessageKernel::softmax()
                                                                : MessageKernel::linear();
}

std::vector<NeighborhoodPair> swapped_all(const std::vector<NeighborhoodPair>& pairs) {
  std::vector<NeighborhoodPair> out;
  out.reserve(pairs.size());
  for (const auto& p : pairs) out.push_back(p.swapped());
  return out;
}

}  // namespace

EncodedPair forward(const KeypointSet& source, const KeypointSet& target,
                    const NetworkWeights& weights, const NeighborhoodConfig& neigh_cfg,
                    const ForwardOptions& options, ForwardCache* cache) {
  weights.validate();
  const NetworkConfig& cfg = weights.config;
  if (source.dim() != cfg.input_dim || target.dim() != cfg.input_dim) {
    throw DataError("descriptor dimension " + std::to_string(source.dim()) + "/" +
                    std::to_string(target.dim()) + " does not match network input_dim " +
                    std::to_string(cfg.input_dim));
  }
  const std::size_t n_layers = weights.layers.size();
  if (cache) {
    cache->source.assign(n_layers, {});
    cache->target.assign(n_layers, {});
    cache->ran.assign(n_layers, 1);
  }
  const MessageKernel global = global_kernel(options);

  Matrix xs = source.descriptors;
  Matrix xt = target.descriptors;
  EncodedPair enc;
  std::vector<NeighborhoodPair> swapped;
  for (std::size_t l = 0; l < n_layers; ++l) {
    const LayerWeights& w = weights.layers[l];
    LayerCache* cs = cache ? &cache->source[l] : nullptr;
    LayerCache* ct = cache ? &cache->target[l] : nullptr;
    switch (weights.kinds[l]) {
      case LayerKind::kSelf: {
        const bool project = l == 0;
        Matrix ns = encoder_layer(xs, xs, w, global, cfg.heads, project, cs);
        Matrix nt = encoder_layer(xt, xt, w, global, cfg.heads, project, ct);
        xs = std::move(ns);
        xt = std::move(nt);
        break;
      }
      case LayerKind::kCross: {
        Matrix ns = encoder_layer(xs, xt, w, global, cfg.heads, false, cs);
        Matrix nt = encoder_layer(xt, xs, w, global, cfg.heads, false, ct);
        xs = std::move(ns);
        xt = std::move(nt);
        if (l + 1 == 2 * static_cast<std::size_t>(cfg.l1)) {
          enc.fs_hat = xs;
          enc.ft_hat = xt;
          if (cfg.l2 > 0 && !options.skip_pairwise) {
            enc.neighborhoods = select_neighborhoods(xs, xt, source, target, neigh_cfg);
            swapped = swapped_all(enc.neighborhoods);
          }
        }
        break;
      }
      case LayerKind::kPair: {
        if (options.skip_pairwise) {
          if (cache) cache->ran[l] = 0;
          break;
        }
        Matrix ns = encoder_layer(xs, xt, w, MessageKernel::pairwise(enc.neighborhoods),
                                  cfg.heads, false, cs);
        Matrix nt = encoder_layer(xt, xs, w, MessageKernel::pairwise(swapped), cfg.heads, false, ct);
        xs = std::move(ns);
        xt = std::move(nt);
        break;
      }
    }
  }
  enc.xs_hat = normalize_rows(xs);
  enc.xt_hat = normalize_rows(xt);
  if (cache) {
    cache->final_s = std::move(xs);
    cache->final_t = std::move(xt);
  }
  return enc;
}

namespace {

Matrix normalize_backward(const Matrix& x, const Matrix& y, const Matrix& dy) {
  Matrix dx = Matrix::Zero(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const double n = x.row(r).norm();
    if (n == 0.0) continue;
    dx.row(r) = (dy.row(r) - y.row(r) * y.row(r).dot(dy.row(r))) / n;
  }
  return dx;
}

}  // namespace

NetworkWeights forward_backward(const EncodedPair& enc, const ForwardCache& cache,
                                const NetworkWeights& weights, const Matrix& d_xs_hat,
                                const Matrix& d_xt_hat, const Matrix& d_fs_hat,
                                const Matrix& d_ft_hat) {
  const NetworkConfig& cfg = weights.config;
  NetworkWeights grads = NetworkWeights::zeros(cfg);
  const std::vector<NeighborhoodPair> swapped = swapped_all(enc.neighborhoods);

  Matrix ds = normalize_backward(cache.final_s, enc.xs_hat, d_xs_hat);
  Matrix dt = normalize_backward(cache.final_t, enc.xt_hat, d_xt_hat);

  const std::size_t capture = 2 * static_cast<std::size_t>(cfg.l1);
  for (std::size_t l = weights.layers.size(); l-- > 0;) {
    const LayerWeights& w = weights.layers[l];
    const LayerCache& cs = cache.source[l];
    const LayerCache& ct = cache.target[l];
    if (l + 1 == capture) {
      ds += d_fs_hat;
      dt += d_ft_hat;
    }
    if (!cache.ran[l]) continue;
    Matrix d_in_s = Matrix::Zero(cs.x_query.rows(), cs.x_query.cols());
    Matrix d_in_t = Matrix::Zero(ct.x_query.rows(), ct.x_query.cols());
    switch (weights.kinds[l]) {
      case LayerKind::kSelf: {
        encoder_layer_backward(cs, w, MessageKernel::linear(), cfg.heads, ds, grads.layers[l],
                               d_in_s, d_in_s);
        encoder_layer_backward(ct, w, MessageKernel::linear(), cfg.heads, dt, grads.layers[l],
                               d_in_t, d_in_t);
        break;
      }
      case LayerKind::kCross:
        encoder_layer_backward(cs, w, MessageKernel::linear(), cfg.heads, ds, grads.layers[l],
                               d_in_s, d_in_t);
        encoder_layer_backward(ct, w, MessageKernel::linear(), cfg.heads, dt, grads.layers[l],
                               d_in_t, d_in_s);
        break;
      case LayerKind::kPair:
        encoder_layer_backward(cs, w, MessageKernel::pairwise(enc.neighborhoods), cfg.heads, ds,
                               grads.layers[l], d_in_s, d_in_t);
        encoder_layer_backward(ct, w, MessageKernel::pairwise(swapped), cfg.heads, dt,
                               grads.layers[l], d_in_t, d_in_s);
        break;
    }
    ds = std::move(d_in_s);
    dt = std::move(d_in_t);
  }
  return grads;
}

}  // namespace lamatch
