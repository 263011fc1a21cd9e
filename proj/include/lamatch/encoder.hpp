#pragma once

#include <span>
#include <vector>

#include "lamatch/attention.hpp"
#include "lamatch/geometry.hpp"
#include "lamatch/neighborhood.hpp"
#include "lamatch/weights.hpp"

namespace lamatch {

// Which aggregation an encoder layer uses to form its message.
struct MessageKernel {
  enum class Kind { kLinear, kPairwise, kSoftmax };
  Kind kind = Kind::kLinear;
  // Pairwise only; oriented query-side first.
  std::span<const NeighborhoodPair> pairs;

  static MessageKernel linear() { return {}; }
  static MessageKernel softmax() { return {Kind::kSoftmax, {}}; }
  static MessageKernel pairwise(std::span<const NeighborhoodPair> p) { return {Kind::kPairwise, p}; }
};

// Intermediates of one encoder_layer call kept for the backward pass.
struct LayerCache {
  Matrix x_query, x_source;
  Matrix q, k, v;
  Matrix concat;   // [x_query | message]
  Matrix normed;   // layer-norm output before gain/bias
  Vector inv_std;  // per row
  Matrix pre_act;  // normed * g + b
  Matrix act;      // relu(pre_act)
  bool project_residual = false;
};

inline constexpr double kLayerNormEps = 1e-5;

// m = multi_head(kernel, x_query Wq, x_source Wk, x_source Wv)
// out = r + relu(LN(concat(x_query, m) W0)) W1
// where r = x_query, or x_query Wv for the dimension-reducing input layer.
Matrix encoder_layer(const Matrix& x_query, const Matrix& x_source, const LayerWeights& w,
                     const MessageKernel& kernel, int heads, bool project_residual = false,
                     LayerCache* cache = nullptr);

// Backward of encoder_layer. Accumulates parameter gradients into `grads`
// and the input gradients into d_query / d_source (which must be sized).
void encoder_layer_backward(const LayerCache& cache, const LayerWeights& w,
                            const MessageKernel& kernel, int heads, const Matrix& d_out,
                            LayerWeights& grads, Matrix& d_query, Matrix& d_source);

struct DescriptorPair {
  Matrix source, target;
};

DescriptorPair self_attention_update(const Matrix& xs, const Matrix& xt, const LayerWeights& w,
                                     int heads, bool project_residual = false);
DescriptorPair cross_attention_update(const Matrix& xs, const Matrix& xt, const LayerWeights& w,
                                      int heads);
DescriptorPair pairwise_layer_update(const Matrix& xs, const Matrix& xt,
                                     std::span<const NeighborhoodPair> pairs,
                                     const LayerWeights& w, int heads);

struct EncodedPair {
  Matrix xs_hat, xt_hat;  // final, row-L2-normalized
  Matrix fs_hat, ft_hat;  // output of the last cross-attention layer
  std::vector<NeighborhoodPair> neighborhoods;  // used by the pairwise layers
};

struct ForwardCache {
  std::vector<LayerCache> source, target;  // one per layer
  std::vector<char> ran;                   // layers skipped by the options are 0
  Matrix final_s, final_t;                 // before normalization
};

struct ForwardOptions {
  // Kernel for the self/cross layers; softmax is only used for benchmarking.
  MessageKernel::Kind global_kernel = MessageKernel::Kind::kLinear;
  bool skip_pairwise = false;
};

EncodedPair forward(const KeypointSet& source, const KeypointSet& target,
                    const NetworkWeights& weights, const NeighborhoodConfig& neigh_cfg,
                    const ForwardOptions& options = {}, ForwardCache* cache = nullptr);

// Gradient of a scalar objective w.r.t. all weights given its gradients
// w.r.t. the encoder outputs. Neighborhood index sets are held fixed.
NetworkWeights forward_backward(const EncodedPair& enc, const ForwardCache& cache,
                                const NetworkWeights& weights, const Matrix& d_xs_hat,
                                const Matrix& d_xt_hat, const Matrix& d_fs_hat,
                                const Matrix& d_ft_hat);

// Row-wise L2 normalization; zero rows stay zero.
Matrix normalize_rows(const Matrix& x);

}  // namespace lamatch
