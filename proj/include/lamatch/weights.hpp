#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "lamatch/common.hpp"

namespace lamatch {

struct NetworkConfig {
  std::uint32_t input_dim = 256;  // D
  std::uint32_t hidden_dim = 64;  // C'
  int heads = 8;
  std::uint32_t l1 = 4;  // self/cross loop count
  std::uint32_t l2 = 2;  // pairwise loop count

  void validate() const;
  std::size_t layer_count() const { return 2 * l1 + l2; }
};

enum class LayerKind { kSelf, kCross, kPair };

const char* layer_kind_name(LayerKind kind);

// Projections are applied as x * W. The first layer projects D -> C'; every
// other layer is C' -> C'. The MLP maps concat(x, message) -> 2C' -> C'.
struct LayerWeights {
  Matrix wq, wk, wv;  // in x C'
  Matrix mlp0;        // (in + C') x 2C'
  Matrix mlp1;        // 2C' x C'
  Vector ln_g, ln_b;  // 2C'

  static LayerWeights zeros(std::size_t in_dim, std::size_t hidden);
  void set_zero();
  LayerWeights& operator+=(const LayerWeights& other);
  LayerWeights& operator*=(double s);
};

struct NetworkWeights {
  NetworkConfig config;
  std::vector<LayerKind> kinds;
  std::vector<LayerWeights> layers;

  // Layers 0..2*l1-1 alternate self/cross; the remaining l2 are pairwise.
  static NetworkWeights zeros(const NetworkConfig& cfg);
  void validate() const;
  std::size_t parameter_count() const;

  // Visits every tensor as (name, Matrix or Vector) in file order.
  template <typename F>
  void for_each_tensor(F&& f);
  template <typename F>
  void for_each_tensor(F&& f) const;
};

std::string tensor_name(std::size_t layer, LayerKind kind, std::string_view field);

// Xavier-uniform projections and MLP weights, unit layer-norm gain and zero
// bias. Deterministic per seed.
NetworkWeights init_weights(const NetworkConfig& cfg, std::uint64_t seed);

// Weights under which the network passes descriptors through unchanged
// (when D == C') or keeps their first C' components: the input layer's value
// projection is the identity, everything else is zero.
NetworkWeights identity_weights(const NetworkConfig& cfg);

// LAWT tensor table: "LAWT", u32 version=1, u32 tensor_count, then per
// tensor: u16 name_len, name, u8 ndim, u32 dims[ndim], f32 row-major data.
struct Tensor {
  std::string name;
  std::vector<std::uint32_t> dims;
  std::vector<float> data;
};

std::vector<std::uint8_t> encode_lawt(std::span<const Tensor> tensors);
std::vector<Tensor> decode_lawt(std::span<const std::uint8_t> bytes);

std::vector<Tensor> weights_to_tensors(const NetworkWeights& w, std::string_view suffix = "");
// `heads` is not stored in the file and comes from the caller.
NetworkWeights tensors_to_weights(std::span<const Tensor> tensors, int heads,
                                  std::string_view suffix = "");

void save_weights(const std::filesystem::path& path, const NetworkWeights& w);
NetworkWeights load_weights(const std::filesystem::path& path, int heads);

// ---------------------------------------------------------------------------

template <typename F>
void NetworkWeights::for_each_tensor(F&& f) {
  for (std::size_t l = 0; l < layers.size(); ++l) {
    auto& lw = layers[l];
    f(tensor_name(l, kinds[l], "wq"), lw.wq);
    f(tensor_name(l, kinds[l], "wk"), lw.wk);
    f(tensor_name(l, kinds[l], "wv"), lw.wv);
    f(tensor_name(l, kinds[l], "mlp0"), lw.mlp0);
    f(tensor_name(l, kinds[l], "mlp1"), lw.mlp1);
    f(tensor_name(l, kinds[l], "ln_g"), lw.ln_g);
    f(tensor_name(l, kinds[l], "ln_b"), lw.ln_b);
  }
}

template <typename F>
void NetworkWeights::for_each_tensor(F&& f) const {
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const auto& lw = layers[l];
    f(tensor_name(l, kinds[l], "wq"), lw.wq);
    f(tensor_name(l, kinds[l], "wk"), lw.wk);
    f(tensor_name(l, kinds[l], "wv"), lw.wv);
    f(tensor_name(l, kinds[l], "mlp0"), lw.mlp0);
    f(tensor_name(l, kinds[l], "mlp1"), lw.mlp1);
    f(tensor_name(l, kinds[l], "ln_g"), lw.ln_g);
    f(tensor_name(l, kinds[l], "ln_b"), lw.ln_b);
  }
}

}  // namespace lamatch
