#include "lamatch/weights.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <map>

#include "lamatch/formats.hpp"

namespace lamatch {

namespace {

constexpr std::uint32_t kLawtVersion = 1;
constexpr std::string_view kFields[] = {"wq", "wk", "wv", "mlp0", "mlp1", "ln_g", "ln_b"};

LayerKind kind_at(const NetworkConfig& cfg, std::size_t l) {
  if (l < 2 * cfg.l1) return l % 2 == 0 ? LayerKind::kSelf : LayerKind::kCross;
  return LayerKind::kPair;
}

}  // namespace

void NetworkConfig::validate() const {
  if (input_dim < 1) throw ConfigError("input_dim must be >= 1");
  if (hidden_dim < 1) throw ConfigError("hidden_dim must be >= 1");
  if (heads < 1 || hidden_dim % static_cast<std::uint32_t>(heads) != 0) {
    throw ConfigError("hidden_dim " + std::to_string(hidden_dim) +
                      " is not divisible by heads=" + std::to_string(heads));
  }
  if (l1 < 1) throw ConfigError("l1 must be >= 1");
}

const char* layer_kind_name(LayerKind kind) {
  switch (kind) {
    case LayerKind::kSelf:
      return "self";
    case LayerKind::kCross:
      return "cross";
    case LayerKind::kPair:
      return "pair";
  }
  return "?";
}

std::string tensor_name(std::size_t layer, LayerKind kind, std::string_view field) {
  std::string s = "layer" + std::to_string(layer) + "." + layer_kind_name(kind) + ".";
  s += field;
  return s;
}

LayerWeights LayerWeights::zeros(std::size_t in_dim, std::size_t hidden) {
  const auto in = static_cast<Eigen::Index>(in_dim), c = static_cast<Eigen::Index>(hidden);
  LayerWeights w;
  w.wq = Matrix::Zero(in, c);
  w.wk = Matrix::Zero(in, c);
  w.wv = Matrix::Zero(in, c);
  w.mlp0 = Matrix::Zero(in + c, 2 * c);
  w.mlp1 = Matrix::Zero(2 * c, c);
  w.ln_g = Vector::Zero(2 * c);
  w.ln_b = Vector::Zero(2 * c);
  return w;
}

void LayerWeights::set_zero() {
  wq.setZero();
  wk.setZero();
  wv.setZero();
  mlp0.setZero();
  mlp1.setZero();
  ln_g.setZero();
  ln_b.setZero();
}

LayerWeights& LayerWeights::operator+=(const LayerWeights& o) {
  wq += o.wq;
  wk += o.wk;
  wv += o.wv;
  mlp0 += o.mlp0;
  mlp1 += o.mlp1;
  ln_g += o.ln_g;
  ln_b += o.ln_b;
  return *this;
}

LayerWeights& LayerWeights::operator*=(double s) {
  wq *= s;
  wk *= s;
  wv *= s;
  mlp0 *= s;
  mlp1 *= s;
  ln_g *= s;
  ln_b *= s;
  return *this;
}

NetworkWeights NetworkWeights::zeros(const NetworkConfig& cfg) {
  cfg.validate();
  NetworkWeights w;
  w.config = cfg;
  for (std::size_t l = 0; l < cfg.layer_count(); ++l) {
    w.kinds.push_back(kind_at(cfg, l));
    w.layers.push_back(LayerWeights::zeros(l == 0 ? cfg.input_dim : cfg.hidden_dim, cfg.hidden_dim));
  }
  return w;
}

void NetworkWeights::validate() const {
  config.validate();
  if (layers.size() != config.layer_count() || kinds.size() != layers.size()) {
    throw ConfigError("layer count does not match l1/l2");
  }
  const NetworkWeights ref = zeros(config);
  for (std::size_t l = 0; l < layers.size(); ++l) {
    if (kinds[l] != ref.kinds[l]) throw ConfigError("unexpected layer kind at layer " + std::to_string(l));
    const auto& a = layers[l];
    const auto& b = ref.layers[l];
    const bool ok = a.wq.rows() == b.wq.rows() && a.wq.cols() == b.wq.cols() &&
                    a.wk.rows() == b.wk.rows() && a.wk.cols() == b.wk.cols() &&
                    a.wv.rows() == b.wv.rows() && a.wv.cols() == b.wv.cols() &&
                    a.mlp0.rows() == b.mlp0.rows() && a.mlp0.cols() == b.mlp0.cols() &&
                    a.mlp1.rows() == b.mlp1.rows() && a.mlp1.cols() == b.mlp1.cols() &&
                    a.ln_g.size() == b.ln_g.size() && a.ln_b.size() == b.ln_b.size();
    if (!ok) throw ConfigError("tensor shapes of layer " + std::to_string(l) + " do not match the config");
  }
}

std::size_t NetworkWeights::parameter_count() const {
  std::size_t n = 0;
  for_each_tensor([&](const std::string&, const auto& t) { n += static_cast<std::size_t>(t.size()); });
  return n;
}

NetworkWeights init_weights(const NetworkConfig& cfg, std::uint64_t seed) {
  NetworkWeights w = NetworkWeights::zeros(cfg);
  const std::uint64_t base = derive_seed(seed, "init_weights");
  w.for_each_tensor([&](const std::string& name, auto& t) {
    if (name.ends_with("ln_g")) {
      t.setOnes();
    } else if (name.ends_with("ln_b")) {
      t.setZero();
    } else {
      Rng rng(derive_seed(base, name));
      const double a = std::sqrt(6.0 / static_cast<double>(t.rows() + t.cols()));
      for (Eigen::Index k = 0; k < t.size(); ++k) t.data()[k] = rng.uniform(-a, a);
    }
  });
  return w;
}

NetworkWeights identity_weights(const NetworkConfig& cfg) {
  NetworkWeights w = NetworkWeights::zeros(cfg);
  auto& wv = w.layers.front().wv;
  for (Eigen::Index k = 0; k < std::min(wv.rows(), wv.cols()); ++k) wv(k, k) = 1.0;
  return w;
}

std::vector<std::uint8_t> encode_lawt(std::span<const Tensor> tensors) {
  ByteWriter w;
  w.bytes("LAWT");
  w.u32(kLawtVersion);
  w.u32(static_cast<std::uint32_t>(tensors.size()));
  for (const auto& t : tensors) {
    if (t.name.size() > 0xffff) throw DataError("tensor name too long: " + t.name.substr(0, 64));
    if (t.dims.size() > 0xff) throw DataError("too many dimensions in tensor " + t.name);
    std::uint64_t count = 1;
    for (auto d : t.dims) count *= d;
    if (count != t.data.size()) throw DataError("tensor " + t.name + ": data size mismatches dims");
    w.u16(static_cast<std::uint16_t>(t.name.size()));
    w.bytes(t.name);
    w.u8(static_cast<std::uint8_t>(t.dims.size()));
    for (auto d : t.dims) w.u32(d);
    for (float v : t.data) w.f32(v);
  }
  return w.take();
}

std::vector<Tensor> decode_lawt(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  if (r.bytes(4) != "LAWT") throw DataError("bad LAWT magic");
  const std::uint32_t version = r.u32();
  if (version != kLawtVersion) throw DataError("unsupported LAWT version " + std::to_string(version));
  const std::uint32_t count = r.u32();
  std::vector<Tensor> out;
  for (std::uint32_t t = 0; t < count; ++t) {
    Tensor tensor;
    try {
      tensor.name = r.bytes(r.u16());
    } catch (const DataError& e) {
      throw DataError("tensor #" + std::to_string(t) + ": truncated name (" + e.what() + ")");
    }
    try {
      const std::uint8_t ndim = r.u8();
      std::uint64_t n = 1;
      for (std::uint8_t d = 0; d < ndim; ++d) {
        tensor.dims.push_back(r.u32());
        n *= tensor.dims.back();
      }
      if (n * 4 > r.remaining()) {
        throw DataError("shape needs " + std::to_string(n * 4) + " bytes, only " +
                        std::to_string(r.remaining()) + " left");
      }
      tensor.data.resize(n);
      for (auto& v : tensor.data) v = r.f32();
    } catch (const DataError& e) {
      throw DataError("tensor '" + tensor.name + "': " + e.what());
    }
    out.push_back(std::move(tensor));
  }
  if (r.remaining() != 0) {
    throw DataError("LAWT has " + std::to_string(r.remaining()) + " trailing bytes");
  }
  return out;
}

std::vector<Tensor> weights_to_tensors(const NetworkWeights& w, std::string_view suffix) {
  std::vector<Tensor> out;
  w.for_each_tensor([&](const std::string& name, const auto& t) {
    Tensor tensor;
    tensor.name = name + std::string(suffix);
    if (t.cols() == 1 && name.find(".ln_") != std::string::npos) {
      tensor.dims = {static_cast<std::uint32_t>(t.size())};
    } else {
      tensor.dims = {static_cast<std::uint32_t>(t.rows()), static_cast<std::uint32_t>(t.cols())};
    }
    tensor.data.resize(static_cast<std::size_t>(t.size()));
    for (Eigen::Index k = 0; k < t.size(); ++k) tensor.data[k] = static_cast<float>(t.data()[k]);
    out.push_back(std::move(tensor));
  });
  return out;
}

namespace {

struct ParsedName {
  std::size_t layer;
  LayerKind kind;
  std::string field;
};

std::optional<ParsedName> parse_name(std::string_view name) {
  if (!name.starts_with("layer")) return std::nullopt;
  name.remove_prefix(5);
  std::size_t idx = 0;
  const auto [ptr, ec] = std::from_chars(name.data(), name.data() + name.size(), idx);
  if (ec != std::errc() || ptr == name.data()) return std::nullopt;
  name.remove_prefix(static_cast<std::size_t>(ptr - name.data()));
  if (!name.starts_with(".")) return std::nullopt;
  name.remove_prefix(1);
  const auto dot = name.find('.');
  if (dot == std::string_view::npos) return std::nullopt;
  const std::string_view kind = name.substr(0, dot);
  ParsedName p{idx, LayerKind::kSelf, std::string(name.substr(dot + 1))};
  if (kind == "self") {
    p.kind = LayerKind::kSelf;
  } else if (kind == "cross") {
    p.kind = LayerKind::kCross;
  } else if (kind == "pair") {
    p.kind = LayerKind::kPair;
  } else {
    return std::nullopt;
  }
  if (std::find(std::begin(kFields), std::end(kFields), p.field) == std::end(kFields)) {
    return std::nullopt;
  }
  return p;
}

}  // namespace

NetworkWeights tensors_to_weights(std::span<const Tensor> tensors, int heads,
                                  std::string_view suffix) {
  std::map<std::string, const Tensor*> by_name;
  std::size_t n_layers = 0;
  std::map<std::size_t, LayerKind> kinds;
  for (const auto& t : tensors) {
    if (!t.name.ends_with(suffix)) continue;
    const std::string base = t.name.substr(0, t.name.size() - suffix.size());
    const auto parsed = parse_name(base);
    if (!parsed) throw DataError("unrecognized tensor '" + t.name + "'");
    if (!by_name.emplace(base, &t).second) throw DataError("duplicate tensor '" + t.name + "'");
    n_layers = std::max(n_layers, parsed->layer + 1);
    auto [it, fresh] = kinds.emplace(parsed->layer, parsed->kind);
    if (!fresh && it->second != parsed->kind) {
      throw DataError("tensor '" + t.name + "' disagrees on the kind of layer " +
                      std::to_string(parsed->layer));
    }
  }
  if (n_layers == 0) throw DataError("weight file contains no layers");

  NetworkConfig cfg;
  cfg.heads = heads;
  std::size_t n_self = 0, n_cross = 0, n_pair = 0;
  for (std::size_t l = 0; l < n_layers; ++l) {
    auto it = kinds.find(l);
    if (it == kinds.end()) throw DataError("missing tensors for layer " + std::to_string(l));
    (it->second == LayerKind::kSelf ? n_self : it->second == LayerKind::kCross ? n_cross : n_pair)++;
  }
  if (n_self != n_cross) throw DataError("self and cross layer counts differ");
  cfg.l1 = static_cast<std::uint32_t>(n_self);
  cfg.l2 = static_cast<std::uint32_t>(n_pair);

  const std::string first = tensor_name(0, LayerKind::kSelf, "wq");
  auto wq0 = by_name.find(first);
  if (wq0 == by_name.end()) throw DataError("missing tensor '" + first + std::string(suffix) + "'");
  if (wq0->second->dims.size() != 2) throw DataError("tensor '" + wq0->second->name + "' must be 2-D");
  cfg.input_dim = wq0->second->dims[0];
  cfg.hidden_dim = wq0->second->dims[1];
  try {
    cfg.validate();
  } catch (const ConfigError& e) {
    throw DataError("tensor '" + wq0->second->name + "' implies an invalid network: " + e.what());
  }

  NetworkWeights w = NetworkWeights::zeros(cfg);
  w.for_each_tensor([&](const std::string& name, auto& t) {
    auto it = by_name.find(name);
    const std::string full = name + std::string(suffix);
    if (it == by_name.end()) throw DataError("missing tensor '" + full + "'");
    const Tensor& src = *it->second;
    const bool vec = name.find(".ln_") != std::string::npos;
    const bool shape_ok =
        vec ? (src.dims.size() == 1 && src.dims[0] == t.size())
            : (src.dims.size() == 2 && src.dims[0] == t.rows() && src.dims[1] == t.cols());
    if (!shape_ok) {
      std::string dims;
      for (auto d : src.dims) dims += (dims.empty() ? "" : "x") + std::to_string(d);
      throw DataError("tensor '" + full + "' has shape [" + dims + "], expected " +
                      std::to_string(t.rows()) + "x" + std::to_string(t.cols()));
    }
    for (Eigen::Index k = 0; k < t.size(); ++k) {
      const float v = src.data[static_cast<std::size_t>(k)];
      if (!std::isfinite(v)) throw DataError("tensor '" + full + "' contains non-finite values");
      t.data()[k] = v;
    }
    by_name.erase(it);
  });
  return w;
}

void save_weights(const std::filesystem::path& path, const NetworkWeights& w) {
  write_file(path, encode_lawt(weights_to_tensors(w)));
}

NetworkWeights load_weights(const std::filesystem::path& path, int heads) {
  try {
    return tensors_to_weights(decode_lawt(read_file(path)), heads);
  } catch (const DataError& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

}  // namespace lamatch
