#include "lamatch/training.hpp"

#include <cmath>
#include <sstream>

#include "lamatch/formats.hpp"

namespace lamatch {

namespace {

// max(x, 0) that lets NaN through, so a broken forward pass cannot hide
// behind a closed hinge.
double hinge(double x) { return std::isnan(x) || x > 0.0 ? x : 0.0; }

}  // namespace

void LossConfig::validate() const {
  if (!(m_p >= 0.0)) throw ConfigError("m_p must be >= 0");
  if (!(m_n > m_p)) throw ConfigError("m_n must exceed m_p");
  if (!(learning_rate >= 0.0)) throw ConfigError("learning_rate must be >= 0");
  if (!(decay > 0.0 && decay <= 1.0)) throw ConfigError("decay must be in (0, 1]");
}

double squared_distance(const Matrix& a, std::size_t i, const Matrix& b, std::size_t j) {
  return (a.row(static_cast<Eigen::Index>(i)) - b.row(static_cast<Eigen::Index>(j))).squaredNorm();
}

RankingTerm ranking_term(const Matrix& xs, const Matrix& xt, std::size_t i, std::size_t j,
                         const LossConfig& cfg) {
  const auto n_s = static_cast<std::size_t>(xs.rows());
  const auto n_t = static_cast<std::size_t>(xt.rows());
  if (n_s < 2 || n_t < 2) throw DataError("ranking loss needs at least 2 keypoints per side");
  if (i >= n_s || j >= n_t) throw DataError("ground-truth index out of range");

  RankingTerm r;
  r.positive = squared_distance(xs, i, xt, j);
  r.negative = kInf;
  for (std::size_t k = 0; k < n_t; ++k) {
    if (k == j) continue;
    const double d = squared_distance(xs, i, xt, k);
    if (d < r.negative) {
      r.negative = d;
      r.on_target = true;
      r.negative_index = k;
    }
  }
  for (std::size_t k = 0; k < n_s; ++k) {
    if (k == i) continue;
    const double d = squared_distance(xs, k, xt, j);
    if (d < r.negative) {
      r.negative = d;
      r.on_target = false;
      r.negative_index = k;
    }
  }
  const double pos = r.positive - cfg.m_p;
  const double neg = cfg.m_n - r.negative;
  r.positive_active = pos > 0.0;
  r.negative_active = neg > 0.0;
  r.value = hinge(pos) + hinge(neg);
  return r;
}

double ranking_loss(const Matrix& xs, const Matrix& xt, std::size_t i, std::size_t j,
                    const LossConfig& cfg) {
  return ranking_term(xs, xt, i, j, cfg).value;
}

double confidence(const Matrix& fs, std::size_t i, const Matrix& ft, std::size_t j) {
  if (fs.cols() != ft.cols()) throw DataError("confidence: feature widths differ");
  return fs.row(static_cast<Eigen::Index>(i)).dot(ft.row(static_cast<Eigen::Index>(j)));
}

double triplet_loss(const EncodedPair& enc, const GroundTruth& gt, const LossConfig& cfg) {
  if (gt.pairs.empty()) throw DataError("triplet loss needs at least one ground-truth pair");
  double total = 0.0;
  for (const auto& [i, j] : gt.pairs) {
    const double s = hinge(confidence(enc.fs_hat, i, enc.ft_hat, j));
    total += s * ranking_loss(enc.xs_hat, enc.xt_hat, i, j, cfg);
  }
  return total / static_cast<double>(gt.pairs.size());
}

LossAndGradient loss_gradient(const NetworkWeights& weights, const SyntheticPair& pair,
                              const LossConfig& cfg, const NeighborhoodConfig& neigh_cfg) {
  const GroundTruth& gt = pair.ground_truth;
  if (gt.pairs.empty()) throw DataError("triplet loss needs at least one ground-truth pair");
  ForwardCache cache;
  const EncodedPair enc = forward(pair.source, pair.target, weights, neigh_cfg, {}, &cache);

  Matrix d_xs = Matrix::Zero(enc.xs_hat.rows(), enc.xs_hat.cols());
  Matrix d_xt = Matrix::Zero(enc.xt_hat.rows(), enc.xt_hat.cols());
  Matrix d_fs = Matrix::Zero(enc.fs_hat.rows(), enc.fs_hat.cols());
  Matrix d_ft = Matrix::Zero(enc.ft_hat.rows(), enc.ft_hat.cols());
  const double scale = 1.0 / static_cast<double>(gt.pairs.size());

  LossAndGradient out;
  for (const auto& [pi, pj] : gt.pairs) {
    const auto i = static_cast<Eigen::Index>(pi);
    const auto j = static_cast<Eigen::Index>(pj);
    const double s_raw = confidence(enc.fs_hat, pi, enc.ft_hat, pj);
    const double s = hinge(s_raw);
    const RankingTerm r = ranking_term(enc.xs_hat, enc.xt_hat, pi, pj, cfg);
    out.loss += s * r.value;

    if (!cfg.detach_confidence && s_raw > 0.0 && r.value != 0.0) {
      d_fs.row(i) += scale * r.value * enc.ft_hat.row(j);
      d_ft.row(j) += scale * r.value * enc.fs_hat.row(i);
    }
    if (s == 0.0) continue;
    const double g = scale * s;
    if (r.positive_active) {
      const auto diff = (enc.xs_hat.row(i) - enc.xt_hat.row(j)).eval();
      d_xs.row(i) += 2.0 * g * diff;
      d_xt.row(j) -= 2.0 * g * diff;
    }
    if (r.negative_active) {
      // d/dD of (m_n - D) is -1.
      const auto k = static_cast<Eigen::Index>(r.negative_index);
      if (r.on_target) {
        const auto diff = (enc.xs_hat.row(i) - enc.xt_hat.row(k)).eval();
        d_xs.row(i) -= 2.0 * g * diff;
        d_xt.row(k) += 2.0 * g * diff;
      } else {
        const auto diff = (enc.xs_hat.row(k) - enc.xt_hat.row(j)).eval();
        d_xs.row(k) -= 2.0 * g * diff;
        d_xt.row(j) += 2.0 * g * diff;
      }
    }
  }
  out.loss *= scale;
  out.gradient = forward_backward(enc, cache, weights, d_xs, d_xt, d_fs, d_ft);
  return out;
}

double pair_loss(const NetworkWeights& weights, const SyntheticPair& pair, const LossConfig& cfg,
                 const NeighborhoodConfig& neigh_cfg) {
  const EncodedPair enc = forward(pair.source, pair.target, weights, neigh_cfg);
  return triplet_loss(enc, pair.ground_truth, cfg);
}

namespace {

struct EntryRef {
  std::size_t tensor;
  Eigen::Index row, col;
};

// Flat list of every scalar parameter position, in file order.
std::vector<EntryRef> all_entries(const NetworkWeights& w, std::vector<std::string>& names) {
  std::vector<EntryRef> out;
  names.clear();
  w.for_each_tensor([&](const std::string& name, const auto& t) {
    const std::size_t idx = names.size();
    names.push_back(name);
    const Eigen::Index rows = t.cols() == 1 ? 1 : t.rows();
    const Eigen::Index cols = t.cols() == 1 ? t.rows() : t.cols();
    for (Eigen::Index r = 0; r < rows; ++r) {
      for (Eigen::Index c = 0; c < cols; ++c) out.push_back({idx, r, c});
    }
  });
  return out;
}

double& entry_at(NetworkWeights& w, const EntryRef& e) {
  double* ptr = nullptr;
  std::size_t idx = 0;
  w.for_each_tensor([&](const std::string&, auto& t) {
    if (idx++ != e.tensor) return;
    if (t.cols() == 1) {
      ptr = &t(e.col, 0);
    } else {
      ptr = &t(e.row, e.col);
    }
  });
  return *ptr;
}

}  // namespace

GradcheckReport gradcheck(const NetworkWeights& weights, const SyntheticPair& pair,
                          const LossConfig& cfg, std::size_t samples, std::uint64_t seed, double h,
                          double tolerance, double abs_floor) {
  const LossAndGradient analytic = loss_gradient(weights, pair, cfg);
  std::vector<std::string> names;
  std::vector<EntryRef> entries = all_entries(weights, names);
  if (samples != 0 && samples < entries.size()) {
    // Partial Fisher-Yates for a seeded sample without replacement.
    Rng rng(derive_seed(seed, "gradcheck"));
    for (std::size_t k = 0; k < samples; ++k) {
      std::swap(entries[k], entries[k + rng.below(entries.size() - k)]);
    }
    entries.resize(samples);
  }

  GradcheckReport report;
  NetworkWeights probe = weights;
  NetworkWeights grad = analytic.gradient;
  std::size_t passed = 0;
  for (const auto& e : entries) {
    double& x = entry_at(probe, e);
    const double saved = x;
    x = saved + h;
    const double up = pair_loss(probe, pair, cfg);
    x = saved - h;
    const double down = pair_loss(probe, pair, cfg);
    x = saved;

    GradcheckEntry g;
    g.tensor = names[e.tensor];
    g.row = static_cast<std::size_t>(e.row);
    g.col = static_cast<std::size_t>(e.col);
    g.analytic = entry_at(grad, e);
    g.numeric = (up - down) / (2.0 * h);
    const double denom = std::max(std::abs(g.analytic), std::abs(g.numeric));
    g.rel_error = denom < abs_floor ? 0.0 : std::abs(g.analytic - g.numeric) / denom;
    report.max_rel_error = std::max(report.max_rel_error, g.rel_error);
    if (g.rel_error < tolerance) ++passed;
    report.entries.push_back(std::move(g));
  }
  report.pass_fraction =
      entries.empty() ? 1.0 : static_cast<double>(passed) / static_cast<double>(entries.size());
  return report;
}

TrainResult train_toy(const NetworkWeights& init, const std::vector<SyntheticPair>& dataset,
                      const LossConfig& cfg, std::uint64_t steps, std::uint64_t seed,
                      const NeighborhoodConfig& neigh_cfg, const StepCallback& on_step) {
  cfg.validate();
  if (dataset.empty()) throw ConfigError("training dataset is empty");
  constexpr double kBeta1 = 0.9, kBeta2 = 0.999, kEps = 1e-8;

  TrainResult out;
  out.weights = init;
  out.optimizer.m = NetworkWeights::zeros(init.config);
  out.optimizer.v = NetworkWeights::zeros(init.config);
  Rng picker(derive_seed(seed, "train_toy"));
  double lr = cfg.learning_rate;

  for (std::uint64_t step = 0; step < steps; ++step) {
    const SyntheticPair& pair = dataset[picker.below(dataset.size())];
    if (pair.ground_truth.pairs.empty()) continue;
    LossAndGradient lg = loss_gradient(out.weights, pair, cfg, neigh_cfg);
    if (!std::isfinite(lg.loss)) {
      throw Error("non-finite loss at step " + std::to_string(step));
    }
    const TracePoint tp{step, lg.loss, lr};
    out.trace.push_back(tp);
    if (on_step) on_step(tp);

    AdamState& st = out.optimizer;
    ++st.t;
    const double c1 = 1.0 - std::pow(kBeta1, static_cast<double>(st.t));
    const double c2 = 1.0 - std::pow(kBeta2, static_cast<double>(st.t));
    for (std::size_t l = 0; l < out.weights.layers.size(); ++l) {
      const auto update = [&](auto& w, auto& m, auto& v, const auto& g) {
        m = kBeta1 * m + (1.0 - kBeta1) * g;
        v = kBeta2 * v + (1.0 - kBeta2) * g.cwiseProduct(g);
        w.array() -= lr * (m.array() / c1) / ((v.array() / c2).sqrt() + kEps);
      };
      LayerWeights& w = out.weights.layers[l];
      LayerWeights& m = st.m.layers[l];
      LayerWeights& v = st.v.layers[l];
      const LayerWeights& g = lg.gradient.layers[l];
      update(w.wq, m.wq, v.wq, g.wq);
      update(w.wk, m.wk, v.wk, g.wk);
      update(w.wv, m.wv, v.wv, g.wv);
      update(w.mlp0, m.mlp0, v.mlp0, g.mlp0);
      update(w.mlp1, m.mlp1, v.mlp1, g.mlp1);
      update(w.ln_g, m.ln_g, v.ln_g, g.ln_g);
      update(w.ln_b, m.ln_b, v.ln_b, g.ln_b);
    }
    lr *= cfg.decay;
  }
  return out;
}

std::vector<SyntheticPair> make_toy_dataset(const ToyDataConfig& cfg, std::uint64_t seed,
                                            std::uint32_t first) {
  std::vector<SyntheticPair> out;
  out.reserve(cfg.pairs);
  for (std::uint32_t k = 0; k < cfg.pairs; ++k) {
    out.push_back(generate_pair(derive_seed(seed, static_cast<std::uint64_t>(first + k)),
                                cfg.keypoints, cfg.width, cfg.height, cfg.descriptor_dim,
                                cfg.noise));
  }
  return out;
}

std::string trace_to_csv(const std::vector<TracePoint>& trace) {
  std::ostringstream os;
  os.precision(17);
  os << "step,loss,lr\n";
  for (const auto& p : trace) os << p.step << ',' << p.loss << ',' << p.lr << '\n';
  return os.str();
}

void save_optimizer(const std::filesystem::path& path, const AdamState& state) {
  std::vector<Tensor> tensors = weights_to_tensors(state.m, ".m");
  for (auto& t : weights_to_tensors(state.v, ".v")) tensors.push_back(std::move(t));
  tensors.push_back({"adam.t", {1}, {static_cast<float>(state.t)}});
  write_file(path, encode_lawt(tensors));
}

AdamState load_optimizer(const std::filesystem::path& path, int heads) {
  try {
    const std::vector<Tensor> tensors = decode_lawt(read_file(path));
    AdamState st;
    st.m = tensors_to_weights(tensors, heads, ".m");
    st.v = tensors_to_weights(tensors, heads, ".v");
    for (const auto& t : tensors) {
      if (t.name == "adam.t" && t.data.size() == 1) st.t = static_cast<std::uint64_t>(t.data[0]);
    }
    return st;
  } catch (const DataError& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

}  // namespace lamatch
