#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "lamatch/encoder.hpp"
#include "lamatch/geometry.hpp"
#include "lamatch/neighborhood.hpp"
#include "lamatch/weights.hpp"

namespace lamatch {

struct LossConfig {
  double m_p = 0.2;  // positive margin
  double m_n = 1.0;  // negative margin
  double learning_rate = 1e-3;
  double decay = 0.99992;  // per-step multiplicative lr factor
  // Treat the confidence weight as a constant during backprop.
  bool detach_confidence = false;

  void validate() const;
};

// Squared Euclidean distance between two rows.
double squared_distance(const Matrix& a, std::size_t i, const Matrix& b, std::size_t j);

struct RankingTerm {
  double value = 0.0;
  double positive = 0.0;  // D(xs_i, xt_j)
  double negative = 0.0;  // hardest negative distance
  // Hardest negative: (source i, target k) when on_target, else (source k, target j).
  bool on_target = true;
  std::size_t negative_index = 0;
  bool positive_active = false;
  bool negative_active = false;
};

// Hinged ranking loss of ground-truth pair (i, j) with the hardest negative
// taken over every other row on both sides. Ties pick the lowest index,
// preferring the target side.
RankingTerm ranking_term(const Matrix& xs, const Matrix& xt, std::size_t i, std::size_t j,
                         const LossConfig& cfg);
double ranking_loss(const Matrix& xs, const Matrix& xt, std::size_t i, std::size_t j,
                    const LossConfig& cfg);

// Raw dot product of two rows.
double confidence(const Matrix& fs, std::size_t i, const Matrix& ft, std::size_t j);

// Mean over ground-truth pairs of max(s_c, 0) * ranking_loss(c).
double triplet_loss(const EncodedPair& enc, const GroundTruth& gt, const LossConfig& cfg);

struct LossAndGradient {
  double loss = 0.0;
  NetworkWeights gradient;
};

LossAndGradient loss_gradient(const NetworkWeights& weights, const SyntheticPair& pair,
                              const LossConfig& cfg, const NeighborhoodConfig& neigh_cfg = {});

// Loss of one pair without gradients.
double pair_loss(const NetworkWeights& weights, const SyntheticPair& pair, const LossConfig& cfg,
                 const NeighborhoodConfig& neigh_cfg = {});

struct GradcheckEntry {
  std::string tensor;
  std::size_t row = 0, col = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  double rel_error = 0.0;
};

struct GradcheckReport {
  std::vector<GradcheckEntry> entries;
  double max_rel_error = 0.0;
  double pass_fraction = 0.0;  // entries with rel_error < tolerance
};

// Compares loss_gradient against central differences at `samples` entries
// (all entries when samples is 0 or exceeds the parameter count). Relative
// error is |a - n| / max(|a|, |n|), and 0 when both are below abs_floor.
GradcheckReport gradcheck(const NetworkWeights& weights, const SyntheticPair& pair,
                          const LossConfig& cfg, std::size_t samples, std::uint64_t seed,
                          double h = 1e-5, double tolerance = 1e-4, double abs_floor = 1e-10);

struct TracePoint {
  std::uint64_t step = 0;
  double loss = 0.0;
  double lr = 0.0;
};

struct AdamState {
  NetworkWeights m, v;
  std::uint64_t t = 0;
};

struct TrainResult {
  NetworkWeights weights;
  AdamState optimizer;
  std::vector<TracePoint> trace;
};

using StepCallback = std::function<void(const TracePoint&)>;

// One pair per step, drawn from the dataset by a seeded stream. Adam with
// beta1 0.9, beta2 0.999, eps 1e-8 and lr * decay^step.
TrainResult train_toy(const NetworkWeights& init, const std::vector<SyntheticPair>& dataset,
                      const LossConfig& cfg, std::uint64_t steps, std::uint64_t seed,
                      const NeighborhoodConfig& neigh_cfg = {}, const StepCallback& on_step = {});

struct ToyDataConfig {
  std::uint32_t pairs = 200;
  std::uint32_t keypoints = 128;
  std::uint32_t width = 320, height = 240;
  std::uint32_t descriptor_dim = 32;
  GenNoiseConfig noise{0.14, 0.5, 0.1, false, 8};
};

// Pair k is generate_pair(derive_seed(seed, k), ...).
std::vector<SyntheticPair> make_toy_dataset(const ToyDataConfig& cfg, std::uint64_t seed,
                                            std::uint32_t first = 0);

std::string trace_to_csv(const std::vector<TracePoint>& trace);

// Optimizer sidecar: LAWT tables with ".m" / ".v" suffixed tensor names.
void save_optimizer(const std::filesystem::path& path, const AdamState& state);
AdamState load_optimizer(const std::filesystem::path& path, int heads);

}  // namespace lamatch
