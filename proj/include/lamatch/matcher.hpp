#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "lamatch/encoder.hpp"
#include "lamatch/geometry.hpp"
#include "lamatch/neighborhood.hpp"

namespace lamatch {

enum class MatchStage { kSeed, kCandidate, kVerified };

const char* stage_name(MatchStage stage);

struct Match {
  std::uint32_t source = 0;
  std::uint32_t target = 0;
  double score = 0.0;
  MatchStage stage = MatchStage::kCandidate;

  friend bool operator==(const Match&, const Match&) = default;
};

// Sorted by (source, target); no duplicate pairs.
struct MatchSet {
  std::vector<Match> matches;

  std::size_t size() const { return matches.size(); }
  bool empty() const { return matches.empty(); }
  bool contains(std::uint32_t i, std::uint32_t j) const;
};

struct FilterConfig {
  std::uint32_t ransac_iterations = 128;
  double inlier_threshold_factor = 0.15;  // fraction of R_t
  std::uint32_t min_inliers = 6;
  std::uint64_t rng_seed = 0;
  double radius_t = 0.0;  // zero: derive from the target image size

  void validate() const;
};

struct DistanceMatchResult {
  MatchSet matches;
  std::vector<NeighborhoodPair> neighborhoods;
};

// Seeds and neighborhood candidates from the final descriptors: ratio_match
// on x_hat, seed selection, neighborhood expansion, then the union of all
// neighborhood members (seeds tagged kSeed, others kCandidate).
DistanceMatchResult distance_match(const EncodedPair& enc, const KeypointSet& source,
                                   const KeypointSet& target, const NeighborhoodConfig& cfg);

// 2x3 affine map A with A * [x y 1]^T.
using Affine = Eigen::Matrix<double, 2, 3>;

// Exact fit through three correspondences; nullopt when the source points
// are (near) collinear.
std::optional<Affine> fit_affine(const std::array<Point2, 3>& src, const std::array<Point2, 3>& dst);

// Per-neighborhood local-affine RANSAC without refitting. Survivors of any
// neighborhood are kept and tagged kVerified.
MatchSet filter_matches(const MatchSet& matches, const KeypointSet& source,
                        const KeypointSet& target, const std::vector<NeighborhoodPair>& neighborhoods,
                        const FilterConfig& cfg);

struct PipelineConfig {
  NeighborhoodConfig neighborhood;
  FilterConfig filter;
  bool filter_enabled = true;
  bool skip_pairwise = false;
};

MatchSet match_pipeline(const KeypointSet& source, const KeypointSet& target,
                        const NetworkWeights& weights, const PipelineConfig& cfg);

struct Metrics {
  std::vector<std::pair<double, double>> mma;  // (threshold px, fraction)
  double precision = 0.0;
  double recall = 0.0;
  std::size_t num_matches = 0;
  double inlier_ratio = 0.0;  // MMA at 3 px
};

// Empty match sets report zero for every ratio.
Metrics evaluate(const MatchSet& matches, const GroundTruth& gt, const Homography& h,
                 const KeypointSet& source, const KeypointSet& target,
                 const std::vector<double>& thresholds = {1, 2, 3, 4, 5, 6, 7, 8, 9, 10});

std::string metrics_to_json(const Metrics& m);

// CSV with header "i,j,score,stage".
std::string matches_to_csv(const MatchSet& m);
void save_matches(const std::filesystem::path& path, const MatchSet& m);
MatchSet load_matches(const std::filesystem::path& path);

}  // namespace lamatch
