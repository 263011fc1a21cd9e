#pragma once

#include <cstdint>
#include <vector>

#include "lamatch/attention.hpp"
#include "lamatch/common.hpp"
#include "lamatch/geometry.hpp"

namespace lamatch {

struct NeighborhoodConfig {
  double theta = 1.0;   // ratio-test threshold on d1/d2, in (0, 1]
  double lambda = 2.0;  // neighborhood overlap factor
  // Radii in pixels; zero means derive from the image size.
  double radius = 0.0;    // seed separation radius, source side
  double radius_s = 0.0;  // neighborhood radius, source side
  double radius_t = 0.0;  // neighborhood radius, target side
  // Neighborhoods with fewer members are discarded.
  std::uint32_t min_neighborhood = 1;

  void validate() const;
};

struct Radii {
  double seed = 0.0;
  double source = 0.0;
  double target = 0.0;
};

// sqrt(H * W / (100 pi)); throws ConfigError on a zero dimension.
double default_radius(std::uint32_t width, std::uint32_t height);

Radii resolve_radii(const NeighborhoodConfig& cfg, const KeypointSet& source,
                    const KeypointSet& target);

struct RatioMatchSet {
  std::vector<IndexPair> matches;   // sorted by source index
  std::vector<double> ratio_score;  // d2 / d1; larger is more distinctive

  std::size_t size() const { return matches.size(); }
};

// Mutual nearest neighbors under Euclidean distance that pass d1/d2 <= theta.
// With fewer than two target rows d2 is taken as +inf. Exact duplicates
// (d1 == d2) score 1.
RatioMatchSet ratio_match(const Matrix& source, const Matrix& target, double theta);

enum class SpatialSearch { kAuto, kBruteForce, kGrid };

// Matches at or above this count switch kAuto to the grid search.
inline constexpr std::size_t kGridSearchThreshold = 4096;

// Indices into `matches` of the hypothesis seeds: matches whose score beats
// every other match whose source keypoint lies within `radius` (ties go to
// the lower source index). Ascending.
std::vector<std::size_t> select_seeds(const RatioMatchSet& matches,
                                      const std::vector<Point2>& source_keypoints, double radius,
                                      SpatialSearch search = SpatialSearch::kAuto);

// One neighborhood per seed: all matches whose source endpoint is within
// lambda * radius_s of the seed's and whose target endpoint is within
// lambda * radius_t of the seed's. Members keep the order of `matches`.
std::vector<NeighborhoodPair> build_neighborhoods(const std::vector<std::size_t>& seeds,
                                                  const RatioMatchSet& matches,
                                                  const std::vector<Point2>& source_keypoints,
                                                  const std::vector<Point2>& target_keypoints,
                                                  double lambda, double radius_s, double radius_t,
                                                  std::uint32_t min_size = 1,
                                                  SpatialSearch search = SpatialSearch::kAuto);

// ratio_match -> select_seeds -> build_neighborhoods on the given descriptors.
std::vector<NeighborhoodPair> select_neighborhoods(const Matrix& source_desc,
                                                   const Matrix& target_desc,
                                                   const KeypointSet& source,
                                                   const KeypointSet& target,
                                                   const NeighborhoodConfig& cfg);

}  // namespace lamatch
