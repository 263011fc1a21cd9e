#pragma once

#include <cstdint>
#include <optional>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "lamatch/common.hpp"

namespace lamatch {

// Keypoints and descriptors of one image. Values are held in double but are
// always representable in f32, so what is in memory is exactly what the
// KPDS file stores.
struct KeypointSet {
  std::vector<Point2> keypoints;
  Matrix descriptors;  // N x D
  std::uint32_t width = 0;
  std::uint32_t height = 0;

  std::size_t size() const { return keypoints.size(); }
  std::size_t dim() const { return static_cast<std::size_t>(descriptors.cols()); }

  // Throws DataError when an invariant is broken.
  void validate() const;
};

using IndexPair = std::pair<std::uint32_t, std::uint32_t>;

struct GroundTruth {
  std::vector<IndexPair> pairs;  // sorted by source index
  std::vector<std::uint32_t> unmatchable_source;
  std::vector<std::uint32_t> unmatchable_target;
};

class Homography {
 public:
  Homography() : h_(Eigen::Matrix3d::Identity()) {}
  // Normalizes so h(2,2) == 1. Throws DataError if singular.
  explicit Homography(const Eigen::Matrix3d& h);

  static Homography translation(double tx, double ty);

  const Eigen::Matrix3d& matrix() const { return h_; }
  Homography inverse() const;

  // Projective transform with w-division. Returns nullopt when |w| < 1e-12.
  std::optional<Point2> apply(const Point2& p) const;

 private:
  Eigen::Matrix3d h_;
};

// Applies h to every point; points whose w-coordinate vanishes come back as
// nullopt, i.e. flagged out-of-frame.
std::vector<std::optional<Point2>> apply_homography(const Homography& h,
                                                    const std::vector<Point2>& points);

inline bool in_frame(const Point2& p, double width, double height) {
  return p.x() >= 0.0 && p.y() >= 0.0 && p.x() < width && p.y() < height;
}

// Uniform bucket grid over 2D points for fixed-radius queries.
class SpatialGrid {
 public:
  SpatialGrid(const std::vector<Point2>& points, double cell_size);

  // Indices of points within `radius` (inclusive) of `center`, ascending.
  std::vector<std::uint32_t> within(const Point2& center, double radius) const;

 private:
  const std::vector<Point2>* points_;
  double cell_;
  double min_x_ = 0.0, min_y_ = 0.0;
  std::int64_t cols_ = 1, rows_ = 1;
  std::vector<std::uint32_t> cell_start_;
  std::vector<std::uint32_t> entries_;

  std::int64_t cell_x(double x) const;
  std::int64_t cell_y(double y) const;
};

struct GenNoiseConfig {
  double descriptor_sigma = 0.0;  // per-component std of target descriptor noise
  double keypoint_jitter = 0.0;   // px, std of target keypoint displacement
  double distractor_fraction = 0.0;  // extra random target points, as a fraction of N
  bool identity_homography = false;
  // Resample (up to 32 attempts) until at least this many ground-truth pairs
  // exist. Zero disables the check.
  std::uint32_t min_matches = 0;
};

struct SyntheticPair {
  KeypointSet source;
  KeypointSet target;
  GroundTruth ground_truth;
  Homography homography;
};

inline constexpr double kMatchThresholdPx = 3.0;

SyntheticPair generate_pair(std::uint64_t seed, std::uint32_t n_keypoints, std::uint32_t width,
                            std::uint32_t height, std::uint32_t descriptor_dim,
                            const GenNoiseConfig& noise = {});

// Labels correspondences between source and target under h: mutual nearest
// neighbors (source projected into the target frame) closer than
// `threshold` pixels. Everything else is unmatchable.
GroundTruth label_ground_truth(const std::vector<Point2>& source, const std::vector<Point2>& target,
                               const Homography& h, double threshold = kMatchThresholdPx);

// Samples a well-conditioned warp: rotation, anisotropic scale, shear and
// translation composed about the frame center.
Homography sample_homography(Rng& rng, double width, double height);

}  // namespace lamatch
