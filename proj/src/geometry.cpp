#include "lamatch/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include <Eigen/LU>

namespace lamatch {

namespace {

constexpr double kMinDet = 1e-9;
constexpr double kMinW = 1e-12;

// Rounds to the nearest f32 while staying strictly below `limit`.
double quantize_coord(double v, double limit) {
  float f = static_cast<float>(v);
  if (static_cast<double>(f) >= limit) f = std::nextafter(static_cast<float>(limit), 0.0f);
  if (f < 0.0f) f = 0.0f;
  return static_cast<double>(f);
}

void quantize(Matrix& m) {
  for (Eigen::Index i = 0; i < m.size(); ++i) {
    m.data()[i] = static_cast<double>(static_cast<float>(m.data()[i]));
  }
}

Vector random_unit(Rng& rng, Eigen::Index dim) {
  Vector v(dim);
  double norm2 = 0.0;
  do {
    for (Eigen::Index k = 0; k < dim; ++k) v[k] = rng.normal();
    norm2 = v.squaredNorm();
  } while (norm2 == 0.0);
  return v / std::sqrt(norm2);
}

// Nearest point within `radius` (strictly closer), lowest index on ties.
std::optional<std::uint32_t> nearest_within(const SpatialGrid& grid, const std::vector<Point2>& pts,
                                            const Point2& q, double radius) {
  std::optional<std::uint32_t> best;
  double best_d = radius;
  for (std::uint32_t idx : grid.within(q, radius)) {
    const double d = (pts[idx] - q).norm();
    if (d < best_d) {
      best_d = d;
      best = idx;
    }
  }
  return best;
}

}  // namespace

void KeypointSet::validate() const {
  if (static_cast<std::size_t>(descriptors.rows()) != keypoints.size()) {
    throw DataError("descriptor rows (" + std::to_string(descriptors.rows()) +
                    ") != keypoint count (" + std::to_string(keypoints.size()) + ")");
  }
  if (descriptors.cols() < 1) throw DataError("descriptor dimension must be >= 1");
  if (width == 0 || height == 0) throw DataError("image dimensions must be non-zero");
  for (std::size_t i = 0; i < keypoints.size(); ++i) {
    if (!in_frame(keypoints[i], width, height)) {
      throw DataError("keypoint " + std::to_string(i) + " lies outside the image frame");
    }
  }
}

Homography::Homography(const Eigen::Matrix3d& h) {
  if (!h.allFinite() || std::abs(h.determinant()) <= kMinDet) {
    throw DataError("homography is singular or non-finite");
  }
  if (std::abs(h(2, 2)) < kMinW) throw DataError("homography has vanishing h22");
  h_ = h / h(2, 2);
  if (std::abs(h_.determinant()) <= kMinDet) throw DataError("homography is singular");
}

Homography Homography::translation(double tx, double ty) {
  Eigen::Matrix3d m = Eigen::Matrix3d::Identity();
  m(0, 2) = tx;
  m(1, 2) = ty;
  return Homography(m);
}

Homography Homography::inverse() const { return Homography(h_.inverse()); }

std::optional<Point2> Homography::apply(const Point2& p) const {
  const double w = h_(2, 0) * p.x() + h_(2, 1) * p.y() + h_(2, 2);
  if (std::abs(w) < kMinW) return std::nullopt;
  return Point2((h_(0, 0) * p.x() + h_(0, 1) * p.y() + h_(0, 2)) / w,
                (h_(1, 0) * p.x() + h_(1, 1) * p.y() + h_(1, 2)) / w);
}

std::vector<std::optional<Point2>> apply_homography(const Homography& h,
                                                    const std::vector<Point2>& points) {
  std::vector<std::optional<Point2>> out;
  out.reserve(points.size());
  for (const auto& p : points) out.push_back(h.apply(p));
  return out;
}

SpatialGrid::SpatialGrid(const std::vector<Point2>& points, double cell_size)
    : points_(&points), cell_(cell_size) {
  if (!(cell_size > 0.0)) throw ConfigError("grid cell size must be positive");
  if (points.empty()) {
    cell_start_.assign(2, 0);
    return;
  }
  double max_x = points[0].x(), max_y = points[0].y();
  min_x_ = max_x;
  min_y_ = max_y;
  for (const auto& p : points) {
    min_x_ = std::min(min_x_, p.x());
    min_y_ = std::min(min_y_, p.y());
    max_x = std::max(max_x, p.x());
    max_y = std::max(max_y, p.y());
  }
  // Keep the table proportional to the point count even for sparse, wide sets.
  const double max_cells = 4.0 * static_cast<double>(points.size()) + 16.0;
  while (((max_x - min_x_) / cell_ + 1.0) * ((max_y - min_y_) / cell_ + 1.0) > max_cells) {
    cell_ *= 2.0;
  }
  cols_ = static_cast<std::int64_t>((max_x - min_x_) / cell_) + 1;
  rows_ = static_cast<std::int64_t>((max_y - min_y_) / cell_) + 1;

  const auto n_cells = static_cast<std::size_t>(cols_ * rows_);
  std::vector<std::uint32_t> counts(n_cells + 1, 0);
  std::vector<std::size_t> cell_of(points.size());
  for (std::size_t i = 0; i < points.size(); ++i) {
    cell_of[i] = static_cast<std::size_t>(cell_y(points[i].y()) * cols_ + cell_x(points[i].x()));
    ++counts[cell_of[i] + 1];
  }
  for (std::size_t c = 1; c <= n_cells; ++c) counts[c] += counts[c - 1];
  cell_start_ = counts;
  entries_.resize(points.size());
  for (std::size_t i = 0; i < points.size(); ++i) {
    entries_[counts[cell_of[i]]++] = static_cast<std::uint32_t>(i);
  }
}

std::int64_t SpatialGrid::cell_x(double x) const {
  return std::clamp<std::int64_t>(static_cast<std::int64_t>(std::floor((x - min_x_) / cell_)), 0,
                                  cols_ - 1);
}

std::int64_t SpatialGrid::cell_y(double y) const {
  return std::clamp<std::int64_t>(static_cast<std::int64_t>(std::floor((y - min_y_) / cell_)), 0,
                                  rows_ - 1);
}

std::vector<std::uint32_t> SpatialGrid::within(const Point2& center, double radius) const {
  std::vector<std::uint32_t> out;
  if (entries_.empty()) return out;
  const auto& pts = *points_;
  const double r2 = radius * radius;
  const std::int64_t x0 = cell_x(center.x() - radius), x1 = cell_x(center.x() + radius);
  const std::int64_t y0 = cell_y(center.y() - radius), y1 = cell_y(center.y() + radius);
  for (std::int64_t cy = y0; cy <= y1; ++cy) {
    for (std::int64_t cx = x0; cx <= x1; ++cx) {
      const auto c = static_cast<std::size_t>(cy * cols_ + cx);
      for (std::uint32_t k = cell_start_[c]; k < cell_start_[c + 1]; ++k) {
        const std::uint32_t idx = entries_[k];
        if ((pts[idx] - center).squaredNorm() <= r2) out.push_back(idx);
      }
    }
  }
  std::sort(out.begin(), out.end());
  return out;
}

GroundTruth label_ground_truth(const std::vector<Point2>& source, const std::vector<Point2>& target,
                               const Homography& h, double threshold) {
  // Projected sources that have a finite image; proj_index maps back.
  std::vector<Point2> projected;
  std::vector<std::uint32_t> proj_index;
  std::vector<std::optional<std::uint32_t>> slot(source.size());
  for (std::uint32_t i = 0; i < source.size(); ++i) {
    if (auto p = h.apply(source[i])) {
      slot[i] = static_cast<std::uint32_t>(projected.size());
      projected.push_back(*p);
      proj_index.push_back(i);
    }
  }
  const SpatialGrid target_grid(target, threshold);
  const SpatialGrid source_grid(projected, threshold);

  std::vector<std::optional<std::uint32_t>> target_best(target.size());
  for (std::uint32_t j = 0; j < target.size(); ++j) {
    if (auto k = nearest_within(source_grid, projected, target[j], threshold)) {
      target_best[j] = proj_index[*k];
    }
  }

  GroundTruth gt;
  std::vector<bool> target_matched(target.size(), false);
  for (std::uint32_t i = 0; i < source.size(); ++i) {
    std::optional<std::uint32_t> j;
    if (slot[i]) j = nearest_within(target_grid, target, projected[*slot[i]], threshold);
    if (j && target_best[*j] == i) {
      gt.pairs.emplace_back(i, *j);
      target_matched[*j] = true;
    } else {
      gt.unmatchable_source.push_back(i);
    }
  }
  for (std::uint32_t j = 0; j < target.size(); ++j) {
    if (!target_matched[j]) gt.unmatchable_target.push_back(j);
  }
  return gt;
}

Homography sample_homography(Rng& rng, double width, double height) {
  using std::numbers::pi;
  for (;;) {
    const double angle = rng.uniform(-30.0, 30.0) * pi / 180.0;
    const double sx = rng.uniform(0.7, 1.4);
    const double sy = rng.uniform(0.7, 1.4);
    const double shear = rng.uniform(-0.2, 0.2);
    const double tx = rng.uniform(-0.15, 0.15) * width;
    const double ty = rng.uniform(-0.15, 0.15) * height;

    Eigen::Matrix3d to_origin = Eigen::Matrix3d::Identity();
    to_origin(0, 2) = -0.5 * width;
    to_origin(1, 2) = -0.5 * height;
    Eigen::Matrix3d back = Eigen::Matrix3d::Identity();
    back(0, 2) = 0.5 * width + tx;
    back(1, 2) = 0.5 * height + ty;
    Eigen::Matrix3d rot = Eigen::Matrix3d::Identity();
    rot(0, 0) = std::cos(angle);
    rot(0, 1) = -std::sin(angle);
    rot(1, 0) = std::sin(angle);
    rot(1, 1) = std::cos(angle);
    Eigen::Matrix3d sh = Eigen::Matrix3d::Identity();
    sh(0, 1) = shear;
    Eigen::Matrix3d sc = Eigen::Matrix3d::Identity();
    sc(0, 0) = sx;
    sc(1, 1) = sy;

    const Eigen::Matrix3d m = back * rot * sh * sc * to_origin;
    if (std::abs(m.determinant()) > kMinDet) return Homography(m);
  }
}

SyntheticPair generate_pair(std::uint64_t seed, std::uint32_t n_keypoints, std::uint32_t width,
                            std::uint32_t height, std::uint32_t descriptor_dim,
                            const GenNoiseConfig& noise) {
  if (width == 0 || height == 0) throw ConfigError("image dimensions must be non-zero");
  if (n_keypoints == 0) throw ConfigError("n_keypoints must be >= 1");
  if (descriptor_dim == 0) throw ConfigError("descriptor_dim must be >= 1");
  if (noise.descriptor_sigma < 0.0 || noise.keypoint_jitter < 0.0 ||
      noise.distractor_fraction < 0.0) {
    throw ConfigError("noise magnitudes must be non-negative");
  }
  const double w = width, h = height;
  const auto dim = static_cast<Eigen::Index>(descriptor_dim);
  const std::uint64_t base_seed = derive_seed(seed, "synth");

  SyntheticPair out;
  for (std::uint64_t attempt = 0; attempt < 32; ++attempt) {
    Rng rng(derive_seed(base_seed, attempt));
    const Homography homography =
        noise.identity_homography ? Homography() : sample_homography(rng, w, h);

    KeypointSet src, tgt;
    src.width = tgt.width = width;
    src.height = tgt.height = height;
    src.keypoints.resize(n_keypoints);
    src.descriptors.resize(n_keypoints, dim);
    for (std::uint32_t i = 0; i < n_keypoints; ++i) {
      src.keypoints[i] = Point2(quantize_coord(rng.uniform(0.0, w), w),
                                quantize_coord(rng.uniform(0.0, h), h));
      src.descriptors.row(i) = random_unit(rng, dim).transpose();
    }
    quantize(src.descriptors);

    std::vector<Vector> tgt_desc;
    for (std::uint32_t i = 0; i < n_keypoints; ++i) {
      auto p = homography.apply(src.keypoints[i]);
      if (!p) continue;
      Point2 q = *p;
      if (noise.keypoint_jitter > 0.0) {
        q += Point2(rng.normal(), rng.normal()) * noise.keypoint_jitter;
      }
      if (!in_frame(q, w, h)) continue;
      tgt.keypoints.emplace_back(quantize_coord(q.x(), w), quantize_coord(q.y(), h));
      Vector d = src.descriptors.row(i).transpose();
      if (noise.descriptor_sigma > 0.0) {
        for (Eigen::Index k = 0; k < dim; ++k) d[k] += noise.descriptor_sigma * rng.normal();
      }
      tgt_desc.push_back(std::move(d));
    }
    const auto n_distractors =
        static_cast<std::uint32_t>(std::lround(noise.distractor_fraction * n_keypoints));
    for (std::uint32_t k = 0; k < n_distractors; ++k) {
      tgt.keypoints.emplace_back(quantize_coord(rng.uniform(0.0, w), w),
                                 quantize_coord(rng.uniform(0.0, h), h));
      tgt_desc.push_back(random_unit(rng, dim));
    }
    tgt.descriptors.resize(static_cast<Eigen::Index>(tgt_desc.size()), dim);
    for (std::size_t r = 0; r < tgt_desc.size(); ++r) {
      tgt.descriptors.row(static_cast<Eigen::Index>(r)) = tgt_desc[r].transpose();
    }
    quantize(tgt.descriptors);

    out.ground_truth = label_ground_truth(src.keypoints, tgt.keypoints, homography);
    out.source = std::move(src);
    out.target = std::move(tgt);
    out.homography = homography;
    if (out.ground_truth.pairs.size() >= noise.min_matches) break;
  }
  return out;
}

}  // namespace lamatch
