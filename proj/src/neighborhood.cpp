#include "lamatch/neighborhood.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "lamatch/parallel.hpp"

namespace lamatch {

void NeighborhoodConfig::validate() const {
  if (!(theta > 0.0 && theta <= 1.0)) throw ConfigError("theta must lie in (0, 1]");
  if (!(lambda > 0.0)) throw ConfigError("lambda must be positive");
  if (radius < 0.0 || radius_s < 0.0 || radius_t < 0.0) {
    throw ConfigError("radii must be positive (or 0 to derive from the image size)");
  }
}

double default_radius(std::uint32_t width, std::uint32_t height) {
  if (width == 0 || height == 0) throw ConfigError("image dimensions must be non-zero");
  return std::sqrt(static_cast<double>(width) * static_cast<double>(height) /
                   (100.0 * std::numbers::pi));
}

Radii resolve_radii(const NeighborhoodConfig& cfg, const KeypointSet& source,
                    const KeypointSet& target) {
  const double rs = default_radius(source.width, source.height);
  const double rt = default_radius(target.width, target.height);
  return {cfg.radius > 0.0 ? cfg.radius : rs, cfg.radius_s > 0.0 ? cfg.radius_s : rs,
          cfg.radius_t > 0.0 ? cfg.radius_t : rt};
}

namespace {

constexpr Eigen::Index kBlock = 256;

struct BlockBest {
  std::vector<double> best;  // per target: smallest squared distance in block
  std::vector<std::uint32_t> arg;
};

}  // namespace

RatioMatchSet ratio_match(const Matrix& source, const Matrix& target, double theta) {
  if (source.cols() != target.cols()) {
    throw DataError("ratio_match: descriptor dimensions differ (" + std::to_string(source.cols()) +
                    " vs " + std::to_string(target.cols()) + ")");
  }
  RatioMatchSet out;
  const Eigen::Index n = source.rows(), m = target.rows();
  if (n == 0 || m == 0) return out;

  const Vector tn = target.rowwise().squaredNorm();
  std::vector<std::uint32_t> s_best(n);
  std::vector<double> s_d1(n, kInf), s_d2(n, kInf);
  const auto n_blocks = static_cast<std::size_t>((n + kBlock - 1) / kBlock);
  std::vector<BlockBest> block_best(n_blocks);

  parallel_for(
      n_blocks,
      [&](std::size_t b0, std::size_t b1) {
        for (std::size_t b = b0; b < b1; ++b) {
          const Eigen::Index r0 = static_cast<Eigen::Index>(b) * kBlock;
          const Eigen::Index rows = std::min(kBlock, n - r0);
          const Matrix xs = source.middleRows(r0, rows);
          const Vector sn = xs.rowwise().squaredNorm();
          const Matrix dot = xs * target.transpose();
          BlockBest& bb = block_best[b];
          bb.best.assign(static_cast<std::size_t>(m), kInf);
          bb.arg.assign(static_cast<std::size_t>(m), 0);
          for (Eigen::Index r = 0; r < rows; ++r) {
            const auto i = static_cast<std::size_t>(r0 + r);
            double d1 = kInf, d2 = kInf;
            std::uint32_t arg = 0;
            for (Eigen::Index j = 0; j < m; ++j) {
              const double d = std::max(0.0, sn[r] + tn[j] - 2.0 * dot(r, j));
              if (d < d1) {
                d2 = d1;
                d1 = d;
                arg = static_cast<std::uint32_t>(j);
              } else if (d < d2) {
                d2 = d;
              }
              if (d < bb.best[j]) {
                bb.best[j] = d;
                bb.arg[j] = static_cast<std::uint32_t>(i);
              }
            }
            s_best[i] = arg;
            s_d1[i] = d1;
            s_d2[i] = d2;
          }
        }
      },
      1);

  // Merge per-block column minima in block order so ties keep the lowest row.
  std::vector<double> t_d(static_cast<std::size_t>(m), kInf);
  std::vector<std::uint32_t> t_best(static_cast<std::size_t>(m), 0);
  for (const auto& bb : block_best) {
    for (std::size_t j = 0; j < static_cast<std::size_t>(m); ++j) {
      if (bb.best[j] < t_d[j]) {
        t_d[j] = bb.best[j];
        t_best[j] = bb.arg[j];
      }
    }
  }

  for (std::uint32_t i = 0; i < static_cast<std::uint32_t>(n); ++i) {
    const std::uint32_t j = s_best[i];
    if (t_best[j] != i) continue;
    const double d1 = std::sqrt(s_d1[i]);
    const double d2 = std::sqrt(s_d2[i]);
    double ratio, score;
    if (d1 == d2) {
      ratio = 1.0;
      score = 1.0;
    } else {
      ratio = d1 / d2;  // d2 = inf gives 0
      score = d1 == 0.0 ? kInf : d2 / d1;
    }
    if (ratio <= theta) {
      out.matches.emplace_back(i, j);
      out.ratio_score.push_back(score);
    }
  }
  return out;
}

namespace {

bool beats(double score_a, std::uint32_t idx_a, double score_b, std::uint32_t idx_b) {
  return score_a > score_b || (score_a == score_b && idx_a < idx_b);
}

bool use_grid(SpatialSearch search, std::size_t n) {
  return search == SpatialSearch::kGrid ||
         (search == SpatialSearch::kAuto && n >= kGridSearchThreshold);
}

std::vector<Point2> match_points(const RatioMatchSet& m, const std::vector<Point2>& kp,
                                 bool source_side) {
  std::vector<Point2> pts;
  pts.reserve(m.size());
  for (const auto& [i, j] : m.matches) {
    const auto idx = source_side ? i : j;
    if (idx >= kp.size()) throw DataError("match index out of range of the keypoint set");
    pts.push_back(kp[idx]);
  }
  return pts;
}

}  // namespace

std::vector<std::size_t> select_seeds(const RatioMatchSet& matches,
                                      const std::vector<Point2>& source_keypoints, double radius,
                                      SpatialSearch search) {
  const std::size_t n = matches.size();
  const std::vector<Point2> pts = match_points(matches, source_keypoints, true);
  const double r2 = radius * radius;
  std::vector<char> is_seed(n, 1);

  const auto score = [&](std::size_t a) { return matches.ratio_score[a]; };
  const auto src = [&](std::size_t a) { return matches.matches[a].first; };

  if (use_grid(search, n)) {
    const SpatialGrid grid(pts, std::max(radius, 1e-9));
    parallel_for(n, [&](std::size_t b0, std::size_t b1) {
      for (std::size_t a = b0; a < b1; ++a) {
        for (std::uint32_t o : grid.within(pts[a], radius)) {
          if (o != a && !beats(score(a), src(a), score(o), src(o))) {
            is_seed[a] = 0;
            break;
          }
        }
      }
    });
  } else {
    for (std::size_t a = 0; a < n; ++a) {
      for (std::size_t o = 0; o < n; ++o) {
        if (o == a || (pts[a] - pts[o]).squaredNorm() > r2) continue;
        if (!beats(score(a), src(a), score(o), src(o))) {
          is_seed[a] = 0;
          break;
        }
      }
    }
  }
  std::vector<std::size_t> seeds;
  for (std::size_t a = 0; a < n; ++a) {
    if (is_seed[a]) seeds.push_back(a);
  }
  return seeds;
}

std::vector<NeighborhoodPair> build_neighborhoods(const std::vector<std::size_t>& seeds,
                                                  const RatioMatchSet& matches,
                                                  const std::vector<Point2>& source_keypoints,
                                                  const std::vector<Point2>& target_keypoints,
                                                  double lambda, double radius_s, double radius_t,
                                                  std::uint32_t min_size, SpatialSearch search) {
  const std::size_t n = matches.size();
  const std::vector<Point2> ps = match_points(matches, source_keypoints, true);
  const std::vector<Point2> pt = match_points(matches, target_keypoints, false);
  const double rs = lambda * radius_s, rt = lambda * radius_t;
  const double rs2 = rs * rs, rt2 = rt * rt;

  std::vector<std::vector<std::uint32_t>> members(seeds.size());
  const bool grid_mode = use_grid(search, n);
  std::optional<SpatialGrid> grid;
  if (grid_mode) grid.emplace(ps, std::max(rs, 1e-9));

  parallel_for(
      seeds.size(),
      [&](std::size_t b0, std::size_t b1) {
        for (std::size_t s = b0; s < b1; ++s) {
          const std::size_t p = seeds[s];
          if (p >= n) throw DataError("seed index out of range");
          auto& mem = members[s];
          if (grid_mode) {
            for (std::uint32_t o : grid->within(ps[p], rs)) {
              if ((pt[o] - pt[p]).squaredNorm() <= rt2) mem.push_back(o);
            }
          } else {
            for (std::size_t o = 0; o < n; ++o) {
              if ((ps[o] - ps[p]).squaredNorm() <= rs2 && (pt[o] - pt[p]).squaredNorm() <= rt2) {
                mem.push_back(static_cast<std::uint32_t>(o));
              }
            }
          }
        }
      },
      16);

  std::vector<NeighborhoodPair> out;
  out.reserve(seeds.size());
  for (std::size_t s = 0; s < seeds.size(); ++s) {
    if (members[s].size() < min_size) continue;
    NeighborhoodPair np;
    np.seed = matches.matches[seeds[s]];
    np.source_set.reserve(members[s].size());
    np.target_set.reserve(members[s].size());
    for (std::uint32_t o : members[s]) {
      np.source_set.push_back(matches.matches[o].first);
      np.target_set.push_back(matches.matches[o].second);
    }
    out.push_back(std::move(np));
  }
  return out;
}

std::vector<NeighborhoodPair> select_neighborhoods(const Matrix& source_desc,
                                                   const Matrix& target_desc,
                                                   const KeypointSet& source,
                                                   const KeypointSet& target,
                                                   const NeighborhoodConfig& cfg) {
  cfg.validate();
  const Radii radii = resolve_radii(cfg, source, target);
  const RatioMatchSet m = ratio_match(source_desc, target_desc, cfg.theta);
  const auto seeds = select_seeds(m, source.keypoints, radii.seed);
  return build_neighborhoods(seeds, m, source.keypoints, target.keypoints, cfg.lambda,
                             radii.source, radii.target, cfg.min_neighborhood);
}

}  // namespace lamatch
