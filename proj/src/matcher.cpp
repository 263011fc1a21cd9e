#include "lamatch/matcher.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include <Eigen/Dense>
#include <json.hpp>

#include "lamatch/formats.hpp"
#include "lamatch/parallel.hpp"

namespace lamatch {

const char* stage_name(MatchStage stage) {
  switch (stage) {
    case MatchStage::kSeed:
      return "seed";
    case MatchStage::kCandidate:
      return "candidate";
    case MatchStage::kVerified:
      return "verified";
  }
  return "?";
}

bool MatchSet::contains(std::uint32_t i, std::uint32_t j) const {
  const auto it = std::lower_bound(matches.begin(), matches.end(), std::make_pair(i, j),
                                   [](const Match& m, const IndexPair& key) {
                                     return std::make_pair(m.source, m.target) < key;
                                   });
  return it != matches.end() && it->source == i && it->target == j;
}

void FilterConfig::validate() const {
  if (ransac_iterations < 1) throw ConfigError("ransac_iterations must be >= 1");
  if (!(inlier_threshold_factor > 0.0)) throw ConfigError("inlier_threshold_factor must be > 0");
  if (min_inliers < 3) throw ConfigError("min_inliers must be >= 3");
  if (radius_t < 0.0) throw ConfigError("radius_t must be >= 0");
}

DistanceMatchResult distance_match(const EncodedPair& enc, const KeypointSet& source,
                                   const KeypointSet& target, const NeighborhoodConfig& cfg) {
  cfg.validate();
  DistanceMatchResult out;
  const RatioMatchSet m = ratio_match(enc.xs_hat, enc.xt_hat, cfg.theta);
  if (m.size() == 0) return out;
  const Radii radii = resolve_radii(cfg, source, target);
  const auto seeds = select_seeds(m, source.keypoints, radii.seed);
  out.neighborhoods = build_neighborhoods(seeds, m, source.keypoints, target.keypoints, cfg.lambda,
                                          radii.source, radii.target, cfg.min_neighborhood);

  std::vector<std::int64_t> by_source(source.size(), -1);
  for (std::size_t k = 0; k < m.size(); ++k) by_source[m.matches[k].first] = static_cast<std::int64_t>(k);
  std::vector<char> is_seed(m.size(), 0), member(m.size(), 0);
  for (const auto& np : out.neighborhoods) {
    is_seed[static_cast<std::size_t>(by_source[np.seed.first])] = 1;
    for (auto i : np.source_set) member[static_cast<std::size_t>(by_source[i])] = 1;
  }
  for (std::size_t k = 0; k < m.size(); ++k) {
    if (!member[k]) continue;
    out.matches.matches.push_back({m.matches[k].first, m.matches[k].second, m.ratio_score[k],
                                   is_seed[k] ? MatchStage::kSeed : MatchStage::kCandidate});
  }
  return out;
}

std::optional<Affine> fit_affine(const std::array<Point2, 3>& src, const std::array<Point2, 3>& dst) {
  Eigen::Matrix3d s;
  for (int r = 0; r < 3; ++r) s.row(r) << src[r].x(), src[r].y(), 1.0;
  // Twice the triangle area; reject degenerate samples relative to their extent.
  const double area2 = std::abs(s.determinant());
  const double extent = std::max({(src[1] - src[0]).squaredNorm(), (src[2] - src[0]).squaredNorm(),
                                  (src[2] - src[1]).squaredNorm()});
  if (!(area2 > 1e-9 * std::max(extent, 1e-12))) return std::nullopt;
  const Eigen::PartialPivLU<Eigen::Matrix3d> lu(s);
  Eigen::Vector3d tx, ty;
  tx << dst[0].x(), dst[1].x(), dst[2].x();
  ty << dst[0].y(), dst[1].y(), dst[2].y();
  Affine a;
  a.row(0) = lu.solve(tx).transpose();
  a.row(1) = lu.solve(ty).transpose();
  return a;
}

namespace {

std::vector<std::uint32_t> verify_neighborhood(const std::vector<Point2>& src,
                                               const std::vector<Point2>& dst, double threshold,
                                               const FilterConfig& cfg, Rng& rng) {
  const std::size_t n = src.size();
  std::vector<std::uint32_t> best;
  for (std::uint32_t it = 0; it < cfg.ransac_iterations; ++it) {
    std::array<std::size_t, 3> pick{};
    pick[0] = rng.below(n);
    do pick[1] = rng.below(n);
    while (pick[1] == pick[0]);
    do pick[2] = rng.below(n);
    while (pick[2] == pick[0] || pick[2] == pick[1]);
    const auto model = fit_affine({src[pick[0]], src[pick[1]], src[pick[2]]},
                                  {dst[pick[0]], dst[pick[1]], dst[pick[2]]});
    if (!model) continue;
    std::vector<std::uint32_t> inliers;
    for (std::size_t k = 0; k < n; ++k) {
      const Point2 p = model->leftCols<2>() * src[k] + model->col(2);
      if ((p - dst[k]).norm() <= threshold) inliers.push_back(static_cast<std::uint32_t>(k));
    }
    if (inliers.size() > best.size()) best = std::move(inliers);
  }
  if (best.size() < cfg.min_inliers) best.clear();
  return best;
}

}  // namespace

MatchSet filter_matches(const MatchSet& matches, const KeypointSet& source,
                        const KeypointSet& target, const std::vector<NeighborhoodPair>& neighborhoods,
                        const FilterConfig& cfg) {
  cfg.validate();
  const double radius_t = cfg.radius_t > 0.0 ? cfg.radius_t : default_radius(target.width, target.height);
  const double threshold = cfg.inlier_threshold_factor * radius_t;

  std::vector<std::vector<IndexPair>> survivors(neighborhoods.size());
  parallel_for(
      neighborhoods.size(),
      [&](std::size_t b0, std::size_t b1) {
        for (std::size_t p = b0; p < b1; ++p) {
          const auto& np = neighborhoods[p];
          // Only members that are part of the input set take part.
          std::vector<IndexPair> members;
          std::vector<Point2> src, dst;
          for (std::size_t k = 0; k < np.source_set.size(); ++k) {
            const std::uint32_t i = np.source_set[k], j = np.target_set[k];
            if (!matches.contains(i, j)) continue;
            members.emplace_back(i, j);
            src.push_back(source.keypoints.at(i));
            dst.push_back(target.keypoints.at(j));
          }
          if (members.size() < 3) {
            // Unverifiable; with min_inliers >= 3 this always drops.
            const bool has_seed =
                std::find(members.begin(), members.end(), np.seed) != members.end();
            if (has_seed && cfg.min_inliers <= members.size()) survivors[p] = members;
            continue;
          }
          Rng rng(derive_seed(cfg.rng_seed, static_cast<std::uint64_t>(p)));
          for (std::uint32_t k : verify_neighborhood(src, dst, threshold, cfg, rng)) {
            survivors[p].push_back(members[k]);
          }
        }
      },
      1);

  std::set<IndexPair> kept;
  for (const auto& s : survivors) kept.insert(s.begin(), s.end());
  MatchSet out;
  for (const auto& m : matches.matches) {
    if (kept.count({m.source, m.target})) {
      out.matches.push_back({m.source, m.target, m.score, MatchStage::kVerified});
    }
  }
  return out;
}

MatchSet match_pipeline(const KeypointSet& source, const KeypointSet& target,
                        const NetworkWeights& weights, const PipelineConfig& cfg) {
  if (source.size() == 0 || target.size() == 0) return {};
  ForwardOptions options;
  options.skip_pairwise = cfg.skip_pairwise;
  const EncodedPair enc = forward(source, target, weights, cfg.neighborhood, options);
  DistanceMatchResult dm = distance_match(enc, source, target, cfg.neighborhood);
  if (!cfg.filter_enabled) return std::move(dm.matches);
  FilterConfig fcfg = cfg.filter;
  if (fcfg.radius_t == 0.0) fcfg.radius_t = resolve_radii(cfg.neighborhood, source, target).target;
  return filter_matches(dm.matches, source, target, dm.neighborhoods, fcfg);
}

Metrics evaluate(const MatchSet& matches, const GroundTruth& gt, const Homography& h,
                 const KeypointSet& source, const KeypointSet& target,
                 const std::vector<double>& thresholds) {
  Metrics out;
  out.num_matches = matches.size();
  std::vector<double> errors;
  errors.reserve(matches.size());
  for (const auto& m : matches.matches) {
    const auto p = h.apply(source.keypoints.at(m.source));
    errors.push_back(p ? (*p - target.keypoints.at(m.target)).norm() : kInf);
  }
  const auto fraction_within = [&](double t) {
    if (errors.empty()) return 0.0;
    const auto ok = std::count_if(errors.begin(), errors.end(), [t](double e) { return e <= t; });
    return static_cast<double>(ok) / static_cast<double>(errors.size());
  };
  for (double t : thresholds) out.mma.emplace_back(t, fraction_within(t));
  out.inlier_ratio = fraction_within(kMatchThresholdPx);

  const std::set<IndexPair> truth(gt.pairs.begin(), gt.pairs.end());
  std::size_t correct = 0;
  for (const auto& m : matches.matches) correct += truth.count({m.source, m.target});
  out.precision = matches.empty() ? 0.0 : static_cast<double>(correct) / matches.size();
  out.recall = truth.empty() ? 0.0 : static_cast<double>(correct) / truth.size();
  return out;
}

namespace {

std::string format_number(double v) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

std::string threshold_key(double t) { return format_number(t); }

}  // namespace

std::string metrics_to_json(const Metrics& m) {
  nlohmann::ordered_json j;
  nlohmann::ordered_json mma = nlohmann::ordered_json::object();
  for (const auto& [t, v] : m.mma) mma[threshold_key(t)] = v;
  j["mma"] = mma;
  j["precision"] = m.precision;
  j["recall"] = m.recall;
  j["num_matches"] = m.num_matches;
  j["inlier_ratio"] = m.inlier_ratio;
  return j.dump(2) + "\n";
}

std::string matches_to_csv(const MatchSet& m) {
  std::string out = "i,j,score,stage\n";
  for (const auto& x : m.matches) {
    out += std::to_string(x.source) + ',' + std::to_string(x.target) + ',' +
           format_number(x.score) + ',' + stage_name(x.stage) + '\n';
  }
  return out;
}

void save_matches(const std::filesystem::path& path, const MatchSet& m) {
  const std::string csv = matches_to_csv(m);
  write_file(path, std::span(reinterpret_cast<const std::uint8_t*>(csv.data()), csv.size()));
}

MatchSet load_matches(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line) || line != "i,j,score,stage") {
    throw DataError(path.string() + ": missing 'i,j,score,stage' header");
  }
  MatchSet out;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::vector<std::string> fields;
    std::stringstream ss(line);
    for (std::string f; std::getline(ss, f, ',');) fields.push_back(f);
    const auto bad = [&] {
      return DataError(path.string() + ":" + std::to_string(line_no) + ": malformed row");
    };
    if (fields.size() != 4) throw bad();
    Match m;
    try {
      m.source = static_cast<std::uint32_t>(std::stoul(fields[0]));
      m.target = static_cast<std::uint32_t>(std::stoul(fields[1]));
      m.score = fields[2] == "inf" ? kInf : std::stod(fields[2]);
    } catch (const std::exception&) {
      throw bad();
    }
    if (fields[3] == "seed") {
      m.stage = MatchStage::kSeed;
    } else if (fields[3] == "candidate") {
      m.stage = MatchStage::kCandidate;
    } else if (fields[3] == "verified") {
      m.stage = MatchStage::kVerified;
    } else {
      throw bad();
    }
    out.matches.push_back(m);
  }
  std::sort(out.matches.begin(), out.matches.end(), [](const Match& a, const Match& b) {
    return std::tie(a.source, a.target) < std::tie(b.source, b.target);
  });
  return out;
}

}  // namespace lamatch
