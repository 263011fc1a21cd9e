#include "lamatch/bench.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <memory>
#include <sstream>

#include <json.hpp>

#include "lamatch/attention.hpp"
#include "lamatch/geometry.hpp"
#include "lamatch/parallel.hpp"

namespace lamatch {

double BenchReport::slope(const std::string& method) const {
  for (const auto& [m, s] : slopes) {
    if (m == method) return s;
  }
  throw ConfigError("no slope recorded for method '" + method + "'");
}

void BenchConfig::validate() const {
  if (sizes.size() < 2) throw ConfigError("bench needs at least 2 sizes (slope undefined)");
  for (std::size_t k = 1; k < sizes.size(); ++k) {
    if (sizes[k] <= sizes[k - 1]) throw ConfigError("bench sizes must be strictly increasing");
  }
  if (sizes.front() == 0) throw ConfigError("bench sizes must be positive");
  if (sizes.back() < 4 * sizes.front()) throw ConfigError("bench sizes must span at least 4x");
  if (hidden_dim == 0) throw ConfigError("bench hidden_dim must be positive");
  if (reps < 3) throw ConfigError("bench reps must be >= 3");
  if (warmup < 0) throw ConfigError("bench warmup must be >= 0");
  if (!(min_total_ms >= 0.0)) throw ConfigError("bench min_total_ms must be >= 0");
}

double loglog_slope(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size() || x.size() < 2) throw ConfigError("slope needs at least 2 points");
  double mx = 0, my = 0;
  for (std::size_t k = 0; k < x.size(); ++k) {
    mx += std::log(x[k]);
    my += std::log(y[k]);
  }
  mx /= static_cast<double>(x.size());
  my /= static_cast<double>(x.size());
  double sxy = 0, sxx = 0;
  for (std::size_t k = 0; k < x.size(); ++k) {
    const double dx = std::log(x[k]) - mx;
    sxy += dx * (std::log(y[k]) - my);
    sxx += dx * dx;
  }
  return sxy / sxx;
}

namespace {

using Clock = std::chrono::steady_clock;

double elapsed_ms(const std::function<void()>& run) {
  const auto t0 = Clock::now();
  run();
  return std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

// One benchmark instance: the timed body and a hook that fills the
// non-timing fields of its point.
struct Case {
  std::function<void()> run;
  std::function<void(BenchPoint&)> describe;
};

// Times all cases round-robin so that drift in machine speed hits every size
// alike. Each of the `reps` rounds runs a case often enough to collect its
// share of `min_total_ms`; extra rounds follow for any case still short.
std::vector<double> interleaved_medians(const std::vector<Case>& cases, const BenchConfig& cfg) {
  std::vector<std::size_t> per_round(cases.size(), 1);
  const double share = cfg.min_total_ms / cfg.reps;
  for (std::size_t k = 0; k < cases.size(); ++k) {
    double t = 0.0;
    for (int w = 0; w < std::max(cfg.warmup, 1); ++w) t = elapsed_ms(cases[k].run);
    if (t > 0.0 && share > t) per_round[k] = static_cast<std::size_t>(std::ceil(share / t));
  }
  std::vector<std::vector<double>> times(cases.size());
  std::vector<double> total(cases.size(), 0.0);
  for (int round = 0;; ++round) {
    bool ran = false;
    for (std::size_t k = 0; k < cases.size(); ++k) {
      if (round >= cfg.reps && total[k] >= cfg.min_total_ms) continue;
      for (std::size_t r = 0; r < per_round[k]; ++r) {
        times[k].push_back(elapsed_ms(cases[k].run));
        total[k] += times[k].back();
      }
      ran = true;
    }
    if (!ran) break;
  }
  std::vector<double> out;
  for (auto& t : times) out.push_back(median(std::move(t)));
  return out;
}

MatrixF random_matrix(std::size_t rows, std::size_t cols, Rng& rng) {
  MatrixF m(rows, cols);
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    for (Eigen::Index c = 0; c < m.cols(); ++c) m(r, c) = static_cast<float>(rng.normal());
  }
  return m;
}

// Disjoint blocks of 64 consecutive indices on both sides.
std::vector<NeighborhoodPair> block_neighborhoods(std::size_t n) {
  std::vector<NeighborhoodPair> out;
  for (std::size_t b = 0; b < n; b += 64) {
    NeighborhoodPair p;
    p.seed = {static_cast<std::uint32_t>(b), static_cast<std::uint32_t>(b)};
    for (std::size_t i = b; i < std::min(n, b + 64); ++i) {
      p.source_set.push_back(static_cast<std::uint32_t>(i));
      p.target_set.push_back(static_cast<std::uint32_t>(i));
    }
    out.push_back(std::move(p));
  }
  return out;
}

// Builds `make_case(method, n)` for every size and times them together,
// doubling all sizes while the smallest median sits under the timer floor.
template <typename MakeCase>
BenchReport sweep(const std::vector<std::string>& methods, const BenchConfig& cfg,
                  MakeCase&& make_case) {
  cfg.validate();
  std::vector<std::size_t> sizes = cfg.sizes;
  std::vector<std::string> warnings;
  for (int attempt = 0;; ++attempt) {
    BenchReport report;
    bool too_fast = false;
    for (const auto& method : methods) {
      std::vector<Case> cases;
      for (std::size_t n : sizes) cases.push_back(make_case(method, n));
      const std::vector<double> medians = interleaved_medians(cases, cfg);
      std::vector<double> xs, ys;
      for (std::size_t k = 0; k < sizes.size(); ++k) {
        BenchPoint p;
        p.method = method;
        p.n = sizes[k];
        p.median_ms = medians[k];
        cases[k].describe(p);
        xs.push_back(static_cast<double>(p.n));
        ys.push_back(std::max(p.median_ms, 1e-9));
        if (k == 0 && p.median_ms < cfg.min_median_ms) too_fast = true;
        report.points.push_back(std::move(p));
      }
      report.slopes.emplace_back(method, loglog_slope(xs, ys));
    }
    if (!too_fast || attempt >= cfg.max_doublings) {
      if (too_fast) warnings.push_back("median still below the timer floor; slopes are unreliable");
      report.warnings = std::move(warnings);
      return report;
    }
    for (auto& n : sizes) n *= 2;
    std::ostringstream msg;
    msg << "median under " << cfg.min_median_ms << " ms; doubled sizes to start at "
        << sizes.front();
    warnings.push_back(msg.str());
  }
}

}  // namespace

BenchReport bench_attention(const std::vector<std::string>& methods, const BenchConfig& cfg) {
  for (const auto& m : methods) {
    if (m != "linear" && m != "softmax" && m != "pairwise") {
      throw ConfigError("unknown attention method '" + m + "'");
    }
  }
  return sweep(methods, cfg, [&](const std::string& method, std::size_t n) {
    struct Inputs {
      MatrixF q, k, v;
      std::vector<NeighborhoodPair> pairs;
    };
    Rng rng(derive_seed(derive_seed(cfg.seed, "bench_attention"), n));
    auto in = std::make_shared<Inputs>();
    in->q = random_matrix(n, cfg.hidden_dim, rng);
    in->k = random_matrix(n, cfg.hidden_dim, rng);
    in->v = random_matrix(n, cfg.hidden_dim, rng);
    in->pairs = block_neighborhoods(n);
    Case c;
    if (method == "linear") {
      c.run = [in] { (void)linear_attention<float>(in->q, in->k, in->v); };
    } else if (method == "softmax") {
      c.run = [in] { (void)softmax_attention_reference<float>(in->q, in->k, in->v); };
    } else {
      c.run = [in] { (void)pairwise_attention<float>(in->q, in->k, in->v, in->pairs); };
    }
    c.describe = [run = c.run](BenchPoint& p) {
      ops::reset();
      run();
      const ops::Counters counts = ops::snapshot();
      p.multiplies = counts.multiplies;
      p.largest_buffer = counts.largest_buffer;
    };
    return c;
  });
}

BenchReport bench_pipeline(const BenchConfig& cfg, const NetworkConfig& net,
                           const PipelineConfig& pipeline) {
  net.validate();
  auto weights = std::make_shared<const NetworkWeights>(
      init_weights(net, derive_seed(cfg.seed, "bench_weights")));
  return sweep({"pipeline"}, cfg, [&](const std::string&, std::size_t n) {
    GenNoiseConfig noise;
    noise.descriptor_sigma = 0.1;
    noise.keypoint_jitter = 0.5;
    // Keep keypoint density fixed as N grows.
    const auto side = static_cast<std::uint32_t>(std::ceil(std::sqrt(static_cast<double>(n) * 400.0)));
    auto pair = std::make_shared<const SyntheticPair>(
        generate_pair(derive_seed(derive_seed(cfg.seed, "bench_pipeline"), n),
                      static_cast<std::uint32_t>(n), side, side, net.input_dim, noise));
    Case c;
    c.run = [pair, weights, pipeline] {
      (void)match_pipeline(pair->source, pair->target, *weights, pipeline);
    };
    c.describe = [pair, weights, pipeline](BenchPoint& p) {
      ForwardOptions opts;
      opts.skip_pairwise = pipeline.skip_pairwise;
      const EncodedPair enc =
          forward(pair->source, pair->target, *weights, pipeline.neighborhood, opts);
      const DistanceMatchResult dm =
          distance_match(enc, pair->source, pair->target, pipeline.neighborhood);
      for (const auto& np : enc.neighborhoods) p.n_max = std::max(p.n_max, np.source_set.size());
      for (const auto& np : dm.neighborhoods) p.n_max = std::max(p.n_max, np.source_set.size());
    };
    return c;
  });
}

AuditResult op_counter_audit(std::size_t n, std::size_t m, std::size_t c, std::uint64_t seed) {
  if (!ops::kEnabled) throw ConfigError("op counters are compiled out");
  const int saved_threads = num_threads();
  // Counters are per thread; run on the calling thread only.
  set_num_threads(1);
  Rng rng(derive_seed(seed, "op_counter_audit"));
  const MatrixF q = random_matrix(n, c, rng);
  const MatrixF k = random_matrix(m, c, rng);
  const MatrixF v = random_matrix(m, c, rng);

  AuditResult out;
  out.n = n;
  out.m = m;
  out.c = c;
  ops::reset();
  (void)linear_attention<float>(q, k, v);
  out.linear = ops::snapshot();
  ops::reset();
  (void)softmax_attention_reference<float>(q, k, v);
  out.softmax = ops::snapshot();
  set_num_threads(saved_threads);

  const std::uint64_t nm = static_cast<std::uint64_t>(n) * m;
  out.linear_bound = 2 * ((n + m) * c * c + (n + m) * c);
  out.linear_within_bound = !out.linear.overflowed && out.linear.multiplies <= out.linear_bound;
  out.linear_has_nm_buffer = out.linear.largest_buffer >= nm;
  out.softmax_has_nm_buffer = out.softmax.largest_buffer >= nm;
  return out;
}

std::string report_to_csv(const BenchReport& r) {
  std::ostringstream os;
  os << "method,n,median_ms,slope\n";
  for (const auto& p : r.points) {
    os << p.method << ',' << p.n << ',' << p.median_ms << ',' << r.slope(p.method) << '\n';
  }
  return os.str();
}

std::string report_to_json(const BenchReport& r) {
  nlohmann::ordered_json j;
  nlohmann::ordered_json slopes = nlohmann::ordered_json::object();
  for (const auto& [m, s] : r.slopes) slopes[m] = s;
  j["slopes"] = slopes;
  j["points"] = nlohmann::ordered_json::array();
  for (const auto& p : r.points) {
    j["points"].push_back({{"method", p.method},
                           {"n", p.n},
                           {"median_ms", p.median_ms},
                           {"multiplies", p.multiplies},
                           {"largest_buffer", p.largest_buffer},
                           {"n_max", p.n_max}});
  }
  j["warnings"] = r.warnings;
  return j.dump(2) + "\n";
}

}  // namespace lamatch
