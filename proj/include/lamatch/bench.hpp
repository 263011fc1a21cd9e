#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "lamatch/matcher.hpp"
#include "lamatch/op_counter.hpp"
#include "lamatch/weights.hpp"

namespace lamatch {

struct BenchPoint {
  std::string method;
  std::size_t n = 0;
  double median_ms = 0.0;
  std::uint64_t multiplies = 0;
  std::uint64_t largest_buffer = 0;
  std::size_t n_max = 0;  // largest neighborhood (pipeline only)
};

struct BenchReport {
  std::vector<BenchPoint> points;
  std::vector<std::pair<std::string, double>> slopes;  // per method, in first-seen order
  std::vector<std::string> warnings;

  double slope(const std::string& method) const;
};

struct BenchConfig {
  std::vector<std::size_t> sizes{1024, 2048, 4096, 8192};
  std::size_t hidden_dim = 64;
  int reps = 5;
  int warmup = 2;
  // Minimum timed work per size; short kernels are repeated to reach it.
  double min_total_ms = 200.0;
  std::uint64_t seed = 0;
  // Median below this triggers doubling every size (timer resolution).
  double min_median_ms = 1.0;
  int max_doublings = 4;

  void validate() const;
};

// Least-squares slope of log(y) against log(x).
double loglog_slope(const std::vector<double>& x, const std::vector<double>& y);

// Methods: "linear", "softmax", "pairwise". Inputs are random f32 Q/K/V
// with M = N.
BenchReport bench_attention(const std::vector<std::string>& methods, const BenchConfig& cfg);

// Times forward + match_pipeline end to end on synthetic pairs of N keypoints.
BenchReport bench_pipeline(const BenchConfig& cfg, const NetworkConfig& net,
                           const PipelineConfig& pipeline);

struct AuditResult {
  std::size_t n = 0, m = 0, c = 0;
  ops::Counters linear, softmax;
  std::uint64_t linear_bound = 0;  // 2 * ((M+N) C'^2 + (M+N) C')
  bool linear_within_bound = false;
  bool linear_has_nm_buffer = false;
  bool softmax_has_nm_buffer = false;
};

// Runs both kernels once on an N x M instance with the counters reset.
AuditResult op_counter_audit(std::size_t n, std::size_t m, std::size_t c, std::uint64_t seed);

std::string report_to_csv(const BenchReport& r);
std::string report_to_json(const BenchReport& r);

}  // namespace lamatch
