#pragma once

#include <filesystem>
#include <sstream>
#include <string>
#include <vector>

#include "commands.hpp"
#include "lamatch/common.hpp"

namespace testing {

template <typename T = double>
lamatch::RowMatrix<T> random_matrix(Eigen::Index rows, Eigen::Index cols, lamatch::Rng& rng) {
  lamatch::RowMatrix<T> m(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r) {
    for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = static_cast<T>(rng.normal());
  }
  return m;
}

template <typename A, typename B>
double max_abs_diff(const A& a, const B& b) {
  if (a.size() == 0) return 0.0;
  return static_cast<double>((a.template cast<double>() - b.template cast<double>()).cwiseAbs().maxCoeff());
}

// Fresh scratch directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& name)
      : path_(std::filesystem::temp_directory_path() / ("lamatch_unit_" + name)) {
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& s) const { return path_ / s; }

 private:
  std::filesystem::path path_;
};

struct CliResult {
  int code = 0;
  std::string out, err;
};

inline CliResult run(const std::vector<std::string>& args) {
  std::vector<const char*> argv{"lamatch"};
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  CliResult r;
  r.code = lamatch::cli::run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
  r.out = out.str();
  r.err = err.str();
  return r;
}

}  // namespace testing
