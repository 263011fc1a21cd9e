#include <pybind11/eigen.h>
#include <pybind11/functional.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "lamatch/attention.hpp"
#include "lamatch/bench.hpp"
#include "lamatch/encoder.hpp"
#include "lamatch/formats.hpp"
#include "lamatch/matcher.hpp"
#include "lamatch/neighborhood.hpp"
#include "lamatch/parallel.hpp"
#include "lamatch/training.hpp"

namespace py = pybind11;
using namespace lamatch;

namespace {

using Points = Eigen::Matrix<double, Eigen::Dynamic, 2, Eigen::RowMajor>;
using IndexArray = Eigen::Matrix<std::uint32_t, Eigen::Dynamic, 2, Eigen::RowMajor>;

Points to_array(const std::vector<Point2>& pts) {
  Points out(static_cast<Eigen::Index>(pts.size()), 2);
  for (std::size_t k = 0; k < pts.size(); ++k) out.row(static_cast<Eigen::Index>(k)) = pts[k].transpose();
  return out;
}

std::vector<Point2> to_points(const Points& a) {
  std::vector<Point2> out;
  out.reserve(static_cast<std::size_t>(a.rows()));
  for (Eigen::Index r = 0; r < a.rows(); ++r) out.emplace_back(a(r, 0), a(r, 1));
  return out;
}

IndexArray to_array(const std::vector<IndexPair>& pairs) {
  IndexArray out(static_cast<Eigen::Index>(pairs.size()), 2);
  for (std::size_t k = 0; k < pairs.size(); ++k) {
    out(static_cast<Eigen::Index>(k), 0) = pairs[k].first;
    out(static_cast<Eigen::Index>(k), 1) = pairs[k].second;
  }
  return out;
}

std::vector<NeighborhoodPair> to_neighborhoods(
    const std::vector<std::pair<std::vector<std::uint32_t>, std::vector<std::uint32_t>>>& sets) {
  std::vector<NeighborhoodPair> out;
  for (const auto& [s, t] : sets) {
    if (s.empty() || t.empty()) throw DataError("neighborhood sets must be non-empty");
    out.push_back({{s.front(), t.front()}, s, t});
  }
  return out;
}

py::dict metrics_dict(const Metrics& m) {
  py::dict mma;
  for (const auto& [t, v] : m.mma) mma[py::float_(t)] = v;
  py::dict d;
  d["mma"] = mma;
  d["precision"] = m.precision;
  d["recall"] = m.recall;
  d["num_matches"] = m.num_matches;
  d["inlier_ratio"] = m.inlier_ratio;
  return d;
}

py::dict report_dict(const BenchReport& r) {
  py::list points;
  for (const auto& p : r.points) {
    py::dict d;
    d["method"] = p.method;
    d["n"] = p.n;
    d["median_ms"] = p.median_ms;
    d["multiplies"] = p.multiplies;
    d["largest_buffer"] = p.largest_buffer;
    d["n_max"] = p.n_max;
    points.append(d);
  }
  py::dict slopes;
  for (const auto& [m, s] : r.slopes) slopes[py::str(m)] = s;
  py::dict out;
  out["points"] = points;
  out["slopes"] = slopes;
  out["warnings"] = r.warnings;
  return out;
}

}  // namespace

PYBIND11_MODULE(_lamatch, m) {
  m.doc() = "Linear-attention keypoint matching";

  auto base = py::register_exception<Error>(m, "LamatchError", PyExc_RuntimeError);
  py::register_exception<ConfigError>(m, "ConfigError", base.ptr());
  py::register_exception<DataError>(m, "DataError", base.ptr());

  m.def("set_num_threads", &set_num_threads, py::arg("n"));
  m.def("num_threads", &num_threads);
  m.def("derive_seed", py::overload_cast<std::uint64_t, std::string_view>(&derive_seed),
        py::arg("seed"), py::arg("stream"));

  // Geometry and data.
  py::class_<KeypointSet>(m, "KeypointSet")
      .def(py::init([](const Points& kps, const Matrix& desc, std::uint32_t w, std::uint32_t h) {
             KeypointSet s;
             s.keypoints = to_points(kps);
             s.descriptors = desc;
             s.width = w;
             s.height = h;
             s.validate();
             return s;
           }),
           py::arg("keypoints"), py::arg("descriptors"), py::arg("width"), py::arg("height"))
      .def_property_readonly("keypoints", [](const KeypointSet& s) { return to_array(s.keypoints); })
      .def_readonly("descriptors", &KeypointSet::descriptors)
      .def_readonly("width", &KeypointSet::width)
      .def_readonly("height", &KeypointSet::height)
      .def("__len__", &KeypointSet::size);

  py::class_<GroundTruth>(m, "GroundTruth")
      .def_property_readonly("pairs", [](const GroundTruth& g) { return to_array(g.pairs); })
      .def_readonly("unmatchable_source", &GroundTruth::unmatchable_source)
      .def_readonly("unmatchable_target", &GroundTruth::unmatchable_target);

  py::class_<Homography>(m, "Homography")
      .def(py::init<>())
      .def(py::init<const Eigen::Matrix3d&>(), py::arg("matrix"))
      .def_property_readonly("matrix", &Homography::matrix)
      .def("inverse", &Homography::inverse)
      .def("apply", &Homography::apply, py::arg("point"));

  m.def(
      "apply_homography",
      [](const Homography& h, const Points& pts) { return apply_homography(h, to_points(pts)); },
      py::arg("h"), py::arg("points"));

  py::class_<GenNoiseConfig>(m, "GenNoiseConfig")
      .def(py::init<>())
      .def_readwrite("descriptor_sigma", &GenNoiseConfig::descriptor_sigma)
      .def_readwrite("keypoint_jitter", &GenNoiseConfig::keypoint_jitter)
      .def_readwrite("distractor_fraction", &GenNoiseConfig::distractor_fraction)
      .def_readwrite("identity_homography", &GenNoiseConfig::identity_homography)
      .def_readwrite("min_matches", &GenNoiseConfig::min_matches);

  py::class_<SyntheticPair>(m, "SyntheticPair")
      .def_readonly("source", &SyntheticPair::source)
      .def_readonly("target", &SyntheticPair::target)
      .def_readonly("ground_truth", &SyntheticPair::ground_truth)
      .def_readonly("homography", &SyntheticPair::homography);

  m.def("generate_pair", &generate_pair, py::arg("seed"), py::arg("n_keypoints"), py::arg("width"),
        py::arg("height"), py::arg("descriptor_dim"), py::arg("noise") = GenNoiseConfig{});
  m.def("load_kpds", &load_kpds, py::arg("path"));
  m.def("save_kpds", &save_kpds, py::arg("path"), py::arg("set"));

  // Attention kernels.
  m.def("phi", [](const Matrix& x) { return phi<double>(x); }, py::arg("x"));
  m.def(
      "linear_attention",
      [](const Matrix& q, const Matrix& k, const Matrix& v) { return linear_attention<double>(q, k, v); },
      py::arg("q"), py::arg("k"), py::arg("v"));
  m.def(
      "linear_attention_f32",
      [](const MatrixF& q, const MatrixF& k, const MatrixF& v) { return linear_attention<float>(q, k, v); },
      py::arg("q"), py::arg("k"), py::arg("v"));
  m.def(
      "softmax_attention",
      [](const Matrix& q, const Matrix& k, const Matrix& v) {
        return softmax_attention_reference<double>(q, k, v);
      },
      py::arg("q"), py::arg("k"), py::arg("v"));
  m.def(
      "pairwise_attention",
      [](const Matrix& q, const Matrix& k, const Matrix& v,
         const std::vector<std::pair<std::vector<std::uint32_t>, std::vector<std::uint32_t>>>& sets) {
        return pairwise_attention<double>(q, k, v, to_neighborhoods(sets));
      },
      py::arg("q"), py::arg("k"), py::arg("v"), py::arg("neighborhoods"),
      "Neighborhoods are (source_indices, target_indices) pairs; the first entries form the seed.");
  m.def(
      "multi_head_linear_attention",
      [](const Matrix& q, const Matrix& k, const Matrix& v, int heads) {
        return multi_head<double>(
            [](const Matrix& a, const Matrix& b, const Matrix& c) { return linear_attention<double>(a, b, c); },
            q, k, v, heads);
      },
      py::arg("q"), py::arg("k"), py::arg("v"), py::arg("heads"));

  // Network.
  py::class_<NetworkConfig>(m, "NetworkConfig")
      .def(py::init([](std::uint32_t d, std::uint32_t c, int heads, std::uint32_t l1, std::uint32_t l2) {
             return NetworkConfig{d, c, heads, l1, l2};
           }),
           py::arg("input_dim") = 256, py::arg("hidden_dim") = 64, py::arg("heads") = 8,
           py::arg("l1") = 4, py::arg("l2") = 2)
      .def_readwrite("input_dim", &NetworkConfig::input_dim)
      .def_readwrite("hidden_dim", &NetworkConfig::hidden_dim)
      .def_readwrite("heads", &NetworkConfig::heads)
      .def_readwrite("l1", &NetworkConfig::l1)
      .def_readwrite("l2", &NetworkConfig::l2);

  py::class_<NetworkWeights>(m, "NetworkWeights")
      .def_readonly("config", &NetworkWeights::config)
      .def("parameter_count", &NetworkWeights::parameter_count)
      .def("tensors", [](const NetworkWeights& w) {
        py::dict out;
        w.for_each_tensor([&](const std::string& name, const auto& t) { out[py::str(name)] = t; });
        return out;
      });

  m.def("init_weights", &init_weights, py::arg("config"), py::arg("seed"));
  m.def("identity_weights", &identity_weights, py::arg("config"));
  m.def("save_weights", &save_weights, py::arg("path"), py::arg("weights"));
  m.def("load_weights", &load_weights, py::arg("path"), py::arg("heads"));

  py::class_<NeighborhoodConfig>(m, "NeighborhoodConfig")
      .def(py::init<>())
      .def_readwrite("theta", &NeighborhoodConfig::theta)
      .def_readwrite("lambda_", &NeighborhoodConfig::lambda)
      .def_readwrite("radius", &NeighborhoodConfig::radius)
      .def_readwrite("radius_s", &NeighborhoodConfig::radius_s)
      .def_readwrite("radius_t", &NeighborhoodConfig::radius_t)
      .def_readwrite("min_neighborhood", &NeighborhoodConfig::min_neighborhood);

  m.def("default_radius", &default_radius, py::arg("width"), py::arg("height"));
  m.def(
      "ratio_match",
      [](const Matrix& s, const Matrix& t, double theta) {
        const auto r = ratio_match(s, t, theta);
        return py::make_tuple(to_array(r.matches), r.ratio_score);
      },
      py::arg("source"), py::arg("target"), py::arg("theta") = 1.0,
      "Returns (pairs, ratio_scores).");

  m.def(
      "forward",
      [](const KeypointSet& s, const KeypointSet& t, const NetworkWeights& w,
         const NeighborhoodConfig& cfg, bool skip_pairwise) {
        ForwardOptions opt;
        opt.skip_pairwise = skip_pairwise;
        const auto enc = forward(s, t, w, cfg, opt);
        py::dict d;
        d["xs_hat"] = enc.xs_hat;
        d["xt_hat"] = enc.xt_hat;
        d["fs_hat"] = enc.fs_hat;
        d["ft_hat"] = enc.ft_hat;
        d["num_neighborhoods"] = enc.neighborhoods.size();
        return d;
      },
      py::arg("source"), py::arg("target"), py::arg("weights"),
      py::arg("neighborhood") = NeighborhoodConfig{}, py::arg("skip_pairwise") = false);

  // Matching.
  py::class_<FilterConfig>(m, "FilterConfig")
      .def(py::init<>())
      .def_readwrite("ransac_iterations", &FilterConfig::ransac_iterations)
      .def_readwrite("inlier_threshold_factor", &FilterConfig::inlier_threshold_factor)
      .def_readwrite("min_inliers", &FilterConfig::min_inliers)
      .def_readwrite("rng_seed", &FilterConfig::rng_seed)
      .def_readwrite("radius_t", &FilterConfig::radius_t);

  py::class_<PipelineConfig>(m, "PipelineConfig")
      .def(py::init<>())
      .def_readwrite("neighborhood", &PipelineConfig::neighborhood)
      .def_readwrite("filter", &PipelineConfig::filter)
      .def_readwrite("filter_enabled", &PipelineConfig::filter_enabled)
      .def_readwrite("skip_pairwise", &PipelineConfig::skip_pairwise);

  py::class_<MatchSet>(m, "MatchSet")
      .def(py::init<>())
      .def_property_readonly("pairs",
                             [](const MatchSet& s) {
                               std::vector<IndexPair> p;
                               for (const auto& x : s.matches) p.emplace_back(x.source, x.target);
                               return to_array(p);
                             })
      .def_property_readonly("scores",
                             [](const MatchSet& s) {
                               std::vector<double> v;
                               for (const auto& x : s.matches) v.push_back(x.score);
                               return v;
                             })
      .def_property_readonly("stages",
                             [](const MatchSet& s) {
                               std::vector<std::string> v;
                               for (const auto& x : s.matches) v.emplace_back(stage_name(x.stage));
                               return v;
                             })
      .def("contains", &MatchSet::contains)
      .def("__len__", &MatchSet::size)
      .def("to_csv", [](const MatchSet& s) { return matches_to_csv(s); });

  m.def("match_pipeline", &match_pipeline, py::arg("source"), py::arg("target"), py::arg("weights"),
        py::arg("config") = PipelineConfig{}, py::call_guard<py::gil_scoped_release>());
  m.def(
      "evaluate",
      [](const MatchSet& ms, const GroundTruth& gt, const Homography& h, const KeypointSet& s,
         const KeypointSet& t, const std::vector<double>& thresholds) {
        return metrics_dict(evaluate(ms, gt, h, s, t, thresholds));
      },
      py::arg("matches"), py::arg("ground_truth"), py::arg("homography"), py::arg("source"),
      py::arg("target"), py::arg("thresholds") = std::vector<double>{1, 2, 3, 4, 5, 6, 7, 8, 9, 10});
  m.def("load_matches", &load_matches, py::arg("path"));
  m.def("save_matches", &save_matches, py::arg("path"), py::arg("matches"));

  // Training.
  py::class_<LossConfig>(m, "LossConfig")
      .def(py::init<>())
      .def_readwrite("m_p", &LossConfig::m_p)
      .def_readwrite("m_n", &LossConfig::m_n)
      .def_readwrite("learning_rate", &LossConfig::learning_rate)
      .def_readwrite("decay", &LossConfig::decay)
      .def_readwrite("detach_confidence", &LossConfig::detach_confidence);

  m.def("ranking_loss", &ranking_loss, py::arg("xs"), py::arg("xt"), py::arg("i"), py::arg("j"),
        py::arg("config") = LossConfig{});
  m.def("pair_loss", &pair_loss, py::arg("weights"), py::arg("pair"), py::arg("config") = LossConfig{},
        py::arg("neighborhood") = NeighborhoodConfig{});
  m.def(
      "gradcheck",
      [](const NetworkWeights& w, const SyntheticPair& p, const LossConfig& cfg, std::size_t samples,
         std::uint64_t seed) {
        const auto r = gradcheck(w, p, cfg, samples, seed);
        py::dict d;
        d["max_rel_error"] = r.max_rel_error;
        d["pass_fraction"] = r.pass_fraction;
        d["entries"] = r.entries.size();
        return d;
      },
      py::arg("weights"), py::arg("pair"), py::arg("config") = LossConfig{}, py::arg("samples") = 0,
      py::arg("seed") = 0);

  py::class_<ToyDataConfig>(m, "ToyDataConfig")
      .def(py::init<>())
      .def_readwrite("pairs", &ToyDataConfig::pairs)
      .def_readwrite("keypoints", &ToyDataConfig::keypoints)
      .def_readwrite("width", &ToyDataConfig::width)
      .def_readwrite("height", &ToyDataConfig::height)
      .def_readwrite("descriptor_dim", &ToyDataConfig::descriptor_dim)
      .def_readwrite("noise", &ToyDataConfig::noise);

  m.def("make_toy_dataset", &make_toy_dataset, py::arg("config"), py::arg("seed"), py::arg("first") = 0);
  m.def(
      "train_toy",
      [](const NetworkWeights& init, const std::vector<SyntheticPair>& data, const LossConfig& cfg,
         std::uint64_t steps, std::uint64_t seed) {
        TrainResult r;
        {
          py::gil_scoped_release release;
          r = train_toy(init, data, cfg, steps, seed);
        }
        std::vector<double> losses;
        for (const auto& t : r.trace) losses.push_back(t.loss);
        return py::make_tuple(r.weights, losses);
      },
      py::arg("init"), py::arg("dataset"), py::arg("config"), py::arg("steps"), py::arg("seed") = 0,
      "Returns (weights, per-step losses).");

  // Benchmarks.
  py::class_<BenchConfig>(m, "BenchConfig")
      .def(py::init<>())
      .def_readwrite("sizes", &BenchConfig::sizes)
      .def_readwrite("hidden_dim", &BenchConfig::hidden_dim)
      .def_readwrite("reps", &BenchConfig::reps)
      .def_readwrite("warmup", &BenchConfig::warmup)
      .def_readwrite("min_total_ms", &BenchConfig::min_total_ms)
      .def_readwrite("seed", &BenchConfig::seed);

  m.def(
      "bench_attention",
      [](const std::vector<std::string>& methods, const BenchConfig& cfg) {
        BenchReport r;
        {
          py::gil_scoped_release release;
          r = bench_attention(methods, cfg);
        }
        return report_dict(r);
      },
      py::arg("methods"), py::arg("config") = BenchConfig{});
  m.def("loglog_slope", &loglog_slope, py::arg("x"), py::arg("y"));
}
