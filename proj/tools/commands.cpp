#include "commands.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "lamatch/bench.hpp"
#include "lamatch/formats.hpp"
#include "lamatch/matcher.hpp"
#include "lamatch/parallel.hpp"
#include "lamatch/training.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace lamatch::cli {
namespace {

struct SynthConfig {
  std::uint32_t pairs = 10;
  std::uint32_t keypoints = 512;
  std::uint32_t width = 640, height = 480;
  std::uint32_t descriptor_dim = 256;
  GenNoiseConfig noise{0.1, 0.5, 0.1, false, 0};
};

struct TrainConfig {
  std::uint64_t steps = 300;
  std::uint32_t heldout = 20;
};

// Everything a config file can set. Sections mirror the module configs.
struct RunConfig {
  std::uint64_t seed = 0;
  int threads = 1;
  NetworkConfig network;
  bool network_set = false;  // train-toy and gradcheck have their own defaults
  NeighborhoodConfig neighborhood;
  FilterConfig filter;
  LossConfig loss;
  BenchConfig bench;
  SynthConfig synth;
  ToyDataConfig toy;
  TrainConfig train;
};

// Reads `key` into `dst` when present; every key must be consumed.
class Section {
 public:
  Section(const json& j, std::string name) : j_(j), name_(std::move(name)) {
    if (!j_.is_object()) throw ConfigError("config section '" + name_ + "' must be an object");
  }

  template <typename T>
  Section& get(const char* key, T& dst) {
    seen_.insert(key);
    auto it = j_.find(key);
    if (it == j_.end()) return *this;
    try {
      dst = it->get<T>();
    } catch (const json::exception&) {
      throw ConfigError("config key '" + name_ + "." + key + "' has the wrong type");
    }
    return *this;
  }

  void done() const {
    for (const auto& [k, v] : j_.items()) {
      if (!seen_.count(k)) throw ConfigError("unknown config key '" + name_ + "." + k + "'");
    }
  }

 private:
  const json& j_;
  std::string name_;
  std::set<std::string> seen_;
};

void apply_sections(const json& j, RunConfig& rc);

void apply_config_file(const fs::path& path, RunConfig& rc) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  if (!j.is_object()) throw ConfigError(path.string() + ": top level must be an object");
  try {
    apply_sections(j, rc);
  } catch (const json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  } catch (const ConfigError& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

void apply_sections(const json& j, RunConfig& rc) {
  static const std::set<std::string> sections{"seed",   "threads", "network", "neighborhood", "filter",
                                              "loss",   "bench",   "synth",   "toy",          "train"};
  for (const auto& [k, v] : j.items()) {
    if (!sections.count(k)) throw ConfigError("unknown config key '" + k + "'");
  }
  if (j.contains("seed")) rc.seed = j["seed"].get<std::uint64_t>();
  if (j.contains("threads")) rc.threads = j["threads"].get<int>();
  if (j.contains("network")) {
    rc.network_set = true;
    Section(j["network"], "network")
        .get("input_dim", rc.network.input_dim)
        .get("hidden_dim", rc.network.hidden_dim)
        .get("heads", rc.network.heads)
        .get("l1", rc.network.l1)
        .get("l2", rc.network.l2)
        .done();
  }
  if (j.contains("neighborhood")) {
    auto& n = rc.neighborhood;
    Section(j["neighborhood"], "neighborhood")
        .get("theta", n.theta)
        .get("lambda", n.lambda)
        .get("radius", n.radius)
        .get("radius_s", n.radius_s)
        .get("radius_t", n.radius_t)
        .get("min_neighborhood", n.min_neighborhood)
        .done();
  }
  if (j.contains("filter")) {
    auto& f = rc.filter;
    Section(j["filter"], "filter")
        .get("ransac_iterations", f.ransac_iterations)
        .get("inlier_threshold_factor", f.inlier_threshold_factor)
        .get("min_inliers", f.min_inliers)
        .get("radius_t", f.radius_t)
        .done();
  }
  if (j.contains("loss")) {
    auto& l = rc.loss;
    Section(j["loss"], "loss")
        .get("m_p", l.m_p)
        .get("m_n", l.m_n)
        .get("learning_rate", l.learning_rate)
        .get("decay", l.decay)
        .get("detach_confidence", l.detach_confidence)
        .done();
  }
  if (j.contains("bench")) {
    auto& b = rc.bench;
    Section(j["bench"], "bench")
        .get("sizes", b.sizes)
        .get("hidden_dim", b.hidden_dim)
        .get("reps", b.reps)
        .get("warmup", b.warmup)
        .get("min_median_ms", b.min_median_ms)
        .get("min_total_ms", b.min_total_ms)
        .done();
  }
  const auto noise_section = [](const json& sj, const std::string& name, std::uint32_t& pairs,
                                std::uint32_t& kpts, std::uint32_t& w, std::uint32_t& h,
                                std::uint32_t& dim, GenNoiseConfig& nz) {
    Section(sj, name)
        .get("pairs", pairs)
        .get("keypoints", kpts)
        .get("width", w)
        .get("height", h)
        .get("descriptor_dim", dim)
        .get("descriptor_sigma", nz.descriptor_sigma)
        .get("keypoint_jitter", nz.keypoint_jitter)
        .get("distractor_fraction", nz.distractor_fraction)
        .get("identity_homography", nz.identity_homography)
        .get("min_matches", nz.min_matches)
        .done();
  };
  if (j.contains("synth")) {
    auto& s = rc.synth;
    noise_section(j["synth"], "synth", s.pairs, s.keypoints, s.width, s.height, s.descriptor_dim,
                  s.noise);
  }
  if (j.contains("toy")) {
    auto& t = rc.toy;
    noise_section(j["toy"], "toy", t.pairs, t.keypoints, t.width, t.height, t.descriptor_dim,
                  t.noise);
  }
  if (j.contains("train")) {
    Section(j["train"], "train").get("steps", rc.train.steps).get("heldout", rc.train.heldout).done();
  }
}

template <typename T>
void override_if(const std::optional<T>& flag, T& dst) {
  if (flag) dst = *flag;
}

void write_text(const fs::path& path, const std::string& text) {
  write_file(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) {
    throw ConfigError("cannot create output directory " + dir.string() +
                      (ec ? ": " + ec.message() : ""));
  }
  const fs::path probe = dir / ".lamatch_write_probe";
  std::ofstream f(probe);
  if (!f) throw ConfigError("output directory " + dir.string() + " is not writable");
  f.close();
  fs::remove(probe, ec);
}

void ensure_parent(const fs::path& file) {
  if (file.has_parent_path()) ensure_dir(file.parent_path());
}

void require_file(const fs::path& path, const char* what) {
  if (!fs::is_regular_file(path)) throw DataError(std::string(what) + " not found: " + path.string());
}

std::vector<std::size_t> parse_sizes(const std::string& s) {
  std::vector<std::size_t> out;
  std::stringstream ss(s);
  for (std::string tok; std::getline(ss, tok, ',');) {
    try {
      std::size_t used = 0;
      const unsigned long long v = std::stoull(tok, &used);
      if (used != tok.size()) throw std::invalid_argument(tok);
      out.push_back(static_cast<std::size_t>(v));
    } catch (const std::exception&) {
      throw ConfigError("bad size '" + tok + "' in --sizes");
    }
  }
  return out;
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  for (std::string tok; std::getline(ss, tok, ',');) {
    if (!tok.empty()) out.push_back(tok);
  }
  return out;
}

// Shared network flags.
struct NetworkFlags {
  std::optional<std::uint32_t> input_dim, hidden_dim, l1, l2;
  std::optional<int> heads;

  void add(CLI::App* app) {
    app->add_option("--input-dim", input_dim, "Descriptor dimension D");
    app->add_option("--hidden-dim", hidden_dim, "Attention width C'");
    app->add_option("--heads", heads, "Attention heads");
    app->add_option("--l1", l1, "Self/cross loop count");
    app->add_option("--l2", l2, "Pairwise loop count");
  }
  bool any() const { return input_dim || hidden_dim || l1 || l2 || heads; }
  void apply(NetworkConfig& n) const {
    override_if(input_dim, n.input_dim);
    override_if(hidden_dim, n.hidden_dim);
    override_if(heads, n.heads);
    override_if(l1, n.l1);
    override_if(l2, n.l2);
  }
};

struct Globals {
  std::optional<std::uint64_t> seed;
  std::optional<std::string> config;
  std::optional<int> threads;
};

RunConfig resolve(const Globals& g) {
  RunConfig rc;
  if (g.config) apply_config_file(*g.config, rc);
  override_if(g.seed, rc.seed);
  override_if(g.threads, rc.threads);
  if (rc.threads < 1) throw ConfigError("--threads must be >= 1");
  set_num_threads(rc.threads);
  return rc;
}

// ---------------------------------------------------------------------------

struct SynthFlags {
  std::optional<std::uint32_t> pairs, kpts, width, height, dim, min_matches;
  std::optional<double> sigma, jitter, distractors;
  bool identity = false;
  std::string out_dir;
};

int cmd_synth(const Globals& g, const SynthFlags& f, std::ostream& out) {
  RunConfig rc = resolve(g);
  SynthConfig& s = rc.synth;
  override_if(f.pairs, s.pairs);
  override_if(f.kpts, s.keypoints);
  override_if(f.width, s.width);
  override_if(f.height, s.height);
  override_if(f.dim, s.descriptor_dim);
  override_if(f.sigma, s.noise.descriptor_sigma);
  override_if(f.jitter, s.noise.keypoint_jitter);
  override_if(f.distractors, s.noise.distractor_fraction);
  override_if(f.min_matches, s.noise.min_matches);
  if (f.identity) s.noise.identity_homography = true;
  if (s.pairs == 0) throw ConfigError("--pairs must be >= 1");
  if (s.keypoints == 0) throw ConfigError("--kpts must be >= 1");
  if (s.width == 0 || s.height == 0) throw ConfigError("--width and --height must be >= 1");
  if (s.descriptor_dim == 0) throw ConfigError("--dim must be >= 1");
  if (s.noise.descriptor_sigma < 0 || s.noise.keypoint_jitter < 0 || s.noise.distractor_fraction < 0) {
    throw ConfigError("noise magnitudes must be non-negative");
  }

  const fs::path root(f.out_dir);
  ensure_dir(root);
  json manifest;
  manifest["seed"] = rc.seed;
  manifest["pairs"] = json::array();
  std::size_t total_gt = 0;
  for (std::uint32_t k = 0; k < s.pairs; ++k) {
    const SyntheticPair p = generate_pair(derive_seed(rc.seed, static_cast<std::uint64_t>(k)),
                                          s.keypoints, s.width, s.height, s.descriptor_dim, s.noise);
    char name[32];
    std::snprintf(name, sizeof(name), "pair_%04u", k);
    const fs::path dir = root / name;
    ensure_dir(dir);
    save_kpds(dir / "source.kpds", p.source);
    save_kpds(dir / "target.kpds", p.target);
    save_ground_truth(dir / "gt.csv", p.ground_truth);
    save_homography(dir / "homography.txt", p.homography);
    total_gt += p.ground_truth.pairs.size();
    manifest["pairs"].push_back({{"name", name},
                                 {"source", std::string(name) + "/source.kpds"},
                                 {"target", std::string(name) + "/target.kpds"},
                                 {"ground_truth", std::string(name) + "/gt.csv"},
                                 {"homography", std::string(name) + "/homography.txt"},
                                 {"num_ground_truth", p.ground_truth.pairs.size()}});
  }
  write_text(root / "manifest.json", manifest.dump(2) + "\n");
  out << "synth: wrote " << s.pairs << " pairs (" << total_gt << " ground-truth matches) to "
      << root.string() << "\n";
  return kOk;
}

// ---------------------------------------------------------------------------

struct InitFlags {
  NetworkFlags net;
  bool identity = false;
  std::string output;
};

int cmd_init(const Globals& g, const InitFlags& f, std::ostream& out) {
  RunConfig rc = resolve(g);
  f.net.apply(rc.network);
  rc.network.validate();
  const NetworkWeights w =
      f.identity ? identity_weights(rc.network) : init_weights(rc.network, rc.seed);
  ensure_parent(f.output);
  save_weights(f.output, w);
  out << "init: wrote " << w.parameter_count() << " parameters (" << w.layers.size()
      << " layers) to " << f.output << "\n";
  return kOk;
}

// ---------------------------------------------------------------------------

struct MatchFlags {
  std::string source, target, weights;
  std::optional<int> heads;
  bool no_filter = false;
  bool skip_pairwise = false;
  std::optional<std::string> output;
};

int cmd_match(const Globals& g, const MatchFlags& f, std::ostream& out, std::ostream& err) {
  RunConfig rc = resolve(g);
  override_if(f.heads, rc.network.heads);
  require_file(f.source, "source keypoint file");
  require_file(f.target, "target keypoint file");
  require_file(f.weights, "weights file");
  const KeypointSet ks = load_kpds(f.source);
  const KeypointSet kt = load_kpds(f.target);
  const NetworkWeights w = load_weights(f.weights, rc.network.heads);
  for (const KeypointSet* set : {&ks, &kt}) {
    if (set->dim() != w.config.input_dim) {
      throw DataError("descriptor dimension " + std::to_string(set->dim()) +
                      " does not match the weights' input dimension " +
                      std::to_string(w.config.input_dim));
    }
  }
  PipelineConfig pc;
  pc.neighborhood = rc.neighborhood;
  pc.filter = rc.filter;
  pc.filter.rng_seed = derive_seed(rc.seed, "filter");
  pc.filter_enabled = !f.no_filter;
  pc.skip_pairwise = f.skip_pairwise;
  const MatchSet m = match_pipeline(ks, kt, w, pc);
  std::ostream& summary = f.output ? out : err;
  if (f.output) {
    ensure_parent(*f.output);
    save_matches(*f.output, m);
  } else {
    out << matches_to_csv(m);
  }
  summary << "match: " << m.size() << " matches between " << ks.size() << " and " << kt.size()
          << " keypoints" << (f.no_filter ? " (unfiltered)" : "") << "\n";
  return kOk;
}

// ---------------------------------------------------------------------------

struct EvalFlags {
  std::string matches, gt, homography, source, target;
  std::optional<std::string> output;
};

int cmd_eval(const Globals& g, const EvalFlags& f, std::ostream& out) {
  resolve(g);
  require_file(f.matches, "match file");
  require_file(f.gt, "ground-truth file");
  require_file(f.homography, "homography file");
  require_file(f.source, "source keypoint file");
  require_file(f.target, "target keypoint file");
  const KeypointSet ks = load_kpds(f.source);
  const KeypointSet kt = load_kpds(f.target);
  const GroundTruth gt = load_ground_truth(f.gt, ks.size(), kt.size());
  const Homography h = load_homography(f.homography);
  const MatchSet m = load_matches(f.matches);
  for (const auto& x : m.matches) {
    if (x.source >= ks.size() || x.target >= kt.size()) {
      throw DataError("match (" + std::to_string(x.source) + ", " + std::to_string(x.target) +
                      ") is out of range");
    }
  }
  const Metrics metrics = evaluate(m, gt, h, ks, kt);
  const std::string js = metrics_to_json(metrics);
  if (f.output) {
    ensure_parent(*f.output);
    write_text(*f.output, js);
  } else {
    out << js;
  }
  out << std::setprecision(4) << "eval: " << metrics.num_matches << " matches, MMA@3 "
      << metrics.inlier_ratio << ", precision " << metrics.precision << ", recall "
      << metrics.recall << "\n";
  return kOk;
}

// ---------------------------------------------------------------------------

struct BenchFlags {
  std::optional<std::string> sizes;
  std::string methods = "linear,softmax";
  std::optional<int> reps, warmup;
  std::optional<std::size_t> hidden_dim;
  NetworkFlags net;
  std::optional<std::string> out_dir;
};

int cmd_bench(const Globals& g, const BenchFlags& f, std::ostream& out) {
  RunConfig rc = resolve(g);
  BenchConfig& b = rc.bench;
  if (f.sizes) b.sizes = parse_sizes(*f.sizes);
  override_if(f.reps, b.reps);
  override_if(f.warmup, b.warmup);
  override_if(f.hidden_dim, b.hidden_dim);
  b.seed = rc.seed;
  b.validate();

  std::vector<std::string> kernels;
  bool pipeline = false;
  for (const auto& m : split_list(f.methods)) {
    if (m == "pipeline") {
      pipeline = true;
    } else if (m == "linear" || m == "softmax" || m == "pairwise") {
      kernels.push_back(m);
    } else {
      throw ConfigError("unknown bench method '" + m + "'");
    }
  }
  if (kernels.empty() && !pipeline) throw ConfigError("--methods selects nothing");

  BenchReport report;
  if (!kernels.empty()) report = bench_attention(kernels, b);
  if (pipeline) {
    f.net.apply(rc.network);
    PipelineConfig pc;
    pc.neighborhood = rc.neighborhood;
    pc.filter = rc.filter;
    pc.filter.rng_seed = derive_seed(rc.seed, "filter");
    const BenchReport pr = bench_pipeline(b, rc.network, pc);
    report.points.insert(report.points.end(), pr.points.begin(), pr.points.end());
    report.slopes.insert(report.slopes.end(), pr.slopes.begin(), pr.slopes.end());
    report.warnings.insert(report.warnings.end(), pr.warnings.begin(), pr.warnings.end());
  }
  const std::string csv = report_to_csv(report);
  if (f.out_dir) {
    ensure_dir(*f.out_dir);
    write_text(fs::path(*f.out_dir) / "bench.csv", csv);
    write_text(fs::path(*f.out_dir) / "bench.json", report_to_json(report));
  } else {
    out << csv;
  }
  for (const auto& w : report.warnings) out << "warning: " << w << "\n";
  out << "bench:";
  for (const auto& [m, s] : report.slopes) out << " " << m << " slope " << std::setprecision(3) << s;
  out << "\n";
  return kOk;
}

// ---------------------------------------------------------------------------

struct TrainFlags {
  std::optional<std::uint64_t> steps;
  std::optional<std::uint32_t> pairs, kpts, heldout;
  std::optional<double> sigma, lr;
  bool detach = false;
  NetworkFlags net;
  std::string out_dir;
};

NetworkConfig toy_network() { return NetworkConfig{32, 16, 4, 2, 1}; }

int cmd_train_toy(const Globals& g, const TrainFlags& f, std::ostream& out) {
  RunConfig rc = resolve(g);
  NetworkConfig net = rc.network_set ? rc.network : toy_network();
  f.net.apply(net);
  override_if(f.steps, rc.train.steps);
  override_if(f.heldout, rc.train.heldout);
  override_if(f.pairs, rc.toy.pairs);
  override_if(f.kpts, rc.toy.keypoints);
  override_if(f.sigma, rc.toy.noise.descriptor_sigma);
  override_if(f.lr, rc.loss.learning_rate);
  if (f.detach) rc.loss.detach_confidence = true;
  rc.toy.descriptor_dim = net.input_dim;
  net.validate();
  rc.loss.validate();
  if (rc.toy.pairs == 0) throw ConfigError("--pairs must be >= 1");
  if (rc.toy.keypoints < 2) throw ConfigError("--kpts must be >= 2");
  ensure_dir(f.out_dir);

  const auto data = make_toy_dataset(rc.toy, derive_seed(rc.seed, "toy_train"));
  ToyDataConfig held_cfg = rc.toy;
  held_cfg.pairs = rc.train.heldout;
  const auto held = make_toy_dataset(held_cfg, derive_seed(rc.seed, "toy_heldout"));
  const NetworkWeights init = init_weights(net, derive_seed(rc.seed, "toy_init"));
  const TrainResult result =
      train_toy(init, data, rc.loss, rc.train.steps, derive_seed(rc.seed, "toy_steps"),
                rc.neighborhood);

  const std::size_t probe = std::min<std::size_t>(20, data.size());
  const auto mean_loss = [&](const NetworkWeights& w) {
    double s = 0.0;
    std::size_t n = 0;
    for (std::size_t k = 0; k < probe; ++k) {
      if (data[k].ground_truth.pairs.empty()) continue;
      s += pair_loss(w, data[k], rc.loss, rc.neighborhood);
      ++n;
    }
    return n ? s / static_cast<double>(n) : 0.0;
  };
  const auto precision = [&](const NetworkWeights& w) {
    PipelineConfig pc;
    pc.neighborhood = rc.neighborhood;
    pc.filter_enabled = false;
    double s = 0.0;
    for (const auto& p : held) {
      const MatchSet m = match_pipeline(p.source, p.target, w, pc);
      s += evaluate(m, p.ground_truth, p.homography, p.source, p.target).inlier_ratio;
    }
    return held.empty() ? 0.0 : s / static_cast<double>(held.size());
  };
  const double loss0 = mean_loss(init), loss1 = mean_loss(result.weights);
  const double prec0 = precision(init), prec1 = precision(result.weights);

  const fs::path dir(f.out_dir);
  save_weights(dir / "weights.lawt", result.weights);
  save_optimizer(dir / "optimizer.lawt", result.optimizer);
  write_text(dir / "trace.csv", trace_to_csv(result.trace));
  nlohmann::ordered_json summary;
  summary["steps"] = rc.train.steps;
  summary["heads"] = net.heads;
  summary["initial_loss"] = loss0;
  summary["final_loss"] = loss1;
  summary["initial_precision"] = prec0;
  summary["final_precision"] = prec1;
  write_text(dir / "summary.json", summary.dump(2) + "\n");
  out << std::setprecision(4) << "train-toy: loss " << loss0 << " -> " << loss1
      << ", held-out precision@3px " << prec0 << " -> " << prec1 << "\n";
  return kOk;
}

// ---------------------------------------------------------------------------

struct GradcheckFlags {
  std::string precision = "double";
  std::size_t samples = 200;
  NetworkFlags net;
  std::optional<std::string> output;
};

int cmd_gradcheck(const Globals& g, const GradcheckFlags& f, std::ostream& out) {
  RunConfig rc = resolve(g);
  if (f.precision != "double") {
    throw ConfigError("gradcheck supports --precision double only");
  }
  NetworkConfig net = rc.network_set ? rc.network : NetworkConfig{8, 4, 1, 1, 0};
  f.net.apply(net);
  net.validate();
  GenNoiseConfig noise{0.3, 0.5, 0.1, false, 4};
  const SyntheticPair pair =
      generate_pair(derive_seed(rc.seed, "gradcheck_pair"), 24, 160, 120, net.input_dim, noise);
  if (pair.ground_truth.pairs.empty()) throw DataError("gradcheck pair has no ground truth");
  const NetworkWeights w = init_weights(net, derive_seed(rc.seed, "gradcheck_init"));
  const GradcheckReport rep = gradcheck(w, pair, rc.loss, f.samples, rc.seed);
  if (f.output) {
    std::ostringstream csv;
    csv << std::setprecision(17) << "tensor,row,col,analytic,numeric,rel_error\n";
    for (const auto& e : rep.entries) {
      csv << e.tensor << ',' << e.row << ',' << e.col << ',' << e.analytic << ',' << e.numeric << ','
          << e.rel_error << '\n';
    }
    ensure_parent(*f.output);
    write_text(*f.output, csv.str());
  }
  const bool ok = rep.max_rel_error < 1e-4;
  out << "gradcheck: " << rep.entries.size() << " entries, max relative error "
      << std::setprecision(3) << rep.max_rel_error << (ok ? " (ok)" : " (FAILED)") << "\n";
  return ok ? kOk : kAssertion;
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Sparse keypoint matching with linear and pairwise neighborhood attention",
               "lamatch"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  app.add_option("--seed", g.seed, "Global RNG seed");
  app.add_option("--config", g.config, "JSON config file (flags override it)");
  app.add_option("--threads", g.threads, "Worker threads");

  SynthFlags synth;
  auto* s = app.add_subcommand("synth", "Generate synthetic keypoint pairs");
  s->add_option("--pairs", synth.pairs);
  s->add_option("--kpts", synth.kpts, "Keypoints per source image");
  s->add_option("--width", synth.width);
  s->add_option("--height", synth.height);
  s->add_option("--dim", synth.dim, "Descriptor dimension");
  s->add_option("--sigma", synth.sigma, "Descriptor noise std");
  s->add_option("--jitter", synth.jitter, "Keypoint jitter std in px");
  s->add_option("--distractors", synth.distractors, "Distractor fraction");
  s->add_option("--min-matches", synth.min_matches);
  s->add_flag("--identity", synth.identity, "Use the identity homography");
  s->add_option("-o,--output", synth.out_dir, "Output directory")->required();

  InitFlags init;
  auto* in = app.add_subcommand("init", "Write initial network weights");
  init.net.add(in);
  in->add_flag("--identity", init.identity, "Pass-through weights");
  in->add_option("-o,--output", init.output, "Output LAWT file")->required();

  MatchFlags match;
  auto* m = app.add_subcommand("match", "Match two keypoint sets");
  m->add_option("--source", match.source)->required();
  m->add_option("--target", match.target)->required();
  m->add_option("--weights", match.weights)->required();
  m->add_option("--heads", match.heads, "Attention heads of the weights");
  m->add_flag("--no-filter", match.no_filter, "Skip local affine verification");
  m->add_flag("--skip-pairwise", match.skip_pairwise, "Run without pairwise layers");
  m->add_option("-o,--output", match.output, "Output CSV (default stdout)");

  EvalFlags ev;
  auto* e = app.add_subcommand("eval", "Score matches against ground truth");
  e->add_option("--matches", ev.matches)->required();
  e->add_option("--gt", ev.gt)->required();
  e->add_option("--homography", ev.homography)->required();
  e->add_option("--source", ev.source)->required();
  e->add_option("--target", ev.target)->required();
  e->add_option("-o,--output", ev.output, "Output JSON (default stdout)");

  BenchFlags bench;
  auto* b = app.add_subcommand("bench", "Time attention kernels and the pipeline");
  b->add_option("--sizes", bench.sizes, "Comma-separated N values");
  b->add_option("--methods", bench.methods, "linear,softmax,pairwise,pipeline")
      ->capture_default_str();
  b->add_option("--reps", bench.reps);
  b->add_option("--warmup", bench.warmup);
  b->add_option("--bench-hidden-dim", bench.hidden_dim, "C' for the kernel benchmarks");
  bench.net.add(b);
  b->add_option("-o,--output", bench.out_dir, "Output directory for bench.csv/bench.json");

  TrainFlags train;
  auto* t = app.add_subcommand("train-toy", "Train on synthetic pairs");
  t->add_option("--steps", train.steps);
  t->add_option("--pairs", train.pairs);
  t->add_option("--kpts", train.kpts);
  t->add_option("--heldout", train.heldout);
  t->add_option("--sigma", train.sigma, "Descriptor noise std");
  t->add_option("--lr", train.lr);
  t->add_flag("--detach-confidence", train.detach, "Stop gradients through s_c");
  train.net.add(t);
  t->add_option("-o,--output", train.out_dir, "Output directory")->required();

  GradcheckFlags gc;
  auto* c = app.add_subcommand("gradcheck", "Compare gradients with finite differences");
  c->add_option("--precision", gc.precision)->capture_default_str();
  c->add_option("--samples", gc.samples, "Entries to check (0 = all)")->capture_default_str();
  gc.net.add(c);
  c->add_option("-o,--output", gc.output, "Per-entry CSV");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kOk;
  } catch (const CLI::ParseError& ex) {
    err << "error: " << ex.what() << "\n";
    return kUsage;
  }

  try {
    if (s->parsed()) return cmd_synth(g, synth, out);
    if (in->parsed()) return cmd_init(g, init, out);
    if (m->parsed()) return cmd_match(g, match, out, err);
    if (e->parsed()) return cmd_eval(g, ev, out);
    if (b->parsed()) return cmd_bench(g, bench, out);
    if (t->parsed()) return cmd_train_toy(g, train, out);
    if (c->parsed()) return cmd_gradcheck(g, gc, out);
  } catch (const ConfigError& ex) {
    err << "error: " << ex.what() << "\n";
    return kUsage;
  } catch (const DataError& ex) {
    err << "error: " << ex.what() << "\n";
    return kData;
  } catch (const std::exception& ex) {
    err << "error: " << ex.what() << "\n";
    return kAssertion;
  }
  return kUsage;
}

}  // namespace lamatch::cli
