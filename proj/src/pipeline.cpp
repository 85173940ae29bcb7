#include "msfm/pipeline.hpp"

#include <chrono>
#include <fstream>
#include <iomanip>
#include <istream>
#include <ostream>
#include <set>
#include <sstream>

#include "msfm/synth.hpp"

namespace msfm {

CoarseMatchConfig PipelineConfig::coarse_match() const {
  CoarseMatchConfig c;
  c.eta = eta;
  c.preemptive = preemptive;
  c.match.ratio = ratio;
  c.threads = threads;
  c.seed = seed;
  return c;
}

ReconstructionConfig PipelineConfig::reconstruction() const {
  ReconstructionConfig r;
  r.min_registration_points = gate;
  r.seed = seed;
  return r;
}

LocalizerConfig PipelineConfig::localizer() const {
  LocalizerConfig l;
  l.ratio = ratio;
  l.ranked_k = ranked_k;
  l.set_cover_k = set_cover_k;
  l.set_cover_threshold = set_cover_threshold;
  l.gate = gate;
  l.threads = threads;
  l.seed = seed;
  return l;
}

DensifyConfig PipelineConfig::densify() const {
  DensifyConfig c;
  c.T = T;
  c.k_fraction = candidate_fraction;
  c.guided.d = d;
  c.guided.ratio = guided_ratio;
  c.threads = threads;
  return c;
}

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <typename T>
T parse_number(const std::string& key, const std::string& value) {
  std::istringstream in(value);
  T v{};
  in >> v;
  if (in.fail() || !(in >> std::ws).eof()) {
    throw Error(ErrorCode::kArgument, "bad value for " + key + ": " + value);
  }
  return v;
}

bool parse_bool(const std::string& key, const std::string& value) {
  if (value == "on" || value == "true" || value == "1") return true;
  if (value == "off" || value == "false" || value == "0") return false;
  throw Error(ErrorCode::kArgument, "bad value for " + key + ": " + value);
}

}  // namespace

void set_config_value(PipelineConfig& config, const std::string& key,
                      const std::string& value) {
  PipelineConfig c = config;  // committed only when valid
  if (key == "eta") {
    c.eta = parse_number<double>(key, value);
    if (c.eta <= 0 || c.eta > 100) throw Error(ErrorCode::kArgument, "eta must be in (0, 100]");
  } else if (key == "d") {
    c.d = parse_number<double>(key, value);
    if (c.d <= 0) throw Error(ErrorCode::kArgument, "d must be positive");
  } else if (key == "ratio") {
    c.ratio = parse_number<double>(key, value);
  } else if (key == "guided_ratio") {
    c.guided_ratio = parse_number<double>(key, value);
  } else if (key == "T") {
    c.T = parse_number<std::size_t>(key, value);
  } else if (key == "candidate_fraction") {
    c.candidate_fraction = parse_number<double>(key, value);
  } else if (key == "ranked_k") {
    c.ranked_k = parse_number<std::size_t>(key, value);
  } else if (key == "set_cover_k") {
    c.set_cover_k = parse_number<std::size_t>(key, value);
  } else if (key == "set_cover_threshold") {
    c.set_cover_threshold = parse_number<std::size_t>(key, value);
  } else if (key == "gate") {
    c.gate = parse_number<std::size_t>(key, value);
  } else if (key == "iterations") {
    c.iterations = parse_number<int>(key, value);
    if (c.iterations < 0) throw Error(ErrorCode::kArgument, "iterations must be >= 0");
  } else if (key == "preemptive") {
    c.preemptive = parse_bool(key, value);
  } else if (key == "final_ba") {
    c.final_ba = parse_bool(key, value);
  } else if (key == "threads") {
    c.threads = parse_number<int>(key, value);
    if (c.threads < 1) throw Error(ErrorCode::kArgument, "threads must be >= 1");
  } else if (key == "seed") {
    c.seed = parse_number<std::uint64_t>(key, value);
  } else {
    throw Error(ErrorCode::kArgument, "unknown config key: " + key);
  }
  for (double r : {c.ratio, c.guided_ratio}) {
    if (r <= 0 || r > 1) throw Error(ErrorCode::kArgument, "ratio thresholds must be in (0, 1]");
  }
  config = c;
}

PipelineConfig parse_pipeline_config(std::istream& in) {
  PipelineConfig c;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw Error(ErrorCode::kArgument, "config line " + std::to_string(lineno) + ": missing '='");
    }
    set_config_value(c, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  return c;
}

PipelineConfig load_pipeline_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::kArgument, "cannot open config " + path.string());
  return parse_pipeline_config(in);
}

void write_pipeline_config(std::ostream& out, const PipelineConfig& c) {
  out << "eta = " << c.eta << "\nd = " << c.d << "\nratio = " << c.ratio
      << "\nguided_ratio = " << c.guided_ratio << "\nT = " << c.T
      << "\ncandidate_fraction = " << c.candidate_fraction << "\nranked_k = " << c.ranked_k
      << "\nset_cover_k = " << c.set_cover_k
      << "\nset_cover_threshold = " << c.set_cover_threshold << "\ngate = " << c.gate
      << "\niterations = " << c.iterations << "\npreemptive = " << (c.preemptive ? "on" : "off")
      << "\nfinal_ba = " << (c.final_ba ? "on" : "off") << "\nthreads = " << c.threads
      << "\nseed = " << c.seed << "\n";
}

std::string stage_file_name(const StageTag& tag) {
  switch (tag.stage) {
    case Stage::kCoarse: return "model_coarse.msfm";
    case Stage::kAfterLocalize: return "model_localize" + std::to_string(tag.iteration) + ".msfm";
    case Stage::kAfterDensify: return "model_densify" + std::to_string(tag.iteration) + ".msfm";
  }
  return "model.msfm";
}

namespace {

using Clock = std::chrono::steady_clock;

double since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

StageReport make_report(const std::string& stage, int iteration, const Model& model,
                        const FeatureStore& store, const Model* before, double seconds) {
  StageReport r;
  r.stage = stage;
  r.iteration = iteration;
  r.stats = model_stats(model, store);
  if (before) {
    r.added_cameras = model.num_cameras() - std::min(model.num_cameras(), before->num_cameras());
    r.added_points = model.num_points() - std::min(model.num_points(), before->num_points());
  } else {
    r.added_cameras = model.num_cameras();
    r.added_points = model.num_points();
  }
  r.seconds = seconds;
  return r;
}

}  // namespace

PipelineResult run_pipeline(const PipelineConfig& config, FeatureStore& store,
                            const std::optional<std::filesystem::path>& snapshot_dir) {
  PipelineResult res;
  auto snapshot = [&](const Model& m) {
    if (snapshot_dir) save_model(*snapshot_dir / stage_file_name(m.stage_tag), m);
  };
  try {
    if (snapshot_dir) {
      std::error_code ec;
      std::filesystem::create_directories(*snapshot_dir, ec);
      if (ec) throw Error(ErrorCode::kIo, "cannot create " + snapshot_dir->string());
    }
    auto t0 = Clock::now();
    res.graph = build_coarse_matchgraph(store, config.coarse_match());
    res.matching_seconds = since(t0);
    t0 = Clock::now();
    Model model = incremental_reconstruct(res.graph, store, config.reconstruction());
    model.stage_tag = {Stage::kCoarse, 0};
    res.stages.push_back(make_report("coarse", 0, model, store, nullptr,
                                     res.matching_seconds + since(t0)));
    res.model = model;
    snapshot(model);

    for (int it = 1; it <= config.iterations; ++it) {
      t0 = Clock::now();
      const Model before = model;
      localize_all(model, store, res.graph, config.localizer(), it);
      std::vector<ImageId> fresh;
      for (const auto& [id, cam] : model.cameras()) {
        if (!before.is_registered(id)) fresh.push_back(id);
      }
      res.stages.push_back(make_report("localize", it, model, store, &before, since(t0)));
      res.model = model;
      snapshot(model);

      t0 = Clock::now();
      const Model before_dense = model;
      densify_stage(model, store, config.densify(), it, fresh);
      res.stages.push_back(make_report("densify", it, model, store, &before_dense, since(t0)));
      res.model = model;
      snapshot(model);
    }
    if (config.final_ba) {
      t0 = Clock::now();
      const Model before = model;
      BundleOptions bo;
      bundle_adjust(model, store, bo);
      res.stages.push_back(make_report("final_ba", config.iterations, model, store, &before,
                                       since(t0)));
      res.model = model;
      snapshot(model);
    }
  } catch (const Error& e) {
    res.failure = std::string(to_string(e.code())) + ": " + e.what();
    log_record("pipeline_failed", "error=" + std::string(to_string(e.code())));
  }
  return res;
}

double connected_pair_fraction(const Model& model, const Model& reference) {
  auto pairs = [](const Model& m) {
    std::set<std::pair<ImageId, ImageId>> out;
    for (const auto& p : m.points()) {
      for (std::size_t a = 0; a < p.track.size(); ++a) {
        for (std::size_t b = a + 1; b < p.track.size(); ++b) {
          out.emplace(p.track[a].image_id, p.track[b].image_id);
        }
      }
    }
    return out.size();
  };
  const std::size_t ref = pairs(reference);
  return ref == 0 ? 0.0 : static_cast<double>(pairs(model)) / static_cast<double>(ref);
}

void write_stage_table(std::ostream& out, const std::vector<StageReport>& stages) {
  out << std::fixed << std::setprecision(4);
  for (const StageReport& s : stages) {
    out << "stage=" << s.stage << " iteration=" << s.iteration << " cameras=" << s.stats.cameras
        << " points=" << s.stats.points << " points3plus=" << s.stats.points3plus
        << " reproj_mean=" << s.stats.mean_reprojection
        << " reproj_median=" << s.stats.median_reprojection
        << " covisible_pairs=" << s.stats.covisible_pairs << " added_cameras=" << s.added_cameras
        << " added_points=" << s.added_points << " seconds=" << s.seconds << "\n";
  }
  out << std::defaultfloat;
}

void report_stats(std::ostream& out, const Model& model, const FeatureStore& store,
                  const Model* reference) {
  const StatsReport s = model_stats(model, store);
  out << std::fixed << std::setprecision(6);
  out << "cameras=" << s.cameras << "\npoints=" << s.points << "\npoints3plus=" << s.points3plus
      << "\nobservations=" << s.observations << "\nreproj_mean=" << s.mean_reprojection
      << "\nreproj_median=" << s.median_reprojection << "\ncovisible_pairs=" << s.covisible_pairs
      << "\n";
  if (reference) {
    out << "connected_pair_fraction=" << connected_pair_fraction(model, *reference) << "\n";
    try {
      const AlignmentReport a = align_models(model, *reference);
      out << "aligned_cameras=" << a.inliers << "/" << a.common_cameras
          << "\nrot_error_mean_deg=" << a.mean_rotation_deg
          << "\nrot_error_median_deg=" << a.median_rotation_deg
          << "\ntrans_error_mean=" << a.mean_translation
          << "\ntrans_error_median=" << a.median_translation
          << "\nrel_trans_error_mean=" << a.mean_relative_translation
          << "\nrel_trans_error_median=" << a.median_relative_translation << "\n";
    } catch (const Error& e) {
      out << "alignment=failed error=" << to_string(e.code()) << "\n";
    }
  }
  out << std::defaultfloat;
}

void export_model(const std::filesystem::path& path, const Model& model) {
  save_model(path, model);
}

void export_ply(const std::filesystem::path& path, const Model& model) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::kIo, "cannot write " + path.string());
  write_ply(out, model);
}

}  // namespace msfm
