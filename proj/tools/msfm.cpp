// msfm command line front end.
#include <chrono>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "msfm/densify.hpp"
#include "msfm/guided.hpp"
#include "msfm/localizer.hpp"
#include "msfm/matcher.hpp"
#include "msfm/pipeline.hpp"
#include "msfm/sfm.hpp"
#include "msfm/synth.hpp"

using namespace msfm;
namespace fs = std::filesystem;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitData = 3;
constexpr int kExitStage = 4;

int exit_code_for(ErrorCode code) {
  switch (code) {
    case ErrorCode::kArgument:
      return kExitConfig;
    case ErrorCode::kFormat:
    case ErrorCode::kIo:
    case ErrorCode::kInsufficientData:
    case ErrorCode::kConflict:
    case ErrorCode::kNotRegistered:
    case ErrorCode::kAlreadyRegistered:
      return kExitData;
    default:
      return kExitStage;
  }
}

MatchGraph load_graph(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::kIo, "cannot open " + path.string());
  return read_matchgraph(in);
}

void save_graph(const fs::path& path, const MatchGraph& g) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::kIo, "cannot write " + path.string());
  write_matchgraph(out, g);
}

std::vector<ImageId> parse_id_list(const std::string& s) {
  std::vector<ImageId> out;
  std::stringstream in(s);
  std::string tok;
  while (std::getline(in, tok, ',')) {
    if (tok.empty()) continue;
    try {
      out.push_back(static_cast<ImageId>(std::stoul(tok)));
    } catch (const std::exception&) {
      throw Error(ErrorCode::kArgument, "bad image id: " + tok);
    }
  }
  return out;
}

CandidateStrategy parse_strategy(const std::string& s) {
  if (s == "linear") return CandidateStrategy::kLinear;
  if (s == "radial") return CandidateStrategy::kRadial;
  if (s == "grid") return CandidateStrategy::kGrid;
  throw Error(ErrorCode::kArgument, "unknown strategy " + s);
}

struct BenchPair {
  ImageId a = 0;
  ImageId b = 0;
  std::optional<Mat3> F;
};

std::vector<BenchPair> load_pairs(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::kIo, "cannot open " + path.string());
  std::vector<BenchPair> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    BenchPair p;
    if (!(ls >> p.a >> p.b)) throw Error(ErrorCode::kFormat, "bad pair line: " + line);
    double f[9];
    int n = 0;
    while (n < 9 && ls >> f[n]) ++n;
    if (n == 9) {
      p.F = Mat3();
      for (int i = 0; i < 9; ++i) (*p.F)(i / 3, i % 3) = f[i];
    } else if (n != 0) {
      throw Error(ErrorCode::kFormat, "pair line needs 0 or 9 F values: " + line);
    }
    out.push_back(p);
  }
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"msfm: multistage structure from motion"};
  app.require_subcommand(1);
  bool verbose = false;
  app.add_flag("-v,--verbose", verbose, "structured log records on stderr");

  // synth
  auto* synth = app.add_subcommand("synth", "generate a synthetic scene");
  std::string synth_spec, synth_out;
  std::optional<std::uint64_t> synth_seed;
  synth->add_option("--spec", synth_spec, "scene config (key=value)");
  synth->add_option("--out", synth_out, "output directory")->required();
  synth->add_option("--seed", synth_seed, "override the scene seed");

  // features
  auto* feats = app.add_subcommand("features", "inspect feature files");
  feats->require_subcommand(1);
  auto* fvalidate = feats->add_subcommand("validate", "check one feature file");
  std::string fvalidate_path;
  fvalidate->add_option("path", fvalidate_path)->required();
  auto* fstats = feats->add_subcommand("stats", "tier and scale statistics");
  std::string fstats_dir;
  double fstats_eta = 20.0;
  fstats->add_option("dir", fstats_dir)->required();
  fstats->add_option("--eta", fstats_eta);

  PipelineConfig cfg;
  std::string config_file;
  std::vector<std::pair<std::string, std::string>> overrides;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", config_file, "key=value config file");
    sub->add_option_function<std::string>(
        "--set", [&](const std::string& kv) {
          const auto eq = kv.find('=');
          if (eq == std::string::npos) throw CLI::ValidationError("--set", "expected key=value");
          overrides.emplace_back(kv.substr(0, eq), kv.substr(eq + 1));
        },
        "override one config key (key=value), repeatable")
        ->multi_option_policy(CLI::MultiOptionPolicy::TakeAll);
    auto flag = [&](const char* name, const char* key) {
      sub->add_option_function<std::string>(
          name, [&, key](const std::string& v) { overrides.emplace_back(key, v); });
    };
    flag("--threads", "threads");
    flag("--seed", "seed");
  };

  // match
  auto* match = app.add_subcommand("match", "build the coarse match graph");
  std::string match_features, match_out;
  match->add_option("--features", match_features)->required();
  match->add_option("--out", match_out)->required();
  add_common(match);
  for (const char* k : {"eta", "preemptive", "ratio"}) {
    match->add_option_function<std::string>(std::string("--") + k,
                                            [&, k](const std::string& v) { overrides.emplace_back(k, v); });
  }

  // coarse
  auto* coarse = app.add_subcommand("coarse", "incremental reconstruction on the match graph");
  std::string coarse_graph, coarse_features, coarse_out;
  coarse->add_option("--graph", coarse_graph)->required();
  coarse->add_option("--features", coarse_features)->required();
  coarse->add_option("--out", coarse_out)->required();
  add_common(coarse);

  // localize
  auto* localize = app.add_subcommand("localize", "add unregistered cameras");
  std::string loc_model, loc_features, loc_graph, loc_out, loc_report;
  int loc_iteration = 1;
  bool loc_force_cover = false;
  localize->add_option("--model", loc_model)->required();
  localize->add_option("--features", loc_features)->required();
  localize->add_option("--graph", loc_graph)->required();
  localize->add_option("--out", loc_out)->required();
  localize->add_option("--report", loc_report);
  localize->add_option("--iteration", loc_iteration);
  localize->add_flag("--set-cover", loc_force_cover, "always query the set-cover subset");
  add_common(localize);

  // densify
  auto* densify = app.add_subcommand("densify", "add points by guided matching");
  std::string den_model, den_features, den_out, den_new;
  int den_iteration = 1;
  bool den_final_ba = false;
  densify->add_option("--model", den_model)->required();
  densify->add_option("--features", den_features)->required();
  densify->add_option("--out", den_out)->required();
  densify->add_option("--iteration", den_iteration);
  densify->add_option("--new-images", den_new, "comma list of newly localized images");
  densify->add_flag("--final-ba", den_final_ba, "bundle adjust after densification");
  densify->add_option_function<std::string>("--d", [&](const std::string& v) { overrides.emplace_back("d", v); });
  add_common(densify);

  // run
  auto* run = app.add_subcommand("run", "full pipeline");
  std::string run_features, run_out, run_reference;
  run->add_option("--features", run_features)->required();
  run->add_option("--out", run_out, "output directory")->required();
  run->add_option("--reference", run_reference, "ground-truth model for the report");
  add_common(run);
  for (const char* k : {"eta", "d", "ratio", "guided_ratio", "T", "candidate_fraction",
                        "ranked_k", "set_cover_k", "set_cover_threshold", "gate",
                        "iterations", "preemptive", "final_ba"}) {
    run->add_option_function<std::string>(std::string("--") + k,
                                          [&, k](const std::string& v) { overrides.emplace_back(k, v); });
  }

  // bench
  auto* bench = app.add_subcommand("bench", "benchmarks");
  bench->require_subcommand(1);
  auto* bguided = bench->add_subcommand("guided", "guided matching per pair");
  std::string bg_features, bg_pairs, bg_model, bg_strategy = "grid";
  double bg_d = 8.0;
  bool bg_unguided = false;
  bguided->add_option("--features", bg_features)->required();
  bguided->add_option("--pairs", bg_pairs, "lines 'a b [F row-major]'")->required();
  bguided->add_option("--model", bg_model, "poses for pairs without F");
  bguided->add_option("--d", bg_d);
  bguided->add_option("--strategy", bg_strategy)
      ->check(CLI::IsMember({"linear", "radial", "grid"}));
  bguided->add_flag("--unguided", bg_unguided, "also time unguided matching");

  // eval
  auto* eval = app.add_subcommand("eval", "align a model to a reference and report errors");
  std::string ev_model, ev_reference, ev_features;
  eval->add_option("--model", ev_model)->required();
  eval->add_option("--reference", ev_reference)->required();
  eval->add_option("--features", ev_features, "for reprojection statistics");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : kExitConfig;
  }
  set_log_enabled(verbose);

  auto resolve_config = [&] {
    if (!config_file.empty()) cfg = load_pipeline_config(config_file);
    for (const auto& [k, v] : overrides) set_config_value(cfg, k, v);
  };

  try {
    if (*synth) {
      SceneSpec spec = synth_spec.empty() ? SceneSpec{} : load_scene_spec(synth_spec);
      if (synth_seed) spec.seed = *synth_seed;
      const SyntheticScene scene = generate_scene(spec);
      write_scene(scene, synth_out);
      for (const auto& w : scene.warnings) std::cerr << "warning: " << w << "\n";
      std::cout << "images=" << scene.store.size() << " points=" << scene.points.size()
                << " triangulable=" << scene.triangulable_points() << "\n";
      return 0;
    }
    if (*feats) {
      if (*fvalidate) {
        const FeatureSet f = load_features(fvalidate_path);
        std::cout << "ok image=" << f.image_id << " width=" << f.width << " height=" << f.height
                  << " features=" << f.size() << "\n";
        return 0;
      }
      FeatureStore store = FeatureStore::load_dir(fstats_dir);
      store.apply_tier(fstats_eta);
      for (ImageId id : store.image_ids()) {
        const FeatureSet& f = store.get(id);
        std::cout << "image=" << id << " features=" << f.size() << " tier=" << f.coarse_count
                  << " scale_coverage=" << scale_coverage(f, fstats_eta) << "\n";
      }
      return 0;
    }
    if (*match) {
      resolve_config();
      FeatureStore store = FeatureStore::load_dir(match_features);
      const MatchGraph g = build_coarse_matchgraph(store, cfg.coarse_match());
      save_graph(match_out, g);
      std::cout << "edges=" << g.edges.size() << "\n";
      return 0;
    }
    if (*coarse) {
      resolve_config();
      FeatureStore store = FeatureStore::load_dir(coarse_features);
      const MatchGraph g = load_graph(coarse_graph);
      const Model m = incremental_reconstruct(g, store, cfg.reconstruction());
      save_model(coarse_out, m);
      report_stats(std::cout, m, store);
      return 0;
    }
    if (*localize) {
      resolve_config();
      FeatureStore store = FeatureStore::load_dir(loc_features);
      const MatchGraph g = load_graph(loc_graph);
      Model m = load_model(loc_model);
      LocalizerConfig lc = cfg.localizer();
      lc.force_set_cover = loc_force_cover;
      const LocalizeReport rep = localize_all(m, store, g, lc, loc_iteration);
      save_model(loc_out, m);
      if (!loc_report.empty()) {
        std::ofstream out(loc_report);
        if (!out) throw Error(ErrorCode::kIo, "cannot write " + loc_report);
        for (const auto& r : rep.results) {
          out << "image=" << r.image_id << " method=" << to_string(r.method)
              << " inliers=" << r.inlier_count << " outcome=" << r.outcome << "\n";
        }
      }
      std::cout << "localized=" << rep.localized << " attempted=" << rep.results.size() << "\n";
      return 0;
    }
    if (*densify) {
      resolve_config();
      FeatureStore store = FeatureStore::load_dir(den_features);
      Model m = load_model(den_model);
      const auto fresh = parse_id_list(den_new);
      const DensifyReport rep = densify_stage(m, store, cfg.densify(), den_iteration, fresh);
      if (den_final_ba) bundle_adjust(m, store);
      save_model(den_out, m);
      std::cout << "pairs=" << rep.pairs << " matches=" << rep.matches
                << " new_points=" << rep.new_points << " extended=" << rep.extended_points << "\n";
      return 0;
    }
    if (*run) {
      resolve_config();
      FeatureStore store = FeatureStore::load_dir(run_features);
      fs::create_directories(run_out);
      {
        std::ofstream out(fs::path(run_out) / "config.txt");
        write_pipeline_config(out, cfg);
      }
      const PipelineResult res = run_pipeline(cfg, store, fs::path(run_out));
      save_graph(fs::path(run_out) / "matches.txt", res.graph);
      export_model(fs::path(run_out) / "model.msfm", res.model);
      export_ply(fs::path(run_out) / "model.ply", res.model);
      {
        std::ofstream out(fs::path(run_out) / "stages.txt");
        write_stage_table(out, res.stages);
      }
      write_stage_table(std::cout, res.stages);
      std::optional<Model> ref;
      if (!run_reference.empty()) ref = load_model(run_reference);
      {
        std::ofstream out(fs::path(run_out) / "report.txt");
        report_stats(out, res.model, store, ref ? &*ref : nullptr);
      }
      if (res.failure) {
        std::cerr << "stage failure: " << *res.failure << "\n";
        return kExitStage;
      }
      return 0;
    }
    if (*bench) {
      FeatureStore store = FeatureStore::load_dir(bg_features);
      const auto pairs = load_pairs(bg_pairs);
      std::optional<Model> model;
      if (!bg_model.empty()) model = load_model(bg_model);
      GuidedConfig gc;
      gc.d = bg_d;
      gc.strategy = parse_strategy(bg_strategy);
      for (const BenchPair& p : pairs) {
        TwoViewGeometry geom;
        if (p.F) {
          geom.F = normalize_fundamental(*p.F);
        } else if (model && model->is_registered(p.a) && model->is_registered(p.b)) {
          geom = fundamental_from_poses(model->camera(p.a), model->camera(p.b));
        } else {
          throw Error(ErrorCode::kArgument, "pair " + std::to_string(p.a) + " " +
                                                std::to_string(p.b) + " has no geometry");
        }
        const FeatureSet& q = store.get(p.a);
        const FeatureSet& t = store.get(p.b);
        GuidedCounters counters;
        const auto t0 = std::chrono::steady_clock::now();
        const auto matches = guided_match_pair(q, t, geom, gc, &counters);
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        std::cout << "record=guided a=" << p.a << " b=" << p.b << " strategy=" << bg_strategy
                  << " d=" << bg_d << " queries=" << counters.queries
                  << " groups=" << counters.groups << " candidates=" << counters.candidates
                  << " comparisons=" << counters.comparisons << " matches=" << matches.size()
                  << " seconds=" << secs << "\n";
        if (bg_unguided) {
          MatchOptions mo;
          mo.ratio = gc.ratio;
          MatchCounters mc;
          const auto u0 = std::chrono::steady_clock::now();
          const auto um = match_pair(q.features, t.features, mo, &mc);
          const double usecs = std::chrono::duration<double>(std::chrono::steady_clock::now() - u0).count();
          std::cout << "record=unguided a=" << p.a << " b=" << p.b
                    << " comparisons=" << mc.comparisons << " matches=" << um.size()
                    << " seconds=" << usecs << "\n";
        }
      }
      return 0;
    }
    if (*eval) {
      const Model m = load_model(ev_model);
      const Model ref = load_model(ev_reference);
      if (!ev_features.empty()) {
        const FeatureStore store = FeatureStore::load_dir(ev_features);
        report_stats(std::cout, m, store, &ref);
      } else {
        const AlignmentReport a = align_models(m, ref);
        std::cout << "cameras=" << m.num_cameras() << "\npoints=" << m.num_points()
                  << "\naligned_cameras=" << a.inliers << "/" << a.common_cameras
                  << "\nrot_error_median_deg=" << a.median_rotation_deg
                  << "\nrel_trans_error_median=" << a.median_relative_translation
                  << "\nconnected_pair_fraction=" << connected_pair_fraction(m, ref) << "\n";
      }
      return 0;
    }
  } catch (const Error& e) {
    std::cerr << "error: " << to_string(e.code()) << ": " << e.what() << "\n";
    return exit_code_for(e.code());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitData;
  }
  return 0;
}
