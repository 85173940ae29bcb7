#pragma once

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "msfm/densify.hpp"
#include "msfm/localizer.hpp"
#include "msfm/matcher.hpp"
#include "msfm/model.hpp"
#include "msfm/sfm.hpp"

namespace msfm {

struct PipelineConfig {
  double eta = 20.0;
  double d = 8.0;
  double ratio = 0.6;
  double guided_ratio = 0.8;
  std::size_t T = 8;
  double candidate_fraction = 0.10;
  std::size_t ranked_k = 10;
  std::size_t set_cover_k = 400;
  std::size_t set_cover_threshold = 100000;
  std::size_t gate = 16;
  int iterations = 2;
  bool preemptive = true;
  bool final_ba = false;
  int threads = 1;
  std::uint64_t seed = 1;

  CoarseMatchConfig coarse_match() const;
  ReconstructionConfig reconstruction() const;
  LocalizerConfig localizer() const;
  DensifyConfig densify() const;
};

/// Sets one field from its key=value text form; unknown keys and bad values
/// throw kArgument.
void set_config_value(PipelineConfig& config, const std::string& key,
                      const std::string& value);
PipelineConfig parse_pipeline_config(std::istream& in);
PipelineConfig load_pipeline_config(const std::filesystem::path& path);
void write_pipeline_config(std::ostream& out, const PipelineConfig& config);

struct StageReport {
  std::string stage;  // coarse, localize, densify, final_ba
  int iteration = 0;
  StatsReport stats;
  std::size_t added_cameras = 0;
  std::size_t added_points = 0;
  double seconds = 0.0;
};

struct PipelineResult {
  Model model;  // last good snapshot
  MatchGraph graph;
  std::vector<StageReport> stages;
  std::optional<std::string> failure;  // stage-fatal error, if any
  double matching_seconds = 0.0;
};

/// coarse match graph -> incremental reconstruction -> (localize, densify)
/// x iterations. Snapshots go to `snapshot_dir` when given, one file per
/// stage tag.
PipelineResult run_pipeline(const PipelineConfig& config, FeatureStore& store,
                            const std::optional<std::filesystem::path>& snapshot_dir = {});

std::string stage_file_name(const StageTag& tag);

/// Covisible pairs of `model` over covisible pairs of `reference`.
double connected_pair_fraction(const Model& model, const Model& reference);

void write_stage_table(std::ostream& out, const std::vector<StageReport>& stages);

/// key=value lines; with a reference, alignment errors and the connected
/// pair fraction are added.
void report_stats(std::ostream& out, const Model& model, const FeatureStore& store,
                  const Model* reference = nullptr);

void export_model(const std::filesystem::path& path, const Model& model);
void export_ply(const std::filesystem::path& path, const Model& model);

}  // namespace msfm
