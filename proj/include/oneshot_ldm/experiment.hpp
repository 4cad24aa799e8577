// Copyright 2026 The oneshot-ldm Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <torch/torch.h>

#include <filesystem>
#include <map>
#include <mutex>
#include <nlohmann/json.hpp>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "oneshot_ldm/dataset.hpp"
#include "oneshot_ldm/diffusion.hpp"
#include "oneshot_ldm/evaluation.hpp"
#include "oneshot_ldm/rae.hpp"
#include "oneshot_ldm/regularizers.hpp"
#include "oneshot_ldm/synthetic.hpp"

namespace oneshot {

inline constexpr int kExperimentSchemaVersion = 1;

enum class Stage { RAE, LDM, Sample, Attribute, Evaluate };
Stage parse_stage(const std::string& s);
std::string to_string(Stage stage);

struct DatasetDescriptor {
  std::filesystem::path root;
  DatasetName name = DatasetName::Omniglot;
  LoadOptions load;
  /// When set and `root` holds no manifest, a synthetic dataset is written there first.
  std::optional<SyntheticOptions> synthetic;
};

/// Expands a beta grid entry. Either a literal list, or
/// {"from", "to", "factor"} (geometric) or {"from", "to", "step"} (arithmetic),
/// both inclusive of `to` up to 1e-9 relative slack.
std::vector<double> expand_beta_grid(const nlohmann::json& grid);

struct SweepSpec {
  std::string name;
  /// Regularizers held at their own beta at every point.
  std::vector<RegularizerSpec> fixed;
  /// Regularizer whose beta runs over `betas`. Unset: a single point.
  std::optional<RegularizerSpec> swept;
  std::vector<double> betas;
};

struct ExperimentConfig {
  int schema_version = kExperimentSchemaVersion;
  DatasetDescriptor dataset;
  RAEConfig rae;
  LDMConfig ldm;
  CriticConfig critics;
  /// Pretrained critics; trained (and cached) from the train split otherwise.
  std::optional<std::filesystem::path> critics_path;
  std::vector<SweepSpec> sweeps;
  uint64_t seed = 0;
  int64_t replicates = 1;
  int64_t samples_per_category = 10;
  /// Recognizability ways (0: every test category).
  int64_t n_way = 0;
  /// Categories to attribute (0: all test categories) and trajectories per map.
  int64_t attribution_categories = 0;
  int64_t attribution_variations = 1;
  int64_t checkpoint_every = 10;
  std::filesystem::path output_dir = "runs/default";
  std::set<Stage> stages{Stage::RAE, Stage::LDM, Stage::Sample, Stage::Evaluate};

  void validate() const;
};

nlohmann::json to_json(const ExperimentConfig& config);
/// Raises ConfigError on a missing or unsupported schema_version or on any invalid field.
ExperimentConfig experiment_from_json(const nlohmann::json& j);
ExperimentConfig load_experiment(const std::filesystem::path& path);

/// Checkpoint root: $ONESHOT_LDM_CACHE if set, else `<output_dir>/checkpoints`.
std::filesystem::path cache_root(const ExperimentConfig& config);

struct SweepPoint {
  std::string model_id;
  std::string sweep;
  std::vector<RegularizerSpec> specs;
  std::map<std::string, double> beta_map;
  /// Beta of the swept regularizer (NaN for single-point sweeps).
  double swept_beta = 0.0;
  int64_t replicate = 0;
  uint64_t seed = 0;
};

/// All points in config order. Seeds are derive_seed(seed, swept beta, sweep/kind/replicate tag).
std::vector<SweepPoint> expand_sweeps(const ExperimentConfig& config);

struct LedgerEntry {
  std::string model_id;
  std::string sweep;
  std::map<std::string, double> beta_map;
  uint64_t seed = 0;
  std::string status;  // "complete" or "failed"
  std::vector<std::string> stages;
  std::string checkpoint;
  std::optional<double> recognizability;
  std::optional<double> originality_raw;
  double wall_seconds = 0.0;
  std::string error;
};

nlohmann::json to_json(const LedgerEntry& entry);
LedgerEntry ledger_entry_from_json(const nlohmann::json& j);

/// Append-only JSON-lines run log. Writes are serialized by a mutex and
/// flushed line by line; a torn final line (killed writer) is ignored on load.
class RunLedger {
 public:
  explicit RunLedger(std::filesystem::path path);

  void append(const LedgerEntry& entry);
  std::vector<LedgerEntry> entries() const;
  /// Most recent entry for a model id.
  std::optional<LedgerEntry> latest(const std::string& model_id) const;
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
  mutable std::mutex mutex_;
  std::vector<LedgerEntry> entries_;
};

/// <dir>/<category_id>/sample_<k>.png
void write_samples(const std::filesystem::path& dir, const std::vector<TaggedSamples>& samples);
std::vector<TaggedSamples> read_samples(const std::filesystem::path& dir);

/// n variations per test category from a frozen autoencoder and noise predictor.
std::vector<TaggedSamples> sample_split(RAE& rae, UNet& unet, const LDMConfig& config, const DatasetSplit& split,
                                        int64_t n, Rng& rng);

struct HumanPoint {
  double originality_raw = 0.0;
  double originality = 0.0;
  double recognizability = 0.0;
};

struct EvalReport {
  std::vector<ModelPoint> points;
  std::vector<std::string> sweeps;  // parallel to points
  HumanPoint human;
  std::vector<double> distances;    // parallel to points
  /// Index of the point nearest the human point (-1 if none).
  int64_t nearest = -1;
  /// Per sweep with >= 3 distinct swept betas.
  std::map<std::string, FitCurve> fits;
};

/// Normalizes originality over the points plus the human value, computes
/// distances and fits. `swept_betas` is parallel to `points` (NaN: not part of a fit).
EvalReport assemble_report(std::vector<ModelPoint> points, std::vector<std::string> sweeps,
                           const std::vector<double>& swept_betas, double human_originality_raw,
                           double human_recognizability);

/// report.csv, fits.json and plot.svg under `dir`. Byte-deterministic.
void write_report_csv(const std::filesystem::path& path, const EvalReport& report);
void write_fits_json(const std::filesystem::path& path, const EvalReport& report);
void write_plot_svg(const std::filesystem::path& path, const EvalReport& report);

struct RunOptions {
  /// Stop (as if killed) after this many newly computed points (0: never).
  int64_t stop_after_points = 0;
  /// Concurrent sweep points.
  int64_t jobs = 1;
  /// Skip the free-space check.
  bool skip_disk_check = false;
};

struct SweepOutcome {
  std::vector<LedgerEntry> entries;  // final status per point, config order
  int64_t computed = 0;
  int64_t skipped = 0;
  int64_t failed = 0;
  bool stopped_early = false;
  std::optional<EvalReport> report;
  /// 0 success, 2 some points failed.
  int exit_code = 0;
};

/// Bytes a sweep will write (checkpoints with optimizer state, samples, maps).
uint64_t estimate_sweep_bytes(const ExperimentConfig& config, int64_t n_test_categories);

/// Runs every point through the selected stages, continuing past failures,
/// then writes reports under output_dir. Completed points found in the ledger
/// (with their checkpoint on disk) are not recomputed.
SweepOutcome run_sweep(const ExperimentConfig& config, const RunOptions& options = {});

/// Importance-map statistics. Model maps: <model_dir>/<model_id>/<category>.npy;
/// human maps: <human_dir>/<category>/<participant>.npy. Returns per-model
/// per-category Spearman against the human average, the human split-half
/// consistency and one-sided Wilcoxon p-values for every ordered model pair.
nlohmann::json map_statistics(const std::filesystem::path& model_dir, const std::filesystem::path& human_dir,
                              int64_t n_resamples, uint64_t seed);

}  // namespace oneshot
