#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "dgst/checkpoint.hpp"
#include "dgst/train.hpp"

namespace dgst {

// A downstream task: a frozen domain spec plus its generation seed and the
// shot grid used by matrix runs.
struct TaskDef {
  std::string name;
  DomainSpec spec;
  int dataset_n = 120;
  uint64_t dataset_seed = 0;
  std::vector<int> shots_grid;
};

TaskDef near_task();
TaskDef far_task();
TaskDef task_by_name(const std::string& name);

struct PretrainConfig {
  ModelConfig model;
  OptimConfig optim;  // lr0 0.01, poly 0.9, 200 epochs, batch 2
  int samples = 200;
  int test_samples = 40;
  uint64_t seed = 1;
  uint64_t data_seed = 9020;
  std::string out_dir = "runs";

  PretrainConfig() {
    optim.lr0 = real(0.01);
    optim.epochs = 200;
  }
};

struct PretrainResult {
  std::string checkpoint_path;
  double source_test_dsc = 0;
  double source_test_nsd = 0;
  TrainStats stats;
};

PretrainResult cmd_pretrain(const PretrainConfig& config);

struct FinetuneRequest {
  std::string task = "far";
  StrategyConfig strategy;
  int shots = 5;
  std::vector<uint64_t> seeds{1, 2, 3, 4, 5};
  OptimConfig optim;  // lr0 0.001, 50 epochs, batch 2
  std::string foundation_path;
  std::string out_dir = "runs";
  double nsd_tol = 1.0;
  bool cache_data = false;
  bool save_models = true;

  void validate() const;
};

struct SeedRunResult {
  uint64_t seed = 0;
  MetricsReport metrics;
  TrainStats stats;
  std::string checkpoint_path;
  std::string error;  // empty on success
};

struct CellResult {
  std::string task;
  StrategyConfig strategy;
  int shots = 0;
  std::vector<SeedRunResult> runs;
  // aggregates over per-case metrics pooled across seeds
  double dsc_mean = 0, dsc_std = 0, nsd_mean = 0, nsd_std = 0;
  double iter_seconds_mean = 0;
  std::string error;

  bool failed() const { return !error.empty(); }
  void aggregate();
};

// Shared state for a batch of runs: foundation model and generated datasets.
struct ExperimentContext {
  std::optional<Model> foundation;
  std::map<std::string, Dataset> datasets;

  const Model& require_foundation() const;
  const Dataset& dataset_for(const TaskDef& task);
};

ExperimentContext make_context(const std::string& foundation_path);

CellResult run_cell(ExperimentContext& ctx, const FinetuneRequest& req);
CellResult cmd_finetune(const FinetuneRequest& req);

// ----- matrix -----

struct MatrixConfig {
  std::vector<std::string> tasks{"near", "far"};
  std::vector<StrategyConfig> strategies;  // empty -> the full 13-kind catalogue
  std::vector<uint64_t> seeds{1, 2, 3, 4, 5};
  OptimConfig optim;
  std::string foundation_path;
  std::string out_dir = "runs";
  bool include_allshot = true;
  bool timing_exclusive = true;  // cells are executed strictly sequentially
  std::optional<std::vector<int>> shots_override;
};

std::vector<StrategyConfig> full_strategy_catalogue();

struct MatrixCell {
  std::string task;
  StrategyConfig strategy;
  int shots = 0;
  bool reference = false;  // All-shot rows
};

struct MatrixPlan {
  std::vector<MatrixCell> cells;            // strategy x shots x task grid
  std::vector<MatrixCell> reference_cells;  // All-shot (full pool, from scratch)
};

MatrixPlan plan_matrix(const MatrixConfig& config);

struct MatrixResult {
  std::vector<CellResult> cells;
  std::string csv_path, json_path, manifest_path;
};

MatrixResult cmd_matrix(const MatrixConfig& config);

// ----- gamma sweep -----

struct SweepConfig {
  std::string task = "far";
  int shots = 20;
  std::vector<int> gammas{1, 2, 3, 5, 10};
  std::vector<uint64_t> seeds{1, 2, 3, 4, 5};
  OptimConfig optim;
  std::string foundation_path;
  std::string out_dir = "runs";
};

struct SweepResult {
  std::vector<CellResult> series;  // one per gamma, then the Full reference
  bool approaches_full = false;    // |dsc(max gamma)-dsc(full)| <= |dsc(min gamma)-dsc(full)|
  std::string csv_path, json_path;
};

SweepResult cmd_sweep_gamma(const SweepConfig& config);

// ----- ablation -----

struct AblationConfig {
  std::string task = "far";
  int shots = 5;
  std::vector<uint64_t> seeds{1, 2, 3, 4, 5};
  OptimConfig optim;
  std::string foundation_path;
  std::string out_dir = "runs";
  bool timing_exclusive = true;
};

struct AblationResult {
  std::vector<CellResult> rows;  // full, encoder-only, decoder-only,
                                 // bias-norm, drst, sgst, dgst
  double dgst_over_full_duration = 0;
  std::string csv_path, json_path;
};

AblationResult cmd_ablation(const AblationConfig& config);

// ----- report -----

// Re-aggregates record.json files found under a directory tree into a
// summary CSV/JSON (same columns as the matrix table).
struct ReportResult {
  int records = 0;
  std::string csv_path, json_path;
};
ReportResult cmd_report(const std::string& dir);

// CSV rows use the fixed column set; stable-sorted by (task, strategy, shots).
std::string cells_to_csv(std::vector<CellResult> cells);

}  // namespace dgst
