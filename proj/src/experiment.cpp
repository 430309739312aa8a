#include "dgst/experiment.hpp"

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "json.hpp"

namespace dgst {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.6f", v);
  return buf;
}

std::string strategy_slug(const StrategyConfig& s) {
  std::string out = to_string(s.kind);
  if (is_gradient_sparsified(s.kind)) out += "-g" + std::to_string(s.gamma);
  if (s.kind == StrategyKind::lora) out += "-r" + std::to_string(s.lora_rank);
  if (s.kind == StrategyKind::adapter)
    out += "-w" + std::to_string(s.adapter_width);
  return out;
}

json strategy_to_json(const StrategyConfig& s) {
  json j;
  j["kind"] = to_string(s.kind);
  j["gamma"] = s.gamma;
  j["lora_rank"] = s.lora_rank;
  j["adapter_width"] = s.adapter_width;
  j["sgst_warmup_iters"] = s.sgst_warmup_iters;
  return j;
}

StrategyConfig strategy_from_json(const json& j) {
  StrategyConfig s;
  s.kind = parse_strategy_kind(j.at("kind").get<std::string>());
  s.gamma = j.at("gamma").get<int>();
  s.lora_rank = j.at("lora_rank").get<int>();
  s.adapter_width = j.at("adapter_width").get<int>();
  s.sgst_warmup_iters = j.at("sgst_warmup_iters").get<int>();
  return s;
}

json optim_to_json(const OptimConfig& o) {
  json j;
  j["lr0"] = double(o.lr0);
  j["poly_power"] = double(o.poly_power);
  j["epochs"] = o.epochs;
  j["batch_size"] = o.batch_size;
  j["momentum"] = double(o.momentum);
  j["augment"] = o.augment;
  return j;
}

json metrics_to_json(const MetricsReport& m) {
  json j;
  j["case_dsc"] = m.case_dsc;
  j["case_nsd"] = m.case_nsd;
  j["dsc_mean"] = m.dsc_mean;
  j["dsc_std"] = m.dsc_std;
  j["nsd_mean"] = m.nsd_mean;
  j["nsd_std"] = m.nsd_std;
  return j;
}

void ensure_dir(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw io_error("cannot create directory '" + dir + "': " + ec.message());
}

// Deterministic per-run metrics file; wall-clock timings stay out of it.
void write_metrics_csv(const std::string& path, const MetricsReport& m) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw io_error("cannot write '" + path + "'");
  out << "case,dsc,nsd\n";
  for (size_t i = 0; i < m.case_dsc.size(); ++i)
    out << i << "," << fmt(m.case_dsc[i]) << "," << fmt(m.case_nsd[i]) << "\n";
  out << "mean," << fmt(m.dsc_mean) << "," << fmt(m.nsd_mean) << "\n";
  out << "std," << fmt(m.dsc_std) << "," << fmt(m.nsd_std) << "\n";
}

void write_run_record(const std::string& path, const std::string& task,
                      const StrategyConfig& strategy, int shots, uint64_t seed,
                      const OptimConfig& optim, const std::string& foundation,
                      const SeedRunResult& run) {
  json j;
  j["task"] = task;
  j["strategy"] = strategy_to_json(strategy);
  j["shots"] = shots;
  j["seed"] = seed;
  j["optim"] = optim_to_json(optim);
  j["foundation"] = foundation;
  j["checkpoint"] = run.checkpoint_path;
  j["error"] = run.error;
  j["metrics"] = metrics_to_json(run.metrics);
  std::vector<double> losses, seconds;
  std::vector<int64_t> cardinalities;
  losses.reserve(run.stats.iterations.size());
  for (const auto& it : run.stats.iterations) {
    losses.push_back(it.loss);
    cardinalities.push_back(it.selected);
    seconds.push_back(it.seconds);
  }
  j["loss_curve"] = losses;
  j["mask_cardinality"] = cardinalities;
  j["iter_seconds"] = seconds;
  j["iter_seconds_mean"] = run.stats.mean_iter_seconds();
  j["iter_seconds_median"] = run.stats.median_iter_seconds();
  j["backward_passes"] = run.stats.backward_passes;
  j["warmup_backward_passes"] = run.stats.warmup_backward_passes;
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw io_error("cannot write '" + path + "'");
  out << j.dump(2) << "\n";
}

}  // namespace

TaskDef near_task() {
  TaskDef t;
  t.name = "near";
  t.spec = near_domain();
  t.dataset_n = 120;
  t.dataset_seed = 9021;
  t.shots_grid = {3, 5, 10};
  return t;
}

TaskDef far_task() {
  TaskDef t;
  t.name = "far";
  t.spec = far_domain();
  t.dataset_n = 120;
  t.dataset_seed = 9022;
  t.shots_grid = {5, 10, 20};
  return t;
}

TaskDef task_by_name(const std::string& name) {
  if (name == "near") return near_task();
  if (name == "far") return far_task();
  throw config_error("unknown task '" + name + "' (expected near|far)");
}

void FinetuneRequest::validate() const {
  std::set<uint64_t> uniq(seeds.begin(), seeds.end());
  if (uniq.size() != seeds.size())
    throw config_error("finetune: seeds must be distinct");
  if (seeds.empty()) throw config_error("finetune: need at least one seed");
  if (shots < 1) throw config_error("finetune: shots must be >= 1");
  strategy.validate();
  optim.validate();
  if (strategy.kind != StrategyKind::from_scratch && foundation_path.empty())
    throw config_error("finetune: --foundation is required for strategy " +
                       std::string(to_string(strategy.kind)));
}

const Model& ExperimentContext::require_foundation() const {
  if (!foundation) throw config_error("missing foundation checkpoint");
  return *foundation;
}

const Dataset& ExperimentContext::dataset_for(const TaskDef& task) {
  auto it = datasets.find(task.name);
  if (it == datasets.end()) {
    Dataset d = generate_domain(task.spec, task.dataset_n, task.dataset_seed);
    it = datasets.emplace(task.name, std::move(d)).first;
  }
  return it->second;
}

ExperimentContext make_context(const std::string& foundation_path) {
  ExperimentContext ctx;
  if (!foundation_path.empty()) ctx.foundation = load_checkpoint(foundation_path);
  return ctx;
}

void CellResult::aggregate() {
  std::vector<double> d, s, t;
  for (const auto& r : runs) {
    if (!r.error.empty()) continue;
    d.insert(d.end(), r.metrics.case_dsc.begin(), r.metrics.case_dsc.end());
    s.insert(s.end(), r.metrics.case_nsd.begin(), r.metrics.case_nsd.end());
    t.push_back(r.stats.mean_iter_seconds());
  }
  dsc_mean = mean_of(d);
  dsc_std = sample_std_of(d);
  nsd_mean = mean_of(s);
  nsd_std = sample_std_of(s);
  iter_seconds_mean = mean_of(t);
}

PretrainResult cmd_pretrain(const PretrainConfig& config) {
  validate(config.model);
  config.optim.validate();
  ensure_dir(config.out_dir);

  const DomainSpec spec = source_domain();
  const Dataset train =
      generate_domain(spec, config.samples, config.data_seed);
  const Dataset test = generate_domain(spec, config.test_samples,
                                       derive_seed(config.data_seed, "test"));

  PretrainResult result;
  Model model = pretrain_loop(config.model, train.samples, config.optim,
                              config.seed, &result.stats);
  const MetricsReport report = evaluate_dataset(model, test.samples);
  result.source_test_dsc = report.dsc_mean;
  result.source_test_nsd = report.nsd_mean;
  result.checkpoint_path = config.out_dir + "/foundation.ckpt";
  save_checkpoint(model, result.checkpoint_path);

  SeedRunResult run;
  run.seed = config.seed;
  run.metrics = report;
  run.stats = result.stats;
  run.checkpoint_path = result.checkpoint_path;
  StrategyConfig full;
  full.kind = StrategyKind::full;
  write_run_record(config.out_dir + "/pretrain_record.json", "source", full,
                   config.samples, config.seed, config.optim, "", run);
  write_metrics_csv(config.out_dir + "/pretrain_metrics.csv", report);
  return result;
}

CellResult run_cell(ExperimentContext& ctx, const FinetuneRequest& req) {
  req.validate();
  const TaskDef task = task_by_name(req.task);
  CellResult cell;
  cell.task = req.task;
  cell.strategy = req.strategy;
  cell.shots = req.shots;

  const Dataset& data = ctx.dataset_for(task);
  if (req.cache_data) {
    ensure_dir(req.out_dir + "/data");
    save_dataset(data, req.out_dir + "/data/" + task.name + ".ntar");
  }

  const std::string cell_dir = req.out_dir + "/finetune/" + req.task + "_" +
                               strategy_slug(req.strategy) + "_k" +
                               std::to_string(req.shots);
  for (uint64_t seed : req.seeds) {
    SeedRunResult run;
    run.seed = seed;
    const std::string seed_dir = cell_dir + "/seed" + std::to_string(seed);
    try {
      const Split split = few_shot_split(data, req.shots, seed);
      const std::vector<SegSample> shots = gather(data, split.train_idx);
      const std::vector<SegSample> test = gather(data, split.test_idx);

      const Model* foundation = nullptr;
      Model scratch_stub;
      if (req.strategy.kind == StrategyKind::from_scratch) {
        // --foundation is ignored; architecture comes from context or default
        if (ctx.foundation)
          foundation = &*ctx.foundation;
        else {
          scratch_stub = build_unet(ModelConfig{}, 0);
          foundation = &scratch_stub;
        }
      } else {
        foundation = &ctx.require_foundation();
      }

      Model tuned = finetune_loop(*foundation, req.strategy, shots, req.optim,
                                  seed, &run.stats);
      run.metrics = evaluate_dataset(tuned, test, req.nsd_tol);

      ensure_dir(seed_dir);
      if (req.save_models) {
        run.checkpoint_path = seed_dir + "/model.ckpt";
        save_checkpoint(tuned, run.checkpoint_path);
      }
      write_metrics_csv(seed_dir + "/metrics.csv", run.metrics);
      write_run_record(seed_dir + "/record.json", req.task, req.strategy,
                       req.shots, seed, req.optim, req.foundation_path, run);
    } catch (const std::exception& e) {
      run.error = e.what();
    }
    cell.runs.push_back(std::move(run));
  }

  std::string errors;
  for (const auto& r : cell.runs)
    if (!r.error.empty()) errors += (errors.empty() ? "" : "; ") + r.error;
  cell.error = errors;
  cell.aggregate();
  return cell;
}

CellResult cmd_finetune(const FinetuneRequest& req) {
  ExperimentContext ctx = make_context(
      req.strategy.kind == StrategyKind::from_scratch ? "" : req.foundation_path);
  return run_cell(ctx, req);
}

std::vector<StrategyConfig> full_strategy_catalogue() {
  std::vector<StrategyConfig> out;
  for (StrategyKind k :
       {StrategyKind::full, StrategyKind::from_scratch, StrategyKind::linear_prob,
        StrategyKind::bias, StrategyKind::bias_norm, StrategyKind::affine_in,
        StrategyKind::encoder_only, StrategyKind::decoder_only, StrategyKind::lora,
        StrategyKind::adapter, StrategyKind::drst, StrategyKind::sgst,
        StrategyKind::dgst}) {
    StrategyConfig s;
    s.kind = k;
    out.push_back(s);
  }
  return out;
}

MatrixPlan plan_matrix(const MatrixConfig& config) {
  MatrixPlan plan;
  const std::vector<StrategyConfig> strategies =
      config.strategies.empty() ? full_strategy_catalogue() : config.strategies;
  for (const auto& task_name : config.tasks) {
    const TaskDef task = task_by_name(task_name);
    const std::vector<int> shots =
        config.shots_override ? *config.shots_override : task.shots_grid;
    for (const auto& strategy : strategies)
      for (int k : shots) {
        MatrixCell cell;
        cell.task = task_name;
        cell.strategy = strategy;
        cell.shots = k;
        plan.cells.push_back(cell);
      }
    if (config.include_allshot) {
      MatrixCell ref;
      ref.task = task_name;
      ref.strategy.kind = StrategyKind::from_scratch;
      ref.shots = task.dataset_n - task.dataset_n / 5;  // the full 80% pool
      ref.reference = true;
      plan.reference_cells.push_back(ref);
    }
  }
  return plan;
}

std::string cells_to_csv(std::vector<CellResult> cells) {
  std::stable_sort(cells.begin(), cells.end(),
                   [](const CellResult& a, const CellResult& b) {
                     if (a.task != b.task) return a.task < b.task;
                     const std::string sa = to_string(a.strategy.kind);
                     const std::string sb = to_string(b.strategy.kind);
                     if (sa != sb) return sa < sb;
                     if (a.shots != b.shots) return a.shots < b.shots;
                     return a.strategy.gamma < b.strategy.gamma;
                   });
  std::ostringstream out;
  out << "task,strategy,shots,gamma,seed-count,dsc-mean,dsc-std,nsd-mean,"
         "nsd-std,iter-duration-mean-s\n";
  for (const auto& c : cells) {
    out << c.task << "," << to_string(c.strategy.kind) << "," << c.shots << ",";
    if (is_gradient_sparsified(c.strategy.kind)) out << c.strategy.gamma;
    out << "," << c.runs.size() << ",";
    if (c.failed()) {
      out << ",,,,\n";
      continue;
    }
    out << fmt(c.dsc_mean) << "," << fmt(c.dsc_std) << "," << fmt(c.nsd_mean)
        << "," << fmt(c.nsd_std) << "," << fmt(c.iter_seconds_mean) << "\n";
  }
  return out.str();
}

namespace {

json cell_to_json(const CellResult& c) {
  json j;
  j["task"] = c.task;
  j["strategy"] = strategy_to_json(c.strategy);
  j["shots"] = c.shots;
  j["seeds"] = [&] {
    std::vector<uint64_t> s;
    for (const auto& r : c.runs) s.push_back(r.seed);
    return s;
  }();
  j["dsc_mean"] = c.dsc_mean;
  j["dsc_std"] = c.dsc_std;
  j["nsd_mean"] = c.nsd_mean;
  j["nsd_std"] = c.nsd_std;
  j["iter_duration_mean_s"] = c.iter_seconds_mean;
  j["error"] = c.error;
  return j;
}

// Flags the best and runner-up strategies per (task, shots) column.
json best_flags(const std::vector<CellResult>& cells) {
  std::map<std::string, std::vector<const CellResult*>> columns;
  for (const auto& c : cells)
    if (!c.failed())
      columns[c.task + "/k" + std::to_string(c.shots)].push_back(&c);
  json out = json::object();
  for (auto& [key, col] : columns) {
    auto rank = [&](auto metric) {
      std::vector<const CellResult*> sorted = col;
      std::stable_sort(sorted.begin(), sorted.end(),
                       [&](const CellResult* a, const CellResult* b) {
                         return metric(a) > metric(b);
                       });
      json j = json::array();
      for (size_t i = 0; i < sorted.size() && i < 2; ++i)
        j.push_back(sorted[i]->strategy.kind == StrategyKind::dgst
                        ? sorted[i]->strategy.label()
                        : to_string(sorted[i]->strategy.kind));
      return j;
    };
    out[key]["dsc_top2"] = rank([](const CellResult* c) { return c->dsc_mean; });
    out[key]["nsd_top2"] = rank([](const CellResult* c) { return c->nsd_mean; });
  }
  return out;
}

}  // namespace

MatrixResult cmd_matrix(const MatrixConfig& config) {
  if (config.foundation_path.empty())
    throw config_error("matrix: foundation checkpoint required");
  ensure_dir(config.out_dir);
  const MatrixPlan plan = plan_matrix(config);

  json manifest;
  manifest["cells"] = json::array();
  for (const auto& c : plan.cells) {
    json j;
    j["task"] = c.task;
    j["strategy"] = strategy_to_json(c.strategy);
    j["shots"] = c.shots;
    j["seeds"] = config.seeds;
    manifest["cells"].push_back(std::move(j));
  }
  manifest["reference_cells"] = json::array();
  for (const auto& c : plan.reference_cells) {
    json j;
    j["task"] = c.task;
    j["strategy"] = strategy_to_json(c.strategy);
    j["shots"] = c.shots;
    j["seeds"] = config.seeds;
    j["reference"] = true;
    manifest["reference_cells"].push_back(std::move(j));
  }
  MatrixResult result;
  result.manifest_path = config.out_dir + "/matrix_manifest.json";
  {
    std::ofstream out(result.manifest_path, std::ios::trunc);
    out << manifest.dump(2) << "\n";
  }

  ExperimentContext ctx = make_context(config.foundation_path);
  auto run_one = [&](const MatrixCell& cell) {
    FinetuneRequest req;
    req.task = cell.task;
    req.strategy = cell.strategy;
    req.shots = cell.shots;
    req.seeds = config.seeds;
    req.optim = config.optim;
    req.foundation_path = config.foundation_path;
    req.out_dir = config.out_dir;
    // partial failures are recorded on the cell; the matrix continues
    try {
      return run_cell(ctx, req);
    } catch (const std::exception& e) {
      CellResult c;
      c.task = cell.task;
      c.strategy = cell.strategy;
      c.shots = cell.shots;
      c.error = e.what();
      return c;
    }
  };
  for (const auto& cell : plan.cells) result.cells.push_back(run_one(cell));
  for (const auto& cell : plan.reference_cells)
    result.cells.push_back(run_one(cell));

  result.csv_path = config.out_dir + "/matrix.csv";
  {
    std::ofstream out(result.csv_path, std::ios::trunc);
    out << cells_to_csv(result.cells);
  }
  json jout;
  jout["cells"] = json::array();
  for (const auto& c : result.cells) jout["cells"].push_back(cell_to_json(c));
  jout["best_per_column"] = best_flags(result.cells);
  result.json_path = config.out_dir + "/matrix.json";
  {
    std::ofstream out(result.json_path, std::ios::trunc);
    out << jout.dump(2) << "\n";
  }
  return result;
}

SweepResult cmd_sweep_gamma(const SweepConfig& config) {
  if (config.foundation_path.empty())
    throw config_error("sweep-gamma: foundation checkpoint required");
  ensure_dir(config.out_dir);
  ExperimentContext ctx = make_context(config.foundation_path);

  SweepResult result;
  auto run_strategy = [&](StrategyConfig s) {
    FinetuneRequest req;
    req.task = config.task;
    req.strategy = s;
    req.shots = config.shots;
    req.seeds = config.seeds;
    req.optim = config.optim;
    req.foundation_path = config.foundation_path;
    req.out_dir = config.out_dir;
    return run_cell(ctx, req);
  };
  for (int gamma : config.gammas) {
    StrategyConfig s;
    s.kind = StrategyKind::dgst;
    s.gamma = gamma;
    result.series.push_back(run_strategy(s));
  }
  StrategyConfig full;
  full.kind = StrategyKind::full;
  result.series.push_back(run_strategy(full));

  const CellResult& full_cell = result.series.back();
  const CellResult& lo = result.series.front();
  const CellResult& hi = result.series[result.series.size() - 2];
  result.approaches_full = std::abs(hi.dsc_mean - full_cell.dsc_mean) <=
                           std::abs(lo.dsc_mean - full_cell.dsc_mean);

  result.csv_path = config.out_dir + "/sweep_gamma.csv";
  {
    std::ofstream out(result.csv_path, std::ios::trunc);
    out << cells_to_csv(result.series);
  }
  json j;
  j["task"] = config.task;
  j["shots"] = config.shots;
  j["series"] = json::array();
  for (size_t i = 0; i < result.series.size(); ++i) {
    const CellResult& c = result.series[i];
    json e = cell_to_json(c);
    e["gamma"] = c.strategy.kind == StrategyKind::dgst
                     ? json(c.strategy.gamma)
                     : json("full");
    j["series"].push_back(std::move(e));
  }
  j["approaches_full"] = result.approaches_full;
  result.json_path = config.out_dir + "/sweep_gamma.json";
  {
    std::ofstream out(result.json_path, std::ios::trunc);
    out << j.dump(2) << "\n";
  }
  return result;
}

AblationResult cmd_ablation(const AblationConfig& config) {
  if (config.foundation_path.empty())
    throw config_error("ablation: foundation checkpoint required");
  ensure_dir(config.out_dir);
  ExperimentContext ctx = make_context(config.foundation_path);

  AblationResult result;
  for (StrategyKind k :
       {StrategyKind::full, StrategyKind::encoder_only, StrategyKind::decoder_only,
        StrategyKind::bias_norm, StrategyKind::drst, StrategyKind::sgst,
        StrategyKind::dgst}) {
    FinetuneRequest req;
    req.task = config.task;
    req.strategy.kind = k;
    req.shots = config.shots;
    req.seeds = config.seeds;
    req.optim = config.optim;
    req.foundation_path = config.foundation_path;
    req.out_dir = config.out_dir;
    result.rows.push_back(run_cell(ctx, req));
  }
  const CellResult* full = nullptr;
  const CellResult* dgst_row = nullptr;
  for (const auto& c : result.rows) {
    if (c.strategy.kind == StrategyKind::full) full = &c;
    if (c.strategy.kind == StrategyKind::dgst) dgst_row = &c;
  }
  if (full != nullptr && dgst_row != nullptr && full->iter_seconds_mean > 0)
    result.dgst_over_full_duration =
        dgst_row->iter_seconds_mean / full->iter_seconds_mean;

  result.csv_path = config.out_dir + "/ablation.csv";
  {
    std::ofstream out(result.csv_path, std::ios::trunc);
    out << cells_to_csv(result.rows);
  }
  json j;
  j["rows"] = json::array();
  for (const auto& c : result.rows) j["rows"].push_back(cell_to_json(c));
  j["dgst_over_full_duration"] = result.dgst_over_full_duration;
  result.json_path = config.out_dir + "/ablation.json";
  {
    std::ofstream out(result.json_path, std::ios::trunc);
    out << j.dump(2) << "\n";
  }
  return result;
}

ReportResult cmd_report(const std::string& dir) {
  if (!fs::exists(dir)) throw config_error("report: directory '" + dir + "' missing");
  // group records back into cells by (task, strategy, shots)
  std::map<std::string, CellResult> cells;
  ReportResult result;
  for (const auto& entry : fs::recursive_directory_iterator(dir)) {
    if (!entry.is_regular_file() || entry.path().filename() != "record.json")
      continue;
    std::ifstream in(entry.path());
    json j;
    try {
      in >> j;
    } catch (const json::exception&) {
      continue;  // unrelated json
    }
    if (!j.contains("task") || !j.contains("strategy") || !j.contains("metrics"))
      continue;
    ++result.records;
    const StrategyConfig strategy = strategy_from_json(j.at("strategy"));
    const std::string key = j.at("task").get<std::string>() + "|" +
                            strategy.label() + "|" +
                            std::to_string(j.at("shots").get<int>());
    CellResult& cell = cells[key];
    cell.task = j.at("task").get<std::string>();
    cell.strategy = strategy;
    cell.shots = j.at("shots").get<int>();
    SeedRunResult run;
    run.seed = j.at("seed").get<uint64_t>();
    run.error = j.value("error", "");
    run.metrics = MetricsReport::from_cases(
        j.at("metrics").at("case_dsc").get<std::vector<double>>(),
        j.at("metrics").at("case_nsd").get<std::vector<double>>());
    IterationStat st;
    st.seconds = j.value("iter_seconds_mean", 0.0);
    run.stats.iterations.push_back(st);
    cell.runs.push_back(std::move(run));
  }
  std::vector<CellResult> list;
  for (auto& [key, cell] : cells) {
    cell.aggregate();
    list.push_back(cell);
  }
  result.csv_path = (fs::path(dir) / "summary.csv").string();
  {
    std::ofstream out(result.csv_path, std::ios::trunc);
    out << cells_to_csv(list);
  }
  json j;
  j["cells"] = json::array();
  for (const auto& c : list) j["cells"].push_back(cell_to_json(c));
  j["best_per_column"] = best_flags(list);
  result.json_path = (fs::path(dir) / "summary.json").string();
  {
    std::ofstream out(result.json_path, std::ios::trunc);
    out << j.dump(2) << "\n";
  }
  return result;
}

}  // namespace dgst
