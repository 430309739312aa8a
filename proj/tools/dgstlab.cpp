// dgstlab — training laboratory for sparse few-shot fine-tuning of a small
// segmentation U-Net: pretraining, the strategy catalogue (full, from-scratch,
// linear-prob, bias, bias-norm, affine-in, encoder-only, decoder-only, lora,
// adapter, drst, sgst, dgst), experiment matrices, gamma sweeps, ablations
// and report aggregation.

#include <cstdio>
#include <cstdlib>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "dgst/experiment.hpp"

namespace {

using namespace dgst;

std::string default_out_dir() {
  const char* env = std::getenv("DGSTLAB_OUT");
  return env != nullptr && *env != '\0' ? env : "runs";
}

std::vector<std::string> split_csv(const std::string& csv) {
  std::vector<std::string> out;
  size_t at = 0;
  while (at <= csv.size()) {
    const size_t comma = csv.find(',', at);
    const std::string tok = csv.substr(
        at, comma == std::string::npos ? std::string::npos : comma - at);
    if (!tok.empty()) out.push_back(tok);
    if (comma == std::string::npos) break;
    at = comma + 1;
  }
  return out;
}

std::vector<uint64_t> parse_seeds(const std::string& csv) {
  std::vector<uint64_t> out;
  for (const auto& tok : split_csv(csv))
    out.push_back(std::strtoull(tok.c_str(), nullptr, 10));
  if (out.empty()) throw config_error("empty list: '" + csv + "'");
  return out;
}

std::vector<int> parse_ints(const std::string& csv) {
  std::vector<int> out;
  for (uint64_t v : parse_seeds(csv)) out.push_back(int(v));
  return out;
}

void print_cell(const CellResult& cell) {
  if (cell.failed()) {
    std::printf("%s %s k=%d: FAILED (%s)\n", cell.task.c_str(),
                cell.strategy.label().c_str(), cell.shots, cell.error.c_str());
    return;
  }
  std::printf("%s %s k=%d seeds=%zu: DSC %.4f +/- %.4f  NSD %.4f +/- %.4f  "
              "iter %.4fs\n",
              cell.task.c_str(), cell.strategy.label().c_str(), cell.shots,
              cell.runs.size(), cell.dsc_mean, cell.dsc_std, cell.nsd_mean,
              cell.nsd_std, cell.iter_seconds_mean);
}

struct StrategyFlags {
  std::string name = "dgst";
  int gamma = 1;
  int lora_rank = 4;
  int adapter_width = 8;
  int sgst_warmup_iters = 0;

  StrategyConfig resolve() const {
    StrategyConfig s;
    s.kind = parse_strategy_kind(name);
    s.gamma = gamma;
    s.lora_rank = lora_rank;
    s.adapter_width = adapter_width;
    s.sgst_warmup_iters = sgst_warmup_iters;
    return s;
  }
};

void add_strategy_flags(CLI::App* cmd, StrategyFlags& s) {
  cmd->add_option("--strategy", s.name,
                  "full|from-scratch|linear-prob|bias|bias-norm|affine-in|"
                  "encoder-only|decoder-only|lora|adapter|drst|sgst|dgst");
  cmd->add_option("--gamma", s.gamma,
                  "scalars updated per kernel (dgst/sgst/drst)");
  cmd->add_option("--lora-rank", s.lora_rank, "low-rank factor rank");
  cmd->add_option("--adapter-width", s.adapter_width, "adapter bottleneck width");
  cmd->add_option("--sgst-warmup-iters", s.sgst_warmup_iters,
                  "gradient-accumulation iterations (0 = one epoch)");
}

void add_optim_flags(CLI::App* cmd, OptimConfig& o) {
  cmd->add_option("--lr0", o.lr0, "initial learning rate");
  cmd->add_option("--poly-power", o.poly_power, "polynomial decay power");
  cmd->add_option("--epochs", o.epochs, "training epochs");
  cmd->add_option("--batch-size", o.batch_size, "minibatch size");
  cmd->add_option("--momentum", o.momentum, "SGD momentum (extension, default 0)");
  cmd->add_flag_callback("--no-augment", [&o] { o.augment = false; },
                         "disable data augmentation");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"dgstlab: sparse fine-tuning laboratory"};
  app.require_subcommand(1);
  app.set_config("--config", "", "flat key-value config file with sections;"
                                 " command-line flags override it");

  // ---- pretrain ----
  PretrainConfig pc;
  pc.out_dir = default_out_dir();
  auto* pre = app.add_subcommand(
      "pretrain", "train the foundation model on the source domain");
  pre->add_option("--seed", pc.seed, "training seed");
  pre->add_option("--data-seed", pc.data_seed, "source generation seed");
  pre->add_option("--samples", pc.samples, "source training samples");
  pre->add_option("--test-samples", pc.test_samples, "held-out source samples");
  pre->add_option("--out", pc.out_dir, "output directory");
  pre->add_option("--base-width", pc.model.base_width, "U-Net base width");
  pre->add_option("--depth", pc.model.depth, "encoder depth");
  add_optim_flags(pre, pc.optim);

  // ---- finetune ----
  FinetuneRequest fr;
  fr.out_dir = default_out_dir();
  StrategyFlags fs;
  std::string fseeds = "1,2,3,4,5";
  auto* fin = app.add_subcommand(
      "finetune", "fine-tune the foundation on a downstream task");
  fin->add_option("--task", fr.task, "near|far");
  fin->add_option("--shots", fr.shots, "labelled samples for fine-tuning");
  fin->add_option("--seeds", fseeds, "comma-separated experiment seeds");
  fin->add_option("--seed", fseeds, "single experiment seed (alias of --seeds)");
  fin->add_option("--foundation", fr.foundation_path, "foundation checkpoint");
  fin->add_option("--out", fr.out_dir, "output directory");
  fin->add_option("--nsd-tol", fr.nsd_tol, "NSD tolerance in pixels");
  fin->add_flag("--cache-data", fr.cache_data,
                "write the generated dataset archive");
  add_strategy_flags(fin, fs);
  add_optim_flags(fin, fr.optim);

  // ---- matrix ----
  MatrixConfig mc;
  mc.out_dir = default_out_dir();
  std::string mtasks = "near,far", mseeds = "1,2,3,4,5", mshots;
  auto* mat = app.add_subcommand(
      "matrix", "full strategy x shots x seeds comparison grid");
  mat->add_option("--tasks", mtasks, "comma-separated task list");
  mat->add_option("--seeds", mseeds, "comma-separated experiment seeds");
  mat->add_option("--shots", mshots, "override the per-task shot grid");
  mat->add_option("--foundation", mc.foundation_path, "foundation checkpoint");
  mat->add_option("--out", mc.out_dir, "output directory");
  mat->add_flag_callback("--no-allshot", [&mc] { mc.include_allshot = false; },
                         "skip the All-shot reference rows");
  mat->add_flag("--timing-exclusive", mc.timing_exclusive,
                "run cells strictly sequentially (always on; reserved)");
  add_optim_flags(mat, mc.optim);

  // ---- sweep-gamma ----
  SweepConfig sc;
  sc.out_dir = default_out_dir();
  std::string sgammas = "1,2,3,5,10", sseeds = "1,2,3,4,5";
  auto* swp = app.add_subcommand("sweep-gamma", "DGST gamma sensitivity sweep");
  swp->add_option("--task", sc.task, "near|far");
  swp->add_option("--shots", sc.shots, "labelled samples");
  swp->add_option("--gammas", sgammas, "comma-separated gamma values");
  swp->add_option("--seeds", sseeds, "comma-separated experiment seeds");
  swp->add_option("--foundation", sc.foundation_path, "foundation checkpoint");
  swp->add_option("--out", sc.out_dir, "output directory");
  add_optim_flags(swp, sc.optim);

  // ---- ablation ----
  AblationConfig ac;
  ac.out_dir = default_out_dir();
  std::string aseeds = "1,2,3,4,5";
  auto* abl = app.add_subcommand(
      "ablation", "sparsification strategy ablation with iteration timing");
  abl->add_option("--task", ac.task, "near|far");
  abl->add_option("--shots", ac.shots, "labelled samples");
  abl->add_option("--seeds", aseeds, "comma-separated experiment seeds");
  abl->add_option("--foundation", ac.foundation_path, "foundation checkpoint");
  abl->add_option("--out", ac.out_dir, "output directory");
  abl->add_flag("--timing-exclusive", ac.timing_exclusive,
                "run cells strictly sequentially (always on; reserved)");
  add_optim_flags(abl, ac.optim);

  // ---- report ----
  std::string report_dir = default_out_dir();
  auto* rep = app.add_subcommand(
      "report", "re-aggregate run records into summary tables");
  rep->add_option("--dir", report_dir, "directory tree holding record.json files");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*pre) {
      const PretrainResult r = cmd_pretrain(pc);
      std::printf("foundation: %s\n", r.checkpoint_path.c_str());
      std::printf("source test DSC %.4f  NSD %.4f  mean iter %.4fs\n",
                  r.source_test_dsc, r.source_test_nsd,
                  r.stats.mean_iter_seconds());
    } else if (*fin) {
      fr.strategy = fs.resolve();
      fr.seeds = parse_seeds(fseeds);
      const CellResult cell = cmd_finetune(fr);
      print_cell(cell);
      if (cell.failed()) return 3;
    } else if (*mat) {
      mc.seeds = parse_seeds(mseeds);
      mc.tasks = split_csv(mtasks);
      if (!mshots.empty()) mc.shots_override = parse_ints(mshots);
      const MatrixResult r = cmd_matrix(mc);
      for (const auto& cell : r.cells) print_cell(cell);
      std::printf("matrix: %s\n", r.csv_path.c_str());
    } else if (*swp) {
      sc.gammas = parse_ints(sgammas);
      sc.seeds = parse_seeds(sseeds);
      const SweepResult r = cmd_sweep_gamma(sc);
      for (const auto& cell : r.series) print_cell(cell);
      std::printf("approaches_full: %s\nseries: %s\n",
                  r.approaches_full ? "true" : "false", r.json_path.c_str());
    } else if (*abl) {
      ac.seeds = parse_seeds(aseeds);
      const AblationResult r = cmd_ablation(ac);
      for (const auto& cell : r.rows) print_cell(cell);
      std::printf("dgst/full iteration duration ratio: %.3f\ntable: %s\n",
                  r.dgst_over_full_duration, r.csv_path.c_str());
    } else if (*rep) {
      const ReportResult r = cmd_report(report_dir);
      std::printf("aggregated %d records -> %s\n", r.records, r.csv_path.c_str());
    }
  } catch (const config_error& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 3;
  }
  return 0;
}
