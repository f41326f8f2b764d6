// SPDX-License-Identifier: Apache-2.0
#pragma once

// Experiment stages behind the `ofad` command-line tool. Every command reads
// its inputs from files, writes its outputs below cfg.out and prints a short
// summary to `log`. Randomness comes from named sub-streams of cfg.seed, so a
// stage reruns bit-identically on its own.

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "ofad/config.hpp"

namespace ofad {

namespace fs = std::filesystem;

/// Process exit codes.
enum ExitCode : int { kExitOk = 0, kExitUsage = 2, kExitNumeric = 3, kExitIo = 4 };

/// Maps the exception currently being handled to an exit code and prints it.
int report_current_exception(std::ostream& err);

/// Writes `pretrain.ckpt` and `pretrain_log.csv`.
void cmd_pretrain(const ExperimentConfig& cfg, std::ostream& log);

/// Writes `importance.csv` (three tables when cfg.importance.time_split).
void cmd_importance(const ExperimentConfig& cfg, const fs::path& checkpoint, std::ostream& log);

/// Writes `plans.csv` (or `plans_<k>.csv` per sigma family) and reports nesting.
void cmd_construct(const ExperimentConfig& cfg, const fs::path& importance_csv, std::ostream& log);

struct TrainOfaArgs {
  fs::path checkpoint;
  /// One plan CSV, or one per time-split sigma family in interval order.
  /// With importance refresh the families are rebuilt from `importance` instead.
  std::vector<fs::path> plans;
  /// Needed for refresh and the random-architecture mode.
  std::optional<fs::path> importance;
  /// OFA checkpoint holding optimizer state to continue from.
  std::optional<fs::path> resume;
};

/// Writes `ofa.ckpt`, `ofa_log.csv` and, with checkpoint_every, `ofa_step<N>.ckpt`.
/// With importance refresh every checkpoint gets a sibling `.importance.csv`
/// holding the current tables; pass it as `importance` when resuming.
void cmd_train_ofa(const ExperimentConfig& cfg, const TrainOfaArgs& args, std::ostream& log);

/// Writes `extract_plan<id>.ckpt`, optionally after `finetune_steps` masked steps.
void cmd_extract(const ExperimentConfig& cfg, const fs::path& checkpoint, const fs::path& plans, int plan_id,
                 long long finetune_steps, std::ostream& log);

/// Writes `samples.csv`; without `plans` the full network is used.
void cmd_sample(const ExperimentConfig& cfg, const fs::path& checkpoint, const std::optional<fs::path>& plans,
                int plan_id, int n_samples, std::ostream& log);

struct EvalArgs {
  fs::path checkpoint;
  /// As for train-ofa; empty evaluates the full network only.
  std::vector<fs::path> plans;
  /// Seeds evaluated per plan (derived from cfg.seed).
  int n_seeds = 1;
  bool latency = false;
  /// With an importance CSV, also writes `sensitivity.csv`.
  std::optional<fs::path> sensitivity_importance;
  std::string report_name = "report.csv";
};

/// Writes `report.csv` (one row per plan and seed).
void cmd_eval(const ExperimentConfig& cfg, const EvalArgs& args, std::ostream& log);

/// Writes `bench.csv` with batch-1 latency of every extracted plan.
void cmd_bench(const ExperimentConfig& cfg, const fs::path& checkpoint, const fs::path& plans, std::ostream& log);

/// Merges report CSVs into `report.csv` sorted by target P. With
/// `convergence`, inputs are taken as successive checkpoints and
/// `convergence.csv` is written as well.
void cmd_report(const ExperimentConfig& cfg, const std::vector<fs::path>& inputs, bool convergence,
                std::ostream& log);

}  // namespace ofad
