// SPDX-License-Identifier: Apache-2.0
#pragma once

// Once-for-all training of a nested plan family over shared weights.
//
// Each step draws one plan index i with probability w_i and takes an Adam
// step on that plan's masked loss, so the expected update follows the
// reweighted objective sum_i w_i L(theta_{P_i}). Parameters outside the drawn
// plan are left bit-identical. A single global EMA tracks the shared weights.
//
// Every step derives its own random streams from (seed, step), so a run
// resumed from a checkpoint continues exactly as the uninterrupted run would.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "ofad/construct.hpp"
#include "ofad/diffusion.hpp"
#include "ofad/importance.hpp"
#include "ofad/netcore.hpp"

namespace ofad {

enum class ReweightStrategy { linear, sandwich, uniform };

std::string_view to_string(ReweightStrategy s);
ReweightStrategy parse_reweight_strategy(std::string_view name);

inline constexpr double kDefaultReweightRatio = 3.0;

/// w_i = 2 (m - (m - 1)(i - 1)/(N - 1)) / (N (m + 1)), i = 1..N.
std::vector<double> linear_weights(int n, double m);
/// 0.25 on both ends, 0.5 / (N - 2) on each interior entry.
std::vector<double> sandwich_weights(int n);
std::vector<double> uniform_weights(int n);

struct ReweightConfig {
  ReweightStrategy strategy = ReweightStrategy::linear;
  double ratio = kDefaultReweightRatio;
  std::vector<double> weights;

  static ReweightConfig resolve(ReweightStrategy strategy, int n, double ratio = kDefaultReweightRatio);
};

/// Plans used for noise levels inside `interval`. A single family covers the
/// whole range; the time-split variant keeps three.
struct PlanFamily {
  SigmaInterval interval;
  std::vector<SubnetworkPlan> plans;
};

/// Index into `families` whose interval contains sigma (the last match wins
/// on shared boundaries, mirroring a right-closed split).
std::size_t family_for_sigma(const std::vector<PlanFamily>& families, double sigma);

/// Draws i with probability weights[i].
int draw_plan_index(std::span<const double> weights, Rng& rng);

struct StepRecord {
  long long step = 0;
  int plan_id = 0;
  double sigma = 0.0;  // geometric mean of the batch noise levels
  double loss = 0.0;
  std::optional<double> elapsed_ms;
};

/// One OFA update with the given batch; returns the record (step = optimizer step after the update).
StepRecord ofa_train_step(ScoreNetwork& net, OptimizerState& opt, const std::vector<PlanFamily>& families,
                          std::span<const double> weights, const DsmBatch& batch, Rng& plan_rng, double ema_decay);

struct TrainRunConfig {
  long long steps = 20000;
  int batch_size = 128;
  double learning_rate = 1e-3;
  double ema_decay = 0.999;
  /// Recompute importance and plans every this many steps; 0 disables.
  long long refresh_every = 0;
  int refresh_pairs = kDefaultImportancePairs;
  /// Draw a fresh random-architecture plan every step instead of using the family.
  bool random_architecture = false;
  std::vector<double> random_architecture_rates{0.25, 0.5, 0.75, 1.0};
  std::uint64_t seed = 0;
  SigmaInterval sigma_range{};
  bool log_timing = false;

  void validate() const;
};

/// Called after every step; may write checkpoints or evaluate.
using StepHook = std::function<void(const StepRecord&, const ScoreNetwork&, const OptimizerState&,
                                    const std::vector<PlanFamily>&)>;

struct TrainingLog {
  std::vector<StepRecord> records;
};

/// What run_ofa_training needs to rebuild plans: importance refresh and the
/// random-architecture ablation both read from here.
struct PlanRebuild {
  RetentionSchedule schedule;
  /// One Taylor table per family (random architecture uses tables[0]).
  std::vector<ImportanceTable> tables;
  bool dedup = false;
};

/// Runs steps opt.step + 1 .. cfg.steps. With `rebuild` and
/// cfg.refresh_every > 0 the tables and plan families are recomputed after
/// every multiple of refresh_every; `families` is updated in place.
TrainingLog run_ofa_training(ScoreNetwork& net, OptimizerState& opt, std::vector<PlanFamily>& families,
                             std::span<const double> weights, const TrainRunConfig& cfg, const GaussianMixture& mix,
                             PlanRebuild* rebuild = nullptr, const StepHook& hook = {});

/// Standard full-network training sharing the OFA batch streams.
TrainingLog pretrain(ScoreNetwork& net, OptimizerState& opt, const TrainRunConfig& cfg, const GaussianMixture& mix,
                     const StepHook& hook = {});

/// Continues masked training of `plan` for `steps` more steps and returns the
/// extracted dense subnetwork. steps = 0 is extract_dense.
ScoreNetwork finetune(ScoreNetwork net, const SubnetworkPlan& plan, long long steps, const TrainRunConfig& cfg,
                      const GaussianMixture& mix);

inline constexpr std::string_view kTrainLogCsvHeader = "step,plan_id,sigma,loss,elapsed_ms";
std::string training_log_to_csv(const TrainingLog& log);
TrainingLog training_log_from_csv(const std::filesystem::path& path);

}  // namespace ofad
