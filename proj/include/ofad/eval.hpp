// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ofad/construct.hpp"
#include "ofad/diffusion.hpp"
#include "ofad/ofatrain.hpp"

namespace ofad {

/// Sliced 2-Wasserstein distance between equal-size point sets: the square
/// root of dim times the mean, over random unit directions, of the squared
/// 1-D W2 between the sorted projections. Directions come in random
/// orthonormal frames, so a translation by v scores exactly |v| whenever
/// n_projections is a multiple of dim.
double sliced_w2(const SampleSet& a, const SampleSet& b, int n_projections, std::uint64_t seed);

struct EvalConfig {
  int n_samples = 2048;
  int n_projections = 128;
  int sampler_steps = 35;
  DiffusionConfig diffusion{};
  int threads = 1;
};

struct MetricReport {
  int plan_id = 0;
  double target_p = 1.0;
  double practical_p = 1.0;
  long long macs = 0;
  long long params_kept = 0;
  double metric = 0.0;
  int n_generated = 0;
  int n_reference = 0;
  std::uint64_t seed = 0;
  std::optional<double> median_latency_us;
};

/// Samples with the EMA weights of `net` restricted to `mask`.
SampleSet sample_masked(const ScoreNetwork& net, const ChannelMask& mask, const EvalConfig& cfg, std::uint64_t seed);

/// Samples with a sigma-dependent mask (time-split families), EMA weights.
SampleSet sample_families(const ScoreNetwork& net, const std::vector<PlanFamily>& families, std::size_t plan_index,
                          const EvalConfig& cfg, std::uint64_t seed);

/// Generates cfg.n_samples with the plan and compares them with as many fresh
/// mixture draws. Deterministic per seed.
MetricReport evaluate_plan(const ScoreNetwork& net, const SubnetworkPlan& plan, const GaussianMixture& mix,
                           const EvalConfig& cfg, std::uint64_t seed);

MetricReport evaluate_family_plan(const ScoreNetwork& net, const std::vector<PlanFamily>& families,
                                  std::size_t plan_index, const GaussianMixture& mix, const EvalConfig& cfg,
                                  std::uint64_t seed);

/// min(series) / series[t] for every t.
std::vector<double> convergence_ratio(std::span<const double> series);

struct LayerSensitivity {
  int layer = 0;
  int block = 0;
  int index = 0;
  int kept_channels = 0;
  /// metric(layer clamped to the floor) - metric(full network)
  double sensitivity = 0.0;
  /// I^L of the layer divided by the largest I^L.
  double normalized_importance = 0.0;
};

/// Clamps each layer in turn to ceil(floor * |l|) channels (highest-importance
/// channels kept, other layers full) and reports the metric increase. The same
/// seed is used for every evaluation so the differences share sampling noise.
std::vector<LayerSensitivity> layer_sensitivity(const ScoreNetwork& net, const ImportanceTable& table,
                                                const GaussianMixture& mix, const EvalConfig& cfg, double floor,
                                                std::uint64_t seed);

struct LatencyStats {
  double median_us = 0.0;
  double p10_us = 0.0;
  double p90_us = 0.0;
};

/// Wall-clock time of one batch-1 forward pass of a dense network.
LatencyStats latency_bench(const ScoreNetwork& dense, int reps, int warmup);

/// Spearman rank correlation with average ranks for ties.
double spearman(std::span<const double> a, std::span<const double> b);

inline constexpr std::string_view kReportCsvHeader =
    "plan_id,target_p,practical_p,params_kept,macs,metric,n_samples,seed,median_latency_us";

std::string reports_to_csv(const std::vector<MetricReport>& reports);
std::vector<MetricReport> reports_from_csv(const std::filesystem::path& path);

}  // namespace ofad
