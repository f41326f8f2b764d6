// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "ofad/construct.hpp"
#include "ofad/diffusion.hpp"
#include "ofad/eval.hpp"
#include "ofad/importance.hpp"
#include "ofad/netcore.hpp"
#include "ofad/ofatrain.hpp"

namespace ofad {

inline constexpr int kConfigVersion = 1;

struct MixtureConfig {
  /// Ring layout unless explicit means are given.
  int components = 8;
  double radius = 2.0;
  double std = 0.1;
  std::vector<std::vector<double>> means;

  GaussianMixture build() const;
};

struct ImportanceConfig {
  ImportanceMethod method = ImportanceMethod::taylor;
  int n_pairs = kDefaultImportancePairs;
  bool per_pair_abs = true;
  bool time_split = false;
  long long refresh_every = 0;
};

struct StageConfig {
  long long steps = 20000;
  int batch_size = 128;
  double learning_rate = 1e-3;
  double ema_decay = 0.999;
  long long checkpoint_every = 0;
  bool log_timing = false;
  bool random_architecture = false;
};

struct EvalRunConfig {
  int n_samples = 2048;
  int n_projections = 128;
  int sampler_steps = 35;
  int latency_reps = 50;
  int latency_warmup = 5;
  int threads = 1;
};

struct ExperimentConfig {
  int version = kConfigVersion;
  std::uint64_t seed = 0;
  std::string out = "out";
  NetworkSpec network = default_spec();
  DiffusionConfig diffusion{};
  MixtureConfig mixture{};
  RetentionSchedule schedule = default_schedule();
  ImportanceConfig importance{};
  ReweightStrategy reweight = ReweightStrategy::linear;
  double reweight_ratio = kDefaultReweightRatio;
  StageConfig pretrain{};
  StageConfig ofa{};
  EvalRunConfig eval{};

  void validate() const;

  /// Run configuration for a training stage; `stream` names the seed sub-stream.
  TrainRunConfig run_config(const StageConfig& stage, std::string_view stream) const;
  EvalConfig eval_config() const;
  std::uint64_t stream_seed(std::string_view stream) const { return derive_seed(seed, stream); }
};

/// Strict parse: unknown keys and a missing or unsupported version are rejected
/// with ValidationError. Absent keys keep their defaults.
ExperimentConfig config_from_json(const nlohmann::json& j);
nlohmann::json config_to_json(const ExperimentConfig& cfg);
ExperimentConfig load_config(const std::filesystem::path& path);

}  // namespace ofad
