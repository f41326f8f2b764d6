// SPDX-License-Identifier: Apache-2.0
#include "ofad/config.hpp"

#include <fstream>
#include <initializer_list>
#include <sstream>
#include <string_view>

#include "ofad/errors.hpp"

namespace ofad {

using nlohmann::json;

GaussianMixture MixtureConfig::build() const {
  if (!means.empty()) {
    GaussianMixture mix{means, std};
    mix.validate();
    return mix;
  }
  return make_ring_mixture(components, radius, std);
}

void ExperimentConfig::validate() const {
  if (version != kConfigVersion) throw ValidationError("config: unsupported version " + std::to_string(version));
  if (out.empty()) throw ValidationError("config: out must not be empty");
  network.validate();
  diffusion.validate();
  const auto mix = mixture.build();
  if (mix.dim() != network.input_dim) throw ValidationError("config: mixture dimension differs from network input_dim");
  schedule.validate();
  if (importance.n_pairs < 1) throw DomainError("config: importance.n_pairs must be >= 1");
  if (importance.refresh_every < 0) throw DomainError("config: importance.refresh_every must be >= 0");
  if (importance.refresh_every > 0 && importance.method != ImportanceMethod::taylor)
    throw ValidationError("config: importance refresh requires the taylor method");
  ReweightConfig::resolve(reweight, schedule.size(), reweight_ratio);
  run_config(pretrain, "pretrain").validate();
  run_config(ofa, "ofa").validate();
  if (pretrain.checkpoint_every < 0 || ofa.checkpoint_every < 0)
    throw DomainError("config: checkpoint_every must be >= 0");
  if (eval.n_samples < 2) throw DomainError("config: eval.n_samples must be >= 2");
  if (eval.n_projections < 1) throw DomainError("config: eval.n_projections must be >= 1");
  if (eval.sampler_steps < 1) throw DomainError("config: eval.sampler_steps must be >= 1");
  if (eval.latency_reps < 3) throw DomainError("config: eval.latency_reps must be >= 3");
  if (eval.latency_warmup < 0) throw DomainError("config: eval.latency_warmup must be >= 0");
  if (eval.threads < 1) throw DomainError("config: eval.threads must be >= 1");
}

TrainRunConfig ExperimentConfig::run_config(const StageConfig& stage, std::string_view stream) const {
  TrainRunConfig rc;
  rc.steps = stage.steps;
  rc.batch_size = stage.batch_size;
  rc.learning_rate = stage.learning_rate;
  rc.ema_decay = stage.ema_decay;
  rc.refresh_every = importance.refresh_every;
  rc.refresh_pairs = importance.n_pairs;
  rc.random_architecture = stage.random_architecture;
  rc.random_architecture_rates = schedule.rates;
  rc.seed = stream_seed(stream);
  rc.sigma_range = SigmaInterval{diffusion.sigma_min, diffusion.sigma_max};
  rc.log_timing = stage.log_timing;
  return rc;
}

EvalConfig ExperimentConfig::eval_config() const {
  EvalConfig ec;
  ec.n_samples = eval.n_samples;
  ec.n_projections = eval.n_projections;
  ec.sampler_steps = eval.sampler_steps;
  ec.diffusion = diffusion;
  ec.threads = eval.threads;
  return ec;
}

namespace {

void reject_unknown(const json& j, std::initializer_list<std::string_view> known, const std::string& where) {
  if (!j.is_object()) throw ValidationError("config: " + where + " must be an object");
  for (const auto& [key, _] : j.items()) {
    bool ok = false;
    for (auto k : known) ok = ok || key == k;
    if (!ok) throw ValidationError("config: unknown key '" + key + "' in " + where);
  }
}

template <typename T>
void read_opt(const json& j, const char* key, T& dst) {
  if (j.contains(key)) dst = j.at(key).get<T>();
}

StageConfig stage_from_json(const json& j, const std::string& where) {
  reject_unknown(j,
                 {"steps", "batch_size", "learning_rate", "ema_decay", "checkpoint_every", "log_timing",
                  "random_architecture"},
                 where);
  StageConfig s;
  read_opt(j, "steps", s.steps);
  read_opt(j, "batch_size", s.batch_size);
  read_opt(j, "learning_rate", s.learning_rate);
  read_opt(j, "ema_decay", s.ema_decay);
  read_opt(j, "checkpoint_every", s.checkpoint_every);
  read_opt(j, "log_timing", s.log_timing);
  read_opt(j, "random_architecture", s.random_architecture);
  return s;
}

json stage_to_json(const StageConfig& s) {
  return {{"steps", s.steps},
          {"batch_size", s.batch_size},
          {"learning_rate", s.learning_rate},
          {"ema_decay", s.ema_decay},
          {"checkpoint_every", s.checkpoint_every},
          {"log_timing", s.log_timing},
          {"random_architecture", s.random_architecture}};
}

}  // namespace

ExperimentConfig config_from_json(const json& j) {
  reject_unknown(j,
                 {"version", "seed", "out", "network", "diffusion", "mixture", "schedule", "importance", "reweight",
                  "pretrain", "ofa", "eval"},
                 "config");
  if (!j.contains("version")) throw ValidationError("config: missing version");
  ExperimentConfig c;
  try {
    c.version = j.at("version").get<int>();
    if (c.version != kConfigVersion) throw ValidationError("config: unsupported version " + std::to_string(c.version));
    read_opt(j, "seed", c.seed);
    read_opt(j, "out", c.out);
    if (j.contains("network")) c.network = spec_from_json(j.at("network"));
    if (j.contains("diffusion")) {
      const auto& d = j.at("diffusion");
      reject_unknown(d, {"sigma_min", "sigma_max", "rho"}, "diffusion");
      read_opt(d, "sigma_min", c.diffusion.sigma_min);
      read_opt(d, "sigma_max", c.diffusion.sigma_max);
      read_opt(d, "rho", c.diffusion.rho);
    }
    if (j.contains("mixture")) {
      const auto& m = j.at("mixture");
      reject_unknown(m, {"components", "radius", "std", "means"}, "mixture");
      read_opt(m, "components", c.mixture.components);
      read_opt(m, "radius", c.mixture.radius);
      read_opt(m, "std", c.mixture.std);
      read_opt(m, "means", c.mixture.means);
    }
    if (j.contains("schedule")) {
      const auto& s = j.at("schedule");
      reject_unknown(s, {"rates", "floor"}, "schedule");
      std::vector<double> rates = c.schedule.rates;
      read_opt(s, "rates", rates);
      std::optional<double> floor;
      if (s.contains("floor")) floor = s.at("floor").get<double>();
      c.schedule = RetentionSchedule::make(std::move(rates), floor);
    }
    if (j.contains("importance")) {
      const auto& im = j.at("importance");
      reject_unknown(im, {"method", "n_pairs", "per_pair_abs", "time_split", "refresh_every"}, "importance");
      if (im.contains("method")) c.importance.method = parse_importance_method(im.at("method").get<std::string>());
      read_opt(im, "n_pairs", c.importance.n_pairs);
      read_opt(im, "per_pair_abs", c.importance.per_pair_abs);
      read_opt(im, "time_split", c.importance.time_split);
      read_opt(im, "refresh_every", c.importance.refresh_every);
    }
    if (j.contains("reweight")) {
      const auto& r = j.at("reweight");
      reject_unknown(r, {"strategy", "ratio"}, "reweight");
      if (r.contains("strategy")) c.reweight = parse_reweight_strategy(r.at("strategy").get<std::string>());
      read_opt(r, "ratio", c.reweight_ratio);
    }
    if (j.contains("pretrain")) c.pretrain = stage_from_json(j.at("pretrain"), "pretrain");
    if (j.contains("ofa")) c.ofa = stage_from_json(j.at("ofa"), "ofa");
    if (j.contains("eval")) {
      const auto& e = j.at("eval");
      reject_unknown(e, {"n_samples", "n_projections", "sampler_steps", "latency_reps", "latency_warmup", "threads"},
                     "eval");
      read_opt(e, "n_samples", c.eval.n_samples);
      read_opt(e, "n_projections", c.eval.n_projections);
      read_opt(e, "sampler_steps", c.eval.sampler_steps);
      read_opt(e, "latency_reps", c.eval.latency_reps);
      read_opt(e, "latency_warmup", c.eval.latency_warmup);
      read_opt(e, "threads", c.eval.threads);
    }
  } catch (const json::exception& e) {
    throw ValidationError(std::string("config: ") + e.what());
  }
  c.validate();
  return c;
}

json config_to_json(const ExperimentConfig& c) {
  json mixture = {{"std", c.mixture.std}};
  if (c.mixture.means.empty()) {
    mixture["components"] = c.mixture.components;
    mixture["radius"] = c.mixture.radius;
  } else {
    mixture["means"] = c.mixture.means;
  }
  return {{"version", c.version},
          {"seed", c.seed},
          {"out", c.out},
          {"network", spec_to_json(c.network)},
          {"diffusion",
           {{"sigma_min", c.diffusion.sigma_min}, {"sigma_max", c.diffusion.sigma_max}, {"rho", c.diffusion.rho}}},
          {"mixture", mixture},
          {"schedule", {{"rates", c.schedule.rates}, {"floor", c.schedule.floor}}},
          {"importance",
           {{"method", std::string(to_string(c.importance.method))},
            {"n_pairs", c.importance.n_pairs},
            {"per_pair_abs", c.importance.per_pair_abs},
            {"time_split", c.importance.time_split},
            {"refresh_every", c.importance.refresh_every}}},
          {"reweight", {{"strategy", std::string(to_string(c.reweight))}, {"ratio", c.reweight_ratio}}},
          {"pretrain", stage_to_json(c.pretrain)},
          {"ofa", stage_to_json(c.ofa)},
          {"eval",
           {{"n_samples", c.eval.n_samples},
            {"n_projections", c.eval.n_projections},
            {"sampler_steps", c.eval.sampler_steps},
            {"latency_reps", c.eval.latency_reps},
            {"latency_warmup", c.eval.latency_warmup},
            {"threads", c.eval.threads}}}};
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("config: cannot open " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw ValidationError("config: " + path.string() + ": " + e.what());
  }
  return config_from_json(j);
}

}  // namespace ofad
