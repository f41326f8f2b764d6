// SPDX-License-Identifier: Apache-2.0
#include "ofad/ofatrain.hpp"

#include <chrono>
#include <cmath>
#include <sstream>

#include "ofad/csv.hpp"
#include "ofad/errors.hpp"

namespace ofad {

std::string_view to_string(ReweightStrategy s) {
  switch (s) {
    case ReweightStrategy::linear: return "linear";
    case ReweightStrategy::sandwich: return "sandwich";
    case ReweightStrategy::uniform: return "uniform";
  }
  return "linear";
}

ReweightStrategy parse_reweight_strategy(std::string_view name) {
  if (name == "linear") return ReweightStrategy::linear;
  if (name == "sandwich") return ReweightStrategy::sandwich;
  if (name == "uniform") return ReweightStrategy::uniform;
  throw ValidationError("unknown reweight strategy '" + std::string(name) + "'");
}

std::vector<double> linear_weights(int n, double m) {
  if (!(m >= 1.0)) throw DomainError("linear_weights: ratio m must be >= 1");
  if (n < 1) throw DomainError("linear_weights: N must be >= 1");
  if (n == 1) return {1.0};
  std::vector<double> w(static_cast<std::size_t>(n));
  const double nn = static_cast<double>(n);
  for (int i = 1; i <= n; ++i) {
    w[static_cast<std::size_t>(i - 1)] =
        2.0 * (m - (m - 1.0) * static_cast<double>(i - 1) / (nn - 1.0)) / (nn * (m + 1.0));
  }
  return w;
}

std::vector<double> sandwich_weights(int n) {
  if (n < 3) throw DomainError("sandwich_weights: N must be >= 3");
  std::vector<double> w(static_cast<std::size_t>(n), 0.5 / static_cast<double>(n - 2));
  w.front() = 0.25;
  w.back() = 0.25;
  return w;
}

std::vector<double> uniform_weights(int n) {
  if (n < 1) throw DomainError("uniform_weights: N must be >= 1");
  return std::vector<double>(static_cast<std::size_t>(n), 1.0 / static_cast<double>(n));
}

ReweightConfig ReweightConfig::resolve(ReweightStrategy strategy, int n, double ratio) {
  ReweightConfig c{strategy, ratio, {}};
  switch (strategy) {
    case ReweightStrategy::linear: c.weights = linear_weights(n, ratio); break;
    case ReweightStrategy::sandwich: c.weights = sandwich_weights(n); break;
    case ReweightStrategy::uniform: c.weights = uniform_weights(n); break;
  }
  return c;
}

std::size_t family_for_sigma(const std::vector<PlanFamily>& families, double sigma) {
  if (families.empty()) throw ValidationError("no plan families");
  if (families.size() == 1) return 0;
  std::size_t found = families.size();
  for (std::size_t f = 0; f < families.size(); ++f) {
    if (families[f].interval.contains(sigma)) found = f;
  }
  if (found == families.size()) {
    // Outside every interval: clamp to the nearest end.
    found = sigma < families.front().interval.lo ? 0 : families.size() - 1;
  }
  return found;
}

int draw_plan_index(std::span<const double> weights, Rng& rng) {
  if (weights.empty()) throw ValidationError("draw_plan_index: no weights");
  const double u = rng.uniform();
  double acc = 0.0;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    acc += weights[i];
    if (u < acc) return static_cast<int>(i);
  }
  // u landed in the rounding slack above the cumulative sum: last positive weight.
  for (std::size_t i = weights.size(); i-- > 0;) {
    if (weights[i] > 0.0) return static_cast<int>(i);
  }
  return static_cast<int>(weights.size()) - 1;
}

namespace {

double geometric_mean(const std::vector<double>& v) {
  double acc = 0.0;
  for (double x : v) acc += std::log(x);
  return std::exp(acc / static_cast<double>(v.size()));
}

DsmBatch sub_batch(const DsmBatch& b, const std::vector<std::size_t>& rows) {
  DsmBatch s;
  s.dim = b.dim;
  for (auto r : rows) {
    auto x0 = b.x0_row(r);
    auto eps = b.eps_row(r);
    s.x0.insert(s.x0.end(), x0.begin(), x0.end());
    s.eps.insert(s.eps.end(), eps.begin(), eps.end());
    s.sigma.push_back(b.sigma[r]);
  }
  return s;
}

StepRecord masked_step(ScoreNetwork& net, OptimizerState& opt, const std::vector<const ChannelMask*>& family_masks,
                       const std::vector<PlanFamily>& families, const DsmBatch& batch, double ema_decay) {
  StepRecord rec;
  rec.sigma = geometric_mean(batch.sigma);

  std::vector<std::vector<std::size_t>> groups(families.size());
  for (std::size_t n = 0; n < batch.size(); ++n) groups[family_for_sigma(families, batch.sigma[n])].push_back(n);

  LossGrad total;
  std::vector<std::uint8_t> trainable;
  std::size_t used = 0;
  for (std::size_t f = 0; f < groups.size(); ++f) {
    if (!groups[f].empty()) ++used;
  }
  for (std::size_t f = 0; f < groups.size(); ++f) {
    if (groups[f].empty()) continue;
    const ChannelMask& mask = *family_masks[f];
    auto pm = param_mask(net.layout(), mask);
    if (used == 1) {
      total = loss_and_gradients(net, mask, batch);
      trainable = std::move(pm);
      break;
    }
    const auto lg = loss_and_gradients(net, mask, sub_batch(batch, groups[f]));
    const double share = static_cast<double>(groups[f].size()) / static_cast<double>(batch.size());
    if (total.grads.empty()) {
      total.grads.assign(lg.grads.size(), 0.0);
      trainable.assign(pm.size(), 0);
    }
    total.loss += share * lg.loss;
    for (std::size_t i = 0; i < lg.grads.size(); ++i) {
      total.grads[i] += share * lg.grads[i];
      trainable[i] |= pm[i];
    }
  }
  rec.loss = total.loss;
  apply_update(net, opt, total.grads, trainable);
  ema_update(net, ema_decay);
  rec.step = static_cast<long long>(opt.step);
  return rec;
}

}  // namespace

StepRecord ofa_train_step(ScoreNetwork& net, OptimizerState& opt, const std::vector<PlanFamily>& families,
                          std::span<const double> weights, const DsmBatch& batch, Rng& plan_rng, double ema_decay) {
  if (families.empty()) throw ValidationError("ofa_train_step: no plan families");
  for (const auto& f : families) {
    if (f.plans.size() != weights.size()) {
      throw ValidationError("ofa_train_step: plan count does not match the weight vector");
    }
  }
  const int i = draw_plan_index(weights, plan_rng);
  std::vector<const ChannelMask*> masks;
  for (const auto& f : families) masks.push_back(&f.plans[static_cast<std::size_t>(i)].mask);
  auto rec = masked_step(net, opt, masks, families, batch, ema_decay);
  rec.plan_id = families.front().plans[static_cast<std::size_t>(i)].id;
  return rec;
}

void TrainRunConfig::validate() const {
  if (steps < 0) throw ValidationError("train: steps must be >= 0");
  if (batch_size < 1) throw ValidationError("train: batch_size must be >= 1");
  if (!(learning_rate > 0.0)) throw ValidationError("train: learning_rate must be > 0");
  if (!(ema_decay >= 0.0 && ema_decay < 1.0)) throw ValidationError("train: ema_decay must lie in [0, 1)");
  if (refresh_every < 0) throw ValidationError("train: refresh_every must be >= 0");
  if (refresh_pairs < 1) throw ValidationError("train: refresh_pairs must be >= 1");
  if (!(sigma_range.lo > 0.0 && sigma_range.lo <= sigma_range.hi)) throw ValidationError("train: bad sigma range");
}

namespace {

using Clock = std::chrono::steady_clock;

void stamp(StepRecord& rec, const TrainRunConfig& cfg, Clock::time_point start) {
  if (cfg.log_timing) {
    rec.elapsed_ms = std::chrono::duration<double, std::milli>(Clock::now() - start).count();
  }
}

}  // namespace

TrainingLog run_ofa_training(ScoreNetwork& net, OptimizerState& opt, std::vector<PlanFamily>& families,
                             std::span<const double> weights, const TrainRunConfig& cfg, const GaussianMixture& mix,
                             PlanRebuild* rebuild, const StepHook& hook) {
  cfg.validate();
  if ((cfg.random_architecture || cfg.refresh_every > 0) && (rebuild == nullptr || rebuild->tables.empty())) {
    throw ValidationError("train: importance tables are required for refresh or random architecture");
  }
  if (rebuild && rebuild->tables.size() != families.size() && !cfg.random_architecture) {
    throw ValidationError("train: need one importance table per plan family");
  }
  opt.config.learning_rate = cfg.learning_rate;
  TrainingLog log;
  const auto start = Clock::now();
  for (long long step = static_cast<long long>(opt.step) + 1; step <= cfg.steps; ++step) {
    const auto s = static_cast<std::uint64_t>(step);
    Rng batch_rng(derive_seed(cfg.seed, "batch", s));
    Rng plan_rng(derive_seed(cfg.seed, "plan", s));
    const auto batch = draw_dsm_batch(mix, cfg.batch_size, cfg.sigma_range, batch_rng);
    StepRecord rec;
    try {
      if (cfg.random_architecture) {
        const auto plan = random_architecture_plan(net.spec(), rebuild->tables.front(), cfg.random_architecture_rates,
                                                   derive_seed(cfg.seed, "architecture", s));
        std::vector<PlanFamily> single{PlanFamily{cfg.sigma_range, {plan}}};
        rec = masked_step(net, opt, {&single.front().plans.front().mask}, single, batch, cfg.ema_decay);
        rec.plan_id = -1;
      } else {
        rec = ofa_train_step(net, opt, families, weights, batch, plan_rng, cfg.ema_decay);
      }
    } catch (const NumericError& e) {
      throw NumericError(std::string("training step failed: ") + e.what(), static_cast<std::ptrdiff_t>(step));
    }
    stamp(rec, cfg, start);
    log.records.push_back(rec);

    if (cfg.refresh_every > 0 && step % cfg.refresh_every == 0 && step < cfg.steps) {
      Rng refresh_rng(derive_seed(cfg.seed, "refresh", s));
      for (std::size_t f = 0; f < rebuild->tables.size(); ++f) {
        rebuild->tables[f] = refresh_importance(net, rebuild->tables[f], mix, cfg.refresh_pairs, refresh_rng, step);
        if (cfg.random_architecture) continue;
        auto plans = construct_plans(net.spec(), rebuild->tables[f], rebuild->schedule, rebuild->dedup);
        if (plans.size() != weights.size()) {
          throw ValidationError("train: refreshed plan count differs from the weight vector");
        }
        families[f].plans = std::move(plans);
      }
    }
    if (hook) hook(rec, net, opt, families);
  }
  return log;
}

TrainingLog pretrain(ScoreNetwork& net, OptimizerState& opt, const TrainRunConfig& cfg, const GaussianMixture& mix,
                     const StepHook& hook) {
  cfg.validate();
  opt.config.learning_rate = cfg.learning_rate;
  const auto full = ChannelMask::full(net.spec());
  const std::vector<PlanFamily> none;
  TrainingLog log;
  const auto start = Clock::now();
  for (long long step = static_cast<long long>(opt.step) + 1; step <= cfg.steps; ++step) {
    Rng batch_rng(derive_seed(cfg.seed, "batch", static_cast<std::uint64_t>(step)));
    const auto batch = draw_dsm_batch(mix, cfg.batch_size, cfg.sigma_range, batch_rng);
    StepRecord rec;
    try {
      const auto lg = loss_and_gradients(net, full, batch);
      apply_update(net, opt, lg.grads);
      ema_update(net, cfg.ema_decay);
      rec.loss = lg.loss;
    } catch (const NumericError& e) {
      throw NumericError(std::string("pretraining step failed: ") + e.what(), static_cast<std::ptrdiff_t>(step));
    }
    rec.step = static_cast<long long>(opt.step);
    rec.sigma = geometric_mean(batch.sigma);
    stamp(rec, cfg, start);
    log.records.push_back(rec);
    if (hook) hook(rec, net, opt, none);
  }
  return log;
}

ScoreNetwork finetune(ScoreNetwork net, const SubnetworkPlan& plan, long long steps, const TrainRunConfig& cfg,
                      const GaussianMixture& mix) {
  if (steps < 0) throw DomainError("finetune: steps must be >= 0");
  if (steps > 0) {
    auto opt = OptimizerState::for_network(net, AdamConfig{cfg.learning_rate});
    std::vector<PlanFamily> families{PlanFamily{cfg.sigma_range, {plan}}};
    TrainRunConfig ft = cfg;
    ft.steps = steps;
    ft.refresh_every = 0;
    ft.random_architecture = false;
    ft.seed = derive_seed(cfg.seed, "finetune");
    const std::vector<double> w{1.0};
    run_ofa_training(net, opt, families, w, ft, mix);
  }
  return extract_dense(net, plan.mask);
}

std::string training_log_to_csv(const TrainingLog& log) {
  std::ostringstream out;
  out << kTrainLogCsvHeader << '\n';
  for (const auto& r : log.records) {
    out << r.step << ',' << r.plan_id << ',' << csv::format_real(r.sigma) << ',' << csv::format_real(r.loss) << ',';
    if (r.elapsed_ms) out << csv::format_real(*r.elapsed_ms);
    out << '\n';
  }
  return out.str();
}

TrainingLog training_log_from_csv(const std::filesystem::path& path) {
  const auto table = csv::read(path, kTrainLogCsvHeader);
  TrainingLog log;
  for (const auto& row : table.rows) {
    StepRecord r;
    r.step = csv::parse_int(row[0]);
    r.plan_id = static_cast<int>(csv::parse_int(row[1]));
    r.sigma = csv::parse_real(row[2]);
    r.loss = csv::parse_real(row[3]);
    if (!row[4].empty()) r.elapsed_ms = csv::parse_real(row[4]);
    log.records.push_back(r);
  }
  return log;
}

}  // namespace ofad
