// SPDX-License-Identifier: Apache-2.0
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <map>
#include <numeric>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include "ofad/checkpoint.hpp"
#include "ofad/commands.hpp"
#include "ofad/csv.hpp"
#include "ofad/eval.hpp"
#include "ofad/importance.hpp"
#include "oracles.hpp"

using namespace ofad;

namespace {

struct Outcome {
  bool pass = true;
  std::string detail;
};

std::string fmt(const char* f, double a) {
  char buf[128];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}

std::string fmt(const char* f, double a, double b) {
  char buf[160];
  std::snprintf(buf, sizeof buf, f, a, b);
  return buf;
}

std::string fmt(const char* f, double a, double b, double c) {
  char buf[200];
  std::snprintf(buf, sizeof buf, f, a, b, c);
  return buf;
}

bool run_criterion(int id, const char* name, double budget_s, const std::function<Outcome()>& body) {
  const auto start = std::chrono::steady_clock::now();
  Outcome o;
  try {
    o = body();
  } catch (const std::exception& e) {
    o = Outcome{false, std::string("exception: ") + e.what()};
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  if (secs > budget_s) {
    o.pass = false;
    o.detail += fmt("; over the %.0f s budget", budget_s);
  }
  std::printf("%s [%d] %s: %s (%.2f s)\n", o.pass ? "PASS" : "FAIL", id, name, o.detail.c_str(), secs);
  std::fflush(stdout);
  return o.pass;
}

fs::path scratch(const std::string& name) {
  const auto dir = fs::temp_directory_path() / ("ofad_acceptance_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

ChannelMask random_mask(const NetworkSpec& spec, Rng& rng) {
  auto m = ChannelMask::full(spec);
  for (auto& layer : m.kept) {
    std::vector<int> keep;
    for (int c : layer) {
      if (rng.uniform() < 0.5) keep.push_back(c);
    }
    if (keep.empty()) keep.push_back(layer[rng.index(layer.size())]);
    layer = keep;
  }
  return m;
}

DsmBatch random_batch(int n, Rng& rng) {
  DsmBatch b;
  b.dim = 2;
  for (int i = 0; i < n; ++i) {
    b.x0.push_back(rng.uniform(-2.0, 2.0));
    b.x0.push_back(rng.uniform(-2.0, 2.0));
    b.eps.push_back(rng.normal());
    b.eps.push_back(rng.normal());
    b.sigma.push_back(std::exp(rng.uniform(std::log(0.002), std::log(80.0))));
  }
  return b;
}

Outcome gradient_oracle() {
  using Q = oracle::m::quad;
  Rng rng(7001);
  double worst = 0.0;
  std::size_t coords = 0;
  std::size_t kinked = 0;
  const Activation acts[] = {Activation::silu, Activation::tanh, Activation::relu};
  for (int t = 0; t < 20; ++t) {
    NetworkSpec spec;
    spec.time_embed_dim = 4 + 2 * static_cast<int>(rng.index(3));
    spec.activation = acts[t % 3];
    const int blocks = 1 + static_cast<int>(rng.index(3));
    for (int b = 0; b < blocks; ++b) {
      spec.blocks.push_back(BlockSpec{1 + static_cast<int>(rng.index(3)), 2 + static_cast<int>(rng.index(7)), {}});
    }
    if (t == 0) spec.blocks = {BlockSpec{3, 8, {}}, BlockSpec{3, 8, {}}, BlockSpec{3, 8, {}}};
    const auto net = build_network(spec, 9000 + static_cast<std::uint64_t>(t));
    const auto mask = random_mask(spec, rng);
    const auto batch = random_batch(4, rng);
    const auto lg = loss_and_gradients(net, mask, batch);
    std::vector<Q> p(net.weights().begin(), net.weights().end());
    auto f = [&](const std::vector<Q>& q) { return oracle::dsm_loss<Q>(spec, q, mask, batch); };
    auto pattern = [&](std::size_t i, Q shift) {
      std::vector<bool> signs;
      const Q keep = p[i];
      p[i] = keep + shift;
      oracle::dsm_loss<Q>(spec, p, mask, batch, &signs);
      p[i] = keep;
      return signs;
    };
    for (std::size_t i = 0; i < p.size(); ++i) {
      ++coords;
      // Relu is piecewise linear; central differences are only meaningful where no
      // activation input changes sign across [p - h, p + h].
      if (spec.activation == Activation::relu) {
        const auto mid = pattern(i, Q(0));
        if (pattern(i, Q(1e-5)) != mid || pattern(i, Q(-1e-5)) != mid) {
          ++kinked;
          continue;
        }
      }
      const double n = static_cast<double>(oracle::central_difference(f, p, i, Q(1e-5)));
      const double a = lg.grads[i];
      if (a == 0.0 && n == 0.0) continue;
      worst = std::max(worst, std::abs(a - n) / std::max(std::abs(a), std::abs(n)));
    }
  }
  return {worst < 1e-6 && 10 * kinked < coords,
          fmt("worst relative error %.3g over %.0f coordinates (%.0f relu coordinates straddle a kink)", worst,
              static_cast<double>(coords - kinked), static_cast<double>(kinked))};
}

Outcome allocation_oracle() {
  Outcome o;
  const bool ex1 = allocate_channels(std::vector<double>{0.5, 0.3, 0.2}, 0.5, 8, 0.25) == std::vector<int>{6, 4, 3};
  const bool ex2 = allocate_channels(std::vector<double>{1.0, 1.0, 1.0}, 0.5, 8, 0.25) == std::vector<int>{4, 4, 4};
  const bool ex3 = allocate_channels(std::vector<double>{0.9, 0.05, 0.05}, 0.75, 8, 0.25) == std::vector<int>{8, 2, 2};
  Rng rng(7002);
  int mismatches = 0;
  for (int t = 0; t < 1000; ++t) {
    const int K = 1 + static_cast<int>(rng.index(6));
    const int w = 2 + static_cast<int>(rng.index(63));
    std::vector<long long> imp(static_cast<std::size_t>(K));
    long long sum = 0;
    for (auto& v : imp) {
      v = static_cast<long long>(rng.index(1001));
      sum += v;
    }
    if (sum == 0) {
      imp[0] = 1;
      sum = 1;
    }
    const long long k = 1 + static_cast<long long>(rng.index(100));
    const long long j = 1 + static_cast<long long>(rng.index(static_cast<std::uint64_t>(k)));
    std::vector<int> want;
    for (auto v : imp) {
      const long long prop = oracle::ceil_div(v * K * k * w, sum * 100);
      const long long lo = oracle::ceil_div(j * w, 100);
      want.push_back(static_cast<int>(std::max(std::min(prop, static_cast<long long>(w)), lo)));
    }
    std::vector<double> imp_d(imp.begin(), imp.end());
    if (allocate_channels(imp_d, static_cast<double>(k) / 100.0, w, static_cast<double>(j) / 100.0) != want) ++mismatches;
  }
  o.pass = ex1 && ex2 && ex3 && mismatches == 0;
  o.detail = fmt("worked examples %.0f/3, %.0f of 1000 random tuples mismatch",
                 static_cast<double>(ex1 + ex2 + ex3), static_cast<double>(mismatches));
  return o;
}

Outcome nesting() {
  const auto spec = default_spec();
  const auto sched = RetentionSchedule::make({0.25, 0.5, 0.75, 1.0});
  bool nested = true;
  double worst_gap = 0.0;
  for (int t = 0; t < 50; ++t) {
    const auto table = random_importance(spec, 7100 + static_cast<std::uint64_t>(t));
    const auto plans = construct_plans(spec, table, sched, false);
    if (plans.size() != 4) return {false, "expected 4 plans"};
    for (std::size_t i = 0; i < plans.size(); ++i) {
      worst_gap = std::max(worst_gap, std::abs(plans[i].practical_p - plans[i].target_p));
      for (std::size_t j = i + 1; j < plans.size(); ++j) nested = nested && plans[i].mask.subset_of(plans[j].mask);
    }
  }
  return {nested && worst_gap <= 0.08,
          std::string(nested ? "all pairs nested" : "nesting violated") + fmt(", worst |P-hat - P| %.4f", worst_gap)};
}

Outcome reweighting() {
  const auto w = linear_weights(4, 3.0);
  const double expect[] = {0.375, 7.0 / 24.0, 5.0 / 24.0, 0.125};
  double werr = 0.0;
  for (int i = 0; i < 4; ++i) werr = std::max(werr, std::abs(w[static_cast<std::size_t>(i)] - expect[i]));
  const double sum_err = std::abs(std::accumulate(w.begin(), w.end(), 0.0) - 1.0);
  const double ratio_err = std::abs(w.front() / w.back() - 3.0);
  const bool sandwich = sandwich_weights(4) == std::vector<double>(4, 0.25) &&
                        sandwich_weights(6) == std::vector<double>{0.25, 0.125, 0.125, 0.125, 0.125, 0.25};
  double freq_err = 0.0;
  for (const auto& weights : {w, sandwich_weights(6), uniform_weights(4)}) {
    Rng rng(7004);
    std::vector<double> freq(weights.size(), 0.0);
    for (int i = 0; i < 100000; ++i) freq[static_cast<std::size_t>(draw_plan_index(weights, rng))] += 1.0;
    for (std::size_t i = 0; i < weights.size(); ++i) freq_err = std::max(freq_err, std::abs(freq[i] / 1e5 - weights[i]));
  }
  const bool pass = werr < 1e-12 && sum_err < 1e-12 && ratio_err < 1e-9 && sandwich && freq_err < 0.01;
  return {pass, fmt("linear max error %.2g, sum error %.2g", werr, sum_err) + fmt(", ratio error %.2g", ratio_err) +
                    (sandwich ? ", sandwich exact" : ", sandwich wrong") +
                    fmt(", worst selection frequency gap %.4f", freq_err)};
}

double mean_endpoint_error(int n_steps) {
  const DiffusionConfig cfg;
  const GaussianMixture g{{{0.0, 0.0}}, 1.0};
  ScoreFn fn = [&](std::span<const double> x, double sigma, std::span<double> out) {
    const auto sc = analytic_gmm_score(g, x, sigma);
    std::copy(sc.begin(), sc.end(), out.begin());
  };
  const auto schedule = sigma_schedule(n_steps, cfg);
  // Probability-flow solution for N(0, I) data: x scales with sqrt(1 + sigma^2).
  const double scale = 1.0 / std::sqrt(1.0 + cfg.sigma_max * cfg.sigma_max);
  Rng rng(7005);
  double total = 0.0;
  const int n = 512;
  for (int i = 0; i < n; ++i) {
    std::vector<double> x{cfg.sigma_max * rng.normal(), cfg.sigma_max * rng.normal()};
    const auto start = x;
    heun_integrate(fn, schedule, x);
    total += std::hypot(x[0] - start[0] * scale, x[1] - start[1] * scale);
  }
  return total / n;
}

Outcome sampler_order() {
  const double e20 = mean_endpoint_error(20);
  const double e40 = mean_endpoint_error(40);
  const double ratio = e20 / e40;
  return {ratio >= 2.5 && ratio <= 6.0, fmt("error 20 steps %.3g, 40 steps %.3g, ratio %.3f", e20, e40, ratio)};
}

Outcome compaction() {
  const auto spec = default_spec();
  const auto net = build_network(spec, 7006);
  Rng rng(7007);
  double worst = 0.0;
  for (int p = 0; p < 20; ++p) {
    const auto mask = random_mask(spec, rng);
    const auto dense = extract_dense(net, mask);
    const auto dense_full = ChannelMask::full(dense.spec());
    for (int i = 0; i < 100; ++i) {
      const std::vector<double> x{rng.uniform(-3.0, 3.0), rng.uniform(-3.0, 3.0)};
      const double sigma = std::exp(rng.uniform(std::log(0.002), std::log(80.0)));
      const auto a = forward(net, mask, x, sigma);
      const auto b = forward(dense, dense_full, x, sigma);
      for (std::size_t d = 0; d < a.size(); ++d) worst = std::max(worst, std::abs(a[d] - b[d]));
    }
  }
  return {worst < 1e-12, fmt("max |masked - dense| = %.3g over 2000 evaluations", worst)};
}

ExperimentConfig base_config(std::uint64_t seed, const fs::path& out) {
  ExperimentConfig cfg;
  cfg.seed = seed;
  cfg.out = out.string();
  cfg.validate();
  return cfg;
}

Outcome taylor_consistency() {
  auto cfg = base_config(7008, scratch("sensitivity"));
  const auto mix = cfg.mixture.build();
  auto net = build_network(cfg.network, cfg.stream_seed("init"));
  auto opt = OptimizerState::for_network(net);
  pretrain(net, opt, cfg.run_config(cfg.pretrain, "pretrain"), mix);
  net.promote_ema();

  Rng rng(cfg.stream_seed("importance"));
  TaylorOptions topts;
  topts.n_pairs = cfg.importance.n_pairs;
  const auto table = taylor_importance(net, mix, topts, rng);

  Rng eval_rng(7009);
  const auto batch = draw_dsm_batch(mix, 4096, SigmaInterval{}, eval_rng);
  const auto full = ChannelMask::full(cfg.network);
  const double base = loss_only(cfg.network, net.layout(), net.weights(), full, batch);
  std::vector<double> scores, ablation;
  for (std::size_t l = 0; l < table.channel.size(); ++l) {
    for (std::size_t c = 0; c < table.channel[l].size(); ++c) {
      auto w = net.weights();
      for (auto i : channel_param_indices(net.layout(), static_cast<int>(l), static_cast<int>(c))) w[i] = 0.0;
      ablation.push_back(std::abs(loss_only(cfg.network, net.layout(), w, full, batch) - base));
      scores.push_back(table.channel[l][c]);
    }
  }
  const double rho_channel = spearman(scores, ablation);

  const auto ecfg = cfg.eval_config();
  std::vector<double> sensitivity(table.layer.size(), 0.0);
  for (std::uint64_t s = 0; s < 3; ++s) {
    const auto sens = layer_sensitivity(net, table, mix, ecfg, cfg.schedule.floor, derive_seed(cfg.seed, "eval", s));
    for (std::size_t l = 0; l < sens.size(); ++l) sensitivity[l] += sens[l].sensitivity / 3.0;
  }
  const double rho_layer = spearman(table.layer, sensitivity);
  std::string layers;
  for (std::size_t l = 0; l < sensitivity.size(); ++l) {
    layers += fmt(" (%.3g, %.3g)", table.layer[l], sensitivity[l]);
  }
  return {rho_channel >= 0.3 && rho_layer >= 0.3,
          fmt("spearman(I^C, exact ablation) %.3f, spearman(I^L, floor-clamp sensitivity) %.3f", rho_channel,
              rho_layer) +
              "; layers (I^L, sensitivity):" + layers};
}

std::map<int, double> per_plan(const std::vector<MetricReport>& reports) {
  std::map<int, double> m;
  for (const auto& r : reports) m[r.plan_id] += r.metric;
  return m;
}

Outcome end_to_end() {
  const auto root = scratch("ofa");
  const std::uint64_t seeds[] = {11, 22, 33};
  std::ostringstream log;
  std::map<int, double> lin_sum, uni_sum, pre_sum;
  std::map<int, double> target;
  double untrained = 0.0;
  std::vector<double> lin_avg, uni_avg;
  for (auto seed : seeds) {
    const auto dir = root / std::to_string(seed);
    auto cfg = base_config(seed, dir);
    cmd_pretrain(cfg, log);
    cmd_importance(cfg, dir / "pretrain.ckpt", log);
    cmd_construct(cfg, dir / "importance.csv", log);

    double per_seed[2] = {0.0, 0.0};
    for (int k = 0; k < 2; ++k) {
      auto scfg = cfg;
      scfg.reweight = k == 0 ? ReweightStrategy::linear : ReweightStrategy::uniform;
      scfg.out = (dir / to_string(scfg.reweight)).string();
      TrainOfaArgs targs;
      targs.checkpoint = dir / "pretrain.ckpt";
      targs.plans = {dir / "plans.csv"};
      cmd_train_ofa(scfg, targs, log);
      EvalArgs eargs;
      eargs.checkpoint = fs::path(scfg.out) / "ofa.ckpt";
      eargs.plans = targs.plans;
      cmd_eval(scfg, eargs, log);
      const auto reports = reports_from_csv(fs::path(scfg.out) / "report.csv");
      auto& sums = k == 0 ? lin_sum : uni_sum;
      for (const auto& r : reports) {
        sums[r.plan_id] += r.metric / 3.0;
        target[r.plan_id] = r.target_p;
        per_seed[k] += r.metric / static_cast<double>(reports.size());
      }
    }
    lin_avg.push_back(per_seed[0]);
    uni_avg.push_back(per_seed[1]);

    // Before OFA training: the pretrained network under each plan.
    EvalArgs pre;
    pre.checkpoint = dir / "pretrain.ckpt";
    pre.plans = {dir / "plans.csv"};
    pre.report_name = "pre_ofa.csv";
    cmd_eval(cfg, pre, log);
    for (const auto& [id, v] : per_plan(reports_from_csv(dir / "pre_ofa.csv"))) pre_sum[id] += v / 3.0;

    const auto init = build_network(cfg.network, cfg.stream_seed("init"));
    const auto full = make_plan(cfg.network, ChannelMask::full(cfg.network), 1.0, 0);
    untrained +=
        evaluate_plan(init, full, cfg.mixture.build(), cfg.eval_config(), derive_seed(seed, "eval", 0)).metric / 3.0;
  }

  int full_id = -1;
  for (const auto& [id, p] : target) {
    if (p == 1.0) full_id = id;
  }
  if (full_id < 0) return {false, "no full plan"};
  const double full = lin_sum[full_id];
  bool a = true;
  std::string detail = fmt("untrained %.4g; linear full %.4g;", untrained, full);
  for (const auto& [id, v] : lin_sum) {
    a = a && v <= 5.0 * full && v <= 0.2 * untrained;
    detail += fmt(" P=%.2f linear %.4g", target[id], v) + fmt(" uniform %.4g pre-OFA %.4g;", uni_sum[id], pre_sum[id]);
  }
  int uniform_wins = 0;
  for (std::size_t s = 0; s < lin_avg.size(); ++s) {
    if (lin_avg[s] > 1.1 * uni_avg[s]) ++uniform_wins;
    detail += fmt(" seed %.0f avg linear %.4g uniform %.4g;", static_cast<double>(s), lin_avg[s], uni_avg[s]);
  }
  const bool b = uniform_wins < 3;
  detail += std::string(" (a) ") + (a ? "holds" : "violated") + ", (b) " + (b ? "holds" : "violated");
  return {a && b, detail};
}

Outcome weight_sharing() {
  const auto spec = default_spec();
  auto net = build_network(spec, 7010);
  auto opt = OptimizerState::for_network(net);
  const auto mix = make_ring_mixture(8, 2.0, 0.1);
  const std::vector<PlanFamily> fams{
      PlanFamily{SigmaInterval{}, construct_plans(spec, random_importance(spec, 7011), default_schedule())}};
  const auto w = linear_weights(4, 3.0);
  std::size_t violations = 0;
  std::size_t checked = 0;
  for (std::uint64_t step = 1; step <= 1000; ++step) {
    Rng batch_rng(derive_seed(7012, "batch", step));
    Rng plan_rng(derive_seed(7012, "plan", step));
    const auto batch = draw_dsm_batch(mix, 128, SigmaInterval{}, batch_rng);
    const auto before = net.weights();
    const auto rec = ofa_train_step(net, opt, fams, w, batch, plan_rng, 0.999);
    const auto pm = param_mask(net.layout(), fams[0].plans[static_cast<std::size_t>(rec.plan_id)].mask);
    for (std::size_t i = 0; i < pm.size(); ++i) {
      if (pm[i]) continue;
      ++checked;
      if (net.weights()[i] != before[i]) ++violations;
    }
  }
  return {violations == 0 && checked > 0,
          fmt("%.0f changed of %.0f out-of-plan parameter checks", static_cast<double>(violations),
              static_cast<double>(checked))};
}

Outcome persistence() {
  const auto dir = scratch("persistence");
  std::vector<std::string> failed;
  auto expect = [&](bool ok, const char* what) {
    if (!ok) failed.push_back(what);
  };

  ExperimentConfig cfg = base_config(7013, dir / "a");
  cfg.pretrain.steps = 300;
  cfg.ofa.steps = 200;
  cfg.ofa.checkpoint_every = 100;
  cfg.eval.n_samples = 256;
  std::ostringstream log;
  for (const char* run : {"a", "b"}) {
    cfg.out = (dir / run).string();
    cmd_pretrain(cfg, log);
    cmd_importance(cfg, dir / run / "pretrain.ckpt", log);
    cmd_construct(cfg, dir / run / "importance.csv", log);
    TrainOfaArgs targs;
    targs.checkpoint = dir / run / "pretrain.ckpt";
    targs.plans = {dir / run / "plans.csv"};
    cmd_train_ofa(cfg, targs, log);
    EvalArgs eargs;
    eargs.checkpoint = dir / run / "ofa.ckpt";
    eargs.plans = targs.plans;
    cmd_eval(cfg, eargs, log);
    cmd_sample(cfg, dir / run / "ofa.ckpt", std::nullopt, 0, 64, log);
  }
  for (const char* f : {"pretrain.ckpt", "pretrain_log.csv", "importance.csv", "plans.csv", "ofa.ckpt", "ofa_log.csv",
                        "ofa_step100.ckpt", "report.csv", "samples.csv"}) {
    expect(csv::read_text(dir / "a" / f) == csv::read_text(dir / "b" / f), f);
  }

  const auto a = dir / "a";
  const auto net = cfg.network;
  for (const char* ck : {"pretrain.ckpt", "ofa.ckpt"}) {
    const auto text = csv::read_text(a / ck);
    const auto loaded = load_checkpoint(a / ck);
    const auto bytes = serialize_checkpoint(loaded.net, loaded.optimizer ? &*loaded.optimizer : nullptr);
    expect(std::string(bytes.begin(), bytes.end()) == text, "checkpoint round trip");
  }
  expect(importance_to_csv(net, importance_from_csv(net, a / "importance.csv")) == csv::read_text(a / "importance.csv"),
         "importance round trip");
  expect(plans_to_csv(net, plans_from_csv(net, a / "plans.csv")) == csv::read_text(a / "plans.csv"),
         "plans round trip");
  expect(reports_to_csv(reports_from_csv(a / "report.csv")) == csv::read_text(a / "report.csv"), "report round trip");
  expect(samples_to_csv(samples_from_csv((a / "samples.csv").string())) == csv::read_text(a / "samples.csv"),
         "samples round trip");
  for (const char* lg : {"pretrain_log.csv", "ofa_log.csv"}) {
    expect(training_log_to_csv(training_log_from_csv(a / lg)) == csv::read_text(a / lg), "training log round trip");
  }

  std::string detail = failed.empty() ? "9 artifacts identical across reruns; all round trips exact" : "failed:";
  for (const auto& f : failed) detail += " " + f;
  return {failed.empty(), detail};
}

}  // namespace

int main(int argc, char** argv) {
  std::vector<int> only;
  for (int i = 1; i < argc; ++i) only.push_back(std::atoi(argv[i]));
  const std::vector<std::tuple<int, const char*, double, std::function<Outcome()>>> criteria = {
      {1, "gradient oracle", 60, gradient_oracle},
      {2, "allocation oracle", 1, allocation_oracle},
      {3, "nesting and practical retention", 5, nesting},
      {4, "reweighting contracts", 5, reweighting},
      {5, "sampler order", 30, sampler_order},
      {6, "mask/compaction equivalence", 10, compaction},
      {7, "taylor-sensitivity consistency", 300, taylor_consistency},
      {8, "end-to-end OFA experiment", 1800, end_to_end},
      {9, "weight-sharing integrity", 60, weight_sharing},
      {10, "persistence", 60, persistence},
  };
  int failures = 0;
  int ran = 0;
  for (const auto& [id, name, budget, fn] : criteria) {
    if (!only.empty() && std::find(only.begin(), only.end(), id) == only.end()) continue;
    ++ran;
    failures += !run_criterion(id, name, budget, fn);
  }
  std::printf("%d of %d criteria failed\n", failures, ran);
  return failures == 0 ? 0 : 1;
}
