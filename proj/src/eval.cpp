// SPDX-License-Identifier: Apache-2.0
#include "ofad/eval.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <sstream>

#include "ofad/csv.hpp"
#include "ofad/errors.hpp"

namespace ofad {

namespace {

// Gram-Schmidt on Gaussian draws: a uniformly random orthonormal basis.
std::vector<std::vector<double>> random_orthonormal_frame(std::size_t dim, Rng& rng) {
  std::vector<std::vector<double>> frame;
  while (frame.size() < dim) {
    std::vector<double> v(dim);
    for (auto& x : v) x = rng.normal();
    for (const auto& u : frame) {
      double dot = 0.0;
      for (std::size_t k = 0; k < dim; ++k) dot += u[k] * v[k];
      for (std::size_t k = 0; k < dim; ++k) v[k] -= dot * u[k];
    }
    double norm = 0.0;
    for (double x : v) norm += x * x;
    norm = std::sqrt(norm);
    if (!(norm > 1e-8)) continue;
    for (auto& x : v) x /= norm;
    frame.push_back(std::move(v));
  }
  return frame;
}

}  // namespace

double sliced_w2(const SampleSet& a, const SampleSet& b, int n_projections, std::uint64_t seed) {
  if (a.size() < 2 || b.size() < 2) throw DomainError("sliced_w2: sample sets need at least 2 points");
  if (a.size() != b.size()) throw DomainError("sliced_w2: sample sets must have equal size");
  if (a.dim != b.dim) throw DomainError("sliced_w2: dimension mismatch");
  if (n_projections < 1) throw DomainError("sliced_w2: n_projections must be >= 1");

  Rng rng(seed);
  const std::size_t n = a.size();
  const auto dim = static_cast<std::size_t>(a.dim);
  std::vector<std::vector<double>> frame;
  std::vector<double> pa(n), pb(n);
  double total = 0.0;
  for (int p = 0; p < n_projections; ++p) {
    const auto slot = static_cast<std::size_t>(p) % dim;
    if (slot == 0) frame = random_orthonormal_frame(dim, rng);
    const auto& dir = frame[slot];
    for (std::size_t i = 0; i < n; ++i) {
      double sa = 0.0, sb = 0.0;
      for (std::size_t k = 0; k < dim; ++k) {
        sa += dir[k] * a.values[i * dim + k];
        sb += dir[k] * b.values[i * dim + k];
      }
      pa[i] = sa;
      pb[i] = sb;
    }
    std::sort(pa.begin(), pa.end());
    std::sort(pb.begin(), pb.end());
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double d = pa[i] - pb[i];
      acc += d * d;
    }
    total += acc / static_cast<double>(n);
  }
  return std::sqrt(static_cast<double>(dim) * total / static_cast<double>(n_projections));
}

namespace {

ScoreFn masked_score_fn(const ScoreNetwork& net, const ChannelMask& mask) {
  return [&net, &mask](std::span<const double> x, double sigma, std::span<double> out) {
    forward_into(net.spec(), net.layout(), net.ema_weights(), mask, x, sigma, out);
  };
}

}  // namespace

SampleSet sample_masked(const ScoreNetwork& net, const ChannelMask& mask, const EvalConfig& cfg, std::uint64_t seed) {
  mask.validate(net.spec());
  return heun_sample(masked_score_fn(net, mask), cfg.sampler_steps, cfg.n_samples, net.spec().input_dim,
                     cfg.diffusion, seed, cfg.threads);
}

SampleSet sample_families(const ScoreNetwork& net, const std::vector<PlanFamily>& families, std::size_t plan_index,
                          const EvalConfig& cfg, std::uint64_t seed) {
  for (const auto& f : families) f.plans.at(plan_index).mask.validate(net.spec());
  ScoreFn fn = [&](std::span<const double> x, double sigma, std::span<double> out) {
    const auto& mask = families[family_for_sigma(families, sigma)].plans[plan_index].mask;
    forward_into(net.spec(), net.layout(), net.ema_weights(), mask, x, sigma, out);
  };
  return heun_sample(fn, cfg.sampler_steps, cfg.n_samples, net.spec().input_dim, cfg.diffusion, seed, cfg.threads);
}

namespace {

MetricReport finish_report(const SubnetworkPlan& plan, const SampleSet& generated, const GaussianMixture& mix,
                           const EvalConfig& cfg, std::uint64_t seed) {
  Rng ref_rng(derive_seed(seed, "reference"));
  const auto reference = mix.sample(ref_rng, generated.size());
  MetricReport r;
  r.plan_id = plan.id;
  r.target_p = plan.target_p;
  r.practical_p = plan.practical_p;
  r.macs = plan.macs;
  r.params_kept = plan.kept_params;
  r.metric = sliced_w2(generated, reference, cfg.n_projections, derive_seed(seed, "projections"));
  r.n_generated = static_cast<int>(generated.size());
  r.n_reference = static_cast<int>(reference.size());
  r.seed = seed;
  return r;
}

}  // namespace

MetricReport evaluate_plan(const ScoreNetwork& net, const SubnetworkPlan& plan, const GaussianMixture& mix,
                           const EvalConfig& cfg, std::uint64_t seed) {
  const auto generated = sample_masked(net, plan.mask, cfg, derive_seed(seed, "sampler"));
  return finish_report(plan, generated, mix, cfg, seed);
}

MetricReport evaluate_family_plan(const ScoreNetwork& net, const std::vector<PlanFamily>& families,
                                  std::size_t plan_index, const GaussianMixture& mix, const EvalConfig& cfg,
                                  std::uint64_t seed) {
  const auto generated = sample_families(net, families, plan_index, cfg, derive_seed(seed, "sampler"));
  return finish_report(families.front().plans.at(plan_index), generated, mix, cfg, seed);
}

std::vector<double> convergence_ratio(std::span<const double> series) {
  if (series.empty()) throw DomainError("convergence_ratio: empty series");
  for (double v : series) {
    if (!(v > 0.0)) throw DomainError("convergence_ratio: entries must be > 0");
  }
  const double mn = *std::min_element(series.begin(), series.end());
  std::vector<double> out;
  out.reserve(series.size());
  for (double v : series) out.push_back(mn / v);
  return out;
}

std::vector<LayerSensitivity> layer_sensitivity(const ScoreNetwork& net, const ImportanceTable& table,
                                                const GaussianMixture& mix, const EvalConfig& cfg, double floor,
                                                std::uint64_t seed) {
  if (!(floor > 0.0 && floor <= 1.0)) throw DomainError("layer_sensitivity: floor must lie in (0, 1]");
  const auto& spec = net.spec();
  table.validate(spec);
  const auto full = make_plan(spec, ChannelMask::full(spec), 1.0, 0);
  const double base = evaluate_plan(net, full, mix, cfg, seed).metric;
  const double max_importance = *std::max_element(table.layer.begin(), table.layer.end());

  std::vector<LayerSensitivity> out;
  const auto& layers = net.layout().layers();
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const auto& info = layers[l].info;
    const int keep = std::clamp(static_cast<int>(std::ceil(floor * info.channels - 1e-9)), 1, info.channels);
    LayerSensitivity s;
    s.layer = static_cast<int>(l);
    s.block = info.block;
    s.index = info.index;
    s.kept_channels = keep;
    s.normalized_importance = max_importance > 0.0 ? table.layer[l] / max_importance : 0.0;
    if (keep == info.channels) {
      s.sensitivity = 0.0;
    } else {
      auto mask = ChannelMask::full(spec);
      mask.kept[l] = top_channels(table.channel[l], keep);
      const auto plan = make_plan(spec, std::move(mask), 1.0, 0);
      s.sensitivity = evaluate_plan(net, plan, mix, cfg, seed).metric - base;
    }
    out.push_back(s);
  }
  return out;
}

LatencyStats latency_bench(const ScoreNetwork& dense, int reps, int warmup) {
  if (reps < 3) throw DomainError("latency_bench: reps must be >= 3");
  if (warmup < 0) throw DomainError("latency_bench: warmup must be >= 0");
  const auto mask = ChannelMask::full(dense.spec());
  std::vector<double> x(static_cast<std::size_t>(dense.spec().input_dim), 0.5);
  std::vector<double> out(x.size());
  volatile double sink = 0.0;
  for (int i = 0; i < warmup; ++i) {
    forward_into(dense.spec(), dense.layout(), dense.ema_weights(), mask, x, 1.0, out);
    sink = sink + out[0];
  }
  std::vector<double> times;
  times.reserve(static_cast<std::size_t>(reps));
  for (int i = 0; i < reps; ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    forward_into(dense.spec(), dense.layout(), dense.ema_weights(), mask, x, 1.0, out);
    const auto t1 = std::chrono::steady_clock::now();
    sink = sink + out[0];
    times.push_back(std::chrono::duration<double, std::micro>(t1 - t0).count());
  }
  std::sort(times.begin(), times.end());
  auto quantile = [&](double q) {
    const double pos = q * static_cast<double>(times.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const auto hi = std::min(lo + 1, times.size() - 1);
    return times[lo] + (pos - static_cast<double>(lo)) * (times[hi] - times[lo]);
  };
  return LatencyStats{quantile(0.5), quantile(0.1), quantile(0.9)};
}

namespace {

std::vector<double> ranks(std::span<const double> v) {
  std::vector<std::size_t> order(v.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> r(v.size());
  std::size_t i = 0;
  while (i < order.size()) {
    std::size_t j = i;
    while (j + 1 < order.size() && v[order[j + 1]] == v[order[i]]) ++j;
    const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) r[order[k]] = avg;
    i = j + 1;
  }
  return r;
}

}  // namespace

double spearman(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size() || a.size() < 2) throw DomainError("spearman: need two equal-length series of size >= 2");
  const auto ra = ranks(a);
  const auto rb = ranks(b);
  const double n = static_cast<double>(a.size());
  const double ma = std::accumulate(ra.begin(), ra.end(), 0.0) / n;
  const double mb = std::accumulate(rb.begin(), rb.end(), 0.0) / n;
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < ra.size(); ++i) {
    sab += (ra[i] - ma) * (rb[i] - mb);
    saa += (ra[i] - ma) * (ra[i] - ma);
    sbb += (rb[i] - mb) * (rb[i] - mb);
  }
  if (saa == 0.0 || sbb == 0.0) return 0.0;
  return sab / std::sqrt(saa * sbb);
}

std::string reports_to_csv(const std::vector<MetricReport>& reports) {
  std::ostringstream out;
  out << kReportCsvHeader << '\n';
  for (const auto& r : reports) {
    out << r.plan_id << ',' << csv::format_real(r.target_p) << ',' << csv::format_real(r.practical_p) << ','
        << r.params_kept << ',' << r.macs << ',' << csv::format_real(r.metric) << ',' << r.n_generated << ','
        << r.seed << ',';
    if (r.median_latency_us) out << csv::format_real(*r.median_latency_us);
    out << '\n';
  }
  return out.str();
}

std::vector<MetricReport> reports_from_csv(const std::filesystem::path& path) {
  const auto table = csv::read(path, kReportCsvHeader);
  std::vector<MetricReport> out;
  for (const auto& row : table.rows) {
    MetricReport r;
    r.plan_id = static_cast<int>(csv::parse_int(row[0]));
    r.target_p = csv::parse_real(row[1]);
    r.practical_p = csv::parse_real(row[2]);
    r.params_kept = csv::parse_int(row[3]);
    r.macs = csv::parse_int(row[4]);
    r.metric = csv::parse_real(row[5]);
    r.n_generated = static_cast<int>(csv::parse_int(row[6]));
    r.n_reference = r.n_generated;
    r.seed = csv::parse_uint(row[7]);
    if (!row[8].empty()) r.median_latency_us = csv::parse_real(row[8]);
    out.push_back(r);
  }
  return out;
}

}  // namespace ofad
