// SPDX-License-Identifier: Apache-2.0
#include "ofad/diffusion.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>
#include <thread>

#include "ofad/csv.hpp"
#include "ofad/errors.hpp"

namespace ofad {

void DiffusionConfig::validate() const {
  if (!(sigma_min > 0.0 && sigma_min < sigma_max)) throw DomainError("diffusion: need 0 < sigma_min < sigma_max");
  if (!(rho >= 1.0)) throw DomainError("diffusion: rho must be >= 1");
}

void GaussianMixture::validate() const {
  if (means.empty()) throw ValidationError("mixture: needs at least one component");
  for (const auto& m : means) {
    if (m.empty() || m.size() != means.front().size()) throw ValidationError("mixture: inconsistent mean dimensions");
  }
  if (!(std > 0.0)) throw ValidationError("mixture: std must be > 0");
}

SampleSet GaussianMixture::sample(Rng& rng, std::size_t n) const {
  SampleSet out{dim(), {}};
  out.values.resize(n * static_cast<std::size_t>(dim()));
  for (std::size_t i = 0; i < n; ++i) {
    const auto& mu = means[rng.index(means.size())];
    auto r = out.row(i);
    for (std::size_t k = 0; k < mu.size(); ++k) r[k] = mu[k] + std * rng.normal();
  }
  return out;
}

namespace {

// Log of each component's (unnormalized by weight) Gaussian density.
void component_logs(const GaussianMixture& mix, std::span<const double> x, double var, std::vector<double>& logs) {
  const double d = static_cast<double>(x.size());
  const double norm = -0.5 * d * std::log(2.0 * std::numbers::pi * var);
  logs.resize(mix.means.size());
  for (std::size_t k = 0; k < mix.means.size(); ++k) {
    double sq = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double diff = x[i] - mix.means[k][i];
      sq += diff * diff;
    }
    logs[k] = norm - 0.5 * sq / var;
  }
}

}  // namespace

double GaussianMixture::log_density(std::span<const double> x, double sigma) const {
  const double var = std * std + sigma * sigma;
  std::vector<double> logs;
  component_logs(*this, x, var, logs);
  const double mx = *std::max_element(logs.begin(), logs.end());
  double acc = 0.0;
  for (double l : logs) acc += std::exp(l - mx);
  return mx + std::log(acc) - std::log(static_cast<double>(means.size()));
}

GaussianMixture make_ring_mixture(int count, double radius, double std) {
  if (count < 1) throw ValidationError("mixture: ring needs at least one component");
  GaussianMixture mix;
  mix.std = std;
  for (int k = 0; k < count; ++k) {
    const double a = 2.0 * std::numbers::pi * static_cast<double>(k) / static_cast<double>(count);
    mix.means.push_back({radius * std::cos(a), radius * std::sin(a)});
  }
  mix.validate();
  return mix;
}

std::vector<double> sigma_schedule(int n_steps, const DiffusionConfig& cfg) {
  cfg.validate();
  if (n_steps < 1) throw DomainError("sigma_schedule: n_steps must be >= 1");
  std::vector<double> s(static_cast<std::size_t>(n_steps) + 1, 0.0);
  const double a = std::pow(cfg.sigma_max, 1.0 / cfg.rho);
  const double b = std::pow(cfg.sigma_min, 1.0 / cfg.rho);
  s[0] = cfg.sigma_max;
  for (int i = 1; i < n_steps; ++i) {
    const double frac = static_cast<double>(i) / static_cast<double>(n_steps - 1);
    s[static_cast<std::size_t>(i)] = std::pow(a + frac * (b - a), cfg.rho);
  }
  if (n_steps >= 2) s[static_cast<std::size_t>(n_steps) - 1] = cfg.sigma_min;
  return s;
}

std::vector<double> perturb(std::span<const double> x0, double sigma, std::span<const double> eps) {
  if (sigma < 0.0) throw DomainError("perturb: sigma must be >= 0");
  std::vector<double> out(x0.size());
  for (std::size_t i = 0; i < x0.size(); ++i) out[i] = x0[i] + sigma * eps[i];
  return out;
}

std::vector<double> analytic_gmm_score(const GaussianMixture& mix, std::span<const double> x, double sigma) {
  if (sigma < 0.0) throw DomainError("analytic_gmm_score: sigma must be >= 0");
  const double var = mix.std * mix.std + sigma * sigma;
  std::vector<double> logs;
  component_logs(mix, x, var, logs);
  const double mx = *std::max_element(logs.begin(), logs.end());
  double total = 0.0;
  for (auto& l : logs) {
    l = std::exp(l - mx);
    total += l;
  }
  std::vector<double> score(x.size(), 0.0);
  for (std::size_t k = 0; k < mix.means.size(); ++k) {
    const double r = logs[k] / total;
    for (std::size_t i = 0; i < x.size(); ++i) score[i] += r * (mix.means[k][i] - x[i]) / var;
  }
  return score;
}

double sample_training_sigma(Rng& rng, SigmaInterval interval) {
  if (!(interval.lo > 0.0) || interval.hi < interval.lo) throw DomainError("sigma interval is empty");
  if (interval.lo == interval.hi) {
    rng.uniform();  // keep stream consumption independent of the interval width
    return interval.lo;
  }
  const double u = rng.uniform();
  return std::exp(std::log(interval.lo) + u * (std::log(interval.hi) - std::log(interval.lo)));
}

void heun_integrate(const ScoreFn& score, std::span<const double> schedule, std::span<double> x) {
  const std::size_t dim = x.size();
  std::vector<double> s(dim), d(dim), xn(dim), d2(dim);
  for (std::size_t i = 0; i + 1 < schedule.size(); ++i) {
    const double sc = schedule[i];
    const double sn = schedule[i + 1];
    const double h = sn - sc;
    score(x, sc, s);
    for (std::size_t k = 0; k < dim; ++k) {
      d[k] = -sc * s[k];
      xn[k] = x[k] + h * d[k];
    }
    if (sn > 0.0) {
      score(xn, sn, s);
      for (std::size_t k = 0; k < dim; ++k) {
        d2[k] = -sn * s[k];
        x[k] = x[k] + h * 0.5 * (d[k] + d2[k]);
      }
    } else {
      std::copy(xn.begin(), xn.end(), x.begin());
    }
    for (std::size_t k = 0; k < dim; ++k) {
      if (!std::isfinite(x[k])) throw NumericError("non-finite sampler state", static_cast<std::ptrdiff_t>(i));
    }
  }
}

SampleSet heun_sample(const ScoreFn& score, int n_steps, int n_samples, int dim, const DiffusionConfig& cfg,
                      std::uint64_t seed, int threads) {
  const auto schedule = sigma_schedule(n_steps, cfg);
  SampleSet out{dim, std::vector<double>(static_cast<std::size_t>(n_samples) * static_cast<std::size_t>(dim))};
  Rng rng(seed);
  for (auto& v : out.values) v = cfg.sigma_max * rng.normal();

  threads = std::max(1, std::min(threads, n_samples));
  if (threads == 1) {
    for (std::size_t i = 0; i < out.size(); ++i) heun_integrate(score, schedule, out.row(i));
    return out;
  }
  std::vector<std::exception_ptr> errors(static_cast<std::size_t>(threads));
  {
    std::vector<std::jthread> pool;
    const std::size_t n = out.size();
    for (int t = 0; t < threads; ++t) {
      pool.emplace_back([&, t] {
        try {
          for (std::size_t i = static_cast<std::size_t>(t); i < n; i += static_cast<std::size_t>(threads)) {
            heun_integrate(score, schedule, out.row(i));
          }
        } catch (...) {
          errors[static_cast<std::size_t>(t)] = std::current_exception();
        }
      });
    }
  }
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  return out;
}

DsmBatch draw_dsm_batch(const GaussianMixture& mix, int batch_size, SigmaInterval interval, Rng& rng) {
  DsmBatch b;
  b.dim = mix.dim();
  const auto n = static_cast<std::size_t>(batch_size);
  auto x0 = mix.sample(rng, n);
  b.x0 = std::move(x0.values);
  b.sigma.resize(n);
  b.eps.resize(n * static_cast<std::size_t>(b.dim));
  for (std::size_t i = 0; i < n; ++i) b.sigma[i] = sample_training_sigma(rng, interval);
  for (auto& e : b.eps) e = rng.normal();
  return b;
}

std::string samples_to_csv(const SampleSet& samples) {
  std::ostringstream out;
  out << "sample_id";
  for (int k = 0; k < samples.dim; ++k) out << ",dim" << k;
  out << '\n';
  for (std::size_t i = 0; i < samples.size(); ++i) {
    out << i;
    for (double v : samples.row(i)) out << ',' << csv::format_real(v);
    out << '\n';
  }
  return out.str();
}

SampleSet samples_from_csv(const std::string& path) {
  const std::string text = csv::read_text(path);
  const auto first = text.find('\n');
  const auto header = csv::split(std::string_view(text).substr(0, first));
  if (header.size() < 2 || header[0] != "sample_id") throw ValidationError("sample CSV: bad header");
  std::string expected = "sample_id";
  for (std::size_t k = 1; k < header.size(); ++k) expected += ",dim" + std::to_string(k - 1);
  const auto table = csv::read(path, expected);
  SampleSet s{static_cast<int>(header.size() - 1), {}};
  for (const auto& row : table.rows) {
    for (std::size_t k = 1; k < row.size(); ++k) s.values.push_back(csv::parse_real(row[k]));
  }
  return s;
}

}  // namespace ofad
