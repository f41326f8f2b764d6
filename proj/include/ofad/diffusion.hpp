// SPDX-License-Identifier: Apache-2.0
#pragma once

// EDM-style diffusion in the sigma parameterization.
//
// The forward SDE has zero drift and diffusion coefficient g(t) = sqrt(2t), so
// d Var(x_t | x0) / dt = g(t)^2 = 2t and Var(x_t | x0) = t^2: the perturbation
// standard deviation equals t. Writing sigma for it, the probability-flow ODE
// dx = -1/2 g(t)^2 grad log p_t(x) dt becomes
//
//   dx / dsigma = -sigma * grad_x log p_sigma(x),
//
// which is what heun_sample integrates from sigma_max down to 0.

#include <array>
#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "ofad/netcore.hpp"
#include "ofad/rng.hpp"

namespace ofad {

struct DiffusionConfig {
  double sigma_min = 0.002;
  double sigma_max = 80.0;
  double rho = 7.0;

  void validate() const;
};

struct SigmaInterval {
  double lo = 0.002;
  double hi = 80.0;
  bool contains(double s) const { return s >= lo && s <= hi; }
  bool operator==(const SigmaInterval&) const = default;
};

/// Row-major set of points.
struct SampleSet {
  int dim = 0;
  std::vector<double> values;

  std::size_t size() const { return dim == 0 ? 0 : values.size() / static_cast<std::size_t>(dim); }
  std::span<const double> row(std::size_t i) const { return {values.data() + i * dim, static_cast<std::size_t>(dim)}; }
  std::span<double> row(std::size_t i) { return {values.data() + i * dim, static_cast<std::size_t>(dim)}; }
};

/// Equal-weight isotropic Gaussian mixture.
struct GaussianMixture {
  std::vector<std::vector<double>> means;
  double std = 0.1;

  void validate() const;
  int dim() const { return static_cast<int>(means.front().size()); }

  SampleSet sample(Rng& rng, std::size_t n) const;
  /// log p_sigma(x) where p_sigma has component covariance (std^2 + sigma^2) I.
  double log_density(std::span<const double> x, double sigma) const;
};

/// `count` components evenly spaced on a circle of `radius`.
GaussianMixture make_ring_mixture(int count, double radius, double std);

/// Descending noise levels of length n_steps + 1 ending at 0.
std::vector<double> sigma_schedule(int n_steps, const DiffusionConfig& cfg);

/// x0 + sigma * eps.
std::vector<double> perturb(std::span<const double> x0, double sigma, std::span<const double> eps);

/// Exact grad_x log p_sigma(x) for the mixture, log-sum-exp stabilized.
std::vector<double> analytic_gmm_score(const GaussianMixture& mix, std::span<const double> x, double sigma);

/// Log-uniform draw on [interval.lo, interval.hi].
double sample_training_sigma(Rng& rng, SigmaInterval interval);

/// Writes the score estimate at (x, sigma) into the last argument.
using ScoreFn = std::function<void(std::span<const double>, double, std::span<double>)>;

/// Integrates one state in place along a descending schedule ending at 0
/// (Heun steps, Euler on the final step to sigma = 0).
void heun_integrate(const ScoreFn& score, std::span<const double> schedule, std::span<double> x);

/// Draws x ~ N(0, sigma_max^2 I) from `seed` and integrates every sample.
/// Work is sharded over `threads`; results do not depend on the thread count.
SampleSet heun_sample(const ScoreFn& score, int n_steps, int n_samples, int dim, const DiffusionConfig& cfg,
                      std::uint64_t seed, int threads = 1);

/// Draws a DSM batch: x0 from the mixture, sigma log-uniform in `interval`, eps standard normal.
DsmBatch draw_dsm_batch(const GaussianMixture& mix, int batch_size, SigmaInterval interval, Rng& rng);

/// Sample dump CSV: `sample_id,dim0,dim1,...` with 17 significant digits.
std::string samples_to_csv(const SampleSet& samples);
SampleSet samples_from_csv(const std::string& path);

}  // namespace ofad
