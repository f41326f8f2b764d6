// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "ofad/diffusion.hpp"
#include "ofad/netcore.hpp"
#include "ofad/rng.hpp"

namespace ofad {

enum class ImportanceMethod { taylor, magnitude, random };

std::string_view to_string(ImportanceMethod m);
ImportanceMethod parse_importance_method(std::string_view name);

/// Where |.| is applied in the Taylor estimate: on every sampled pair before
/// averaging, or once on the averaged first-order term.
enum class AbsMode { per_pair, after_mean };

inline constexpr int kDefaultImportancePairs = 1024;

/// Sub-intervals of [0.002, 80] used by the time-split variant.
inline constexpr std::array<SigmaInterval, 3> kTimeSplitIntervals = {
    SigmaInterval{0.002, 0.1}, SigmaInterval{0.1, 1.0}, SigmaInterval{1.0, 80.0}};

struct ImportanceTable {
  ImportanceMethod method = ImportanceMethod::taylor;
  /// Channel scores per global layer.
  std::vector<std::vector<double>> channel;
  /// Per-layer aggregates, the sum of that layer's channel scores.
  std::vector<double> layer;
  SigmaInterval interval;
  int n_pairs = 0;
  long long step = 0;

  /// Recomputes `layer` from `channel`.
  void aggregate();
  /// Throws ValidationError on shape mismatch or negative / non-finite scores.
  void validate(const NetworkSpec& spec) const;
};

/// Flat parameter indices eliminated when `channel` of `layer` is removed:
/// its in.weight row, its in.bias entry and its out.weight column.
std::vector<std::size_t> channel_param_indices(const ParamLayout& layout, int layer, int channel);

struct TaylorOptions {
  int n_pairs = kDefaultImportancePairs;
  SigmaInterval interval{};
  AbsMode abs_mode = AbsMode::per_pair;
};

/// First-order Taylor estimate of |L - L(c_i = 0)|, averaged over sampled
/// (x0, sigma, eps) triples; uses the live weights.
ImportanceTable taylor_importance(const ScoreNetwork& net, const GaussianMixture& mix, const TaylorOptions& opts,
                                  Rng& rng);

/// L1 norm of each channel's eliminated weights.
ImportanceTable magnitude_importance(const ScoreNetwork& net);

/// i.i.d. uniform scores in (0, 1).
ImportanceTable random_importance(const NetworkSpec& spec, std::uint64_t seed);

/// One Taylor table per sub-interval of kTimeSplitIntervals.
std::array<ImportanceTable, 3> timesplit_importance(const ScoreNetwork& net, const GaussianMixture& mix, int n_pairs,
                                                    Rng& rng, AbsMode abs_mode = AbsMode::per_pair);

/// Recomputes a Taylor table on the current weights over the same interval.
/// The new table's step is max(table.step + 1, training_step).
ImportanceTable refresh_importance(const ScoreNetwork& net, const ImportanceTable& table, const GaussianMixture& mix,
                                   int n_pairs, Rng& rng, long long training_step = 0);

inline constexpr std::string_view kImportanceCsvHeader = "block,layer,channel,score,method,sigma_lo,sigma_hi,n_pairs,step";

/// One or more tables in one CSV; rows grouped per table in the given order.
std::string importance_to_csv(const NetworkSpec& spec, const std::vector<ImportanceTable>& tables);
/// Tables in file order, split on changes of (method, sigma interval, n_pairs, step).
std::vector<ImportanceTable> importance_from_csv(const NetworkSpec& spec, const std::filesystem::path& path);

}  // namespace ofad
