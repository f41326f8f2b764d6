// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ofad/importance.hpp"
#include "ofad/netcore.hpp"

namespace ofad {

/// Target parameter-retention rates P_1 < ... < P_N and the per-layer floor P_0.
struct RetentionSchedule {
  std::vector<double> rates;
  double floor = 0.0;

  /// Validates; the floor defaults to the smallest rate.
  static RetentionSchedule make(std::vector<double> rates, std::optional<double> floor = std::nullopt);
  void validate() const;
  int size() const { return static_cast<int>(rates.size()); }
};

/// {0.25, 0.5, 0.75, 1.0}
RetentionSchedule default_schedule();

/// Kept channel counts for the K layers of one block:
///   C_l = max(min(ceil(I_l / sum(I) * K * rate * width), width), ceil(floor * width)).
/// Throws DomainError when the importances sum to zero.
std::vector<int> allocate_channels(std::span<const double> layer_importance, double rate, int width, double floor);

/// Indices of the `keep` highest scores, ties to the smaller index, returned ascending.
std::vector<int> top_channels(std::span<const double> scores, int keep);

/// Per-layer top-C_l selection; `counts` is indexed by global layer.
ChannelMask select_channels(const ImportanceTable& table, std::span<const int> counts);

struct SubnetworkPlan {
  int id = 0;
  double target_p = 1.0;
  std::vector<int> counts;
  ChannelMask mask;
  double practical_p = 1.0;
  long long kept_params = 0;
  long long total_params = 0;
  long long macs = 0;
};

/// Fills counts, P-hat, parameter counts and MACs from a mask.
SubnetworkPlan make_plan(const NetworkSpec& spec, ChannelMask mask, double target_p, int id);

/// One nested plan per schedule rate. Every block uses the same rate and
/// channels are allocated across its layers by layer importance. With
/// `dedup`, plans whose masks equal an earlier plan's are dropped; ids are
/// assigned after deduplication.
std::vector<SubnetworkPlan> construct_plans(const NetworkSpec& spec, const ImportanceTable& table,
                                            const RetentionSchedule& schedule, bool dedup = true);

/// True when plan i's mask is layerwise contained in plan j's for all i < j.
bool plans_nested(const std::vector<SubnetworkPlan>& plans);

/// Standalone network holding only the kept slabs of `mask` (live and EMA weights).
ScoreNetwork extract_dense(const ScoreNetwork& net, const ChannelMask& mask);

/// Every layer draws its rate independently from `rate_choices` and keeps
/// ceil(rate * |l|) channels by importance.
SubnetworkPlan random_architecture_plan(const NetworkSpec& spec, const ImportanceTable& table,
                                        std::span<const double> rate_choices, std::uint64_t seed);

inline constexpr std::string_view kPlanCsvHeader =
    "plan_id,target_p,practical_p,macs,block,layer,kept_channels,channel_indices";

std::string plans_to_csv(const NetworkSpec& spec, const std::vector<SubnetworkPlan>& plans);
std::vector<SubnetworkPlan> plans_from_csv(const NetworkSpec& spec, const std::filesystem::path& path);

}  // namespace ofad
