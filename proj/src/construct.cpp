// SPDX-License-Identifier: Apache-2.0
#include "ofad/construct.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <sstream>

#include "ofad/csv.hpp"
#include "ofad/errors.hpp"
#include "ofad/rng.hpp"

namespace ofad {

namespace {

// Ceiling that treats values within 1e-9 of an integer as that integer, so
// products such as (1/3) * 3 * 0.5 * 8 land on 4 rather than 5.
int snapped_ceil(double v) {
  const double r = std::round(v);
  if (std::abs(v - r) < 1e-9) return static_cast<int>(r);
  return static_cast<int>(std::ceil(v));
}

}  // namespace

void RetentionSchedule::validate() const {
  if (rates.empty()) throw ValidationError("schedule: needs at least one rate");
  for (std::size_t i = 0; i < rates.size(); ++i) {
    if (!(rates[i] > 0.0 && rates[i] <= 1.0)) throw ValidationError("schedule: rates must lie in (0, 1]");
    if (i > 0 && !(rates[i] > rates[i - 1])) throw ValidationError("schedule: rates must be strictly ascending");
  }
  if (!(floor > 0.0 && floor <= rates.front())) throw ValidationError("schedule: floor must lie in (0, P_1]");
}

RetentionSchedule RetentionSchedule::make(std::vector<double> rates, std::optional<double> floor) {
  RetentionSchedule s;
  s.rates = std::move(rates);
  s.floor = floor.value_or(s.rates.empty() ? 0.0 : s.rates.front());
  s.validate();
  return s;
}

RetentionSchedule default_schedule() { return RetentionSchedule::make({0.25, 0.5, 0.75, 1.0}); }

std::vector<int> allocate_channels(std::span<const double> layer_importance, double rate, int width, double floor) {
  if (layer_importance.empty()) throw DomainError("allocate_channels: no layers");
  if (!(rate > 0.0 && rate <= 1.0)) throw DomainError("allocate_channels: rate must lie in (0, 1]");
  if (!(floor > 0.0 && floor <= rate)) throw DomainError("allocate_channels: floor must lie in (0, rate]");
  if (width < 1) throw DomainError("allocate_channels: width must be >= 1");
  double sum = 0.0;
  for (double v : layer_importance) {
    if (!(v >= 0.0) || !std::isfinite(v)) throw DomainError("allocate_channels: importances must be finite and >= 0");
    sum += v;
  }
  if (!(sum > 0.0)) throw DomainError("allocate_channels: degenerate importance (sum is zero)");

  const double k = static_cast<double>(layer_importance.size());
  const int lower = snapped_ceil(floor * width);
  std::vector<int> counts;
  counts.reserve(layer_importance.size());
  for (double v : layer_importance) {
    const int share = snapped_ceil(v * k * rate * width / sum);
    counts.push_back(std::max(std::min(share, width), lower));
  }
  return counts;
}

std::vector<int> top_channels(std::span<const double> scores, int keep) {
  if (keep < 1 || keep > static_cast<int>(scores.size())) throw DomainError("top_channels: keep must lie in [1, width]");
  std::vector<int> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    return scores[static_cast<std::size_t>(a)] > scores[static_cast<std::size_t>(b)];
  });
  order.resize(static_cast<std::size_t>(keep));
  std::sort(order.begin(), order.end());
  return order;
}

ChannelMask select_channels(const ImportanceTable& table, std::span<const int> counts) {
  if (counts.size() != table.channel.size()) throw ValidationError("select_channels: counts do not cover every layer");
  ChannelMask m;
  for (std::size_t l = 0; l < counts.size(); ++l) {
    const int width = static_cast<int>(table.channel[l].size());
    if (counts[l] < 1 || counts[l] > width) throw ValidationError("select_channels: count outside [1, |l|]");
    m.kept.push_back(top_channels(table.channel[l], counts[l]));
  }
  return m;
}

SubnetworkPlan make_plan(const NetworkSpec& spec, ChannelMask mask, double target_p, int id) {
  mask.validate(spec);
  SubnetworkPlan p;
  p.id = id;
  p.target_p = target_p;
  for (const auto& k : mask.kept) p.counts.push_back(static_cast<int>(k.size()));
  const auto pc = count_params(spec, mask);
  p.kept_params = pc.kept;
  p.total_params = pc.total;
  p.practical_p = pc.ratio();
  p.macs = count_macs(spec, mask);
  p.mask = std::move(mask);
  return p;
}

std::vector<SubnetworkPlan> construct_plans(const NetworkSpec& spec, const ImportanceTable& table,
                                            const RetentionSchedule& schedule, bool dedup) {
  schedule.validate();
  table.validate(spec);
  std::vector<SubnetworkPlan> plans;
  for (double rate : schedule.rates) {
    std::vector<int> counts;
    std::size_t l = 0;
    for (const auto& blk : spec.blocks) {
      const int width = blk.layer_channels(0);
      for (int k = 1; k < blk.num_layers; ++k) {
        if (blk.layer_channels(k) != width) throw ValidationError("construct_plans: layers of a block differ in width");
      }
      std::span<const double> li(table.layer.data() + l, static_cast<std::size_t>(blk.num_layers));
      const auto c = rate >= 1.0 ? std::vector<int>(li.size(), width) : allocate_channels(li, rate, width, schedule.floor);
      counts.insert(counts.end(), c.begin(), c.end());
      l += static_cast<std::size_t>(blk.num_layers);
    }
    auto mask = select_channels(table, counts);
    if (dedup && !plans.empty() && plans.back().mask == mask) continue;
    plans.push_back(make_plan(spec, std::move(mask), rate, static_cast<int>(plans.size())));
  }
  return plans;
}

bool plans_nested(const std::vector<SubnetworkPlan>& plans) {
  for (std::size_t i = 0; i < plans.size(); ++i) {
    for (std::size_t j = i + 1; j < plans.size(); ++j) {
      if (!plans[i].mask.subset_of(plans[j].mask)) return false;
    }
  }
  return true;
}

ScoreNetwork extract_dense(const ScoreNetwork& net, const ChannelMask& mask) {
  const auto& spec = net.spec();
  mask.validate(spec);
  NetworkSpec out_spec = spec;
  std::size_t l = 0;
  for (auto& blk : out_spec.blocks) {
    blk.channels.clear();
    for (int k = 0; k < blk.num_layers; ++k, ++l) blk.channels.push_back(static_cast<int>(mask.kept[l].size()));
    if (std::all_of(blk.channels.begin(), blk.channels.end(), [&](int c) { return c == blk.width; })) {
      blk.channels.clear();
    }
  }
  ScoreNetwork out(out_spec);
  const auto& src_layout = net.layout();
  const auto& dst_layout = out.layout();

  auto copy_set = [&](const std::vector<double>& src, std::vector<double>& dst) {
    auto copy_all = [&](const TensorSlot& s, const TensorSlot& d) {
      std::copy_n(src.begin() + static_cast<std::ptrdiff_t>(s.offset), s.size(),
                  dst.begin() + static_cast<std::ptrdiff_t>(d.offset));
    };
    copy_all(src_layout.stem_w(), dst_layout.stem_w());
    copy_all(src_layout.stem_b(), dst_layout.stem_b());
    copy_all(src_layout.head_w(), dst_layout.head_w());
    for (std::size_t li = 0; li < src_layout.layers().size(); ++li) {
      const auto& sl = src_layout.layers()[li];
      const auto& dl = dst_layout.layers()[li];
      const auto& kept = mask.kept[li];
      const auto& s_in = src_layout.tensor(sl.in_w);
      const auto& d_in = dst_layout.tensor(dl.in_w);
      const auto& s_out = src_layout.tensor(sl.out_w);
      const auto& d_out = dst_layout.tensor(dl.out_w);
      for (std::size_t k = 0; k < kept.size(); ++k) {
        const auto c = static_cast<std::size_t>(kept[k]);
        for (int j = 0; j < s_in.cols; ++j) {
          dst[d_in.offset + k * static_cast<std::size_t>(d_in.cols) + static_cast<std::size_t>(j)] =
              src[s_in.offset + c * static_cast<std::size_t>(s_in.cols) + static_cast<std::size_t>(j)];
        }
        dst[dst_layout.tensor(dl.in_b).offset + k] = src[src_layout.tensor(sl.in_b).offset + c];
        for (int i = 0; i < s_out.rows; ++i) {
          dst[d_out.offset + static_cast<std::size_t>(i) * static_cast<std::size_t>(d_out.cols) + k] =
              src[s_out.offset + static_cast<std::size_t>(i) * static_cast<std::size_t>(s_out.cols) + c];
        }
      }
      copy_all(src_layout.tensor(sl.out_b), dst_layout.tensor(dl.out_b));
    }
  };
  copy_set(net.weights(), out.weights());
  copy_set(net.ema_weights(), out.ema_weights());
  return out;
}

SubnetworkPlan random_architecture_plan(const NetworkSpec& spec, const ImportanceTable& table,
                                        std::span<const double> rate_choices, std::uint64_t seed) {
  if (rate_choices.empty()) throw DomainError("random_architecture_plan: no rate choices");
  for (double r : rate_choices) {
    if (!(r > 0.0 && r <= 1.0)) throw DomainError("random_architecture_plan: rates must lie in (0, 1]");
  }
  table.validate(spec);
  Rng rng(seed);
  ChannelMask mask;
  for (const auto& scores : table.channel) {
    const double rate = rate_choices[rng.index(rate_choices.size())];
    const int width = static_cast<int>(scores.size());
    const int keep = std::clamp(snapped_ceil(rate * width), 1, width);
    mask.kept.push_back(top_channels(scores, keep));
  }
  auto plan = make_plan(spec, std::move(mask), 0.0, 0);
  plan.target_p = plan.practical_p;
  return plan;
}

std::string plans_to_csv(const NetworkSpec& spec, const std::vector<SubnetworkPlan>& plans) {
  ParamLayout layout(spec);
  std::ostringstream out;
  out << kPlanCsvHeader << '\n';
  for (const auto& p : plans) {
    p.mask.validate(spec);
    for (std::size_t l = 0; l < layout.layers().size(); ++l) {
      const auto& info = layout.layers()[l].info;
      out << p.id << ',' << csv::format_real(p.target_p) << ',' << csv::format_real(p.practical_p) << ',' << p.macs
          << ',' << info.block << ',' << info.index << ',' << p.mask.kept[l].size() << ',';
      for (std::size_t k = 0; k < p.mask.kept[l].size(); ++k) {
        if (k) out << ';';
        out << p.mask.kept[l][k];
      }
      out << '\n';
    }
  }
  return out.str();
}

std::vector<SubnetworkPlan> plans_from_csv(const NetworkSpec& spec, const std::filesystem::path& path) {
  ParamLayout layout(spec);
  const auto table = csv::read(path, kPlanCsvHeader);
  const std::size_t nl = layout.layers().size();
  if (table.rows.empty() || table.rows.size() % nl != 0) {
    throw ValidationError("plan CSV row count is not a multiple of the layer count");
  }
  std::vector<SubnetworkPlan> plans;
  for (std::size_t r = 0; r < table.rows.size(); r += nl) {
    const auto& first = table.rows[r];
    const int id = static_cast<int>(csv::parse_int(first[0]));
    const double target = csv::parse_real(first[1]);
    ChannelMask mask;
    for (std::size_t l = 0; l < nl; ++l) {
      const auto& row = table.rows[r + l];
      const auto& info = layout.layers()[l].info;
      if (csv::parse_int(row[0]) != id || csv::parse_int(row[4]) != info.block ||
          csv::parse_int(row[5]) != info.index) {
        throw ValidationError("plan CSV rows out of order at line " + std::to_string(r + l + 2));
      }
      std::vector<int> idx;
      for (const auto& f : csv::split(row[7], ';')) idx.push_back(static_cast<int>(csv::parse_int(f)));
      if (static_cast<long long>(idx.size()) != csv::parse_int(row[6])) {
        throw ValidationError("plan CSV kept_channels disagrees with channel_indices");
      }
      mask.kept.push_back(std::move(idx));
    }
    auto plan = make_plan(spec, std::move(mask), target, id);
    if (csv::format_real(plan.practical_p) != first[2] || std::to_string(plan.macs) != first[3]) {
      throw ValidationError("plan CSV practical_p/macs disagree with the masks of plan " + std::to_string(id));
    }
    plans.push_back(std::move(plan));
  }
  return plans;
}

}  // namespace ofad
