// SPDX-License-Identifier: Apache-2.0
#include "ofad/importance.hpp"

#include <cmath>
#include <sstream>

#include "ofad/csv.hpp"
#include "ofad/errors.hpp"

namespace ofad {

std::string_view to_string(ImportanceMethod m) {
  switch (m) {
    case ImportanceMethod::taylor: return "taylor";
    case ImportanceMethod::magnitude: return "magnitude";
    case ImportanceMethod::random: return "random";
  }
  return "taylor";
}

ImportanceMethod parse_importance_method(std::string_view name) {
  if (name == "taylor") return ImportanceMethod::taylor;
  if (name == "magnitude") return ImportanceMethod::magnitude;
  if (name == "random") return ImportanceMethod::random;
  throw ValidationError("unknown importance method '" + std::string(name) + "'");
}

void ImportanceTable::aggregate() {
  layer.assign(channel.size(), 0.0);
  for (std::size_t l = 0; l < channel.size(); ++l) {
    for (double s : channel[l]) layer[l] += s;
  }
}

void ImportanceTable::validate(const NetworkSpec& spec) const {
  ParamLayout layout(spec);
  if (channel.size() != layout.layers().size() || layer.size() != channel.size()) {
    throw ValidationError("importance table does not cover every layer");
  }
  for (std::size_t l = 0; l < channel.size(); ++l) {
    if (static_cast<int>(channel[l].size()) != layout.layers()[l].info.channels) {
      throw ValidationError("importance table layer " + std::to_string(l) + " has wrong channel count");
    }
    for (double s : channel[l]) {
      if (!std::isfinite(s) || s < 0.0) throw ValidationError("importance scores must be finite and >= 0");
    }
  }
}

std::vector<std::size_t> channel_param_indices(const ParamLayout& layout, int layer, int channel) {
  const auto& ls = layout.layers().at(static_cast<std::size_t>(layer));
  const auto& in_w = layout.tensor(ls.in_w);
  const auto& in_b = layout.tensor(ls.in_b);
  const auto& out_w = layout.tensor(ls.out_w);
  std::vector<std::size_t> idx;
  idx.reserve(static_cast<std::size_t>(in_w.cols + 1 + out_w.rows));
  for (int j = 0; j < in_w.cols; ++j) idx.push_back(in_w.offset + static_cast<std::size_t>(channel * in_w.cols + j));
  idx.push_back(in_b.offset + static_cast<std::size_t>(channel));
  for (int i = 0; i < out_w.rows; ++i) idx.push_back(out_w.offset + static_cast<std::size_t>(i * out_w.cols + channel));
  return idx;
}

namespace {

ImportanceTable empty_table(const ParamLayout& layout, ImportanceMethod method) {
  ImportanceTable t;
  t.method = method;
  for (const auto& ls : layout.layers()) t.channel.emplace_back(static_cast<std::size_t>(ls.info.channels), 0.0);
  return t;
}

}  // namespace

ImportanceTable taylor_importance(const ScoreNetwork& net, const GaussianMixture& mix, const TaylorOptions& opts,
                                  Rng& rng) {
  if (opts.n_pairs < 1) throw DomainError("taylor_importance: n_pairs must be >= 1");
  const auto& layout = net.layout();
  const auto full = ChannelMask::full(net.spec());
  ImportanceTable t = empty_table(layout, ImportanceMethod::taylor);
  t.interval = opts.interval;
  t.n_pairs = opts.n_pairs;

  std::vector<std::vector<std::vector<std::size_t>>> index_sets(layout.layers().size());
  for (std::size_t l = 0; l < layout.layers().size(); ++l) {
    for (int c = 0; c < layout.layers()[l].info.channels; ++c) {
      index_sets[l].push_back(channel_param_indices(layout, static_cast<int>(l), c));
    }
  }

  const auto& w = net.weights();
  for (int p = 0; p < opts.n_pairs; ++p) {
    const auto batch = draw_dsm_batch(mix, 1, opts.interval, rng);
    const auto lg = loss_and_gradients(net, full, batch);
    for (std::size_t l = 0; l < index_sets.size(); ++l) {
      for (std::size_t c = 0; c < index_sets[l].size(); ++c) {
        double dot = 0.0;
        for (auto i : index_sets[l][c]) dot += w[i] * lg.grads[i];
        if (!std::isfinite(dot)) throw NumericError("non-finite importance gradient", p);
        t.channel[l][c] += opts.abs_mode == AbsMode::per_pair ? std::abs(dot) : dot;
      }
    }
  }
  for (auto& layer : t.channel) {
    for (auto& s : layer) {
      s /= static_cast<double>(opts.n_pairs);
      if (opts.abs_mode == AbsMode::after_mean) s = std::abs(s);
    }
  }
  t.aggregate();
  return t;
}

ImportanceTable magnitude_importance(const ScoreNetwork& net) {
  const auto& layout = net.layout();
  ImportanceTable t = empty_table(layout, ImportanceMethod::magnitude);
  const auto& w = net.weights();
  for (std::size_t l = 0; l < layout.layers().size(); ++l) {
    for (int c = 0; c < layout.layers()[l].info.channels; ++c) {
      double acc = 0.0;
      for (auto i : channel_param_indices(layout, static_cast<int>(l), c)) acc += std::abs(w[i]);
      t.channel[l][static_cast<std::size_t>(c)] = acc;
    }
  }
  t.aggregate();
  return t;
}

ImportanceTable random_importance(const NetworkSpec& spec, std::uint64_t seed) {
  ParamLayout layout(spec);
  ImportanceTable t = empty_table(layout, ImportanceMethod::random);
  Rng rng(seed);
  for (auto& layer : t.channel) {
    for (auto& s : layer) {
      do {
        s = rng.uniform();
      } while (s == 0.0);
    }
  }
  t.aggregate();
  return t;
}

std::array<ImportanceTable, 3> timesplit_importance(const ScoreNetwork& net, const GaussianMixture& mix, int n_pairs,
                                                    Rng& rng, AbsMode abs_mode) {
  std::array<ImportanceTable, 3> out;
  for (std::size_t i = 0; i < kTimeSplitIntervals.size(); ++i) {
    out[i] = taylor_importance(net, mix, TaylorOptions{n_pairs, kTimeSplitIntervals[i], abs_mode}, rng);
  }
  return out;
}

ImportanceTable refresh_importance(const ScoreNetwork& net, const ImportanceTable& table, const GaussianMixture& mix,
                                   int n_pairs, Rng& rng, long long training_step) {
  if (table.method != ImportanceMethod::taylor) throw ValidationError("refresh_importance needs a taylor table");
  auto t = taylor_importance(net, mix, TaylorOptions{n_pairs, table.interval, AbsMode::per_pair}, rng);
  t.step = std::max(table.step + 1, training_step);
  return t;
}

std::string importance_to_csv(const NetworkSpec& spec, const std::vector<ImportanceTable>& tables) {
  ParamLayout layout(spec);
  std::ostringstream out;
  out << kImportanceCsvHeader << '\n';
  for (const auto& t : tables) {
    t.validate(spec);
    for (std::size_t l = 0; l < layout.layers().size(); ++l) {
      const auto& info = layout.layers()[l].info;
      for (std::size_t c = 0; c < t.channel[l].size(); ++c) {
        out << info.block << ',' << info.index << ',' << c << ',' << csv::format_real(t.channel[l][c]) << ','
            << to_string(t.method) << ',' << csv::format_real(t.interval.lo) << ','
            << csv::format_real(t.interval.hi) << ',' << t.n_pairs << ',' << t.step << '\n';
      }
    }
  }
  return out.str();
}

std::vector<ImportanceTable> importance_from_csv(const NetworkSpec& spec, const std::filesystem::path& path) {
  ParamLayout layout(spec);
  const auto table = csv::read(path, kImportanceCsvHeader);
  std::size_t total_channels = 0;
  for (const auto& ls : layout.layers()) total_channels += static_cast<std::size_t>(ls.info.channels);
  if (table.rows.empty() || table.rows.size() % total_channels != 0) {
    throw ValidationError("importance CSV row count is not a multiple of the network's channel count");
  }

  std::vector<ImportanceTable> out;
  std::size_t r = 0;
  while (r < table.rows.size()) {
    ImportanceTable t = empty_table(layout, ImportanceMethod::taylor);
    for (std::size_t l = 0; l < layout.layers().size(); ++l) {
      const auto& info = layout.layers()[l].info;
      for (int c = 0; c < info.channels; ++c, ++r) {
        const auto& row = table.rows[r];
        if (csv::parse_int(row[0]) != info.block || csv::parse_int(row[1]) != info.index ||
            csv::parse_int(row[2]) != c) {
          throw ValidationError("importance CSV rows out of order at line " + std::to_string(r + 2));
        }
        const auto method = parse_importance_method(row[4]);
        const SigmaInterval iv{csv::parse_real(row[5]), csv::parse_real(row[6])};
        const int n_pairs = static_cast<int>(csv::parse_int(row[7]));
        const long long step = csv::parse_int(row[8]);
        if (l == 0 && c == 0) {
          t.method = method;
          t.interval = iv;
          t.n_pairs = n_pairs;
          t.step = step;
        } else if (method != t.method || !(iv == t.interval) || n_pairs != t.n_pairs || step != t.step) {
          throw ValidationError("importance CSV metadata changes inside a table at line " + std::to_string(r + 2));
        }
        t.channel[l][static_cast<std::size_t>(c)] = csv::parse_real(row[3]);
      }
    }
    t.aggregate();
    t.validate(spec);
    out.push_back(std::move(t));
  }
  return out;
}

}  // namespace ofad
