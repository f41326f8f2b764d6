// SPDX-License-Identifier: Apache-2.0
#include "ofad/commands.hpp"

#include <algorithm>
#include <cstdio>
#include <map>
#include <ostream>
#include <sstream>

#include "ofad/checkpoint.hpp"
#include "ofad/csv.hpp"
#include "ofad/errors.hpp"

namespace ofad {

int report_current_exception(std::ostream& err) {
  try {
    throw;
  } catch (const NumericError& e) {
    err << "numeric error: " << e.what() << '\n';
    return kExitNumeric;
  } catch (const IoError& e) {
    err << "i/o error: " << e.what() << '\n';
    return kExitIo;
  } catch (const fs::filesystem_error& e) {
    err << "i/o error: " << e.what() << '\n';
    return kExitIo;
  } catch (const ValidationError& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const DomainError& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const nlohmann::json::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "internal error: " << e.what() << '\n';
    return 1;
  }
}

namespace {

fs::path out_dir(const ExperimentConfig& cfg) {
  const fs::path dir(cfg.out);
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create output directory " + dir.string() + ": " + ec.message());
  return dir;
}

std::string step_name(const char* prefix, long long step, const char* ext) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%s_step%lld%s", prefix, step, ext);
  return buf;
}

std::vector<PlanFamily> load_families(const ExperimentConfig& cfg, const std::vector<fs::path>& files) {
  std::vector<PlanFamily> families;
  if (files.size() == 1) {
    families.push_back(PlanFamily{SigmaInterval{cfg.diffusion.sigma_min, cfg.diffusion.sigma_max},
                                  plans_from_csv(cfg.network, files.front())});
  } else if (files.size() == kTimeSplitIntervals.size()) {
    for (std::size_t f = 0; f < files.size(); ++f) {
      families.push_back(PlanFamily{kTimeSplitIntervals[f], plans_from_csv(cfg.network, files[f])});
    }
  } else {
    throw ValidationError("expected one plan file or one per time-split family");
  }
  for (const auto& f : families) {
    if (f.plans.empty()) throw ValidationError("plan file holds no plans");
    if (f.plans.size() != families.front().plans.size()) {
      throw ValidationError("plan families must hold the same number of plans");
    }
  }
  return families;
}

std::vector<PlanFamily> families_from_tables(const ExperimentConfig& cfg, const std::vector<ImportanceTable>& tables,
                                             bool dedup) {
  std::vector<PlanFamily> families;
  for (const auto& t : tables) {
    families.push_back(PlanFamily{t.interval, construct_plans(cfg.network, t, cfg.schedule, dedup)});
  }
  if (families.size() == 1) families.front().interval = SigmaInterval{cfg.diffusion.sigma_min, cfg.diffusion.sigma_max};
  return families;
}

void require_spec(const ExperimentConfig& cfg, const ScoreNetwork& net) {
  if (!(net.spec() == cfg.network)) throw ValidationError("checkpoint network differs from the configured network");
}

const SubnetworkPlan& find_plan(const std::vector<SubnetworkPlan>& plans, int plan_id) {
  for (const auto& p : plans) {
    if (p.id == plan_id) return p;
  }
  throw ValidationError("no plan with id " + std::to_string(plan_id));
}

}  // namespace

void cmd_pretrain(const ExperimentConfig& cfg, std::ostream& log) {
  cfg.validate();
  const auto dir = out_dir(cfg);
  const auto mix = cfg.mixture.build();
  auto net = build_network(cfg.network, cfg.stream_seed("init"));
  auto opt = OptimizerState::for_network(net, AdamConfig{cfg.pretrain.learning_rate});
  const auto run = cfg.run_config(cfg.pretrain, "pretrain");
  StepHook hook;
  if (cfg.pretrain.checkpoint_every > 0) {
    hook = [&](const StepRecord& rec, const ScoreNetwork& n, const OptimizerState& o, const std::vector<PlanFamily>&) {
      if (rec.step % cfg.pretrain.checkpoint_every == 0) save_checkpoint(dir / step_name("pretrain", rec.step, ".ckpt"), n, &o);
    };
  }
  const auto tlog = pretrain(net, opt, run, mix, hook);
  save_checkpoint(dir / "pretrain.ckpt", net, &opt);
  csv::write_text(dir / "pretrain_log.csv", training_log_to_csv(tlog));
  if (!tlog.records.empty()) log << "pretrain: " << tlog.records.size() << " steps, final loss "
                                 << csv::format_real(tlog.records.back().loss) << '\n';
}

void cmd_importance(const ExperimentConfig& cfg, const fs::path& checkpoint, std::ostream& log) {
  cfg.validate();
  auto ck = load_checkpoint(checkpoint);
  require_spec(cfg, ck.net);
  // Importance is measured on the weights that are used for sampling.
  ck.net.promote_ema();
  const auto dir = out_dir(cfg);
  const auto mix = cfg.mixture.build();
  const AbsMode abs_mode = cfg.importance.per_pair_abs ? AbsMode::per_pair : AbsMode::after_mean;
  std::vector<ImportanceTable> tables;
  Rng rng(cfg.stream_seed("importance"));
  switch (cfg.importance.method) {
    case ImportanceMethod::taylor:
      if (cfg.importance.time_split) {
        for (auto& t : timesplit_importance(ck.net, mix, cfg.importance.n_pairs, rng, abs_mode)) tables.push_back(t);
      } else {
        TaylorOptions opts;
        opts.n_pairs = cfg.importance.n_pairs;
        opts.interval = SigmaInterval{cfg.diffusion.sigma_min, cfg.diffusion.sigma_max};
        opts.abs_mode = abs_mode;
        tables.push_back(taylor_importance(ck.net, mix, opts, rng));
      }
      break;
    case ImportanceMethod::magnitude:
      tables.push_back(magnitude_importance(ck.net));
      break;
    case ImportanceMethod::random:
      tables.push_back(random_importance(cfg.network, cfg.stream_seed("importance")));
      break;
  }
  if (cfg.importance.time_split && tables.size() == 1) {
    // Data-independent methods use one table for every family.
    auto t = tables.front();
    tables.clear();
    for (const auto& iv : kTimeSplitIntervals) {
      t.interval = iv;
      tables.push_back(t);
    }
  }
  csv::write_text(dir / "importance.csv", importance_to_csv(cfg.network, tables));
  log << "importance: " << tables.size() << " table(s), method " << to_string(cfg.importance.method) << '\n';
}

void cmd_construct(const ExperimentConfig& cfg, const fs::path& importance_csv, std::ostream& log) {
  cfg.validate();
  const auto dir = out_dir(cfg);
  const auto tables = importance_from_csv(cfg.network, importance_csv);
  if (tables.empty()) throw ValidationError("importance file holds no tables");
  if (tables.size() != 1 && tables.size() != kTimeSplitIntervals.size()) {
    throw ValidationError("importance file must hold one table or one per time-split family");
  }
  // Split families must stay index-aligned, so their plans are not deduplicated.
  const bool dedup = tables.size() == 1 && cfg.importance.refresh_every == 0;
  for (std::size_t f = 0; f < tables.size(); ++f) {
    const auto plans = construct_plans(cfg.network, tables[f], cfg.schedule, dedup);
    const auto name = tables.size() == 1 ? std::string("plans.csv") : "plans_" + std::to_string(f) + ".csv";
    csv::write_text(dir / name, plans_to_csv(cfg.network, plans));
    log << name << ": " << plans.size() << " plans, nested " << (plans_nested(plans) ? "yes" : "NO") << '\n';
    for (const auto& p : plans) {
      char buf[128];
      std::snprintf(buf, sizeof buf, "  plan %d target %.4g practical %.4f macs %lld\n", p.id, p.target_p,
                    p.practical_p, p.macs);
      log << buf;
    }
  }
}

void cmd_train_ofa(const ExperimentConfig& cfg, const TrainOfaArgs& args, std::ostream& log) {
  cfg.validate();
  const auto dir = out_dir(cfg);
  const auto mix = cfg.mixture.build();
  const auto run = cfg.run_config(cfg.ofa, "ofa");

  Checkpoint start = [&] {
    if (args.resume) {
      auto ck = load_checkpoint(*args.resume);
      if (!ck.optimizer) throw ValidationError("resume checkpoint has no optimizer state");
      return ck;
    }
    auto ck = load_checkpoint(args.checkpoint);
    ck.net.promote_ema();
    ck.optimizer = OptimizerState::for_network(ck.net, AdamConfig{cfg.ofa.learning_rate});
    return ck;
  }();
  ScoreNetwork& net = start.net;
  OptimizerState& opt = *start.optimizer;
  require_spec(cfg, net);

  std::optional<PlanRebuild> rebuild;
  if (args.importance) {
    rebuild = PlanRebuild{cfg.schedule, importance_from_csv(cfg.network, *args.importance), false};
  }
  if ((cfg.importance.refresh_every > 0 || cfg.ofa.random_architecture) && !rebuild) {
    throw ValidationError("train-ofa: importance refresh and random architecture need --importance");
  }

  std::vector<PlanFamily> families;
  if (cfg.importance.refresh_every > 0 && !cfg.ofa.random_architecture) {
    families = families_from_tables(cfg, rebuild->tables, false);
  } else if (!args.plans.empty()) {
    families = load_families(cfg, args.plans);
  } else if (!cfg.ofa.random_architecture) {
    throw ValidationError("train-ofa: --plans is required");
  }
  std::vector<double> weights;
  if (!families.empty()) {
    weights = ReweightConfig::resolve(cfg.reweight, static_cast<int>(families.front().plans.size()),
                                      cfg.reweight_ratio)
                  .weights;
  }

  auto save = [&](const fs::path& path, const ScoreNetwork& n, const OptimizerState& o) {
    save_checkpoint(path, n, &o);
    if (rebuild && cfg.importance.refresh_every > 0) {
      csv::write_text(fs::path(path.string() + ".importance.csv"), importance_to_csv(cfg.network, rebuild->tables));
    }
  };
  StepHook hook;
  if (cfg.ofa.checkpoint_every > 0) {
    hook = [&](const StepRecord& rec, const ScoreNetwork& n, const OptimizerState& o, const std::vector<PlanFamily>&) {
      if (rec.step % cfg.ofa.checkpoint_every == 0) save(dir / step_name("ofa", rec.step, ".ckpt"), n, o);
    };
  }

  const long long start_step = static_cast<long long>(opt.step);
  const auto tlog = run_ofa_training(net, opt, families, weights, run, mix, rebuild ? &*rebuild : nullptr, hook);
  save(dir / "ofa.ckpt", net, opt);

  // A resumed run keeps the log rows of the steps it continues from.
  std::string text(kTrainLogCsvHeader);
  text += '\n';
  const auto log_path = dir / "ofa_log.csv";
  if (args.resume && fs::exists(log_path)) {
    const auto prior = csv::read(log_path, kTrainLogCsvHeader);
    std::istringstream lines(csv::read_text(log_path));
    std::string line;
    std::getline(lines, line);
    for (const auto& row : prior.rows) {
      std::getline(lines, line);
      if (csv::parse_int(row[0]) <= start_step) text += line + '\n';
    }
  }
  const auto body = training_log_to_csv(tlog);
  text += body.substr(body.find('\n') + 1);
  csv::write_text(log_path, text);
  log << "train-ofa: steps " << start_step + 1 << ".." << run.steps << ", strategy " << to_string(cfg.reweight)
      << '\n';
}

void cmd_extract(const ExperimentConfig& cfg, const fs::path& checkpoint, const fs::path& plans, int plan_id,
                 long long finetune_steps, std::ostream& log) {
  cfg.validate();
  const auto dir = out_dir(cfg);
  auto ck = load_checkpoint(checkpoint);
  require_spec(cfg, ck.net);
  const auto all = plans_from_csv(cfg.network, plans);
  const auto& plan = find_plan(all, plan_id);
  const auto dense = finetune(ck.net, plan, finetune_steps, cfg.run_config(cfg.ofa, "finetune"), cfg.mixture.build());
  const auto name = "extract_plan" + std::to_string(plan_id) + ".ckpt";
  save_checkpoint(dir / name, dense, nullptr);
  log << name << ": " << dense.layout().size() << " parameters\n";
}

void cmd_sample(const ExperimentConfig& cfg, const fs::path& checkpoint, const std::optional<fs::path>& plans,
                int plan_id, int n_samples, std::ostream& log) {
  cfg.validate();
  if (n_samples < 1) throw DomainError("sample: n must be >= 1");
  const auto dir = out_dir(cfg);
  const auto ck = load_checkpoint(checkpoint);
  auto mask = ChannelMask::full(ck.net.spec());
  if (plans) {
    require_spec(cfg, ck.net);
    mask = find_plan(plans_from_csv(cfg.network, *plans), plan_id).mask;
  }
  auto ec = cfg.eval_config();
  ec.n_samples = n_samples;
  const auto samples = sample_masked(ck.net, mask, ec, cfg.stream_seed("sample"));
  csv::write_text(dir / "samples.csv", samples_to_csv(samples));
  log << "samples.csv: " << samples.size() << " rows\n";
}

void cmd_eval(const ExperimentConfig& cfg, const EvalArgs& args, std::ostream& log) {
  cfg.validate();
  if (args.n_seeds < 1) throw DomainError("eval: seeds must be >= 1");
  const auto dir = out_dir(cfg);
  const auto ck = load_checkpoint(args.checkpoint);
  require_spec(cfg, ck.net);
  const auto mix = cfg.mixture.build();
  const auto ec = cfg.eval_config();

  std::vector<PlanFamily> families;
  if (args.plans.empty()) {
    families.push_back(PlanFamily{SigmaInterval{cfg.diffusion.sigma_min, cfg.diffusion.sigma_max},
                                  {make_plan(cfg.network, ChannelMask::full(cfg.network), 1.0, 0)}});
  } else {
    families = load_families(cfg, args.plans);
  }

  std::vector<MetricReport> reports;
  for (std::size_t i = 0; i < families.front().plans.size(); ++i) {
    std::optional<double> latency;
    if (args.latency) {
      const auto dense = extract_dense(ck.net, families.front().plans[i].mask);
      latency = latency_bench(dense, cfg.eval.latency_reps, cfg.eval.latency_warmup).median_us;
    }
    for (int k = 0; k < args.n_seeds; ++k) {
      const auto seed = derive_seed(cfg.seed, "eval", static_cast<std::uint64_t>(k));
      auto r = families.size() == 1 ? evaluate_plan(ck.net, families.front().plans[i], mix, ec, seed)
                                    : evaluate_family_plan(ck.net, families, i, mix, ec, seed);
      r.median_latency_us = latency;
      reports.push_back(r);
      char buf[160];
      std::snprintf(buf, sizeof buf, "plan %d target %.4g practical %.4f sliced-w2 %.6g\n", r.plan_id, r.target_p,
                    r.practical_p, r.metric);
      log << buf;
    }
  }
  csv::write_text(dir / args.report_name, reports_to_csv(reports));

  if (args.sensitivity_importance) {
    const auto tables = importance_from_csv(cfg.network, *args.sensitivity_importance);
    if (tables.empty()) throw ValidationError("importance file holds no tables");
    const auto sens = layer_sensitivity(ck.net, tables.front(), mix, ec, cfg.schedule.floor,
                                        derive_seed(cfg.seed, "eval", 0));
    std::ostringstream out;
    out << "block,layer,kept_channels,sensitivity,normalized_importance,protocol\n";
    for (const auto& s : sens) {
      out << s.block << ',' << s.index << ',' << s.kept_channels << ',' << csv::format_real(s.sensitivity) << ','
          << csv::format_real(s.normalized_importance) << ",floor_clamp\n";
    }
    csv::write_text(dir / "sensitivity.csv", out.str());
    log << "sensitivity.csv: " << sens.size() << " layers\n";
  }
}

void cmd_bench(const ExperimentConfig& cfg, const fs::path& checkpoint, const fs::path& plans, std::ostream& log) {
  cfg.validate();
  const auto dir = out_dir(cfg);
  const auto ck = load_checkpoint(checkpoint);
  require_spec(cfg, ck.net);
  std::ostringstream out;
  out << "plan_id,target_p,practical_p,macs,median_us,p10_us,p90_us\n";
  for (const auto& p : plans_from_csv(cfg.network, plans)) {
    const auto stats = latency_bench(extract_dense(ck.net, p.mask), cfg.eval.latency_reps, cfg.eval.latency_warmup);
    out << p.id << ',' << csv::format_real(p.target_p) << ',' << csv::format_real(p.practical_p) << ',' << p.macs
        << ',' << csv::format_real(stats.median_us) << ',' << csv::format_real(stats.p10_us) << ','
        << csv::format_real(stats.p90_us) << '\n';
    char buf[128];
    std::snprintf(buf, sizeof buf, "plan %d macs %lld median %.3f us\n", p.id, p.macs, stats.median_us);
    log << buf;
  }
  csv::write_text(dir / "bench.csv", out.str());
}

void cmd_report(const ExperimentConfig& cfg, const std::vector<fs::path>& inputs, bool convergence,
                std::ostream& log) {
  if (inputs.empty()) throw ValidationError("report: no input files");
  const auto dir = out_dir(cfg);
  std::vector<std::vector<MetricReport>> per_input;
  std::vector<MetricReport> all;
  for (const auto& p : inputs) {
    per_input.push_back(reports_from_csv(p));
    all.insert(all.end(), per_input.back().begin(), per_input.back().end());
  }
  std::stable_sort(all.begin(), all.end(), [](const MetricReport& a, const MetricReport& b) {
    if (a.target_p != b.target_p) return a.target_p < b.target_p;
    if (a.plan_id != b.plan_id) return a.plan_id < b.plan_id;
    return a.seed < b.seed;
  });

  if (convergence) {
    // Mean metric per plan at every checkpoint, then min / value.
    std::map<int, std::vector<double>> series;
    for (const auto& reports : per_input) {
      std::map<int, std::pair<double, int>> acc;
      for (const auto& r : reports) {
        acc[r.plan_id].first += r.metric;
        acc[r.plan_id].second += 1;
      }
      for (const auto& [id, sum] : acc) series[id].push_back(sum.first / sum.second);
    }
    std::ostringstream out;
    out << "plan_id,checkpoint,metric,ratio\n";
    for (const auto& [id, values] : series) {
      if (values.size() != inputs.size()) throw ValidationError("report: plan missing from some checkpoint reports");
      const auto ratios = convergence_ratio(values);
      for (std::size_t t = 0; t < values.size(); ++t) {
        out << id << ',' << t << ',' << csv::format_real(values[t]) << ',' << csv::format_real(ratios[t]) << '\n';
      }
    }
    csv::write_text(dir / "convergence.csv", out.str());
  }
  // Write after reading so an input may live at the output path.
  csv::write_text(dir / "report.csv", reports_to_csv(all));
  log << "report.csv: " << all.size() << " rows from " << inputs.size() << " file(s)\n";
}

}  // namespace ofad
