// SPDX-License-Identifier: Apache-2.0
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "ofad/commands.hpp"

namespace {

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config, "experiment config (JSON)")->required();
  cmd->add_option("--seed", c.seed, "override the root seed");
  cmd->add_option("--out", c.out, "override the output directory");
}

ofad::ExperimentConfig load(const Common& c) {
  auto cfg = ofad::load_config(c.config);
  if (c.seed) cfg.seed = *c.seed;
  if (c.out) cfg.out = *c.out;
  cfg.validate();
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Once-for-all compression of diffusion score networks"};
  app.require_subcommand(1);
  Common common;

  auto* pre = app.add_subcommand("pretrain", "train the full network");
  add_common(pre, common);

  std::string checkpoint;
  auto* imp = app.add_subcommand("importance", "score channels and layers");
  add_common(imp, common);
  imp->add_option("--checkpoint", checkpoint)->required();

  std::string importance;
  auto* con = app.add_subcommand("construct", "build nested subnetwork plans");
  add_common(con, common);
  con->add_option("--importance", importance)->required();

  ofad::TrainOfaArgs train;
  std::string train_importance, resume;
  auto* ofa = app.add_subcommand("train-ofa", "jointly train all plans on shared weights");
  add_common(ofa, common);
  ofa->add_option("--checkpoint", train.checkpoint)->required();
  ofa->add_option("--plans", train.plans, "one plan CSV, or three for time-split families");
  ofa->add_option("--importance", train_importance);
  ofa->add_option("--resume", resume, "OFA checkpoint to continue from");

  std::string plans;
  int plan_id = 0;
  long long finetune_steps = 0;
  auto* ext = app.add_subcommand("extract", "slice one plan into a dense network");
  add_common(ext, common);
  ext->add_option("--checkpoint", checkpoint)->required();
  ext->add_option("--plans", plans)->required();
  ext->add_option("--plan-id", plan_id)->required();
  ext->add_option("--finetune-steps", finetune_steps);

  int n_samples = 0;
  auto* smp = app.add_subcommand("sample", "generate samples");
  add_common(smp, common);
  smp->add_option("--checkpoint", checkpoint)->required();
  smp->add_option("--plans", plans);
  smp->add_option("--plan-id", plan_id);
  smp->add_option("-n,--n", n_samples, "sample count (default: eval.n_samples)");

  ofad::EvalArgs eval;
  std::string sens_importance;
  auto* evl = app.add_subcommand("eval", "sliced-W2 report per plan");
  add_common(evl, common);
  evl->add_option("--checkpoint", eval.checkpoint)->required();
  evl->add_option("--plans", eval.plans);
  evl->add_option("--seeds", eval.n_seeds);
  evl->add_flag("--latency", eval.latency);
  evl->add_option("--sensitivity", sens_importance, "importance CSV for layer sensitivity");
  evl->add_option("--name", eval.report_name, "report file name");

  auto* bch = app.add_subcommand("bench", "latency of extracted plans");
  add_common(bch, common);
  bch->add_option("--checkpoint", checkpoint)->required();
  bch->add_option("--plans", plans)->required();

  std::vector<std::string> inputs;
  bool convergence = false;
  auto* rep = app.add_subcommand("report", "merge report CSVs");
  add_common(rep, common);
  rep->add_option("inputs", inputs)->required();
  rep->add_flag("--convergence", convergence, "inputs are successive checkpoints");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return ofad::kExitUsage;
  }

  try {
    const auto cfg = load(common);
    auto& log = std::cout;
    if (*pre) {
      ofad::cmd_pretrain(cfg, log);
    } else if (*imp) {
      ofad::cmd_importance(cfg, checkpoint, log);
    } else if (*con) {
      ofad::cmd_construct(cfg, importance, log);
    } else if (*ofa) {
      if (!train_importance.empty()) train.importance = train_importance;
      if (!resume.empty()) train.resume = resume;
      ofad::cmd_train_ofa(cfg, train, log);
    } else if (*ext) {
      ofad::cmd_extract(cfg, checkpoint, plans, plan_id, finetune_steps, log);
    } else if (*smp) {
      std::optional<ofad::fs::path> p;
      if (!plans.empty()) p = plans;
      ofad::cmd_sample(cfg, checkpoint, p, plan_id, n_samples > 0 ? n_samples : cfg.eval.n_samples, log);
    } else if (*evl) {
      if (!sens_importance.empty()) eval.sensitivity_importance = sens_importance;
      ofad::cmd_eval(cfg, eval, log);
    } else if (*bch) {
      ofad::cmd_bench(cfg, checkpoint, plans, log);
    } else if (*rep) {
      std::vector<ofad::fs::path> paths(inputs.begin(), inputs.end());
      ofad::cmd_report(cfg, paths, convergence, log);
    }
  } catch (...) {
    return ofad::report_current_exception(std::cerr);
  }
  return ofad::kExitOk;
}
