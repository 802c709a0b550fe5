// Copyright 2026 The dlrt Authors.
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//  http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.

#pragma once

// Command line front end. Options come from flags and from an optional
// TOML/INI file given with --config, where each subcommand reads its own
// section ([train], [compare], [ode-bench], [descent-audit]). Flags win over
// the file; unknown keys in the file are errors.

#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "dlrt/experiments.hpp"

namespace dlrt {

namespace detail {

inline Integrator integrator_from(const std::string& s) {
  if (auto it = parse_integrator(s)) return *it;
  throw config_error("unknown integrator '" + s + "' (expected full, psi, bc-psi, bug or abc-psi)");
}

inline TruncationCriterion criterion_from(const std::string& s) {
  if (s == "norm-ratio") return TruncationCriterion::norm_ratio;
  if (s == "squared-tail") return TruncationCriterion::squared_tail;
  throw config_error("unknown truncation criterion '" + s + "' (expected norm-ratio or squared-tail)");
}

struct TrainFlags {
  std::string integrator = "abc-psi";
  std::string criterion = "norm-ratio";
  std::string init = "aligned";
  std::string data_dir;
  std::string out_dir;
};

inline void add_train_options(CLI::App* cmd, TrainConfig& c, TrainFlags& f, bool with_integrator) {
  if (with_integrator)
    cmd->add_option("--integrator", f.integrator, "full | psi | bc-psi | bug | abc-psi")
        ->capture_default_str();
  cmd->add_option("--arch", c.arch, "layer widths, input first")->delimiter(',')->capture_default_str();
  cmd->add_option("--lr", c.lr, "step size h")->capture_default_str();
  cmd->add_option("--tau", c.tau, "truncation tolerance")->capture_default_str();
  cmd->add_option("--rank", c.rank, "initial (or fixed) rank of the factored layers")
      ->capture_default_str();
  cmd->add_option("--r-min", c.r_min, "smallest rank after truncation")->capture_default_str();
  cmd->add_option("--r-max", c.r_max, "largest rank after truncation (0: twice --rank)")
      ->capture_default_str();
  cmd->add_option("--epochs", c.epochs)->capture_default_str();
  cmd->add_option("--batch-size", c.batch_size)->capture_default_str();
  cmd->add_option("--train-limit", c.train_limit, "use the first N training samples (0: all)")
      ->capture_default_str();
  cmd->add_option("--substeps", c.substeps, "Euler steps per sub-flow")->capture_default_str();
  cmd->add_option("--criterion", f.criterion, "norm-ratio | squared-tail")->capture_default_str();
  cmd->add_option("--init", f.init, "aligned | random bases for the factored layers")
      ->capture_default_str();
  cmd->add_option("--data-dir", f.data_dir, "directory with the MNIST IDX files");
  cmd->add_option("--out-dir", f.out_dir, "output directory");
}

inline void finish_train(TrainConfig& c, const TrainFlags& f, bool with_integrator) {
  if (with_integrator) c.integrator = integrator_from(f.integrator);
  c.criterion = criterion_from(f.criterion);
  if (f.init == "aligned")
    c.init = InitScheme::aligned;
  else if (f.init == "random")
    c.init = InitScheme::random;
  else
    throw config_error("unknown init '" + f.init + "' (expected aligned or random)");
  if (!f.data_dir.empty()) c.data_dir = f.data_dir;
  if (!f.out_dir.empty()) c.out_dir = f.out_dir;
}

}  // namespace detail

/// Parses argv and runs one subcommand. Returns the process exit code.
inline int run_cli(int argc, const char* const* argv, std::ostream& out = std::cout,
                   std::ostream& err = std::cerr) {
  CLI::App app{"Dynamical low-rank training and integrator studies"};
  app.set_version_flag("--version", kVersion);
  app.set_config("--config", "", "TOML/INI file with one section per subcommand");
  app.allow_config_extras(CLI::config_extras_mode::error);
  app.require_subcommand(1);

  TrainConfig train;
  detail::TrainFlags train_flags;
  auto* cmd_train_app = app.add_subcommand("train", "train an MLP on MNIST");
  cmd_train_app->add_option("--seed", train.seed)->capture_default_str();
  detail::add_train_options(cmd_train_app, train, train_flags, true);

  CompareConfig compare;
  compare.base.out_dir = "runs/compare";
  detail::TrainFlags compare_flags;
  std::vector<std::string> compare_integrators{"psi", "bc-psi", "abc-psi"};
  auto* cmd_compare_app = app.add_subcommand("compare", "train several integrators over several seeds");
  cmd_compare_app->add_option("--integrators", compare_integrators)->delimiter(',')->capture_default_str();
  cmd_compare_app->add_option("--seeds", compare.seeds)->delimiter(',')->capture_default_str();
  detail::add_train_options(cmd_compare_app, compare.base, compare_flags, false);

  OdeBenchConfig ode;
  std::string ode_integrator = "abc-psi", ode_out;
  auto* cmd_ode_app = app.add_subcommand("ode-bench", "error vs step size on a matrix gradient flow");
  cmd_ode_app->add_option("--integrator", ode_integrator)->capture_default_str();
  cmd_ode_app->add_option("--m", ode.m)->capture_default_str();
  cmd_ode_app->add_option("--n", ode.n)->capture_default_str();
  cmd_ode_app->add_option("--rank", ode.rank)->capture_default_str();
  cmd_ode_app->add_option("--eps", ode.eps, "size of the off-manifold part of the target")
      ->capture_default_str();
  cmd_ode_app->add_option("--seed", ode.seed)->capture_default_str();
  cmd_ode_app->add_option("--h-list", ode.h_list)->delimiter(',')->capture_default_str();
  cmd_ode_app->add_option("--t-end", ode.t_end)->capture_default_str();
  cmd_ode_app->add_option("--ref-h", ode.ref_h, "step of the full-matrix reference")
      ->capture_default_str();
  cmd_ode_app->add_option("--tau", ode.tau)->capture_default_str();
  cmd_ode_app->add_option("--r-min", ode.r_min)->capture_default_str();
  cmd_ode_app->add_option("--r-max", ode.r_max, "0: the problem rank")->capture_default_str();
  cmd_ode_app->add_option("--substeps", ode.substeps)->capture_default_str();
  cmd_ode_app->add_option("--out-dir", ode_out);

  DescentAuditConfig audit;
  std::string audit_out;
  auto* cmd_audit_app = app.add_subcommand("descent-audit", "check the per-step descent bound");
  cmd_audit_app->add_option("--m", audit.m)->capture_default_str();
  cmd_audit_app->add_option("--n", audit.n)->capture_default_str();
  cmd_audit_app->add_option("--rank", audit.rank)->capture_default_str();
  cmd_audit_app->add_option("--lr", audit.h, "step size h")->capture_default_str();
  cmd_audit_app->add_option("--steps", audit.steps)->capture_default_str();
  cmd_audit_app->add_option("--seeds", audit.seeds)->delimiter(',')->capture_default_str();
  cmd_audit_app->add_option("--tau", audit.tau)->capture_default_str();
  cmd_audit_app->add_option("--r-min", audit.r_min)->capture_default_str();
  cmd_audit_app->add_option("--r-max", audit.r_max, "0: twice --rank")->capture_default_str();
  cmd_audit_app->add_option("--slack", audit.slack)->capture_default_str();
  cmd_audit_app->add_flag("--stationary", audit.stationary, "use the start point as target");
  cmd_audit_app->add_option("--out-dir", audit_out);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    app.exit(e, out, err);
    // Unreadable config files are I/O problems; everything else is usage.
    return dynamic_cast<const CLI::FileError*>(&e) ? kExitIo : kExitConfig;
  }

  try {
    if (cmd_train_app->parsed()) {
      detail::finish_train(train, train_flags, true);
      return cmd_train(train, out, err);
    }
    if (cmd_compare_app->parsed()) {
      detail::finish_train(compare.base, compare_flags, false);
      compare.integrators.clear();
      for (const auto& s : compare_integrators)
        compare.integrators.push_back(detail::integrator_from(s));
      return cmd_compare(compare, out, err);
    }
    if (cmd_ode_app->parsed()) {
      ode.integrator = detail::integrator_from(ode_integrator);
      if (!ode_out.empty()) ode.out_dir = ode_out;
      return cmd_ode_bench(ode, out, err);
    }
    if (!audit_out.empty()) audit.out_dir = audit_out;
    return cmd_descent_audit(audit, out, err);
  } catch (const config_error& e) {
    err << "config error: " << e.what() << "\n";
    return kExitConfig;
  }
}

}  // namespace dlrt
