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

//
// Experiment drivers behind the `dlrt` command line tool: MNIST training,
// integrator comparison, the matrix-ODE error study and the descent audit.
// Each driver takes a validated config, writes CSV/JSON into its output
// directory and returns a process exit code.
//

#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <fstream>
#include <iostream>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <type_traits>
#include <vector>

#include "json.hpp"

#include "dlrt/checkpoint.hpp"
#include "dlrt/data.hpp"
#include "dlrt/nn.hpp"
#include "dlrt/studies.hpp"

namespace dlrt {

inline constexpr const char* kVersion = "0.1.0";

enum ExitCode : int {
  kExitOk = 0,
  kExitConfig = 1,
  kExitIo = 2,
  kExitDiverged = 3,
  kExitAuditViolation = 4,
};

/// Default data directory: $DLRT_DATA_DIR, else ./data/mnist.
inline std::filesystem::path default_data_dir() {
  if (const char* env = std::getenv("DLRT_DATA_DIR"); env && *env) return env;
  return "data/mnist";
}

struct TrainConfig {
  Integrator integrator = Integrator::abc_psi;
  std::vector<std::size_t> arch{784, 500, 500, 500, 500, 10};
  double lr = 0.01;
  double tau = 0.1;
  std::size_t rank = 20;   // initial rank of every factored layer
  std::size_t r_min = 2;
  std::size_t r_max = 0;   // 0: twice the initial rank
  std::size_t epochs = 20;
  std::size_t batch_size = 64;
  std::uint64_t seed = 1;
  std::size_t train_limit = 0;  // 0: whole training set
  int substeps = 1;
  TruncationCriterion criterion = TruncationCriterion::norm_ratio;
  InitScheme init = InitScheme::aligned;
  std::filesystem::path data_dir = default_data_dir();
  std::filesystem::path out_dir = "runs/train";

  std::size_t effective_r_max() const { return r_max == 0 ? 2 * rank : r_max; }
  StepConfig step() const {
    return {lr, substeps, TruncationPolicy{tau, r_min, effective_r_max(), criterion}};
  }
};

struct CompareConfig {
  TrainConfig base;
  std::vector<Integrator> integrators{Integrator::psi, Integrator::bc_psi, Integrator::abc_psi};
  std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};
};

struct OdeBenchConfig {
  Integrator integrator = Integrator::abc_psi;
  std::size_t m = 50, n = 40, rank = 4;
  double eps = 0.0;
  std::uint64_t seed = 1;
  std::vector<double> h_list{0.1, 0.05, 0.025};
  double t_end = 1.0;
  double ref_h = 1e-4;
  double tau = 0.0;
  std::size_t r_min = 2;
  std::size_t r_max = 0;  // 0: the problem rank
  int substeps = 1;
  std::filesystem::path out_dir = "runs/ode-bench";
};

struct DescentAuditConfig {
  std::size_t m = 50, n = 40, rank = 4;
  double h = 0.5;
  std::size_t steps = 200;
  std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};
  double tau = 0.1;
  std::size_t r_min = 2;
  std::size_t r_max = 0;  // 0: twice the initial rank
  double slack = 1e-9;
  bool stationary = false;  // target equal to the initial point, so ∇ℓ ≡ 0
  std::filesystem::path out_dir = "runs/descent-audit";
};

// ---------------------------------------------------------------- validation

inline void validate(const TrainConfig& c) {
  if (c.arch.size() < 2) throw config_error("arch needs at least two widths");
  for (auto w : c.arch)
    if (w == 0) throw config_error("arch widths must be positive");
  if (!(c.lr > 0) || !std::isfinite(c.lr)) throw config_error("lr must be a positive number");
  if (!(c.tau >= 0) || !std::isfinite(c.tau)) throw config_error("tau must be >= 0");
  if (c.batch_size == 0) throw config_error("batch-size must be at least 1");
  if (c.substeps < 1) throw config_error("substeps must be at least 1");
  if (c.integrator != Integrator::full) {
    if (c.rank == 0) throw config_error("rank must be at least 1");
    if (c.r_min == 0) throw config_error("r-min must be at least 1");
    if (c.effective_r_max() < c.rank)
      throw config_error("r-max (" + std::to_string(c.effective_r_max()) +
                         ") is below the initial rank (" + std::to_string(c.rank) + ")");
    if (c.r_min > c.effective_r_max()) throw config_error("r-min exceeds r-max");
  }
}

inline void validate(const OdeBenchConfig& c) {
  if (c.m == 0 || c.n == 0 || c.rank == 0 || c.rank > std::min(c.m, c.n))
    throw config_error("ode-bench: need 1 <= rank <= min(m, n)");
  if (c.h_list.empty()) throw config_error("ode-bench: empty h-list");
  if (!(c.eps >= 0)) throw config_error("ode-bench: eps must be >= 0");
  if (!(c.tau >= 0)) throw config_error("ode-bench: tau must be >= 0");
  if (c.substeps < 1) throw config_error("ode-bench: substeps must be at least 1");
  for (double h : c.h_list) detail::step_count(c.t_end, h);
  detail::step_count(c.t_end, c.ref_h);
}

inline void validate(const DescentAuditConfig& c) {
  if (c.m == 0 || c.n == 0 || c.rank == 0 || c.rank > std::min(c.m, c.n))
    throw config_error("descent-audit: need 1 <= rank <= min(m, n)");
  if (!(c.h > 0)) throw config_error("descent-audit: h must be > 0");
  if (c.steps == 0) throw config_error("descent-audit: steps must be at least 1");
  if (c.seeds.empty()) throw config_error("descent-audit: no seeds");
  if (!(c.tau >= 0)) throw config_error("descent-audit: tau must be >= 0");
}

// ---------------------------------------------------------------- output helpers

namespace detail {

inline std::string fmt(double v, const char* spec = "%.10g") {
  char buf[64];
  std::snprintf(buf, sizeof buf, spec, v);
  return buf;
}

/// FNV-1a over a canonical key=value rendering.
inline std::string config_hash(const std::map<std::string, std::string>& kv) {
  std::uint64_t h = 1469598103934665603ULL;
  for (const auto& [k, v] : kv) {
    for (char c : k + "=" + v + ";") {
      h ^= static_cast<unsigned char>(c);
      h *= 1099511628211ULL;
    }
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

template <class T>
std::string join(const std::vector<T>& xs, const char* sep = ",") {
  std::ostringstream os;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    if (i) os << sep;
    if constexpr (std::is_same_v<T, double>)
      os << fmt(xs[i]);
    else if constexpr (std::is_same_v<T, Integrator>)
      os << to_string(xs[i]);
    else
      os << xs[i];
  }
  return os.str();
}

inline std::string criterion_name(TruncationCriterion c) {
  return c == TruncationCriterion::norm_ratio ? "norm-ratio" : "squared-tail";
}

inline std::map<std::string, std::string> describe(const TrainConfig& c) {
  return {{"integrator", std::string(to_string(c.integrator))},
          {"arch", join(c.arch, "-")},
          {"lr", fmt(c.lr)},
          {"tau", fmt(c.tau)},
          {"rank", std::to_string(c.rank)},
          {"r_min", std::to_string(c.r_min)},
          {"r_max", std::to_string(c.effective_r_max())},
          {"epochs", std::to_string(c.epochs)},
          {"batch_size", std::to_string(c.batch_size)},
          {"seed", std::to_string(c.seed)},
          {"train_limit", std::to_string(c.train_limit)},
          {"substeps", std::to_string(c.substeps)},
          {"criterion", criterion_name(c.criterion)},
          {"init", c.init == InitScheme::aligned ? "aligned" : "random"}};
}

inline std::map<std::string, std::string> describe(const OdeBenchConfig& c) {
  return {{"integrator", std::string(to_string(c.integrator))},
          {"m", std::to_string(c.m)},
          {"n", std::to_string(c.n)},
          {"rank", std::to_string(c.rank)},
          {"eps", fmt(c.eps)},
          {"seed", std::to_string(c.seed)},
          {"h_list", join(c.h_list, " ")},
          {"t_end", fmt(c.t_end)},
          {"ref_h", fmt(c.ref_h)},
          {"tau", fmt(c.tau)},
          {"r_min", std::to_string(c.r_min)},
          {"r_max", std::to_string(c.r_max == 0 ? c.rank : c.r_max)},
          {"substeps", std::to_string(c.substeps)}};
}

inline std::map<std::string, std::string> describe(const DescentAuditConfig& c) {
  return {{"m", std::to_string(c.m)},
          {"n", std::to_string(c.n)},
          {"rank", std::to_string(c.rank)},
          {"h", fmt(c.h)},
          {"steps", std::to_string(c.steps)},
          {"seeds", join(c.seeds, " ")},
          {"tau", fmt(c.tau)},
          {"r_min", std::to_string(c.r_min)},
          {"r_max", std::to_string(c.r_max == 0 ? 2 * c.rank : c.r_max)},
          {"slack", fmt(c.slack)},
          {"stationary", c.stationary ? "1" : "0"}};
}

inline nlohmann::json to_json(const std::map<std::string, std::string>& kv) {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& [k, v] : kv) j[k] = v;
  return j;
}

/// CSV file whose first line is `#dlrt_version=...;config_hash=...`.
/// Rows are flushed as they are written so an aborted run leaves a usable
/// prefix behind.
class CsvWriter {
 public:
  CsvWriter(const std::filesystem::path& path, const std::string& hash,
            const std::vector<std::string>& columns)
      : out_(path, std::ios::trunc) {
    if (!out_) throw io_error("cannot create " + path.string());
    out_ << "#dlrt_version=" << kVersion << ";config_hash=" << hash << "\n";
    row(columns);
  }
  void row(const std::vector<std::string>& cells) {
    for (std::size_t i = 0; i < cells.size(); ++i) out_ << (i ? "," : "") << cells[i];
    out_ << "\n";
    out_.flush();
    if (!out_) throw io_error("CSV write failed");
  }

 private:
  std::ofstream out_;
};

inline void ensure_dir(const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw io_error("cannot create directory " + dir.string() + ": " + ec.message());
}

inline void write_json(const std::filesystem::path& path, const nlohmann::json& j) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw io_error("cannot create " + path.string());
  out << j.dump(2) << "\n";
  if (!out) throw io_error("write failed: " + path.string());
}

}  // namespace detail

// ---------------------------------------------------------------- training

enum class RunStatus { ok, diverged };

inline std::string to_string(RunStatus s) { return s == RunStatus::ok ? "ok" : "diverged"; }

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0;
  double test_accuracy = 0;
  std::vector<std::size_t> ranks;
  std::size_t param_count = 0;
  double compression_rate = 0;
};

struct TrainResult {
  RunStatus status = RunStatus::ok;
  std::vector<EpochRecord> history;
  std::string divergence;  // what tripped the detector
  double seconds = 0;
  Network network;

  const EpochRecord& last() const { return history.back(); }
};

inline constexpr double kDivergenceCoreNorm = 1e12;

inline std::vector<std::size_t> factored_ranks(const Network& net) {
  std::vector<std::size_t> r;
  for (const auto& l : net.layers)
    if (l.kind == LayerKind::lowrank) r.push_back(l.rank());
  return r;
}

/// Number of training images the aligned initialization looks at.
inline constexpr std::size_t kInitSampleSize = 5000;

inline Network build_network(const TrainConfig& cfg, const Matrix* input_sample = nullptr) {
  const auto specs = mlp_specs(cfg.arch, cfg.rank, cfg.integrator != Integrator::full);
  return init_network(specs, cfg.seed, cfg.init, input_sample);
}

/// The training loop. Epoch 0 is the untrained network: its train_loss is a
/// forward pass over the whole training set. Later rows report the mean
/// pre-step batch loss of that epoch. `csv` (optional) receives each row as
/// soon as it exists; `log` gets one progress line per epoch. `stop`, when
/// set, is asked after every epoch whether to end the run early.
inline TrainResult train_run(const TrainConfig& cfg, const MnistSplits& data,
                             const std::filesystem::path* csv = nullptr,
                             std::ostream* log = nullptr,
                             const std::function<bool(const EpochRecord&)>& stop = {}) {
  validate(cfg);
  if (data.train.images.cols() != cfg.arch.front())
    throw config_error("arch input width " + std::to_string(cfg.arch.front()) +
                       " does not match the data (" + std::to_string(data.train.images.cols()) + ")");
  if (cfg.arch.back() < kNumClasses) throw config_error("arch output width must be at least 10");

  const auto t0 = std::chrono::steady_clock::now();
  TrainResult res;
  {
    std::vector<std::size_t> head(std::min(kInitSampleSize, data.train.size()));
    std::iota(head.begin(), head.end(), std::size_t{0});
    const Matrix sample = gather_rows(data.train.images, head);
    res.network = build_network(cfg, &sample);
  }
  Network& net = res.network;
  const StepConfig step = cfg.step();

  std::optional<detail::CsvWriter> writer;
  if (csv) {
    std::vector<std::string> cols{"epoch", "train_loss", "test_accuracy"};
    for (std::size_t i = 0; i < net.lowrank_count(); ++i) cols.push_back("rank_" + std::to_string(i));
    cols.push_back("param_count");
    cols.push_back("compression_rate");
    writer.emplace(*csv, detail::config_hash(detail::describe(cfg)), cols);
  }

  auto record = [&](std::size_t epoch, double train_loss) {
    EpochRecord r{epoch, train_loss, evaluate(net, data.test.images, data.test.labels).accuracy,
                  factored_ranks(net), network_param_count(net), network_compression_rate(net)};
    if (writer) {
      std::vector<std::string> cells{std::to_string(r.epoch), detail::fmt(r.train_loss),
                                     detail::fmt(r.test_accuracy)};
      for (auto k : r.ranks) cells.push_back(std::to_string(k));
      cells.push_back(std::to_string(r.param_count));
      cells.push_back(detail::fmt(r.compression_rate));
      writer->row(cells);
    }
    if (log)
      *log << "epoch " << r.epoch << "  loss " << detail::fmt(r.train_loss, "%.5f") << "  acc "
           << detail::fmt(100.0 * r.test_accuracy, "%.2f") << "%  ranks [" << detail::join(r.ranks)
           << "]  compression " << detail::fmt(r.compression_rate, "%.2f") << "%" << std::endl;
    res.history.push_back(std::move(r));
  };

  record(0, evaluate(net, data.train.images, data.train.labels).loss);

  const std::size_t n = data.train.size();
  for (std::size_t epoch = 1; epoch <= cfg.epochs && res.status == RunStatus::ok; ++epoch) {
    double loss_sum = 0.0;
    for (const auto& idx : batches(n, cfg.batch_size, cfg.seed, epoch)) {
      const Matrix x = gather_rows(data.train.images, idx);
      const auto y = gather_labels(data.train.labels, idx);
      double loss = 0.0;
      try {
        loss = train_step(net, x, y, cfg.integrator, step);
      } catch (const numeric_error& e) {
        res.status = RunStatus::diverged;
        res.divergence = e.what();
        break;
      }
      if (!std::isfinite(loss)) {
        res.status = RunStatus::diverged;
        res.divergence = "non-finite batch loss";
        break;
      }
      if (max_core_norm(net) > kDivergenceCoreNorm) {
        res.status = RunStatus::diverged;
        res.divergence = "core norm above 1e12";
        break;
      }
      loss_sum += loss * static_cast<double>(idx.size());
    }
    if (res.status != RunStatus::ok) {
      if (log) *log << "epoch " << epoch << " diverged: " << res.divergence << std::endl;
      break;
    }
    record(epoch, loss_sum / static_cast<double>(n));
    if (stop && stop(res.history.back())) break;
  }
  res.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return res;
}

inline nlohmann::json summarize(const TrainConfig& cfg, const TrainResult& r) {
  nlohmann::json j;
  j["version"] = kVersion;
  j["config"] = detail::to_json(detail::describe(cfg));
  j["config_hash"] = detail::config_hash(detail::describe(cfg));
  j["status"] = to_string(r.status);
  if (r.status == RunStatus::diverged) j["divergence"] = r.divergence;
  j["epochs_completed"] = r.history.empty() ? 0 : r.last().epoch;
  if (!r.history.empty()) {
    j["test_accuracy"] = r.last().test_accuracy;
    j["train_loss"] = r.last().train_loss;
    j["ranks"] = r.last().ranks;
    j["param_count"] = r.last().param_count;
    j["compression_rate"] = r.last().compression_rate;
  }
  j["seconds"] = r.seconds;
  return j;
}

inline MnistSplits load_training_data(const TrainConfig& cfg) {
  return load_mnist(cfg.data_dir, cfg.train_limit ? std::optional(cfg.train_limit) : std::nullopt);
}

/// `train`: writes train.csv, final.ckpt and summary.json into out_dir.
inline int cmd_train(const TrainConfig& cfg, std::ostream& out = std::cout,
                     std::ostream& err = std::cerr) {
  try {
    validate(cfg);
    const MnistSplits data = load_training_data(cfg);
    detail::ensure_dir(cfg.out_dir);
    const auto csv = cfg.out_dir / "train.csv";
    TrainResult r = train_run(cfg, data, &csv, &out);
    save_network(cfg.out_dir / "final.ckpt", r.network);
    detail::write_json(cfg.out_dir / "summary.json", summarize(cfg, r));
    out << "train " << to_string(cfg.integrator) << " seed " << cfg.seed << ": " << to_string(r.status)
        << ", test accuracy " << detail::fmt(100.0 * r.last().test_accuracy, "%.2f")
        << "%, params " << r.last().param_count << ", compression "
        << detail::fmt(r.last().compression_rate, "%.2f") << "%, " << detail::fmt(r.seconds, "%.1f")
        << " s" << std::endl;
    return r.status == RunStatus::ok ? kExitOk : kExitDiverged;
  } catch (const config_error& e) {
    err << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const io_error& e) {
    err << "I/O error: " << e.what() << "\n";
    return kExitIo;
  } catch (const format_error& e) {
    err << "data error: " << e.what() << "\n";
    return kExitIo;
  }
}

// ---------------------------------------------------------------- compare

struct CompareRow {
  Integrator integrator;
  std::uint64_t seed;
  RunStatus status;
  double test_accuracy;
  std::size_t param_count;
  double compression_rate;
  std::vector<std::size_t> ranks;
};

struct CompareSummary {
  Integrator integrator;
  std::size_t runs = 0, diverged = 0;
  double mean_accuracy = 0, std_accuracy = 0;  // over converged runs, population std
  double mean_params = 0;
};

inline std::vector<CompareSummary> summarize_compare(const std::vector<CompareRow>& rows,
                                                     const std::vector<Integrator>& order) {
  std::vector<CompareSummary> out;
  for (auto it : order) {
    CompareSummary s{it};
    std::vector<double> acc;
    double params = 0.0;
    for (const auto& r : rows) {
      if (r.integrator != it) continue;
      ++s.runs;
      if (r.status != RunStatus::ok) {
        ++s.diverged;
        continue;
      }
      acc.push_back(r.test_accuracy);
      params += static_cast<double>(r.param_count);
    }
    if (!acc.empty()) {
      for (double a : acc) s.mean_accuracy += a / static_cast<double>(acc.size());
      for (double a : acc)
        s.std_accuracy += (a - s.mean_accuracy) * (a - s.mean_accuracy) / static_cast<double>(acc.size());
      s.std_accuracy = std::sqrt(s.std_accuracy);
      s.mean_params = params / static_cast<double>(acc.size());
    }
    out.push_back(s);
  }
  return out;
}

/// `compare`: one training run per (integrator, seed). Fixed-rank methods
/// use the configured rank throughout. Writes compare.csv with one row per
/// run followed by one summary row per integrator; diverged runs are
/// reported and excluded from the statistics.
inline int cmd_compare(const CompareConfig& cfg, std::ostream& out = std::cout,
                       std::ostream& err = std::cerr) {
  try {
    if (cfg.integrators.empty()) throw config_error("compare: no integrators");
    if (cfg.seeds.empty()) throw config_error("compare: no seeds");
    validate(cfg.base);
    const MnistSplits data = load_training_data(cfg.base);
    detail::ensure_dir(cfg.base.out_dir);

    auto kv = detail::describe(cfg.base);
    kv.erase("integrator");
    kv.erase("seed");
    kv["integrators"] = detail::join(cfg.integrators, " ");
    kv["seeds"] = detail::join(cfg.seeds, " ");
    detail::CsvWriter csv(cfg.base.out_dir / "compare.csv", detail::config_hash(kv),
                          {"kind", "integrator", "seed", "status", "test_accuracy", "std_accuracy",
                           "param_count", "compression_rate", "ranks", "runs", "diverged"});

    std::vector<CompareRow> rows;
    nlohmann::json runs = nlohmann::json::array();
    for (auto it : cfg.integrators) {
      for (auto seed : cfg.seeds) {
        TrainConfig c = cfg.base;
        c.integrator = it;
        c.seed = seed;
        c.out_dir = cfg.base.out_dir / (std::string(to_string(it)) + "_seed" + std::to_string(seed));
        detail::ensure_dir(c.out_dir);
        const auto run_csv = c.out_dir / "train.csv";
        TrainResult r = train_run(c, data, &run_csv, nullptr);
        detail::write_json(c.out_dir / "summary.json", summarize(c, r));
        const auto& last = r.last();
        rows.push_back({it, seed, r.status, last.test_accuracy, last.param_count,
                        last.compression_rate, last.ranks});
        csv.row({"run", std::string(to_string(it)), std::to_string(seed), to_string(r.status),
                 detail::fmt(last.test_accuracy), "", std::to_string(last.param_count),
                 detail::fmt(last.compression_rate), detail::join(last.ranks, " "), "1",
                 r.status == RunStatus::ok ? "0" : "1"});
        runs.push_back(summarize(c, r));
        out << to_string(it) << " seed " << seed << ": " << to_string(r.status) << " acc "
            << detail::fmt(100.0 * last.test_accuracy, "%.2f") << "% params " << last.param_count
            << std::endl;
      }
    }

    nlohmann::json summary = nlohmann::json::array();
    out << "\nintegrator      acc. (%)            params    diverged\n";
    for (const auto& s : summarize_compare(rows, cfg.integrators)) {
      csv.row({"summary", std::string(to_string(s.integrator)), "", s.diverged == s.runs ? "diverged" : "ok",
               detail::fmt(s.mean_accuracy), detail::fmt(s.std_accuracy),
               detail::fmt(s.mean_params, "%.1f"), "", "", std::to_string(s.runs),
               std::to_string(s.diverged)});
      char line[160];
      std::snprintf(line, sizeof line, "%-14s  %7.3f +- %-7.3f  %9.0f  %zu/%zu\n",
                    std::string(to_string(s.integrator)).c_str(), 100.0 * s.mean_accuracy,
                    100.0 * s.std_accuracy, s.mean_params, s.diverged, s.runs);
      out << line;
      summary.push_back({{"integrator", to_string(s.integrator)},
                         {"mean_accuracy", s.mean_accuracy},
                         {"std_accuracy", s.std_accuracy},
                         {"mean_params", s.mean_params},
                         {"runs", s.runs},
                         {"diverged", s.diverged}});
    }
    detail::write_json(cfg.base.out_dir / "summary.json",
                       {{"version", kVersion},
                        {"config", detail::to_json(kv)},
                        {"config_hash", detail::config_hash(kv)},
                        {"runs", runs},
                        {"summary", summary}});
    return kExitOk;
  } catch (const config_error& e) {
    err << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const io_error& e) {
    err << "I/O error: " << e.what() << "\n";
    return kExitIo;
  } catch (const format_error& e) {
    err << "data error: " << e.what() << "\n";
    return kExitIo;
  }
}

// ---------------------------------------------------------------- ode-bench

/// An observed order below this marks a row as sitting on the error floor.
inline constexpr double kPlateauOrder = 0.5;

inline std::vector<OdeStudyRow> run_ode_bench(const OdeBenchConfig& c) {
  validate(c);
  auto setup = make_quadratic_ode_problem(c.m, c.n, c.rank, c.eps, c.seed);
  const QuadraticLoss loss = setup.loss;
  OdeProblem problem{[loss](const Matrix& y) { return loss.gradient(y); }, setup.initial};
  const TruncationPolicy policy{c.tau, std::min(c.r_min, c.rank), c.r_max == 0 ? c.rank : c.r_max};
  return ode_error_study(problem, c.integrator, c.h_list, c.t_end, c.ref_h, policy, c.substeps);
}

/// `ode-bench`: writes ode_bench.csv (h, steps, error, order, plateau, rank)
/// and summary.json.
inline int cmd_ode_bench(const OdeBenchConfig& c, std::ostream& out = std::cout,
                         std::ostream& err = std::cerr) {
  try {
    validate(c);
    detail::ensure_dir(c.out_dir);
    const auto rows = run_ode_bench(c);
    const auto kv = detail::describe(c);
    detail::CsvWriter csv(c.out_dir / "ode_bench.csv", detail::config_hash(kv),
                          {"h", "steps", "error", "order", "plateau", "final_rank"});
    nlohmann::json jrows = nlohmann::json::array();
    bool any_plateau = false;
    for (const auto& r : rows) {
      const bool plateau = r.order && *r.order < kPlateauOrder;
      any_plateau = any_plateau || plateau;
      csv.row({detail::fmt(r.h), std::to_string(r.steps), detail::fmt(r.error, "%.6e"),
               r.order ? detail::fmt(*r.order, "%.4f") : "", plateau ? "1" : "0",
               std::to_string(r.final_rank)});
      out << "h=" << detail::fmt(r.h) << "  error=" << detail::fmt(r.error, "%.3e")
          << (r.order ? "  order=" + detail::fmt(*r.order, "%.3f") : std::string())
          << (plateau ? "  (plateau)" : "") << "\n";
      nlohmann::json jr{{"h", r.h}, {"steps", r.steps}, {"error", r.error}, {"plateau", plateau},
                        {"final_rank", r.final_rank}};
      if (r.order) jr["order"] = *r.order;
      jrows.push_back(jr);
    }
    if (any_plateau) out << "error floor reached: refining h no longer reduces the error\n";
    detail::write_json(c.out_dir / "summary.json", {{"version", kVersion},
                                                    {"config", detail::to_json(kv)},
                                                    {"config_hash", detail::config_hash(kv)},
                                                    {"rows", jrows},
                                                    {"plateau", any_plateau}});
    return kExitOk;
  } catch (const config_error& e) {
    err << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const io_error& e) {
    err << "I/O error: " << e.what() << "\n";
    return kExitIo;
  }
}

// ---------------------------------------------------------------- descent-audit

/// ℓ(Y) = ½‖Y − A‖² with a full-rank Gaussian A (scaled to unit RMS entry)
/// and a random rank-r start, so every step has a normal component to pick
/// up. With `stationary` the target is the start itself.
inline QuadraticOdeSetup make_descent_problem(std::size_t m, std::size_t n, std::size_t r,
                                              std::uint64_t seed, bool stationary = false) {
  LowRankState y0 = init_lowrank(m, n, r, seed, 1.0);
  y0.s *= std::sqrt(static_cast<double>(m * n) / static_cast<double>(r));
  if (stationary) return {QuadraticLoss(y0.dense()), y0};
  std::mt19937_64 rng(seed ^ 0xD1B54A32D192ED03ULL);
  return {QuadraticLoss(Matrix::gaussian(m, n, rng)), std::move(y0)};
}

struct DescentAuditRow {
  std::uint64_t seed;
  std::size_t step;
  DescentRecord record;
};

struct DescentAuditResult {
  std::vector<DescentAuditRow> rows;
  double worst_slack = -std::numeric_limits<double>::infinity();
  std::size_t violations = 0;
  bool guaranteed = true;  // h ≤ 2/c_l
  // S-step loss change of PSI at h and h/2 (first seed's start point).
  SStepLossDelta s_delta_h, s_delta_half;
};

inline DescentAuditResult run_descent_audit(const DescentAuditConfig& c) {
  validate(c);
  DescentAuditResult res;
  res.guaranteed = c.h <= 2.0 / QuadraticLoss::lipschitz();
  const TruncationPolicy policy{c.tau, std::min(c.r_min, c.rank), c.r_max == 0 ? 2 * c.rank : c.r_max};
  const StepConfig cfg{c.h, 1, policy};
  for (auto seed : c.seeds) {
    auto setup = make_descent_problem(c.m, c.n, c.rank, seed, c.stationary);
    LowRankState y = setup.initial;
    for (std::size_t t = 1; t <= c.steps; ++t) {
      auto [next, rec] = audited_abc_step(y, setup.loss, cfg, QuadraticLoss::lipschitz());
      res.worst_slack = std::max(res.worst_slack, rec.slack());
      if (rec.slack() > c.slack) ++res.violations;
      res.rows.push_back({seed, t, std::move(rec)});
      y = std::move(next);
    }
  }
  auto setup = make_descent_problem(c.m, c.n, c.rank, c.seeds.front(), c.stationary);
  res.s_delta_h = s_step_loss_delta_psi(setup.initial, setup.loss, StepConfig{c.h, 1, policy});
  res.s_delta_half = s_step_loss_delta_psi(setup.initial, setup.loss, StepConfig{c.h / 2, 1, policy});
  return res;
}

/// `descent-audit`: writes descent_audit.csv (one row per step) and
/// summary.json. A violation beyond the slack fails the run only when the
/// step size is inside the guaranteed range.
inline int cmd_descent_audit(const DescentAuditConfig& c, std::ostream& out = std::cout,
                             std::ostream& err = std::cerr) {
  try {
    validate(c);
    detail::ensure_dir(c.out_dir);
    const auto res = run_descent_audit(c);
    const auto kv = detail::describe(c);
    detail::CsvWriter csv(c.out_dir / "descent_audit.csv", detail::config_hash(kv),
                          {"seed", "step", "loss_before", "loss_hat", "bound", "slack", "loss_after",
                           "projected_grad_norm", "rank"});
    for (const auto& r : res.rows)
      csv.row({std::to_string(r.seed), std::to_string(r.step), detail::fmt(r.record.loss_before, "%.17g"),
               detail::fmt(r.record.loss_hat, "%.17g"), detail::fmt(r.record.bound, "%.17g"),
               detail::fmt(r.record.slack(), "%.6e"), detail::fmt(r.record.loss_after, "%.17g"),
               detail::fmt(r.record.projected_grad_norm, "%.6e"), std::to_string(r.record.rank)});

    if (!res.guaranteed)
      out << "warning: h = " << detail::fmt(c.h) << " exceeds 2/c_l = 2; descent is not guaranteed\n";
    for (const auto& r : res.rows)
      if (r.record.slack() > c.slack)
        out << "violation: seed " << r.seed << " step " << r.step << " slack "
            << detail::fmt(r.record.slack(), "%.3e") << "\n";
    out << res.rows.size() << " steps audited, worst slack " << detail::fmt(res.worst_slack, "%.3e")
        << ", " << res.violations << " violation(s)\n";
    const double d1 = res.s_delta_h.delta(), d2 = res.s_delta_half.delta();
    out << "PSI S-step loss change: " << detail::fmt(d1, "%.6e") << " at h, " << detail::fmt(d2, "%.6e")
        << " at h/2" << (d2 != 0 ? ", ratio " + detail::fmt(d1 / d2, "%.4f") : std::string()) << "\n";

    const bool failed = res.violations > 0 && res.guaranteed;
    detail::write_json(c.out_dir / "summary.json",
                       {{"version", kVersion},
                        {"config", detail::to_json(kv)},
                        {"config_hash", detail::config_hash(kv)},
                        {"steps", res.rows.size()},
                        {"worst_slack", res.worst_slack},
                        {"violations", res.violations},
                        {"guaranteed", res.guaranteed},
                        {"s_step_delta_h", d1},
                        {"s_step_delta_half_h", d2},
                        {"status", failed ? "violation" : "ok"}});
    return failed ? kExitAuditViolation : kExitOk;
  } catch (const config_error& e) {
    err << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const io_error& e) {
    err << "I/O error: " << e.what() << "\n";
    return kExitIo;
  }
}

}  // namespace dlrt
