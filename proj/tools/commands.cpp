// Copyright 2026 The qmem Authors
// SPDX-License-Identifier: Apache-2.0

#include "commands.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <exception>
#include <iomanip>
#include <mutex>
#include <ostream>
#include <sstream>
#include <thread>
#include <tuple>

#include <CLI11.hpp>
#include <json.hpp>

#include "qmem/analytics.hpp"
#include "qmem/benchmarks.hpp"
#include "qmem/io.hpp"
#include "qmem/sweep.hpp"
#include "qmem/theory_suite.hpp"

namespace qmem::cli {

namespace fs = std::filesystem;
using nlohmann::ordered_json;

fs::path default_out(const std::string& command) {
  const char* root = std::getenv(kOutRootEnv);
  const fs::path base = root && *root ? fs::path(root) : fs::path("qmem-out");
  return base / command;
}

namespace {

std::string fmt(double x, int prec = 6) {
  std::ostringstream os;
  os << std::setprecision(prec) << x;
  return os.str();
}

std::string run_stem(const RunRecord& r) {
  return slug(r.function) + "_" + r.method + "_seed" + std::to_string(r.seed);
}

void write_config(const RunConfig& cfg) { write_file(fs::path(cfg.out) / "config.toml", config_to_text(cfg)); }

void write_table(const BenchmarkTable& table, const fs::path& dir) {
  write_file(dir / "table_train.csv", table_csv(table, "train"));
  write_file(dir / "table_test.csv", table_csv(table, "test"));
  write_file(dir / "table.json", table_json(table));
}

void print_table(const BenchmarkTable& table, std::ostream& out) {
  out << "| function | method | train mean | train sd | test mean | test sd | runs |\n";
  out << "|---|---|---|---|---|---|---|\n";
  for (const TableRow& r : table.rows) {
    out << "| " << r.function << " | " << r.method << " | " << fmt(r.train_mean) << " | " << fmt(r.train_sd)
        << " | " << fmt(r.test_mean) << " | " << fmt(r.test_sd) << " | " << r.runs << " |\n";
  }
}

// Runs fn(i) for i in [0, n) on up to `jobs` threads; rethrows the first failure.
template <typename F>
void parallel_for(std::size_t n, int jobs, F fn) {
  std::atomic<std::size_t> next{0};
  std::mutex mu;
  std::exception_ptr failure;
  auto worker = [&] {
    for (;;) {
      const std::size_t i = next.fetch_add(1);
      if (i >= n) return;
      try {
        fn(i);
      } catch (...) {
        std::lock_guard<std::mutex> lock(mu);
        if (!failure) failure = std::current_exception();
      }
    }
  };
  const int t = std::max(1, std::min<int>(jobs, static_cast<int>(n)));
  if (t == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int k = 0; k < t; ++k) pool.emplace_back(worker);
    for (std::thread& th : pool) th.join();
  }
  if (failure) std::rethrow_exception(failure);
}

}  // namespace

int cmd_bench(const RunConfig& cfg, std::ostream& out, std::ostream& log) {
  const fs::path dir(cfg.out);
  write_config(cfg);
  std::mutex mu;
  const ProgressFn progress = [&](const std::vector<RunRecord>& recs) {
    std::lock_guard<std::mutex> lock(mu);
    for (const RunRecord& r : recs) {
      log << "done " << r.function << " " << r.method << " seed " << r.seed << " best train "
          << fmt(r.best_train_mse) << (r.diverged ? " (diverged)" : "") << "\n";
    }
  };
  const BenchmarkTable table =
      run_protocol(cfg.protocol, cfg.functions, cfg.methods, cfg.seeds, cfg.jobs, progress);
  for (const RunRecord& r : table.runs) {
    write_file(dir / "runs" / (run_stem(r) + ".json"), run_record_json(r));
    write_file(dir / "runs" / (run_stem(r) + "_epochs.csv"), epochs_csv(r.report));
  }
  write_table(table, dir);
  print_table(table, out);
  out << table.runs.size() << " runs written to " << dir.string() << "\n";
  return kExitOk;
}

int cmd_theory(const RunConfig& cfg, std::ostream& out, std::ostream& log) {
  const fs::path dir(cfg.out);
  write_config(cfg);
  TheoryConfig tc = cfg.theory;
  tc.seed = cfg.seeds.front();
  log << "theory suite: seed " << tc.seed << ", " << tc.trials << " trials\n";
  const TheoremReport rep = run_theory_suite(tc);
  write_file(dir / "theory_report.json", report_to_json(rep, tc));
  std::ostringstream csv;
  csv << "check,name,trials,discarded,max_violation,min_slack,tolerance,passed\n";
  for (const CheckResult& c : rep.checks) {
    csv << c.check << "," << c.name << "," << c.trials << "," << c.discarded << "," << format_double(c.max_violation)
        << "," << format_double(c.min_slack) << "," << format_double(c.tolerance) << ","
        << (c.passed ? "true" : "false") << "\n";
    out << (c.passed ? "PASS " : "FAIL ") << c.name << "  trials=" << c.trials << " max_violation="
        << fmt(c.max_violation, 3) << " tol=" << fmt(c.tolerance, 3) << "\n";
  }
  write_file(dir / "theory_checks.csv", csv.str());
  const bool ok = rep.passed();
  out << (ok ? "all theory checks passed" : "theory checks FAILED") << "\n";
  return ok ? kExitOk : kExitTheory;
}

int cmd_sweep(const RunConfig& cfg, std::ostream& out, std::ostream& log) {
  const fs::path dir(cfg.out);
  write_config(cfg);
  const std::vector<SweepPoint> pts = sweep_points(cfg.sweep, cfg.methods);
  log << "sweep: " << pts.size() << " grid points x " << cfg.functions.size() << " functions x "
      << cfg.seeds.size() << " seeds\n";
  std::mutex mu;
  const ProgressFn progress = [&](const std::vector<RunRecord>& recs) {
    std::lock_guard<std::mutex> lock(mu);
    for (const RunRecord& r : recs) log << "done " << r.function << " " << r.method << " seed " << r.seed << "\n";
  };
  const std::vector<SweepRow> rows = run_sweep(cfg, progress);
  write_file(dir / "sweep.csv", sweep_csv(rows));
  out << "| function | method | r | M | k | params | train mean | dominated |\n|---|---|---|---|---|---|---|---|\n";
  for (const SweepRow& r : rows) {
    out << "| " << r.function << " | " << method_name(r.point.method) << " | " << r.point.rank << " | "
        << r.point.atoms << " | " << r.point.k_active << " | " << r.params << " | " << fmt(r.train_mean)
        << " | " << (r.dominated ? "yes" : "no") << " |\n";
  }
  return kExitOk;
}

namespace {

struct DriftOutcome {
  std::uint64_t seed = 0;
  DriftRecord record;
};

std::vector<std::string> atom_labels(Eigen::Index n) {
  std::vector<std::string> out;
  for (Eigen::Index m = 0; m < n; ++m) out.push_back("atom" + std::to_string(m));
  return out;
}

std::vector<std::string> transition_labels(const DriftRecord& d) {
  std::vector<std::string> out;
  for (std::size_t s = 1; s < d.stages.size(); ++s) {
    out.push_back("stage" + std::to_string(s - 1) + "->stage" + std::to_string(s));
  }
  return out;
}

void write_drift(const DriftRecord& d, const fs::path& dir) {
  const std::size_t nstage = d.stages.size();
  ordered_json summary;
  summary["format"] = "qmem.drift";
  summary["version"] = 1;
  summary["stages"] = d.stages;
  summary["tasks"] = d.tasks;
  ordered_json mse = ordered_json::array();
  std::ostringstream mcsv;
  mcsv << "stage,trained_task,train_mse\n";
  for (std::size_t s = 0; s < nstage; ++s) {
    mcsv << s << "," << d.stages[s] << "," << format_double(d.stage_mse[s]) << "\n";
    mse.push_back(std::isfinite(d.stage_mse[s]) ? ordered_json(d.stage_mse[s]) : ordered_json(format_double(d.stage_mse[s])));
  }
  summary["stage_mse"] = mse;
  write_file(dir / "stage_mse.csv", mcsv.str());

  for (std::size_t s = 0; s < nstage; ++s) {
    const UsageMatrix& u = d.usage[s];
    const std::string tag = "stage" + std::to_string(s);
    write_file(dir / ("usage_" + tag + ".csv"), matrix_csv(u.cells, u.labels, atom_labels(u.cells.cols()), "task"));
    write_file(dir / ("kl_" + tag + ".csv"), matrix_csv(symmetric_kl(u), u.labels, u.labels, "task"));
    if (u.labels.size() >= 2) {
      const UsageEntropy h = usage_entropy(u);
      std::ostringstream os;
      os << "atom,entropy,unused\n";
      for (Eigen::Index m = 0; m < h.entropy.size(); ++m) {
        os << m << "," << format_double(h.entropy[m]) << "," << (h.unused[static_cast<std::size_t>(m)] ? "true" : "false")
           << "\n";
      }
      write_file(dir / ("entropy_" + tag + ".csv"), os.str());
    }
  }
  std::vector<std::string> stage_labels;
  for (std::size_t s = 0; s < nstage; ++s) stage_labels.push_back("stage" + std::to_string(s));
  for (std::size_t t = 0; t < d.tasks.size(); ++t) {
    write_file(dir / ("route_drift_" + slug(d.tasks[t]) + ".csv"),
               matrix_csv(route_drift(d, static_cast<int>(t)), stage_labels, stage_labels, "stage"));
  }
  const Mat sd = stage_drift(d);
  const std::vector<std::string> trans = transition_labels(d);
  write_file(dir / "stage_drift.csv", matrix_csv(sd, d.tasks, trans, "task"));

  // Atoms whose usage moved most between consecutive stages.
  ordered_json top = ordered_json::array();
  for (std::size_t t = 0; t < d.tasks.size(); ++t) {
    for (std::size_t s = 1; s < nstage; ++s) {
      const Vec delta = d.usage[s].cells.row(static_cast<Eigen::Index>(t)) -
                        d.usage[s - 1].cells.row(static_cast<Eigen::Index>(t));
      std::vector<int> idx(static_cast<std::size_t>(delta.size()));
      for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<int>(i);
      std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) { return std::abs(delta[a]) > std::abs(delta[b]); });
      ordered_json atoms = ordered_json::array();
      for (std::size_t i = 0; i < std::min<std::size_t>(3, idx.size()); ++i) {
        atoms.push_back({{"atom", idx[i]}, {"delta", delta[idx[i]]}});
      }
      top.push_back({{"task", d.tasks[t]},
                     {"transition", trans[s - 1]},
                     {"drift", sd(static_cast<Eigen::Index>(t), static_cast<Eigen::Index>(s - 1))},
                     {"top_atoms", atoms}});
    }
  }
  summary["stage_drift"] = top;
  summary["max_stage_drift"] = sd.size() ? sd.maxCoeff() : 0.0;
  write_file(dir / "drift.json", summary.dump(2) + "\n");
}

}  // namespace

SequentialConfig sequential_config(const RunConfig& cfg) {
  SequentialConfig sc;
  sc.model = cfg.protocol.model;
  sc.model.method = Method::kQueryable;
  sc.schedule = cfg.protocol.schedule;
  sc.schedule.post_epochs = cfg.drift.epochs;
  sc.source = make_function(cfg.drift.function);
  sc.n_source = cfg.drift.n_source;
  sc.n_train = cfg.drift.n_train;
  sc.n_eval = cfg.drift.n_eval;
  sc.noise_sd = cfg.protocol.noise_sd;
  return sc;
}

std::vector<SequentialTask> drift_tasks(const RunConfig& cfg, std::uint64_t seed) {
  std::vector<SequentialTask> tasks = default_sequence(make_function(cfg.drift.function), seed);
  if (cfg.drift.repeat) tasks = {tasks[0], tasks[0]};
  return tasks;
}

int cmd_drift(const RunConfig& cfg, std::ostream& out, std::ostream& log) {
  const fs::path dir(cfg.out);
  write_config(cfg);
  const SequentialConfig sc = sequential_config(cfg);

  std::vector<DriftOutcome> results(cfg.seeds.size());
  std::mutex mu;
  parallel_for(cfg.seeds.size(), cfg.jobs, [&](std::size_t i) {
    const std::uint64_t seed = cfg.seeds[i];
    results[i] = {seed, sequential_protocol(sc, drift_tasks(cfg, seed), seed)};
    std::lock_guard<std::mutex> lock(mu);
    log << "drift seed " << seed << " done\n";
  });

  std::ostringstream all;
  all << "seed,task,transition,drift\n";
  double worst = 0.0;
  for (const DriftOutcome& r : results) {
    write_drift(r.record, dir / ("seed" + std::to_string(r.seed)));
    const Mat sd = stage_drift(r.record);
    const std::vector<std::string> trans = transition_labels(r.record);
    for (Eigen::Index t = 0; t < sd.rows(); ++t) {
      for (Eigen::Index s = 0; s < sd.cols(); ++s) {
        all << r.seed << "," << r.record.tasks[static_cast<std::size_t>(t)] << "," << trans[static_cast<std::size_t>(s)]
            << "," << format_double(sd(t, s)) << "\n";
        worst = std::max(worst, sd(t, s));
      }
    }
  }
  write_file(dir / "drift_summary.csv", all.str());
  out << "drift: " << results.size() << " seeds, " << (cfg.drift.repeat ? "repeated task" : "three shifted tasks")
      << ", max consecutive-stage symmetric KL " << fmt(worst) << "\n";
  return kExitOk;
}

int cmd_report(const fs::path& bench_dir, const fs::path& out_dir, std::ostream& out, std::ostream& log) {
  const fs::path runs_dir = bench_dir / "runs";
  if (!fs::is_directory(runs_dir)) throw IoError("report: no runs directory in " + bench_dir.string());
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(runs_dir)) {
    if (e.is_regular_file() && e.path().extension() == ".json") files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  if (files.empty()) throw IoError("report: no run records in " + runs_dir.string());
  std::vector<RunRecord> runs;
  for (const fs::path& f : files) runs.push_back(run_record_from_json(read_file(f)));
  // Benchmark order: function, then seed, then method.
  const auto& names = function_names();
  auto key = [&](const RunRecord& r) {
    const auto f = std::find(names.begin(), names.end(), r.function) - names.begin();
    return std::make_tuple(f, r.function, r.seed, r.method == method_name(Method::kQueryable) ? 0 : 1, r.method);
  };
  std::stable_sort(runs.begin(), runs.end(), [&](const RunRecord& a, const RunRecord& b) { return key(a) < key(b); });
  log << "report: " << runs.size() << " run records\n";

  if (fs::is_regular_file(bench_dir / "config.toml")) {
    write_file(out_dir / "config.toml", read_file(bench_dir / "config.toml"));
  }
  std::ostringstream conc;
  conc << "function,method,seed,epochs,mean_concentration,final_concentration\n";
  for (const RunRecord& r : runs) {
    const GradProfile p = grad_profile(r.report);
    write_file(out_dir / "grad_profile" / (run_stem(r) + ".csv"), grad_profile_csv(p));
    double mean = 0.0;
    for (double c : p.concentration) mean += c;
    if (!p.concentration.empty()) mean /= static_cast<double>(p.concentration.size());
    conc << r.function << "," << r.method << "," << r.seed << "," << p.epochs.size() << "," << format_double(mean)
         << "," << format_double(p.concentration.empty() ? 0.0 : p.concentration.back()) << "\n";
  }
  write_file(out_dir / "concentration.csv", conc.str());
  const BenchmarkTable table = tabulate(std::move(runs));
  write_table(table, out_dir);
  print_table(table, out);
  return kExitOk;
}

// --- argument parsing ------------------------------------------------------------

namespace {

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : s) {
    if (c == ',') {
      if (!cur.empty()) out.push_back(cur);
      cur.clear();
    } else if (!std::isspace(static_cast<unsigned char>(c))) {
      cur += c;
    }
  }
  if (!cur.empty()) out.push_back(cur);
  return out;
}

struct Common {
  std::string preset = "deep-narrow";
  std::vector<std::string> config_files;
  std::vector<std::string> sets;
  std::vector<std::uint64_t> seed;
  int seeds = 0;
  std::string out;
  std::string functions;
  std::string method;
  std::string only;
  bool dry_run = false;
  int jobs = 1;
};

void add_common(CLI::App* sub, Common& c, bool bench_like) {
  sub->add_option("--preset", c.preset, "Built-in preset name or preset file")->capture_default_str();
  sub->add_option("--config", c.config_files, "Extra config file layered over the preset");
  sub->add_option("--set", c.sets, "Override one key, e.g. --set model.depth=8");
  sub->add_option("--seed", c.seed, "Seed; with --seeds, the first of a consecutive range");
  sub->add_option("--seeds", c.seeds, "Number of consecutive seeds")->check(CLI::PositiveNumber);
  sub->add_option("--out", c.out, std::string("Output directory (default $") + kOutRootEnv + "/<command>)");
  sub->add_option("--jobs", c.jobs, "Worker threads")->check(CLI::PositiveNumber);
  sub->add_flag("--dry-run", c.dry_run, "Print the resolved config and exit");
  if (bench_like) {
    sub->add_option("--functions", c.functions, "Comma-separated functions, or 'all'");
    sub->add_option("--method", c.method, "queryable, lora, or both (comma-separated)");
  } else {
    sub->add_option("--only", c.only, "Comma-separated theory checks");
  }
}

RunConfig resolve(const Common& c, const std::string& command) {
  RunConfig cfg = load_preset(c.preset);
  for (const std::string& f : c.config_files) {
    std::string text;
    try {
      text = read_file(f);
    } catch (const IoError& e) {
      throw ConfigError(e.what());
    }
    apply_config_text(cfg, text, f);
  }
  for (const std::string& s : c.sets) apply_override(cfg, s);
  if (!c.functions.empty()) {
    const std::vector<std::string> names = split_list(c.functions);
    if (names.size() == 1 && (names[0] == "all" || names[0] == "ALL")) {
      cfg.functions = function_names();
    } else {
      cfg.functions.clear();
      for (const std::string& n : names) cfg.functions.push_back(resolve_function(n));
    }
  }
  if (!c.method.empty()) {
    cfg.methods.clear();
    for (const std::string& m : split_list(c.method)) {
      if (m == "both") {
        cfg.methods = {Method::kQueryable, Method::kLora};
        continue;
      }
      try {
        cfg.methods.push_back(parse_method(m));
      } catch (const Error& e) {
        throw ConfigError(std::string("--method: ") + e.what());
      }
    }
  }
  if (!c.seed.empty() || c.seeds > 0) {
    if (c.seeds > 0) {
      if (c.seed.size() > 1) throw ConfigError("--seeds takes a single --seed as the range start");
      const std::uint64_t base = c.seed.empty() ? 0 : c.seed.front();
      cfg.seeds.clear();
      for (int i = 0; i < c.seeds; ++i) cfg.seeds.push_back(base + static_cast<std::uint64_t>(i));
    } else {
      cfg.seeds = c.seed;
    }
  }
  if (!c.only.empty()) cfg.theory.only = split_list(c.only);
  cfg.out = c.out.empty() ? default_out(command).string() : c.out;
  cfg.jobs = c.jobs;
  cfg.validate();
  return cfg;
}

void print_plan(const RunConfig& cfg, const std::string& command, std::ostream& out) {
  out << config_to_text(cfg) << "\n";
  out << "# command: " << command << "\n# output: " << cfg.out << "\n";
  if (command == "bench") {
    out << "# plan: 1 table, " << cfg.functions.size() * cfg.methods.size() * cfg.seeds.size() << " runs\n";
  } else if (command == "sweep") {
    out << "# plan: " << sweep_points(cfg.sweep, cfg.methods).size() << " grid points\n";
  } else if (command == "drift") {
    out << "# plan: " << cfg.seeds.size() << " sequential runs\n";
  } else if (command == "theory") {
    out << "# plan: "
        << (cfg.theory.only.empty() ? theory_check_names().size() : cfg.theory.only.size()) << " checks\n";
  }
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"qmem: queryable update-memory adapters, benchmarks and certification"};
  app.require_subcommand(1);
  app.set_version_flag("--version", "qmem 0.1.0");

  Common bench, theory, sweep, drift;
  CLI::App* s_bench = app.add_subcommand("bench", "Queryable vs LoRA benchmark tables");
  add_common(s_bench, bench, true);
  CLI::App* s_theory = app.add_subcommand("theory", "Run the certification checks");
  add_common(s_theory, theory, false);
  CLI::App* s_sweep = app.add_subcommand("sweep", "Grid over rank, atoms and k with a Pareto flag");
  add_common(s_sweep, sweep, true);
  CLI::App* s_drift = app.add_subcommand("drift", "Sequential-task routing drift");
  add_common(s_drift, drift, true);
  CLI::App* s_report = app.add_subcommand("report", "Rebuild tables and gradient profiles from bench output");
  std::string report_dir, report_out;
  s_report->add_option("dir", report_dir, "Bench output directory")->required();
  s_report->add_option("--out", report_out, "Output directory (default <dir>/report)");

  try {
    std::vector<std::string> rev(args.rbegin(), args.rend());
    if (!rev.empty()) rev.pop_back();  // program name
    app.parse(rev);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitConfig;
  }

  try {
    if (s_report->parsed()) {
      const fs::path dir(report_dir);
      return cmd_report(dir, report_out.empty() ? dir / "report" : fs::path(report_out), out, err);
    }
    struct Entry {
      CLI::App* app;
      Common* opts;
      const char* name;
      int (*fn)(const RunConfig&, std::ostream&, std::ostream&);
    };
    const Entry entries[] = {{s_bench, &bench, "bench", cmd_bench},
                             {s_theory, &theory, "theory", cmd_theory},
                             {s_sweep, &sweep, "sweep", cmd_sweep},
                             {s_drift, &drift, "drift", cmd_drift}};
    for (const Entry& e : entries) {
      if (!e.app->parsed()) continue;
      const RunConfig cfg = resolve(*e.opts, e.name);
      if (e.opts->dry_run) {
        print_plan(cfg, e.name, out);
        return kExitOk;
      }
      return e.fn(cfg, out, err);
    }
    return kExitConfig;
  } catch (const ConfigError& e) {
    err << "qmem: config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::exception& e) {
    err << "qmem: error: " << e.what() << "\n";
    return kExitRuntime;
  }
}

}  // namespace qmem::cli
