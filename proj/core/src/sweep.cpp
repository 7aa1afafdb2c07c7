// Copyright 2026 The qmem Authors
// SPDX-License-Identifier: Apache-2.0

#include "qmem/sweep.hpp"

#include <map>
#include <sstream>

#include "qmem/training.hpp"

namespace qmem {

std::vector<SweepPoint> sweep_points(const SweepGrid& grid, const std::vector<Method>& methods) {
  std::vector<SweepPoint> out;
  for (Method m : methods) {
    for (int r : grid.rank) {
      if (m == Method::kLora) {
        out.push_back({m, r, 0, 0});
        continue;
      }
      for (int M : grid.atoms) {
        for (int k : grid.k_active) {
          if (k > M) continue;
          out.push_back({m, r, M, k});
        }
      }
    }
  }
  return out;
}

long long count_trainable(const ModelConfig& cfg) {
  Model model = Model::build(cfg);
  long long n = 0;
  for (const ParamView& p : trainable_params(model)) n += static_cast<long long>(p.value.size());
  return n;
}

std::vector<bool> dominated_flags(const std::vector<double>& cost, const std::vector<double>& loss) {
  if (cost.size() != loss.size()) throw Error("dominated_flags: size mismatch");
  std::vector<bool> out(cost.size(), false);
  for (std::size_t i = 0; i < cost.size(); ++i) {
    for (std::size_t j = 0; j < cost.size(); ++j) {
      if (cost[j] < cost[i] && loss[j] < loss[i]) {
        out[i] = true;
        break;
      }
    }
  }
  return out;
}

void flag_frontier(std::vector<SweepRow>& rows) {
  std::map<std::string, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < rows.size(); ++i) groups[rows[i].function].push_back(i);
  for (const auto& [fn, idx] : groups) {
    std::vector<double> cost, loss;
    for (std::size_t i : idx) {
      cost.push_back(static_cast<double>(rows[i].params));
      loss.push_back(rows[i].train_mean);
    }
    const std::vector<bool> d = dominated_flags(cost, loss);
    for (std::size_t t = 0; t < idx.size(); ++t) rows[idx[t]].dominated = d[t];
  }
}

std::vector<SweepRow> run_sweep(const RunConfig& cfg, const ProgressFn& progress) {
  std::vector<SweepRow> rows;
  for (const SweepPoint& pt : sweep_points(cfg.sweep, cfg.methods)) {
    ProtocolConfig p = cfg.protocol;
    p.model.method = pt.method;
    p.model.rank = pt.rank;
    if (pt.method == Method::kQueryable) {
      p.model.atoms = pt.atoms;
      p.model.k_active = pt.k_active;
    }
    const long long params = count_trainable(p.model);
    const BenchmarkTable t = run_protocol(p, cfg.functions, {pt.method}, cfg.seeds, cfg.jobs, progress);
    for (const TableRow& r : t.rows) {
      SweepRow row;
      row.function = r.function;
      row.point = pt;
      row.params = params;
      row.train_mean = r.train_mean;
      row.train_sd = r.train_sd;
      row.test_mean = r.test_mean;
      row.test_sd = r.test_sd;
      row.runs = r.runs;
      rows.push_back(row);
    }
  }
  flag_frontier(rows);
  return rows;
}

std::string sweep_csv(const std::vector<SweepRow>& rows) {
  std::ostringstream os;
  os << "function,method,rank,atoms,k_active,params,train_mean,train_sd,test_mean,test_sd,runs,dominated\n";
  for (const SweepRow& r : rows) {
    os << r.function << "," << method_name(r.point.method) << "," << r.point.rank << "," << r.point.atoms << ","
       << r.point.k_active << "," << r.params << "," << format_double(r.train_mean) << ","
       << format_double(r.train_sd) << "," << format_double(r.test_mean) << "," << format_double(r.test_sd)
       << "," << r.runs << "," << (r.dominated ? "true" : "false") << "\n";
  }
  return os.str();
}

}  // namespace qmem
