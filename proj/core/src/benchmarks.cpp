// Copyright 2026 The qmem Authors
// SPDX-License-Identifier: Apache-2.0

#include "qmem/benchmarks.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <mutex>
#include <numbers>
#include <thread>

#include "qmem/random.hpp"

namespace qmem {

namespace {

constexpr double kPi = std::numbers::pi;

struct Entry {
  FunctionId id;
  const char* name;
  double lo;
  double hi;
  std::vector<std::string> names;
  std::vector<double> params;
};

const std::vector<Entry>& registry() {
  static const std::vector<Entry> r = {
      {FunctionId::kAckley, "Ackley", -32.768, 32.768, {"a", "b", "c"}, {20.0, 0.2, 2.0 * kPi}},
      {FunctionId::kDropwave, "Dropwave", -5.12, 5.12, {"freq", "damp"}, {12.0, 0.5}},
      {FunctionId::kLangermann, "Langermann", 0.0, 10.0, {"amp", "freq", "decay"},
       {1.0, kPi, 1.0 / kPi}},
      {FunctionId::kLevy, "Levy", -10.0, 10.0, {"freq", "weight", "tail_freq"},
       {kPi, 10.0, 2.0 * kPi}},
      {FunctionId::kMatyas, "Matyas", -10.0, 10.0, {"square", "cross"}, {0.26, 0.48}},
      {FunctionId::kMichalewicz, "Michalewicz", 0.0, kPi, {"steep", "freq"}, {10.0, 1.0 / kPi}},
      {FunctionId::kRastrigin, "Rastrigin", -5.12, 5.12, {"A", "omega"}, {10.0, 2.0 * kPi}},
      {FunctionId::kSinCos, "SinCos", -kPi, kPi, {"omega1", "omega2"}, {1.0, 1.0}},
      {FunctionId::kStyblinskiTang, "StyblinskiTang", -5.0, 5.0, {"quartic", "quadratic"},
       {1.0, 16.0}},
  };
  return r;
}

double eval_raw(FunctionId id, const std::vector<double>& p, double x1, double x2) {
  switch (id) {
    case FunctionId::kAckley: {
      const double a = p[0], b = p[1], c = p[2];
      const double r = std::sqrt(0.5 * (x1 * x1 + x2 * x2));
      const double cs = 0.5 * (std::cos(c * x1) + std::cos(c * x2));
      return -a * std::exp(-b * r) - std::exp(cs) + a + std::numbers::e;
    }
    case FunctionId::kDropwave: {
      const double r2 = x1 * x1 + x2 * x2;
      return -(1.0 + std::cos(p[0] * std::sqrt(r2))) / (p[1] * r2 + 2.0);
    }
    case FunctionId::kLangermann: {
      static const double A[5][2] = {{3, 5}, {5, 2}, {2, 1}, {1, 4}, {7, 9}};
      static const double C[5] = {1, 2, 5, 2, 3};
      double s = 0.0;
      for (int i = 0; i < 5; ++i) {
        const double d = (x1 - A[i][0]) * (x1 - A[i][0]) + (x2 - A[i][1]) * (x2 - A[i][1]);
        s += p[0] * C[i] * std::exp(-p[2] * d) * std::cos(p[1] * d);
      }
      return s;
    }
    case FunctionId::kLevy: {
      const double w1 = 1.0 + (x1 - 1.0) / 4.0;
      const double w2 = 1.0 + (x2 - 1.0) / 4.0;
      const double s1 = std::sin(p[0] * w1);
      const double s2 = std::sin(p[0] * w1 + 1.0);
      const double s3 = std::sin(p[2] * w2);
      return s1 * s1 + (w1 - 1.0) * (w1 - 1.0) * (1.0 + p[1] * s2 * s2) +
             (w2 - 1.0) * (w2 - 1.0) * (1.0 + s3 * s3);
    }
    case FunctionId::kMatyas:
      return p[0] * (x1 * x1 + x2 * x2) - p[1] * x1 * x2;
    case FunctionId::kMichalewicz: {
      double s = 0.0;
      const double xs[2] = {x1, x2};
      for (int i = 0; i < 2; ++i) {
        const double inner = std::sin(static_cast<double>(i + 1) * xs[i] * xs[i] * p[1]);
        s -= std::sin(xs[i]) * std::pow(inner * inner, p[0]);
      }
      return s;
    }
    case FunctionId::kRastrigin:
      return 2.0 * p[0] + (x1 * x1 - p[0] * std::cos(p[1] * x1)) +
             (x2 * x2 - p[0] * std::cos(p[1] * x2));
    case FunctionId::kSinCos:
      return std::sin(p[0] * x1) * std::cos(p[1] * x2);
    case FunctionId::kStyblinskiTang: {
      auto term = [&](double x) { return p[0] * x * x * x * x - p[1] * x * x + 5.0 * x; };
      return 0.5 * (term(x1) + term(x2));
    }
  }
  throw Error("eval_fn: unknown function");
}

}  // namespace

const std::vector<std::string>& function_names() {
  static const std::vector<std::string> names = [] {
    std::vector<std::string> out;
    for (const Entry& e : registry()) out.emplace_back(e.name);
    return out;
  }();
  return names;
}

BenchFn make_function(const std::string& name) {
  for (const Entry& e : registry()) {
    if (name == e.name) {
      BenchFn f;
      f.id = e.id;
      f.name = e.name;
      f.box = {std::make_pair(e.lo, e.hi), std::make_pair(e.lo, e.hi)};
      f.param_names = e.names;
      f.params = e.params;
      return f;
    }
  }
  throw Error("unknown function '" + name + "'");
}

double eval_fn(const BenchFn& f, const Vec& x) {
  if (x.size() != 2) throw ShapeError("eval_fn: input must be two-dimensional");
  for (int i = 0; i < 2; ++i) {
    const auto [lo, hi] = f.box[static_cast<std::size_t>(i)];
    const double slack = 1e-12 * std::max(1.0, hi - lo);
    if (!(x[i] >= lo - slack && x[i] <= hi + slack)) throw Error("eval_fn: input outside the domain box");
  }
  double x1 = x[0];
  double x2 = x[1];
  if (f.theta != 0.0) {
    const double c1 = 0.5 * (f.box[0].first + f.box[0].second);
    const double c2 = 0.5 * (f.box[1].first + f.box[1].second);
    const double ct = std::cos(f.theta);
    const double st = std::sin(f.theta);
    const double u = x1 - c1;
    const double v = x2 - c2;
    x1 = c1 + ct * u - st * v;
    x2 = c2 + st * u + ct * v;
  }
  return eval_raw(f.id, f.params, x1, x2);
}

ShiftSpec ShiftSpec::draw(const BenchFn& f, std::uint64_t seed, double theta, double lo, double hi) {
  if (!(lo > 0.0 && hi >= lo)) throw Error("shift: scale range must be positive");
  ShiftSpec s;
  s.seed = seed;
  s.theta = theta;
  Gaussian g(seed);
  for (std::size_t i = 0; i < f.params.size(); ++i) s.coeff_scale.push_back(lo + (hi - lo) * g.uniform());
  return s;
}

ShiftSpec ShiftSpec::identity(const BenchFn& f) {
  ShiftSpec s;
  s.coeff_scale.assign(f.params.size(), 1.0);
  return s;
}

BenchFn apply_shift(const BenchFn& f, const ShiftSpec& shift) {
  if (shift.coeff_scale.size() != f.params.size()) throw Error("apply_shift: scale count mismatch");
  BenchFn g = f;
  for (std::size_t i = 0; i < f.params.size(); ++i) {
    if (!(shift.coeff_scale[i] > 0.0)) throw Error("apply_shift: scales must be positive");
    g.params[i] *= shift.coeff_scale[i];
  }
  g.theta = f.theta + shift.theta;
  return g;
}

Dataset gen_dataset(const BenchFn& f, int n, double noise_sd, std::uint64_t seed) {
  if (n <= 0) throw Error("gen_dataset: n must be positive");
  if (noise_sd < 0.0) throw Error("gen_dataset: noise_sd must be >= 0");
  const SeedTree tree(seed);
  Gaussian gx(tree.seed("inputs"));
  Gaussian gn(tree.seed("noise"));
  Dataset d;
  d.X.resize(2, n);
  d.Y.resize(1, n);
  for (int j = 0; j < n; ++j) {
    for (int i = 0; i < 2; ++i) {
      const auto [lo, hi] = f.box[static_cast<std::size_t>(i)];
      d.X(i, j) = lo + (hi - lo) * gx.uniform();
    }
    const double noise = noise_sd > 0.0 ? noise_sd * gn() : 0.0;
    d.Y(0, j) = eval_fn(f, d.X.col(j)) + noise;
  }
  return d;
}

Standardizer Standardizer::fit(const Mat& X) {
  if (X.cols() < 2) throw Error("standardizer: need at least two points");
  Standardizer z;
  z.mean = X.rowwise().mean();
  const Mat c = X.colwise() - z.mean;
  z.sd = (c.rowwise().squaredNorm() / static_cast<double>(X.cols() - 1)).cwiseSqrt();
  for (Eigen::Index i = 0; i < z.sd.size(); ++i) {
    if (z.sd[i] == 0.0) z.sd[i] = 1.0;
  }
  return z;
}

Mat Standardizer::apply(const Mat& X) const {
  return (X.colwise() - mean).array().colwise() / sd.array();
}

namespace {

Dataset slice(const Dataset& d, int from, int to) {
  return Dataset{d.X.middleCols(from, to - from), d.Y.middleCols(from, to - from)};
}

}  // namespace

TaskData make_task(const BenchFn& f, const ProtocolConfig& cfg, std::uint64_t seed) {
  const SeedTree tree(seed);
  TaskData t;
  t.base = f;
  t.shift = ShiftSpec::draw(f, tree.seed("shift", fnv1a(f.name)), cfg.theta, cfg.scale_lo, cfg.scale_hi);
  t.shifted = apply_shift(f, t.shift);
  const int n_src_train = static_cast<int>(std::lround(cfg.source_train_fraction * cfg.n_source));
  if (n_src_train < 2 || n_src_train > cfg.n_source) throw Error("protocol: bad source split");
  if (cfg.n_adapt < 1 || cfg.n_adapt >= cfg.n_target) throw Error("protocol: bad target split");
  const Dataset src = gen_dataset(f, cfg.n_source, cfg.noise_sd, tree.seed("source", fnv1a(f.name)));
  const Dataset tgt = gen_dataset(t.shifted, cfg.n_target, cfg.noise_sd, tree.seed("target", fnv1a(f.name)));
  t.source_train = slice(src, 0, n_src_train);
  t.source_test = slice(src, n_src_train, cfg.n_source);
  t.target_train = slice(tgt, 0, cfg.n_adapt);
  t.target_test = slice(tgt, cfg.n_adapt, cfg.n_target);
  t.z = Standardizer::fit(t.source_train.X);
  for (Dataset* d : {&t.source_train, &t.source_test, &t.target_train, &t.target_test}) {
    d->X = t.z.apply(d->X);
  }
  return t;
}

Instruction task_instruction(const BenchFn& f, int d_c) {
  return Instruction::embed("adapt to the shifted " + f.name + " surface", d_c);
}

std::pair<double, double> mean_sd(const std::vector<double>& v) {
  if (v.empty()) return {0.0, 0.0};
  double mean = 0.0;
  for (double x : v) mean += x;
  mean /= static_cast<double>(v.size());
  if (v.size() < 2) return {mean, 0.0};
  double ss = 0.0;
  for (double x : v) ss += (x - mean) * (x - mean);
  return {mean, std::sqrt(ss / static_cast<double>(v.size() - 1))};
}

const TableRow& BenchmarkTable::row(const std::string& function, const std::string& method) const {
  for (const TableRow& r : rows) {
    if (r.function == function && r.method == method) return r;
  }
  throw Error("benchmark table: no row for " + function + "/" + method);
}

namespace {

std::vector<RunRecord> run_task(const ProtocolConfig& cfg, const std::string& fname,
                                const std::vector<Method>& methods, std::uint64_t seed) {
  const BenchFn f = make_function(fname);
  const TaskData task = make_task(f, cfg, seed);
  const SeedTree tree(seed);
  ModelConfig mc = cfg.model;
  mc.seed = tree.seed("model", fnv1a(fname));
  mc.in_dim = 2;
  mc.out_dim = 1;
  const Backbone init =
      Backbone::init(mc.in_dim, mc.width, mc.depth, mc.out_dim, SeedTree(mc.seed).seed("backbone"));
  auto backbone = std::make_shared<const Backbone>(
      pretrain_backbone(init, task.source_train, &task.source_test, cfg.schedule,
                        tree.seed("pretrain", fnv1a(fname))));
  const Instruction instr = task_instruction(f, mc.d_c);
  std::vector<RunRecord> out;
  for (Method m : methods) {
    ModelConfig mm = mc;
    mm.method = m;
    Model model = Model::build(mm, backbone);
    RunRecord rec;
    rec.function = fname;
    rec.method = method_name(m);
    rec.seed = seed;
    rec.shift = task.shift;
    rec.report = post_train(model, task.target_train, task.target_test,
                            cfg.use_instruction ? &instr : nullptr, cfg.schedule,
                            tree.seed("post", fnv1a(fname)));
    rec.best_train_mse = rec.report.best_train_mse;
    rec.best_test_mse = rec.report.best_test_mse;
    rec.diverged = rec.report.diverged;
    out.push_back(std::move(rec));
  }
  return out;
}

}  // namespace

BenchmarkTable run_protocol(const ProtocolConfig& cfg, const std::vector<std::string>& functions,
                            const std::vector<Method>& methods,
                            const std::vector<std::uint64_t>& seeds, int jobs,
                            const ProgressFn& progress) {
  if (functions.empty() || methods.empty() || seeds.empty()) {
    throw Error("run_protocol: functions, methods and seeds must be non-empty");
  }
  for (const std::string& f : functions) make_function(f);
  const std::size_t ntask = functions.size() * seeds.size();
  std::vector<std::vector<RunRecord>> results(ntask);
  std::atomic<std::size_t> next{0};
  std::mutex progress_mu;
  std::exception_ptr failure;
  auto worker = [&] {
    for (;;) {
      const std::size_t i = next.fetch_add(1);
      if (i >= ntask) return;
      try {
        results[i] = run_task(cfg, functions[i / seeds.size()], methods, seeds[i % seeds.size()]);
        if (progress) {
          std::lock_guard<std::mutex> lock(progress_mu);
          progress(results[i]);
        }
      } catch (...) {
        std::lock_guard<std::mutex> lock(progress_mu);
        if (!failure) failure = std::current_exception();
      }
    }
  };
  const int nthreads = std::max(1, std::min<int>(jobs, static_cast<int>(ntask)));
  if (nthreads == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int t = 0; t < nthreads; ++t) pool.emplace_back(worker);
    for (std::thread& th : pool) th.join();
  }
  if (failure) std::rethrow_exception(failure);

  std::vector<RunRecord> runs;
  for (auto& task : results) {
    for (auto& rec : task) runs.push_back(std::move(rec));
  }
  return tabulate(std::move(runs));
}

BenchmarkTable tabulate(std::vector<RunRecord> runs) {
  std::vector<std::string> functions;
  std::vector<std::string> methods;
  for (const RunRecord& r : runs) {
    if (std::find(functions.begin(), functions.end(), r.function) == functions.end()) {
      functions.push_back(r.function);
    }
    if (std::find(methods.begin(), methods.end(), r.method) == methods.end()) methods.push_back(r.method);
  }
  BenchmarkTable table;
  table.runs = std::move(runs);
  for (const std::string& f : functions) {
    for (const std::string& m : methods) {
      std::vector<double> tr;
      std::vector<double> te;
      for (const RunRecord& r : table.runs) {
        if (r.function == f && r.method == m) {
          tr.push_back(r.best_train_mse);
          te.push_back(r.best_test_mse);
        }
      }
      if (tr.empty()) continue;
      TableRow row;
      row.function = f;
      row.method = m;
      std::tie(row.train_mean, row.train_sd) = mean_sd(tr);
      std::tie(row.test_mean, row.test_sd) = mean_sd(te);
      row.runs = static_cast<int>(tr.size());
      table.rows.push_back(std::move(row));
    }
  }
  return table;
}

}  // namespace qmem
