// Copyright 2026 The qmem Authors
// SPDX-License-Identifier: Apache-2.0

#include "qmem/analytics.hpp"

#include <cmath>
#include <memory>

#include "qmem/random.hpp"

namespace qmem {

void UsageMatrix::validate(double tol) const {
  if (static_cast<Eigen::Index>(labels.size()) != cells.rows()) {
    throw ShapeError("usage matrix: label count differs from rows");
  }
  for (Eigen::Index i = 0; i < cells.rows(); ++i) {
    if ((cells.row(i).array() < 0.0).any() || std::abs(cells.row(i).sum() - 1.0) > tol) {
      throw Error("usage matrix: row " + labels[static_cast<std::size_t>(i)] + " is not a simplex");
    }
  }
}

Simplex atom_usage(const std::vector<ForwardTrace>& traces) {
  if (traces.empty()) throw Error("atom_usage: no traces");
  Vec sum;
  double n = 0.0;
  for (const ForwardTrace& tr : traces) {
    for (const BlockTrace& bt : tr.blocks) {
      for (const RouteResult& rt : bt.routes) {
        if (sum.size() == 0) sum = Vec::Zero(rt.alpha.size());
        if (rt.alpha.size() != sum.size()) throw ShapeError("atom_usage: atom count mismatch");
        sum += rt.alpha.weights();
        n += 1.0;
      }
    }
  }
  if (n == 0.0) throw Error("atom_usage: traces hold no routes");
  Vec w = sum / n;
  w /= w.sum();  // absorb rounding
  return Simplex(w);
}

UsageEntropy usage_entropy(const UsageMatrix& u) {
  if (u.cells.rows() < 2) throw Error("usage_entropy: need at least two tasks");
  UsageEntropy out;
  out.entropy = Vec::Zero(u.cells.cols());
  out.unused.assign(static_cast<std::size_t>(u.cells.cols()), false);
  for (Eigen::Index m = 0; m < u.cells.cols(); ++m) {
    const double total = u.cells.col(m).sum();
    if (!(total > 0.0)) {
      out.unused[static_cast<std::size_t>(m)] = true;
      continue;
    }
    out.entropy(m) = entropy(Simplex(Vec(u.cells.col(m) / total)));
  }
  return out;
}

namespace {

Vec smooth(const Vec& p, double eps) {
  Vec q = p.array() + eps;
  return q / q.sum();
}

}  // namespace

double symmetric_kl(const Vec& a, const Vec& b, double eps) {
  if (a.size() != b.size() || a.size() == 0) throw ShapeError("symmetric_kl: size mismatch");
  const Vec p = smooth(a, eps);
  const Vec q = smooth(b, eps);
  const double v = 0.5 * ((p.array() * (p.array() / q.array()).log()).sum() +
                          (q.array() * (q.array() / p.array()).log()).sum());
  return std::max(v, 0.0);
}

Mat symmetric_kl(const UsageMatrix& u, double eps) {
  const Eigen::Index n = u.cells.rows();
  Mat out = Mat::Zero(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = i + 1; j < n; ++j) {
      out(i, j) = out(j, i) = symmetric_kl(Vec(u.cells.row(i).transpose()),
                                           Vec(u.cells.row(j).transpose()), eps);
    }
  }
  return out;
}

namespace {

void check_record(const DriftRecord& d) {
  if (d.usage.size() != d.stages.size()) throw ShapeError("drift record: stage count mismatch");
  for (const UsageMatrix& u : d.usage) {
    if (u.cells.rows() != static_cast<Eigen::Index>(d.tasks.size()) ||
        u.cells.cols() != d.usage.front().cells.cols()) {
      throw ShapeError("drift record: inconsistent usage shapes");
    }
  }
}

}  // namespace

Mat route_drift(const DriftRecord& d, int task) {
  check_record(d);
  if (task < 0 || task >= static_cast<int>(d.tasks.size())) throw Error("route_drift: bad task");
  UsageMatrix rows;
  rows.cells = Mat(static_cast<Eigen::Index>(d.stages.size()),
                   d.usage.empty() ? 0 : d.usage.front().cells.cols());
  for (std::size_t s = 0; s < d.stages.size(); ++s) {
    rows.labels.push_back(d.stages[s]);
    rows.cells.row(static_cast<Eigen::Index>(s)) = d.usage[s].cells.row(task);
  }
  return symmetric_kl(rows);
}

Mat stage_drift(const DriftRecord& d) {
  check_record(d);
  const auto T = static_cast<Eigen::Index>(d.tasks.size());
  const auto S = static_cast<Eigen::Index>(d.stages.size());
  Mat out = Mat::Zero(T, std::max<Eigen::Index>(S - 1, 0));
  for (Eigen::Index t = 0; t < T; ++t) {
    for (Eigen::Index s = 1; s < S; ++s) {
      out(t, s - 1) = symmetric_kl(Vec(d.usage[s - 1].cells.row(t).transpose()),
                                   Vec(d.usage[s].cells.row(t).transpose()));
    }
  }
  return out;
}

GradProfile grad_profile(const RunReport& report) {
  GradProfile g;
  for (const EpochRecord& e : report.post) {
    if (e.split != "train" || e.layer_grad_norms.empty()) continue;
    g.epochs.push_back(e.epoch);
    g.layer_norms.push_back(e.layer_grad_norms);
    g.concentration.push_back(concentration_index(e.layer_grad_norms));
  }
  return g;
}

std::vector<SequentialTask> default_sequence(const BenchFn& base, std::uint64_t seed) {
  const SeedTree tree(seed);
  const double thetas[3] = {0.5235987755982988, -0.5235987755982988, 1.0471975511965976};
  std::vector<SequentialTask> out;
  for (int i = 0; i < 3; ++i) {
    SequentialTask t;
    t.label = base.name + "-" + std::string(1, static_cast<char>('a' + i));
    t.target = apply_shift(base, ShiftSpec::draw(base, tree.seed("sequence", static_cast<std::uint64_t>(i)),
                                                  thetas[i]));
    t.instruction = "adapt to variant " + std::string(1, static_cast<char>('a' + i)) + " of the " +
                    base.name + " surface";
    out.push_back(std::move(t));
  }
  return out;
}

DriftRecord sequential_protocol(const SequentialConfig& cfg,
                                const std::vector<SequentialTask>& tasks, std::uint64_t seed) {
  if (tasks.empty()) throw Error("sequential_protocol: no tasks");
  if (cfg.model.method != Method::kQueryable) throw Error("sequential_protocol: queryable model required");
  const SeedTree tree(seed);

  // Evaluation set: each distinct label once, in first-seen order.
  struct Eval {
    std::string label;
    std::size_t task;
  };
  std::vector<Eval> evals;
  for (std::size_t i = 0; i < tasks.size(); ++i) {
    bool seen = false;
    for (const Eval& e : evals) seen = seen || e.label == tasks[i].label;
    if (!seen) evals.push_back({tasks[i].label, i});
  }

  const Dataset src = gen_dataset(cfg.source, cfg.n_source, cfg.noise_sd, tree.seed("source"));
  const Standardizer z = Standardizer::fit(src.X);
  Dataset src_z{z.apply(src.X), src.Y};

  ModelConfig mc = cfg.model;
  mc.seed = tree.seed("model");
  const Backbone init =
      Backbone::init(mc.in_dim, mc.width, mc.depth, mc.out_dim, SeedTree(mc.seed).seed("backbone"));
  auto backbone = std::make_shared<const Backbone>(
      pretrain_backbone(init, src_z, nullptr, cfg.schedule, tree.seed("pretrain")));
  Model model = Model::build(mc, backbone);

  std::vector<Dataset> train(evals.size()), test(evals.size());
  std::vector<Instruction> instr;
  for (std::size_t e = 0; e < evals.size(); ++e) {
    const SequentialTask& t = tasks[evals[e].task];
    const Dataset d = gen_dataset(t.target, cfg.n_train + cfg.n_eval, cfg.noise_sd,
                                  tree.seed("task", fnv1a(t.label)));
    const Mat X = z.apply(d.X);
    train[e] = Dataset{X.leftCols(cfg.n_train), d.Y.leftCols(cfg.n_train)};
    test[e] = Dataset{X.rightCols(cfg.n_eval), d.Y.rightCols(cfg.n_eval)};
    instr.push_back(Instruction::embed(t.instruction, mc.d_c));
  }
  auto eval_index = [&](const std::string& label) {
    for (std::size_t e = 0; e < evals.size(); ++e) {
      if (evals[e].label == label) return e;
    }
    throw Error("sequential_protocol: unknown task " + label);
  };

  DriftRecord rec;
  for (const Eval& e : evals) rec.tasks.push_back(e.label);
  for (std::size_t s = 0; s < tasks.size(); ++s) {
    const std::size_t e = eval_index(tasks[s].label);
    // Fresh optimizer moments each stage; parameters carry over.
    const RunReport rep = post_train(model, train[e], test[e], &instr[e], cfg.schedule,
                                     tree.seed("stage", static_cast<std::uint64_t>(s)));
    rec.stages.push_back(tasks[s].label);
    rec.stage_mse.push_back(rep.final_train_mse);
    UsageMatrix u;
    u.cells = Mat(static_cast<Eigen::Index>(evals.size()), model.bank.M);
    for (std::size_t k = 0; k < evals.size(); ++k) {
      u.labels.push_back(evals[k].label);
      u.cells.row(static_cast<Eigen::Index>(k)) =
          atom_usage_of(model, test[k].X, &instr[k]).transpose();
    }
    rec.usage.push_back(std::move(u));
  }
  return rec;
}

}  // namespace qmem
