// Copyright 2026 The qmem Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "qmem/model.hpp"

namespace qmem {

/// Gradients of every trainable adapter-side parameter, mirroring Model.
struct GradSet {
  std::vector<Mat> A;
  std::vector<Mat> B;
  Vec eta;
  std::vector<Vec> layer_priors;
  std::vector<Mat> atoms;
  std::vector<Vec> keys;
  Mat Q_cur, Q_dep, Q_ctx, R_ctx, Q_dep_q, Q_dep_k;

  // Intermediates: r_l = dL/dt_l per layer (r x N); psi per block and
  // routing unit, with its alpha-weighted mean.
  std::vector<Mat> r;
  std::vector<std::vector<Vec>> psi;
  std::vector<std::vector<double>> psi_bar;
  // dL/dS per block and unit.
  std::vector<std::vector<Mat>> grad_S;

  static GradSet zeros_like(const Model& model);
  /// Per-layer Frobenius norm of (dA, dB).
  std::vector<double> layer_norms() const;
};

/// View of one trainable tensor as a flat contiguous span.
struct ParamView {
  std::string name;
  std::span<double> value;
  bool decay = false;
};

/// Trainable tensors in a fixed order. LoRA models expose only A and B;
/// a clamped gate hides eta.
std::vector<ParamView> trainable_params(Model& model);
/// Gradient views in the same order as trainable_params.
std::vector<ParamView> grad_views(const Model& model, GradSet& grads);

double mse_loss(const Vec& pred, const Vec& target);
double mse_loss(const Mat& pred, const Mat& target);

/// sum over block layers of g_l r_l s_l^T for one routing unit.
Mat grad_S_block(const ForwardTrace& trace, const GradSet& grads, const Model& model, int block,
                 int unit);
/// alpha_m gS for every atom.
std::vector<Mat> grad_atoms(const RouteResult& route, const Mat& gS);

struct LogitGrads {
  Vec dzeta;
  Vec drho;
  Vec psi;
  double psi_bar = 0.0;
};
/// dL/dzeta_m = alpha_m (psi_m - psi_bar), dL/drho_m = tau dL/dzeta_m.
LogitGrads grad_logits(const RouteResult& route, const Mat& gS, const AtomBank& bank,
                       double tau_lang);
/// sigma(eta)(1 - sigma(eta)) <r_l, d_l>, summed over the batch.
double grad_gate(const ForwardTrace& trace, const GradSet& grads, const Model& model, int layer);
/// B^T G A^T.
Mat compressed_gradient(const Mat& G, const AdapterLayer& layer);

/// Reverse pass from dL/doutput (out_dim x N) through a recorded trace.
GradSet backward(const Model& model, const ForwardTrace& trace, const Mat& d_output,
                 const Instruction* instr);

struct LossAndGrads {
  double loss = 0.0;
  GradSet grads;
  ForwardTrace trace;
};

/// MSE forward plus full backward on one batch (X: in x N, Y: out x N).
LossAndGrads loss_and_grads(const Model& model, const Mat& X, const Mat& Y,
                            const Instruction* instr, const ForwardOptions& opts = {});

struct AdamWConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

struct OptimState {
  AdamWConfig config;
  std::vector<Vec> m;
  std::vector<Vec> v;
  long step = 0;
};

/// One decoupled-weight-decay Adam step. Decay applies to views flagged
/// `decay`. Moments are created on first use.
void adamw_step(std::vector<ParamView>& params, const std::vector<ParamView>& grads,
                OptimState& state);

struct Dataset {
  Mat X;  // in_dim x N
  Mat Y;  // out_dim x N
  int size() const { return static_cast<int>(X.cols()); }
};

struct TrainSchedule {
  int pretrain_epochs = 300;
  double pretrain_lr = 3e-3;
  int post_epochs = 5000;
  double post_lr = 5e-4;
  int batch_size = 64;
  double weight_decay = 0.01;
  int eval_every = 1;
  double divergence = 1e5;
  double grad_clip = 0.0;  // global-norm clip, 0 disables
  bool project_atoms = false;
  double atom_radius = 1.0;
};

struct EpochRecord {
  int epoch = 0;
  std::string split;  // "train" or "test"
  double mse = 0.0;
  double grad_concentration = 0.0;          // train rows only
  std::vector<double> layer_grad_norms;     // epoch-mean per layer
  std::vector<double> block_entropy;        // mean route entropy per block
};

struct RunReport {
  std::string method;
  std::vector<EpochRecord> pretrain;
  std::vector<EpochRecord> post;
  bool diverged = false;
  int diverged_epoch = -1;
  double best_train_mse = 0.0;
  double best_test_mse = 0.0;
  double final_train_mse = 0.0;
  double final_test_mse = 0.0;
  std::vector<double> atom_usage;  // mean alpha on the evaluation split
};

/// max / mean of per-layer gradient norms (0 when every norm is 0).
double concentration_index(const std::vector<double>& norms);

/// Stage one: trains the plain backbone on source data and returns it.
Backbone pretrain_backbone(Backbone backbone, const Dataset& train, const Dataset* test,
                           const TrainSchedule& schedule, std::uint64_t seed,
                           std::vector<EpochRecord>* log = nullptr);

/// Stage two: trains adapters (and routing state for the queryable method)
/// with the backbone frozen.
RunReport post_train(Model& model, const Dataset& train, const Dataset& test,
                     const Instruction* instr, const TrainSchedule& schedule,
                     std::uint64_t seed);

/// Both stages: pretrains a copy of the model's backbone on `source` and
/// installs it, then post-trains on `target_train`.
RunReport train(Model& model, const Dataset& source, const Dataset& target_train,
                const Dataset& target_test, const Instruction* instr,
                const TrainSchedule& schedule, std::uint64_t seed);

/// Mean alpha over the routes of a batch forward (all blocks and units).
Vec atom_usage_of(const Model& model, const Mat& X, const Instruction* instr);

}  // namespace qmem
