// Copyright 2026 The qmem Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "qmem/adapter.hpp"
#include "qmem/depth_context.hpp"
#include "qmem/memory_router.hpp"
#include "qmem/numerics.hpp"

namespace qmem {

enum class BackboneKind { kMlp, kTinyTransformer };
enum class Method { kQueryable, kLora };
/// Per-example routing gives each example its own query and S per block;
/// batch-mean routing averages rank states over the batch first.
enum class RoutingMode { kPerExample, kBatchMean };

const char* method_name(Method m);
Method parse_method(const std::string& s);

struct ModelConfig {
  BackboneKind backbone = BackboneKind::kMlp;
  Method method = Method::kQueryable;
  RoutingMode routing = RoutingMode::kPerExample;
  int in_dim = 2;
  int out_dim = 1;
  int depth = 32;
  int width = 32;
  int rank = 8;
  int atoms = 8;
  int k_active = 2;
  int blocks = 4;
  int d_k = 32;
  int d_c = 32;
  double alpha_L = 16.0;
  double T_attn = 1.0;
  double T_lang = 1.0;
  double T_dep = 1.0;
  double tau_lang = 1.0;
  double lambda_ctx = 1.0;
  double eta_init = -2.0;
  double dropout = 0.0;
  bool gate_clamped = false;
  double atom_clip = 1.0;
  std::uint64_t seed = 0;

  void validate() const;
};

/// Frozen GELU MLP: `depth` hidden layers and a linear head.
struct Backbone {
  std::vector<Mat> W;
  std::vector<Vec> b;
  Mat head_W;
  Vec head_b;

  int depth() const { return static_cast<int>(W.size()); }
  /// Uniform(+-1/sqrt(fan_in)) weights and biases.
  static Backbone init(int in_dim, int width, int depth, int out_dim, std::uint64_t seed);
};

/// Single-head pre-activation-free transformer over a fixed number of
/// scalar tokens (one per input coordinate). Forward only.
struct TransformerBackbone {
  struct Layer {
    Mat Wq, Wk, Wv, Wo;  // width x width
    Mat W1, W2;          // feed-forward, width x width
    Vec b1, b2;
  };
  Mat embed;  // width x 1, token value embedding
  Mat pos;    // width x tokens
  std::vector<Layer> layers;
  Mat head_W;
  Vec head_b;

  static TransformerBackbone init(int tokens, int width, int depth, int out_dim,
                                  std::uint64_t seed);
};

struct Model {
  ModelConfig config;
  std::shared_ptr<const Backbone> backbone;
  std::shared_ptr<const TransformerBackbone> transformer;
  std::vector<AdapterLayer> layers;         // MLP path
  std::vector<AttentionAdapter> attention;  // transformer path
  AtomBank bank;
  RouterParams router;
  BlockPartition partition;

  /// Builds adapters, bank and router from `config.seed`. A missing backbone
  /// is freshly initialized. Adapter factors come from the same named seed
  /// streams for every method.
  static Model build(const ModelConfig& config,
                     std::shared_ptr<const Backbone> backbone = nullptr);

  bool routed() const { return config.method == Method::kQueryable; }
  void validate() const;
};

/// Per-layer values of a batched MLP forward (columns are examples).
struct LayerTrace {
  Mat h_in;    // width_in x N
  Mat mask;    // inverted-dropout multipliers (empty when dropout is off)
  Mat a_in;    // input to A after dropout (empty when identical to h_in)
  Mat s;       // r x N
  Mat d;       // r x N (empty for LoRA)
  Mat t;       // r x N
  Mat y;       // pre-activation, width x N
  Mat cdf;     // standard normal CDF of y, reused by the GELU derivative
  double gate = 0.0;
};

/// Routing record of one block. One entry per routing unit: examples in
/// per-example mode, a single unit in batch-mean mode.
struct BlockTrace {
  std::vector<QueryParts> query;
  std::vector<RouteResult> routes;
  std::vector<std::vector<Vec>> context;  // summaries visible to each unit
  Mat s_entry;                             // r x units
  Mat sbar;                                // r x units
};

struct ForwardTrace {
  RoutingMode mode = RoutingMode::kPerExample;
  int batch = 0;
  std::vector<LayerTrace> layers;
  std::vector<BlockTrace> blocks;
  Mat h_out;   // last hidden state, width x N
  Mat output;  // out_dim x N

  int units() const { return mode == RoutingMode::kPerExample ? batch : 1; }
  int unit_of(int example) const { return mode == RoutingMode::kPerExample ? example : 0; }
};

struct ForwardOptions {
  bool train = false;        // enables adapter dropout
  std::uint64_t dropout_seed = 0;
  bool keep_trace = true;
  /// Called on each route before the block uses it; may edit alpha and S.
  /// Backward still differentiates the unedited routing path.
  std::function<void(int block, int unit, RouteResult&)> route_hook;
};

double gelu(double x);
double gelu_grad(double x);
/// Phi(x), the standard normal CDF.
double normal_cdf(double x);
/// GELU derivative given a precomputed Phi(x).
double gelu_grad_from_cdf(double x, double cdf);
/// Applies GELU to `y` in place of `h`, storing Phi(y) in `cdf`.
void gelu_forward(const Mat& y, Mat& h, Mat& cdf);

/// Batched forward, X is in_dim x N.
ForwardTrace forward_batch(const Model& model, const Mat& X, const Instruction* instr,
                           const ForwardOptions& opts = {});

struct ForwardResult {
  Vec output;
  ForwardTrace trace;
};

/// Single-example forward for either backbone kind.
ForwardResult forward(const Model& model, const Vec& x, const Instruction* instr);

/// Same backbone and adapter factors with the routed path removed.
Vec lora_baseline_forward(const Model& model, const Vec& x);
Mat lora_baseline_forward_batch(const Model& model, const Mat& X);

/// Backbone alone (adapters ignored).
Mat backbone_forward(const Backbone& backbone, const Mat& X);

}  // namespace qmem
