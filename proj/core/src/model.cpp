// Copyright 2026 The qmem Authors
// SPDX-License-Identifier: Apache-2.0

#include "qmem/model.hpp"

#include <cmath>
#include <numbers>

#include "qmem/random.hpp"

namespace qmem {

const char* method_name(Method m) {
  return m == Method::kQueryable ? "queryable" : "lora";
}

Method parse_method(const std::string& s) {
  if (s == "queryable" || s == "ours") return Method::kQueryable;
  if (s == "lora") return Method::kLora;
  throw Error("unknown method '" + s + "'");
}

void ModelConfig::validate() const {
  if (in_dim < 1 || out_dim < 1 || depth < 1 || width < 1) throw Error("config: sizes must be positive");
  if (rank < 1 || atoms < 1 || d_k < 1 || d_c < 1) throw Error("config: rank, atoms, d_k, d_c must be positive");
  if (k_active < 1 || k_active > atoms) throw Error("config: k_active must lie in [1, atoms]");
  if (blocks < 1 || blocks > depth) throw Error("config: blocks must lie in [1, depth]");
  if (!(alpha_L > 0.0)) throw Error("config: alpha_L must be positive");
  if (!(T_attn > 0.0 && T_lang > 0.0 && T_dep > 0.0)) throw Error("config: temperatures must be positive");
  if (tau_lang < 0.0 || lambda_ctx < 0.0) throw Error("config: tau_lang and lambda_ctx must be >= 0");
  if (dropout < 0.0 || dropout >= 1.0) throw Error("config: dropout must lie in [0, 1)");
  if (!(atom_clip > 0.0)) throw Error("config: atom_clip must be positive");
}

namespace {

Mat uniform_matrix(Gaussian& g, Eigen::Index rows, Eigen::Index cols, double bound) {
  Mat m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i) {
    for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = bound * (2.0 * g.uniform() - 1.0);
  }
  return m;
}

Vec uniform_vector(Gaussian& g, Eigen::Index n, double bound) {
  Vec v(n);
  for (Eigen::Index i = 0; i < n; ++i) v[i] = bound * (2.0 * g.uniform() - 1.0);
  return v;
}

}  // namespace

Backbone Backbone::init(int in_dim, int width, int depth, int out_dim, std::uint64_t seed) {
  Gaussian g(seed);
  Backbone bb;
  for (int l = 0; l < depth; ++l) {
    const int fan_in = l == 0 ? in_dim : width;
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    bb.W.push_back(uniform_matrix(g, width, fan_in, bound));
    bb.b.push_back(uniform_vector(g, width, bound));
  }
  const double bound = 1.0 / std::sqrt(static_cast<double>(width));
  bb.head_W = uniform_matrix(g, out_dim, width, bound);
  bb.head_b = uniform_vector(g, out_dim, bound);
  return bb;
}

TransformerBackbone TransformerBackbone::init(int tokens, int width, int depth, int out_dim,
                                              std::uint64_t seed) {
  Gaussian g(seed);
  TransformerBackbone tf;
  const double s = 1.0 / std::sqrt(static_cast<double>(width));
  tf.embed = gaussian_matrix(g, width, 1, 1.0);
  tf.pos = gaussian_matrix(g, width, tokens, 0.1);
  for (int l = 0; l < depth; ++l) {
    TransformerBackbone::Layer layer;
    layer.Wq = gaussian_matrix(g, width, width, s);
    layer.Wk = gaussian_matrix(g, width, width, s);
    layer.Wv = gaussian_matrix(g, width, width, s);
    layer.Wo = gaussian_matrix(g, width, width, s);
    layer.W1 = gaussian_matrix(g, width, width, s);
    layer.W2 = gaussian_matrix(g, width, width, s);
    layer.b1 = Vec::Zero(width);
    layer.b2 = Vec::Zero(width);
    tf.layers.push_back(std::move(layer));
  }
  tf.head_W = gaussian_matrix(g, out_dim, width, s);
  tf.head_b = Vec::Zero(out_dim);
  return tf;
}

Model Model::build(const ModelConfig& config, std::shared_ptr<const Backbone> backbone) {
  config.validate();
  Model m;
  m.config = config;
  const SeedTree tree(config.seed);
  m.partition = BlockPartition::equal(config.depth, config.blocks);

  auto make_layer = [&](int d_in, int d_out, std::string_view stream, std::uint64_t index) {
    AdapterLayer layer = AdapterLayer::init(d_in, d_out, config.rank, config.alpha_L,
                                            tree.seed(stream, index));
    layer.eta = config.eta_init;
    layer.dropout_rate = config.dropout;
    layer.gate_clamped = config.gate_clamped;
    return layer;
  };

  if (config.backbone == BackboneKind::kMlp) {
    if (!backbone) {
      backbone = std::make_shared<const Backbone>(Backbone::init(
          config.in_dim, config.width, config.depth, config.out_dim, tree.seed("backbone")));
    }
    m.backbone = std::move(backbone);
    for (int l = 0; l < config.depth; ++l) {
      m.layers.push_back(make_layer(l == 0 ? config.in_dim : config.width, config.width,
                                    "adapter", static_cast<std::uint64_t>(l)));
    }
  } else {
    m.transformer = std::make_shared<const TransformerBackbone>(TransformerBackbone::init(
        config.in_dim, config.width, config.depth, config.out_dim, tree.seed("transformer")));
    for (int l = 0; l < config.depth; ++l) {
      AttentionAdapter att;
      for (int p = 0; p < 4; ++p) {
        att.proj[static_cast<std::size_t>(p)] =
            make_layer(config.width, config.width, "attention_adapter",
                       static_cast<std::uint64_t>(4 * l + p));
      }
      m.attention.push_back(std::move(att));
    }
  }

  m.bank = AtomBank::random(config.atoms, config.rank, config.d_k, tree.seed("bank"),
                            config.atom_clip);
  m.router = RouterParams::random(config.d_k, config.rank, config.d_c, tree.seed("router"));
  m.router.T_attn = config.T_attn;
  m.router.T_lang = config.T_lang;
  m.router.T_dep = config.T_dep;
  m.router.tau_lang = config.tau_lang;
  m.router.lambda_ctx = config.lambda_ctx;
  m.router.k_active = config.k_active;
  Gaussian gp(tree.seed("layer_prior"));
  for (int b = 0; b < config.blocks; ++b) {
    m.router.layer_priors.push_back(
        gaussian_vector(gp, config.d_k, 1.0 / std::sqrt(static_cast<double>(config.d_k))));
  }
  m.validate();
  return m;
}

void Model::validate() const {
  config.validate();
  bank.validate();
  router.validate(bank);
  partition.validate(config.depth);
  if (static_cast<int>(router.layer_priors.size()) != partition.size()) {
    throw ShapeError("model: need one layer prior per block");
  }
  if (config.backbone == BackboneKind::kMlp) {
    if (!backbone || backbone->depth() != config.depth) throw ShapeError("model: backbone depth");
    if (static_cast<int>(layers.size()) != config.depth) throw ShapeError("model: adapter count");
    for (int l = 0; l < config.depth; ++l) {
      const AdapterLayer& a = layers[static_cast<std::size_t>(l)];
      a.validate();
      const Mat& W = backbone->W[static_cast<std::size_t>(l)];
      if (a.d_in() != W.cols() || a.d_out() != W.rows() || a.rank() != bank.r) {
        throw ShapeError("model: adapter shape does not match backbone layer");
      }
    }
  } else {
    if (!transformer || static_cast<int>(attention.size()) != config.depth) {
      throw ShapeError("model: transformer adapters");
    }
  }
}

double normal_cdf(double x) { return 0.5 * (1.0 + std::erf(x * (std::numbers::sqrt2 / 2.0))); }

double gelu(double x) { return x * normal_cdf(x); }

double gelu_grad_from_cdf(double x, double cdf) {
  constexpr double kInvSqrt2Pi = 0.3989422804014327;
  return cdf + x * kInvSqrt2Pi * std::exp(-0.5 * x * x);
}

double gelu_grad(double x) { return gelu_grad_from_cdf(x, normal_cdf(x)); }

void gelu_forward(const Mat& y, Mat& h, Mat& cdf) {
  cdf.resize(y.rows(), y.cols());
  h.resize(y.rows(), y.cols());
  const Eigen::Index n = y.size();
  const double* py = y.data();
  double* pc = cdf.data();
  double* ph = h.data();
  for (Eigen::Index i = 0; i < n; ++i) {
    pc[i] = normal_cdf(py[i]);
    ph[i] = py[i] * pc[i];
  }
}

namespace {

std::vector<Vec> context_for(const std::vector<BlockTrace>& done, int unit) {
  std::vector<Vec> out;
  out.reserve(done.size());
  for (const BlockTrace& bt : done) out.push_back(bt.sbar.col(unit));
  return out;
}

// Routes every unit of block `b` given the entry rank states.
void route_block(const Model& model, int b, const Mat& entry, const Instruction* instr,
                 const RoutingCache& cache, const std::vector<BlockTrace>& done, BlockTrace& bt,
                 const ForwardOptions& opts) {
  bt.s_entry = entry;
  const auto units = static_cast<int>(entry.cols());
  bt.query.reserve(static_cast<std::size_t>(units));
  bt.routes.reserve(static_cast<std::size_t>(units));
  for (int u = 0; u < units; ++u) {
    DepthContext ctx;
    ctx.summaries = context_for(done, u);
    QueryParts parts = build_query_parts(model.router,
                                         model.router.layer_priors[static_cast<std::size_t>(b)],
                                         entry.col(u), instr, ctx);
    bt.routes.push_back(route(model.bank, model.router, parts.q, cache));
    if (opts.route_hook) opts.route_hook(b, u, bt.routes.back());
    bt.query.push_back(std::move(parts));
    bt.context.push_back(std::move(ctx.summaries));
  }
}

ForwardTrace forward_mlp(const Model& model, const Mat& X, const Instruction* instr,
                         const ForwardOptions& opts, bool routed) {
  const Backbone& bb = *model.backbone;
  if (X.rows() != model.config.in_dim) throw ShapeError("forward: input dimension");
  const auto N = static_cast<int>(X.cols());
  if (N < 1) throw ShapeError("forward: empty batch");
  ForwardTrace tr;
  tr.mode = model.config.routing;
  tr.batch = N;
  tr.layers.resize(static_cast<std::size_t>(bb.depth()));
  const int units = tr.units();
  const int r = model.bank.r;
  const RoutingCache cache = routed ? RoutingCache::build(model.bank, model.router, instr) : RoutingCache{};

  Gaussian drop_rng(opts.dropout_seed);
  Mat H = X;
  for (int b = 0; b < model.partition.size(); ++b) {
    const auto [begin, end] = model.partition.blocks[static_cast<std::size_t>(b)];
    BlockTrace bt;
    Mat zsum = Mat::Zero(r, units);
    for (int l = begin; l < end; ++l) {
      const auto li = static_cast<std::size_t>(l);
      const AdapterLayer& ad = model.layers[li];
      LayerTrace& lt = tr.layers[li];
      lt.h_in = H;
      if (opts.train && ad.dropout_rate > 0.0) {
        const double keep = 1.0 - ad.dropout_rate;
        lt.mask.resize(H.rows(), H.cols());
        for (Eigen::Index j = 0; j < H.cols(); ++j) {
          for (Eigen::Index i = 0; i < H.rows(); ++i) {
            lt.mask(i, j) = drop_rng.uniform() < keep ? 1.0 / keep : 0.0;
          }
        }
        lt.a_in = H.cwiseProduct(lt.mask);
      }
      const Mat& a_in = lt.a_in.size() ? lt.a_in : lt.h_in;
      lt.s.noalias() = ad.A * a_in;

      if (routed) {
        if (l == begin) {
          Mat entry = (tr.mode == RoutingMode::kPerExample) ? lt.s
                                                            : Mat(lt.s.rowwise().mean());
          route_block(model, b, entry, instr, cache, tr.blocks, bt, opts);
        }
        lt.gate = ad.gate();
        lt.d.resize(r, N);
        if (units == 1) {
          lt.d.noalias() = bt.routes[0].S * lt.s;
        } else {
          for (int n = 0; n < N; ++n) {
            lt.d.col(n).noalias() = bt.routes[static_cast<std::size_t>(n)].S * lt.s.col(n);
          }
        }
        lt.t = lt.s + lt.gate * lt.d;
        if (units == 1) {
          zsum.col(0) += lt.s.rowwise().mean();
        } else {
          zsum += lt.s;
        }
      } else {
        lt.t = lt.s;
      }

      lt.y.noalias() = bb.W[li] * H;
      lt.y.colwise() += bb.b[li];
      lt.y.noalias() += ad.scale() * (ad.B * lt.t);
      gelu_forward(lt.y, H, lt.cdf);
    }
    if (routed) {
      bt.sbar = zsum / static_cast<double>(end - begin);
      tr.blocks.push_back(std::move(bt));
    }
  }
  tr.output.noalias() = bb.head_W * H;
  tr.output.colwise() += bb.head_b;
  tr.h_out = std::move(H);
  if (!opts.keep_trace) tr.layers.clear();
  return tr;
}

Mat adapted_projection(const AdapterLayer& ad, const Mat& W, const Mat& X, const Mat* S,
                       Mat& R_out) {
  R_out.noalias() = ad.A * X;
  Mat t = R_out;
  if (S != nullptr) t.noalias() += ad.gate() * (*S * R_out);
  Mat Z = W * X;
  Z.noalias() += ad.scale() * (ad.B * t);
  return Z;
}

ForwardTrace forward_transformer(const Model& model, const Vec& x, const Instruction* instr,
                                 bool routed, const ForwardOptions& opts) {
  const TransformerBackbone& tf = *model.transformer;
  const auto T = static_cast<int>(tf.pos.cols());
  if (x.size() != T) throw ShapeError("forward: input dimension");
  const auto width = static_cast<double>(tf.pos.rows());
  Mat X = tf.embed * x.transpose() + tf.pos;

  ForwardTrace tr;
  tr.mode = RoutingMode::kPerExample;
  tr.batch = 1;
  const int r = model.bank.r;
  const RoutingCache cache = routed ? RoutingCache::build(model.bank, model.router, instr) : RoutingCache{};
  for (int b = 0; b < model.partition.size(); ++b) {
    const auto [begin, end] = model.partition.blocks[static_cast<std::size_t>(b)];
    BlockTrace bt;
    Vec zsum = Vec::Zero(r);
    for (int l = begin; l < end; ++l) {
      const auto& layer = tf.layers[static_cast<std::size_t>(l)];
      const AttentionAdapter& att = model.attention[static_cast<std::size_t>(l)];
      Mat RQ = att.at(Projection::kQ).A * X;
      Mat RK = att.at(Projection::kK).A * X;
      Mat RV = att.at(Projection::kV).A * X;
      const Vec state = attention_router_state(RQ.transpose(), RK.transpose(), RV.transpose());
      if (routed && l == begin) route_block(model, b, Mat(state), instr, cache, tr.blocks, bt, opts);
      const Mat* S = routed ? &bt.routes[0].S : nullptr;
      Mat scratch;
      const Mat Zq = adapted_projection(att.at(Projection::kQ), layer.Wq, X, S, scratch);
      const Mat Zk = adapted_projection(att.at(Projection::kK), layer.Wk, X, S, scratch);
      const Mat Zv = adapted_projection(att.at(Projection::kV), layer.Wv, X, S, scratch);
      Mat scores = (Zq.transpose() * Zk) / std::sqrt(width);  // query rows
      for (Eigen::Index i = 0; i < scores.rows(); ++i) {
        scores.row(i) = softmax(scores.row(i).transpose()).weights().transpose();
      }
      const Mat mixed = Zv * scores.transpose();
      X += adapted_projection(att.at(Projection::kO), layer.Wo, mixed, S, scratch);
      Mat hidden = layer.W1 * X;
      hidden.colwise() += layer.b1;
      hidden = hidden.unaryExpr([](double v) { return gelu(v); });
      Mat ff = layer.W2 * hidden;
      ff.colwise() += layer.b2;
      X += ff;
      zsum += state;
    }
    if (routed) {
      bt.sbar = Mat(zsum / static_cast<double>(end - begin));
      tr.blocks.push_back(std::move(bt));
    }
  }
  const Vec pooled = X.rowwise().mean();
  tr.h_out = pooled;
  tr.output = tf.head_W * pooled + tf.head_b;
  return tr;
}

}  // namespace

ForwardTrace forward_batch(const Model& model, const Mat& X, const Instruction* instr,
                           const ForwardOptions& opts) {
  if (model.config.backbone == BackboneKind::kTinyTransformer) {
    if (X.cols() != 1) throw Error("forward: the transformer backbone runs one example at a time");
    return forward_transformer(model, X.col(0), instr, model.routed(), opts);
  }
  return forward_mlp(model, X, instr, opts, model.routed());
}

ForwardResult forward(const Model& model, const Vec& x, const Instruction* instr) {
  ForwardTrace tr = forward_batch(model, Mat(x), instr);
  Vec out = tr.output.col(0);
  return ForwardResult{std::move(out), std::move(tr)};
}

Mat lora_baseline_forward_batch(const Model& model, const Mat& X) {
  if (model.config.backbone == BackboneKind::kTinyTransformer) {
    if (X.cols() != 1) throw Error("forward: the transformer backbone runs one example at a time");
    return forward_transformer(model, X.col(0), nullptr, false, ForwardOptions{}).output;
  }
  ForwardOptions opts;
  opts.keep_trace = false;
  return forward_mlp(model, X, nullptr, opts, false).output;
}

Vec lora_baseline_forward(const Model& model, const Vec& x) {
  return lora_baseline_forward_batch(model, Mat(x)).col(0);
}

Mat backbone_forward(const Backbone& bb, const Mat& X) {
  Mat H = X;
  for (int l = 0; l < bb.depth(); ++l) {
    const auto li = static_cast<std::size_t>(l);
    Mat y = bb.W[li] * H;
    y.colwise() += bb.b[li];
    H = y.unaryExpr([](double v) { return gelu(v); });
  }
  Mat out = bb.head_W * H;
  out.colwise() += bb.head_b;
  return out;
}

}  // namespace qmem
