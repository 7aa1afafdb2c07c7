// Copyright 2026 The qmem Authors
// SPDX-License-Identifier: Apache-2.0

#include "qmem/depth_context.hpp"

#include <cmath>

namespace qmem {

BlockPartition BlockPartition::equal(int layers, int count) {
  if (count < 1 || layers < count) throw Error("block partition: need 1 <= blocks <= layers");
  BlockPartition p;
  const int size = layers / count;
  for (int b = 0; b < count; ++b) {
    const int begin = b * size;
    const int end = (b == count - 1) ? layers : begin + size;
    p.blocks.emplace_back(begin, end);
  }
  return p;
}

int BlockPartition::block_of(int layer) const {
  for (int b = 0; b < size(); ++b) {
    const auto [begin, end] = blocks[static_cast<std::size_t>(b)];
    if (layer >= begin && layer < end) return b;
  }
  throw Error("block partition: layer outside every block");
}

bool BlockPartition::is_entry(int layer) const {
  for (const auto& [begin, end] : blocks) {
    if (layer == begin) return true;
  }
  return false;
}

void BlockPartition::validate(int layers) const {
  if (blocks.empty()) throw Error("block partition: no blocks");
  int expect = 0;
  for (const auto& [begin, end] : blocks) {
    if (begin != expect || end <= begin) throw Error("block partition: ranges must be contiguous");
    expect = end;
  }
  if (expect != layers) throw Error("block partition: ranges do not cover every layer");
}

void DepthContext::begin_block(int r) {
  if (open_) throw Error("depth context: block already open");
  z_ = Vec::Zero(r);
  n_ = 0;
  open_ = true;
}

void DepthContext::accumulate(const Vec& s) {
  if (!open_) throw Error("depth context: no open block");
  if (s.size() != z_.size()) throw ShapeError("depth context: state dimension");
  z_ += s;
  ++n_;
}

void DepthContext::end_block() {
  if (!open_ || n_ == 0) throw Error("depth context: closing an empty block");
  summaries.push_back(z_ / static_cast<double>(n_));
  open_ = false;
}

Vec block_mean(const std::vector<Vec>& states) {
  if (states.empty()) throw Error("block_mean: empty list");
  Vec sum = Vec::Zero(states.front().size());
  for (const Vec& s : states) {
    if (s.size() != sum.size()) throw ShapeError("block_mean: dimension mismatch");
    sum += s;
  }
  return sum / static_cast<double>(states.size());
}

Vec depth_logits(const RouterParams& params, const Vec& q0, const DepthContext& ctx) {
  if (ctx.summaries.empty()) throw Error("depth_logits: empty context");
  if (q0.size() != params.Q_dep_q.cols()) throw ShapeError("depth_logits: q0 dimension");
  const Vec qn = rmsnorm(params.Q_dep_q * q0, params.eps);
  const double scale = 1.0 / (std::sqrt(static_cast<double>(params.d_k())) * params.T_dep);
  Vec xi(static_cast<Eigen::Index>(ctx.summaries.size()));
  for (std::size_t i = 0; i < ctx.summaries.size(); ++i) {
    if (ctx.summaries[i].size() != params.Q_dep_k.cols()) {
      throw ShapeError("depth_logits: summary dimension");
    }
    xi[static_cast<Eigen::Index>(i)] =
        qn.dot(rmsnorm(params.Q_dep_k * ctx.summaries[i], params.eps)) * scale;
  }
  return xi;
}

namespace {

Vec mix_summaries(const DepthContext& ctx, const Vec& beta) {
  Vec u = Vec::Zero(ctx.summaries.front().size());
  for (std::size_t i = 0; i < ctx.summaries.size(); ++i) {
    u += beta[static_cast<Eigen::Index>(i)] * ctx.summaries[i];
  }
  return u;
}

}  // namespace

Vec depth_summary(const RouterParams& params, const Vec& q0, const DepthContext& ctx) {
  if (ctx.summaries.empty()) return Vec::Zero(params.rank());
  return mix_summaries(ctx, softmax(depth_logits(params, q0, ctx)).weights());
}

QueryParts build_query_parts(const RouterParams& params, const Vec& w, const Vec& s_entry,
                             const Instruction* instr, const DepthContext& ctx) {
  if (w.size() != params.d_k()) throw ShapeError("build_query: prior dimension is not d_k");
  if (s_entry.size() != params.rank()) throw ShapeError("build_query: entry state dimension");
  QueryParts out;
  out.q0 = w + params.Q_cur * s_entry;
  if (instr != nullptr && params.lambda_ctx != 0.0) {
    if (instr->embedding.size() != params.Q_ctx.cols()) {
      throw ShapeError("build_query: embedding dimension");
    }
    out.q0.noalias() += params.lambda_ctx * (params.Q_ctx * instr->embedding);
  }
  if (ctx.summaries.empty()) {
    out.u = Vec::Zero(params.rank());
    out.q = out.q0;
    return out;
  }
  out.xi = depth_logits(params, out.q0, ctx);
  out.beta = softmax(out.xi).weights();
  out.u = mix_summaries(ctx, out.beta);
  out.q = out.q0 + params.Q_dep * out.u;
  return out;
}

Vec build_query(const RouterParams& params, const Vec& w, const Vec& s_entry,
                const Instruction* instr, const DepthContext& ctx) {
  return build_query_parts(params, w, s_entry, instr, ctx).q;
}

}  // namespace qmem
