#include "canonet/watermark.h"

#include <algorithm>
#include <cmath>
#include <limits>

#include "canonet/error.h"

namespace canonet {

namespace {

double row_dot(const WatermarkKey& key, int i, std::span<const double> v) {
  double s = 0.0;
  const int64_t len = std::min<int64_t>(key.m, static_cast<int64_t>(v.size()));
  for (int64_t k = 0; k < len; ++k) s += key.x(i, k) * v[k];
  return s;
}

}  // namespace

WatermarkKey make_key(NodeId layer, int n, int64_t m, uint64_t seed) {
  if (n < 1) throw Error(ErrorCode::kInvalidArgument, "watermark needs n >= 1");
  if (m < 1) throw Error(ErrorCode::kInvalidArgument, "watermark needs m >= 1");
  WatermarkKey key;
  key.layer = layer;
  key.n = n;
  key.m = m;
  key.seed = seed;
  const Rng root(seed);
  Rng xr = root.fork(1);
  key.projection.resize(n * m);
  for (double& x : key.projection) x = xr.normal();
  Rng br = root.fork(2);
  for (int i = 0; i < n; ++i) key.bits.push_back(br.bit() ? 1 : 0);
  return key;
}

WatermarkKey keygen(const Graph& g, NodeId layer, int n, uint64_t seed) {
  if (!g.contains(layer) || !g.node(layer).is_linear_op()) {
    throw Error(ErrorCode::kInvalidArgument,
                "watermark layer " + std::to_string(layer) +
                    " is not a Conv2d/Linear node");
  }
  return make_key(layer, n, g.node(layer).weight().numel(), seed);
}

Extraction extract_from_weights(std::span<const double> v,
                                const WatermarkKey& key) {
  Extraction out;
  out.expected_m = key.m;
  out.actual_m = static_cast<int64_t>(v.size());
  out.compatible = out.actual_m == key.m;
  int hits = 0;
  for (int i = 0; i < key.n; ++i) {
    const uint8_t bit = row_dot(key, i, v) > 0.0 ? 1 : 0;
    hits += bit == key.bits[i];
  }
  out.similarity = static_cast<double>(hits) / key.n;
  return out;
}

Extraction extract_similarity(const Graph& g, const WatermarkKey& key) {
  if (!g.contains(key.layer) || !g.node(key.layer).is_linear_op()) {
    throw Error(ErrorCode::kInvalidArgument,
                "watermark layer " + std::to_string(key.layer) + " missing");
  }
  return extract_from_weights(g.node(key.layer).weight().data(), key);
}

EmbedResult embed(const Graph& g, const WatermarkKey& key, int max_iters,
                  double step_size, double margin) {
  if (!g.contains(key.layer) || !g.node(key.layer).is_linear_op() ||
      g.node(key.layer).weight().numel() != key.m) {
    throw Error(ErrorCode::kShapeMismatch,
                "watermark key does not match layer " + std::to_string(key.layer));
  }
  if (!(step_size > 0.0 && step_size <= 2.0) || !(margin > 0.0)) {
    throw Error(ErrorCode::kInvalidArgument, "embed needs 0 < step <= 2, margin > 0");
  }
  EmbedResult out;
  out.graph = g;
  std::span<double> v = out.graph.mutable_node(key.layer).weight().mutable_data();
  std::vector<double> row_norm2(key.n, 0.0);
  for (int i = 0; i < key.n; ++i) {
    for (int64_t k = 0; k < key.m; ++k) row_norm2[i] += key.x(i, k) * key.x(i, k);
  }
  for (;;) {
    bool touched = false;
    for (int i = 0; i < key.n; ++i) {
      const double sign = key.bits[i] ? 1.0 : -1.0;
      const double proj = sign * row_dot(key, i, v);
      if (proj >= margin) continue;
      const double step = step_size * (2.0 * margin - proj) / row_norm2[i];
      for (int64_t k = 0; k < key.m; ++k) v[k] += step * sign * key.x(i, k);
      touched = true;
    }
    if (!touched) break;
    if (++out.iterations >= max_iters) {
      throw Error(ErrorCode::kNonConvergence,
                  "watermark embedding did not converge in " +
                      std::to_string(max_iters) + " sweeps");
    }
  }
  out.min_margin = std::numeric_limits<double>::infinity();
  for (int i = 0; i < key.n; ++i) {
    const double sign = key.bits[i] ? 1.0 : -1.0;
    out.min_margin = std::min(out.min_margin, sign * row_dot(key, i, v));
  }
  return out;
}

}  // namespace canonet
