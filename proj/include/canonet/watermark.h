#ifndef CANONET_WATERMARK_H_
#define CANONET_WATERMARK_H_

#include <cstdint>
#include <span>
#include <vector>

#include "canonet/graph.h"

namespace canonet {

// Index-ordered white-box watermark on one Conv2d/Linear weight, flattened
// in (out_channel, in_channel, kh, kw) order. Bit i reads step(X_i . v).
struct WatermarkKey {
  NodeId layer = 0;
  int n = 0;
  int64_t m = 0;
  uint64_t seed = 0;
  std::vector<uint8_t> bits;
  std::vector<double> projection;  // n x m row-major, regenerated from seed

  double x(int i, int64_t k) const { return projection[i * m + k]; }
};

// Projection rows come from Rng(seed).fork(1) (standard normal), message
// bits from Rng(seed).fork(2).
WatermarkKey keygen(const Graph& g, NodeId layer, int n, uint64_t seed);
// Rebuilds bits and projection for (layer, n, m, seed).
WatermarkKey make_key(NodeId layer, int n, int64_t m, uint64_t seed);

struct Extraction {
  double similarity = 0.0;
  // False when the layer's weight length differs from the key's m; the read
  // is then zero padded or truncated and the similarity is degraded.
  bool compatible = true;
  int64_t expected_m = 0;
  int64_t actual_m = 0;
};

Extraction extract_similarity(const Graph& g, const WatermarkKey& key);
Extraction extract_from_weights(std::span<const double> v,
                                const WatermarkKey& key);

struct EmbedResult {
  Graph graph;
  int iterations = 0;  // full sweeps that changed the weights
  double min_margin = 0.0;
};

// Cyclic projections onto the half-spaces sign_i * X_i . v >= margin, each
// violated row pushed to twice the margin. Stops when every bit holds with
// the margin; throws kNonConvergence after max_iters sweeps.
EmbedResult embed(const Graph& g, const WatermarkKey& key, int max_iters = 1000,
                  double step_size = 1.0, double margin = 0.01);

}  // namespace canonet

#endif  // CANONET_WATERMARK_H_
