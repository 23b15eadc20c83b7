#ifndef CANONET_RELAYOUT_H_
#define CANONET_RELAYOUT_H_

#include <span>
#include <vector>

#include "canonet/channel_transform.h"
#include "canonet/graph.h"

namespace canonet {

// How one output channel of a relaid-out producer is built.
struct ChannelSource {
  enum class Kind { kCopy, kZero, kExplicit };
  Kind kind = Kind::kCopy;
  int64_t src = 0;      // kCopy: old channel index
  double scale = 1.0;   // kCopy: incoming weights and bias multiplied by this
  std::vector<double> weight;  // kExplicit: incoming row
  double bias = 0.0;           // kExplicit

  static ChannelSource copy(int64_t src, double scale = 1.0) {
    return {Kind::kCopy, src, scale, {}, 0.0};
  }
  static ChannelSource zero() { return {Kind::kZero, 0, 1.0, {}, 0.0}; }
  static ChannelSource explicit_row(std::vector<double> w, double b) {
    return {Kind::kExplicit, 0, 1.0, std::move(w), b};
  }
};

// Rebuilds the producer's output channels (weights, bias, immediate BN).
// A scaled copy followed by BN gets mean*s, var*s^2 and gamma rescaled so the
// post-BN value is unchanged including the eps term. Zero and explicit
// channels get a neutral BN entry (mean 0, var 1, gamma 1, beta 0).
// Leaves shapes stale; call Graph::reinfer() once the layout is consistent.
void relayout_producer(Graph& g, const ProducerEdge& edge,
                       std::span<const ChannelSource> sources);

// Union of the members' consumers, one entry per (consumer, offset).
std::vector<ConsumerRef> group_consumers(const std::vector<ProducerEdge>& edges,
                                         std::span<const NodeId> group);

// W <- W * M on every consumer. Shapes are left stale.
void rewrite_consumers(Graph& g, std::span<const ConsumerRef> consumers,
                       const ChannelTransform& m);

// Rows of a Conv2d/Linear weight, one per output channel.
int64_t row_length(const Node& producer);

}  // namespace canonet

#endif  // CANONET_RELAYOUT_H_
