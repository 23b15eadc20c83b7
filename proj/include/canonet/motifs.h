#ifndef CANONET_MOTIFS_H_
#define CANONET_MOTIFS_H_

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "canonet/graph.h"

namespace canonet {

// Desk-scale stand-ins for the dominant structures of real backbones:
//   mlp             Linear-ReLU stack
//   fanout          one conv feeding two convs
//   residual        two add-dominant residual blocks
//   inception_mini  two-branch cat followed by a flattened classifier
//   dense_mini      chained (nested) cat
//   mixed           add + cat + fan-out
struct Motif {
  Graph graph;
  // Default watermark-bearing layer.
  NodeId watermark_layer = 0;
};

const std::vector<std::string>& motif_names();
Motif make_motif(std::string_view name, uint64_t seed);

// Incremental GraphSpec construction with seeded parameter init.
class GraphBuilder {
 public:
  explicit GraphBuilder(uint64_t seed);

  NodeId input(Shape shape);
  NodeId conv(NodeId in, int64_t out_channels, int64_t kernel, int padding,
              int groups = 1, int stride = 1);
  NodeId linear(NodeId in, int64_t out_features);
  NodeId batchnorm(NodeId in);
  NodeId relu(NodeId in);
  NodeId add(NodeId a, NodeId b);
  NodeId cat(const std::vector<NodeId>& ins);
  NodeId avgpool(NodeId in);
  NodeId flatten(NodeId in);
  NodeId output(NodeId in);

  const Shape& shape(NodeId id) const;
  Graph build(std::string motif_name) const;

 private:
  NodeId push(Node node, const std::vector<NodeId>& ins, Shape shape);

  Rng rng_;
  uint64_t seed_;
  GraphSpec spec_;
  std::vector<Shape> shapes_;
};

}  // namespace canonet

#endif  // CANONET_MOTIFS_H_
