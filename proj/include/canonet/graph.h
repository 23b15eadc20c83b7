#ifndef CANONET_GRAPH_H_
#define CANONET_GRAPH_H_

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <variant>
#include <vector>

#include "canonet/tensor.h"

namespace canonet {

using NodeId = int;

enum class NodeKind {
  kInput,
  kConv2d,
  kLinear,
  kBatchNorm,
  kReLU,
  kAdd,
  kCat,
  kAvgPoolGlobal,
  kFlatten,
  kOutput,
};

std::string_view node_kind_name(NodeKind kind);
std::optional<NodeKind> parse_node_kind(std::string_view name);

struct InputParams {
  Shape shape;
};

struct ConvParams {
  Tensor weight;  // [C_out, C_in/groups, kh, kw]
  Tensor bias;    // [C_out]
  int groups = 1;
  int stride = 1;
  int padding = 0;
};

struct LinearParams {
  Tensor weight;  // [M, N]
  Tensor bias;    // [M]
};

struct BatchNormParams {
  Tensor gamma;
  Tensor beta;
  Tensor mean;
  Tensor var;
  double eps = 1e-5;
};

using NodeParams = std::variant<std::monostate, InputParams, ConvParams,
                                LinearParams, BatchNormParams>;

struct Node {
  NodeId id = 0;
  NodeKind kind = NodeKind::kInput;
  NodeParams params;

  bool is_linear_op() const {
    return kind == NodeKind::kConv2d || kind == NodeKind::kLinear;
  }
  // Conv2d / Linear only.
  const Tensor& weight() const;
  Tensor& weight();
  const Tensor& bias() const;
  Tensor& bias();

  const ConvParams& conv() const { return std::get<ConvParams>(params); }
  ConvParams& conv() { return std::get<ConvParams>(params); }
  const BatchNormParams& bn() const { return std::get<BatchNormParams>(params); }
  BatchNormParams& bn() { return std::get<BatchNormParams>(params); }
  const InputParams& input() const { return std::get<InputParams>(params); }
};

struct Edge {
  NodeId src = 0;
  NodeId dst = 0;
  int port = 0;

  friend bool operator==(const Edge&, const Edge&) = default;
};

struct GraphMeta {
  uint64_t seed = 0;
  std::string motif;
};

struct GraphSpec {
  std::vector<Node> nodes;
  std::vector<Edge> edges;
  GraphMeta meta;
};

// Validated dataflow DAG with inferred per-node output shapes. Every node has
// exactly one output tensor; fan-out is several edges leaving one node.
class Graph {
 public:
  // Empty placeholder; only build() produces a usable graph.
  Graph() = default;
  // Throws Error with kCycle, kDanglingEdge or kShapeConflict.
  static Graph build(GraphSpec spec);

  const std::vector<Node>& nodes() const { return nodes_; }
  const std::vector<Edge>& edges() const { return edges_; }
  const GraphMeta& meta() const { return meta_; }

  bool contains(NodeId id) const { return index_.count(id) != 0; }
  const Node& node(NodeId id) const;
  // Parameter edits only. Call reinfer() afterwards.
  Node& mutable_node(NodeId id);
  void reinfer();

  // Inputs ordered by port.
  const std::vector<NodeId>& inputs_of(NodeId id) const;
  // (dst, port) pairs in edge order.
  const std::vector<std::pair<NodeId, int>>& successors(NodeId id) const;
  const Shape& shape_of(NodeId id) const;

  NodeId input_id() const { return input_id_; }
  NodeId output_id() const { return output_id_; }
  // Kahn's algorithm, ties broken by smallest NodeId.
  const std::vector<NodeId>& topo_order() const { return topo_; }
  int topo_position(NodeId id) const;

  GraphSpec spec() const;

 private:
  void index();
  void infer_shapes();
  size_t pos(NodeId id) const;

  std::vector<Node> nodes_;
  std::vector<Edge> edges_;
  GraphMeta meta_;
  std::unordered_map<NodeId, size_t> index_;
  std::vector<std::vector<NodeId>> inputs_;
  std::vector<std::vector<std::pair<NodeId, int>>> succ_;
  std::vector<Shape> shapes_;
  std::vector<NodeId> topo_;
  std::vector<int> topo_pos_;
  NodeId input_id_ = 0;
  NodeId output_id_ = 0;
};

std::vector<NodeId> topo_order(const Graph& g);

Tensor forward(const Graph& g, const Tensor& x);
// Output of every node, indexed like g.nodes().
std::vector<Tensor> forward_all(const Graph& g, const Tensor& x);
const Tensor& node_value(const Graph& g, const std::vector<Tensor>& values,
                         NodeId id);

// One structural hop between a producer and a consumer.
struct PathStep {
  NodeKind kind = NodeKind::kReLU;
  NodeId node = 0;
  int port = 0;
  int64_t offset = 0;  // Cat: channel offset of the branch; Add: unused
  int64_t length = 0;  // Cat: branch width
  int64_t hw = 1;      // Flatten: spatial factor
};

// Where a producer's channels land on a consumer's input axis. Channel c of
// the producer occupies consumer input channels (channel_offset + c); when hw
// > 1 (post-Flatten Linear) it occupies columns
// [(channel_offset + c) * hw, (channel_offset + c + 1) * hw).
struct PathDescriptor {
  std::vector<PathStep> steps;
  int64_t channel_offset = 0;
  int64_t hw = 1;
};

struct ConsumerRef {
  NodeId consumer = 0;
  PathDescriptor path;
};

struct ProducerEdge {
  NodeId producer = 0;
  int64_t width = 0;
  // BatchNorm that is the producer's sole successor.
  std::optional<NodeId> batchnorm;
  bool eligible = false;
  // Channels reach the graph Output without passing a linear consumer, so the
  // layout is observable and only identity transforms are legal.
  bool terminal = false;
  std::string reason;
  std::vector<ConsumerRef> consumers;

  bool rewritable() const { return eligible && !terminal; }
  NodeId capture_node() const { return batchnorm.value_or(producer); }
};

// Every Conv2d/Linear output, eligible or not, in topological order.
std::vector<ProducerEdge> analyze_producers(const Graph& g);
std::vector<ProducerEdge> eligible_producers(const Graph& g);
const ProducerEdge& find_producer(const std::vector<ProducerEdge>& edges,
                                  NodeId producer);

struct MergeGroup {
  std::vector<NodeId> producers;  // topological order
  // False when a member is not rewritable or an Add operand is fed by
  // something other than a producer (graph input, Cat, Flatten, ...).
  bool eligible = true;
  std::string reason;
};

// Connected components of the residual-Add alignment relation, via
// union-find. Every Conv2d/Linear appears in exactly one group; groups are
// ordered by the topological position of their first member.
std::vector<MergeGroup> merge_groups(const Graph& g);

}  // namespace canonet

#endif  // CANONET_GRAPH_H_
