#include "canonet/graph.h"

#include <algorithm>
#include <functional>
#include <map>
#include <numeric>
#include <queue>
#include <set>

#include "canonet/error.h"

namespace canonet {

namespace {

constexpr std::pair<NodeKind, std::string_view> kKindNames[] = {
    {NodeKind::kInput, "Input"},
    {NodeKind::kConv2d, "Conv2d"},
    {NodeKind::kLinear, "Linear"},
    {NodeKind::kBatchNorm, "BatchNorm"},
    {NodeKind::kReLU, "ReLU"},
    {NodeKind::kAdd, "Add"},
    {NodeKind::kCat, "Cat"},
    {NodeKind::kAvgPoolGlobal, "AvgPoolGlobal"},
    {NodeKind::kFlatten, "Flatten"},
    {NodeKind::kOutput, "Output"},
};

[[noreturn]] void conflict(NodeId id, const std::string& what) {
  throw Error(ErrorCode::kShapeConflict,
              "node " + std::to_string(id) + ": " + what);
}

std::string str(const Shape& s) { return shape_to_string(s); }

}  // namespace

std::string_view node_kind_name(NodeKind kind) {
  for (const auto& [k, name] : kKindNames) {
    if (k == kind) return name;
  }
  return "?";
}

std::optional<NodeKind> parse_node_kind(std::string_view name) {
  for (const auto& [k, n] : kKindNames) {
    if (n == name) return k;
  }
  return std::nullopt;
}

const Tensor& Node::weight() const {
  if (kind == NodeKind::kConv2d) return std::get<ConvParams>(params).weight;
  return std::get<LinearParams>(params).weight;
}
Tensor& Node::weight() {
  if (kind == NodeKind::kConv2d) return std::get<ConvParams>(params).weight;
  return std::get<LinearParams>(params).weight;
}
const Tensor& Node::bias() const {
  if (kind == NodeKind::kConv2d) return std::get<ConvParams>(params).bias;
  return std::get<LinearParams>(params).bias;
}
Tensor& Node::bias() {
  if (kind == NodeKind::kConv2d) return std::get<ConvParams>(params).bias;
  return std::get<LinearParams>(params).bias;
}

Graph Graph::build(GraphSpec spec) {
  Graph g;
  g.nodes_ = std::move(spec.nodes);
  g.edges_ = std::move(spec.edges);
  g.meta_ = std::move(spec.meta);
  g.index();
  g.infer_shapes();
  return g;
}

GraphSpec Graph::spec() const { return GraphSpec{nodes_, edges_, meta_}; }

size_t Graph::pos(NodeId id) const {
  auto it = index_.find(id);
  if (it == index_.end()) {
    throw Error(ErrorCode::kInvalidArgument,
                "unknown node id " + std::to_string(id));
  }
  return it->second;
}

const Node& Graph::node(NodeId id) const { return nodes_[pos(id)]; }
Node& Graph::mutable_node(NodeId id) { return nodes_[pos(id)]; }
const std::vector<NodeId>& Graph::inputs_of(NodeId id) const {
  return inputs_[pos(id)];
}
const std::vector<std::pair<NodeId, int>>& Graph::successors(NodeId id) const {
  return succ_[pos(id)];
}
const Shape& Graph::shape_of(NodeId id) const { return shapes_[pos(id)]; }
int Graph::topo_position(NodeId id) const { return topo_pos_[pos(id)]; }

void Graph::index() {
  index_.clear();
  for (size_t i = 0; i < nodes_.size(); ++i) {
    if (!index_.emplace(nodes_[i].id, i).second) {
      throw Error(ErrorCode::kInvalidArgument,
                  "duplicate node id " + std::to_string(nodes_[i].id));
    }
  }
  const size_t n = nodes_.size();
  std::vector<std::map<int, NodeId>> ports(n);
  succ_.assign(n, {});
  for (const Edge& e : edges_) {
    if (!index_.count(e.src) || !index_.count(e.dst)) {
      throw Error(ErrorCode::kDanglingEdge,
                  "edge " + std::to_string(e.src) + "->" +
                      std::to_string(e.dst) + " references a missing node");
    }
    if (!ports[index_[e.dst]].emplace(e.port, e.src).second) {
      throw Error(ErrorCode::kDanglingEdge,
                  "node " + std::to_string(e.dst) + " has two edges on port " +
                      std::to_string(e.port));
    }
    succ_[index_[e.src]].emplace_back(e.dst, e.port);
  }
  inputs_.assign(n, {});
  int num_inputs = 0, num_outputs = 0;
  for (size_t i = 0; i < n; ++i) {
    const Node& node = nodes_[i];
    int expected_port = 0;
    for (const auto& [port, src] : ports[i]) {
      if (port != expected_port++) {
        throw Error(ErrorCode::kDanglingEdge,
                    "node " + std::to_string(node.id) +
                        " has non-contiguous input ports");
      }
      inputs_[i].push_back(src);
    }
    const size_t arity = inputs_[i].size();
    bool ok = true;
    switch (node.kind) {
      case NodeKind::kInput: ok = arity == 0; ++num_inputs; break;
      case NodeKind::kAdd: ok = arity == 2; break;
      case NodeKind::kCat: ok = arity >= 2; break;
      case NodeKind::kOutput: ok = arity == 1; ++num_outputs; break;
      default: ok = arity == 1; break;
    }
    if (!ok) {
      throw Error(ErrorCode::kDanglingEdge,
                  std::string(node_kind_name(node.kind)) + " node " +
                      std::to_string(node.id) + " has " +
                      std::to_string(arity) + " inputs");
    }
    if (node.kind != NodeKind::kOutput && succ_[i].empty()) {
      throw Error(ErrorCode::kDanglingEdge,
                  "node " + std::to_string(node.id) + " has no consumers");
    }
    if (node.kind == NodeKind::kOutput && !succ_[i].empty()) {
      throw Error(ErrorCode::kDanglingEdge, "Output node has successors");
    }
    if (node.kind == NodeKind::kInput) input_id_ = node.id;
    if (node.kind == NodeKind::kOutput) output_id_ = node.id;
  }
  if (num_inputs != 1 || num_outputs != 1) {
    throw Error(ErrorCode::kInvalidArgument,
                "graph needs exactly one Input and one Output node");
  }

  // Kahn with a min-heap keyed by NodeId for a stable order.
  std::vector<int> indegree(n);
  for (size_t i = 0; i < n; ++i) indegree[i] = inputs_[i].size();
  std::priority_queue<NodeId, std::vector<NodeId>, std::greater<>> ready;
  for (size_t i = 0; i < n; ++i) {
    if (indegree[i] == 0) ready.push(nodes_[i].id);
  }
  topo_.clear();
  while (!ready.empty()) {
    NodeId id = ready.top();
    ready.pop();
    topo_.push_back(id);
    for (const auto& [dst, port] : succ_[index_[id]]) {
      if (--indegree[index_[dst]] == 0) ready.push(dst);
    }
  }
  if (topo_.size() != n) {
    throw Error(ErrorCode::kCycle, "graph contains a cycle");
  }
  topo_pos_.assign(n, 0);
  for (size_t i = 0; i < topo_.size(); ++i) topo_pos_[index_[topo_[i]]] = i;
}

void Graph::reinfer() { infer_shapes(); }

void Graph::infer_shapes() {
  shapes_.assign(nodes_.size(), {});
  for (NodeId id : topo_) {
    const size_t i = index_[id];
    const Node& node = nodes_[i];
    std::vector<const Shape*> in;
    for (NodeId src : inputs_[i]) in.push_back(&shapes_[index_[src]]);
    Shape out;
    switch (node.kind) {
      case NodeKind::kInput: {
        out = node.input().shape;
        if (out.empty()) conflict(id, "input shape is empty");
        for (int64_t d : out) {
          if (d <= 0) conflict(id, "input shape has non-positive dim");
        }
        break;
      }
      case NodeKind::kConv2d: {
        const ConvParams& p = node.conv();
        const Shape& s = *in[0];
        if (s.size() != 3) conflict(id, "Conv2d input must be [C,H,W], got " + str(s));
        if (p.weight.rank() != 4) conflict(id, "Conv2d weight must be rank 4");
        if (p.groups <= 0 || p.stride <= 0 || p.padding < 0) {
          conflict(id, "Conv2d groups/stride/padding invalid");
        }
        if (s[0] % p.groups != 0 || p.weight.dim(0) % p.groups != 0) {
          conflict(id, "Conv2d channels not divisible by groups");
        }
        if (p.weight.dim(1) * p.groups != s[0]) {
          conflict(id, "Conv2d weight expects " +
                           std::to_string(p.weight.dim(1) * p.groups) +
                           " input channels, producer has " +
                           std::to_string(s[0]));
        }
        if (p.bias.rank() != 1 || p.bias.dim(0) != p.weight.dim(0)) {
          conflict(id, "Conv2d bias length mismatch");
        }
        const int64_t kh = p.weight.dim(2), kw = p.weight.dim(3);
        if (s[1] + 2 * p.padding < kh || s[2] + 2 * p.padding < kw) {
          conflict(id, "Conv2d kernel larger than padded input");
        }
        out = {p.weight.dim(0), (s[1] + 2 * p.padding - kh) / p.stride + 1,
               (s[2] + 2 * p.padding - kw) / p.stride + 1};
        break;
      }
      case NodeKind::kLinear: {
        const auto& p = std::get<LinearParams>(node.params);
        const Shape& s = *in[0];
        if (s.size() != 1) conflict(id, "Linear input must be rank 1, got " + str(s));
        if (p.weight.rank() != 2 || p.weight.dim(1) != s[0]) {
          conflict(id, "Linear weight " + str(p.weight.shape()) +
                           " incompatible with input " + str(s));
        }
        if (p.bias.rank() != 1 || p.bias.dim(0) != p.weight.dim(0)) {
          conflict(id, "Linear bias length mismatch");
        }
        out = {p.weight.dim(0)};
        break;
      }
      case NodeKind::kBatchNorm: {
        const BatchNormParams& p = node.bn();
        const Shape& s = *in[0];
        if (s.size() != 1 && s.size() != 3) conflict(id, "BatchNorm input rank must be 1 or 3");
        for (const Tensor* t : {&p.gamma, &p.beta, &p.mean, &p.var}) {
          if (t->rank() != 1 || t->dim(0) != s[0]) {
            conflict(id, "BatchNorm parameter length != channel width " +
                             std::to_string(s[0]));
          }
        }
        if (!(p.eps > 0.0)) conflict(id, "BatchNorm eps must be positive");
        out = s;
        break;
      }
      case NodeKind::kReLU:
      case NodeKind::kOutput:
        out = *in[0];
        break;
      case NodeKind::kAdd:
        if (*in[0] != *in[1]) {
          conflict(id, "Add operands " + str(*in[0]) + " and " + str(*in[1]) +
                           " differ");
        }
        out = *in[0];
        break;
      case NodeKind::kCat: {
        int64_t c = 0;
        for (const Shape* s : in) {
          if (s->size() != 3) conflict(id, "Cat inputs must be [C,H,W]");
          if ((*s)[1] != (*in[0])[1] || (*s)[2] != (*in[0])[2]) {
            conflict(id, "Cat spatial dims differ: " + str(*in[0]) + " vs " + str(*s));
          }
          c += (*s)[0];
        }
        out = {c, (*in[0])[1], (*in[0])[2]};
        break;
      }
      case NodeKind::kAvgPoolGlobal:
        if (in[0]->size() != 3) conflict(id, "AvgPoolGlobal input must be [C,H,W]");
        out = {(*in[0])[0]};
        break;
      case NodeKind::kFlatten:
        if (in[0]->size() != 3) conflict(id, "Flatten input must be [C,H,W]");
        out = {shape_numel(*in[0])};
        break;
    }
    shapes_[i] = std::move(out);
  }
}

std::vector<NodeId> topo_order(const Graph& g) { return g.topo_order(); }

std::vector<Tensor> forward_all(const Graph& g, const Tensor& x) {
  if (x.shape() != g.shape_of(g.input_id())) {
    throw Error(ErrorCode::kShapeMismatch,
                "forward: input shape " + shape_to_string(x.shape()) +
                    " != graph input " +
                    shape_to_string(g.shape_of(g.input_id())));
  }
  std::unordered_map<NodeId, size_t> pos;
  for (size_t i = 0; i < g.nodes().size(); ++i) pos[g.nodes()[i].id] = i;
  std::vector<Tensor> values(g.nodes().size());
  auto in = [&](NodeId id, size_t k) -> const Tensor& {
    return values[pos[g.inputs_of(id)[k]]];
  };
  for (NodeId id : g.topo_order()) {
    const Node& node = g.node(id);
    Tensor out;
    switch (node.kind) {
      case NodeKind::kInput: out = x; break;
      case NodeKind::kConv2d: {
        const ConvParams& p = node.conv();
        out = ops::conv2d(in(id, 0), p.weight, p.bias, p.groups, p.stride,
                          p.padding);
        break;
      }
      case NodeKind::kLinear:
        out = ops::linear(in(id, 0), node.weight(), node.bias());
        break;
      case NodeKind::kBatchNorm: {
        const BatchNormParams& p = node.bn();
        out = ops::batchnorm(in(id, 0), p.gamma, p.beta, p.mean, p.var, p.eps);
        break;
      }
      case NodeKind::kReLU: out = ops::relu(in(id, 0)); break;
      case NodeKind::kAdd: out = ops::add(in(id, 0), in(id, 1)); break;
      case NodeKind::kCat: {
        std::vector<Tensor> parts;
        for (size_t k = 0; k < g.inputs_of(id).size(); ++k) {
          parts.push_back(in(id, k));
        }
        out = ops::cat_channels(parts);
        break;
      }
      case NodeKind::kAvgPoolGlobal: out = ops::avgpool_global(in(id, 0)); break;
      case NodeKind::kFlatten: out = ops::flatten(in(id, 0)); break;
      case NodeKind::kOutput: out = in(id, 0); break;
    }
    values[pos[id]] = std::move(out);
  }
  return values;
}

const Tensor& node_value(const Graph& g, const std::vector<Tensor>& values,
                         NodeId id) {
  for (size_t i = 0; i < g.nodes().size(); ++i) {
    if (g.nodes()[i].id == id) return values[i];
  }
  throw Error(ErrorCode::kInvalidArgument, "unknown node " + std::to_string(id));
}

Tensor forward(const Graph& g, const Tensor& x) {
  std::vector<Tensor> values = forward_all(g, x);
  return node_value(g, values, g.output_id());
}

namespace {

struct Walker {
  const Graph& g;
  ProducerEdge& edge;
  std::set<std::pair<NodeId, int64_t>> seen;

  void barrier(const std::string& why) {
    if (edge.eligible) {
      edge.eligible = false;
      edge.reason = why;
    }
  }

  void visit(NodeId from, int64_t offset, int64_t hw,
             std::vector<PathStep>& steps) {
    for (const auto& [dst, port] : g.successors(from)) {
      const Node& n = g.node(dst);
      switch (n.kind) {
        case NodeKind::kConv2d:
          if (n.conv().groups > 1) {
            barrier("grouped conv consumer " + std::to_string(dst));
            break;
          }
          [[fallthrough]];
        case NodeKind::kLinear:
          if (seen.emplace(dst, offset).second) {
            edge.consumers.push_back(
                ConsumerRef{dst, PathDescriptor{steps, offset, hw}});
          }
          break;
        case NodeKind::kBatchNorm:
          barrier("BatchNorm " + std::to_string(dst) +
                  " not adjacent to the producer");
          break;
        case NodeKind::kReLU:
        case NodeKind::kAvgPoolGlobal:
        case NodeKind::kAdd: {
          steps.push_back(PathStep{n.kind, dst, port, offset, edge.width, hw});
          visit(dst, offset, hw, steps);
          steps.pop_back();
          break;
        }
        case NodeKind::kCat: {
          int64_t base = 0;
          const auto& ins = g.inputs_of(dst);
          for (int k = 0; k < port; ++k) base += g.shape_of(ins[k])[0];
          steps.push_back(
              PathStep{n.kind, dst, port, base, g.shape_of(from)[0], hw});
          visit(dst, offset + base, hw, steps);
          steps.pop_back();
          break;
        }
        case NodeKind::kFlatten: {
          const Shape& s = g.shape_of(from);
          const int64_t spatial = s[1] * s[2];
          steps.push_back(PathStep{n.kind, dst, port, offset, s[0], spatial});
          visit(dst, offset, hw * spatial, steps);
          steps.pop_back();
          break;
        }
        case NodeKind::kOutput:
          edge.terminal = true;
          break;
        case NodeKind::kInput:
          break;
      }
    }
  }
};

}  // namespace

std::vector<ProducerEdge> analyze_producers(const Graph& g) {
  std::vector<ProducerEdge> out;
  for (NodeId id : g.topo_order()) {
    const Node& n = g.node(id);
    if (!n.is_linear_op()) continue;
    ProducerEdge edge;
    edge.producer = id;
    edge.width = g.shape_of(id)[0];
    edge.eligible = true;
    if (n.kind == NodeKind::kConv2d && n.conv().groups > 1) {
      edge.eligible = false;
      edge.reason = "grouped/depthwise producer";
    }
    const auto& succ = g.successors(id);
    NodeId start = id;
    if (succ.size() == 1 && g.node(succ[0].first).kind == NodeKind::kBatchNorm) {
      edge.batchnorm = succ[0].first;
      start = succ[0].first;
    }
    Walker walker{g, edge, {}};
    std::vector<PathStep> steps;
    if (edge.batchnorm) {
      steps.push_back(PathStep{NodeKind::kBatchNorm, start, 0, 0, edge.width, 1});
    }
    walker.visit(start, 0, 1, steps);
    out.push_back(std::move(edge));
  }
  return out;
}

std::vector<ProducerEdge> eligible_producers(const Graph& g) {
  std::vector<ProducerEdge> all = analyze_producers(g);
  std::erase_if(all, [](const ProducerEdge& e) { return !e.eligible; });
  return all;
}

const ProducerEdge& find_producer(const std::vector<ProducerEdge>& edges,
                                  NodeId producer) {
  for (const ProducerEdge& e : edges) {
    if (e.producer == producer) return e;
  }
  throw Error(ErrorCode::kInvalidArgument,
              "node " + std::to_string(producer) + " is not a producer");
}

namespace {

class UnionFind {
 public:
  explicit UnionFind(size_t n) : parent_(n) {
    std::iota(parent_.begin(), parent_.end(), 0);
  }
  size_t find(size_t x) {
    while (parent_[x] != x) x = parent_[x] = parent_[parent_[x]];
    return x;
  }
  void unite(size_t a, size_t b) {
    a = find(a);
    b = find(b);
    if (a != b) parent_[std::max(a, b)] = std::min(a, b);
  }

 private:
  std::vector<size_t> parent_;
};

// Producers feeding `id` through ReLU/BatchNorm/Add only; `foreign` is set
// when anything else (graph input, Cat, Flatten, pooling) contributes.
void add_sources(const Graph& g, NodeId id, std::set<NodeId>& sources,
                 bool& foreign) {
  const Node& n = g.node(id);
  switch (n.kind) {
    case NodeKind::kConv2d:
    case NodeKind::kLinear:
      sources.insert(id);
      return;
    case NodeKind::kReLU:
    case NodeKind::kBatchNorm:
      add_sources(g, g.inputs_of(id)[0], sources, foreign);
      return;
    case NodeKind::kAdd:
      for (NodeId in : g.inputs_of(id)) add_sources(g, in, sources, foreign);
      return;
    default:
      foreign = true;
      return;
  }
}

}  // namespace

std::vector<MergeGroup> merge_groups(const Graph& g) {
  const std::vector<ProducerEdge> producers = analyze_producers(g);
  std::unordered_map<NodeId, size_t> slot;
  for (size_t i = 0; i < producers.size(); ++i) slot[producers[i].producer] = i;
  UnionFind uf(producers.size());
  std::vector<bool> poisoned(producers.size(), false);
  std::vector<std::string> why(producers.size());

  for (NodeId id : g.topo_order()) {
    if (g.node(id).kind != NodeKind::kAdd) continue;
    std::set<NodeId> sources;
    bool foreign = false;
    add_sources(g, id, sources, foreign);
    if (sources.empty()) continue;
    const size_t first = slot.at(*sources.begin());
    for (NodeId s : sources) uf.unite(first, slot.at(s));
    if (foreign) {
      poisoned[first] = true;
      why[first] = "Add " + std::to_string(id) + " has a non-producer operand";
    }
  }

  std::map<size_t, MergeGroup> by_root;
  for (size_t i = 0; i < producers.size(); ++i) {
    MergeGroup& group = by_root[uf.find(i)];
    group.producers.push_back(producers[i].producer);
    if (!producers[i].rewritable() && group.eligible) {
      group.eligible = false;
      group.reason = "producer " + std::to_string(producers[i].producer) +
                     (producers[i].terminal ? " is terminal" : ": " + producers[i].reason);
    }
  }
  for (size_t i = 0; i < producers.size(); ++i) {
    if (poisoned[i]) {
      MergeGroup& group = by_root[uf.find(i)];
      group.eligible = false;
      group.reason = why[i];
    }
  }
  // Producers are visited in topological order, so root order (smallest
  // slot) is the order of each group's first member.
  std::vector<MergeGroup> out;
  for (auto& [root, group] : by_root) out.push_back(std::move(group));
  return out;
}

}  // namespace canonet
