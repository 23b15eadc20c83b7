#include "canonet/motifs.h"

#include <cmath>

#include "canonet/error.h"

namespace canonet {

GraphBuilder::GraphBuilder(uint64_t seed) : rng_(seed), seed_(seed) {}

NodeId GraphBuilder::push(Node node, const std::vector<NodeId>& ins,
                          Shape shape) {
  const NodeId id = static_cast<NodeId>(spec_.nodes.size());
  node.id = id;
  for (size_t k = 0; k < ins.size(); ++k) {
    spec_.edges.push_back(Edge{ins[k], id, static_cast<int>(k)});
  }
  spec_.nodes.push_back(std::move(node));
  shapes_.push_back(std::move(shape));
  return id;
}

const Shape& GraphBuilder::shape(NodeId id) const { return shapes_.at(id); }

NodeId GraphBuilder::input(Shape shape) {
  Node n;
  n.kind = NodeKind::kInput;
  n.params = InputParams{shape};
  return push(std::move(n), {}, shape);
}

NodeId GraphBuilder::conv(NodeId in, int64_t out_channels, int64_t kernel,
                          int padding, int groups, int stride) {
  const Shape& s = shape(in);
  const int64_t cpg = s[0] / groups;
  const double std = std::sqrt(2.0 / static_cast<double>(cpg * kernel * kernel));
  ConvParams p;
  p.weight = random_normal({out_channels, cpg, kernel, kernel}, 0.0, std, rng_);
  p.bias = random_uniform({out_channels}, -0.1, 0.1, rng_);
  p.groups = groups;
  p.stride = stride;
  p.padding = padding;
  Node n;
  n.kind = NodeKind::kConv2d;
  n.params = std::move(p);
  const int64_t ho = (s[1] + 2 * padding - kernel) / stride + 1;
  const int64_t wo = (s[2] + 2 * padding - kernel) / stride + 1;
  return push(std::move(n), {in}, {out_channels, ho, wo});
}

NodeId GraphBuilder::linear(NodeId in, int64_t out_features) {
  const int64_t n_in = shape(in)[0];
  LinearParams p;
  p.weight = random_normal({out_features, n_in}, 0.0,
                           std::sqrt(2.0 / static_cast<double>(n_in)), rng_);
  p.bias = random_uniform({out_features}, -0.1, 0.1, rng_);
  Node n;
  n.kind = NodeKind::kLinear;
  n.params = std::move(p);
  return push(std::move(n), {in}, {out_features});
}

NodeId GraphBuilder::batchnorm(NodeId in) {
  const int64_t c = shape(in)[0];
  BatchNormParams p;
  p.gamma = random_uniform({c}, 0.6, 1.4, rng_);
  p.beta = random_uniform({c}, -0.2, 0.2, rng_);
  p.mean = random_uniform({c}, -0.2, 0.2, rng_);
  p.var = random_uniform({c}, 0.5, 1.5, rng_);
  p.eps = 1e-5;
  Node n;
  n.kind = NodeKind::kBatchNorm;
  n.params = std::move(p);
  return push(std::move(n), {in}, shape(in));
}

NodeId GraphBuilder::relu(NodeId in) {
  Node n;
  n.kind = NodeKind::kReLU;
  return push(std::move(n), {in}, shape(in));
}

NodeId GraphBuilder::add(NodeId a, NodeId b) {
  Node n;
  n.kind = NodeKind::kAdd;
  return push(std::move(n), {a, b}, shape(a));
}

NodeId GraphBuilder::cat(const std::vector<NodeId>& ins) {
  Shape s = shape(ins.front());
  s[0] = 0;
  for (NodeId in : ins) s[0] += shape(in)[0];
  Node n;
  n.kind = NodeKind::kCat;
  return push(std::move(n), ins, s);
}

NodeId GraphBuilder::avgpool(NodeId in) {
  Node n;
  n.kind = NodeKind::kAvgPoolGlobal;
  return push(std::move(n), {in}, {shape(in)[0]});
}

NodeId GraphBuilder::flatten(NodeId in) {
  Node n;
  n.kind = NodeKind::kFlatten;
  return push(std::move(n), {in}, {shape_numel(shape(in))});
}

NodeId GraphBuilder::output(NodeId in) {
  Node n;
  n.kind = NodeKind::kOutput;
  return push(std::move(n), {in}, shape(in));
}

Graph GraphBuilder::build(std::string motif_name) const {
  GraphSpec spec = spec_;
  spec.meta.seed = seed_;
  spec.meta.motif = std::move(motif_name);
  return Graph::build(std::move(spec));
}

const std::vector<std::string>& motif_names() {
  static const std::vector<std::string> names = {
      "mlp", "fanout", "residual", "inception_mini", "dense_mini", "mixed"};
  return names;
}

namespace {

struct Block {
  NodeId conv;
  NodeId out;
};

// conv -> bn -> relu
Block cbr(GraphBuilder& b, NodeId in, int64_t c, int64_t k) {
  NodeId conv = b.conv(in, c, k, static_cast<int>(k / 2));
  return {conv, b.relu(b.batchnorm(conv))};
}

}  // namespace

Motif make_motif(std::string_view name, uint64_t seed) {
  GraphBuilder b(seed);
  NodeId wm = 0;
  if (name == "mlp") {
    NodeId x = b.input({12});
    NodeId h1 = b.linear(x, 16);
    NodeId h2 = b.linear(b.relu(h1), 16);
    wm = h2;
    b.output(b.linear(b.relu(h2), 4));
  } else if (name == "fanout") {
    NodeId x = b.input({3, 6, 6});
    Block stem = cbr(b, x, 8, 3);
    Block left = cbr(b, stem.out, 6, 3);
    Block right = cbr(b, stem.out, 6, 1);
    Block mix = cbr(b, b.cat({left.out, right.out}), 8, 1);
    wm = left.conv;
    b.output(b.linear(b.avgpool(mix.out), 5));
  } else if (name == "residual") {
    NodeId x = b.input({3, 6, 6});
    Block stem = cbr(b, x, 8, 3);
    NodeId skip = stem.out;
    for (int block = 0; block < 2; ++block) {
      Block inner = cbr(b, skip, 8, 3);
      if (block == 0) wm = inner.conv;
      NodeId second = b.conv(inner.out, 8, 3, 1);
      skip = b.relu(b.add(b.batchnorm(second), skip));
    }
    b.output(b.linear(b.avgpool(skip), 5));
  } else if (name == "inception_mini") {
    NodeId x = b.input({3, 6, 6});
    Block stem = cbr(b, x, 6, 3);
    Block b1 = cbr(b, stem.out, 4, 1);
    Block b2a = cbr(b, stem.out, 4, 1);
    Block b2b = cbr(b, b2a.out, 8, 3);
    Block head = cbr(b, b.cat({b1.out, b2b.out}), 8, 1);
    wm = b2b.conv;
    b.output(b.linear(b.flatten(head.out), 5));
  } else if (name == "dense_mini") {
    NodeId x = b.input({3, 6, 6});
    Block stem = cbr(b, x, 6, 3);
    Block l1 = cbr(b, stem.out, 4, 3);
    NodeId cat1 = b.cat({stem.out, l1.out});
    Block l2 = cbr(b, cat1, 4, 3);
    NodeId cat2 = b.cat({cat1, l2.out});
    Block head = cbr(b, cat2, 8, 1);
    wm = l2.conv;
    b.output(b.linear(b.avgpool(head.out), 5));
  } else if (name == "mixed") {
    NodeId x = b.input({3, 6, 6});
    Block stem = cbr(b, x, 8, 3);
    NodeId branch_a = b.conv(stem.out, 8, 3, 1);
    NodeId res = b.relu(b.add(b.batchnorm(branch_a), stem.out));
    Block branch_b = cbr(b, stem.out, 4, 1);
    Block head = cbr(b, b.cat({res, branch_b.out}), 6, 1);
    wm = branch_a;
    b.output(b.linear(b.flatten(head.out), 5));
  } else {
    throw Error(ErrorCode::kInvalidArgument,
                "unknown motif '" + std::string(name) + "'");
  }
  return Motif{b.build(std::string(name)), wm};
}

}  // namespace canonet
