#include <algorithm>
#include <map>
#include <set>

#include <gtest/gtest.h>

#include "canonet/error.h"
#include "canonet/graph.h"
#include "canonet/motifs.h"

namespace canonet {
namespace {

Node plain(NodeId id, NodeKind kind) {
  Node n;
  n.id = id;
  n.kind = kind;
  return n;
}

Node input_node(NodeId id, Shape s) {
  Node n = plain(id, NodeKind::kInput);
  n.params = InputParams{std::move(s)};
  return n;
}

Node linear_node(NodeId id, int64_t out, int64_t in) {
  Node n = plain(id, NodeKind::kLinear);
  n.params = LinearParams{Tensor({out, in}, 0.5), Tensor({out}, 0.0)};
  return n;
}

ErrorCode build_error(GraphSpec spec) {
  try {
    Graph::build(std::move(spec));
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "build succeeded";
  return ErrorCode::kIo;
}

TEST(GraphBuild, RejectsCycleDanglingAndShapeConflict) {
  GraphSpec cyc;
  cyc.nodes = {input_node(0, {4}), plain(1, NodeKind::kAdd), plain(2, NodeKind::kReLU),
               plain(3, NodeKind::kOutput)};
  cyc.edges = {{0, 1, 0}, {2, 1, 1}, {1, 2, 0}, {2, 3, 0}};
  EXPECT_EQ(build_error(cyc), ErrorCode::kCycle);

  GraphSpec dang;
  dang.nodes = {input_node(0, {4}), plain(1, NodeKind::kOutput)};
  dang.edges = {{0, 1, 0}, {7, 1, 0}};
  EXPECT_EQ(build_error(dang), ErrorCode::kDanglingEdge);

  GraphSpec clash;
  clash.nodes = {input_node(0, {4}), linear_node(1, 3, 4), plain(2, NodeKind::kAdd),
                 plain(3, NodeKind::kOutput)};
  clash.edges = {{0, 1, 0}, {1, 2, 0}, {0, 2, 1}, {2, 3, 0}};
  EXPECT_EQ(build_error(clash), ErrorCode::kShapeConflict);
}

TEST(GraphBuild, TopoOrderBreaksTiesBySmallestId) {
  GraphSpec s;
  s.nodes = {input_node(0, {4}), plain(5, NodeKind::kReLU), plain(3, NodeKind::kReLU),
             plain(4, NodeKind::kAdd), plain(9, NodeKind::kOutput)};
  s.edges = {{0, 5, 0}, {0, 3, 0}, {5, 4, 0}, {3, 4, 1}, {4, 9, 0}};
  const Graph g = Graph::build(s);
  EXPECT_EQ(g.topo_order(), (std::vector<NodeId>{0, 3, 5, 4, 9}));
}

TEST(GraphBuild, ForwardInvariantUnderStorageOrder) {
  for (const std::string& name : motif_names()) {
    const Graph g = make_motif(name, 4).graph;
    GraphSpec s = g.spec();
    std::reverse(s.nodes.begin(), s.nodes.end());
    std::reverse(s.edges.begin(), s.edges.end());
    const Graph h = Graph::build(s);
    Rng rng(1);
    const Tensor x = random_uniform(g.shape_of(g.input_id()), -1, 1, rng);
    EXPECT_EQ(forward(g, x), forward(h, x)) << name;
  }
}

TEST(Producers, PartitionAllLinearOps) {
  for (const std::string& name : motif_names()) {
    const Graph g = make_motif(name, 2).graph;
    std::multiset<NodeId> seen;
    for (const ProducerEdge& e : analyze_producers(g)) seen.insert(e.producer);
    std::multiset<NodeId> expected;
    for (const Node& n : g.nodes()) {
      if (n.is_linear_op()) expected.insert(n.id);
    }
    EXPECT_EQ(seen, expected) << name;
  }
}

// Same consumer reached twice: through both ports of Add(x, x) it is one
// entry; through both slots of Cat(x, x) it is two entries at two offsets.
TEST(Producers, RepeatedOperandDedupPinned) {
  {
    GraphBuilder b(1);
    NodeId x = b.input({4});
    NodeId p = b.linear(x, 3);
    NodeId r = b.relu(p);
    NodeId c = b.linear(b.add(r, r), 2);
    b.output(c);
    const Graph g = b.build("addxx");
    const auto edges = analyze_producers(g);
    const ProducerEdge& e = find_producer(edges, p);
    ASSERT_EQ(e.consumers.size(), 1u);
    EXPECT_EQ(e.consumers[0].consumer, c);
  }
  {
    GraphBuilder b(1);
    NodeId x = b.input({2, 3, 3});
    NodeId p = b.conv(x, 3, 1, 0);
    NodeId c = b.conv(b.cat({p, p}), 2, 1, 0);
    b.output(b.linear(b.avgpool(c), 2));
    const Graph g = b.build("catxx");
    const auto edges = analyze_producers(g);
    const ProducerEdge& e = find_producer(edges, p);
    ASSERT_EQ(e.consumers.size(), 2u);
    EXPECT_EQ(e.consumers[0].path.channel_offset, 0);
    EXPECT_EQ(e.consumers[1].path.channel_offset, 3);
  }
}

TEST(Producers, BarriersAndTerminals) {
  GraphBuilder b(3);
  NodeId x = b.input({2, 4, 4});
  NodeId p = b.conv(x, 4, 3, 1);
  NodeId r = b.relu(p);
  NodeId bn = b.batchnorm(r);  // not adjacent to p
  NodeId q = b.conv(bn, 4, 1, 0, 4);  // depthwise consumer
  NodeId head = b.linear(b.avgpool(q), 3);
  b.output(head);
  const Graph g = b.build("barriers");
  const auto edges = analyze_producers(g);
  EXPECT_FALSE(find_producer(edges, p).eligible);
  EXPECT_FALSE(find_producer(edges, q).eligible);  // grouped producer
  EXPECT_TRUE(find_producer(edges, head).terminal);
  EXPECT_FALSE(find_producer(edges, head).rewritable());
}

TEST(Producers, FlattenPathCarriesSpatialFactor) {
  const Graph g = make_motif("inception_mini", 1).graph;
  for (const ProducerEdge& e : analyze_producers(g)) {
    for (const ConsumerRef& c : e.consumers) {
      if (g.node(c.consumer).kind == NodeKind::kLinear) {
        EXPECT_EQ(c.path.hw, 36);
      }
    }
  }
}

// Brute-force oracle: two producers share a layout iff a chain of Adds
// links them; computed by transitive closure over "feeds the same Add
// through ReLU/BN/Add only".
std::set<std::set<NodeId>> brute_groups(const Graph& g) {
  std::vector<NodeId> prods;
  for (const Node& n : g.nodes()) {
    if (n.is_linear_op()) prods.push_back(n.id);
  }
  auto sources = [&](NodeId add) {
    std::set<NodeId> out;
    std::vector<NodeId> stack(g.inputs_of(add).begin(), g.inputs_of(add).end());
    while (!stack.empty()) {
      const NodeId id = stack.back();
      stack.pop_back();
      const NodeKind k = g.node(id).kind;
      if (k == NodeKind::kConv2d || k == NodeKind::kLinear) {
        out.insert(id);
      } else if (k == NodeKind::kReLU || k == NodeKind::kBatchNorm || k == NodeKind::kAdd) {
        for (NodeId in : g.inputs_of(id)) stack.push_back(in);
      }
    }
    return out;
  };
  std::map<NodeId, std::set<NodeId>> reach;
  for (NodeId p : prods) reach[p] = {p};
  for (const Node& n : g.nodes()) {
    if (n.kind != NodeKind::kAdd) continue;
    const auto s = sources(n.id);
    for (NodeId a : s) {
      for (NodeId b : s) reach[a].insert(b);
    }
  }
  for (NodeId k : prods) {
    for (NodeId i : prods) {
      if (!reach[i].count(k)) continue;
      for (NodeId j : reach[k]) reach[i].insert(j);
    }
  }
  std::set<std::set<NodeId>> out;
  for (NodeId p : prods) out.insert(reach[p]);
  return out;
}

std::set<std::set<NodeId>> as_sets(const std::vector<MergeGroup>& groups) {
  std::set<std::set<NodeId>> out;
  for (const MergeGroup& m : groups) out.insert({m.producers.begin(), m.producers.end()});
  return out;
}

TEST(MergeGroups, MatchBruteForceClosure) {
  for (const std::string& name : motif_names()) {
    for (uint64_t seed : {1ULL, 2ULL}) {
      const Graph g = make_motif(name, seed).graph;
      EXPECT_EQ(as_sets(merge_groups(g)), brute_groups(g)) << name;
    }
  }
}

TEST(MergeGroups, IdempotentAndOrderIndependent) {
  const Graph g = make_motif("residual", 5).graph;
  const auto first = merge_groups(g);
  const auto second = merge_groups(g);
  ASSERT_EQ(first.size(), second.size());
  for (size_t i = 0; i < first.size(); ++i) EXPECT_EQ(first[i].producers, second[i].producers);
  GraphSpec s = g.spec();
  std::reverse(s.edges.begin(), s.edges.end());
  std::rotate(s.nodes.begin(), s.nodes.begin() + 3, s.nodes.end());
  const auto shuffled = merge_groups(Graph::build(s));
  ASSERT_EQ(first.size(), shuffled.size());
  for (size_t i = 0; i < first.size(); ++i) EXPECT_EQ(first[i].producers, shuffled[i].producers);
}

TEST(MergeGroups, ResidualChainsStemAndBlockOutputs) {
  const Graph g = make_motif("residual", 1).graph;
  // Stem plus the second conv of each block share one layout.
  bool found = false;
  for (const MergeGroup& m : merge_groups(g)) {
    if (m.producers.size() == 3) {
      found = true;
      EXPECT_TRUE(m.eligible);
    }
  }
  EXPECT_TRUE(found);
}

TEST(MergeGroups, AddWithGraphInputIsIneligible) {
  GraphBuilder b(2);
  NodeId x = b.input({4});
  NodeId p = b.linear(x, 4);
  NodeId s = b.add(p, x);
  b.output(b.linear(b.relu(s), 2));
  const Graph g = b.build("foreign_add");
  for (const MergeGroup& m : merge_groups(g)) {
    if (std::count(m.producers.begin(), m.producers.end(), p)) EXPECT_FALSE(m.eligible);
  }
}

}  // namespace
}  // namespace canonet
