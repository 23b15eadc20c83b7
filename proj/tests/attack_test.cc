#include <cmath>

#include <gtest/gtest.h>

#include "canonet/attack.h"
#include "canonet/error.h"
#include "canonet/motifs.h"

namespace canonet {
namespace {

double drift(const Graph& a, const Graph& b) {
  const auto probes = drift_probes(a.shape_of(a.input_id()));
  return max_output_delta(a, b, probes);
}

std::vector<double> row(const Node& n, int64_t i) {
  const Tensor& w = n.weight();
  const int64_t len = w.numel() / w.dim(0);
  return {w.data().begin() + i * len, w.data().begin() + (i + 1) * len};
}

TEST(InjectionCount, CeilWithoutFloatingRoundUp) {
  EXPECT_EQ(injection_count(0.2, 10), 2);
  EXPECT_EQ(injection_count(0.2, 16), 4);
  EXPECT_EQ(injection_count(0.5, 16), 8);
  EXPECT_EQ(injection_count(0.3, 10), 3);  // 0.3 * 10 = 3.0000000000000004
  EXPECT_EQ(injection_count(0.1, 30), 3);
  EXPECT_EQ(injection_count(0.7, 10), 7);
  EXPECT_EQ(injection_count(0.0, 5), 0);
  EXPECT_EQ(injection_count(1.0, 7), 7);
}

TEST(SplitBaseline, RoundsHalfUpAndClamps) {
  EXPECT_EQ(split_baseline(1.0, 8), 7);
  EXPECT_EQ(split_baseline(0.0, 8), 0);
  EXPECT_EQ(split_baseline(0.5, 8), 4);
  EXPECT_EQ(split_baseline(0.5, 2), 1);
}

TEST(AttackConfig, Validation) {
  AttackConfig c;
  c.ratio = 1.5;
  EXPECT_THROW(c.validate(), Error);
  c = AttackConfig{};
  c.scale_lo = 2.0;
  c.scale_hi = 1.0;
  EXPECT_THROW(c.validate(), Error);
  c = AttackConfig{};
  c.opseq_len = 0;
  EXPECT_THROW(c.validate(), Error);
  EXPECT_EQ(parse_variant("mix_opseq_per_merge_group"), Variant::kMixOpseqPerGroup);
  EXPECT_FALSE(parse_variant("bogus"));
}

class MlpPrimitive : public ::testing::Test {
 protected:
  Motif m = make_motif("mlp", 3);
  NodeId first() const { return m.graph.topo_order()[1]; }
};

TEST_F(MlpPrimitive, ZeroChannelsAreNullAndInvisible) {
  Rng rng(1);
  const NodeId p = first();
  const NodeId group[] = {p};
  const GroupEdit e = inject_zero(m.graph, group, 3, rng);
  const Node& n = e.graph.node(p);
  ASSERT_EQ(n.weight().dim(0), 19);
  for (int64_t i = 16; i < 19; ++i) {
    for (double x : row(n, i)) EXPECT_EQ(x, 0.0);
    EXPECT_EQ(n.bias()[i], 0.0);
  }
  EXPECT_EQ(e.transform.c_before(), 16);
  EXPECT_EQ(e.transform.c_after(), 19);
  EXPECT_LE(drift(m.graph, e.graph), 1e-12);
}

TEST_F(MlpPrimitive, CliqueCancelsExactly) {
  Rng rng(2);
  const NodeId p = first();
  const NodeId group[] = {p};
  std::vector<std::vector<double>> mu;
  const GroupEdit e = inject_clique(m.graph, group, 4, rng, &mu);
  const Node& n = e.graph.node(p);
  ASSERT_EQ(mu.size(), 4u);
  for (size_t i = 0; i < mu[0].size(); ++i) {
    double s = 0.0;
    for (const auto& col : mu) s += col[i];
    EXPECT_LE(std::abs(s), 1e-15);
  }
  for (int64_t i = 17; i < 20; ++i) EXPECT_EQ(row(n, i), row(n, 16));
  EXPECT_LE(drift(m.graph, e.graph), 1e-9);
}

TEST_F(MlpPrimitive, CliqueOfOneIsPromoted) {
  Rng rng(3);
  const NodeId group[] = {first()};
  const GroupEdit e = inject_clique(m.graph, group, 1, rng);
  EXPECT_TRUE(e.promoted);
  EXPECT_EQ(e.injected, 2);
  EXPECT_EQ(e.graph.node(first()).weight().dim(0), 18);
}

TEST_F(MlpPrimitive, SplitCopiesReconstructBaseline) {
  Rng rng(4);
  const NodeId p = first();
  const NodeId group[] = {p};
  const GroupEdit e = inject_split(m.graph, group, 2, 0.5, rng);
  EXPECT_EQ(e.baseline, split_baseline(0.5, 16));
  const Node& n = e.graph.node(p);
  const auto base = row(m.graph.node(p), e.baseline);
  for (int64_t i = 15; i < 18; ++i) EXPECT_EQ(row(n, i), base);
  double col_sum = 0.0;
  for (int64_t j = 15; j < 18; ++j) col_sum += e.transform.at(e.baseline, j);
  EXPECT_NEAR(col_sum, 1.0, 1e-15);
  EXPECT_LE(drift(m.graph, e.graph), 1e-12);
}

TEST_F(MlpPrimitive, InteriorPlacementKeepsRelativeOrder) {
  Rng rng(5);
  const NodeId p = first();
  const NodeId group[] = {p};
  const GroupEdit z = inject_zero(m.graph, group, 4, rng);
  const GroupEdit e = place_interior(z.graph, group, 4, rng);
  int64_t last_old = -1, last_new = 15;
  for (int64_t j = 0; j < 20; ++j) {
    int64_t src = -1;
    for (int64_t i = 0; i < 20; ++i) {
      if (e.transform.at(i, j) != 0.0) src = i;
    }
    ASSERT_GE(src, 0);
    if (src < 16) {
      EXPECT_GT(src, last_old);
      last_old = src;
    } else {
      EXPECT_GT(src, last_new);
      last_new = src;
    }
  }
  EXPECT_LE(drift(m.graph, e.graph), 1e-12);
}

TEST(Camouflage, PermAndScaleIsBatchNormConsistent) {
  const Motif m = make_motif("residual", 2);
  const auto groups = merge_groups(m.graph);
  AttackConfig cfg;
  cfg.camouflage = Camouflage::kPermAndScale;
  Rng rng(6);
  for (const MergeGroup& mg : groups) {
    if (!mg.eligible) continue;
    CamouflageRecord rec;
    const GroupEdit e = apply_camouflage(m.graph, mg.producers, cfg, rng, &rec);
    EXPECT_LE(drift(m.graph, e.graph), 1e-12);
    EXPECT_FALSE(rec.perm.empty());
    // Every group here is BN-followed, so scales fold into the producers
    // and their BN; M stays a pure permutation.
    for (const TransformEntry& t : e.transform.entries()) EXPECT_EQ(t.value, 1.0);
  }
}

TEST(Camouflage, NoneIsIdentity) {
  const Motif m = make_motif("fanout", 2);
  Rng rng(7);
  const NodeId group[] = {m.watermark_layer};
  const GroupEdit e = apply_camouflage(m.graph, group, AttackConfig{}, rng);
  EXPECT_TRUE(e.transform.is_identity());
}

TEST(Attack, FunctionPreservingOnEveryMotif) {
  for (const std::string& name : motif_names()) {
    const Motif m = make_motif(name, 1);
    for (Variant v : {Variant::kZero, Variant::kClique, Variant::kSplit}) {
      AttackConfig cfg;
      cfg.variant = v;
      cfg.ratio = 0.5;
      cfg.camouflage = Camouflage::kPermAndScale;
      cfg.seed = 9;
      const AttackResult r = attack(m.graph, cfg);
      EXPECT_LE(r.report.drift, 1e-9) << name;
      EXPECT_LE(drift(m.graph, r.graph), 1e-9) << name;
    }
  }
}

TEST(Attack, ZeroRatioNoCamouflageLeavesWeightsBitIdentical) {
  const Motif m = make_motif("mixed", 4);
  AttackConfig cfg;
  cfg.ratio = 0.0;
  cfg.interior_placement = true;
  const AttackResult r = attack(m.graph, cfg);
  for (const Node& n : m.graph.nodes()) {
    if (n.is_linear_op()) EXPECT_EQ(n.weight(), r.graph.node(n.id).weight());
  }
}

TEST(Attack, DeterministicForSeed) {
  const Motif m = make_motif("dense_mini", 4);
  AttackConfig cfg;
  cfg.variant = Variant::kMixOpseq;
  cfg.camouflage = Camouflage::kPermAndScale;
  cfg.seed = 77;
  const AttackResult a = attack(m.graph, cfg);
  const AttackResult b = attack(m.graph, cfg);
  for (const Node& n : a.graph.nodes()) {
    if (n.is_linear_op()) EXPECT_EQ(n.weight(), b.graph.node(n.id).weight());
  }
  EXPECT_EQ(a.report.global_sequence, b.report.global_sequence);
  EXPECT_EQ(a.report.global_sequence.size(), 3u);
}

TEST(Attack, MixOpseqWidthTrajectory) {
  const Motif m = make_motif("mlp", 0);
  AttackConfig cfg;
  cfg.variant = Variant::kMixOpseq;
  cfg.ratio = 0.5;
  cfg.opseq_len = 3;
  const AttackResult r = attack(m.graph, cfg);
  ASSERT_FALSE(r.report.groups.empty());
  const GroupAttackRecord& g = r.report.groups.front();
  std::vector<int64_t> widths = {g.width_before};
  for (const StepRecord& s : g.steps) widths.push_back(s.width_after);
  EXPECT_EQ(widths, (std::vector<int64_t>{16, 24, 36, 54}));
}

TEST(Attack, TerminalProducerIsSkipped) {
  const Motif m = make_motif("mlp", 0);
  const AttackResult r = attack(m.graph, AttackConfig{});
  const NodeId head = m.graph.inputs_of(m.graph.output_id())[0];
  EXPECT_EQ(r.graph.node(head).weight().dim(0), m.graph.node(head).weight().dim(0));
  EXPECT_FALSE(r.report.skipped.empty());
}

TEST(Attack, ReportTransformMapsBackToClean) {
  // y_clean = T * y_attacked on each group's first producer output.
  const Motif m = make_motif("mlp", 5);
  AttackConfig cfg;
  cfg.variant = Variant::kSplit;
  cfg.camouflage = Camouflage::kPermAndScale;
  cfg.ratio = 0.8;
  const AttackResult r = attack(m.graph, cfg);
  Rng rng(3);
  const Tensor x = random_uniform({12}, -1, 1, rng);
  const auto clean = forward_all(m.graph, x);
  const auto att = forward_all(r.graph, x);
  for (const GroupAttackRecord& g : r.report.groups) {
    const NodeId p = g.producers.front();
    const Tensor back = apply_to_activation(g.transform, node_value(r.graph, att, p));
    EXPECT_LE(max_abs_diff(back, node_value(m.graph, clean, p)), 1e-12);
  }
}

}  // namespace
}  // namespace canonet
