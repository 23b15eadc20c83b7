#include <cstdlib>
#include <filesystem>

#include <gtest/gtest.h>

#include "canonet/harness.h"
#include "canonet/motifs.h"

namespace canonet {
namespace {

TEST(Flops, OneByOneConvClosedForm) {
  GraphBuilder b(1);
  NodeId x = b.input({2, 4, 4});
  NodeId c = b.conv(x, 3, 1, 0);
  b.output(c);
  EXPECT_EQ(flop_estimate(b.build("tiny")), 2 * 3 * 16);
}

TEST(Flops, MlpSumAndMonotoneUnderWidening) {
  const Graph g = make_motif("mlp", 1).graph;
  EXPECT_EQ(flop_estimate(g), 12 * 16 + 16 * 16 + 16 * 4);
  AttackConfig cfg;
  cfg.ratio = 0.2;
  EXPECT_GT(flop_estimate(attack(g, cfg).graph), flop_estimate(g));
}

TEST(WidthRecurrence, HandIterated) {
  EXPECT_EQ(width_recurrence(16, 0.5, 3), (std::vector<int64_t>{16, 24, 36, 54}));
  EXPECT_EQ(width_recurrence(10, 0.2, 3), (std::vector<int64_t>{10, 12, 15, 18}));
  EXPECT_EQ(width_recurrence(8, 0.0, 2), (std::vector<int64_t>{8, 8, 8}));
}

TEST(Pipeline, ResidualZeroAttackPassesTier1) {
  PipelineSpec spec;
  spec.motif = "residual";
  spec.attack.variant = Variant::kZero;
  spec.attack.ratio = 0.2;
  const PipelineResult r = run_pipeline(spec);
  EXPECT_EQ(r.exit_code, 0);
  EXPECT_EQ(r.verdict.tier, "tier1");
  EXPECT_TRUE(r.sanity_clean);
}

TEST(Pipeline, ZeroRatioKeepsAllSimilaritiesEqual) {
  PipelineSpec spec;
  spec.motif = "fanout";
  spec.attack.ratio = 0.0;
  const PipelineResult r = run_pipeline(spec);
  EXPECT_EQ(r.verdict.raw.c, r.verdict.raw.a);
  EXPECT_EQ(r.verdict.raw.c, r.verdict.raw.r);
  EXPECT_EQ(r.exit_code, 0);
}

TEST(Pipeline, SkippingRecoveryFails) {
  PipelineSpec spec;
  spec.motif = "residual";
  spec.skip_recovery = true;
  EXPECT_NE(run_pipeline(spec).exit_code, 0);
}

TEST(Pipeline, ReportsAreDeterministicWithoutTimings) {
  PipelineSpec spec;
  spec.motif = "mixed";
  spec.attack.variant = Variant::kMixOpseqPerGroup;
  spec.attack.camouflage = Camouflage::kPermAndScale;
  spec.timings = false;
  const PipelineResult a = run_pipeline(spec);
  const PipelineResult b = run_pipeline(spec);
  EXPECT_EQ(dump_json(to_json(a.attack, false)), dump_json(to_json(b.attack, false)));
  EXPECT_EQ(dump_json(to_json(a.recovery, false)), dump_json(to_json(b.recovery, false)));
  EXPECT_EQ(dump_json(to_json(a.verdict)), dump_json(to_json(b.verdict)));
  EXPECT_EQ(dump_json(summary_json(spec, a)), dump_json(summary_json(spec, b)));
}

TEST(Pipeline, ArtifactsWritten) {
  PipelineSpec spec;
  spec.motif = "mlp";
  spec.out_dir = (std::filesystem::temp_directory_path() / "canonet_harness_test").string();
  std::filesystem::remove_all(spec.out_dir);
  const PipelineResult r = run_pipeline(spec);
  write_pipeline_artifacts(spec, r);
  for (const char* f : {"spec.json", "clean.json", "attacked.json", "recovered.json", "key.json",
                        "attack_report.json", "recovery_report.json", "verdict.json",
                        "summary.json"}) {
    EXPECT_TRUE(std::filesystem::exists(std::filesystem::path(spec.out_dir) / f)) << f;
  }
  const PipelineSpec back =
      pipeline_spec_from_json(read_json_file(spec.out_dir + "/spec.json"));
  EXPECT_EQ(back.motif, "mlp");
}

TEST(Pipeline, SeedOverrideFromEnvironment) {
  PipelineSpec spec;
  ::setenv("CANONET_SEED", "321", 1);
  EXPECT_TRUE(apply_seed_override(spec));
  ::unsetenv("CANONET_SEED");
  EXPECT_EQ(spec.attack.seed, 321u);
  EXPECT_EQ(spec.model_seed, 321u);
  EXPECT_FALSE(apply_seed_override(spec));
}

TEST(FalsePositive, CleanMotifsArePruneFree) {
  PipelineSpec spec;
  for (const std::string& name : {std::string("mlp"), std::string("residual")}) {
    spec.motif = name;
    for (const FalsePositiveReport& r : fp_eval_all_targets(spec)) {
      EXPECT_EQ(r.p_fpr, 0.0) << name << " " << r.target;
      EXPECT_EQ(r.layers_changed, 0);
      EXPECT_EQ(r.output_delta, 0.0);
      EXPECT_EQ(r.tier1_verified, r.tier1_total);
      EXPECT_EQ(r.delta_sim, 0.0);
    }
  }
}

TEST(Bench, TrajectoriesAndFlatZeroRatio) {
  BenchSweep sweep;
  sweep.motif = "mlp";
  sweep.ratios = {0.0, 0.5};
  sweep.variants = {Variant::kZero, Variant::kMixOpseq};
  sweep.probe_counts = {8, 16};
  const BenchResult r = run_bench(sweep);
  ASSERT_EQ(r.points.size(), 8u);
  for (const BenchPoint& p : r.points) {
    EXPECT_TRUE(p.recovered);
    EXPECT_TRUE(p.trajectories_match);
    if (p.ratio == 0.0) EXPECT_EQ(p.flops_attacked, p.flops_clean);
    for (const WidthTrajectory& t : p.trajectories) {
      if (p.ratio == 0.0) EXPECT_EQ(t.observed, (std::vector<int64_t>{16, 16, 16, 16}));
    }
  }
  const std::string csv = bench_csv(r);
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 9);
}

}  // namespace
}  // namespace canonet
