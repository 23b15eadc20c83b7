#ifndef CANONET_HARNESS_H_
#define CANONET_HARNESS_H_

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "canonet/attack.h"
#include "canonet/recovery.h"
#include "canonet/serialize.h"
#include "canonet/verifier.h"
#include "canonet/watermark.h"

namespace canonet {

struct PipelineSpec {
  std::string motif = "residual";
  uint64_t model_seed = 0;
  std::optional<NodeId> watermark_layer;  // motif default when unset
  int watermark_bits = 64;
  uint64_t watermark_seed = 1;
  AttackConfig attack;
  RecoveryConfig recovery;
  ProbeConfig probes;
  CertificateConfig certificate;
  Tier2Config tier2;
  bool skip_recovery = false;  // sabotage switch: verify the attacked model
  bool timings = true;
  std::string out_dir;         // empty: nothing written

  void validate() const;
};

Json to_json(const PipelineSpec& s);
PipelineSpec pipeline_spec_from_json(const Json& j);
// CANONET_SEED, when set, replaces the model, watermark, attack and probe
// seeds. Returns true if it did.
bool apply_seed_override(PipelineSpec& s);

// Bits default to min(n, m/2) so short layers stay embeddable.
WatermarkKey default_key(const Graph& g, NodeId layer, int n, uint64_t seed);

struct PipelineResult {
  Graph clean;  // watermarked
  Graph attacked;
  Graph recovered;
  WatermarkKey key;
  AttackReport attack;
  RecoveryReport recovery;
  VerdictReport verdict;
  bool recovery_ran = false;
  // Recovery ran, did not abort, and its sanity delta (when measured) is
  // within tolerance.
  bool sanity_clean = false;
  int exit_code = 1;  // 0 iff sanity_clean and verdict.pass
};

PipelineResult run_pipeline(const PipelineSpec& spec);
Json summary_json(const PipelineSpec& spec, const PipelineResult& r);
// Graphs, key, reports and the spec itself into spec.out_dir.
void write_pipeline_artifacts(const PipelineSpec& spec, const PipelineResult& r);

// Multiply-accumulate count of one forward pass over Conv2d and Linear.
int64_t flop_estimate(const Graph& g);

struct FalsePositiveReport {
  std::string motif;
  NodeId target = 0;
  int64_t params_before = 0;
  int64_t params_pruned = 0;
  double p_fpr = 0.0;
  int layers_changed = 0;
  int layers_total = 0;
  double delta_sim = 0.0;      // recovered minus clean similarity
  // Stands in for the accuracy gap: max |clean - recovered| output over a
  // held-out probe set. Not an accuracy.
  double output_delta = 0.0;
  int tier1_verified = 0;
  int tier1_total = 0;
  bool recovery_ok = true;
  int ambiguous = 0;           // clusters left in place by the merge gate
};

// Watermarks `target` of the clean motif, runs recovery on it, and measures
// what recovery changed.
FalsePositiveReport fp_eval(const Graph& clean, NodeId target, const PipelineSpec& spec);
std::vector<FalsePositiveReport> fp_eval_all_targets(const PipelineSpec& spec);
Json to_json(const FalsePositiveReport& r);

// Widths C^(0..S) from the recurrence C^(t+1) = C^(t) + ceil(ratio * C^(t)).
std::vector<int64_t> width_recurrence(int64_t width, double ratio, int steps);

struct WidthTrajectory {
  std::vector<NodeId> producers;
  std::vector<int64_t> observed;
  std::vector<int64_t> expected;
  int promotions = 0;  // clique steps grown from one member to two
  bool matches = false;
};

struct BenchPoint {
  std::string motif;
  Variant variant = Variant::kZero;
  double ratio = 0.0;
  int probes = 0;
  AttackTimings attack_timings;
  RecoveryTimings recovery_timings;
  int64_t flops_clean = 0;
  int64_t flops_attacked = 0;
  std::vector<WidthTrajectory> trajectories;  // mix variants only
  bool trajectories_match = true;
  bool recovered = false;  // widths restored and recovery ok
};

struct BenchSweep {
  std::string motif = "mlp";
  uint64_t model_seed = 0;
  std::vector<double> ratios = {0.2, 0.5, 0.8, 1.0};
  std::vector<Variant> variants = {Variant::kZero, Variant::kClique, Variant::kSplit,
                                   Variant::kMixOpseq};
  std::vector<int> probe_counts = {32};
  AttackConfig attack;  // ratio and variant overridden per point
  RecoveryConfig recovery;
  ProbeConfig probes;   // count overridden per point
};

struct BenchResult {
  std::vector<BenchPoint> points;
  std::vector<std::string> warnings;  // soft ordinal checks that did not hold
};

BenchResult run_bench(const BenchSweep& sweep);
Json to_json(const BenchPoint& p, bool timings = true);
// One row per point: motif,variant,ratio,probes,attack_ns,probe_ns,...
std::string bench_csv(const BenchResult& r);

}  // namespace canonet

#endif  // CANONET_HARNESS_H_
