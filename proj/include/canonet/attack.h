#ifndef CANONET_ATTACK_H_
#define CANONET_ATTACK_H_

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "canonet/channel_transform.h"
#include "canonet/graph.h"

namespace canonet {

enum class Variant { kZero, kClique, kSplit, kMixOpseq, kMixOpseqPerGroup };
enum class Primitive { kZero, kClique, kSplit };
enum class Camouflage { kNone, kPerm, kScale, kPermAndScale };

std::string_view variant_name(Variant v);
std::optional<Variant> parse_variant(std::string_view s);
std::string_view primitive_name(Primitive p);
std::optional<Primitive> parse_primitive(std::string_view s);
std::string_view camouflage_name(Camouflage c);
std::optional<Camouflage> parse_camouflage(std::string_view s);

struct AttackConfig {
  double ratio = 0.2;
  Variant variant = Variant::kZero;
  int opseq_len = 3;
  double split_p = 1.0;
  Camouflage camouflage = Camouflage::kNone;
  double scale_lo = 0.6;
  double scale_hi = 1.4;
  uint64_t seed = 0;
  // Interleave injected channels with real ones instead of leaving them at
  // the tail.
  bool interior_placement = true;

  void validate() const;
};

// d = ceil(ratio * width), computed so that exact products do not round up.
int64_t injection_count(double ratio, int64_t width);
// Baseline channel of a split: min(C-1, floor(p*(C-1) + 0.5)).
int64_t split_baseline(double p, int64_t width);

struct PlannedGroup {
  std::vector<NodeId> producers;
  int64_t width = 0;
  std::vector<Primitive> sequence;
};

struct InjectionPlan {
  std::vector<PlannedGroup> groups;  // rewritable merge groups only
  std::vector<Primitive> global_sequence;  // mix_opseq only
  std::vector<std::string> skipped;        // ineligible groups with reasons
  std::vector<std::string> warnings;
};

InjectionPlan plan_injection(const Graph& g, const AttackConfig& cfg);

// Result of editing one merge group. `transform` maps the new layout back:
// y_old = transform * y_new.
struct GroupEdit {
  Graph graph;
  ChannelTransform transform;
  int64_t injected = 0;
  bool promoted = false;     // clique of one grown to two
  int64_t baseline = -1;     // split only
};

// Primitives act on every producer of a merge group with one shared layout;
// a single producer is a group of one. New channels are appended at the
// tail. Consumers are rewritten and shapes re-inferred.
GroupEdit inject_zero(const Graph& g, std::span<const NodeId> group, int64_t d,
                      Rng& rng);
// `mu_columns` receives the consumer mixing vectors when not null.
GroupEdit inject_clique(const Graph& g, std::span<const NodeId> group,
                        int64_t d, Rng& rng,
                        std::vector<std::vector<double>>* mu_columns = nullptr);
GroupEdit inject_split(const Graph& g, std::span<const NodeId> group, int64_t d,
                       double p, Rng& rng);
// Random interleaving of the last `fresh` channels with the rest; relative
// order inside both sets is kept.
GroupEdit place_interior(const Graph& g, std::span<const NodeId> group,
                         int64_t fresh, Rng& rng);

struct CamouflageRecord {
  std::vector<int64_t> perm;                 // empty when not permuted
  std::vector<std::vector<double>> scales;   // per producer; empty if unscaled
  std::vector<NodeId> scale_skipped;
  std::string note;
};

GroupEdit apply_camouflage(const Graph& g, std::span<const NodeId> group,
                           const AttackConfig& cfg, Rng& rng,
                           CamouflageRecord* record = nullptr);

struct StepRecord {
  Primitive primitive = Primitive::kZero;
  int64_t width_before = 0;
  int64_t injected = 0;
  int64_t width_after = 0;
  bool promoted = false;
  int64_t baseline = -1;
};

struct GroupAttackRecord {
  std::vector<NodeId> producers;
  int64_t width_before = 0;
  int64_t width_after = 0;
  std::vector<StepRecord> steps;
  CamouflageRecord camouflage;
  ChannelTransform transform;  // y_clean = transform * y_attacked
};

struct AttackTimings {
  int64_t plan_ns = 0;
  int64_t inject_ns = 0;
  int64_t camouflage_ns = 0;
  int64_t drift_ns = 0;
};

struct AttackReport {
  AttackConfig config;
  std::vector<Primitive> global_sequence;
  std::vector<GroupAttackRecord> groups;
  std::vector<std::string> skipped;
  std::vector<std::string> warnings;
  double drift = 0.0;
  AttackTimings timings;
};

// Fixed probe set for drift measurement: 16 inputs, U[-1, 1].
std::vector<Tensor> drift_probes(const Shape& input_shape);
double max_output_delta(const Graph& a, const Graph& b,
                        std::span<const Tensor> probes);

struct AttackResult {
  Graph graph;
  AttackReport report;
};

AttackResult attack(const Graph& g, const AttackConfig& cfg);

}  // namespace canonet

#endif  // CANONET_ATTACK_H_
