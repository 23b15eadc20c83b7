#ifndef CANONET_RECOVERY_H_
#define CANONET_RECOVERY_H_

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "canonet/channel_transform.h"
#include "canonet/graph.h"

namespace canonet {

struct ProbeConfig {
  int count = 32;
  int batch_hint = 1;  // instrumentation only
  double lo = -1.0;
  double hi = 1.0;
  uint64_t seed = 1;

  void validate() const;
};

std::vector<Tensor> make_probes(const ProbeConfig& cfg, const Shape& input_shape);

enum class CaptureSite { kPostBatchNorm, kProducerOutput };
std::string_view capture_site_name(CaptureSite s);

// Summaries of one producer's channels over the probe set.
struct ChannelRecord {
  NodeId producer = 0;
  CaptureSite site = CaptureSite::kProducerOutput;
  int64_t width = 0;
  int probes = 0;
  std::vector<double> u;      // width x probes, u[i * probes + t]
  std::vector<uint8_t> bits;  // same layout, u > 0

  double at(int64_t i, int t) const { return u[i * probes + t]; }
  bool bit(int64_t i, int t) const { return bits[i * probes + t] != 0; }
};

struct ProbeRecord {
  std::vector<ChannelRecord> edges;
  const ChannelRecord& of(NodeId producer) const;
};

// u[i][t] = spatial mean of relu(channel i) at the capture site (post-BN
// when BN immediately follows the producer).
ProbeRecord capture(const Graph& g, std::span<const Tensor> probes,
                    std::span<const ProducerEdge> edges);

using SignatureHash = std::function<uint64_t(std::span<const uint8_t>)>;

// 64-bit FNV-1a: h = 0xcbf29ce484222325; per byte h ^= b, h *= 0x100000001b3.
uint64_t fnv1a64(std::span<const uint8_t> bytes);
// Probe t lands in byte t / 8 at bit t % 8; the tail is zero padded.
std::vector<uint8_t> pack_bits(const ChannelRecord& rec, int64_t channel);

struct Bucket {
  uint64_t hash = 0;
  std::vector<int64_t> channels;  // ascending, identical bit vectors
};

// Groups by hash, then splits each hash group by exact bit equality so a
// collision never merges different patterns. Ordered by first channel.
std::vector<Bucket> bucket_by_signature(const ChannelRecord& rec,
                                        const SignatureHash& hash = fnv1a64);

struct RecoveryConfig {
  double eps = 1e-6;
  double tau = 1e-3;
  int t_min = 3;
  double gamma_drop = 1e-6;
  double gamma_keep = 1e-3;
  std::optional<std::pair<double, double>> active_ratio_gate;
  bool sanity_check = true;
  double sanity_tol = 1e-7;
  // Cross-check activation clusters against the producers' effective
  // incoming rows (and cluster channels that are dead on every probe).
  bool weight_checks = true;
  bool second_sync_pass = false;
  // Test hook: this consumer is not rewritten with M_e; its slice is
  // truncated positionally instead so shapes stay valid.
  std::optional<NodeId> fault_skip_consumer;

  void validate() const;
};

enum class Decision { kKeep, kDrop, kMerge, kAmbiguous };
std::string_view decision_name(Decision d);

struct RedundancyCluster {
  std::vector<int64_t> members;  // ascending
  int64_t representative = 0;
  std::vector<double> alpha;     // per member, alpha of the representative is 1
  bool zero = false;             // every member is all-zero on every probe
  Decision decision = Decision::kKeep;
  double merged_norm = 0.0;      // max_c |w*| / max_c |W_c|_F
  std::string note;
};

// Proportionality refinement inside one bucket. An all-zero bucket is
// returned whole as a zero cluster (singletons included); otherwise only
// connected components with at least two members are returned.
std::vector<RedundancyCluster> refine_proportional(const ChannelRecord& rec,
                                                   const Bucket& bucket,
                                                   const RecoveryConfig& cfg);

// Output rows of a consumer to ignore, keyed by consumer node. Used when a
// merge-group member consumes its own group: rows that the same decision
// deletes cannot veto it.
using RowMask = std::map<NodeId, std::vector<bool>>;

// Drop / merge / ambiguous for a non-zero cluster against every consumer.
RedundancyCluster decide_drop_or_merge(const Graph& g,
                                       std::span<const ConsumerRef> consumers,
                                       RedundancyCluster cluster,
                                       const RecoveryConfig& cfg,
                                       const RowMask* masked = nullptr);

// y_attacked = M * y_compact. Columns are the kept channels in ascending
// order; merged members map to their representative's column with value
// alpha; dropped channels have no entry.
ChannelTransform synthesize_transform(int64_t width,
                                      std::span<const RedundancyCluster> clusters);

// Effective incoming rows at the capture site: [A_i w_i, A_i b_i + B_i]
// with A, B the eval-mode BN affine (identity without BN).
std::vector<std::vector<double>> effective_rows(const Graph& g,
                                                const ProducerEdge& edge);

struct GroupRecoveryRecord {
  std::vector<NodeId> producers;
  int64_t width_before = 0;
  int64_t width_after = 0;
  std::vector<RedundancyCluster> clusters;
  ChannelTransform transform;
  std::vector<std::string> notes;
};

struct CatRecord {
  NodeId cat = 0;
  ChannelTransform transform;  // blkdiag of the branch transforms
};

struct RecoveryTimings {
  int64_t probe_ns = 0;
  int64_t summarize_ns = 0;
  int64_t cluster_ns = 0;
  int64_t rewrite_ns = 0;
  int64_t sanity_ns = 0;
};

struct RecoveryReport {
  RecoveryConfig config;
  ProbeConfig probes;
  std::vector<GroupRecoveryRecord> groups;
  std::vector<CatRecord> cats;
  std::vector<std::string> skipped;
  int64_t params_before = 0;
  int64_t params_after = 0;
  int layers_changed = 0;
  int layers_total = 0;
  bool sanity_ran = false;
  double sanity_delta = 0.0;
  bool ok = true;
  std::string error_code;
  std::string error;
  RecoveryTimings timings;
};

struct RecoveryResult {
  // The recovered graph, or the input graph unchanged when !report.ok.
  Graph graph;
  RecoveryReport report;
};

RecoveryResult recover(const Graph& g, const RecoveryConfig& rcfg,
                       const ProbeConfig& pcfg);

// Weights, biases and BN parameters of every Conv2d/Linear/BatchNorm.
int64_t parameter_count(const Graph& g);

}  // namespace canonet

#endif  // CANONET_RECOVERY_H_
