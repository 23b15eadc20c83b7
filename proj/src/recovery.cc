#include "canonet/recovery.h"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <map>
#include <numeric>
#include <set>

#include "canonet/attack.h"
#include "canonet/error.h"
#include "canonet/relayout.h"

namespace canonet {

namespace {

using Clock = std::chrono::steady_clock;

int64_t elapsed_ns(Clock::time_point since) {
  return std::chrono::duration_cast<std::chrono::nanoseconds>(Clock::now() -
                                                              since)
      .count();
}

// Relative residual allowed when comparing effective incoming rows. Rows of
// injected duplicates agree to rounding; genuine channels are nowhere near.
constexpr double kRowTol = 1e-9;

double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (size_t k = 0; k < a.size(); ++k) s += a[k] * b[k];
  return s;
}

double norm(std::span<const double> a) { return std::sqrt(dot(a, a)); }

// alpha > 0 with b ~= alpha * a, if any.
std::optional<double> positive_ratio(std::span<const double> a,
                                     std::span<const double> b, double tol) {
  const double aa = dot(a, a);
  if (aa == 0.0) return std::nullopt;
  const double alpha = dot(a, b) / aa;
  if (!(alpha > 0.0)) return std::nullopt;
  double r = 0.0;
  for (size_t k = 0; k < a.size(); ++k) {
    const double e = b[k] - alpha * a[k];
    r += e * e;
  }
  if (std::sqrt(r) > tol * norm(b)) return std::nullopt;
  return alpha;
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

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

// Robust ratio of channel j to channel i, or nothing when the pair is not
// proportional under (eps, tau, t_min).
std::optional<double> proportional(const ChannelRecord& rec, int64_t i,
                                   int64_t j, const RecoveryConfig& cfg) {
  std::vector<int> valid;
  for (int t = 0; t < rec.probes; ++t) {
    if (std::abs(rec.at(i, t)) > cfg.eps) valid.push_back(t);
  }
  if (static_cast<int>(valid.size()) < cfg.t_min) return std::nullopt;
  std::vector<double> ratios;
  for (int t : valid) ratios.push_back(rec.at(j, t) / rec.at(i, t));
  const double alpha = median(std::move(ratios));
  for (int t : valid) {
    const double uj = rec.at(j, t), ai = alpha * rec.at(i, t);
    const double den = std::max({std::abs(uj), std::abs(ai), cfg.eps});
    if (std::abs(uj - ai) / den > cfg.tau) return std::nullopt;
  }
  return alpha;
}

ProbeRecord capture_timed(const Graph& g, std::span<const Tensor> probes,
                          std::span<const ProducerEdge> edges,
                          RecoveryTimings* timings) {
  const int t_count = static_cast<int>(probes.size());
  ProbeRecord rec;
  for (const ProducerEdge& e : edges) {
    ChannelRecord r;
    r.producer = e.producer;
    r.site = e.batchnorm ? CaptureSite::kPostBatchNorm
                         : CaptureSite::kProducerOutput;
    r.width = e.width;
    r.probes = t_count;
    r.u.assign(e.width * t_count, 0.0);
    r.bits.assign(e.width * t_count, 0);
    rec.edges.push_back(std::move(r));
  }
  for (int t = 0; t < t_count; ++t) {
    auto t0 = Clock::now();
    const std::vector<Tensor> values = forward_all(g, probes[t]);
    if (timings) timings->probe_ns += elapsed_ns(t0);
    t0 = Clock::now();
    for (size_t k = 0; k < edges.size(); ++k) {
      const Tensor& y = node_value(g, values, edges[k].capture_node());
      ChannelRecord& r = rec.edges[k];
      const int64_t spatial = y.numel() / r.width;
      for (int64_t i = 0; i < r.width; ++i) {
        double s = 0.0;
        for (int64_t p = 0; p < spatial; ++p) {
          s += std::max(0.0, y[i * spatial + p]);
        }
        const double u = s / static_cast<double>(spatial);
        r.u[i * t_count + t] = u;
        r.bits[i * t_count + t] = u > 0.0;
      }
    }
    if (timings) timings->summarize_ns += elapsed_ns(t0);
  }
  return rec;
}

// Everything recovery knows about one member of a merge group.
struct MemberView {
  std::vector<RedundancyCluster> clusters;
  std::vector<int> cluster_of;  // -1 when unclustered
  std::vector<double> alpha;    // relative to the cluster representative
  std::vector<bool> zero;       // all-zero on every probe
  std::vector<bool> null;       // effective incoming row ~ 0
  std::vector<std::string> notes;
};

MemberView analyze_member(const Graph& g, const ProducerEdge& edge,
                          const ChannelRecord& rec, const RecoveryConfig& cfg) {
  const int64_t w = edge.width;
  MemberView v;
  v.cluster_of.assign(w, -1);
  v.alpha.assign(w, 1.0);
  v.zero.assign(w, false);
  v.null.assign(w, false);

  std::vector<RedundancyCluster> found;
  for (const Bucket& b : bucket_by_signature(rec)) {
    for (RedundancyCluster& c : refine_proportional(rec, b, cfg)) {
      if (c.zero) {
        for (int64_t i : c.members) v.zero[i] = true;
      } else {
        found.push_back(std::move(c));
      }
    }
  }

  const std::vector<std::vector<double>> rows = effective_rows(g, edge);
  double rmax = 0.0;
  for (const auto& r : rows) rmax = std::max(rmax, norm(r));
  for (int64_t i = 0; i < w; ++i) {
    v.null[i] = norm(rows[i]) <= cfg.gamma_drop * rmax;
  }

  auto add_cluster = [&](RedundancyCluster c) {
    const int id = static_cast<int>(v.clusters.size());
    for (size_t k = 0; k < c.members.size(); ++k) {
      v.cluster_of[c.members[k]] = id;
      v.alpha[c.members[k]] = c.alpha[k];
    }
    v.clusters.push_back(std::move(c));
  };

  if (!cfg.weight_checks) {
    for (RedundancyCluster& c : found) add_cluster(std::move(c));
    return v;
  }

  // Activation clusters must also agree on the incoming rows.
  for (const RedundancyCluster& c : found) {
    std::vector<RedundancyCluster> parts;
    for (size_t k = 0; k < c.members.size(); ++k) {
      const int64_t j = c.members[k];
      bool placed = false;
      for (RedundancyCluster& p : parts) {
        if (positive_ratio(rows[p.representative], rows[j], kRowTol)) {
          p.members.push_back(j);
          p.alpha.push_back(c.alpha[k]);
          placed = true;
          break;
        }
      }
      if (!placed) {
        RedundancyCluster p;
        p.members = {j};
        p.alpha = {c.alpha[k]};
        p.representative = j;
        parts.push_back(std::move(p));
      }
    }
    if (parts.size() > 1) {
      v.notes.push_back("producer " + std::to_string(edge.producer) +
                        ": activation cluster at channel " +
                        std::to_string(c.representative) +
                        " split by incoming rows");
    }
    for (RedundancyCluster& p : parts) {
      if (p.members.size() < 2) continue;
      const double a0 = p.alpha.front();
      for (double& a : p.alpha) a /= a0;
      add_cluster(std::move(p));
    }
  }

  // Channels active on fewer than t_min probes (dead ones included) carry
  // too little activation evidence; group the unclustered, non-null ones by
  // identical bits plus proportional incoming rows.
  std::vector<RedundancyCluster> sparse;
  for (int64_t i = 0; i < w; ++i) {
    if (v.cluster_of[i] >= 0 || v.null[i]) continue;
    int active = 0;
    for (int t = 0; t < rec.probes; ++t) active += std::abs(rec.at(i, t)) > cfg.eps;
    if (active >= cfg.t_min) continue;
    const std::vector<uint8_t> bits = pack_bits(rec, i);
    bool placed = false;
    for (RedundancyCluster& p : sparse) {
      if (pack_bits(rec, p.representative) != bits) continue;
      if (auto a = positive_ratio(rows[p.representative], rows[i], kRowTol)) {
        p.members.push_back(i);
        p.alpha.push_back(*a);
        placed = true;
        break;
      }
    }
    if (!placed) {
      RedundancyCluster p;
      p.members = {i};
      p.alpha = {1.0};
      p.representative = i;
      p.zero = v.zero[i];
      p.note = "too few active probes; grouped by incoming rows";
      sparse.push_back(std::move(p));
    }
  }
  for (RedundancyCluster& p : sparse) {
    if (p.members.size() >= 2) add_cluster(std::move(p));
  }
  return v;
}

double frobenius(const Tensor& t) { return norm(t.data()); }

// Group-level clusters: channels sharing a cluster in every member with
// consistent relative scales.
std::vector<RedundancyCluster> intersect_members(
    const std::vector<MemberView>& views, int64_t width, double tau,
    std::vector<std::string>& notes) {
  std::map<std::vector<int>, std::vector<int64_t>> by_key;
  for (int64_t i = 0; i < width; ++i) {
    std::vector<int> key;
    bool all = true;
    for (const MemberView& v : views) {
      key.push_back(v.cluster_of[i]);
      all = all && v.cluster_of[i] >= 0;
    }
    if (all) by_key[key].push_back(i);
  }
  std::vector<RedundancyCluster> out;
  for (const auto& [key, chans] : by_key) {
    if (chans.size() < 2) continue;
    const int64_t r = chans.front();
    RedundancyCluster c;
    c.representative = r;
    c.members = {r};
    c.alpha = {1.0};
    bool any_zero = true;
    for (size_t k = 1; k < chans.size(); ++k) {
      const int64_t j = chans[k];
      const double a0 = views[0].alpha[j] / views[0].alpha[r];
      bool agree = true;
      for (const MemberView& v : views) {
        const double a = v.alpha[j] / v.alpha[r];
        if (std::abs(a - a0) > tau * std::max(std::abs(a), std::abs(a0))) {
          agree = false;
        }
      }
      if (agree) {
        c.members.push_back(j);
        c.alpha.push_back(a0);
      }
    }
    for (const MemberView& v : views) {
      any_zero = any_zero && v.clusters[v.cluster_of[r]].zero;
    }
    c.zero = any_zero;
    if (any_zero) c.note = views[0].clusters[views[0].cluster_of[r]].note;
    if (c.members.size() < 2) continue;
    out.push_back(std::move(c));
  }
  // Log where the shared layout is smaller than some member's own decision.
  for (size_t p = 0; p < views.size(); ++p) {
    for (const RedundancyCluster& mc : views[p].clusters) {
      const bool kept_whole = std::any_of(out.begin(), out.end(), [&](const auto& c) {
        return c.members == mc.members;
      });
      if (!kept_whole && views.size() > 1) {
        notes.push_back("group intersection shrank cluster at channel " +
                        std::to_string(mc.representative) + " of member " +
                        std::to_string(p));
      }
    }
  }
  return out;
}

ChannelTransform positional_truncation(int64_t c_before, int64_t c_after) {
  std::vector<TransformEntry> e;
  for (int64_t i = 0; i < std::min(c_before, c_after); ++i) e.push_back({i, i, 1.0});
  return ChannelTransform(c_before, c_after, std::move(e));
}

struct PassState {
  std::map<NodeId, ChannelTransform> layout;  // producer -> M_e
};

void run_pass(Graph& cur, const RecoveryConfig& cfg, const ProbeConfig& pcfg,
              RecoveryReport& report, PassState& state) {
  const std::vector<ProducerEdge> all = analyze_producers(cur);
  const std::vector<MergeGroup> groups = merge_groups(cur);
  std::vector<ProducerEdge> targets;
  for (const MergeGroup& mg : groups) {
    if (!mg.eligible) {
      std::string ids;
      for (NodeId id : mg.producers) {
        ids += (ids.empty() ? "" : ",") + std::to_string(id);
      }
      report.skipped.push_back("group {" + ids + "}: " + mg.reason);
      continue;
    }
    for (NodeId id : mg.producers) targets.push_back(find_producer(all, id));
  }

  auto t0 = Clock::now();
  const std::vector<Tensor> probes =
      make_probes(pcfg, cur.shape_of(cur.input_id()));
  report.timings.probe_ns += elapsed_ns(t0);
  const ProbeRecord rec = capture_timed(cur, probes, targets, &report.timings);

  // Reverse topological order: a producer is judged after its consumers are
  // already compact, so dummy rows injected downstream (which read this
  // producer's dummies with arbitrary weights) are gone by then.
  for (auto git = groups.rbegin(); git != groups.rend(); ++git) {
    const MergeGroup& mg = *git;
    if (!mg.eligible) continue;
    t0 = Clock::now();
    const std::vector<ProducerEdge> edges = analyze_producers(cur);
    const std::vector<ConsumerRef> consumers =
        group_consumers(edges, mg.producers);
    const int64_t width = cur.shape_of(mg.producers.front())[0];

    GroupRecoveryRecord grec;
    grec.producers = mg.producers;
    grec.width_before = width;
    std::vector<MemberView> views;
    for (NodeId id : mg.producers) {
      views.push_back(
          analyze_member(cur, find_producer(edges, id), rec.of(id), cfg));
      for (auto& n : views.back().notes) grec.notes.push_back(std::move(n));
    }

    std::vector<RedundancyCluster> clusters =
        intersect_members(views, width, cfg.tau, grec.notes);
    std::vector<bool> clustered(width, false);
    for (RedundancyCluster& c : clusters) {
      for (int64_t j : c.members) clustered[j] = true;
      c = decide_drop_or_merge(cur, consumers, std::move(c), cfg);
    }

    // Channels that are all-zero (or null) in every member and belong to no
    // cluster are judged one at a time.
    double wmax = 0.0;
    for (const ConsumerRef& c : consumers) {
      wmax = std::max(wmax, frobenius(cur.node(c.consumer).weight()));
    }
    for (int64_t i = 0; i < width; ++i) {
      if (clustered[i]) continue;
      bool all_null = true, all_zero = true;
      for (const MemberView& v : views) {
        all_null = all_null && v.null[i];
        all_zero = all_zero && (v.zero[i] || v.null[i]);
      }
      if (!all_zero) continue;
      RedundancyCluster z;
      z.members = {i};
      z.alpha = {1.0};
      z.representative = i;
      z.zero = true;
      if (all_null) {
        z.decision = Decision::kDrop;
        z.note = "null incoming row";
      } else {
        double cmax = 0.0;
        for (const ConsumerRef& c : consumers) {
          cmax = std::max(cmax, norm(consumer_column(cur.node(c.consumer).weight(),
                                                     c.path, i)));
        }
        z.merged_norm = wmax > 0.0 ? cmax / wmax : 0.0;
        z.decision = z.merged_norm <= cfg.gamma_drop ? Decision::kDrop
                                                     : Decision::kKeep;
        z.note = "all-zero on every probe";
      }
      clusters.push_back(std::move(z));
    }
    std::sort(clusters.begin(), clusters.end(), [](const auto& a, const auto& b) {
      return a.representative < b.representative;
    });

    // A member that consumes its own group sees the group's dummy rows;
    // re-decide blocked clusters with the rows this decision deletes masked.
    std::set<NodeId> self;
    for (const ConsumerRef& c : consumers) {
      if (std::find(mg.producers.begin(), mg.producers.end(), c.consumer) !=
          mg.producers.end()) {
        self.insert(c.consumer);
      }
    }
    for (bool changed = !self.empty(); changed;) {
      changed = false;
      std::vector<bool> removed(width, false);
      for (const RedundancyCluster& c : clusters) {
        for (int64_t j : c.members) {
          removed[j] = removed[j] || c.decision == Decision::kDrop ||
                       (c.decision == Decision::kMerge && j != c.representative);
        }
      }
      RowMask mask;
      for (NodeId id : self) mask[id] = removed;
      for (RedundancyCluster& c : clusters) {
        if (c.decision != Decision::kAmbiguous) continue;
        RedundancyCluster again =
            decide_drop_or_merge(cur, consumers, c, cfg, &mask);
        if (again.decision != Decision::kAmbiguous) {
          again.note = "decided with self-consumer rows masked";
          c = std::move(again);
          changed = true;
        }
      }
    }
    report.timings.cluster_ns += elapsed_ns(t0);

    t0 = Clock::now();
    ChannelTransform m = synthesize_transform(width, clusters);
    if (!m.is_identity()) {
      std::vector<ChannelSource> src;
      for (int64_t col = 0; col < m.c_after(); ++col) {
        // The kept channel feeding column col carries the entry with value 1
        // at the smallest row.
        for (const TransformEntry& e : m.entries()) {
          if (e.col == col) {
            src.push_back(ChannelSource::copy(e.row));
            break;
          }
        }
      }
      for (NodeId id : mg.producers) {
        relayout_producer(cur, find_producer(edges, id), src);
      }
      std::vector<ConsumerRef> normal, faulted;
      for (const ConsumerRef& c : consumers) {
        (cfg.fault_skip_consumer == c.consumer ? faulted : normal).push_back(c);
      }
      rewrite_consumers(cur, normal, m);
      rewrite_consumers(cur, faulted,
                        positional_truncation(m.c_before(), m.c_after()));
      try {
        cur.reinfer();
      } catch (const Error& e) {
        throw Error(e.code(), "recovery of producer " +
                                  std::to_string(mg.producers.front()) + ": " +
                                  e.what());
      }
    }
    report.timings.rewrite_ns += elapsed_ns(t0);

    for (NodeId id : mg.producers) {
      auto it = state.layout.find(id);
      if (it == state.layout.end()) {
        state.layout.emplace(id, m);
      } else {
        it->second = compose(it->second, m);
      }
    }
    grec.width_after = m.c_after();
    grec.transform = std::move(m);
    grec.clusters = std::move(clusters);
    report.groups.push_back(std::move(grec));
  }
}

ChannelTransform layout_of(const Graph& attacked, NodeId id,
                           const PassState& state) {
  const Node& n = attacked.node(id);
  switch (n.kind) {
    case NodeKind::kConv2d:
    case NodeKind::kLinear: {
      auto it = state.layout.find(id);
      if (it != state.layout.end()) return it->second;
      return ChannelTransform::identity(attacked.shape_of(id)[0]);
    }
    case NodeKind::kBatchNorm:
    case NodeKind::kReLU:
    case NodeKind::kAvgPoolGlobal:
    case NodeKind::kAdd:
    case NodeKind::kOutput:
      return layout_of(attacked, attacked.inputs_of(id)[0], state);
    case NodeKind::kCat: {
      std::vector<ChannelTransform> blocks;
      for (NodeId in : attacked.inputs_of(id)) {
        blocks.push_back(layout_of(attacked, in, state));
      }
      return block_diag(blocks);
    }
    case NodeKind::kFlatten: {
      const Shape& s = attacked.shape_of(attacked.inputs_of(id)[0]);
      return kron_lift(layout_of(attacked, attacked.inputs_of(id)[0], state),
                       s[1] * s[2]);
    }
    case NodeKind::kInput:
      break;
  }
  return ChannelTransform::identity(attacked.shape_of(id)[0]);
}

}  // namespace

void ProbeConfig::validate() const {
  if (count < 1) throw Error(ErrorCode::kInvalidArgument, "probe count < 1");
  if (!(lo < hi)) throw Error(ErrorCode::kInvalidArgument, "probe range lo >= hi");
}

std::vector<Tensor> make_probes(const ProbeConfig& cfg, const Shape& input_shape) {
  cfg.validate();
  Rng rng(cfg.seed);
  std::vector<Tensor> probes;
  for (int t = 0; t < cfg.count; ++t) {
    probes.push_back(random_uniform(input_shape, cfg.lo, cfg.hi, rng));
  }
  return probes;
}

std::string_view capture_site_name(CaptureSite s) {
  return s == CaptureSite::kPostBatchNorm ? "post_bn" : "producer_output";
}

const ChannelRecord& ProbeRecord::of(NodeId producer) const {
  for (const ChannelRecord& r : edges) {
    if (r.producer == producer) return r;
  }
  throw Error(ErrorCode::kInvalidArgument,
              "no probe record for producer " + std::to_string(producer));
}

ProbeRecord capture(const Graph& g, std::span<const Tensor> probes,
                    std::span<const ProducerEdge> edges) {
  return capture_timed(g, probes, edges, nullptr);
}

uint64_t fnv1a64(std::span<const uint8_t> bytes) {
  uint64_t h = 0xcbf29ce484222325ULL;
  for (uint8_t b : bytes) {
    h ^= b;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::vector<uint8_t> pack_bits(const ChannelRecord& rec, int64_t channel) {
  std::vector<uint8_t> out((rec.probes + 7) / 8, 0);
  for (int t = 0; t < rec.probes; ++t) {
    if (rec.bit(channel, t)) out[t / 8] |= static_cast<uint8_t>(1u << (t % 8));
  }
  return out;
}

std::vector<Bucket> bucket_by_signature(const ChannelRecord& rec,
                                        const SignatureHash& hash) {
  std::map<uint64_t, std::vector<int64_t>> by_hash;
  std::vector<std::vector<uint8_t>> packed;
  for (int64_t i = 0; i < rec.width; ++i) {
    packed.push_back(pack_bits(rec, i));
    by_hash[hash(packed.back())].push_back(i);
  }
  std::vector<Bucket> out;
  for (const auto& [h, chans] : by_hash) {
    std::vector<Bucket> split;
    for (int64_t i : chans) {
      auto it = std::find_if(split.begin(), split.end(), [&](const Bucket& b) {
        return packed[b.channels.front()] == packed[i];
      });
      if (it == split.end()) {
        split.push_back(Bucket{h, {i}});
      } else {
        it->channels.push_back(i);
      }
    }
    out.insert(out.end(), split.begin(), split.end());
  }
  std::sort(out.begin(), out.end(), [](const Bucket& a, const Bucket& b) {
    return a.channels.front() < b.channels.front();
  });
  return out;
}

void RecoveryConfig::validate() const {
  auto bad = [](const std::string& what) {
    throw Error(ErrorCode::kInvalidArgument, "recovery config: " + what);
  };
  if (!(eps > 0.0)) bad("eps must be positive");
  if (!(tau > 0.0)) bad("tau must be positive");
  if (t_min < 1) bad("t_min must be at least 1");
  if (!(gamma_drop >= 0.0 && gamma_drop <= gamma_keep)) {
    bad("need 0 <= gamma_drop <= gamma_keep");
  }
  if (active_ratio_gate) {
    const auto [lo, hi] = *active_ratio_gate;
    if (!(lo >= 0.0 && lo <= hi && hi <= 1.0)) bad("active ratio gate outside [0,1]");
  }
  if (!(sanity_tol >= 0.0)) bad("sanity_tol must be non-negative");
}

std::string_view decision_name(Decision d) {
  switch (d) {
    case Decision::kKeep: return "keep";
    case Decision::kDrop: return "drop";
    case Decision::kMerge: return "merge";
    case Decision::kAmbiguous: return "ambiguous";
  }
  return "?";
}

std::vector<RedundancyCluster> refine_proportional(const ChannelRecord& rec,
                                                   const Bucket& bucket,
                                                   const RecoveryConfig& cfg) {
  std::vector<RedundancyCluster> out;
  if (bucket.channels.empty()) return out;
  const int64_t first = bucket.channels.front();
  bool all_zero = true;
  for (int t = 0; t < rec.probes; ++t) all_zero = all_zero && !rec.bit(first, t);
  if (all_zero) {
    RedundancyCluster z;
    z.members = bucket.channels;
    z.representative = first;
    z.alpha.assign(z.members.size(), 1.0);
    z.zero = true;
    out.push_back(std::move(z));
    return out;
  }

  std::vector<int64_t> chans;
  for (int64_t i : bucket.channels) {
    if (cfg.active_ratio_gate) {
      int on = 0;
      for (int t = 0; t < rec.probes; ++t) on += rec.bit(i, t);
      const double frac = static_cast<double>(on) / rec.probes;
      if (frac < cfg.active_ratio_gate->first ||
          frac > cfg.active_ratio_gate->second) {
        continue;
      }
    }
    chans.push_back(i);
  }
  UnionFind uf(chans.size());
  for (size_t a = 0; a < chans.size(); ++a) {
    for (size_t b = a + 1; b < chans.size(); ++b) {
      if (proportional(rec, chans[a], chans[b], cfg)) uf.unite(a, b);
    }
  }
  std::map<size_t, std::vector<int64_t>> comps;
  for (size_t a = 0; a < chans.size(); ++a) comps[uf.find(a)].push_back(chans[a]);
  for (auto& [root, members] : comps) {
    if (members.size() < 2) continue;
    RedundancyCluster c;
    c.members = members;
    c.representative = members.front();
    for (int64_t j : members) {
      if (j == c.representative) {
        c.alpha.push_back(1.0);
        continue;
      }
      // Members of a component need not be directly proportional to the
      // representative; fall back to the direct median ratio anyway.
      std::vector<double> ratios;
      for (int t = 0; t < rec.probes; ++t) {
        if (std::abs(rec.at(c.representative, t)) > cfg.eps) {
          ratios.push_back(rec.at(j, t) / rec.at(c.representative, t));
        }
      }
      c.alpha.push_back(median(std::move(ratios)));
    }
    out.push_back(std::move(c));
  }
  return out;
}

RedundancyCluster decide_drop_or_merge(const Graph& g,
                                       std::span<const ConsumerRef> consumers,
                                       RedundancyCluster cluster,
                                       const RecoveryConfig& cfg,
                                       const RowMask* masked) {
  double wmax = 0.0, smax = 0.0;
  std::vector<std::vector<double>> stars;
  std::vector<std::vector<std::vector<double>>> cols;  // [consumer][member]
  for (const ConsumerRef& c : consumers) {
    const Tensor& w = g.node(c.consumer).weight();
    wmax = std::max(wmax, frobenius(w));
    const std::vector<bool>* rows = nullptr;
    if (masked) {
      auto it = masked->find(c.consumer);
      if (it != masked->end()) rows = &it->second;
    }
    std::vector<std::vector<double>> per;
    std::vector<double> star;
    for (size_t k = 0; k < cluster.members.size(); ++k) {
      std::vector<double> col = consumer_column(w, c.path, cluster.members[k]);
      for (double& x : col) x *= cluster.alpha[k];
      if (rows) {
        const size_t chunk = col.size() / rows->size();
        for (size_t o = 0; o < rows->size(); ++o) {
          if ((*rows)[o]) std::fill_n(col.begin() + o * chunk, chunk, 0.0);
        }
      }
      if (star.empty()) star.assign(col.size(), 0.0);
      for (size_t q = 0; q < col.size(); ++q) star[q] += col[q];
      per.push_back(std::move(col));
    }
    smax = std::max(smax, norm(star));
    stars.push_back(std::move(star));
    cols.push_back(std::move(per));
  }
  cluster.merged_norm = wmax > 0.0 ? smax / wmax : 0.0;
  if (consumers.empty() || cluster.merged_norm <= cfg.gamma_drop) {
    cluster.decision = Decision::kDrop;
    return cluster;
  }
  if (cluster.merged_norm < cfg.gamma_keep) {
    cluster.decision = Decision::kAmbiguous;
    cluster.note = "merged column below keep threshold";
    return cluster;
  }
  // Merge only when every member's scaled column points along the merged
  // column wherever that column matters; this rejects coincidental
  // duplicates whose consumers use them differently.
  for (size_t c = 0; c < consumers.size(); ++c) {
    const double sn = norm(stars[c]);
    if (sn <= cfg.gamma_drop * wmax) continue;
    for (const auto& col : cols[c]) {
      const auto share = positive_ratio(stars[c], col, cfg.gamma_keep);
      if (!share && norm(col) > cfg.gamma_keep * sn) {
        cluster.decision = Decision::kAmbiguous;
        cluster.note = "member columns not parallel to the merged column";
        return cluster;
      }
    }
  }
  cluster.decision = Decision::kMerge;
  return cluster;
}

ChannelTransform synthesize_transform(int64_t width,
                                      std::span<const RedundancyCluster> clusters) {
  std::vector<int> owner(width, -1);
  std::vector<bool> kept(width, true);
  for (size_t k = 0; k < clusters.size(); ++k) {
    const RedundancyCluster& c = clusters[k];
    if (std::find(c.members.begin(), c.members.end(), c.representative) ==
        c.members.end()) {
      throw Error(ErrorCode::kInvalidArgument,
                  "cluster representative is not a member");
    }
    for (int64_t j : c.members) {
      if (j < 0 || j >= width) {
        throw Error(ErrorCode::kInvalidArgument, "cluster member out of range");
      }
      if (owner[j] >= 0) {
        throw Error(ErrorCode::kInvalidArgument,
                    "channel " + std::to_string(j) + " is in two clusters");
      }
      owner[j] = static_cast<int>(k);
      if (c.decision == Decision::kDrop ||
          (c.decision == Decision::kMerge && j != c.representative)) {
        kept[j] = false;
      }
    }
  }
  std::vector<int64_t> col(width, -1);
  int64_t next = 0;
  for (int64_t i = 0; i < width; ++i) {
    if (kept[i]) col[i] = next++;
  }
  std::vector<TransformEntry> e;
  for (int64_t i = 0; i < width; ++i) {
    if (kept[i]) {
      e.push_back({i, col[i], 1.0});
      continue;
    }
    const RedundancyCluster& c = clusters[owner[i]];
    if (c.decision != Decision::kMerge) continue;
    const size_t k = std::find(c.members.begin(), c.members.end(), i) -
                     c.members.begin();
    e.push_back({i, col[c.representative], c.alpha[k]});
  }
  return ChannelTransform(width, next, std::move(e));
}

std::vector<std::vector<double>> effective_rows(const Graph& g,
                                                const ProducerEdge& edge) {
  const Node& p = g.node(edge.producer);
  const int64_t len = row_length(p);
  std::vector<std::vector<double>> rows;
  for (int64_t i = 0; i < edge.width; ++i) {
    double a = 1.0, b = 0.0;
    if (edge.batchnorm) {
      const BatchNormParams& bn = g.node(*edge.batchnorm).bn();
      a = bn.gamma[i] / std::sqrt(bn.var[i] + bn.eps);
      b = bn.beta[i] - a * bn.mean[i];
    }
    std::vector<double> r(len + 1);
    for (int64_t k = 0; k < len; ++k) r[k] = a * p.weight()[i * len + k];
    r[len] = a * p.bias()[i] + b;
    rows.push_back(std::move(r));
  }
  return rows;
}

int64_t parameter_count(const Graph& g) {
  int64_t n = 0;
  for (const Node& node : g.nodes()) {
    if (node.is_linear_op()) {
      n += node.weight().numel() + node.bias().numel();
    } else if (node.kind == NodeKind::kBatchNorm) {
      n += 4 * node.bn().gamma.numel();
    }
  }
  return n;
}

RecoveryResult recover(const Graph& g, const RecoveryConfig& rcfg,
                       const ProbeConfig& pcfg) {
  RecoveryReport report;
  report.config = rcfg;
  report.probes = pcfg;
  report.params_before = parameter_count(g);
  try {
    rcfg.validate();
    pcfg.validate();
    Graph cur = g;
    PassState state;
    run_pass(cur, rcfg, pcfg, report, state);
    if (rcfg.second_sync_pass) run_pass(cur, rcfg, pcfg, report, state);

    for (NodeId id : g.topo_order()) {
      if (g.node(id).kind == NodeKind::kCat) {
        report.cats.push_back(CatRecord{id, layout_of(g, id, state)});
      }
    }
    report.params_after = parameter_count(cur);
    for (const Node& n : g.nodes()) {
      if (!n.is_linear_op()) continue;
      ++report.layers_total;
      if (n.weight().shape() != cur.node(n.id).weight().shape()) {
        ++report.layers_changed;
      }
    }
    if (rcfg.sanity_check) {
      const auto t0 = Clock::now();
      report.sanity_ran = true;
      report.sanity_delta =
          max_output_delta(g, cur, drift_probes(g.shape_of(g.input_id())));
      report.timings.sanity_ns = elapsed_ns(t0);
      if (!(report.sanity_delta <= rcfg.sanity_tol)) {
        throw Error(ErrorCode::kSanityCheckFailed,
                    "recovered output differs from attacked by " +
                        std::to_string(report.sanity_delta));
      }
    }
    return RecoveryResult{std::move(cur), std::move(report)};
  } catch (const Error& e) {
    report.ok = false;
    report.error_code = std::string(error_code_name(e.code()));
    report.error = e.what();
    report.params_after = report.params_before;
    return RecoveryResult{g, std::move(report)};
  }
}

}  // namespace canonet
