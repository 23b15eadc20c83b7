#include "canonet/attack.h"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>

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

constexpr uint64_t kDriftProbeSeed = 0xd21f7;

int64_t group_width(const Graph& g, std::span<const NodeId> group) {
  return g.shape_of(group.front())[0];
}

// Rebuilds every member from its own source list and rewrites the union of
// the members' consumers once with the shared M.
GroupEdit relayout(const Graph& g, std::span<const NodeId> group,
                   const std::vector<std::vector<ChannelSource>>& sources,
                   ChannelTransform m) {
  const std::vector<ProducerEdge> edges = analyze_producers(g);
  Graph out = g;
  for (size_t k = 0; k < group.size(); ++k) {
    relayout_producer(out, find_producer(edges, group[k]), sources[k]);
  }
  rewrite_consumers(out, group_consumers(edges, group), m);
  try {
    out.reinfer();
  } catch (const Error& e) {
    throw Error(e.code(), "relayout of producer " +
                              std::to_string(group.front()) + ": " + e.what());
  }
  GroupEdit edit;
  edit.graph = std::move(out);
  edit.transform = std::move(m);
  return edit;
}

GroupEdit unchanged(const Graph& g, std::span<const NodeId> group) {
  GroupEdit edit;
  edit.graph = g;
  edit.transform = ChannelTransform::identity(group_width(g, group));
  return edit;
}

std::vector<ChannelSource> copies(int64_t c) {
  std::vector<ChannelSource> s;
  for (int64_t i = 0; i < c; ++i) s.push_back(ChannelSource::copy(i));
  return s;
}

std::vector<int64_t> random_permutation(int64_t n, Rng& rng) {
  std::vector<int64_t> p(n);
  std::iota(p.begin(), p.end(), 0);
  for (int64_t i = n - 1; i > 0; --i) std::swap(p[i], p[rng.below(i + 1)]);
  return p;
}

}  // namespace

std::string_view variant_name(Variant v) {
  switch (v) {
    case Variant::kZero: return "zero";
    case Variant::kClique: return "clique";
    case Variant::kSplit: return "split";
    case Variant::kMixOpseq: return "mix_opseq";
    case Variant::kMixOpseqPerGroup: return "mix_opseq_per_merge_group";
  }
  return "?";
}

std::optional<Variant> parse_variant(std::string_view s) {
  for (Variant v : {Variant::kZero, Variant::kClique, Variant::kSplit,
                    Variant::kMixOpseq, Variant::kMixOpseqPerGroup}) {
    if (variant_name(v) == s) return v;
  }
  return std::nullopt;
}

std::string_view primitive_name(Primitive p) {
  switch (p) {
    case Primitive::kZero: return "zero";
    case Primitive::kClique: return "clique";
    case Primitive::kSplit: return "split";
  }
  return "?";
}

std::optional<Primitive> parse_primitive(std::string_view s) {
  for (Primitive p : {Primitive::kZero, Primitive::kClique, Primitive::kSplit}) {
    if (primitive_name(p) == s) return p;
  }
  return std::nullopt;
}

std::string_view camouflage_name(Camouflage c) {
  switch (c) {
    case Camouflage::kNone: return "none";
    case Camouflage::kPerm: return "perm";
    case Camouflage::kScale: return "scale";
    case Camouflage::kPermAndScale: return "perm_and_scale";
  }
  return "?";
}

std::optional<Camouflage> parse_camouflage(std::string_view s) {
  for (Camouflage c : {Camouflage::kNone, Camouflage::kPerm, Camouflage::kScale,
                       Camouflage::kPermAndScale}) {
    if (camouflage_name(c) == s) return c;
  }
  return std::nullopt;
}

void AttackConfig::validate() const {
  auto bad = [](const std::string& what) {
    throw Error(ErrorCode::kInvalidArgument, "attack config: " + what);
  };
  if (!(ratio >= 0.0 && ratio <= 1.0)) bad("ratio must lie in [0,1]");
  if (!(split_p >= 0.0 && split_p <= 1.0)) bad("split_p must lie in [0,1]");
  if (opseq_len < 1) bad("opseq_len must be positive");
  if (!(scale_lo > 0.0) || !(scale_lo <= scale_hi) || !std::isfinite(scale_hi)) {
    bad("scale range needs 0 < lo <= hi");
  }
}

int64_t injection_count(double ratio, int64_t width) {
  const double x = ratio * static_cast<double>(width);
  // 0.7 * 10 is 7.000000000000001 in binary; treat that as 7.
  return static_cast<int64_t>(std::ceil(x - 1e-9 * std::max(1.0, x)));
}

int64_t split_baseline(double p, int64_t width) {
  const auto pos =
      static_cast<int64_t>(std::floor(p * static_cast<double>(width - 1) + 0.5));
  return std::min(width - 1, pos);
}

InjectionPlan plan_injection(const Graph& g, const AttackConfig& cfg) {
  cfg.validate();
  InjectionPlan plan;
  const Rng root(cfg.seed);
  if (cfg.variant == Variant::kMixOpseq) {
    Rng rng = root.fork(0);
    for (int t = 0; t < cfg.opseq_len; ++t) {
      plan.global_sequence.push_back(static_cast<Primitive>(rng.below(3)));
    }
  }
  const std::vector<MergeGroup> groups = merge_groups(g);
  for (size_t k = 0; k < groups.size(); ++k) {
    const MergeGroup& mg = groups[k];
    if (!mg.eligible) {
      std::string ids;
      for (NodeId id : mg.producers) {
        ids += (ids.empty() ? "" : ",") + std::to_string(id);
      }
      plan.skipped.push_back("group {" + ids + "}: " + mg.reason);
      continue;
    }
    PlannedGroup pg;
    pg.producers = mg.producers;
    pg.width = group_width(g, mg.producers);
    switch (cfg.variant) {
      case Variant::kZero: pg.sequence = {Primitive::kZero}; break;
      case Variant::kClique: pg.sequence = {Primitive::kClique}; break;
      case Variant::kSplit: pg.sequence = {Primitive::kSplit}; break;
      case Variant::kMixOpseq: pg.sequence = plan.global_sequence; break;
      case Variant::kMixOpseqPerGroup: {
        Rng rng = root.fork(1000 + k);
        for (int t = 0; t < cfg.opseq_len; ++t) {
          pg.sequence.push_back(static_cast<Primitive>(rng.below(3)));
        }
        break;
      }
    }
    plan.groups.push_back(std::move(pg));
  }
  if (plan.groups.empty()) {
    plan.warnings.push_back("no rewritable producers; attack is the identity");
  }
  return plan;
}

GroupEdit inject_zero(const Graph& g, std::span<const NodeId> group, int64_t d,
                      Rng&) {
  if (d <= 0) return unchanged(g, group);
  const int64_t c = group_width(g, group);
  std::vector<ChannelSource> src = copies(c);
  src.insert(src.end(), d, ChannelSource::zero());
  std::vector<TransformEntry> m;
  for (int64_t i = 0; i < c; ++i) m.push_back({i, i, 1.0});
  GroupEdit edit = relayout(g, group, std::vector(group.size(), src),
                            ChannelTransform(c, c + d, std::move(m)));
  edit.injected = d;
  return edit;
}

GroupEdit inject_clique(const Graph& g, std::span<const NodeId> group,
                        int64_t d, Rng& rng,
                        std::vector<std::vector<double>>* mu_columns) {
  if (d <= 0) return unchanged(g, group);
  const bool promoted = d == 1;
  if (promoted) d = 2;
  const int64_t c = group_width(g, group);

  std::vector<std::vector<ChannelSource>> sources;
  for (NodeId id : group) {
    const Node& p = g.node(id);
    const auto w = p.weight().data();
    const double n = static_cast<double>(w.size());
    const double mean = std::accumulate(w.begin(), w.end(), 0.0) / n;
    double var = 0.0;
    for (double x : w) var += (x - mean) * (x - mean);
    const double sd = std::sqrt(var / n);
    std::vector<double> base(row_length(p));
    for (double& x : base) x = rng.normal(mean, sd);
    std::vector<ChannelSource> src = copies(c);
    src.insert(src.end(), d, ChannelSource::explicit_row(base, 0.0));
    sources.push_back(std::move(src));
  }

  std::vector<std::vector<double>> mu(d, std::vector<double>(c));
  for (auto& col : mu) {
    for (double& x : col) x = rng.normal();
  }
  for (int64_t i = 0; i < c; ++i) {
    double mean = 0.0;
    for (const auto& col : mu) mean += col[i];
    mean /= static_cast<double>(d);
    for (auto& col : mu) col[i] -= mean;
  }
  std::vector<TransformEntry> m;
  for (int64_t i = 0; i < c; ++i) {
    m.push_back({i, i, 1.0});
    for (int64_t j = 0; j < d; ++j) m.push_back({i, c + j, mu[j][i]});
  }
  if (mu_columns) *mu_columns = mu;
  GroupEdit edit =
      relayout(g, group, sources, ChannelTransform(c, c + d, std::move(m)));
  edit.injected = d;
  edit.promoted = promoted;
  return edit;
}

GroupEdit inject_split(const Graph& g, std::span<const NodeId> group, int64_t d,
                       double p, Rng&) {
  if (d <= 0) return unchanged(g, group);
  const int64_t c = group_width(g, group);
  const int64_t base = split_baseline(p, c);
  const int64_t k = d + 1;
  std::vector<ChannelSource> src;
  std::vector<TransformEntry> m;
  for (int64_t i = 0; i < c; ++i) {
    if (i == base) continue;
    m.push_back({i, static_cast<int64_t>(src.size()), 1.0});
    src.push_back(ChannelSource::copy(i));
  }
  for (int64_t t = 0; t < k; ++t) {
    m.push_back({base, static_cast<int64_t>(src.size()), 1.0 / static_cast<double>(k)});
    src.push_back(ChannelSource::copy(base));
  }
  GroupEdit edit = relayout(g, group, std::vector(group.size(), src),
                            ChannelTransform(c, c + d, std::move(m)));
  edit.injected = d;
  edit.baseline = base;
  return edit;
}

GroupEdit place_interior(const Graph& g, std::span<const NodeId> group,
                         int64_t fresh, Rng& rng) {
  const int64_t c = group_width(g, group);
  if (fresh <= 0 || fresh >= c) return unchanged(g, group);
  std::vector<int64_t> slots = random_permutation(c, rng);
  std::vector<bool> is_fresh(c, false);
  for (int64_t i = 0; i < fresh; ++i) is_fresh[slots[i]] = true;
  std::vector<int64_t> perm(c);
  int64_t next_old = 0, next_new = c - fresh;
  for (int64_t j = 0; j < c; ++j) perm[j] = is_fresh[j] ? next_new++ : next_old++;
  std::vector<ChannelSource> src;
  for (int64_t j = 0; j < c; ++j) src.push_back(ChannelSource::copy(perm[j]));
  const std::vector<double> ones(c, 1.0);
  return relayout(g, group, std::vector(group.size(), src),
                  ChannelTransform::permute_scale(perm, ones));
}

GroupEdit apply_camouflage(const Graph& g, std::span<const NodeId> group,
                           const AttackConfig& cfg, Rng& rng,
                           CamouflageRecord* record) {
  CamouflageRecord rec;
  GroupEdit edit = unchanged(g, group);
  const int64_t c = group_width(g, group);
  const bool permute = cfg.camouflage == Camouflage::kPerm ||
                       cfg.camouflage == Camouflage::kPermAndScale;
  const bool scale = cfg.camouflage == Camouflage::kScale ||
                     cfg.camouflage == Camouflage::kPermAndScale;
  if (permute) {
    rec.perm = random_permutation(c, rng);
    std::vector<ChannelSource> src;
    for (int64_t p : rec.perm) src.push_back(ChannelSource::copy(p));
    const std::vector<double> ones(c, 1.0);
    edit = relayout(g, group, std::vector(group.size(), src),
                    ChannelTransform::permute_scale(rec.perm, ones));
  }
  if (scale) {
    const std::vector<ProducerEdge> edges = analyze_producers(edit.graph);
    size_t with_bn = 0;
    for (NodeId id : group) with_bn += find_producer(edges, id).batchnorm ? 1 : 0;
    std::vector<std::vector<ChannelSource>> sources;
    std::vector<TransformEntry> m;
    if (with_bn == 0) {
      // No BN to absorb the scale: one D for the whole group, consumers
      // take D^-1 (ReLU is positively homogeneous).
      std::vector<double> s(c);
      for (double& x : s) x = rng.uniform(cfg.scale_lo, cfg.scale_hi);
      std::vector<ChannelSource> src;
      for (int64_t j = 0; j < c; ++j) {
        src.push_back(ChannelSource::copy(j, s[j]));
        m.push_back({j, j, 1.0 / s[j]});
      }
      sources.assign(group.size(), src);
      rec.scales.assign(group.size(), s);
    } else {
      for (NodeId id : group) {
        std::vector<ChannelSource> src;
        std::vector<double> s;
        if (find_producer(edges, id).batchnorm) {
          for (int64_t j = 0; j < c; ++j) {
            s.push_back(rng.uniform(cfg.scale_lo, cfg.scale_hi));
            src.push_back(ChannelSource::copy(j, s.back()));
          }
        } else {
          src = copies(c);
          rec.scale_skipped.push_back(id);
        }
        sources.push_back(std::move(src));
        rec.scales.push_back(std::move(s));
      }
      for (int64_t j = 0; j < c; ++j) m.push_back({j, j, 1.0});
      if (!rec.scale_skipped.empty()) {
        rec.note = "members without BN left unscaled (group shares an Add)";
      }
    }
    GroupEdit scaled =
        relayout(edit.graph, group, sources, ChannelTransform(c, c, std::move(m)));
    scaled.transform = compose(edit.transform, scaled.transform);
    edit = std::move(scaled);
  }
  if (record) *record = std::move(rec);
  return edit;
}

std::vector<Tensor> drift_probes(const Shape& input_shape) {
  Rng rng(kDriftProbeSeed);
  std::vector<Tensor> probes;
  for (int t = 0; t < 16; ++t) {
    probes.push_back(random_uniform(input_shape, -1.0, 1.0, rng));
  }
  return probes;
}

double max_output_delta(const Graph& a, const Graph& b,
                        std::span<const Tensor> probes) {
  double worst = 0.0;
  for (const Tensor& x : probes) {
    worst = std::max(worst, max_abs_diff(forward(a, x), forward(b, x)));
  }
  return worst;
}

AttackResult attack(const Graph& g, const AttackConfig& cfg) {
  AttackReport report;
  report.config = cfg;
  auto t0 = Clock::now();
  const InjectionPlan plan = plan_injection(g, cfg);
  report.timings.plan_ns = elapsed_ns(t0);
  report.global_sequence = plan.global_sequence;
  report.skipped = plan.skipped;
  report.warnings = plan.warnings;

  const Rng root(cfg.seed);
  Graph cur = g;
  for (size_t k = 0; k < plan.groups.size(); ++k) {
    const PlannedGroup& pg = plan.groups[k];
    Rng rng = root.fork(1 + k);
    GroupAttackRecord rec;
    rec.producers = pg.producers;
    rec.width_before = pg.width;
    ChannelTransform total = ChannelTransform::identity(pg.width);

    t0 = Clock::now();
    for (Primitive prim : pg.sequence) {
      StepRecord step;
      step.primitive = prim;
      step.width_before = group_width(cur, pg.producers);
      const int64_t d = injection_count(cfg.ratio, step.width_before);
      GroupEdit edit;
      int64_t fresh = 0;
      switch (prim) {
        case Primitive::kZero:
          edit = inject_zero(cur, pg.producers, d, rng);
          fresh = edit.injected;
          break;
        case Primitive::kClique:
          edit = inject_clique(cur, pg.producers, d, rng);
          fresh = edit.injected;
          break;
        case Primitive::kSplit:
          edit = inject_split(cur, pg.producers, d, cfg.split_p, rng);
          fresh = edit.injected > 0 ? edit.injected + 1 : 0;
          break;
      }
      step.injected = edit.injected;
      step.promoted = edit.promoted;
      step.baseline = edit.baseline;
      total = compose(total, edit.transform);
      cur = std::move(edit.graph);
      if (cfg.interior_placement && fresh > 0) {
        GroupEdit placed = place_interior(cur, pg.producers, fresh, rng);
        total = compose(total, placed.transform);
        cur = std::move(placed.graph);
      }
      step.width_after = group_width(cur, pg.producers);
      rec.steps.push_back(step);
    }
    report.timings.inject_ns += elapsed_ns(t0);

    if (cfg.camouflage != Camouflage::kNone) {
      t0 = Clock::now();
      GroupEdit camo =
          apply_camouflage(cur, pg.producers, cfg, rng, &rec.camouflage);
      total = compose(total, camo.transform);
      cur = std::move(camo.graph);
      report.timings.camouflage_ns += elapsed_ns(t0);
    }
    rec.width_after = group_width(cur, pg.producers);
    rec.transform = std::move(total);
    report.groups.push_back(std::move(rec));
  }

  t0 = Clock::now();
  const std::vector<Tensor> probes = drift_probes(g.shape_of(g.input_id()));
  report.drift = max_output_delta(g, cur, probes);
  report.timings.drift_ns = elapsed_ns(t0);
  return AttackResult{std::move(cur), std::move(report)};
}

}  // namespace canonet
