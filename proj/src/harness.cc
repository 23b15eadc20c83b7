#include "canonet/harness.h"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <map>
#include <sstream>

#include "canonet/error.h"
#include "canonet/motifs.h"

namespace canonet {

namespace {

std::vector<int64_t> linear_widths(const Graph& g) {
  std::vector<int64_t> w;
  for (const Node& n : g.nodes()) {
    if (n.is_linear_op()) w.push_back(n.weight().dim(0));
  }
  return w;
}

std::vector<NodeId> linear_layers(const Graph& g) {
  std::vector<NodeId> ids;
  for (NodeId id : g.topo_order()) {
    if (g.node(id).is_linear_op()) ids.push_back(id);
  }
  return ids;
}

[[noreturn]] void bad_spec(const std::string& what) {
  throw Error(ErrorCode::kInvalidArgument, "pipeline spec: " + what);
}

}  // namespace

void PipelineSpec::validate() const {
  const auto& names = motif_names();
  if (std::find(names.begin(), names.end(), motif) == names.end()) {
    bad_spec("unknown motif '" + motif + "'");
  }
  if (watermark_bits < 1) bad_spec("watermark_bits must be >= 1");
  attack.validate();
  recovery.validate();
  probes.validate();
  certificate.validate();
  tier2.validate();
}

Json to_json(const PipelineSpec& s) {
  Json j = {{"motif", s.motif},
            {"model_seed", s.model_seed},
            {"watermark_layer", nullptr},
            {"watermark_bits", s.watermark_bits},
            {"watermark_seed", s.watermark_seed},
            {"attack", to_json(s.attack)},
            {"recovery", to_json(s.recovery)},
            {"probes", to_json(s.probes)},
            {"certificate", to_json(s.certificate)},
            {"tier2", to_json(s.tier2)},
            {"skip_recovery", s.skip_recovery},
            {"timings", s.timings},
            {"out_dir", s.out_dir}};
  if (s.watermark_layer) j["watermark_layer"] = *s.watermark_layer;
  return j;
}

PipelineSpec pipeline_spec_from_json(const Json& j) {
  if (!j.is_object()) bad_spec("must be an object");
  PipelineSpec s;
  try {
    for (const auto& [k, v] : j.items()) {
      if (k == "motif") s.motif = v.get<std::string>();
      else if (k == "model_seed") s.model_seed = v.get<uint64_t>();
      else if (k == "watermark_layer") {
        if (!v.is_null()) s.watermark_layer = v.get<NodeId>();
      } else if (k == "watermark_bits") s.watermark_bits = v.get<int>();
      else if (k == "watermark_seed") s.watermark_seed = v.get<uint64_t>();
      else if (k == "attack") s.attack = attack_config_from_json(v);
      else if (k == "recovery") s.recovery = recovery_config_from_json(v);
      else if (k == "probes") s.probes = probe_config_from_json(v);
      else if (k == "certificate") s.certificate = certificate_config_from_json(v);
      else if (k == "tier2") s.tier2 = tier2_config_from_json(v);
      else if (k == "skip_recovery") s.skip_recovery = v.get<bool>();
      else if (k == "timings") s.timings = v.get<bool>();
      else if (k == "out_dir") s.out_dir = v.get<std::string>();
      else bad_spec("unknown field '" + k + "'");
    }
  } catch (const nlohmann::json::exception& e) {
    bad_spec(e.what());
  }
  s.validate();
  return s;
}

bool apply_seed_override(PipelineSpec& s) {
  const char* env = std::getenv("CANONET_SEED");
  if (env == nullptr || *env == '\0') return false;
  char* end = nullptr;
  const uint64_t seed = std::strtoull(env, &end, 0);
  if (*end != '\0') {
    throw Error(ErrorCode::kInvalidArgument, "CANONET_SEED is not an integer");
  }
  s.model_seed = seed;
  s.watermark_seed = seed;
  s.attack.seed = seed;
  s.probes.seed = seed;
  return true;
}

WatermarkKey default_key(const Graph& g, NodeId layer, int n, uint64_t seed) {
  if (!g.contains(layer) || !g.node(layer).is_linear_op()) {
    throw Error(ErrorCode::kInvalidArgument,
                "watermark layer " + std::to_string(layer) + " is not Conv2d/Linear");
  }
  const int64_t m = g.node(layer).weight().numel();
  const int bits = static_cast<int>(std::max<int64_t>(1, std::min<int64_t>(n, m / 2)));
  return keygen(g, layer, bits, seed);
}

PipelineResult run_pipeline(const PipelineSpec& spec) {
  spec.validate();
  PipelineResult r;
  const Motif m = make_motif(spec.motif, spec.model_seed);
  const NodeId layer = spec.watermark_layer.value_or(m.watermark_layer);
  r.key = default_key(m.graph, layer, spec.watermark_bits, spec.watermark_seed);
  r.clean = embed(m.graph, r.key).graph;

  AttackResult attacked = attack(r.clean, spec.attack);
  r.attacked = attacked.graph;
  r.attack = std::move(attacked.report);

  if (spec.skip_recovery) {
    r.recovered = r.attacked;
  } else {
    RecoveryResult rec = recover(r.attacked, spec.recovery, spec.probes);
    r.recovered = std::move(rec.graph);
    r.recovery = std::move(rec.report);
    r.recovery_ran = true;
  }
  r.sanity_clean = r.recovery_ran && r.recovery.ok &&
                   (!r.recovery.sanity_ran ||
                    r.recovery.sanity_delta <= spec.recovery.sanity_tol);
  r.verdict = verify(r.clean, r.attacked, r.recovered, r.key, spec.certificate,
                     spec.tier2);
  r.exit_code = r.sanity_clean && r.verdict.pass ? 0 : 1;
  return r;
}

Json summary_json(const PipelineSpec& spec, const PipelineResult& r) {
  return {{"motif", spec.motif},
          {"watermark_layer", r.key.layer},
          {"watermark_bits", r.key.n},
          {"widths", {{"clean", linear_widths(r.clean)},
                      {"attacked", linear_widths(r.attacked)},
                      {"recovered", linear_widths(r.recovered)}}},
          {"params", {{"clean", parameter_count(r.clean)},
                      {"attacked", parameter_count(r.attacked)},
                      {"recovered", parameter_count(r.recovered)}}},
          {"flops", {{"clean", flop_estimate(r.clean)},
                     {"attacked", flop_estimate(r.attacked)},
                     {"recovered", flop_estimate(r.recovered)}}},
          {"attack_drift", r.attack.drift},
          {"recovery_ran", r.recovery_ran},
          {"sanity_clean", r.sanity_clean},
          {"similarity", {{"raw", {{"c", r.verdict.raw.c},
                                   {"a", r.verdict.raw.a},
                                   {"r", r.verdict.raw.r}}},
                          {"reported", {{"c", r.verdict.reported.c},
                                        {"a", r.verdict.reported.a},
                                        {"r", r.verdict.reported.r}}}}},
          {"tier", r.verdict.tier},
          {"verdict", r.verdict.pass ? "PASS" : "FAIL"},
          {"exit_code", r.exit_code}};
}

void write_pipeline_artifacts(const PipelineSpec& spec, const PipelineResult& r) {
  if (spec.out_dir.empty()) return;
  std::error_code ec;
  std::filesystem::create_directories(spec.out_dir, ec);
  if (ec) throw Error(ErrorCode::kIo, "cannot create " + spec.out_dir + ": " + ec.message());
  const std::filesystem::path dir(spec.out_dir);
  auto put = [&](const char* name, const Json& j) {
    write_json_file((dir / name).string(), j);
  };
  Json spec_json = to_json(spec);
  spec_json.erase("out_dir");
  put("spec.json", spec_json);
  put("clean.json", graph_to_json(r.clean));
  put("attacked.json", graph_to_json(r.attacked));
  put("recovered.json", graph_to_json(r.recovered));
  put("key.json", key_to_json(r.key));
  put("attack_report.json", to_json(r.attack, spec.timings));
  if (r.recovery_ran) put("recovery_report.json", to_json(r.recovery, spec.timings));
  put("verdict.json", to_json(r.verdict));
  put("summary.json", summary_json(spec, r));
}

int64_t flop_estimate(const Graph& g) {
  int64_t total = 0;
  for (const Node& n : g.nodes()) {
    if (n.kind == NodeKind::kConv2d) {
      const Tensor& w = n.weight();
      const Shape& out = g.shape_of(n.id);
      total += w.dim(0) * w.dim(1) * w.dim(2) * w.dim(3) * out[1] * out[2];
    } else if (n.kind == NodeKind::kLinear) {
      total += n.weight().dim(0) * n.weight().dim(1);
    }
  }
  return total;
}

FalsePositiveReport fp_eval(const Graph& clean, NodeId target, const PipelineSpec& spec) {
  FalsePositiveReport r;
  r.motif = clean.meta().motif;
  r.target = target;
  const WatermarkKey key = default_key(clean, target, 128, spec.watermark_seed);
  const Graph marked = embed(clean, key).graph;
  const RecoveryResult rec = recover(marked, spec.recovery, spec.probes);
  r.recovery_ok = rec.report.ok;
  r.params_before = parameter_count(marked);
  r.params_pruned = r.params_before - parameter_count(rec.graph);
  r.p_fpr = static_cast<double>(r.params_pruned) / static_cast<double>(r.params_before);
  r.layers_changed = rec.report.layers_changed;
  r.layers_total = rec.report.layers_total;
  r.delta_sim = extract_similarity(rec.graph, key).similarity -
                extract_similarity(marked, key).similarity;
  // Held out: a seed the recovery probes never use.
  ProbeConfig held = spec.probes;
  held.count = 16;
  held.seed = mix_seed(spec.probes.seed, 0xf0f0);
  const auto probes = make_probes(held, marked.shape_of(marked.input_id()));
  r.output_delta = max_output_delta(marked, rec.graph, probes);
  const std::vector<NodeId> layers = linear_layers(marked);
  const CertificateReport cert = certify_model(rec.graph, marked, layers, spec.certificate);
  r.tier1_verified = cert.verified;
  r.tier1_total = cert.total;
  for (const GroupRecoveryRecord& g : rec.report.groups) {
    for (const RedundancyCluster& c : g.clusters) r.ambiguous += c.decision == Decision::kAmbiguous;
  }
  return r;
}

std::vector<FalsePositiveReport> fp_eval_all_targets(const PipelineSpec& spec) {
  spec.validate();
  const Motif m = make_motif(spec.motif, spec.model_seed);
  std::vector<FalsePositiveReport> out;
  for (NodeId id : linear_layers(m.graph)) out.push_back(fp_eval(m.graph, id, spec));
  return out;
}

Json to_json(const FalsePositiveReport& r) {
  return {{"motif", r.motif},
          {"target", r.target},
          {"params_before", r.params_before},
          {"params_pruned", r.params_pruned},
          {"p_fpr", r.p_fpr},
          {"l_fp", {r.layers_changed, r.layers_total}},
          {"delta_sim", r.delta_sim},
          {"output_delta_proxy", r.output_delta},
          {"tier1", {r.tier1_verified, r.tier1_total}},
          {"recovery_ok", r.recovery_ok},
          {"ambiguous_clusters", r.ambiguous}};
}

std::vector<int64_t> width_recurrence(int64_t width, double ratio, int steps) {
  std::vector<int64_t> w = {width};
  for (int t = 0; t < steps; ++t) w.push_back(w.back() + injection_count(ratio, w.back()));
  return w;
}

BenchResult run_bench(const BenchSweep& sweep) {
  BenchResult out;
  const Motif m = make_motif(sweep.motif, sweep.model_seed);
  const std::vector<int64_t> clean_widths = linear_widths(m.graph);
  const int64_t clean_flops = flop_estimate(m.graph);
  for (double ratio : sweep.ratios) {
    for (Variant v : sweep.variants) {
      AttackConfig acfg = sweep.attack;
      acfg.ratio = ratio;
      acfg.variant = v;
      const AttackResult ar = attack(m.graph, acfg);
      for (int t : sweep.probe_counts) {
        BenchPoint p;
        p.motif = sweep.motif;
        p.variant = v;
        p.ratio = ratio;
        p.probes = t;
        p.attack_timings = ar.report.timings;
        p.flops_clean = clean_flops;
        p.flops_attacked = flop_estimate(ar.graph);
        if (v == Variant::kMixOpseq || v == Variant::kMixOpseqPerGroup) {
          for (const GroupAttackRecord& g : ar.report.groups) {
            WidthTrajectory tr;
            tr.producers = g.producers;
            tr.observed = {g.width_before};
            for (const StepRecord& s : g.steps) {
              tr.observed.push_back(s.width_after);
              tr.promotions += s.promoted;
            }
            tr.expected = width_recurrence(g.width_before, ratio,
                                           static_cast<int>(g.steps.size()));
            tr.matches = tr.observed == tr.expected;
            p.trajectories_match = p.trajectories_match && tr.matches;
            p.trajectories.push_back(std::move(tr));
          }
        }
        ProbeConfig pcfg = sweep.probes;
        pcfg.count = t;
        const RecoveryResult rr = recover(ar.graph, sweep.recovery, pcfg);
        p.recovery_timings = rr.report.timings;
        p.recovered = rr.report.ok && linear_widths(rr.graph) == clean_widths;
        out.points.push_back(std::move(p));
      }
    }
  }
  // Soft ordinal checks; timings are noisy so these only warn.
  std::map<std::pair<double, int>, std::vector<const BenchPoint*>> by_cell;
  std::map<std::pair<double, int>, std::vector<const BenchPoint*>> by_variant;
  for (const BenchPoint& p : out.points) {
    by_cell[{p.ratio, p.probes}].push_back(&p);
    by_variant[{p.ratio, static_cast<int>(p.variant)}].push_back(&p);
  }
  auto total = [](const BenchPoint* p) {
    const RecoveryTimings& t = p->recovery_timings;
    return t.probe_ns + t.summarize_ns + t.cluster_ns + t.rewrite_ns;
  };
  for (const auto& [cell, pts] : by_cell) {
    for (const BenchPoint* mix : pts) {
      if (mix->variant != Variant::kMixOpseq) continue;
      for (const BenchPoint* single : pts) {
        if (single->variant == Variant::kMixOpseq ||
            single->variant == Variant::kMixOpseqPerGroup || total(mix) >= total(single)) {
          continue;
        }
        std::ostringstream w;
        w << "ratio " << cell.first << ", " << cell.second << " probes: mix_opseq recovery "
          << total(mix) << " ns below " << variant_name(single->variant) << " "
          << total(single) << " ns";
        out.warnings.push_back(w.str());
      }
    }
  }
  for (const auto& [key, pts] : by_variant) {
    for (size_t i = 1; i < pts.size(); ++i) {
      if (pts[i]->probes > pts[i - 1]->probes &&
          pts[i]->recovery_timings.probe_ns < pts[i - 1]->recovery_timings.probe_ns) {
        std::ostringstream w;
        w << variant_name(pts[i]->variant) << " ratio " << key.first << ": probe phase "
          << pts[i]->recovery_timings.probe_ns << " ns at T=" << pts[i]->probes
          << " below " << pts[i - 1]->recovery_timings.probe_ns << " ns at T="
          << pts[i - 1]->probes;
        out.warnings.push_back(w.str());
      }
    }
  }
  return out;
}

Json to_json(const BenchPoint& p, bool timings) {
  Json traj = Json::array();
  for (const WidthTrajectory& t : p.trajectories) {
    traj.push_back({{"producers", t.producers},
                    {"observed", t.observed},
                    {"expected", t.expected},
                    {"promotions", t.promotions},
                    {"matches", t.matches}});
  }
  Json j = {{"motif", p.motif},
            {"variant", std::string(variant_name(p.variant))},
            {"ratio", p.ratio},
            {"probes", p.probes},
            {"flops_clean", p.flops_clean},
            {"flops_attacked", p.flops_attacked},
            {"trajectories", traj},
            {"trajectories_match", p.trajectories_match},
            {"recovered", p.recovered}};
  if (timings) {
    const AttackTimings& a = p.attack_timings;
    const RecoveryTimings& r = p.recovery_timings;
    j["timings_ns"] = {{"attack", a.plan_ns + a.inject_ns + a.camouflage_ns},
                       {"probe", r.probe_ns},
                       {"summarize", r.summarize_ns},
                       {"cluster", r.cluster_ns},
                       {"rewrite", r.rewrite_ns},
                       {"sanity", r.sanity_ns}};
  }
  return j;
}

std::string bench_csv(const BenchResult& r) {
  std::ostringstream out;
  out << "motif,variant,ratio,probes,attack_ns,probe_ns,summarize_ns,cluster_ns,"
         "rewrite_ns,recovery_ns,flops_clean,flops_attacked,recovered\n";
  for (const BenchPoint& p : r.points) {
    const AttackTimings& a = p.attack_timings;
    const RecoveryTimings& t = p.recovery_timings;
    out << p.motif << ',' << variant_name(p.variant) << ',' << p.ratio << ',' << p.probes
        << ',' << a.plan_ns + a.inject_ns + a.camouflage_ns << ',' << t.probe_ns << ','
        << t.summarize_ns << ',' << t.cluster_ns << ',' << t.rewrite_ns << ','
        << t.probe_ns + t.summarize_ns + t.cluster_ns + t.rewrite_ns << ','
        << p.flops_clean << ',' << p.flops_attacked << ',' << (p.recovered ? 1 : 0)
        << '\n';
  }
  return out.str();
}

}  // namespace canonet
