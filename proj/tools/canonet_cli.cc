// canonet: command-line front end. Every subcommand reads and writes the JSON
// formats in canonet/serialize.h. Failures print {"error": {...}} on stderr
// and exit 2; a completed run that fails its check exits 1.

#include <cstring>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "canonet/error.h"
#include "canonet/harness.h"
#include "canonet/motifs.h"
#include "canonet/serialize.h"

using namespace canonet;

namespace {

struct Enums {
  std::string variant;
  std::string camouflage;
};

void add_attack_flags(CLI::App* app, AttackConfig& c, Enums& e) {
  app->add_option("--ratio", c.ratio, "injection ratio in [0,1]");
  app->add_option("--variant", e.variant, "zero|clique|split|mix_opseq|mix_opseq_per_merge_group");
  app->add_option("--opseq-len", c.opseq_len, "primitives per mix sequence");
  app->add_option("--split-p", c.split_p, "split baseline position in [0,1]");
  app->add_option("--camouflage", e.camouflage, "none|perm|scale|perm_and_scale");
  app->add_option("--scale-lo", c.scale_lo);
  app->add_option("--scale-hi", c.scale_hi);
  app->add_option("--seed", c.seed, "attack seed");
}

void resolve_enums(AttackConfig& c, const Enums& e) {
  if (!e.variant.empty()) {
    const auto v = parse_variant(e.variant);
    if (!v) throw Error(ErrorCode::kInvalidArgument, "unknown variant " + e.variant);
    c.variant = *v;
  }
  if (!e.camouflage.empty()) {
    const auto v = parse_camouflage(e.camouflage);
    if (!v) throw Error(ErrorCode::kInvalidArgument, "unknown camouflage " + e.camouflage);
    c.camouflage = *v;
  }
}

void add_recovery_flags(CLI::App* app, RecoveryConfig& r, ProbeConfig& p) {
  app->add_option("--probes", p.count, "probe count T");
  app->add_option("--probe-seed", p.seed);
  app->add_option("--eps", r.eps, "activity threshold");
  app->add_option("--tau", r.tau, "proportionality tolerance");
  app->add_option("--tmin", r.t_min, "minimum active probes for a cluster");
  app->add_option("--gamma-drop", r.gamma_drop);
  app->add_option("--gamma-keep", r.gamma_keep);
  app->add_flag("--sanity,!--no-sanity", r.sanity_check, "forward-equivalence check");
  app->add_option("--sanity-tol", r.sanity_tol);
  app->add_flag("--second-sync-pass", r.second_sync_pass);
}

void add_verify_flags(CLI::App* app, CertificateConfig& c, Tier2Config& t) {
  app->add_option("--perm-tol", c.perm_tol, "Tier-1 residual tolerance");
  app->add_flag("--allow-scaling,!--no-allow-scaling", c.allow_scaling);
  app->add_flag("--include-bias", c.include_bias);
  app->add_option("--lambda", t.lambda, "Tier-2 lambda");
  app->add_option("--delta", t.delta, "Tier-2 slack");
}

void emit(const std::string& path, const Json& j) {
  if (path.empty() || path == "-") {
    std::cout << dump_json(j);
  } else {
    write_json_file(path, j);
  }
}

std::string error_json(const std::string& code, const std::string& message) {
  return dump_json({{"error", {{"code", code}, {"message", message}}}});
}

// --spec must be known before the other flags are bound so that flags given
// on the command line override the file.
std::string find_spec_path(int argc, char** argv) {
  for (int i = 1; i + 1 < argc; ++i) {
    if (std::strcmp(argv[i], "--spec") == 0) return argv[i + 1];
  }
  for (int i = 1; i < argc; ++i) {
    if (std::strncmp(argv[i], "--spec=", 7) == 0) return argv[i] + 7;
  }
  return {};
}

int run(int argc, char** argv) {
  CLI::App app{"canonet: structural obfuscation attacks and canonical recovery"};
  app.require_subcommand(1);

  PipelineSpec spec;
  std::string spec_path = find_spec_path(argc, argv);
  if (!spec_path.empty()) spec = pipeline_spec_from_json(read_json_file(spec_path));
  Enums enums;
  bool no_timings = false;
  std::string model_path, out_path, report_path;

  // gen
  auto* gen = app.add_subcommand("gen", "build a motif graph");
  gen->add_option("--motif", spec.motif)->required();
  gen->add_option("--seed", spec.model_seed);
  gen->add_option("-o,--out", out_path);

  // embed
  std::string key_path;
  NodeId layer = -1;
  auto* emb = app.add_subcommand("embed", "embed a watermark into one layer");
  emb->add_option("--model", model_path)->required();
  emb->add_option("--layer", layer)->required();
  emb->add_option("--bits", spec.watermark_bits);
  emb->add_option("--key-seed", spec.watermark_seed);
  emb->add_option("-o,--out", out_path);
  emb->add_option("--key-out", key_path)->required();

  // attack
  auto* att = app.add_subcommand("attack", "apply a function-preserving obfuscation");
  att->add_option("--model", model_path)->required();
  add_attack_flags(att, spec.attack, enums);
  att->add_option("-o,--out", out_path);
  att->add_option("--report", report_path);
  att->add_flag("--no-timings", no_timings);

  // recover
  auto* rec = app.add_subcommand("recover", "canonicalize an attacked graph");
  rec->add_option("--model", model_path)->required();
  add_recovery_flags(rec, spec.recovery, spec.probes);
  rec->add_option("-o,--out", out_path);
  rec->add_option("--report", report_path);
  rec->add_flag("--no-timings", no_timings);

  // verify
  std::string clean_path, attacked_path, recovered_path;
  auto* ver = app.add_subcommand("verify", "Tier-1 certificate with Tier-2 fallback");
  ver->add_option("--clean", clean_path)->required();
  ver->add_option("--attacked", attacked_path)->required();
  ver->add_option("--recovered", recovered_path)->required();
  ver->add_option("--key", key_path)->required();
  add_verify_flags(ver, spec.certificate, spec.tier2);
  ver->add_option("--report", report_path);

  // pipeline
  std::string wm_layer;
  auto* pipe = app.add_subcommand("pipeline", "gen, embed, attack, recover, verify");
  pipe->add_option("--spec", spec_path, "pipeline spec JSON; flags override it");
  pipe->add_option("--motif", spec.motif);
  pipe->add_option("--model-seed", spec.model_seed);
  pipe->add_option("--watermark-layer", wm_layer);
  pipe->add_option("--bits", spec.watermark_bits);
  pipe->add_option("--key-seed", spec.watermark_seed);
  add_attack_flags(pipe, spec.attack, enums);
  add_recovery_flags(pipe, spec.recovery, spec.probes);
  add_verify_flags(pipe, spec.certificate, spec.tier2);
  pipe->add_flag("--skip-recovery", spec.skip_recovery);
  pipe->add_flag("--no-timings", no_timings);
  pipe->add_option("--out-dir", spec.out_dir);

  // fp-eval
  std::vector<std::string> motifs;
  auto* fpe = app.add_subcommand("fp-eval", "run recovery on clean watermarked motifs");
  fpe->add_option("--spec", spec_path);
  fpe->add_option("--motif", motifs, "repeatable; all motifs by default");
  fpe->add_option("--model-seed", spec.model_seed);
  fpe->add_option("--key-seed", spec.watermark_seed);
  add_recovery_flags(fpe, spec.recovery, spec.probes);
  add_verify_flags(fpe, spec.certificate, spec.tier2);
  fpe->add_option("-o,--out", out_path);

  // bench
  BenchSweep sweep;
  std::vector<std::string> variants;
  std::string csv_path;
  auto* ben = app.add_subcommand("bench", "timing and width-growth sweep");
  ben->add_option("--motif", sweep.motif);
  ben->add_option("--model-seed", sweep.model_seed);
  ben->add_option("--ratios", sweep.ratios)->delimiter(',');
  ben->add_option("--variants", variants)->delimiter(',');
  ben->add_option("--probe-counts", sweep.probe_counts)->delimiter(',');
  ben->add_option("--opseq-len", sweep.attack.opseq_len);
  ben->add_option("--seed", sweep.attack.seed);
  ben->add_option("--csv", csv_path);
  ben->add_option("-o,--out", out_path);
  ben->add_flag("--no-timings", no_timings);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 2;
  }
  resolve_enums(spec.attack, enums);
  if (!wm_layer.empty()) spec.watermark_layer = std::stoi(wm_layer);
  if (no_timings) spec.timings = false;
  apply_seed_override(spec);

  if (gen->parsed()) {
    emit(out_path, graph_to_json(make_motif(spec.motif, spec.model_seed).graph));
    return 0;
  }
  if (emb->parsed()) {
    const Graph g = graph_from_json(read_json_file(model_path));
    const WatermarkKey key = default_key(g, layer, spec.watermark_bits, spec.watermark_seed);
    const EmbedResult r = embed(g, key);
    emit(out_path, graph_to_json(r.graph));
    write_json_file(key_path, key_to_json(key));
    return 0;
  }
  if (att->parsed()) {
    spec.attack.validate();
    const AttackResult r = attack(graph_from_json(read_json_file(model_path)), spec.attack);
    emit(out_path, graph_to_json(r.graph));
    if (!report_path.empty()) emit(report_path, to_json(r.report, spec.timings));
    return 0;
  }
  if (rec->parsed()) {
    const RecoveryResult r =
        recover(graph_from_json(read_json_file(model_path)), spec.recovery, spec.probes);
    emit(out_path, graph_to_json(r.graph));
    if (!report_path.empty()) emit(report_path, to_json(r.report, spec.timings));
    if (!r.report.ok) std::cerr << error_json(r.report.error_code, r.report.error);
    return r.report.ok ? 0 : 1;
  }
  if (ver->parsed()) {
    const Graph clean = graph_from_json(read_json_file(clean_path));
    const Graph attacked = graph_from_json(read_json_file(attacked_path));
    const Graph recovered = graph_from_json(read_json_file(recovered_path));
    const WatermarkKey key = key_from_json(read_json_file(key_path));
    const VerdictReport v =
        verify(clean, attacked, recovered, key, spec.certificate, spec.tier2);
    emit(report_path, to_json(v));
    return v.pass ? 0 : 1;
  }
  if (pipe->parsed()) {
    const PipelineResult r = run_pipeline(spec);
    write_pipeline_artifacts(spec, r);
    std::cout << dump_json(summary_json(spec, r));
    return r.exit_code;
  }
  if (fpe->parsed()) {
    if (motifs.empty()) motifs = motif_names();
    Json reports = Json::array();
    int64_t pruned = 0, params = 0;
    int changed = 0, layers = 0, verified = 0, certified = 0;
    double worst_delta = 0.0, worst_sim = 0.0;
    for (const std::string& name : motifs) {
      PipelineSpec s = spec;
      s.motif = name;
      for (const FalsePositiveReport& r : fp_eval_all_targets(s)) {
        reports.push_back(to_json(r));
        pruned += r.params_pruned;
        params += r.params_before;
        changed += r.layers_changed;
        layers += r.layers_total;
        verified += r.tier1_verified;
        certified += r.tier1_total;
        worst_delta = std::max(worst_delta, r.output_delta);
        worst_sim = std::max(worst_sim, std::abs(r.delta_sim));
      }
    }
    const double p_fpr = static_cast<double>(pruned) / static_cast<double>(params);
    const Json totals = {{"p_fpr", p_fpr},
                         {"l_fp", {changed, layers}},
                         {"max_abs_delta_sim", worst_sim},
                         {"max_output_delta_proxy", worst_delta},
                         {"tier1", {verified, certified}}};
    emit(out_path, {{"reports", reports}, {"totals", totals}});
    return pruned == 0 && changed == 0 && worst_delta == 0.0 && verified == certified ? 0 : 1;
  }
  if (ben->parsed()) {
    if (!variants.empty()) {
      sweep.variants.clear();
      for (const std::string& v : variants) {
        const auto p = parse_variant(v);
        if (!p) throw Error(ErrorCode::kInvalidArgument, "unknown variant " + v);
        sweep.variants.push_back(*p);
      }
    }
    const BenchResult r = run_bench(sweep);
    Json points = Json::array();
    bool ok = true;
    for (const BenchPoint& p : r.points) {
      points.push_back(to_json(p, !no_timings));
      ok = ok && p.recovered && p.trajectories_match;
    }
    emit(out_path, {{"points", points}, {"warnings", r.warnings}});
    if (!csv_path.empty()) write_text_file(csv_path, bench_csv(r));
    for (const std::string& w : r.warnings) std::cerr << "warning: " << w << "\n";
    return ok ? 0 : 1;
  }
  return 2;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const Error& e) {
    std::cerr << error_json(std::string(error_code_name(e.code())), e.what());
  } catch (const std::exception& e) {
    std::cerr << error_json("internal", e.what());
  }
  return 2;
}
