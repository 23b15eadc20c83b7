#include "canonet/serialize.h"

#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include "canonet/error.h"

namespace canonet {

namespace {

[[noreturn]] void bad(const std::string& what) {
  throw Error(ErrorCode::kInvalidArgument, "json: " + what);
}

// Typed field access that rejects keys the caller did not ask about.
class Fields {
 public:
  Fields(const Json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j_.is_object()) bad(where_ + " must be an object");
  }
  ~Fields() noexcept(false) {
    if (std::uncaught_exceptions() > 0) return;
    for (const auto& [k, v] : j_.items()) {
      if (!seen_.count(k)) bad("unknown field '" + k + "' in " + where_);
    }
  }

  bool has(const std::string& k) {
    seen_.insert(k);
    return j_.contains(k);
  }
  const Json& at(const std::string& k) {
    if (!has(k)) bad("missing field '" + k + "' in " + where_);
    return j_.at(k);
  }
  template <typename T>
  void opt(const std::string& k, T& out) {
    if (!has(k)) return;
    try {
      out = j_.at(k).get<T>();
    } catch (const nlohmann::json::exception&) {
      bad("field '" + k + "' in " + where_ + " has the wrong type");
    }
  }
  template <typename T>
  T req(const std::string& k) {
    at(k);
    T out{};
    opt(k, out);
    return out;
  }

 private:
  const Json& j_;
  std::string where_;
  std::set<std::string> seen_;
};

void nest(const Tensor& t, size_t axis, int64_t& pos, Json& out) {
  out = Json::array();
  const int64_t n = t.dim(static_cast<int64_t>(axis));
  for (int64_t i = 0; i < n; ++i) {
    if (axis + 1 == t.shape().size()) {
      out.push_back(t[pos++]);
    } else {
      Json child;
      nest(t, axis + 1, pos, child);
      out.push_back(std::move(child));
    }
  }
}

void unnest(const Json& j, size_t axis, Shape& shape, std::vector<double>& data) {
  if (!j.is_array()) {
    if (axis != shape.size()) bad("ragged tensor");
    if (!j.is_number()) bad("tensor entries must be numbers");
    data.push_back(j.get<double>());
    return;
  }
  if (axis == shape.size()) {
    if (!data.empty()) bad("ragged tensor");
    shape.push_back(static_cast<int64_t>(j.size()));
  } else if (shape[axis] != static_cast<int64_t>(j.size())) {
    bad("ragged tensor");
  }
  for (const Json& c : j) unnest(c, axis + 1, shape, data);
}

Json ids(const std::vector<NodeId>& v) { return Json(v); }

// Turns library type errors into our own.
template <typename F>
auto guarded(F f) {
  try {
    return f();
  } catch (const nlohmann::json::exception& e) {
    bad(e.what());
  }
}

}  // namespace

Json tensor_to_json(const Tensor& t) {
  if (!t.all_finite()) bad("non-finite tensor entry");
  if (t.rank() == 0) bad("rank-0 tensor");
  Json out;
  int64_t pos = 0;
  nest(t, 0, pos, out);
  return out;
}

Tensor tensor_from_json(const Json& j) {
  if (!j.is_array()) bad("tensor must be a nested array");
  Shape shape;
  std::vector<double> data;
  unnest(j, 0, shape, data);
  if (static_cast<int64_t>(data.size()) != shape_numel(shape)) bad("ragged tensor");
  return Tensor(std::move(shape), std::move(data));
}

Json graph_to_json(const Graph& g) {
  Json nodes = Json::array();
  for (const Node& n : g.nodes()) {
    Json params = Json::object();
    switch (n.kind) {
      case NodeKind::kInput:
        params["shape"] = n.input().shape;
        break;
      case NodeKind::kConv2d: {
        const ConvParams& c = n.conv();
        params = {{"weight", tensor_to_json(c.weight)},
                  {"bias", tensor_to_json(c.bias)},
                  {"groups", c.groups},
                  {"stride", c.stride},
                  {"padding", c.padding}};
        break;
      }
      case NodeKind::kLinear:
        params = {{"weight", tensor_to_json(n.weight())},
                  {"bias", tensor_to_json(n.bias())}};
        break;
      case NodeKind::kBatchNorm: {
        const BatchNormParams& b = n.bn();
        params = {{"gamma", tensor_to_json(b.gamma)},
                  {"beta", tensor_to_json(b.beta)},
                  {"mean", tensor_to_json(b.mean)},
                  {"var", tensor_to_json(b.var)},
                  {"eps", b.eps}};
        break;
      }
      default:
        break;
    }
    nodes.push_back({{"id", n.id},
                     {"kind", std::string(node_kind_name(n.kind))},
                     {"params", std::move(params)}});
  }
  Json edges = Json::array();
  for (const Edge& e : g.edges()) edges.push_back({e.src, e.dst, e.port});
  return {{"nodes", std::move(nodes)},
          {"edges", std::move(edges)},
          {"meta", {{"seed", g.meta().seed}, {"motif", g.meta().motif}}}};
}

Graph graph_from_json(const Json& j) {
  return guarded([&] {
    GraphSpec spec;
    {
      Fields top(j, "graph");
      for (const Json& jn : top.at("nodes")) {
        Fields f(jn, "node");
        Node n;
        n.id = f.req<NodeId>("id");
        const auto kind = parse_node_kind(f.req<std::string>("kind"));
        if (!kind) bad("unknown node kind");
        n.kind = *kind;
        Fields p(f.at("params"), "params of node " + std::to_string(n.id));
        switch (n.kind) {
          case NodeKind::kInput:
            n.params = InputParams{p.req<Shape>("shape")};
            break;
          case NodeKind::kConv2d: {
            ConvParams c;
            c.weight = tensor_from_json(p.at("weight"));
            c.bias = tensor_from_json(p.at("bias"));
            p.opt("groups", c.groups);
            p.opt("stride", c.stride);
            p.opt("padding", c.padding);
            n.params = std::move(c);
            break;
          }
          case NodeKind::kLinear:
            n.params = LinearParams{tensor_from_json(p.at("weight")),
                                    tensor_from_json(p.at("bias"))};
            break;
          case NodeKind::kBatchNorm: {
            BatchNormParams b;
            b.gamma = tensor_from_json(p.at("gamma"));
            b.beta = tensor_from_json(p.at("beta"));
            b.mean = tensor_from_json(p.at("mean"));
            b.var = tensor_from_json(p.at("var"));
            p.opt("eps", b.eps);
            n.params = std::move(b);
            break;
          }
          default:
            break;
        }
        spec.nodes.push_back(std::move(n));
      }
      for (const Json& je : top.at("edges")) {
        if (!je.is_array() || je.size() != 3) bad("edge must be [src, dst, port]");
        spec.edges.push_back({je[0].get<NodeId>(), je[1].get<NodeId>(), je[2].get<int>()});
      }
      if (top.has("meta")) {
        Fields m(j.at("meta"), "meta");
        m.opt("seed", spec.meta.seed);
        m.opt("motif", spec.meta.motif);
      }
    }
    return Graph::build(std::move(spec));
  });
}

Json transform_to_json(const ChannelTransform& m) {
  Json entries = Json::array();
  for (const TransformEntry& e : m.entries()) entries.push_back({e.row, e.col, e.value});
  return {{"c_before", m.c_before()}, {"c_after", m.c_after()}, {"entries", entries}};
}

ChannelTransform transform_from_json(const Json& j) {
  return guarded([&] {
    Fields f(j, "transform");
    std::vector<TransformEntry> entries;
    for (const Json& e : f.at("entries")) {
      if (!e.is_array() || e.size() != 3) bad("transform entry must be [r, c, v]");
      entries.push_back({e[0].get<int64_t>(), e[1].get<int64_t>(), e[2].get<double>()});
    }
    return ChannelTransform(f.req<int64_t>("c_before"), f.req<int64_t>("c_after"),
                            std::move(entries));
  });
}

Json key_to_json(const WatermarkKey& key) {
  Json bits = Json::array();
  for (uint8_t b : key.bits) bits.push_back(static_cast<int>(b));
  return {{"seed", key.seed},
          {"layer", key.layer},
          {"n", key.n},
          {"m", key.m},
          {"bits", bits},
          {"note", "projection regenerated from seed, not serialized"}};
}

WatermarkKey key_from_json(const Json& j) {
  return guarded([&] {
    Fields f(j, "key");
    WatermarkKey key = make_key(f.req<NodeId>("layer"), f.req<int>("n"),
                                f.req<int64_t>("m"), f.req<uint64_t>("seed"));
    if (f.has("bits")) {
      const auto bits = j.at("bits").get<std::vector<int>>();
      if (bits.size() != key.bits.size() ||
          !std::equal(bits.begin(), bits.end(), key.bits.begin())) {
        bad("key bits do not match the bits regenerated from the seed");
      }
    }
    f.has("note");
    return key;
  });
}

Json to_json(const AttackConfig& c) {
  return {{"ratio", c.ratio},
          {"variant", std::string(variant_name(c.variant))},
          {"opseq_len", c.opseq_len},
          {"split_p", c.split_p},
          {"camouflage", std::string(camouflage_name(c.camouflage))},
          {"scale_lo", c.scale_lo},
          {"scale_hi", c.scale_hi},
          {"seed", c.seed},
          {"interior_placement", c.interior_placement}};
}

AttackConfig attack_config_from_json(const Json& j) {
  return guarded([&] {
    AttackConfig c;
    {
      Fields f(j, "attack config");
      f.opt("ratio", c.ratio);
      if (f.has("variant")) {
        const auto v = parse_variant(j.at("variant").get<std::string>());
        if (!v) bad("unknown variant");
        c.variant = *v;
      }
      f.opt("opseq_len", c.opseq_len);
      f.opt("split_p", c.split_p);
      if (f.has("camouflage")) {
        const auto v = parse_camouflage(j.at("camouflage").get<std::string>());
        if (!v) bad("unknown camouflage");
        c.camouflage = *v;
      }
      f.opt("scale_lo", c.scale_lo);
      f.opt("scale_hi", c.scale_hi);
      f.opt("seed", c.seed);
      f.opt("interior_placement", c.interior_placement);
    }
    c.validate();
    return c;
  });
}

Json to_json(const RecoveryConfig& c) {
  Json j = {{"eps", c.eps},
            {"tau", c.tau},
            {"t_min", c.t_min},
            {"gamma_drop", c.gamma_drop},
            {"gamma_keep", c.gamma_keep},
            {"sanity_check", c.sanity_check},
            {"sanity_tol", c.sanity_tol},
            {"weight_checks", c.weight_checks},
            {"second_sync_pass", c.second_sync_pass},
            {"active_ratio_gate", nullptr},
            {"fault_skip_consumer", nullptr}};
  if (c.active_ratio_gate) {
    j["active_ratio_gate"] = {c.active_ratio_gate->first, c.active_ratio_gate->second};
  }
  if (c.fault_skip_consumer) j["fault_skip_consumer"] = *c.fault_skip_consumer;
  return j;
}

RecoveryConfig recovery_config_from_json(const Json& j) {
  return guarded([&] {
    RecoveryConfig c;
    {
      Fields f(j, "recovery config");
      f.opt("eps", c.eps);
      f.opt("tau", c.tau);
      f.opt("t_min", c.t_min);
      f.opt("gamma_drop", c.gamma_drop);
      f.opt("gamma_keep", c.gamma_keep);
      f.opt("sanity_check", c.sanity_check);
      f.opt("sanity_tol", c.sanity_tol);
      f.opt("weight_checks", c.weight_checks);
      f.opt("second_sync_pass", c.second_sync_pass);
      if (f.has("active_ratio_gate") && !j.at("active_ratio_gate").is_null()) {
        const auto g = j.at("active_ratio_gate").get<std::vector<double>>();
        if (g.size() != 2) bad("active_ratio_gate must be [lo, hi]");
        c.active_ratio_gate = std::make_pair(g[0], g[1]);
      }
      if (f.has("fault_skip_consumer") && !j.at("fault_skip_consumer").is_null()) {
        c.fault_skip_consumer = j.at("fault_skip_consumer").get<NodeId>();
      }
    }
    c.validate();
    return c;
  });
}

Json to_json(const ProbeConfig& c) {
  return {{"count", c.count}, {"batch_hint", c.batch_hint}, {"lo", c.lo},
          {"hi", c.hi}, {"seed", c.seed}};
}

ProbeConfig probe_config_from_json(const Json& j) {
  ProbeConfig c;
  {
    Fields f(j, "probe config");
    f.opt("count", c.count);
    f.opt("batch_hint", c.batch_hint);
    f.opt("lo", c.lo);
    f.opt("hi", c.hi);
    f.opt("seed", c.seed);
  }
  c.validate();
  return c;
}

Json to_json(const CertificateConfig& c) {
  return {{"perm_tol", c.perm_tol}, {"eta", c.eta},
          {"allow_scaling", c.allow_scaling}, {"include_bias", c.include_bias}};
}

CertificateConfig certificate_config_from_json(const Json& j) {
  CertificateConfig c;
  {
    Fields f(j, "certificate config");
    f.opt("perm_tol", c.perm_tol);
    f.opt("eta", c.eta);
    f.opt("allow_scaling", c.allow_scaling);
    f.opt("include_bias", c.include_bias);
  }
  c.validate();
  return c;
}

Json to_json(const Tier2Config& c) {
  return {{"lambda", c.lambda}, {"delta", c.delta}};
}

Tier2Config tier2_config_from_json(const Json& j) {
  Tier2Config c;
  {
    Fields f(j, "tier2 config");
    f.opt("lambda", c.lambda);
    f.opt("delta", c.delta);
  }
  c.validate();
  return c;
}

Json to_json(const AttackReport& r, bool timings) {
  Json groups = Json::array();
  for (const GroupAttackRecord& g : r.groups) {
    Json steps = Json::array();
    for (const StepRecord& s : g.steps) {
      steps.push_back({{"primitive", std::string(primitive_name(s.primitive))},
                       {"width_before", s.width_before},
                       {"injected", s.injected},
                       {"width_after", s.width_after},
                       {"promoted", s.promoted},
                       {"baseline", s.baseline}});
    }
    const CamouflageRecord& c = g.camouflage;
    groups.push_back({{"producers", ids(g.producers)},
                      {"width_before", g.width_before},
                      {"width_after", g.width_after},
                      {"steps", steps},
                      {"camouflage", {{"perm", c.perm},
                                      {"scales", c.scales},
                                      {"scale_skipped", ids(c.scale_skipped)},
                                      {"note", c.note}}},
                      {"transform", transform_to_json(g.transform)}});
  }
  Json seq = Json::array();
  for (Primitive p : r.global_sequence) seq.push_back(std::string(primitive_name(p)));
  Json j = {{"config", to_json(r.config)},
            {"global_sequence", seq},
            {"groups", groups},
            {"skipped", r.skipped},
            {"warnings", r.warnings},
            {"drift", r.drift}};
  if (timings) {
    j["timings_ns"] = {{"plan", r.timings.plan_ns},
                       {"inject", r.timings.inject_ns},
                       {"camouflage", r.timings.camouflage_ns},
                       {"drift", r.timings.drift_ns}};
  }
  return j;
}

Json to_json(const RecoveryReport& r, bool timings) {
  Json groups = Json::array();
  for (const GroupRecoveryRecord& g : r.groups) {
    Json clusters = Json::array();
    for (const RedundancyCluster& c : g.clusters) {
      clusters.push_back({{"members", c.members},
                          {"representative", c.representative},
                          {"alpha", c.alpha},
                          {"zero", c.zero},
                          {"decision", std::string(decision_name(c.decision))},
                          {"merged_norm", c.merged_norm},
                          {"note", c.note}});
    }
    groups.push_back({{"producers", ids(g.producers)},
                      {"width_before", g.width_before},
                      {"width_after", g.width_after},
                      {"clusters", clusters},
                      {"transform", transform_to_json(g.transform)},
                      {"notes", g.notes}});
  }
  Json cats = Json::array();
  for (const CatRecord& c : r.cats) {
    cats.push_back({{"cat", c.cat}, {"transform", transform_to_json(c.transform)}});
  }
  Json j = {{"config", to_json(r.config)},
            {"probes", to_json(r.probes)},
            {"groups", groups},
            {"cats", cats},
            {"skipped", r.skipped},
            {"params_before", r.params_before},
            {"params_after", r.params_after},
            {"layers_changed", r.layers_changed},
            {"layers_total", r.layers_total},
            {"sanity_ran", r.sanity_ran},
            {"sanity_delta", r.sanity_delta},
            {"ok", r.ok},
            {"error_code", r.error_code},
            {"error", r.error}};
  if (timings) {
    j["timings_ns"] = {{"probe", r.timings.probe_ns},
                       {"summarize", r.timings.summarize_ns},
                       {"cluster", r.timings.cluster_ns},
                       {"rewrite", r.timings.rewrite_ns},
                       {"sanity", r.timings.sanity_ns}};
  }
  return j;
}

Json to_json(const LayerCertificate& c) {
  return {{"layer", c.layer},
          {"perm", c.perm},
          {"scale", c.scale},
          {"max_rel_err", c.max_rel_err},  // infinity is written as null
          {"match_frac", c.match_frac},
          {"pass", c.pass},
          {"input_aligned", c.input_aligned},
          {"reason", c.reason}};
}

Json to_json(const CertificateReport& r) {
  Json layers = Json::array();
  for (const LayerCertificate& c : r.layers) layers.push_back(to_json(c));
  return {{"layers", layers}, {"verified", r.verified}, {"total", r.total},
          {"pass", r.pass}};
}

Json to_json(const VerdictReport& r) {
  auto trip = [](const SimilarityTriplet& t) {
    return Json{{"c", t.c}, {"a", t.a}, {"r", t.r}};
  };
  Json j = {{"raw", trip(r.raw)},
            {"attacked_compatible", r.attacked_compatible},
            {"recovered_compatible", r.recovered_compatible},
            {"tier1", to_json(r.tier1)},
            {"aligned_similarity", nullptr},
            {"reported", trip(r.reported)},
            {"tier2", r.tier2},
            {"tier", r.tier},
            {"pass", r.pass}};
  if (r.aligned_similarity) j["aligned_similarity"] = *r.aligned_similarity;
  return j;
}

std::string dump_json(const Json& j) { return j.dump(2) + "\n"; }

Json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::kIo, "cannot open " + path);
  try {
    return Json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw Error(ErrorCode::kIo, path + ": " + e.what());
  }
}

void write_text_file(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::kIo, "cannot write " + path);
  out << text;
  if (!out) throw Error(ErrorCode::kIo, "write failed: " + path);
}

void write_json_file(const std::string& path, const Json& j) {
  write_text_file(path, dump_json(j));
}

}  // namespace canonet
