#include "canonet/verifier.h"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>
#include <tuple>

#include "canonet/error.h"

namespace canonet {

namespace {

struct Alignment {
  std::vector<int64_t> ref;    // recovered position -> reference position
  std::vector<double> ratio;   // y_rec[i] = ratio[i] * y_ref[ref[i]]
};

std::vector<std::vector<double>> rows_of(const Tensor& w, const Tensor* bias) {
  const int64_t n = w.dim(0);
  const int64_t len = w.numel() / n;
  std::vector<std::vector<double>> rows(n);
  for (int64_t i = 0; i < n; ++i) {
    rows[i].assign(w.data().begin() + i * len, w.data().begin() + (i + 1) * len);
    if (bias) rows[i].push_back((*bias)[i]);
  }
  return rows;
}

double bn_gain(const BatchNormParams& bn, int64_t i) {
  return bn.gamma[i] / std::sqrt(bn.var[i] + bn.eps);
}

class Certifier {
 public:
  Certifier(const Graph& rec, const Graph& ref, const CertificateConfig& cfg)
      : rec_(rec), ref_(ref), cfg_(cfg) {
    for (NodeId id : ref_.topo_order()) {
      if (!ref_.node(id).is_linear_op() || !rec_.contains(id) ||
          rec_.node(id).kind != ref_.node(id).kind) {
        continue;
      }
      bool aligned = false;
      Tensor w = input_aligned_weight(id, &aligned);
      const Node& a = rec_.node(id);
      const Node& b = ref_.node(id);
      LayerCertificate cert = certify_layer(w, b.weight(), cfg_, &a.bias(), &b.bias());
      cert.layer = id;
      cert.input_aligned = aligned;
      weights_[id] = std::move(w);
      certs_[id] = std::move(cert);
    }
  }

  const LayerCertificate* cert(NodeId id) const {
    auto it = certs_.find(id);
    return it == certs_.end() ? nullptr : &it->second;
  }
  const Tensor& weight(NodeId id) const { return weights_.at(id); }

 private:
  // Recovered weight with its input axis moved into the reference layout.
  Tensor input_aligned_weight(NodeId id, bool* aligned) {
    const Node& n = rec_.node(id);
    const Tensor& w = n.weight();
    const Tensor& w_ref = ref_.node(id).weight();
    if (n.kind == NodeKind::kConv2d && n.conv().groups != 1) return w;
    const std::optional<Alignment> in = align(rec_.inputs_of(id)[0]);
    if (!in || w.rank() != w_ref.rank() || w.dim(1) != w_ref.dim(1) ||
        static_cast<int64_t>(in->ref.size()) != w.dim(1)) {
      return w;
    }
    const int64_t rows = w.dim(0), cols = w.dim(1);
    const int64_t taps = w.numel() / (rows * cols);
    Tensor out(w.shape());
    bool moved = false;
    for (int64_t c = 0; c < cols; ++c) {
      const int64_t dst = in->ref[c];
      moved = moved || dst != c || in->ratio[c] != 1.0;
      for (int64_t o = 0; o < rows; ++o) {
        for (int64_t t = 0; t < taps; ++t) {
          out[(o * cols + dst) * taps + t] =
              w[(o * cols + c) * taps + t] * in->ratio[c];
        }
      }
    }
    *aligned = moved;
    return out;
  }

  std::optional<Alignment> align(NodeId id) {
    auto it = memo_.find(id);
    if (it != memo_.end()) return it->second;
    std::optional<Alignment> a = compute(id);
    if (a) {
      // Must be a bijection onto the reference channels.
      const Shape& s = ref_.shape_of(id);
      std::vector<bool> hit(s[0], false);
      bool ok = static_cast<int64_t>(a->ref.size()) == s[0];
      for (size_t i = 0; ok && i < a->ref.size(); ++i) {
        const int64_t r = a->ref[i];
        ok = r >= 0 && r < s[0] && !hit[r] && std::isfinite(a->ratio[i]) &&
             a->ratio[i] > 0.0;
        if (ok) hit[r] = true;
      }
      if (!ok) a.reset();
    }
    memo_[id] = a;
    return a;
  }

  std::optional<Alignment> compute(NodeId id) {
    if (!rec_.contains(id) || !ref_.contains(id) ||
        rec_.node(id).kind != ref_.node(id).kind) {
      return std::nullopt;
    }
    const Node& n = rec_.node(id);
    switch (n.kind) {
      case NodeKind::kInput: {
        Alignment a;
        a.ref.resize(rec_.shape_of(id)[0]);
        std::iota(a.ref.begin(), a.ref.end(), 0);
        a.ratio.assign(a.ref.size(), 1.0);
        return a;
      }
      case NodeKind::kConv2d:
      case NodeKind::kLinear: {
        const LayerCertificate* c = cert(id);
        if (!c || c->perm.empty()) return std::nullopt;
        return Alignment{c->perm, c->scale};
      }
      case NodeKind::kBatchNorm: {
        std::optional<Alignment> a = align(rec_.inputs_of(id)[0]);
        if (!a) return std::nullopt;
        const BatchNormParams& br = n.bn();
        const BatchNormParams& bf = ref_.node(id).bn();
        if (br.gamma.numel() != static_cast<int64_t>(a->ref.size())) {
          return std::nullopt;
        }
        for (size_t i = 0; i < a->ref.size(); ++i) {
          if (a->ref[i] >= bf.gamma.numel()) return std::nullopt;
          a->ratio[i] *= bn_gain(br, i) / bn_gain(bf, a->ref[i]);
        }
        return a;
      }
      case NodeKind::kReLU:
      case NodeKind::kAvgPoolGlobal:
      case NodeKind::kOutput:
        return align(rec_.inputs_of(id)[0]);
      case NodeKind::kAdd: {
        std::optional<Alignment> a = align(rec_.inputs_of(id)[0]);
        return a ? a : align(rec_.inputs_of(id)[1]);
      }
      case NodeKind::kCat: {
        Alignment out;
        int64_t ref_offset = 0;
        const auto& ins = rec_.inputs_of(id);
        const auto& ref_ins = ref_.inputs_of(id);
        if (ins != ref_ins) return std::nullopt;
        for (NodeId in : ins) {
          std::optional<Alignment> a = align(in);
          if (!a) return std::nullopt;
          for (size_t i = 0; i < a->ref.size(); ++i) {
            out.ref.push_back(a->ref[i] + ref_offset);
            out.ratio.push_back(a->ratio[i]);
          }
          ref_offset += ref_.shape_of(in)[0];
        }
        return out;
      }
      case NodeKind::kFlatten: {
        const NodeId in = rec_.inputs_of(id)[0];
        std::optional<Alignment> a = align(in);
        if (!a) return std::nullopt;
        const Shape& s = rec_.shape_of(in);
        const int64_t hw = s.size() == 3 ? s[1] * s[2] : 1;
        Alignment out;
        for (size_t c = 0; c < a->ref.size(); ++c) {
          for (int64_t p = 0; p < hw; ++p) {
            out.ref.push_back(a->ref[c] * hw + p);
            out.ratio.push_back(a->ratio[c]);
          }
        }
        return out;
      }
    }
    return std::nullopt;
  }

  const Graph& rec_;
  const Graph& ref_;
  const CertificateConfig& cfg_;
  std::map<NodeId, std::optional<Alignment>> memo_;
  std::map<NodeId, LayerCertificate> certs_;
  std::map<NodeId, Tensor> weights_;
};

}  // namespace

void CertificateConfig::validate() const {
  if (!(perm_tol > 0.0)) throw Error(ErrorCode::kInvalidArgument, "perm_tol must be > 0");
  if (!(eta > 0.0)) throw Error(ErrorCode::kInvalidArgument, "eta must be > 0");
}

LayerCertificate certify_layer(const Tensor& w_rec, const Tensor& w_ref,
                               const CertificateConfig& cfg, const Tensor* b_rec,
                               const Tensor* b_ref) {
  cfg.validate();
  if (!cfg.include_bias) b_rec = b_ref = nullptr;
  if (w_rec.empty() || w_ref.empty() || w_rec.rank() < 2 || w_ref.rank() < 2) {
    throw Error(ErrorCode::kInvalidArgument, "certify_layer: empty layer");
  }
  LayerCertificate cert;
  const int64_t n = w_rec.dim(0);
  if (n != w_ref.dim(0) || w_rec.numel() / n != w_ref.numel() / w_ref.dim(0) ||
      (b_rec != nullptr) != (b_ref != nullptr)) {
    cert.max_rel_err = std::numeric_limits<double>::infinity();
    cert.reason = "shape mismatch: " + shape_to_string(w_rec.shape()) + " vs " +
                  shape_to_string(w_ref.shape());
    return cert;
  }
  const auto a = rows_of(w_rec, b_rec);
  const auto b = rows_of(w_ref, b_ref);
  std::vector<double> ref_norm(n);
  for (int64_t j = 0; j < n; ++j) {
    ref_norm[j] = std::sqrt(std::inner_product(b[j].begin(), b[j].end(),
                                               b[j].begin(), 0.0));
  }
  std::vector<std::tuple<double, int64_t, int64_t, double>> pairs;
  pairs.reserve(n * n);
  for (int64_t i = 0; i < n; ++i) {
    for (int64_t j = 0; j < n; ++j) {
      double s = 1.0;
      if (cfg.allow_scaling) {
        const double ab =
            std::inner_product(a[i].begin(), a[i].end(), b[j].begin(), 0.0);
        s = std::max(0.0, ab / (ref_norm[j] * ref_norm[j] + cfg.eta));
      }
      double r2 = 0.0;
      for (size_t k = 0; k < a[i].size(); ++k) {
        const double e = a[i][k] - s * b[j][k];
        r2 += e * e;
      }
      pairs.emplace_back(std::sqrt(r2) / (ref_norm[j] + cfg.eta), i, j, s);
    }
  }
  std::sort(pairs.begin(), pairs.end());
  cert.perm.assign(n, -1);
  cert.scale.assign(n, 0.0);
  std::vector<bool> used(n, false);
  int64_t within = 0;
  for (const auto& [r, i, j, s] : pairs) {
    if (cert.perm[i] >= 0 || used[j]) continue;
    cert.perm[i] = j;
    cert.scale[i] = s;
    used[j] = true;
    cert.max_rel_err = std::max(cert.max_rel_err, r);
    within += r <= cfg.perm_tol;
  }
  cert.match_frac = static_cast<double>(within) / static_cast<double>(n);
  cert.pass = within == n && cert.max_rel_err <= cfg.perm_tol;
  if (!cert.pass) cert.reason = "worst matched residual above tolerance";
  return cert;
}

CertificateReport certify_model(const Graph& g_rec, const Graph& g_ref,
                                std::span<const NodeId> layers,
                                const CertificateConfig& cfg) {
  cfg.validate();
  for (NodeId id : layers) {
    for (const Graph* g : {&g_rec, &g_ref}) {
      if (!g->contains(id) || !g->node(id).is_linear_op()) {
        throw Error(ErrorCode::kInvalidArgument,
                    "layer " + std::to_string(id) + " missing from a graph");
      }
    }
  }
  const Certifier engine(g_rec, g_ref, cfg);
  CertificateReport report;
  for (NodeId id : layers) {
    const LayerCertificate* c = engine.cert(id);
    report.layers.push_back(*c);
    report.verified += c->pass;
  }
  report.total = static_cast<int>(layers.size());
  report.pass = report.verified == report.total;
  return report;
}

std::optional<Tensor> aligned_weight(const Graph& g_rec, const Graph& g_ref,
                                     NodeId layer, const CertificateConfig& cfg) {
  const Certifier engine(g_rec, g_ref, cfg);
  const LayerCertificate* c = engine.cert(layer);
  if (!c || c->perm.empty()) return std::nullopt;
  const Tensor& w = engine.weight(layer);
  const int64_t n = w.dim(0), len = w.numel() / n;
  Tensor out(w.shape());
  for (int64_t i = 0; i < n; ++i) {
    if (!(c->scale[i] > 0.0)) return std::nullopt;
    for (int64_t k = 0; k < len; ++k) {
      out[c->perm[i] * len + k] = w[i * len + k] / c->scale[i];
    }
  }
  return out;
}

void Tier2Config::validate() const {
  if (!(lambda > 0.0 && lambda <= 1.0)) {
    throw Error(ErrorCode::kInvalidArgument, "lambda must lie in (0,1]");
  }
  if (!(delta >= 0.0)) throw Error(ErrorCode::kInvalidArgument, "delta must be >= 0");
}

bool tier2_pass(const SimilarityTriplet& trip, const Tier2Config& cfg) {
  cfg.validate();
  for (double v : {trip.c, trip.a, trip.r}) {
    if (!(v >= 0.0 && v <= 1.0)) {
      throw Error(ErrorCode::kInvalidArgument, "similarities must lie in [0,1]");
    }
  }
  const double drop = std::max(0.0, trip.c - trip.a);
  return trip.r - trip.a >= cfg.lambda * drop - cfg.delta;
}

VerdictReport verify(const Graph& g_clean, const Graph& g_attacked,
                     const Graph& g_recovered, const WatermarkKey& key,
                     const CertificateConfig& ccfg, const Tier2Config& t2cfg) {
  VerdictReport v;
  const Extraction c = extract_similarity(g_clean, key);
  const Extraction a = extract_similarity(g_attacked, key);
  const Extraction r = extract_similarity(g_recovered, key);
  v.raw = {c.similarity, a.similarity, r.similarity};
  v.attacked_compatible = a.compatible;
  v.recovered_compatible = r.compatible;
  const NodeId layers[] = {key.layer};
  v.tier1 = certify_model(g_recovered, g_clean, layers, ccfg);
  v.reported = v.raw;
  if (v.tier1.pass) {
    if (std::optional<Tensor> w = aligned_weight(g_recovered, g_clean, key.layer, ccfg)) {
      v.aligned_similarity = extract_from_weights(w->data(), key).similarity;
      v.reported.r = *v.aligned_similarity;
    }
  }
  v.tier2 = tier2_pass(v.raw, t2cfg);
  v.pass = v.tier1.pass || v.tier2;
  v.tier = v.tier1.pass ? "tier1" : "tier2";
  return v;
}

}  // namespace canonet
