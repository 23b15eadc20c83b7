#ifndef CANONET_VERIFIER_H_
#define CANONET_VERIFIER_H_

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "canonet/graph.h"
#include "canonet/watermark.h"

namespace canonet {

struct CertificateConfig {
  double perm_tol = 1e-3;
  double eta = 1e-12;
  bool allow_scaling = true;
  bool include_bias = false;

  void validate() const;
};

struct LayerCertificate {
  NodeId layer = 0;
  std::vector<int64_t> perm;   // recovered row i matched to reference row perm[i]
  std::vector<double> scale;   // s* per recovered row (1 without scaling)
  double max_rel_err = 0.0;    // infinity when the shapes disagree
  double match_frac = 0.0;
  bool pass = false;
  // Recovered input columns were re-indexed into the reference layout
  // before matching.
  bool input_aligned = false;
  std::string reason;
};

// Rows are output channels; w_rec and w_ref must be rank >= 2 with equal
// row counts and row lengths, otherwise the certificate fails with
// match_frac 0. Residual R_ij = |a_i - s b_j| / (|b_j| + eta) with
// s = max(0, <a_i, b_j> / (|b_j|^2 + eta)) when scaling is allowed, else 1.
// Greedy matching takes the globally smallest remaining R, ties by (i, j).
LayerCertificate certify_layer(const Tensor& w_rec, const Tensor& w_ref,
                               const CertificateConfig& cfg,
                               const Tensor* b_rec = nullptr,
                               const Tensor* b_ref = nullptr);

struct CertificateReport {
  std::vector<LayerCertificate> layers;
  int verified = 0;
  int total = 0;
  bool pass = false;
};

// Certifies every Conv2d/Linear in topological order so each layer's input
// axis can be re-indexed by the matching found upstream (through BN, ReLU,
// pooling, Add, Cat offsets and Flatten), then reports `layers`.
CertificateReport certify_model(const Graph& g_rec, const Graph& g_ref,
                                std::span<const NodeId> layers,
                                const CertificateConfig& cfg);

// The recovered layer's weight in the reference's layout: input columns
// aligned, rows moved to their matched position and divided by s*. Empty
// when the certificate could not match every row.
std::optional<Tensor> aligned_weight(const Graph& g_rec, const Graph& g_ref,
                                     NodeId layer, const CertificateConfig& cfg);

struct Tier2Config {
  double lambda = 0.9;
  double delta = 0.02;

  void validate() const;
};

struct SimilarityTriplet {
  double c = 0.0;
  double a = 0.0;
  double r = 0.0;
};

// Delta = max(0, c - a); PASS iff r - a >= lambda * Delta - delta.
bool tier2_pass(const SimilarityTriplet& trip, const Tier2Config& cfg);

struct VerdictReport {
  SimilarityTriplet raw;        // extractor output on the three graphs
  bool attacked_compatible = true;
  bool recovered_compatible = true;
  CertificateReport tier1;
  // Similarity of the recovered layer after alignment to the clean layout;
  // what the owner records once Tier-1 holds.
  std::optional<double> aligned_similarity;
  SimilarityTriplet reported;   // r is the aligned similarity on Tier-1 pass
  bool tier2 = false;
  std::string tier;             // "tier1" or "tier2"
  bool pass = false;
};

VerdictReport verify(const Graph& g_clean, const Graph& g_attacked,
                     const Graph& g_recovered, const WatermarkKey& key,
                     const CertificateConfig& ccfg, const Tier2Config& t2cfg);

}  // namespace canonet

#endif  // CANONET_VERIFIER_H_
