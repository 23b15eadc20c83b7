#include "canonet/relayout.h"

#include <algorithm>
#include <cmath>
#include <set>

#include "canonet/error.h"

namespace canonet {

int64_t row_length(const Node& producer) {
  const Tensor& w = producer.weight();
  return w.numel() / w.dim(0);
}

void relayout_producer(Graph& g, const ProducerEdge& edge,
                       std::span<const ChannelSource> sources) {
  Node& p = g.mutable_node(edge.producer);
  const int64_t len = row_length(p);
  const int64_t c_old = p.weight().dim(0);
  const int64_t c_new = static_cast<int64_t>(sources.size());
  Shape wshape = p.weight().shape();
  wshape[0] = c_new;
  Tensor w(wshape);
  Tensor b({c_new});
  for (int64_t j = 0; j < c_new; ++j) {
    const ChannelSource& s = sources[j];
    double* dst = &w.mutable_data()[j * len];
    switch (s.kind) {
      case ChannelSource::Kind::kCopy: {
        if (s.src < 0 || s.src >= c_old || !(s.scale > 0.0)) {
          throw Error(ErrorCode::kInvalidArgument,
                      "relayout: bad copy source on node " +
                          std::to_string(edge.producer));
        }
        const double* src = &p.weight().data()[s.src * len];
        for (int64_t k = 0; k < len; ++k) dst[k] = s.scale * src[k];
        b[j] = s.scale * p.bias()[s.src];
        break;
      }
      case ChannelSource::Kind::kZero:
        break;
      case ChannelSource::Kind::kExplicit:
        if (static_cast<int64_t>(s.weight.size()) != len) {
          throw Error(ErrorCode::kShapeMismatch,
                      "relayout: explicit row has wrong length");
        }
        std::copy(s.weight.begin(), s.weight.end(), dst);
        b[j] = s.bias;
        break;
    }
  }
  p.weight() = std::move(w);
  p.bias() = std::move(b);

  if (!edge.batchnorm) return;
  BatchNormParams& bn = g.mutable_node(*edge.batchnorm).bn();
  BatchNormParams out;
  out.eps = bn.eps;
  out.gamma = Tensor({c_new});
  out.beta = Tensor({c_new});
  out.mean = Tensor({c_new});
  out.var = Tensor({c_new});
  for (int64_t j = 0; j < c_new; ++j) {
    const ChannelSource& s = sources[j];
    if (s.kind != ChannelSource::Kind::kCopy) {
      out.gamma[j] = 1.0;
      out.var[j] = 1.0;
      continue;
    }
    const int64_t i = s.src;
    const double sv = s.scale * s.scale * bn.var[i];
    out.mean[j] = s.scale * bn.mean[i];
    out.var[j] = sv;
    out.beta[j] = bn.beta[i];
    out.gamma[j] = s.scale == 1.0
                       ? bn.gamma[i]
                       : bn.gamma[i] * std::sqrt(sv + bn.eps) /
                             (s.scale * std::sqrt(bn.var[i] + bn.eps));
  }
  bn = std::move(out);
}

std::vector<ConsumerRef> group_consumers(const std::vector<ProducerEdge>& edges,
                                         std::span<const NodeId> group) {
  std::vector<ConsumerRef> out;
  std::set<std::pair<NodeId, int64_t>> seen;
  for (NodeId id : group) {
    for (const ConsumerRef& c : find_producer(edges, id).consumers) {
      if (seen.emplace(c.consumer, c.path.channel_offset).second) {
        out.push_back(c);
      }
    }
  }
  return out;
}

void rewrite_consumers(Graph& g, std::span<const ConsumerRef> consumers,
                       const ChannelTransform& m) {
  // Higher slices first so lower offsets stay valid when the width changes.
  std::vector<const ConsumerRef*> order;
  for (const ConsumerRef& c : consumers) order.push_back(&c);
  std::stable_sort(order.begin(), order.end(), [](const auto* a, const auto* b) {
    return a->path.channel_offset > b->path.channel_offset;
  });
  for (const ConsumerRef* cp : order) {
    const ConsumerRef& c = *cp;
    Node& n = g.mutable_node(c.consumer);
    const int groups = n.kind == NodeKind::kConv2d ? n.conv().groups : 1;
    n.weight() = rewrite_consumer(n.weight(), m, c.path, groups);
  }
}

}  // namespace canonet
