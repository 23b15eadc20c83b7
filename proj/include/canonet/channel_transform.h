#ifndef CANONET_CHANNEL_TRANSFORM_H_
#define CANONET_CHANNEL_TRANSFORM_H_

#include <cstdint>
#include <span>
#include <vector>

#include "canonet/graph.h"
#include "canonet/tensor.h"

namespace canonet {

struct TransformEntry {
  int64_t row = 0;
  int64_t col = 0;
  double value = 0.0;

  friend bool operator==(const TransformEntry&, const TransformEntry&) = default;
};

// Sparse channel map with the before-from-after convention:
//   y_before = M * y_after,   M is c_before x c_after.
// A consumer reading y_before keeps its function when rewritten to W * M.
// Entries are kept sorted by (row, col) with no duplicates and no zeros, so
// structural equality is value equality.
class ChannelTransform {
 public:
  ChannelTransform() = default;
  ChannelTransform(int64_t c_before, int64_t c_after,
                   std::vector<TransformEntry> entries);

  static ChannelTransform identity(int64_t c);
  // Column j of the result is channel perm[j] of the input: entries
  // (perm[j], j, 1/scales[j]). Realizes M = P^T D^-1.
  static ChannelTransform permute_scale(std::span<const int64_t> perm,
                                        std::span<const double> scales);

  int64_t c_before() const { return c_before_; }
  int64_t c_after() const { return c_after_; }
  const std::vector<TransformEntry>& entries() const { return entries_; }
  size_t nnz() const { return entries_.size(); }

  double at(int64_t row, int64_t col) const;
  bool is_identity() const;
  bool is_diagonal() const;
  std::vector<double> dense() const;  // row-major c_before x c_after

  friend bool operator==(const ChannelTransform&,
                         const ChannelTransform&) = default;

 private:
  int64_t c_before_ = 0;
  int64_t c_after_ = 0;
  std::vector<TransformEntry> entries_;
};

// Positive per-channel scaling followed by a permutation.
struct PermScale {
  std::vector<int64_t> perm;   // new channel j reads old channel perm[j]
  std::vector<double> scales;  // new channel j is scales[j] * old

  void validate() const;
  ChannelTransform transform() const {
    return ChannelTransform::permute_scale(perm, scales);
  }
};

// y_before[i] = sum_j M[i,j] * y_after[j] at every trailing position.
Tensor apply_to_activation(const ChannelTransform& m, const Tensor& y_after);

// M1 * M2 (y_before = M1 * M2 * y_after).
ChannelTransform compose(const ChannelTransform& m1, const ChannelTransform& m2);

// Direct sum in argument order, matching Cat branch order.
ChannelTransform block_diag(std::span<const ChannelTransform> blocks);

// M (x) I_hw for a channel-major flattened tensor.
ChannelTransform kron_lift(const ChannelTransform& m, int64_t hw);

struct GroupRestriction {
  ChannelTransform transform;
  // True when an entry crossing a group boundary had to be dropped; the
  // transform is then not valid for the grouped consumer.
  bool rejected = false;
};
GroupRestriction group_restrict(const ChannelTransform& m, int groups);

// Rewrites a Conv2d/Linear consumer weight for a producer whose layout moved
// by M. Only the producer's slice of the consumer input axis is touched
// (the block of blkdiag(I, M, I)); post-Flatten consumers use M (x) I_hw.
// Grouped consumers accept only group-block-diagonal M of unchanged width;
// depthwise consumers accept only diagonal M.
Tensor rewrite_consumer(const Tensor& weight, const ChannelTransform& m,
                        const PathDescriptor& path, int groups = 1);

// Input-axis columns of a consumer weight belonging to `channel` of the
// producer at `path`, flattened over output rows (and kernel taps).
std::vector<double> consumer_column(const Tensor& weight,
                                    const PathDescriptor& path,
                                    int64_t channel);

}  // namespace canonet

#endif  // CANONET_CHANNEL_TRANSFORM_H_
