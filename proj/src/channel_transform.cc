#include "canonet/channel_transform.h"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>

#include "canonet/error.h"

namespace canonet {

namespace {

[[noreturn]] void dim_error(const std::string& what) {
  throw Error(ErrorCode::kShapeMismatch, what);
}

}  // namespace

ChannelTransform::ChannelTransform(int64_t c_before, int64_t c_after,
                                   std::vector<TransformEntry> entries)
    : c_before_(c_before), c_after_(c_after) {
  if (c_before < 0 || c_after < 0) {
    throw Error(ErrorCode::kInvalidArgument, "negative transform dimension");
  }
  std::map<std::pair<int64_t, int64_t>, double> acc;
  for (const TransformEntry& e : entries) {
    if (e.row < 0 || e.row >= c_before || e.col < 0 || e.col >= c_after) {
      throw Error(ErrorCode::kInvalidArgument,
                  "transform entry (" + std::to_string(e.row) + "," +
                      std::to_string(e.col) + ") out of range");
    }
    if (!std::isfinite(e.value)) {
      throw Error(ErrorCode::kInvalidArgument, "non-finite transform entry");
    }
    if (!acc.emplace(std::make_pair(e.row, e.col), e.value).second) {
      throw Error(ErrorCode::kInvalidArgument,
                  "duplicate transform entry (" + std::to_string(e.row) + "," +
                      std::to_string(e.col) + ")");
    }
  }
  entries_.reserve(acc.size());
  for (const auto& [rc, v] : acc) {
    if (v != 0.0) entries_.push_back({rc.first, rc.second, v});
  }
}

ChannelTransform ChannelTransform::identity(int64_t c) {
  std::vector<TransformEntry> e;
  e.reserve(c);
  for (int64_t i = 0; i < c; ++i) e.push_back({i, i, 1.0});
  return ChannelTransform(c, c, std::move(e));
}

ChannelTransform ChannelTransform::permute_scale(std::span<const int64_t> perm,
                                                 std::span<const double> scales) {
  PermScale ps{{perm.begin(), perm.end()}, {scales.begin(), scales.end()}};
  ps.validate();
  const int64_t c = static_cast<int64_t>(perm.size());
  std::vector<TransformEntry> e;
  e.reserve(c);
  for (int64_t j = 0; j < c; ++j) e.push_back({perm[j], j, 1.0 / scales[j]});
  return ChannelTransform(c, c, std::move(e));
}

void PermScale::validate() const {
  if (perm.size() != scales.size()) {
    throw Error(ErrorCode::kInvalidArgument, "perm/scales length mismatch");
  }
  std::vector<bool> hit(perm.size(), false);
  for (int64_t p : perm) {
    if (p < 0 || p >= static_cast<int64_t>(perm.size()) || hit[p]) {
      throw Error(ErrorCode::kInvalidArgument, "perm is not a bijection");
    }
    hit[p] = true;
  }
  for (double s : scales) {
    if (!(s > 0.0) || !std::isfinite(s)) {
      throw Error(ErrorCode::kInvalidArgument, "scales must be positive");
    }
  }
}

double ChannelTransform::at(int64_t row, int64_t col) const {
  auto it = std::lower_bound(
      entries_.begin(), entries_.end(), std::make_pair(row, col),
      [](const TransformEntry& e, const std::pair<int64_t, int64_t>& rc) {
        return std::make_pair(e.row, e.col) < rc;
      });
  if (it != entries_.end() && it->row == row && it->col == col) return it->value;
  return 0.0;
}

bool ChannelTransform::is_identity() const {
  if (c_before_ != c_after_ || static_cast<int64_t>(entries_.size()) != c_before_) {
    return false;
  }
  return std::all_of(entries_.begin(), entries_.end(), [](const auto& e) {
    return e.row == e.col && e.value == 1.0;
  });
}

bool ChannelTransform::is_diagonal() const {
  return std::all_of(entries_.begin(), entries_.end(),
                     [](const auto& e) { return e.row == e.col; });
}

std::vector<double> ChannelTransform::dense() const {
  std::vector<double> d(c_before_ * c_after_, 0.0);
  for (const auto& e : entries_) d[e.row * c_after_ + e.col] = e.value;
  return d;
}

Tensor apply_to_activation(const ChannelTransform& m, const Tensor& y_after) {
  if (y_after.rank() < 1 || y_after.dim(0) != m.c_after()) {
    dim_error("apply_to_activation: tensor has " +
              std::to_string(y_after.rank() ? y_after.dim(0) : 0) +
              " channels, transform expects " + std::to_string(m.c_after()));
  }
  Shape shape = y_after.shape();
  const int64_t inner = y_after.numel() / shape[0];
  shape[0] = m.c_before();
  if (m.c_before() == 0) dim_error("apply_to_activation: empty result");
  Tensor out(shape);
  for (const auto& e : m.entries()) {
    for (int64_t k = 0; k < inner; ++k) {
      out[e.row * inner + k] += e.value * y_after[e.col * inner + k];
    }
  }
  return out;
}

ChannelTransform compose(const ChannelTransform& m1, const ChannelTransform& m2) {
  if (m1.c_after() != m2.c_before()) {
    dim_error("compose: inner dimensions " + std::to_string(m1.c_after()) +
              " and " + std::to_string(m2.c_before()) + " differ");
  }
  std::vector<std::vector<const TransformEntry*>> rows_of_m2(m2.c_before());
  for (const auto& e : m2.entries()) rows_of_m2[e.row].push_back(&e);
  std::map<std::pair<int64_t, int64_t>, double> acc;
  for (const auto& a : m1.entries()) {
    for (const TransformEntry* b : rows_of_m2[a.col]) {
      acc[{a.row, b->col}] += a.value * b->value;
    }
  }
  std::vector<TransformEntry> e;
  for (const auto& [rc, v] : acc) e.push_back({rc.first, rc.second, v});
  return ChannelTransform(m1.c_before(), m2.c_after(), std::move(e));
}

ChannelTransform block_diag(std::span<const ChannelTransform> blocks) {
  int64_t rows = 0, cols = 0;
  std::vector<TransformEntry> e;
  for (const ChannelTransform& b : blocks) {
    for (const auto& x : b.entries()) {
      e.push_back({x.row + rows, x.col + cols, x.value});
    }
    rows += b.c_before();
    cols += b.c_after();
  }
  return ChannelTransform(rows, cols, std::move(e));
}

ChannelTransform kron_lift(const ChannelTransform& m, int64_t hw) {
  if (hw < 1) throw Error(ErrorCode::kInvalidArgument, "kron_lift: hw < 1");
  if (hw == 1) return m;
  std::vector<TransformEntry> e;
  e.reserve(m.nnz() * hw);
  for (const auto& x : m.entries()) {
    for (int64_t s = 0; s < hw; ++s) {
      e.push_back({x.row * hw + s, x.col * hw + s, x.value});
    }
  }
  return ChannelTransform(m.c_before() * hw, m.c_after() * hw, std::move(e));
}

GroupRestriction group_restrict(const ChannelTransform& m, int groups) {
  if (groups < 1 || m.c_before() % groups || m.c_after() % groups) {
    throw Error(ErrorCode::kInvalidArgument,
                "group_restrict: dimensions not divisible by groups=" +
                    std::to_string(groups));
  }
  const int64_t gb = m.c_before() / groups, ga = m.c_after() / groups;
  GroupRestriction out;
  std::vector<TransformEntry> kept;
  for (const auto& e : m.entries()) {
    if (e.row / gb == e.col / ga) {
      kept.push_back(e);
    } else {
      out.rejected = true;
    }
  }
  out.transform = ChannelTransform(m.c_before(), m.c_after(), std::move(kept));
  return out;
}

namespace {

struct ConsumerLayout {
  int64_t out = 0;    // output rows
  int64_t cols = 0;   // input columns (weight dim 1)
  int64_t taps = 1;   // kh * kw
};

ConsumerLayout layout_of(const Tensor& weight) {
  if (weight.rank() == 4) {
    return {weight.dim(0), weight.dim(1), weight.dim(2) * weight.dim(3)};
  }
  if (weight.rank() == 2) return {weight.dim(0), weight.dim(1), 1};
  dim_error("consumer weight must be rank 2 or 4");
}

}  // namespace

Tensor rewrite_consumer(const Tensor& weight, const ChannelTransform& m,
                        const PathDescriptor& path, int groups) {
  const ConsumerLayout lay = layout_of(weight);
  const int64_t hw = path.hw;
  if (hw < 1) dim_error("rewrite_consumer: hw < 1");
  if (groups > 1 && (weight.rank() != 4 || hw != 1)) {
    dim_error("rewrite_consumer: groups > 1 requires a conv consumer");
  }
  const int64_t axis = lay.cols * groups;  // full input axis in columns
  if (axis % hw != 0) {
    dim_error("rewrite_consumer: input axis " + std::to_string(axis) +
              " not divisible by lift factor " + std::to_string(hw));
  }
  const int64_t units = axis / hw;
  const int64_t off = path.channel_offset;
  if (off < 0 || off + m.c_before() > units) {
    dim_error("rewrite_consumer: slice [" + std::to_string(off) + "," +
              std::to_string(off + m.c_before()) + ") exceeds consumer axis of " +
              std::to_string(units) + " channels");
  }
  const std::vector<ChannelTransform> blocks = {
      ChannelTransform::identity(off), m,
      ChannelTransform::identity(units - off - m.c_before())};
  const ChannelTransform full = kron_lift(block_diag(blocks), hw);
  const int64_t new_axis = full.c_after();

  if (groups == 1) {
    Tensor out(weight.rank() == 4 ? Shape{lay.out, new_axis, weight.dim(2),
                                          weight.dim(3)}
                                  : Shape{lay.out, new_axis});
    for (const auto& e : full.entries()) {
      for (int64_t o = 0; o < lay.out; ++o) {
        const double* src = &weight.data()[(o * lay.cols + e.row) * lay.taps];
        double* dst = &out.mutable_data()[(o * new_axis + e.col) * lay.taps];
        for (int64_t t = 0; t < lay.taps; ++t) dst[t] += e.value * src[t];
      }
    }
    return out;
  }

  if (m.c_before() != m.c_after()) {
    throw Error(ErrorCode::kUnsupported,
                "rewrite_consumer: grouped consumer cannot change width");
  }
  if (lay.cols == 1 && !m.is_diagonal()) {
    throw Error(ErrorCode::kUnsupported,
                "rewrite_consumer: depthwise consumer accepts only diagonal M");
  }
  const GroupRestriction gr = group_restrict(full, groups);
  if (gr.rejected) {
    throw Error(ErrorCode::kUnsupported,
                "rewrite_consumer: transform mixes channels across groups");
  }
  const int64_t opg = lay.out / groups;
  Tensor out(weight.shape());
  for (const auto& e : gr.transform.entries()) {
    const int64_t g = e.row / lay.cols;
    const int64_t r_local = e.row % lay.cols, c_local = e.col % lay.cols;
    for (int64_t o = g * opg; o < (g + 1) * opg; ++o) {
      const double* src = &weight.data()[(o * lay.cols + r_local) * lay.taps];
      double* dst = &out.mutable_data()[(o * lay.cols + c_local) * lay.taps];
      for (int64_t t = 0; t < lay.taps; ++t) dst[t] += e.value * src[t];
    }
  }
  return out;
}

std::vector<double> consumer_column(const Tensor& weight,
                                    const PathDescriptor& path,
                                    int64_t channel) {
  const ConsumerLayout lay = layout_of(weight);
  const int64_t first = (path.channel_offset + channel) * path.hw;
  if (first + path.hw > lay.cols) {
    dim_error("consumer_column: channel outside consumer axis");
  }
  std::vector<double> col;
  col.reserve(lay.out * path.hw * lay.taps);
  for (int64_t o = 0; o < lay.out; ++o) {
    for (int64_t s = 0; s < path.hw; ++s) {
      const double* src = &weight.data()[(o * lay.cols + first + s) * lay.taps];
      col.insert(col.end(), src, src + lay.taps);
    }
  }
  return col;
}

}  // namespace canonet
