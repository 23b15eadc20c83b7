#include <cmath>

#include <gtest/gtest.h>

#include "canonet/channel_transform.h"
#include "canonet/error.h"

namespace canonet {
namespace {

using Dense = std::vector<std::vector<double>>;

Dense to_dense(const ChannelTransform& m) {
  Dense d(m.c_before(), std::vector<double>(m.c_after(), 0.0));
  for (const TransformEntry& e : m.entries()) d[e.row][e.col] = e.value;
  return d;
}

Dense matmul(const Dense& a, const Dense& b) {
  const size_t n = a.size(), k = b.size(), m = b.empty() ? 0 : b[0].size();
  Dense c(n, std::vector<double>(m, 0.0));
  for (size_t i = 0; i < n; ++i) {
    for (size_t j = 0; j < m; ++j) {
      for (size_t l = 0; l < k; ++l) c[i][j] += a[i][l] * b[l][j];
    }
  }
  return c;
}

double max_diff(const Dense& a, const Dense& b) {
  if (a.size() != b.size()) return INFINITY;
  double worst = 0.0;
  for (size_t i = 0; i < a.size(); ++i) {
    if (a[i].size() != b[i].size()) return INFINITY;
    for (size_t j = 0; j < a[i].size(); ++j) worst = std::max(worst, std::abs(a[i][j] - b[i][j]));
  }
  return worst;
}

ChannelTransform random_transform(int64_t rows, int64_t cols, Rng& rng, double density = 0.4) {
  std::vector<TransformEntry> e;
  for (int64_t r = 0; r < rows; ++r) {
    for (int64_t c = 0; c < cols; ++c) {
      if (rng.uniform() < density) e.push_back({r, c, rng.uniform(-2, 2)});
    }
  }
  return ChannelTransform(rows, cols, std::move(e));
}

TEST(ChannelTransform, CanonicalizesAndValidates) {
  const ChannelTransform m(3, 2, {{2, 1, 1.0}, {0, 0, 2.0}, {1, 1, 0.0}});
  ASSERT_EQ(m.nnz(), 2u);
  EXPECT_EQ(m.entries()[0], (TransformEntry{0, 0, 2.0}));
  EXPECT_EQ(m.at(2, 1), 1.0);
  EXPECT_EQ(m.at(1, 1), 0.0);
  EXPECT_THROW(ChannelTransform(2, 2, {{0, 0, 1}, {0, 0, 2}}), Error);
  EXPECT_THROW(ChannelTransform(2, 2, {{2, 0, 1}}), Error);
  EXPECT_THROW(ChannelTransform(2, 2, {{0, 0, NAN}}), Error);
  EXPECT_TRUE(ChannelTransform::identity(4).is_identity());
  EXPECT_FALSE(m.is_identity());
  EXPECT_EQ(ChannelTransform(2, 2, {{1, 1, 1}, {0, 0, 1}}), ChannelTransform::identity(2));
}

TEST(ChannelTransform, PermuteScaleIsPtransposeDinverse) {
  const std::vector<int64_t> perm = {2, 0, 1};
  const std::vector<double> scales = {2.0, 4.0, 0.5};
  const ChannelTransform m = ChannelTransform::permute_scale(perm, scales);
  // y_after[j] = scales[j] * y_before[perm[j]]  =>  M y_after = y_before.
  const Tensor before = Tensor::from_list({1.0, -3.0, 7.0});
  Tensor after({3});
  for (int j = 0; j < 3; ++j) after[j] = scales[j] * before[perm[j]];
  EXPECT_EQ(apply_to_activation(m, after), before);
  EXPECT_THROW((PermScale{{0, 0, 1}, {1, 1, 1}}.validate()), Error);
  EXPECT_THROW((PermScale{{0, 1}, {1, -1}}.validate()), Error);
}

TEST(ChannelTransform, ComposeBlockDiagKronMatchDense) {
  Rng rng(21);
  for (int trial = 0; trial < 100; ++trial) {
    const int64_t a = 1 + rng.below(8), b = 1 + rng.below(8), c = 1 + rng.below(8);
    const ChannelTransform m1 = random_transform(a, b, rng);
    const ChannelTransform m2 = random_transform(b, c, rng);
    EXPECT_LE(max_diff(to_dense(compose(m1, m2)), matmul(to_dense(m1), to_dense(m2))), 1e-12);

    const ChannelTransform parts[] = {m1, m2};
    const Dense bd = to_dense(block_diag(parts));
    Dense ref(a + b, std::vector<double>(b + c, 0.0));
    for (int64_t i = 0; i < a; ++i) {
      for (int64_t j = 0; j < b; ++j) ref[i][j] = to_dense(m1)[i][j];
    }
    for (int64_t i = 0; i < b; ++i) {
      for (int64_t j = 0; j < c; ++j) ref[a + i][b + j] = to_dense(m2)[i][j];
    }
    EXPECT_EQ(max_diff(bd, ref), 0.0);

    const int64_t hw = 1 + rng.below(9);
    const Dense k = to_dense(kron_lift(m1, hw));
    Dense kref(a * hw, std::vector<double>(b * hw, 0.0));
    const Dense d1 = to_dense(m1);
    for (int64_t i = 0; i < a; ++i) {
      for (int64_t j = 0; j < b; ++j) {
        for (int64_t s = 0; s < hw; ++s) kref[i * hw + s][j * hw + s] = d1[i][j];
      }
    }
    EXPECT_EQ(max_diff(k, kref), 0.0);
  }
}

// Dense W * blkdiag(I, M, I) (x) I_hw, per kernel tap.
Tensor rewrite_oracle(const Tensor& w, const ChannelTransform& m, int64_t offset, int64_t hw) {
  const int64_t rows = w.dim(0), cols = w.dim(1);
  const int64_t taps = w.numel() / (rows * cols);
  const int64_t c_in = cols / hw;
  const int64_t new_c = c_in - m.c_before() + m.c_after();
  Dense full(c_in, std::vector<double>(new_c, 0.0));
  for (int64_t i = 0; i < offset; ++i) full[i][i] = 1.0;
  const Dense d = to_dense(m);
  for (int64_t i = 0; i < m.c_before(); ++i) {
    for (int64_t j = 0; j < m.c_after(); ++j) full[offset + i][offset + j] = d[i][j];
  }
  for (int64_t i = offset + m.c_before(); i < c_in; ++i) {
    full[i][i - m.c_before() + m.c_after()] = 1.0;
  }
  Shape shape = w.shape();
  shape[1] = new_c * hw;
  Tensor out(shape);
  for (int64_t o = 0; o < rows; ++o) {
    for (int64_t t = 0; t < taps; ++t) {
      for (int64_t jc = 0; jc < new_c; ++jc) {
        for (int64_t s = 0; s < hw; ++s) {
          double acc = 0.0;
          for (int64_t ic = 0; ic < c_in; ++ic) {
            acc += w[(o * cols + ic * hw + s) * taps + t] * full[ic][jc];
          }
          out[(o * new_c * hw + jc * hw + s) * taps + t] = acc;
        }
      }
    }
  }
  return out;
}

TEST(RewriteConsumer, MatchesDenseOracle) {
  Rng rng(33);
  for (int trial = 0; trial < 100; ++trial) {
    const int64_t before = 1 + rng.below(8), after = 1 + rng.below(8);
    const int64_t offset = rng.below(4), rest = rng.below(4);
    const bool flat = rng.bit();
    const int64_t hw = flat ? 1 + rng.below(9) : 1;
    const int64_t c_in = offset + before + rest;
    const ChannelTransform m = random_transform(before, after, rng);
    const Tensor w = flat ? random_normal({3, c_in * hw}, 0, 1, rng)
                          : random_normal({3, c_in, 2, 2}, 0, 1, rng);
    const PathDescriptor path{{}, offset, hw};
    const Tensor got = rewrite_consumer(w, m, path);
    const Tensor ref = rewrite_oracle(w, m, offset, hw);
    ASSERT_EQ(got.shape(), ref.shape());
    EXPECT_LE(max_abs_diff(got, ref), 1e-12);
  }
}

TEST(RewriteConsumer, PreservesLinearFunction) {
  Rng rng(8);
  const ChannelTransform m = random_transform(4, 6, rng, 0.6);
  const Tensor w = random_normal({2, 5}, 0, 1, rng);
  const Tensor b({2}, 0.0);
  const Tensor y_after = random_uniform({6}, -1, 1, rng);
  const Tensor y_before = apply_to_activation(m, y_after);
  // Consumer reads [y_before ; extra] with the producer slice at offset 0.
  Tensor x_old({5}), x_new({7});
  for (int i = 0; i < 4; ++i) x_old[i] = y_before[i];
  for (int i = 0; i < 6; ++i) x_new[i] = y_after[i];
  x_old[4] = x_new[6] = 0.25;
  const Tensor w_new = rewrite_consumer(w, m, PathDescriptor{{}, 0, 1});
  EXPECT_LE(max_abs_diff(ops::linear(x_old, w, b), ops::linear(x_new, w_new, b)), 1e-12);
}

TEST(RewriteConsumer, GroupedRules) {
  Rng rng(4);
  const Tensor dw = random_normal({4, 1, 3, 3}, 0, 1, rng);
  const std::vector<double> s = {2, 1, 0.5, 4};
  const std::vector<int64_t> id = {0, 1, 2, 3};
  const Tensor scaled = rewrite_consumer(dw, ChannelTransform::permute_scale(id, s),
                                         PathDescriptor{}, 4);
  for (int64_t c = 0; c < 4; ++c) EXPECT_DOUBLE_EQ(scaled[c * 9], dw[c * 9] / s[c]);
  const std::vector<int64_t> swap = {1, 0, 2, 3};
  const std::vector<double> ones(4, 1.0);
  EXPECT_THROW(rewrite_consumer(dw, ChannelTransform::permute_scale(swap, ones),
                                PathDescriptor{}, 4),
               Error);
  // Width change is never legal for a grouped consumer.
  EXPECT_THROW(rewrite_consumer(dw, ChannelTransform(4, 5, {{0, 0, 1}}), PathDescriptor{}, 4),
               Error);

  const GroupRestriction ok = group_restrict(ChannelTransform::permute_scale(swap, ones), 2);
  EXPECT_FALSE(ok.rejected);
  const std::vector<int64_t> cross = {2, 1, 0, 3};
  EXPECT_TRUE(group_restrict(ChannelTransform::permute_scale(cross, ones), 2).rejected);
}

TEST(ConsumerColumn, ReadsSliceAcrossRowsAndTaps) {
  const Tensor w({2, 3 * 2}, {1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12});
  // hw = 2, producer at channel offset 1: channel 0 -> columns 2,3.
  const std::vector<double> col = consumer_column(w, PathDescriptor{{}, 1, 2}, 0);
  EXPECT_EQ(col, (std::vector<double>{3, 4, 9, 10}));
}

}  // namespace
}  // namespace canonet
