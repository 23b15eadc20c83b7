#include "canonet/tensor.h"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>

#include "canonet/error.h"

namespace canonet {

std::string_view error_code_name(ErrorCode code) {
  switch (code) {
    case ErrorCode::kInvalidArgument: return "invalid_argument";
    case ErrorCode::kShapeMismatch: return "shape_mismatch";
    case ErrorCode::kCycle: return "cycle";
    case ErrorCode::kDanglingEdge: return "dangling_edge";
    case ErrorCode::kShapeConflict: return "shape_conflict";
    case ErrorCode::kUnsupported: return "unsupported";
    case ErrorCode::kNonConvergence: return "non_convergence";
    case ErrorCode::kSanityCheckFailed: return "sanity_check_failed";
    case ErrorCode::kIo: return "io";
  }
  return "unknown";
}

std::string shape_to_string(const Shape& shape) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ",";
    os << shape[i];
  }
  os << "]";
  return os.str();
}

int64_t shape_numel(const Shape& shape) {
  int64_t n = 1;
  for (int64_t d : shape) n *= d;
  return n;
}

namespace {

void check_shape(const Shape& shape) {
  for (int64_t d : shape) {
    if (d <= 0) {
      throw Error(ErrorCode::kInvalidArgument,
                  "non-positive dimension in shape " + shape_to_string(shape));
    }
  }
}

[[noreturn]] void mismatch(const std::string& what) {
  throw Error(ErrorCode::kShapeMismatch, what);
}

}  // namespace

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)) {
  check_shape(shape_);
  data_.assign(shape_numel(shape_), fill);
}

Tensor::Tensor(Shape shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  check_shape(shape_);
  if (shape_numel(shape_) != static_cast<int64_t>(data_.size())) {
    mismatch("tensor data length " + std::to_string(data_.size()) +
             " does not match shape " + shape_to_string(shape_));
  }
}

Tensor Tensor::from_list(std::initializer_list<double> values) {
  return Tensor({static_cast<int64_t>(values.size())},
                std::vector<double>(values));
}

Tensor Tensor::reshaped(Shape shape) const {
  return Tensor(std::move(shape), data_);
}

bool Tensor::all_finite() const {
  return std::all_of(data_.begin(), data_.end(),
                     [](double v) { return std::isfinite(v); });
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    mismatch("max_abs_diff: " + shape_to_string(a.shape()) + " vs " +
             shape_to_string(b.shape()));
  }
  double m = 0.0;
  for (int64_t i = 0; i < a.numel(); ++i) {
    m = std::max(m, std::abs(a[i] - b[i]));
  }
  return m;
}

uint64_t Rng::next_u64() {
  state_ += 0x9e3779b97f4a7c15ULL;
  uint64_t z = state_;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

double Rng::uniform() {
  return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double Rng::uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

double Rng::normal() {
  // 1 - u keeps the log argument in (0, 1].
  double u1 = 1.0 - uniform();
  double u2 = uniform();
  return std::sqrt(-2.0 * std::log(u1)) *
         std::cos(2.0 * std::numbers::pi * u2);
}

double Rng::normal(double mean, double stddev) {
  return mean + stddev * normal();
}

int64_t Rng::below(int64_t n) {
  if (n <= 0) throw Error(ErrorCode::kInvalidArgument, "Rng::below(n<=0)");
  return static_cast<int64_t>(next_u64() % static_cast<uint64_t>(n));
}

uint64_t mix_seed(uint64_t seed, uint64_t stream) {
  Rng r(seed ^ (stream * 0xd1b54a32d192ed03ULL + 0x632be59bd9b4e019ULL));
  return r.next_u64();
}

Rng Rng::fork(uint64_t stream) const { return Rng(mix_seed(seed_, stream)); }

Tensor random_uniform(const Shape& shape, double lo, double hi, Rng& rng) {
  Tensor t(shape);
  for (double& v : t.mutable_data()) v = rng.uniform(lo, hi);
  return t;
}

Tensor random_normal(const Shape& shape, double mean, double stddev,
                     Rng& rng) {
  Tensor t(shape);
  for (double& v : t.mutable_data()) v = rng.normal(mean, stddev);
  return t;
}

namespace ops {

Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias,
              int groups, int stride, int padding) {
  if (input.rank() != 3) mismatch("conv2d: input must be [C,H,W]");
  if (weight.rank() != 4) mismatch("conv2d: weight must be [Co,Ci/g,kh,kw]");
  if (groups <= 0 || stride <= 0 || padding < 0) {
    throw Error(ErrorCode::kInvalidArgument,
                "conv2d: groups/stride must be positive, padding >= 0");
  }
  const int64_t c_in = input.dim(0), h = input.dim(1), w = input.dim(2);
  const int64_t c_out = weight.dim(0), cpg = weight.dim(1);
  const int64_t kh = weight.dim(2), kw = weight.dim(3);
  if (c_in % groups != 0) {
    mismatch("conv2d: C_in=" + std::to_string(c_in) +
             " not divisible by groups=" + std::to_string(groups));
  }
  if (c_out % groups != 0) {
    mismatch("conv2d: C_out=" + std::to_string(c_out) +
             " not divisible by groups=" + std::to_string(groups));
  }
  if (cpg != c_in / groups) {
    mismatch("conv2d: weight dim 1 is " + std::to_string(cpg) +
             " but C_in/groups is " + std::to_string(c_in / groups));
  }
  if (bias.rank() != 1 || bias.dim(0) != c_out) {
    mismatch("conv2d: bias length must equal C_out=" + std::to_string(c_out));
  }
  if (h + 2 * padding < kh) mismatch("conv2d: kernel height exceeds input");
  if (w + 2 * padding < kw) mismatch("conv2d: kernel width exceeds input");
  const int64_t ho = (h + 2 * padding - kh) / stride + 1;
  const int64_t wo = (w + 2 * padding - kw) / stride + 1;
  const int64_t opg = c_out / groups;

  Tensor out({c_out, ho, wo});
  const auto x = input.data();
  const auto wt = weight.data();
  for (int64_t o = 0; o < c_out; ++o) {
    const int64_t g = o / opg;
    for (int64_t oy = 0; oy < ho; ++oy) {
      for (int64_t ox = 0; ox < wo; ++ox) {
        double acc = bias[o];
        for (int64_t ci = 0; ci < cpg; ++ci) {
          const int64_t c = g * cpg + ci;
          for (int64_t ky = 0; ky < kh; ++ky) {
            const int64_t iy = oy * stride + ky - padding;
            if (iy < 0 || iy >= h) continue;
            for (int64_t kx = 0; kx < kw; ++kx) {
              const int64_t ix = ox * stride + kx - padding;
              if (ix < 0 || ix >= w) continue;
              acc += wt[((o * cpg + ci) * kh + ky) * kw + kx] *
                     x[(c * h + iy) * w + ix];
            }
          }
        }
        out.at(o, oy, ox) = acc;
      }
    }
  }
  return out;
}

Tensor linear(const Tensor& input, const Tensor& weight, const Tensor& bias) {
  if (input.rank() != 1) mismatch("linear: input must be rank 1");
  if (weight.rank() != 2) mismatch("linear: weight must be [M,N]");
  const int64_t m = weight.dim(0), n = weight.dim(1);
  if (input.dim(0) != n) {
    mismatch("linear: input length " + std::to_string(input.dim(0)) +
             " != weight columns " + std::to_string(n));
  }
  if (bias.rank() != 1 || bias.dim(0) != m) {
    mismatch("linear: bias length must equal M=" + std::to_string(m));
  }
  Tensor out({m});
  for (int64_t i = 0; i < m; ++i) {
    double acc = bias[i];
    for (int64_t j = 0; j < n; ++j) acc += weight[i * n + j] * input[j];
    out[i] = acc;
  }
  return out;
}

Tensor batchnorm(const Tensor& input, const Tensor& gamma, const Tensor& beta,
                 const Tensor& running_mean, const Tensor& running_var,
                 double eps) {
  if (input.rank() != 1 && input.rank() != 3) {
    mismatch("batchnorm: input must be [C] or [C,H,W]");
  }
  const int64_t c = input.dim(0);
  for (const Tensor* p : {&gamma, &beta, &running_mean, &running_var}) {
    if (p->rank() != 1 || p->dim(0) != c) {
      mismatch("batchnorm: parameter length must equal C=" +
               std::to_string(c));
    }
  }
  if (!(eps > 0.0)) {
    throw Error(ErrorCode::kInvalidArgument, "batchnorm: eps must be > 0");
  }
  const int64_t inner = input.numel() / c;
  Tensor out(input.shape());
  for (int64_t i = 0; i < c; ++i) {
    if (running_var[i] < 0.0) {
      throw Error(ErrorCode::kInvalidArgument,
                  "batchnorm: negative running variance at channel " +
                      std::to_string(i));
    }
    const double inv = 1.0 / std::sqrt(running_var[i] + eps);
    for (int64_t k = 0; k < inner; ++k) {
      const int64_t idx = i * inner + k;
      out[idx] = (input[idx] - running_mean[i]) * inv * gamma[i] + beta[i];
    }
  }
  return out;
}

Tensor relu(const Tensor& input) {
  Tensor out(input.shape());
  for (int64_t i = 0; i < input.numel(); ++i) {
    out[i] = input[i] > 0.0 ? input[i] : 0.0;
  }
  return out;
}

Tensor add(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    mismatch("add: operand shapes " + shape_to_string(a.shape()) + " and " +
             shape_to_string(b.shape()) + " differ");
  }
  Tensor out(a.shape());
  for (int64_t i = 0; i < a.numel(); ++i) out[i] = a[i] + b[i];
  return out;
}

Tensor cat_channels(std::span<const Tensor> inputs) {
  if (inputs.empty()) mismatch("cat: no inputs");
  const Tensor& first = inputs.front();
  if (first.rank() != 3) mismatch("cat: inputs must be [C,H,W]");
  int64_t channels = 0;
  for (const Tensor& t : inputs) {
    if (t.rank() != 3 || t.dim(1) != first.dim(1) || t.dim(2) != first.dim(2)) {
      mismatch("cat: spatial dims differ (" + shape_to_string(first.shape()) +
               " vs " + shape_to_string(t.shape()) + ")");
    }
    channels += t.dim(0);
  }
  std::vector<double> data;
  data.reserve(channels * first.dim(1) * first.dim(2));
  for (const Tensor& t : inputs) {
    data.insert(data.end(), t.values().begin(), t.values().end());
  }
  return Tensor({channels, first.dim(1), first.dim(2)}, std::move(data));
}

Tensor avgpool_global(const Tensor& input) {
  if (input.rank() != 3) mismatch("avgpool_global: input must be [C,H,W]");
  const int64_t c = input.dim(0), hw = input.dim(1) * input.dim(2);
  Tensor out({c});
  for (int64_t i = 0; i < c; ++i) {
    double acc = 0.0;
    for (int64_t k = 0; k < hw; ++k) acc += input[i * hw + k];
    out[i] = acc / static_cast<double>(hw);
  }
  return out;
}

Tensor flatten(const Tensor& input) {
  if (input.rank() != 3) mismatch("flatten: input must be [C,H,W]");
  return input.reshaped({input.numel()});
}

}  // namespace ops
}  // namespace canonet
