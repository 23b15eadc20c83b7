#ifndef CANONET_TENSOR_H_
#define CANONET_TENSOR_H_

#include <cstdint>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace canonet {

using Shape = std::vector<int64_t>;

std::string shape_to_string(const Shape& shape);
int64_t shape_numel(const Shape& shape);

// Dense row-major float64 tensor. Single sample, no batch axis.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> data);

  static Tensor from_list(std::initializer_list<double> values);

  const Shape& shape() const { return shape_; }
  int64_t rank() const { return static_cast<int64_t>(shape_.size()); }
  int64_t dim(int64_t axis) const { return shape_.at(axis); }
  int64_t numel() const { return static_cast<int64_t>(data_.size()); }
  bool empty() const { return data_.empty(); }

  std::span<const double> data() const { return data_; }
  std::span<double> mutable_data() { return data_; }
  const std::vector<double>& values() const { return data_; }

  double operator[](int64_t i) const { return data_[i]; }
  double& operator[](int64_t i) { return data_[i]; }

  // (c, h, w) access for rank-3 tensors.
  double at(int64_t c, int64_t h, int64_t w) const {
    return data_[(c * shape_[1] + h) * shape_[2] + w];
  }
  double& at(int64_t c, int64_t h, int64_t w) {
    return data_[(c * shape_[1] + h) * shape_[2] + w];
  }

  Tensor reshaped(Shape shape) const;

  bool all_finite() const;
  friend bool operator==(const Tensor& a, const Tensor& b) = default;

 private:
  Shape shape_;
  std::vector<double> data_;
};

double max_abs_diff(const Tensor& a, const Tensor& b);

// splitmix64 stream. next_u64() is the reference sequence:
//   state += 0x9e3779b97f4a7c15
//   z = state
//   z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9
//   z = (z ^ (z >> 27)) * 0x94d049bb133111eb
//   return z ^ (z >> 31)
// uniform() takes the top 53 bits; normal() is Box-Muller using two
// uniforms per draw (no cached second value).
class Rng {
 public:
  explicit Rng(uint64_t seed) : seed_(seed), state_(seed) {}

  uint64_t seed() const { return seed_; }
  uint64_t next_u64();
  double uniform();
  double uniform(double lo, double hi);
  double normal();
  double normal(double mean, double stddev);
  // Uniform integer in [0, n).
  int64_t below(int64_t n);
  bool bit() { return (next_u64() >> 63) != 0; }
  // Independent child stream; does not advance this stream.
  Rng fork(uint64_t stream) const;

 private:
  uint64_t seed_;
  uint64_t state_;
};

uint64_t mix_seed(uint64_t seed, uint64_t stream);

Tensor random_uniform(const Shape& shape, double lo, double hi, Rng& rng);
Tensor random_normal(const Shape& shape, double mean, double stddev, Rng& rng);

namespace ops {

// Cross-correlation per group. weight [C_out, C_in/groups, kh, kw].
// Accumulation order: bias first, then input channel, kernel row, kernel col.
Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias,
              int groups, int stride, int padding);
// z = W y + b; accumulation over columns in increasing order after the bias.
Tensor linear(const Tensor& input, const Tensor& weight, const Tensor& bias);
// Eval-mode batch norm over axis 0 of a rank-1 or rank-3 tensor.
Tensor batchnorm(const Tensor& input, const Tensor& gamma, const Tensor& beta,
                 const Tensor& running_mean, const Tensor& running_var,
                 double eps);
Tensor relu(const Tensor& input);
Tensor add(const Tensor& a, const Tensor& b);
Tensor cat_channels(std::span<const Tensor> inputs);
Tensor avgpool_global(const Tensor& input);
Tensor flatten(const Tensor& input);

}  // namespace ops
}  // namespace canonet

#endif  // CANONET_TENSOR_H_
