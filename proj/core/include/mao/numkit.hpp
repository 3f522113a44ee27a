#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Core>

namespace mao {

// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using Vector = Eigen::VectorXd;
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Unit-length embedding. Kept as a plain dense vector; unit norm is a
// convention enforced by the producers (encode, pooling, refinement).
using Descriptor = Vector;

// Row-major dense array with an explicit shape.
struct Tensor {
  std::vector<std::size_t> shape;
  std::vector<double> data;

  Tensor() = default;
  explicit Tensor(std::vector<std::size_t> shape_in, double fill = 0.0);
  Tensor(std::vector<std::size_t> shape_in, std::vector<double> data_in);

  std::size_t size() const { return data.size(); }
  std::size_t rank() const { return shape.size(); }
  std::size_t dim(std::size_t axis) const { return shape.at(axis); }

  double& operator[](std::size_t i) { return data[i]; }
  double operator[](std::size_t i) const { return data[i]; }

  std::span<double> values() { return data; }
  std::span<const double> values() const { return data; }

  bool operator==(const Tensor&) const = default;
};

std::size_t shape_product(std::span<const std::size_t> shape);
std::string shape_string(std::span<const std::size_t> shape);

double dot(std::span<const double> a, std::span<const double> b);
double l2_norm(std::span<const double> a);

// <a,b>/(|a||b|). Throws on dimension mismatch or a zero-norm argument.
double cosine_similarity(std::span<const double> a, std::span<const double> b);
double cosine_similarity(const Vector& a, const Vector& b);

// Returns a/|a|; throws if |a| is zero or not finite.
Vector l2_normalized(const Vector& a);

// (x - min) / (max - min) elementwise. A constant input maps to all zeros.
std::vector<double> min_max_normalize(std::span<const double> values);

// Central differences (f(x + h e_j) - f(x - h e_j)) / 2h for every coordinate.
// Throws if any evaluation of f is not finite.
std::vector<double> finite_difference_gradient(
    const std::function<double(std::span<const double>)>& f,
    std::span<const double> x, double h = 1e-5);

// |a - b|_2 / max(|a|_2, |b|_2, floor).
double relative_error(std::span<const double> a, std::span<const double> b,
                      double floor = 1e-300);

// Deterministic 64-bit generator with portable real draws (the standard
// distributions are implementation-defined, which breaks cross-platform
// reproducibility of seeded fixtures).
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next() { return engine_(); }
  // Uniform in [0, 1).
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  // Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n);
  // Standard normal via Box-Muller.
  double normal();

  template <typename T>
  void shuffle(std::vector<T>& items) {
    for (std::size_t i = items.size(); i > 1; --i) {
      std::swap(items[i - 1], items[below(i)]);
    }
  }

 private:
  std::mt19937_64 engine_;
};

// Stream seed derived from a parent seed and a stream index (splitmix64).
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream);

}  // namespace mao
