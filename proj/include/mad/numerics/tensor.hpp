#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace mad {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_string(const Shape& shape);

// Dense row-major array of doubles. Rank 0 is a scalar.
class Tensor {
 public:
  Tensor() : shape_{}, data_(1, 0.0) {}
  Tensor(Shape shape, std::vector<double> data);

  static Tensor zeros(Shape shape);
  static Tensor filled(Shape shape, double value);
  static Tensor scalar(double value);
  static Tensor vector(std::vector<double> values);
  static Tensor matrix(std::size_t rows, std::size_t cols,
                       std::vector<double> values);

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t size() const noexcept { return data_.size(); }
  // Leading extent for rank >= 1, 1 for scalars.
  std::size_t rows() const noexcept { return shape_.empty() ? 1 : shape_[0]; }
  // Product of trailing extents.
  std::size_t cols() const noexcept;

  std::span<const double> data() const noexcept { return data_; }
  std::span<double> data() noexcept { return data_; }
  const std::vector<double>& values() const noexcept { return data_; }

  double operator[](std::size_t i) const { return data_[i]; }
  double& operator[](std::size_t i) { return data_[i]; }
  double at(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }
  double& at(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
  std::span<const double> row(std::size_t r) const {
    return std::span<const double>(data_).subspan(r * cols(), cols());
  }
  std::span<double> row(std::size_t r) {
    return std::span<double>(data_).subspan(r * cols(), cols());
  }

  double item() const;
  bool all_finite() const noexcept;
  void fill(double value) noexcept;
  Tensor reshaped(Shape shape) const;

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  Shape shape_;
  std::vector<double> data_;
};

// A trainable (or frozen) tensor with a persistent gradient buffer.
struct Parameter {
  Parameter() = default;
  Parameter(std::string name, Tensor value, bool frozen = false)
      : name(std::move(name)),
        value(std::move(value)),
        grad(Tensor::zeros(this->value.shape())),
        frozen(frozen) {}

  std::string name;
  Tensor value;
  Tensor grad;
  bool frozen = false;

  bool requires_grad() const noexcept { return !frozen; }
  void zero_grad() noexcept { grad.fill(0.0); }
};

}  // namespace mad
