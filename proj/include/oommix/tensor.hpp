#pragma once

#include <cstddef>
#include <functional>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace oommix {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

/// Thrown when operand shapes do not fit a primitive's signature.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Dense row-major array. `grad` is empty until a backward pass fills it.
template <typename T>
struct Tensor {
  using value_type = T;

  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;

  Tensor() = default;

  explicit Tensor(Shape s, T fill = T(0))
      : shape(std::move(s)), data(numel(shape), fill) {
    check_shape();
  }

  Tensor(Shape s, std::vector<T> values)
      : shape(std::move(s)), data(std::move(values)) {
    check_shape();
    if (data.size() != numel(shape)) {
      throw ShapeError("tensor: buffer of length " +
                       std::to_string(data.size()) + " does not match shape " +
                       oommix::to_string(shape));
    }
  }

  static Tensor scalar(T v) { return Tensor(Shape{1}, std::vector<T>{v}); }

  std::size_t size() const { return data.size(); }
  std::size_t rank() const { return shape.size(); }
  std::size_t dim(std::ptrdiff_t axis) const {
    return shape[axis < 0 ? static_cast<std::ptrdiff_t>(shape.size()) + axis
                          : axis];
  }
  bool has_grad() const { return !grad.empty(); }

  T& operator[](std::size_t i) { return data[i]; }
  const T& operator[](std::size_t i) const { return data[i]; }

  T item() const {
    if (data.size() != 1) {
      throw ShapeError("tensor: item() on shape " + oommix::to_string(shape));
    }
    return data[0];
  }

  /// Converts element type, dropping any gradient.
  template <typename U>
  Tensor<U> cast() const {
    return Tensor<U>(shape, std::vector<U>(data.begin(), data.end()));
  }

 private:
  void check_shape() const {
    for (auto d : shape) {
      if (d == 0) {
        throw ShapeError("tensor: zero-sized dimension in shape " +
                         oommix::to_string(shape));
      }
    }
  }
};

}  // namespace oommix
