#pragma once

#include <cstdint>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace cde {

using Shape = std::vector<std::int64_t>;

inline std::int64_t shape_numel(const Shape& s) {
  std::int64_t n = 1;
  for (auto d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << "]";
  return os.str();
}

/// Dense row-major n-d array. The scalar type is a template parameter:
/// double is the default everywhere, float is selected via config.
template <typename T>
struct Tensor {
  Shape shape;
  std::vector<T> v;
  bool requires_grad = false;

  Tensor() = default;

  explicit Tensor(Shape s, T fill = T(0)) : shape(std::move(s)) {
    check_shape(shape);
    v.assign(static_cast<std::size_t>(shape_numel(shape)), fill);
  }

  Tensor(Shape s, std::vector<T> data) : shape(std::move(s)), v(std::move(data)) {
    check_shape(shape);
    if (static_cast<std::int64_t>(v.size()) != shape_numel(shape))
      throw std::invalid_argument("Tensor: " + std::to_string(v.size()) +
                                  " values do not fill shape " + shape_str(shape));
  }

  static Tensor zeros(Shape s) { return Tensor(std::move(s)); }
  static Tensor full(Shape s, T val) { return Tensor(std::move(s), val); }

  static Tensor scalar(T val) {
    Tensor t(Shape{1});
    t.v[0] = val;
    return t;
  }

  std::int64_t numel() const { return static_cast<std::int64_t>(v.size()); }
  int ndim() const { return static_cast<int>(shape.size()); }
  std::int64_t dim(int i) const { return shape[static_cast<std::size_t>(i)]; }

  T* data() { return v.data(); }
  const T* data() const { return v.data(); }

  T& operator[](std::int64_t i) { return v[static_cast<std::size_t>(i)]; }
  const T& operator[](std::int64_t i) const { return v[static_cast<std::size_t>(i)]; }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out;
    out.shape = shape;
    out.requires_grad = requires_grad;
    out.v.resize(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) out.v[i] = static_cast<U>(v[i]);
    return out;
  }

 private:
  static void check_shape(const Shape& s) {
    for (auto d : s)
      if (d <= 0) throw std::invalid_argument("Tensor: non-positive dim in " + shape_str(s));
  }
};

}  // namespace cde
