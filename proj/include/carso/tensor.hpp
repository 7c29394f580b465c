#pragma once

#include <cstddef>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace carso {

struct ShapeError : std::runtime_error {
  explicit ShapeError(const std::string& what) : std::runtime_error(what) {}
};

using Shape = std::vector<int>;

inline std::size_t numel(const Shape& s) {
  std::size_t n = 1;
  for (int e : s) {
    if (e < 0) throw ShapeError("negative extent in shape");
    n *= static_cast<std::size_t>(e);
  }
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "(";
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ")";
  return os.str();
}

inline void check_shape(bool ok, const std::string& op, const Shape& a,
                        const Shape& b) {
  if (!ok)
    throw ShapeError(op + ": incompatible shapes " + shape_str(a) + " vs " +
                     shape_str(b));
}

// Plain dense row-major tensor value, no autodiff participation.
template <typename T>
struct TensorData {
  Shape shape;
  std::vector<T> v;

  TensorData() = default;
  explicit TensorData(Shape s) : shape(std::move(s)), v(numel(shape), T(0)) {}
  TensorData(Shape s, std::vector<T> data) : shape(std::move(s)), v(std::move(data)) {
    if (numel(shape) != v.size())
      throw ShapeError("tensor data length " + std::to_string(v.size()) +
                       " does not match shape " + shape_str(shape));
  }

  std::size_t size() const { return v.size(); }
  T* data() { return v.data(); }
  const T* data() const { return v.data(); }
};

// conv output extent: floor((in + 2p - k) / s) + 1
inline int conv_out_extent(int in, int k, int s, int p) {
  int num = in + 2 * p - k;
  if (num < 0 || s <= 0)
    throw ShapeError("conv: kernel " + std::to_string(k) + " exceeds padded input " +
                     std::to_string(in + 2 * p));
  return num / s + 1;
}

// transposed conv inverts it: (in - 1) * s - 2p + k + output_padding
inline int conv_transpose_out_extent(int in, int k, int s, int p, int op) {
  int out = (in - 1) * s - 2 * p + k + op;
  if (out <= 0) throw ShapeError("conv_transpose: nonpositive output extent");
  return out;
}

}  // namespace carso
