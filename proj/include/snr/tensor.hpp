#pragma once

#include <Eigen/Core>

#include <array>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace snr {

using Index = Eigen::Index;

template <typename S>
using ArrayX = Eigen::Array<S, Eigen::Dynamic, 1>;

template <typename S>
using MatRM = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Shape of a graph value: scalar, channel vector, (rows x cols) matrix or
// [batch, channel, height, width] feature map. Unused extents stay 1 so
// count() is always the plain product.
struct Shape {
  int rank = 0;
  std::array<Index, 4> dims{1, 1, 1, 1};

  static Shape scalar() { return Shape{}; }
  static Shape vector(Index len) { return Shape{1, {len, 1, 1, 1}}; }
  static Shape matrix(Index rows, Index cols) { return Shape{2, {rows, cols, 1, 1}}; }
  static Shape tensor4(Index n, Index c, Index h, Index w) { return Shape{4, {n, c, h, w}}; }

  Index count() const { return dims[0] * dims[1] * dims[2] * dims[3]; }
  bool operator==(const Shape& o) const { return rank == o.rank && dims == o.dims; }
  bool operator!=(const Shape& o) const { return !(*this == o); }

  std::string str() const {
    std::string s = "[";
    for (int i = 0; i < rank; ++i) {
      if (i) s += "x";
      s += std::to_string(dims[i]);
    }
    return s + "]";
  }
};

// Dense [n, c, h, w] value container, row-major over (n, c, h, w).
template <typename S>
struct Tensor4 {
  Index n = 0, c = 0, h = 0, w = 0;
  ArrayX<S> data;

  Tensor4() = default;
  Tensor4(Index n_, Index c_, Index h_, Index w_)
      : n(n_), c(c_), h(h_), w(w_), data(ArrayX<S>::Zero(checked_count(n_, c_, h_, w_))) {}

  static Index checked_count(Index n_, Index c_, Index h_, Index w_) {
    if (n_ < 0 || c_ < 0 || h_ < 0 || w_ < 0) throw std::invalid_argument("Tensor4: negative extent");
    return n_ * c_ * h_ * w_;
  }

  Index count() const { return n * c * h * w; }
  Shape shape() const { return Shape::tensor4(n, c, h, w); }

  Index offset(Index i, Index k, Index y, Index x) const { return ((i * c + k) * h + y) * w + x; }
  S& operator()(Index i, Index k, Index y, Index x) { return data[offset(i, k, y, x)]; }
  const S& operator()(Index i, Index k, Index y, Index x) const { return data[offset(i, k, y, x)]; }

  bool all_finite() const {
    for (Index i = 0; i < data.size(); ++i)
      if (!std::isfinite(static_cast<double>(data[i]))) return false;
    return true;
  }
};

template <typename S>
void require_finite(const ArrayX<S>& a, const char* what) {
  for (Index i = 0; i < a.size(); ++i)
    if (!std::isfinite(static_cast<double>(a[i])))
      throw std::runtime_error(std::string("non-finite value in ") + what);
}

// splitmix64; used to derive independent RNG streams from one master seed.
inline std::uint64_t mix_seed(std::uint64_t z) {
  z += 0x9e3779b97f4a7c15ull;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) { return mix_seed(a ^ mix_seed(b)); }

}  // namespace snr
