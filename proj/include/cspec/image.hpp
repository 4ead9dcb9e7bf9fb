#pragma once

#include <string>
#include <utility>

#include "cspec/errors.hpp"
#include "cspec/tensor.hpp"

namespace cspec {

// Multi-channel raster with a spectrum tag and a validity mask. Intensities
// are kept in [0,1]; valid marks paired / in-bounds pixels in [0,1].
template <typename T>
struct ImageTensor {
  Tensor<T> data;       // (C, H, W)
  std::string spectrum;  // e.g. "rgb", "nir", "fir", "synthA"
  Tensor<T> valid;      // (H, W)

  ImageTensor() = default;
  ImageTensor(Tensor<T> d, std::string spec)
      : data(std::move(d)), spectrum(std::move(spec)) {
    valid = Tensor<T>::full({data.size(1), data.size(2)}, T(1));
  }
  ImageTensor(Tensor<T> d, std::string spec, Tensor<T> v)
      : data(std::move(d)), spectrum(std::move(spec)), valid(std::move(v)) {
    require(valid.rank() == 2 && valid.size(0) == data.size(1) &&
                valid.size(1) == data.size(2),
            "ImageTensor: valid mask dims mismatch");
  }

  int channels() const { return data.size(0); }
  int height() const { return data.size(1); }
  int width() const { return data.size(2); }

  template <typename U>
  ImageTensor<U> cast() const {
    ImageTensor<U> out;
    out.data = data.template cast<U>();
    out.spectrum = spectrum;
    out.valid = valid.template cast<U>();
    return out;
  }
};

// Dense 2-vector field in pixel units, backward-warp convention:
// output(p) samples input at p + f(p). data layout (2, H, W), channel 0 = u.
template <typename T>
struct FlowField {
  Tensor<T> data;  // (2, H, W)

  FlowField() = default;
  explicit FlowField(Tensor<T> d) : data(std::move(d)) {
    require(data.rank() == 3 && data.size(0) == 2, "FlowField: data must be 2HW");
  }
  static FlowField zeros(int h, int w) { return FlowField(Tensor<T>({2, h, w})); }

  int height() const { return data.size(1); }
  int width() const { return data.size(2); }
  T& u(int y, int x) { return data.at(0, y, x); }
  T& v(int y, int x) { return data.at(1, y, x); }
  T u(int y, int x) const { return data.at(0, y, x); }
  T v(int y, int x) const { return data.at(1, y, x); }

  template <typename U>
  FlowField<U> cast() const {
    FlowField<U> out;
    out.data = data.template cast<U>();
    return out;
  }
};

using Imagef = ImageTensor<float>;
using Imaged = ImageTensor<double>;
using Flowf = FlowField<float>;
using Flowd = FlowField<double>;

}  // namespace cspec
