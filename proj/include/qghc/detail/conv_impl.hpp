#pragma once

// Raw im2col convolution loops for one (sample, group) slice. Every
// accumulation runs in a fixed order so results are bit-reproducible, and the
// innermost loops are over contiguous memory so the compiler can vectorise
// them without reassociating sums.

#include <algorithm>
#include <cstddef>
#include <vector>

namespace qghc::detail {

struct ConvGeom {
  std::size_t cin, cout;  // per group
  std::size_t H, W, Ho, Wo;
  std::size_t kh, kw, stride, pad;

  std::size_t rows() const { return cin * kh * kw; }
  std::size_t cols() const { return Ho * Wo; }
};

// cols[r][j], r = (ic, ky, kx), j = (oy, ox)
template <class T>
void im2col(const T* in, const ConvGeom& g, T* cols) {
  for (std::size_t ic = 0; ic < g.cin; ++ic)
    for (std::size_t ky = 0; ky < g.kh; ++ky)
      for (std::size_t kx = 0; kx < g.kw; ++kx) {
        T* row = cols + ((ic * g.kh + ky) * g.kw + kx) * g.cols();
        const T* plane = in + ic * g.H * g.W;
        for (std::size_t oy = 0; oy < g.Ho; ++oy) {
          const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.pad);
          T* dst = row + oy * g.Wo;
          if (iy < 0 || iy >= static_cast<long>(g.H)) {
            std::fill_n(dst, g.Wo, T{0});
            continue;
          }
          const T* src = plane + iy * g.W;
          for (std::size_t ox = 0; ox < g.Wo; ++ox) {
            const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.pad);
            dst[ox] = (ix < 0 || ix >= static_cast<long>(g.W)) ? T{0} : src[ix];
          }
        }
      }
}

template <class T>
void col2im_add(const T* cols, const ConvGeom& g, T* in_grad) {
  for (std::size_t ic = 0; ic < g.cin; ++ic)
    for (std::size_t ky = 0; ky < g.kh; ++ky)
      for (std::size_t kx = 0; kx < g.kw; ++kx) {
        const T* row = cols + ((ic * g.kh + ky) * g.kw + kx) * g.cols();
        T* plane = in_grad + ic * g.H * g.W;
        for (std::size_t oy = 0; oy < g.Ho; ++oy) {
          const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.pad);
          if (iy < 0 || iy >= static_cast<long>(g.H)) continue;
          T* dst = plane + iy * g.W;
          const T* src = row + oy * g.Wo;
          for (std::size_t ox = 0; ox < g.Wo; ++ox) {
            const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.pad);
            if (ix >= 0 && ix < static_cast<long>(g.W)) dst[ix] += src[ox];
          }
        }
      }
}

// out[oc][j] = sum_r w[oc][r] * cols[r][j]
template <class T>
void conv_forward(const T* cols, const T* w, const ConvGeom& g, T* out) {
  const std::size_t R = g.rows(), J = g.cols();
  for (std::size_t oc = 0; oc < g.cout; ++oc) {
    T* o = out + oc * J;
    std::fill_n(o, J, T{0});
    const T* wrow = w + oc * R;
    for (std::size_t r = 0; r < R; ++r) {
      const T wv = wrow[r];
      const T* c = cols + r * J;
      for (std::size_t j = 0; j < J; ++j) o[j] += wv * c[j];
    }
  }
}

// gcols[r][j] = sum_oc w[oc][r] * gout[oc][j]
template <class T>
void conv_backward_cols(const T* gout, const T* w, const ConvGeom& g, T* gcols) {
  const std::size_t R = g.rows(), J = g.cols();
  std::fill_n(gcols, R * J, T{0});
  for (std::size_t oc = 0; oc < g.cout; ++oc) {
    const T* go = gout + oc * J;
    const T* wrow = w + oc * R;
    for (std::size_t r = 0; r < R; ++r) {
      const T wv = wrow[r];
      T* c = gcols + r * J;
      for (std::size_t j = 0; j < J; ++j) c[j] += wv * go[j];
    }
  }
}

// gw[oc][r] += sum_j gout[oc][j] * cols[r][j], using transposed cols so the
// inner loop runs over r.
template <class T>
void conv_backward_weight(const T* gout, const T* cols, const ConvGeom& g, T* gw, std::vector<T>& scratch) {
  const std::size_t R = g.rows(), J = g.cols();
  scratch.resize(R * J);
  T* colsT = scratch.data();
  for (std::size_t r = 0; r < R; ++r)
    for (std::size_t j = 0; j < J; ++j) colsT[j * R + r] = cols[r * J + j];
  for (std::size_t oc = 0; oc < g.cout; ++oc) {
    T* gwr = gw + oc * R;
    const T* go = gout + oc * J;
    for (std::size_t j = 0; j < J; ++j) {
      const T gv = go[j];
      const T* ct = colsT + j * R;
      for (std::size_t r = 0; r < R; ++r) gwr[r] += gv * ct[r];
    }
  }
}

}  // namespace qghc::detail
