#include <Eigen/Core>

#include "ctflow/autograd.hpp"

namespace ctflow {

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

struct ConvGeometry {
  std::size_t batch, in_channels, height, width;
  std::size_t out_channels, kernel, padding;
  std::size_t out_height, out_width;

  std::size_t col_rows() const { return in_channels * kernel * kernel; }
  std::size_t col_cols() const { return out_height * out_width; }
};

template <typename T>
ConvGeometry check_conv(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias, std::size_t padding) {
  if (x.rank() != 4) throw ShapeError("conv2d: input must be NCHW, got " + shape_str(x.shape()));
  if (weight.rank() != 4) throw ShapeError("conv2d: weight must be [Cout,Cin,k,k], got " + shape_str(weight.shape()));
  if (weight.dim(1) != x.dim(1)) {
    throw ShapeError("conv2d: input channels (dimension 1) is " + std::to_string(x.dim(1)) + " but weight expects " +
                     std::to_string(weight.dim(1)));
  }
  if (weight.dim(2) != weight.dim(3)) {
    throw ShapeError("conv2d: kernel must be square, got " + shape_str(weight.shape()));
  }
  if (weight.dim(2) % 2 == 0) throw ShapeError("conv2d: kernel size must be odd, got " + std::to_string(weight.dim(2)));
  if (bias.rank() != 1 || bias.dim(0) != weight.dim(0)) {
    throw ShapeError("conv2d: bias must be [" + std::to_string(weight.dim(0)) + "], got " + shape_str(bias.shape()));
  }
  ConvGeometry g{x.dim(0), x.dim(1), x.dim(2), x.dim(3), weight.dim(0), weight.dim(2), padding, 0, 0};
  if (g.height + 2 * padding < g.kernel || g.width + 2 * padding < g.kernel) {
    throw ShapeError("conv2d: kernel " + std::to_string(g.kernel) + " larger than padded input " +
                     shape_str(x.shape()));
  }
  g.out_height = g.height + 2 * padding - g.kernel + 1;
  g.out_width = g.width + 2 * padding - g.kernel + 1;
  return g;
}

// A run of output rows [oy0, oy1) of sample n; GEMMs work on several runs at once.
struct Segment {
  std::size_t n, oy0, oy1;
};

struct Chunk {
  std::vector<Segment> segments;
  std::size_t cols = 0;
};

// Packs output rows into chunks with at most ~4 MB of im2col columns: small
// patches share one GEMM, a large slice is split into row bands.
std::vector<Chunk> plan_chunks(const ConvGeometry& g, std::size_t elem_size) {
  constexpr std::size_t kBudgetBytes = std::size_t{4} << 20;
  const std::size_t max_cols =
      std::max<std::size_t>(g.out_width, kBudgetBytes / std::max<std::size_t>(1, g.col_rows() * elem_size));
  const std::size_t rows_per_run = std::max<std::size_t>(1, max_cols / g.out_width);
  std::vector<Chunk> chunks(1);
  for (std::size_t n = 0; n < g.batch; ++n) {
    for (std::size_t oy = 0; oy < g.out_height; oy += rows_per_run) {
      const std::size_t oy1 = std::min(g.out_height, oy + rows_per_run);
      const std::size_t cols = (oy1 - oy) * g.out_width;
      if (chunks.back().cols + cols > max_cols && chunks.back().cols > 0) chunks.emplace_back();
      chunks.back().segments.push_back({n, oy, oy1});
      chunks.back().cols += cols;
    }
  }
  return chunks;
}

// col[(c*k + ky)*k + kx, j] = x[c, oy + ky - p, ox + kx - p] (zero outside) for
// the output pixels of one segment, written at column offset `at` of a buffer
// with `ld` columns.
template <typename T>
void im2col(const T* x, const ConvGeometry& g, const Segment& s, T* col, std::size_t ld, std::size_t at) {
  const std::size_t k = g.kernel;
  const auto p = static_cast<std::ptrdiff_t>(g.padding);
  const auto h = static_cast<std::ptrdiff_t>(g.height);
  const auto w = static_cast<std::ptrdiff_t>(g.width);
  const T* sample = x + s.n * g.in_channels * g.height * g.width;
  for (std::size_t c = 0; c < g.in_channels; ++c) {
    const T* plane = sample + c * g.height * g.width;
    for (std::size_t ky = 0; ky < k; ++ky) {
      for (std::size_t kx = 0; kx < k; ++kx) {
        T* row = col + ((c * k + ky) * k + kx) * ld + at;
        const std::ptrdiff_t dx = static_cast<std::ptrdiff_t>(kx) - p;
        const std::ptrdiff_t x_lo = std::max<std::ptrdiff_t>(0, -dx);
        const std::ptrdiff_t x_hi = std::min<std::ptrdiff_t>(static_cast<std::ptrdiff_t>(g.out_width), w - dx);
        for (std::size_t oy = s.oy0; oy < s.oy1; ++oy) {
          T* dst = row + (oy - s.oy0) * g.out_width;
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy + ky) - p;
          if (iy < 0 || iy >= h || x_lo >= x_hi) {
            std::fill(dst, dst + g.out_width, T{0});
            continue;
          }
          const T* src = plane + iy * w;
          std::fill(dst, dst + x_lo, T{0});
          std::copy(src + (x_lo + dx), src + (x_hi + dx), dst + x_lo);
          std::fill(dst + x_hi, dst + g.out_width, T{0});
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const T* col, const ConvGeometry& g, const Segment& s, std::size_t ld, std::size_t at, T* x) {
  const std::size_t k = g.kernel;
  const auto p = static_cast<std::ptrdiff_t>(g.padding);
  const auto h = static_cast<std::ptrdiff_t>(g.height);
  const auto w = static_cast<std::ptrdiff_t>(g.width);
  T* sample = x + s.n * g.in_channels * g.height * g.width;
  for (std::size_t c = 0; c < g.in_channels; ++c) {
    T* plane = sample + c * g.height * g.width;
    for (std::size_t ky = 0; ky < k; ++ky) {
      for (std::size_t kx = 0; kx < k; ++kx) {
        const T* row = col + ((c * k + ky) * k + kx) * ld + at;
        const std::ptrdiff_t dx = static_cast<std::ptrdiff_t>(kx) - p;
        const std::ptrdiff_t x_lo = std::max<std::ptrdiff_t>(0, -dx);
        const std::ptrdiff_t x_hi = std::min<std::ptrdiff_t>(static_cast<std::ptrdiff_t>(g.out_width), w - dx);
        for (std::size_t oy = s.oy0; oy < s.oy1; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy + ky) - p;
          if (iy < 0 || iy >= h) continue;
          const T* src = row + (oy - s.oy0) * g.out_width;
          T* dst = plane + iy * w;
          for (std::ptrdiff_t ox = x_lo; ox < x_hi; ++ox) dst[ox + dx] += src[ox];
        }
      }
    }
  }
}

// Copies between NCHW output rows and the [Cout, chunk columns] GEMM layout.
template <typename T>
void scatter_rows(const T* mat, const ConvGeometry& g, const Segment& s, std::size_t ld, std::size_t at, T* out) {
  const std::size_t run = (s.oy1 - s.oy0) * g.out_width;
  for (std::size_t o = 0; o < g.out_channels; ++o) {
    const T* src = mat + o * ld + at;
    std::copy(src, src + run, out + (s.n * g.out_channels + o) * g.col_cols() + s.oy0 * g.out_width);
  }
}

template <typename T>
void gather_rows(const T* in, const ConvGeometry& g, const Segment& s, std::size_t ld, std::size_t at, T* mat) {
  const std::size_t run = (s.oy1 - s.oy0) * g.out_width;
  for (std::size_t o = 0; o < g.out_channels; ++o) {
    const T* src = in + (s.n * g.out_channels + o) * g.col_cols() + s.oy0 * g.out_width;
    std::copy(src, src + run, mat + o * ld + at);
  }
}

template <typename T>
Tensor<T> conv_forward(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias, const ConvGeometry& g) {
  Tensor<T> out({g.batch, g.out_channels, g.out_height, g.out_width});
  ConstMatMap<T> wmat(weight.ptr(), g.out_channels, g.col_rows());
  std::vector<T> col, omat_buf;
  for (const Chunk& chunk : plan_chunks(g, sizeof(T))) {
    col.resize(g.col_rows() * chunk.cols);
    omat_buf.resize(g.out_channels * chunk.cols);
    std::size_t at = 0;
    for (const Segment& s : chunk.segments) {
      im2col(x.ptr(), g, s, col.data(), chunk.cols, at);
      at += (s.oy1 - s.oy0) * g.out_width;
    }
    ConstMatMap<T> colmat(col.data(), g.col_rows(), chunk.cols);
    MatMap<T> omat(omat_buf.data(), g.out_channels, chunk.cols);
    omat.noalias() = wmat * colmat;
    for (std::size_t o = 0; o < g.out_channels; ++o) omat.row(o).array() += bias[o];
    at = 0;
    for (const Segment& s : chunk.segments) {
      scatter_rows(omat_buf.data(), g, s, chunk.cols, at, out.ptr());
      at += (s.oy1 - s.oy0) * g.out_width;
    }
  }
  return out;
}

}  // namespace

namespace kernels {

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias, std::size_t padding) {
  return conv_forward(x, weight, bias, check_conv(x, weight, bias, padding));
}

}  // namespace kernels

template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& weight, const Var<T>& bias, std::size_t padding) {
  const ConvGeometry g = check_conv(x.value(), weight.value(), bias.value(), padding);
  Tensor<T> out = conv_forward(x.value(), weight.value(), bias.value(), g);
  return make_result<T>(std::move(out), "conv2d", {x, weight, bias}, [g](detail::Node<T>& self) {
    auto& in = *self.inputs[0];
    auto& wt = *self.inputs[1];
    auto& bs = *self.inputs[2];
    ConstMatMap<T> wmat(wt.value.ptr(), g.out_channels, g.col_rows());
    std::vector<T> col, dout_buf;
    for (const Chunk& chunk : plan_chunks(g, sizeof(T))) {
      dout_buf.resize(g.out_channels * chunk.cols);
      col.resize(g.col_rows() * chunk.cols);
      std::size_t at = 0;
      for (const Segment& s : chunk.segments) {
        gather_rows(self.grad.ptr(), g, s, chunk.cols, at, dout_buf.data());
        if (wt.requires_grad) im2col(in.value.ptr(), g, s, col.data(), chunk.cols, at);
        at += (s.oy1 - s.oy0) * g.out_width;
      }
      ConstMatMap<T> dout(dout_buf.data(), g.out_channels, chunk.cols);
      MatMap<T> colmat(col.data(), g.col_rows(), chunk.cols);
      if (bs.requires_grad) {
        Tensor<T>& db = bs.grad_buffer();
        for (std::size_t o = 0; o < g.out_channels; ++o) {
          // Scalar loop: Eigen's vectorised sum is alignment dependent.
          const T* row = dout_buf.data() + o * chunk.cols;
          T acc{0};
          for (std::size_t c = 0; c < chunk.cols; ++c) acc += row[c];
          db[o] += acc;
        }
      }
      if (wt.requires_grad) {
        MatMap<T> dw(wt.grad_buffer().ptr(), g.out_channels, g.col_rows());
        dw.noalias() += dout * colmat.transpose();
      }
      if (in.requires_grad) {
        colmat.noalias() = wmat.transpose() * dout;
        T* dx = in.grad_buffer().ptr();
        at = 0;
        for (const Segment& s : chunk.segments) {
          col2im_add(col.data(), g, s, chunk.cols, at, dx);
          at += (s.oy1 - s.oy0) * g.out_width;
        }
      }
    }
  });
}

template Var<float> conv2d(const Var<float>&, const Var<float>&, const Var<float>&, std::size_t);
template Var<double> conv2d(const Var<double>&, const Var<double>&, const Var<double>&, std::size_t);
template Tensor<float> kernels::conv2d(const Tensor<float>&, const Tensor<float>&, const Tensor<float>&, std::size_t);
template Tensor<double> kernels::conv2d(const Tensor<double>&, const Tensor<double>&, const Tensor<double>&,
                                        std::size_t);
template Var<long double> conv2d(const Var<long double>&, const Var<long double>&, const Var<long double>&,
                                 std::size_t);

}  // namespace ctflow
