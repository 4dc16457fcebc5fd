#pragma once

#include "rfb/tensor.hpp"

#include <Eigen/Core>

#include <limits>
#include <optional>

namespace rfb {

/// Geometry of a convolution or pooling window.
struct ConvParams {
  std::size_t kh = 3, kw = 3;
  std::size_t stride_h = 1, stride_w = 1;
  std::size_t pad_h = 0, pad_w = 0;
  std::size_t dil_h = 1, dil_w = 1;

  static ConvParams square(std::size_t k, std::size_t stride = 1,
                           std::size_t pad = 0, std::size_t dilation = 1) {
    return {k, k, stride, stride, pad, pad, dilation, dilation};
  }
  /// Padding that keeps the extent at stride 1: (k_eff - 1) / 2 per axis.
  static ConvParams same(std::size_t kh, std::size_t kw, std::size_t stride = 1,
                         std::size_t dilation = 1) {
    ConvParams p{kh, kw, stride, stride, 0, 0, dilation, dilation};
    p.pad_h = (p.eff_h() - 1) / 2;
    p.pad_w = (p.eff_w() - 1) / 2;
    return p;
  }

  std::size_t eff_h() const { return kh + (kh - 1) * (dil_h - 1); }
  std::size_t eff_w() const { return kw + (kw - 1) * (dil_w - 1); }

  void validate() const {
    if (kh == 0 || kw == 0 || stride_h == 0 || stride_w == 0 || dil_h == 0 ||
        dil_w == 0)
      throw ShapeError("conv params: kernel, stride and dilation must be positive");
  }

  std::size_t out_h(std::size_t in) const { return out_extent(in, pad_h, eff_h(), stride_h); }
  std::size_t out_w(std::size_t in) const { return out_extent(in, pad_w, eff_w(), stride_w); }

private:
  static std::size_t out_extent(std::size_t in, std::size_t pad, std::size_t eff,
                                std::size_t stride) {
    if (in + 2 * pad < eff)
      throw ShapeError("conv params: window of extent " + std::to_string(eff) +
                       " does not fit input " + std::to_string(in) + " with padding " +
                       std::to_string(pad));
    return (in + 2 * pad - eff) / stride + 1;
  }
};

namespace detail {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T> using MapMat = Eigen::Map<RowMat<T>>;
template <typename T> using CMapMat = Eigen::Map<const RowMat<T>>;

/// Product evaluated on owned copies. Eigen's vectorized kernels pick
/// different code paths for differently aligned buffers, so operating on
/// heap vectors directly would make results depend on allocation addresses.
template <typename T, typename A, typename B> RowMat<T> product(const A &a, const B &b) {
  const RowMat<T> lhs = a, rhs = b;
  RowMat<T> out(lhs.rows(), rhs.cols());
  out.noalias() = lhs * rhs;
  return out;
}

template <typename T, typename M> void add_into(T *dst, const M &m) {
  const T *src = m.data();
  for (Eigen::Index i = 0; i < m.size(); ++i)
    dst[i] += src[i];
}

// (C*kh*kw) x (Ho*Wo) column buffer for one image.
template <typename T>
void im2col(const T *img, std::size_t c, std::size_t h, std::size_t w,
            const ConvParams &p, std::size_t ho, std::size_t wo, T *col) {
  for (std::size_t ci = 0; ci < c; ++ci)
    for (std::size_t ki = 0; ki < p.kh; ++ki)
      for (std::size_t kj = 0; kj < p.kw; ++kj) {
        T *row = col + ((ci * p.kh + ki) * p.kw + kj) * ho * wo;
        const long oy = static_cast<long>(ki * p.dil_h) - static_cast<long>(p.pad_h);
        const long ox = static_cast<long>(kj * p.dil_w) - static_cast<long>(p.pad_w);
        for (std::size_t y = 0; y < ho; ++y) {
          const long iy = static_cast<long>(y * p.stride_h) + oy;
          T *dst = row + y * wo;
          if (iy < 0 || iy >= static_cast<long>(h)) {
            std::fill(dst, dst + wo, T(0));
            continue;
          }
          const T *src = img + (ci * h + static_cast<std::size_t>(iy)) * w;
          for (std::size_t x = 0; x < wo; ++x) {
            const long ix = static_cast<long>(x * p.stride_w) + ox;
            dst[x] = (ix < 0 || ix >= static_cast<long>(w)) ? T(0)
                                                            : src[static_cast<std::size_t>(ix)];
          }
        }
      }
}

template <typename T>
void col2im_add(const T *col, std::size_t c, std::size_t h, std::size_t w,
                const ConvParams &p, std::size_t ho, std::size_t wo, T *img) {
  for (std::size_t ci = 0; ci < c; ++ci)
    for (std::size_t ki = 0; ki < p.kh; ++ki)
      for (std::size_t kj = 0; kj < p.kw; ++kj) {
        const T *row = col + ((ci * p.kh + ki) * p.kw + kj) * ho * wo;
        const long oy = static_cast<long>(ki * p.dil_h) - static_cast<long>(p.pad_h);
        const long ox = static_cast<long>(kj * p.dil_w) - static_cast<long>(p.pad_w);
        for (std::size_t y = 0; y < ho; ++y) {
          const long iy = static_cast<long>(y * p.stride_h) + oy;
          if (iy < 0 || iy >= static_cast<long>(h))
            continue;
          T *dst = img + (ci * h + static_cast<std::size_t>(iy)) * w;
          const T *src = row + y * wo;
          for (std::size_t x = 0; x < wo; ++x) {
            const long ix = static_cast<long>(x * p.stride_w) + ox;
            if (ix >= 0 && ix < static_cast<long>(w))
              dst[static_cast<std::size_t>(ix)] += src[x];
          }
        }
      }
}

inline bool is_pointwise(const ConvParams &p) {
  return p.kh == 1 && p.kw == 1 && p.stride_h == 1 && p.stride_w == 1 &&
         p.pad_h == 0 && p.pad_w == 0;
}

template <typename T> bool wants_grad(const std::shared_ptr<Node<T>> &n) {
  return n && n->requires_grad;
}

} // namespace detail

/// Dilated 2-D cross-correlation. `weight` is (Cout, Cin, kh, kw); `bias` is
/// empty or holds Cout values in any shape.
template <typename T>
Tensor<T> conv2d(const Tensor<T> &input, const Tensor<T> &weight,
                 const std::optional<Tensor<T>> &bias, const ConvParams &p) {
  p.validate();
  const Shape is = input.shape(), ws = weight.shape();
  if (ws.c != is.c)
    throw ShapeError("conv2d: input has " + std::to_string(is.c) +
                     " channels, weight expects " + std::to_string(ws.c));
  if (ws.h != p.kh || ws.w != p.kw)
    throw ShapeError("conv2d: weight " + ws.str() + " does not match kernel size");
  if (bias && bias->numel() != ws.n)
    throw ShapeError("conv2d: bias length must equal output channels");
  const std::size_t ho = p.out_h(is.h), wo = p.out_w(is.w);
  const std::size_t cout = ws.n, k = ws.c * ws.h * ws.w, hw = ho * wo;
  const Shape os{is.n, cout, ho, wo};
  const bool pointwise = detail::is_pointwise(p);

  std::vector<T> out(os.numel());
  // Column buffers are kept for the weight gradient.
  auto cols = std::make_shared<std::vector<T>>(pointwise ? 0 : is.n * k * hw);
  detail::CMapMat<T> W(weight.ptr(), cout, k);
  for (std::size_t n = 0; n < is.n; ++n) {
    const T *img = input.ptr() + n * is.c * is.plane();
    const T *col = img;
    if (!pointwise) {
      T *buf = cols->data() + n * k * hw;
      detail::im2col(img, is.c, is.h, is.w, p, ho, wo, buf);
      col = buf;
    }
    detail::MapMat<T> Y(out.data() + n * cout * hw, cout, hw);
    Y = detail::product<T>(W, detail::CMapMat<T>(col, k, hw));
    if (bias) {
      const T *b = bias->ptr();
      for (std::size_t o = 0; o < cout; ++o)
        Y.row(o).array() += b[o];
    }
  }
  check_finite(out, "conv2d");

  std::vector<Tensor<T>> parents{input, weight};
  if (bias)
    parents.push_back(*bias);
  auto in_node = input.node_ptr(), w_node = weight.node_ptr();
  auto b_node = bias ? bias->node_ptr() : nullptr;
  return make_result<T>(
      os, std::move(out), "conv2d", parents,
      [=](detail::Node<T> &self) {
        detail::CMapMat<T> Wm(w_node->data->data(), cout, k);
        for (std::size_t n = 0; n < is.n; ++n) {
          detail::CMapMat<T> dY(self.grad.data() + n * cout * hw, cout, hw);
          const T *col = pointwise ? in_node->data->data() + n * is.c * is.plane()
                                   : cols->data() + n * k * hw;
          if (detail::wants_grad(w_node)) {
            detail::add_into(w_node->grad.data(),
                             detail::product<T>(dY, detail::CMapMat<T>(col, k, hw).transpose()));
          }
          if (detail::wants_grad(b_node)) {
            T *db = b_node->grad.data();
            const T *g = self.grad.data() + n * cout * hw;
            for (std::size_t o = 0; o < cout; ++o) {
              T acc = 0;
              for (std::size_t i = 0; i < hw; ++i)
                acc += g[o * hw + i];
              db[o] += acc;
            }
          }
          if (detail::wants_grad(in_node)) {
            T *dimg = in_node->grad.data() + n * is.c * is.plane();
            if (pointwise) {
              detail::add_into(dimg, detail::product<T>(Wm.transpose(), dY));
            } else {
              const detail::RowMat<T> dC = detail::product<T>(Wm.transpose(), dY);
              detail::col2im_add(dC.data(), is.c, is.h, is.w, p, ho, wo, dimg);
            }
          }
        }
      });
}

enum class PoolKind { max, avg };

/// Pooling over the dilated tap grid. Max pooling pads with -inf, average
/// pooling pads with 0 and always divides by kh*kw.
template <typename T>
Tensor<T> pool2d(const Tensor<T> &input, PoolKind kind, const ConvParams &p) {
  p.validate();
  const Shape is = input.shape();
  const std::size_t ho = p.out_h(is.h), wo = p.out_w(is.w);
  const Shape os{is.n, is.c, ho, wo};
  std::vector<T> out(os.numel());
  auto argmax = std::make_shared<std::vector<std::size_t>>(
      kind == PoolKind::max ? os.numel() : 0);
  const T *x = input.ptr();
  const T inv_taps = T(1) / static_cast<T>(p.kh * p.kw);

  for (std::size_t plane = 0; plane < is.n * is.c; ++plane) {
    const T *src = x + plane * is.plane();
    for (std::size_t y = 0; y < ho; ++y)
      for (std::size_t xo = 0; xo < wo; ++xo) {
        T best = -std::numeric_limits<T>::infinity();
        std::size_t best_idx = std::numeric_limits<std::size_t>::max();
        T acc = 0;
        for (std::size_t ki = 0; ki < p.kh; ++ki) {
          const long iy = static_cast<long>(y * p.stride_h + ki * p.dil_h) -
                          static_cast<long>(p.pad_h);
          if (iy < 0 || iy >= static_cast<long>(is.h))
            continue;
          for (std::size_t kj = 0; kj < p.kw; ++kj) {
            const long ix = static_cast<long>(xo * p.stride_w + kj * p.dil_w) -
                            static_cast<long>(p.pad_w);
            if (ix < 0 || ix >= static_cast<long>(is.w))
              continue;
            const std::size_t idx = static_cast<std::size_t>(iy) * is.w +
                                    static_cast<std::size_t>(ix);
            if (kind == PoolKind::max) {
              if (src[idx] > best) {
                best = src[idx];
                best_idx = idx;
              }
            } else {
              acc += src[idx];
            }
          }
        }
        const std::size_t o = (plane * ho + y) * wo + xo;
        if (kind == PoolKind::max) {
          if (best_idx == std::numeric_limits<std::size_t>::max())
            throw ShapeError("pool2d: window at (" + std::to_string(y) + "," +
                             std::to_string(xo) + ") covers only padding");
          out[o] = best;
          (*argmax)[o] = plane * is.plane() + best_idx;
        } else {
          out[o] = acc * inv_taps;
        }
      }
  }

  auto in_node = input.node_ptr();
  return make_result<T>(
      os, std::move(out), kind == PoolKind::max ? "maxpool2d" : "avgpool2d", {input},
      [=](detail::Node<T> &self) {
        T *dx = in_node->grad.data();
        if (kind == PoolKind::max) {
          for (std::size_t o = 0; o < self.grad.size(); ++o)
            dx[(*argmax)[o]] += self.grad[o];
          return;
        }
        for (std::size_t plane = 0; plane < is.n * is.c; ++plane) {
          T *dplane = dx + plane * is.plane();
          for (std::size_t y = 0; y < ho; ++y)
            for (std::size_t xo = 0; xo < wo; ++xo) {
              const T g = self.grad[(plane * ho + y) * wo + xo] * inv_taps;
              for (std::size_t ki = 0; ki < p.kh; ++ki) {
                const long iy = static_cast<long>(y * p.stride_h + ki * p.dil_h) -
                                static_cast<long>(p.pad_h);
                if (iy < 0 || iy >= static_cast<long>(is.h))
                  continue;
                for (std::size_t kj = 0; kj < p.kw; ++kj) {
                  const long ix = static_cast<long>(xo * p.stride_w + kj * p.dil_w) -
                                  static_cast<long>(p.pad_w);
                  if (ix >= 0 && ix < static_cast<long>(is.w))
                    dplane[static_cast<std::size_t>(iy) * is.w +
                           static_cast<std::size_t>(ix)] += g;
                }
              }
            }
        }
      });
}

template <typename T> Tensor<T> relu(const Tensor<T> &input) {
  std::vector<T> out(input.data());
  for (T &v : out)
    v = v > T(0) ? v : T(0);
  auto in_node = input.node_ptr();
  return make_result<T>(input.shape(), std::move(out), "relu", {input},
                        [=](detail::Node<T> &self) {
                          const auto &x = *in_node->data;
                          for (std::size_t i = 0; i < x.size(); ++i)
                            if (x[i] > T(0))
                              in_node->grad[i] += self.grad[i];
                        });
}

/// Concatenates along the channel axis in argument order.
template <typename T>
Tensor<T> concat_channels(const std::vector<Tensor<T>> &parts) {
  if (parts.empty())
    throw ShapeError("concat_channels: no inputs");
  const Shape first = parts.front().shape();
  std::size_t channels = 0;
  for (const auto &t : parts) {
    const Shape s = t.shape();
    if (s.n != first.n || s.h != first.h || s.w != first.w)
      throw ShapeError("concat_channels: " + s.str() + " incompatible with " +
                       first.str());
    channels += s.c;
  }
  const Shape os{first.n, channels, first.h, first.w};
  const std::size_t plane = first.plane();
  std::vector<T> out(os.numel());
  for (std::size_t n = 0; n < first.n; ++n) {
    T *dst = out.data() + n * channels * plane;
    for (const auto &t : parts) {
      const std::size_t len = t.shape().c * plane;
      std::copy_n(t.ptr() + n * len, len, dst);
      dst += len;
    }
  }
  std::vector<std::shared_ptr<detail::Node<T>>> nodes;
  for (const auto &t : parts)
    nodes.push_back(t.node_ptr());
  return make_result<T>(os, std::move(out), "concat_channels", parts,
                        [=](detail::Node<T> &self) {
                          for (std::size_t n = 0; n < first.n; ++n) {
                            const T *src = self.grad.data() + n * channels * plane;
                            for (const auto &node : nodes) {
                              const std::size_t len = node->shape.c * plane;
                              if (node->requires_grad) {
                                T *dst = node->grad.data() + n * len;
                                for (std::size_t i = 0; i < len; ++i)
                                  dst[i] += src[i];
                              }
                              src += len;
                            }
                          }
                        });
}

/// main + alpha * shortcut
template <typename T>
Tensor<T> scale_add(const Tensor<T> &main, const Tensor<T> &shortcut, T alpha) {
  if (main.shape() != shortcut.shape())
    throw ShapeError("scale_add: " + main.shape().str() + " vs " +
                     shortcut.shape().str());
  std::vector<T> out(main.data());
  const T *s = shortcut.ptr();
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] += alpha * s[i];
  auto a = main.node_ptr(), b = shortcut.node_ptr();
  return make_result<T>(main.shape(), std::move(out), "scale_add", {main, shortcut},
                        [=](detail::Node<T> &self) {
                          if (a->requires_grad)
                            for (std::size_t i = 0; i < self.grad.size(); ++i)
                              a->grad[i] += self.grad[i];
                          if (b->requires_grad)
                            for (std::size_t i = 0; i < self.grad.size(); ++i)
                              b->grad[i] += alpha * self.grad[i];
                        });
}

template <typename T> Tensor<T> sum(const Tensor<T> &input) {
  T acc = 0;
  for (T v : input.data())
    acc += v;
  auto in_node = input.node_ptr();
  return make_result<T>(Shape{1, 1, 1, 1}, {acc}, "sum", {input},
                        [=](detail::Node<T> &self) {
                          for (T &g : in_node->grad)
                            g += self.grad[0];
                        });
}

/// Sum of input * weights elementwise; weights are constants.
template <typename T>
Tensor<T> weighted_sum(const Tensor<T> &input, std::vector<T> weights) {
  if (weights.size() != input.numel())
    throw ShapeError("weighted_sum: weight count mismatch");
  T acc = 0;
  for (std::size_t i = 0; i < weights.size(); ++i)
    acc += input.data()[i] * weights[i];
  auto in_node = input.node_ptr();
  auto w = std::make_shared<std::vector<T>>(std::move(weights));
  return make_result<T>(Shape{1, 1, 1, 1}, {acc}, "weighted_sum", {input},
                        [=](detail::Node<T> &self) {
                          for (std::size_t i = 0; i < w->size(); ++i)
                            in_node->grad[i] += self.grad[0] * (*w)[i];
                        });
}

template <typename T> Tensor<T> mul_scalar(const Tensor<T> &input, T factor) {
  std::vector<T> out(input.data());
  for (T &v : out)
    v *= factor;
  auto in_node = input.node_ptr();
  return make_result<T>(input.shape(), std::move(out), "mul_scalar", {input},
                        [=](detail::Node<T> &self) {
                          for (std::size_t i = 0; i < self.grad.size(); ++i)
                            in_node->grad[i] += factor * self.grad[i];
                        });
}

template <typename T> Tensor<T> add(const Tensor<T> &a, const Tensor<T> &b) {
  return scale_add(a, b, T(1));
}

/// Same values, new extents.
template <typename T> Tensor<T> reshape(const Tensor<T> &input, Shape shape) {
  if (shape.numel() != input.numel())
    throw ShapeError("reshape: " + input.shape().str() + " -> " + shape.str());
  auto in_node = input.node_ptr();
  return make_result<T>(shape, input.data(), "reshape", {input},
                        [=](detail::Node<T> &self) {
                          for (std::size_t i = 0; i < self.grad.size(); ++i)
                            in_node->grad[i] += self.grad[i];
                        });
}

/// Head output (N, A*D, H, W) -> (N, H*W*A, D, 1), one row per prior in
/// row-major cell order with the A priors of a cell adjacent.
template <typename T> Tensor<T> to_rows(const Tensor<T> &input, std::size_t row_dim) {
  const Shape is = input.shape();
  if (row_dim == 0 || is.c % row_dim != 0)
    throw ShapeError("to_rows: channels " + std::to_string(is.c) +
                     " not divisible by " + std::to_string(row_dim));
  const std::size_t anchors = is.c / row_dim, cells = is.plane();
  const Shape os{is.n, cells * anchors, row_dim, 1};
  auto src_index = [=](std::size_t n, std::size_t row, std::size_t d) {
    const std::size_t cell = row / anchors, a = row % anchors;
    return (n * is.c + a * row_dim + d) * cells + cell;
  };
  std::vector<T> out(os.numel());
  for (std::size_t n = 0; n < is.n; ++n)
    for (std::size_t r = 0; r < cells * anchors; ++r)
      for (std::size_t d = 0; d < row_dim; ++d)
        out[(n * cells * anchors + r) * row_dim + d] = input.data()[src_index(n, r, d)];
  auto in_node = input.node_ptr();
  return make_result<T>(os, std::move(out), "to_rows", {input},
                        [=](detail::Node<T> &self) {
                          for (std::size_t n = 0; n < is.n; ++n)
                            for (std::size_t r = 0; r < cells * anchors; ++r)
                              for (std::size_t d = 0; d < row_dim; ++d)
                                in_node->grad[src_index(n, r, d)] +=
                                    self.grad[(n * cells * anchors + r) * row_dim + d];
                        });
}

/// Selects rows (first axis) of an (R, D, 1, 1) matrix.
template <typename T>
Tensor<T> gather_rows(const Tensor<T> &input, std::vector<std::size_t> rows) {
  const Shape is = input.shape();
  const std::size_t dim = is.c * is.h * is.w;
  for (std::size_t r : rows)
    if (r >= is.n)
      throw ShapeError("gather_rows: row " + std::to_string(r) + " out of range");
  const Shape os{rows.size(), is.c, is.h, is.w};
  std::vector<T> out(os.numel());
  for (std::size_t i = 0; i < rows.size(); ++i)
    std::copy_n(input.ptr() + rows[i] * dim, dim, out.data() + i * dim);
  auto in_node = input.node_ptr();
  auto idx = std::make_shared<std::vector<std::size_t>>(std::move(rows));
  return make_result<T>(os, std::move(out), "gather_rows", {input},
                        [=](detail::Node<T> &self) {
                          for (std::size_t i = 0; i < idx->size(); ++i)
                            for (std::size_t d = 0; d < dim; ++d)
                              in_node->grad[(*idx)[i] * dim + d] += self.grad[i * dim + d];
                        });
}

/// Numerically stable -log softmax(row)[label] for one row of logits.
template <typename T>
T cross_entropy_row(const T *logits, std::size_t k, std::size_t label) {
  const T m = *std::max_element(logits, logits + k);
  T s = 0;
  for (std::size_t j = 0; j < k; ++j)
    s += std::exp(logits[j] - m);
  return std::log(s) + m - logits[label];
}

/// Per-row softmax cross-entropy. logits are (N, K, 1, 1); returns (N, 1, 1, 1).
template <typename T>
Tensor<T> softmax_ce(const Tensor<T> &logits, const std::vector<std::size_t> &labels) {
  const Shape is = logits.shape();
  const std::size_t rows = is.n, k = is.c * is.h * is.w;
  if (labels.size() != rows)
    throw ShapeError("softmax_ce: " + std::to_string(labels.size()) + " labels for " +
                     std::to_string(rows) + " rows");
  auto probs = std::make_shared<std::vector<T>>(rows * k);
  std::vector<T> out(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    if (labels[r] >= k)
      throw ShapeError("softmax_ce: label " + std::to_string(labels[r]) +
                       " out of range [0," + std::to_string(k) + ")");
    const T *x = logits.ptr() + r * k;
    const T m = *std::max_element(x, x + k);
    T s = 0;
    for (std::size_t j = 0; j < k; ++j)
      s += ((*probs)[r * k + j] = std::exp(x[j] - m));
    for (std::size_t j = 0; j < k; ++j)
      (*probs)[r * k + j] /= s;
    out[r] = std::log(s) + m - x[labels[r]];
  }
  check_finite(out, "softmax_ce");
  auto in_node = logits.node_ptr();
  return make_result<T>(Shape{rows, 1, 1, 1}, std::move(out), "softmax_ce", {logits},
                        [=](detail::Node<T> &self) {
                          for (std::size_t r = 0; r < rows; ++r) {
                            const T g = self.grad[r];
                            for (std::size_t j = 0; j < k; ++j)
                              in_node->grad[r * k + j] +=
                                  g * ((*probs)[r * k + j] - (j == labels[r] ? T(1) : T(0)));
                          }
                        });
}

/// Elementwise smooth-L1 of pred - target.
template <typename T>
Tensor<T> smooth_l1(const Tensor<T> &pred, const Tensor<T> &target) {
  if (pred.shape() != target.shape())
    throw ShapeError("smooth_l1: " + pred.shape().str() + " vs " + target.shape().str());
  std::vector<T> diff(pred.numel()), out(pred.numel());
  for (std::size_t i = 0; i < diff.size(); ++i) {
    const T x = diff[i] = pred.data()[i] - target.data()[i];
    out[i] = std::abs(x) < T(1) ? T(0.5) * x * x : std::abs(x) - T(0.5);
  }
  auto d = std::make_shared<std::vector<T>>(std::move(diff));
  auto p = pred.node_ptr(), t = target.node_ptr();
  return make_result<T>(pred.shape(), std::move(out), "smooth_l1", {pred, target},
                        [=](detail::Node<T> &self) {
                          for (std::size_t i = 0; i < d->size(); ++i) {
                            const T x = (*d)[i];
                            const T g = self.grad[i] *
                                        (std::abs(x) < T(1) ? x : (x > 0 ? T(1) : T(-1)));
                            if (p->requires_grad)
                              p->grad[i] += g;
                            if (t->requires_grad)
                              t->grad[i] -= g;
                          }
                        });
}

} // namespace rfb
