#pragma once

#include "rfb/blocks.hpp"
#include "rfb/ops.hpp"

#include <map>
#include <optional>
#include <span>

namespace rfb {

struct ParamInfo {
  std::string path; // hierarchical, '/'-separated
  Shape shape;
  std::size_t fan_in = 1;
  bool is_bias = false;
};

/// Owns every trainable tensor of a network in creation order.
template <typename T> class ParamStore {
public:
  std::size_t add(std::string path, Shape shape, std::size_t fan_in, bool is_bias) {
    if (index_.count(path))
      throw ShapeError("duplicate parameter path '" + path + "'");
    index_.emplace(path, infos_.size());
    infos_.push_back({std::move(path), shape, fan_in, is_bias});
    tensors_.emplace_back(shape, T(0), true);
    return infos_.size() - 1;
  }

  std::size_t size() const { return infos_.size(); }
  const ParamInfo &info(std::size_t i) const { return infos_.at(i); }
  const std::vector<ParamInfo> &infos() const { return infos_; }
  Tensor<T> &tensor(std::size_t i) { return tensors_.at(i); }
  const Tensor<T> &tensor(std::size_t i) const { return tensors_.at(i); }
  const std::vector<Tensor<T>> &tensors() const { return tensors_; }

  std::optional<std::size_t> find(const std::string &path) const {
    auto it = index_.find(path);
    if (it == index_.end())
      return std::nullopt;
    return it->second;
  }

  std::size_t total_elements() const {
    std::size_t n = 0;
    for (const auto &i : infos_)
      n += i.shape.numel();
    return n;
  }

  /// Fresh leaves aliasing the stored values, one gradient buffer per call.
  std::vector<Tensor<T>> bind(bool requires_grad) const {
    std::vector<Tensor<T>> out;
    out.reserve(tensors_.size());
    for (const auto &t : tensors_)
      out.push_back(t.alias_leaf(requires_grad));
    return out;
  }

private:
  std::vector<ParamInfo> infos_;
  std::vector<Tensor<T>> tensors_;
  std::map<std::string, std::size_t> index_;
};

template <typename T> using ParamView = std::span<const Tensor<T>>;

struct ConvLayer {
  std::size_t weight = 0, bias = 0;
  ConvParams geom;
};

template <typename T>
ConvLayer add_conv(ParamStore<T> &store, const std::string &path, std::size_t cin,
                   std::size_t cout, std::size_t kh, std::size_t kw, std::size_t stride = 1,
                   std::size_t dilation = 1) {
  ConvLayer l;
  l.geom = ConvParams::same(kh, kw, stride, dilation);
  l.weight = store.add(path + "/weight", Shape{cout, cin, kh, kw}, cin * kh * kw, false);
  l.bias = store.add(path + "/bias", Shape{cout, 1, 1, 1}, cin * kh * kw, true);
  return l;
}

template <typename T>
Tensor<T> apply(const ConvLayer &l, ParamView<T> params, const Tensor<T> &x) {
  return conv2d<T>(x, params[l.weight], params[l.bias], l.geom);
}

/// Parameter indices of one instantiated BlockSpec.
struct BlockLayers {
  BlockSpec spec;
  std::vector<std::vector<ConvLayer>> stacks;
  std::vector<std::optional<ConvLayer>> trailing_convs;
  ConvLayer fuse;
  std::optional<ConvLayer> projection;
};

template <typename T>
BlockLayers add_block(ParamStore<T> &store, const BlockSpec &spec, const std::string &prefix) {
  validate(spec);
  BlockLayers out;
  out.spec = spec;
  for (std::size_t bi = 0; bi < spec.branches.size(); ++bi) {
    const auto &b = spec.branches[bi];
    const std::string bp = prefix + "/branch" + std::to_string(bi);
    std::vector<ConvLayer> stack;
    std::size_t in = spec.in_channels;
    for (std::size_t ci = 0; ci < b.conv_stack.size(); ++ci) {
      const auto &c = b.conv_stack[ci];
      stack.push_back(add_conv(store, bp + "/conv" + std::to_string(ci), in,
                               b.bottleneck_channels, c.kh, c.kw, c.stride));
      in = b.bottleneck_channels;
    }
    out.stacks.push_back(std::move(stack));
    if (b.trailing.kind == TrailingKind::conv)
      out.trailing_convs.push_back(add_conv(store, bp + "/trailing", in, in,
                                            b.trailing.kernel, b.trailing.kernel, 1,
                                            b.trailing.dilation));
    else
      out.trailing_convs.push_back(std::nullopt);
  }
  out.fuse = add_conv(store, prefix + "/fuse", spec.concat_channels(), spec.fuse_channels, 1, 1);
  if (spec.needs_projection())
    out.projection = add_conv(store, prefix + "/shortcut", spec.in_channels,
                              spec.fuse_channels, 1, 1, spec.stride);
  return out;
}

template <typename T>
Tensor<T> block_forward(const BlockLayers &layers, ParamView<T> params, const Tensor<T> &x) {
  const BlockSpec &spec = layers.spec;
  std::vector<Tensor<T>> outs;
  outs.reserve(spec.branches.size());
  for (std::size_t bi = 0; bi < spec.branches.size(); ++bi) {
    Tensor<T> h = x;
    for (const auto &c : layers.stacks[bi])
      h = relu(apply(c, params, h));
    const Trailing &tr = spec.branches[bi].trailing;
    if (layers.trailing_convs[bi]) {
      h = apply(*layers.trailing_convs[bi], params, h);
    } else {
      const auto geom = ConvParams::same(tr.kernel, tr.kernel, 1, tr.dilation);
      h = pool2d(h, tr.kind == TrailingKind::maxpool ? PoolKind::max : PoolKind::avg, geom);
    }
    outs.push_back(std::move(h));
  }
  Tensor<T> fused = apply(layers.fuse, params, concat_channels(outs));
  if (spec.shortcut.enabled) {
    Tensor<T> sc = layers.projection ? apply(*layers.projection, params, x) : x;
    fused = scale_add(fused, sc, static_cast<T>(spec.shortcut.alpha));
  }
  return relu(fused);
}

/// A single block with its own parameters; used for ERF analysis and checks.
template <typename T> struct BlockNet {
  ParamStore<T> store;
  BlockLayers layers;

  explicit BlockNet(const BlockSpec &spec, const std::string &prefix = "block")
      : layers(add_block(store, spec, prefix)) {}

  Tensor<T> forward(ParamView<T> params, const Tensor<T> &x) const {
    return block_forward(layers, params, x);
  }
  Tensor<T> forward(const Tensor<T> &x) const {
    return block_forward<T>(layers, store.tensors(), x);
  }
};

} // namespace rfb
