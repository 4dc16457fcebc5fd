#pragma once

#include "rfb/tensor.hpp"

#include "json.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace rfb {

enum class TrailingKind { conv, maxpool, avgpool };

NLOHMANN_JSON_SERIALIZE_ENUM(TrailingKind, {{TrailingKind::conv, "conv"},
                                            {TrailingKind::maxpool, "maxpool"},
                                            {TrailingKind::avgpool, "avgpool"}})

inline std::string to_string(TrailingKind k) { return nlohmann::json(k).get<std::string>(); }

inline TrailingKind parse_trailing(const std::string &s) {
  if (s == "conv")
    return TrailingKind::conv;
  if (s == "maxpool")
    return TrailingKind::maxpool;
  if (s == "avgpool")
    return TrailingKind::avgpool;
  throw ShapeError("unknown trailing kind '" + s + "' (conv|maxpool|avgpool)");
}

/// One convolution inside a branch; output width is the branch bottleneck.
struct BranchConv {
  std::size_t kh = 1, kw = 1, stride = 1;
  bool operator==(const BranchConv &) const = default;
};

/// Dilated layer closing a branch. A trailing conv is linear.
struct Trailing {
  TrailingKind kind = TrailingKind::conv;
  std::size_t kernel = 3;
  std::size_t dilation = 1;
  bool operator==(const Trailing &) const = default;
};

/// conv_stack[0] is always the 1x1 bottleneck; every stack conv is followed by
/// relu.
struct BranchSpec {
  std::size_t bottleneck_channels = 1;
  std::vector<BranchConv> conv_stack;
  Trailing trailing;
  bool operator==(const BranchSpec &) const = default;
};

struct ShortcutSpec {
  bool enabled = true;
  double alpha = 0.1;
  bool operator==(const ShortcutSpec &) const = default;
};

/// relu(fuse1x1(concat(branches)) + alpha * shortcut(x))
///
/// The shortcut is the identity when channels and stride allow it, otherwise
/// a linear 1x1 projection with the block stride.
struct BlockSpec {
  std::string kind = "rfb";
  std::size_t in_channels = 0;
  std::size_t fuse_channels = 0;
  std::size_t stride = 1;
  std::vector<BranchSpec> branches;
  ShortcutSpec shortcut;

  bool needs_projection() const {
    return shortcut.enabled && (in_channels != fuse_channels || stride != 1);
  }
  std::size_t concat_channels() const {
    std::size_t c = 0;
    for (const auto &b : branches)
      c += b.bottleneck_channels;
    return c;
  }
  bool operator==(const BlockSpec &) const = default;
};

struct RfFootprint {
  std::size_t h = 1, w = 1;
  std::size_t jump_h = 1, jump_w = 1;
  std::size_t area() const { return h * w; }
  bool operator==(const RfFootprint &) const = default;
};

namespace detail {

inline RfFootprint compose(RfFootprint r, std::size_t kh, std::size_t kw,
                           std::size_t stride, std::size_t dilation) {
  r.h += (kh + (kh - 1) * (dilation - 1) - 1) * r.jump_h;
  r.w += (kw + (kw - 1) * (dilation - 1) - 1) * r.jump_w;
  r.jump_h *= stride;
  r.jump_w *= stride;
  return r;
}

inline std::size_t default_bottleneck(std::size_t in_channels) {
  return std::max<std::size_t>(1, in_channels / 8);
}

inline void require_positive(std::size_t in, std::size_t out, const char *who) {
  if (in == 0 || out == 0)
    throw ShapeError(std::string(who) + ": channel counts must be positive");
}

// Puts the block stride on the last conv before the trailing layer.
inline BranchSpec branch(std::size_t width, std::vector<BranchConv> stack,
                         Trailing trailing, std::size_t stride) {
  stack.back().stride = stride;
  return BranchSpec{width, std::move(stack), trailing};
}

} // namespace detail

/// Per-branch theoretical receptive field.
inline std::vector<RfFootprint> theoretical_rf(const BlockSpec &block) {
  std::vector<RfFootprint> out;
  for (const auto &b : block.branches) {
    RfFootprint r;
    for (const auto &c : b.conv_stack)
      r = detail::compose(r, c.kh, c.kw, c.stride, 1);
    r = detail::compose(r, b.trailing.kernel, b.trailing.kernel, 1, b.trailing.dilation);
    out.push_back(r);
  }
  return out;
}

/// Union of the branch footprints. Branches share a center, so this is the
/// per-axis maximum.
inline RfFootprint max_rf(const BlockSpec &block) {
  RfFootprint m;
  for (const auto &r : theoretical_rf(block)) {
    m.h = std::max(m.h, r.h);
    m.w = std::max(m.w, r.w);
    m.jump_h = std::max(m.jump_h, r.jump_h);
    m.jump_w = std::max(m.jump_w, r.jump_w);
  }
  return m;
}

/// Weights plus biases.
inline std::size_t param_count(const BlockSpec &block) {
  std::size_t total = 0;
  for (const auto &b : block.branches) {
    std::size_t in = block.in_channels;
    for (const auto &c : b.conv_stack) {
      total += b.bottleneck_channels * in * c.kh * c.kw + b.bottleneck_channels;
      in = b.bottleneck_channels;
    }
    if (b.trailing.kind == TrailingKind::conv)
      total += in * in * b.trailing.kernel * b.trailing.kernel + in;
  }
  total += block.concat_channels() * block.fuse_channels + block.fuse_channels;
  if (block.needs_projection())
    total += block.in_channels * block.fuse_channels + block.fuse_channels;
  return total;
}

struct RfbOptions {
  std::size_t stride = 1;
  double alpha = 0.1;
  TrailingKind trailing = TrailingKind::conv;
  std::size_t bottleneck = 0; // 0 selects in_channels / 8
  bool extra_7x7_branch = false;
};

/// Three branches with growing kernels and trailing dilations 1, 3, 5
/// (two stacked 3x3 stand in for a 5x5).
inline BlockSpec make_rfb(std::size_t in_channels, std::size_t out_channels,
                          const RfbOptions &opt = {}) {
  detail::require_positive(in_channels, out_channels, "make_rfb");
  if (opt.stride != 1 && opt.stride != 2)
    throw ShapeError("make_rfb: stride must be 1 or 2");
  const std::size_t b =
      opt.bottleneck ? opt.bottleneck : detail::default_bottleneck(in_channels);
  BlockSpec s;
  s.kind = "rfb";
  s.in_channels = in_channels;
  s.fuse_channels = out_channels;
  s.stride = opt.stride;
  s.shortcut = {true, opt.alpha};
  const BranchConv one{1, 1, 1}, three{3, 3, 1};
  s.branches.push_back(detail::branch(b, {one}, {opt.trailing, 3, 1}, opt.stride));
  s.branches.push_back(detail::branch(b, {one, three}, {opt.trailing, 3, 3}, opt.stride));
  s.branches.push_back(
      detail::branch(b, {one, three, three}, {opt.trailing, 3, 5}, opt.stride));
  if (opt.extra_7x7_branch)
    s.branches.push_back(
        detail::branch(b, {one, three, three, three}, {opt.trailing, 3, 7}, opt.stride));
  return s;
}

/// Shallow-layer variant: four branches with 1xn / nx1 factorized kernels.
inline BlockSpec make_rfb_s(std::size_t in_channels, std::size_t out_channels,
                            const RfbOptions &opt = {}) {
  detail::require_positive(in_channels, out_channels, "make_rfb_s");
  const std::size_t b =
      opt.bottleneck ? opt.bottleneck : detail::default_bottleneck(in_channels);
  BlockSpec s;
  s.kind = "rfb_s";
  s.in_channels = in_channels;
  s.fuse_channels = out_channels;
  s.stride = 1;
  s.shortcut = {true, opt.alpha};
  const BranchConv one{1, 1, 1}, row{1, 3, 1}, col{3, 1, 1};
  s.branches.push_back(detail::branch(b, {one}, {opt.trailing, 3, 1}, 1));
  s.branches.push_back(detail::branch(b, {one, row}, {opt.trailing, 3, 3}, 1));
  s.branches.push_back(detail::branch(b, {one, col}, {opt.trailing, 3, 3}, 1));
  s.branches.push_back(detail::branch(b, {one, row, col}, {opt.trailing, 3, 5}, 1));
  if (opt.extra_7x7_branch)
    s.branches.push_back(detail::branch(b, {one, row, col, row, col},
                                        {opt.trailing, 3, 7}, 1));
  return s;
}

/// Single-branch stack 1x1 -> 3x3 -> 3x3 whose width is chosen so the block's
/// parameter count is as close as possible to `target_params`.
inline BlockSpec make_plain(std::size_t in_channels, std::size_t out_channels,
                            std::size_t stride, std::size_t target_params,
                            double alpha = 0.1) {
  detail::require_positive(in_channels, out_channels, "make_plain");
  auto build = [&](std::size_t width) {
    BlockSpec s;
    s.kind = "plain";
    s.in_channels = in_channels;
    s.fuse_channels = out_channels;
    s.stride = stride;
    s.shortcut = {true, alpha};
    s.branches.push_back(detail::branch(width, {{1, 1, 1}, {3, 3, 1}},
                                        {TrailingKind::conv, 3, 1}, stride));
    return s;
  };
  std::size_t best = 1;
  auto distance = [&](std::size_t w) {
    const auto p = static_cast<double>(param_count(build(w)));
    return std::abs(p - static_cast<double>(target_params));
  };
  for (std::size_t w = 2; w <= 4 * (in_channels + out_channels) + 8; ++w)
    if (distance(w) < distance(best))
      best = w;
  return build(best);
}

enum class ComparisonKind { inception, inception_l, aspp_s, plain, deformable };

inline ComparisonKind parse_comparison(const std::string &s) {
  if (s == "inception")
    return ComparisonKind::inception;
  if (s == "inception_l")
    return ComparisonKind::inception_l;
  if (s == "aspp_s")
    return ComparisonKind::aspp_s;
  if (s == "plain")
    return ComparisonKind::plain;
  if (s == "deformable")
    return ComparisonKind::deformable;
  throw ShapeError("unknown comparison block '" + s + "'");
}

/// Baselines for the RFB comparison. Inception-L enlarges kernels until each
/// branch reaches the RF of the matching RFB branch; ASPP-S uses one 3x3 per
/// branch at dilations 1, 3, 5; plain is parameter-matched to make_rfb.
inline BlockSpec make_comparison_block(ComparisonKind kind, std::size_t in_channels,
                                       std::size_t out_channels,
                                       const RfbOptions &opt = {}) {
  detail::require_positive(in_channels, out_channels, "make_comparison_block");
  const std::size_t b =
      opt.bottleneck ? opt.bottleneck : detail::default_bottleneck(in_channels);
  const std::size_t st = opt.stride;
  BlockSpec s;
  s.in_channels = in_channels;
  s.fuse_channels = out_channels;
  s.stride = st;
  s.shortcut = {true, opt.alpha};
  const BranchConv one{1, 1, 1}, three{3, 3, 1}, five{5, 5, 1};
  const auto conv = TrailingKind::conv;
  switch (kind) {
  case ComparisonKind::inception:
    s.kind = "inception";
    s.branches.push_back(detail::branch(b, {one}, {conv, 3, 1}, st));
    s.branches.push_back(detail::branch(b, {one, three}, {conv, 3, 1}, st));
    s.branches.push_back(detail::branch(b, {one, three, three}, {conv, 3, 1}, st));
    break;
  case ComparisonKind::inception_l:
    s.kind = "inception_l";
    s.branches.push_back(detail::branch(b, {one}, {conv, 3, 1}, st));
    s.branches.push_back(detail::branch(b, {one, five}, {conv, 5, 1}, st));
    s.branches.push_back(detail::branch(b, {one, five, five}, {conv, 7, 1}, st));
    break;
  case ComparisonKind::aspp_s:
    s.kind = "aspp_s";
    for (std::size_t d : {1, 3, 5})
      s.branches.push_back(detail::branch(b, {one}, {conv, 3, d}, st));
    break;
  case ComparisonKind::plain:
    return make_plain(in_channels, out_channels, st,
                      param_count(make_rfb(in_channels, out_channels, opt)), opt.alpha);
  case ComparisonKind::deformable:
    throw ShapeError("make_comparison_block: deformable convolution is not supported");
  }
  return s;
}

/// Builds any named block: rfb, rfb_s, inception, inception_l, aspp_s, plain.
inline BlockSpec make_named_block(const std::string &name, std::size_t in_channels,
                                  std::size_t out_channels, const RfbOptions &opt = {}) {
  if (name == "rfb")
    return make_rfb(in_channels, out_channels, opt);
  if (name == "rfb_s")
    return make_rfb_s(in_channels, out_channels, opt);
  return make_comparison_block(parse_comparison(name), in_channels, out_channels, opt);
}

inline void validate(const BlockSpec &s) {
  if (s.branches.empty())
    throw ShapeError("block '" + s.kind + "': no branches");
  if (s.in_channels == 0 || s.fuse_channels == 0)
    throw ShapeError("block '" + s.kind + "': channel counts must be positive");
  for (const auto &b : s.branches) {
    if (b.conv_stack.empty() || b.conv_stack.front().kh != 1 ||
        b.conv_stack.front().kw != 1)
      throw ShapeError("block '" + s.kind + "': branch must start with a 1x1 bottleneck");
    if (b.bottleneck_channels == 0 || b.trailing.kernel == 0 || b.trailing.dilation == 0)
      throw ShapeError("block '" + s.kind + "': zero width, kernel or dilation");
    std::size_t st = 1;
    for (const auto &c : b.conv_stack)
      st *= c.stride;
    if (st != s.stride)
      throw ShapeError("block '" + s.kind + "': branch stride differs from block stride");
  }
}

inline void to_json(nlohmann::json &j, const BranchConv &c) { j = {c.kh, c.kw, c.stride}; }
inline void from_json(const nlohmann::json &j, BranchConv &c) {
  c = {j.at(0).get<std::size_t>(), j.at(1).get<std::size_t>(), j.at(2).get<std::size_t>()};
}
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(Trailing, kind, kernel, dilation)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(BranchSpec, bottleneck_channels, conv_stack, trailing)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(ShortcutSpec, enabled, alpha)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(BlockSpec, kind, in_channels, fuse_channels, stride,
                                   branches, shortcut)

} // namespace rfb
