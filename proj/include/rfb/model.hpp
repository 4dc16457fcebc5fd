#pragma once

#include "rfb/detector.hpp"
#include "rfb/nn.hpp"

namespace rfb {

/// Architecture of the desk-scale detector.
///
/// backbone: conv3x3/2 -> conv3x3 -> pool/2 -> conv3x3 [shallow source]
///           -> pool/2 -> conv3x3 [top source]
/// head:     shallow block (RFB-s) on the shallow source, a stride-1 block
///           (RFB) on the top source, a stride-2 block, then two plain
///           1x1/3x3-stride-2 layers for the smallest maps.
struct ModelConfig {
  std::size_t image_size = 64;
  std::size_t num_classes = 3; // foreground classes
  std::string head = "rfb";    // rfb | plain | inception | inception_l | aspp_s
  bool use_rfb_s = true;
  TrailingKind trailing = TrailingKind::conv;
  std::size_t first_priors = 6;
  double alpha = 0.1;
  std::vector<std::size_t> widths{16, 32, 32, 64};
  std::size_t bottleneck_div = 4;
  bool extra_7x7_branch = false;
  double min_scale = 0.1;
  double max_scale = 0.9;
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(ModelConfig, image_size, num_classes, head,
                                                use_rfb_s, trailing, first_priors, alpha,
                                                widths, bottleneck_div, extra_7x7_branch,
                                                min_scale, max_scale)

inline void validate(const ModelConfig &c) {
  if (c.image_size < 32 || c.image_size % 16 != 0)
    throw ShapeError("model: image_size must be a multiple of 16 and at least 32");
  if (c.widths.size() != 4)
    throw ShapeError("model: widths needs four backbone channel counts");
  for (auto w : c.widths)
    if (w == 0)
      throw ShapeError("model: widths must be positive");
  if (c.first_priors != 4 && c.first_priors != 6)
    throw ShapeError("model: first_priors must be 4 or 6");
  if (c.num_classes == 0 || c.bottleneck_div == 0)
    throw ShapeError("model: num_classes and bottleneck_div must be positive");
  static const std::vector<std::string> heads{"rfb", "plain", "inception", "inception_l",
                                              "aspp_s"};
  if (std::find(heads.begin(), heads.end(), c.head) == heads.end())
    throw ShapeError("model: unknown head '" + c.head + "'");
}

/// Block specs for the three head positions. The plain head is parameter
/// matched block by block to the RFB head with the same options.
inline std::vector<BlockSpec> head_blocks(const ModelConfig &c) {
  const std::size_t s = c.widths[2], t = c.widths[3];
  auto opts = [&](std::size_t in, std::size_t stride) {
    RfbOptions o;
    o.stride = stride;
    o.alpha = c.alpha;
    o.trailing = c.trailing;
    o.bottleneck = std::max<std::size_t>(1, in / c.bottleneck_div);
    o.extra_7x7_branch = c.extra_7x7_branch;
    return o;
  };
  std::vector<BlockSpec> out;
  if (c.use_rfb_s) {
    const auto o = opts(s, 1);
    if (c.head == "plain")
      out.push_back(make_plain(s, s, 1, param_count(make_rfb_s(s, s, o)), c.alpha));
    else if (c.head == "rfb")
      out.push_back(make_rfb_s(s, s, o));
    else
      out.push_back(make_named_block(c.head, s, s, o));
  }
  for (std::size_t stride : {1, 2}) {
    const auto o = opts(t, stride);
    if (c.head == "plain")
      out.push_back(make_plain(t, t, stride, param_count(make_rfb(t, t, o)), c.alpha));
    else
      out.push_back(make_named_block(c.head, t, t, o));
  }
  return out;
}

template <typename T> struct HeadOutput {
  Tensor<T> cls; // (N*P, K, 1, 1)
  Tensor<T> loc; // (N*P, 4, 1, 1)
};

template <typename T> class DetectorNet {
public:
  explicit DetectorNet(ModelConfig cfg) : cfg_(std::move(cfg)) {
    validate(cfg_);
    const auto &w = cfg_.widths;
    conv1_ = add_conv(store_, "backbone/conv1", 3, w[0], 3, 3, 2);
    conv2_ = add_conv(store_, "backbone/conv2", w[0], w[1], 3, 3);
    conv3_ = add_conv(store_, "backbone/conv3", w[1], w[2], 3, 3);
    conv4_ = add_conv(store_, "backbone/conv4", w[2], w[3], 3, 3);
    const auto specs = head_blocks(cfg_);
    std::size_t next = 0;
    if (cfg_.use_rfb_s)
      blocks_.emplace_back("shallow", add_block(store_, specs[next++], "shallow"));
    blocks_.emplace_back("top", add_block(store_, specs[next++], "top"));
    blocks_.emplace_back("top_s2", add_block(store_, specs[next++], "top_s2"));
    const std::size_t t = w[3], half = std::max<std::size_t>(1, t / 2);
    extra_.push_back({add_conv(store_, "extra1/reduce", t, half, 1, 1),
                      add_conv(store_, "extra1/conv", half, t, 3, 3, 2)});
    extra_.push_back({add_conv(store_, "extra2/reduce", t, half, 1, 1),
                      add_conv(store_, "extra2/conv", half, t, 3, 3, 2)});

    const std::size_t s = cfg_.image_size;
    const std::vector<std::size_t> sizes{s / 4, s / 8, s / 16, s / 32, s / 64 ? s / 64 : 1};
    const std::vector<std::size_t> priors{cfg_.first_priors, 6, 6, 4, 4};
    head_ = make_head_config(sizes, priors, cfg_.num_classes + 1, cfg_.min_scale,
                             cfg_.max_scale);
    const std::vector<std::size_t> channels{w[2], t, t, t, t};
    for (std::size_t i = 0; i < sizes.size(); ++i) {
      const std::string p = "head/source" + std::to_string(i);
      loc_.push_back(add_conv(store_, p + "/loc", channels[i], priors[i] * 4, 3, 3));
      conf_.push_back(
          add_conv(store_, p + "/conf", channels[i], priors[i] * head_.num_classes, 3, 3));
    }
    priors_ = gen_priors(head_);
  }

  const ModelConfig &config() const { return cfg_; }
  const HeadConfig &head() const { return head_; }
  const std::vector<PriorBox> &priors() const { return priors_; }
  ParamStore<T> &store() { return store_; }
  const ParamStore<T> &store() const { return store_; }

  std::vector<std::string> block_names() const {
    std::vector<std::string> out;
    for (const auto &b : blocks_)
      out.push_back(b.first);
    return out;
  }
  const BlockLayers &block(const std::string &name) const {
    for (const auto &b : blocks_)
      if (b.first == name)
        return b.second;
    throw ShapeError("model has no block named '" + name + "'");
  }

  /// Feature maps feeding the head, largest first.
  std::vector<Tensor<T>> sources(ParamView<T> params, const Tensor<T> &image) const {
    const auto pool = ConvParams::square(2, 2);
    Tensor<T> x = relu(apply(conv1_, params, image));
    x = relu(apply(conv2_, params, x));
    x = pool2d(x, PoolKind::max, pool);
    x = relu(apply(conv3_, params, x));
    std::vector<Tensor<T>> out;
    std::size_t bi = 0;
    out.push_back(cfg_.use_rfb_s ? block_forward(blocks_[bi++].second, params, x) : x);
    x = pool2d(x, PoolKind::max, pool);
    x = relu(apply(conv4_, params, x));
    x = block_forward(blocks_[bi++].second, params, x);
    out.push_back(x);
    x = block_forward(blocks_[bi++].second, params, x);
    out.push_back(x);
    for (const auto &[reduce, conv] : extra_) {
      x = relu(apply(conv, params, relu(apply(reduce, params, x))));
      out.push_back(x);
    }
    return out;
  }

  HeadOutput<T> forward(ParamView<T> params, const Tensor<T> &image) const {
    const Shape is = image.shape();
    if (is.c != 3 || is.h != cfg_.image_size || is.w != cfg_.image_size)
      throw ShapeError("detector: expected (N,3," + std::to_string(cfg_.image_size) + "," +
                       std::to_string(cfg_.image_size) + ") input, got " + is.str());
    const auto src = sources(params, image);
    std::vector<Tensor<T>> locs, confs;
    for (std::size_t i = 0; i < src.size(); ++i) {
      locs.push_back(to_rows(apply(loc_[i], params, src[i]), 4));
      confs.push_back(to_rows(apply(conf_[i], params, src[i]), head_.num_classes));
    }
    const std::size_t rows = is.n * priors_.size();
    return {reshape(concat_channels(confs), Shape{rows, head_.num_classes, 1, 1}),
            reshape(concat_channels(locs), Shape{rows, 4, 1, 1})};
  }
  HeadOutput<T> forward(const Tensor<T> &image) const {
    return forward(ParamView<T>(store_.tensors()), image);
  }

private:
  ModelConfig cfg_;
  ParamStore<T> store_;
  ConvLayer conv1_, conv2_, conv3_, conv4_;
  std::vector<std::pair<std::string, BlockLayers>> blocks_;
  std::vector<std::pair<ConvLayer, ConvLayer>> extra_;
  std::vector<ConvLayer> loc_, conf_;
  HeadConfig head_;
  std::vector<PriorBox> priors_;
};

} // namespace rfb
