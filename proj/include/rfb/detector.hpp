#pragma once

#include "rfb/ops.hpp"

#include <array>
#include <cmath>
#include <numeric>
#include <span>

namespace rfb {

/// Anchor in normalized center form.
struct PriorBox {
  double cx = 0, cy = 0, w = 0, h = 0;
};

struct BoxXYXY {
  double xmin = 0, ymin = 0, xmax = 0, ymax = 0;
  int label = 0; // foreground class index, 0-based
  bool difficult = false;

  double width() const { return xmax - xmin; }
  double height() const { return ymax - ymin; }
  bool valid() const { return xmax > xmin && ymax > ymin; }
  BoxXYXY scaled(double sx, double sy) const {
    return {xmin * sx, ymin * sy, xmax * sx, ymax * sy, label, difficult};
  }
};

struct Detection {
  BoxXYXY box;
  int label = 0;
  double score = 0;
};

/// One feature map feeding the head.
struct SourceLayer {
  std::size_t feature_size = 1;
  std::size_t priors = 4; // 4 or 6 per cell
  double scale = 0.2;
  double next_scale = 0.4;
};

struct HeadConfig {
  std::vector<SourceLayer> sources;
  std::size_t num_classes = 4; // including background at 0
  double var_center = 0.1;
  double var_size = 0.2;
  double match_threshold = 0.5;
  std::size_t neg_pos_ratio = 3;

  std::size_t num_priors() const {
    std::size_t n = 0;
    for (const auto &s : sources)
      n += s.feature_size * s.feature_size * s.priors;
    return n;
  }
};

/// Scales spaced linearly from min_scale to max_scale, one extra for the
/// last layer's intermediate square prior.
inline HeadConfig make_head_config(const std::vector<std::size_t> &feature_sizes,
                                   const std::vector<std::size_t> &priors_per_cell,
                                   std::size_t num_classes, double min_scale,
                                   double max_scale) {
  if (feature_sizes.size() != priors_per_cell.size() || feature_sizes.empty())
    throw ShapeError("make_head_config: one prior count per feature map required");
  HeadConfig cfg;
  cfg.num_classes = num_classes;
  const std::size_t m = feature_sizes.size();
  auto scale = [&](std::size_t k) {
    return min_scale + (max_scale - min_scale) * static_cast<double>(k) / static_cast<double>(m);
  };
  for (std::size_t k = 0; k < m; ++k)
    cfg.sources.push_back({feature_sizes[k], priors_per_cell[k], scale(k), scale(k + 1)});
  return cfg;
}

inline void validate(const HeadConfig &cfg) {
  for (const auto &s : cfg.sources) {
    if (s.priors != 4 && s.priors != 6)
      throw ShapeError("head config: priors per cell must be 4 or 6");
    if (s.feature_size == 0 || s.scale <= 0 || s.next_scale <= 0)
      throw ShapeError("head config: feature sizes and scales must be positive");
  }
  if (cfg.num_classes < 2)
    throw ShapeError("head config: need background plus at least one class");
}

/// Layer-major, row-major, ratio-minor. Per cell: square s, square
/// sqrt(s*s'), then ratios 2, 1/2 (and 3, 1/3 for six priors).
inline std::vector<PriorBox> gen_priors(const HeadConfig &cfg) {
  validate(cfg);
  std::vector<PriorBox> out;
  out.reserve(cfg.num_priors());
  for (const auto &src : cfg.sources) {
    const double f = static_cast<double>(src.feature_size);
    const double s = src.scale, extra = std::sqrt(src.scale * src.next_scale);
    std::vector<double> ratios{2.0, 0.5};
    if (src.priors == 6) {
      ratios.push_back(3.0);
      ratios.push_back(1.0 / 3.0);
    }
    for (std::size_t i = 0; i < src.feature_size; ++i)
      for (std::size_t j = 0; j < src.feature_size; ++j) {
        const double cx = (static_cast<double>(j) + 0.5) / f;
        const double cy = (static_cast<double>(i) + 0.5) / f;
        out.push_back({cx, cy, s, s});
        out.push_back({cx, cy, extra, extra});
        for (double r : ratios)
          out.push_back({cx, cy, s * std::sqrt(r), s / std::sqrt(r)});
      }
  }
  return out;
}

inline BoxXYXY to_xyxy(const PriorBox &p) {
  return {p.cx - p.w / 2, p.cy - p.h / 2, p.cx + p.w / 2, p.cy + p.h / 2};
}

inline double iou(const BoxXYXY &a, const BoxXYXY &b) {
  const double iw = std::min(a.xmax, b.xmax) - std::max(a.xmin, b.xmin);
  const double ih = std::min(a.ymax, b.ymax) - std::max(a.ymin, b.ymin);
  if (iw <= 0 || ih <= 0)
    return 0.0;
  const double inter = iw * ih;
  const double uni = a.width() * a.height() + b.width() * b.height() - inter;
  return uni > 0 ? inter / uni : 0.0;
}

/// Per-prior assignment: gt index or -1 for background.
struct MatchResult {
  std::vector<int> gt_index;
  std::vector<double> overlap;

  std::size_t num_positive() const {
    return static_cast<std::size_t>(
        std::count_if(gt_index.begin(), gt_index.end(), [](int g) { return g >= 0; }));
  }
};

/// Greedy bipartite step first (each GT takes its best free prior, highest
/// overlap pair first), then every other prior takes its best GT when the
/// overlap reaches `threshold`. Ties resolve to the lower index.
inline MatchResult match_priors(const std::vector<BoxXYXY> &gts,
                                const std::vector<PriorBox> &priors, double threshold = 0.5) {
  if (priors.empty())
    throw ShapeError("match_priors: no priors");
  const std::size_t np = priors.size(), ng = gts.size();
  MatchResult m;
  m.gt_index.assign(np, -1);
  m.overlap.assign(np, 0.0);
  if (ng == 0)
    return m;
  std::vector<double> ov(ng * np);
  for (std::size_t p = 0; p < np; ++p) {
    const BoxXYXY pb = to_xyxy(priors[p]);
    for (std::size_t g = 0; g < ng; ++g)
      ov[g * np + p] = iou(gts[g], pb);
  }
  std::vector<bool> gt_done(ng, false), claimed(np, false);
  for (std::size_t round = 0; round < std::min(ng, np); ++round) {
    double best = -1;
    std::size_t bg = 0, bp = 0;
    for (std::size_t g = 0; g < ng; ++g) {
      if (gt_done[g])
        continue;
      for (std::size_t p = 0; p < np; ++p)
        if (!claimed[p] && ov[g * np + p] > best) {
          best = ov[g * np + p];
          bg = g;
          bp = p;
        }
    }
    gt_done[bg] = true;
    claimed[bp] = true;
    m.gt_index[bp] = static_cast<int>(bg);
    m.overlap[bp] = best;
  }
  for (std::size_t p = 0; p < np; ++p) {
    if (claimed[p])
      continue;
    std::size_t bg = 0;
    for (std::size_t g = 1; g < ng; ++g)
      if (ov[g * np + p] > ov[bg * np + p])
        bg = g;
    m.overlap[p] = ov[bg * np + p];
    if (m.overlap[p] >= threshold)
      m.gt_index[p] = static_cast<int>(bg);
  }
  return m;
}

using BoxOffsets = std::array<double, 4>;

inline BoxOffsets encode(const BoxXYXY &gt, const PriorBox &prior, double var_center = 0.1,
                         double var_size = 0.2) {
  if (!gt.valid())
    throw ShapeError("encode: ground-truth box has non-positive extent");
  const double cx = (gt.xmin + gt.xmax) / 2, cy = (gt.ymin + gt.ymax) / 2;
  return {(cx - prior.cx) / (prior.w * var_center), (cy - prior.cy) / (prior.h * var_center),
          std::log(gt.width() / prior.w) / var_size, std::log(gt.height() / prior.h) / var_size};
}

inline BoxXYXY decode(const BoxOffsets &t, const PriorBox &prior, double var_center = 0.1,
                      double var_size = 0.2) {
  const double cx = prior.cx + t[0] * var_center * prior.w;
  const double cy = prior.cy + t[1] * var_center * prior.h;
  const double w = prior.w * std::exp(t[2] * var_size);
  const double h = prior.h * std::exp(t[3] * var_size);
  return {cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2};
}

/// Training targets for one image.
struct PriorTargets {
  std::vector<std::size_t> labels;  // 0 = background, else class + 1
  std::vector<BoxOffsets> offsets;  // meaningful for positives only
  std::size_t num_positive = 0;
};

inline PriorTargets build_targets(const std::vector<BoxXYXY> &gts,
                                  const std::vector<PriorBox> &priors, const HeadConfig &cfg) {
  const MatchResult m = match_priors(gts, priors, cfg.match_threshold);
  PriorTargets t;
  t.labels.assign(priors.size(), 0);
  t.offsets.assign(priors.size(), BoxOffsets{0, 0, 0, 0});
  for (std::size_t p = 0; p < priors.size(); ++p) {
    const int g = m.gt_index[p];
    if (g < 0)
      continue;
    const auto &gt = gts[static_cast<std::size_t>(g)];
    t.labels[p] = static_cast<std::size_t>(gt.label) + 1;
    t.offsets[p] = encode(gt, priors[p], cfg.var_center, cfg.var_size);
    ++t.num_positive;
  }
  return t;
}

/// Indices of the k negatives with highest background cross-entropy, ties to
/// the lower prior index.
template <typename T>
std::vector<std::size_t> select_hard_negatives(const Tensor<T> &cls_logits,
                                               const std::vector<std::size_t> &labels,
                                               std::size_t k) {
  const std::size_t rows = cls_logits.shape().n, dim = cls_logits.numel() / rows;
  std::vector<std::size_t> neg;
  std::vector<T> loss(rows, T(0));
  for (std::size_t p = 0; p < rows; ++p)
    if (labels[p] == 0) {
      neg.push_back(p);
      loss[p] = cross_entropy_row(cls_logits.ptr() + p * dim, dim, 0);
    }
  k = std::min(k, neg.size());
  std::partial_sort(neg.begin(), neg.begin() + static_cast<long>(k), neg.end(),
                    [&](std::size_t a, std::size_t b) {
                      return loss[a] > loss[b] || (loss[a] == loss[b] && a < b);
                    });
  neg.resize(k);
  std::sort(neg.begin(), neg.end());
  return neg;
}

template <typename T> struct MultiboxLoss {
  Tensor<T> cls; // scalar
  Tensor<T> loc; // scalar
  std::size_t num_positive = 0;
  std::vector<std::size_t> negatives;
};

/// Smooth-L1 over positives plus softmax cross-entropy over positives and
/// the hardest neg_pos_ratio * positives negatives, both divided by
/// `normalizer` (0 selects max(positives, 1)). With no positives the
/// classification term covers the neg_pos_ratio hardest negatives and the
/// localization term is 0.
///
/// cls_logits: (P, K, 1, 1); loc_pred: (P, 4, 1, 1).
template <typename T>
MultiboxLoss<T> multibox_loss(const Tensor<T> &cls_logits, const Tensor<T> &loc_pred,
                              const PriorTargets &targets, std::size_t neg_pos_ratio = 3,
                              double normalizer = 0) {
  const std::size_t rows = cls_logits.shape().n;
  if (loc_pred.shape().n != rows || loc_pred.numel() != rows * 4 ||
      targets.labels.size() != rows)
    throw ShapeError("multibox_loss: logits, offsets and targets disagree on prior count");
  MultiboxLoss<T> out;
  std::vector<std::size_t> pos;
  for (std::size_t p = 0; p < rows; ++p)
    if (targets.labels[p] != 0)
      pos.push_back(p);
  out.num_positive = pos.size();
  const std::size_t k = pos.empty() ? neg_pos_ratio : neg_pos_ratio * pos.size();
  out.negatives = select_hard_negatives(cls_logits, targets.labels, k);
  const T norm = static_cast<T>(
      normalizer > 0 ? normalizer : static_cast<double>(std::max<std::size_t>(pos.size(), 1)));

  std::vector<std::size_t> cls_rows(pos);
  cls_rows.insert(cls_rows.end(), out.negatives.begin(), out.negatives.end());
  std::sort(cls_rows.begin(), cls_rows.end());
  if (cls_rows.empty()) {
    out.cls = mul_scalar(sum(gather_rows(cls_logits, {0})), T(0));
  } else {
    std::vector<std::size_t> lab;
    for (std::size_t r : cls_rows)
      lab.push_back(targets.labels[r]);
    out.cls = mul_scalar(sum(softmax_ce(gather_rows(cls_logits, cls_rows), lab)), T(1) / norm);
  }
  if (pos.empty()) {
    out.loc = mul_scalar(sum(gather_rows(loc_pred, {0})), T(0));
  } else {
    std::vector<T> tgt;
    for (std::size_t p : pos)
      for (double v : targets.offsets[p])
        tgt.push_back(static_cast<T>(v));
    Tensor<T> target(Shape{pos.size(), 4, 1, 1}, std::move(tgt));
    out.loc = mul_scalar(sum(smooth_l1(gather_rows(loc_pred, pos), target)), T(1) / norm);
  }
  return out;
}

/// Greedy NMS in descending score order (ties to lower index). Returns kept
/// indices; a box is suppressed when IoU with a kept box exceeds the
/// threshold.
inline std::vector<std::size_t> nms(const std::vector<BoxXYXY> &boxes,
                                    const std::vector<double> &scores,
                                    double iou_threshold = 0.45, std::size_t top_k = 200) {
  if (boxes.size() != scores.size())
    throw ShapeError("nms: box and score counts differ");
  std::vector<std::size_t> order(boxes.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  std::vector<std::size_t> keep;
  for (std::size_t i : order) {
    if (keep.size() >= top_k)
      break;
    bool suppressed = false;
    for (std::size_t k : keep)
      if (iou(boxes[i], boxes[k]) > iou_threshold) {
        suppressed = true;
        break;
      }
    if (!suppressed)
      keep.push_back(i);
  }
  return keep;
}

struct PostprocessConfig {
  double conf_threshold = 0.01;
  double nms_iou = 0.45;
  std::size_t top_k = 200;      // per class after NMS
  std::size_t keep_top_k = 200; // per image
};

/// Softmax, per-class thresholding, decoding (clipped to the unit square),
/// per-class NMS, then a global top-k by score. Boxes are normalized.
template <typename T>
std::vector<Detection> postprocess(std::span<const T> cls_logits, std::span<const T> loc,
                                   const std::vector<PriorBox> &priors, const HeadConfig &head,
                                   const PostprocessConfig &cfg = {}) {
  const std::size_t np = priors.size(), k = head.num_classes;
  if (cls_logits.size() != np * k || loc.size() != np * 4)
    throw ShapeError("postprocess: head outputs do not match prior count");
  std::vector<double> probs(np * k);
  for (std::size_t p = 0; p < np; ++p) {
    const T *x = cls_logits.data() + p * k;
    const double m = static_cast<double>(*std::max_element(x, x + k));
    double s = 0;
    for (std::size_t j = 0; j < k; ++j)
      s += (probs[p * k + j] = std::exp(static_cast<double>(x[j]) - m));
    for (std::size_t j = 0; j < k; ++j)
      probs[p * k + j] /= s;
  }
  auto clip = [](double v) { return std::clamp(v, 0.0, 1.0); };
  std::vector<Detection> dets;
  for (std::size_t c = 1; c < k; ++c) {
    std::vector<BoxXYXY> boxes;
    std::vector<double> scores;
    for (std::size_t p = 0; p < np; ++p) {
      const double sc = probs[p * k + c];
      if (sc <= cfg.conf_threshold)
        continue;
      const BoxOffsets t{static_cast<double>(loc[p * 4]), static_cast<double>(loc[p * 4 + 1]),
                         static_cast<double>(loc[p * 4 + 2]),
                         static_cast<double>(loc[p * 4 + 3])};
      BoxXYXY b = decode(t, priors[p], head.var_center, head.var_size);
      b = {clip(b.xmin), clip(b.ymin), clip(b.xmax), clip(b.ymax), static_cast<int>(c - 1)};
      if (!b.valid())
        continue;
      boxes.push_back(b);
      scores.push_back(sc);
    }
    for (std::size_t i : nms(boxes, scores, cfg.nms_iou, cfg.top_k))
      dets.push_back({boxes[i], static_cast<int>(c - 1), scores[i]});
  }
  std::stable_sort(dets.begin(), dets.end(),
                   [](const Detection &a, const Detection &b) { return a.score > b.score; });
  if (dets.size() > cfg.keep_top_k)
    dets.resize(cfg.keep_top_k);
  return dets;
}

} // namespace rfb
