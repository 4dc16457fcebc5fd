#pragma once

// Reference implementations used as test oracles. They are written for
// clarity, not speed, and share no code with the library beyond its types.

#include "rfb/rfb.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

namespace rfb::test {

inline Tensor<double> random_tensor(SplitMix64 &rng, Shape s, double scale = 1.0) {
  std::vector<double> v(s.numel());
  for (double &x : v)
    x = scale * rng.normal();
  return Tensor<double>(s, std::move(v));
}

/// Direct seven-loop cross-correlation with explicit zero padding.
inline Tensor<double> direct_conv(const Tensor<double> &x, const Tensor<double> &w,
                                  const std::vector<double> &bias, std::size_t stride,
                                  std::size_t pad, std::size_t dil) {
  const Shape xs = x.shape(), ws = w.shape();
  const long keh = static_cast<long>(ws.h + (ws.h - 1) * (dil - 1));
  const long kew = static_cast<long>(ws.w + (ws.w - 1) * (dil - 1));
  const long oh = (static_cast<long>(xs.h + 2 * pad) - keh) / static_cast<long>(stride) + 1;
  const long ow = (static_cast<long>(xs.w + 2 * pad) - kew) / static_cast<long>(stride) + 1;
  Tensor<double> y(Shape{xs.n, ws.n, static_cast<std::size_t>(oh), static_cast<std::size_t>(ow)});
  for (std::size_t n = 0; n < xs.n; ++n)
    for (std::size_t o = 0; o < ws.n; ++o)
      for (long i = 0; i < oh; ++i)
        for (long j = 0; j < ow; ++j) {
          double acc = bias.empty() ? 0.0 : bias[o];
          for (std::size_t c = 0; c < xs.c; ++c)
            for (std::size_t a = 0; a < ws.h; ++a)
              for (std::size_t b = 0; b < ws.w; ++b) {
                const long yy = i * static_cast<long>(stride) - static_cast<long>(pad) +
                                static_cast<long>(a * dil);
                const long xx = j * static_cast<long>(stride) - static_cast<long>(pad) +
                                static_cast<long>(b * dil);
                if (yy < 0 || xx < 0 || yy >= static_cast<long>(xs.h) ||
                    xx >= static_cast<long>(xs.w))
                  continue;
                acc += x.at(n, c, static_cast<std::size_t>(yy), static_cast<std::size_t>(xx)) *
                       w.at(o, c, a, b);
              }
          y.at(n, o, static_cast<std::size_t>(i), static_cast<std::size_t>(j)) = acc;
        }
  return y;
}

/// Kernel with (d - 1) zeros inserted between neighbouring taps.
inline Tensor<double> inflate_kernel(const Tensor<double> &w, std::size_t d) {
  const Shape s = w.shape();
  Tensor<double> out(Shape{s.n, s.c, s.h + (s.h - 1) * (d - 1), s.w + (s.w - 1) * (d - 1)});
  for (std::size_t o = 0; o < s.n; ++o)
    for (std::size_t c = 0; c < s.c; ++c)
      for (std::size_t a = 0; a < s.h; ++a)
        for (std::size_t b = 0; b < s.w; ++b)
          out.at(o, c, a * d, b * d) = w.at(o, c, a, b);
  return out;
}

/// Pooling by enumerating each window's taps.
inline Tensor<double> direct_pool(const Tensor<double> &x, bool is_max, std::size_t k,
                                  std::size_t stride, std::size_t pad, std::size_t dil) {
  const Shape s = x.shape();
  const long ke = static_cast<long>(k + (k - 1) * (dil - 1));
  const long oh = (static_cast<long>(s.h + 2 * pad) - ke) / static_cast<long>(stride) + 1;
  const long ow = (static_cast<long>(s.w + 2 * pad) - ke) / static_cast<long>(stride) + 1;
  Tensor<double> y(Shape{s.n, s.c, static_cast<std::size_t>(oh), static_cast<std::size_t>(ow)});
  for (std::size_t n = 0; n < s.n; ++n)
    for (std::size_t c = 0; c < s.c; ++c)
      for (long i = 0; i < oh; ++i)
        for (long j = 0; j < ow; ++j) {
          double best = -std::numeric_limits<double>::infinity(), total = 0;
          for (std::size_t a = 0; a < k; ++a)
            for (std::size_t b = 0; b < k; ++b) {
              const long yy = i * static_cast<long>(stride) - static_cast<long>(pad) +
                              static_cast<long>(a * dil);
              const long xx = j * static_cast<long>(stride) - static_cast<long>(pad) +
                              static_cast<long>(b * dil);
              const bool in = yy >= 0 && xx >= 0 && yy < static_cast<long>(s.h) &&
                              xx < static_cast<long>(s.w);
              const double v =
                  in ? x.at(n, c, static_cast<std::size_t>(yy), static_cast<std::size_t>(xx))
                     : 0.0;
              if (in)
                best = std::max(best, v);
              total += v;
            }
          y.at(n, c, static_cast<std::size_t>(i), static_cast<std::size_t>(j)) =
              is_max ? best : total / static_cast<double>(k * k);
        }
  return y;
}

struct Box2 {
  std::size_t top, left, bottom, right;
  std::size_t height() const { return bottom - top + 1; }
  std::size_t width() const { return right - left + 1; }
};

/// Bounding box of the nonzero entries of a (1, C, H, W) gradient, summed
/// over channels.
inline Box2 nonzero_bbox(const Tensor<double> &g) {
  const Shape s = g.shape();
  Box2 b{s.h, s.w, 0, 0};
  bool any = false;
  for (std::size_t c = 0; c < s.c; ++c)
    for (std::size_t y = 0; y < s.h; ++y)
      for (std::size_t x = 0; x < s.w; ++x)
        if (g.at(0, c, y, x) != 0) {
          any = true;
          b.top = std::min(b.top, y);
          b.left = std::min(b.left, x);
          b.bottom = std::max(b.bottom, y);
          b.right = std::max(b.right, x);
        }
  if (!any)
    return Box2{0, 0, 0, 0};
  return b;
}

/// RF of a chain of (kernel, dilation, stride) layers, from the recurrence
/// written out directly.
struct Layer1d {
  std::size_t k, d, s;
};
inline std::size_t chain_rf(const std::vector<Layer1d> &layers) {
  std::size_t r = 1, jump = 1;
  for (const auto &l : layers) {
    r += (l.k - 1) * l.d * jump;
    jump *= l.s;
  }
  return r;
}

/// Quadratic NMS: a box survives if no higher-ranked surviving box
/// overlaps it by more than the threshold. Ranking: score desc, index asc.
inline std::vector<std::size_t> brute_nms(const std::vector<BoxXYXY> &boxes,
                                          const std::vector<double> &scores, double thr,
                                          std::size_t top_k) {
  const std::size_t n = boxes.size();
  auto ranks_before = [&](std::size_t a, std::size_t b) {
    return scores[a] > scores[b] || (scores[a] == scores[b] && a < b);
  };
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i)
    idx[i] = i;
  // selection sort, deliberately naive
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j)
      if (ranks_before(idx[j], idx[i]))
        std::swap(idx[i], idx[j]);
  std::vector<bool> alive(n, true);
  std::vector<std::size_t> keep;
  for (std::size_t a = 0; a < n; ++a) {
    if (!alive[a])
      continue;
    if (keep.size() == top_k)
      break;
    keep.push_back(idx[a]);
    for (std::size_t b = a + 1; b < n; ++b) {
      const BoxXYXY &p = boxes[idx[a]], &q = boxes[idx[b]];
      const double iw = std::max(0.0, std::min(p.xmax, q.xmax) - std::max(p.xmin, q.xmin));
      const double ih = std::max(0.0, std::min(p.ymax, q.ymax) - std::max(p.ymin, q.ymin));
      const double inter = iw * ih;
      const double uni = (p.xmax - p.xmin) * (p.ymax - p.ymin) +
                         (q.xmax - q.xmin) * (q.ymax - q.ymin) - inter;
      if (inter / uni > thr)
        alive[b] = false;
    }
  }
  return keep;
}

inline double plain_iou(const BoxXYXY &p, const BoxXYXY &q) {
  const double iw = std::max(0.0, std::min(p.xmax, q.xmax) - std::max(p.xmin, q.xmin));
  const double ih = std::max(0.0, std::min(p.ymax, q.ymax) - std::max(p.ymin, q.ymin));
  const double inter = iw * ih;
  return inter / ((p.xmax - p.xmin) * (p.ymax - p.ymin) + (q.xmax - q.xmin) * (q.ymax - q.ymin) -
                  inter);
}

/// Matching reference: bipartite rounds by exhaustive search for the global
/// maximum over the remaining (gt, prior) table, then per-prior argmax.
inline std::vector<int> exhaustive_match(const std::vector<BoxXYXY> &gts,
                                         const std::vector<PriorBox> &priors, double thr) {
  const std::size_t ng = gts.size(), np = priors.size();
  std::vector<std::vector<double>> table(ng, std::vector<double>(np));
  for (std::size_t g = 0; g < ng; ++g)
    for (std::size_t p = 0; p < np; ++p) {
      const auto &q = priors[p];
      table[g][p] =
          plain_iou(gts[g], {q.cx - q.w / 2, q.cy - q.h / 2, q.cx + q.w / 2, q.cy + q.h / 2});
    }
  std::vector<int> out(np, -1);
  std::vector<bool> gt_used(ng, false), prior_used(np, false);
  for (std::size_t round = 0; round < std::min(ng, np); ++round) {
    double best = -1;
    std::size_t bg = 0, bp = 0;
    for (std::size_t g = 0; g < ng; ++g)
      for (std::size_t p = 0; p < np; ++p)
        if (!gt_used[g] && !prior_used[p] && table[g][p] > best) {
          best = table[g][p];
          bg = g;
          bp = p;
        }
    gt_used[bg] = prior_used[bp] = true;
    out[bp] = static_cast<int>(bg);
  }
  for (std::size_t p = 0; p < np; ++p) {
    if (prior_used[p] || ng == 0)
      continue;
    std::size_t arg = 0;
    for (std::size_t g = 0; g < ng; ++g)
      if (table[g][p] > table[arg][p])
        arg = g;
    if (table[arg][p] >= thr)
      out[p] = static_cast<int>(arg);
  }
  return out;
}

/// Straight-line VOC AP for one class at one threshold.
inline double reference_ap(const std::vector<ImageDetection> &dets,
                           const std::vector<std::vector<BoxXYXY>> &gts, int label, double thr,
                           bool eleven) {
  std::vector<ImageDetection> mine;
  for (const auto &d : dets)
    if (d.det.label == label)
      mine.push_back(d);
  // insertion sort by descending score, stable
  for (std::size_t i = 1; i < mine.size(); ++i)
    for (std::size_t j = i; j > 0 && mine[j].det.score > mine[j - 1].det.score; --j)
      std::swap(mine[j], mine[j - 1]);
  std::size_t npos = 0;
  for (const auto &img : gts)
    for (const auto &b : img)
      if (b.label == label && !b.difficult)
        ++npos;
  std::vector<std::vector<int>> taken(gts.size());
  for (std::size_t i = 0; i < gts.size(); ++i)
    taken[i].assign(gts[i].size(), 0);
  std::vector<double> tp(mine.size(), 0), fp(mine.size(), 0);
  std::vector<bool> skip(mine.size(), false);
  for (std::size_t i = 0; i < mine.size(); ++i) {
    double ovmax = -1;
    int jmax = -1;
    const auto &img = gts[mine[i].image];
    for (std::size_t j = 0; j < img.size(); ++j)
      if (img[j].label == label) {
        const double o = plain_iou(mine[i].det.box, img[j]);
        if (o > ovmax) {
          ovmax = o;
          jmax = static_cast<int>(j);
        }
      }
    if (ovmax >= thr) {
      if (img[static_cast<std::size_t>(jmax)].difficult) {
        skip[i] = true;
      } else if (!taken[mine[i].image][static_cast<std::size_t>(jmax)]) {
        taken[mine[i].image][static_cast<std::size_t>(jmax)] = 1;
        tp[i] = 1;
      } else {
        fp[i] = 1;
      }
    } else {
      fp[i] = 1;
    }
  }
  std::vector<double> rec, prec;
  double ctp = 0, cfp = 0;
  for (std::size_t i = 0; i < mine.size(); ++i) {
    if (skip[i])
      continue;
    ctp += tp[i];
    cfp += fp[i];
    rec.push_back(ctp / static_cast<double>(npos));
    prec.push_back(ctp / (ctp + cfp));
  }
  if (rec.empty())
    return 0.0;
  if (eleven) {
    double ap = 0;
    for (int t = 0; t <= 10; ++t) {
      double p = 0;
      for (std::size_t i = 0; i < rec.size(); ++i)
        if (rec[i] >= t / 10.0 && prec[i] > p)
          p = prec[i];
      ap += p / 11.0;
    }
    return ap;
  }
  // area under the right-maximum envelope, summed over recall steps
  double ap = 0, prev_r = 0;
  for (std::size_t i = 0; i < rec.size(); ++i) {
    double envelope = 0;
    for (std::size_t j = i; j < rec.size(); ++j)
      envelope = std::max(envelope, prec[j]);
    ap += (rec[i] - prev_r) * envelope;
    prev_r = rec[i];
  }
  return ap;
}

inline BoxXYXY random_box(SplitMix64 &rng, double lo = 0.0, double hi = 1.0,
                          double min_side = 0.02) {
  const double x0 = rng.uniform(lo, hi - min_side), y0 = rng.uniform(lo, hi - min_side);
  const double x1 = rng.uniform(x0 + min_side, hi), y1 = rng.uniform(y0 + min_side, hi);
  return {x0, y0, x1, y1};
}

} // namespace rfb::test
