#pragma once

#include "rfb/detector.hpp"

#include "json.hpp"

#include <map>

namespace rfb {

enum class ApMode { eleven_point, all_points };

/// Eleven-point: mean over recall levels {0, 0.1, ..., 1} of the highest
/// precision at recall >= level. All-points: area under the monotone
/// precision envelope. Empty input yields 0.
inline double voc_ap(const std::vector<double> &recall, const std::vector<double> &precision,
                     ApMode mode = ApMode::eleven_point) {
  if (recall.size() != precision.size())
    throw ShapeError("voc_ap: recall and precision lengths differ");
  if (recall.empty())
    return 0.0;
  if (mode == ApMode::eleven_point) {
    double ap = 0;
    for (int i = 0; i <= 10; ++i) {
      const double t = i / 10.0;
      double p = 0;
      for (std::size_t k = 0; k < recall.size(); ++k)
        if (recall[k] >= t)
          p = std::max(p, precision[k]);
      ap += p / 11.0;
    }
    return ap;
  }
  std::vector<double> mrec{0.0}, mpre{0.0};
  mrec.insert(mrec.end(), recall.begin(), recall.end());
  mpre.insert(mpre.end(), precision.begin(), precision.end());
  mrec.push_back(1.0);
  mpre.push_back(0.0);
  for (std::size_t i = mpre.size() - 1; i > 0; --i)
    mpre[i - 1] = std::max(mpre[i - 1], mpre[i]);
  double ap = 0;
  for (std::size_t i = 1; i < mrec.size(); ++i)
    if (mrec[i] != mrec[i - 1])
      ap += (mrec[i] - mrec[i - 1]) * mpre[i];
  return ap;
}

/// A detection attributed to an image.
struct ImageDetection {
  std::size_t image = 0;
  Detection det;
};

struct ClassResult {
  int label = 0;
  double ap = 0;
  std::size_t n_gt = 0, tp = 0, fp = 0;
  std::vector<double> precision, recall;
};

struct EvalResult {
  std::vector<ClassResult> classes; // per class, AP averaged over thresholds
  double map = 0;
  std::vector<double> iou_thresholds;
  std::vector<double> map_per_threshold;
  std::vector<std::string> warnings;
};

/// Per class, detections are visited by descending score (ties keep input
/// order); each takes the highest-IoU ground truth of its image and is a true
/// positive when that IoU >= threshold and the ground truth is still unused.
/// Matches to difficult ground truths are ignored.
inline EvalResult evaluate(const std::vector<ImageDetection> &dets,
                           const std::vector<std::vector<BoxXYXY>> &gts,
                           const std::vector<double> &iou_thresholds = {0.5},
                           ApMode mode = ApMode::eleven_point) {
  if (iou_thresholds.empty())
    throw ShapeError("evaluate: no IoU thresholds");
  std::map<int, std::size_t> n_gt;
  for (const auto &img : gts)
    for (const auto &b : img)
      if (!b.difficult)
        ++n_gt[b.label];
      else
        n_gt.try_emplace(b.label, 0);
  for (const auto &d : dets)
    if (d.image >= gts.size())
      throw ShapeError("evaluate: detection references unknown image " +
                       std::to_string(d.image));

  EvalResult res;
  res.iou_thresholds = iou_thresholds;
  res.map_per_threshold.assign(iou_thresholds.size(), 0.0);
  std::size_t counted = 0;
  for (const auto &[label, count] : n_gt) {
    if (count == 0)
      continue;
    std::vector<std::size_t> order;
    for (std::size_t i = 0; i < dets.size(); ++i)
      if (dets[i].det.label == label)
        order.push_back(i);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      return dets[a].det.score > dets[b].det.score;
    });
    if (order.empty())
      res.warnings.push_back("class " + std::to_string(label) + " has no detections");
    ClassResult cr;
    cr.label = label;
    cr.n_gt = count;
    for (std::size_t ti = 0; ti < iou_thresholds.size(); ++ti) {
      const double thr = iou_thresholds[ti];
      std::vector<std::vector<bool>> used(gts.size());
      for (std::size_t i = 0; i < gts.size(); ++i)
        used[i].assign(gts[i].size(), false);
      std::vector<double> prec, rec;
      std::size_t tp = 0, fp = 0;
      for (std::size_t i : order) {
        const auto &d = dets[i];
        const auto &img = gts[d.image];
        double best = -1;
        std::size_t bj = 0;
        for (std::size_t j = 0; j < img.size(); ++j) {
          if (img[j].label != label)
            continue;
          const double o = iou(d.det.box, img[j]);
          if (o > best) {
            best = o;
            bj = j;
          }
        }
        if (best >= thr) {
          if (img[bj].difficult)
            continue;
          if (!used[d.image][bj]) {
            used[d.image][bj] = true;
            ++tp;
          } else {
            ++fp;
          }
        } else {
          ++fp;
        }
        rec.push_back(static_cast<double>(tp) / static_cast<double>(count));
        prec.push_back(static_cast<double>(tp) / static_cast<double>(tp + fp));
      }
      const double ap = voc_ap(rec, prec, mode);
      cr.ap += ap / static_cast<double>(iou_thresholds.size());
      res.map_per_threshold[ti] += ap;
      if (ti == 0) {
        cr.tp = tp;
        cr.fp = fp;
        cr.precision = prec;
        cr.recall = rec;
      }
    }
    res.map += cr.ap;
    res.classes.push_back(std::move(cr));
    ++counted;
  }
  if (counted) {
    res.map /= static_cast<double>(counted);
    for (auto &m : res.map_per_threshold)
      m /= static_cast<double>(counted);
  }
  return res;
}

/// 0.50:0.05:0.95
inline std::vector<double> coco_thresholds() {
  std::vector<double> t;
  for (int i = 0; i < 10; ++i)
    t.push_back(0.5 + 0.05 * i);
  return t;
}

inline nlohmann::json to_json(const EvalResult &r) {
  nlohmann::json classes = nlohmann::json::array();
  for (const auto &c : r.classes)
    classes.push_back({{"label", c.label},
                       {"ap", c.ap},
                       {"n_gt", c.n_gt},
                       {"tp", c.tp},
                       {"fp", c.fp},
                       {"precision", c.precision},
                       {"recall", c.recall}});
  return {{"map", r.map},
          {"iou_thresholds", r.iou_thresholds},
          {"map_per_threshold", r.map_per_threshold},
          {"classes", classes},
          {"warnings", r.warnings}};
}

} // namespace rfb
