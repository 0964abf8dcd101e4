#pragma once

#include <cstdint>
#include <filesystem>
#include <utility>
#include <vector>

#include "sfpn/event_io.hpp"
#include "sfpn/spikefpn.hpp"

namespace sfpn {

/// Center-form box in pixels.
struct Box {
  double x = 0.0;
  double y = 0.0;
  double w = 0.0;
  double h = 0.0;
};

inline Box box_from_gt(const GtBox& g) { return {g.x + g.w / 2.0, g.y + g.h / 2.0, g.w, g.h}; }

struct Detection {
  int class_id = 0;
  double score = 0.0;
  Box box;
};

/// Anchor (w, h) pairs per head scale, finest scale first.
struct AnchorSet {
  std::vector<std::vector<std::pair<double, double>>> scales;

  /// {(8,8),(16,12),(24,24)} times 1, 2, 4 for the three scales.
  static AnchorSet defaults();
  int per_scale() const { return scales.empty() ? 0 : static_cast<int>(scales.front().size()); }
  void validate(int num_scales, int num_anchors) const;
};

/// IoU k-means over GT sizes; returns anchors sorted by area and split
/// evenly over the scales.
AnchorSet kmeans_anchors(const std::vector<GtBox>& boxes, int num_scales, int per_scale, std::uint64_t seed,
                         int iterations = 50);

double iou(const Box& a, const Box& b);

/// Decodes sample `n` of a batched head output. Every (cell, anchor, class)
/// whose score reaches `score_threshold` becomes a detection.
std::vector<Detection> decode(const HeadOutput& head, const AnchorSet& anchors, int num_classes,
                              double score_threshold, Geometry image, int n = 0);

/// Greedy per-class suppression; ties keep input order.
std::vector<Detection> nms(const std::vector<Detection>& dets, double iou_threshold = 0.5);

struct MapReport {
  double map50 = 0.0;
  double map50_95 = 0.0;
  std::vector<double> ap50;     // per class, -1 when the class has no GT
  std::vector<double> ap50_95;  // per class
};

/// AP of one class at one IoU threshold (all-point interpolation).
double average_precision(const std::vector<std::vector<Detection>>& preds, const std::vector<std::vector<GtBox>>& gts,
                         int class_id, double iou_threshold);

/// Throws std::invalid_argument when no image holds any GT box.
MapReport evaluate_map(const std::vector<std::vector<Detection>>& preds, const std::vector<std::vector<GtBox>>& gts,
                       int num_classes);

/// CSV `image_id,class_id,score,x,y,w,h`.
void write_detections_csv(const std::filesystem::path& path, const std::vector<std::vector<Detection>>& preds);

}  // namespace sfpn
