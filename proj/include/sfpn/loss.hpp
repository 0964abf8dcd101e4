#pragma once

#include <vector>

#include "sfpn/detection.hpp"
#include "sfpn/event_io.hpp"
#include "sfpn/spikefpn.hpp"

namespace sfpn {

struct LossWeights {
  double box = 1.0;
  double conf = 1.0;
  double cls = 1.0;
};

/// One GT bound to a head slot.
struct AssignedTarget {
  int sample = 0;
  int scale = 0;
  int anchor = 0;
  int cell_x = 0;
  int cell_y = 0;
  int class_id = 0;
  Box box;
};

struct Targets {
  int batch = 0;
  std::vector<AssignedTarget> positives;
  int dropped = 0;  // GTs whose slot was already taken
};

/// Each GT goes to the anchor (over all scales) whose shape IoU is highest,
/// at the cell holding its center. Scale grids come from `grids` as (h, w).
Targets assign_targets(const std::vector<std::vector<GtBox>>& gts, const AnchorSet& anchors,
                       const std::vector<int>& strides, const std::vector<std::pair<int, int>>& grids);
Targets assign_targets(const std::vector<std::vector<GtBox>>& gts, const AnchorSet& anchors, const HeadOutput& head);

struct LossBreakdown {
  double box = 0.0;
  double conf = 0.0;
  double cls = 0.0;
  double total = 0.0;
};

/// box: sum of (1 - IoU) over positives; conf: BCE on logits over every
/// slot; cls: softmax cross-entropy over positives. All divided by the batch
/// size. Throws NonFiniteError naming the offending head scale.
ag::Tensor detection_loss(ag::Tape& tape, const HeadOutput& head, const Targets& targets, const AnchorSet& anchors,
                          int num_classes, const LossWeights& weights = {}, LossBreakdown* breakdown = nullptr);

}  // namespace sfpn
