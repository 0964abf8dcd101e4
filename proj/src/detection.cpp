#include "sfpn/detection.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <stdexcept>

#include "sfpn/random.hpp"

namespace sfpn {

namespace {

double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

Box clamp_to_image(const Box& b, Geometry g) {
  const double x0 = std::clamp(b.x - b.w / 2.0, 0.0, static_cast<double>(g.width));
  const double x1 = std::clamp(b.x + b.w / 2.0, 0.0, static_cast<double>(g.width));
  const double y0 = std::clamp(b.y - b.h / 2.0, 0.0, static_cast<double>(g.height));
  const double y1 = std::clamp(b.y + b.h / 2.0, 0.0, static_cast<double>(g.height));
  return {(x0 + x1) / 2.0, (y0 + y1) / 2.0, x1 - x0, y1 - y0};
}

}  // namespace

AnchorSet AnchorSet::defaults() {
  AnchorSet a;
  const std::vector<std::pair<double, double>> base{{8, 8}, {16, 12}, {24, 24}};
  for (double m : {1.0, 2.0, 4.0}) {
    std::vector<std::pair<double, double>> s;
    for (auto [w, h] : base) s.emplace_back(w * m, h * m);
    a.scales.push_back(s);
  }
  return a;
}

void AnchorSet::validate(int num_scales, int num_anchors) const {
  if (static_cast<int>(scales.size()) != num_scales) {
    throw std::invalid_argument("anchor set has " + std::to_string(scales.size()) + " scales, the network " +
                                std::to_string(num_scales));
  }
  for (const auto& s : scales) {
    if (static_cast<int>(s.size()) != num_anchors) throw std::invalid_argument("anchor count per scale mismatch");
    for (auto [w, h] : s) {
      if (!(w > 0.0 && h > 0.0)) throw std::invalid_argument("anchor sizes must be positive");
    }
  }
}

AnchorSet kmeans_anchors(const std::vector<GtBox>& boxes, int num_scales, int per_scale, std::uint64_t seed,
                         int iterations) {
  const int k = num_scales * per_scale;
  if (static_cast<int>(boxes.size()) < k) throw std::invalid_argument("fewer boxes than anchors");
  auto shape_iou = [](std::pair<double, double> a, std::pair<double, double> b) {
    const double inter = std::min(a.first, b.first) * std::min(a.second, b.second);
    return inter / (a.first * a.second + b.first * b.second - inter);
  };
  Rng rng(seed);
  std::vector<std::pair<double, double>> centers;
  std::vector<std::size_t> order(boxes.size());
  std::iota(order.begin(), order.end(), 0);
  for (int i = 0; i < k; ++i) {
    std::swap(order[i], order[i + rng.below(order.size() - i)]);
    centers.emplace_back(boxes[order[i]].w, boxes[order[i]].h);
  }
  std::vector<int> assign(boxes.size(), -1);
  for (int it = 0; it < iterations; ++it) {
    bool changed = false;
    for (std::size_t b = 0; b < boxes.size(); ++b) {
      int best = 0;
      double best_iou = -1.0;
      for (int c = 0; c < k; ++c) {
        double v = shape_iou({boxes[b].w, boxes[b].h}, centers[c]);
        if (v > best_iou) best_iou = v, best = c;
      }
      changed |= assign[b] != best;
      assign[b] = best;
    }
    std::vector<double> sw(k, 0.0), sh(k, 0.0), n(k, 0.0);
    for (std::size_t b = 0; b < boxes.size(); ++b) {
      sw[assign[b]] += boxes[b].w;
      sh[assign[b]] += boxes[b].h;
      n[assign[b]] += 1.0;
    }
    for (int c = 0; c < k; ++c) {
      if (n[c] > 0.0) centers[c] = {sw[c] / n[c], sh[c] / n[c]};
    }
    if (!changed) break;
  }
  std::sort(centers.begin(), centers.end(),
            [](auto a, auto b) { return a.first * a.second < b.first * b.second; });
  AnchorSet out;
  for (int s = 0; s < num_scales; ++s) {
    out.scales.emplace_back(centers.begin() + s * per_scale, centers.begin() + (s + 1) * per_scale);
  }
  return out;
}

double iou(const Box& a, const Box& b) {
  const double ix = std::min(a.x + a.w / 2, b.x + b.w / 2) - std::max(a.x - a.w / 2, b.x - b.w / 2);
  const double iy = std::min(a.y + a.h / 2, b.y + b.h / 2) - std::max(a.y - a.h / 2, b.y - b.h / 2);
  if (ix <= 0.0 || iy <= 0.0) return 0.0;
  const double inter = ix * iy;
  // order-independent so iou(a, b) == iou(b, a) exactly
  const double area_a = a.w * a.h, area_b = b.w * b.h;
  const double uni = std::max(area_a, area_b) + std::min(area_a, area_b) - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

std::vector<Detection> decode(const HeadOutput& head, const AnchorSet& anchors, int num_classes,
                              double score_threshold, Geometry image, int n) {
  anchors.validate(static_cast<int>(head.scales.size()), anchors.per_scale());
  const int K = anchors.per_scale();
  const int per_anchor = num_classes + 5;
  std::vector<Detection> out;
  std::vector<double> probs(num_classes);
  for (std::size_t d = 0; d < head.scales.size(); ++d) {
    const ag::Tensor& t = head.scales[d];
    if (t.rank() != 4 || t.dim(1) != K * per_anchor || n >= t.dim(0)) {
      throw ag::ShapeError("head output " + ag::to_string(t.shape()) + " does not fit " + std::to_string(K) +
                           " anchors x " + std::to_string(per_anchor));
    }
    const int H = t.dim(2), W = t.dim(3);
    const double stride = head.strides[d];
    auto v = t.data();
    const std::size_t plane = static_cast<std::size_t>(H) * W;
    const std::size_t base = static_cast<std::size_t>(n) * t.dim(1) * plane;
    for (int k = 0; k < K; ++k) {
      auto ch = [&](int c, int y, int x) { return v[base + (k * per_anchor + c) * plane + y * W + x]; };
      for (int y = 0; y < H; ++y) {
        for (int x = 0; x < W; ++x) {
          const double conf = sigmoid(ch(4, y, x));
          if (conf < score_threshold) continue;
          double mx = -std::numeric_limits<double>::infinity();
          for (int c = 0; c < num_classes; ++c) mx = std::max(mx, ch(5 + c, y, x));
          double z = 0.0;
          for (int c = 0; c < num_classes; ++c) z += probs[c] = std::exp(ch(5 + c, y, x) - mx);
          Box b{(sigmoid(ch(0, y, x)) + x) * stride, (sigmoid(ch(1, y, x)) + y) * stride,
                anchors.scales[d][k].first * std::exp(ch(2, y, x)), anchors.scales[d][k].second * std::exp(ch(3, y, x))};
          for (int c = 0; c < num_classes; ++c) {
            const double score = conf * probs[c] / z;
            if (score >= score_threshold) out.push_back({c, score, clamp_to_image(b, image)});
          }
        }
      }
    }
  }
  return out;
}

std::vector<Detection> nms(const std::vector<Detection>& dets, double iou_threshold) {
  std::vector<std::size_t> order(dets.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return dets[a].score > dets[b].score; });
  std::vector<Detection> kept;
  for (std::size_t i : order) {
    bool suppressed = false;
    for (const auto& k : kept) {
      if (k.class_id == dets[i].class_id && iou(k.box, dets[i].box) >= iou_threshold) {
        suppressed = true;
        break;
      }
    }
    if (!suppressed) kept.push_back(dets[i]);
  }
  return kept;
}

double average_precision(const std::vector<std::vector<Detection>>& preds, const std::vector<std::vector<GtBox>>& gts,
                         int class_id, double iou_threshold) {
  if (preds.size() != gts.size()) throw std::invalid_argument("prediction and GT image counts differ");
  struct Entry {
    double score;
    std::size_t image;
    Box box;
  };
  std::vector<Entry> entries;
  std::size_t positives = 0;
  std::vector<std::vector<bool>> matched(gts.size());
  for (std::size_t i = 0; i < gts.size(); ++i) {
    matched[i].assign(gts[i].size(), false);
    for (const auto& g : gts[i]) positives += g.class_id == class_id;
    for (const auto& p : preds[i]) {
      if (p.class_id == class_id) entries.push_back({p.score, i, p.box});
    }
  }
  if (positives == 0) return -1.0;
  std::stable_sort(entries.begin(), entries.end(), [](const Entry& a, const Entry& b) { return a.score > b.score; });

  std::vector<double> recall, precision;
  std::size_t tp = 0, fp = 0;
  for (const auto& e : entries) {
    int best = -1;
    double best_iou = iou_threshold;
    for (std::size_t g = 0; g < gts[e.image].size(); ++g) {
      const GtBox& gt = gts[e.image][g];
      if (gt.class_id != class_id || matched[e.image][g]) continue;
      const double v = iou(e.box, box_from_gt(gt));
      if (v >= best_iou) best_iou = v, best = static_cast<int>(g);
    }
    if (best >= 0) {
      matched[e.image][best] = true;
      ++tp;
    } else {
      ++fp;
    }
    recall.push_back(static_cast<double>(tp) / positives);
    precision.push_back(static_cast<double>(tp) / (tp + fp));
  }
  // precision envelope, then area under the step curve
  for (std::size_t i = precision.size(); i-- > 1;) precision[i - 1] = std::max(precision[i - 1], precision[i]);
  double ap = 0.0, prev_recall = 0.0;
  for (std::size_t i = 0; i < recall.size(); ++i) {
    ap += (recall[i] - prev_recall) * precision[i];
    prev_recall = recall[i];
  }
  return ap;
}

MapReport evaluate_map(const std::vector<std::vector<Detection>>& preds, const std::vector<std::vector<GtBox>>& gts,
                       int num_classes) {
  MapReport r;
  r.ap50.assign(num_classes, -1.0);
  r.ap50_95.assign(num_classes, -1.0);
  int counted = 0;
  for (int c = 0; c < num_classes; ++c) {
    const double ap50 = average_precision(preds, gts, c, 0.5);
    if (ap50 < 0.0) continue;
    double sum = 0.0;
    for (int i = 0; i < 10; ++i) sum += average_precision(preds, gts, c, 0.5 + 0.05 * i);
    r.ap50[c] = ap50;
    r.ap50_95[c] = sum / 10.0;
    r.map50 += ap50;
    r.map50_95 += sum / 10.0;
    ++counted;
  }
  if (counted == 0) throw std::invalid_argument("evaluate_map: no ground-truth boxes, recall is undefined");
  r.map50 /= counted;
  r.map50_95 /= counted;
  return r;
}

void write_detections_csv(const std::filesystem::path& path, const std::vector<std::vector<Detection>>& preds) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "image_id,class_id,score,x,y,w,h\n";
  out.precision(9);
  for (std::size_t i = 0; i < preds.size(); ++i) {
    for (const auto& d : preds[i]) {
      out << i << ',' << d.class_id << ',' << d.score << ',' << d.box.x << ',' << d.box.y << ',' << d.box.w << ','
          << d.box.h << '\n';
    }
  }
}

}  // namespace sfpn
