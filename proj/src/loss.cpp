#include "sfpn/loss.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <stdexcept>
#include <tuple>

namespace sfpn {

namespace {

constexpr double kMaxLogSize = 6.0;

double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

double softplus(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }

double shape_iou(double w0, double h0, double w1, double h1) {
  const double inter = std::min(w0, w1) * std::min(h0, h1);
  return inter / (w0 * h0 + w1 * h1 - inter);
}

// 1 - IoU between the decoded prediction and `gt`, plus its gradient with
// respect to (tx, ty, tw, th).
double box_term(const double t[4], double cell_x, double cell_y, double stride, double aw, double ah, const Box& gt,
                double grad[4]) {
  const double sx = sigmoid(t[0]), sy = sigmoid(t[1]);
  const bool clip_w = t[2] > kMaxLogSize, clip_h = t[3] > kMaxLogSize;
  const double pw = aw * std::exp(std::min(t[2], kMaxLogSize));
  const double ph = ah * std::exp(std::min(t[3], kMaxLogSize));
  const double px = (sx + cell_x) * stride, py = (sy + cell_y) * stride;

  // overlap along one axis and its partials w.r.t. center and size
  auto axis = [](double p, double s, double g, double gs, double& d_p, double& d_s) {
    const double pr = p + s / 2, pl = p - s / 2, gr = g + gs / 2, gl = g - gs / 2;
    const double len = std::min(pr, gr) - std::max(pl, gl);
    d_p = d_s = 0.0;
    if (len <= 0.0) return 0.0;
    const double r_from_p = pr < gr ? 1.0 : 0.0;
    const double l_from_p = pl > gl ? 1.0 : 0.0;
    d_p = r_from_p - l_from_p;
    d_s = 0.5 * r_from_p + 0.5 * l_from_p;
    return len;
  };
  double dix_dx, dix_dw, diy_dy, diy_dh;
  const double ix = axis(px, pw, gt.x, gt.w, dix_dx, dix_dw);
  const double iy = axis(py, ph, gt.y, gt.h, diy_dy, diy_dh);
  const double inter = ix * iy;
  const double uni = pw * ph + gt.w * gt.h - inter;
  const double iou = inter / uni;

  const double k = (uni + inter) / (uni * uni);  // d(I/U)/dI
  const double q = inter / (uni * uni);          // -d(I/U)/d(pw*ph)
  const double d_px = k * iy * dix_dx;
  const double d_py = k * ix * diy_dy;
  const double d_pw = k * iy * dix_dw - q * ph;
  const double d_ph = k * ix * diy_dh - q * pw;
  grad[0] = -d_px * stride * sx * (1.0 - sx);
  grad[1] = -d_py * stride * sy * (1.0 - sy);
  grad[2] = clip_w ? 0.0 : -d_pw * pw;
  grad[3] = clip_h ? 0.0 : -d_ph * ph;
  return 1.0 - iou;
}

}  // namespace

Targets assign_targets(const std::vector<std::vector<GtBox>>& gts, const AnchorSet& anchors,
                       const std::vector<int>& strides, const std::vector<std::pair<int, int>>& grids) {
  if (strides.size() != anchors.scales.size() || grids.size() != anchors.scales.size()) {
    throw std::invalid_argument("assign_targets: scale count mismatch");
  }
  Targets out;
  out.batch = static_cast<int>(gts.size());
  std::set<std::tuple<int, int, int, int, int>> taken;
  for (std::size_t n = 0; n < gts.size(); ++n) {
    for (const GtBox& g : gts[n]) {
      if (!(g.w > 0.0 && g.h > 0.0)) continue;
      int best_d = 0, best_k = 0;
      double best = -1.0;
      for (std::size_t d = 0; d < anchors.scales.size(); ++d) {
        for (std::size_t k = 0; k < anchors.scales[d].size(); ++k) {
          const double v = shape_iou(g.w, g.h, anchors.scales[d][k].first, anchors.scales[d][k].second);
          if (v > best) best = v, best_d = static_cast<int>(d), best_k = static_cast<int>(k);
        }
      }
      const Box b = box_from_gt(g);
      const int s = strides[best_d];
      const int cx = std::clamp(static_cast<int>(std::floor(b.x / s)), 0, grids[best_d].second - 1);
      const int cy = std::clamp(static_cast<int>(std::floor(b.y / s)), 0, grids[best_d].first - 1);
      if (!taken.insert({static_cast<int>(n), best_d, best_k, cy, cx}).second) {
        ++out.dropped;
        continue;
      }
      out.positives.push_back({static_cast<int>(n), best_d, best_k, cx, cy, g.class_id, b});
    }
  }
  return out;
}

Targets assign_targets(const std::vector<std::vector<GtBox>>& gts, const AnchorSet& anchors, const HeadOutput& head) {
  std::vector<std::pair<int, int>> grids;
  for (const auto& t : head.scales) grids.emplace_back(t.dim(2), t.dim(3));
  return assign_targets(gts, anchors, head.strides, grids);
}

ag::Tensor detection_loss(ag::Tape& tape, const HeadOutput& head, const Targets& targets, const AnchorSet& anchors,
                          int num_classes, const LossWeights& weights, LossBreakdown* breakdown) {
  anchors.validate(static_cast<int>(head.scales.size()), anchors.per_scale());
  const int K = anchors.per_scale();
  const int per_anchor = num_classes + 5;
  const int N = targets.batch;
  for (std::size_t d = 0; d < head.scales.size(); ++d) {
    const auto& t = head.scales[d];
    if (t.rank() != 4 || t.dim(0) != N || t.dim(1) != K * per_anchor) {
      throw ag::ShapeError("detection_loss: head scale " + std::to_string(d) + " has shape " +
                           ag::to_string(t.shape()));
    }
    for (double v : t.data()) {
      if (!std::isfinite(v)) {
        throw ag::NonFiniteError("detection_loss: non-finite value in head scale " + std::to_string(d) + " " +
                                 ag::to_string(t.shape()));
      }
    }
  }
  const double inv_n = 1.0 / std::max(N, 1);

  // d(loss)/d(logits) is built alongside the value.
  std::vector<std::vector<double>> grads(head.scales.size());
  LossBreakdown lb;
  for (std::size_t d = 0; d < head.scales.size(); ++d) {
    auto v = head.scales[d].data();
    auto& g = grads[d];
    g.assign(v.size(), 0.0);
    const std::size_t plane = static_cast<std::size_t>(head.scales[d].dim(2)) * head.scales[d].dim(3);
    for (int n = 0; n < N; ++n) {
      for (int k = 0; k < K; ++k) {
        const std::size_t off = (static_cast<std::size_t>(n) * K * per_anchor + k * per_anchor + 4) * plane;
        for (std::size_t p = 0; p < plane; ++p) {
          const double x = v[off + p];
          lb.conf += softplus(x) * inv_n;
          g[off + p] += weights.conf * sigmoid(x) * inv_n;
        }
      }
    }
  }

  std::vector<double> probs(num_classes);
  for (const auto& tg : targets.positives) {
    const auto& t = head.scales[tg.scale];
    auto v = t.data();
    auto& g = grads[tg.scale];
    const int W = t.dim(3);
    const std::size_t plane = static_cast<std::size_t>(t.dim(2)) * W;
    auto idx = [&](int c) {
      return (static_cast<std::size_t>(tg.sample) * K * per_anchor + tg.anchor * per_anchor + c) * plane +
             static_cast<std::size_t>(tg.cell_y) * W + tg.cell_x;
    };
    // objectness target 1: BCE gains -x
    lb.conf -= v[idx(4)] * inv_n;
    g[idx(4)] -= weights.conf * inv_n;

    const double tv[4] = {v[idx(0)], v[idx(1)], v[idx(2)], v[idx(3)]};
    double bg[4];
    const auto [aw, ah] = anchors.scales[tg.scale][tg.anchor];
    lb.box += box_term(tv, tg.cell_x, tg.cell_y, head.strides[tg.scale], aw, ah, tg.box, bg) * inv_n;
    for (int c = 0; c < 4; ++c) g[idx(c)] += weights.box * bg[c] * inv_n;

    if (tg.class_id < 0 || tg.class_id >= num_classes) {
      throw std::invalid_argument("target class " + std::to_string(tg.class_id) + " outside [0, " +
                                  std::to_string(num_classes) + ")");
    }
    double mx = v[idx(5)];
    for (int c = 1; c < num_classes; ++c) mx = std::max(mx, v[idx(5 + c)]);
    double z = 0.0;
    for (int c = 0; c < num_classes; ++c) z += probs[c] = std::exp(v[idx(5 + c)] - mx);
    lb.cls += (std::log(z) + mx - v[idx(5 + tg.class_id)]) * inv_n;
    for (int c = 0; c < num_classes; ++c) {
      g[idx(5 + c)] += weights.cls * (probs[c] / z - (c == tg.class_id ? 1.0 : 0.0)) * inv_n;
    }
  }
  lb.total = weights.box * lb.box + weights.conf * lb.conf + weights.cls * lb.cls;
  if (!std::isfinite(lb.total)) throw ag::NonFiniteError("detection_loss: loss is not finite");
  if (breakdown) *breakdown = lb;

  bool any = false;
  for (const auto& t : head.scales) any |= t.requires_grad();
  ag::Tensor out({1}, tape.recording() && any);
  out.data()[0] = lb.total;
  if (out.requires_grad()) {
    std::vector<std::shared_ptr<ag::detail::Node>> nodes;
    for (const auto& t : head.scales) nodes.push_back(t.node());
    tape.record([nodes, grads = std::move(grads), on = out.node()] {
      if (on->grad.empty()) return;
      const double seed = on->grad[0];
      for (std::size_t d = 0; d < nodes.size(); ++d) {
        if (!nodes[d]->requires_grad) continue;
        auto& g = nodes[d]->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += seed * grads[d][i];
      }
    });
  }
  return out;
}

}  // namespace sfpn
