#include "sfpn/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <initializer_list>

namespace sfpn::ag {
namespace {

using MatRM = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapRM = Eigen::Map<MatRM>;
using CMapRM = Eigen::Map<const MatRM>;
using NodePtr = std::shared_ptr<detail::Node>;

bool wants_grad(const Tape& tape, std::initializer_list<const Tensor*> inputs) {
  if (!tape.recording()) return false;
  return std::any_of(inputs.begin(), inputs.end(), [](const Tensor* t) { return t->requires_grad(); });
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  }
}

void require_rank4(const Tensor& t, const char* op) {
  if (t.rank() != 4) throw ShapeError(std::string(op) + ": expected [N,C,H,W], got " + to_string(t.shape()));
}

// Output grad of a node, or nullptr if nothing flowed into it.
const std::vector<double>* grad_of(const NodePtr& n) {
  return n->grad.size() == n->value.size() && !n->value.empty() ? &n->grad : nullptr;
}

Tensor finish(const Tape& tape, Tensor out, const char* op) {
  tape.verify(out, op);
  return out;
}

struct ConvGeometry {
  int n, cin, h, w, cout, k, stride, pad, ho, wo;
  std::size_t patch() const { return static_cast<std::size_t>(cin) * k * k; }
  std::size_t positions() const { return static_cast<std::size_t>(ho) * wo; }
  std::size_t columns() const { return static_cast<std::size_t>(n) * positions(); }
};

void im2col(const double* x, const ConvGeometry& g, double* col) {
  const std::size_t cols = g.columns();
  const std::size_t plane = static_cast<std::size_t>(g.h) * g.w;
  for (int ci = 0; ci < g.cin; ++ci) {
    for (int ky = 0; ky < g.k; ++ky) {
      for (int kx = 0; kx < g.k; ++kx) {
        double* row = col + ((static_cast<std::size_t>(ci) * g.k + ky) * g.k + kx) * cols;
        for (int n = 0; n < g.n; ++n) {
          const double* src = x + (static_cast<std::size_t>(n) * g.cin + ci) * plane;
          double* dst = row + n * g.positions();
          for (int oy = 0; oy < g.ho; ++oy) {
            const int iy = oy * g.stride - g.pad + ky;
            double* d = dst + static_cast<std::size_t>(oy) * g.wo;
            if (iy < 0 || iy >= g.h) {
              std::fill(d, d + g.wo, 0.0);
              continue;
            }
            const double* s = src + static_cast<std::size_t>(iy) * g.w;
            for (int ox = 0; ox < g.wo; ++ox) {
              const int ix = ox * g.stride - g.pad + kx;
              d[ox] = (ix >= 0 && ix < g.w) ? s[ix] : 0.0;
            }
          }
        }
      }
    }
  }
}

void col2im_add(const double* col, const ConvGeometry& g, double* dx) {
  const std::size_t cols = g.columns();
  const std::size_t plane = static_cast<std::size_t>(g.h) * g.w;
  for (int ci = 0; ci < g.cin; ++ci) {
    for (int ky = 0; ky < g.k; ++ky) {
      for (int kx = 0; kx < g.k; ++kx) {
        const double* row = col + ((static_cast<std::size_t>(ci) * g.k + ky) * g.k + kx) * cols;
        for (int n = 0; n < g.n; ++n) {
          double* dst = dx + (static_cast<std::size_t>(n) * g.cin + ci) * plane;
          const double* src = row + n * g.positions();
          for (int oy = 0; oy < g.ho; ++oy) {
            const int iy = oy * g.stride - g.pad + ky;
            if (iy < 0 || iy >= g.h) continue;
            const double* s = src + static_cast<std::size_t>(oy) * g.wo;
            double* d = dst + static_cast<std::size_t>(iy) * g.w;
            for (int ox = 0; ox < g.wo; ++ox) {
              const int ix = ox * g.stride - g.pad + kx;
              if (ix >= 0 && ix < g.w) d[ix] += s[ox];
            }
          }
        }
      }
    }
  }
}

// [N, C, P] <-> [C, N*P]
void batch_to_channel_major(const double* src, int n, int c, std::size_t p, double* dst) {
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < c; ++j) {
      std::copy_n(src + (static_cast<std::size_t>(i) * c + j) * p, p, dst + (static_cast<std::size_t>(j) * n + i) * p);
    }
  }
}

void channel_major_to_batch(const double* src, int n, int c, std::size_t p, double* dst) {
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < c; ++j) {
      std::copy_n(src + (static_cast<std::size_t>(j) * n + i) * p, p, dst + (static_cast<std::size_t>(i) * c + j) * p);
    }
  }
}

template <typename Fwd, typename Bwd>
Tensor unary_elementwise(Tape& tape, const Tensor& x, const char* op, Fwd fwd, Bwd bwd) {
  Tensor out(x.shape(), wants_grad(tape, {&x}));
  auto xs = x.data();
  auto os = out.data();
  for (std::size_t i = 0; i < xs.size(); ++i) os[i] = fwd(xs[i]);
  if (out.requires_grad()) {
    tape.record([xn = x.node(), on = out.node(), bwd] {
      const auto* go = grad_of(on);
      if (!go) return;
      auto& gx = xn->ensure_grad();
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += (*go)[i] * bwd(xn->value[i], on->value[i]);
    });
  }
  return finish(tape, std::move(out), op);
}

}  // namespace

// ---- elementwise -------------------------------------------------------------

Tensor add(Tape& tape, const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  Tensor out(a.shape(), wants_grad(tape, {&a, &b}));
  auto as = a.data(), bs = b.data();
  auto os = out.data();
  for (std::size_t i = 0; i < os.size(); ++i) os[i] = as[i] + bs[i];
  if (out.requires_grad()) {
    tape.record([an = a.node(), bn = b.node(), on = out.node()] {
      const auto* go = grad_of(on);
      if (!go) return;
      for (const auto& n : {an, bn}) {
        if (!n->requires_grad) continue;
        auto& g = n->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += (*go)[i];
      }
    });
  }
  return finish(tape, std::move(out), "add");
}

Tensor sub(Tape& tape, const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  Tensor out(a.shape(), wants_grad(tape, {&a, &b}));
  auto as = a.data(), bs = b.data();
  auto os = out.data();
  for (std::size_t i = 0; i < os.size(); ++i) os[i] = as[i] - bs[i];
  if (out.requires_grad()) {
    tape.record([an = a.node(), bn = b.node(), on = out.node()] {
      const auto* go = grad_of(on);
      if (!go) return;
      if (an->requires_grad) {
        auto& g = an->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += (*go)[i];
      }
      if (bn->requires_grad) {
        auto& g = bn->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] -= (*go)[i];
      }
    });
  }
  return finish(tape, std::move(out), "sub");
}

Tensor mul(Tape& tape, const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  Tensor out(a.shape(), wants_grad(tape, {&a, &b}));
  auto as = a.data(), bs = b.data();
  auto os = out.data();
  for (std::size_t i = 0; i < os.size(); ++i) os[i] = as[i] * bs[i];
  if (out.requires_grad()) {
    tape.record([an = a.node(), bn = b.node(), on = out.node()] {
      const auto* go = grad_of(on);
      if (!go) return;
      if (an->requires_grad) {
        auto& g = an->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += (*go)[i] * bn->value[i];
      }
      if (bn->requires_grad) {
        auto& g = bn->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += (*go)[i] * an->value[i];
      }
    });
  }
  return finish(tape, std::move(out), "mul");
}

Tensor scale(Tape& tape, const Tensor& x, double factor) {
  return unary_elementwise(
      tape, x, "scale", [factor](double v) { return v * factor; }, [factor](double, double) { return factor; });
}

Tensor add_scalar(Tape& tape, const Tensor& x, double offset) {
  return unary_elementwise(
      tape, x, "add_scalar", [offset](double v) { return v + offset; }, [](double, double) { return 1.0; });
}

Tensor one_minus(Tape& tape, const Tensor& x) {
  return unary_elementwise(
      tape, x, "one_minus", [](double v) { return 1.0 - v; }, [](double, double) { return -1.0; });
}

Tensor mul_scalar(Tape& tape, const Tensor& x, const Tensor& s) {
  if (s.size() != 1) throw ShapeError("mul_scalar: factor must have one element, got " + to_string(s.shape()));
  Tensor out(x.shape(), wants_grad(tape, {&x, &s}));
  const double f = s[0];
  auto xs = x.data();
  auto os = out.data();
  for (std::size_t i = 0; i < os.size(); ++i) os[i] = xs[i] * f;
  if (out.requires_grad()) {
    tape.record([xn = x.node(), sn = s.node(), on = out.node()] {
      const auto* go = grad_of(on);
      if (!go) return;
      if (xn->requires_grad) {
        auto& g = xn->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += (*go)[i] * sn->value[0];
      }
      if (sn->requires_grad) {
        double acc = 0.0;
        for (std::size_t i = 0; i < go->size(); ++i) acc += (*go)[i] * xn->value[i];
        sn->ensure_grad()[0] += acc;
      }
    });
  }
  return finish(tape, std::move(out), "mul_scalar");
}

Tensor sum(Tape& tape, const Tensor& x) {
  Tensor out({1}, wants_grad(tape, {&x}));
  double acc = 0.0;
  for (double v : x.data()) acc += v;
  out.data()[0] = acc;
  if (out.requires_grad()) {
    tape.record([xn = x.node(), on = out.node()] {
      const auto* go = grad_of(on);
      if (!go) return;
      auto& g = xn->ensure_grad();
      for (double& v : g) v += (*go)[0];
    });
  }
  return finish(tape, std::move(out), "sum");
}

// ---- layout -------------------------------------------------------------------

Tensor slice_batch(Tape& tape, const Tensor& x, int start, int count) {
  if (x.rank() < 1 || start < 0 || count < 0 || start + count > x.dim(0)) {
    throw ShapeError("slice_batch: rows [" + std::to_string(start) + "," + std::to_string(start + count) +
                     ") out of range for " + to_string(x.shape()));
  }
  Shape shape = x.shape();
  shape[0] = count;
  const std::size_t row = x.dim(0) == 0 ? 0 : x.size() / x.dim(0);
  Tensor out(shape, wants_grad(tape, {&x}));
  std::copy_n(x.data().begin() + start * row, count * row, out.data().begin());
  if (out.requires_grad()) {
    tape.record([xn = x.node(), on = out.node(), offset = start * row] {
      const auto* go = grad_of(on);
      if (!go) return;
      auto& g = xn->ensure_grad();
      for (std::size_t i = 0; i < go->size(); ++i) g[offset + i] += (*go)[i];
    });
  }
  return finish(tape, std::move(out), "slice_batch");
}

Tensor concat_batch(Tape& tape, const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_batch: no inputs");
  Shape shape = parts.front().shape();
  bool rg = false;
  int rows = 0;
  for (const auto& p : parts) {
    Shape tail(p.shape().begin() + 1, p.shape().end());
    if (p.rank() != shape.size() || tail != Shape(shape.begin() + 1, shape.end())) {
      throw ShapeError("concat_batch: incompatible " + to_string(p.shape()) + " vs " + to_string(shape));
    }
    rows += p.dim(0);
    rg = rg || p.requires_grad();
  }
  shape[0] = rows;
  Tensor out(shape, tape.recording() && rg);
  auto os = out.data();
  std::size_t offset = 0;
  for (const auto& p : parts) {
    std::copy(p.data().begin(), p.data().end(), os.begin() + offset);
    offset += p.size();
  }
  if (out.requires_grad()) {
    std::vector<NodePtr> nodes;
    for (const auto& p : parts) nodes.push_back(p.node());
    tape.record([nodes = std::move(nodes), on = out.node()] {
      const auto* go = grad_of(on);
      if (!go) return;
      std::size_t offset = 0;
      for (const auto& n : nodes) {
        if (n->requires_grad) {
          auto& g = n->ensure_grad();
          for (std::size_t i = 0; i < g.size(); ++i) g[i] += (*go)[offset + i];
        }
        offset += n->value.size();
      }
    });
  }
  return finish(tape, std::move(out), "concat_batch");
}

Tensor concat_channels(Tape& tape, const Tensor& a, const Tensor& b) {
  require_rank4(a, "concat_channels");
  require_rank4(b, "concat_channels");
  if (a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2) || a.dim(3) != b.dim(3)) {
    throw ShapeError("concat_channels: spatial/batch mismatch " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  }
  const int n = a.dim(0), ca = a.dim(1), cb = b.dim(1);
  const std::size_t plane = static_cast<std::size_t>(a.dim(2)) * a.dim(3);
  Tensor out({n, ca + cb, a.dim(2), a.dim(3)}, wants_grad(tape, {&a, &b}));
  auto os = out.data();
  for (int i = 0; i < n; ++i) {
    std::copy_n(a.data().begin() + i * ca * plane, ca * plane, os.begin() + i * (ca + cb) * plane);
    std::copy_n(b.data().begin() + i * cb * plane, cb * plane, os.begin() + (i * (ca + cb) + ca) * plane);
  }
  if (out.requires_grad()) {
    tape.record([an = a.node(), bn = b.node(), on = out.node(), n, ca, cb, plane] {
      const auto* go = grad_of(on);
      if (!go) return;
      for (int i = 0; i < n; ++i) {
        if (an->requires_grad && ca > 0) {
          auto& g = an->ensure_grad();
          for (std::size_t j = 0; j < ca * plane; ++j) g[i * ca * plane + j] += (*go)[i * (ca + cb) * plane + j];
        }
        if (bn->requires_grad && cb > 0) {
          auto& g = bn->ensure_grad();
          for (std::size_t j = 0; j < cb * plane; ++j) {
            g[i * cb * plane + j] += (*go)[(i * (ca + cb) + ca) * plane + j];
          }
        }
      }
    });
  }
  return finish(tape, std::move(out), "concat_channels");
}

Tensor upsample_nearest_x2(Tape& tape, const Tensor& x) {
  require_rank4(x, "upsample_nearest_x2");
  const int nc = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
  Tensor out({x.dim(0), x.dim(1), 2 * h, 2 * w}, wants_grad(tape, {&x}));
  auto xs = x.data();
  auto os = out.data();
  for (int p = 0; p < nc; ++p) {
    const double* src = xs.data() + static_cast<std::size_t>(p) * h * w;
    double* dst = os.data() + static_cast<std::size_t>(p) * 4 * h * w;
    for (int y = 0; y < 2 * h; ++y) {
      for (int xx = 0; xx < 2 * w; ++xx) dst[y * 2 * w + xx] = src[(y / 2) * w + xx / 2];
    }
  }
  if (out.requires_grad()) {
    tape.record([xn = x.node(), on = out.node(), nc, h, w] {
      const auto* go = grad_of(on);
      if (!go) return;
      auto& g = xn->ensure_grad();
      for (int p = 0; p < nc; ++p) {
        const double* src = go->data() + static_cast<std::size_t>(p) * 4 * h * w;
        double* dst = g.data() + static_cast<std::size_t>(p) * h * w;
        for (int y = 0; y < 2 * h; ++y) {
          for (int xx = 0; xx < 2 * w; ++xx) dst[(y / 2) * w + xx / 2] += src[y * 2 * w + xx];
        }
      }
    });
  }
  return finish(tape, std::move(out), "upsample_nearest_x2");
}

// ---- convolution / normalization ---------------------------------------------

Tensor conv2d(Tape& tape, const Tensor& input, const Tensor& weight, int stride, int padding) {
  require_rank4(input, "conv2d");
  require_rank4(weight, "conv2d");
  const int k = weight.dim(2);
  if (k != weight.dim(3) || (k != 1 && k != 3)) {
    throw ShapeError("conv2d: only 1x1 and 3x3 kernels are supported, got " + to_string(weight.shape()));
  }
  if (input.dim(1) != weight.dim(1)) {
    throw ShapeError("conv2d: input has " + std::to_string(input.dim(1)) + " channels, weight expects " +
                     std::to_string(weight.dim(1)));
  }
  if (stride < 1 || padding < 0) throw ShapeError("conv2d: invalid stride/padding");
  ConvGeometry g{input.dim(0), input.dim(1), input.dim(2), input.dim(3), weight.dim(0), k, stride, padding, 0, 0};
  g.ho = (g.h + 2 * padding - k) / stride + 1;
  g.wo = (g.w + 2 * padding - k) / stride + 1;
  if (g.ho <= 0 || g.wo <= 0) throw ShapeError("conv2d: input too small for kernel");

  Tensor out({g.n, g.cout, g.ho, g.wo}, wants_grad(tape, {&input, &weight}));
  std::vector<double> col(g.patch() * g.columns());
  im2col(input.data().data(), g, col.data());
  CMapRM wm(weight.data().data(), g.cout, static_cast<Eigen::Index>(g.patch()));
  CMapRM cm(col.data(), static_cast<Eigen::Index>(g.patch()), static_cast<Eigen::Index>(g.columns()));
  if (g.n == 1) {
    MapRM om(out.data().data(), g.cout, static_cast<Eigen::Index>(g.columns()));
    om.noalias() = wm * cm;
  } else {
    MatRM tmp(g.cout, static_cast<Eigen::Index>(g.columns()));
    tmp.noalias() = wm * cm;
    channel_major_to_batch(tmp.data(), g.n, g.cout, g.positions(), out.data().data());
  }

  if (out.requires_grad()) {
    tape.record([xn = input.node(), wn = weight.node(), on = out.node(), g] {
      const auto* go = grad_of(on);
      if (!go) return;
      MatRM g2(g.cout, static_cast<Eigen::Index>(g.columns()));
      if (g.n == 1) {
        std::copy(go->begin(), go->end(), g2.data());
      } else {
        batch_to_channel_major(go->data(), g.n, g.cout, g.positions(), g2.data());
      }
      if (wn->requires_grad) {
        std::vector<double> col(g.patch() * g.columns());
        im2col(xn->value.data(), g, col.data());
        CMapRM cm(col.data(), static_cast<Eigen::Index>(g.patch()), static_cast<Eigen::Index>(g.columns()));
        MapRM gw(wn->ensure_grad().data(), g.cout, static_cast<Eigen::Index>(g.patch()));
        gw.noalias() += g2 * cm.transpose();
      }
      if (xn->requires_grad) {
        CMapRM wm(wn->value.data(), g.cout, static_cast<Eigen::Index>(g.patch()));
        MatRM dcol(static_cast<Eigen::Index>(g.patch()), static_cast<Eigen::Index>(g.columns()));
        dcol.noalias() = wm.transpose() * g2;
        col2im_add(dcol.data(), g, xn->ensure_grad().data());
      }
    });
  }
  return finish(tape, std::move(out), "conv2d");
}

Tensor add_channel_bias(Tape& tape, const Tensor& x, const Tensor& bias) {
  require_rank4(x, "add_channel_bias");
  if (bias.size() != static_cast<std::size_t>(x.dim(1))) {
    throw ShapeError("add_channel_bias: bias " + to_string(bias.shape()) + " vs input " + to_string(x.shape()));
  }
  const int n = x.dim(0), c = x.dim(1);
  const std::size_t plane = static_cast<std::size_t>(x.dim(2)) * x.dim(3);
  Tensor out(x.shape(), wants_grad(tape, {&x, &bias}));
  auto xs = x.data();
  auto os = out.data();
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < c; ++j) {
      const std::size_t base = (static_cast<std::size_t>(i) * c + j) * plane;
      for (std::size_t p = 0; p < plane; ++p) os[base + p] = xs[base + p] + bias[j];
    }
  }
  if (out.requires_grad()) {
    tape.record([xn = x.node(), bn = bias.node(), on = out.node(), n, c, plane] {
      const auto* go = grad_of(on);
      if (!go) return;
      if (xn->requires_grad) {
        auto& g = xn->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += (*go)[i];
      }
      if (bn->requires_grad) {
        auto& g = bn->ensure_grad();
        for (int i = 0; i < n; ++i) {
          for (int j = 0; j < c; ++j) {
            const std::size_t base = (static_cast<std::size_t>(i) * c + j) * plane;
            double acc = 0.0;
            for (std::size_t p = 0; p < plane; ++p) acc += (*go)[base + p];
            g[j] += acc;
          }
        }
      }
    });
  }
  return finish(tape, std::move(out), "add_channel_bias");
}

Tensor batch_norm(Tape& tape, const Tensor& x, const Tensor& gamma, const Tensor& beta, BatchNormState& state,
                  bool train) {
  require_rank4(x, "batch_norm");
  const int n = x.dim(0), c = x.dim(1);
  if (gamma.size() != static_cast<std::size_t>(c) || beta.size() != static_cast<std::size_t>(c) ||
      state.running_mean.size() != static_cast<std::size_t>(c) ||
      state.running_var.size() != static_cast<std::size_t>(c)) {
    throw ShapeError("batch_norm: parameters do not match " + std::to_string(c) + " channels");
  }
  if (!train && !state.initialized) {
    throw std::logic_error("batch_norm: eval mode before any training step (running statistics uninitialized)");
  }
  const std::size_t plane = static_cast<std::size_t>(x.dim(2)) * x.dim(3);
  const double count = static_cast<double>(n) * static_cast<double>(plane);
  std::vector<double> mean(c), invstd(c);
  auto xs = x.data();

  for (int j = 0; j < c; ++j) {
    if (train) {
      double s = 0.0;
      for (int i = 0; i < n; ++i) {
        const double* p = xs.data() + (static_cast<std::size_t>(i) * c + j) * plane;
        for (std::size_t q = 0; q < plane; ++q) s += p[q];
      }
      const double mu = s / count;
      double ss = 0.0;
      for (int i = 0; i < n; ++i) {
        const double* p = xs.data() + (static_cast<std::size_t>(i) * c + j) * plane;
        for (std::size_t q = 0; q < plane; ++q) ss += (p[q] - mu) * (p[q] - mu);
      }
      const double var = ss / count;
      mean[j] = mu;
      invstd[j] = 1.0 / std::sqrt(var + state.eps);
      const double unbiased = count > 1.0 ? ss / (count - 1.0) : var;
      state.running_mean[j] = (1.0 - state.momentum) * state.running_mean[j] + state.momentum * mu;
      state.running_var[j] = (1.0 - state.momentum) * state.running_var[j] + state.momentum * unbiased;
    } else {
      mean[j] = state.running_mean[j];
      invstd[j] = 1.0 / std::sqrt(state.running_var[j] + state.eps);
    }
  }
  if (train) state.initialized = true;

  Tensor out(x.shape(), wants_grad(tape, {&x, &gamma, &beta}));
  auto os = out.data();
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < c; ++j) {
      const std::size_t base = (static_cast<std::size_t>(i) * c + j) * plane;
      const double a = gamma[j] * invstd[j];
      const double b = beta[j] - mean[j] * a;
      for (std::size_t q = 0; q < plane; ++q) os[base + q] = xs[base + q] * a + b;
    }
  }

  if (out.requires_grad()) {
    tape.record([xn = x.node(), gn = gamma.node(), bn = beta.node(), on = out.node(), mean = std::move(mean),
                 invstd = std::move(invstd), n, c, plane, count, train] {
      const auto* go = grad_of(on);
      if (!go) return;
      const auto& xv = xn->value;
      for (int j = 0; j < c; ++j) {
        double sum_g = 0.0, sum_gx = 0.0;
        for (int i = 0; i < n; ++i) {
          const std::size_t base = (static_cast<std::size_t>(i) * c + j) * plane;
          for (std::size_t q = 0; q < plane; ++q) {
            const double xhat = (xv[base + q] - mean[j]) * invstd[j];
            sum_g += (*go)[base + q];
            sum_gx += (*go)[base + q] * xhat;
          }
        }
        if (gn->requires_grad) gn->ensure_grad()[j] += sum_gx;
        if (bn->requires_grad) bn->ensure_grad()[j] += sum_g;
        if (!xn->requires_grad) continue;
        auto& gx = xn->ensure_grad();
        const double gscale = gn->value[j] * invstd[j];
        for (int i = 0; i < n; ++i) {
          const std::size_t base = (static_cast<std::size_t>(i) * c + j) * plane;
          for (std::size_t q = 0; q < plane; ++q) {
            if (train) {
              const double xhat = (xv[base + q] - mean[j]) * invstd[j];
              gx[base + q] += gscale * ((*go)[base + q] - sum_g / count - xhat * sum_gx / count);
            } else {
              gx[base + q] += gscale * (*go)[base + q];
            }
          }
        }
      }
    });
  }
  return finish(tape, std::move(out), "batch_norm");
}

FoldedConv fold_bn_into_conv(const Tensor& weight, const Tensor& gamma, const Tensor& beta,
                             const BatchNormState& state) {
  require_rank4(weight, "fold_bn_into_conv");
  const int cout = weight.dim(0);
  if (gamma.size() != static_cast<std::size_t>(cout) || state.running_mean.size() != static_cast<std::size_t>(cout)) {
    throw ShapeError("fold_bn_into_conv: BN does not match conv output channels");
  }
  if (!state.initialized) throw std::logic_error("fold_bn_into_conv: running statistics uninitialized");
  FoldedConv folded{weight.clone(), Tensor({cout})};
  folded.weight.set_requires_grad(false);
  const std::size_t per_out = weight.size() / cout;
  auto w = folded.weight.data();
  auto b = folded.bias.data();
  for (int o = 0; o < cout; ++o) {
    const double s = gamma[o] / std::sqrt(state.running_var[o] + state.eps);
    for (std::size_t i = 0; i < per_out; ++i) w[o * per_out + i] *= s;
    b[o] = beta[o] - state.running_mean[o] * s;
  }
  return folded;
}

// ---- spiking -------------------------------------------------------------------

Tensor heaviside_with_surrogate(Tape& tape, const Tensor& v, const SurrogateSpec& spec, SpikeMode mode) {
  return unary_elementwise(
      tape, v, "heaviside_with_surrogate", [&spec, mode](double x) { return spike_forward(x, spec, mode); },
      [spec](double x, double) { return spike_backward(x, spec); });
}

}  // namespace sfpn::ag
