#include "eva/autodiff.hpp"

#include <cmath>
#include <memory>

#include "eva/common.hpp"
#include "eva/la_core.hpp"
#include "eva/mvhs_repr.hpp"

namespace eva::ad {

const Mat& Var::value() const { return tape->value(id); }

Var Tape::variable(Mat value) { return push(std::move(value), true, nullptr); }

Var Tape::constant(Mat value) { return push(std::move(value), false, nullptr); }

Var Tape::push(Mat value, bool needs_grad, std::function<void(Tape&, int)> back) {
  nodes_.push_back(Node{std::move(value), Mat(), needs_grad, std::move(back)});
  return Var{this, static_cast<int>(nodes_.size()) - 1};
}

void Tape::accumulate(int id, const Mat& g) {
  Node& n = nodes_[id];
  if (!n.needs_grad) return;
  if (n.grad.size() == 0 && n.value.size() != 0)
    n.grad = g;
  else
    n.grad += g;
}

Mat& Tape::grad_buffer(int id) {
  Node& n = nodes_[id];
  if (n.grad.rows() != n.value.rows() || n.grad.cols() != n.value.cols())
    n.grad = Mat::Zero(n.value.rows(), n.value.cols());
  return n.grad;
}

void Tape::backward(Var root) {
  if (root.tape != this) throw Error("backward: root belongs to another tape");
  if (value(root.id).size() != 1) throw ShapeError("backward: root must be a scalar");
  for (auto& n : nodes_) n.grad.resize(0, 0);
  nodes_[root.id].grad = Mat::Ones(1, 1);
  for (int i = root.id; i >= 0; --i) {
    Node& n = nodes_[i];
    if (n.back && n.grad.size() != 0) n.back(*this, i);
  }
  for (auto& n : nodes_)
    if (n.needs_grad && !n.back && n.grad.size() == 0) n.grad = Mat::Zero(n.value.rows(), n.value.cols());
}

namespace {

Tape& same_tape(Var a, Var b) {
  if (a.tape != b.tape || !a.tape) throw Error("autodiff: operands live on different tapes");
  return *a.tape;
}

void check_same_shape(Var a, Var b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) throw ShapeError(std::string(op) + ": shape mismatch");
}

void check_row(Var a, Var row, const char* op) {
  if (row.rows() != 1 || row.cols() != a.cols()) throw ShapeError(std::string(op) + ": row has the wrong width");
}

bool any_grad(Tape& t, std::initializer_list<Var> vs) {
  for (Var v : vs)
    if (t.needs_grad(v.id)) return true;
  return false;
}

template <typename F>
Var unary(Var a, Mat value, F&& local_grad) {
  Tape& t = *a.tape;
  const int ia = a.id;
  return t.push(std::move(value), t.needs_grad(ia), [ia, local_grad](Tape& tp, int self) {
    tp.accumulate(ia, local_grad(tp.value(ia), tp.value(self), tp.grad(self)));
  });
}

}  // namespace

Var matmul(Var a, Var b) {
  Tape& t = same_tape(a, b);
  if (a.cols() != b.rows()) throw ShapeError("matmul: inner dimensions differ");
  const int ia = a.id, ib = b.id;
  return t.push(a.value() * b.value(), any_grad(t, {a, b}), [ia, ib](Tape& tp, int self) {
    const Mat& g = tp.grad(self);
    if (tp.needs_grad(ia)) tp.accumulate(ia, g * tp.value(ib).transpose());
    if (tp.needs_grad(ib)) tp.accumulate(ib, tp.value(ia).transpose() * g);
  });
}

Var add(Var a, Var b) {
  Tape& t = same_tape(a, b);
  check_same_shape(a, b, "add");
  const int ia = a.id, ib = b.id;
  return t.push(a.value() + b.value(), any_grad(t, {a, b}), [ia, ib](Tape& tp, int self) {
    tp.accumulate(ia, tp.grad(self));
    tp.accumulate(ib, tp.grad(self));
  });
}

Var sub(Var a, Var b) {
  Tape& t = same_tape(a, b);
  check_same_shape(a, b, "sub");
  const int ia = a.id, ib = b.id;
  return t.push(a.value() - b.value(), any_grad(t, {a, b}), [ia, ib](Tape& tp, int self) {
    tp.accumulate(ia, tp.grad(self));
    if (tp.needs_grad(ib)) tp.accumulate(ib, -tp.grad(self));
  });
}

Var mul(Var a, Var b) {
  Tape& t = same_tape(a, b);
  check_same_shape(a, b, "mul");
  const int ia = a.id, ib = b.id;
  return t.push(a.value().cwiseProduct(b.value()), any_grad(t, {a, b}), [ia, ib](Tape& tp, int self) {
    const Mat& g = tp.grad(self);
    if (tp.needs_grad(ia)) tp.accumulate(ia, g.cwiseProduct(tp.value(ib)));
    if (tp.needs_grad(ib)) tp.accumulate(ib, g.cwiseProduct(tp.value(ia)));
  });
}

Var add_row(Var a, Var row) {
  Tape& t = same_tape(a, row);
  check_row(a, row, "add_row");
  Mat v = a.value();
  v.rowwise() += row.value().row(0);
  const int ia = a.id, ir = row.id;
  return t.push(std::move(v), any_grad(t, {a, row}), [ia, ir](Tape& tp, int self) {
    const Mat& g = tp.grad(self);
    tp.accumulate(ia, g);
    if (tp.needs_grad(ir)) tp.accumulate(ir, g.colwise().sum());
  });
}

Var mul_row(Var a, Var row) {
  Tape& t = same_tape(a, row);
  check_row(a, row, "mul_row");
  Mat v = (a.value().array().rowwise() * row.value().row(0).array()).matrix();
  const int ia = a.id, ir = row.id;
  return t.push(std::move(v), any_grad(t, {a, row}), [ia, ir](Tape& tp, int self) {
    const Mat& g = tp.grad(self);
    if (tp.needs_grad(ia)) tp.accumulate(ia, (g.array().rowwise() * tp.value(ir).row(0).array()).matrix());
    if (tp.needs_grad(ir)) tp.accumulate(ir, g.cwiseProduct(tp.value(ia)).colwise().sum());
  });
}

Var scale(Var a, double c) {
  return unary(a, a.value() * c, [c](const Mat&, const Mat&, const Mat& g) -> Mat { return g * c; });
}

Var neg(Var a) { return scale(a, -1.0); }

Var tanh(Var a) {
  return unary(a, a.value().array().tanh().matrix(), [](const Mat&, const Mat& y, const Mat& g) -> Mat {
    return (g.array() * (1.0 - y.array().square())).matrix();
  });
}

Var exp(Var a) {
  return unary(a, a.value().array().exp().matrix(),
               [](const Mat&, const Mat& y, const Mat& g) -> Mat { return g.cwiseProduct(y); });
}

Var sigmoid(Var a) {
  return unary(a, (1.0 / (1.0 + (-a.value().array()).exp())).matrix(),
               [](const Mat&, const Mat& y, const Mat& g) -> Mat {
                 return (g.array() * y.array() * (1.0 - y.array())).matrix();
               });
}

Var silu(Var a) {
  const auto x = a.value().array();
  return unary(a, (x / (1.0 + (-x).exp())).matrix(), [](const Mat& in, const Mat&, const Mat& g) -> Mat {
    const auto s = 1.0 / (1.0 + (-in.array()).exp());
    return (g.array() * (s + in.array() * s * (1.0 - s))).matrix();
  });
}

Var relu_sq(Var a) {
  return unary(a, a.value().array().max(0.0).square().matrix(), [](const Mat& in, const Mat&, const Mat& g) -> Mat {
    return (g.array() * 2.0 * in.array().max(0.0)).matrix();
  });
}

Var token_shift(Var a) {
  Mat v = Mat::Zero(a.rows(), a.cols());
  if (a.rows() > 1) v.bottomRows(a.rows() - 1) = a.value().topRows(a.rows() - 1);
  return unary(a, std::move(v), [](const Mat& in, const Mat&, const Mat& g) -> Mat {
    Mat out = Mat::Zero(in.rows(), in.cols());
    if (in.rows() > 1) out.topRows(in.rows() - 1) = g.bottomRows(in.rows() - 1);
    return out;
  });
}

Var gather_rows(Var table, std::span<const int> index) {
  Tape& t = *table.tape;
  Mat v(static_cast<Eigen::Index>(index.size()), table.cols());
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] < 0 || index[i] >= table.rows()) throw ShapeError("gather_rows: index out of range");
    v.row(static_cast<Eigen::Index>(i)) = table.value().row(index[i]);
  }
  const int it = table.id;
  std::vector<int> idx(index.begin(), index.end());
  return t.push(std::move(v), t.needs_grad(it), [it, idx = std::move(idx)](Tape& tp, int self) {
    const Mat& g = tp.grad(self);
    Mat& dst = tp.grad_buffer(it);
    for (std::size_t i = 0; i < idx.size(); ++i) dst.row(idx[i]) += g.row(static_cast<Eigen::Index>(i));
  });
}

Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no parts");
  Tape& t = *parts[0].tape;
  Eigen::Index rows = 0;
  bool grad = false;
  for (Var p : parts) {
    if (p.tape != &t) throw Error("autodiff: operands live on different tapes");
    if (p.cols() != parts[0].cols()) throw ShapeError("concat_rows: widths differ");
    rows += p.rows();
    grad = grad || t.needs_grad(p.id);
  }
  Mat v(rows, parts[0].cols());
  std::vector<int> ids;
  Eigen::Index r = 0;
  for (Var p : parts) {
    v.middleRows(r, p.rows()) = p.value();
    r += p.rows();
    ids.push_back(p.id);
  }
  return t.push(std::move(v), grad, [ids = std::move(ids)](Tape& tp, int self) {
    const Mat& g = tp.grad(self);
    Eigen::Index r0 = 0;
    for (int id : ids) {
      const Eigen::Index n = tp.value(id).rows();
      if (tp.needs_grad(id)) tp.accumulate(id, g.middleRows(r0, n));
      r0 += n;
    }
  });
}

Var slice_cols(Var a, Eigen::Index first, Eigen::Index count) {
  if (first < 0 || count < 0 || first + count > a.cols()) throw ShapeError("slice_cols: range out of bounds");
  return unary(a, a.value().middleCols(first, count), [first, count](const Mat& in, const Mat&, const Mat& g) -> Mat {
    Mat out = Mat::Zero(in.rows(), in.cols());
    out.middleCols(first, count) = g;
    return out;
  });
}

Var element(Var a, Eigen::Index i) {
  if (a.rows() != 1 || i < 0 || i >= a.cols()) throw ShapeError("element: index out of range");
  return unary(a, Mat::Constant(1, 1, a.value()(0, i)), [i](const Mat& in, const Mat&, const Mat& g) -> Mat {
    Mat out = Mat::Zero(1, in.cols());
    out(0, i) = g(0, 0);
    return out;
  });
}

Var sum(Var a) {
  return unary(a, Mat::Constant(1, 1, a.value().sum()), [](const Mat& in, const Mat&, const Mat& g) -> Mat {
    return Mat::Constant(in.rows(), in.cols(), g(0, 0));
  });
}

namespace {

// Normalizes `width` contiguous entries starting at x; writes xhat and
// returns 1/sigma.
double normalize(const double* x, double* xhat, Eigen::Index width, double eps) {
  double mean = 0.0;
  for (Eigen::Index j = 0; j < width; ++j) mean += x[j];
  mean /= static_cast<double>(width);
  double var = 0.0;
  for (Eigen::Index j = 0; j < width; ++j) var += (x[j] - mean) * (x[j] - mean);
  var /= static_cast<double>(width);
  const double inv = 1.0 / std::sqrt(var + eps);
  for (Eigen::Index j = 0; j < width; ++j) xhat[j] = (x[j] - mean) * inv;
  return inv;
}

// dx = inv * (gh - mean(gh) - xhat * mean(gh * xhat)).
void normalize_backward(const double* gh, const double* xhat, double inv, Eigen::Index width, double* dx) {
  double m1 = 0.0, m2 = 0.0;
  for (Eigen::Index j = 0; j < width; ++j) {
    m1 += gh[j];
    m2 += gh[j] * xhat[j];
  }
  m1 /= static_cast<double>(width);
  m2 /= static_cast<double>(width);
  for (Eigen::Index j = 0; j < width; ++j) dx[j] += inv * (gh[j] - m1 - xhat[j] * m2);
}

}  // namespace

Var layer_norm(Var x, Var scale, Var offset, double eps) {
  Tape& t = same_tape(x, scale);
  check_row(x, scale, "layer_norm");
  check_row(x, offset, "layer_norm");
  const Eigen::Index rows = x.rows(), cols = x.cols();
  auto xhat = std::make_shared<Mat>(rows, cols);
  auto inv = std::make_shared<std::vector<double>>(rows);
  for (Eigen::Index i = 0; i < rows; ++i) (*inv)[i] = normalize(&x.value()(i, 0), &(*xhat)(i, 0), cols, eps);
  Mat v = (xhat->array().rowwise() * scale.value().row(0).array()).matrix();
  v.rowwise() += offset.value().row(0);
  const int ix = x.id, is = scale.id, io = offset.id;
  return t.push(std::move(v), any_grad(t, {x, scale, offset}), [=](Tape& tp, int self) {
    const Mat& g = tp.grad(self);
    if (tp.needs_grad(io)) tp.accumulate(io, g.colwise().sum());
    if (tp.needs_grad(is)) tp.accumulate(is, g.cwiseProduct(*xhat).colwise().sum());
    if (tp.needs_grad(ix)) {
      const Mat gh = (g.array().rowwise() * tp.value(is).row(0).array()).matrix();
      Mat dx = Mat::Zero(rows, cols);
      for (Eigen::Index i = 0; i < rows; ++i) normalize_backward(&gh(i, 0), &(*xhat)(i, 0), (*inv)[i], cols, &dx(i, 0));
      tp.accumulate(ix, dx);
    }
  });
}

Var group_norm(Var x, int groups, double eps) {
  if (groups < 1 || x.cols() % groups != 0) throw ShapeError("group_norm: width not divisible by group count");
  const Eigen::Index rows = x.rows(), cols = x.cols(), width = cols / groups;
  auto inv = std::make_shared<std::vector<double>>(static_cast<std::size_t>(rows) * groups);
  Mat v(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i)
    for (int h = 0; h < groups; ++h)
      (*inv)[i * groups + h] = normalize(&x.value()(i, h * width), &v(i, h * width), width, eps);
  Tape& t = *x.tape;
  const int ix = x.id;
  return t.push(std::move(v), t.needs_grad(ix), [=](Tape& tp, int self) {
    const Mat& g = tp.grad(self);
    const Mat& xhat = tp.value(self);
    Mat dx = Mat::Zero(rows, cols);
    for (Eigen::Index i = 0; i < rows; ++i)
      for (int h = 0; h < groups; ++h)
        normalize_backward(&g(i, h * width), &xhat(i, h * width), (*inv)[i * groups + h], width, &dx(i, h * width));
    tp.accumulate(ix, dx);
  });
}

Var mse(Var a, const Mat& target) {
  if (a.rows() != target.rows() || a.cols() != target.cols()) throw ShapeError("mse: target shape mismatch");
  const double n = static_cast<double>(target.size());
  Mat diff = a.value() - target;
  const double value = n > 0 ? diff.squaredNorm() / n : 0.0;
  auto d = std::make_shared<Mat>(std::move(diff));
  return unary(a, Mat::Constant(1, 1, value), [d, n](const Mat&, const Mat&, const Mat& g) -> Mat {
    return *d * (2.0 * g(0, 0) / n);
  });
}

Var uncertainty_total(std::span<const Var> losses, Var log_vars) {
  if (log_vars.rows() != 1 || log_vars.cols() != static_cast<Eigen::Index>(losses.size()))
    throw ShapeError("uncertainty_total: one log-variance per loss required");
  Tape& t = *log_vars.tape;
  double total = 0.0;
  bool grad = t.needs_grad(log_vars.id);
  std::vector<int> ids;
  for (std::size_t k = 0; k < losses.size(); ++k) {
    if (losses[k].value().size() != 1) throw ShapeError("uncertainty_total: losses must be scalars");
    const double s = log_vars.value()(0, static_cast<Eigen::Index>(k));
    total += std::exp(-s) * losses[k].value()(0, 0) + s;
    grad = grad || t.needs_grad(losses[k].id);
    ids.push_back(losses[k].id);
  }
  const int is = log_vars.id;
  return t.push(Mat::Constant(1, 1, total), grad, [ids = std::move(ids), is](Tape& tp, int self) {
    const double g = tp.grad(self)(0, 0);
    const Mat& s = tp.value(is);
    Mat gs(1, s.cols());
    for (std::size_t k = 0; k < ids.size(); ++k) {
      const double e = std::exp(-s(0, static_cast<Eigen::Index>(k)));
      tp.accumulate(ids[k], Mat::Constant(1, 1, g * e));
      gs(0, static_cast<Eigen::Index>(k)) = g * (1.0 - e * tp.value(ids[k])(0, 0));
    }
    tp.accumulate(is, gs);
  });
}

namespace {

struct ConvGeometry {
  Eigen::Index batch;
  int cin, height, width, k, pad;
  Eigen::Index pixels() const { return static_cast<Eigen::Index>(height) * width; }
};

// (Cin*k*k) x (batch*H*W) patch matrix.
Mat im2col(const Mat& x, const ConvGeometry& g) {
  const Eigen::Index hw = g.pixels();
  Mat col = Mat::Zero(static_cast<Eigen::Index>(g.cin) * g.k * g.k, g.batch * hw);
  for (Eigen::Index b = 0; b < g.batch; ++b)
    for (int c = 0; c < g.cin; ++c)
      for (int ky = 0; ky < g.k; ++ky)
        for (int kx = 0; kx < g.k; ++kx) {
          double* dst = &col((c * g.k + ky) * g.k + kx, b * hw);
          for (int y = 0; y < g.height; ++y) {
            const int sy = y + ky - g.pad;
            if (sy < 0 || sy >= g.height) continue;
            for (int x0 = 0; x0 < g.width; ++x0) {
              const int sx = x0 + kx - g.pad;
              if (sx < 0 || sx >= g.width) continue;
              dst[y * g.width + x0] = x(b, (c * g.height + sy) * g.width + sx);
            }
          }
        }
  return col;
}

void col2im(const Mat& col, const ConvGeometry& g, Mat& dx) {
  const Eigen::Index hw = g.pixels();
  for (Eigen::Index b = 0; b < g.batch; ++b)
    for (int c = 0; c < g.cin; ++c)
      for (int ky = 0; ky < g.k; ++ky)
        for (int kx = 0; kx < g.k; ++kx) {
          const double* src = &col((c * g.k + ky) * g.k + kx, b * hw);
          for (int y = 0; y < g.height; ++y) {
            const int sy = y + ky - g.pad;
            if (sy < 0 || sy >= g.height) continue;
            for (int x0 = 0; x0 < g.width; ++x0) {
              const int sx = x0 + kx - g.pad;
              if (sx < 0 || sx >= g.width) continue;
              dx(b, (c * g.height + sy) * g.width + sx) += src[y * g.width + x0];
            }
          }
        }
}

}  // namespace

Var conv2d(Var x, Var weight, Var bias, int in_channels, int height, int width, int k, int pad) {
  Tape& t = same_tape(x, weight);
  const ConvGeometry geo{x.rows(), in_channels, height, width, k, pad};
  const Eigen::Index hw = geo.pixels();
  if (x.cols() != in_channels * hw) throw ShapeError("conv2d: input width does not match the image geometry");
  if (weight.cols() != static_cast<Eigen::Index>(in_channels) * k * k) throw ShapeError("conv2d: weight shape mismatch");
  const Eigen::Index cout = weight.rows();
  if (bias.rows() != 1 || bias.cols() != cout) throw ShapeError("conv2d: bias shape mismatch");
  if (2 * pad != k - 1) throw ShapeError("conv2d: only same-size padding is supported");

  const Mat big = weight.value() * im2col(x.value(), geo);  // Cout x (B*HW)
  Mat v(geo.batch, cout * hw);
  for (Eigen::Index b = 0; b < geo.batch; ++b)
    for (Eigen::Index c = 0; c < cout; ++c)
      v.row(b).segment(c * hw, hw) = big.row(c).segment(b * hw, hw).array() + bias.value()(0, c);

  const int ix = x.id, iw = weight.id, ib = bias.id;
  return t.push(std::move(v), any_grad(t, {x, weight, bias}), [=](Tape& tp, int self) {
    const Mat& g = tp.grad(self);
    Mat gbig(cout, geo.batch * hw);
    for (Eigen::Index b = 0; b < geo.batch; ++b)
      for (Eigen::Index c = 0; c < cout; ++c) gbig.row(c).segment(b * hw, hw) = g.row(b).segment(c * hw, hw);
    if (tp.needs_grad(ib)) tp.accumulate(ib, gbig.rowwise().sum().transpose());
    if (tp.needs_grad(iw)) tp.accumulate(iw, gbig * im2col(tp.value(ix), geo).transpose());
    if (tp.needs_grad(ix)) {
      const Mat gcol = tp.value(iw).transpose() * gbig;
      Mat dx = Mat::Zero(geo.batch, tp.value(ix).cols());
      col2im(gcol, geo, dx);
      tp.accumulate(ix, dx);
    }
  });
}

Var conv_transpose2x(Var x, Var weight, Var bias, int in_channels, int height, int width) {
  Tape& t = same_tape(x, weight);
  const Eigen::Index hw = static_cast<Eigen::Index>(height) * width;
  if (x.cols() != in_channels * hw) throw ShapeError("conv_transpose2x: input width does not match the geometry");
  if (weight.rows() != in_channels || weight.cols() % 16 != 0) throw ShapeError("conv_transpose2x: weight shape mismatch");
  const int cout = static_cast<int>(weight.cols() / 16);
  if (bias.rows() != 1 || bias.cols() != cout) throw ShapeError("conv_transpose2x: bias shape mismatch");
  const int oh = 2 * height, ow = 2 * width;
  const Eigen::Index ohw = static_cast<Eigen::Index>(oh) * ow;
  const Eigen::Index batch = x.rows();

  // Visits every (input pixel, output pixel, tap) contribution.
  auto for_each_tap = [=](auto&& fn) {
    for (int ci = 0; ci < in_channels; ++ci)
      for (int iy = 0; iy < height; ++iy)
        for (int ix0 = 0; ix0 < width; ++ix0)
          for (int ky = 0; ky < 4; ++ky) {
            const int oy = 2 * iy - 1 + ky;
            if (oy < 0 || oy >= oh) continue;
            for (int kx = 0; kx < 4; ++kx) {
              const int ox = 2 * ix0 - 1 + kx;
              if (ox < 0 || ox >= ow) continue;
              for (int co = 0; co < cout; ++co)
                fn((ci * height + iy) * width + ix0, co * ohw + oy * ow + ox, ci, (co * 4 + ky) * 4 + kx);
            }
          }
  };

  const Mat& xv = x.value();
  const Mat& wv = weight.value();
  Mat v(batch, cout * ohw);
  for (Eigen::Index b = 0; b < batch; ++b)
    for (int co = 0; co < cout; ++co) v.row(b).segment(co * ohw, ohw).setConstant(bias.value()(0, co));
  for (Eigen::Index b = 0; b < batch; ++b)
    for_each_tap([&](Eigen::Index in, Eigen::Index out, int ci, int tap) { v(b, out) += xv(b, in) * wv(ci, tap); });

  const int ixd = x.id, iw = weight.id, ib = bias.id;
  return t.push(std::move(v), any_grad(t, {x, weight, bias}), [=](Tape& tp, int self) {
    const Mat& g = tp.grad(self);
    const Mat& xin = tp.value(ixd);
    const Mat& w = tp.value(iw);
    if (tp.needs_grad(ib)) {
      Mat gb = Mat::Zero(1, cout);
      for (Eigen::Index b = 0; b < batch; ++b)
        for (int co = 0; co < cout; ++co) gb(0, co) += g.row(b).segment(co * ohw, ohw).sum();
      tp.accumulate(ib, gb);
    }
    Mat gx = Mat::Zero(batch, xin.cols());
    Mat gw = Mat::Zero(w.rows(), w.cols());
    for (Eigen::Index b = 0; b < batch; ++b)
      for_each_tap([&](Eigen::Index in, Eigen::Index out, int ci, int tap) {
        gx(b, in) += g(b, out) * w(ci, tap);
        gw(ci, tap) += g(b, out) * xin(b, in);
      });
    if (tp.needs_grad(ixd)) tp.accumulate(ixd, gx);
    if (tp.needs_grad(iw)) tp.accumulate(iw, gw);
  });
}

Var wkv(Var r, Var k, Var v, Var w, Var u, int n_head) {
  Tape& t = same_tape(r, k);
  check_same_shape(r, k, "wkv");
  check_same_shape(r, v, "wkv");
  check_same_shape(r, w, "wkv");
  check_row(r, u, "wkv");
  if (n_head < 1 || r.cols() % n_head != 0) throw ShapeError("wkv: width not divisible by head count");
  const int n = static_cast<int>(r.cols() / n_head);
  HeadStates<double> state(n_head, n);
  auto pre = std::make_shared<std::vector<double>>();
  Mat y = la::tm_parallel(r.value(), k.value(), v.value(), w.value(), u.value(), state, la::kScanChunk, pre.get());

  const int ir = r.id, ik = k.id, iv = v.id, iw = w.id, iu = u.id;
  return t.push(std::move(y), any_grad(t, {r, k, v, w, u}), [=](Tape& tp, int self) {
    const Mat& gy = tp.grad(self);
    const Mat &R = tp.value(ir), &K = tp.value(ik), &V = tp.value(iv), &W = tp.value(iw), &U = tp.value(iu);
    const Eigen::Index T = R.rows();
    Mat dr = Mat::Zero(R.rows(), R.cols()), dk = dr, dv = dr, dw = dr, du = Mat::Zero(1, R.cols());
    const std::size_t hs = static_cast<std::size_t>(n) * n;
    std::vector<double> G(hs);
    for (int h = 0; h < n_head; ++h) {
      const int o = h * n;
      std::fill(G.begin(), G.end(), 0.0);
      for (Eigen::Index i = T - 1; i >= 0; --i) {
        const double* S = pre->data() + (static_cast<std::size_t>(i) * n_head + h) * hs;
        const double *ri = &R(i, o), *ki = &K(i, o), *vi = &V(i, o), *wi = &W(i, o), *gi = &gy(i, o);
        // G currently holds dL/dS_i; fold in the update S_i = diag(w) S_{i-1} + k v^T.
        for (int a = 0; a < n; ++a) {
          double gw = 0.0, gk = 0.0;
          for (int b = 0; b < n; ++b) {
            const double gab = G[a * n + b];
            gw += gab * S[a * n + b];
            gk += gab * vi[b];
            dv(i, o + b) += gab * ki[a];
          }
          dw(i, o + a) += gw;
          dk(i, o + a) += gk;
        }
        // Read-out y_a = sum_b S_ab r_b + u_a k_a (v . r).
        double vr = 0.0, uky = 0.0;
        for (int b = 0; b < n; ++b) vr += vi[b] * ri[b];
        for (int a = 0; a < n; ++a) uky += gi[a] * U(0, o + a) * ki[a];
        for (int a = 0; a < n; ++a) {
          du(0, o + a) += gi[a] * ki[a] * vr;
          dk(i, o + a) += gi[a] * U(0, o + a) * vr;
        }
        for (int b = 0; b < n; ++b) {
          double sy = 0.0;
          for (int a = 0; a < n; ++a) sy += S[a * n + b] * gi[a];
          dr(i, o + b) += sy + vi[b] * uky;
          dv(i, o + b) += ri[b] * uky;
        }
        for (int a = 0; a < n; ++a)
          for (int b = 0; b < n; ++b) G[a * n + b] = wi[a] * G[a * n + b] + gi[a] * ri[b];
      }
    }
    tp.accumulate(ir, dr);
    tp.accumulate(ik, dk);
    tp.accumulate(iv, dv);
    tp.accumulate(iw, dw);
    tp.accumulate(iu, du);
  });
}

Var state_snapshots(Var k, Var v, Var w, int n_head, int keep_heads, std::span<const int> checkpoints) {
  Tape& t = same_tape(k, v);
  check_same_shape(k, v, "state_snapshots");
  check_same_shape(k, w, "state_snapshots");
  if (n_head < 1 || k.cols() % n_head != 0) throw ShapeError("state_snapshots: width not divisible by head count");
  if (keep_heads < 1 || keep_heads > n_head) throw ShapeError("state_snapshots: keep_heads out of range");
  const int n = static_cast<int>(k.cols() / n_head);
  const std::size_t hs = static_cast<std::size_t>(n) * n;
  const std::size_t full = hs * n_head;
  HeadStates<double> state(n_head, n);
  auto all = std::make_shared<std::vector<double>>();
  const auto snaps = mvhs::scan_states(k.value(), v.value(), w.value(), state, checkpoints, la::kScanChunk, all.get());
  const Eigen::Index kept = static_cast<Eigen::Index>(keep_heads * hs);
  Mat out(static_cast<Eigen::Index>(snaps.size()), kept);
  for (std::size_t j = 0; j < snaps.size(); ++j)
    std::copy(snaps[j].data.begin(), snaps[j].data.begin() + kept, &out(static_cast<Eigen::Index>(j), 0));

  std::vector<int> cps(checkpoints.begin(), checkpoints.end());
  const int ik = k.id, iv = v.id, iw = w.id;
  return t.push(std::move(out), any_grad(t, {k, v, w}), [=, cps = std::move(cps)](Tape& tp, int self) {
    const Mat& g = tp.grad(self);
    const Mat &K = tp.value(ik), &V = tp.value(iv), &W = tp.value(iw);
    const Eigen::Index T = K.rows();
    Mat dk = Mat::Zero(K.rows(), K.cols()), dv = dk, dw = dk;
    std::vector<double> G(full, 0.0);
    const std::vector<double> zero(full, 0.0);
    int j = static_cast<int>(cps.size()) - 1;
    for (Eigen::Index i = T; i >= 1; --i) {
      for (; j >= 0 && cps[j] == i; --j)
        for (Eigen::Index c = 0; c < kept; ++c) G[c] += g(j, c);
      const double* prev = i >= 2 ? all->data() + (i - 2) * full : zero.data();
      const Eigen::Index row = i - 1;
      for (int h = 0; h < keep_heads; ++h) {
        const int o = h * n;
        double* Gh = G.data() + h * hs;
        const double* S = prev + h * hs;
        for (int a = 0; a < n; ++a) {
          double gw = 0.0, gk = 0.0;
          for (int b = 0; b < n; ++b) {
            const double gab = Gh[a * n + b];
            gw += gab * S[a * n + b];
            gk += gab * V(row, o + b);
            dv(row, o + b) += gab * K(row, o + a);
          }
          dw(row, o + a) += gw;
          dk(row, o + a) += gk;
          const double wa = W(row, o + a);
          for (int b = 0; b < n; ++b) Gh[a * n + b] *= wa;
        }
      }
    }
    tp.accumulate(ik, dk);
    tp.accumulate(iv, dv);
    tp.accumulate(iw, dw);
  });
}

}  // namespace eva::ad
