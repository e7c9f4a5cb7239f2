#include "eva/la_core.hpp"

#include <cmath>

#include "eva/common.hpp"

namespace eva::la {

template <typename Real>
Lora<Real> make_lora(int in, int rank, int out) {
  return Lora<Real>{Matrix<Real>::Zero(1, out), Matrix<Real>::Zero(in, rank), Matrix<Real>::Zero(rank, out)};
}

template <typename Real>
BlockParams<Real> make_block(int d, int d_ffn, int d_lora, int d_decay_lora) {
  BlockParams<Real> p;
  p.ln1 = {Matrix<Real>::Ones(1, d), Matrix<Real>::Zero(1, d)};
  p.ln2 = {Matrix<Real>::Ones(1, d), Matrix<Real>::Zero(1, d)};
  auto& tm = p.tm;
  tm.mu = Matrix<Real>::Zero(1, d);
  tm.mix_r = make_lora<Real>(d, d_lora, d);
  tm.mix_k = make_lora<Real>(d, d_lora, d);
  tm.mix_v = make_lora<Real>(d, d_lora, d);
  tm.mix_g = make_lora<Real>(d, d_lora, d);
  tm.mix_w = make_lora<Real>(d, d_lora, d);
  tm.decay = make_lora<Real>(d, d_decay_lora, d);
  tm.w_r = tm.w_k = tm.w_v = tm.w_g = tm.w_o = Matrix<Real>::Zero(d, d);
  tm.u = Matrix<Real>::Zero(1, d);
  auto& cm = p.cm;
  cm.mu_r = cm.mu_k = Matrix<Real>::Zero(1, d);
  cm.w_r = Matrix<Real>::Zero(d, d);
  cm.w_k = Matrix<Real>::Zero(d, d_ffn);
  cm.w_v = Matrix<Real>::Zero(d_ffn, d);
  return p;
}

template <typename Real>
Matrix<Real> lora(const Matrix<Real>& x, const Lora<Real>& p) {
  if (x.cols() != p.a.rows() || p.a.cols() != p.b.rows() || p.b.cols() != p.lambda.cols())
    throw ShapeError("lora: shape mismatch");
  Matrix<Real> hidden = (x * p.a).array().tanh().matrix();
  Matrix<Real> out = hidden * p.b;
  out.rowwise() += p.lambda.row(0);
  return out;
}

template <typename Real>
Matrix<Real> ddlerp(const Matrix<Real>& x, const Matrix<Real>& x_prev, const Matrix<Real>& mu,
                    const Lora<Real>& p) {
  if (x.rows() != x_prev.rows() || x.cols() != x_prev.cols() || mu.cols() != x.cols())
    throw ShapeError("ddlerp: shape mismatch");
  const Matrix<Real> xx = x_prev - x;
  const Matrix<Real> xxx = x + (xx.array().rowwise() * mu.row(0).array()).matrix();
  return x + (xx.array() * lora(xxx, p).array()).matrix();
}

template <typename Real>
Matrix<Real> token_shift(const Matrix<Real>& x, const Matrix<Real>& prev) {
  Matrix<Real> out(x.rows(), x.cols());
  if (x.rows() == 0) return out;
  out.row(0) = prev.row(0);
  if (x.rows() > 1) out.bottomRows(x.rows() - 1) = x.topRows(x.rows() - 1);
  return out;
}

template <typename Real>
Matrix<Real> layer_norm(const Matrix<Real>& x, const LayerNormParams<Real>& p, double eps) {
  Matrix<Real> out(x.rows(), x.cols());
  const auto d = static_cast<Real>(x.cols());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const Real mean = x.row(i).sum() / d;
    const Real var = (x.row(i).array() - mean).square().sum() / d;
    const Real inv = Real(1) / std::sqrt(var + static_cast<Real>(eps));
    out.row(i) = (((x.row(i).array() - mean) * inv) * p.scale.row(0).array() + p.offset.row(0).array()).matrix();
  }
  return out;
}

template <typename Real>
TmProjection<Real> tm_project(const Matrix<Real>& x, const Matrix<Real>& x_prev, const TimeMixParams<Real>& p) {
  if (x.cols() != p.w_r.rows()) throw ShapeError("tm_project: input width does not match parameters");
  const Matrix<Real> xx = x_prev - x;
  const Matrix<Real> xxx = x + (xx.array().rowwise() * p.mu.row(0).array()).matrix();
  auto branch = [&](const Lora<Real>& l) -> Matrix<Real> { return x + (xx.array() * lora(xxx, l).array()).matrix(); };
  TmProjection<Real> out;
  out.r = branch(p.mix_r) * p.w_r;
  out.k = branch(p.mix_k) * p.w_k;
  out.v = branch(p.mix_v) * p.w_v;
  out.g = branch(p.mix_g) * p.w_g;
  const Matrix<Real> d = lora(branch(p.mix_w), p.decay);
  out.w = (-(d.array().exp())).exp().matrix();
  if (!out.w.allFinite() || !out.k.allFinite() || !out.v.allFinite() || !out.r.allFinite())
    throw Error("tm_project: non-finite intermediate");
  return out;
}

template <typename Real>
void tm_step(HeadStates<Real>& state, const Real* r, const Real* k, const Real* v, const Real* w, const Real* u,
             Real* y) {
  const int n = state.size;
  for (int h = 0; h < state.heads; ++h) {
    const int o = h * n;
    Real* s = state.head(h);
    Real vr = 0;
    for (int b = 0; b < n; ++b) vr += v[o + b] * r[o + b];
    for (int a = 0; a < n; ++a) {
      Real* row = s + static_cast<std::ptrdiff_t>(a) * n;
      Real sr = 0;
      for (int b = 0; b < n; ++b) sr += row[b] * r[o + b];
      y[o + a] = sr + u[o + a] * k[o + a] * vr;
      const Real wa = w[o + a];
      const Real ka = k[o + a];
      for (int b = 0; b < n; ++b) row[b] = wa * row[b] + ka * v[o + b];
    }
  }
}

template <typename Real>
Matrix<Real> tm_recurrent(const Matrix<Real>& r, const Matrix<Real>& k, const Matrix<Real>& v,
                          const Matrix<Real>& w, const Matrix<Real>& u, HeadStates<Real>& state) {
  const Eigen::Index d = static_cast<Eigen::Index>(state.heads) * state.size;
  if (r.cols() != d || k.cols() != d || v.cols() != d || w.cols() != d || u.cols() != d)
    throw ShapeError("tm_recurrent: width does not match state");
  Matrix<Real> y(r.rows(), d);
  for (Eigen::Index i = 0; i < r.rows(); ++i)
    tm_step(state, r.row(i).data(), k.row(i).data(), v.row(i).data(), w.row(i).data(), u.data(), y.row(i).data());
  return y;
}

template <typename Real>
void scan_linear_recurrence(int len, int dim_a, int dim_b, Real* a, Real* b) {
  if (len <= 0) return;
  int n = 1;
  while (n < len) n *= 2;
  const std::size_t sa = static_cast<std::size_t>(dim_a);
  const std::size_t sb = sa * dim_b;
  std::vector<Real> ea(n * sa, Real(1)), eb(n * sb, Real(0));
  std::copy(a, a + len * sa, ea.begin());
  std::copy(b, b + len * sb, eb.begin());

  // later <- later o earlier
  auto compose = [&](Real* la, Real* lb, const Real* fa, const Real* fb) {
    for (int i = 0; i < dim_a; ++i) {
      for (int j = 0; j < dim_b; ++j) lb[i * dim_b + j] += la[i] * fb[i * dim_b + j];
      la[i] *= fa[i];
    }
  };

  for (int s = 1; s < n; s *= 2) {
    for (int i = 2 * s - 1; i < n; i += 2 * s) compose(&ea[i * sa], &eb[i * sb], &ea[(i - s) * sa], &eb[(i - s) * sb]);
  }
  std::fill(ea.begin() + (n - 1) * sa, ea.begin() + n * sa, Real(1));
  std::fill(eb.begin() + (n - 1) * sb, eb.begin() + n * sb, Real(0));
  std::vector<Real> ta(sa), tb(sb);
  for (int s = n / 2; s >= 1; s /= 2) {
    for (int i = 2 * s - 1; i < n; i += 2 * s) {
      const int left = i - s;
      std::copy(&ea[left * sa], &ea[left * sa] + sa, ta.begin());
      std::copy(&eb[left * sb], &eb[left * sb] + sb, tb.begin());
      std::copy(&ea[i * sa], &ea[i * sa] + sa, &ea[left * sa]);
      std::copy(&eb[i * sb], &eb[i * sb] + sb, &eb[left * sb]);
      // right <- (left block) o (prefix before left block)
      compose(ta.data(), tb.data(), &ea[i * sa], &eb[i * sb]);
      std::copy(ta.begin(), ta.end(), &ea[i * sa]);
      std::copy(tb.begin(), tb.end(), &eb[i * sb]);
    }
  }
  // inclusive = element o exclusive
  for (int i = 0; i < len; ++i) compose(a + i * sa, b + i * sb, &ea[i * sa], &eb[i * sb]);
}

template <typename Real>
Matrix<Real> tm_parallel(const Matrix<Real>& r, const Matrix<Real>& k, const Matrix<Real>& v,
                         const Matrix<Real>& w, const Matrix<Real>& u, HeadStates<Real>& state, int chunk,
                         std::vector<Real>* pre_states) {
  const int n = state.size;
  const int heads = state.heads;
  const Eigen::Index d = static_cast<Eigen::Index>(heads) * n;
  const Eigen::Index T = r.rows();
  if (r.cols() != d || k.cols() != d || v.cols() != d || w.cols() != d || u.cols() != d)
    throw ShapeError("tm_parallel: width does not match state");
  if (chunk < 1) throw Error("tm_parallel: chunk must be positive");
  Matrix<Real> y(T, d);
  const std::size_t hs = state.head_stride();
  if (pre_states) pre_states->assign(static_cast<std::size_t>(T) * heads * hs, Real(0));

  std::vector<Real> ca, cb;
  for (Eigen::Index c0 = 0; c0 < T; c0 += chunk) {
    const int len = static_cast<int>(std::min<Eigen::Index>(chunk, T - c0));
    for (int h = 0; h < heads; ++h) {
      const int o = h * n;
      ca.assign(static_cast<std::size_t>(len) * n, Real(0));
      cb.assign(static_cast<std::size_t>(len) * hs, Real(0));
      for (int i = 0; i < len; ++i) {
        const Real* wi = w.row(c0 + i).data() + o;
        const Real* ki = k.row(c0 + i).data() + o;
        const Real* vi = v.row(c0 + i).data() + o;
        for (int a = 0; a < n; ++a) {
          ca[i * n + a] = wi[a];
          for (int b = 0; b < n; ++b) cb[i * hs + a * n + b] = ki[a] * vi[b];
        }
      }
      scan_linear_recurrence(len, n, n, ca.data(), cb.data());

      Real* s0 = state.head(h);
      std::vector<Real> prev(s0, s0 + hs);
      for (int i = 0; i < len; ++i) {
        const Eigen::Index row = c0 + i;
        const Real* ri = r.row(row).data() + o;
        const Real* ki = k.row(row).data() + o;
        const Real* vi = v.row(row).data() + o;
        if (pre_states)
          std::copy(prev.begin(), prev.end(), pre_states->begin() + (static_cast<std::size_t>(row) * heads + h) * hs);
        Real vr = 0;
        for (int b = 0; b < n; ++b) vr += vi[b] * ri[b];
        Real* yi = y.row(row).data() + o;
        for (int a = 0; a < n; ++a) {
          Real sr = 0;
          for (int b = 0; b < n; ++b) sr += prev[a * n + b] * ri[b];
          yi[a] = sr + u(0, o + a) * ki[a] * vr;
        }
        // S_i = diag(A_i) S_0 + B_i
        for (int a = 0; a < n; ++a) {
          const Real prod = ca[i * n + a];
          for (int b = 0; b < n; ++b) prev[a * n + b] = prod * s0[a * n + b] + cb[i * hs + a * n + b];
        }
      }
      std::copy(prev.begin(), prev.end(), s0);
    }
  }
  return y;
}

template <typename Real>
Matrix<Real> tm_output(const Matrix<Real>& y, const Matrix<Real>& g, const Matrix<Real>& w_o, int n_head,
                       double eps) {
  if (y.cols() != g.cols() || y.rows() != g.rows() || y.cols() != w_o.rows() || y.cols() % n_head != 0)
    throw ShapeError("tm_output: shape mismatch");
  const Eigen::Index n = y.cols() / n_head;
  Matrix<Real> gated(y.rows(), y.cols());
  for (Eigen::Index i = 0; i < y.rows(); ++i) {
    for (int h = 0; h < n_head; ++h) {
      const auto seg = y.row(i).segment(h * n, n).array();
      const Real mean = seg.sum() / static_cast<Real>(n);
      const Real var = (seg - mean).square().sum() / static_cast<Real>(n);
      const Real inv = Real(1) / std::sqrt(var + static_cast<Real>(eps));
      const auto gs = g.row(i).segment(h * n, n).array();
      const auto silu = gs / (Real(1) + (-gs).exp());
      gated.row(i).segment(h * n, n) = (silu * (seg - mean) * inv).matrix();
    }
  }
  return gated * w_o;
}

template <typename Real>
Matrix<Real> cm_forward(const Matrix<Real>& x, const Matrix<Real>& x_prev, const ChannelMixParams<Real>& p) {
  if (x.cols() != p.w_r.rows() || x.rows() != x_prev.rows()) throw ShapeError("cm_forward: shape mismatch");
  const Matrix<Real> xx = x_prev - x;
  const Matrix<Real> xr = x + (xx.array().rowwise() * p.mu_r.row(0).array()).matrix();
  const Matrix<Real> xk = x + (xx.array().rowwise() * p.mu_k.row(0).array()).matrix();
  const Matrix<Real> k = xk * p.w_k;
  const Matrix<Real> v = k.array().max(Real(0)).square().matrix() * p.w_v;
  const Matrix<Real> r = xr * p.w_r;
  return ((Real(1) / (Real(1) + (-r.array()).exp())) * v.array()).matrix();
}

template <typename Real>
Matrix<Real> block_forward(const BlockParams<Real>& p, const Matrix<Real>& x, BlockState<Real>& state, int n_head,
                           Mode mode) {
  if (x.rows() == 0) return x;
  const Matrix<Real> a = layer_norm(x, p.ln1);
  const Matrix<Real> a_prev = token_shift(a, state.tm_prev);
  const TmProjection<Real> proj = tm_project(a, a_prev, p.tm);
  const Matrix<Real> y = mode == Mode::kRecurrent ? tm_recurrent(proj.r, proj.k, proj.v, proj.w, p.tm.u, state.s)
                                                  : tm_parallel(proj.r, proj.k, proj.v, proj.w, p.tm.u, state.s);
  const Matrix<Real> h = x + tm_output(y, proj.g, p.tm.w_o, n_head);
  state.tm_prev = a.bottomRows(1);

  const Matrix<Real> b = layer_norm(h, p.ln2);
  const Matrix<Real> b_prev = token_shift(b, state.cm_prev);
  Matrix<Real> out = h + cm_forward(b, b_prev, p.cm);
  state.cm_prev = b.bottomRows(1);
  return out;
}

#define EVA_LA_INSTANTIATE(R)                                                                                   \
  template Lora<R> make_lora<R>(int, int, int);                                                                 \
  template BlockParams<R> make_block<R>(int, int, int, int);                                                    \
  template Matrix<R> lora(const Matrix<R>&, const Lora<R>&);                                                    \
  template Matrix<R> ddlerp(const Matrix<R>&, const Matrix<R>&, const Matrix<R>&, const Lora<R>&);              \
  template Matrix<R> token_shift(const Matrix<R>&, const Matrix<R>&);                                           \
  template Matrix<R> layer_norm(const Matrix<R>&, const LayerNormParams<R>&, double);                           \
  template TmProjection<R> tm_project(const Matrix<R>&, const Matrix<R>&, const TimeMixParams<R>&);             \
  template void tm_step(HeadStates<R>&, const R*, const R*, const R*, const R*, const R*, R*);                  \
  template Matrix<R> tm_recurrent(const Matrix<R>&, const Matrix<R>&, const Matrix<R>&, const Matrix<R>&,       \
                                  const Matrix<R>&, HeadStates<R>&);                                            \
  template Matrix<R> tm_parallel(const Matrix<R>&, const Matrix<R>&, const Matrix<R>&, const Matrix<R>&,        \
                                 const Matrix<R>&, HeadStates<R>&, int, std::vector<R>*);                       \
  template Matrix<R> tm_output(const Matrix<R>&, const Matrix<R>&, const Matrix<R>&, int, double);              \
  template Matrix<R> cm_forward(const Matrix<R>&, const Matrix<R>&, const ChannelMixParams<R>&);                \
  template Matrix<R> block_forward(const BlockParams<R>&, const Matrix<R>&, BlockState<R>&, int, Mode);         \
  template void scan_linear_recurrence(int, int, int, R*, R*);

EVA_LA_INSTANTIATE(float)
EVA_LA_INSTANTIATE(double)

}  // namespace eva::la
