#include "eva/mvhs_repr.hpp"

#include <cmath>

#include "eva/common.hpp"

namespace eva::mvhs {

template <typename Real>
MvhsParams<Real> make_mvhs(int d_in, int heads, int head_size, int d_lora, int d_decay_lora) {
  const int d_mv = heads * head_size;
  MvhsParams<Real> p;
  p.mu = Matrix<Real>::Zero(1, d_in);
  p.mix_k = la::make_lora<Real>(d_in, d_lora, d_in);
  p.mix_v = la::make_lora<Real>(d_in, d_lora, d_in);
  p.mix_w = la::make_lora<Real>(d_in, d_lora, d_in);
  p.decay = la::make_lora<Real>(d_in, d_decay_lora, d_mv);
  p.w_k = Matrix<Real>::Zero(d_in, d_mv);
  p.w_v = Matrix<Real>::Zero(d_in, d_mv);
  return p;
}

template <typename Real>
MvhsProjection<Real> mvhs_project(const Matrix<Real>& x, const Matrix<Real>& x_prev, const MvhsParams<Real>& p) {
  if (x.cols() != p.w_k.rows() || x_prev.rows() != x.rows()) throw ShapeError("mvhs_project: shape mismatch");
  const Matrix<Real> xx = x_prev - x;
  const Matrix<Real> xxx = x + (xx.array().rowwise() * p.mu.row(0).array()).matrix();
  auto branch = [&](const la::Lora<Real>& l) -> Matrix<Real> {
    return x + (xx.array() * la::lora(xxx, l).array()).matrix();
  };
  MvhsProjection<Real> out;
  out.k = branch(p.mix_k) * p.w_k;
  out.v = branch(p.mix_v) * p.w_v;
  const Matrix<Real> d = la::lora(branch(p.mix_w), p.decay);
  out.w = (-(d.array().exp())).exp().matrix();
  return out;
}

template <typename Real>
void mvhs_step(MvhsState<Real>& state, const Matrix<Real>& x, const MvhsParams<Real>& p) {
  const MvhsProjection<Real> proj = mvhs_project(x, state.prev, p);
  const int n = state.s.size;
  for (int h = 0; h < state.s.heads; ++h) {
    const int o = h * n;
    Real* s = state.s.head(h);
    for (int a = 0; a < n; ++a) {
      const Real wa = proj.w(0, o + a);
      const Real ka = proj.k(0, o + a);
      for (int b = 0; b < n; ++b) s[a * n + b] = wa * s[a * n + b] + ka * proj.v(0, o + b);
    }
  }
  state.prev = x;
}

namespace {

void check_checkpoints(std::span<const int> checkpoints, Eigen::Index T) {
  for (std::size_t i = 0; i < checkpoints.size(); ++i) {
    if (checkpoints[i] < 0 || checkpoints[i] > T) throw Error("mvhs: checkpoint index out of range");
    if (i > 0 && checkpoints[i] < checkpoints[i - 1]) throw Error("mvhs: checkpoints must be sorted");
  }
}

}  // namespace

template <typename Real>
std::vector<HeadStates<Real>> scan_states(const Matrix<Real>& k, const Matrix<Real>& v, const Matrix<Real>& w,
                                          HeadStates<Real>& state, std::span<const int> checkpoints, int chunk,
                                          std::vector<Real>* all_states) {
  const Eigen::Index T = k.rows();
  const int n = state.size;
  const int heads = state.heads;
  if (k.cols() != static_cast<Eigen::Index>(heads) * n || v.cols() != k.cols() || w.cols() != k.cols())
    throw ShapeError("mvhs scan: width does not match state");
  check_checkpoints(checkpoints, T);
  const std::size_t hs = state.head_stride();
  const std::size_t full = hs * heads;

  std::vector<HeadStates<Real>> out;
  out.reserve(checkpoints.size());
  std::size_t next = 0;
  while (next < checkpoints.size() && checkpoints[next] == 0) {
    out.push_back(state);
    ++next;
  }
  if (all_states) all_states->assign(static_cast<std::size_t>(T) * full, Real(0));

  std::vector<Real> ca, cb, chunk_states;
  for (Eigen::Index c0 = 0; c0 < T; c0 += chunk) {
    const int len = static_cast<int>(std::min<Eigen::Index>(chunk, T - c0));
    chunk_states.assign(static_cast<std::size_t>(len) * full, Real(0));
    for (int h = 0; h < heads; ++h) {
      const int o = h * n;
      ca.assign(static_cast<std::size_t>(len) * n, Real(0));
      cb.assign(static_cast<std::size_t>(len) * hs, Real(0));
      for (int i = 0; i < len; ++i) {
        for (int a = 0; a < n; ++a) {
          ca[i * n + a] = w(c0 + i, o + a);
          const Real ka = k(c0 + i, o + a);
          for (int b = 0; b < n; ++b) cb[i * hs + a * n + b] = ka * v(c0 + i, o + b);
        }
      }
      la::scan_linear_recurrence(len, n, n, ca.data(), cb.data());
      const Real* s0 = state.head(h);
      for (int i = 0; i < len; ++i) {
        Real* dst = chunk_states.data() + i * full + h * hs;
        for (int a = 0; a < n; ++a) {
          const Real prod = ca[i * n + a];
          for (int b = 0; b < n; ++b) dst[a * n + b] = prod * s0[a * n + b] + cb[i * hs + a * n + b];
        }
      }
    }
    for (int i = 0; i < len; ++i) {
      const Real* src = chunk_states.data() + i * full;
      if (all_states) std::copy(src, src + full, all_states->begin() + (c0 + i) * full);
      while (next < checkpoints.size() && checkpoints[next] == c0 + i + 1) {
        HeadStates<Real> snap(heads, n);
        std::copy(src, src + full, snap.data.begin());
        out.push_back(std::move(snap));
        ++next;
      }
    }
    std::copy(chunk_states.end() - full, chunk_states.end(), state.data.begin());
  }
  return out;
}

template <typename Real>
std::vector<HeadStates<Real>> mvhs_parallel(const Matrix<Real>& x, const MvhsParams<Real>& p, MvhsState<Real>& state,
                                            std::span<const int> checkpoints, int chunk) {
  check_checkpoints(checkpoints, x.rows());
  if (x.rows() == 0) return std::vector<HeadStates<Real>>(checkpoints.size(), state.s);
  const Matrix<Real> shifted = la::token_shift(x, state.prev);
  const MvhsProjection<Real> proj = mvhs_project(x, shifted, p);
  auto out = scan_states(proj.k, proj.v, proj.w, state.s, checkpoints, chunk);
  state.prev = x.bottomRows(1);
  return out;
}

template <typename Real>
std::vector<HeadStates<Real>> mvhs_recurrent(const Matrix<Real>& x, const MvhsParams<Real>& p,
                                             MvhsState<Real>& state, std::span<const int> checkpoints) {
  check_checkpoints(checkpoints, x.rows());
  std::vector<HeadStates<Real>> out;
  std::size_t next = 0;
  for (Eigen::Index i = 0; i <= x.rows(); ++i) {
    while (next < checkpoints.size() && checkpoints[next] == i) {
      out.push_back(state.s);
      ++next;
    }
    if (i < x.rows()) mvhs_step(state, Matrix<Real>(x.row(i)), p);
  }
  return out;
}

template <typename Real>
Representation select_channels(const HeadStates<Real>& s, int n_out) {
  if (n_out <= 0) throw Error("select_channels: n_out must be positive");
  if (n_out > s.heads) throw Error("select_channels: n_out exceeds head count");
  Representation r;
  r.channels = n_out;
  r.size = s.size;
  r.values.assign(s.data.begin(), s.data.begin() + static_cast<std::ptrdiff_t>(n_out * s.head_stride()));
  return r;
}

#define EVA_MVHS_INSTANTIATE(R)                                                                                     \
  template MvhsParams<R> make_mvhs<R>(int, int, int, int, int);                                                  \
  template MvhsProjection<R> mvhs_project(const Matrix<R>&, const Matrix<R>&, const MvhsParams<R>&);             \
  template void mvhs_step(MvhsState<R>&, const Matrix<R>&, const MvhsParams<R>&);                                \
  template std::vector<HeadStates<R>> scan_states(const Matrix<R>&, const Matrix<R>&, const Matrix<R>&,          \
                                                  HeadStates<R>&, std::span<const int>, int, std::vector<R>*);   \
  template std::vector<HeadStates<R>> mvhs_parallel(const Matrix<R>&, const MvhsParams<R>&, MvhsState<R>&,       \
                                                    std::span<const int>, int);                                  \
  template std::vector<HeadStates<R>> mvhs_recurrent(const Matrix<R>&, const MvhsParams<R>&, MvhsState<R>&,      \
                                                     std::span<const int>);                                      \
  template Representation select_channels(const HeadStates<R>&, int);

EVA_MVHS_INSTANTIATE(float)
EVA_MVHS_INSTANTIATE(double)

}  // namespace eva::mvhs
