#pragma once

#include <string>
#include <vector>

#include "eva/tensor.hpp"

namespace eva::la {

inline constexpr double kNormEps = 1e-5;
inline constexpr int kScanChunk = 64;

enum class Mode { kRecurrent, kParallel };

// ---- parameters -------------------------------------------------------------

/// lambda + tanh(x A) B.
template <typename Real>
struct Lora {
  Matrix<Real> lambda;  // 1 x out
  Matrix<Real> a;       // in x rank
  Matrix<Real> b;       // rank x out
};

template <typename Real>
struct LayerNormParams {
  Matrix<Real> scale;   // 1 x D
  Matrix<Real> offset;  // 1 x D
};

template <typename Real>
struct TimeMixParams {
  Matrix<Real> mu;  // shared pre-mix of the interpolation argument
  Lora<Real> mix_r, mix_k, mix_v, mix_g, mix_w;
  Lora<Real> decay;
  Matrix<Real> w_r, w_k, w_v, w_g, w_o;
  Matrix<Real> u;  // 1 x D bonus for the current token
};

template <typename Real>
struct ChannelMixParams {
  Matrix<Real> mu_r, mu_k;  // 1 x D
  Matrix<Real> w_r;         // D x D
  Matrix<Real> w_k;         // D x D_ffn
  Matrix<Real> w_v;         // D_ffn x D
};

template <typename Real>
struct BlockParams {
  LayerNormParams<Real> ln1, ln2;
  TimeMixParams<Real> tm;
  ChannelMixParams<Real> cm;
};

// Visitors call fn(name, tensor...) for every tensor, walking several
// same-shaped parameter sets in lockstep.
template <typename Fn, typename... L>
void visit_lora(Fn&& fn, const std::string& prefix, L&... l) {
  fn(prefix + ".lambda", l.lambda...);
  fn(prefix + ".a", l.a...);
  fn(prefix + ".b", l.b...);
}

template <typename Fn, typename... N>
void visit_norm(Fn&& fn, const std::string& prefix, N&... n) {
  fn(prefix + ".scale", n.scale...);
  fn(prefix + ".offset", n.offset...);
}

template <typename Fn, typename... B>
void visit_block(Fn&& fn, const std::string& prefix, B&... b) {
  visit_norm(fn, prefix + ".ln1", b.ln1...);
  fn(prefix + ".tm.mu", b.tm.mu...);
  visit_lora(fn, prefix + ".tm.mix_r", b.tm.mix_r...);
  visit_lora(fn, prefix + ".tm.mix_k", b.tm.mix_k...);
  visit_lora(fn, prefix + ".tm.mix_v", b.tm.mix_v...);
  visit_lora(fn, prefix + ".tm.mix_g", b.tm.mix_g...);
  visit_lora(fn, prefix + ".tm.mix_w", b.tm.mix_w...);
  visit_lora(fn, prefix + ".tm.decay", b.tm.decay...);
  fn(prefix + ".tm.w_r", b.tm.w_r...);
  fn(prefix + ".tm.w_k", b.tm.w_k...);
  fn(prefix + ".tm.w_v", b.tm.w_v...);
  fn(prefix + ".tm.w_g", b.tm.w_g...);
  fn(prefix + ".tm.w_o", b.tm.w_o...);
  fn(prefix + ".tm.u", b.tm.u...);
  visit_norm(fn, prefix + ".ln2", b.ln2...);
  fn(prefix + ".cm.mu_r", b.cm.mu_r...);
  fn(prefix + ".cm.mu_k", b.cm.mu_k...);
  fn(prefix + ".cm.w_r", b.cm.w_r...);
  fn(prefix + ".cm.w_k", b.cm.w_k...);
  fn(prefix + ".cm.w_v", b.cm.w_v...);
}

/// Allocates zero tensors of the right shapes.
template <typename Real>
Lora<Real> make_lora(int in, int rank, int out);
template <typename Real>
BlockParams<Real> make_block(int d_model, int d_ffn, int d_lora, int d_decay_lora);

// ---- recurrent state ----------------------------------------------------------

template <typename Real>
struct BlockState {
  HeadStates<Real> s;
  Matrix<Real> tm_prev;  // 1 x D, normalized input of the previous token
  Matrix<Real> cm_prev;  // 1 x D

  BlockState() = default;
  BlockState(int n_head, int head_size)
      : s(n_head, head_size),
        tm_prev(Matrix<Real>::Zero(1, n_head * head_size)),
        cm_prev(Matrix<Real>::Zero(1, n_head * head_size)) {}
};

// ---- kernels --------------------------------------------------------------------

template <typename Real>
Matrix<Real> lora(const Matrix<Real>& x, const Lora<Real>& p);

/// x + (x_prev - x) * lora(x + (x_prev - x) * mu), row-wise.
template <typename Real>
Matrix<Real> ddlerp(const Matrix<Real>& x, const Matrix<Real>& x_prev, const Matrix<Real>& mu, const Lora<Real>& p);

/// Rows shifted down by one; row 0 becomes `prev`.
template <typename Real>
Matrix<Real> token_shift(const Matrix<Real>& x, const Matrix<Real>& prev);

template <typename Real>
Matrix<Real> layer_norm(const Matrix<Real>& x, const LayerNormParams<Real>& p, double eps = kNormEps);

template <typename Real>
struct TmProjection {
  Matrix<Real> r, k, v, g, w;
};

/// r,k,v,g from their ddlerp branches; w = exp(-exp(lora_d(ddlerp_w))).
template <typename Real>
TmProjection<Real> tm_project(const Matrix<Real>& x, const Matrix<Real>& x_prev, const TimeMixParams<Real>& p);

/// One token: per head y = (S + diag(u) k v^T) r, then S = diag(w) S + k v^T.
/// All pointers address D = heads*size contiguous values.
template <typename Real>
void tm_step(HeadStates<Real>& state, const Real* r, const Real* k, const Real* v, const Real* w, const Real* u,
             Real* y);

/// Token-by-token reference over T rows.
template <typename Real>
Matrix<Real> tm_recurrent(const Matrix<Real>& r, const Matrix<Real>& k, const Matrix<Real>& v,
                          const Matrix<Real>& w, const Matrix<Real>& u, HeadStates<Real>& state);

/// Chunked scan: within each chunk the states come from a work-efficient
/// (Blelloch) scan of the per-element recurrence S <- w S + k v^T, and the
/// chunk-end state is carried into the next chunk. When `pre_states` is
/// given it receives S_{i-1} for every row i (T x heads x size x size).
template <typename Real>
Matrix<Real> tm_parallel(const Matrix<Real>& r, const Matrix<Real>& k, const Matrix<Real>& v,
                         const Matrix<Real>& w, const Matrix<Real>& u, HeadStates<Real>& state,
                         int chunk = kScanChunk, std::vector<Real>* pre_states = nullptr);

/// concat_h(SiLU(g) * norm_h(y)) W_o with per-head normalization.
template <typename Real>
Matrix<Real> tm_output(const Matrix<Real>& y, const Matrix<Real>& g, const Matrix<Real>& w_o, int n_head,
                       double eps = kNormEps);

template <typename Real>
Matrix<Real> cm_forward(const Matrix<Real>& x, const Matrix<Real>& x_prev, const ChannelMixParams<Real>& p);

/// Pre-norm residual block: h = x + TM(LN1 x); out = h + CM(LN2 h). Works on
/// any number of rows and carries the state.
template <typename Real>
Matrix<Real> block_forward(const BlockParams<Real>& p, const Matrix<Real>& x, BlockState<Real>& state, int n_head,
                           Mode mode);

/// Inclusive scan of (a_i, B_i) pairs under (a2,B2) o (a1,B1) = (a2 a1,
/// diag(a2) B1 + B2). On return a holds running products and b the running
/// sums. len rows of dim_a and dim_a x dim_b.
template <typename Real>
void scan_linear_recurrence(int len, int dim_a, int dim_b, Real* a, Real* b);

}  // namespace eva::la
