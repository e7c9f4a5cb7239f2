#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "eva/la_core.hpp"

namespace eva::mvhs {

/// The k, v and decay paths of a token-mixing layer; no receptance, gate,
/// bonus or output projection.
template <typename Real>
struct MvhsParams {
  Matrix<Real> mu;  // 1 x D (input width)
  la::Lora<Real> mix_k, mix_v, mix_w;
  la::Lora<Real> decay;  // D -> D_mv
  Matrix<Real> w_k;      // D x D_mv
  Matrix<Real> w_v;      // D x D_mv
};

template <typename Fn, typename... M>
void visit_mvhs(Fn&& fn, const std::string& prefix, M&... m) {
  fn(prefix + ".mu", m.mu...);
  la::visit_lora(fn, prefix + ".mix_k", m.mix_k...);
  la::visit_lora(fn, prefix + ".mix_v", m.mix_v...);
  la::visit_lora(fn, prefix + ".mix_w", m.mix_w...);
  la::visit_lora(fn, prefix + ".decay", m.decay...);
  fn(prefix + ".w_k", m.w_k...);
  fn(prefix + ".w_v", m.w_v...);
}

template <typename Real>
MvhsParams<Real> make_mvhs(int d_in, int heads, int head_size, int d_lora, int d_decay_lora);

template <typename Real>
struct MvhsState {
  HeadStates<Real> s;
  Matrix<Real> prev;  // 1 x D input of the previous event

  MvhsState() = default;
  MvhsState(int d_in, int heads, int head_size) : s(heads, head_size), prev(Matrix<Real>::Zero(1, d_in)) {}
};

template <typename Real>
struct MvhsProjection {
  Matrix<Real> k, v, w;  // T x D_mv
};

template <typename Real>
MvhsProjection<Real> mvhs_project(const Matrix<Real>& x, const Matrix<Real>& x_prev, const MvhsParams<Real>& p);

/// Absorbs one event: S^h <- diag(w^h) S^h + k^h v^h^T. `x` is 1 x D.
template <typename Real>
void mvhs_step(MvhsState<Real>& state, const Matrix<Real>& x, const MvhsParams<Real>& p);

/// Absorbs T rows with the chunked scan and returns the state after each
/// checkpoint prefix length (0..T, non-decreasing). Throws on unsorted or
/// out-of-range checkpoints.
template <typename Real>
std::vector<HeadStates<Real>> mvhs_parallel(const Matrix<Real>& x, const MvhsParams<Real>& p, MvhsState<Real>& state,
                                            std::span<const int> checkpoints, int chunk = la::kScanChunk);

/// Chunked scan over already projected k, v, w. When `all_states` is given
/// it receives S_i for every i in 1..T (T x heads x size x size).
template <typename Real>
std::vector<HeadStates<Real>> scan_states(const Matrix<Real>& k, const Matrix<Real>& v, const Matrix<Real>& w,
                                          HeadStates<Real>& state, std::span<const int> checkpoints,
                                          int chunk = la::kScanChunk, std::vector<Real>* all_states = nullptr);

/// Reference path: step row by row.
template <typename Real>
std::vector<HeadStates<Real>> mvhs_recurrent(const Matrix<Real>& x, const MvhsParams<Real>& p,
                                             MvhsState<Real>& state, std::span<const int> checkpoints);

/// Per-patch output tensor n_out x D_head x D_head.
struct Representation {
  int channels = 0;
  int size = 0;
  std::vector<double> values;  // channel-major, then row, then column
  std::uint64_t event_index = 0;
  std::uint64_t last_t = 0;

  double at(int c, int i, int j) const {
    return values[(static_cast<std::size_t>(c) * size + i) * size + j];
  }
};

/// Keeps heads 0..n_out-1. Throws when n_out is 0 or exceeds the head count.
template <typename Real>
Representation select_channels(const HeadStates<Real>& s, int n_out);

}  // namespace eva::mvhs
