#pragma once

#include <cstdint>
#include <span>

#include "eva/event_io.hpp"
#include "eva/tensor.hpp"

namespace eva::embed {

struct Vocabulary {
  int height = 16;
  int width = 16;

  int size() const { return 2 * height * width; }
};

struct Coordinates {
  int x = 0;
  int y = 0;
  int p = 0;

  friend bool operator==(const Coordinates&, const Coordinates&) = default;
};

/// p*H*W + y*W + x. Throws eva::Error on out-of-range input.
int tok(int x, int y, int p, int height, int width);
Coordinates untok(int token, int height, int width);

inline int tok(const io::Event& e, const Vocabulary& vocab) { return tok(e.x, e.y, e.p, vocab.height, vocab.width); }

/// Sinusoidal encoding of a raw microsecond interval: component k is
/// sin(dt / 10000^(2k/D)) for even k and cos(...) for odd k.
template <typename Real>
void embed_temporal(double dt_us, std::span<Real> out);

template <typename Real>
RowVector<Real> embed_temporal(double dt_us, int dim) {
  RowVector<Real> v(dim);
  embed_temporal<Real>(dt_us, std::span<Real>(v.data(), static_cast<std::size_t>(dim)));
  return v;
}

/// Learnable spatial embedding, one row per token.
template <typename Real>
struct EmbeddingTable {
  Vocabulary vocab;
  Matrix<Real> weights;  // vocab.size() x D

  int dim() const { return static_cast<int>(weights.cols()); }
};

/// table[tok(e)] + temporal(e.t - prev_t).
template <typename Real>
RowVector<Real> embed_event(const io::Event& event, std::uint64_t prev_t, const EmbeddingTable<Real>& table);

/// Embeds a patch-local sequence. The first event's interval is taken against
/// `prev_t` when `has_prev`, otherwise it is 0.
template <typename Real>
Matrix<Real> embed_sequence(std::span<const io::Event> events, bool has_prev, std::uint64_t prev_t,
                            const EmbeddingTable<Real>& table);

}  // namespace eva::embed
