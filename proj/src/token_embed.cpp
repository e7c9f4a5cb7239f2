#include "eva/token_embed.hpp"

#include <cmath>
#include <string>

namespace eva::embed {

int tok(int x, int y, int p, int height, int width) {
  if (x < 0 || x >= width || y < 0 || y >= height || p < 0 || p > 1)
    throw Error("tok: (" + std::to_string(x) + "," + std::to_string(y) + "," + std::to_string(p) +
                ") outside " + std::to_string(width) + "x" + std::to_string(height));
  return p * height * width + y * width + x;
}

Coordinates untok(int token, int height, int width) {
  const int plane = height * width;
  if (token < 0 || token >= 2 * plane) throw Error("untok: token " + std::to_string(token) + " out of range");
  return Coordinates{token % width, (token % plane) / width, token / plane};
}

template <typename Real>
void embed_temporal(double dt_us, std::span<Real> out) {
  const auto dim = static_cast<double>(out.size());
  for (std::size_t k = 0; k < out.size(); ++k) {
    const double arg = dt_us / std::pow(10000.0, 2.0 * static_cast<double>(k) / dim);
    out[k] = static_cast<Real>(k % 2 == 0 ? std::sin(arg) : std::cos(arg));
  }
}

template <typename Real>
RowVector<Real> embed_event(const io::Event& event, std::uint64_t prev_t, const EmbeddingTable<Real>& table) {
  if (event.t < prev_t) throw Error("embed_event: event precedes previous timestamp");
  const int token = tok(event, table.vocab);
  RowVector<Real> out = embed_temporal<Real>(static_cast<double>(event.t - prev_t), table.dim());
  out += table.weights.row(token);
  return out;
}

template <typename Real>
Matrix<Real> embed_sequence(std::span<const io::Event> events, bool has_prev, std::uint64_t prev_t,
                            const EmbeddingTable<Real>& table) {
  Matrix<Real> out(static_cast<Eigen::Index>(events.size()), table.dim());
  std::uint64_t last = has_prev ? prev_t : (events.empty() ? 0 : events.front().t);
  for (std::size_t i = 0; i < events.size(); ++i) {
    out.row(static_cast<Eigen::Index>(i)) = embed_event(events[i], last, table);
    last = events[i].t;
  }
  return out;
}

template void embed_temporal<float>(double, std::span<float>);
template void embed_temporal<double>(double, std::span<double>);
template RowVector<float> embed_event(const io::Event&, std::uint64_t, const EmbeddingTable<float>&);
template RowVector<double> embed_event(const io::Event&, std::uint64_t, const EmbeddingTable<double>&);
template Matrix<float> embed_sequence(std::span<const io::Event>, bool, std::uint64_t, const EmbeddingTable<float>&);
template Matrix<double> embed_sequence(std::span<const io::Event>, bool, std::uint64_t,
                                       const EmbeddingTable<double>&);

}  // namespace eva::embed
