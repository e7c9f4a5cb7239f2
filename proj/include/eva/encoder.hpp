#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "eva/config.hpp"
#include "eva/event_io.hpp"
#include "eva/la_core.hpp"
#include "eva/mvhs_repr.hpp"
#include "eva/token_embed.hpp"

namespace eva {

/// Full asynchronous encoder: embedding, input norm, L blocks, output norm,
/// MVHS layer.
template <typename Real>
struct EncoderParams {
  EncoderConfig config;
  embed::EmbeddingTable<Real> embedding;
  la::LayerNormParams<Real> ln_in;
  std::vector<la::BlockParams<Real>> blocks;
  la::LayerNormParams<Real> ln_out;
  mvhs::MvhsParams<Real> mvhs;
};

template <typename Fn, typename First, typename... Rest>
void visit_encoder(Fn&& fn, First& first, Rest&... rest) {
  fn(std::string("embedding"), first.embedding.weights, rest.embedding.weights...);
  la::visit_norm(fn, "ln_in", first.ln_in, rest.ln_in...);
  for (std::size_t i = 0; i < first.blocks.size(); ++i)
    la::visit_block(fn, "blocks." + std::to_string(i), first.blocks[i], rest.blocks[i]...);
  la::visit_norm(fn, "ln_out", first.ln_out, rest.ln_out...);
  mvhs::visit_mvhs(fn, "mvhs", first.mvhs, rest.mvhs...);
}

/// Correctly shaped parameters: norms are identity, everything else zero.
template <typename Real>
EncoderParams<Real> make_encoder(const EncoderConfig& config);

/// Seeded initialization: matrices uniform in +-1/sqrt(fan_in), embedding
/// uniform in +-1e-4, decay bias giving w ~ 0.95, bonus u = 0, mixing
/// coefficients 0.5.
EncoderParams<double> init_encoder(const EncoderConfig& config, std::uint64_t seed);

template <typename To, typename From>
EncoderParams<To> cast_encoder(const EncoderParams<From>& src) {
  EncoderParams<To> dst = make_encoder<To>(src.config);
  visit_encoder([](const std::string&, Matrix<To>& d, const Matrix<From>& s) { d = s.template cast<To>(); }, dst,
                src);
  return dst;
}

template <typename Real>
std::size_t parameter_count(const EncoderParams<Real>& p) {
  std::size_t n = 0;
  visit_encoder([&n](const std::string&, const Matrix<Real>& m) { n += static_cast<std::size_t>(m.size()); }, p);
  return n;
}

template <typename Real>
struct EncoderState {
  std::vector<la::BlockState<Real>> blocks;
  mvhs::MvhsState<Real> mvhs;
  std::uint64_t last_t = 0;
  std::uint64_t events = 0;

  EncoderState() = default;
  explicit EncoderState(const EncoderConfig& c);
};

/// Embedding through the output norm for a patch-local event sequence; the
/// first interval is measured against the state's last event (0 for a fresh
/// state). Returns T x D inputs for the MVHS layer and advances the block
/// states.
template <typename Real>
Matrix<Real> stack_forward(const EncoderParams<Real>& p, EncoderState<Real>& state, std::span<const io::Event> events,
                           la::Mode mode);

/// One event through the whole encoder, recurrently.
template <typename Real>
void encoder_step(const EncoderParams<Real>& p, EncoderState<Real>& state, const io::Event& event);

/// Absorbs `events` and returns MVHS states at each checkpoint prefix length.
/// Long inputs are processed in segments of `segment` events with the state
/// carried between them.
template <typename Real>
std::vector<HeadStates<Real>> encode_events(const EncoderParams<Real>& p, EncoderState<Real>& state,
                                            std::span<const io::Event> events, std::span<const int> checkpoints,
                                            la::Mode mode, int segment = 4096);

}  // namespace eva
