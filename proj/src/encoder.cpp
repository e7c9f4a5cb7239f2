#include "eva/encoder.hpp"

#include <cmath>

#include "eva/random.hpp"

namespace eva {

template <typename Real>
EncoderParams<Real> make_encoder(const EncoderConfig& c) {
  c.validate();
  EncoderParams<Real> p;
  p.config = c;
  p.embedding.vocab = embed::Vocabulary{c.patch, c.patch};
  p.embedding.weights = Matrix<Real>::Zero(c.vocab_size(), c.d_model);
  p.ln_in = {Matrix<Real>::Ones(1, c.d_model), Matrix<Real>::Zero(1, c.d_model)};
  p.ln_out = {Matrix<Real>::Ones(1, c.d_model), Matrix<Real>::Zero(1, c.d_model)};
  for (int i = 0; i < c.n_layer; ++i)
    p.blocks.push_back(la::make_block<Real>(c.d_model, c.d_ffn, c.d_lora, c.d_decay_lora));
  p.mvhs = mvhs::make_mvhs<Real>(c.d_model, c.mvhs_heads, c.mvhs_head_size, c.d_lora, c.d_decay_lora);
  return p;
}

namespace {

void fill_uniform(Matrix<double>& m, Rng& rng, double bound) {
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.uniform(-bound, bound);
}

void init_lora(la::Lora<double>& l, Rng& rng, double lambda) {
  l.lambda.setConstant(lambda);
  fill_uniform(l.a, rng, 1.0 / std::sqrt(static_cast<double>(l.a.rows())));
  fill_uniform(l.b, rng, 0.01);
}

}  // namespace

EncoderParams<double> init_encoder(const EncoderConfig& c, std::uint64_t seed) {
  EncoderParams<double> p = make_encoder<double>(c);
  Rng rng(seed);
  const double decay_bias = std::log(-std::log(0.95));
  auto fan_in = [&](Matrix<double>& m) { fill_uniform(m, rng, 1.0 / std::sqrt(static_cast<double>(m.rows()))); };

  fill_uniform(p.embedding.weights, rng, 1e-4);
  for (auto& b : p.blocks) {
    auto& tm = b.tm;
    tm.mu.setConstant(0.5);
    init_lora(tm.mix_r, rng, 0.5);
    init_lora(tm.mix_k, rng, 0.5);
    init_lora(tm.mix_v, rng, 0.5);
    init_lora(tm.mix_g, rng, 0.5);
    init_lora(tm.mix_w, rng, 0.5);
    init_lora(tm.decay, rng, decay_bias);
    fan_in(tm.w_r);
    fan_in(tm.w_k);
    fan_in(tm.w_v);
    fan_in(tm.w_g);
    fan_in(tm.w_o);
    tm.u.setZero();
    b.cm.mu_r.setConstant(0.5);
    b.cm.mu_k.setConstant(0.5);
    fan_in(b.cm.w_r);
    fan_in(b.cm.w_k);
    fan_in(b.cm.w_v);
  }
  p.mvhs.mu.setConstant(0.5);
  init_lora(p.mvhs.mix_k, rng, 0.5);
  init_lora(p.mvhs.mix_v, rng, 0.5);
  init_lora(p.mvhs.mix_w, rng, 0.5);
  init_lora(p.mvhs.decay, rng, decay_bias);
  fan_in(p.mvhs.w_k);
  fan_in(p.mvhs.w_v);
  return p;
}

template <typename Real>
EncoderState<Real>::EncoderState(const EncoderConfig& c)
    : mvhs(c.d_model, c.mvhs_heads, c.mvhs_head_size) {
  for (int i = 0; i < c.n_layer; ++i) blocks.emplace_back(c.n_head, c.head_size());
}

template <typename Real>
Matrix<Real> stack_forward(const EncoderParams<Real>& p, EncoderState<Real>& state, std::span<const io::Event> events,
                           la::Mode mode) {
  const auto& c = p.config;
  if (events.empty()) return Matrix<Real>(0, c.d_model);
  Matrix<Real> x = embed::embed_sequence(events, state.events > 0, state.last_t, p.embedding);
  x = la::layer_norm(x, p.ln_in);
  for (std::size_t i = 0; i < p.blocks.size(); ++i) x = la::block_forward(p.blocks[i], x, state.blocks[i], c.n_head, mode);
  x = la::layer_norm(x, p.ln_out);
  state.last_t = events.back().t;
  state.events += events.size();
  return x;
}

template <typename Real>
void encoder_step(const EncoderParams<Real>& p, EncoderState<Real>& state, const io::Event& event) {
  const Matrix<Real> x = stack_forward(p, state, std::span<const io::Event>(&event, 1), la::Mode::kRecurrent);
  mvhs::mvhs_step(state.mvhs, x, p.mvhs);
}

template <typename Real>
std::vector<HeadStates<Real>> encode_events(const EncoderParams<Real>& p, EncoderState<Real>& state,
                                            std::span<const io::Event> events, std::span<const int> checkpoints,
                                            la::Mode mode, int segment) {
  if (segment < 1) throw Error("encode_events: segment must be positive");
  const auto total = static_cast<int>(events.size());
  for (std::size_t i = 0; i < checkpoints.size(); ++i) {
    if (checkpoints[i] < 0 || checkpoints[i] > total) throw Error("encode_events: checkpoint out of range");
    if (i > 0 && checkpoints[i] < checkpoints[i - 1]) throw Error("encode_events: checkpoints must be sorted");
  }
  std::vector<HeadStates<Real>> out;
  out.reserve(checkpoints.size());
  std::size_t next = 0;
  while (next < checkpoints.size() && checkpoints[next] == 0) {
    out.push_back(state.mvhs.s);
    ++next;
  }
  std::vector<int> local;
  for (int s0 = 0; s0 < total; s0 += segment) {
    const int s1 = std::min(total, s0 + segment);
    local.clear();
    while (next < checkpoints.size() && checkpoints[next] <= s1) local.push_back(checkpoints[next++] - s0);
    const Matrix<Real> x = stack_forward(p, state, events.subspan(s0, s1 - s0), mode);
    auto snaps = mode == la::Mode::kParallel ? mvhs::mvhs_parallel(x, p.mvhs, state.mvhs, local)
                                             : mvhs::mvhs_recurrent(x, p.mvhs, state.mvhs, local);
    for (auto& s : snaps) out.push_back(std::move(s));
  }
  return out;
}

#define EVA_ENCODER_INSTANTIATE(R)                                                                              \
  template EncoderParams<R> make_encoder<R>(const EncoderConfig&);                                           \
  template struct EncoderState<R>;                                                                           \
  template Matrix<R> stack_forward(const EncoderParams<R>&, EncoderState<R>&, std::span<const io::Event>,    \
                                   la::Mode);                                                                \
  template void encoder_step(const EncoderParams<R>&, EncoderState<R>&, const io::Event&);                   \
  template std::vector<HeadStates<R>> encode_events(const EncoderParams<R>&, EncoderState<R>&,               \
                                                    std::span<const io::Event>, std::span<const int>,        \
                                                    la::Mode, int);

EVA_ENCODER_INSTANTIATE(float)
EVA_ENCODER_INSTANTIATE(double)

}  // namespace eva
