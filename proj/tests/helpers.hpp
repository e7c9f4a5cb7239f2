#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "eva/encoder.hpp"
#include "eva/event_io.hpp"
#include "eva/random.hpp"
#include "eva/ssl_train.hpp"

namespace eva::testing {

/// Sorted random events with small gaps; ties appear with probability
/// `tie_rate`.
inline std::vector<io::Event> random_events(Rng& rng, std::size_t n, int width, int height, std::uint64_t max_gap = 2000,
                                            double tie_rate = 0.1, std::uint64_t t0 = 0) {
  std::vector<io::Event> out;
  out.reserve(n);
  std::uint64_t t = t0;
  for (std::size_t i = 0; i < n; ++i) {
    if (i > 0 && rng.uniform() >= tie_rate) t += 1 + rng.below(max_gap);
    out.push_back({t, static_cast<std::uint16_t>(rng.below(width)), static_cast<std::uint16_t>(rng.below(height)),
                   static_cast<std::uint8_t>(rng.below(2))});
  }
  return out;
}

/// Perturbs every parameter so that no mixing coefficient, bonus or bias
/// sits at a special value.
inline void jitter(EncoderParams<double>& p, Rng& rng, double amount) {
  visit_encoder(
      [&](const std::string&, Matrix<double>& m) {
        for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] += rng.uniform(-amount, amount);
      },
      p);
}

inline EncoderParams<double> random_encoder(const EncoderConfig& c, std::uint64_t seed, double amount = 0.2) {
  EncoderParams<double> p = init_encoder(c, seed);
  Rng rng(seed + 17);
  jitter(p, rng, amount);
  return p;
}

/// max |a - b| / max(|a|, |b|, floor) over paired entries.
inline double max_rel_error(const Matrix<double>& a, const Matrix<double>& b, double floor) {
  double worst = 0.0;
  for (Eigen::Index i = 0; i < a.size(); ++i) {
    const double x = a.data()[i], y = b.data()[i];
    worst = std::max(worst, std::abs(x - y) / std::max({std::abs(x), std::abs(y), floor}));
  }
  return worst;
}

/// Tiny model for gradient checks: D=8, two heads, one block, MVHS 2 x s x s
/// on a 4 x 4 patch (s = 4, or 2 to exercise the upsampling head).
inline RunConfig tiny_config(int mvhs_size = 4) {
  RunConfig rc;
  auto& c = rc.encoder;
  c.d_model = 8;
  c.n_layer = 1;
  c.n_head = 2;
  c.d_ffn = 16;
  c.d_lora = 4;
  c.d_decay_lora = 4;
  c.mvhs_heads = 2;
  c.mvhs_head_size = mvhs_size;
  c.n_out = 2;
  c.patch = 4;
  c.precision = Precision::kF64;
  auto& t = rc.train;
  t.seq_len = 16;
  t.chunk_len = 4;
  t.future_len = 8;
  t.stride = 16;
  t.batch_size = 2;
  t.head_width = 4;
  t.mrp_ec_windows_us = {3000};
  t.mrp_ts_tau_us = 4000;
  t.nrp_ec_horizons_us = {5000};
  return rc;
}

/// Sample of random patch-local events with strictly later futures.
inline io::Sample tiny_sample(Rng& rng, const RunConfig& rc) {
  const int P = rc.encoder.patch;
  auto ev = random_events(rng, rc.train.seq_len + rc.train.future_len, P, P, 1500, 0.1, 1000);
  io::Sample s;
  s.chunk_len = rc.train.chunk_len;
  s.input_events.assign(ev.begin(), ev.begin() + rc.train.seq_len);
  for (std::size_t i = rc.train.seq_len; i < ev.size(); ++i)
    if (ev[i].t > s.input_events.back().t) s.future_events.push_back(ev[i]);
  return s;
}

/// Model with every parameter away from its initial special values, and
/// non-zero log-variances.
inline train::Model tiny_model(const RunConfig& rc, std::uint64_t seed) {
  train::Model m = train::init_model(rc, seed);
  Rng rng(seed + 99);
  train::visit_model(
      [&](const std::string&, Matrix<double>& t) {
        for (Eigen::Index i = 0; i < t.size(); ++i) t.data()[i] += rng.uniform(-0.2, 0.2);
      },
      m);
  return m;
}

struct GradCheck {
  double max_rel = 0.0;
  std::string worst;
  std::size_t checked = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
};

/// Central differences of the batch total against the reverse-mode
/// gradient, entry by entry over every parameter.
inline GradCheck gradient_check(const train::Model& model, std::span<const io::Sample* const> batch, double eps,
                                double floor) {
  train::Model grads = train::zeros_like(model);
  train::loss_and_grad(model, batch, grads);
  train::Model probe = model;
  GradCheck out;
  train::visit_model(
      [&](const std::string& name, Matrix<double>& p, const Matrix<double>& g) {
        for (Eigen::Index i = 0; i < p.size(); ++i) {
          const double keep = p.data()[i];
          p.data()[i] = keep + eps;
          const double up = train::evaluate(probe, batch).total;
          p.data()[i] = keep - eps;
          const double down = train::evaluate(probe, batch).total;
          p.data()[i] = keep;
          const double numeric = (up - down) / (2.0 * eps);
          const double analytic = g.data()[i];
          const double rel = std::abs(numeric - analytic) / std::max({std::abs(numeric), std::abs(analytic), floor});
          ++out.checked;
          if (rel > out.max_rel) {
            out.max_rel = rel;
            out.worst = name + "[" + std::to_string(i) + "]";
            out.worst_analytic = analytic;
            out.worst_numeric = numeric;
          }
        }
      },
      probe, grads);
  return out;
}

}  // namespace eva::testing
