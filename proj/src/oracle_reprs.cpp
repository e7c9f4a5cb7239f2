#include "eva/oracle_reprs.hpp"

#include <algorithm>
#include <cmath>

#include "eva/common.hpp"

namespace eva::oracle {

void TargetSpec::validate() const {
  if (kind == TargetKind::kEventCount && window_us == 0 && role == TargetRole::kMrp)
    throw Error("target: EC window must be positive");
  if (kind == TargetKind::kTimeSurface && tau_us == 0) throw Error("target: TS tau must be positive");
  if (role == TargetRole::kNrp && horizon_us == 0) throw Error("target: NRP target needs a horizon");
}

std::string TargetSpec::name() const {
  std::string s = role == TargetRole::kMrp ? "mrp_" : "nrp_";
  s += kind == TargetKind::kEventCount ? "ec_" : "ts_";
  if (role == TargetRole::kNrp)
    s += std::to_string(horizon_us);
  else
    s += std::to_string(kind == TargetKind::kEventCount ? window_us : tau_us);
  return s;
}

std::vector<TargetSpec> targets_from_config(const TrainConfig& config) {
  std::vector<TargetSpec> out;
  for (auto w : config.mrp_ec_windows_us) {
    TargetSpec s;
    s.kind = TargetKind::kEventCount;
    s.role = TargetRole::kMrp;
    s.window_us = w;
    out.push_back(s);
  }
  {
    TargetSpec s;
    s.kind = TargetKind::kTimeSurface;
    s.role = TargetRole::kMrp;
    s.tau_us = config.mrp_ts_tau_us;
    out.push_back(s);
  }
  for (auto h : config.nrp_ec_horizons_us) {
    TargetSpec s;
    s.kind = TargetKind::kEventCount;
    s.role = TargetRole::kNrp;
    s.horizon_us = h;
    out.push_back(s);
  }
  for (const auto& s : out) s.validate();
  return out;
}

namespace {

void check_local(const io::Event& e, int patch) {
  if (e.x >= patch || e.y >= patch || e.p > 1) throw Error("event outside the patch");
}

}  // namespace

TargetImage event_count(std::span<const io::Event> events, std::uint64_t t_s, std::uint64_t t_e, int patch) {
  if (t_s > t_e) throw Error("event_count: t_s > t_e");
  TargetImage img(patch);
  img.t_ref = t_e;
  for (const auto& e : events) {
    check_local(e, patch);
    if (e.t >= t_s && e.t <= t_e) img.at(e.p, e.y, e.x) += 1.0;
  }
  return img;
}

TargetImage time_surface(std::span<const io::Event> events, std::uint64_t t_ref, double tau_us, int patch) {
  if (!(tau_us > 0.0)) throw Error("time_surface: tau must be positive");
  TargetImage img(patch);
  img.t_ref = t_ref;
  for (const auto& e : events) {
    check_local(e, patch);
    if (e.t > t_ref) throw Error("time_surface: event after t_ref");
    const double dt = -static_cast<double>(t_ref - e.t);
    const double v = std::exp(dt / tau_us);
    double& cell = img.at(e.p, e.y, e.x);
    cell = std::max(cell, v);
  }
  return img;
}

StreamingTimeSurface::StreamingTimeSurface(int patch)
    : patch_(patch), last_t_(2 * static_cast<std::size_t>(patch) * patch, 0), seen_(last_t_.size(), false) {}

void StreamingTimeSurface::update(const io::Event& e) {
  check_local(e, patch_);
  if (any_ && e.t < latest_) throw Error("StreamingTimeSurface: out-of-order event");
  const std::size_t i = (static_cast<std::size_t>(e.p) * patch_ + e.y) * patch_ + e.x;
  last_t_[i] = e.t;
  seen_[i] = true;
  latest_ = e.t;
  any_ = true;
}

TargetImage StreamingTimeSurface::read(std::uint64_t t_ref, double tau_us) const {
  if (!(tau_us > 0.0)) throw Error("time_surface: tau must be positive");
  if (any_ && t_ref < latest_) throw Error("StreamingTimeSurface: read before the latest event");
  TargetImage img(patch_);
  img.t_ref = t_ref;
  for (std::size_t i = 0; i < last_t_.size(); ++i) {
    if (seen_[i]) img.values[i] = std::exp(-static_cast<double>(t_ref - last_t_[i]) / tau_us);
  }
  return img;
}

StreamingEventCount::StreamingEventCount(int patch, std::uint64_t window_us)
    : patch_(patch), window_(window_us), counts_(2 * static_cast<std::size_t>(patch) * patch, 0.0) {}

void StreamingEventCount::update(const io::Event& e) {
  check_local(e, patch_);
  if (any_ && e.t < latest_) throw Error("StreamingEventCount: out-of-order event");
  fifo_.push_back(e);
  counts_[(static_cast<std::size_t>(e.p) * patch_ + e.y) * patch_ + e.x] += 1.0;
  latest_ = e.t;
  any_ = true;
}

TargetImage StreamingEventCount::read(std::uint64_t t_ref) {
  if (any_ && t_ref < latest_) throw Error("StreamingEventCount: read before the latest event");
  if (t_ref < last_read_) throw Error("StreamingEventCount: reads must be non-decreasing");
  last_read_ = t_ref;
  const std::uint64_t start = t_ref >= window_ ? t_ref - window_ : 0;
  while (!fifo_.empty() && fifo_.front().t < start) {
    const auto& e = fifo_.front();
    counts_[(static_cast<std::size_t>(e.p) * patch_ + e.y) * patch_ + e.x] -= 1.0;
    fifo_.pop_front();
  }
  TargetImage img(patch_);
  img.t_ref = t_ref;
  img.values = counts_;
  return img;
}

std::vector<std::uint8_t> quantize_repr(std::span<const double> values, double scale) {
  std::vector<std::uint8_t> out(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (!std::isfinite(values[i])) throw Error("quantize_repr: non-finite input");
    const double q = std::round(std::abs(values[i]) * scale);
    out[i] = static_cast<std::uint8_t>(std::min(255.0, q));
  }
  return out;
}

TargetImage compute_target(const TargetSpec& spec, std::span<const io::Event> input, std::size_t end,
                           std::span<const io::Event> future, int patch) {
  if (end == 0 || end > input.size()) throw Error("compute_target: chunk end out of range");
  const auto prefix = input.subspan(0, end);
  const std::uint64_t t_end = prefix.back().t;
  if (spec.role == TargetRole::kMrp) {
    if (spec.kind == TargetKind::kTimeSurface) return time_surface(prefix, t_end, static_cast<double>(spec.tau_us), patch);
    const std::uint64_t t_s = t_end >= spec.window_us ? t_end - spec.window_us : 0;
    return event_count(prefix, t_s, t_end, patch);
  }
  // NRP: events strictly after t_end up to t_end + horizon.
  const std::uint64_t t_stop = t_end + spec.horizon_us;
  TargetImage img(patch);
  img.t_ref = t_stop;
  auto absorb = [&](std::span<const io::Event> evs) {
    for (const auto& e : evs) {
      if (e.t <= t_end) continue;
      if (e.t > t_stop) return false;
      check_local(e, patch);
      if (spec.kind == TargetKind::kEventCount) {
        img.at(e.p, e.y, e.x) += 1.0;
      } else {
        img.at(e.p, e.y, e.x) = std::exp(-static_cast<double>(t_stop - e.t) / static_cast<double>(spec.tau_us));
      }
    }
    return true;
  };
  if (absorb(input.subspan(end))) absorb(future);
  return img;
}

}  // namespace eva::oracle
