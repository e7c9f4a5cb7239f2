#include <cmath>

#include "doctest.h"
#include "eva/oracle_reprs.hpp"
#include "helpers.hpp"

using namespace eva;
using io::Event;

namespace {

/// Per-cell recount with an explicit closed interval.
std::vector<double> recount(const std::vector<Event>& ev, std::uint64_t t_s, std::uint64_t t_e, int P) {
  std::vector<double> out(2 * P * P, 0.0);
  for (int p = 0; p < 2; ++p)
    for (int y = 0; y < P; ++y)
      for (int x = 0; x < P; ++x)
        for (const auto& e : ev)
          if (e.p == p && e.y == y && e.x == x && t_s <= e.t && e.t <= t_e) out[(p * P + y) * P + x] += 1.0;
  return out;
}

/// Brute-force maximum over every event of each cell.
std::vector<double> max_surface(const std::vector<Event>& ev, std::uint64_t t_ref, double tau, int P) {
  std::vector<double> out(2 * P * P, 0.0);
  for (const auto& e : ev) {
    double& c = out[(e.p * P + e.y) * P + e.x];
    c = std::max(c, std::exp(-static_cast<double>(t_ref - e.t) / tau));
  }
  return out;
}

}  // namespace

TEST_SUITE("oracle_reprs") {
  TEST_CASE("event count over a closed window") {
    const std::vector<Event> ev{{10, 1, 1, 0}, {20, 1, 1, 0}, {150, 1, 1, 0}};
    const auto img = oracle::event_count(ev, 0, 100, 4);
    CHECK(img.at(0, 1, 1) == 2.0);
    double total = 0.0;
    for (double v : img.values) total += v;
    CHECK(total == 2.0);
    CHECK(oracle::event_count({}, 0, 10, 4).values == std::vector<double>(32, 0.0));
    CHECK(oracle::event_count(ev, 20, 150, 4).at(0, 1, 1) == 2.0);
  }

  TEST_CASE("event count matches recount and is additive") {
    Rng rng(1);
    for (int trial = 0; trial < 10; ++trial) {
      const auto ev = testing::random_events(rng, 1000, 4, 4, 50, 0.3);
      const std::uint64_t a = ev[100].t, b = ev[500].t, c = ev[900].t;
      const auto whole = oracle::event_count(ev, a, c, 4);
      CHECK(whole.values == recount(ev, a, c, 4));
      const auto left = oracle::event_count(ev, a, b, 4);
      const auto right = oracle::event_count(ev, b + 1, c, 4);
      for (std::size_t i = 0; i < whole.values.size(); ++i) CHECK(left.values[i] + right.values[i] == whole.values[i]);
    }
  }

  TEST_CASE("time surface analytic values") {
    const std::vector<Event> ev{{0, 0, 0, 0}, {900, 1, 2, 1}, {1000, 3, 3, 0}};
    const auto img = oracle::time_surface(ev, 1000, 1000.0, 4);
    CHECK(img.at(0, 3, 3) == 1.0);
    CHECK(img.at(0, 0, 0) == doctest::Approx(0.367879441171).epsilon(1e-12));
    CHECK(img.at(1, 2, 1) == doctest::Approx(std::exp(-0.1)));
    CHECK(img.at(1, 0, 0) == 0.0);
    CHECK_THROWS_AS(oracle::time_surface(ev, 999, 1000.0, 4), Error);
  }

  TEST_CASE("time surface equals its brute-force maximum and stays in [0, 1]") {
    Rng rng(2);
    const auto ev = testing::random_events(rng, 2000, 4, 4, 300, 0.2);
    const auto img = oracle::time_surface(ev, ev.back().t + 50, 5000.0, 4);
    CHECK(img.values == max_surface(ev, ev.back().t + 50, 5000.0, 4));
    const auto later = oracle::time_surface(ev, ev.back().t + 5000, 5000.0, 4);
    for (std::size_t i = 0; i < img.values.size(); ++i) {
      CHECK((img.values[i] >= 0.0 && img.values[i] <= 1.0));
      CHECK(later.values[i] <= img.values[i]);
    }
  }

  TEST_CASE("streaming time surface: later event wins") {
    oracle::StreamingTimeSurface ts(4);
    ts.update({100, 2, 2, 1});
    CHECK(ts.read(100, 50.0).at(1, 2, 2) == 1.0);
    ts.update({200, 2, 2, 1});
    CHECK(ts.read(250, 50.0).at(1, 2, 2) == std::exp(-1.0));
    CHECK_THROWS_AS(ts.update({150, 0, 0, 0}), Error);
  }

  TEST_CASE("streaming event count window edges") {
    oracle::StreamingEventCount ec(4, 100);
    ec.update({10, 0, 0, 0});
    ec.update({20, 0, 0, 0});
    ec.update({30, 1, 0, 1});
    CHECK(ec.read(110).at(0, 0, 0) == 2.0);
    CHECK(ec.read(120).at(0, 0, 0) == 1.0);
    CHECK(ec.read(130).at(1, 0, 1) == 1.0);
    CHECK(ec.read(131).values == std::vector<double>(32, 0.0));
    CHECK(ec.buffered() == 0);
    CHECK_THROWS_AS(ec.read(100), Error);
  }

  TEST_CASE("streaming oracles equal batch oracles bit for bit") {
    Rng rng(3);
    for (int trial = 0; trial < 3; ++trial) {
      // Gaps of 1..4 us against a 60 us window put events on the window's
      // lower edge at most reads.
      const auto ev = testing::random_events(rng, 10000, 4, 4, 4, 0.3);
      const std::uint64_t window = 60;
      const double tau = 80.0;
      oracle::StreamingTimeSurface ts(4);
      oracle::StreamingEventCount ec(4, window);
      int boundary_hits = 0;
      for (std::size_t i = 0; i < ev.size(); ++i) {
        ts.update(ev[i]);
        ec.update(ev[i]);
        if (i + 1 < ev.size() && ev[i + 1].t == ev[i].t) continue;
        if (i % 7 != 0) continue;
        const std::uint64_t gap = i + 1 < ev.size() ? ev[i + 1].t - ev[i].t : 1;
        const std::uint64_t t_ref = ev[i].t + (i % 2 ? gap - 1 : 0);
        const std::span<const Event> seen(ev.data(), i + 1);
        CHECK(ts.read(t_ref, tau).values == oracle::time_surface(seen, t_ref, tau, 4).values);
        const std::uint64_t t_s = t_ref >= window ? t_ref - window : 0;
        for (const auto& e : seen) boundary_hits += e.t == t_s;
        CHECK(ec.read(t_ref).values == oracle::event_count(seen, t_s, t_ref, 4).values);
      }
      CHECK(boundary_hits > 100);
    }
  }

  TEST_CASE("empty pixels read as zero in both oracles") {
    oracle::StreamingTimeSurface ts(4);
    oracle::StreamingEventCount ec(4, 10);
    CHECK(ts.read(5, 10.0).values == std::vector<double>(32, 0.0));
    CHECK(ec.read(5).values == std::vector<double>(32, 0.0));
    ts.update({7, 1, 1, 1});
    const auto img = ts.read(7, 10.0);
    for (std::size_t i = 0; i < img.values.size(); ++i) CHECK(img.values[i] == (i == img.index(1, 1, 1) ? 1.0 : 0.0));
  }

  TEST_CASE("quantization rounds half away from zero and saturates") {
    const std::vector<double> v{16.0, -20.0, 10000.0, 0.0, 3.9, -4.0};
    CHECK(oracle::quantize_repr(v) == std::vector<std::uint8_t>{2, 3, 255, 0, 0, 1});
    const std::vector<double> bad{std::nan("")};
    CHECK_THROWS_AS(oracle::quantize_repr(bad), Error);
  }

  TEST_CASE("targets follow the configured order and names") {
    TrainConfig cfg;
    cfg.mrp_ec_windows_us = {50000, 100000};
    cfg.nrp_ec_horizons_us = {20000};
    const auto t = oracle::targets_from_config(cfg);
    REQUIRE(t.size() == 4);
    CHECK(t[0].name() == "mrp_ec_50000");
    CHECK(t[1].name() == "mrp_ec_100000");
    CHECK(t[2].name() == "mrp_ts_100000");
    CHECK(t[3].name() == "nrp_ec_20000");
    cfg.nrp_ec_horizons_us = {0};
    CHECK_THROWS_AS(oracle::targets_from_config(cfg), Error);
  }

  TEST_CASE("chunk targets look back for MRP and ahead for NRP") {
    const std::vector<Event> input{{0, 0, 0, 0}, {50, 1, 0, 0}, {100, 1, 0, 0}, {100, 2, 0, 0}, {180, 3, 0, 0}};
    const std::vector<Event> future{{240, 3, 3, 1}, {400, 0, 0, 0}};
    oracle::TargetSpec mrp;
    mrp.window_us = 60;
    const auto m = oracle::compute_target(mrp, input, 3, future, 4);
    CHECK(m.at(0, 0, 1) == 2.0);
    CHECK(m.at(0, 0, 0) == 0.0);
    oracle::TargetSpec nrp;
    nrp.role = oracle::TargetRole::kNrp;
    nrp.horizon_us = 150;
    const auto n = oracle::compute_target(nrp, input, 3, future, 4);
    CHECK(n.at(0, 0, 2) == 0.0);
    CHECK(n.at(0, 0, 3) == 1.0);
    CHECK(n.at(1, 3, 3) == 1.0);
    CHECK(n.at(0, 0, 0) == 0.0);
    oracle::TargetSpec ts;
    ts.kind = oracle::TargetKind::kTimeSurface;
    ts.tau_us = 100;
    const auto s = oracle::compute_target(ts, input, 5, future, 4);
    CHECK(s.at(0, 0, 3) == 1.0);
    CHECK(s.at(0, 0, 1) == std::exp(-0.8));
    CHECK_THROWS_AS(oracle::compute_target(mrp, input, 0, future, 4), Error);
  }
}
