// Acceptance gate: one PASS/FAIL line per criterion, exit status 1 on any
// failure.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <thread>

#include "eva/accounting.hpp"
#include "eva/checkpoint.hpp"
#include "eva/encoder.hpp"
#include "eva/oracle_reprs.hpp"
#include "eva/pipeline.hpp"
#include "eva/server.hpp"
#include "eva/snapshot_file.hpp"
#include "eva/ssl_train.hpp"
#include "eva/token_embed.hpp"
#include "eva/wire.hpp"
#include "helpers.hpp"

using namespace eva;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

double state_rel(const std::vector<double>& a, const std::vector<double>& b) {
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    num = std::max(num, std::abs(a[i] - b[i]));
    den = std::max(den, std::abs(b[i]));
  }
  return den == 0.0 ? num : num / den;
}

template <typename Real>
std::vector<double> flatten_state(const EncoderState<Real>& s) {
  std::vector<double> out;
  for (const auto& b : s.blocks) {
    out.insert(out.end(), b.s.data.begin(), b.s.data.end());
    out.insert(out.end(), b.tm_prev.data(), b.tm_prev.data() + b.tm_prev.size());
    out.insert(out.end(), b.cm_prev.data(), b.cm_prev.data() + b.cm_prev.size());
  }
  out.insert(out.end(), s.mvhs.s.data.begin(), s.mvhs.s.data.end());
  return out;
}

template <typename Real>
std::pair<double, double> mode_gap(const EncoderParams<Real>& p, std::span<const io::Event> ev) {
  EncoderState<Real> rec(p.config), par(p.config);
  const Matrix<Real> a = stack_forward(p, rec, ev, la::Mode::kRecurrent);
  const Matrix<Real> b = stack_forward(p, par, ev, la::Mode::kParallel);
  const std::vector<int> end{static_cast<int>(ev.size())};
  mvhs::mvhs_recurrent(a, p.mvhs, rec.mvhs, end);
  mvhs::mvhs_parallel(b, p.mvhs, par.mvhs, end);
  return {max_relative_deviation(b, a), state_rel(flatten_state(par), flatten_state(rec))};
}

Outcome mode_equivalence() {
  EncoderConfig c = EncoderConfig::small();
  c.n_layer = 3;
  double f64 = 0.0, f32 = 0.0;
  const int cases = 100;
  for (int i = 0; i < cases; ++i) {
    const auto p = testing::random_encoder(c, 1000 + i, 0.3);
    Rng rng(2000 + i);
    const auto ev = testing::random_events(rng, 256, c.patch, c.patch, 1 + rng.below(5000), 0.1);
    const auto [o64, s64] = mode_gap(p, ev);
    const auto [o32, s32] = mode_gap(cast_encoder<float>(p), ev);
    f64 = std::max({f64, o64, s64});
    f32 = std::max({f32, o32, s32});
  }
  return {f64 <= 1e-9 && f32 <= 1e-3,
          fmt("%d cases T=256 D=32 L=3; max rel f64 %.3g (<= 1e-9), f32 %.3g (<= 1e-3)", cases, f64, f32)};
}

Outcome mvhs_closed_form() {
  const EncoderConfig c = EncoderConfig::small();
  double worst = 0.0;
  int streams = 0;
  for (int T : {1, 2, 64, 100, 255, 512}) {
    const auto p = testing::random_encoder(c, 3000 + T, 0.3).mvhs;
    Rng rng(4000 + T);
    Matrix<double> x(T, c.d_model);
    for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = rng.uniform(-1, 1);
    mvhs::MvhsState<double> st(c.d_model, c.mvhs_heads, c.mvhs_head_size);
    const std::vector<int> end{T};
    const auto rec = mvhs::mvhs_recurrent(x, p, st, end)[0];
    const auto proj = mvhs::mvhs_project(x, la::token_shift(x, Matrix<double>(Matrix<double>::Zero(1, c.d_model))), p);
    const int n = c.mvhs_head_size;
    std::vector<double> brute(rec.data.size(), 0.0);
    for (int h = 0; h < c.mvhs_heads; ++h)
      for (int a = 0; a < n; ++a)
        for (int b = 0; b < n; ++b) {
          const int ia = h * n + a, ib = h * n + b;
          double acc = 0.0;
          for (int t = 0; t < T; ++t) {
            double decay = 1.0;
            for (int j = t + 1; j < T; ++j) decay *= proj.w(j, ia);
            acc += decay * proj.k(t, ia) * proj.v(t, ib);
          }
          brute[(static_cast<std::size_t>(h) * n + a) * n + b] = acc;
        }
    worst = std::max(worst, state_rel(rec.data, brute));
    ++streams;
  }
  return {worst <= 1e-9, fmt("%d streams, T up to 512; max rel %.3g (<= 1e-9)", streams, worst)};
}

Outcome oracle_equivalence() {
  int reads = 0, mismatches = 0, boundary = 0;
  for (std::uint64_t seed : {1, 2, 3}) {
    Rng rng(seed);
    // 2 us mean gap on 4x4 patches: many ties, many empty cells at reads.
    const auto ev = testing::random_events(rng, 10000, 4, 4, 4, 0.3);
    const std::uint64_t window = 60;
    const double tau = 80.0;
    oracle::StreamingTimeSurface ts(4);
    oracle::StreamingEventCount ec(4, window);
    for (std::size_t i = 0; i < ev.size(); ++i) {
      ts.update(ev[i]);
      ec.update(ev[i]);
      if (i + 1 < ev.size() && ev[i + 1].t == ev[i].t) continue;
      if (i % 5 != 0) continue;
      const std::uint64_t t_ref = ev[i].t;
      const std::span<const io::Event> seen(ev.data(), i + 1);
      const std::uint64_t t_s = t_ref >= window ? t_ref - window : 0;
      for (const auto& e : seen) boundary += e.t == t_s;
      if (ts.read(t_ref, tau).values != oracle::time_surface(seen, t_ref, tau, 4).values) ++mismatches;
      if (ec.read(t_ref).values != oracle::event_count(seen, t_s, t_ref, 4).values) ++mismatches;
      ++reads;
    }
  }
  oracle::StreamingTimeSurface empty_ts(4);
  oracle::StreamingEventCount empty_ec(4, 10);
  if (empty_ts.read(5, 10.0).values != oracle::time_surface({}, 5, 10.0, 4).values) ++mismatches;
  if (empty_ec.read(5).values != oracle::event_count({}, 0, 5, 4).values) ++mismatches;
  return {mismatches == 0 && boundary > 0,
          fmt("3 streams x 10k events, %d reads, %d boundary-tie events; %d mismatches", reads, boundary, mismatches)};
}

Outcome gradient_check() {
  const auto rc = testing::tiny_config(4);
  Rng rng(5);
  std::vector<io::Sample> s{testing::tiny_sample(rng, rc), testing::tiny_sample(rng, rc)};
  const std::vector<const io::Sample*> batch{&s[0], &s[1]};
  const auto model = testing::tiny_model(rc, 3);
  const auto r = testing::gradient_check(model, batch, 1e-5, 1e-8);
  return {r.max_rel <= 1e-4, fmt("%zu parameters, %zu targets; max rel %.3g at %s (<= 1e-4)", r.checked,
                                 model.targets.size(), r.max_rel, r.worst.c_str())};
}

Outcome tokenization() {
  std::set<int> seen;
  int bad = 0;
  for (int p = 0; p < 2; ++p)
    for (int y = 0; y < 16; ++y)
      for (int x = 0; x < 16; ++x) {
        const int t = embed::tok(x, y, p, 16, 16);
        if (t < 0 || t >= 512 || !(embed::untok(t, 16, 16) == embed::Coordinates{x, y, p})) ++bad;
        seen.insert(t);
      }
  const int spot = embed::tok(3, 2, 1, 16, 16);
  return {bad == 0 && seen.size() == 512 && spot == 291,
          fmt("%zu distinct tokens of 512, %d round-trip failures, (3,2,1) -> %d", seen.size(), bad, spot)};
}

Outcome structural_counts() {
  const auto c = EncoderConfig::dvs();
  const double params = static_cast<double>(acct::count_params(c));
  const double macs = static_cast<double>(acct::count_macs_per_event(c));
  const auto v = acct::vector_output_variant(c);
  const double ratio = static_cast<double>(acct::count_output_layer_params(v)) /
                       static_cast<double>(acct::count_output_layer_params(c));
  const double target = static_cast<double>(c.d_model) / c.mvhs_heads;
  const bool ok = std::abs(params - 0.62e6) <= 0.20 * 0.62e6 && std::abs(macs - 0.60e6) <= 0.25 * 0.60e6 &&
                  std::abs(ratio - target) <= 0.30 * target;
  return {ok, fmt("params %.0f (0.62M +-20%%), MACs/event %.0f (0.60M +-25%%), output-layer ratio %.2f (%.0f +-30%%)",
                  params, macs, ratio, target)};
}

Outcome ssl_convergence() {
  RunConfig rc;
  rc.encoder = EncoderConfig::small();
  rc.encoder.precision = Precision::kF64;
  rc.train.seq_len = 512;
  rc.train.chunk_len = 16;
  rc.train.lr = 1e-3;
  rc.train.max_steps = 500;
  rc.train.epochs = 1000;
  rc.train.seed = 0;
  const io::SensorGeometry g{16, 16, 16};
  const auto ev = io::synth_generate(io::SynthKind::kMovingBar, g, 4000000, 10000, 1);
  auto samples = train::build_samples(ev, g, rc.train);
  const std::vector<io::Sample> held_out(samples.end() - 8, samples.end());
  samples.resize(samples.size() - 8);
  const auto start = std::chrono::steady_clock::now();
  const auto model = train::init_model(rc, 1);
  const double before = train::evaluate(model, held_out).task[0];
  const auto a = train::pretrain(samples, model, rc.train);
  const double after = train::evaluate(a.model, held_out).task[0];
  const auto b = train::pretrain(samples, model, rc.train);
  bool same = a.step_losses.size() == b.step_losses.size();
  for (std::size_t i = 0; same && i < a.step_losses.size(); ++i)
    same = a.step_losses[i].total == b.step_losses[i].total && a.step_losses[i].task == b.step_losses[i].task;
  train::visit_model([&](const std::string&, const Matrix<double>& x, const Matrix<double>& y) { same = same && x == y; },
                     a.model, b.model);
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  const double ratio = after / before;
  return {ratio <= 0.5 && same && a.steps == 500,
          fmt("%ld steps on %zu samples; held-out MRP-EC %.4f -> %.4f (ratio %.3f <= 0.5); rerun %s; %.0f s for both runs",
              a.steps, samples.size(), before, after, ratio, same ? "bit-identical" : "DIFFERS", seconds)};
}

Outcome a2s_round_trip() {
  EncoderConfig c = EncoderConfig::small();
  c.precision = Precision::kF32;
  const auto params = testing::random_encoder(c, 77, 0.2);
  const io::SensorGeometry g{32, 32, 16};
  const auto raw = io::synth_generate(io::SynthKind::kMovingBar, g, 2000000, 50000, 8);
  std::vector<io::Event> cut(raw.begin(), raw.begin() + std::min<std::size_t>(100000, raw.size()));
  const auto path = (std::filesystem::temp_directory_path() / "eva_acceptance_events.eva").string();
  io::save_events_binary(path, cut, g);
  io::SensorGeometry loaded_g{0, 0, 16};
  const auto ev = io::load_events(path, loaded_g);
  std::remove(path.c_str());

  const std::vector<std::uint64_t> times{ev.back().t};
  pipe::EncodeOptions opt;
  opt.precision = Precision::kF32;
  const auto offline = pipe::encode_offline(ev, loaded_g, params, times, opt)[0].to_file();

  pipe::Pipeline pipeline(loaded_g, params, Precision::kF32);
  serve::Server server(pipeline);
  server.start();
  SnapshotFile live;
  {
    wire::Client client("127.0.0.1", server.port());
    for (std::size_t i = 0; i < ev.size(); i += 4096)
      client.ingest(std::span(ev).subspan(i, std::min<std::size_t>(4096, ev.size() - i)));
    live = client.snapshot();
  }
  server.stop();

  const auto live_bytes = encode_snapshot(live), offline_bytes = encode_snapshot(offline);
  const std::size_t header = live_bytes.size() - 4 * live.values.size();
  const bool headers = live_bytes.size() == offline_bytes.size() &&
                       std::equal(live_bytes.begin(), live_bytes.begin() + header, offline_bytes.begin());
  const double dev = max_relative_deviation(live.values, offline.values);
  std::vector<double> lv(live.values.begin(), live.values.end()), ov(offline.values.begin(), offline.values.end());
  const auto ql = oracle::quantize_repr(lv), qo = oracle::quantize_repr(ov);
  std::size_t qdiff = 0;
  for (std::size_t i = 0; i < ql.size(); ++i) qdiff += ql[i] != qo[i];

  const auto report = pipe::bench(ev, loaded_g, params, Precision::kF32);
  const double ratio = report.last_first_ratio;
  return {ev.size() == 100000 && headers && dev <= 1e-3 && ratio <= 2.0,
          fmt("%zu events; headers+watermarks %s; payload max rel %.3g (<= 1e-3), %zu/%zu quantized bytes differ; "
              "last/first decile latency %.2f (<= 2), %.0f ev/s",
              ev.size(), headers ? "identical" : "DIFFER", dev, qdiff, ql.size(), ratio, report.events_per_sec)};
}

Outcome hot_pixel_filter() {
  int mismatches = 0, trials = 0;
  Rng rng(9);
  for (; trials < 30; ++trials) {
    const auto ev = testing::random_events(rng, 4000, 3, 3, 30, 0.3);
    const std::uint64_t window = 10000;
    std::map<std::tuple<std::uint64_t, int, int>, int> count;
    for (const auto& e : ev) ++count[{(e.t - ev.front().t) / window, e.x, e.y}];
    std::vector<io::Event> expect;
    for (const auto& e : ev)
      if (count[{(e.t - ev.front().t) / window, e.x, e.y}] <= 40) expect.push_back(e);
    if (io::filter_hot_pixels(ev) != expect) ++mismatches;
  }
  std::vector<io::Event> edge;
  for (int i = 0; i < 41; ++i) {
    if (i < 40) edge.push_back({static_cast<std::uint64_t>(i) * 100, 1, 1, 0});
    edge.push_back({static_cast<std::uint64_t>(i) * 100, 2, 2, 1});
  }
  const auto kept = io::filter_hot_pixels(edge);
  bool edge_ok = kept.size() == 40;
  for (const auto& e : kept) edge_ok = edge_ok && e.x == 1;
  return {mismatches == 0 && edge_ok,
          fmt("%d randomized streams, %d mismatches; 40 events kept, 41 removed: %s", trials, mismatches,
              edge_ok ? "yes" : "no")};
}

Outcome format_round_trips() {
  std::vector<std::string> failed;
  Rng rng(10);
  const io::SensorGeometry g{48, 64, 16};
  const auto tmp = std::filesystem::temp_directory_path();

  const auto ev = testing::random_events(rng, 5000, g.width, g.height, 200000);
  {
    const auto path = (tmp / "eva_acceptance.csv").string();
    io::save_events_csv(path, ev);
    io::SensorGeometry lg = g;
    if (io::load_events(path, lg) != ev) failed.push_back("csv");
    std::remove(path.c_str());
  }
  {
    const auto path = (tmp / "eva_acceptance.eva").string();
    io::save_events_binary(path, ev, g);
    io::SensorGeometry lg{0, 0, 16};
    const auto back = io::load_events(path, lg);
    std::vector<io::Event> clamped;
    std::uint64_t t = 0;
    for (std::size_t i = 0; i < ev.size(); ++i) {
      if (i) t += std::min(ev[i].t - ev[i - 1].t, io::kMaxDelta);
      clamped.push_back({t, ev[i].x, ev[i].y, ev[i].p});
    }
    if (back != clamped || lg.height != g.height || lg.width != g.width) failed.push_back("binary");
    std::remove(path.c_str());
  }
  {
    RunConfig rc;
    rc.encoder = EncoderConfig::small();
    const auto c = ckpt::make_checkpoint(rc, testing::random_encoder(rc.encoder, 11));
    const auto path = (tmp / "eva_acceptance.evaw").string();
    ckpt::save(path, c);
    const auto back = ckpt::load(path);
    bool ok = back.metadata == c.metadata && back.tensors.size() == c.tensors.size();
    for (std::size_t i = 0; ok && i < c.tensors.size(); ++i)
      ok = back.tensors[i].name == c.tensors[i].name && back.tensors[i].dims == c.tensors[i].dims &&
           back.tensors[i].values == c.tensors[i].values;
    ok = ok && ckpt::read_encoder(back).config == rc.encoder;
    if (!ok) failed.push_back("EVAW");
    std::remove(path.c_str());
  }
  for (auto kind : {SnapshotKind::kEventCount, SnapshotKind::kTimeSurface, SnapshotKind::kQuantized,
                    SnapshotKind::kRepresentation}) {
    SnapshotFile s;
    s.kind = kind;
    s.channels = 2;
    s.tile = 8;
    s.grid_rows = 3;
    s.grid_cols = 2;
    for (int i = 0; i < 6; ++i) s.patch_watermarks.push_back(rng.below(1u << 31));
    s.watermark = *std::max_element(s.patch_watermarks.begin(), s.patch_watermarks.end());
    for (std::size_t i = 0; i < s.element_count(); ++i) {
      if (kind == SnapshotKind::kQuantized)
        s.quantized.push_back(static_cast<std::uint8_t>(rng.below(256)));
      else
        s.values.push_back(static_cast<float>(rng.uniform(-100, 100)));
    }
    const auto bytes = encode_snapshot(s);
    const auto d = decode_snapshot(bytes);
    if (encode_snapshot(d) != bytes || d.values != s.values || d.quantized != s.quantized ||
        d.patch_watermarks != s.patch_watermarks || d.kind != s.kind)
      failed.push_back("EVAR kind " + std::to_string(static_cast<int>(kind)));
  }
  std::string what = failed.empty() ? "none" : "";
  for (const auto& f : failed) what += (what.empty() ? "" : ", ") + f;
  return {failed.empty(), "csv, binary (16-bit gap clamp), EVAW, EVAR x4 kinds; failures: " + what};
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"mode equivalence", mode_equivalence},
      {"MVHS closed form", mvhs_closed_form},
      {"oracle equivalence", oracle_equivalence},
      {"gradient check", gradient_check},
      {"tokenization", tokenization},
      {"structural counts", structural_counts},
      {"SSL convergence", ssl_convergence},
      {"A2S round trip", a2s_round_trip},
      {"hot-pixel filter", hot_pixel_filter},
      {"format round trips", format_round_trips},
  };
  std::set<std::size_t> selected;
  for (int a = 1; a < argc; ++a) selected.insert(std::stoul(argv[a]));
  int failures = 0;
  std::size_t ran = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    if (!selected.empty() && !selected.count(i + 1)) continue;
    ++ran;
    const auto start = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    failures += o.pass ? 0 : 1;
    std::printf("%s [%zu] %s: %s (%.1f s)\n", o.pass ? "PASS" : "FAIL", i + 1, criteria[i].first.c_str(),
                o.detail.c_str(), s);
    std::fflush(stdout);
  }
  std::printf("%d/%zu criteria passed\n", static_cast<int>(ran) - failures, ran);
  return failures == 0 ? 0 : 1;
}
