#include "eva/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cstdlib>
#include <mutex>
#include <thread>

#include "eva/common.hpp"

namespace eva::pipe {

std::uint64_t FrameSnapshot::watermark() const {
  std::uint64_t w = 0;
  for (auto m : watermarks) w = std::max(w, m);
  return w;
}

SnapshotFile FrameSnapshot::to_file() const {
  SnapshotFile f;
  f.kind = SnapshotKind::kRepresentation;
  f.channels = channels;
  f.tile = tile;
  f.grid_rows = grid_rows;
  f.grid_cols = grid_cols;
  f.watermark = watermark();
  f.patch_watermarks = watermarks;
  f.values = values;
  return f;
}

namespace {

FrameSnapshot empty_frame(int channels, int tile, int rows, int cols) {
  FrameSnapshot f;
  f.channels = channels;
  f.tile = tile;
  f.grid_rows = rows;
  f.grid_cols = cols;
  f.values.assign(static_cast<std::size_t>(channels) * rows * tile * cols * tile, 0.0f);
  f.watermarks.assign(static_cast<std::size_t>(rows) * cols, 0);
  f.event_counts.assign(f.watermarks.size(), 0);
  return f;
}

void check_geometry(const io::SensorGeometry& g, const EncoderConfig& c) {
  g.validate();
  if (g.patch != c.patch)
    throw Error("geometry patch size " + std::to_string(g.patch) + " does not match the model's " +
                std::to_string(c.patch));
}

}  // namespace

void place_tile(FrameSnapshot& frame, int row, int col, const mvhs::Representation& rep) {
  if (rep.channels != frame.channels || rep.size != frame.tile) throw ShapeError("place_tile: tile shape mismatch");
  if (row < 0 || row >= frame.grid_rows || col < 0 || col >= frame.grid_cols) throw Error("place_tile: tile outside the grid");
  const int n = frame.tile;
  for (int c = 0; c < rep.channels; ++c)
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j)
        frame.values[(static_cast<std::size_t>(c) * frame.height() + row * n + i) * frame.width() + col * n + j] =
            static_cast<float>(rep.at(c, i, j));
}

struct PatchView {
  mvhs::Representation rep;
  std::uint64_t watermark = 0;
  std::uint64_t count = 0;
};

template <typename Real>
struct TypedEngine {
  struct Patch {
    mutable std::mutex mu;
    EncoderState<Real> state;
    std::uint64_t watermark = 0;
    std::uint64_t count = 0;
  };

  EncoderParams<Real> params;
  std::vector<std::unique_ptr<Patch>> patches;

  TypedEngine(EncoderParams<Real> p, int n) : params(std::move(p)) {
    for (int i = 0; i < n; ++i) {
      patches.push_back(std::make_unique<Patch>());
      patches.back()->state = EncoderState<Real>(params.config);
    }
  }

  bool ingest(int index, const io::Event& local) {
    Patch& p = *patches[index];
    std::lock_guard lock(p.mu);
    if (p.count > 0 && local.t < p.watermark) return false;
    encoder_step(params, p.state, local);
    p.watermark = local.t;
    ++p.count;
    return true;
  }

  PatchView read(int index, int channels) const {
    const Patch& p = *patches[index];
    HeadStates<Real> s;
    PatchView view;
    {
      std::lock_guard lock(p.mu);
      s = p.state.mvhs.s;
      view.watermark = p.watermark;
      view.count = p.count;
    }
    view.rep = mvhs::select_channels(s, channels);
    return view;
  }
};

struct Pipeline::Engine {
  std::unique_ptr<TypedEngine<float>> f32;
  std::unique_ptr<TypedEngine<double>> f64;
  std::atomic<std::uint64_t> events{0};
  std::atomic<std::uint64_t> rejected{0};

  template <typename Fn>
  decltype(auto) visit(Fn&& fn) const {
    return f32 ? fn(*f32) : fn(*f64);
  }
};

Pipeline::Pipeline(const io::SensorGeometry& geometry, const EncoderParams<double>& params, Precision precision)
    : geometry_(geometry), config_(params.config), precision_(precision), engine_(std::make_unique<Engine>()) {
  check_geometry(geometry_, config_);
  const int n = geometry_.num_patches();
  if (precision == Precision::kF32)
    engine_->f32 = std::make_unique<TypedEngine<float>>(cast_encoder<float>(params), n);
  else
    engine_->f64 = std::make_unique<TypedEngine<double>>(params, n);
}

Pipeline::~Pipeline() = default;

bool Pipeline::ingest(const io::Event& e) {
  if (!geometry_.contains(e)) throw Error("ingest: event outside the sensor");
  const int P = geometry_.patch;
  const int index = (e.y / P) * geometry_.grid_cols() + e.x / P;
  const io::Event local{e.t, static_cast<std::uint16_t>(e.x % P), static_cast<std::uint16_t>(e.y % P), e.p};
  const bool ok = engine_->visit([&](auto& eng) { return eng.ingest(index, local); });
  (ok ? engine_->events : engine_->rejected).fetch_add(1, std::memory_order_relaxed);
  return ok;
}

std::size_t Pipeline::ingest(std::span<const io::Event> events) {
  std::size_t accepted = 0;
  for (const auto& e : events) accepted += ingest(e) ? 1 : 0;
  return accepted;
}

FrameSnapshot Pipeline::snapshot() const {
  FrameSnapshot frame = empty_frame(config_.n_out, config_.mvhs_head_size, geometry_.grid_rows(), geometry_.grid_cols());
  for (int r = 0; r < frame.grid_rows; ++r)
    for (int c = 0; c < frame.grid_cols; ++c) {
      const int index = r * frame.grid_cols + c;
      const PatchView v = engine_->visit([&](const auto& eng) { return eng.read(index, frame.channels); });
      place_tile(frame, r, c, v.rep);
      frame.watermarks[index] = v.watermark;
      frame.event_counts[index] = v.count;
    }
  return frame;
}

FrameSnapshot Pipeline::snapshot_patch(io::PatchId id) const {
  if (id.row < 0 || id.row >= geometry_.grid_rows() || id.col < 0 || id.col >= geometry_.grid_cols())
    throw Error("unknown patch (" + std::to_string(id.row) + ", " + std::to_string(id.col) + ")");
  FrameSnapshot frame = empty_frame(config_.n_out, config_.mvhs_head_size, 1, 1);
  const int index = id.row * geometry_.grid_cols() + id.col;
  const PatchView v = engine_->visit([&](const auto& eng) { return eng.read(index, frame.channels); });
  place_tile(frame, 0, 0, v.rep);
  frame.watermarks[0] = v.watermark;
  frame.event_counts[0] = v.count;
  return frame;
}

PipelineStats Pipeline::stats() const {
  PipelineStats s;
  s.events = engine_->events.load();
  s.rejected = engine_->rejected.load();
  engine_->visit([&](const auto& eng) {
    for (const auto& p : eng.patches) {
      std::lock_guard lock(p->mu);
      if (p->count > 0) ++s.active_patches;
    }
    return 0;
  });
  return s;
}

std::vector<std::uint64_t> sample_times(std::span<const io::Event> events, std::uint64_t period_us) {
  if (period_us == 0) throw Error("sampling period must be positive");
  std::vector<std::uint64_t> out;
  if (events.empty()) return out;
  const std::uint64_t first = events.front().t, last = events.back().t;
  for (std::uint64_t t = first + period_us;; t += period_us) {
    out.push_back(t);
    if (t >= last) break;
  }
  return out;
}

namespace {

template <typename Real>
void encode_patches(const std::map<io::PatchId, io::PatchStream>& streams, const EncoderParams<Real>& params,
                    std::span<const std::uint64_t> times, const EncodeOptions& options, int grid_cols,
                    std::vector<FrameSnapshot>& frames) {
  std::vector<const io::PatchStream*> work;
  for (const auto& [id, s] : streams) work.push_back(&s);
  std::atomic<std::size_t> next{0};
  auto worker = [&]() {
    for (std::size_t i = next++; i < work.size(); i = next++) {
      const io::PatchStream& s = *work[i];
      std::vector<int> cps;
      for (auto t : times) {
        const auto it = std::upper_bound(s.events.begin(), s.events.end(), t,
                                         [](std::uint64_t v, const io::Event& e) { return v < e.t; });
        cps.push_back(static_cast<int>(it - s.events.begin()));
      }
      EncoderState<Real> state(params.config);
      const auto states = encode_events(params, state, std::span<const io::Event>(s.events), cps, options.mode);
      const int index = s.id.row * grid_cols + s.id.col;
      for (std::size_t k = 0; k < frames.size(); ++k) {
        place_tile(frames[k], s.id.row, s.id.col, mvhs::select_channels(states[k], frames[k].channels));
        frames[k].event_counts[index] = static_cast<std::uint64_t>(cps[k]);
        frames[k].watermarks[index] = cps[k] > 0 ? s.events[cps[k] - 1].t : 0;
      }
    }
  };
  const int n = std::max(1, std::min<int>(options.threads, static_cast<int>(work.size())));
  std::vector<std::thread> pool;
  for (int i = 1; i < n; ++i) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
}

}  // namespace

std::vector<FrameSnapshot> encode_offline(std::span<const io::Event> events, const io::SensorGeometry& geometry,
                                          const EncoderParams<double>& params, std::span<const std::uint64_t> times,
                                          const EncodeOptions& options) {
  const auto& c = params.config;
  check_geometry(geometry, c);
  for (std::size_t i = 1; i < times.size(); ++i)
    if (times[i] < times[i - 1]) throw Error("encode: sample times must be non-decreasing");
  for (std::size_t i = 1; i < events.size(); ++i)
    if (events[i].t < events[i - 1].t) throw Error("encode: events must be sorted by time");
  std::vector<FrameSnapshot> frames(times.size(),
                                    empty_frame(c.n_out, c.mvhs_head_size, geometry.grid_rows(), geometry.grid_cols()));
  const auto streams = io::partition_patches(events, geometry);
  if (options.precision == Precision::kF32)
    encode_patches(streams, cast_encoder<float>(params), times, options, geometry.grid_cols(), frames);
  else
    encode_patches(streams, params, times, options, geometry.grid_cols(), frames);
  return frames;
}

std::uint64_t fnv1a(std::span<const std::uint8_t> bytes) {
  std::uint64_t h = 1469598103934665603ULL;
  for (auto b : bytes) {
    h ^= b;
    h *= 1099511628211ULL;
  }
  return h;
}

BenchReport bench(std::span<const io::Event> events, const io::SensorGeometry& geometry,
                  const EncoderParams<double>& params, Precision precision) {
  Pipeline pipeline(geometry, params, precision);
  BenchReport r;
  r.events = events.size();
  std::vector<double> lat(events.size());
  using clock = std::chrono::steady_clock;
  const auto start = clock::now();
  for (std::size_t i = 0; i < events.size(); ++i) {
    const auto t0 = clock::now();
    pipeline.ingest(events[i]);
    lat[i] = std::chrono::duration<double, std::micro>(clock::now() - t0).count();
  }
  r.seconds = std::chrono::duration<double>(clock::now() - start).count();
  r.checksum = fnv1a(encode_snapshot(pipeline.snapshot().to_file()));
  if (events.empty()) return r;
  r.events_per_sec = static_cast<double>(events.size()) / r.seconds;
  double total = 0.0;
  for (double v : lat) total += v;
  r.mean_latency_us = total / static_cast<double>(lat.size());
  const std::size_t n = lat.size();
  for (int d = 0; d < 10; ++d) {
    const std::size_t a = n * d / 10, b = n * (d + 1) / 10;
    double s = 0.0;
    for (std::size_t i = a; i < b; ++i) s += lat[i];
    r.decile_mean_us.push_back(b > a ? s / static_cast<double>(b - a) : 0.0);
  }
  if (r.decile_mean_us.front() > 0.0) r.last_first_ratio = r.decile_mean_us.back() / r.decile_mean_us.front();
  std::vector<double> sorted = lat;
  const std::size_t k = std::min(n - 1, static_cast<std::size_t>(0.99 * static_cast<double>(n)));
  std::nth_element(sorted.begin(), sorted.begin() + static_cast<std::ptrdiff_t>(k), sorted.end());
  r.p99_latency_us = sorted[k];
  return r;
}

int env_threads() {
  const char* v = std::getenv("EVA_THREADS");
  if (!v || !*v) return 1;
  const int n = std::atoi(v);
  if (n < 1) throw Error("EVA_THREADS must be a positive integer");
  return n;
}

Precision env_precision(Precision fallback) {
  const char* v = std::getenv("EVA_PRECISION");
  if (!v || !*v) return fallback;
  return parse_precision(v);
}

}  // namespace eva::pipe
