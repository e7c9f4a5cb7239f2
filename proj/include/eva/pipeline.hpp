#pragma once

#include <atomic>
#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "eva/encoder.hpp"
#include "eva/event_io.hpp"
#include "eva/snapshot_file.hpp"

namespace eva::pipe {

/// Tiled representation: channels x (grid_rows*tile) x (grid_cols*tile),
/// channel-major, plus each patch's last absorbed timestamp.
struct FrameSnapshot {
  int channels = 0;
  int tile = 0;
  int grid_rows = 0;
  int grid_cols = 0;
  std::vector<float> values;
  std::vector<std::uint64_t> watermarks;    // row-major over the patch grid
  std::vector<std::uint64_t> event_counts;  // events absorbed per patch

  int height() const { return grid_rows * tile; }
  int width() const { return grid_cols * tile; }
  float at(int c, int y, int x) const {
    return values[(static_cast<std::size_t>(c) * height() + y) * width() + x];
  }
  std::uint64_t watermark() const;
  SnapshotFile to_file() const;
};

/// Copies a patch representation into tile (row, col) of `frame`.
void place_tile(FrameSnapshot& frame, int row, int col, const mvhs::Representation& rep);

struct PipelineStats {
  std::uint64_t events = 0;
  std::uint64_t rejected = 0;
  int active_patches = 0;
};

/// Event-by-event encoder over a patch grid. Each patch owns its recurrent
/// state behind its own lock, so ingestion into different patches proceeds
/// in parallel and a snapshot waits at most one event update per patch.
class Pipeline {
 public:
  Pipeline(const io::SensorGeometry& geometry, const EncoderParams<double>& params, Precision precision);
  ~Pipeline();
  Pipeline(const Pipeline&) = delete;
  Pipeline& operator=(const Pipeline&) = delete;

  /// Routes a sensor-coordinate event to its patch. Returns false, and
  /// counts the rejection, when it is older than that patch's watermark.
  bool ingest(const io::Event& e);
  /// Returns the number of accepted events.
  std::size_t ingest(std::span<const io::Event> events);

  FrameSnapshot snapshot() const;
  /// One-tile frame. Throws eva::Error for a patch outside the grid.
  FrameSnapshot snapshot_patch(io::PatchId id) const;

  PipelineStats stats() const;
  const io::SensorGeometry& geometry() const { return geometry_; }
  const EncoderConfig& config() const { return config_; }
  Precision precision() const { return precision_; }

 private:
  struct Engine;
  io::SensorGeometry geometry_;
  EncoderConfig config_;
  Precision precision_;
  std::unique_ptr<Engine> engine_;
};

struct EncodeOptions {
  std::uint64_t period_us = 10000;
  Precision precision = Precision::kF32;
  la::Mode mode = la::Mode::kParallel;
  int threads = 1;
};

/// Frame times t_first + k*period, k = 1.. until the last event is covered.
std::vector<std::uint64_t> sample_times(std::span<const io::Event> events, std::uint64_t period_us);

/// Batch encoding of a whole stream: one frame per entry of `times`, each
/// absorbing every event with t <= time. Patches are encoded independently,
/// across `threads` workers.
std::vector<FrameSnapshot> encode_offline(std::span<const io::Event> events, const io::SensorGeometry& geometry,
                                          const EncoderParams<double>& params, std::span<const std::uint64_t> times,
                                          const EncodeOptions& options);

struct BenchReport {
  std::uint64_t events = 0;
  double seconds = 0.0;
  double events_per_sec = 0.0;
  double mean_latency_us = 0.0;
  double p99_latency_us = 0.0;
  std::vector<double> decile_mean_us;  // amortized latency per tenth of the stream
  double last_first_ratio = 0.0;       // last decile over first decile
  std::uint64_t checksum = 0;          // FNV-1a of the final snapshot payload
};

/// Ingests `events` one by one, timing each update.
BenchReport bench(std::span<const io::Event> events, const io::SensorGeometry& geometry,
                  const EncoderParams<double>& params, Precision precision);

std::uint64_t fnv1a(std::span<const std::uint8_t> bytes);

/// Worker count from EVA_THREADS (default 1) and precision from
/// EVA_PRECISION (default `fallback`).
int env_threads();
Precision env_precision(Precision fallback);

}  // namespace eva::pipe
