#pragma once

#include <compare>
#include <cstdint>
#include <iosfwd>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "eva/common.hpp"

namespace eva::io {

struct Event {
  std::uint64_t t = 0;  // microseconds
  std::uint16_t x = 0;
  std::uint16_t y = 0;
  std::uint8_t p = 0;

  friend bool operator==(const Event&, const Event&) = default;
};

struct SensorGeometry {
  int height = 0;
  int width = 0;
  int patch = 16;

  int grid_rows() const { return (height + patch - 1) / patch; }
  int grid_cols() const { return (width + patch - 1) / patch; }
  int num_patches() const { return grid_rows() * grid_cols(); }

  /// Throws eva::Error when the geometry has no area or a non-positive patch.
  void validate() const;
  bool contains(const Event& e) const { return e.x < width && e.y < height && e.p <= 1; }
};

struct PatchId {
  int row = 0;
  int col = 0;

  friend auto operator<=>(const PatchId&, const PatchId&) = default;
};

/// Events of one P x P tile, coordinates re-based to [0, P).
struct PatchStream {
  PatchId id;
  std::vector<Event> events;
};

struct Sample {
  std::vector<Event> input_events;
  std::vector<Event> future_events;
  int chunk_len = 1;
};

// ---- CSV ------------------------------------------------------------------

/// Parses `t,x,y,p` lines. A first line whose first field is not numeric is
/// treated as a header. Throws ParseError with the 1-based line number.
std::vector<Event> parse_csv(std::istream& in, const SensorGeometry& geometry);
void write_csv(std::ostream& out, std::span<const Event> events);

// ---- packed u16 records ---------------------------------------------------

inline constexpr std::size_t kRecordBytes = 8;
inline constexpr std::uint64_t kMaxDelta = 65535;

/// Encodes (dt, x, y, p) as four little-endian u16 per event. The first dt is
/// measured against `prev_t` when given, and is 0 otherwise. dt saturates at
/// 65535.
std::vector<std::uint8_t> pack_binary(std::span<const Event> events);
std::vector<std::uint8_t> pack_binary(std::span<const Event> events, std::uint64_t prev_t);

/// Inverse of pack_binary: absolute timestamps are the prefix sum of dt
/// starting from 0.
std::vector<Event> unpack_binary(std::span<const std::uint8_t> bytes, const SensorGeometry& geometry);

/// Incremental decoder that carries the timestamp cursor across buffers.
class RecordDecoder {
 public:
  explicit RecordDecoder(SensorGeometry geometry, std::uint64_t base_t = 0)
      : geometry_(geometry), cursor_(base_t) {}

  /// Appends decoded events to `out`. Throws FormatError on a length that is
  /// not a multiple of 8 or coordinates outside the geometry.
  void decode(std::span<const std::uint8_t> bytes, std::vector<Event>& out);
  std::uint64_t cursor() const { return cursor_; }

 private:
  SensorGeometry geometry_;
  std::uint64_t cursor_;
};

// ---- event files ----------------------------------------------------------

/// `EVA1` magic, H and W as u16, then packed records.
std::vector<std::uint8_t> encode_event_file(std::span<const Event> events, const SensorGeometry& geometry);
std::vector<Event> decode_event_file(std::span<const std::uint8_t> bytes, SensorGeometry* geometry_out = nullptr);

/// Loads a binary (`EVA1`) or CSV event file, choosing by content. For binary
/// files the embedded geometry replaces height/width of `geometry`.
std::vector<Event> load_events(const std::string& path, SensorGeometry& geometry);
void save_events_csv(const std::string& path, std::span<const Event> events);
void save_events_binary(const std::string& path, std::span<const Event> events, const SensorGeometry& geometry);

// ---- preprocessing ----------------------------------------------------------

/// Drops every event of a pixel whose pooled (both polarities) count inside a
/// window exceeds `threshold`. Windows have length `window_us` and start at
/// the first event's timestamp.
std::vector<Event> filter_hot_pixels(std::span<const Event> events, std::uint64_t window_us = 10000,
                                     int threshold = 40);

std::map<PatchId, PatchStream> partition_patches(std::span<const Event> events, const SensorGeometry& geometry);

/// Maps patch-local coordinates back to sensor coordinates.
std::vector<Event> globalize(const PatchStream& stream, const SensorGeometry& geometry);

/// Sliding windows of `seq_len + future_len` events at `stride`. Future events
/// sharing the last input timestamp are dropped so that every future event is
/// strictly later than the input.
std::vector<Sample> slice_samples(const PatchStream& stream, int seq_len, int stride, int future_len,
                                  int chunk_len);

// ---- synthetic streams ------------------------------------------------------

enum class SynthKind { kUniformNoise, kMovingBar, kMovingDot };

SynthKind parse_synth_kind(std::string_view name);
std::string_view to_string(SynthKind kind);

struct SynthOptions {
  double speed_px_per_s = 0.0;  // 0 picks a default of one sensor width per 250 ms
  int bar_width = 0;            // 0 picks max(2, width / 8)
  int dot_radius = 0;           // 0 picks max(2, min(H, W) / 8)
  double noise_fraction = 0.02;
};

/// Deterministic for a fixed seed. `rate` is the mean event rate in events/s
/// (Poisson arrivals).
std::vector<Event> synth_generate(SynthKind kind, const SensorGeometry& geometry, std::uint64_t duration_us,
                                  double rate, std::uint64_t seed, const SynthOptions& options = {});

}  // namespace eva::io
