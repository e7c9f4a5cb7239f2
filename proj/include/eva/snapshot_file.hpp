#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace eva {

/// Payload tag of an `EVAR` container.
enum class SnapshotKind : std::uint8_t {
  kEventCount = 0,      // EC target, f32
  kTimeSurface = 1,     // TS target, f32
  kQuantized = 2,       // any payload after 1/8 uint8 quantization
  kRepresentation = 3,  // MVHS representation, f32
};

/// Tiled frame: channels x (grid_rows * tile) x (grid_cols * tile).
///
/// Layout on disk (little-endian): "EVAR", kind u8, channels u16, tile u16,
/// grid_rows u16, grid_cols u16, watermark u64, grid_rows*grid_cols per-patch
/// watermarks u64 (row-major), then the payload in channel-major order, f32
/// or u8 for kQuantized.
struct SnapshotFile {
  SnapshotKind kind = SnapshotKind::kRepresentation;
  int channels = 0;
  int tile = 0;
  int grid_rows = 0;
  int grid_cols = 0;
  std::uint64_t watermark = 0;
  std::vector<std::uint64_t> patch_watermarks;
  std::vector<float> values;           // f32 kinds
  std::vector<std::uint8_t> quantized;  // kQuantized

  int height() const { return grid_rows * tile; }
  int width() const { return grid_cols * tile; }
  std::size_t element_count() const {
    return static_cast<std::size_t>(channels) * height() * width();
  }
};

std::vector<std::uint8_t> encode_snapshot(const SnapshotFile& s);
SnapshotFile decode_snapshot(std::span<const std::uint8_t> bytes);

}  // namespace eva
