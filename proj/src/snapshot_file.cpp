#include "eva/snapshot_file.hpp"

#include "eva/common.hpp"

namespace eva {

std::vector<std::uint8_t> encode_snapshot(const SnapshotFile& s) {
  if (s.patch_watermarks.size() != static_cast<std::size_t>(s.grid_rows) * s.grid_cols)
    throw FormatError("snapshot: one watermark per patch required");
  const bool quantized = s.kind == SnapshotKind::kQuantized;
  if ((quantized ? s.quantized.size() : s.values.size()) != s.element_count())
    throw FormatError("snapshot: payload size does not match header");
  ByteWriter w;
  w.text("EVAR");
  w.u8(static_cast<std::uint8_t>(s.kind));
  w.u16(static_cast<std::uint16_t>(s.channels));
  w.u16(static_cast<std::uint16_t>(s.tile));
  w.u16(static_cast<std::uint16_t>(s.grid_rows));
  w.u16(static_cast<std::uint16_t>(s.grid_cols));
  w.u64(s.watermark);
  for (auto m : s.patch_watermarks) w.u64(m);
  if (quantized)
    w.bytes(s.quantized);
  else
    for (float v : s.values) w.f32(v);
  return w.take();
}

SnapshotFile decode_snapshot(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  r.expect_magic("EVAR");
  SnapshotFile s;
  const std::uint8_t kind = r.u8();
  if (kind > 3) throw FormatError("snapshot: unknown kind tag " + std::to_string(kind));
  s.kind = static_cast<SnapshotKind>(kind);
  s.channels = r.u16();
  s.tile = r.u16();
  s.grid_rows = r.u16();
  s.grid_cols = r.u16();
  s.watermark = r.u64();
  s.patch_watermarks.resize(static_cast<std::size_t>(s.grid_rows) * s.grid_cols);
  for (auto& m : s.patch_watermarks) m = r.u64();
  const std::size_t n = s.element_count();
  if (s.kind == SnapshotKind::kQuantized) {
    auto b = r.bytes(n);
    s.quantized.assign(b.begin(), b.end());
  } else {
    if (r.remaining() < n * 4) throw FormatError("snapshot: truncated payload");
    s.values.resize(n);
    for (auto& v : s.values) v = r.f32();
  }
  if (r.remaining() != 0) throw FormatError("snapshot: trailing bytes");
  return s;
}

}  // namespace eva
