#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "eva/event_io.hpp"
#include "eva/snapshot_file.hpp"

namespace eva::wire {

enum class Opcode : std::uint8_t {
  kIngest = 0x01,
  kSnapshot = 0x02,
  kStats = 0x03,
  kError = 0x7F,
};

inline constexpr std::size_t kHeaderBytes = 5;
inline constexpr std::uint32_t kMaxPayload = 64u << 20;

struct Frame {
  Opcode op = Opcode::kError;
  std::vector<std::uint8_t> payload;
};

/// opcode u8, payload length u32 LE, payload.
std::vector<std::uint8_t> encode_frame(const Frame& f);

/// Incremental frame splitter for a byte stream.
class FrameParser {
 public:
  void feed(std::span<const std::uint8_t> bytes);
  /// Next complete frame, if any. Throws FormatError on an unknown opcode or
  /// an oversized payload.
  std::optional<Frame> next();
  std::size_t buffered() const { return buffer_.size() - offset_; }

 private:
  std::vector<std::uint8_t> buffer_;
  std::size_t offset_ = 0;
};

/// SNAPSHOT payload selecting one patch: row u16, col u16.
std::vector<std::uint8_t> patch_request(int row, int col);

std::string format_stats(const std::map<std::string, std::string>& stats);
std::map<std::string, std::string> parse_stats(std::string_view text);

// ---- sockets ------------------------------------------------------------------

/// Blocking helpers over a connected stream socket. read_exact returns false
/// on a clean end of stream before the first byte.
bool read_exact(int fd, std::uint8_t* dst, std::size_t n);
void write_all(int fd, std::span<const std::uint8_t> bytes);
/// Reads one frame; nullopt on end of stream.
std::optional<Frame> read_frame(int fd);
void write_frame(int fd, const Frame& f);

/// TCP client for the streaming server. Records carry intervals, so the
/// server's clock starts at 0 on the connection's first event and each later
/// batch continues from the previous batch's last event.
class Client {
 public:
  Client(const std::string& host, int port);
  ~Client();
  Client(const Client&) = delete;
  Client& operator=(const Client&) = delete;

  void ingest(std::span<const io::Event> events);
  SnapshotFile snapshot();
  SnapshotFile snapshot_patch(int row, int col);
  std::map<std::string, std::string> stats();
  /// Sends a raw frame and returns the reply, for protocol tests.
  std::optional<Frame> request(const Frame& f);
  void send(const Frame& f);

 private:
  Frame expect(Opcode op);
  int fd_ = -1;
  std::uint64_t last_t_ = 0;
  bool started_ = false;
};

}  // namespace eva::wire
