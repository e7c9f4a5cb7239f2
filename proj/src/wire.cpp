#include "eva/wire.hpp"

#include <arpa/inet.h>
#include <netdb.h>
#include <sys/socket.h>
#include <unistd.h>

#include <cerrno>
#include <cstring>
#include <sstream>

#include "eva/common.hpp"

namespace eva::wire {

namespace {

bool known_opcode(std::uint8_t op) {
  return op == 0x01 || op == 0x02 || op == 0x03 || op == 0x7F;
}

}  // namespace

std::vector<std::uint8_t> encode_frame(const Frame& f) {
  if (f.payload.size() > kMaxPayload) throw FormatError("frame payload too large");
  ByteWriter w;
  w.u8(static_cast<std::uint8_t>(f.op));
  w.u32(static_cast<std::uint32_t>(f.payload.size()));
  w.bytes(f.payload);
  return w.take();
}

void FrameParser::feed(std::span<const std::uint8_t> bytes) {
  if (offset_ > 0 && offset_ == buffer_.size()) {
    buffer_.clear();
    offset_ = 0;
  }
  buffer_.insert(buffer_.end(), bytes.begin(), bytes.end());
}

std::optional<Frame> FrameParser::next() {
  if (buffered() < kHeaderBytes) return std::nullopt;
  const std::uint8_t* h = buffer_.data() + offset_;
  if (!known_opcode(h[0])) throw FormatError("unknown opcode " + std::to_string(h[0]));
  const std::uint32_t len = static_cast<std::uint32_t>(h[1]) | static_cast<std::uint32_t>(h[2]) << 8 |
                            static_cast<std::uint32_t>(h[3]) << 16 | static_cast<std::uint32_t>(h[4]) << 24;
  if (len > kMaxPayload) throw FormatError("frame payload too large");
  if (buffered() < kHeaderBytes + len) return std::nullopt;
  Frame f;
  f.op = static_cast<Opcode>(h[0]);
  f.payload.assign(h + kHeaderBytes, h + kHeaderBytes + len);
  offset_ += kHeaderBytes + len;
  return f;
}

std::vector<std::uint8_t> patch_request(int row, int col) {
  ByteWriter w;
  w.u16(static_cast<std::uint16_t>(row));
  w.u16(static_cast<std::uint16_t>(col));
  return w.take();
}

std::string format_stats(const std::map<std::string, std::string>& stats) {
  std::string out;
  for (const auto& [k, v] : stats) out += k + "=" + v + "\n";
  return out;
}

std::map<std::string, std::string> parse_stats(std::string_view text) {
  std::map<std::string, std::string> out;
  std::istringstream in{std::string(text)};
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ParseError(0, "stats line without '='");
    out[line.substr(0, eq)] = line.substr(eq + 1);
  }
  return out;
}

bool read_exact(int fd, std::uint8_t* dst, std::size_t n) {
  std::size_t got = 0;
  while (got < n) {
    const ssize_t r = ::recv(fd, dst + got, n - got, 0);
    if (r == 0) {
      if (got == 0) return false;
      throw Error("connection closed mid-frame");
    }
    if (r < 0) {
      if (errno == EINTR) continue;
      throw Error(std::string("recv: ") + std::strerror(errno));
    }
    got += static_cast<std::size_t>(r);
  }
  return true;
}

void write_all(int fd, std::span<const std::uint8_t> bytes) {
  std::size_t sent = 0;
  while (sent < bytes.size()) {
    const ssize_t r = ::send(fd, bytes.data() + sent, bytes.size() - sent, MSG_NOSIGNAL);
    if (r < 0) {
      if (errno == EINTR) continue;
      throw Error(std::string("send: ") + std::strerror(errno));
    }
    sent += static_cast<std::size_t>(r);
  }
}

std::optional<Frame> read_frame(int fd) {
  std::uint8_t h[kHeaderBytes];
  if (!read_exact(fd, h, kHeaderBytes)) return std::nullopt;
  if (!known_opcode(h[0])) throw FormatError("unknown opcode " + std::to_string(h[0]));
  const std::uint32_t len = static_cast<std::uint32_t>(h[1]) | static_cast<std::uint32_t>(h[2]) << 8 |
                            static_cast<std::uint32_t>(h[3]) << 16 | static_cast<std::uint32_t>(h[4]) << 24;
  if (len > kMaxPayload) throw FormatError("frame payload too large");
  Frame f;
  f.op = static_cast<Opcode>(h[0]);
  f.payload.resize(len);
  if (len > 0 && !read_exact(fd, f.payload.data(), len)) throw Error("connection closed mid-frame");
  return f;
}

void write_frame(int fd, const Frame& f) { write_all(fd, encode_frame(f)); }

Client::Client(const std::string& host, int port) {
  addrinfo hints{};
  hints.ai_family = AF_UNSPEC;
  hints.ai_socktype = SOCK_STREAM;
  addrinfo* res = nullptr;
  const int rc = ::getaddrinfo(host.c_str(), std::to_string(port).c_str(), &hints, &res);
  if (rc != 0) throw Error("resolve " + host + ": " + ::gai_strerror(rc));
  for (addrinfo* a = res; a; a = a->ai_next) {
    fd_ = ::socket(a->ai_family, a->ai_socktype, a->ai_protocol);
    if (fd_ < 0) continue;
    if (::connect(fd_, a->ai_addr, a->ai_addrlen) == 0) break;
    ::close(fd_);
    fd_ = -1;
  }
  ::freeaddrinfo(res);
  if (fd_ < 0) throw Error("cannot connect to " + host + ":" + std::to_string(port));
}

Client::~Client() {
  if (fd_ >= 0) ::close(fd_);
}

void Client::send(const Frame& f) { write_frame(fd_, f); }

std::optional<Frame> Client::request(const Frame& f) {
  send(f);
  return read_frame(fd_);
}

Frame Client::expect(Opcode op) {
  auto reply = read_frame(fd_);
  if (!reply) throw Error("server closed the connection");
  if (reply->op == Opcode::kError)
    throw Error("server error: " + std::string(reply->payload.begin(), reply->payload.end()));
  if (reply->op != op) throw FormatError("unexpected reply opcode");
  return std::move(*reply);
}

void Client::ingest(std::span<const io::Event> events) {
  if (events.empty()) {
    send(Frame{Opcode::kIngest, {}});
    return;
  }
  send(Frame{Opcode::kIngest, started_ ? io::pack_binary(events, last_t_) : io::pack_binary(events)});
  started_ = true;
  last_t_ = events.back().t;
}

SnapshotFile Client::snapshot() {
  send(Frame{Opcode::kSnapshot, {}});
  return decode_snapshot(expect(Opcode::kSnapshot).payload);
}

SnapshotFile Client::snapshot_patch(int row, int col) {
  send(Frame{Opcode::kSnapshot, patch_request(row, col)});
  return decode_snapshot(expect(Opcode::kSnapshot).payload);
}

std::map<std::string, std::string> Client::stats() {
  send(Frame{Opcode::kStats, {}});
  const Frame f = expect(Opcode::kStats);
  return parse_stats(std::string(f.payload.begin(), f.payload.end()));
}

}  // namespace eva::wire
