#include "eva/server.hpp"

#include <arpa/inet.h>
#include <netdb.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <cerrno>
#include <chrono>
#include <csignal>
#include <cstring>

#include "eva/common.hpp"

namespace eva::serve {

Server::Server(pipe::Pipeline& pipeline, ServerOptions options) : pipeline_(pipeline), options_(std::move(options)) {}

Server::~Server() { stop(); }

void Server::start() {
  if (running_) throw Error("server already running");
  addrinfo hints{};
  hints.ai_family = AF_UNSPEC;
  hints.ai_socktype = SOCK_STREAM;
  hints.ai_flags = AI_PASSIVE;
  addrinfo* res = nullptr;
  const int rc = ::getaddrinfo(options_.host.c_str(), std::to_string(options_.port).c_str(), &hints, &res);
  if (rc != 0) throw Error("resolve " + options_.host + ": " + ::gai_strerror(rc));
  std::string failure = "no usable address";
  for (addrinfo* a = res; a; a = a->ai_next) {
    const int fd = ::socket(a->ai_family, a->ai_socktype, a->ai_protocol);
    if (fd < 0) continue;
    const int one = 1;
    ::setsockopt(fd, SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
    if (::bind(fd, a->ai_addr, a->ai_addrlen) == 0 && ::listen(fd, 64) == 0) {
      listen_fd_ = fd;
      break;
    }
    failure = std::strerror(errno);
    ::close(fd);
  }
  ::freeaddrinfo(res);
  if (listen_fd_ < 0) throw Error("cannot listen on " + options_.host + ":" + std::to_string(options_.port) + ": " + failure);

  sockaddr_storage addr{};
  socklen_t len = sizeof addr;
  ::getsockname(listen_fd_, reinterpret_cast<sockaddr*>(&addr), &len);
  port_ = addr.ss_family == AF_INET6 ? ntohs(reinterpret_cast<sockaddr_in6*>(&addr)->sin6_port)
                                     : ntohs(reinterpret_cast<sockaddr_in*>(&addr)->sin_port);
  running_ = true;
  acceptor_ = std::thread([this] { accept_loop(); });
}

void Server::stop() {
  if (!running_.exchange(false)) return;
  if (acceptor_.joinable()) acceptor_.join();
  ::close(listen_fd_);
  listen_fd_ = -1;
  std::lock_guard lock(mu_);
  for (auto& c : live_) ::shutdown(c.fd, SHUT_RDWR);
  for (auto& c : live_) {
    if (c.thread.joinable()) c.thread.join();
    ::close(c.fd);
  }
  live_.clear();
}

void Server::reap() {
  std::lock_guard lock(mu_);
  for (auto it = live_.begin(); it != live_.end();) {
    if (it->done) {
      it->thread.join();
      ::close(it->fd);
      it = live_.erase(it);
    } else {
      ++it;
    }
  }
}

void Server::accept_loop() {
  while (running_) {
    pollfd p{listen_fd_, POLLIN, 0};
    const int r = ::poll(&p, 1, 100);
    reap();
    if (r <= 0 || !(p.revents & POLLIN)) continue;
    const int fd = ::accept(listen_fd_, nullptr, nullptr);
    if (fd < 0) continue;
    ++connections_;
    std::lock_guard lock(mu_);
    Connection& c = live_.emplace_back();
    c.fd = fd;
    c.thread = std::thread([this, &c] { serve_connection(c); });
  }
}

namespace {

wire::Frame error_frame(const std::string& what) {
  return wire::Frame{wire::Opcode::kError, std::vector<std::uint8_t>(what.begin(), what.end())};
}

}  // namespace

void Server::serve_connection(Connection& c) {
  io::RecordDecoder decoder(pipeline_.geometry());
  std::uint64_t accepted = 0, rejected = 0;
  std::vector<io::Event> batch;
  try {
    while (running_) {
      auto frame = wire::read_frame(c.fd);
      if (!frame) break;
      switch (frame->op) {
        case wire::Opcode::kIngest: {
          batch.clear();
          decoder.decode(frame->payload, batch);
          for (const auto& e : batch) (pipeline_.ingest(e) ? accepted : rejected) += 1;
          break;
        }
        case wire::Opcode::kSnapshot: {
          pipe::FrameSnapshot snap;
          if (frame->payload.empty()) {
            snap = pipeline_.snapshot();
          } else if (frame->payload.size() == 4) {
            ByteReader r(frame->payload);
            const int row = r.u16();
            const int col = r.u16();
            try {
              snap = pipeline_.snapshot_patch({row, col});
            } catch (const Error& e) {
              wire::write_frame(c.fd, error_frame(e.what()));
              break;
            }
          } else {
            throw FormatError("SNAPSHOT payload must be empty or 4 bytes");
          }
          wire::write_frame(c.fd, wire::Frame{wire::Opcode::kSnapshot, encode_snapshot(snap.to_file())});
          break;
        }
        case wire::Opcode::kStats: {
          const auto s = pipeline_.stats();
          const std::map<std::string, std::string> kv{
              {"events", std::to_string(s.events)},
              {"rejected", std::to_string(s.rejected)},
              {"active_patches", std::to_string(s.active_patches)},
              {"patches", std::to_string(pipeline_.geometry().num_patches())},
              {"connections", std::to_string(connections_.load())},
              {"protocol_errors", std::to_string(protocol_errors_.load())},
              {"connection_events", std::to_string(accepted)},
              {"connection_rejected", std::to_string(rejected)},
              {"precision", std::string(to_string(pipeline_.precision()))},
          };
          const std::string text = wire::format_stats(kv);
          wire::write_frame(c.fd,
                            wire::Frame{wire::Opcode::kStats, std::vector<std::uint8_t>(text.begin(), text.end())});
          break;
        }
        case wire::Opcode::kError:
          throw FormatError("clients may not send ERROR frames");
      }
    }
  } catch (const std::exception& e) {
    ++protocol_errors_;
    try {
      wire::write_frame(c.fd, error_frame(e.what()));
    } catch (const std::exception&) {
    }
  }
  ::shutdown(c.fd, SHUT_RDWR);
  c.done = true;
}

namespace {

std::atomic<bool> g_stop{false};

extern "C" void on_signal(int) { g_stop = true; }

}  // namespace

void run_until_signal(Server& server) {
  g_stop = false;
  struct sigaction sa {};
  sa.sa_handler = on_signal;
  sigemptyset(&sa.sa_mask);
  ::sigaction(SIGINT, &sa, nullptr);
  ::sigaction(SIGTERM, &sa, nullptr);
  while (!g_stop) std::this_thread::sleep_for(std::chrono::milliseconds(50));
  server.stop();
}

}  // namespace eva::serve
