#pragma once

#include <atomic>
#include <cstdint>
#include <list>
#include <mutex>
#include <string>
#include <thread>

#include "eva/pipeline.hpp"
#include "eva/wire.hpp"

namespace eva::serve {

struct ServerOptions {
  std::string host = "127.0.0.1";
  int port = 0;  // 0 picks an ephemeral port
};

/// Accepts framed connections and serves one Pipeline. Each connection runs
/// on its own thread with its own INGEST timestamp cursor and rejection
/// counter. Protocol violations get an ERROR frame and a closed connection.
class Server {
 public:
  Server(pipe::Pipeline& pipeline, ServerOptions options = {});
  ~Server();
  Server(const Server&) = delete;
  Server& operator=(const Server&) = delete;

  /// Binds, listens and starts accepting in the background.
  void start();
  /// Stops accepting, closes every connection and joins all threads.
  void stop();
  int port() const { return port_; }
  std::uint64_t connections() const { return connections_.load(); }

 private:
  struct Connection {
    int fd = -1;
    std::thread thread;
    std::atomic<bool> done{false};
  };

  void accept_loop();
  void serve_connection(Connection& c);
  void reap();

  pipe::Pipeline& pipeline_;
  ServerOptions options_;
  int listen_fd_ = -1;
  int port_ = 0;
  std::atomic<bool> running_{false};
  std::atomic<std::uint64_t> connections_{0};
  std::atomic<std::uint64_t> protocol_errors_{0};
  std::thread acceptor_;
  std::mutex mu_;
  std::list<Connection> live_;
};

/// Blocks until SIGINT or SIGTERM, then stops the server.
void run_until_signal(Server& server);

}  // namespace eva::serve
