#ifndef COPFORGE_EMBEDDING_SERVER_HPP_
#define COPFORGE_EMBEDDING_SERVER_HPP_

#include <atomic>
#include <memory>
#include <mutex>
#include <string>
#include <thread>

#include "copforge/text_encoder.hpp"

namespace httplib {
class Server;
}

namespace copforge {

// Fault injection for exercising client error paths.
struct EmbeddingServerOptions {
  int fail_first = 0;        // answer the first k requests with `fail_status`
  int fail_status = 503;
  int delay_ms = 0;          // sleep before answering every request
  int truncate_dim = -1;     // when >= 0, send rows of this length instead
};

// Serves POST /embed {"texts": [...]} -> {"embeddings": [...]} on 127.0.0.1
// from a backing provider. Stops on destruction.
class EmbeddingServer {
 public:
  EmbeddingServer(EmbeddingProvider& backend, EmbeddingServerOptions options = {});
  ~EmbeddingServer();
  EmbeddingServer(const EmbeddingServer&) = delete;
  EmbeddingServer& operator=(const EmbeddingServer&) = delete;

  // Binds an ephemeral port and starts the listener thread.
  void Start();
  void Stop();
  int port() const { return port_; }
  std::string endpoint() const;
  int requests() const { return requests_.load(); }

 private:
  EmbeddingProvider& backend_;
  EmbeddingServerOptions options_;
  std::unique_ptr<httplib::Server> server_;
  std::thread thread_;
  std::mutex mu_;
  std::atomic<int> requests_{0};
  int port_ = -1;
};

}  // namespace copforge

#endif  // COPFORGE_EMBEDDING_SERVER_HPP_
