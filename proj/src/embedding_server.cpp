#include "copforge/embedding_server.hpp"

#include <chrono>

#include <httplib.h>
#include <json.hpp>

#include "copforge/errors.hpp"

namespace copforge {

EmbeddingServer::EmbeddingServer(EmbeddingProvider& backend, EmbeddingServerOptions options)
    : backend_(backend), options_(options), server_(std::make_unique<httplib::Server>()) {
  server_->Post("/embed", [this](const httplib::Request& req, httplib::Response& res) {
    const int index = requests_.fetch_add(1);
    if (options_.delay_ms > 0) {
      std::this_thread::sleep_for(std::chrono::milliseconds(options_.delay_ms));
    }
    if (index < options_.fail_first) {
      res.status = options_.fail_status;
      res.set_content(R"({"error":"injected failure"})", "application/json");
      return;
    }
    nlohmann::json body;
    try {
      body = nlohmann::json::parse(req.body);
    } catch (const nlohmann::json::exception&) {
      res.status = 400;
      return;
    }
    if (!body.contains("texts") || !body["texts"].is_array() || body["texts"].empty()) {
      res.status = 400;
      return;
    }
    const auto texts = body["texts"].get<std::vector<std::string>>();
    FloatMatrix rows;
    {
      std::lock_guard<std::mutex> lock(mu_);
      rows = backend_.Embed(texts);
    }
    const Eigen::Index width =
        options_.truncate_dim >= 0 ? std::min<Eigen::Index>(options_.truncate_dim, rows.cols())
                                   : rows.cols();
    nlohmann::json out = nlohmann::json::array();
    for (Eigen::Index i = 0; i < rows.rows(); ++i) {
      out.push_back(std::vector<float>(rows.row(i).data(), rows.row(i).data() + width));
    }
    res.set_content(nlohmann::json{{"embeddings", out}}.dump(), "application/json");
  });
}

EmbeddingServer::~EmbeddingServer() { Stop(); }

void EmbeddingServer::Start() {
  if (thread_.joinable()) return;
  port_ = server_->bind_to_any_port("127.0.0.1");
  if (port_ < 0) throw IoError("embedding server could not bind a port");
  thread_ = std::thread([this] { server_->listen_after_bind(); });
  server_->wait_until_ready();
}

void EmbeddingServer::Stop() {
  if (!thread_.joinable()) return;
  server_->stop();
  thread_.join();
}

std::string EmbeddingServer::endpoint() const {
  return "http://127.0.0.1:" + std::to_string(port_) + "/embed";
}

}  // namespace copforge
