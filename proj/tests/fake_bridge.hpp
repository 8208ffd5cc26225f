#pragma once

// Minimal in-process stand-in for the model bridge: accepts connections on an
// ephemeral loopback port and answers each request line with `handler`.

#include <netinet/in.h>
#include <sys/socket.h>
#include <unistd.h>

#include <atomic>
#include <functional>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

namespace testing_support {

class FakeBridge {
 public:
  using Handler = std::function<nlohmann::json(const nlohmann::json&)>;

  explicit FakeBridge(Handler handler) : handler_(std::move(handler)) {
    listen_fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
    int one = 1;
    ::setsockopt(listen_fd_, SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
    addr.sin_port = 0;
    ::bind(listen_fd_, reinterpret_cast<sockaddr*>(&addr), sizeof addr);
    ::listen(listen_fd_, 4);
    socklen_t len = sizeof addr;
    ::getsockname(listen_fd_, reinterpret_cast<sockaddr*>(&addr), &len);
    port_ = ntohs(addr.sin_port);
    thread_ = std::thread([this] { serve(); });
  }

  ~FakeBridge() {
    stop_ = true;
    ::shutdown(listen_fd_, SHUT_RDWR);
    ::close(listen_fd_);
    thread_.join();
  }

  int port() const { return port_; }
  int requests() const { return requests_; }

 private:
  void serve() {
    while (!stop_) {
      const int fd = ::accept(listen_fd_, nullptr, nullptr);
      if (fd < 0) return;
      std::string buffer;
      char chunk[4096];
      for (;;) {
        const ssize_t k = ::recv(fd, chunk, sizeof chunk, 0);
        if (k <= 0) break;
        buffer.append(chunk, static_cast<std::size_t>(k));
        std::size_t eol;
        while ((eol = buffer.find('\n')) != std::string::npos) {
          const auto request = nlohmann::json::parse(buffer.substr(0, eol));
          buffer.erase(0, eol + 1);
          ++requests_;
          nlohmann::json response = handler_(request);
          if (!response.contains("id")) response["id"] = request["id"];
          const std::string line = response.dump() + "\n";
          ::send(fd, line.data(), line.size(), MSG_NOSIGNAL);
        }
      }
      ::close(fd);
    }
  }

  Handler handler_;
  int listen_fd_ = -1;
  int port_ = 0;
  std::atomic<bool> stop_{false};
  std::atomic<int> requests_{0};
  std::thread thread_;
};

}  // namespace testing_support
