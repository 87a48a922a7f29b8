#pragma once

// Fixtures shared by the unit and acceptance binaries: temp directories, a
// loopback fake API server and raw socket exchanges.

#include <atomic>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <random>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <httplib.h>

#include "net.hpp"

namespace testing {

class TempDir {
 public:
  TempDir() {
    static std::atomic<int> counter{0};
    std::random_device rd;
    path_ = std::filesystem::temp_directory_path() /
            ("stepguard-test-" + std::to_string(::getpid()) + "-" + std::to_string(counter++) + "-" +
             std::to_string(rd()));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream out;
  out << in.rdbuf();
  return out.str();
}

inline void write_file(const std::filesystem::path& path, const std::string& text) {
  std::filesystem::create_directories(path.parent_path());
  std::ofstream(path, std::ios::binary) << text;
}

// Loopback stand-in for the REST API. Every request is logged; responses
// are deterministic functions of (method, path) so relayed bytes can be
// compared with a direct fetch.
class FakeApi {
 public:
  struct Hit {
    std::string method;
    std::string path;
    std::string body;
    httplib::Headers headers;
  };

  FakeApi() {
    auto handler = [this](const httplib::Request& req, httplib::Response& res) {
      {
        std::lock_guard lock(mutex_);
        hits_.push_back({req.method, req.path, req.body, req.headers});
      }
      res.set_header("X-Fake-Server", "1");
      res.set_header("ETag", "\"v1-" + std::to_string(req.path.size()) + "\"");
      if (req.path.ends_with("/chunked")) {
        res.set_chunked_content_provider("text/plain", [](size_t, httplib::DataSink& sink) {
          sink.write("first chunk\n", 12);
          sink.write("second\x01\x02 chunk\n", 15);
          sink.done();
          return true;
        });
        return;
      }
      if (req.path.ends_with("/fail")) {
        res.status = 503;
        res.set_content(R"({"message":"upstream unavailable"})", "application/json");
        return;
      }
      res.status = req.method == "POST" ? 201 : 200;
      res.set_content(body_for(req.method, req.path), "application/json; charset=utf-8");
    };
    server_.Get(".*", handler);
    server_.Post(".*", handler);
    server_.Put(".*", handler);
    server_.Patch(".*", handler);
    server_.Delete(".*", handler);
    port_ = server_.bind_to_any_port("127.0.0.1");
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
  }
  ~FakeApi() {
    server_.stop();
    thread_.join();
  }
  FakeApi(const FakeApi&) = delete;
  FakeApi& operator=(const FakeApi&) = delete;

  int port() const { return port_; }

  static std::string body_for(const std::string& method, const std::string& path) {
    // Non-ASCII and escaped bytes make byte-level comparison meaningful.
    return "{\"method\":\"" + method + "\",\"path\":\"" + path +
           "\",\"note\":\"r\xC3\xA9sum\xC3\xA9 \\u0001\",\"items\":[1,2,3]}";
  }

  std::vector<Hit> hits() const {
    std::lock_guard lock(mutex_);
    return hits_;
  }
  std::size_t hits_for(const std::string& path) const {
    std::lock_guard lock(mutex_);
    std::size_t n = 0;
    for (const auto& hit : hits_) {
      n += hit.path == path ? 1 : 0;
    }
    return n;
  }
  std::size_t hit_count() const {
    std::lock_guard lock(mutex_);
    return hits_.size();
  }

 private:
  httplib::Server server_;
  int port_ = 0;
  std::thread thread_;
  mutable std::mutex mutex_;
  std::vector<Hit> hits_;
};

// A loopback port with nothing listening on it.
inline int dead_port() {
  auto [sock, port] = stepguard::net::listen_tcp("127.0.0.1", 0);
  sock.close();
  return port;
}

// Sends `request` verbatim and returns everything the peer sends back
// until it closes the connection.
inline std::string raw_exchange(int port, const std::string& request) {
  auto sock = stepguard::net::connect_tcp("127.0.0.1", port, std::chrono::seconds(2));
  if (!sock.valid()) {
    return {};
  }
  stepguard::net::set_io_timeout(sock.fd(), std::chrono::seconds(5));
  stepguard::net::PlainStream stream(sock.fd());
  if (!stream.write_all(request)) {
    return {};
  }
  stepguard::net::BufferedReader reader(stream);
  return reader.read_to_eof();
}

// Drops the header lines that a proxy is entitled to change, plus Date, which
// differs between two fetches that straddle a second boundary.
inline std::string without_hop_by_hop(const std::string& response) {
  const auto end = response.find("\r\n\r\n");
  if (end == std::string::npos) {
    return response;
  }
  std::istringstream head(response.substr(0, end));
  std::string line;
  std::string out;
  while (std::getline(head, line)) {
    if (!line.empty() && line.back() == '\r') {
      line.pop_back();
    }
    std::string lower = line;
    for (auto& c : lower) {
      c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    }
    if (lower.starts_with("connection:") || lower.starts_with("keep-alive:") || lower.starts_with("date:")) {
      continue;
    }
    out += line + "\r\n";
  }
  return out + response.substr(end + 2);
}

inline int status_of(const std::string& response) {
  if (response.size() < 12) {
    return 0;
  }
  return std::atoi(response.substr(9, 3).c_str());
}

inline std::string body_of(const std::string& response) {
  const auto end = response.find("\r\n\r\n");
  return end == std::string::npos ? std::string{} : response.substr(end + 4);
}

}  // namespace testing
