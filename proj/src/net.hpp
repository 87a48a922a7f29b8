#pragma once

// Blocking socket, stream and HTTP/1.1 framing helpers used by the proxy.

#include <chrono>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <openssl/ssl.h>

namespace stepguard::net {

class Socket {
 public:
  Socket() = default;
  explicit Socket(int fd) : fd_(fd) {}
  ~Socket() { close(); }
  Socket(Socket&& other) noexcept : fd_(std::exchange(other.fd_, -1)) {}
  Socket& operator=(Socket&& other) noexcept {
    if (this != &other) {
      close();
      fd_ = std::exchange(other.fd_, -1);
    }
    return *this;
  }
  Socket(const Socket&) = delete;
  Socket& operator=(const Socket&) = delete;

  int fd() const { return fd_; }
  bool valid() const { return fd_ >= 0; }
  void close();
  void shutdown_both();

 private:
  int fd_ = -1;
};

Socket connect_tcp(const std::string& host, int port, std::chrono::milliseconds timeout);
// Returns the listening socket and the bound port.
std::pair<Socket, int> listen_tcp(const std::string& host, int port);
void set_io_timeout(int fd, std::chrono::milliseconds timeout);

class Stream {
 public:
  virtual ~Stream() = default;
  // Bytes read, 0 on orderly EOF, -1 on error.
  virtual long read(char* buffer, std::size_t size) = 0;
  virtual bool write_all(std::string_view data) = 0;
};

class PlainStream final : public Stream {
 public:
  explicit PlainStream(int fd) : fd_(fd) {}
  long read(char* buffer, std::size_t size) override;
  bool write_all(std::string_view data) override;

 private:
  int fd_;
};

struct SslDeleter {
  void operator()(SSL* ssl) const { SSL_free(ssl); }
};
using SslPtr = std::unique_ptr<SSL, SslDeleter>;

class TlsStream final : public Stream {
 public:
  explicit TlsStream(SslPtr ssl) : ssl_(std::move(ssl)) {}
  ~TlsStream() override;
  long read(char* buffer, std::size_t size) override;
  bool write_all(std::string_view data) override;

 private:
  SslPtr ssl_;
};

class BufferedReader {
 public:
  explicit BufferedReader(Stream& stream) : stream_(stream) {}

  // Reads through the first "\r\n\r\n"; nullopt on EOF/error or when the head
  // exceeds `limit` bytes.
  std::optional<std::string> read_head(std::size_t limit = 64 * 1024);
  std::optional<std::string> read_line(std::size_t limit = 64 * 1024);  // includes CRLF
  std::optional<std::string> read_exact(std::size_t size);
  std::string read_to_eof();
  // Bytes already buffered but not consumed.
  std::string take_buffered() { return std::exchange(buffer_, {}); }

 private:
  bool fill();
  Stream& stream_;
  std::string buffer_;
};

struct Header {
  std::string name;
  std::string value;
};

struct RequestHead {
  std::string method;
  std::string target;
  std::string version;
  std::vector<Header> headers;
};

struct ResponseHead {
  std::string version;
  int status = 0;
  std::string reason;
  std::vector<Header> headers;
};

std::optional<RequestHead> parse_request_head(std::string_view raw);
std::optional<ResponseHead> parse_response_head(std::string_view raw);

bool iequals(std::string_view a, std::string_view b);
std::optional<std::string> find_header(const std::vector<Header>& headers, std::string_view name);
void remove_header(std::vector<Header>& headers, std::string_view name);

// Drops Connection, Keep-Alive, Proxy-* and friends plus anything listed in
// the Connection header. Transfer-Encoding is kept because bodies are relayed
// with their original framing.
void strip_hop_by_hop(std::vector<Header>& headers);

std::string serialize_headers(const std::vector<Header>& headers);

// Reads a message body framed per RFC 9112 and returns its raw bytes
// (chunk framing included). `until_eof` covers responses with neither
// Content-Length nor chunked encoding. nullopt on a framing error.
std::optional<std::string> read_body(BufferedReader& reader, const std::vector<Header>& headers, bool until_eof);

// Absolute-form URL pieces.
struct Url {
  std::string scheme;  // "http" / "https"
  std::string host;    // lowercase
  int port = 0;
  std::string path_and_query;  // "/..." origin-form target
};
std::optional<Url> parse_absolute_url(std::string_view url);

// "host:port" authority of a CONNECT request.
std::optional<std::pair<std::string, int>> parse_authority(std::string_view authority, int default_port);

// Copies bytes in both directions until either side closes.
void pipe_bidirectional(int fd_a, int fd_b, std::string initial_a_to_b = {});

}  // namespace stepguard::net
