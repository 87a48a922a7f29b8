#include "net.hpp"

#include <algorithm>
#include <cctype>
#include <cerrno>
#include <charconv>
#include <cstring>
#include <stdexcept>

#include <fcntl.h>
#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

namespace stepguard::net {
namespace {

std::string lower(std::string_view text) {
  std::string out(text);
  std::transform(out.begin(), out.end(), out.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return out;
}

std::string_view trim(std::string_view text) {
  const auto first = text.find_first_not_of(" \t");
  if (first == std::string_view::npos) {
    return {};
  }
  return text.substr(first, text.find_last_not_of(" \t") - first + 1);
}

bool parse_headers(std::string_view block, std::vector<Header>& out) {
  while (!block.empty()) {
    const auto eol = block.find("\r\n");
    const std::string_view line = block.substr(0, eol);
    block = eol == std::string_view::npos ? std::string_view{} : block.substr(eol + 2);
    if (line.empty()) {
      break;
    }
    const auto colon = line.find(':');
    if (colon == std::string_view::npos || colon == 0) {
      return false;
    }
    out.push_back({std::string(line.substr(0, colon)), std::string(trim(line.substr(colon + 1)))});
  }
  return true;
}

std::optional<int> parse_int(std::string_view text, int base = 10) {
  int value = 0;
  const auto* end = text.data() + text.size();
  auto [ptr, ec] = std::from_chars(text.data(), end, value, base);
  if (ec != std::errc{} || ptr != end) {
    return std::nullopt;
  }
  return value;
}

}  // namespace

void Socket::close() {
  if (fd_ >= 0) {
    ::close(fd_);
    fd_ = -1;
  }
}

void Socket::shutdown_both() {
  if (fd_ >= 0) {
    ::shutdown(fd_, SHUT_RDWR);
  }
}

void set_io_timeout(int fd, std::chrono::milliseconds timeout) {
  timeval tv{};
  tv.tv_sec = static_cast<time_t>(timeout.count() / 1000);
  tv.tv_usec = static_cast<suseconds_t>((timeout.count() % 1000) * 1000);
  setsockopt(fd, SOL_SOCKET, SO_RCVTIMEO, &tv, sizeof(tv));
  setsockopt(fd, SOL_SOCKET, SO_SNDTIMEO, &tv, sizeof(tv));
}

Socket connect_tcp(const std::string& host, int port, std::chrono::milliseconds timeout) {
  addrinfo hints{};
  hints.ai_family = AF_UNSPEC;
  hints.ai_socktype = SOCK_STREAM;
  addrinfo* result = nullptr;
  const std::string service = std::to_string(port);
  if (getaddrinfo(host.c_str(), service.c_str(), &hints, &result) != 0) {
    return {};
  }
  std::unique_ptr<addrinfo, decltype(&freeaddrinfo)> guard(result, freeaddrinfo);
  for (addrinfo* ai = result; ai != nullptr; ai = ai->ai_next) {
    Socket sock(::socket(ai->ai_family, ai->ai_socktype | SOCK_CLOEXEC, ai->ai_protocol));
    if (!sock.valid()) {
      continue;
    }
    const int flags = fcntl(sock.fd(), F_GETFL, 0);
    fcntl(sock.fd(), F_SETFL, flags | O_NONBLOCK);
    int rc = ::connect(sock.fd(), ai->ai_addr, ai->ai_addrlen);
    if (rc != 0 && errno == EINPROGRESS) {
      pollfd pfd{sock.fd(), POLLOUT, 0};
      rc = ::poll(&pfd, 1, static_cast<int>(timeout.count())) == 1 ? 0 : -1;
      if (rc == 0) {
        int err = 0;
        socklen_t len = sizeof(err);
        getsockopt(sock.fd(), SOL_SOCKET, SO_ERROR, &err, &len);
        rc = err == 0 ? 0 : -1;
      }
    }
    if (rc != 0) {
      continue;
    }
    fcntl(sock.fd(), F_SETFL, flags);
    int one = 1;
    setsockopt(sock.fd(), IPPROTO_TCP, TCP_NODELAY, &one, sizeof(one));
    set_io_timeout(sock.fd(), std::chrono::seconds(30));
    return sock;
  }
  return {};
}

std::pair<Socket, int> listen_tcp(const std::string& host, int port) {
  addrinfo hints{};
  hints.ai_family = AF_UNSPEC;
  hints.ai_socktype = SOCK_STREAM;
  hints.ai_flags = AI_PASSIVE;
  addrinfo* result = nullptr;
  const std::string service = std::to_string(port);
  if (getaddrinfo(host.empty() ? nullptr : host.c_str(), service.c_str(), &hints, &result) != 0) {
    throw std::runtime_error("cannot resolve listen address " + host);
  }
  std::unique_ptr<addrinfo, decltype(&freeaddrinfo)> guard(result, freeaddrinfo);
  for (addrinfo* ai = result; ai != nullptr; ai = ai->ai_next) {
    Socket sock(::socket(ai->ai_family, ai->ai_socktype | SOCK_CLOEXEC, ai->ai_protocol));
    if (!sock.valid()) {
      continue;
    }
    int one = 1;
    setsockopt(sock.fd(), SOL_SOCKET, SO_REUSEADDR, &one, sizeof(one));
    if (::bind(sock.fd(), ai->ai_addr, ai->ai_addrlen) != 0 || ::listen(sock.fd(), 128) != 0) {
      continue;
    }
    sockaddr_storage addr{};
    socklen_t len = sizeof(addr);
    getsockname(sock.fd(), reinterpret_cast<sockaddr*>(&addr), &len);
    int bound = 0;
    if (addr.ss_family == AF_INET) {
      bound = ntohs(reinterpret_cast<sockaddr_in*>(&addr)->sin_port);
    } else {
      bound = ntohs(reinterpret_cast<sockaddr_in6*>(&addr)->sin6_port);
    }
    return {std::move(sock), bound};
  }
  throw std::runtime_error("cannot bind " + host + ":" + std::to_string(port) + ": " + std::strerror(errno));
}

long PlainStream::read(char* buffer, std::size_t size) {
  for (;;) {
    const auto n = ::recv(fd_, buffer, size, 0);
    if (n < 0 && errno == EINTR) {
      continue;
    }
    return static_cast<long>(n);
  }
}

bool PlainStream::write_all(std::string_view data) {
  while (!data.empty()) {
    const auto n = ::send(fd_, data.data(), data.size(), MSG_NOSIGNAL);
    if (n < 0 && errno == EINTR) {
      continue;
    }
    if (n <= 0) {
      return false;
    }
    data.remove_prefix(static_cast<std::size_t>(n));
  }
  return true;
}

TlsStream::~TlsStream() {
  if (ssl_) {
    SSL_shutdown(ssl_.get());
  }
}

long TlsStream::read(char* buffer, std::size_t size) {
  const int n = SSL_read(ssl_.get(), buffer, static_cast<int>(std::min<std::size_t>(size, 1 << 30)));
  if (n > 0) {
    return n;
  }
  const int err = SSL_get_error(ssl_.get(), n);
  return err == SSL_ERROR_ZERO_RETURN ? 0 : -1;
}

bool TlsStream::write_all(std::string_view data) {
  while (!data.empty()) {
    const int n = SSL_write(ssl_.get(), data.data(), static_cast<int>(std::min<std::size_t>(data.size(), 1 << 30)));
    if (n <= 0) {
      return false;
    }
    data.remove_prefix(static_cast<std::size_t>(n));
  }
  return true;
}

bool BufferedReader::fill() {
  char chunk[16 * 1024];
  const long n = stream_.read(chunk, sizeof(chunk));
  if (n <= 0) {
    return false;
  }
  buffer_.append(chunk, static_cast<std::size_t>(n));
  return true;
}

std::optional<std::string> BufferedReader::read_head(std::size_t limit) {
  std::size_t scanned = 0;
  for (;;) {
    const auto pos = buffer_.find("\r\n\r\n", scanned);
    if (pos != std::string::npos) {
      std::string head = buffer_.substr(0, pos + 4);
      buffer_.erase(0, pos + 4);
      return head;
    }
    scanned = buffer_.size() >= 3 ? buffer_.size() - 3 : 0;
    if (buffer_.size() > limit || !fill()) {
      return std::nullopt;
    }
  }
}

std::optional<std::string> BufferedReader::read_line(std::size_t limit) {
  for (;;) {
    const auto pos = buffer_.find("\r\n");
    if (pos != std::string::npos) {
      std::string line = buffer_.substr(0, pos + 2);
      buffer_.erase(0, pos + 2);
      return line;
    }
    if (buffer_.size() > limit || !fill()) {
      return std::nullopt;
    }
  }
}

std::optional<std::string> BufferedReader::read_exact(std::size_t size) {
  while (buffer_.size() < size) {
    if (!fill()) {
      return std::nullopt;
    }
  }
  std::string out = buffer_.substr(0, size);
  buffer_.erase(0, size);
  return out;
}

std::string BufferedReader::read_to_eof() {
  while (fill()) {
  }
  return std::exchange(buffer_, {});
}

std::optional<RequestHead> parse_request_head(std::string_view raw) {
  const auto eol = raw.find("\r\n");
  if (eol == std::string_view::npos) {
    return std::nullopt;
  }
  const std::string_view line = raw.substr(0, eol);
  const auto sp1 = line.find(' ');
  const auto sp2 = line.rfind(' ');
  if (sp1 == std::string_view::npos || sp2 == sp1) {
    return std::nullopt;
  }
  RequestHead head;
  head.method = std::string(line.substr(0, sp1));
  head.target = std::string(line.substr(sp1 + 1, sp2 - sp1 - 1));
  head.version = std::string(line.substr(sp2 + 1));
  if (head.method.empty() || head.target.empty() || !head.version.starts_with("HTTP/")) {
    return std::nullopt;
  }
  if (!parse_headers(raw.substr(eol + 2), head.headers)) {
    return std::nullopt;
  }
  return head;
}

std::optional<ResponseHead> parse_response_head(std::string_view raw) {
  const auto eol = raw.find("\r\n");
  if (eol == std::string_view::npos) {
    return std::nullopt;
  }
  const std::string_view line = raw.substr(0, eol);
  const auto sp1 = line.find(' ');
  if (sp1 == std::string_view::npos || !line.starts_with("HTTP/")) {
    return std::nullopt;
  }
  ResponseHead head;
  head.version = std::string(line.substr(0, sp1));
  const auto sp2 = line.find(' ', sp1 + 1);
  auto status = parse_int(line.substr(sp1 + 1, sp2 == std::string_view::npos ? std::string_view::npos : sp2 - sp1 - 1));
  if (!status) {
    return std::nullopt;
  }
  head.status = *status;
  head.reason = sp2 == std::string_view::npos ? std::string{} : std::string(line.substr(sp2 + 1));
  if (!parse_headers(raw.substr(eol + 2), head.headers)) {
    return std::nullopt;
  }
  return head;
}

bool iequals(std::string_view a, std::string_view b) {
  return a.size() == b.size() && std::equal(a.begin(), a.end(), b.begin(), [](unsigned char x, unsigned char y) {
           return std::tolower(x) == std::tolower(y);
         });
}

std::optional<std::string> find_header(const std::vector<Header>& headers, std::string_view name) {
  for (const auto& h : headers) {
    if (iequals(h.name, name)) {
      return h.value;
    }
  }
  return std::nullopt;
}

void remove_header(std::vector<Header>& headers, std::string_view name) {
  std::erase_if(headers, [&](const Header& h) { return iequals(h.name, name); });
}

void strip_hop_by_hop(std::vector<Header>& headers) {
  std::vector<std::string> listed;
  for (const auto& h : headers) {
    if (!iequals(h.name, "Connection")) {
      continue;
    }
    std::string_view value = h.value;
    while (!value.empty()) {
      const auto comma = value.find(',');
      listed.push_back(lower(trim(value.substr(0, comma))));
      value = comma == std::string_view::npos ? std::string_view{} : value.substr(comma + 1);
    }
  }
  static constexpr std::string_view kHopByHop[] = {"connection", "keep-alive", "proxy-connection",
                                                   "proxy-authenticate", "proxy-authorization", "te",
                                                   "trailer", "upgrade"};
  std::erase_if(headers, [&](const Header& h) {
    const std::string name = lower(h.name);
    if (name == "transfer-encoding") {
      return false;
    }
    return std::find(std::begin(kHopByHop), std::end(kHopByHop), name) != std::end(kHopByHop) ||
           std::find(listed.begin(), listed.end(), name) != listed.end();
  });
}

std::string serialize_headers(const std::vector<Header>& headers) {
  std::string out;
  for (const auto& h : headers) {
    out += h.name;
    out += ": ";
    out += h.value;
    out += "\r\n";
  }
  return out;
}

std::optional<std::string> read_body(BufferedReader& reader, const std::vector<Header>& headers, bool until_eof) {
  if (auto te = find_header(headers, "Transfer-Encoding"); te && lower(*te).find("chunked") != std::string::npos) {
    std::string raw;
    for (;;) {
      auto size_line = reader.read_line();
      if (!size_line) {
        return std::nullopt;
      }
      raw += *size_line;
      std::string_view digits = std::string_view(*size_line).substr(0, size_line->size() - 2);
      digits = trim(digits.substr(0, digits.find(';')));
      auto size = parse_int(digits, 16);
      if (!size || *size < 0) {
        return std::nullopt;
      }
      if (*size == 0) {
        // Trailer section ends with an empty line.
        for (;;) {
          auto trailer = reader.read_line();
          if (!trailer) {
            return std::nullopt;
          }
          raw += *trailer;
          if (*trailer == "\r\n") {
            return raw;
          }
        }
      }
      auto data = reader.read_exact(static_cast<std::size_t>(*size) + 2);
      if (!data) {
        return std::nullopt;
      }
      raw += *data;
    }
  }
  if (auto length = find_header(headers, "Content-Length")) {
    auto size = parse_int(trim(*length));
    if (!size || *size < 0) {
      return std::nullopt;
    }
    return reader.read_exact(static_cast<std::size_t>(*size));
  }
  if (until_eof) {
    return reader.read_to_eof();
  }
  return std::string{};
}

std::optional<Url> parse_absolute_url(std::string_view url) {
  Url out;
  const auto scheme_end = url.find("://");
  if (scheme_end == std::string_view::npos) {
    return std::nullopt;
  }
  out.scheme = lower(url.substr(0, scheme_end));
  if (out.scheme != "http" && out.scheme != "https") {
    return std::nullopt;
  }
  std::string_view rest = url.substr(scheme_end + 3);
  const auto path_start = rest.find_first_of("/?");
  const std::string_view authority = rest.substr(0, path_start);
  auto host_port = parse_authority(authority, out.scheme == "https" ? 443 : 80);
  if (!host_port) {
    return std::nullopt;
  }
  out.host = host_port->first;
  out.port = host_port->second;
  out.path_and_query = path_start == std::string_view::npos ? "/" : std::string(rest.substr(path_start));
  if (out.path_and_query.front() == '?') {
    out.path_and_query.insert(out.path_and_query.begin(), '/');
  }
  return out;
}

std::optional<std::pair<std::string, int>> parse_authority(std::string_view authority, int default_port) {
  if (auto at = authority.rfind('@'); at != std::string_view::npos) {
    authority.remove_prefix(at + 1);
  }
  if (authority.empty()) {
    return std::nullopt;
  }
  std::string_view host = authority;
  std::string_view port_text;
  if (authority.front() == '[') {
    const auto close = authority.find(']');
    if (close == std::string_view::npos) {
      return std::nullopt;
    }
    host = authority.substr(1, close - 1);
    if (close + 1 < authority.size()) {
      if (authority[close + 1] != ':') {
        return std::nullopt;
      }
      port_text = authority.substr(close + 2);
    }
  } else if (auto colon = authority.rfind(':'); colon != std::string_view::npos) {
    host = authority.substr(0, colon);
    port_text = authority.substr(colon + 1);
  }
  int port = default_port;
  if (!port_text.empty()) {
    auto parsed = parse_int(port_text);
    if (!parsed || *parsed <= 0 || *parsed > 65535) {
      return std::nullopt;
    }
    port = *parsed;
  }
  if (host.empty()) {
    return std::nullopt;
  }
  return std::make_pair(lower(host), port);
}

void pipe_bidirectional(int fd_a, int fd_b, std::string initial_a_to_b) {
  PlainStream b(fd_b);
  if (!initial_a_to_b.empty() && !b.write_all(initial_a_to_b)) {
    return;
  }
  pollfd fds[2] = {{fd_a, POLLIN, 0}, {fd_b, POLLIN, 0}};
  char buffer[16 * 1024];
  bool open_a = true;
  bool open_b = true;
  while (open_a || open_b) {
    fds[0].events = open_a ? POLLIN : 0;
    fds[1].events = open_b ? POLLIN : 0;
    const int ready = ::poll(fds, 2, 60'000);
    if (ready <= 0) {
      return;
    }
    for (int i = 0; i < 2; ++i) {
      if ((fds[i].revents & (POLLIN | POLLHUP | POLLERR)) == 0) {
        continue;
      }
      const int from = fds[i].fd;
      const int to = fds[1 - i].fd;
      const auto n = ::recv(from, buffer, sizeof(buffer), 0);
      if (n <= 0) {
        ::shutdown(to, SHUT_WR);
        (i == 0 ? open_a : open_b) = false;
        continue;
      }
      PlainStream out(to);
      if (!out.write_all(std::string_view(buffer, static_cast<std::size_t>(n)))) {
        return;
      }
    }
  }
}

}  // namespace stepguard::net
