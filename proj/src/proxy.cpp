#include "stepguard/proxy.hpp"

#include <poll.h>
#include <signal.h>
#include <sys/socket.h>

#include <atomic>
#include <condition_variable>
#include <mutex>
#include <stdexcept>
#include <thread>

#include <openssl/err.h>
#include <openssl/ssl.h>

#include "net.hpp"
#include "stepguard/tls.hpp"

namespace stepguard {

using namespace std::chrono_literals;

void ProxyConfig::validate() const {
  if (api_hosts.empty()) {
    throw std::invalid_argument("at least one API host must be intercepted");
  }
  if (ca_cert.has_value() != ca_key.has_value()) {
    throw std::invalid_argument("--ca-cert and --ca-key must be given together");
  }
  if (action_header.empty()) {
    throw std::invalid_argument("attribution header name is empty");
  }
  if (static_action_id && static_action_id->empty()) {
    throw std::invalid_argument("static action id is empty");
  }
  split_host_port(verifier);
}

nlohmann::json to_json(const FlowRecord& flow) {
  auto opt = [](const std::optional<std::string>& v) -> nlohmann::json {
    return v ? nlohmann::json(*v) : nlohmann::json(nullptr);
  };
  return {{"method", flow.request.method},
          {"host", flow.request.host},
          {"path", flow.request.path},
          {"action_id", flow.request.action_id},
          {"intercepted", flow.intercepted},
          {"tunneled", flow.tunneled},
          {"decision", flow.allowed ? "allow" : "deny"},
          {"reason", flow.reason},
          {"scope", opt(flow.scope)},
          {"required", opt(flow.required)},
          {"granted", opt(flow.granted)},
          {"infrastructure_denial", flow.infrastructure_denial},
          {"status", flow.status},
          {"injected", flow.injected},
          {"latency_ms", flow.latency_ms}};
}

std::string resolve_action_id(const std::optional<std::string>& static_id,
                              const std::optional<std::string>& header_value) {
  if (static_id && !static_id->empty()) {
    return *static_id;
  }
  if (header_value && !header_value->empty()) {
    return *header_value;
  }
  return kUnattributed;
}

std::string denial_body(const std::optional<std::string>& scope, const std::optional<std::string>& required,
                        const std::optional<std::string>& granted) {
  auto opt = [](const std::optional<std::string>& v) -> nlohmann::json {
    return v ? nlohmann::json(*v) : nlohmann::json(nullptr);
  };
  const nlohmann::json body{
      {"message", kDenialMessage}, {"scope", opt(scope)}, {"required", opt(required)}, {"granted", opt(granted)}};
  return body.dump();
}

namespace {

struct CtxDeleter {
  void operator()(SSL_CTX* c) const { SSL_CTX_free(c); }
};

std::string simple_response(int status, std::string_view reason, std::string_view body,
                            const std::vector<net::Header>& extra = {}) {
  std::string out = "HTTP/1.1 " + std::to_string(status) + " " + std::string(reason) + "\r\n";
  out += "Content-Type: application/json\r\n";
  out += "Content-Length: " + std::to_string(body.size()) + "\r\n";
  out += net::serialize_headers(extra);
  out += "Connection: close\r\n\r\n";
  out += body;
  return out;
}

std::string error_body(std::string_view message) { return nlohmann::json{{"message", message}}.dump(); }

bool response_has_body(std::string_view request_method, int status) {
  return request_method != "HEAD" && !(status >= 100 && status < 200) && status != 204 && status != 304;
}

// Where a request is headed after CONNECT or absolute-form parsing.
struct Target {
  std::string scheme;
  std::string host;
  int port = 0;
  std::string path_and_query;

  std::string url() const {
    const bool default_port = (scheme == "http" && port == 80) || (scheme == "https" && port == 443);
    const bool v6 = host.find(':') != std::string::npos;
    std::string authority = v6 ? "[" + host + "]" : host;
    if (!default_port) {
      authority += ":" + std::to_string(port);
    }
    return scheme + "://" + authority + path_and_query;
  }
};

}  // namespace

struct EnforcementProxy::Impl {
  ProxyConfig config;
  std::optional<VerifierClient> verifier;
  std::unique_ptr<InterceptionAuthority> authority;
  std::unique_ptr<SSL_CTX, CtxDeleter> client_tls;
  net::Socket listener;
  int bound_port = 0;
  std::thread accept_thread;
  std::atomic<bool> stopping{false};
  std::atomic<std::uint64_t> verifier_calls{0};

  mutable std::mutex mutex;
  std::condition_variable idle;
  std::set<int> live_fds;
  std::size_t active = 0;
  std::vector<FlowRecord> flows;
  std::mutex log_mutex;

  std::mutex stop_mutex;
  std::condition_variable stopped_cv;
  bool stopped = false;

  explicit Impl(ProxyConfig cfg) : config(std::move(cfg)) {}

  bool intercepts(const std::string& host) const { return config.api_hosts.count(host) != 0; }

  void track(int fd) {
    std::lock_guard lock(mutex);
    live_fds.insert(fd);
  }
  void untrack(int fd) {
    std::lock_guard lock(mutex);
    live_fds.erase(fd);
  }

  void record(FlowRecord flow) {
    if (config.flow_log != nullptr) {
      std::lock_guard lock(log_mutex);
      *config.flow_log << to_json(flow).dump() << '\n';
      config.flow_log->flush();
    }
    std::lock_guard lock(mutex);
    flows.push_back(std::move(flow));
  }

  void accept_loop() {
    while (!stopping) {
      pollfd pfd{listener.fd(), POLLIN, 0};
      if (::poll(&pfd, 1, 100) <= 0) {
        continue;
      }
      const int fd = ::accept4(listener.fd(), nullptr, nullptr, SOCK_CLOEXEC);
      if (fd < 0) {
        continue;
      }
      {
        std::lock_guard lock(mutex);
        ++active;
        live_fds.insert(fd);
      }
      std::thread([this, fd] {
        {
          net::Socket client(fd);
          net::set_io_timeout(fd, 30s);
          try {
            handle_connection(client);
          } catch (const std::exception&) {
            // A broken flow must not take the proxy down.
          }
          untrack(fd);
        }
        std::lock_guard lock(mutex);
        --active;
        idle.notify_all();
      }).detach();
    }
  }

  void handle_connection(net::Socket& client) {
    net::PlainStream stream(client.fd());
    net::BufferedReader reader(stream);
    const auto raw = reader.read_head();
    if (!raw) {
      return;
    }
    const auto started = std::chrono::steady_clock::now();
    const auto head = net::parse_request_head(*raw);
    if (!head) {
      stream.write_all(simple_response(400, "Bad Request", error_body("malformed request")));
      return;
    }
    if (net::iequals(head->method, "CONNECT")) {
      handle_connect(client, stream, reader, *head, started);
      return;
    }
    Target target;
    if (auto url = net::parse_absolute_url(head->target)) {
      target = {url->scheme, url->host, url->port, url->path_and_query};
    } else if (!head->target.empty() && head->target.front() == '/') {
      // Origin form: the proxy is being used as a plain reverse hop.
      const auto host_header = net::find_header(head->headers, "Host");
      auto authority = host_header ? net::parse_authority(*host_header, 80) : std::nullopt;
      if (!authority) {
        stream.write_all(simple_response(400, "Bad Request", error_body("missing Host")));
        return;
      }
      target = {"http", authority->first, authority->second, head->target};
    } else {
      stream.write_all(simple_response(400, "Bad Request", error_body("unsupported request target")));
      return;
    }
    handle_request(stream, reader, *head, target, started);
  }

  void handle_connect(net::Socket& client, net::PlainStream& stream, net::BufferedReader& reader,
                      const net::RequestHead& head, std::chrono::steady_clock::time_point started) {
    const auto endpoint = net::parse_authority(head.target, 443);
    if (!endpoint) {
      stream.write_all(simple_response(400, "Bad Request", error_body("malformed CONNECT authority")));
      return;
    }
    const auto& [host, port] = *endpoint;
    FlowRecord flow;
    flow.request.method = "CONNECT";
    flow.request.host = host;
    flow.request.path = "/";
    flow.intercepted = intercepts(host);

    if (!flow.intercepted || !authority_available()) {
      if (flow.intercepted && config.mode == Mode::Enforcement) {
        // Cannot inspect the request, so it cannot be allowed.
        flow.allowed = false;
        flow.reason = "tls-interception-unavailable";
        flow.injected = true;
        flow.status = 403;
        stream.write_all(simple_response(403, "Forbidden", denial_body(std::nullopt, std::nullopt, std::nullopt),
                                         {{"X-Stepguard-Denied", "1"}}));
        flow.latency_ms = elapsed_ms(started);
        record(std::move(flow));
        return;
      }
      net::Socket upstream = net::connect_tcp(host, port, config.connect_timeout);
      if (!upstream.valid()) {
        flow.status = 502;
        flow.reason = "upstream-unreachable";
        stream.write_all(simple_response(502, "Bad Gateway", error_body("upstream unreachable")));
        flow.latency_ms = elapsed_ms(started);
        record(std::move(flow));
        return;
      }
      flow.tunneled = true;
      flow.reason = "tunnel";
      flow.status = 200;
      if (!stream.write_all("HTTP/1.1 200 Connection Established\r\n\r\n")) {
        return;
      }
      track(upstream.fd());
      net::set_io_timeout(client.fd(), 0ms);
      net::pipe_bidirectional(client.fd(), upstream.fd(), reader.take_buffered());
      untrack(upstream.fd());
      flow.latency_ms = elapsed_ms(started);
      record(std::move(flow));
      return;
    }

    if (!stream.write_all("HTTP/1.1 200 Connection Established\r\n\r\n")) {
      return;
    }
    if (!reader.take_buffered().empty()) {
      return;  // client spoke before the tunnel was up
    }
    net::SslPtr ssl(SSL_new(authority->server_context(host)));
    if (!ssl) {
      return;
    }
    SSL_set_fd(ssl.get(), client.fd());
    if (SSL_accept(ssl.get()) != 1) {
      ERR_clear_error();
      return;
    }
    net::TlsStream tls(std::move(ssl));
    net::BufferedReader tls_reader(tls);
    const auto raw = tls_reader.read_head();
    if (!raw) {
      return;
    }
    const auto inner_started = std::chrono::steady_clock::now();
    const auto inner = net::parse_request_head(*raw);
    if (!inner) {
      tls.write_all(simple_response(400, "Bad Request", error_body("malformed request")));
      return;
    }
    Target target{"https", host, port, inner->target};
    if (auto url = net::parse_absolute_url(inner->target)) {
      target.path_and_query = url->path_and_query;
    }
    if (target.path_and_query.empty() || target.path_and_query.front() != '/') {
      tls.write_all(simple_response(400, "Bad Request", error_body("unsupported request target")));
      return;
    }
    handle_request(tls, tls_reader, *inner, target, inner_started);
  }

  bool authority_available() const { return authority != nullptr; }

  static double elapsed_ms(std::chrono::steady_clock::time_point started) {
    return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - started).count();
  }

  void handle_request(net::Stream& client, net::BufferedReader& reader, const net::RequestHead& head,
                      const Target& target, std::chrono::steady_clock::time_point started) {
    FlowRecord flow;
    flow.request = RequestDescriptor::from_url(head.method, target.url());
    flow.intercepted = intercepts(target.host);
    std::vector<net::Header> headers = head.headers;

    const auto body = net::read_body(reader, headers, false);
    if (!body) {
      client.write_all(simple_response(400, "Bad Request", error_body("malformed request body")));
      return;
    }

    if (flow.intercepted) {
      const auto header_value = net::find_header(headers, config.action_header);
      net::remove_header(headers, config.action_header);
      flow.request.action_id = resolve_action_id(config.static_action_id, header_value);
      ++verifier_calls;
      const auto result = verifier->check(flow.request.action_id, flow.request.method, target.url());
      if (!result) {
        flow.allowed = false;
        flow.infrastructure_denial = true;
        flow.reason = "verifier-unavailable";
      } else {
        flow.allowed = result->allow;
        flow.reason = result->reason;
        flow.scope = result->scope;
        flow.required = result->level;
        flow.granted = result->granted;
        if (flow.request.action_id == kUnattributed && config.mode == Mode::Enforcement) {
          flow.allowed = false;
          flow.reason = "unattributed";
        }
        if (config.mode == Mode::Learning) {
          flow.allowed = true;
        }
      }
      if (!flow.allowed) {
        flow.injected = true;
        flow.status = 403;
        client.write_all(simple_response(403, "Forbidden", denial_body(flow.scope, flow.required, flow.granted),
                                         {{"X-Stepguard-Denied", "1"}}));
        flow.latency_ms = elapsed_ms(started);
        record(std::move(flow));
        return;
      }
    } else {
      flow.reason = "not-intercepted";
    }

    forward(client, head, headers, *body, target, flow);
    flow.latency_ms = elapsed_ms(started);
    record(std::move(flow));
  }

  std::unique_ptr<net::Stream> open_upstream(const Target& target, net::Socket& socket) {
    const bool fake = intercepts(target.host) && config.upstream.has_value();
    if (fake) {
      socket = net::connect_tcp(config.upstream->first, config.upstream->second, config.connect_timeout);
      return socket.valid() ? std::make_unique<net::PlainStream>(socket.fd()) : nullptr;
    }
    socket = net::connect_tcp(target.host, target.port, config.connect_timeout);
    if (!socket.valid()) {
      return nullptr;
    }
    if (target.scheme == "http") {
      return std::make_unique<net::PlainStream>(socket.fd());
    }
    net::SslPtr ssl(SSL_new(client_context()));
    SSL_set_fd(ssl.get(), socket.fd());
    SSL_set_tlsext_host_name(ssl.get(), target.host.c_str());
    SSL_set1_host(ssl.get(), target.host.c_str());
    if (SSL_connect(ssl.get()) != 1) {
      ERR_clear_error();
      return nullptr;
    }
    return std::make_unique<net::TlsStream>(std::move(ssl));
  }

  SSL_CTX* client_context() {
    std::lock_guard lock(mutex);
    if (!client_tls) {
      client_tls.reset(SSL_CTX_new(TLS_client_method()));
      SSL_CTX_set_default_verify_paths(client_tls.get());
      SSL_CTX_set_verify(client_tls.get(), SSL_VERIFY_PEER, nullptr);
      SSL_CTX_set_min_proto_version(client_tls.get(), TLS1_2_VERSION);
    }
    return client_tls.get();
  }

  void forward(net::Stream& client, const net::RequestHead& head, std::vector<net::Header> headers,
               const std::string& body, const Target& target, FlowRecord& flow) {
    net::Socket socket;
    auto upstream = open_upstream(target, socket);
    if (!upstream) {
      flow.status = 502;
      client.write_all(simple_response(502, "Bad Gateway", error_body("upstream unreachable")));
      return;
    }
    track(socket.fd());
    struct Untrack {
      Impl* self;
      int fd;
      ~Untrack() { self->untrack(fd); }
    } untrack_guard{this, socket.fd()};

    net::strip_hop_by_hop(headers);
    if (!net::find_header(headers, "Host")) {
      const bool v6 = target.host.find(':') != std::string::npos;
      headers.push_back({"Host", (v6 ? "[" + target.host + "]" : target.host) + ":" + std::to_string(target.port)});
    }
    headers.push_back({"Connection", "close"});
    std::string request = head.method + " " + target.path_and_query + " HTTP/1.1\r\n";
    request += net::serialize_headers(headers);
    request += "\r\n";
    request += body;
    if (!upstream->write_all(request)) {
      flow.status = 502;
      client.write_all(simple_response(502, "Bad Gateway", error_body("upstream write failed")));
      return;
    }

    net::BufferedReader upstream_reader(*upstream);
    std::optional<net::ResponseHead> response;
    std::string raw_head;
    // Interim 1xx responses are relayed as-is.
    for (;;) {
      auto raw = upstream_reader.read_head();
      if (!raw) {
        flow.status = 502;
        client.write_all(simple_response(502, "Bad Gateway", error_body("upstream closed without a response")));
        return;
      }
      response = net::parse_response_head(*raw);
      if (!response) {
        flow.status = 502;
        client.write_all(simple_response(502, "Bad Gateway", error_body("malformed upstream response")));
        return;
      }
      if (response->status >= 200 || response->status == 101) {
        break;
      }
      if (!client.write_all(*raw)) {
        return;
      }
    }
    flow.status = response->status;
    std::string response_body;
    if (response_has_body(head.method, response->status)) {
      auto relayed = net::read_body(upstream_reader, response->headers, true);
      if (!relayed) {
        flow.status = 502;
        client.write_all(simple_response(502, "Bad Gateway", error_body("malformed upstream body")));
        return;
      }
      response_body = std::move(*relayed);
    }
    auto out_headers = response->headers;
    net::strip_hop_by_hop(out_headers);
    out_headers.push_back({"Connection", "close"});
    std::string out = response->version + " " + std::to_string(response->status) + " " + response->reason + "\r\n";
    out += net::serialize_headers(out_headers);
    out += "\r\n";
    out += response_body;
    client.write_all(out);
  }
};

EnforcementProxy::EnforcementProxy(ProxyConfig config) : impl_(std::make_unique<Impl>(std::move(config))) {
  impl_->config.validate();
}

EnforcementProxy::~EnforcementProxy() {
  if (impl_->accept_thread.joinable()) {
    stop();
  }
}

void EnforcementProxy::start() {
  static std::once_flag sigpipe_once;
  std::call_once(sigpipe_once, [] { ::signal(SIGPIPE, SIG_IGN); });
  auto& impl = *impl_;
  impl.verifier.emplace(VerifierClient::from_endpoint(impl.config.verifier, impl.config.verifier_timeout));
  if (!impl.verifier->healthy()) {
    throw std::runtime_error("verifier at " + impl.config.verifier + " is not reachable");
  }
  if (impl.config.ca_cert) {
    impl.authority = std::make_unique<InterceptionAuthority>(*impl.config.ca_cert, *impl.config.ca_key);
  }
  auto [sock, port] = net::listen_tcp(impl.config.listen_host, impl.config.listen_port);
  impl.listener = std::move(sock);
  impl.bound_port = port;
  impl.stopping = false;
  impl.accept_thread = std::thread([&impl] { impl.accept_loop(); });
}

int EnforcementProxy::port() const { return impl_->bound_port; }

void EnforcementProxy::wait() {
  std::unique_lock lock(impl_->stop_mutex);
  impl_->stopped_cv.wait(lock, [&] { return impl_->stopped; });
}

void EnforcementProxy::stop() {
  auto& impl = *impl_;
  impl.stopping = true;
  if (impl.accept_thread.joinable()) {
    impl.accept_thread.join();
  }
  impl.listener.close();
  std::unique_lock lock(impl.mutex);
  if (!impl.idle.wait_for(lock, impl.config.grace_period, [&] { return impl.active == 0; })) {
    for (int fd : impl.live_fds) {
      ::shutdown(fd, SHUT_RDWR);
    }
    impl.idle.wait(lock, [&] { return impl.active == 0; });
  }
  lock.unlock();
  {
    std::lock_guard stop_lock(impl.stop_mutex);
    impl.stopped = true;
  }
  impl.stopped_cv.notify_all();
}

std::vector<FlowRecord> EnforcementProxy::flows() const {
  std::lock_guard lock(impl_->mutex);
  return impl_->flows;
}

std::uint64_t EnforcementProxy::verifier_calls() const { return impl_->verifier_calls; }

}  // namespace stepguard
