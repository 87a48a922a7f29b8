#pragma once

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <ostream>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "stepguard/endpoint_map.hpp"
#include "stepguard/verifier.hpp"

namespace stepguard {

inline constexpr const char* kDefaultActionHeader = "X-Stepguard-Action";
inline constexpr const char* kUnattributed = "unattributed";
inline constexpr const char* kDenialMessage = "Blocked by step-level permission policy";

struct ProxyConfig {
  std::string listen_host = "127.0.0.1";
  int listen_port = 0;  // 0 picks a free port
  std::set<std::string> api_hosts{std::string(kDefaultApiHost)};
  // Plain-HTTP fake API server that replaces every intercepted host. When
  // absent, intercepted traffic goes to the real host (TLS for https).
  std::optional<std::pair<std::string, int>> upstream;
  std::optional<std::filesystem::path> ca_cert;
  std::optional<std::filesystem::path> ca_key;
  std::string verifier = "127.0.0.1:8181";
  std::optional<std::string> static_action_id;
  std::string action_header = kDefaultActionHeader;
  Mode mode = Mode::Enforcement;
  std::chrono::milliseconds grace_period{5000};
  std::chrono::milliseconds verifier_timeout{2000};
  std::chrono::milliseconds connect_timeout{5000};
  std::ostream* flow_log = nullptr;  // JSON Lines

  // Throws std::invalid_argument.
  void validate() const;
};

struct FlowRecord {
  RequestDescriptor request;
  bool intercepted = false;
  bool tunneled = false;  // CONNECT relayed without inspection
  bool allowed = true;
  std::string reason;  // verifier reason, or a proxy-local one
  std::optional<std::string> scope;
  std::optional<std::string> required;
  std::optional<std::string> granted;
  bool infrastructure_denial = false;
  int status = 0;  // upstream status, or the synthesized one
  bool injected = false;
  double latency_ms = 0.0;
};

nlohmann::json to_json(const FlowRecord& flow);

// Static id, then the attribution header, then "unattributed".
std::string resolve_action_id(const std::optional<std::string>& static_id,
                              const std::optional<std::string>& header_value);

// Body of the synthesized 403.
std::string denial_body(const std::optional<std::string>& scope, const std::optional<std::string>& required,
                        const std::optional<std::string>& granted);

// Forward proxy (absolute-form HTTP and CONNECT) that gates requests to the
// API hosts on the verification service.
class EnforcementProxy {
 public:
  explicit EnforcementProxy(ProxyConfig config);
  ~EnforcementProxy();
  EnforcementProxy(const EnforcementProxy&) = delete;
  EnforcementProxy& operator=(const EnforcementProxy&) = delete;

  // Health-checks the verifier, loads the CA, binds and starts accepting.
  // Throws std::runtime_error.
  void start();
  int port() const;
  // Blocks until stop() is called elsewhere.
  void wait();
  // Stops accepting and waits up to the grace period for in-flight flows
  // before cutting them off.
  void stop();

  std::vector<FlowRecord> flows() const;
  std::uint64_t verifier_calls() const;

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace stepguard
