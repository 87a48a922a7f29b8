#pragma once

#include <chrono>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <ostream>
#include <string>
#include <string_view>
#include <tuple>
#include <vector>

#include "stepguard/endpoint_map.hpp"
#include "stepguard/policy_store.hpp"

namespace stepguard {

enum class Mode { Enforcement, Learning };

enum class Verdict { Allow, Deny };

enum class Reason {
  PolicySatisfied,
  PolicyInsufficient,
  NoPolicy,
  UnknownEndpoint,
  LearningModeAllow,
};

std::string_view to_string(Mode mode);
std::string_view to_string(Verdict verdict);
std::string_view to_string(Reason reason);
std::optional<Mode> parse_mode(std::string_view text);

struct Decision {
  Verdict verdict = Verdict::Deny;
  Reason reason = Reason::NoPolicy;
  InferredPermission inferred;
  std::string action_id;
  // Level the policy grants on the inferred scope; absent when there is no
  // policy or the inference is not Known.
  std::optional<Level> granted;
  std::chrono::system_clock::time_point timestamp;

  bool allowed() const { return verdict == Verdict::Allow; }
};

struct VerifyOptions {
  // Relax unknown-endpoint denials to allow-with-warning (Enforcement only).
  bool allow_unknown = false;
};

// Pure decision function. In Learning mode every request is allowed; the
// caller records the decision with ObservationLog::record.
Decision verify(const RequestDescriptor& request, const KnowledgeBase& kb, const EndpointMap& map,
                Mode mode, const VerifyOptions& options = {});

struct Observation {
  std::string action_id;  // canonical
  std::optional<std::string> action_version;
  Scope scope = Scope::Contents;
  Level level = Level::Read;
  std::string method;
  std::string path;
  std::uint64_t count = 0;
};

struct UnknownRequest {
  std::string action_id;
  std::string method;
  std::string host;
  std::string path;
  bool graphql = false;
};

// Thread-safe accumulator of learning-mode traffic.
class ObservationLog {
 public:
  // Known inferences increment the (action, scope, level, method, path)
  // counter; Unknown inferences go to the unknown log; NotApi is ignored.
  void record(const RequestDescriptor& request, const Decision& decision);

  std::vector<Observation> observations() const;
  std::vector<UnknownRequest> unknown_requests() const;
  std::size_t size() const;
  std::uint64_t total_count() const;

 private:
  using Key = std::tuple<std::string, Scope, Level, std::string, std::string>;
  struct Entry {
    std::optional<std::string> version;
    std::uint64_t count = 0;
  };
  mutable std::mutex mutex_;
  std::map<Key, Entry> counters_;
  std::vector<UnknownRequest> unknown_;
};

// Minimal policy per action: pointwise union of every observed (scope, level).
std::vector<StepPolicy> derive_policies(const ObservationLog& log);
std::vector<StepPolicy> derive_policies(const std::vector<Observation>& observations);

// Append-only JSON Lines audit trail; safe for concurrent writers.
class AuditLog {
 public:
  explicit AuditLog(std::ostream* sink = nullptr) : sink_(sink) {}
  void write(const RequestDescriptor& request, const Decision& decision);

 private:
  std::mutex mutex_;
  std::ostream* sink_;
};

nlohmann::json decision_to_json(const Decision& decision);

// Wire response body of POST /v1/verify.
nlohmann::json verify_response(const Decision& decision);

struct VerifierConfig {
  KnowledgeBase knowledge;
  EndpointMap endpoints;
  Mode mode = Mode::Enforcement;
  VerifyOptions options;
  // Learning mode: where derived policies are flushed on shutdown.
  std::optional<std::filesystem::path> knowledge_dir;
  std::ostream* audit_sink = nullptr;
};

// Local HTTP service speaking the verification wire protocol:
//   POST /v1/verify  {"action_id", "method", "url"} ->
//                    {"allow", "reason", "scope", "level", "granted"}
//   GET  /v1/health  -> {"status": "ok", "mode": ...}
class VerifierService {
 public:
  explicit VerifierService(VerifierConfig config);
  ~VerifierService();
  VerifierService(const VerifierService&) = delete;
  VerifierService& operator=(const VerifierService&) = delete;

  // Binds and starts serving on a background thread. Port 0 picks a free
  // port. Throws std::runtime_error on bind failure.
  void start(const std::string& host, int port);
  int port() const;

  // Blocks the calling thread until stop() is called from elsewhere.
  void wait();

  // Stops accepting, waits for in-flight checks, and in Learning mode writes
  // derived policies (merged with any preloaded policy) to knowledge_dir.
  // Returns the files written.
  std::vector<std::filesystem::path> stop();

  const ObservationLog& observations() const;
  std::uint64_t request_count() const;
  std::uint64_t graphql_count() const;

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

// Blocking client for the verification service; safe for concurrent use.
class VerifierClient {
 public:
  VerifierClient(std::string host, int port, std::chrono::milliseconds timeout = std::chrono::seconds(2));

  struct Result {
    bool allow = false;
    std::string reason;
    std::optional<std::string> scope;
    std::optional<std::string> level;
    std::optional<std::string> granted;
  };

  // std::nullopt on transport or protocol failure.
  std::optional<Result> check(std::string_view action_id, std::string_view method,
                              std::string_view url) const;
  bool healthy() const;

  // "host:port", or "http://host:port".
  static VerifierClient from_endpoint(std::string_view endpoint,
                                      std::chrono::milliseconds timeout = std::chrono::seconds(2));

 private:
  std::string host_;
  int port_;
  std::chrono::milliseconds timeout_;
};

// Splits "host:port" (optionally prefixed with "http://"). Throws
// std::invalid_argument on a malformed address.
std::pair<std::string, int> split_host_port(std::string_view address);

}  // namespace stepguard
