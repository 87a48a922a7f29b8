#include "stepguard/verifier.hpp"

#include <atomic>
#include <condition_variable>
#include <iomanip>
#include <set>
#include <sstream>
#include <thread>

#include <httplib.h>

namespace stepguard {
namespace fs = std::filesystem;
namespace {

std::string iso_timestamp(std::chrono::system_clock::time_point tp) {
  const auto secs = std::chrono::time_point_cast<std::chrono::seconds>(tp);
  const auto millis = std::chrono::duration_cast<std::chrono::milliseconds>(tp - secs).count();
  const std::time_t t = std::chrono::system_clock::to_time_t(secs);
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::ostringstream out;
  out << std::put_time(&tm, "%Y-%m-%dT%H:%M:%S") << '.' << std::setw(3) << std::setfill('0') << millis
      << 'Z';
  return out.str();
}

std::optional<std::string> version_of(std::string_view action_id) {
  const auto at = action_id.find('@');
  if (at == std::string_view::npos || at + 1 == action_id.size()) {
    return std::nullopt;
  }
  return std::string(action_id.substr(at + 1));
}

}  // namespace

std::string_view to_string(Mode mode) { return mode == Mode::Learning ? "learn" : "enforce"; }
std::string_view to_string(Verdict verdict) { return verdict == Verdict::Allow ? "allow" : "deny"; }

std::string_view to_string(Reason reason) {
  switch (reason) {
    case Reason::PolicySatisfied: return "policy-satisfied";
    case Reason::PolicyInsufficient: return "policy-insufficient";
    case Reason::NoPolicy: return "no-policy";
    case Reason::UnknownEndpoint: return "unknown-endpoint";
    case Reason::LearningModeAllow: return "learning-mode-allow";
  }
  return "no-policy";
}

std::optional<Mode> parse_mode(std::string_view text) {
  if (text == "enforce" || text == "enforcement") return Mode::Enforcement;
  if (text == "learn" || text == "learning") return Mode::Learning;
  return std::nullopt;
}

Decision verify(const RequestDescriptor& request, const KnowledgeBase& kb, const EndpointMap& map,
                Mode mode, const VerifyOptions& options) {
  Decision d;
  d.timestamp = std::chrono::system_clock::now();
  d.action_id = canonical_action_id(request.action_id);
  d.inferred = map.infer(request);

  const StepPolicy* policy = kb.lookup(d.action_id);
  if (policy != nullptr && d.inferred.is_known()) {
    d.granted = policy->permissions[d.inferred.scope];
  }

  if (mode == Mode::Learning) {
    d.verdict = Verdict::Allow;
    d.reason = Reason::LearningModeAllow;
    return d;
  }

  switch (d.inferred.outcome) {
    case Outcome::NotApi:
      d.verdict = Verdict::Allow;
      d.reason = Reason::PolicySatisfied;
      break;
    case Outcome::Unknown:
      d.verdict = options.allow_unknown ? Verdict::Allow : Verdict::Deny;
      d.reason = Reason::UnknownEndpoint;
      break;
    case Outcome::Known:
      if (policy == nullptr) {
        d.verdict = Verdict::Deny;
        d.reason = Reason::NoPolicy;
      } else if (level_allows(*d.granted, d.inferred.level)) {
        d.verdict = Verdict::Allow;
        d.reason = Reason::PolicySatisfied;
      } else {
        d.verdict = Verdict::Deny;
        d.reason = Reason::PolicyInsufficient;
      }
      break;
  }
  return d;
}

void ObservationLog::record(const RequestDescriptor& request, const Decision& decision) {
  const auto& inferred = decision.inferred;
  std::lock_guard lock(mutex_);
  if (inferred.outcome == Outcome::Unknown) {
    unknown_.push_back({decision.action_id, request.method, request.host, request.path, inferred.graphql});
    return;
  }
  if (!inferred.is_known()) {
    return;
  }
  Key key{decision.action_id, inferred.scope, inferred.level, request.method, request.path};
  Entry& entry = counters_[key];
  if (auto version = version_of(request.action_id)) {
    entry.version = std::move(version);
  }
  ++entry.count;
}

std::vector<Observation> ObservationLog::observations() const {
  std::lock_guard lock(mutex_);
  std::vector<Observation> out;
  out.reserve(counters_.size());
  for (const auto& [key, entry] : counters_) {
    const auto& [action, scope, level, method, path] = key;
    out.push_back({action, entry.version, scope, level, method, path, entry.count});
  }
  return out;
}

std::vector<UnknownRequest> ObservationLog::unknown_requests() const {
  std::lock_guard lock(mutex_);
  return unknown_;
}

std::size_t ObservationLog::size() const {
  std::lock_guard lock(mutex_);
  return counters_.size();
}

std::uint64_t ObservationLog::total_count() const {
  std::lock_guard lock(mutex_);
  std::uint64_t total = 0;
  for (const auto& [_, entry] : counters_) {
    total += entry.count;
  }
  return total;
}

std::vector<StepPolicy> derive_policies(const std::vector<Observation>& observations) {
  std::map<std::string, PermissionSet> merged;
  for (const auto& obs : observations) {
    PermissionSet& set = merged[obs.action_id];
    if (obs.level > set[obs.scope]) {
      set.set(obs.scope, obs.level);
    }
  }
  std::vector<StepPolicy> out;
  out.reserve(merged.size());
  for (auto& [action, set] : merged) {
    out.push_back({action, set});
  }
  return out;
}

std::vector<StepPolicy> derive_policies(const ObservationLog& log) {
  return derive_policies(log.observations());
}

nlohmann::json decision_to_json(const Decision& d) {
  nlohmann::json out;
  out["timestamp"] = iso_timestamp(d.timestamp);
  out["action_id"] = d.action_id;
  out["verdict"] = std::string(to_string(d.verdict));
  out["reason"] = std::string(to_string(d.reason));
  std::ostringstream inferred;
  inferred << d.inferred;
  out["inferred"] = inferred.str();
  out["granted"] = d.granted ? nlohmann::json(std::string(to_string(*d.granted))) : nlohmann::json(nullptr);
  return out;
}

void AuditLog::write(const RequestDescriptor& request, const Decision& decision) {
  if (sink_ == nullptr) {
    return;
  }
  nlohmann::json line = decision_to_json(decision);
  line["method"] = request.method;
  line["host"] = request.host;
  line["path"] = request.path;
  std::lock_guard lock(mutex_);
  *sink_ << line.dump() << '\n';
  sink_->flush();
}

nlohmann::json verify_response(const Decision& d) {
  nlohmann::json out;
  out["allow"] = d.allowed();
  out["reason"] = std::string(to_string(d.reason));
  if (d.inferred.is_known()) {
    out["scope"] = std::string(to_string(d.inferred.scope));
    out["level"] = std::string(to_string(d.inferred.level));
  } else {
    out["scope"] = nullptr;
    out["level"] = nullptr;
  }
  out["granted"] = d.granted ? nlohmann::json(std::string(to_string(*d.granted))) : nlohmann::json(nullptr);
  return out;
}

struct VerifierService::Impl {
  explicit Impl(VerifierConfig cfg) : config(std::move(cfg)), audit(config.audit_sink) {}

  VerifierConfig config;
  AuditLog audit;
  ObservationLog log;
  httplib::Server server;
  std::thread thread;
  int port = 0;
  std::atomic<std::uint64_t> requests{0};
  std::atomic<std::uint64_t> graphql{0};
  std::mutex state_mutex;
  std::condition_variable stopped_cv;
  bool stopped = false;

  void handle_verify(const httplib::Request& req, httplib::Response& res) {
    nlohmann::json body;
    try {
      body = nlohmann::json::parse(req.body);
    } catch (const nlohmann::json::parse_error& e) {
      protocol_error(res, std::string("malformed JSON: ") + e.what());
      return;
    }
    if (!body.is_object()) {
      protocol_error(res, "request body must be an object");
      return;
    }
    for (const char* field : {"action_id", "method", "url"}) {
      if (!body.contains(field) || !body[field].is_string()) {
        protocol_error(res, std::string("missing or non-string field '") + field + "'");
        return;
      }
    }
    RequestDescriptor request;
    try {
      request = RequestDescriptor::from_url(body["method"].get<std::string>(), body["url"].get<std::string>(),
                                            body["action_id"].get<std::string>());
    } catch (const std::invalid_argument& e) {
      protocol_error(res, e.what());
      return;
    }
    ++requests;
    const Decision decision = verify(request, config.knowledge, config.endpoints, config.mode, config.options);
    if (decision.inferred.graphql) {
      ++graphql;
    }
    if (config.mode == Mode::Learning) {
      log.record(request, decision);
    }
    audit.write(request, decision);
    res.set_content(verify_response(decision).dump(), "application/json");
  }

  static void protocol_error(httplib::Response& res, const std::string& message) {
    res.status = 400;
    res.set_content(nlohmann::json{{"error", message}}.dump(), "application/json");
  }
};

VerifierService::VerifierService(VerifierConfig config) : impl_(std::make_unique<Impl>(std::move(config))) {
  impl_->server.Post("/v1/verify", [this](const httplib::Request& req, httplib::Response& res) {
    impl_->handle_verify(req, res);
  });
  impl_->server.Get("/v1/health", [this](const httplib::Request&, httplib::Response& res) {
    nlohmann::json body{{"status", "ok"}, {"mode", std::string(to_string(impl_->config.mode))}};
    res.set_content(body.dump(), "application/json");
  });
}

VerifierService::~VerifierService() {
  if (impl_ && impl_->thread.joinable()) {
    stop();
  }
}

void VerifierService::start(const std::string& host, int port) {
  auto& server = impl_->server;
  if (port == 0) {
    impl_->port = server.bind_to_any_port(host);
  } else {
    impl_->port = server.bind_to_port(host, port) ? port : -1;
  }
  if (impl_->port <= 0) {
    throw std::runtime_error("verifier: cannot bind " + host + ":" + std::to_string(port));
  }
  impl_->thread = std::thread([this] { impl_->server.listen_after_bind(); });
  impl_->server.wait_until_ready();
}

int VerifierService::port() const { return impl_->port; }

void VerifierService::wait() {
  std::unique_lock lock(impl_->state_mutex);
  impl_->stopped_cv.wait(lock, [this] { return impl_->stopped; });
}

std::vector<fs::path> VerifierService::stop() {
  impl_->server.stop();
  if (impl_->thread.joinable()) {
    impl_->thread.join();
  }
  std::vector<fs::path> written;
  if (impl_->config.mode == Mode::Learning && impl_->config.knowledge_dir) {
    fs::create_directories(*impl_->config.knowledge_dir);
    for (StepPolicy policy : derive_policies(impl_->log)) {
      if (const StepPolicy* existing = impl_->config.knowledge.lookup(policy.action_id)) {
        policy.permissions = unite(policy.permissions, existing->permissions);
      }
      written.push_back(save_policy(*impl_->config.knowledge_dir, policy));
    }
  }
  {
    std::lock_guard lock(impl_->state_mutex);
    impl_->stopped = true;
  }
  impl_->stopped_cv.notify_all();
  return written;
}

const ObservationLog& VerifierService::observations() const { return impl_->log; }
std::uint64_t VerifierService::request_count() const { return impl_->requests; }
std::uint64_t VerifierService::graphql_count() const { return impl_->graphql; }

std::pair<std::string, int> split_host_port(std::string_view address) {
  if (address.starts_with("http://")) {
    address.remove_prefix(7);
  }
  while (address.ends_with('/')) {
    address.remove_suffix(1);
  }
  const auto colon = address.rfind(':');
  if (colon == std::string_view::npos || colon == 0 || colon + 1 == address.size()) {
    throw std::invalid_argument("expected host:port, got '" + std::string(address) + "'");
  }
  int port = 0;
  try {
    std::size_t used = 0;
    port = std::stoi(std::string(address.substr(colon + 1)), &used);
    if (used != address.size() - colon - 1) {
      throw std::invalid_argument("trailing characters");
    }
  } catch (const std::exception&) {
    throw std::invalid_argument("invalid port in '" + std::string(address) + "'");
  }
  if (port <= 0 || port > 65535) {
    throw std::invalid_argument("port out of range in '" + std::string(address) + "'");
  }
  std::string host(address.substr(0, colon));
  if (host.size() > 2 && host.front() == '[' && host.back() == ']') {
    host = host.substr(1, host.size() - 2);
  }
  return {host, port};
}

VerifierClient::VerifierClient(std::string host, int port, std::chrono::milliseconds timeout)
    : host_(std::move(host)), port_(port), timeout_(timeout) {}

VerifierClient VerifierClient::from_endpoint(std::string_view endpoint, std::chrono::milliseconds timeout) {
  auto [host, port] = split_host_port(endpoint);
  return VerifierClient(std::move(host), port, timeout);
}

std::optional<VerifierClient::Result> VerifierClient::check(std::string_view action_id, std::string_view method,
                                                            std::string_view url) const {
  httplib::Client client(host_, port_);
  client.set_connection_timeout(timeout_);
  client.set_read_timeout(timeout_);
  client.set_write_timeout(timeout_);
  const nlohmann::json body{{"action_id", action_id}, {"method", method}, {"url", url}};
  auto res = client.Post("/v1/verify", body.dump(), "application/json");
  if (!res || res->status != 200) {
    return std::nullopt;
  }
  try {
    const auto doc = nlohmann::json::parse(res->body);
    Result out;
    out.allow = doc.at("allow").get<bool>();
    out.reason = doc.at("reason").get<std::string>();
    auto opt = [&](const char* key) -> std::optional<std::string> {
      if (doc.contains(key) && doc[key].is_string()) {
        return doc[key].get<std::string>();
      }
      return std::nullopt;
    };
    out.scope = opt("scope");
    out.level = opt("level");
    out.granted = opt("granted");
    return out;
  } catch (const nlohmann::json::exception&) {
    return std::nullopt;
  }
}

bool VerifierClient::healthy() const {
  httplib::Client client(host_, port_);
  client.set_connection_timeout(timeout_);
  client.set_read_timeout(timeout_);
  auto res = client.Get("/v1/health");
  return res && res->status == 200;
}

}  // namespace stepguard
