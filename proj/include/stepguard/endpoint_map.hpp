#pragma once

#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "stepguard/permissions.hpp"

namespace stepguard {

inline constexpr std::string_view kDefaultApiHost = "api.github.com";

// Normalized (method, host, path, action) tuple of an outgoing request.
struct RequestDescriptor {
  std::string method;  // uppercase token
  std::string host;    // lowercase, no port
  std::string path;    // starts with '/', no query or fragment
  std::string action_id;

  // Builds a descriptor from a URL ("https://host[:port]/path?q", or
  // "host/path" without a scheme). Throws std::invalid_argument when no host
  // can be extracted.
  static RequestDescriptor from_url(std::string_view method, std::string_view url,
                                    std::string action_id = {});
};

enum class Outcome { Known, Unknown, NotApi };

struct InferredPermission {
  Outcome outcome = Outcome::Unknown;
  Scope scope = Scope::Contents;  // meaningful only when Known
  Level level = Level::None;      // Read or Write when Known
  bool graphql = false;           // Unknown because the request targets /graphql

  static InferredPermission known(Scope s, Level l) { return {Outcome::Known, s, l, false}; }
  static InferredPermission unknown() { return {}; }
  static InferredPermission not_api() { return {Outcome::NotApi, Scope::Contents, Level::None, false}; }

  bool is_known() const { return outcome == Outcome::Known; }
  friend bool operator==(const InferredPermission&, const InferredPermission&) = default;
};

std::ostream& operator<<(std::ostream& os, const InferredPermission& p);

// One special-case entry: METHOD /literal/{placeholder}/... -> (scope, level).
struct EndpointEntry {
  std::string method;
  std::string path_pattern;
  Scope scope = Scope::Contents;
  Level level = Level::Read;
};

class EndpointMapError : public std::runtime_error {
 public:
  EndpointMapError(const std::string& message, std::optional<std::size_t> entry_index);
  std::optional<std::size_t> entry_index() const { return entry_index_; }

 private:
  std::optional<std::size_t> entry_index_;
};

// Splits a normalized path into its segments. Trailing slashes and empty
// segments are dropped and each segment is percent-decoded (segments with an
// invalid escape are kept raw).
std::vector<std::string> normalize_path(std::string_view path);

// Segment of a path pattern. Placeholders match exactly one nonempty segment.
struct PatternSegment {
  bool placeholder = false;
  std::string literal;  // empty for placeholders
};
std::vector<PatternSegment> parse_pattern(std::string_view pattern);

// Special-case trie plus the fixed family/keyword fallback rules.
//
// Trie lookup prefers a literal child over a placeholder child at every depth
// and backtracks when the literal branch has no accepting node for the
// method. HEAD requests use GET entries when no HEAD entry exists.
class EndpointMap {
 public:
  EndpointMap();
  ~EndpointMap();
  EndpointMap(EndpointMap&&) noexcept;
  EndpointMap& operator=(EndpointMap&&) noexcept;
  EndpointMap(const EndpointMap&) = delete;
  EndpointMap& operator=(const EndpointMap&) = delete;

  // Throws EndpointMapError on a duplicate (pattern, method) or invalid entry.
  void add(const EndpointEntry& entry);

  const std::vector<EndpointEntry>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }

  void set_api_hosts(std::set<std::string> hosts) { api_hosts_ = std::move(hosts); }
  const std::set<std::string>& api_hosts() const { return api_hosts_; }
  bool is_api_host(std::string_view host) const;

  // Index into entries() of the trie match, if any.
  std::optional<std::size_t> match_special(std::string_view method,
                                           const std::vector<std::string>& segments) const;

  InferredPermission infer(const RequestDescriptor& request) const;

 private:
  struct Node;
  std::unique_ptr<Node> root_;
  std::vector<EndpointEntry> entries_;
  std::set<std::string> api_hosts_;
};

// Fallback family/keyword rules on already-normalized segments; Unknown when
// no family or keyword applies.
InferredPermission infer_by_pattern(std::string_view method, const std::vector<std::string>& segments);

// Read for GET/HEAD, write for everything else.
Level level_for_method(std::string_view method);

// Parses the endpoint-map format: a JSON array of records, or JSON Lines with
// one record per line. Blank lines and lines starting with '#' are skipped in
// JSON Lines form.
EndpointMap load_endpoint_map(std::string_view source);
EndpointMap load_endpoint_map_file(const std::filesystem::path& file);

// The seed map compiled into the library.
EndpointMap seed_endpoint_map();
std::string_view seed_endpoint_map_source();

}  // namespace stepguard
