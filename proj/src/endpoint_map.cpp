#include "stepguard/endpoint_map.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <sstream>
#include <unordered_map>

namespace stepguard {

struct EndpointMap::Node {
  std::map<std::string, std::unique_ptr<Node>, std::less<>> literals;
  std::unique_ptr<Node> placeholder;
  std::map<std::string, std::size_t, std::less<>> methods;  // method -> entry index
};

namespace {

std::string to_lower(std::string_view text) {
  std::string out(text);
  std::transform(out.begin(), out.end(), out.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return out;
}

std::string to_upper(std::string_view text) {
  std::string out(text);
  std::transform(out.begin(), out.end(), out.begin(),
                 [](unsigned char c) { return static_cast<char>(std::toupper(c)); });
  return out;
}

int hex_value(char c) {
  if (c >= '0' && c <= '9') return c - '0';
  if (c >= 'a' && c <= 'f') return c - 'a' + 10;
  if (c >= 'A' && c <= 'F') return c - 'A' + 10;
  return -1;
}

std::optional<std::string> percent_decode(std::string_view raw) {
  std::string out;
  out.reserve(raw.size());
  for (std::size_t i = 0; i < raw.size(); ++i) {
    if (raw[i] != '%') {
      out.push_back(raw[i]);
      continue;
    }
    if (i + 2 >= raw.size()) {
      return std::nullopt;
    }
    const int hi = hex_value(raw[i + 1]);
    const int lo = hex_value(raw[i + 2]);
    if (hi < 0 || lo < 0) {
      return std::nullopt;
    }
    out.push_back(static_cast<char>(hi * 16 + lo));
    i += 2;
  }
  return out;
}

bool is_method_token(std::string_view method) {
  return !method.empty() && std::all_of(method.begin(), method.end(), [](unsigned char c) {
    return std::isupper(c) != 0 || c == '-' || c == '_';
  });
}

// Canonical text of a pattern with placeholder names erased: "/repos/{}/{}".
std::string pattern_key(const std::vector<PatternSegment>& segments) {
  std::string key;
  for (const auto& seg : segments) {
    key += '/';
    key += seg.placeholder ? "{}" : seg.literal;
  }
  return key.empty() ? "/" : key;
}

struct KeywordRule {
  std::string_view keyword;
  Scope scope;
};

constexpr KeywordRule kKeywordRules[] = {
    {"pulls", Scope::PullRequests},
    {"issues", Scope::Issues},
    {"contents", Scope::Contents},
    {"deployments", Scope::Deployments},
    {"check-runs", Scope::Checks},
    {"check-suites", Scope::Checks},
    {"statuses", Scope::Statuses},
    {"packages", Scope::Packages},
    {"code-scanning", Scope::SecurityEvents},
    {"actions", Scope::Actions},
    {"pages", Scope::Pages},
    {"discussions", Scope::Discussions},
    {"attestations", Scope::Attestations},
    {"projects", Scope::RepositoryProjects},
};

std::optional<Scope> keyword_scope(std::string_view segment) {
  for (const auto& rule : kKeywordRules) {
    if (rule.keyword == segment) {
      return rule.scope;
    }
  }
  return std::nullopt;
}

}  // namespace

EndpointMapError::EndpointMapError(const std::string& message, std::optional<std::size_t> entry_index)
    : std::runtime_error(entry_index ? "entry " + std::to_string(*entry_index) + ": " + message
                                     : message),
      entry_index_(entry_index) {}

RequestDescriptor RequestDescriptor::from_url(std::string_view method, std::string_view url,
                                              std::string action_id) {
  std::string_view rest = url;
  if (auto scheme = rest.find("://"); scheme != std::string_view::npos) {
    rest.remove_prefix(scheme + 3);
  }
  const auto path_start = rest.find_first_of("/?#");
  std::string_view authority = rest.substr(0, path_start);
  std::string_view tail = path_start == std::string_view::npos ? std::string_view{} : rest.substr(path_start);

  if (auto at = authority.rfind('@'); at != std::string_view::npos) {
    authority.remove_prefix(at + 1);
  }
  std::string_view host = authority;
  if (host.starts_with('[')) {
    const auto close = host.find(']');
    host = host.substr(1, close == std::string_view::npos ? std::string_view::npos : close - 1);
  } else if (auto colon = host.rfind(':'); colon != std::string_view::npos) {
    host = host.substr(0, colon);
  }
  if (host.empty()) {
    throw std::invalid_argument("URL has no host: " + std::string(url));
  }

  std::string_view path = tail.substr(0, tail.find_first_of("?#"));
  RequestDescriptor out;
  out.method = to_upper(method);
  out.host = to_lower(host);
  out.path = path.empty() ? "/" : std::string(path);
  out.action_id = std::move(action_id);
  return out;
}

std::ostream& operator<<(std::ostream& os, const InferredPermission& p) {
  switch (p.outcome) {
    case Outcome::Known: return os << "known(" << p.scope << ", " << p.level << ")";
    case Outcome::Unknown: return os << (p.graphql ? "unknown(graphql)" : "unknown");
    case Outcome::NotApi: return os << "not-api";
  }
  return os;
}

std::vector<std::string> normalize_path(std::string_view path) {
  std::vector<std::string> segments;
  std::size_t pos = 0;
  while (pos <= path.size()) {
    const auto next = std::min(path.find('/', pos), path.size());
    const std::string_view raw = path.substr(pos, next - pos);
    if (!raw.empty()) {
      auto decoded = percent_decode(raw);
      segments.push_back(decoded ? std::move(*decoded) : std::string(raw));
    }
    pos = next + 1;
  }
  return segments;
}

std::vector<PatternSegment> parse_pattern(std::string_view pattern) {
  if (!pattern.starts_with('/')) {
    throw std::invalid_argument("path pattern must start with '/': " + std::string(pattern));
  }
  std::vector<PatternSegment> out;
  for (auto& segment : normalize_path(pattern)) {
    if (segment.starts_with('{') || segment.ends_with('}')) {
      if (segment.size() < 3 || !segment.starts_with('{') || !segment.ends_with('}') ||
          segment.find_first_of("{}/", 1) != segment.size() - 1) {
        throw std::invalid_argument("malformed placeholder '" + segment + "'");
      }
      out.push_back({true, {}});
    } else {
      out.push_back({false, std::move(segment)});
    }
  }
  return out;
}

Level level_for_method(std::string_view method) {
  return method == "GET" || method == "HEAD" ? Level::Read : Level::Write;
}

InferredPermission infer_by_pattern(std::string_view method, const std::vector<std::string>& segs) {
  if (segs.empty()) {
    return InferredPermission::unknown();
  }
  const Level level = level_for_method(method);
  std::size_t first_keyword = 0;
  const std::string& family = segs[0];
  if (family == "repos") {
    first_keyword = 3;  // repos/{owner}/{repo}/...
  } else if (family == "orgs" || family == "users") {
    first_keyword = 2;
  } else if (family == "projects") {
    if (segs.size() >= 2) {
      return InferredPermission::known(Scope::RepositoryProjects, level);
    }
    return InferredPermission::unknown();
  } else {
    return InferredPermission::unknown();
  }
  for (std::size_t i = first_keyword; i < segs.size(); ++i) {
    if (auto scope = keyword_scope(segs[i])) {
      return InferredPermission::known(*scope, level);
    }
  }
  return InferredPermission::unknown();
}

EndpointMap::EndpointMap() : root_(std::make_unique<Node>()), api_hosts_{std::string(kDefaultApiHost)} {}
EndpointMap::~EndpointMap() = default;
EndpointMap::EndpointMap(EndpointMap&&) noexcept = default;
EndpointMap& EndpointMap::operator=(EndpointMap&&) noexcept = default;

void EndpointMap::add(const EndpointEntry& entry) {
  const std::optional<std::size_t> index = entries_.size();
  if (!is_method_token(entry.method)) {
    throw EndpointMapError("method must be an uppercase token, got '" + entry.method + "'", index);
  }
  if (entry.level == Level::None) {
    throw EndpointMapError("level must be read or write", index);
  }
  if (!level_valid_for(entry.scope, entry.level)) {
    throw EndpointMapError("scope 'id-token' does not admit level 'read'", index);
  }
  std::vector<PatternSegment> pattern;
  try {
    pattern = parse_pattern(entry.path_pattern);
  } catch (const std::invalid_argument& e) {
    throw EndpointMapError(e.what(), index);
  }

  Node* node = root_.get();
  for (const auto& seg : pattern) {
    std::unique_ptr<Node>* child = nullptr;
    if (seg.placeholder) {
      child = &node->placeholder;
    } else {
      child = &node->literals[seg.literal];
    }
    if (!*child) {
      *child = std::make_unique<Node>();
    }
    node = child->get();
  }
  if (node->methods.contains(entry.method)) {
    throw EndpointMapError("duplicate entry for (" + entry.method + ", " + pattern_key(pattern) + ")",
                           index);
  }
  node->methods.emplace(entry.method, entries_.size());
  entries_.push_back(entry);
}

bool EndpointMap::is_api_host(std::string_view host) const {
  return api_hosts_.contains(to_lower(host));
}

std::optional<std::size_t> EndpointMap::match_special(std::string_view method,
                                                      const std::vector<std::string>& segments) const {
  auto accept = [&](const Node& node) -> std::optional<std::size_t> {
    if (auto it = node.methods.find(method); it != node.methods.end()) {
      return it->second;
    }
    if (method == "HEAD") {
      if (auto it = node.methods.find("GET"); it != node.methods.end()) {
        return it->second;
      }
    }
    return std::nullopt;
  };

  // Depth-first, literal before placeholder.
  auto walk = [&](auto&& self, const Node& node, std::size_t depth) -> std::optional<std::size_t> {
    if (depth == segments.size()) {
      return accept(node);
    }
    const std::string& seg = segments[depth];
    if (auto it = node.literals.find(seg); it != node.literals.end()) {
      if (auto hit = self(self, *it->second, depth + 1)) {
        return hit;
      }
    }
    if (node.placeholder && !seg.empty()) {
      return self(self, *node.placeholder, depth + 1);
    }
    return std::nullopt;
  };
  return walk(walk, *root_, 0);
}

InferredPermission EndpointMap::infer(const RequestDescriptor& request) const {
  if (!is_api_host(request.host)) {
    return InferredPermission::not_api();
  }
  const std::string method = to_upper(request.method);
  const auto segments = normalize_path(request.path);
  if (segments.size() == 1 && segments[0] == "graphql") {
    InferredPermission out = InferredPermission::unknown();
    out.graphql = true;
    return out;
  }
  if (auto index = match_special(method, segments)) {
    const EndpointEntry& entry = entries_[*index];
    return InferredPermission::known(entry.scope, entry.level);
  }
  return infer_by_pattern(method, segments);
}

EndpointMap load_endpoint_map(std::string_view source) {
  std::vector<nlohmann::json> records;
  const auto first = source.find_first_not_of(" \t\r\n");
  if (first != std::string_view::npos && source[first] == '[') {
    nlohmann::json doc;
    try {
      doc = nlohmann::json::parse(source);
    } catch (const nlohmann::json::parse_error& e) {
      throw EndpointMapError(std::string("malformed document: ") + e.what(), std::nullopt);
    }
    for (auto& item : doc) {
      records.push_back(std::move(item));
    }
  } else {
    std::istringstream lines{std::string(source)};
    std::string line;
    while (std::getline(lines, line)) {
      const auto start = line.find_first_not_of(" \t\r");
      if (start == std::string::npos || line[start] == '#') {
        continue;
      }
      try {
        records.push_back(nlohmann::json::parse(line));
      } catch (const nlohmann::json::parse_error& e) {
        throw EndpointMapError(std::string("malformed record: ") + e.what(), records.size());
      }
    }
  }

  EndpointMap map;
  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto& rec = records[i];
    if (!rec.is_object()) {
      throw EndpointMapError("record must be an object", i);
    }
    for (const auto& [key, _] : rec.items()) {
      if (key != "method" && key != "path_pattern" && key != "scope" && key != "level") {
        throw EndpointMapError("unexpected field '" + key + "'", i);
      }
    }
    auto field = [&](const char* name) -> std::string {
      if (!rec.contains(name) || !rec[name].is_string()) {
        throw EndpointMapError(std::string("missing or non-string field '") + name + "'", i);
      }
      return rec[name].get<std::string>();
    };
    EndpointEntry entry;
    entry.method = field("method");
    entry.path_pattern = field("path_pattern");
    const std::string scope = field("scope");
    const std::string level = field("level");
    auto parsed_scope = parse_scope(scope);
    if (!parsed_scope) {
      throw EndpointMapError("unknown scope '" + scope + "'", i);
    }
    auto parsed_level = parse_level(level);
    if (!parsed_level) {
      throw EndpointMapError("invalid level '" + level + "'", i);
    }
    entry.scope = *parsed_scope;
    entry.level = *parsed_level;
    map.add(entry);
  }
  return map;
}

EndpointMap load_endpoint_map_file(const std::filesystem::path& file) {
  std::ifstream in(file, std::ios::binary);
  if (!in) {
    throw EndpointMapError("cannot read " + file.string(), std::nullopt);
  }
  std::ostringstream buffer;
  buffer << in.rdbuf();
  return load_endpoint_map(buffer.str());
}

EndpointMap seed_endpoint_map() { return load_endpoint_map(seed_endpoint_map_source()); }

}  // namespace stepguard
