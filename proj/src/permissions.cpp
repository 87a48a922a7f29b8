#include "stepguard/permissions.hpp"

#include <algorithm>

namespace stepguard {
namespace {

constexpr std::array<std::string_view, kScopeCount> kScopeNames = {
    "contents", "deployments",         "packages",     "pull-requests", "security-events",
    "actions",  "checks",              "statuses",     "issues",        "repository-projects",
    "attestations", "id-token",        "discussions",  "pages",
};

struct RiskRow {
  Severity read;
  Severity write;
};

// Indexed by Scope.
constexpr std::array<RiskRow, kScopeCount> kRiskTable = {{
    {Severity::Low, Severity::Critical},               // contents
    {Severity::Low, Severity::Critical},               // deployments
    {Severity::Low, Severity::High},                   // packages
    {Severity::Low, Severity::High},                   // pull-requests
    {Severity::Medium, Severity::High},                // security-events
    {Severity::Low, Severity::High},                   // actions
    {Severity::Low, Severity::Medium},                 // checks
    {Severity::Low, Severity::Medium},                 // statuses
    {Severity::Low, Severity::Low},                    // issues
    {Severity::Low, Severity::Low},                    // repository-projects
    {Severity::Low, Severity::Medium},                 // attestations
    {Severity::NotApplicable, Severity::Critical},     // id-token
    {Severity::Low, Severity::Low},                    // discussions
    {Severity::Low, Severity::Medium},                 // pages
}};

}  // namespace

std::string_view to_string(Scope scope) { return kScopeNames[static_cast<std::size_t>(scope)]; }

std::string_view to_string(Level level) {
  switch (level) {
    case Level::None: return "none";
    case Level::Read: return "read";
    case Level::Write: return "write";
  }
  return "none";
}

std::string_view to_string(Severity severity) {
  switch (severity) {
    case Severity::Low: return "Low";
    case Severity::Medium: return "Medium";
    case Severity::High: return "High";
    case Severity::Critical: return "Critical";
    case Severity::NotApplicable: return "NotApplicable";
  }
  return "NotApplicable";
}

std::optional<Scope> parse_scope(std::string_view name) {
  const auto* it = std::find(kScopeNames.begin(), kScopeNames.end(), name);
  if (it == kScopeNames.end()) {
    return std::nullopt;
  }
  return static_cast<Scope>(it - kScopeNames.begin());
}

std::optional<Level> parse_level(std::string_view name) {
  if (name == "none") return Level::None;
  if (name == "read") return Level::Read;
  if (name == "write") return Level::Write;
  return std::nullopt;
}

PermissionSet PermissionSet::from_map(const std::map<Scope, Level>& entries) {
  PermissionSet result;
  for (const auto& [scope, level] : entries) {
    result.set(scope, level);
  }
  return result;
}

PermissionSet PermissionSet::uniform(Level level) {
  PermissionSet result;
  for (Scope s : kAllScopes) {
    // id-token cannot be read; a uniform read set leaves it at none.
    result.levels_[index(s)] = level_valid_for(s, level) ? level : Level::None;
  }
  return result;
}

PermissionSet& PermissionSet::set(Scope scope, Level level) {
  if (!level_valid_for(scope, level)) {
    throw PermissionError("scope 'id-token' does not admit level 'read'");
  }
  levels_[index(scope)] = level;
  return *this;
}

bool PermissionSet::is_none() const {
  return std::all_of(levels_.begin(), levels_.end(), [](Level l) { return l == Level::None; });
}

bool PermissionSet::has_write() const {
  return std::any_of(levels_.begin(), levels_.end(), [](Level l) { return l == Level::Write; });
}

std::map<Scope, Level> PermissionSet::sparse() const {
  std::map<Scope, Level> out;
  for (Scope s : kAllScopes) {
    if (get(s) != Level::None) {
      out.emplace(s, get(s));
    }
  }
  return out;
}

bool set_allows(const PermissionSet& granted, const PermissionSet& required) {
  return std::all_of(kAllScopes.begin(), kAllScopes.end(),
                     [&](Scope s) { return level_allows(granted[s], required[s]); });
}

PermissionSet unite(const PermissionSet& a, const PermissionSet& b) {
  PermissionSet out;
  for (Scope s : kAllScopes) {
    out.set(s, std::max(a[s], b[s]));
  }
  return out;
}

Severity severity_of(Scope scope, Level level) {
  const RiskRow& row = kRiskTable[static_cast<std::size_t>(scope)];
  switch (level) {
    case Level::Read: return row.read;
    case Level::Write: return row.write;
    case Level::None: break;
  }
  throw PermissionError("severity is undefined for level 'none'");
}

nlohmann::json to_json(const PermissionSet& set) {
  nlohmann::json out = nlohmann::json::object();
  for (const auto& [scope, level] : set.sparse()) {
    out[std::string(to_string(scope))] = std::string(to_string(level));
  }
  return out;
}

PermissionSet permission_set_from_json(const nlohmann::json& doc) {
  if (!doc.is_object()) {
    throw PermissionError("permission block must be an object");
  }
  PermissionSet out;
  for (const auto& [key, value] : doc.items()) {
    auto scope = parse_scope(key);
    if (!scope) {
      throw PermissionError("unknown permission scope '" + key + "'");
    }
    if (!value.is_string()) {
      throw PermissionError("level for scope '" + key + "' must be a string");
    }
    const auto& text = value.get_ref<const std::string&>();
    auto level = parse_level(text);
    if (!level) {
      throw PermissionError("invalid level '" + text + "' for scope '" + key + "'");
    }
    out.set(*scope, *level);
  }
  return out;
}

std::ostream& operator<<(std::ostream& os, const PermissionSet& set) {
  os << '{';
  bool first = true;
  for (const auto& [scope, level] : set.sparse()) {
    os << (first ? "" : ", ") << scope << ':' << level;
    first = false;
  }
  return os << '}';
}

}  // namespace stepguard
