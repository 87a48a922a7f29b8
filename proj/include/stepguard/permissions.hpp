#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <ostream>
#include <stdexcept>
#include <string>
#include <string_view>

#include <json.hpp>

namespace stepguard {

// The fourteen GITHUB_TOKEN scopes, in the canonical order used for
// iteration and serialization.
enum class Scope : std::uint8_t {
  Contents,
  Deployments,
  Packages,
  PullRequests,
  SecurityEvents,
  Actions,
  Checks,
  Statuses,
  Issues,
  RepositoryProjects,
  Attestations,
  IdToken,
  Discussions,
  Pages,
};

inline constexpr std::size_t kScopeCount = 14;

inline constexpr std::array<Scope, kScopeCount> kAllScopes = {
    Scope::Contents,     Scope::Deployments,        Scope::Packages,     Scope::PullRequests,
    Scope::SecurityEvents, Scope::Actions,          Scope::Checks,       Scope::Statuses,
    Scope::Issues,       Scope::RepositoryProjects, Scope::Attestations, Scope::IdToken,
    Scope::Discussions,  Scope::Pages,
};

// Totally ordered: None < Read < Write.
enum class Level : std::uint8_t { None = 0, Read = 1, Write = 2 };

enum class Severity : std::uint8_t { Low, Medium, High, Critical, NotApplicable };

// Raised for any malformed scope, level or permission document.
class PermissionError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::string_view to_string(Scope scope);
std::string_view to_string(Level level);
std::string_view to_string(Severity severity);

// Scope names are case-sensitive and use the hyphenated workflow spelling.
std::optional<Scope> parse_scope(std::string_view name);
std::optional<Level> parse_level(std::string_view name);

inline std::ostream& operator<<(std::ostream& os, Scope s) { return os << to_string(s); }
inline std::ostream& operator<<(std::ostream& os, Level l) { return os << to_string(l); }
inline std::ostream& operator<<(std::ostream& os, Severity s) { return os << to_string(s); }

// id-token has no read level.
constexpr bool level_valid_for(Scope scope, Level level) {
  return !(scope == Scope::IdToken && level == Level::Read);
}

constexpr bool level_allows(Level granted, Level required) { return granted >= required; }

// Dense scope -> level mapping. Every scope always has exactly one level;
// a default-constructed set is all-none.
class PermissionSet {
 public:
  constexpr PermissionSet() = default;

  // Throws PermissionError when level is invalid for the scope.
  static PermissionSet from_map(const std::map<Scope, Level>& entries);
  static PermissionSet uniform(Level level);

  constexpr Level operator[](Scope scope) const { return levels_[index(scope)]; }
  Level get(Scope scope) const { return levels_[index(scope)]; }

  // Throws PermissionError on id-token:read.
  PermissionSet& set(Scope scope, Level level);
  PermissionSet with(Scope scope, Level level) const {
    PermissionSet copy = *this;
    copy.set(scope, level);
    return copy;
  }

  bool is_none() const;
  bool has_write() const;
  // Scopes whose level is not none, in canonical order.
  std::map<Scope, Level> sparse() const;

  friend constexpr bool operator==(const PermissionSet&, const PermissionSet&) = default;

 private:
  static constexpr std::size_t index(Scope s) { return static_cast<std::size_t>(s); }
  std::array<Level, kScopeCount> levels_{};
};

// True iff every scope of `granted` is at least the level of `required`.
bool set_allows(const PermissionSet& granted, const PermissionSet& required);

// Pointwise maximum.
PermissionSet unite(const PermissionSet& a, const PermissionSet& b);

// Table-driven risk grade. Throws PermissionError for Level::None.
Severity severity_of(Scope scope, Level level);

// Sparse serialization: {"contents": "read", ...}, none-levels omitted.
nlohmann::json to_json(const PermissionSet& set);

// Accepts "read" | "write" | "none" string values. Unknown scope names,
// other levels, non-string values and id-token:read are rejected.
PermissionSet permission_set_from_json(const nlohmann::json& doc);

std::ostream& operator<<(std::ostream& os, const PermissionSet& set);

}  // namespace stepguard
