#pragma once

// Random inputs and brute-force oracles used by property tests.

#include <random>
#include <string>
#include <vector>

#include "stepguard/endpoint_map.hpp"
#include "stepguard/permissions.hpp"

namespace testing {

inline stepguard::PermissionSet random_set(std::mt19937_64& rng) {
  using namespace stepguard;
  PermissionSet set;
  std::uniform_int_distribution<int> pick(0, 2);
  for (Scope scope : kAllScopes) {
    auto level = static_cast<Level>(pick(rng));
    if (!level_valid_for(scope, level)) {
      level = Level::Write;
    }
    set.set(scope, level);
  }
  return set;
}

// Sparse sets exercise the "mostly none" shape of real policies.
inline stepguard::PermissionSet random_sparse_set(std::mt19937_64& rng) {
  using namespace stepguard;
  PermissionSet set;
  std::uniform_int_distribution<int> count(0, 3);
  std::uniform_int_distribution<std::size_t> scope_pick(0, kScopeCount - 1);
  std::uniform_int_distribution<int> level_pick(1, 2);
  for (int i = count(rng); i > 0; --i) {
    const Scope scope = kAllScopes[scope_pick(rng)];
    auto level = static_cast<Level>(level_pick(rng));
    if (!level_valid_for(scope, level)) {
      level = Level::Write;
    }
    set.set(scope, level);
  }
  return set;
}

// One level lower, skipping levels the scope cannot hold.
inline stepguard::Level lower_level(stepguard::Scope scope, stepguard::Level level) {
  using stepguard::Level;
  Level out = level == Level::Write ? Level::Read : Level::None;
  if (!stepguard::level_valid_for(scope, out)) {
    out = Level::None;
  }
  return out;
}

inline bool pattern_matches(const std::vector<stepguard::PatternSegment>& pattern,
                            const std::vector<std::string>& segments) {
  if (pattern.size() != segments.size()) {
    return false;
  }
  for (std::size_t i = 0; i < pattern.size(); ++i) {
    if (pattern[i].placeholder ? segments[i].empty() : pattern[i].literal != segments[i]) {
      return false;
    }
  }
  return true;
}

// Positive when `a` ranks above `b`: at the first position where one has a
// literal and the other a placeholder, the literal wins.
inline int precedence(const std::vector<stepguard::PatternSegment>& a, const std::vector<stepguard::PatternSegment>& b) {
  for (std::size_t i = 0; i < a.size() && i < b.size(); ++i) {
    if (a[i].placeholder != b[i].placeholder) {
      return a[i].placeholder ? -1 : 1;
    }
  }
  return 0;
}

// Linear scan over every entry: the best-ranked matching pattern, with an
// exact method preferred to the HEAD-as-GET fallback on the same pattern.
inline std::optional<std::size_t> linear_scan_match(const stepguard::EndpointMap& map, const std::string& method,
                                                    const std::vector<std::string>& segments) {
  const auto& entries = map.entries();
  std::optional<std::size_t> best;
  int best_method_rank = -1;
  std::vector<stepguard::PatternSegment> best_pattern;
  for (std::size_t i = 0; i < entries.size(); ++i) {
    int method_rank = -1;
    if (entries[i].method == method) {
      method_rank = 1;
    } else if (method == "HEAD" && entries[i].method == "GET") {
      method_rank = 0;
    }
    if (method_rank < 0) {
      continue;
    }
    const auto pattern = stepguard::parse_pattern(entries[i].path_pattern);
    if (!pattern_matches(pattern, segments)) {
      continue;
    }
    const int cmp = best ? precedence(pattern, best_pattern) : 1;
    if (cmp > 0 || (cmp == 0 && method_rank > best_method_rank)) {
      best = i;
      best_method_rank = method_rank;
      best_pattern = pattern;
    }
  }
  return best;
}

inline stepguard::InferredPermission oracle_infer(const stepguard::EndpointMap& map,
                                                  const stepguard::RequestDescriptor& request) {
  using namespace stepguard;
  if (!map.is_api_host(request.host)) {
    return InferredPermission::not_api();
  }
  auto method = request.method;
  for (auto& c : method) {
    c = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
  }
  const auto segments = normalize_path(request.path);
  if (segments.size() == 1 && segments[0] == "graphql") {
    auto out = InferredPermission::unknown();
    out.graphql = true;
    return out;
  }
  if (auto index = linear_scan_match(map, method, segments)) {
    return InferredPermission::known(map.entries()[*index].scope, map.entries()[*index].level);
  }
  return infer_by_pattern(method, segments);
}

// Concrete path for a pattern, with placeholders replaced by `fill(i)`.
template <typename Fill>
std::string instantiate(const std::string& pattern, Fill fill) {
  std::string out;
  std::size_t i = 0;
  for (const auto& seg : stepguard::parse_pattern(pattern)) {
    out += "/";
    out += seg.placeholder ? fill(i++) : seg.literal;
  }
  return out.empty() ? "/" : out;
}

// Paths built from seed patterns with random mutations: renamed, dropped or
// appended segments, swapped methods, odd slashes and escapes.
class DescriptorGenerator {
 public:
  DescriptorGenerator(const stepguard::EndpointMap& map, std::uint64_t seed) : map_(map), rng_(seed) {
    for (const auto& entry : map.entries()) {
      for (const auto& seg : stepguard::parse_pattern(entry.path_pattern)) {
        if (!seg.placeholder) {
          vocabulary_.push_back(seg.literal);
        }
      }
    }
    for (const char* word : {"repos", "orgs", "users", "projects", "pulls", "issues", "graphql", "xyz", "o", "r",
                             "1", "42", "main", "contents", "check-runs", "zen"}) {
      vocabulary_.emplace_back(word);
    }
  }

  stepguard::RequestDescriptor next() {
    static const std::vector<std::string> kMethods = {"GET", "HEAD", "POST", "PUT", "PATCH", "DELETE", "OPTIONS"};
    stepguard::RequestDescriptor req;
    req.host = coin(0.95) ? "api.github.com" : "example.com";
    std::vector<std::string> segments;
    const auto& entries = map_.entries();
    if (!entries.empty() && coin(0.7)) {
      const auto& entry = entries[pick(entries.size())];
      req.method = coin(0.7) ? entry.method : kMethods[pick(kMethods.size())];
      for (const auto& seg : stepguard::parse_pattern(entry.path_pattern)) {
        segments.push_back(seg.placeholder ? placeholder_value() : seg.literal);
      }
      mutate(segments);
    } else {
      req.method = kMethods[pick(kMethods.size())];
      const std::size_t n = pick(7);
      for (std::size_t i = 0; i < n; ++i) {
        segments.push_back(vocabulary_[pick(vocabulary_.size())]);
      }
    }
    std::string path;
    for (const auto& seg : segments) {
      path += coin(0.03) ? "//" : "/";
      path += coin(0.03) ? escape(seg) : seg;
    }
    if (path.empty() || coin(0.05)) {
      path += "/";
    }
    req.path = path;
    return req;
  }

  std::mt19937_64& rng() { return rng_; }

 private:
  bool coin(double p) { return std::bernoulli_distribution(p)(rng_); }
  std::size_t pick(std::size_t n) { return std::uniform_int_distribution<std::size_t>(0, n - 1)(rng_); }

  std::string placeholder_value() {
    if (coin(0.15)) {
      return vocabulary_[pick(vocabulary_.size())];  // may collide with a literal sibling
    }
    return "v" + std::to_string(pick(100000));
  }

  void mutate(std::vector<std::string>& segments) {
    const double roll = std::uniform_real_distribution<double>(0, 1)(rng_);
    if (roll < 0.5 || segments.empty()) {
      return;
    }
    if (roll < 0.65) {
      segments[pick(segments.size())] = vocabulary_[pick(vocabulary_.size())];
    } else if (roll < 0.8) {
      segments.pop_back();
    } else if (roll < 0.95) {
      segments.push_back(vocabulary_[pick(vocabulary_.size())]);
    } else {
      segments.insert(segments.begin() + static_cast<long>(pick(segments.size())), placeholder_value());
    }
  }

  static std::string escape(const std::string& seg) {
    static const char* hex = "0123456789ABCDEF";
    std::string out;
    for (unsigned char c : seg) {
      out += '%';
      out += hex[c >> 4];
      out += hex[c & 15];
    }
    return out;
  }

  const stepguard::EndpointMap& map_;
  std::mt19937_64 rng_;
  std::vector<std::string> vocabulary_;
};

}  // namespace testing
