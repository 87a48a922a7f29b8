#include <doctest.h>

#include <sstream>

#include "lattice_properties.hpp"
#include "stepguard/permissions.hpp"

using namespace stepguard;

namespace {

PermissionSet ps(std::map<Scope, Level> m) { return PermissionSet::from_map(m); }

}  // namespace

TEST_SUITE("permissions") {
  TEST_CASE("scope names are closed and case sensitive") {
    CHECK(kAllScopes.size() == 14);
    for (Scope s : kAllScopes) {
      CHECK(parse_scope(to_string(s)) == s);
    }
    CHECK(parse_scope("pull-requests") == Scope::PullRequests);
    CHECK(parse_scope("security-events") == Scope::SecurityEvents);
    CHECK_FALSE(parse_scope("Contents"));
    CHECK_FALSE(parse_scope("pull_requests"));
    CHECK_FALSE(parse_scope("metadata"));
    CHECK_FALSE(parse_scope(""));
  }

  TEST_CASE("levels are totally ordered") {
    CHECK(parse_level("none") == Level::None);
    CHECK(parse_level("read") == Level::Read);
    CHECK(parse_level("write") == Level::Write);
    CHECK_FALSE(parse_level("admin"));
    CHECK_FALSE(parse_level("Write"));
    CHECK(Level::None < Level::Read);
    CHECK(Level::Read < Level::Write);
  }

  TEST_CASE("level_allows") {
    CHECK(level_allows(Level::Write, Level::Read));
    CHECK_FALSE(level_allows(Level::Read, Level::Write));
    CHECK(level_allows(Level::None, Level::None));
    CHECK(level_allows(Level::Write, Level::Write));
    CHECK_FALSE(level_allows(Level::None, Level::Read));
  }

  TEST_CASE("set_allows examples") {
    CHECK(set_allows(ps({{Scope::Contents, Level::Write}}), ps({{Scope::Contents, Level::Read}})));
    CHECK_FALSE(set_allows(ps({{Scope::Contents, Level::Read}}),
                           ps({{Scope::Contents, Level::Read}, {Scope::Issues, Level::Read}})));
    CHECK(set_allows(PermissionSet{}, PermissionSet{}));
  }

  TEST_CASE("union examples") {
    CHECK(unite(ps({{Scope::Contents, Level::Read}}), ps({{Scope::Contents, Level::Write}})) ==
          ps({{Scope::Contents, Level::Write}}));
    CHECK(unite(ps({{Scope::Contents, Level::Read}}), ps({{Scope::PullRequests, Level::Write}})) ==
          ps({{Scope::Contents, Level::Read}, {Scope::PullRequests, Level::Write}}));
    // The three step requirements of the markdownlint job.
    const auto job = unite(unite(ps({{Scope::Contents, Level::Read}}), ps({{Scope::PullRequests, Level::Read}})),
                           ps({{Scope::PullRequests, Level::Write}}));
    CHECK(job == ps({{Scope::Contents, Level::Read}, {Scope::PullRequests, Level::Write}}));
  }

  TEST_CASE("partial construction fills none") {
    const auto s = ps({{Scope::Contents, Level::Read}});
    for (Scope scope : kAllScopes) {
      CHECK(s[scope] == (scope == Scope::Contents ? Level::Read : Level::None));
    }
    CHECK(PermissionSet{}.is_none());
    CHECK_FALSE(s.has_write());
    CHECK(s.with(Scope::Pages, Level::Write).has_write());
  }

  TEST_CASE("id-token cannot be read") {
    CHECK_FALSE(level_valid_for(Scope::IdToken, Level::Read));
    CHECK_THROWS_AS(ps({{Scope::IdToken, Level::Read}}), PermissionError);
    PermissionSet s;
    CHECK_THROWS_AS(s.set(Scope::IdToken, Level::Read), PermissionError);
    CHECK_NOTHROW(s.set(Scope::IdToken, Level::Write));
    CHECK_THROWS_AS(permission_set_from_json(nlohmann::json{{"id-token", "read"}}), PermissionError);
    const auto uniform_read = PermissionSet::uniform(Level::Read);
    CHECK(uniform_read[Scope::IdToken] == Level::None);
    CHECK(uniform_read[Scope::Contents] == Level::Read);
    CHECK(PermissionSet::uniform(Level::Write)[Scope::IdToken] == Level::Write);
  }

  TEST_CASE("severity matches the risk table") {
    struct Row {
      Scope scope;
      Severity read;
      Severity write;
    };
    const Row table[] = {
        {Scope::Contents, Severity::Low, Severity::Critical},
        {Scope::Deployments, Severity::Low, Severity::Critical},
        {Scope::Packages, Severity::Low, Severity::High},
        {Scope::PullRequests, Severity::Low, Severity::High},
        {Scope::SecurityEvents, Severity::Medium, Severity::High},
        {Scope::Actions, Severity::Low, Severity::High},
        {Scope::Checks, Severity::Low, Severity::Medium},
        {Scope::Statuses, Severity::Low, Severity::Medium},
        {Scope::Issues, Severity::Low, Severity::Low},
        {Scope::RepositoryProjects, Severity::Low, Severity::Low},
        {Scope::Attestations, Severity::Low, Severity::Medium},
        {Scope::IdToken, Severity::NotApplicable, Severity::Critical},
        {Scope::Discussions, Severity::Low, Severity::Low},
        {Scope::Pages, Severity::Low, Severity::Medium},
    };
    for (const auto& row : table) {
      CAPTURE(row.scope);
      CHECK(severity_of(row.scope, Level::Read) == row.read);
      CHECK(severity_of(row.scope, Level::Write) == row.write);
      CHECK_THROWS_AS(severity_of(row.scope, Level::None), PermissionError);
    }
  }

  TEST_CASE("sparse json serialization") {
    const auto s = ps({{Scope::Issues, Level::Write}, {Scope::PullRequests, Level::Read}});
    const auto doc = to_json(s);
    CHECK(doc == nlohmann::json{{"issues", "write"}, {"pull-requests", "read"}});
    CHECK(to_json(PermissionSet{}) == nlohmann::json::object());
    CHECK(permission_set_from_json(doc) == s);
    CHECK(permission_set_from_json(nlohmann::json{{"contents", "none"}}) == PermissionSet{});
  }

  TEST_CASE("json rejects bad documents") {
    CHECK_THROWS_AS(permission_set_from_json(nlohmann::json{{"contents", "admin"}}), PermissionError);
    CHECK_THROWS_AS(permission_set_from_json(nlohmann::json{{"metadata", "read"}}), PermissionError);
    CHECK_THROWS_AS(permission_set_from_json(nlohmann::json{{"contents", 1}}), PermissionError);
    CHECK_THROWS_AS(permission_set_from_json(nlohmann::json::array()), PermissionError);
  }

  TEST_CASE("stream output is sparse") {
    std::ostringstream out;
    out << ps({{Scope::Contents, Level::Read}, {Scope::PullRequests, Level::Write}});
    CHECK(out.str() == "{contents:read, pull-requests:write}");
  }

  TEST_CASE("lattice properties hold on random sets") {
    for (const auto& result : testing::run_lattice_properties(500, 0x5eed)) {
      CAPTURE(result.name);
      CHECK(result.cases >= 500);
      CHECK(result.failures.empty());
    }
  }
}
