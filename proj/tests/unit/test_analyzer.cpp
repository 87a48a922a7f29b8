#include <doctest.h>

#include <algorithm>
#include <cstdio>
#include <random>

#include "generators.hpp"
#include "harness.hpp"
#include "stepguard/analyzer.hpp"

using namespace stepguard;

namespace {

const std::filesystem::path kData = STEPGUARD_TEST_DATA;
const std::filesystem::path kCorpus = kData / "corpus";
const std::filesystem::path kMarkdownlint = kCorpus / "activeadmin/.github/workflows/markdownlint.yml";

KnowledgeBase markdownlint_kb() {
  KnowledgeBase kb;
  kb.insert({"actions/checkout", PermissionSet::from_map({{Scope::Contents, Level::Read}})});
  kb.insert({"tj-actions/changed-files", PermissionSet::from_map({{Scope::PullRequests, Level::Read}})});
  kb.insert({"reviewdog/action-markdownlint", PermissionSet::from_map({{Scope::PullRequests, Level::Write}})});
  return kb;
}

Step action_step(const std::string& name) {
  Step s;
  s.kind = StepKind::Action;
  s.action = {name, "v1"};
  return s;
}

Step command_step(const std::string& text) {
  Step s;
  s.run_text = text;
  return s;
}

Job job_of(const std::vector<std::string>& actions) {
  Job job;
  job.id = "j";
  for (const auto& a : actions) {
    job.steps.push_back(action_step(a));
  }
  return job;
}

// Knowledge base of n actions "a<i>/x" with random requirements.
KnowledgeBase random_kb(std::mt19937_64& rng, int n) {
  KnowledgeBase kb;
  for (int i = 0; i < n; ++i) {
    kb.insert({"a" + std::to_string(i) + "/x", testing::random_sparse_set(rng)});
  }
  return kb;
}

Job random_job(std::mt19937_64& rng, int actions) {
  Job job;
  job.id = "j";
  const int steps = std::uniform_int_distribution<int>(0, 8)(rng);
  for (int i = 0; i < steps; ++i) {
    const int pick = std::uniform_int_distribution<int>(0, actions + 1)(rng);
    if (pick == actions) {
      job.steps.push_back(command_step("make"));
    } else if (pick == actions + 1) {
      job.steps.push_back(action_step("uncovered/action"));
    } else {
      job.steps.push_back(action_step("a" + std::to_string(pick) + "/x"));
    }
  }
  return job;
}

bool dominated(const PermissionSet& small, const PermissionSet& big) { return set_allows(big, small); }

int run_cli(const std::string& args, std::string* out = nullptr) {
  const std::string command = std::string(STEPGUARD_CLI) + " " + args + " 2>/dev/null";
  FILE* pipe = ::popen(command.c_str(), "r");
  REQUIRE(pipe != nullptr);
  std::string text;
  char buffer[4096];
  std::size_t n = 0;
  while ((n = std::fread(buffer, 1, sizeof(buffer), pipe)) > 0) {
    text.append(buffer, n);
  }
  const int status = ::pclose(pipe);
  if (out != nullptr) {
    *out = text;
  }
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace

TEST_SUITE("analyzer") {
  TEST_CASE("markdownlint job is overprivileged") {
    const auto wf = parse_workflow_file(kMarkdownlint);
    const auto kb = markdownlint_kb();
    const auto lint = analyze_job(wf, *wf.find_job("markdownlint"), kb, "markdownlint.yml");
    CHECK(lint.classification == JobClass::MultiStep);
    CHECK(lint.covered_step_count == 3);
    CHECK(lint.overprivileged);
    CHECK(lint.job_required ==
          PermissionSet::from_map({{Scope::Contents, Level::Read}, {Scope::PullRequests, Level::Write}}));
    REQUIRE(lint.overprivileged_scopes.size() == 2);
    CHECK(lint.overprivileged_scopes[0] == ExcessScope{Scope::Contents, Level::Read, Severity::Low});
    CHECK(lint.overprivileged_scopes[1] == ExcessScope{Scope::PullRequests, Level::Write, Severity::High});
    const auto changed = std::find_if(lint.step_excess.begin(), lint.step_excess.end(), [](const StepExcess& e) {
      return e.action_id == "tj-actions/changed-files" && e.scope == Scope::PullRequests;
    });
    REQUIRE(changed != lint.step_excess.end());
    CHECK(changed->needed == Level::Read);
    CHECK(changed->granted == Level::Write);
    CHECK(lint.granted == PermissionSet::from_map({{Scope::Contents, Level::Read}, {Scope::PullRequests, Level::Write}}));

    const auto build = analyze_job(wf, *wf.find_job("build"), kb);
    CHECK(build.classification == JobClass::SingleStep);
    CHECK(build.raw_step_count == 4);
    CHECK_FALSE(build.overprivileged);
    CHECK_FALSE(build.granted.has_value());
    REQUIRE(build.per_step_required.size() == 4);
    CHECK(build.per_step_required[0].required.has_value());
    CHECK_FALSE(build.per_step_required[1].required.has_value());
    const auto test = analyze_job(wf, *wf.find_job("test"), kb);
    CHECK(test.classification == JobClass::SingleStep);
  }

  TEST_CASE("classification examples") {
    KnowledgeBase kb;
    kb.insert({"a/one", PermissionSet::from_map({{Scope::Contents, Level::Read}})});
    kb.insert({"a/two", PermissionSet::from_map({{Scope::Contents, Level::Read}})});
    kb.insert({"a/writer", PermissionSet::from_map({{Scope::Contents, Level::Write}})});

    auto single = analyze_job(job_of({"a/writer", "x/uncovered"}), kb);
    CHECK(single.classification == JobClass::SingleStep);
    CHECK_FALSE(single.overprivileged);

    auto same = analyze_job(job_of({"a/one", "a/two", "A/One"}), kb);
    CHECK(same.classification == JobClass::MultiStep);
    CHECK_FALSE(same.overprivileged);

    auto none = analyze_job(job_of({"x/y"}), kb);
    CHECK(none.classification == JobClass::Ignored);
    Job commands;
    commands.steps = {command_step("a"), command_step("b")};
    CHECK(analyze_job(commands, kb).classification == JobClass::Ignored);

    auto critical = analyze_job(job_of({"a/one", "a/writer"}), kb);
    CHECK(critical.overprivileged);
    REQUIRE(critical.overprivileged_scopes.size() == 1);
    CHECK(critical.overprivileged_scopes[0] == ExcessScope{Scope::Contents, Level::Write, Severity::Critical});
  }

  TEST_CASE("reusable workflow calls are not covered steps") {
    KnowledgeBase kb;
    kb.insert({"o/r/.github/workflows/x.yml", PermissionSet::from_map({{Scope::Issues, Level::Write}})});
    kb.insert({"a/one", PermissionSet::from_map({{Scope::Contents, Level::Read}})});
    Job job = job_of({"a/one", "o/r/.github/workflows/x.yml"});
    job.steps[1].is_workflow = true;
    CHECK(analyze_job(job, kb).classification == JobClass::SingleStep);
  }

  TEST_CASE("attack surface") {
    KnowledgeBase kb;
    kb.insert({"r/one", PermissionSet::from_map({{Scope::Contents, Level::Read}})});
    kb.insert({"w/one", PermissionSet::from_map({{Scope::Issues, Level::Write}})});
    kb.insert({"n/one", PermissionSet{}});

    auto s = attack_surface(job_of({"r/one", "r/one", "r/one", "n/one", "r/one", "w/one"}), kb);
    CHECK(s.write_granted == 6);
    CHECK(s.write_needing == 1);
    REQUIRE(s.reduction.has_value());
    CHECK(*s.reduction == doctest::Approx(5.0 / 6.0));
    CHECK(*s.reduction == doctest::Approx(0.833).epsilon(0.001));
    CHECK(s.basis == GrantBasis::JobRequired);

    s = attack_surface(job_of({"w/one", "w/one"}), kb);
    CHECK(s.reduction == 0.0);

    s = attack_surface(job_of({"r/one", "n/one"}), kb);
    CHECK(s.write_granted == 0);
    CHECK_FALSE(s.reduction.has_value());

    // A declared block with write widens the granted side.
    s = attack_surface(job_of({"r/one", "n/one"}), kb, PermissionSet::uniform(Level::Write));
    CHECK(s.basis == GrantBasis::Declared);
    CHECK(s.write_granted == 2);
    CHECK(s.reduction == 1.0);

    // Learned requirements override static ones.
    KnowledgeBase learned;
    learned.insert({"w/one", PermissionSet{}});
    s = attack_surface(job_of({"r/one", "w/one"}), kb, std::nullopt, &learned);
    CHECK(s.write_needing == 0);
    CHECK_FALSE(s.reduction.has_value());
  }

  TEST_CASE("severity report") {
    JobAnalysis a;
    a.overprivileged_scopes = {{Scope::Contents, Level::Write, Severity::Critical}};
    CHECK(severity_report({a}) == SeverityHistogram{{Severity::Critical, 1}});
    JobAnalysis b;
    b.overprivileged_scopes = {{Scope::Issues, Level::Write, severity_of(Scope::Issues, Level::Write)},
                               {Scope::Checks, Level::Write, severity_of(Scope::Checks, Level::Write)}};
    CHECK(severity_report({b}) == SeverityHistogram{{Severity::Low, 1}, {Severity::Medium, 1}});
    CHECK(severity_report({}).empty());
  }

  TEST_CASE("policy diff") {
    KnowledgeBase static_kb, learned_kb;
    static_kb.insert({"tj-actions/changed-files", PermissionSet::from_map({{Scope::PullRequests, Level::Read}})});
    learned_kb.insert({"tj-actions/changed-files", PermissionSet{}});
    auto diff = diff_policies(static_kb, learned_kb);
    REQUIRE(diff.excess.size() == 1);
    CHECK(diff.excess.at("tj-actions/changed-files") ==
          std::vector<ScopeDelta>{{Scope::PullRequests, Level::Read, Level::None}});
    CHECK(diff.under_declared.empty());

    CHECK(diff_policies(static_kb, static_kb).excess.empty());

    KnowledgeBase wider;
    wider.insert({"tj-actions/changed-files", PermissionSet::from_map({{Scope::PullRequests, Level::Write}})});
    wider.insert({"only/learned", PermissionSet::uniform(Level::Write)});
    diff = diff_policies(static_kb, wider);
    CHECK(diff.excess.empty());
    REQUIRE(diff.under_declared.size() == 1);
    CHECK(diff.under_declared.at("tj-actions/changed-files")[0].learned_level == Level::Write);
  }

  TEST_CASE("default permissions") {
    CHECK(parse_default_permissions("write") == DefaultPermissions::Write);
    CHECK(parse_default_permissions("none") == DefaultPermissions::None);
    CHECK_FALSE(parse_default_permissions("admin"));
    CHECK(default_permission_set(DefaultPermissions::Write) == PermissionSet::uniform(Level::Write));
    CHECK(default_permission_set(DefaultPermissions::None).is_none());
    const auto read = default_permission_set(DefaultPermissions::Read);
    CHECK(read[Scope::Contents] == Level::Read);
    CHECK(read[Scope::IdToken] == Level::None);
  }

  TEST_CASE("corpus edge cases") {
    testing::TempDir empty;
    const auto report = analyze_corpus(empty.path(), markdownlint_kb());
    CHECK(report.total_jobs == 0);
    CHECK(report.overprivileged == 0);
    CHECK(report.overprivileged_fraction == 0.0);
    CHECK(report.severity.empty());
    CHECK_FALSE(report.has_critical());

    testing::TempDir one;
    std::filesystem::copy_file(kMarkdownlint, one / "markdownlint.yml");
    testing::write_file(one / "broken.yml", "jobs: [unclosed\n");
    const auto r = analyze_corpus(one.path(), markdownlint_kb());
    CHECK(r.total_jobs == 3);
    CHECK(r.multi_step == 1);
    CHECK(r.single_step == 2);
    CHECK(r.ignored == 0);
    CHECK(r.overprivileged == 1);
    CHECK(r.workflows_parsed == 1);
    REQUIRE(r.unparseable.size() == 1);
    CHECK(r.unparseable[0].first.find("broken.yml") != std::string::npos);
    CHECK(r.severity == SeverityHistogram{{Severity::Low, 1}, {Severity::High, 1}});
    REQUIRE(r.attack_surface.size() == 1);
    CHECK(r.attack_surface[0].surface.basis == GrantBasis::Declared);
    CHECK(r.default_permission_jobs == 2);
  }

  TEST_CASE("corpus matches the independent recount") {
    const auto expected = nlohmann::json::parse(testing::read_file(kData / "corpus_expected.json"));
    const auto kb = load_knowledge_any(kData / "corpus_kb.json");
    const auto r = analyze_corpus(kCorpus, kb);
    const auto& counts = expected.at("counts");
    CHECK(r.total_jobs == counts.at("total_jobs").get<std::size_t>());
    CHECK(r.single_step == counts.at("single_step").get<std::size_t>());
    CHECK(r.multi_step == counts.at("multi_step").get<std::size_t>());
    CHECK(r.ignored == counts.at("ignored").get<std::size_t>());
    CHECK(r.overprivileged == counts.at("overprivileged").get<std::size_t>());
    CHECK(r.matrix_jobs == counts.at("matrix_jobs").get<std::size_t>());
    CHECK(r.default_permission_jobs == counts.at("default_permission_jobs").get<std::size_t>());
    CHECK(r.workflows_parsed == counts.at("workflows").get<std::size_t>());
    CHECK(r.single_step + r.multi_step + r.ignored == r.total_jobs);
    for (const auto& [name, count] : expected.at("severity").items()) {
      Severity sev = Severity::Low;
      for (auto s : {Severity::Low, Severity::Medium, Severity::High, Severity::Critical}) {
        if (to_string(s) == name) {
          sev = s;
        }
      }
      CAPTURE(name);
      CHECK(r.severity.at(sev) == count.get<std::size_t>());
    }
  }

  TEST_CASE("removing a step never widens job_required") {
    std::mt19937_64 rng(2024);
    for (int i = 0; i < 500; ++i) {
      const auto kb = random_kb(rng, 6);
      Job job = random_job(rng, 6);
      if (job.steps.empty()) {
        continue;
      }
      const auto before = analyze_job(job, kb);
      job.steps.erase(job.steps.begin() +
                      std::uniform_int_distribution<std::size_t>(0, job.steps.size() - 1)(rng));
      const auto after = analyze_job(job, kb);
      CHECK(dominated(after.job_required, before.job_required));
    }
  }

  TEST_CASE("adding a step keeps an overprivileged job flagged") {
    std::mt19937_64 rng(77);
    int flagged = 0;
    for (int i = 0; i < 1000; ++i) {
      const auto kb = random_kb(rng, 6);
      Job job = random_job(rng, 6);
      if (!analyze_job(job, kb).overprivileged) {
        continue;
      }
      ++flagged;
      const auto extra = random_job(rng, 6);
      for (const auto& s : extra.steps) {
        const auto pos = std::uniform_int_distribution<std::size_t>(0, job.steps.size())(rng);
        job.steps.insert(job.steps.begin() + pos, s);
      }
      CHECK(analyze_job(job, kb).overprivileged);
    }
    CHECK(flagged > 100);
  }

  TEST_CASE("overprivilege matches the definition") {
    std::mt19937_64 rng(5);
    for (int i = 0; i < 1000; ++i) {
      const auto kb = random_kb(rng, 5);
      const Job job = random_job(rng, 5);
      const auto a = analyze_job(job, kb);
      std::vector<PermissionSet> covered;
      for (const auto& s : job.steps) {
        if (s.kind == StepKind::Action) {
          if (const auto* p = kb.lookup(s.action.name)) {
            covered.push_back(p->permissions);
          }
        }
      }
      PermissionSet all;
      for (const auto& p : covered) {
        all = unite(all, p);
      }
      bool excess = false;
      for (const auto& p : covered) {
        excess = excess || p != all;
      }
      CHECK(a.job_required == all);
      CHECK(a.covered_step_count == covered.size());
      CHECK((a.classification == JobClass::Ignored) == covered.empty());
      CHECK(a.overprivileged == (covered.size() >= 2 && excess));
    }
  }

  TEST_CASE("corpus totals do not depend on file order") {
    const auto kb = load_knowledge_any(kData / "corpus_kb.json");
    const auto baseline = analyze_corpus(kCorpus, kb);
    std::mt19937_64 rng(3);
    auto files = collect_workflow_files(kCorpus);
    for (int round = 0; round < 3; ++round) {
      std::shuffle(files.begin(), files.end(), rng);
      testing::TempDir dir;
      // Renamed copies change the traversal order.
      for (std::size_t i = 0; i < files.size(); ++i) {
        std::filesystem::copy_file(files[i], dir / (std::to_string(i) + ".yml"));
      }
      const auto r = analyze_corpus(dir.path(), kb);
      CHECK(r.total_jobs == baseline.total_jobs);
      CHECK(r.overprivileged == baseline.overprivileged);
      CHECK(r.single_step == baseline.single_step);
      CHECK(r.ignored == baseline.ignored);
      CHECK(r.severity == baseline.severity);
    }
  }

  TEST_CASE("repo buckets") {
    CHECK(repo_of("/c", "/c/activeadmin/.github/workflows/x.yml") == "activeadmin");
    CHECK(repo_of("/c", "/c/x.yml") == ".");
    const auto r = analyze_corpus(kCorpus, load_knowledge_any(kData / "corpus_kb.json"));
    CHECK(r.jobs_by_repo.at("activeadmin") >= 3);
    CHECK(r.overprivileged_by_repo.at("activeadmin") >= 1);
  }

  TEST_CASE("command line") {
    std::string out;
    const auto corpus = kCorpus.string();
    const auto kb = (kData / "corpus_kb.json").string();
    CHECK(run_cli("analyze --workflows " + corpus + " --knowledge " + kb + " --format json", &out) == 2);
    const auto doc = nlohmann::json::parse(out);
    CHECK(doc.at("total_jobs") == 120);
    CHECK(run_cli("analyze --workflows " + kMarkdownlint.string() + " --knowledge " + kb, &out) == 0);
    CHECK(out.find("markdownlint") != std::string::npos);
    CHECK(run_cli("analyze --workflows " + corpus + " --knowledge /nonexistent") == 1);
    CHECK(run_cli("infer GET https://api.github.com/repos/o/r/pulls", &out) == 0);
    CHECK(out == "known(pull-requests, read)\n");
    CHECK(run_cli("surface --workflows " + corpus + " --knowledge " + kb + " --format json", &out) == 0);
    CHECK(nlohmann::json::parse(out).is_array());
  }
}
