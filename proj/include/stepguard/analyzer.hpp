#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "stepguard/permissions.hpp"
#include "stepguard/policy_store.hpp"
#include "stepguard/workflow.hpp"

namespace stepguard {

enum class JobClass { SingleStep, MultiStep, Ignored };
std::string_view to_string(JobClass cls);

struct StepRequirement {
  std::size_t index = 0;  // position within the job's steps
  std::string action_id;  // canonical; empty for command steps
  std::optional<PermissionSet> required;  // std::nullopt = uncovered
};

struct ExcessScope {
  Scope scope = Scope::Contents;
  Level level = Level::None;  // the level the job grants on that scope
  Severity severity = Severity::Low;
  friend bool operator==(const ExcessScope&, const ExcessScope&) = default;
};

// Step that would be handed more than it needs on one scope.
struct StepExcess {
  std::size_t step_index = 0;
  std::string action_id;
  Scope scope = Scope::Contents;
  Level needed = Level::None;
  Level granted = Level::None;
};

struct JobAnalysis {
  std::string workflow_path;
  std::string job_id;
  JobClass classification = JobClass::Ignored;
  std::size_t raw_step_count = 0;
  std::size_t covered_step_count = 0;
  bool uses_matrix = false;
  PermissionSet job_required;
  std::vector<StepRequirement> per_step_required;
  bool overprivileged = false;
  std::vector<ExcessScope> overprivileged_scopes;  // unique (scope, level), canonical scope order
  std::vector<StepExcess> step_excess;
  // Effective declared block; std::nullopt when the workflow relies on the
  // repository default.
  std::optional<PermissionSet> granted;
};

// Covered steps are action steps (not reusable-workflow calls) with a
// knowledge-base entry. Zero covered steps -> Ignored, one -> SingleStep.
// A multi-step job is overprivileged when some covered step's requirement is
// strictly below the union of all covered requirements on some scope.
JobAnalysis analyze_job(const Job& job, const KnowledgeBase& kb);
JobAnalysis analyze_job(const Workflow& workflow, const Job& job, const KnowledgeBase& kb,
                        const std::string& workflow_path = {});

enum class GrantBasis { Declared, JobRequired };
std::string_view to_string(GrantBasis basis);

struct AttackSurface {
  std::size_t write_needing = 0;
  std::size_t write_granted = 0;
  std::optional<double> reduction;  // std::nullopt when write_granted == 0
  GrantBasis basis = GrantBasis::JobRequired;
};

// Counts covered steps holding write under job-level granting versus steps
// whose own requirement includes write. Step requirements come from
// `learned` when it has an entry for the action, else from `kb`. The granted
// side is `declared` when given, else the union of step requirements.
AttackSurface attack_surface(const Job& job, const KnowledgeBase& kb,
                             const std::optional<PermissionSet>& declared = std::nullopt,
                             const KnowledgeBase* learned = nullptr);

using SeverityHistogram = std::map<Severity, std::size_t>;
SeverityHistogram severity_report(const std::vector<JobAnalysis>& analyses);

struct ScopeDelta {
  Scope scope = Scope::Contents;
  Level static_level = Level::None;
  Level learned_level = Level::None;
  friend bool operator==(const ScopeDelta&, const ScopeDelta&) = default;
};

struct PolicyDiff {
  // Actions present in both knowledge bases.
  std::map<std::string, std::vector<ScopeDelta>> excess;          // static > learned
  std::map<std::string, std::vector<ScopeDelta>> under_declared;  // learned > static
};

PolicyDiff diff_policies(const KnowledgeBase& static_kb, const KnowledgeBase& learned_kb);

enum class DefaultPermissions { Write, Read, None };
std::optional<DefaultPermissions> parse_default_permissions(std::string_view text);
PermissionSet default_permission_set(DefaultPermissions defaults);

struct SurfaceRow {
  std::string workflow_path;
  std::string job_id;
  AttackSurface surface;
};

struct CorpusReport {
  std::size_t total_jobs = 0;
  std::size_t single_step = 0;
  std::size_t multi_step = 0;
  std::size_t ignored = 0;
  std::size_t overprivileged = 0;
  double overprivileged_fraction = 0.0;  // of all analyzed jobs
  std::size_t matrix_jobs = 0;
  // Jobs with no permissions block at job or workflow level, and what the
  // repository default hands them.
  std::size_t default_permission_jobs = 0;
  PermissionSet default_grant;
  std::size_t workflows_parsed = 0;
  std::vector<std::pair<std::string, std::string>> unparseable;  // (path, error)
  SeverityHistogram severity;
  std::map<std::string, std::size_t> overprivileged_by_repo;
  std::map<std::string, std::size_t> jobs_by_repo;
  std::vector<SurfaceRow> attack_surface;  // overprivileged jobs only
  std::vector<JobAnalysis> jobs;
  bool has_critical() const;
};

// Recursively collects *.yml / *.yaml files under `dir` (or `dir` itself
// when it is a file), sorted by path.
std::vector<std::filesystem::path> collect_workflow_files(const std::filesystem::path& dir);

// The repository bucket of a workflow: first path component below the corpus
// root, or "." for top-level files.
std::string repo_of(const std::filesystem::path& root, const std::filesystem::path& file);

CorpusReport analyze_corpus(const std::filesystem::path& workflow_dir, const KnowledgeBase& kb,
                            DefaultPermissions defaults = DefaultPermissions::Write);

nlohmann::json to_json(const JobAnalysis& analysis);
nlohmann::json to_json(const CorpusReport& report);
nlohmann::json to_json(const PolicyDiff& diff);
std::string format_table(const CorpusReport& report);
std::string format_table(const PolicyDiff& diff);
std::string format_surface_table(const CorpusReport& report);

}  // namespace stepguard
