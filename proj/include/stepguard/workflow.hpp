#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "stepguard/permissions.hpp"

namespace stepguard {

// Syntax error in the YAML document. Line and column are 1-based.
class WorkflowParseError : public std::runtime_error {
 public:
  WorkflowParseError(const std::string& message, int line, int column);
  int line() const { return line_; }
  int column() const { return column_; }

 private:
  int line_;
  int column_;
};

// Well-formed YAML that violates the workflow model (bad scope, dangling
// `needs`, step with neither `uses` nor `run`, ...). Line is 1-based, 0 if
// unknown.
class WorkflowValidationError : public std::runtime_error {
 public:
  WorkflowValidationError(const std::string& message, int line = 0);
  int line() const { return line_; }

 private:
  int line_;
};

enum class StepKind { Action, Command };

struct ActionRef {
  std::string name;     // "owner/repo[/path]" or local "./path"
  std::string version;  // text after '@', empty for local refs

  bool is_local() const { return name.starts_with("./") || name.starts_with("../"); }
  // "name@version", or just name when version is empty.
  std::string full() const { return version.empty() ? name : name + "@" + version; }
  friend bool operator==(const ActionRef&, const ActionRef&) = default;
};

struct Step {
  StepKind kind = StepKind::Command;
  std::optional<std::string> name;
  ActionRef action;  // set only for StepKind::Action
  // Reusable workflow invocation (`uses: ./.github/workflows/x.yml` or
  // `owner/repo/.github/workflows/x.yml@ref`); the analyzer skips these.
  bool is_workflow = false;
  std::map<std::string, std::string> inputs;  // `with:` entries, expressions kept verbatim
  std::string run_text;                       // set only for StepKind::Command

  friend bool operator==(const Step&, const Step&) = default;
};

struct Job {
  std::string id;
  std::optional<std::string> name;
  std::optional<PermissionSet> declared_permissions;
  std::vector<std::string> needs;
  std::optional<std::string> condition;
  bool uses_matrix = false;
  std::vector<Step> steps;

  friend bool operator==(const Job&, const Job&) = default;
};

struct Workflow {
  std::string name;
  std::vector<std::string> triggers;
  std::optional<PermissionSet> global_permissions;
  std::vector<Job> jobs;

  const Job* find_job(std::string_view id) const;
  friend bool operator==(const Workflow&, const Workflow&) = default;
};

Workflow parse_workflow(std::string_view source);
Workflow parse_workflow_file(const std::filesystem::path& file);

// Inverse of parse_workflow up to formatting: parse(serialize(w)) == w.
std::string serialize_workflow(const Workflow& workflow);

// Job-level block, else workflow-level block, else std::nullopt meaning the
// repository's unspecified default applies. Throws std::out_of_range for an
// unknown job id.
std::optional<PermissionSet> effective_job_permissions(const Workflow& workflow,
                                                       std::string_view job_id);

// Splits "owner/repo@v4" into name and version.
ActionRef parse_action_ref(std::string_view uses);

}  // namespace stepguard
