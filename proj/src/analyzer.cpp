#include "stepguard/analyzer.hpp"

#include <algorithm>
#include <iomanip>
#include <set>
#include <sstream>

namespace stepguard {
namespace fs = std::filesystem;
namespace {

const StepPolicy* policy_for(const Step& step, const KnowledgeBase& kb) {
  if (step.kind != StepKind::Action || step.is_workflow) {
    return nullptr;
  }
  return kb.lookup(step.action.name);
}

std::string fraction_text(double value) {
  std::ostringstream out;
  out << std::fixed << std::setprecision(1) << value * 100.0 << '%';
  return out.str();
}

}  // namespace

std::string_view to_string(JobClass cls) {
  switch (cls) {
    case JobClass::SingleStep: return "single-step";
    case JobClass::MultiStep: return "multi-step";
    case JobClass::Ignored: return "ignored";
  }
  return "ignored";
}

std::string_view to_string(GrantBasis basis) {
  return basis == GrantBasis::Declared ? "declared" : "job-required";
}

JobAnalysis analyze_job(const Job& job, const KnowledgeBase& kb) {
  JobAnalysis out;
  out.job_id = job.id;
  out.raw_step_count = job.steps.size();
  out.uses_matrix = job.uses_matrix;
  out.granted = job.declared_permissions;

  for (std::size_t i = 0; i < job.steps.size(); ++i) {
    const Step& step = job.steps[i];
    StepRequirement req;
    req.index = i;
    if (step.kind == StepKind::Action) {
      req.action_id = canonical_action_id(step.action.name);
    }
    if (const StepPolicy* policy = policy_for(step, kb)) {
      req.required = policy->permissions;
      out.job_required = unite(out.job_required, policy->permissions);
      ++out.covered_step_count;
    }
    out.per_step_required.push_back(std::move(req));
  }

  if (out.covered_step_count == 0) {
    out.classification = JobClass::Ignored;
  } else if (out.covered_step_count == 1) {
    out.classification = JobClass::SingleStep;
  } else {
    out.classification = JobClass::MultiStep;
  }
  if (out.classification != JobClass::MultiStep) {
    return out;
  }

  std::set<Scope> excess_scopes;
  for (const auto& req : out.per_step_required) {
    if (!req.required) {
      continue;
    }
    for (Scope scope : kAllScopes) {
      const Level needed = (*req.required)[scope];
      const Level granted = out.job_required[scope];
      if (needed < granted) {
        out.step_excess.push_back({req.index, req.action_id, scope, needed, granted});
        excess_scopes.insert(scope);
      }
    }
  }
  out.overprivileged = !out.step_excess.empty();
  for (Scope scope : excess_scopes) {
    const Level level = out.job_required[scope];
    out.overprivileged_scopes.push_back({scope, level, severity_of(scope, level)});
  }
  return out;
}

JobAnalysis analyze_job(const Workflow& workflow, const Job& job, const KnowledgeBase& kb,
                        const std::string& workflow_path) {
  JobAnalysis out = analyze_job(job, kb);
  out.workflow_path = workflow_path;
  out.granted = effective_job_permissions(workflow, job.id);
  return out;
}

AttackSurface attack_surface(const Job& job, const KnowledgeBase& kb, const std::optional<PermissionSet>& declared,
                             const KnowledgeBase* learned) {
  AttackSurface out;
  PermissionSet job_required;
  std::size_t covered = 0;
  for (const Step& step : job.steps) {
    const StepPolicy* policy = policy_for(step, kb);
    if (learned != nullptr) {
      if (const StepPolicy* actual = policy_for(step, *learned)) {
        policy = actual;
      }
    }
    if (policy == nullptr) {
      continue;
    }
    ++covered;
    job_required = unite(job_required, policy->permissions);
    if (policy->permissions.has_write()) {
      ++out.write_needing;
    }
  }
  out.basis = declared ? GrantBasis::Declared : GrantBasis::JobRequired;
  const PermissionSet& granted = declared ? *declared : job_required;
  out.write_granted = granted.has_write() ? covered : 0;
  if (out.write_granted > 0) {
    out.reduction = 1.0 - static_cast<double>(out.write_needing) / static_cast<double>(out.write_granted);
  }
  return out;
}

SeverityHistogram severity_report(const std::vector<JobAnalysis>& analyses) {
  SeverityHistogram histogram;
  for (const auto& analysis : analyses) {
    for (const auto& excess : analysis.overprivileged_scopes) {
      ++histogram[excess.severity];
    }
  }
  return histogram;
}

PolicyDiff diff_policies(const KnowledgeBase& static_kb, const KnowledgeBase& learned_kb) {
  PolicyDiff diff;
  for (const auto& [action, declared] : static_kb.policies()) {
    const StepPolicy* observed = learned_kb.lookup(action);
    if (observed == nullptr) {
      continue;
    }
    for (Scope scope : kAllScopes) {
      const Level s = declared.permissions[scope];
      const Level l = observed->permissions[scope];
      if (s > l) {
        diff.excess[action].push_back({scope, s, l});
      } else if (l > s) {
        diff.under_declared[action].push_back({scope, s, l});
      }
    }
  }
  return diff;
}

std::optional<DefaultPermissions> parse_default_permissions(std::string_view text) {
  if (text == "write") return DefaultPermissions::Write;
  if (text == "read") return DefaultPermissions::Read;
  if (text == "none") return DefaultPermissions::None;
  return std::nullopt;
}

PermissionSet default_permission_set(DefaultPermissions defaults) {
  switch (defaults) {
    case DefaultPermissions::Write: return PermissionSet::uniform(Level::Write);
    case DefaultPermissions::Read: return PermissionSet::uniform(Level::Read);
    case DefaultPermissions::None: break;
  }
  return {};
}

bool CorpusReport::has_critical() const {
  auto it = severity.find(Severity::Critical);
  return it != severity.end() && it->second > 0;
}

std::vector<fs::path> collect_workflow_files(const fs::path& dir) {
  std::vector<fs::path> files;
  std::error_code ec;
  if (fs::is_regular_file(dir, ec)) {
    files.push_back(dir);
    return files;
  }
  if (!fs::is_directory(dir, ec)) {
    return files;
  }
  for (const auto& entry : fs::recursive_directory_iterator(dir)) {
    if (!entry.is_regular_file()) {
      continue;
    }
    const auto ext = entry.path().extension();
    if (ext == ".yml" || ext == ".yaml") {
      files.push_back(entry.path());
    }
  }
  std::sort(files.begin(), files.end());
  return files;
}

std::string repo_of(const fs::path& root, const fs::path& file) {
  const fs::path rel = file.lexically_relative(root);
  auto it = rel.begin();
  if (rel.empty() || std::next(it) == rel.end()) {
    return ".";
  }
  return it->string();
}

CorpusReport analyze_corpus(const fs::path& workflow_dir, const KnowledgeBase& kb, DefaultPermissions defaults) {
  CorpusReport report;
  report.default_grant = default_permission_set(defaults);
  for (const auto& file : collect_workflow_files(workflow_dir)) {
    const std::string display = fs::is_directory(workflow_dir)
                                    ? file.lexically_relative(workflow_dir).generic_string()
                                    : file.filename().string();
    Workflow wf;
    try {
      wf = parse_workflow_file(file);
    } catch (const std::exception& e) {
      report.unparseable.emplace_back(display, e.what());
      continue;
    }
    ++report.workflows_parsed;
    const std::string repo = fs::is_directory(workflow_dir) ? repo_of(workflow_dir, file) : ".";
    for (const Job& job : wf.jobs) {
      JobAnalysis analysis = analyze_job(wf, job, kb, display);
      ++report.total_jobs;
      ++report.jobs_by_repo[repo];
      switch (analysis.classification) {
        case JobClass::SingleStep: ++report.single_step; break;
        case JobClass::MultiStep: ++report.multi_step; break;
        case JobClass::Ignored: ++report.ignored; break;
      }
      if (analysis.uses_matrix) {
        ++report.matrix_jobs;
      }
      if (!analysis.granted) {
        ++report.default_permission_jobs;
      }
      if (analysis.overprivileged) {
        ++report.overprivileged;
        ++report.overprivileged_by_repo[repo];
        report.attack_surface.push_back({display, job.id, attack_surface(job, kb, analysis.granted)});
      }
      report.jobs.push_back(std::move(analysis));
    }
  }
  report.severity = severity_report(report.jobs);
  report.overprivileged_fraction =
      report.total_jobs == 0 ? 0.0 : static_cast<double>(report.overprivileged) / report.total_jobs;
  return report;
}

nlohmann::json to_json(const JobAnalysis& a) {
  nlohmann::json out;
  out["workflow"] = a.workflow_path;
  out["job"] = a.job_id;
  out["classification"] = std::string(to_string(a.classification));
  out["raw_steps"] = a.raw_step_count;
  out["covered_steps"] = a.covered_step_count;
  out["matrix"] = a.uses_matrix;
  out["job_required"] = to_json(a.job_required);
  out["granted"] = a.granted ? to_json(*a.granted) : nlohmann::json("unspecified-default");
  out["overprivileged"] = a.overprivileged;
  auto& scopes = out["overprivileged_scopes"] = nlohmann::json::array();
  for (const auto& e : a.overprivileged_scopes) {
    scopes.push_back({{"scope", std::string(to_string(e.scope))},
                      {"level", std::string(to_string(e.level))},
                      {"severity", std::string(to_string(e.severity))}});
  }
  auto& steps = out["steps"] = nlohmann::json::array();
  for (const auto& s : a.per_step_required) {
    steps.push_back({{"index", s.index},
                     {"action", s.action_id},
                     {"required", s.required ? to_json(*s.required) : nlohmann::json("uncovered")}});
  }
  return out;
}

nlohmann::json to_json(const CorpusReport& r) {
  nlohmann::json out;
  out["total_jobs"] = r.total_jobs;
  out["single_step"] = r.single_step;
  out["multi_step"] = r.multi_step;
  out["ignored"] = r.ignored;
  out["overprivileged"] = r.overprivileged;
  out["overprivileged_fraction"] = r.overprivileged_fraction;
  out["matrix_jobs"] = r.matrix_jobs;
  out["default_permission_jobs"] = r.default_permission_jobs;
  out["default_grant"] = to_json(r.default_grant);
  out["workflows_parsed"] = r.workflows_parsed;
  auto& bad = out["unparseable"] = nlohmann::json::array();
  for (const auto& [path, error] : r.unparseable) {
    bad.push_back({{"path", path}, {"error", error}});
  }
  auto& severity = out["severity"] = nlohmann::json::object();
  for (const auto& [level, count] : r.severity) {
    severity[std::string(to_string(level))] = count;
  }
  auto& repos = out["repositories"] = nlohmann::json::object();
  for (const auto& [repo, count] : r.jobs_by_repo) {
    auto it = r.overprivileged_by_repo.find(repo);
    repos[repo] = {{"jobs", count}, {"overprivileged", it == r.overprivileged_by_repo.end() ? 0 : it->second}};
  }
  auto& surface = out["attack_surface"] = nlohmann::json::array();
  for (const auto& row : r.attack_surface) {
    surface.push_back({{"workflow", row.workflow_path},
                       {"job", row.job_id},
                       {"write_needing", row.surface.write_needing},
                       {"write_granted", row.surface.write_granted},
                       {"reduction", row.surface.reduction ? nlohmann::json(*row.surface.reduction)
                                                           : nlohmann::json(nullptr)},
                       {"basis", std::string(to_string(row.surface.basis))}});
  }
  auto& jobs = out["jobs"] = nlohmann::json::array();
  for (const auto& job : r.jobs) {
    jobs.push_back(to_json(job));
  }
  return out;
}

nlohmann::json to_json(const PolicyDiff& diff) {
  auto encode = [](const std::map<std::string, std::vector<ScopeDelta>>& entries) {
    nlohmann::json out = nlohmann::json::object();
    for (const auto& [action, deltas] : entries) {
      auto& list = out[action] = nlohmann::json::array();
      for (const auto& d : deltas) {
        list.push_back({{"scope", std::string(to_string(d.scope))},
                        {"static", std::string(to_string(d.static_level))},
                        {"learned", std::string(to_string(d.learned_level))}});
      }
    }
    return out;
  };
  return {{"excess", encode(diff.excess)}, {"under_declared", encode(diff.under_declared)}};
}

std::string format_table(const CorpusReport& r) {
  std::ostringstream out;
  out << "Jobs analyzed:      " << r.total_jobs << " (" << r.workflows_parsed << " workflows, "
      << r.unparseable.size() << " unparseable)\n";
  out << "  multi-step:       " << r.multi_step << '\n';
  out << "  single-step:      " << r.single_step << '\n';
  out << "  ignored:          " << r.ignored << '\n';
  out << "  overprivileged:   " << r.overprivileged << " (" << fraction_text(r.overprivileged_fraction) << ")\n";
  out << "  matrix jobs:      " << r.matrix_jobs << '\n';
  out << "  default grant:    " << r.default_permission_jobs << " jobs receive " << r.default_grant << '\n';
  out << "\nSeverity of overprivileged scopes:\n";
  for (Severity s : {Severity::Critical, Severity::High, Severity::Medium, Severity::Low}) {
    auto it = r.severity.find(s);
    out << "  " << std::left << std::setw(10) << to_string(s) << (it == r.severity.end() ? 0 : it->second) << '\n';
  }
  if (r.overprivileged > 0) {
    out << "\nOverprivileged jobs:\n";
    for (const auto& job : r.jobs) {
      if (!job.overprivileged) {
        continue;
      }
      out << "  " << job.workflow_path << " :: " << job.job_id << "  excess:";
      for (const auto& e : job.overprivileged_scopes) {
        out << ' ' << e.scope << ':' << e.level << " [" << e.severity << ']';
      }
      out << '\n';
    }
  }
  for (const auto& [path, error] : r.unparseable) {
    out << "  unparseable: " << path << ": " << error << '\n';
  }
  return out.str();
}

std::string format_table(const PolicyDiff& diff) {
  std::ostringstream out;
  auto section = [&](const char* title, const std::map<std::string, std::vector<ScopeDelta>>& entries) {
    out << title << '\n';
    if (entries.empty()) {
      out << "  (none)\n";
    }
    for (const auto& [action, deltas] : entries) {
      for (const auto& d : deltas) {
        out << "  " << std::left << std::setw(40) << action << std::setw(20) << to_string(d.scope)
            << "static=" << d.static_level << " learned=" << d.learned_level << '\n';
      }
    }
  };
  section("Declared beyond observed use:", diff.excess);
  section("Observed beyond declaration:", diff.under_declared);
  return out.str();
}

std::string format_surface_table(const CorpusReport& r) {
  std::ostringstream out;
  out << std::left << std::setw(48) << "workflow :: job" << std::setw(10) << "needing" << std::setw(10)
      << "granted" << std::setw(12) << "reduction" << "basis\n";
  double sum = 0.0;
  std::size_t defined = 0;
  for (const auto& row : r.attack_surface) {
    std::ostringstream reduction;
    if (row.surface.reduction) {
      reduction << std::fixed << std::setprecision(3) << *row.surface.reduction;
      sum += *row.surface.reduction;
      ++defined;
    } else {
      reduction << "n/a";
    }
    out << std::setw(48) << (row.workflow_path + " :: " + row.job_id) << std::setw(10) << row.surface.write_needing
        << std::setw(10) << row.surface.write_granted << std::setw(12) << reduction.str()
        << to_string(row.surface.basis) << '\n';
  }
  if (defined > 0) {
    out << "\nMean reduction over " << defined << " jobs: " << fraction_text(sum / defined) << '\n';
  }
  return out.str();
}

}  // namespace stepguard
