#include "stepguard/workflow.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include <yaml-cpp/yaml.h>

namespace stepguard {
namespace {

int line_of(const YAML::Node& node) {
  const auto mark = node.Mark();
  return mark.is_null() ? 0 : mark.line + 1;
}

[[noreturn]] void invalid(const YAML::Node& node, const std::string& message) {
  const int line = line_of(node);
  throw WorkflowValidationError(
      line > 0 ? "line " + std::to_string(line) + ": " + message : message, line);
}

std::string scalar_or_dump(const YAML::Node& node) {
  if (node.IsScalar()) {
    return node.Scalar();
  }
  if (node.IsNull()) {
    return {};
  }
  YAML::Emitter out;
  out << YAML::Flow << node;
  return out.c_str();
}

PermissionSet parse_permissions(const YAML::Node& node) {
  if (node.IsScalar()) {
    const std::string& text = node.Scalar();
    if (text == "read-all") return PermissionSet::uniform(Level::Read);
    if (text == "write-all") return PermissionSet::uniform(Level::Write);
    invalid(node, "unsupported permissions shorthand '" + text + "'");
  }
  if (node.IsNull()) {
    return {};
  }
  if (!node.IsMap()) {
    invalid(node, "permissions must be a mapping");
  }
  PermissionSet out;
  for (const auto& entry : node) {
    const std::string key = entry.first.as<std::string>();
    auto scope = parse_scope(key);
    if (!scope) {
      invalid(entry.first, "unknown permission scope '" + key + "'");
    }
    if (!entry.second.IsScalar()) {
      invalid(entry.second, "level for scope '" + key + "' must be a scalar");
    }
    const std::string& text = entry.second.Scalar();
    auto level = parse_level(text);
    if (!level) {
      invalid(entry.second, "invalid level '" + text + "' for scope '" + key + "'");
    }
    if (!level_valid_for(*scope, *level)) {
      invalid(entry.second, "scope 'id-token' does not admit level 'read'");
    }
    out.set(*scope, *level);
  }
  return out;
}

std::vector<std::string> parse_triggers(const YAML::Node& node) {
  std::vector<std::string> out;
  if (node.IsScalar()) {
    out.push_back(node.Scalar());
  } else if (node.IsSequence()) {
    for (const auto& item : node) {
      out.push_back(item.as<std::string>());
    }
  } else if (node.IsMap()) {
    for (const auto& entry : node) {
      out.push_back(entry.first.as<std::string>());
    }
  }
  return out;
}

bool looks_like_workflow(std::string_view name) {
  return name.find(".github/workflows/") != std::string_view::npos || name.ends_with(".yml") ||
         name.ends_with(".yaml");
}

std::map<std::string, std::string> parse_inputs(const YAML::Node& node) {
  std::map<std::string, std::string> out;
  if (!node) {
    return out;
  }
  if (!node.IsMap()) {
    invalid(node, "`with` must be a mapping");
  }
  for (const auto& entry : node) {
    out[entry.first.as<std::string>()] = scalar_or_dump(entry.second);
  }
  return out;
}

Step parse_step(const YAML::Node& node) {
  if (!node.IsMap()) {
    invalid(node, "step must be a mapping");
  }
  Step step;
  if (node["name"]) {
    step.name = scalar_or_dump(node["name"]);
  }
  const YAML::Node uses = node["uses"];
  const YAML::Node run = node["run"];
  if (uses && run) {
    invalid(node, "step declares both `uses` and `run`");
  }
  if (uses) {
    const std::string text = scalar_or_dump(uses);
    if (text.empty()) {
      invalid(uses, "empty `uses` reference");
    }
    step.kind = StepKind::Action;
    step.action = parse_action_ref(text);
    step.is_workflow = looks_like_workflow(step.action.name);
    step.inputs = parse_inputs(node["with"]);
  } else if (run) {
    step.kind = StepKind::Command;
    step.run_text = scalar_or_dump(run);
    if (step.run_text.empty()) {
      invalid(run, "empty `run` command");
    }
  } else {
    invalid(node, "step declares neither `uses` nor `run`");
  }
  return step;
}

Job parse_job(const std::string& id, const YAML::Node& node) {
  if (!node.IsMap()) {
    invalid(node, "job '" + id + "' must be a mapping");
  }
  Job job;
  job.id = id;
  if (node["name"]) {
    job.name = scalar_or_dump(node["name"]);
  }
  if (node["permissions"]) {
    job.declared_permissions = parse_permissions(node["permissions"]);
  }
  if (const YAML::Node needs = node["needs"]) {
    if (needs.IsScalar()) {
      job.needs.push_back(needs.Scalar());
    } else if (needs.IsSequence()) {
      for (const auto& item : needs) {
        job.needs.push_back(item.as<std::string>());
      }
    } else {
      invalid(needs, "`needs` must be a job id or a list of job ids");
    }
  }
  if (node["if"]) {
    job.condition = scalar_or_dump(node["if"]);
  }
  if (const YAML::Node strategy = node["strategy"]; strategy && strategy.IsMap() && strategy["matrix"]) {
    job.uses_matrix = true;
  }

  if (const YAML::Node uses = node["uses"]) {
    // Job-level reusable workflow call: modeled as a single workflow step.
    Step step;
    step.kind = StepKind::Action;
    step.action = parse_action_ref(scalar_or_dump(uses));
    step.is_workflow = true;
    step.inputs = parse_inputs(node["with"]);
    job.steps.push_back(std::move(step));
    return job;
  }

  const YAML::Node steps = node["steps"];
  if (!steps || !steps.IsSequence() || steps.size() == 0) {
    invalid(node, "job '" + id + "' has no steps");
  }
  for (const auto& item : steps) {
    job.steps.push_back(parse_step(item));
  }
  return job;
}

Workflow build_workflow(const YAML::Node& root) {
  if (!root || !root.IsMap()) {
    throw WorkflowValidationError("workflow document must be a mapping", line_of(root));
  }
  Workflow wf;
  if (root["name"]) {
    wf.name = scalar_or_dump(root["name"]);
  }
  const YAML::Node on = root["on"];
  if (!on) {
    invalid(root, "workflow has no `on` trigger");
  }
  wf.triggers = parse_triggers(on);
  if (wf.triggers.empty()) {
    invalid(on, "workflow declares no trigger events");
  }
  if (root["permissions"]) {
    wf.global_permissions = parse_permissions(root["permissions"]);
  }

  const YAML::Node jobs = root["jobs"];
  if (!jobs || !jobs.IsMap()) {
    invalid(root, "workflow has no `jobs` mapping");
  }
  std::set<std::string> ids;
  for (const auto& entry : jobs) {
    const std::string id = entry.first.as<std::string>();
    if (!ids.insert(id).second) {
      invalid(entry.first, "duplicate job id '" + id + "'");
    }
    wf.jobs.push_back(parse_job(id, entry.second));
  }
  for (const Job& job : wf.jobs) {
    for (const std::string& dep : job.needs) {
      if (!ids.contains(dep)) {
        invalid(jobs[job.id], "job '" + job.id + "' needs unknown job '" + dep + "'");
      }
    }
  }
  return wf;
}

void emit_permissions(YAML::Emitter& out, const PermissionSet& set) {
  const auto sparse = set.sparse();
  if (sparse.empty()) {
    out << YAML::Flow << YAML::BeginMap << YAML::EndMap;
    return;
  }
  out << YAML::BeginMap;
  for (const auto& [scope, level] : sparse) {
    out << YAML::Key << std::string(to_string(scope)) << YAML::Value << std::string(to_string(level));
  }
  out << YAML::EndMap;
}

}  // namespace

WorkflowParseError::WorkflowParseError(const std::string& message, int line, int column)
    : std::runtime_error("line " + std::to_string(line) + ", column " + std::to_string(column) +
                         ": " + message),
      line_(line),
      column_(column) {}

WorkflowValidationError::WorkflowValidationError(const std::string& message, int line)
    : std::runtime_error(message), line_(line) {}

const Job* Workflow::find_job(std::string_view id) const {
  for (const Job& job : jobs) {
    if (job.id == id) {
      return &job;
    }
  }
  return nullptr;
}

ActionRef parse_action_ref(std::string_view uses) {
  ActionRef ref;
  const auto at = uses.rfind('@');
  if (at == std::string_view::npos) {
    ref.name = std::string(uses);
  } else {
    ref.name = std::string(uses.substr(0, at));
    ref.version = std::string(uses.substr(at + 1));
  }
  return ref;
}

Workflow parse_workflow(std::string_view source) {
  YAML::Node root;
  try {
    root = YAML::Load(std::string(source));
  } catch (const YAML::ParserException& e) {
    throw WorkflowParseError(e.msg, e.mark.line + 1, e.mark.column + 1);
  }
  try {
    return build_workflow(root);
  } catch (const YAML::Exception& e) {
    // Type conversion failures inside an otherwise valid document.
    throw WorkflowValidationError(e.what(), e.mark.is_null() ? 0 : e.mark.line + 1);
  }
}

Workflow parse_workflow_file(const std::filesystem::path& file) {
  std::ifstream in(file, std::ios::binary);
  if (!in) {
    throw std::runtime_error("cannot read workflow file " + file.string());
  }
  std::ostringstream buffer;
  buffer << in.rdbuf();
  return parse_workflow(buffer.str());
}

std::string serialize_workflow(const Workflow& wf) {
  YAML::Emitter out;
  out << YAML::BeginMap;
  out << YAML::Key << "name" << YAML::Value << YAML::DoubleQuoted << wf.name;
  out << YAML::Key << "on" << YAML::Value << YAML::BeginSeq;
  for (const auto& trigger : wf.triggers) {
    out << trigger;
  }
  out << YAML::EndSeq;
  if (wf.global_permissions) {
    out << YAML::Key << "permissions" << YAML::Value;
    emit_permissions(out, *wf.global_permissions);
  }
  out << YAML::Key << "jobs" << YAML::Value << YAML::BeginMap;
  for (const Job& job : wf.jobs) {
    out << YAML::Key << job.id << YAML::Value << YAML::BeginMap;
    if (job.name) {
      out << YAML::Key << "name" << YAML::Value << YAML::DoubleQuoted << *job.name;
    }
    if (job.declared_permissions) {
      out << YAML::Key << "permissions" << YAML::Value;
      emit_permissions(out, *job.declared_permissions);
    }
    if (!job.needs.empty()) {
      out << YAML::Key << "needs" << YAML::Value << YAML::Flow << job.needs;
    }
    if (job.condition) {
      out << YAML::Key << "if" << YAML::Value << YAML::DoubleQuoted << *job.condition;
    }
    if (job.uses_matrix) {
      out << YAML::Key << "strategy" << YAML::Value << YAML::BeginMap << YAML::Key << "matrix"
          << YAML::Value << YAML::Flow << YAML::BeginMap << YAML::EndMap << YAML::EndMap;
    }
    out << YAML::Key << "steps" << YAML::Value << YAML::BeginSeq;
    for (const Step& step : job.steps) {
      out << YAML::BeginMap;
      if (step.name) {
        out << YAML::Key << "name" << YAML::Value << YAML::DoubleQuoted << *step.name;
      }
      if (step.kind == StepKind::Action) {
        out << YAML::Key << "uses" << YAML::Value << YAML::DoubleQuoted << step.action.full();
        if (!step.inputs.empty()) {
          out << YAML::Key << "with" << YAML::Value << YAML::BeginMap;
          for (const auto& [key, value] : step.inputs) {
            out << YAML::Key << key << YAML::Value << YAML::DoubleQuoted << value;
          }
          out << YAML::EndMap;
        }
      } else {
        out << YAML::Key << "run" << YAML::Value << YAML::DoubleQuoted << step.run_text;
      }
      out << YAML::EndMap;
    }
    out << YAML::EndSeq << YAML::EndMap;
  }
  out << YAML::EndMap << YAML::EndMap;
  return std::string(out.c_str()) + "\n";
}

std::optional<PermissionSet> effective_job_permissions(const Workflow& wf, std::string_view job_id) {
  const Job* job = wf.find_job(job_id);
  if (job == nullptr) {
    throw std::out_of_range("unknown job '" + std::string(job_id) + "'");
  }
  if (job->declared_permissions) {
    return job->declared_permissions;
  }
  return wf.global_permissions;
}

}  // namespace stepguard
