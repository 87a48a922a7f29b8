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

struct StepPolicy {
  std::string action_id;
  PermissionSet permissions;

  friend bool operator==(const StepPolicy&, const StepPolicy&) = default;
};

enum class Provenance { RuntimeLearned, StaticDeclared };

// Error while loading a knowledge base; `file()` names the offending file.
class PolicyError : public std::runtime_error {
 public:
  PolicyError(const std::filesystem::path& file, const std::string& message);
  const std::filesystem::path& file() const { return file_; }

 private:
  std::filesystem::path file_;
};

// Lowercases ASCII letters, trims surrounding whitespace and drops an
// "@version" suffix: "Tj-Actions/Changed-Files@v47" -> "tj-actions/changed-files".
std::string canonical_action_id(std::string_view action_id);

// Filename stem for a canonical action id. Bytes outside [a-z0-9._-] and a
// leading '.' are percent-encoded, so "tj-actions/changed-files" becomes
// "tj-actions%2Fchanged-files".
std::string encode_action_filename(std::string_view canonical_id);
// Throws std::invalid_argument on a malformed escape.
std::string decode_action_filename(std::string_view stem);

class KnowledgeBase {
 public:
  explicit KnowledgeBase(Provenance provenance = Provenance::StaticDeclared) : provenance_(provenance) {}

  // Keyed by canonical id. Returns false if the id was already present.
  bool insert(StepPolicy policy);
  const StepPolicy* lookup(std::string_view action_id) const;

  const std::map<std::string, StepPolicy>& policies() const { return policies_; }
  std::size_t size() const { return policies_.size(); }
  bool empty() const { return policies_.empty(); }
  Provenance provenance() const { return provenance_; }

 private:
  std::map<std::string, StepPolicy> policies_;
  Provenance provenance_;
};

struct LoadOptions {
  // Accept the unquoted level tokens and trailing commas found in
  // hand-written policy files, e.g. `"issues": write,`.
  bool lenient = false;
  Provenance provenance = Provenance::StaticDeclared;
};

// Parses one policy document. `expected_id`, when given, must match the
// document's single top-level key after canonicalization.
StepPolicy parse_policy_document(std::string_view text, const std::filesystem::path& origin,
                                 std::optional<std::string_view> expected_id, bool lenient);

// One `<encoded-id>.json` file per action. Other files are ignored.
KnowledgeBase load_knowledge(const std::filesystem::path& dir, const LoadOptions& options = {});

// A single document mapping many action ids to permission maps.
KnowledgeBase load_consolidated_knowledge(const std::filesystem::path& file,
                                          const LoadOptions& options = {});

// Directory -> load_knowledge, regular file -> load_consolidated_knowledge.
KnowledgeBase load_knowledge_any(const std::filesystem::path& path, const LoadOptions& options = {});

// Writes `<dir>/<encoded-id>.json` through a temporary file and rename.
// Returns the written path.
std::filesystem::path save_policy(const std::filesystem::path& dir, const StepPolicy& policy);

std::string serialize_policy(const StepPolicy& policy);

// Rewrites bare read/write/none tokens as strings and drops trailing commas.
std::string relax_policy_json(std::string_view text);

}  // namespace stepguard
