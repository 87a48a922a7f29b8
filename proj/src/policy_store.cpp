#include "stepguard/policy_store.hpp"

#include <algorithm>
#include <atomic>
#include <cctype>
#include <fstream>
#include <sstream>
#include <thread>

namespace stepguard {
namespace fs = std::filesystem;
namespace {

std::string read_file(const fs::path& file) {
  std::ifstream in(file, std::ios::binary);
  if (!in) {
    throw PolicyError(file, "cannot read file");
  }
  std::ostringstream buffer;
  buffer << in.rdbuf();
  if (in.bad()) {
    throw PolicyError(file, "read failure");
  }
  return buffer.str();
}

bool plain_filename_byte(unsigned char c) {
  return (c >= 'a' && c <= 'z') || (c >= '0' && c <= '9') || c == '-' || c == '_' || c == '.';
}

nlohmann::json parse_json(std::string_view text, const fs::path& origin, bool lenient) {
  try {
    return nlohmann::json::parse(lenient ? relax_policy_json(text) : std::string(text));
  } catch (const nlohmann::json::parse_error& e) {
    throw PolicyError(origin, std::string("malformed policy document: ") + e.what());
  }
}

PermissionSet permissions_from(const nlohmann::json& body, const fs::path& origin,
                               const std::string& action) {
  try {
    return permission_set_from_json(body);
  } catch (const PermissionError& e) {
    throw PolicyError(origin, "action '" + action + "': " + e.what());
  }
}

}  // namespace

PolicyError::PolicyError(const fs::path& file, const std::string& message)
    : std::runtime_error(file.empty() ? message : file.string() + ": " + message), file_(file) {}

std::string canonical_action_id(std::string_view action_id) {
  const auto first = action_id.find_first_not_of(" \t\r\n");
  if (first == std::string_view::npos) {
    return {};
  }
  action_id = action_id.substr(first, action_id.find_last_not_of(" \t\r\n") - first + 1);
  if (auto at = action_id.find('@'); at != std::string_view::npos) {
    action_id = action_id.substr(0, at);
  }
  std::string out(action_id);
  std::transform(out.begin(), out.end(), out.begin(), [](unsigned char c) {
    return c < 0x80 ? static_cast<char>(std::tolower(c)) : static_cast<char>(c);
  });
  return out;
}

std::string encode_action_filename(std::string_view id) {
  static constexpr char kHex[] = "0123456789ABCDEF";
  std::string out;
  for (std::size_t i = 0; i < id.size(); ++i) {
    const auto c = static_cast<unsigned char>(id[i]);
    if (plain_filename_byte(c) && !(i == 0 && c == '.')) {
      out.push_back(static_cast<char>(c));
    } else {
      out.push_back('%');
      out.push_back(kHex[c >> 4]);
      out.push_back(kHex[c & 0xF]);
    }
  }
  return out;
}

std::string decode_action_filename(std::string_view stem) {
  std::string out;
  for (std::size_t i = 0; i < stem.size(); ++i) {
    if (stem[i] != '%') {
      out.push_back(stem[i]);
      continue;
    }
    if (i + 2 >= stem.size() || !std::isxdigit(static_cast<unsigned char>(stem[i + 1])) ||
        !std::isxdigit(static_cast<unsigned char>(stem[i + 2]))) {
      throw std::invalid_argument("malformed escape in policy filename '" + std::string(stem) + "'");
    }
    out.push_back(static_cast<char>(std::stoi(std::string(stem.substr(i + 1, 2)), nullptr, 16)));
    i += 2;
  }
  return out;
}

bool KnowledgeBase::insert(StepPolicy policy) {
  policy.action_id = canonical_action_id(policy.action_id);
  auto key = policy.action_id;
  return policies_.emplace(std::move(key), std::move(policy)).second;
}

const StepPolicy* KnowledgeBase::lookup(std::string_view action_id) const {
  auto it = policies_.find(canonical_action_id(action_id));
  return it == policies_.end() ? nullptr : &it->second;
}

std::string relax_policy_json(std::string_view text) {
  std::string out;
  out.reserve(text.size() + 16);
  bool in_string = false;
  for (std::size_t i = 0; i < text.size(); ++i) {
    const char c = text[i];
    if (in_string) {
      out.push_back(c);
      if (c == '\\' && i + 1 < text.size()) {
        out.push_back(text[++i]);
      } else if (c == '"') {
        in_string = false;
      }
      continue;
    }
    if (c == '"') {
      in_string = true;
      out.push_back(c);
      continue;
    }
    if (c == ',') {
      const auto next = text.find_first_not_of(" \t\r\n", i + 1);
      if (next != std::string_view::npos && (text[next] == '}' || text[next] == ']')) {
        continue;
      }
    }
    if (std::isalpha(static_cast<unsigned char>(c))) {
      std::size_t end = i;
      while (end < text.size() && (std::isalnum(static_cast<unsigned char>(text[end])) || text[end] == '-')) {
        ++end;
      }
      const std::string_view word = text.substr(i, end - i);
      if (word == "read" || word == "write" || word == "none") {
        out += '"';
        out += word;
        out += '"';
      } else {
        out += word;
      }
      i = end - 1;
      continue;
    }
    out.push_back(c);
  }
  return out;
}

StepPolicy parse_policy_document(std::string_view text, const fs::path& origin,
                                 std::optional<std::string_view> expected_id, bool lenient) {
  const nlohmann::json doc = parse_json(text, origin, lenient);
  if (!doc.is_object() || doc.size() != 1) {
    throw PolicyError(origin, "policy document must have exactly one top-level action key");
  }
  const auto& [key, body] = *doc.items().begin();
  StepPolicy policy;
  policy.action_id = canonical_action_id(key);
  if (policy.action_id.empty()) {
    throw PolicyError(origin, "empty action id");
  }
  if (expected_id && canonical_action_id(*expected_id) != policy.action_id) {
    throw PolicyError(origin, "document key '" + key + "' does not match file name '" +
                                  std::string(*expected_id) + "'");
  }
  policy.permissions = permissions_from(body, origin, key);
  return policy;
}

KnowledgeBase load_knowledge(const fs::path& dir, const LoadOptions& options) {
  std::error_code ec;
  if (!fs::is_directory(dir, ec)) {
    throw PolicyError(dir, "knowledge directory does not exist");
  }
  std::vector<fs::path> files;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (entry.is_regular_file() && entry.path().extension() == ".json") {
      files.push_back(entry.path());
    }
  }
  std::sort(files.begin(), files.end());

  KnowledgeBase kb(options.provenance);
  for (const auto& file : files) {
    std::string id;
    try {
      id = decode_action_filename(file.stem().string());
    } catch (const std::invalid_argument& e) {
      throw PolicyError(file, e.what());
    }
    StepPolicy policy = parse_policy_document(read_file(file), file, id, options.lenient);
    if (!kb.insert(policy)) {
      throw PolicyError(file, "duplicate policy for action '" + policy.action_id + "'");
    }
  }
  return kb;
}

KnowledgeBase load_consolidated_knowledge(const fs::path& file, const LoadOptions& options) {
  const nlohmann::json doc = parse_json(read_file(file), file, options.lenient);
  if (!doc.is_object()) {
    throw PolicyError(file, "consolidated knowledge base must be an object");
  }
  KnowledgeBase kb(options.provenance);
  for (const auto& [key, body] : doc.items()) {
    StepPolicy policy{canonical_action_id(key), permissions_from(body, file, key)};
    if (policy.action_id.empty()) {
      throw PolicyError(file, "empty action id");
    }
    if (!kb.insert(std::move(policy))) {
      throw PolicyError(file, "duplicate policy for action '" + key + "'");
    }
  }
  return kb;
}

KnowledgeBase load_knowledge_any(const fs::path& path, const LoadOptions& options) {
  std::error_code ec;
  if (fs::is_regular_file(path, ec)) {
    return load_consolidated_knowledge(path, options);
  }
  return load_knowledge(path, options);
}

std::string serialize_policy(const StepPolicy& policy) {
  nlohmann::json doc;
  doc[policy.action_id] = to_json(policy.permissions);
  return doc.dump(2) + "\n";
}

fs::path save_policy(const fs::path& dir, const StepPolicy& policy) {
  static std::atomic<unsigned> counter{0};
  const std::string id = canonical_action_id(policy.action_id);
  if (id.empty()) {
    throw PolicyError(dir, "cannot save a policy with an empty action id");
  }
  const fs::path target = dir / (encode_action_filename(id) + ".json");
  const fs::path temp =
      dir / ("." + encode_action_filename(id) + ".tmp" +
             std::to_string(std::hash<std::thread::id>{}(std::this_thread::get_id())) + "-" +
             std::to_string(counter++));
  {
    std::ofstream out(temp, std::ios::binary | std::ios::trunc);
    if (!out) {
      throw PolicyError(temp, "cannot open for writing");
    }
    out << serialize_policy(StepPolicy{id, policy.permissions});
    out.flush();
    if (!out) {
      throw PolicyError(temp, "write failure");
    }
  }
  std::error_code ec;
  fs::rename(temp, target, ec);
  if (ec) {
    fs::remove(temp);
    throw PolicyError(target, "rename failed: " + ec.message());
  }
  return target;
}

}  // namespace stepguard
