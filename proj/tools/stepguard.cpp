#include <signal.h>

#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "stepguard/analyzer.hpp"
#include "stepguard/endpoint_map.hpp"
#include "stepguard/policy_store.hpp"
#include "stepguard/proxy.hpp"
#include "stepguard/tls.hpp"
#include "stepguard/verifier.hpp"

using namespace stepguard;

namespace {

// Blocks SIGINT/SIGTERM in every thread started after this call; the main
// thread later picks them up with sigwait.
sigset_t block_termination_signals() {
  sigset_t set;
  sigemptyset(&set);
  sigaddset(&set, SIGINT);
  sigaddset(&set, SIGTERM);
  pthread_sigmask(SIG_BLOCK, &set, nullptr);
  return set;
}

void wait_for_signal(const sigset_t& set) {
  int sig = 0;
  sigwait(&set, &sig);
}

Mode mode_or_throw(const std::string& text) {
  auto mode = parse_mode(text);
  if (!mode) {
    throw CLI::ValidationError("--mode", "expected enforce or learn");
  }
  return *mode;
}

int run_analyze(const std::string& workflows, const std::string& knowledge, const std::string& defaults_text,
                const std::string& format, bool lenient) {
  auto defaults = parse_default_permissions(defaults_text);
  if (!defaults) {
    throw CLI::ValidationError("--default-permissions", "expected write, read or none");
  }
  const auto kb = load_knowledge_any(knowledge, LoadOptions{lenient});
  const auto report = analyze_corpus(workflows, kb, *defaults);
  if (format == "json") {
    std::cout << to_json(report).dump(2) << '\n';
  } else {
    std::cout << format_table(report);
  }
  return report.has_critical() ? 2 : 0;
}

int run_diff(const std::string& static_dir, const std::string& learned_dir, const std::string& format, bool lenient) {
  const LoadOptions options{lenient};
  const auto diff = diff_policies(load_knowledge_any(static_dir, options), load_knowledge_any(learned_dir, options));
  if (format == "json") {
    std::cout << to_json(diff).dump(2) << '\n';
  } else {
    std::cout << format_table(diff);
  }
  return 0;
}

int run_surface(const std::string& workflows, const std::string& knowledge,
                const std::optional<std::string>& learned, const std::string& format, bool lenient) {
  const LoadOptions options{lenient};
  const auto kb = load_knowledge_any(knowledge, options);
  auto report = analyze_corpus(workflows, kb);
  if (learned) {
    // Recompute the table with learned step requirements where available.
    const auto learned_kb = load_knowledge_any(*learned, options);
    for (auto& row : report.attack_surface) {
      const auto wf = parse_workflow_file(std::filesystem::path(workflows) / row.workflow_path);
      const Job* job = wf.find_job(row.job_id);
      if (job != nullptr) {
        row.surface = attack_surface(*job, kb, effective_job_permissions(wf, row.job_id), &learned_kb);
      }
    }
  }
  if (format == "json") {
    std::cout << to_json(report).at("attack_surface").dump(2) << '\n';
  } else {
    std::cout << format_surface_table(report);
  }
  return 0;
}

int run_infer(const std::string& method, const std::string& url, const std::optional<std::string>& map_file,
              const std::vector<std::string>& api_hosts) {
  EndpointMap map = map_file ? load_endpoint_map_file(*map_file) : seed_endpoint_map();
  if (!api_hosts.empty()) {
    map.set_api_hosts({api_hosts.begin(), api_hosts.end()});
  }
  std::cout << map.infer(RequestDescriptor::from_url(method, url)) << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Step-level GITHUB_TOKEN permission analysis and enforcement"};
  app.require_subcommand(1);

  bool lenient = false;
  app.add_flag("--lenient", lenient, "Accept unquoted levels and trailing commas in policy files");

  auto* analyze = app.add_subcommand("analyze", "Report overprivileged jobs in a workflow corpus");
  std::string workflows, knowledge, defaults = "write", format = "table";
  analyze->add_option("--workflows", workflows, "Workflow file or directory")->required();
  analyze->add_option("--knowledge", knowledge, "Policy directory or consolidated JSON")->required();
  analyze->add_option("--default-permissions", defaults, "Repository default for undeclared jobs")
      ->check(CLI::IsMember({"write", "read", "none"}));
  analyze->add_option("--format", format)->check(CLI::IsMember({"table", "json"}));

  auto* diff = app.add_subcommand("diff", "Compare a static knowledge base with learned policies");
  std::string static_dir, learned_dir;
  diff->add_option("--static", static_dir)->required();
  diff->add_option("--learned", learned_dir)->required();
  diff->add_option("--format", format)->check(CLI::IsMember({"table", "json"}));

  auto* surface = app.add_subcommand("surface", "Attack-surface reduction per overprivileged job");
  std::optional<std::string> surface_learned;
  surface->add_option("--workflows", workflows)->required();
  surface->add_option("--knowledge", knowledge)->required();
  surface->add_option("--learned", surface_learned, "Learned policies overriding static requirements");
  surface->add_option("--format", format)->check(CLI::IsMember({"table", "json"}));

  auto* verifier = app.add_subcommand("verifier", "Run the request verification service");
  std::string listen = "127.0.0.1:8181", mode_text = "enforce";
  std::optional<std::string> map_file, audit_file;
  std::vector<std::string> api_hosts;
  bool allow_unknown = false;
  verifier->add_option("--listen", listen, "host:port");
  verifier->add_option("--knowledge", knowledge, "Policy directory (learned policies are written here)")
      ->required();
  verifier->add_option("--endpoint-map", map_file, "JSON or JSONL endpoint map replacing the seed map");
  verifier->add_option("--mode", mode_text)->check(CLI::IsMember({"enforce", "learn"}));
  verifier->add_option("--api-host", api_hosts, "API hostname (repeatable)");
  verifier->add_flag("--allow-unknown", allow_unknown, "Allow requests whose endpoint cannot be mapped");
  verifier->add_option("--audit-log", audit_file, "Append decisions as JSON Lines");

  auto* proxy = app.add_subcommand("proxy", "Run the intercepting forward proxy");
  std::string proxy_listen = "127.0.0.1:8080", verifier_endpoint = "127.0.0.1:8181";
  std::optional<std::string> upstream, ca_cert, ca_key, action_id, flow_file;
  std::string action_header = kDefaultActionHeader;
  proxy->add_option("--listen", proxy_listen, "host:port");
  proxy->add_option("--api-host", api_hosts, "Hostname to intercept (repeatable)");
  proxy->add_option("--upstream", upstream, "Fake API server host:port; omit for live upstream");
  proxy->add_option("--ca-cert", ca_cert);
  proxy->add_option("--ca-key", ca_key);
  proxy->add_option("--verifier", verifier_endpoint, "Verification service host:port");
  proxy->add_option("--action-id", action_id, "Attribute every flow to this action");
  proxy->add_option("--action-header", action_header, "Attribution header when --action-id is absent");
  proxy->add_option("--mode", mode_text)->check(CLI::IsMember({"enforce", "learn"}));
  proxy->add_option("--flow-log", flow_file, "Append flow records as JSON Lines (default: stderr)");

  auto* ca = app.add_subcommand("ca", "Generate an interception CA");
  std::string ca_out_cert = "stepguard-ca.pem", ca_out_key = "stepguard-ca.key";
  ca->add_option("--cert", ca_out_cert);
  ca->add_option("--key", ca_out_key);

  auto* infer = app.add_subcommand("infer", "Show the permission inferred for one request");
  std::string infer_method, infer_url;
  infer->add_option("method", infer_method)->required();
  infer->add_option("url", infer_url)->required();
  infer->add_option("--endpoint-map", map_file);
  infer->add_option("--api-host", api_hosts);

  CLI11_PARSE(app, argc, argv);

  try {
    if (analyze->parsed()) {
      return run_analyze(workflows, knowledge, defaults, format, lenient);
    }
    if (diff->parsed()) {
      return run_diff(static_dir, learned_dir, format, lenient);
    }
    if (surface->parsed()) {
      return run_surface(workflows, knowledge, surface_learned, format, lenient);
    }
    if (infer->parsed()) {
      return run_infer(infer_method, infer_url, map_file, api_hosts);
    }
    if (ca->parsed()) {
      generate_ca(ca_out_cert, ca_out_key);
      std::cout << "wrote " << ca_out_cert << " and " << ca_out_key << '\n';
      return 0;
    }
    if (verifier->parsed()) {
      VerifierConfig config;
      config.mode = mode_or_throw(mode_text);
      config.knowledge_dir = knowledge;
      if (std::filesystem::exists(knowledge)) {
        config.knowledge = load_knowledge(knowledge, LoadOptions{lenient});
      } else if (config.mode == Mode::Enforcement) {
        throw std::runtime_error("knowledge directory " + knowledge + " does not exist");
      }
      config.endpoints = map_file ? load_endpoint_map_file(*map_file) : seed_endpoint_map();
      if (!api_hosts.empty()) {
        config.endpoints.set_api_hosts({api_hosts.begin(), api_hosts.end()});
      }
      config.options.allow_unknown = allow_unknown;
      std::ofstream audit;
      if (audit_file) {
        audit.open(*audit_file, std::ios::app);
        config.audit_sink = &audit;
      }
      const auto signals = block_termination_signals();
      const auto [host, port] = split_host_port(listen);
      VerifierService service(std::move(config));
      service.start(host, port);
      std::cerr << "verifier listening on " << host << ":" << service.port() << " (" << mode_text << ")\n";
      wait_for_signal(signals);
      for (const auto& path : service.stop()) {
        std::cerr << "wrote " << path.string() << '\n';
      }
      return 0;
    }
    if (proxy->parsed()) {
      ProxyConfig config;
      const auto [host, port] = split_host_port(proxy_listen);
      config.listen_host = host;
      config.listen_port = port;
      if (!api_hosts.empty()) {
        config.api_hosts = {api_hosts.begin(), api_hosts.end()};
      }
      if (upstream) {
        config.upstream = split_host_port(*upstream);
      }
      if (ca_cert) {
        config.ca_cert = *ca_cert;
      }
      if (ca_key) {
        config.ca_key = *ca_key;
      }
      config.verifier = verifier_endpoint;
      config.static_action_id = action_id;
      config.action_header = action_header;
      config.mode = mode_or_throw(mode_text);
      std::ofstream flows;
      if (flow_file) {
        flows.open(*flow_file, std::ios::app);
        config.flow_log = &flows;
      } else {
        config.flow_log = &std::cerr;
      }
      const auto signals = block_termination_signals();
      EnforcementProxy server(std::move(config));
      server.start();
      std::cerr << "proxy listening on " << host << ":" << server.port() << " (" << mode_text << ")\n";
      wait_for_signal(signals);
      server.stop();
      return 0;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
