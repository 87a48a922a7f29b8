#pragma once

#include <filesystem>
#include <memory>
#include <string>

struct ssl_ctx_st;  // SSL_CTX

namespace stepguard {

// Writes a self-signed CA certificate and its private key (PEM). Clients
// routed through the proxy must trust the certificate for intercepted hosts.
void generate_ca(const std::filesystem::path& cert_path, const std::filesystem::path& key_path,
                 const std::string& common_name = "stepguard interception CA");

// Loaded CA that mints leaf certificates for intercepted hosts. Leaf
// contexts are cached per host; safe for concurrent use.
class InterceptionAuthority {
 public:
  // Throws std::runtime_error when the PEM files cannot be read.
  InterceptionAuthority(const std::filesystem::path& cert_path, const std::filesystem::path& key_path);
  ~InterceptionAuthority();
  InterceptionAuthority(const InterceptionAuthority&) = delete;
  InterceptionAuthority& operator=(const InterceptionAuthority&) = delete;

  // Server context presenting a certificate for `host`, owned by this object.
  ssl_ctx_st* server_context(const std::string& host);

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace stepguard
