#include "stepguard/tls.hpp"

#include <arpa/inet.h>

#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <random>
#include <stdexcept>

#include <openssl/err.h>
#include <openssl/evp.h>
#include <openssl/pem.h>
#include <openssl/ssl.h>
#include <openssl/x509v3.h>

namespace stepguard {
namespace {

struct PkeyDeleter {
  void operator()(EVP_PKEY* p) const { EVP_PKEY_free(p); }
};
struct X509Deleter {
  void operator()(X509* x) const { X509_free(x); }
};
struct CtxDeleter {
  void operator()(SSL_CTX* c) const { SSL_CTX_free(c); }
};
struct BioDeleter {
  void operator()(BIO* b) const { BIO_free(b); }
};
using PkeyPtr = std::unique_ptr<EVP_PKEY, PkeyDeleter>;
using X509Ptr = std::unique_ptr<X509, X509Deleter>;
using CtxPtr = std::unique_ptr<SSL_CTX, CtxDeleter>;
using BioPtr = std::unique_ptr<BIO, BioDeleter>;

[[noreturn]] void fail(const std::string& what) {
  char buffer[256] = {};
  ERR_error_string_n(ERR_get_error(), buffer, sizeof(buffer));
  throw std::runtime_error(what + ": " + buffer);
}

PkeyPtr new_key() {
  PkeyPtr key(EVP_PKEY_Q_keygen(nullptr, nullptr, "EC", "P-256"));
  if (!key) {
    fail("key generation failed");
  }
  return key;
}

void add_extension(X509* cert, X509* issuer, int nid, const std::string& value) {
  X509V3_CTX ctx;
  X509V3_set_ctx_nodb(&ctx);
  X509V3_set_ctx(&ctx, issuer, cert, nullptr, nullptr, 0);
  X509_EXTENSION* ext = X509V3_EXT_conf_nid(nullptr, &ctx, nid, value.c_str());
  if (ext == nullptr) {
    fail("cannot build certificate extension");
  }
  X509_add_ext(cert, ext, -1);
  X509_EXTENSION_free(ext);
}

bool is_ip_literal(const std::string& host) {
  unsigned char buf[16];
  return inet_pton(AF_INET, host.c_str(), buf) == 1 || inet_pton(AF_INET6, host.c_str(), buf) == 1;
}

// Self-signed when issuer is null.
X509Ptr make_certificate(EVP_PKEY* key, const std::string& common_name, X509* issuer, EVP_PKEY* issuer_key,
                         bool is_ca) {
  X509Ptr cert(X509_new());
  X509_set_version(cert.get(), 2);
  static std::mt19937_64 rng{std::random_device{}()};
  static std::mutex rng_mutex;
  {
    std::lock_guard lock(rng_mutex);
    ASN1_INTEGER_set_uint64(X509_get_serialNumber(cert.get()), rng() >> 1);
  }
  X509_gmtime_adj(X509_getm_notBefore(cert.get()), -24 * 3600);
  X509_gmtime_adj(X509_getm_notAfter(cert.get()), is_ca ? 3650L * 24 * 3600 : 397L * 24 * 3600);
  X509_set_pubkey(cert.get(), key);
  X509_NAME* name = X509_get_subject_name(cert.get());
  X509_NAME_add_entry_by_txt(name, "CN", MBSTRING_UTF8,
                             reinterpret_cast<const unsigned char*>(common_name.c_str()), -1, -1, 0);
  X509* signer = issuer != nullptr ? issuer : cert.get();
  X509_set_issuer_name(cert.get(), X509_get_subject_name(signer));
  if (is_ca) {
    add_extension(cert.get(), signer, NID_basic_constraints, "critical,CA:TRUE");
    add_extension(cert.get(), signer, NID_key_usage, "critical,keyCertSign,cRLSign");
    add_extension(cert.get(), signer, NID_subject_key_identifier, "hash");
  } else {
    add_extension(cert.get(), signer, NID_basic_constraints, "critical,CA:FALSE");
    add_extension(cert.get(), signer, NID_key_usage, "critical,digitalSignature,keyEncipherment");
    add_extension(cert.get(), signer, NID_ext_key_usage, "serverAuth");
    add_extension(cert.get(), signer, NID_subject_alt_name,
                  (is_ip_literal(common_name) ? "IP:" : "DNS:") + common_name);
  }
  if (X509_sign(cert.get(), issuer_key != nullptr ? issuer_key : key, EVP_sha256()) == 0) {
    fail("certificate signing failed");
  }
  return cert;
}

void write_pem(const std::filesystem::path& path, const std::function<int(BIO*)>& writer) {
  BioPtr bio(BIO_new_file(path.c_str(), "w"));
  if (!bio || writer(bio.get()) != 1) {
    fail("cannot write " + path.string());
  }
}

}  // namespace

void generate_ca(const std::filesystem::path& cert_path, const std::filesystem::path& key_path,
                 const std::string& common_name) {
  PkeyPtr key = new_key();
  X509Ptr cert = make_certificate(key.get(), common_name, nullptr, nullptr, true);
  write_pem(cert_path, [&](BIO* bio) { return PEM_write_bio_X509(bio, cert.get()); });
  write_pem(key_path, [&](BIO* bio) {
    return PEM_write_bio_PrivateKey(bio, key.get(), nullptr, nullptr, 0, nullptr, nullptr);
  });
  std::filesystem::permissions(key_path, std::filesystem::perms::owner_read | std::filesystem::perms::owner_write);
}

struct InterceptionAuthority::Impl {
  X509Ptr ca_cert;
  PkeyPtr ca_key;
  PkeyPtr leaf_key;  // shared by every minted leaf
  std::mutex mutex;
  std::map<std::string, CtxPtr> contexts;
};

InterceptionAuthority::InterceptionAuthority(const std::filesystem::path& cert_path,
                                             const std::filesystem::path& key_path)
    : impl_(std::make_unique<Impl>()) {
  BioPtr cert_bio(BIO_new_file(cert_path.c_str(), "r"));
  if (!cert_bio) {
    fail("cannot read CA certificate " + cert_path.string());
  }
  impl_->ca_cert.reset(PEM_read_bio_X509(cert_bio.get(), nullptr, nullptr, nullptr));
  BioPtr key_bio(BIO_new_file(key_path.c_str(), "r"));
  if (!key_bio) {
    fail("cannot read CA key " + key_path.string());
  }
  impl_->ca_key.reset(PEM_read_bio_PrivateKey(key_bio.get(), nullptr, nullptr, nullptr));
  if (!impl_->ca_cert || !impl_->ca_key) {
    fail("malformed CA material");
  }
  if (X509_check_private_key(impl_->ca_cert.get(), impl_->ca_key.get()) != 1) {
    fail("CA key does not match certificate");
  }
  impl_->leaf_key = new_key();
}

InterceptionAuthority::~InterceptionAuthority() = default;

ssl_ctx_st* InterceptionAuthority::server_context(const std::string& host) {
  std::lock_guard lock(impl_->mutex);
  auto it = impl_->contexts.find(host);
  if (it != impl_->contexts.end()) {
    return it->second.get();
  }
  X509Ptr leaf = make_certificate(impl_->leaf_key.get(), host, impl_->ca_cert.get(), impl_->ca_key.get(), false);
  CtxPtr ctx(SSL_CTX_new(TLS_server_method()));
  if (!ctx || SSL_CTX_use_certificate(ctx.get(), leaf.get()) != 1 ||
      SSL_CTX_use_PrivateKey(ctx.get(), impl_->leaf_key.get()) != 1 ||
      SSL_CTX_add1_chain_cert(ctx.get(), impl_->ca_cert.get()) != 1) {
    fail("cannot build interception context for " + host);
  }
  SSL_CTX_set_min_proto_version(ctx.get(), TLS1_2_VERSION);
  auto* raw = ctx.get();
  impl_->contexts.emplace(host, std::move(ctx));
  return raw;
}

}  // namespace stepguard
