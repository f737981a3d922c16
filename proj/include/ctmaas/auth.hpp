#pragma once

#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "ctmaas/store.hpp"

namespace ctmaas::auth {

enum class Role { FleetManager, TrafficManager, Driver };

inline constexpr Role kAllRoles[] = {Role::FleetManager, Role::TrafficManager, Role::Driver};

std::string_view to_string(Role r);
std::optional<Role> role_from(std::string_view s);

struct User {
  std::string user_id;
  std::string display_name;
  Role role = Role::Driver;
  std::string credential_hash;
  std::optional<std::string> driver_id;  // links a Driver account to its fleet driver record
};

struct AuthToken {
  std::string token;
  std::string user_id;
  double issued_at = 0.0;
  double expires_at = 0.0;
};

enum class Rejection { Unknown, Expired, Tampered };
std::string_view to_string(Rejection r);

class AuthError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};
class BadCredential : public AuthError {
 public:
  using AuthError::AuthError;
};
class TokenRejected : public AuthError {
 public:
  TokenRejected(Rejection why, const std::string& what) : AuthError(what), why_(why) {}
  Rejection why() const noexcept { return why_; }

 private:
  Rejection why_;
};

/// "pbkdf2-sha256$<iterations>$<salt hex>$<hash hex>".
std::string hash_credential(std::string_view credential, std::string_view salt, int iterations = 10000);
bool verify_credential(std::string_view credential, std::string_view stored_hash);

std::string base64url_encode(std::string_view bytes);
std::optional<std::string> base64url_decode(std::string_view text);

struct Principal {
  User user;
  AuthToken token;
};

/// Users, credentials and issued tokens. Tokens are "<payload>.<signature>" where the
/// signature is an HMAC-SHA256 of the payload under the server secret.
class AuthService {
 public:
  AuthService(std::string secret, store::Store* store, double ttl_s = 3600.0);

  /// Stores the user with a hashed credential.
  void add_user(const std::string& user_id, const std::string& display_name, Role role,
                const std::string& credential, std::optional<std::string> driver_id, double now);
  std::optional<User> user(const std::string& user_id) const;
  std::vector<User> users() const;

  AuthToken login(const std::string& user_id, const std::string& credential, double now);
  Principal validate(const std::string& token, double now) const;
  void revoke(const std::string& token, double now);

  double ttl() const { return ttl_s_; }
  void load(const store::State& state);

 private:
  std::string sign(std::string_view payload) const;

  std::string secret_;
  store::Store* store_;
  double ttl_s_;
  mutable std::mutex mu_;
  std::map<std::string, User> users_;
  std::map<std::string, AuthToken> issued_;  // by token id
  std::uint64_t counter_ = 0;
};

}  // namespace ctmaas::auth
