#include "ctmaas/auth.hpp"

#include <array>
#include <cstdio>

#include <nlohmann/json.hpp>
#include <openssl/crypto.h>
#include <openssl/evp.h>
#include <openssl/hmac.h>
#include <openssl/rand.h>

namespace ctmaas::auth {

using nlohmann::json;

namespace {

constexpr std::string_view kRoleNames[] = {"FleetManager", "TrafficManager", "Driver"};
constexpr std::string_view kRejectionNames[] = {"Unknown", "Expired", "Tampered"};

std::string to_hex(const unsigned char* data, std::size_t n) {
  static constexpr char digits[] = "0123456789abcdef";
  std::string out;
  out.reserve(n * 2);
  for (std::size_t i = 0; i < n; ++i) {
    out.push_back(digits[data[i] >> 4]);
    out.push_back(digits[data[i] & 0xF]);
  }
  return out;
}

std::string random_hex(std::size_t bytes) {
  std::vector<unsigned char> buf(bytes);
  if (RAND_bytes(buf.data(), static_cast<int>(bytes)) != 1) throw AuthError("random source failed");
  return to_hex(buf.data(), bytes);
}

std::vector<std::string> split(std::string_view s, char sep) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = s.find(sep, start);
    out.emplace_back(s.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

json user_json(const User& u) {
  json j{{"user_id", u.user_id},
         {"display_name", u.display_name},
         {"role", std::string(to_string(u.role))},
         {"credential_hash", u.credential_hash}};
  j["driver_id"] = u.driver_id ? json(*u.driver_id) : json(nullptr);
  return j;
}

}  // namespace

std::string_view to_string(Role r) { return kRoleNames[static_cast<std::size_t>(r)]; }
std::string_view to_string(Rejection r) { return kRejectionNames[static_cast<std::size_t>(r)]; }

std::optional<Role> role_from(std::string_view s) {
  for (std::size_t i = 0; i < std::size(kRoleNames); ++i)
    if (kRoleNames[i] == s) return static_cast<Role>(i);
  return std::nullopt;
}

std::string hash_credential(std::string_view credential, std::string_view salt, int iterations) {
  std::array<unsigned char, 32> out{};
  if (PKCS5_PBKDF2_HMAC(credential.data(), static_cast<int>(credential.size()),
                        reinterpret_cast<const unsigned char*>(salt.data()), static_cast<int>(salt.size()), iterations,
                        EVP_sha256(), static_cast<int>(out.size()), out.data()) != 1)
    throw AuthError("credential hashing failed");
  return "pbkdf2-sha256$" + std::to_string(iterations) + "$" + std::string(salt) + "$" + to_hex(out.data(), out.size());
}

bool verify_credential(std::string_view credential, std::string_view stored_hash) {
  const auto parts = split(stored_hash, '$');
  if (parts.size() != 4 || parts[0] != "pbkdf2-sha256") return false;
  int iterations = 0;
  try {
    iterations = std::stoi(parts[1]);
  } catch (...) {
    return false;
  }
  if (iterations <= 0) return false;
  const std::string fresh = hash_credential(credential, parts[2], iterations);
  return fresh.size() == stored_hash.size() && CRYPTO_memcmp(fresh.data(), stored_hash.data(), fresh.size()) == 0;
}

std::string base64url_encode(std::string_view bytes) {
  std::string out(4 * ((bytes.size() + 2) / 3) + 1, '\0');
  const int n = EVP_EncodeBlock(reinterpret_cast<unsigned char*>(out.data()),
                                reinterpret_cast<const unsigned char*>(bytes.data()), static_cast<int>(bytes.size()));
  out.resize(static_cast<std::size_t>(n));
  while (!out.empty() && out.back() == '=') out.pop_back();
  for (auto& c : out) {
    if (c == '+') c = '-';
    else if (c == '/') c = '_';
  }
  return out;
}

std::optional<std::string> base64url_decode(std::string_view text) {
  std::string s(text);
  for (auto& c : s) {
    if (c == '-') c = '+';
    else if (c == '_') c = '/';
    else if (c == '+' || c == '/' || c == '=') return std::nullopt;
  }
  if (s.size() % 4 == 1) return std::nullopt;
  const std::size_t pad = (4 - s.size() % 4) % 4;
  s.append(pad, '=');
  std::string out(s.size() / 4 * 3, '\0');
  const int n = EVP_DecodeBlock(reinterpret_cast<unsigned char*>(out.data()),
                                reinterpret_cast<const unsigned char*>(s.data()), static_cast<int>(s.size()));
  if (n < 0) return std::nullopt;
  out.resize(static_cast<std::size_t>(n) - pad);
  // Reject non-canonical encodings so each token has exactly one spelling.
  if (base64url_encode(out) != text) return std::nullopt;
  return out;
}

AuthService::AuthService(std::string secret, store::Store* store, double ttl_s)
    : secret_(std::move(secret)), store_(store), ttl_s_(ttl_s) {
  if (secret_.empty()) secret_ = random_hex(32);
}

std::string AuthService::sign(std::string_view payload) const {
  unsigned char mac[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  HMAC(EVP_sha256(), secret_.data(), static_cast<int>(secret_.size()),
       reinterpret_cast<const unsigned char*>(payload.data()), payload.size(), mac, &len);
  return base64url_encode(std::string_view(reinterpret_cast<const char*>(mac), len));
}

void AuthService::add_user(const std::string& user_id, const std::string& display_name, Role role,
                           const std::string& credential, std::optional<std::string> driver_id, double now) {
  if (user_id.empty()) throw AuthError("user id must be non-empty");
  User u{user_id, display_name, role, hash_credential(credential, random_hex(16)), std::move(driver_id)};
  std::lock_guard lock(mu_);
  if (users_.contains(user_id)) throw AuthError("duplicate user " + user_id);
  if (store_) store_->put("auth", "users", user_id, user_json(u), now);
  users_.emplace(user_id, std::move(u));
}

std::optional<User> AuthService::user(const std::string& user_id) const {
  std::lock_guard lock(mu_);
  if (auto it = users_.find(user_id); it != users_.end()) return it->second;
  return std::nullopt;
}

std::vector<User> AuthService::users() const {
  std::lock_guard lock(mu_);
  std::vector<User> out;
  for (const auto& [id, u] : users_) out.push_back(u);
  return out;
}

AuthToken AuthService::login(const std::string& user_id, const std::string& credential, double now) {
  std::lock_guard lock(mu_);
  auto it = users_.find(user_id);
  if (it == users_.end() || !verify_credential(credential, it->second.credential_hash))
    throw BadCredential("bad user id or credential");
  const std::string jti = random_hex(8) + "-" + std::to_string(++counter_);
  const json payload{{"uid", user_id}, {"iat", now}, {"exp", now + ttl_s_}, {"jti", jti}};
  const std::string body = base64url_encode(payload.dump());
  AuthToken t{body + "." + sign(body), user_id, now, now + ttl_s_};
  issued_.emplace(jti, t);
  if (store_)
    store_->put("auth", "tokens", jti,
                json{{"user_id", user_id}, {"issued_at", t.issued_at}, {"expires_at", t.expires_at}}, now);
  return t;
}

Principal AuthService::validate(const std::string& token, double now) const {
  const auto dot = token.find('.');
  if (dot == std::string::npos || token.find('.', dot + 1) != std::string::npos)
    throw TokenRejected(Rejection::Unknown, "token is not recognised");
  const std::string body = token.substr(0, dot);
  const std::string sig = token.substr(dot + 1);
  const std::string expected = sign(body);
  if (sig.size() != expected.size() || CRYPTO_memcmp(sig.data(), expected.data(), sig.size()) != 0)
    throw TokenRejected(Rejection::Tampered, "token signature does not verify");
  const auto decoded = base64url_decode(body);
  if (!decoded) throw TokenRejected(Rejection::Tampered, "token payload is damaged");
  json payload;
  try {
    payload = json::parse(*decoded);
  } catch (const json::exception&) {
    throw TokenRejected(Rejection::Tampered, "token payload is damaged");
  }
  std::lock_guard lock(mu_);
  const auto jti = payload.value("jti", std::string());
  auto it = issued_.find(jti);
  if (it == issued_.end()) throw TokenRejected(Rejection::Unknown, "token is not recognised");
  const auto& issued = it->second;
  if (now > issued.expires_at) throw TokenRejected(Rejection::Expired, "token has expired");
  auto u = users_.find(issued.user_id);
  if (u == users_.end()) throw TokenRejected(Rejection::Unknown, "token owner no longer exists");
  return Principal{u->second, issued};
}

void AuthService::revoke(const std::string& token, double now) {
  const auto dot = token.find('.');
  if (dot == std::string::npos) return;
  const auto decoded = base64url_decode(token.substr(0, dot));
  if (!decoded) return;
  try {
    const auto jti = json::parse(*decoded).value("jti", std::string());
    std::lock_guard lock(mu_);
    if (issued_.erase(jti) > 0 && store_) store_->erase("auth", "tokens", jti, now);
  } catch (const json::exception&) {
  }
}

void AuthService::load(const store::State& state) {
  const json ns = state.value("auth", json::object());
  std::lock_guard lock(mu_);
  users_.clear();
  issued_.clear();
  const json users = ns.value("users", json::object());
  for (const auto& [id, u] : users.items()) {
    User user{id, u.value("display_name", ""), role_from(u.value("role", "")).value_or(Role::Driver),
              u.value("credential_hash", ""), std::nullopt};
    if (u.contains("driver_id") && u["driver_id"].is_string()) user.driver_id = u["driver_id"].get<std::string>();
    users_.emplace(id, std::move(user));
  }
  const json tokens = ns.value("tokens", json::object());
  for (const auto& [jti, t] : tokens.items()) {
    // The signed token text is not stored; the registry only needs identity and lifetime.
    issued_.emplace(jti, AuthToken{"", t.value("user_id", ""), t.value("issued_at", 0.0), t.value("expires_at", 0.0)});
  }
}

}  // namespace ctmaas::auth
