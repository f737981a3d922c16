#pragma once

#include <atomic>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <regex>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "ctmaas/auth.hpp"
#include "ctmaas/platform.hpp"

namespace httplib {
class Server;
}

namespace ctmaas::api {

struct Call {
  std::vector<std::string> params;  // regex captures from the path
  std::map<std::string, std::string> query;
  nlohmann::json body;
  std::optional<auth::Principal> principal;  // empty only on public endpoints
  double now = 0.0;
};

struct Response {
  int status = 200;
  nlohmann::json body;
};

using Handler = std::function<Response(Platform&, const Call&)>;

enum class StreamKind { None, Positions, Advisories };

struct Endpoint {
  std::string method;
  std::string path;  // documentation form, e.g. "/trips/{id}/eta"
  std::regex pattern;
  std::set<auth::Role> roles;  // empty together with is_public
  bool is_public = false;
  bool mutating = false;
  StreamKind stream = StreamKind::None;
  Handler handler;
};

/// The complete endpoint list. Every entry carries an explicit role set.
const std::vector<Endpoint>& route_table();

/// 422 for a request whose body or query is unusable; `field` names the culprit.
class BadRequest : public std::runtime_error {
 public:
  BadRequest(std::string field, const std::string& what) : std::runtime_error(what), field_(std::move(field)) {}
  const std::string& field() const noexcept { return field_; }

 private:
  std::string field_;
};

struct Dispatched {
  Response response;
  const Endpoint* endpoint = nullptr;
  std::optional<auth::Principal> principal;
  std::map<std::string, std::string> query;
};

/// Routes, authenticates, authorizes and runs a request. For stream endpoints the
/// handler is not run; a 200 here means the caller may open the stream.
Dispatched dispatch(Platform& platform, const std::string& method, const std::string& path,
                    const std::string& authorization, const std::string& body,
                    const std::map<std::string, std::string>& query);

/// Serialization used by the trip endpoints: trip plus its remaining route.
nlohmann::json trip_view(Platform& platform, const fleet::Trip& trip);

/// HTTP/1.1 front end. Streams are newline-delimited JSON over chunked transfer.
class Server {
 public:
  explicit Server(Platform& platform);
  ~Server();

  /// Binds; port 0 picks a free port. Returns the bound port or -1.
  int bind(const std::string& host, int port);
  /// Serves on a background thread until stop().
  void start();
  /// Serves on the calling thread until stop().
  void run();
  void stop();

 private:
  Platform& platform_;
  std::unique_ptr<httplib::Server> http_;
  std::thread thread_;
  std::atomic<bool> stopping_{false};
};

}  // namespace ctmaas::api
