#pragma once

#include <condition_variable>
#include <deque>
#include <functional>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ctmaas/auth.hpp"
#include "ctmaas/broker.hpp"
#include "ctmaas/fleet.hpp"
#include "ctmaas/geomessenger.hpp"
#include "ctmaas/ids.hpp"
#include "ctmaas/road_graph.hpp"
#include "ctmaas/signal.hpp"
#include "ctmaas/store.hpp"

namespace ctmaas {

struct UserSeed {
  std::string user_id;
  std::string display_name;
  auth::Role role = auth::Role::FleetManager;
  std::string credential;
  std::optional<std::string> driver_id;
};

struct PlatformConfig {
  std::string log_path;       // empty keeps the store in memory
  std::string snapshot_path;
  double snapshot_interval_s = 300.0;
  std::string gazetteer_path;
  std::string secret;         // empty picks a random one per process
  double token_ttl_s = 3600.0;
  std::uint64_t seed = 1;
  double reroute_check_interval_s = 5.0;
  int port = 8080;
  fleet::FleetConfig fleet;
  geomessenger::GeomessengerConfig geomessenger;
  signal::PriorityConfig priority;
  broker::BrokerConfig broker;
  std::vector<UserSeed> users;
};

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Reads a TOML configuration; unknown keys are ignored, bad values rejected.
PlatformConfig load_config(std::string_view toml_text);
PlatformConfig load_config_file(const std::string& path);

/// Fan-out queue for the NDJSON stream. Each subscriber gets every event published
/// after it subscribed, in publish order.
class EventHub {
 public:
  class Subscriber {
   public:
    /// Next event, or nullopt on timeout or when the hub closes.
    std::optional<nlohmann::json> pop(double timeout_s);
    bool closed() const;

   private:
    friend class EventHub;
    mutable std::mutex mu_;
    std::condition_variable cv_;
    std::deque<nlohmann::json> queue_;
    bool closed_ = false;
  };

  std::shared_ptr<Subscriber> subscribe();
  void unsubscribe(const std::shared_ptr<Subscriber>& s);
  void publish(const nlohmann::json& event);
  void close();
  std::size_t subscriber_count() const;

 private:
  mutable std::mutex mu_;
  std::vector<std::shared_ptr<Subscriber>> subs_;
  bool closed_ = false;
};

/// Every primary service wired together in one process.
class Platform {
 public:
  Platform(road::RoadGraph graph, std::vector<signal::SignalPlan> plans, PlatformConfig config,
           fleet::Gazetteer gazetteer = {});
  ~Platform();

  /// Periodic work: geomessenger broadcasts, reroute checks, snapshots.
  void tick(double now);

  /// Current time. Defaults to the wall clock; a simulation installs its own.
  double now() const;
  void set_clock(std::function<double()> clock);

  /// Fleet-known vehicles go through the fleet; others straight to the geomessenger.
  bool ingest_cam(const cits::CamMessage& cam);

  const PlatformConfig& config() const { return config_; }
  UuidSource& ids() { return ids_; }
  road::LiveGraph& graph() { return graph_; }
  broker::Broker& broker() { return broker_; }
  geomessenger::Geomessenger& geomessenger() { return geomessenger_; }
  signal::SignalController& signals() { return signals_; }
  store::Store& store() { return *store_; }
  fleet::FleetService& fleet() { return fleet_; }
  auth::AuthService& auth() { return auth_; }
  EventHub& hub() { return hub_; }

  /// Centre and radius covering the whole network (for catch-all subscriptions).
  cits::RelevanceZone coverage() const { return coverage_; }

 private:
  PlatformConfig config_;
  UuidSource ids_;
  road::LiveGraph graph_;
  broker::Broker broker_;
  geomessenger::Geomessenger geomessenger_;
  signal::SignalController signals_;
  std::unique_ptr<store::Store> store_;
  fleet::FleetService fleet_;
  auth::AuthService auth_;
  EventHub hub_;
  cits::RelevanceZone coverage_;
  std::string hub_subscription_;

  mutable std::mutex clock_mu_;
  std::function<double()> clock_;
  std::mutex tick_mu_;
  std::optional<double> last_reroute_check_;
  std::optional<double> last_snapshot_;
};

}  // namespace ctmaas
