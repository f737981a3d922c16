#pragma once

#include <functional>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <shared_mutex>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "ctmaas/messages.hpp"

namespace ctmaas::broker {

struct Subscription {
  std::string sub_id;
  std::string subscriber_id;
  cits::RelevanceZone geofence;
  std::set<std::string> type_filter;  // empty = every family
  double created_at = 0.0;
};

struct Delivery {
  std::string msg_id;
  std::string sub_id;
  double delivered_at = 0.0;

  friend bool operator==(const Delivery&, const Delivery&) = default;
};

/// Called synchronously from publish. Must not unsubscribe its own subscription.
using Sink = std::function<void(const cits::Message&, const Subscription&)>;

class BrokerError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};
class InvalidGeofence : public BrokerError {
 public:
  using BrokerError::BrokerError;
};
class UnknownSubscription : public BrokerError {
 public:
  using BrokerError::BrokerError;
};
class ExpiredMessage : public BrokerError {
 public:
  using BrokerError::BrokerError;
};
class MissingSenderPosition : public BrokerError {
 public:
  using BrokerError::BrokerError;
};

struct BrokerConfig {
  double sender_radius_m = 1000.0;  // zone assigned to CAM and PRIORITY messages
};

/// Circle-circle intersection under haversine.
bool zones_intersect(const cits::RelevanceZone& a, const cits::RelevanceZone& b);

bool filter_matches(const std::set<std::string>& type_filter, std::string_view msg_type);

/// Geo-scoped publish/subscribe hub with at-most-once delivery per (message, subscription).
class Broker {
 public:
  explicit Broker(BrokerConfig config = {}) : config_(config) {}

  std::string subscribe(std::string subscriber_id, const cits::RelevanceZone& geofence,
                        std::set<std::string> type_filter, double now, Sink sink = {});
  void unsubscribe(const std::string& sub_id);

  /// Validates, checks expiry, matches and delivers. CAMs default to their own position
  /// as sender position; PRIORITY messages need one.
  std::vector<Delivery> publish(const cits::Message& msg, double now,
                                std::optional<GeoPoint> sender_position = std::nullopt);

  /// Relevance zone the broker uses for matching this message.
  cits::RelevanceZone effective_zone(const cits::Message& msg, std::optional<GeoPoint> sender_position) const;

  std::vector<Subscription> subscriptions() const;
  std::size_t delivery_count() const;

 private:
  struct Entry {
    Subscription sub;
    Sink sink;
    std::mutex mu;
    bool active = true;
  };

  BrokerConfig config_;
  mutable std::shared_mutex subs_mu_;
  std::vector<std::shared_ptr<Entry>> subs_;  // ordered by sub_id
  std::uint64_t next_id_ = 1;

  mutable std::mutex delivered_mu_;
  std::set<std::pair<std::string, std::string>> delivered_;
};

}  // namespace ctmaas::broker
