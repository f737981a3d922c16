#include "ctmaas/broker.hpp"

#include <algorithm>
#include <cstdio>

namespace ctmaas::broker {

bool zones_intersect(const cits::RelevanceZone& a, const cits::RelevanceZone& b) {
  return haversine_distance(a.center, b.center) <= a.radius + b.radius;
}

bool filter_matches(const std::set<std::string>& type_filter, std::string_view msg_type) {
  return type_filter.empty() || type_filter.contains(std::string(msg_type));
}

std::string Broker::subscribe(std::string subscriber_id, const cits::RelevanceZone& geofence,
                              std::set<std::string> type_filter, double now, Sink sink) {
  if (auto errors = cits::zone_violations(geofence, "geofence"); !errors.empty()) {
    std::string what = "invalid geofence:";
    for (const auto& e : errors) what += " " + e + ";";
    throw InvalidGeofence(what);
  }
  for (const auto& t : type_filter) {
    if (std::find(std::begin(cits::kMsgTypes), std::end(cits::kMsgTypes), t) == std::end(cits::kMsgTypes))
      throw BrokerError("unknown msg_type in filter: " + t);
  }
  auto entry = std::make_shared<Entry>();
  entry->sub.subscriber_id = std::move(subscriber_id);
  entry->sub.geofence = geofence;
  entry->sub.type_filter = std::move(type_filter);
  entry->sub.created_at = now;
  entry->sink = std::move(sink);

  std::unique_lock lock(subs_mu_);
  char buf[32];
  std::snprintf(buf, sizeof buf, "sub-%08llu", static_cast<unsigned long long>(next_id_++));
  entry->sub.sub_id = buf;
  subs_.push_back(entry);
  return entry->sub.sub_id;
}

void Broker::unsubscribe(const std::string& sub_id) {
  std::shared_ptr<Entry> entry;
  {
    std::unique_lock lock(subs_mu_);
    auto it = std::find_if(subs_.begin(), subs_.end(), [&](const auto& e) { return e->sub.sub_id == sub_id; });
    if (it == subs_.end()) throw UnknownSubscription("unknown subscription " + sub_id);
    entry = *it;
    subs_.erase(it);
  }
  // Waits for any in-flight delivery to this subscription to finish.
  std::lock_guard lock(entry->mu);
  entry->active = false;
}

cits::RelevanceZone Broker::effective_zone(const cits::Message& msg, std::optional<GeoPoint> sender_position) const {
  if (auto zone = cits::zone_of(msg)) return *zone;
  if (!sender_position) {
    if (const auto* cam = std::get_if<cits::CamMessage>(&msg)) sender_position = cam->position;
  }
  if (!sender_position) throw MissingSenderPosition(std::string(cits::msg_type(msg)) + " needs a sender position");
  return cits::RelevanceZone{*sender_position, config_.sender_radius_m};
}

std::vector<Delivery> Broker::publish(const cits::Message& msg, double now, std::optional<GeoPoint> sender_position) {
  cits::validate(msg);
  if (auto valid_to = cits::valid_to_of(msg); valid_to && *valid_to < now)
    throw ExpiredMessage("message " + cits::message_key(msg) + " expired");
  const auto zone = effective_zone(msg, sender_position);
  const auto type = cits::msg_type(msg);
  const auto key = cits::message_key(msg);

  std::vector<std::shared_ptr<Entry>> snapshot;
  {
    std::shared_lock lock(subs_mu_);
    snapshot = subs_;
  }
  std::vector<Delivery> out;
  for (const auto& entry : snapshot) {
    if (!filter_matches(entry->sub.type_filter, type) || !zones_intersect(zone, entry->sub.geofence)) continue;
    std::lock_guard entry_lock(entry->mu);
    if (!entry->active) continue;
    {
      std::lock_guard lock(delivered_mu_);
      if (!delivered_.emplace(key, entry->sub.sub_id).second) continue;
    }
    out.push_back(Delivery{key, entry->sub.sub_id, now});
    if (entry->sink) entry->sink(msg, entry->sub);
  }
  return out;
}

std::vector<Subscription> Broker::subscriptions() const {
  std::shared_lock lock(subs_mu_);
  std::vector<Subscription> out;
  out.reserve(subs_.size());
  for (const auto& e : subs_) out.push_back(e->sub);
  return out;
}

std::size_t Broker::delivery_count() const {
  std::lock_guard lock(delivered_mu_);
  return delivered_.size();
}

}  // namespace ctmaas::broker
