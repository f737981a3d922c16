#include "ctmaas/geomessenger.hpp"

#include <array>
#include <cstdio>
#include <set>

namespace ctmaas::geomessenger {

using nlohmann::json;

namespace {

constexpr std::array<std::string_view, 10> kCauseNames = {
    "LaneClosure",       "MobileRoadWorks", "PlannedRoadWorks",  "LongTermRoadWorks", "UnplannedRoadWorks",
    "WeatherConditions", "ObstacleOnRoad",  "StationaryVehicle", "VmsFreeText",       "Congestion",
};
constexpr std::array<std::string_view, 3> kSourceNames = {"Manual", "TMC", "AutoDetected"};

constexpr double kTimeEps = 1e-9;

}  // namespace

std::string_view to_string(EventCause c) { return kCauseNames[static_cast<std::size_t>(c)]; }
std::string_view to_string(EventSource s) { return kSourceNames[static_cast<std::size_t>(s)]; }

std::optional<EventCause> event_cause_from(std::string_view name) {
  for (std::size_t i = 0; i < kCauseNames.size(); ++i)
    if (kCauseNames[i] == name) return static_cast<EventCause>(i);
  return std::nullopt;
}

std::optional<EventSource> event_source_from(std::string_view name) {
  for (std::size_t i = 0; i < kSourceNames.size(); ++i)
    if (kSourceNames[i] == name) return static_cast<EventSource>(i);
  return std::nullopt;
}

json to_json(const TrafficEvent& e) {
  json j{{"event_id", e.event_id},   {"cause", std::string(to_string(e.cause))},
         {"zone", cits::zone_to_json(e.zone)}, {"valid_from", e.valid_from},
         {"valid_to", e.valid_to},   {"source", std::string(to_string(e.source))}};
  if (e.free_text) j["free_text"] = *e.free_text;
  return j;
}

TrafficEvent event_from_json(const json& j) {
  std::vector<std::string> errors;
  if (!j.is_object()) throw cits::ValidationError({"event must be an object"});
  TrafficEvent e;
  if (auto it = j.find("event_id"); it != j.end() && it->is_string()) e.event_id = it->get<std::string>();
  if (auto it = j.find("cause"); it != j.end() && it->is_string()) {
    if (auto c = event_cause_from(it->get<std::string>())) e.cause = *c;
    else errors.push_back("cause '" + it->get<std::string>() + "' is unknown");
  } else {
    errors.push_back("cause is required");
  }
  if (auto it = j.find("zone"); it != j.end()) {
    try {
      e.zone = cits::zone_from_json(*it);
    } catch (const cits::ValidationError& v) {
      errors.insert(errors.end(), v.violations().begin(), v.violations().end());
    }
  } else {
    errors.push_back("zone is required");
  }
  for (auto [key, slot] : {std::pair{"valid_from", &e.valid_from}, std::pair{"valid_to", &e.valid_to}}) {
    auto it = j.find(key);
    if (it == j.end() || !it->is_number()) errors.push_back(std::string(key) + " must be a number");
    else *slot = it->get<double>();
  }
  if (auto it = j.find("free_text"); it != j.end() && !it->is_null()) {
    if (it->is_string()) e.free_text = it->get<std::string>();
    else errors.push_back("free_text must be a string");
  }
  if (auto it = j.find("source"); it != j.end()) {
    auto s = it->is_string() ? event_source_from(it->get<std::string>()) : std::nullopt;
    if (s) e.source = *s;
    else errors.push_back("source must be Manual, TMC or AutoDetected");
  }
  if (errors.empty() && !(e.valid_from < e.valid_to)) errors.push_back("valid_from must precede valid_to");
  if (!errors.empty()) throw cits::ValidationError(std::move(errors));
  return e;
}

Geomessenger::Geomessenger(road::LiveGraph& graph, broker::Broker& broker, UuidSource& ids, GeomessengerConfig config)
    : graph_(graph), broker_(broker), ids_(ids), config_(std::move(config)) {}

std::string Geomessenger::register_event(TrafficEvent event, double now) {
  std::lock_guard lock(mu_);
  return register_locked(std::move(event), now);
}

std::string Geomessenger::register_locked(TrafficEvent event, double now) {
  std::vector<std::string> errors = cits::zone_violations(event.zone);
  if (!(event.valid_from < event.valid_to)) errors.push_back("valid_from must precede valid_to");
  if (event.cause == EventCause::VmsFreeText && (!event.free_text || event.free_text->empty()))
    errors.push_back("free_text required for cause VmsFreeText");
  if (event.cause != EventCause::VmsFreeText && event.free_text)
    errors.push_back("free_text only allowed for cause VmsFreeText");
  if (!errors.empty()) throw cits::ValidationError(std::move(errors));
  if (event.valid_to < now) throw EventRejected("event validity window lies entirely in the past");

  if (event.event_id.empty()) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "evt-%06llu", static_cast<unsigned long long>(next_event_++));
    event.event_id = buf;
  }
  if (events_.contains(event.event_id)) throw EventRejected("duplicate event id " + event.event_id);
  const std::string id = event.event_id;
  events_.emplace(id, ActiveEvent{std::move(event), ids_.next(), std::nullopt});
  return id;
}

bool Geomessenger::cancel_event(const std::string& event_id) {
  std::lock_guard lock(mu_);
  return events_.erase(event_id) > 0;
}

cits::Message Geomessenger::message_for(const TrafficEvent& event, const std::string& msg_id) const {
  if (event.cause == EventCause::Congestion || event.cause == EventCause::VmsFreeText) {
    cits::IvimMessage m;
    m.msg_id = msg_id;
    m.zone = event.zone;
    m.valid_from = event.valid_from;
    m.valid_to = event.valid_to;
    if (event.cause == EventCause::Congestion) {
      m.kind = cits::IvimKind::TrafficCongestion;
      m.payload = cits::payload::Congestion{};
    } else {
      m.kind = cits::IvimKind::VmsFreeText;
      m.payload = cits::payload::FreeText{event.free_text.value_or("")};
    }
    return m;
  }
  cits::HazardMessage m;
  m.msg_id = msg_id;
  m.cause = static_cast<cits::HazardCause>(static_cast<int>(event.cause));
  m.zone = event.zone;
  m.valid_from = event.valid_from;
  m.valid_to = event.valid_to;
  m.originator = config_.originator;
  return m;
}

bool Geomessenger::ingest_cam(const cits::CamMessage& cam) {
  cits::validate(cits::Message{cam});
  const auto match =
      graph_.read([&](const road::RoadGraph& g) { return road::map_match(g, cam.position, cam.heading); });
  std::lock_guard lock(mu_);
  if (!match.on_network) {
    ++dropped_;
    return false;
  }
  auto& w = windows_[match.edge_id];
  w.samples.push_back(WindowSample{cam.timestamp, cam.speed, cam.vehicle_id});
  w.last_sample = std::max(w.last_sample, cam.timestamp);
  prune(w, cam.timestamp);

  std::vector<road::SpeedSample> samples;
  samples.reserve(w.samples.size());
  for (const auto& s : w.samples) samples.push_back(road::SpeedSample{match.edge_id, s.timestamp, s.speed, s.vehicle_id});
  graph_.update_edge_speed(match.edge_id, samples, cam.timestamp, road::SpeedUpdateConfig{config_.window_s});
  return true;
}

void Geomessenger::prune(EdgeWindow& w, double now) const {
  while (!w.samples.empty() && w.samples.front().timestamp <= now - config_.window_s) w.samples.pop_front();
}

Transition Geomessenger::evaluate_congestion(const std::string& edge_id, double now) {
  graph_.read([&](const road::RoadGraph& g) { return g.edge(edge_id); });
  std::lock_guard lock(mu_);
  return evaluate_locked(edge_id, now);
}

Transition Geomessenger::evaluate_locked(const std::string& edge_id, double now) {
  auto& w = windows_[edge_id];
  prune(w, now);
  const auto edge = graph_.read([&](const road::RoadGraph& g) { return g.edge(edge_id); });

  double sum = 0.0;
  std::set<std::string> vehicles;
  for (const auto& s : w.samples) {
    sum += s.speed;
    vehicles.insert(s.vehicle_id);
  }
  const std::size_t n = w.samples.size();
  const double mean = n ? sum / static_cast<double>(n) : 0.0;

  if (!w.congested) {
    if (n > 0 && mean < config_.congestion_onset_ratio * edge.free_flow_speed &&
        vehicles.size() >= config_.min_vehicles) {
      w.congested = true;
      w.since = now;
      const auto mid = graph_.read([&](const road::RoadGraph& g) {
        return interpolate(g.edge_from_position(edge), g.edge_to_position(edge), 0.5);
      });
      TrafficEvent advisory{"", EventCause::Congestion, cits::RelevanceZone{mid, config_.advisory_radius_m}, now,
                            now + config_.advisory_validity_s, std::nullopt, EventSource::AutoDetected};
      w.advisory_event = register_locked(std::move(advisory), now);
      return Transition::Onset;
    }
    return Transition::None;
  }

  const bool recovered = n > 0 && mean >= config_.congestion_clear_ratio * edge.free_flow_speed;
  const bool silent = now - w.last_sample >= config_.clear_silence_s;
  if (recovered || silent) {
    w.congested = false;
    w.since.reset();
    if (w.advisory_event) events_.erase(*w.advisory_event);
    w.advisory_event.reset();
    return Transition::Clearance;
  }
  // Still congested but the advisory ran out: issue a fresh one.
  if (!w.advisory_event || !events_.contains(*w.advisory_event)) {
    const auto mid = graph_.read([&](const road::RoadGraph& g) {
      return interpolate(g.edge_from_position(edge), g.edge_to_position(edge), 0.5);
    });
    TrafficEvent advisory{"", EventCause::Congestion, cits::RelevanceZone{mid, config_.advisory_radius_m}, now,
                          now + config_.advisory_validity_s, std::nullopt, EventSource::AutoDetected};
    w.advisory_event = register_locked(std::move(advisory), now);
  }
  return Transition::None;
}

std::vector<cits::Message> Geomessenger::tick(double now) {
  std::lock_guard lock(mu_);
  for (auto it = events_.begin(); it != events_.end();) {
    if (it->second.event.valid_to < now) it = events_.erase(it);
    else ++it;
  }

  for (auto& [edge_id, w] : windows_) {
    prune(w, now);
    if (!w.samples.empty() || w.congested) evaluate_locked(edge_id, now);
    // Silent edges relax toward free flow once per window.
    if (w.samples.empty() && now - w.last_sample >= config_.window_s && now - w.last_decay >= config_.window_s) {
      graph_.write([&](road::RoadGraph& g) {
        const auto& e = g.edge(edge_id);
        if (e.current_speed < e.free_flow_speed)
          road::update_edge_speed(g, edge_id, {}, now, road::SpeedUpdateConfig{config_.window_s});
      });
      w.last_decay = now;
    }
  }

  std::vector<cits::Message> out;
  for (auto& [id, active] : events_) {
    if (active.event.valid_from > now) continue;
    if (active.last_emitted && now - *active.last_emitted < config_.repeat_s - kTimeEps) continue;
    auto msg = message_for(active.event, active.msg_id);
    broker_.publish(msg, now);
    active.last_emitted = now;
    out.push_back(std::move(msg));
  }
  return out;
}

std::vector<TrafficEvent> Geomessenger::active_events() const {
  std::lock_guard lock(mu_);
  std::vector<TrafficEvent> out;
  for (const auto& [id, a] : events_) out.push_back(a.event);
  return out;
}

EdgeCongestionState Geomessenger::congestion_state(const std::string& edge_id) const {
  std::lock_guard lock(mu_);
  EdgeCongestionState s{edge_id, {}, false, std::nullopt};
  if (auto it = windows_.find(edge_id); it != windows_.end()) {
    s.window_samples.assign(it->second.samples.begin(), it->second.samples.end());
    s.congested = it->second.congested;
    s.since = it->second.since;
  }
  return s;
}

std::size_t Geomessenger::dropped_cams() const {
  std::lock_guard lock(mu_);
  return dropped_;
}

}  // namespace ctmaas::geomessenger
