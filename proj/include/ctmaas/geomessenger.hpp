#pragma once

#include <deque>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ctmaas/broker.hpp"
#include "ctmaas/ids.hpp"
#include "ctmaas/messages.hpp"
#include "ctmaas/road_graph.hpp"

namespace ctmaas::geomessenger {

/// Hazard causes share ordinals with cits::HazardCause; Congestion is appended.
enum class EventCause {
  LaneClosure,
  MobileRoadWorks,
  PlannedRoadWorks,
  LongTermRoadWorks,
  UnplannedRoadWorks,
  WeatherConditions,
  ObstacleOnRoad,
  StationaryVehicle,
  VmsFreeText,
  Congestion,
};

enum class EventSource { Manual, TMC, AutoDetected };

std::string_view to_string(EventCause c);
std::string_view to_string(EventSource s);
std::optional<EventCause> event_cause_from(std::string_view name);
std::optional<EventSource> event_source_from(std::string_view name);

struct TrafficEvent {
  std::string event_id;
  EventCause cause = EventCause::ObstacleOnRoad;
  cits::RelevanceZone zone;
  double valid_from = 0.0;
  double valid_to = 0.0;
  std::optional<std::string> free_text;
  EventSource source = EventSource::Manual;

  friend bool operator==(const TrafficEvent&, const TrafficEvent&) = default;
};

nlohmann::json to_json(const TrafficEvent& e);
/// Throws cits::ValidationError listing every bad field.
TrafficEvent event_from_json(const nlohmann::json& j);

class EventRejected : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct GeomessengerConfig {
  double congestion_onset_ratio = 0.4;
  double congestion_clear_ratio = 0.6;
  std::size_t min_vehicles = 3;
  double window_s = 60.0;
  double repeat_s = 10.0;
  double advisory_validity_s = 120.0;
  double advisory_radius_m = 500.0;
  double clear_silence_s = 120.0;
  std::string originator = "geomessenger";
};

struct WindowSample {
  double timestamp = 0.0;
  double speed = 0.0;
  std::string vehicle_id;
};

struct EdgeCongestionState {
  std::string edge_id;
  std::vector<WindowSample> window_samples;
  bool congested = false;
  std::optional<double> since;
};

enum class Transition { None, Onset, Clearance };

/// Turns traffic events into repeated C-ITS broadcasts and detects congestion from CAMs.
class Geomessenger {
 public:
  Geomessenger(road::LiveGraph& graph, broker::Broker& broker, UuidSource& ids, GeomessengerConfig config = {});

  /// Stores the event; it is emitted on the next tick. Returns the event id.
  std::string register_event(TrafficEvent event, double now);
  bool cancel_event(const std::string& event_id);

  /// Map-matches the CAM and records the speed sample. Off-network CAMs are counted and dropped.
  bool ingest_cam(const cits::CamMessage& cam);

  Transition evaluate_congestion(const std::string& edge_id, double now);

  /// Re-emits due events, expires stale ones, and evaluates congestion.
  std::vector<cits::Message> tick(double now);

  /// The message an event is broadcast as.
  cits::Message message_for(const TrafficEvent& event, const std::string& msg_id) const;

  std::vector<TrafficEvent> active_events() const;
  EdgeCongestionState congestion_state(const std::string& edge_id) const;
  std::size_t dropped_cams() const;
  const GeomessengerConfig& config() const { return config_; }

 private:
  struct ActiveEvent {
    TrafficEvent event;
    std::string msg_id;
    std::optional<double> last_emitted;
  };
  struct EdgeWindow {
    std::deque<WindowSample> samples;
    bool congested = false;
    std::optional<double> since;
    double last_sample = 0.0;
    double last_decay = 0.0;
    std::optional<std::string> advisory_event;
  };

  std::string register_locked(TrafficEvent event, double now);
  Transition evaluate_locked(const std::string& edge_id, double now);
  void prune(EdgeWindow& w, double now) const;

  road::LiveGraph& graph_;
  broker::Broker& broker_;
  UuidSource& ids_;
  GeomessengerConfig config_;

  mutable std::mutex mu_;
  std::map<std::string, ActiveEvent> events_;
  std::map<std::string, EdgeWindow> windows_;
  std::size_t dropped_ = 0;
  std::uint64_t next_event_ = 1;
};

}  // namespace ctmaas::geomessenger
