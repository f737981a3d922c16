#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ctmaas/fleet.hpp"
#include "ctmaas/ids.hpp"
#include "ctmaas/messages.hpp"
#include "ctmaas/platform.hpp"
#include "ctmaas/road_graph.hpp"
#include "ctmaas/signal.hpp"

namespace ctmaas::sim {

inline constexpr double kDefaultStartTime = 1'700'006'400.0;

struct Behavior {
  bool obeys_speed_advisory = true;
  bool obeys_reroute = true;
  bool obeys_glosa = true;
  bool requests_priority = false;
};

struct StopSpec {
  std::optional<GeoPoint> location;
  std::optional<std::string> address;
  fleet::TaskKind kind = fleet::TaskKind::Delivery;
  double dwell_s = 0.0;
};

struct VehicleSpec {
  std::string label;  // scenario-local name; iteration order is by label
  std::string plate;
  double depart_s = 0.0;
  GeoPoint depart;
  std::vector<StopSpec> stops;
  Behavior behavior;
  double gps_noise_m = 0.0;  // 1-sigma, per axis
};

enum class DisturbanceKind { SlowEdge, StopVehicle, InjectEvent };

struct Disturbance {
  double at_s = 0.0;
  DisturbanceKind kind = DisturbanceKind::SlowEdge;
  std::string edge_id;        // SlowEdge
  double factor = 1.0;        // SlowEdge: fraction of free-flow speed
  std::string vehicle;        // StopVehicle: label
  double duration_s = 0.0;    // StopVehicle
  nlohmann::json event;       // InjectEvent: TrafficEvent with validity relative to start_time
};

struct Scenario {
  std::string name;
  road::RoadGraph graph;
  std::vector<signal::SignalPlan> plans;
  fleet::Gazetteer gazetteer;
  double start_time = kDefaultStartTime;
  double duration_s = 0.0;
  double dt_s = 0.5;
  double cam_interval_s = 1.0;
  double glosa_range_m = 500.0;
  double glosa_min_speed_ms = 5.0;
  std::uint64_t seed = 1;
  PlatformConfig platform;
  std::vector<VehicleSpec> vehicles;
  std::vector<Disturbance> disturbances;
};

class ScenarioError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Relative "graph", "signals" and "gazetteer" paths resolve against `base_dir`.
Scenario load_scenario(std::string_view document, const std::filesystem::path& base_dir);
Scenario load_scenario_file(const std::filesystem::path& path);
void validate(const Scenario& s);

struct LogEntry {
  double t = 0.0;          // seconds since start_time
  std::string direction;   // "sent" or "received"
  cits::Message message;
};

struct Crossing {
  std::string label;
  std::string intersection_id;
  std::string approach_id;
  double t = 0.0;
  signal::Phase phase = signal::Phase::Green;
};

struct PriorityOutcome {
  std::string label;
  std::string intersection_id;
  std::string approach_id;
  double requested_at = 0.0;
  double predicted_arrival = 0.0;  // absolute
  cits::PriorityVerdict verdict = cits::PriorityVerdict::Denied;
};

struct VehicleResult {
  std::string label;
  std::string vehicle_id;
  std::string trip_id;
  double depart_s = 0.0;
  std::optional<double> arrival_s;    // reached the final stop
  std::optional<double> completed_s;  // trip closed after the last dwell
  std::optional<double> predicted_arrival_s;  // fleet ETA of the final stop at departure
  std::optional<double> eta_error_s;  // actual minus predicted
  int route_changes = 0;
  double odometer_m = 0.0;            // sum of offset deltas
  double route_distance_m = 0.0;      // same distance measured from the route walked
  std::vector<std::string> initial_route;
  std::vector<std::string> final_route;
  std::optional<fleet::TripStatistics> statistics;
};

struct SimReport {
  std::string scenario;
  std::uint64_t seed = 0;
  double start_time = 0.0;
  double duration_s = 0.0;
  double dt_s = 0.0;
  std::vector<VehicleResult> vehicles;
  std::vector<LogEntry> messages;
  std::vector<nlohmann::json> fleet_events;
  std::vector<Crossing> crossings;
  std::vector<PriorityOutcome> priority;

  const VehicleResult* vehicle(std::string_view label) const;
};

nlohmann::json to_json(const SimReport& r);

struct SimVehicle {
  VehicleSpec spec;
  std::string vehicle_id;
  std::string driver_id;
  std::string trip_id;
  std::vector<std::string> route;
  std::size_t edge_index = 0;
  double offset = 0.0;
  double start_offset = 0.0;
  double speed = 0.0;
  std::vector<road::EdgePosition> stop_anchors;  // in visiting order
  std::size_t next_stop = 0;

  bool active = false;
  bool finished = false;
  std::optional<double> dwell_until;
  std::optional<double> held_until;
  bool waiting_at_line = false;
  std::optional<double> glosa_cap;
  std::optional<std::size_t> consulted_index;  // route index of the last approach consulted
  bool granted = false;
  double last_cam = 0.0;
  VehicleResult result;
};

/// Fixed-step simulation driving a Platform in sim time. Ground-truth speeds live in the
/// simulator's own graph; the platform only learns them from CAMs.
class Simulation {
 public:
  explicit Simulation(Scenario scenario);
  ~Simulation();

  /// Advances every vehicle by dt (split at disturbance times) and returns the CAMs emitted.
  std::vector<cits::CamMessage> step(double dt);
  /// Steps until duration_s.
  SimReport run();
  SimReport report() const;

  double time() const { return t_; }
  bool done() const;
  Platform& platform() { return *platform_; }
  const road::RoadGraph& truth() const { return truth_; }
  const SimVehicle& vehicle(std::string_view label) const;
  const Scenario& scenario() const { return scenario_; }

 private:
  void depart(SimVehicle& v);
  void advance(SimVehicle& v, double dt);
  void apply_disturbance(const Disturbance& d);
  void deliver_inbox();
  void emit_cam(SimVehicle& v);
  void consult_approach(SimVehicle& v, double time);
  void reach_stop(SimVehicle& v, double time);
  void finish_dwell(SimVehicle& v, double time);
  void cross(SimVehicle& v, double time);
  double target_speed(const SimVehicle& v, double time) const;
  std::optional<std::pair<std::string, const signal::Approach*>> control_at_end(const SimVehicle& v) const;
  double abs_time(double rel) const { return scenario_.start_time + rel; }

  Scenario scenario_;
  road::RoadGraph truth_;
  std::unique_ptr<Platform> platform_;
  std::shared_ptr<EventHub::Subscriber> hub_sub_;
  std::map<std::string, std::string> signal_at_node_;  // node id -> intersection id
  std::vector<SimVehicle> vehicles_;                    // sorted by label
  std::vector<bool> applied_;
  std::vector<cits::Message> inbox_;
  std::vector<cits::IvimMessage> speed_advisories_;
  UuidSource ids_;
  std::mt19937_64 rng_;
  double t_ = 0.0;
  double now_rel_ = 0.0;  // sub-step time of the platform call in progress
  std::vector<cits::CamMessage> emitted_;
  std::optional<long long> last_tick_second_;
  SimReport report_;
};

SimReport run(Scenario scenario);

}  // namespace ctmaas::sim
