#pragma once

#include <atomic>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ctmaas/broker.hpp"
#include "ctmaas/geomessenger.hpp"
#include "ctmaas/ids.hpp"
#include "ctmaas/messages.hpp"
#include "ctmaas/road_graph.hpp"
#include "ctmaas/store.hpp"

namespace ctmaas::fleet {

struct Driver {
  std::string driver_id;
  std::string name;
  std::string phone;
};

struct Vehicle {
  std::string vehicle_id;
  std::string plate;
  std::string color;
  std::optional<std::string> assigned_driver;
  std::optional<GeoPoint> last_position;
  std::optional<double> last_timestamp;
  std::optional<std::string> current_trip;
};

enum class TaskKind { Pickup, Delivery, Maintenance };
enum class StopStatus { Pending, Arrived, Done };
enum class TripState { Planned, Active, Completed, Aborted };

std::string_view to_string(TaskKind k);
std::string_view to_string(StopStatus s);
std::string_view to_string(TripState s);
std::optional<TaskKind> task_kind_from(std::string_view s);

/// What a caller supplies for a stop: coordinates or a gazetteer address.
struct StopRequest {
  std::string stop_id;  // optional; generated when empty
  std::optional<GeoPoint> location;
  std::optional<std::string> address;
  TaskKind kind = TaskKind::Delivery;
};

struct TaskStop {
  std::string stop_id;
  GeoPoint location;
  std::optional<std::string> address;
  TaskKind kind = TaskKind::Delivery;
  StopStatus status = StopStatus::Pending;
  road::EdgePosition anchor;  // map-matched location
};

struct TrajectoryPoint {
  double timestamp = 0.0;
  GeoPoint position;
  double speed = 0.0;
  double heading = 0.0;
};

/// legs[i] leads to the i-th stop that is not Done; the vehicle sits on legs[0] at
/// (progress_edge, progress_offset).
struct Trip {
  std::string trip_id;
  std::string vehicle_id;
  std::string driver_id;
  std::vector<TaskStop> stops;
  std::vector<road::Leg> legs;
  std::size_t progress_edge = 0;
  double progress_offset = 0.0;
  TripState state = TripState::Planned;
  std::vector<TrajectoryPoint> trajectory;
  int reroute_count = 0;
  GeoPoint depart;
  double created_at = 0.0;
  std::optional<double> started_at;
  std::optional<double> ended_at;
};

/// Remaining route from the current position: flattened edge list plus totals.
road::Route remaining_route(const road::RoadGraph& graph, const Trip& trip);
std::vector<std::string> flatten_legs(const std::vector<road::Leg>& legs);

struct TripStatistics {
  std::string trip_id;
  double distance_m = 0.0;
  double duration_s = 0.0;
  double max_speed_ms = 0.0;
  double min_speed_ms = 0.0;
};

/// Distance, duration and speed extremes of a trajectory, rounded to 2 decimals.
TripStatistics compute_statistics(const std::string& trip_id, const std::vector<TrajectoryPoint>& trajectory);

struct Aggregates {
  std::map<std::string, int> trips_per_vehicle;
  std::map<std::string, int> trips_per_driver;
  std::map<std::string, double> vehicle_working_hours;
  std::map<std::string, double> driver_working_hours;
};

struct RerouteProposal {
  std::string proposal_id;
  std::string trip_id;
  std::string vehicle_id;
  double created_at = 0.0;
  double expires_at = 0.0;
  double current_remaining_s = 0.0;
  double proposed_remaining_s = 0.0;
  std::vector<road::Leg> legs;
  std::vector<std::string> edge_ids;
};

struct StopEta {
  std::string stop_id;
  double eta = 0.0;
};

struct TmcEdgeRow {
  std::string edge_id;
  double mean_speed_ms = 0.0;
  std::size_t vehicle_count = 0;
};

struct TmcPayload {
  double from = 0.0;
  double to = 0.0;
  std::vector<TmcEdgeRow> edges;
};

struct TmcIngestResult {
  std::size_t index = 0;
  bool accepted = false;
  std::string event_id;
  std::vector<std::string> errors;
};

/// Driver-initiated change: either an explicit edge list from the current edge, or the stop to visit next.
struct DriverRerouteRequest {
  std::optional<std::vector<std::string>> edge_ids;
  std::optional<std::string> next_stop_id;
};

// -- errors ------------------------------------------------------------------

class FleetError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};
/// Maps to 404.
class UnknownEntity : public FleetError {
 public:
  using FleetError::FleetError;
};
/// Maps to 422; `subject` names the stop, plate or field at fault.
class Rejected : public FleetError {
 public:
  Rejected(std::string subject, const std::string& what) : FleetError(what), subject_(std::move(subject)) {}
  const std::string& subject() const noexcept { return subject_; }

 private:
  std::string subject_;
};

// -- gazetteer ---------------------------------------------------------------

class Gazetteer {
 public:
  Gazetteer() = default;
  explicit Gazetteer(std::map<std::string, GeoPoint> entries) : entries_(std::move(entries)) {}
  std::optional<GeoPoint> resolve(const std::string& address) const;
  const std::map<std::string, GeoPoint>& entries() const { return entries_; }

 private:
  std::map<std::string, GeoPoint> entries_;
};
Gazetteer load_gazetteer(std::string_view document);
Gazetteer load_gazetteer_file(const std::string& path);

// -- stop ordering -----------------------------------------------------------

/// Cost of visiting `order` starting from node 0 of an asymmetric matrix (open path).
double path_cost(const std::vector<std::vector<double>>& cost, const std::vector<std::size_t>& order);
/// Greedy nearest neighbor from node 0 over nodes 1..n-1; ties go to the lower index.
std::vector<std::size_t> nearest_neighbor_order(const std::vector<std::vector<double>>& cost);
/// Segment-reversal local search until no reversal improves the open-path cost.
std::vector<std::size_t> two_opt(const std::vector<std::vector<double>>& cost, std::vector<std::size_t> order);

// -- service -----------------------------------------------------------------

struct FleetConfig {
  double arrival_radius_m = 30.0;
  double reroute_min_saving_s = 60.0;
  double reroute_min_saving_ratio = 0.10;
  bool auto_apply = false;
  double proposal_ttl_s = 120.0;
  double advisory_radius_m = 1000.0;
  double route_match_slack_m = 1.0;
};

/// Events surfaced to the dashboard stream. Called with fleet locks held: must not call back into the service.
using EventSink = std::function<void(const nlohmann::json&)>;

class FleetService {
 public:
  FleetService(road::LiveGraph& graph, broker::Broker& broker, geomessenger::Geomessenger* geomessenger,
               store::Store& store, UuidSource& ids, Gazetteer gazetteer = {}, FleetConfig config = {});

  void set_event_sink(EventSink sink);

  std::string register_driver(const std::string& name, const std::string& phone, double now);
  std::string register_vehicle(const std::string& plate, const std::string& color, double now);
  void assign_driver(const std::string& vehicle_id, const std::string& driver_id, double now);

  Driver driver(const std::string& id) const;
  Vehicle vehicle(const std::string& id) const;
  std::vector<Driver> drivers() const;
  std::vector<Vehicle> vehicles() const;

  Trip create_trip(const std::string& vehicle_id, const std::vector<StopRequest>& stops, const GeoPoint& depart,
                   double now);
  Trip trip(const std::string& trip_id) const;
  std::vector<Trip> trips() const;
  void start_trip(const std::string& trip_id, double now);

  /// False when the CAM was dropped (stale timestamp).
  bool ingest_cam(const cits::CamMessage& cam);
  std::size_t stale_cams() const { return stale_.load(); }

  void complete_stop(const std::string& trip_id, const std::string& stop_id, double now);
  std::vector<StopEta> eta(const std::string& trip_id, double now) const;

  /// Proposal when the best route through the remaining stops saves enough time.
  std::optional<RerouteProposal> maybe_reroute(const std::string& trip_id, double now);
  std::vector<RerouteProposal> proposals(double now) const;
  /// Applies a pending proposal; returns the updated trip.
  Trip approve_proposal(const std::string& proposal_id, double now);
  void decline_proposal(const std::string& proposal_id);
  void driver_reroute(const std::string& trip_id, const DriverRerouteRequest& request, double now);

  TripStatistics complete_trip(const std::string& trip_id, double now);
  void abort_trip(const std::string& trip_id, double now);
  std::optional<TripStatistics> statistics(const std::string& trip_id) const;
  Aggregates aggregates() const;

  TmcPayload tmc_exchange(double from, double to) const;
  std::vector<TmcIngestResult> tmc_ingest(const nlohmann::json& events, double now);

  /// Rebuilds registries from the persisted fleet namespace.
  void load(const store::State& state);

  const FleetConfig& config() const { return config_; }
  void set_auto_apply(bool on) { config_.auto_apply = on; }

 private:
  struct TripRec {
    mutable std::mutex mu;
    Trip trip;
  };
  struct VehicleRec {
    mutable std::mutex mu;
    Vehicle vehicle;
  };

  TripRec& trip_rec(const std::string& id) const;
  VehicleRec& vehicle_rec(const std::string& id) const;

  std::vector<road::Leg> plan_through(const road::RoadGraph& g, const road::EdgePosition& from,
                                      const std::vector<TaskStop>& stops) const;
  void advance(const road::RoadGraph& g, Trip& t, const GeoPoint& p, double heading);
  double remaining_time(const road::RoadGraph& g, const Trip& t) const;
  road::EdgePosition current_position(const Trip& t) const;
  void persist_trip(const Trip& t, double now);
  std::optional<cits::Message> apply_proposal(Trip& t, const RerouteProposal& p, double now);
  void emit(const nlohmann::json& event) const;
  void check_coverage(const road::RoadGraph& g, const Trip& t) const;

  road::LiveGraph& graph_;
  broker::Broker& broker_;
  geomessenger::Geomessenger* geomessenger_;
  store::Store& store_;
  UuidSource& ids_;
  Gazetteer gazetteer_;
  FleetConfig config_;

  mutable std::shared_mutex registry_mu_;
  std::map<std::string, std::unique_ptr<VehicleRec>> vehicles_;
  std::map<std::string, Driver> drivers_;
  std::map<std::string, std::unique_ptr<TripRec>> trips_;
  std::uint64_t next_driver_ = 1, next_vehicle_ = 1, next_trip_ = 1;

  mutable std::mutex proposals_mu_;
  std::map<std::string, RerouteProposal> proposals_;

  mutable std::mutex stats_mu_;
  std::map<std::string, TripStatistics> stats_;
  Aggregates aggregates_;

  mutable std::mutex sink_mu_;
  EventSink sink_;
  std::atomic<std::size_t> stale_{0};
};

nlohmann::json to_json(const Driver& d);
nlohmann::json to_json(const Vehicle& v);
nlohmann::json to_json(const TaskStop& s);
nlohmann::json to_json(const road::Leg& l);
nlohmann::json to_json(const Trip& t, bool with_trajectory = true);
nlohmann::json to_json(const TrajectoryPoint& p);
nlohmann::json to_json(const TripStatistics& s);
nlohmann::json to_json(const Aggregates& a);
nlohmann::json to_json(const RerouteProposal& p);
nlohmann::json to_json(const TmcPayload& p);
nlohmann::json to_json(const StopEta& e);

Trip trip_from_json(const nlohmann::json& j);
road::Leg leg_from_json(const nlohmann::json& j);
TrajectoryPoint trajectory_point_from_json(const nlohmann::json& j);

}  // namespace ctmaas::fleet
