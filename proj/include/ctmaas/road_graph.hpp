#pragma once

#include <cstddef>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "ctmaas/geo.hpp"

namespace ctmaas::road {

struct RoadNode {
  std::string id;
  GeoPoint position;
};

struct RoadEdge {
  std::string id;
  std::string from;
  std::string to;
  double length = 0.0;           // m
  double free_flow_speed = 0.0;  // m/s
  double current_speed = 0.0;    // m/s, in (0, free_flow_speed]
};

/// Seconds to traverse the whole edge at its current speed.
inline double edge_travel_time(const RoadEdge& e) { return e.length / e.current_speed; }

struct Route {
  std::vector<std::string> edge_ids;
  double total_length = 0.0;
  double total_time = 0.0;
};

struct SpeedSample {
  std::string edge_id;
  double timestamp = 0.0;
  double speed = 0.0;
  std::string vehicle_id;
};

/// Load or validation failure; `element()` names the offending node/edge id.
class GraphError : public std::runtime_error {
 public:
  GraphError(std::string element, const std::string& what)
      : std::runtime_error(what), element_(std::move(element)) {}
  const std::string& element() const noexcept { return element_; }

 private:
  std::string element_;
};

class UnknownElementError : public GraphError {
 public:
  using GraphError::GraphError;
};

class NoPathError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Directed road network. Nodes and edges are stored sorted by id so that index
/// order doubles as the lexicographic tie-break order.
class RoadGraph {
 public:
  RoadGraph() = default;
  RoadGraph(std::vector<RoadNode> nodes, std::vector<RoadEdge> edges);

  std::span<const RoadNode> nodes() const { return nodes_; }
  std::span<const RoadEdge> edges() const { return edges_; }

  std::optional<std::size_t> node_index(std::string_view id) const;
  std::optional<std::size_t> edge_index(std::string_view id) const;
  const RoadNode& node(std::string_view id) const;
  const RoadEdge& edge(std::string_view id) const;
  const RoadNode& node_at(std::size_t i) const { return nodes_[i]; }
  const RoadEdge& edge_at(std::size_t i) const { return edges_[i]; }

  /// Edge indices leaving the node, ordered by (target id, edge id).
  std::span<const std::size_t> out_edges(std::size_t node) const { return adjacency_[node]; }
  std::span<const std::size_t> out_edges(std::string_view node_id) const;

  /// Sets current speed, clamped to (0, free_flow_speed]. Returns the applied value.
  double set_current_speed(std::string_view edge_id, double speed);

  GeoPoint edge_from_position(const RoadEdge& e) const { return node(e.from).position; }
  GeoPoint edge_to_position(const RoadEdge& e) const { return node(e.to).position; }

 private:
  std::vector<RoadNode> nodes_;
  std::vector<RoadEdge> edges_;
  std::unordered_map<std::string, std::size_t> node_by_id_;
  std::unordered_map<std::string, std::size_t> edge_by_id_;
  std::vector<std::vector<std::size_t>> adjacency_;
};

/// Parses the graph JSON document and validates every invariant.
RoadGraph load_graph(std::string_view document);
RoadGraph load_graph_file(const std::string& path);

Route shortest_path(const RoadGraph& graph, std::string_view origin, std::string_view dest);

struct MatchResult {
  std::string edge_id;
  double offset = 0.0;
  double lateral_distance = 0.0;
  bool on_network = false;
};

inline constexpr double kOffNetworkDistanceM = 100.0;

/// Nearest edge by perpendicular distance; ties go to the lexicographically smaller edge id.
/// With a heading hint, edges pointing more than 90 degrees away are skipped unless
/// nothing else is on-network.
MatchResult map_match(const RoadGraph& graph, const GeoPoint& p,
                      std::optional<double> heading_deg = std::nullopt);

/// All edges within `max_lateral` meters, sorted by (distance, edge id).
std::vector<MatchResult> match_candidates(const RoadGraph& graph, const GeoPoint& p,
                                          double max_lateral = kOffNetworkDistanceM);

struct SpeedUpdateConfig {
  double window_s = 60.0;
  double decay = 0.5;
  double floor_ms = 0.5;
};

/// Sets current_speed from the trailing-window mean, or decays it toward free flow
/// when the window is empty. Returns the new current speed.
double update_edge_speed(RoadGraph& graph, std::string_view edge_id, std::span<const SpeedSample> samples,
                         double now, const SpeedUpdateConfig& config = {});

struct TimedValue {
  double timestamp = 0.0;
  double value = 0.0;
};

/// Level-only exponential smoothing; the horizon does not change the forecast.
double predict_travel_time(std::span<const TimedValue> history, double horizon_s, double alpha = 0.3);

// ---------------------------------------------------------------------------
// Positions along edges and partial-edge legs (used for trips and ETA).

struct EdgePosition {
  std::string edge_id;
  double offset = 0.0;

  friend bool operator==(const EdgePosition&, const EdgePosition&) = default;
};

GeoPoint position_of(const RoadGraph& graph, const EdgePosition& pos);
double heading_of(const RoadGraph& graph, std::string_view edge_id);

/// A traversal from one edge position to another. `edge_ids` starts with the start
/// position's edge and ends with the end position's edge (a single edge when the
/// end lies ahead on the same edge).
struct Leg {
  std::vector<std::string> edge_ids;
  double start_offset = 0.0;
  double end_offset = 0.0;
  double length = 0.0;
  double time = 0.0;
};

Leg plan_leg(const RoadGraph& graph, const EdgePosition& from, const EdgePosition& to);

/// Travel time of `leg` at the graph's current speeds, from edge `edge_index` of the
/// leg at offset `offset` onward.
double leg_remaining_time(const RoadGraph& graph, const Leg& leg, std::size_t edge_index, double offset);
double leg_remaining_length(const RoadGraph& graph, const Leg& leg, std::size_t edge_index, double offset);

/// Re-evaluates length and time of the whole leg at current speeds.
void refresh_leg(const RoadGraph& graph, Leg& leg);

// ---------------------------------------------------------------------------

/// Read-mostly shared graph: many concurrent readers, one writer at a time.
class LiveGraph {
 public:
  explicit LiveGraph(RoadGraph graph) : graph_(std::move(graph)) {}

  template <class F>
  decltype(auto) read(F&& f) const {
    std::shared_lock lock(mu_);
    return f(static_cast<const RoadGraph&>(graph_));
  }

  template <class F>
  decltype(auto) write(F&& f) {
    std::unique_lock lock(mu_);
    return f(graph_);
  }

  double update_edge_speed(std::string_view edge_id, std::span<const SpeedSample> samples, double now,
                           const SpeedUpdateConfig& config = {});
  RoadGraph snapshot() const;

 private:
  mutable std::shared_mutex mu_;
  RoadGraph graph_;
};

}  // namespace ctmaas::road
