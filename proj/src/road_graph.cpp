#include "ctmaas/road_graph.hpp"

#include <algorithm>
#include <fstream>
#include <limits>
#include <numeric>
#include <queue>
#include <sstream>
#include <tuple>

#include <nlohmann/json.hpp>

namespace ctmaas::road {

using nlohmann::json;

RoadGraph::RoadGraph(std::vector<RoadNode> nodes, std::vector<RoadEdge> edges)
    : nodes_(std::move(nodes)), edges_(std::move(edges)) {
  std::sort(nodes_.begin(), nodes_.end(), [](const auto& a, const auto& b) { return a.id < b.id; });
  std::sort(edges_.begin(), edges_.end(), [](const auto& a, const auto& b) { return a.id < b.id; });

  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    const auto& n = nodes_[i];
    if (n.id.empty()) throw GraphError(n.id, "node id must be non-empty");
    if (!is_valid(n.position)) throw GraphError(n.id, "node " + n.id + " has an invalid position");
    if (!node_by_id_.emplace(n.id, i).second) throw GraphError(n.id, "duplicate node id " + n.id);
  }
  adjacency_.assign(nodes_.size(), {});
  for (std::size_t i = 0; i < edges_.size(); ++i) {
    auto& e = edges_[i];
    if (e.id.empty()) throw GraphError(e.id, "edge id must be non-empty");
    if (!edge_by_id_.emplace(e.id, i).second) throw GraphError(e.id, "duplicate edge id " + e.id);
    auto from = node_by_id_.find(e.from);
    if (from == node_by_id_.end()) throw GraphError(e.from, "edge " + e.id + " references missing node " + e.from);
    auto to = node_by_id_.find(e.to);
    if (to == node_by_id_.end()) throw GraphError(e.to, "edge " + e.id + " references missing node " + e.to);
    if (e.from == e.to) throw GraphError(e.id, "edge " + e.id + " is a self-loop");
    if (!(e.length > 0.0) || !std::isfinite(e.length))
      throw GraphError(e.id, "edge " + e.id + " must have positive length");
    if (!(e.free_flow_speed > 0.0) || !std::isfinite(e.free_flow_speed))
      throw GraphError(e.id, "edge " + e.id + " must have positive free-flow speed");
    if (e.current_speed <= 0.0 || e.current_speed > e.free_flow_speed || !std::isfinite(e.current_speed))
      e.current_speed = e.free_flow_speed;
    adjacency_[from->second].push_back(i);
  }
  for (auto& out : adjacency_) {
    std::sort(out.begin(), out.end(), [this](std::size_t a, std::size_t b) {
      return std::tie(edges_[a].to, edges_[a].id) < std::tie(edges_[b].to, edges_[b].id);
    });
  }
}

std::optional<std::size_t> RoadGraph::node_index(std::string_view id) const {
  auto it = node_by_id_.find(std::string(id));
  if (it == node_by_id_.end()) return std::nullopt;
  return it->second;
}

std::optional<std::size_t> RoadGraph::edge_index(std::string_view id) const {
  auto it = edge_by_id_.find(std::string(id));
  if (it == edge_by_id_.end()) return std::nullopt;
  return it->second;
}

const RoadNode& RoadGraph::node(std::string_view id) const {
  auto i = node_index(id);
  if (!i) throw UnknownElementError(std::string(id), "unknown node " + std::string(id));
  return nodes_[*i];
}

const RoadEdge& RoadGraph::edge(std::string_view id) const {
  auto i = edge_index(id);
  if (!i) throw UnknownElementError(std::string(id), "unknown edge " + std::string(id));
  return edges_[*i];
}

std::span<const std::size_t> RoadGraph::out_edges(std::string_view node_id) const {
  auto i = node_index(node_id);
  if (!i) throw UnknownElementError(std::string(node_id), "unknown node " + std::string(node_id));
  return adjacency_[*i];
}

double RoadGraph::set_current_speed(std::string_view edge_id, double speed) {
  auto i = edge_index(edge_id);
  if (!i) throw UnknownElementError(std::string(edge_id), "unknown edge " + std::string(edge_id));
  auto& e = edges_[*i];
  if (!std::isfinite(speed) || speed <= 0.0) throw GraphError(e.id, "speed must be positive");
  e.current_speed = std::min(speed, e.free_flow_speed);
  return e.current_speed;
}

namespace {

template <class T>
T required(const json& obj, const char* key, const std::string& element) {
  auto it = obj.find(key);
  if (it == obj.end()) throw GraphError(element, "missing field '" + std::string(key) + "' in " + element);
  try {
    return it->get<T>();
  } catch (const json::exception&) {
    throw GraphError(element, "field '" + std::string(key) + "' of " + element + " has the wrong type");
  }
}

}  // namespace

RoadGraph load_graph(std::string_view document) {
  json doc;
  try {
    doc = json::parse(document);
  } catch (const json::parse_error& e) {
    throw GraphError("", std::string("graph document is not valid JSON: ") + e.what());
  }
  if (!doc.is_object() || !doc.contains("nodes") || !doc.contains("edges") || !doc["nodes"].is_array() ||
      !doc["edges"].is_array())
    throw GraphError("", "graph document needs 'nodes' and 'edges' arrays");

  std::vector<RoadNode> nodes;
  for (const auto& n : doc["nodes"]) {
    const std::string id = n.is_object() && n.contains("id") && n["id"].is_string() ? n["id"].get<std::string>() : "";
    if (id.empty()) throw GraphError("", "node without a string id");
    RoadNode node{id, GeoPoint{required<double>(n, "lat", id), required<double>(n, "lon", id), n.value("alt", 0.0)}};
    nodes.push_back(std::move(node));
  }
  std::vector<RoadEdge> edges;
  for (const auto& e : doc["edges"]) {
    const std::string id = e.is_object() && e.contains("id") && e["id"].is_string() ? e["id"].get<std::string>() : "";
    if (id.empty()) throw GraphError("", "edge without a string id");
    RoadEdge edge;
    edge.id = id;
    edge.from = required<std::string>(e, "from", id);
    edge.to = required<std::string>(e, "to", id);
    edge.length = required<double>(e, "length_m", id);
    edge.free_flow_speed = required<double>(e, "free_flow_speed_ms", id);
    edge.current_speed = edge.free_flow_speed;
    edges.push_back(std::move(edge));
  }
  return RoadGraph(std::move(nodes), std::move(edges));
}

RoadGraph load_graph_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw GraphError("", "cannot open graph file " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return load_graph(ss.str());
}

Route shortest_path(const RoadGraph& graph, std::string_view origin, std::string_view dest) {
  const auto src = graph.node_index(origin);
  if (!src) throw UnknownElementError(std::string(origin), "unknown node " + std::string(origin));
  const auto dst = graph.node_index(dest);
  if (!dst) throw UnknownElementError(std::string(dest), "unknown node " + std::string(dest));
  Route route;
  if (*src == *dst) return route;

  const std::size_t n = graph.nodes().size();
  constexpr double inf = std::numeric_limits<double>::infinity();
  std::vector<double> dist(n, inf);
  std::vector<std::size_t> via_edge(n, std::numeric_limits<std::size_t>::max());
  std::vector<bool> settled(n, false);

  // (time, node index): node indices follow lexicographic id order.
  using Item = std::pair<double, std::size_t>;
  std::priority_queue<Item, std::vector<Item>, std::greater<>> queue;
  dist[*src] = 0.0;
  queue.emplace(0.0, *src);
  while (!queue.empty()) {
    auto [d, u] = queue.top();
    queue.pop();
    if (settled[u]) continue;
    settled[u] = true;
    if (u == *dst) break;
    for (std::size_t ei : graph.out_edges(u)) {
      const auto& e = graph.edge_at(ei);
      const std::size_t v = *graph.node_index(e.to);
      const double nd = d + edge_travel_time(e);
      if (nd < dist[v]) {
        dist[v] = nd;
        via_edge[v] = ei;
        queue.emplace(nd, v);
      }
    }
  }
  if (!settled[*dst])
    throw NoPathError("no path from " + std::string(origin) + " to " + std::string(dest));

  std::vector<std::size_t> chain;
  for (std::size_t v = *dst; v != *src;) {
    const auto& e = graph.edge_at(via_edge[v]);
    chain.push_back(via_edge[v]);
    v = *graph.node_index(e.from);
  }
  std::reverse(chain.begin(), chain.end());
  for (std::size_t ei : chain) {
    const auto& e = graph.edge_at(ei);
    route.edge_ids.push_back(e.id);
    route.total_length += e.length;
    route.total_time += edge_travel_time(e);
  }
  return route;
}

namespace {

struct Projection {
  double distance;
  double fraction;
};

Projection project(const RoadGraph& graph, const RoadEdge& e, const GeoPoint& p) {
  const auto a = to_local(p, graph.edge_from_position(e));
  const auto b = to_local(p, graph.edge_to_position(e));
  const double dx = b.x - a.x;
  const double dy = b.y - a.y;
  const double len2 = dx * dx + dy * dy;
  double t = len2 > 0.0 ? -(a.x * dx + a.y * dy) / len2 : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  const double cx = a.x + t * dx;
  const double cy = a.y + t * dy;
  return {std::hypot(cx, cy), t};
}

constexpr double kTieToleranceM = 1e-6;

}  // namespace

std::vector<MatchResult> match_candidates(const RoadGraph& graph, const GeoPoint& p, double max_lateral) {
  std::vector<MatchResult> out;
  for (const auto& e : graph.edges()) {
    const auto proj = project(graph, e, p);
    if (proj.distance <= max_lateral)
      out.push_back(MatchResult{e.id, proj.fraction * e.length, proj.distance, proj.distance <= kOffNetworkDistanceM});
  }
  std::stable_sort(out.begin(), out.end(), [](const MatchResult& a, const MatchResult& b) {
    if (std::fabs(a.lateral_distance - b.lateral_distance) > kTieToleranceM)
      return a.lateral_distance < b.lateral_distance;
    return a.edge_id < b.edge_id;
  });
  return out;
}

MatchResult map_match(const RoadGraph& graph, const GeoPoint& p, std::optional<double> heading_deg) {
  if (graph.edges().empty()) throw GraphError("", "cannot map-match on a graph without edges");
  auto scan = [&](bool use_heading) {
    std::optional<MatchResult> best;
    for (const auto& e : graph.edges()) {
      if (use_heading && heading_difference(*heading_deg, heading_of(graph, e.id)) > 90.0) continue;
      const auto proj = project(graph, e, p);
      if (!best || proj.distance < best->lateral_distance - kTieToleranceM)
        best = MatchResult{e.id, proj.fraction * e.length, proj.distance, false};
    }
    return best;
  };
  std::optional<MatchResult> best;
  if (heading_deg) {
    best = scan(true);
    if (best && best->lateral_distance > kOffNetworkDistanceM) best.reset();
  }
  if (!best) best = scan(false);
  best->on_network = best->lateral_distance <= kOffNetworkDistanceM;
  return *best;
}

double update_edge_speed(RoadGraph& graph, std::string_view edge_id, std::span<const SpeedSample> samples,
                         double now, const SpeedUpdateConfig& config) {
  const auto idx = graph.edge_index(edge_id);
  if (!idx) throw UnknownElementError(std::string(edge_id), "unknown edge " + std::string(edge_id));
  const auto& e = graph.edge_at(*idx);

  double sum = 0.0;
  std::size_t count = 0;
  for (const auto& s : samples) {
    if (s.edge_id != edge_id) continue;
    if (s.timestamp > now - config.window_s && s.timestamp <= now) {
      sum += s.speed;
      ++count;
    }
  }
  double next;
  if (count > 0) {
    next = std::min(std::max(sum / static_cast<double>(count), config.floor_ms), e.free_flow_speed);
  } else {
    next = e.current_speed + config.decay * (e.free_flow_speed - e.current_speed);
  }
  return graph.set_current_speed(edge_id, next);
}

double predict_travel_time(std::span<const TimedValue> history, double /*horizon_s*/, double alpha) {
  if (history.empty()) throw std::invalid_argument("travel-time history must not be empty");
  double level = history.front().value;
  for (std::size_t i = 1; i < history.size(); ++i) {
    if (history[i].timestamp < history[i - 1].timestamp)
      throw std::invalid_argument("travel-time history must be chronologically ordered");
    level = alpha * history[i].value + (1.0 - alpha) * level;
  }
  return level;
}

GeoPoint position_of(const RoadGraph& graph, const EdgePosition& pos) {
  const auto& e = graph.edge(pos.edge_id);
  return interpolate(graph.edge_from_position(e), graph.edge_to_position(e), std::clamp(pos.offset / e.length, 0.0, 1.0));
}

double heading_of(const RoadGraph& graph, std::string_view edge_id) {
  const auto& e = graph.edge(edge_id);
  return initial_bearing(graph.edge_from_position(e), graph.edge_to_position(e));
}

Leg plan_leg(const RoadGraph& graph, const EdgePosition& from, const EdgePosition& to) {
  const auto& start = graph.edge(from.edge_id);
  const auto& end = graph.edge(to.edge_id);
  Leg leg;
  leg.start_offset = std::clamp(from.offset, 0.0, start.length);
  leg.end_offset = std::clamp(to.offset, 0.0, end.length);
  if (start.id == end.id && leg.end_offset >= leg.start_offset) {
    leg.edge_ids = {start.id};
  } else {
    const auto middle = shortest_path(graph, start.to, end.from);
    leg.edge_ids.reserve(middle.edge_ids.size() + 2);
    leg.edge_ids.push_back(start.id);
    leg.edge_ids.insert(leg.edge_ids.end(), middle.edge_ids.begin(), middle.edge_ids.end());
    leg.edge_ids.push_back(end.id);
  }
  refresh_leg(graph, leg);
  return leg;
}

namespace {

template <class PerEdge>
double accumulate_leg(const RoadGraph& graph, const Leg& leg, std::size_t edge_index, double offset, PerEdge f) {
  double total = 0.0;
  const std::size_t last = leg.edge_ids.size() - 1;
  for (std::size_t k = edge_index; k < leg.edge_ids.size(); ++k) {
    const auto& e = graph.edge(leg.edge_ids[k]);
    double from = 0.0;
    if (k == edge_index) from = offset;
    else if (k == 0) from = leg.start_offset;
    const double to = (k == last) ? leg.end_offset : e.length;
    total += f(e, std::max(0.0, to - from));
  }
  return total;
}

}  // namespace

double leg_remaining_time(const RoadGraph& graph, const Leg& leg, std::size_t edge_index, double offset) {
  if (leg.edge_ids.empty() || edge_index >= leg.edge_ids.size()) return 0.0;
  return accumulate_leg(graph, leg, edge_index, offset,
                        [](const RoadEdge& e, double dist) { return dist / e.current_speed; });
}

double leg_remaining_length(const RoadGraph& graph, const Leg& leg, std::size_t edge_index, double offset) {
  if (leg.edge_ids.empty() || edge_index >= leg.edge_ids.size()) return 0.0;
  return accumulate_leg(graph, leg, edge_index, offset, [](const RoadEdge&, double dist) { return dist; });
}

void refresh_leg(const RoadGraph& graph, Leg& leg) {
  leg.length = leg_remaining_length(graph, leg, 0, leg.start_offset);
  leg.time = leg_remaining_time(graph, leg, 0, leg.start_offset);
}

double LiveGraph::update_edge_speed(std::string_view edge_id, std::span<const SpeedSample> samples, double now,
                                    const SpeedUpdateConfig& config) {
  std::unique_lock lock(mu_);
  return road::update_edge_speed(graph_, edge_id, samples, now, config);
}

RoadGraph LiveGraph::snapshot() const {
  std::shared_lock lock(mu_);
  return graph_;
}

}  // namespace ctmaas::road
