#include "ctmaas/fleet.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numeric>
#include <set>
#include <sstream>

namespace ctmaas::fleet {

using nlohmann::json;

namespace {

constexpr std::string_view kTaskKinds[] = {"Pickup", "Delivery", "Maintenance"};
constexpr std::string_view kStopStatuses[] = {"Pending", "Arrived", "Done"};
constexpr std::string_view kTripStates[] = {"Planned", "Active", "Completed", "Aborted"};
constexpr double kInf = std::numeric_limits<double>::infinity();

double round2(double v) {
  const double r = std::round(v * 100.0) / 100.0;
  return r == 0.0 ? 0.0 : r;
}

std::string next_id(const char* prefix, std::uint64_t& counter) {
  char buf[48];
  std::snprintf(buf, sizeof buf, "%s-%06llu", prefix, static_cast<unsigned long long>(counter++));
  return buf;
}

json point_json(const GeoPoint& p) { return json{{"lat", p.lat}, {"lon", p.lon}, {"alt", p.alt}}; }

GeoPoint point_from(const json& j) { return GeoPoint{j.at("lat").get<double>(), j.at("lon").get<double>(), j.value("alt", 0.0)}; }

template <std::size_t N>
std::optional<std::size_t> index_of(const std::string_view (&names)[N], std::string_view s) {
  for (std::size_t i = 0; i < N; ++i)
    if (names[i] == s) return i;
  return std::nullopt;
}

bool is_open(TripState s) { return s == TripState::Planned || s == TripState::Active; }

std::vector<TaskStop> open_stops(const Trip& t) {
  std::vector<TaskStop> out;
  for (const auto& s : t.stops)
    if (s.status != StopStatus::Done) out.push_back(s);
  return out;
}

double legs_time(const road::RoadGraph& g, const std::vector<road::Leg>& legs) {
  double total = 0.0;
  for (const auto& l : legs) total += road::leg_remaining_time(g, l, 0, l.start_offset);
  return total;
}

void append_edges(std::vector<std::string>& out, const std::vector<std::string>& edges, std::size_t from) {
  for (std::size_t k = from; k < edges.size(); ++k) {
    if (k == from && !out.empty() && out.back() == edges[k]) continue;
    out.push_back(edges[k]);
  }
}

}  // namespace

std::string_view to_string(TaskKind k) { return kTaskKinds[static_cast<std::size_t>(k)]; }
std::string_view to_string(StopStatus s) { return kStopStatuses[static_cast<std::size_t>(s)]; }
std::string_view to_string(TripState s) { return kTripStates[static_cast<std::size_t>(s)]; }

std::optional<TaskKind> task_kind_from(std::string_view s) {
  if (auto i = index_of(kTaskKinds, s)) return static_cast<TaskKind>(*i);
  return std::nullopt;
}

std::vector<std::string> flatten_legs(const std::vector<road::Leg>& legs) {
  std::vector<std::string> out;
  for (const auto& l : legs) append_edges(out, l.edge_ids, 0);
  return out;
}

road::Route remaining_route(const road::RoadGraph& g, const Trip& t) {
  road::Route r;
  if (t.legs.empty()) return r;
  append_edges(r.edge_ids, t.legs[0].edge_ids, t.progress_edge);
  r.total_length = road::leg_remaining_length(g, t.legs[0], t.progress_edge, t.progress_offset);
  r.total_time = road::leg_remaining_time(g, t.legs[0], t.progress_edge, t.progress_offset);
  for (std::size_t i = 1; i < t.legs.size(); ++i) {
    const auto& l = t.legs[i];
    append_edges(r.edge_ids, l.edge_ids, 0);
    r.total_length += road::leg_remaining_length(g, l, 0, l.start_offset);
    r.total_time += road::leg_remaining_time(g, l, 0, l.start_offset);
  }
  return r;
}

TripStatistics compute_statistics(const std::string& trip_id, const std::vector<TrajectoryPoint>& trajectory) {
  TripStatistics s{trip_id, 0.0, 0.0, 0.0, 0.0};
  if (trajectory.empty()) return s;
  double distance = 0.0;
  double vmax = trajectory.front().speed, vmin = trajectory.front().speed;
  for (std::size_t i = 1; i < trajectory.size(); ++i) {
    distance += haversine_distance(trajectory[i - 1].position, trajectory[i].position);
    vmax = std::max(vmax, trajectory[i].speed);
    vmin = std::min(vmin, trajectory[i].speed);
  }
  s.distance_m = round2(distance);
  s.duration_s = round2(trajectory.back().timestamp - trajectory.front().timestamp);
  s.max_speed_ms = round2(vmax);
  s.min_speed_ms = round2(vmin);
  return s;
}

// -- gazetteer ---------------------------------------------------------------

std::optional<GeoPoint> Gazetteer::resolve(const std::string& address) const {
  if (auto it = entries_.find(address); it != entries_.end()) return it->second;
  return std::nullopt;
}

Gazetteer load_gazetteer(std::string_view document) {
  std::map<std::string, GeoPoint> entries;
  try {
    const auto doc = json::parse(document);
    if (!doc.is_object()) throw FleetError("gazetteer must be a JSON object");
    for (const auto& [address, value] : doc.items()) {
      GeoPoint p{value.at("lat").get<double>(), value.at("lon").get<double>(), 0.0};
      require_valid(p, "gazetteer entry '" + address + "'");
      entries.emplace(address, p);
    }
  } catch (const json::exception& e) {
    throw FleetError(std::string("bad gazetteer: ") + e.what());
  }
  return Gazetteer(std::move(entries));
}

Gazetteer load_gazetteer_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw FleetError("cannot open gazetteer " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return load_gazetteer(ss.str());
}

// -- stop ordering -----------------------------------------------------------

double path_cost(const std::vector<std::vector<double>>& cost, const std::vector<std::size_t>& order) {
  double total = 0.0;
  std::size_t at = 0;
  for (auto next : order) {
    total += cost[at][next];
    at = next;
  }
  return total;
}

std::vector<std::size_t> nearest_neighbor_order(const std::vector<std::vector<double>>& cost) {
  const std::size_t n = cost.size();
  std::vector<bool> used(n, false);
  std::vector<std::size_t> order;
  std::size_t at = 0;
  used[0] = true;
  for (std::size_t step = 1; step < n; ++step) {
    std::size_t best = n;
    for (std::size_t j = 1; j < n; ++j) {
      if (used[j]) continue;
      if (best == n || cost[at][j] < cost[at][best]) best = j;
    }
    used[best] = true;
    order.push_back(best);
    at = best;
  }
  return order;
}

std::vector<std::size_t> two_opt(const std::vector<std::vector<double>>& cost, std::vector<std::size_t> order) {
  double best = path_cost(cost, order);
  bool improved = true;
  while (improved) {
    improved = false;
    for (std::size_t i = 0; i + 1 < order.size() && !improved; ++i) {
      for (std::size_t j = i + 1; j < order.size(); ++j) {
        auto candidate = order;
        std::reverse(candidate.begin() + static_cast<std::ptrdiff_t>(i),
                     candidate.begin() + static_cast<std::ptrdiff_t>(j) + 1);
        const double c = path_cost(cost, candidate);
        if (c < best - 1e-9) {
          order = std::move(candidate);
          best = c;
          improved = true;
          break;
        }
      }
    }
  }
  return order;
}

// -- service -----------------------------------------------------------------

FleetService::FleetService(road::LiveGraph& graph, broker::Broker& broker, geomessenger::Geomessenger* geomessenger,
                           store::Store& store, UuidSource& ids, Gazetteer gazetteer, FleetConfig config)
    : graph_(graph),
      broker_(broker),
      geomessenger_(geomessenger),
      store_(store),
      ids_(ids),
      gazetteer_(std::move(gazetteer)),
      config_(config) {}

void FleetService::set_event_sink(EventSink sink) {
  std::lock_guard lock(sink_mu_);
  sink_ = std::move(sink);
}

void FleetService::emit(const json& event) const {
  EventSink sink;
  {
    std::lock_guard lock(sink_mu_);
    sink = sink_;
  }
  if (sink) sink(event);
}

FleetService::TripRec& FleetService::trip_rec(const std::string& id) const {
  std::shared_lock lock(registry_mu_);
  auto it = trips_.find(id);
  if (it == trips_.end()) throw UnknownEntity("unknown trip " + id);
  return *it->second;
}

FleetService::VehicleRec& FleetService::vehicle_rec(const std::string& id) const {
  std::shared_lock lock(registry_mu_);
  auto it = vehicles_.find(id);
  if (it == vehicles_.end()) throw UnknownEntity("unknown vehicle " + id);
  return *it->second;
}

std::string FleetService::register_driver(const std::string& name, const std::string& phone, double now) {
  if (name.empty()) throw Rejected("name", "driver name must be non-empty");
  std::unique_lock lock(registry_mu_);
  Driver d{next_id("drv", next_driver_), name, phone};
  drivers_.emplace(d.driver_id, d);
  store_.put("fleet", "drivers", d.driver_id, to_json(d), now);
  return d.driver_id;
}

std::string FleetService::register_vehicle(const std::string& plate, const std::string& color, double now) {
  if (plate.empty()) throw Rejected("plate", "plate must be non-empty");
  std::unique_lock lock(registry_mu_);
  for (const auto& [id, rec] : vehicles_)
    if (rec->vehicle.plate == plate) throw Rejected("plate", "duplicate plate " + plate);
  auto rec = std::make_unique<VehicleRec>();
  rec->vehicle = Vehicle{next_id("veh", next_vehicle_), plate, color, std::nullopt, std::nullopt, std::nullopt,
                         std::nullopt};
  const std::string id = rec->vehicle.vehicle_id;
  store_.put("fleet", "vehicles", id, to_json(rec->vehicle), now);
  vehicles_.emplace(id, std::move(rec));
  return id;
}

void FleetService::assign_driver(const std::string& vehicle_id, const std::string& driver_id, double now) {
  {
    std::shared_lock lock(registry_mu_);
    if (!drivers_.contains(driver_id)) throw UnknownEntity("unknown driver " + driver_id);
  }
  auto& rec = vehicle_rec(vehicle_id);
  std::lock_guard lock(rec.mu);
  rec.vehicle.assigned_driver = driver_id;
  store_.put("fleet", "vehicles", vehicle_id, to_json(rec.vehicle), now);
}

Driver FleetService::driver(const std::string& id) const {
  std::shared_lock lock(registry_mu_);
  auto it = drivers_.find(id);
  if (it == drivers_.end()) throw UnknownEntity("unknown driver " + id);
  return it->second;
}

Vehicle FleetService::vehicle(const std::string& id) const {
  auto& rec = vehicle_rec(id);
  std::lock_guard lock(rec.mu);
  return rec.vehicle;
}

std::vector<Driver> FleetService::drivers() const {
  std::shared_lock lock(registry_mu_);
  std::vector<Driver> out;
  for (const auto& [id, d] : drivers_) out.push_back(d);
  return out;
}

std::vector<Vehicle> FleetService::vehicles() const {
  std::shared_lock lock(registry_mu_);
  std::vector<Vehicle> out;
  for (const auto& [id, rec] : vehicles_) {
    std::lock_guard vlock(rec->mu);
    out.push_back(rec->vehicle);
  }
  return out;
}

std::vector<road::Leg> FleetService::plan_through(const road::RoadGraph& g, const road::EdgePosition& from,
                                                  const std::vector<TaskStop>& stops) const {
  std::vector<road::Leg> legs;
  road::EdgePosition at = from;
  for (const auto& s : stops) {
    try {
      legs.push_back(road::plan_leg(g, at, s.anchor));
    } catch (const road::NoPathError&) {
      throw Rejected(s.stop_id, "no path to stop " + s.stop_id);
    }
    at = s.anchor;
  }
  return legs;
}

road::EdgePosition FleetService::current_position(const Trip& t) const {
  if (t.legs.empty()) return {};
  return road::EdgePosition{t.legs[0].edge_ids[t.progress_edge], t.progress_offset};
}

double FleetService::remaining_time(const road::RoadGraph& g, const Trip& t) const {
  return remaining_route(g, t).total_time;
}

void FleetService::check_coverage(const road::RoadGraph& g, const Trip& t) const {
  const auto open = open_stops(t);
  if (!is_open(t.state)) return;
  if (open.size() != t.legs.size()) throw FleetError("route coverage violated on " + t.trip_id + ": leg count");
  for (std::size_t i = 0; i < open.size(); ++i) {
    const auto& leg = t.legs[i];
    if (leg.edge_ids.empty() || leg.edge_ids.back() != open[i].anchor.edge_id)
      throw FleetError("route coverage violated on " + t.trip_id + ": leg " + std::to_string(i));
    for (std::size_t k = 1; k < leg.edge_ids.size(); ++k)
      if (g.edge(leg.edge_ids[k - 1]).to != g.edge(leg.edge_ids[k]).from)
        throw FleetError("route coverage violated on " + t.trip_id + ": broken chain");
  }
  if (!t.legs.empty() && t.progress_edge >= t.legs[0].edge_ids.size())
    throw FleetError("route coverage violated on " + t.trip_id + ": progress");
}

void FleetService::persist_trip(const Trip& t, double now) { store_.put("fleet", "trips", t.trip_id, to_json(t, false), now); }

Trip FleetService::create_trip(const std::string& vehicle_id, const std::vector<StopRequest>& requests,
                               const GeoPoint& depart, double now) {
  if (requests.empty()) throw Rejected("stops", "a trip needs at least one stop");
  std::string driver_id;
  {
    auto& rec = vehicle_rec(vehicle_id);
    std::lock_guard lock(rec.mu);
    if (!rec.vehicle.assigned_driver) throw Rejected("vehicle_id", "vehicle " + vehicle_id + " has no driver");
    driver_id = *rec.vehicle.assigned_driver;
    if (rec.vehicle.current_trip) {
      const auto& other = trip_rec(*rec.vehicle.current_trip);
      std::lock_guard tlock(other.mu);
      if (is_open(other.trip.state))
        throw Rejected("vehicle_id", "vehicle " + vehicle_id + " already has open trip " + other.trip.trip_id);
    }
  }
  require_valid(depart, "depart");

  std::uint64_t trip_no;
  {
    std::unique_lock lock(registry_mu_);
    trip_no = next_trip_++;
  }
  Trip t;
  t.trip_id = next_id("trip", trip_no);
  t.vehicle_id = vehicle_id;
  t.driver_id = driver_id;
  t.depart = depart;
  t.created_at = now;

  std::vector<TaskStop> stops;
  std::set<std::string> seen;
  for (std::size_t i = 0; i < requests.size(); ++i) {
    const auto& r = requests[i];
    TaskStop s;
    s.stop_id = r.stop_id.empty() ? t.trip_id + "-s" + std::to_string(i + 1) : r.stop_id;
    if (!seen.insert(s.stop_id).second) throw Rejected(s.stop_id, "duplicate stop id " + s.stop_id);
    s.kind = r.kind;
    s.address = r.address;
    if (r.location) {
      s.location = *r.location;
    } else if (r.address) {
      auto p = gazetteer_.resolve(*r.address);
      if (!p) throw Rejected(s.stop_id, "stop " + s.stop_id + ": unknown address '" + *r.address + "'");
      s.location = *p;
    } else {
      throw Rejected(s.stop_id, "stop " + s.stop_id + " needs a location or an address");
    }
    if (!is_valid(s.location)) throw Rejected(s.stop_id, "stop " + s.stop_id + " has an invalid location");
    stops.push_back(std::move(s));
  }

  graph_.read([&](const road::RoadGraph& g) {
    for (auto& s : stops) {
      const auto m = road::map_match(g, s.location);
      if (!m.on_network) throw Rejected(s.stop_id, "stop " + s.stop_id + " is off-network (unmatchable)");
      s.anchor = road::EdgePosition{m.edge_id, m.offset};
    }
    const auto dm = road::map_match(g, depart);
    if (!dm.on_network) throw Rejected("depart", "departure point is off-network (unmatchable)");
    const road::EdgePosition start{dm.edge_id, dm.offset};

    const std::size_t n = stops.size() + 1;
    std::vector<road::EdgePosition> anchors{start};
    for (const auto& s : stops) anchors.push_back(s.anchor);
    std::vector<std::vector<double>> cost(n, std::vector<double>(n, 0.0));
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 1; j < n; ++j) {
        if (i == j) continue;
        try {
          cost[i][j] = road::plan_leg(g, anchors[i], anchors[j]).time;
        } catch (const road::NoPathError&) {
          cost[i][j] = kInf;
        }
      }
    const auto order = two_opt(cost, nearest_neighbor_order(cost));
    std::vector<TaskStop> ordered;
    for (auto k : order) ordered.push_back(stops[k - 1]);
    t.stops = ordered;
    t.legs = plan_through(g, start, t.stops);
    t.progress_edge = 0;
    t.progress_offset = t.legs.front().start_offset;
    check_coverage(g, t);
  });

  {
    std::unique_lock lock(registry_mu_);
    auto rec = std::make_unique<TripRec>();
    rec->trip = t;
    trips_.emplace(t.trip_id, std::move(rec));
  }
  {
    auto& vrec = vehicle_rec(vehicle_id);
    std::lock_guard lock(vrec.mu);
    vrec.vehicle.current_trip = t.trip_id;
    store_.put("fleet", "vehicles", vehicle_id, to_json(vrec.vehicle), now);
  }
  persist_trip(t, now);
  emit(json{{"type", "trip"}, {"timestamp", now}, {"trip", to_json(t, false)}});
  return t;
}

Trip FleetService::trip(const std::string& trip_id) const {
  auto& rec = trip_rec(trip_id);
  std::lock_guard lock(rec.mu);
  return rec.trip;
}

std::vector<Trip> FleetService::trips() const {
  std::vector<TripRec*> recs;
  {
    std::shared_lock lock(registry_mu_);
    for (const auto& [id, rec] : trips_) recs.push_back(rec.get());
  }
  std::vector<Trip> out;
  for (auto* rec : recs) {
    std::lock_guard lock(rec->mu);
    out.push_back(rec->trip);
  }
  return out;
}

void FleetService::start_trip(const std::string& trip_id, double now) {
  auto& rec = trip_rec(trip_id);
  std::lock_guard lock(rec.mu);
  if (rec.trip.state == TripState::Active) return;
  if (rec.trip.state != TripState::Planned) throw Rejected("state", "trip " + trip_id + " is not Planned");
  rec.trip.state = TripState::Active;
  rec.trip.started_at = now;
  persist_trip(rec.trip, now);
  emit(json{{"type", "trip"}, {"timestamp", now}, {"trip", to_json(rec.trip, false)}});
}

void FleetService::advance(const road::RoadGraph& g, Trip& t, const GeoPoint& p, double heading) {
  if (t.legs.empty()) return;
  const auto candidates = road::match_candidates(g, p);
  if (candidates.empty()) return;
  const auto& leg = t.legs[0];
  const double limit = candidates.front().lateral_distance + config_.route_match_slack_m;

  std::optional<std::pair<std::size_t, double>> hit;
  for (const auto& c : candidates) {
    if (c.lateral_distance > limit) break;
    for (std::size_t k = t.progress_edge; k < leg.edge_ids.size(); ++k) {
      if (leg.edge_ids[k] != c.edge_id) continue;
      if (!hit || k < hit->first) hit = {k, c.offset};
      break;
    }
  }
  if (hit) {
    auto [k, offset] = *hit;
    if (k == 0) offset = std::max(offset, leg.start_offset);
    if (k + 1 == leg.edge_ids.size()) offset = std::min(offset, leg.end_offset);
    if (k == t.progress_edge) offset = std::max(offset, t.progress_offset);
    t.progress_edge = k;
    t.progress_offset = offset;
    return;
  }
  // Off the planned route: follow the vehicle from where it actually is.
  const auto m = road::map_match(g, p, heading);
  if (!m.on_network) return;
  try {
    t.legs = plan_through(g, road::EdgePosition{m.edge_id, m.offset}, open_stops(t));
    t.progress_edge = 0;
    t.progress_offset = t.legs.front().start_offset;
  } catch (const Rejected&) {
    // Keep the old plan when the new position cannot reach the stops.
  }
}

bool FleetService::ingest_cam(const cits::CamMessage& cam) {
  cits::validate(cits::Message{cam});
  auto& vrec = vehicle_rec(cam.vehicle_id);
  std::vector<json> events;
  {
    std::lock_guard vlock(vrec.mu);
    auto& v = vrec.vehicle;
    if (v.last_timestamp && cam.timestamp <= *v.last_timestamp) {
      ++stale_;
      return false;
    }
    v.last_timestamp = cam.timestamp;
    v.last_position = cam.position;

    std::string trip_id = v.current_trip.value_or("");
    events.push_back(json{{"type", "position"},
                          {"vehicle_id", cam.vehicle_id},
                          {"trip_id", trip_id},
                          {"timestamp", cam.timestamp},
                          {"lat", cam.position.lat},
                          {"lon", cam.position.lon},
                          {"speed", cam.speed},
                          {"heading", cam.heading}});
    if (!trip_id.empty()) {
      auto& trec = trip_rec(trip_id);
      std::lock_guard tlock(trec.mu);
      auto& t = trec.trip;
      bool changed = false;
      if (t.state == TripState::Planned) {
        t.state = TripState::Active;
        t.started_at = cam.timestamp;
        changed = true;
      }
      if (t.state == TripState::Active) {
        TrajectoryPoint pt{cam.timestamp, cam.position, cam.speed, cam.heading};
        t.trajectory.push_back(pt);
        store_.push("fleet", "trajectories", t.trip_id, to_json(pt), cam.timestamp);
        const auto before_legs = t.legs.size() ? flatten_legs(t.legs) : std::vector<std::string>{};
        graph_.read([&](const road::RoadGraph& g) {
          advance(g, t, cam.position, cam.heading);
          check_coverage(g, t);
        });
        if (flatten_legs(t.legs) != before_legs) changed = true;
        for (auto& s : t.stops) {
          if (s.status == StopStatus::Pending &&
              haversine_distance(s.location, cam.position) <= config_.arrival_radius_m) {
            s.status = StopStatus::Arrived;
            changed = true;
            events.push_back(json{{"type", "stop"},
                                  {"timestamp", cam.timestamp},
                                  {"trip_id", t.trip_id},
                                  {"stop_id", s.stop_id},
                                  {"status", "Arrived"}});
          }
        }
      }
      if (changed) {
        persist_trip(t, cam.timestamp);
        events.push_back(json{{"type", "trip"}, {"timestamp", cam.timestamp}, {"trip", to_json(t, false)}});
      }
    }
    // Still under the vehicle lock so the stream sees each vehicle's updates in timestamp order.
    for (const auto& e : events) emit(e);
  }
  if (geomessenger_) geomessenger_->ingest_cam(cam);
  return true;
}

void FleetService::complete_stop(const std::string& trip_id, const std::string& stop_id, double now) {
  auto& rec = trip_rec(trip_id);
  std::lock_guard lock(rec.mu);
  auto& t = rec.trip;
  if (t.state != TripState::Active) throw Rejected("state", "trip " + trip_id + " is not Active");
  auto it = std::find_if(t.stops.begin(), t.stops.end(), [](const TaskStop& s) { return s.status != StopStatus::Done; });
  if (it == t.stops.end() || it->stop_id != stop_id) {
    const bool known = std::any_of(t.stops.begin(), t.stops.end(), [&](const TaskStop& s) { return s.stop_id == stop_id; });
    if (!known) throw UnknownEntity("unknown stop " + stop_id);
    throw Rejected(stop_id, "stop " + stop_id + " is not the next open stop");
  }
  it->status = StopStatus::Done;
  t.legs.erase(t.legs.begin());
  t.progress_edge = 0;
  t.progress_offset = t.legs.empty() ? 0.0 : t.legs.front().start_offset;
  graph_.read([&](const road::RoadGraph& g) { check_coverage(g, t); });
  persist_trip(t, now);
  emit(json{{"type", "stop"}, {"timestamp", now}, {"trip_id", trip_id}, {"stop_id", stop_id}, {"status", "Done"}});
}

std::vector<StopEta> FleetService::eta(const std::string& trip_id, double now) const {
  auto& rec = trip_rec(trip_id);
  std::lock_guard lock(rec.mu);
  const auto& t = rec.trip;
  if (!is_open(t.state)) throw Rejected("state", "trip " + trip_id + " is not Planned or Active");
  const auto open = open_stops(t);
  std::vector<StopEta> out;
  graph_.read([&](const road::RoadGraph& g) {
    double cum = 0.0;
    for (std::size_t i = 0; i < t.legs.size(); ++i) {
      const auto& leg = t.legs[i];
      cum += i == 0 ? road::leg_remaining_time(g, leg, t.progress_edge, t.progress_offset)
                    : road::leg_remaining_time(g, leg, 0, leg.start_offset);
      out.push_back(StopEta{open[i].stop_id, now + cum});
    }
  });
  return out;
}

std::optional<cits::Message> FleetService::apply_proposal(Trip& t, const RerouteProposal& p, double now) {
  const auto here = current_position(t);
  std::optional<std::size_t> k;
  if (!p.legs.empty()) {
    for (std::size_t i = 0; i < p.legs[0].edge_ids.size(); ++i)
      if (p.legs[0].edge_ids[i] == here.edge_id) {
        k = i;
        break;
      }
  }
  graph_.read([&](const road::RoadGraph& g) {
    if (k) {
      t.legs = p.legs;
      t.progress_edge = *k;
      t.progress_offset = std::max(here.offset, *k == 0 ? t.legs[0].start_offset : 0.0);
    } else {
      // The vehicle has moved off the proposal's first edges; re-plan from here.
      auto fresh = plan_through(g, here, open_stops(t));
      if (legs_time(g, fresh) >= remaining_time(g, t))
        throw Rejected("proposal", "proposal " + p.proposal_id + " no longer saves time");
      t.legs = std::move(fresh);
      t.progress_edge = 0;
      t.progress_offset = t.legs.front().start_offset;
    }
    check_coverage(g, t);
  });
  ++t.reroute_count;
  persist_trip(t, now);

  cits::IvimMessage m;
  m.msg_id = ids_.next();
  m.kind = cits::IvimKind::RerouteAdvisory;
  const auto route = graph_.read([&](const road::RoadGraph& g) { return remaining_route(g, t); });
  const GeoPoint at = graph_.read([&](const road::RoadGraph& g) { return road::position_of(g, current_position(t)); });
  m.zone = cits::RelevanceZone{at, config_.advisory_radius_m};
  m.payload = cits::payload::Reroute{t.vehicle_id, t.trip_id, route.edge_ids};
  m.valid_from = now;
  m.valid_to = now + config_.proposal_ttl_s;
  store_.push("fleet", "reroute_events", t.trip_id,
              json{{"source", "Manager"}, {"at", now}, {"proposal_id", p.proposal_id}, {"edge_ids", route.edge_ids}},
              now);
  emit(json{{"type", "reroute_applied"},
            {"timestamp", now},
            {"trip_id", t.trip_id},
            {"proposal_id", p.proposal_id},
            {"reroute_count", t.reroute_count},
            {"edge_ids", route.edge_ids}});
  return cits::Message{m};
}

std::optional<RerouteProposal> FleetService::maybe_reroute(const std::string& trip_id, double now) {
  auto& rec = trip_rec(trip_id);
  std::optional<RerouteProposal> proposal;
  std::optional<cits::Message> advisory;
  {
    std::lock_guard lock(rec.mu);
    auto& t = rec.trip;
    if (t.state != TripState::Active) throw Rejected("state", "trip " + trip_id + " is not Active");
    if (t.legs.empty()) return std::nullopt;
    const auto open = open_stops(t);
    if (open.front().status == StopStatus::Arrived) return std::nullopt;

    graph_.read([&](const road::RoadGraph& g) {
      const double current = remaining_time(g, t);
      std::vector<road::Leg> legs;
      try {
        legs = plan_through(g, current_position(t), open);
      } catch (const Rejected&) {
        return;
      }
      const double proposed = legs_time(g, legs);
      const double saving = current - proposed;
      if (saving >= config_.reroute_min_saving_s && saving >= config_.reroute_min_saving_ratio * current) {
        RerouteProposal p;
        p.proposal_id = "prop-" + ids_.next();
        p.trip_id = t.trip_id;
        p.vehicle_id = t.vehicle_id;
        p.created_at = now;
        p.expires_at = now + config_.proposal_ttl_s;
        p.current_remaining_s = current;
        p.proposed_remaining_s = proposed;
        p.edge_ids = flatten_legs(legs);
        p.legs = std::move(legs);
        proposal = std::move(p);
      }
    });
    if (!proposal) return std::nullopt;
    {
      std::lock_guard plock(proposals_mu_);
      for (auto it = proposals_.begin(); it != proposals_.end();) {
        if (it->second.trip_id == trip_id) it = proposals_.erase(it);
        else ++it;
      }
      if (!config_.auto_apply) proposals_.emplace(proposal->proposal_id, *proposal);
    }
    emit(json{{"type", "reroute_proposal"}, {"timestamp", now}, {"proposal", to_json(*proposal)}});
    if (config_.auto_apply) advisory = apply_proposal(t, *proposal, now);
  }
  if (advisory) broker_.publish(*advisory, now);
  return proposal;
}

std::vector<RerouteProposal> FleetService::proposals(double now) const {
  std::lock_guard lock(proposals_mu_);
  std::vector<RerouteProposal> out;
  for (const auto& [id, p] : proposals_)
    if (p.expires_at >= now) out.push_back(p);
  return out;
}

Trip FleetService::approve_proposal(const std::string& proposal_id, double now) {
  RerouteProposal p;
  {
    std::lock_guard lock(proposals_mu_);
    auto it = proposals_.find(proposal_id);
    if (it == proposals_.end()) throw UnknownEntity("unknown proposal " + proposal_id);
    if (it->second.expires_at < now) {
      proposals_.erase(it);
      throw Rejected("proposal", "proposal " + proposal_id + " has expired");
    }
    p = it->second;
    proposals_.erase(it);
  }
  auto& rec = trip_rec(p.trip_id);
  std::optional<cits::Message> advisory;
  Trip result;
  {
    std::lock_guard lock(rec.mu);
    if (rec.trip.state != TripState::Active) throw Rejected("state", "trip " + p.trip_id + " is not Active");
    advisory = apply_proposal(rec.trip, p, now);
    result = rec.trip;
  }
  if (advisory) broker_.publish(*advisory, now);
  return result;
}

void FleetService::decline_proposal(const std::string& proposal_id) {
  std::lock_guard lock(proposals_mu_);
  if (proposals_.erase(proposal_id) == 0) throw UnknownEntity("unknown proposal " + proposal_id);
}

void FleetService::driver_reroute(const std::string& trip_id, const DriverRerouteRequest& request, double now) {
  if (request.edge_ids.has_value() == request.next_stop_id.has_value())
    throw Rejected("request", "give exactly one of edge_ids or next_stop_id");
  auto& rec = trip_rec(trip_id);
  std::lock_guard lock(rec.mu);
  auto& t = rec.trip;
  if (t.state != TripState::Active) throw Rejected("state", "trip " + trip_id + " is not Active");
  const auto here = current_position(t);

  graph_.read([&](const road::RoadGraph& g) {
    if (request.next_stop_id) {
      const auto& id = *request.next_stop_id;
      auto first_open =
          std::find_if(t.stops.begin(), t.stops.end(), [](const TaskStop& s) { return s.status != StopStatus::Done; });
      auto target = std::find_if(first_open, t.stops.end(), [&](const TaskStop& s) { return s.stop_id == id; });
      if (target == t.stops.end()) {
        const bool known = std::any_of(t.stops.begin(), t.stops.end(), [&](const TaskStop& s) { return s.stop_id == id; });
        if (!known) throw UnknownEntity("unknown stop " + id);
        throw Rejected(id, "stop " + id + " is already done");
      }
      std::rotate(first_open, target, target + 1);
      t.legs = plan_through(g, here, open_stops(t));
    } else {
      const auto& edges = *request.edge_ids;
      if (edges.empty() || edges.front() != here.edge_id)
        throw Rejected("edge_ids", "requested route must start at the current edge " + here.edge_id);
      for (const auto& e : edges)
        if (!g.edge_index(e)) throw Rejected("edge_ids", "unknown edge " + e);
      for (std::size_t k = 1; k < edges.size(); ++k)
        if (g.edge(edges[k - 1]).to != g.edge(edges[k]).from)
          throw Rejected("edge_ids", "edges " + edges[k - 1] + " and " + edges[k] + " are not connected");
      std::vector<road::Leg> legs;
      std::size_t cursor = 0;
      double offset = here.offset;
      for (const auto& s : open_stops(t)) {
        std::optional<std::size_t> found;
        for (std::size_t j = cursor; j < edges.size(); ++j) {
          if (edges[j] == s.anchor.edge_id && (j > cursor || s.anchor.offset >= offset)) {
            found = j;
            break;
          }
        }
        if (!found) throw Rejected(s.stop_id, "requested route misses pending stop " + s.stop_id);
        road::Leg leg;
        leg.edge_ids.assign(edges.begin() + static_cast<std::ptrdiff_t>(cursor),
                            edges.begin() + static_cast<std::ptrdiff_t>(*found) + 1);
        leg.start_offset = offset;
        leg.end_offset = s.anchor.offset;
        road::refresh_leg(g, leg);
        legs.push_back(std::move(leg));
        cursor = *found;
        offset = s.anchor.offset;
      }
      t.legs = std::move(legs);
    }
    t.progress_edge = 0;
    t.progress_offset = t.legs.empty() ? 0.0 : t.legs.front().start_offset;
    check_coverage(g, t);
  });
  ++t.reroute_count;
  persist_trip(t, now);
  const auto edges = flatten_legs(t.legs);
  store_.push("fleet", "reroute_events", trip_id, json{{"source", "Driver"}, {"at", now}, {"edge_ids", edges}}, now);
  emit(json{{"type", "reroute_applied"},
            {"timestamp", now},
            {"trip_id", trip_id},
            {"source", "Driver"},
            {"reroute_count", t.reroute_count},
            {"edge_ids", edges}});
}

TripStatistics FleetService::complete_trip(const std::string& trip_id, double now) {
  auto& rec = trip_rec(trip_id);
  TripStatistics stats;
  std::string vehicle_id;
  {
    std::lock_guard lock(rec.mu);
    auto& t = rec.trip;
    if (t.state == TripState::Completed || (t.state == TripState::Aborted && t.ended_at)) {
      std::lock_guard slock(stats_mu_);
      if (auto it = stats_.find(trip_id); it != stats_.end()) return it->second;
    }
    if (t.state != TripState::Aborted) {
      for (const auto& s : t.stops)
        if (s.status != StopStatus::Done) throw Rejected(s.stop_id, "stop " + s.stop_id + " is still pending");
      t.state = TripState::Completed;
      t.ended_at = now;
      t.legs.clear();
    }
    stats = compute_statistics(trip_id, t.trajectory);
    {
      std::lock_guard slock(stats_mu_);
      stats_[trip_id] = stats;
      aggregates_.trips_per_vehicle[t.vehicle_id] += 1;
      aggregates_.trips_per_driver[t.driver_id] += 1;
      const double active_s =
          t.trajectory.empty() ? 0.0 : t.trajectory.back().timestamp - t.trajectory.front().timestamp;
      aggregates_.vehicle_working_hours[t.vehicle_id] += active_s / 3600.0;
      aggregates_.driver_working_hours[t.driver_id] += active_s / 3600.0;
    }
    persist_trip(t, now);
    store_.put("fleet", "statistics", trip_id, to_json(stats), now);
    vehicle_id = t.vehicle_id;
    emit(json{{"type", "trip"}, {"timestamp", now}, {"trip", to_json(t, false)}});
  }
  auto& vrec = vehicle_rec(vehicle_id);
  std::lock_guard vlock(vrec.mu);
  if (vrec.vehicle.current_trip == trip_id) {
    vrec.vehicle.current_trip.reset();
    store_.put("fleet", "vehicles", vehicle_id, to_json(vrec.vehicle), now);
  }
  return stats;
}

void FleetService::abort_trip(const std::string& trip_id, double now) {
  {
    auto& rec = trip_rec(trip_id);
    std::lock_guard lock(rec.mu);
    if (!is_open(rec.trip.state)) throw Rejected("state", "trip " + trip_id + " is already closed");
    rec.trip.state = TripState::Aborted;
    rec.trip.legs.clear();
  }
  complete_trip(trip_id, now);
}

std::optional<TripStatistics> FleetService::statistics(const std::string& trip_id) const {
  std::lock_guard lock(stats_mu_);
  if (auto it = stats_.find(trip_id); it != stats_.end()) return it->second;
  return std::nullopt;
}

Aggregates FleetService::aggregates() const {
  std::lock_guard lock(stats_mu_);
  return aggregates_;
}

TmcPayload FleetService::tmc_exchange(double from, double to) const {
  if (!(from <= to) || !std::isfinite(from) || !std::isfinite(to))
    throw Rejected("window", "window 'from' must not be after 'to'");
  struct Acc {
    double sum = 0.0;
    std::size_t n = 0;
    std::set<std::string> vehicles;
  };
  std::map<std::string, Acc> acc;
  for (const auto& t : trips()) {
    graph_.read([&](const road::RoadGraph& g) {
      for (const auto& pt : t.trajectory) {
        if (pt.timestamp < from || pt.timestamp > to) continue;
        const auto m = road::map_match(g, pt.position, pt.heading);
        if (!m.on_network) continue;
        auto& a = acc[m.edge_id];
        a.sum += pt.speed;
        ++a.n;
        a.vehicles.insert(t.vehicle_id);
      }
    });
  }
  TmcPayload out{from, to, {}};
  for (const auto& [edge, a] : acc) out.edges.push_back(TmcEdgeRow{edge, a.sum / static_cast<double>(a.n), a.vehicles.size()});
  return out;
}

std::vector<TmcIngestResult> FleetService::tmc_ingest(const json& events, double now) {
  if (!events.is_array()) throw Rejected("events", "events must be an array");
  if (!geomessenger_) throw FleetError("no geomessenger attached");
  std::vector<TmcIngestResult> out;
  for (std::size_t i = 0; i < events.size(); ++i) {
    TmcIngestResult r{i, false, "", {}};
    try {
      auto e = geomessenger::event_from_json(events[i]);
      e.source = geomessenger::EventSource::TMC;
      r.event_id = geomessenger_->register_event(std::move(e), now);
      r.accepted = true;
    } catch (const cits::ValidationError& v) {
      r.errors = v.violations();
    } catch (const geomessenger::EventRejected& x) {
      r.errors = {x.what()};
    }
    out.push_back(std::move(r));
  }
  return out;
}

void FleetService::load(const store::State& state) {
  const json fleet = state.value("fleet", json::object());
  const json empty = json::object();
  auto suffix = [](const std::string& id) -> std::uint64_t {
    const auto dash = id.rfind('-');
    try {
      return dash == std::string::npos ? 0 : std::stoull(id.substr(dash + 1));
    } catch (...) {
      return 0;
    }
  };
  std::unique_lock lock(registry_mu_);
  drivers_.clear();
  vehicles_.clear();
  trips_.clear();
  const json drivers_doc = fleet.value("drivers", empty);
  for (const auto& [id, d] : drivers_doc.items()) {
    drivers_[id] = Driver{id, d.value("name", ""), d.value("phone", "")};
    next_driver_ = std::max(next_driver_, suffix(id) + 1);
  }
  const json vehicles_doc = fleet.value("vehicles", empty);
  for (const auto& [id, v] : vehicles_doc.items()) {
    auto rec = std::make_unique<VehicleRec>();
    rec->vehicle.vehicle_id = id;
    rec->vehicle.plate = v.value("plate", "");
    rec->vehicle.color = v.value("color", "");
    if (v.contains("assigned_driver") && v["assigned_driver"].is_string())
      rec->vehicle.assigned_driver = v["assigned_driver"].get<std::string>();
    if (v.contains("current_trip") && v["current_trip"].is_string())
      rec->vehicle.current_trip = v["current_trip"].get<std::string>();
    vehicles_.emplace(id, std::move(rec));
    next_vehicle_ = std::max(next_vehicle_, suffix(id) + 1);
  }
  const json trajectories = fleet.value("trajectories", empty);
  const json trips_doc = fleet.value("trips", empty);
  for (const auto& [id, tj] : trips_doc.items()) {
    auto rec = std::make_unique<TripRec>();
    rec->trip = trip_from_json(tj);
    if (trajectories.contains(id))
      for (const auto& p : trajectories[id]) rec->trip.trajectory.push_back(trajectory_point_from_json(p));
    if (auto v = vehicles_.find(rec->trip.vehicle_id); v != vehicles_.end() && !rec->trip.trajectory.empty()) {
      auto& veh = v->second->vehicle;
      const auto& last = rec->trip.trajectory.back();
      if (!veh.last_timestamp || last.timestamp > *veh.last_timestamp) {
        veh.last_timestamp = last.timestamp;
        veh.last_position = last.position;
      }
    }
    trips_.emplace(id, std::move(rec));
    next_trip_ = std::max(next_trip_, suffix(id) + 1);
  }
  std::lock_guard slock(stats_mu_);
  stats_.clear();
  aggregates_ = {};
  const json statistics_doc = fleet.value("statistics", empty);
  for (const auto& [id, s] : statistics_doc.items()) {
    stats_[id] = TripStatistics{id, s.at("distance_m"), s.at("duration_s"), s.at("max_speed_ms"), s.at("min_speed_ms")};
    if (auto it = trips_.find(id); it != trips_.end()) {
      const auto& t = it->second->trip;
      aggregates_.trips_per_vehicle[t.vehicle_id] += 1;
      aggregates_.trips_per_driver[t.driver_id] += 1;
      const double active_s =
          t.trajectory.empty() ? 0.0 : t.trajectory.back().timestamp - t.trajectory.front().timestamp;
      aggregates_.vehicle_working_hours[t.vehicle_id] += active_s / 3600.0;
      aggregates_.driver_working_hours[t.driver_id] += active_s / 3600.0;
    }
  }
}

// -- JSON --------------------------------------------------------------------

json to_json(const Driver& d) { return json{{"driver_id", d.driver_id}, {"name", d.name}, {"phone", d.phone}}; }

json to_json(const Vehicle& v) {
  json j{{"vehicle_id", v.vehicle_id}, {"plate", v.plate}, {"color", v.color}};
  j["assigned_driver"] = v.assigned_driver ? json(*v.assigned_driver) : json(nullptr);
  j["current_trip"] = v.current_trip ? json(*v.current_trip) : json(nullptr);
  if (v.last_position) j["last_position"] = point_json(*v.last_position);
  if (v.last_timestamp) j["last_timestamp"] = *v.last_timestamp;
  return j;
}

json to_json(const TaskStop& s) {
  json j{{"stop_id", s.stop_id},
         {"location", point_json(s.location)},
         {"kind", std::string(to_string(s.kind))},
         {"status", std::string(to_string(s.status))},
         {"anchor", {{"edge_id", s.anchor.edge_id}, {"offset", s.anchor.offset}}}};
  if (s.address) j["address"] = *s.address;
  return j;
}

json to_json(const road::Leg& l) {
  return json{{"edge_ids", l.edge_ids},
              {"start_offset", l.start_offset},
              {"end_offset", l.end_offset},
              {"length", l.length},
              {"time", l.time}};
}

road::Leg leg_from_json(const json& j) {
  return road::Leg{j.at("edge_ids").get<std::vector<std::string>>(), j.at("start_offset").get<double>(),
                   j.at("end_offset").get<double>(), j.at("length").get<double>(), j.at("time").get<double>()};
}

json to_json(const TrajectoryPoint& p) {
  return json{{"timestamp", p.timestamp}, {"position", point_json(p.position)}, {"speed", p.speed}, {"heading", p.heading}};
}

TrajectoryPoint trajectory_point_from_json(const json& j) {
  return TrajectoryPoint{j.at("timestamp").get<double>(), point_from(j.at("position")), j.at("speed").get<double>(),
                         j.value("heading", 0.0)};
}

json to_json(const Trip& t, bool with_trajectory) {
  json stops = json::array();
  for (const auto& s : t.stops) stops.push_back(to_json(s));
  json legs = json::array();
  for (const auto& l : t.legs) legs.push_back(to_json(l));
  json j{{"trip_id", t.trip_id},
         {"vehicle_id", t.vehicle_id},
         {"driver_id", t.driver_id},
         {"stops", stops},
         {"legs", legs},
         {"progress_edge", t.progress_edge},
         {"progress_offset", t.progress_offset},
         {"state", std::string(to_string(t.state))},
         {"reroute_count", t.reroute_count},
         {"depart", point_json(t.depart)},
         {"created_at", t.created_at}};
  j["started_at"] = t.started_at ? json(*t.started_at) : json(nullptr);
  j["ended_at"] = t.ended_at ? json(*t.ended_at) : json(nullptr);
  if (with_trajectory) {
    json traj = json::array();
    for (const auto& p : t.trajectory) traj.push_back(to_json(p));
    j["trajectory"] = traj;
  }
  return j;
}

Trip trip_from_json(const json& j) {
  Trip t;
  t.trip_id = j.at("trip_id").get<std::string>();
  t.vehicle_id = j.at("vehicle_id").get<std::string>();
  t.driver_id = j.at("driver_id").get<std::string>();
  for (const auto& s : j.at("stops")) {
    TaskStop stop;
    stop.stop_id = s.at("stop_id").get<std::string>();
    stop.location = point_from(s.at("location"));
    if (s.contains("address")) stop.address = s["address"].get<std::string>();
    stop.kind = task_kind_from(s.at("kind").get<std::string>()).value_or(TaskKind::Delivery);
    stop.status = static_cast<StopStatus>(index_of(kStopStatuses, s.at("status").get<std::string>()).value_or(0));
    stop.anchor = road::EdgePosition{s.at("anchor").at("edge_id").get<std::string>(), s.at("anchor").at("offset").get<double>()};
    t.stops.push_back(std::move(stop));
  }
  for (const auto& l : j.at("legs")) t.legs.push_back(leg_from_json(l));
  t.progress_edge = j.at("progress_edge").get<std::size_t>();
  t.progress_offset = j.at("progress_offset").get<double>();
  t.state = static_cast<TripState>(index_of(kTripStates, j.at("state").get<std::string>()).value_or(0));
  t.reroute_count = j.at("reroute_count").get<int>();
  t.depart = point_from(j.at("depart"));
  t.created_at = j.at("created_at").get<double>();
  if (j.contains("started_at") && j["started_at"].is_number()) t.started_at = j["started_at"].get<double>();
  if (j.contains("ended_at") && j["ended_at"].is_number()) t.ended_at = j["ended_at"].get<double>();
  if (j.contains("trajectory"))
    for (const auto& p : j["trajectory"]) t.trajectory.push_back(trajectory_point_from_json(p));
  return t;
}

json to_json(const TripStatistics& s) {
  return json{{"trip_id", s.trip_id},
              {"distance_m", s.distance_m},
              {"duration_s", s.duration_s},
              {"max_speed_ms", s.max_speed_ms},
              {"min_speed_ms", s.min_speed_ms}};
}

json to_json(const Aggregates& a) {
  return json{{"trips_per_vehicle", a.trips_per_vehicle},
              {"trips_per_driver", a.trips_per_driver},
              {"vehicle_working_hours", a.vehicle_working_hours},
              {"driver_working_hours", a.driver_working_hours}};
}

json to_json(const RerouteProposal& p) {
  return json{{"proposal_id", p.proposal_id},
              {"trip_id", p.trip_id},
              {"vehicle_id", p.vehicle_id},
              {"created_at", p.created_at},
              {"expires_at", p.expires_at},
              {"current_remaining_s", p.current_remaining_s},
              {"proposed_remaining_s", p.proposed_remaining_s},
              {"edge_ids", p.edge_ids}};
}

json to_json(const TmcPayload& p) {
  json edges = json::array();
  for (const auto& r : p.edges)
    edges.push_back(json{{"edge_id", r.edge_id}, {"mean_speed_ms", r.mean_speed_ms}, {"vehicle_count", r.vehicle_count}});
  return json{{"window", {{"from", p.from}, {"to", p.to}}}, {"edges", edges}};
}

json to_json(const StopEta& e) { return json{{"stop_id", e.stop_id}, {"eta", e.eta}}; }

}  // namespace ctmaas::fleet
