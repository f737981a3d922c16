#include "ctmaas/sim.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <set>
#include <sstream>

namespace ctmaas::sim {

using nlohmann::json;

namespace {

constexpr double kEps = 1e-9;

std::string read_file(const std::filesystem::path& p, const std::string& what) {
  std::ifstream in(p);
  if (!in) throw ScenarioError("cannot open " + what + " " + p.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

double num(const json& j, const char* key, double fallback) {
  if (!j.contains(key)) return fallback;
  if (!j[key].is_number()) throw ScenarioError(std::string(key) + " must be a number");
  return j[key].get<double>();
}

bool flag(const json& j, const char* key, bool fallback) {
  if (!j.contains(key)) return fallback;
  if (!j[key].is_boolean()) throw ScenarioError(std::string(key) + " must be a boolean");
  return j[key].get<bool>();
}

GeoPoint point(const json& j, const std::string& what) {
  if (!j.is_object() || !j.contains("lat") || !j.contains("lon") || !j["lat"].is_number() || !j["lon"].is_number())
    throw ScenarioError(what + " needs numeric lat and lon");
  GeoPoint p{j["lat"].get<double>(), j["lon"].get<double>(), 0.0};
  if (!is_valid(p)) throw ScenarioError(what + " is not a valid position");
  return p;
}

void apply_platform_overrides(const json& o, PlatformConfig& c) {
  if (!o.is_object()) throw ScenarioError("platform must be an object");
  c.fleet.auto_apply = flag(o, "auto_apply", c.fleet.auto_apply);
  c.fleet.arrival_radius_m = num(o, "arrival_radius_m", c.fleet.arrival_radius_m);
  c.fleet.reroute_min_saving_s = num(o, "reroute_min_saving_s", c.fleet.reroute_min_saving_s);
  c.fleet.reroute_min_saving_ratio = num(o, "reroute_min_saving_ratio", c.fleet.reroute_min_saving_ratio);
  c.fleet.proposal_ttl_s = num(o, "proposal_ttl_s", c.fleet.proposal_ttl_s);
  c.reroute_check_interval_s = num(o, "reroute_check_interval_s", c.reroute_check_interval_s);
  c.priority.max_extension_s = num(o, "priority_max_extension_s", c.priority.max_extension_s);
  c.priority.margin_s = num(o, "priority_margin_s", c.priority.margin_s);
  c.geomessenger.congestion_onset_ratio = num(o, "congestion_onset_ratio", c.geomessenger.congestion_onset_ratio);
  c.geomessenger.congestion_clear_ratio = num(o, "congestion_clear_ratio", c.geomessenger.congestion_clear_ratio);
  c.geomessenger.window_s = num(o, "window_s", c.geomessenger.window_s);
  c.geomessenger.repeat_s = num(o, "repeat_s", c.geomessenger.repeat_s);
  c.geomessenger.advisory_validity_s = num(o, "advisory_validity_s", c.geomessenger.advisory_validity_s);
  if (o.contains("min_vehicles")) {
    if (!o["min_vehicles"].is_number_unsigned()) throw ScenarioError("min_vehicles must be a non-negative integer");
    c.geomessenger.min_vehicles = o["min_vehicles"].get<std::size_t>();
  }
}

/// TrafficEvent JSON with validity shifted from scenario-relative to absolute time.
json absolute_event(json event, double start_time) {
  if (!event.is_object()) throw ScenarioError("InjectEvent needs an event object");
  for (const char* k : {"valid_from", "valid_to"})
    if (event.contains(k) && event[k].is_number()) event[k] = event[k].get<double>() + start_time;
  return event;
}

/// Uniform double in [0, 1) from the top 53 bits; identical on every standard library.
double uniform01(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

double gaussian(std::mt19937_64& rng) {
  const double u1 = 1.0 - uniform01(rng);
  const double u2 = uniform01(rng);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

std::string_view disturbance_name(DisturbanceKind k) {
  switch (k) {
    case DisturbanceKind::SlowEdge: return "SlowEdge";
    case DisturbanceKind::StopVehicle: return "StopVehicle";
    case DisturbanceKind::InjectEvent: return "InjectEvent";
  }
  return "";
}

json opt(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

}  // namespace

Scenario load_scenario(std::string_view document, const std::filesystem::path& base_dir) {
  json j;
  try {
    j = json::parse(document);
  } catch (const json::parse_error& e) {
    throw ScenarioError(std::string("scenario is not valid JSON: ") + e.what());
  }
  if (!j.is_object()) throw ScenarioError("scenario must be a JSON object");
  Scenario s;
  s.name = j.value("name", std::string("scenario"));
  auto resolve = [&](const std::string& p) {
    const std::filesystem::path path(p);
    return path.is_absolute() ? path : base_dir / path;
  };
  if (!j.contains("graph") || !j["graph"].is_string()) throw ScenarioError("graph must be a file path");
  try {
    s.graph = road::load_graph(read_file(resolve(j["graph"].get<std::string>()), "graph"));
    if (j.contains("signals") && j["signals"].is_string())
      s.plans = signal::load_signal_plans(read_file(resolve(j["signals"].get<std::string>()), "signal plans"));
    if (j.contains("gazetteer") && j["gazetteer"].is_string())
      s.gazetteer = fleet::load_gazetteer(read_file(resolve(j["gazetteer"].get<std::string>()), "gazetteer"));
  } catch (const ScenarioError&) {
    throw;
  } catch (const std::exception& e) {
    throw ScenarioError(e.what());
  }
  s.start_time = num(j, "start_time", s.start_time);
  s.duration_s = num(j, "duration_s", 0.0);
  s.dt_s = num(j, "dt_s", s.dt_s);
  s.cam_interval_s = num(j, "cam_interval_s", s.cam_interval_s);
  s.glosa_range_m = num(j, "glosa_range_m", s.glosa_range_m);
  s.glosa_min_speed_ms = num(j, "glosa_min_speed_ms", s.glosa_min_speed_ms);
  if (j.contains("seed")) {
    if (!j["seed"].is_number_unsigned()) throw ScenarioError("seed must be a non-negative integer");
    s.seed = j["seed"].get<std::uint64_t>();
  }
  if (j.contains("platform")) apply_platform_overrides(j["platform"], s.platform);

  if (!j.contains("vehicles") || !j["vehicles"].is_array()) throw ScenarioError("vehicles must be an array");
  for (const auto& vj : j["vehicles"]) {
    VehicleSpec v;
    if (!vj.contains("label") || !vj["label"].is_string()) throw ScenarioError("every vehicle needs a label");
    v.label = vj["label"].get<std::string>();
    v.plate = vj.value("plate", "SIM-" + v.label);
    v.depart_s = num(vj, "depart_s", 0.0);
    v.depart = point(vj.value("depart", json()), "vehicle " + v.label + " depart");
    v.gps_noise_m = num(vj, "gps_noise_m", 0.0);
    if (vj.contains("behavior")) {
      const auto& b = vj["behavior"];
      v.behavior.obeys_speed_advisory = flag(b, "obeys_speed_advisory", true);
      v.behavior.obeys_reroute = flag(b, "obeys_reroute", true);
      v.behavior.obeys_glosa = flag(b, "obeys_glosa", true);
      v.behavior.requests_priority = flag(b, "requests_priority", false);
    }
    if (!vj.contains("stops") || !vj["stops"].is_array()) throw ScenarioError("vehicle " + v.label + " needs stops");
    for (const auto& sj : vj["stops"]) {
      StopSpec st;
      if (sj.contains("address")) {
        if (!sj["address"].is_string()) throw ScenarioError("stop address must be a string");
        st.address = sj["address"].get<std::string>();
      } else {
        st.location = point(sj, "stop of " + v.label);
      }
      const auto kind = fleet::task_kind_from(sj.value("kind", std::string("Delivery")));
      if (!kind) throw ScenarioError("stop kind must be Pickup, Delivery or Maintenance");
      st.kind = *kind;
      st.dwell_s = num(sj, "dwell_s", 0.0);
      v.stops.push_back(std::move(st));
    }
    s.vehicles.push_back(std::move(v));
  }
  if (j.contains("disturbances")) {
    if (!j["disturbances"].is_array()) throw ScenarioError("disturbances must be an array");
    for (const auto& dj : j["disturbances"]) {
      Disturbance d;
      d.at_s = num(dj, "at_s", -1.0);
      const auto kind = dj.value("kind", std::string());
      if (kind == "SlowEdge") {
        d.kind = DisturbanceKind::SlowEdge;
        d.edge_id = dj.value("edge_id", std::string());
        d.factor = num(dj, "factor", 1.0);
      } else if (kind == "StopVehicle") {
        d.kind = DisturbanceKind::StopVehicle;
        d.vehicle = dj.value("vehicle", std::string());
        d.duration_s = num(dj, "duration_s", 0.0);
      } else if (kind == "InjectEvent") {
        d.kind = DisturbanceKind::InjectEvent;
        d.event = dj.value("event", json());
      } else {
        throw ScenarioError("unknown disturbance kind '" + kind + "'");
      }
      s.disturbances.push_back(std::move(d));
    }
  }
  validate(s);
  return s;
}

Scenario load_scenario_file(const std::filesystem::path& path) {
  return load_scenario(read_file(path, "scenario"), path.parent_path());
}

void validate(const Scenario& s) {
  if (!(s.duration_s > 0.0) || !std::isfinite(s.duration_s)) throw ScenarioError("duration_s must be positive");
  if (!(s.dt_s > 0.0)) throw ScenarioError("dt_s must be positive");
  if (!(s.cam_interval_s > 0.0)) throw ScenarioError("cam_interval_s must be positive");
  if (!(s.glosa_range_m >= 0.0)) throw ScenarioError("glosa_range_m must be non-negative");
  if (!(s.glosa_min_speed_ms > 0.0)) throw ScenarioError("glosa_min_speed_ms must be positive");
  std::set<std::string> labels;
  for (const auto& v : s.vehicles) {
    if (v.label.empty() || !labels.insert(v.label).second) throw ScenarioError("vehicle labels must be unique and non-empty");
    if (v.depart_s < 0.0 || v.depart_s > s.duration_s) throw ScenarioError("vehicle " + v.label + " departs outside the run");
    if (v.stops.empty()) throw ScenarioError("vehicle " + v.label + " has no stops");
    if (v.gps_noise_m < 0.0) throw ScenarioError("gps_noise_m must be non-negative");
    for (const auto& st : v.stops)
      if (st.dwell_s < 0.0) throw ScenarioError("dwell_s must be non-negative");
  }
  for (const auto& d : s.disturbances) {
    const std::string name(disturbance_name(d.kind));
    if (!(d.at_s >= 0.0 && d.at_s <= s.duration_s))
      throw ScenarioError(name + " disturbance time " + std::to_string(d.at_s) + " is outside [0, duration_s]");
    switch (d.kind) {
      case DisturbanceKind::SlowEdge:
        if (!s.graph.edge_index(d.edge_id)) throw ScenarioError("SlowEdge names unknown edge '" + d.edge_id + "'");
        if (!(d.factor > 0.0 && d.factor <= 1.0)) throw ScenarioError("SlowEdge factor must be in (0, 1]");
        break;
      case DisturbanceKind::StopVehicle:
        if (!labels.contains(d.vehicle)) throw ScenarioError("StopVehicle names unknown vehicle '" + d.vehicle + "'");
        if (!(d.duration_s > 0.0)) throw ScenarioError("StopVehicle duration_s must be positive");
        break;
      case DisturbanceKind::InjectEvent:
        try {
          geomessenger::event_from_json(absolute_event(d.event, s.start_time));
        } catch (const cits::ValidationError& e) {
          throw ScenarioError(std::string("InjectEvent: ") + e.what());
        }
        break;
    }
  }
}

// -- report --------------------------------------------------------------------

const VehicleResult* SimReport::vehicle(std::string_view label) const {
  for (const auto& v : vehicles)
    if (v.label == label) return &v;
  return nullptr;
}

json to_json(const SimReport& r) {
  json vehicles = json::array();
  for (const auto& v : r.vehicles) {
    json j{{"label", v.label},
           {"vehicle_id", v.vehicle_id},
           {"trip_id", v.trip_id},
           {"depart_s", v.depart_s},
           {"arrival_s", opt(v.arrival_s)},
           {"completed_s", opt(v.completed_s)},
           {"predicted_arrival_s", opt(v.predicted_arrival_s)},
           {"eta_error_s", opt(v.eta_error_s)},
           {"route_changes", v.route_changes},
           {"odometer_m", v.odometer_m},
           {"route_distance_m", v.route_distance_m},
           {"initial_route", v.initial_route},
           {"final_route", v.final_route}};
    j["statistics"] = v.statistics ? fleet::to_json(*v.statistics) : json(nullptr);
    vehicles.push_back(std::move(j));
  }
  json messages = json::array();
  for (const auto& m : r.messages)
    messages.push_back(json{{"t", m.t}, {"direction", m.direction}, {"message", cits::to_json(m.message)}});
  json crossings = json::array();
  for (const auto& c : r.crossings)
    crossings.push_back(json{{"label", c.label},
                             {"intersection_id", c.intersection_id},
                             {"approach_id", c.approach_id},
                             {"t", c.t},
                             {"phase", c.phase == signal::Phase::Green ? "Green" : "Red"}});
  json priority = json::array();
  for (const auto& p : r.priority)
    priority.push_back(json{{"label", p.label},
                            {"intersection_id", p.intersection_id},
                            {"approach_id", p.approach_id},
                            {"requested_at", p.requested_at},
                            {"predicted_arrival", p.predicted_arrival},
                            {"verdict", p.verdict == cits::PriorityVerdict::Granted ? "Granted" : "Denied"}});
  return json{{"scenario", r.scenario},   {"seed", r.seed},         {"start_time", r.start_time},
              {"duration_s", r.duration_s}, {"dt_s", r.dt_s},         {"vehicles", vehicles},
              {"crossings", crossings},   {"priority", priority},   {"fleet_events", r.fleet_events},
              {"messages", messages}};
}

// -- simulation ------------------------------------------------------------------

Simulation::Simulation(Scenario scenario)
    : scenario_(std::move(scenario)),
      truth_(scenario_.graph),
      ids_(scenario_.seed ^ 0x9e3779b97f4a7c15ULL),
      rng_(scenario_.seed) {
  validate(scenario_);
  PlatformConfig config = scenario_.platform;
  config.seed = scenario_.seed;
  config.log_path.clear();
  config.snapshot_path.clear();
  platform_ = std::make_unique<Platform>(scenario_.graph, scenario_.plans, config, scenario_.gazetteer);
  platform_->set_clock([this] { return abs_time(now_rel_); });
  hub_sub_ = platform_->hub().subscribe();

  for (const auto& plan : scenario_.plans) {
    std::optional<std::pair<double, std::string>> best;
    for (const auto& n : truth_.nodes()) {
      const double d = haversine_distance(n.position, plan.position);
      if (!best || d < best->first) best = {d, n.id};
    }
    if (!best || best->first > 50.0)
      throw ScenarioError("signal plan " + plan.intersection_id + " is not at a graph node");
    signal_at_node_[best->second] = plan.intersection_id;
  }

  platform_->broker().subscribe("sim", platform_->coverage(), {"HAZARD", "IVIM", "PRIORITY"}, abs_time(0.0),
                                [this](const cits::Message& m, const broker::Subscription&) {
                                  inbox_.push_back(m);
                                  report_.messages.push_back(LogEntry{now_rel_, "received", m});
                                });

  auto specs = scenario_.vehicles;
  std::sort(specs.begin(), specs.end(), [](const auto& a, const auto& b) { return a.label < b.label; });
  auto& fleet = platform_->fleet();
  for (auto& spec : specs) {
    SimVehicle v;
    v.driver_id = fleet.register_driver("driver " + spec.label, "", abs_time(0.0));
    v.vehicle_id = fleet.register_vehicle(spec.plate, "", abs_time(0.0));
    fleet.assign_driver(v.vehicle_id, v.driver_id, abs_time(0.0));
    v.result.label = spec.label;
    v.result.vehicle_id = v.vehicle_id;
    v.spec = std::move(spec);
    vehicles_.push_back(std::move(v));
  }
  applied_.assign(scenario_.disturbances.size(), false);

  report_.scenario = scenario_.name;
  report_.seed = scenario_.seed;
  report_.start_time = scenario_.start_time;
  report_.duration_s = scenario_.duration_s;
  report_.dt_s = scenario_.dt_s;
}

Simulation::~Simulation() {
  if (platform_ && hub_sub_) platform_->hub().unsubscribe(hub_sub_);
}

const SimVehicle& Simulation::vehicle(std::string_view label) const {
  for (const auto& v : vehicles_)
    if (v.spec.label == label) return v;
  throw ScenarioError("unknown vehicle " + std::string(label));
}

bool Simulation::done() const { return t_ >= scenario_.duration_s - kEps; }

std::optional<std::pair<std::string, const signal::Approach*>> Simulation::control_at_end(const SimVehicle& v) const {
  if (v.edge_index + 1 >= v.route.size()) return std::nullopt;
  const auto& e = truth_.edge(v.route[v.edge_index]);
  auto it = signal_at_node_.find(e.to);
  if (it == signal_at_node_.end()) return std::nullopt;
  const auto* a = platform_->signals().plan(it->second).approach(e.id);
  if (!a) return std::nullopt;
  return std::make_pair(it->second, a);
}

double Simulation::target_speed(const SimVehicle& v, double time) const {
  double speed = truth_.edge(v.route[v.edge_index]).current_speed;
  if (v.spec.behavior.obeys_speed_advisory && !speed_advisories_.empty()) {
    const GeoPoint here = road::position_of(truth_, {v.route[v.edge_index], v.offset});
    const double now = abs_time(time);
    for (const auto& m : speed_advisories_) {
      if (now < m.valid_from || now > m.valid_to || !cits::is_relevant(m.zone, here)) continue;
      speed = std::min(speed, std::get<cits::payload::SpeedAdvice>(m.payload).advised_speed);
    }
  }
  if (v.glosa_cap && v.spec.behavior.obeys_glosa) speed = std::min(speed, *v.glosa_cap);
  return std::max(speed, 0.01);
}

void Simulation::depart(SimVehicle& v) {
  auto& fleet = platform_->fleet();
  std::vector<fleet::StopRequest> stops;
  for (std::size_t i = 0; i < v.spec.stops.size(); ++i) {
    const auto& s = v.spec.stops[i];
    stops.push_back(fleet::StopRequest{v.spec.label + "-s" + std::to_string(i + 1), s.location, s.address, s.kind});
  }
  const double now = abs_time(t_);
  const auto created = fleet.create_trip(v.vehicle_id, stops, v.spec.depart, now);
  v.trip_id = created.trip_id;
  fleet.start_trip(v.trip_id, now);
  const auto trip = fleet.trip(v.trip_id);
  v.route = fleet::flatten_legs(trip.legs);
  v.edge_index = 0;
  v.offset = trip.legs.front().start_offset;
  for (const auto& leg : trip.legs) v.stop_anchors.push_back({leg.edge_ids.back(), leg.end_offset});
  v.active = true;
  v.result.trip_id = v.trip_id;
  v.result.depart_s = t_;
  v.result.initial_route = v.route;
  const auto etas = fleet.eta(v.trip_id, now);
  if (!etas.empty()) v.result.predicted_arrival_s = etas.back().eta - scenario_.start_time;
  v.start_offset = v.offset;
  emit_cam(v);
}

void Simulation::emit_cam(SimVehicle& v) {
  const std::string& edge = v.route[v.edge_index];
  GeoPoint p = road::position_of(truth_, {edge, v.offset});
  if (v.spec.gps_noise_m > 0.0) {
    const double north = gaussian(rng_) * v.spec.gps_noise_m;
    const double east = gaussian(rng_) * v.spec.gps_noise_m;
    p.lat += rad2deg(north / kEarthRadiusM);
    p.lon += rad2deg(east / (kEarthRadiusM * std::cos(deg2rad(p.lat))));
  }
  cits::CamMessage cam;
  cam.station_id = v.vehicle_id;
  cam.vehicle_id = v.vehicle_id;
  cam.trip_id = v.trip_id;
  cam.driver_id = v.driver_id;
  cam.timestamp = abs_time(now_rel_);
  cam.position = p;
  cam.speed = v.speed;
  cam.heading = road::heading_of(truth_, edge);
  cam = std::get<cits::CamMessage>(cits::canonicalize(cits::Message{cam}));
  v.last_cam = now_rel_;
  report_.messages.push_back(LogEntry{now_rel_, "sent", cam});
  emitted_.push_back(cam);
  platform_->ingest_cam(cam);
  platform_->broker().publish(cits::Message{cam}, cam.timestamp);
}

void Simulation::consult_approach(SimVehicle& v, double time) {
  v.consulted_index = v.edge_index;
  const auto ctl = control_at_end(v);
  if (!ctl) return;
  const auto& [intersection, approach] = *ctl;
  const auto& e = truth_.edge(v.route[v.edge_index]);
  const double distance = std::max(0.0, e.length - v.offset);
  const double cruise = target_speed(v, time);
  const double now = abs_time(time);
  now_rel_ = time;
  if (v.spec.behavior.requests_priority) {
    cits::PriorityMessage req;
    req.msg_id = ids_.next();
    req.direction = cits::PriorityDirection::Request;
    req.vehicle_id = v.vehicle_id;
    req.intersection_id = intersection;
    req.approach_id = approach->id;
    req.predicted_arrival = now + distance / cruise;
    req = std::get<cits::PriorityMessage>(cits::canonicalize(cits::Message{req}));
    report_.messages.push_back(LogEntry{time, "sent", req});
    const auto resp = platform_->signals().request_priority(req, now);
    report_.priority.push_back(PriorityOutcome{v.spec.label, intersection, approach->id, time, req.predicted_arrival,
                                               resp.verdict.value_or(cits::PriorityVerdict::Denied)});
    if (resp.verdict == cits::PriorityVerdict::Granted) {
      v.granted = true;
      return;
    }
  }
  if (v.spec.behavior.obeys_glosa && distance > 0.0) {
    const double vmin = std::min(scenario_.glosa_min_speed_ms, cruise);
    const auto advice = platform_->signals().glosa(intersection, approach->id, distance, now, vmin, cruise);
    if (advice && *advice < cruise - kEps) v.glosa_cap = *advice;
  }
}

void Simulation::reach_stop(SimVehicle& v, double time) {
  const double dwell = v.spec.stops.empty() ? 0.0 : [&] {
    // Stop ids carry the scenario index: "<label>-s<k>".
    const auto trip = platform_->fleet().trip(v.trip_id);
    std::size_t open = 0;
    for (const auto& s : trip.stops) {
      if (s.status == fleet::StopStatus::Done) continue;
      if (open++ == 0) {
        const auto k = std::stoul(s.stop_id.substr(s.stop_id.rfind("-s") + 2));
        return v.spec.stops.at(k - 1).dwell_s;
      }
    }
    return 0.0;
  }();
  if (v.next_stop + 1 == v.stop_anchors.size()) {
    v.result.arrival_s = time;
    if (v.result.predicted_arrival_s) v.result.eta_error_s = time - *v.result.predicted_arrival_s;
  }
  v.speed = 0.0;
  v.dwell_until = time + dwell;
}

void Simulation::finish_dwell(SimVehicle& v, double time) {
  v.dwell_until.reset();
  now_rel_ = time;
  auto& fleet = platform_->fleet();
  const auto trip = fleet.trip(v.trip_id);
  const auto next = std::find_if(trip.stops.begin(), trip.stops.end(),
                                 [](const fleet::TaskStop& s) { return s.status != fleet::StopStatus::Done; });
  if (next != trip.stops.end()) fleet.complete_stop(v.trip_id, next->stop_id, abs_time(time));
  ++v.next_stop;
  if (v.next_stop >= v.stop_anchors.size()) {
    v.result.statistics = fleet.complete_trip(v.trip_id, abs_time(time));
    v.result.completed_s = time;
    v.finished = true;
    v.active = false;
    v.speed = 0.0;
  }
}

void Simulation::advance(SimVehicle& v, double dt) {
  double time = t_;
  const double end = t_ + dt;
  for (int guard = 0; time < end - kEps && !v.finished; ++guard) {
    if (guard > 100000) throw ScenarioError("vehicle " + v.spec.label + " made no progress");
    const double left = end - time;
    if (v.held_until && time < *v.held_until - kEps) {
      time += std::min(left, *v.held_until - time);
      v.speed = 0.0;
      continue;
    }
    v.held_until.reset();
    if (v.dwell_until) {
      if (time < *v.dwell_until - kEps) {
        time += std::min(left, *v.dwell_until - time);
        v.speed = 0.0;
        continue;
      }
      time = std::max(time, *v.dwell_until);
      finish_dwell(v, time);
      continue;
    }
    if (v.waiting_at_line) {
      const auto ctl = control_at_end(v);
      if (ctl) {
        const auto s = platform_->signals().state(ctl->first, ctl->second->id, abs_time(time));
        if (s.phase == signal::Phase::Red) {
          time += std::min(left, std::max(s.seconds_until_change, kEps));
          v.speed = 0.0;
          continue;
        }
      }
      v.waiting_at_line = false;
      cross(v, time);
      continue;
    }

    const auto& e = truth_.edge(v.route[v.edge_index]);
    const auto ctl = control_at_end(v);
    const bool pending_consult = ctl && v.consulted_index != v.edge_index;
    if (pending_consult && e.length - v.offset <= scenario_.glosa_range_m + kEps) {
      consult_approach(v, time);
      continue;
    }

    enum class Next { EdgeEnd, Consult, Stop } next = Next::EdgeEnd;
    double target = e.length;
    if (pending_consult) {
      target = e.length - scenario_.glosa_range_m;
      next = Next::Consult;
    }
    if (v.next_stop < v.stop_anchors.size()) {
      const auto& a = v.stop_anchors[v.next_stop];
      if (a.edge_id == e.id && a.offset >= v.offset - kEps && a.offset <= target) {
        target = a.offset;
        next = Next::Stop;
      }
    }
    const double speed = target_speed(v, time);
    const double distance = std::max(0.0, target - v.offset);
    const double need = distance / speed;
    v.speed = speed;
    if (need > left) {
      v.offset += speed * left;
      v.result.odometer_m += speed * left;
      time = end;
      break;
    }
    v.offset = std::max(v.offset, target);
    v.result.odometer_m += distance;
    time += need;
    switch (next) {
      case Next::Consult:
        consult_approach(v, time);
        break;
      case Next::Stop:
        reach_stop(v, time);
        break;
      case Next::EdgeEnd:
        if (v.edge_index + 1 >= v.route.size()) {
          // Route ran out without reaching the remaining stops.
          v.speed = 0.0;
          v.finished = true;
          v.active = false;
          break;
        }
        if (ctl && platform_->signals().state(ctl->first, ctl->second->id, abs_time(time)).phase == signal::Phase::Red) {
          v.waiting_at_line = true;
          v.speed = 0.0;
          break;
        }
        cross(v, time);
        break;
    }
  }
}

void Simulation::cross(SimVehicle& v, double time) {
  if (const auto ctl = control_at_end(v)) {
    const auto s = platform_->signals().state(ctl->first, ctl->second->id, abs_time(time));
    report_.crossings.push_back(Crossing{v.spec.label, ctl->first, ctl->second->id, time, s.phase});
  }
  ++v.edge_index;
  v.offset = 0.0;
  v.glosa_cap.reset();
  v.granted = false;
}

void Simulation::apply_disturbance(const Disturbance& d) {
  now_rel_ = d.at_s;
  switch (d.kind) {
    case DisturbanceKind::SlowEdge: {
      const double ff = truth_.edge(d.edge_id).free_flow_speed;
      truth_.set_current_speed(d.edge_id, d.factor * ff);
      break;
    }
    case DisturbanceKind::StopVehicle:
      for (auto& v : vehicles_)
        if (v.spec.label == d.vehicle) v.held_until = std::max(v.held_until.value_or(0.0), d.at_s + d.duration_s);
      break;
    case DisturbanceKind::InjectEvent:
      platform_->geomessenger().register_event(
          geomessenger::event_from_json(absolute_event(d.event, scenario_.start_time)), abs_time(d.at_s));
      break;
  }
}

void Simulation::deliver_inbox() {
  auto inbox = std::move(inbox_);
  inbox_.clear();
  for (const auto& m : inbox) {
    const auto* ivim = std::get_if<cits::IvimMessage>(&m);
    if (!ivim) continue;
    if (ivim->kind == cits::IvimKind::SpeedAdvisory) {
      speed_advisories_.push_back(*ivim);
      continue;
    }
    if (ivim->kind != cits::IvimKind::RerouteAdvisory) continue;
    const auto& payload = std::get<cits::payload::Reroute>(ivim->payload);
    for (auto& v : vehicles_) {
      if (v.vehicle_id != payload.vehicle_id || !v.active || !v.spec.behavior.obeys_reroute) continue;
      const GeoPoint here = road::position_of(truth_, {v.route[v.edge_index], v.offset});
      if (!cits::is_relevant(ivim->zone, here)) continue;
      const auto& current = v.route[v.edge_index];
      const auto it = std::find(payload.edge_ids.begin(), payload.edge_ids.end(), current);
      if (it == payload.edge_ids.end()) continue;
      std::vector<std::string> route(v.route.begin(), v.route.begin() + static_cast<std::ptrdiff_t>(v.edge_index) + 1);
      route.insert(route.end(), it + 1, payload.edge_ids.end());
      if (route == v.route) continue;
      v.route = std::move(route);
      ++v.result.route_changes;
    }
  }
}

std::vector<cits::CamMessage> Simulation::step(double dt) {
  if (!(dt > 0.0)) throw ScenarioError("step dt must be positive");
  emitted_.clear();
  const double end = t_ + dt;
  while (t_ < end - kEps) {
    now_rel_ = t_;
    for (std::size_t i = 0; i < scenario_.disturbances.size(); ++i) {
      if (applied_[i] || scenario_.disturbances[i].at_s > t_ + kEps) continue;
      applied_[i] = true;
      apply_disturbance(scenario_.disturbances[i]);
    }
    now_rel_ = t_;
    for (auto& v : vehicles_)
      if (!v.active && !v.finished && v.trip_id.empty() && v.spec.depart_s <= t_ + kEps) depart(v);
    deliver_inbox();
    double seg_end = end;
    for (std::size_t i = 0; i < scenario_.disturbances.size(); ++i)
      if (!applied_[i] && scenario_.disturbances[i].at_s > t_ + kEps)
        seg_end = std::min(seg_end, scenario_.disturbances[i].at_s);
    for (auto& v : vehicles_)
      if (v.active) advance(v, seg_end - t_);
    t_ = seg_end;
  }
  t_ = end;
  now_rel_ = t_;
  for (auto& v : vehicles_)
    if (v.active && t_ - v.last_cam >= scenario_.cam_interval_s - kEps) emit_cam(v);

  const auto second = static_cast<long long>(std::floor(t_ + kEps));
  if (!last_tick_second_ || second > *last_tick_second_) {
    last_tick_second_ = second;
    platform_->tick(abs_time(t_));
  }
  while (auto e = hub_sub_->pop(0.0)) report_.fleet_events.push_back(std::move(*e));
  return emitted_;
}

SimReport Simulation::run() {
  while (!done()) step(std::min(scenario_.dt_s, scenario_.duration_s - t_));
  return report();
}

SimReport Simulation::report() const {
  SimReport r = report_;
  for (const auto& v : vehicles_) {
    VehicleResult res = v.result;
    res.final_route = v.route;
    double walked = 0.0;
    if (!v.route.empty()) {
      for (std::size_t i = 0; i < v.edge_index; ++i) walked += truth_.edge(v.route[i]).length;
      walked += v.offset - v.start_offset;
    }
    res.route_distance_m = walked;
    r.vehicles.push_back(std::move(res));
  }
  return r;
}

SimReport run(Scenario scenario) {
  Simulation sim(std::move(scenario));
  return sim.run();
}

}  // namespace ctmaas::sim
