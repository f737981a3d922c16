#include "ctmaas/api.hpp"

#include <cmath>

#include <httplib.h>

namespace ctmaas::api {

using nlohmann::json;
using auth::Role;

namespace {

class Forbidden : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};
class NotFound : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

const std::set<Role> kFM{Role::FleetManager};
const std::set<Role> kTM{Role::TrafficManager};
const std::set<Role> kDriver{Role::Driver};
const std::set<Role> kFmDriver{Role::FleetManager, Role::Driver};
const std::set<Role> kFmTm{Role::FleetManager, Role::TrafficManager};
const std::set<Role> kAll{Role::FleetManager, Role::TrafficManager, Role::Driver};

std::string req_string(const json& j, const std::string& field) {
  if (!j.is_object() || !j.contains(field) || !j[field].is_string() || j[field].get<std::string>().empty())
    throw BadRequest(field, field + " must be a non-empty string");
  return j[field].get<std::string>();
}

std::string opt_string(const json& j, const std::string& field, const std::string& fallback = "") {
  if (!j.is_object() || !j.contains(field) || j[field].is_null()) return fallback;
  if (!j[field].is_string()) throw BadRequest(field, field + " must be a string");
  return j[field].get<std::string>();
}

double req_number(const json& j, const std::string& field) {
  if (!j.is_object() || !j.contains(field) || !j[field].is_number()) throw BadRequest(field, field + " must be a number");
  return j[field].get<double>();
}

GeoPoint req_point(const json& j, const std::string& field) {
  if (!j.is_object() || !j.contains(field) || !j[field].is_object())
    throw BadRequest(field, field + " must be an object with lat and lon");
  const auto& p = j[field];
  GeoPoint g{req_number(p, "lat"), req_number(p, "lon"), p.value("alt", 0.0)};
  if (!is_valid(g)) throw BadRequest(field, field + " is not a valid WGS84 position");
  return g;
}

double query_number(const Call& c, const std::string& key) {
  auto it = c.query.find(key);
  if (it == c.query.end()) throw BadRequest(key, "query parameter " + key + " is required");
  try {
    std::size_t used = 0;
    const double v = std::stod(it->second, &used);
    if (used != it->second.size() || !std::isfinite(v)) throw std::invalid_argument("trailing");
    return v;
  } catch (const std::exception&) {
    throw BadRequest(key, "query parameter " + key + " must be a number");
  }
}

std::string query_string(const Call& c, const std::string& key) {
  auto it = c.query.find(key);
  if (it == c.query.end() || it->second.empty()) throw BadRequest(key, "query parameter " + key + " is required");
  return it->second;
}

bool is_driver(const Call& c) { return c.principal && c.principal->user.role == Role::Driver; }

void require_own_trip(const Call& c, const fleet::Trip& t) {
  if (is_driver(c) && c.principal->user.driver_id != t.driver_id)
    throw Forbidden("drivers may only act on their own trips");
}

fleet::Trip own_trip(Platform& p, const Call& c) {
  auto t = p.fleet().trip(c.params.at(0));
  require_own_trip(c, t);
  return t;
}

Response ok(json body) { return Response{200, std::move(body)}; }
Response created(json body) { return Response{201, std::move(body)}; }

json token_json(const auth::AuthToken& t, const auth::User& u) {
  return json{{"token", t.token},
              {"user_id", t.user_id},
              {"role", std::string(auth::to_string(u.role))},
              {"issued_at", t.issued_at},
              {"expires_at", t.expires_at}};
}

json graph_json(const road::RoadGraph& g) {
  json nodes = json::array(), edges = json::array();
  for (const auto& n : g.nodes()) nodes.push_back(json{{"id", n.id}, {"lat", n.position.lat}, {"lon", n.position.lon}});
  for (const auto& e : g.edges())
    edges.push_back(json{{"id", e.id},
                         {"from", e.from},
                         {"to", e.to},
                         {"length_m", e.length},
                         {"free_flow_speed_ms", e.free_flow_speed},
                         {"current_speed_ms", e.current_speed}});
  return json{{"nodes", nodes}, {"edges", edges}};
}

fleet::StopRequest parse_stop(const json& s, std::size_t index) {
  const std::string where = "stops[" + std::to_string(index) + "]";
  if (!s.is_object()) throw BadRequest(where, where + " must be an object");
  fleet::StopRequest r;
  r.stop_id = opt_string(s, "stop_id");
  const std::string kind = opt_string(s, "kind", "Delivery");
  auto k = fleet::task_kind_from(kind);
  if (!k) throw BadRequest(where + ".kind", where + ".kind must be Pickup, Delivery or Maintenance");
  r.kind = *k;
  if (s.contains("lat") || s.contains("lon")) {
    GeoPoint p{req_number(s, "lat"), req_number(s, "lon"), 0.0};
    if (!is_valid(p)) throw BadRequest(where, where + " has an invalid position");
    r.location = p;
  } else if (s.contains("address")) {
    r.address = req_string(s, "address");
  } else {
    throw BadRequest(where, where + " needs lat/lon or an address");
  }
  return r;
}

std::vector<Endpoint> build_routes() {
  std::vector<Endpoint> r;
  auto add = [&](std::string method, std::string path, std::string regex, std::set<Role> roles, bool mutating,
                 Handler h, StreamKind stream = StreamKind::None) {
    r.push_back(Endpoint{std::move(method), std::move(path), std::regex(regex), std::move(roles), false, mutating,
                         stream, std::move(h)});
  };
  const std::string id = "([^/]+)";

  r.push_back(Endpoint{"POST", "/auth/login", std::regex("/auth/login"), {}, true, false, StreamKind::None,
                       [](Platform& p, const Call& c) {
                         const auto uid = req_string(c.body, "user_id");
                         const auto tok = p.auth().login(uid, req_string(c.body, "credential"), c.now);
                         return ok(token_json(tok, *p.auth().user(uid)));
                       }});

  add("GET", "/me", "/me", kAll, false, [](Platform&, const Call& c) {
    const auto& u = c.principal->user;
    json j{{"user_id", u.user_id}, {"display_name", u.display_name}, {"role", std::string(auth::to_string(u.role))}};
    j["driver_id"] = u.driver_id ? json(*u.driver_id) : json(nullptr);
    j["expires_at"] = c.principal->token.expires_at;
    return ok(j);
  });

  add("GET", "/graph", "/graph", kAll, false,
      [](Platform& p, const Call&) { return ok(p.graph().read([](const road::RoadGraph& g) { return graph_json(g); })); });

  // -- fleet registry
  add("GET", "/drivers", "/drivers", kFM, false, [](Platform& p, const Call&) {
    json out = json::array();
    for (const auto& d : p.fleet().drivers()) out.push_back(fleet::to_json(d));
    return ok(out);
  });
  add("POST", "/drivers", "/drivers", kFM, true, [](Platform& p, const Call& c) {
    const auto did = p.fleet().register_driver(req_string(c.body, "name"), opt_string(c.body, "phone"), c.now);
    return created(fleet::to_json(p.fleet().driver(did)));
  });
  add("GET", "/vehicles", "/vehicles", kFM, false, [](Platform& p, const Call&) {
    json out = json::array();
    for (const auto& v : p.fleet().vehicles()) out.push_back(fleet::to_json(v));
    return ok(out);
  });
  add("POST", "/vehicles", "/vehicles", kFM, true, [](Platform& p, const Call& c) {
    const auto vid = p.fleet().register_vehicle(req_string(c.body, "plate"), opt_string(c.body, "color"), c.now);
    return created(fleet::to_json(p.fleet().vehicle(vid)));
  });
  add("POST", "/vehicles/{id}/driver", "/vehicles/" + id + "/driver", kFM, true, [](Platform& p, const Call& c) {
    p.fleet().assign_driver(c.params.at(0), req_string(c.body, "driver_id"), c.now);
    return ok(fleet::to_json(p.fleet().vehicle(c.params.at(0))));
  });

  // -- trips
  add("GET", "/trips", "/trips", kFM, false, [](Platform& p, const Call&) {
    json out = json::array();
    for (const auto& t : p.fleet().trips()) out.push_back(trip_view(p, t));
    return ok(out);
  });
  add("POST", "/trips", "/trips", kFM, true, [](Platform& p, const Call& c) {
    const auto vid = req_string(c.body, "vehicle_id");
    const auto depart = req_point(c.body, "depart");
    if (!c.body.contains("stops") || !c.body["stops"].is_array()) throw BadRequest("stops", "stops must be an array");
    std::vector<fleet::StopRequest> stops;
    for (std::size_t i = 0; i < c.body["stops"].size(); ++i) stops.push_back(parse_stop(c.body["stops"][i], i));
    return created(trip_view(p, p.fleet().create_trip(vid, stops, depart, c.now)));
  });
  add("GET", "/trips/{id}", "/trips/" + id, kFmDriver, false,
      [](Platform& p, const Call& c) { return ok(trip_view(p, own_trip(p, c))); });
  add("POST", "/trips/{id}/start", "/trips/" + id + "/start", kFmDriver, true, [](Platform& p, const Call& c) {
    own_trip(p, c);
    p.fleet().start_trip(c.params.at(0), c.now);
    return ok(trip_view(p, p.fleet().trip(c.params.at(0))));
  });
  add("GET", "/trips/{id}/eta", "/trips/" + id + "/eta", kFmDriver, false, [](Platform& p, const Call& c) {
    own_trip(p, c);
    json rows = json::array();
    for (const auto& e : p.fleet().eta(c.params.at(0), c.now)) rows.push_back(fleet::to_json(e));
    return ok(json{{"trip_id", c.params.at(0)}, {"now", c.now}, {"stops", rows}});
  });
  add("POST", "/trips/{id}/reroute-check", "/trips/" + id + "/reroute-check", kFM, true,
      [](Platform& p, const Call& c) {
        auto proposal = p.fleet().maybe_reroute(c.params.at(0), c.now);
        if (!proposal) return ok(json{{"result", "NoChange"}});
        return ok(json{{"result", "Proposal"}, {"proposal", fleet::to_json(*proposal)}});
      });
  add("POST", "/trips/{id}/driver-reroute", "/trips/" + id + "/driver-reroute", kDriver, true,
      [](Platform& p, const Call& c) {
        own_trip(p, c);
        fleet::DriverRerouteRequest req;
        if (c.body.contains("edge_ids")) {
          if (!c.body["edge_ids"].is_array()) throw BadRequest("edge_ids", "edge_ids must be an array of strings");
          std::vector<std::string> edges;
          for (const auto& e : c.body["edge_ids"]) {
            if (!e.is_string()) throw BadRequest("edge_ids", "edge_ids must be an array of strings");
            edges.push_back(e.get<std::string>());
          }
          req.edge_ids = std::move(edges);
        }
        if (c.body.contains("next_stop_id")) req.next_stop_id = req_string(c.body, "next_stop_id");
        p.fleet().driver_reroute(c.params.at(0), req, c.now);
        return ok(trip_view(p, p.fleet().trip(c.params.at(0))));
      });
  add("POST", "/trips/{id}/stops/{stop_id}/done", "/trips/" + id + "/stops/" + id + "/done", kFmDriver, true,
      [](Platform& p, const Call& c) {
        own_trip(p, c);
        p.fleet().complete_stop(c.params.at(0), c.params.at(1), c.now);
        return ok(trip_view(p, p.fleet().trip(c.params.at(0))));
      });
  add("POST", "/trips/{id}/complete", "/trips/" + id + "/complete", kFmDriver, true, [](Platform& p, const Call& c) {
    own_trip(p, c);
    return ok(fleet::to_json(p.fleet().complete_trip(c.params.at(0), c.now)));
  });
  add("POST", "/trips/{id}/abort", "/trips/" + id + "/abort", kFM, true, [](Platform& p, const Call& c) {
    p.fleet().abort_trip(c.params.at(0), c.now);
    return ok(trip_view(p, p.fleet().trip(c.params.at(0))));
  });
  add("GET", "/trips/{id}/statistics", "/trips/" + id + "/statistics", kFM, false, [](Platform& p, const Call& c) {
    p.fleet().trip(c.params.at(0));
    auto s = p.fleet().statistics(c.params.at(0));
    if (!s) throw NotFound("trip " + c.params.at(0) + " has no statistics yet");
    return ok(fleet::to_json(*s));
  });
  add("GET", "/statistics", "/statistics", kFM, false,
      [](Platform& p, const Call&) { return ok(fleet::to_json(p.fleet().aggregates())); });

  // -- reroute approval
  add("GET", "/proposals", "/proposals", kFM, false, [](Platform& p, const Call& c) {
    json out = json::array();
    for (const auto& pr : p.fleet().proposals(c.now)) out.push_back(fleet::to_json(pr));
    return ok(out);
  });
  add("POST", "/proposals/{id}/approve", "/proposals/" + id + "/approve", kFM, true,
      [](Platform& p, const Call& c) { return ok(trip_view(p, p.fleet().approve_proposal(c.params.at(0), c.now))); });
  add("POST", "/proposals/{id}/decline", "/proposals/" + id + "/decline", kFM, true, [](Platform& p, const Call& c) {
    p.fleet().decline_proposal(c.params.at(0));
    return ok(json{{"proposal_id", c.params.at(0)}, {"declined", true}});
  });

  // -- vehicle telemetry
  add("POST", "/cam", "/cam", kDriver, true, [](Platform& p, const Call& c) {
    const auto msg = cits::from_json(c.body);
    const auto* cam = std::get_if<cits::CamMessage>(&msg);
    if (!cam) throw BadRequest("msg_type", "body must be a CAM");
    const auto v = p.fleet().vehicle(cam->vehicle_id);
    if (!v.assigned_driver || v.assigned_driver != c.principal->user.driver_id)
      throw Forbidden("drivers may only report their own vehicle");
    const bool accepted = p.fleet().ingest_cam(*cam);
    return ok(json{{"accepted", accepted}});
  });

  // -- traffic management
  add("GET", "/tmc/exchange", "/tmc/exchange", kFmTm, false, [](Platform& p, const Call& c) {
    return ok(fleet::to_json(p.fleet().tmc_exchange(query_number(c, "from"), query_number(c, "to"))));
  });
  add("POST", "/tmc/events", "/tmc/events", kFmTm, true, [](Platform& p, const Call& c) {
    const json events = c.body.is_object() && c.body.contains("events") ? c.body["events"] : c.body;
    json out = json::array();
    for (const auto& r : p.fleet().tmc_ingest(events, c.now))
      out.push_back(json{{"index", r.index}, {"accepted", r.accepted}, {"event_id", r.event_id}, {"errors", r.errors}});
    return ok(json{{"results", out}});
  });
  add("GET", "/events", "/events", kTM, false, [](Platform& p, const Call&) {
    json out = json::array();
    for (const auto& e : p.geomessenger().active_events()) out.push_back(geomessenger::to_json(e));
    return ok(out);
  });
  add("POST", "/events", "/events", kTM, true, [](Platform& p, const Call& c) {
    auto e = geomessenger::event_from_json(c.body);
    e.source = geomessenger::EventSource::Manual;
    const auto eid = p.geomessenger().register_event(std::move(e), c.now);
    return created(json{{"event_id", eid}});
  });
  add("DELETE", "/events/{id}", "/events/" + id, kTM, true, [](Platform& p, const Call& c) {
    if (!p.geomessenger().cancel_event(c.params.at(0))) throw NotFound("unknown event " + c.params.at(0));
    return ok(json{{"event_id", c.params.at(0)}, {"cancelled", true}});
  });

  // -- signals
  add("GET", "/signals", "/signals", kFmTm, false, [](Platform& p, const Call&) {
    json out = json::array();
    for (const auto& plan : p.signals().plans()) out.push_back(signal::to_json(plan));
    return ok(json{{"intersections", out}});
  });
  add("GET", "/signals/{id}/state", "/signals/" + id + "/state", kAll, false, [](Platform& p, const Call& c) {
    const auto approach = query_string(c, "approach");
    const double t = c.query.contains("t") ? query_number(c, "t") : c.now;
    const auto s = p.signals().state(c.params.at(0), approach, t);
    json j{{"intersection_id", c.params.at(0)},
           {"approach_id", approach},
           {"t", t},
           {"phase", s.phase == signal::Phase::Green ? "Green" : "Red"}};
    j["seconds_until_change"] = std::isfinite(s.seconds_until_change) ? json(s.seconds_until_change) : json(nullptr);
    return ok(j);
  });
  add("GET", "/signals/{id}/glosa", "/signals/" + id + "/glosa", kAll, false, [](Platform& p, const Call& c) {
    const auto approach = query_string(c, "approach");
    const auto v = p.signals().glosa(c.params.at(0), approach, query_number(c, "distance"), c.now,
                                     query_number(c, "v_min"), query_number(c, "v_max"));
    json j{{"intersection_id", c.params.at(0)}, {"approach_id", approach}};
    j["advised_speed"] = v ? json(*v) : json(nullptr);
    return ok(j);
  });
  add("POST", "/priority", "/priority", kDriver, true, [](Platform& p, const Call& c) {
    const auto msg = cits::from_json(c.body);
    const auto* req = std::get_if<cits::PriorityMessage>(&msg);
    if (!req) throw BadRequest("msg_type", "body must be a PRIORITY request");
    const auto v = p.fleet().vehicle(req->vehicle_id);
    if (!v.assigned_driver || v.assigned_driver != c.principal->user.driver_id)
      throw Forbidden("drivers may only request priority for their own vehicle");
    return ok(cits::to_json(cits::Message{p.signals().request_priority(*req, c.now)}));
  });

  // -- streams
  add("GET", "/stream/positions", "/stream/positions", kFM, false, {}, StreamKind::Positions);
  add("GET", "/stream/advisories", "/stream/advisories", kDriver, false, {}, StreamKind::Advisories);
  return r;
}

json error_body(const std::string& kind, const std::string& message, const std::string& subject = "") {
  json j{{"error", kind}, {"message", message}};
  if (!subject.empty()) j["subject"] = subject;
  return j;
}

}  // namespace

const std::vector<Endpoint>& route_table() {
  static const std::vector<Endpoint> routes = build_routes();
  return routes;
}

json trip_view(Platform& platform, const fleet::Trip& trip) {
  json j = fleet::to_json(trip, false);
  const auto route = platform.graph().read([&](const road::RoadGraph& g) { return fleet::remaining_route(g, trip); });
  j["route"] = json{{"edge_ids", route.edge_ids}, {"total_length", route.total_length}, {"total_time", route.total_time}};
  j["trajectory_points"] = trip.trajectory.size();
  return j;
}

Dispatched dispatch(Platform& platform, const std::string& method, const std::string& path,
                    const std::string& authorization, const std::string& body,
                    const std::map<std::string, std::string>& query) {
  Dispatched d;
  d.query = query;
  std::smatch m;
  bool path_known = false;
  for (const auto& e : route_table()) {
    if (!std::regex_match(path, m, e.pattern)) continue;
    path_known = true;
    if (e.method == method) {
      d.endpoint = &e;
      break;
    }
  }
  if (!d.endpoint) {
    d.response = path_known ? Response{404, error_body("NotFound", method + " not supported on " + path)}
                            : Response{404, error_body("NotFound", "no such endpoint " + path)};
    return d;
  }
  const Endpoint& e = *d.endpoint;
  Call call;
  for (std::size_t i = 1; i < m.size(); ++i) call.params.push_back(m[i].str());
  call.query = query;
  call.now = platform.now();

  try {
    if (!e.is_public) {
      const std::string prefix = "Bearer ";
      if (authorization.rfind(prefix, 0) != 0) {
        d.response = Response{401, error_body("Unauthenticated", "missing bearer token")};
        return d;
      }
      try {
        call.principal = platform.auth().validate(authorization.substr(prefix.size()), call.now);
      } catch (const auth::TokenRejected& r) {
        d.response = Response{401, error_body(std::string("Token") + std::string(auth::to_string(r.why())), r.what())};
        return d;
      }
      if (!e.roles.contains(call.principal->user.role)) {
        d.response = Response{403, error_body("Forbidden", "role " + std::string(auth::to_string(call.principal->user.role)) +
                                                               " may not call " + e.method + " " + e.path)};
        return d;
      }
      d.principal = call.principal;
    }
    if (e.stream != StreamKind::None) {
      for (const char* key : {"limit", "idle_timeout_s"})
        if (query.contains(key) && query_number(call, key) < 0.0) throw BadRequest(key, std::string(key) + " must be non-negative");
      d.response = Response{200, json{{"stream", true}}};
      return d;
    }
    if (!body.empty()) {
      try {
        call.body = json::parse(body);
      } catch (const json::parse_error&) {
        throw BadRequest("body", "request body is not valid JSON");
      }
    } else {
      call.body = json::object();
    }
    d.response = e.handler(platform, call);
  } catch (const auth::BadCredential& x) {
    d.response = Response{401, error_body("BadCredential", x.what())};
  } catch (const Forbidden& x) {
    d.response = Response{403, error_body("Forbidden", x.what())};
  } catch (const NotFound& x) {
    d.response = Response{404, error_body("NotFound", x.what())};
  } catch (const fleet::UnknownEntity& x) {
    d.response = Response{404, error_body("NotFound", x.what())};
  } catch (const signal::UnknownApproach& x) {
    d.response = Response{404, error_body("NotFound", x.what())};
  } catch (const road::UnknownElementError& x) {
    d.response = Response{404, error_body("NotFound", x.what(), x.element())};
  } catch (const fleet::Rejected& x) {
    d.response = Response{422, error_body("Rejected", x.what(), x.subject())};
  } catch (const BadRequest& x) {
    d.response = Response{422, error_body("BadRequest", x.what(), x.field())};
  } catch (const cits::ValidationError& x) {
    json j = error_body("ValidationError", x.what());
    j["violations"] = x.violations();
    d.response = Response{422, j};
  } catch (const cits::CodecError& x) {
    d.response = Response{422, error_body("CodecError", x.what())};
  } catch (const signal::SignalError& x) {
    // Unknown intersections surface as SignalError too.
    const std::string what = x.what();
    const bool missing = what.rfind("unknown intersection", 0) == 0;
    d.response = Response{missing ? 404 : 422, error_body(missing ? "NotFound" : "Rejected", what)};
  } catch (const geomessenger::EventRejected& x) {
    d.response = Response{422, error_body("Rejected", x.what())};
  } catch (const broker::BrokerError& x) {
    d.response = Response{422, error_body("Rejected", x.what())};
  } catch (const fleet::FleetError& x) {
    d.response = Response{422, error_body("Rejected", x.what())};
  } catch (const GeoError& x) {
    d.response = Response{422, error_body("Rejected", x.what())};
  }
  return d;
}

// -- HTTP server -------------------------------------------------------------

Server::Server(Platform& platform) : platform_(platform), http_(std::make_unique<httplib::Server>()) {
  auto handle = [this](const httplib::Request& req, httplib::Response& res) {
    std::map<std::string, std::string> query;
    for (const auto& [k, v] : req.params) query[k] = v;
    auto d = dispatch(platform_, req.method, req.path, req.get_header_value("Authorization"), req.body, query);
    if (!d.endpoint || d.endpoint->stream == StreamKind::None || d.response.status != 200) {
      res.status = d.response.status;
      res.set_content(d.response.body.dump(), "application/json");
      return;
    }
    // NDJSON stream: one JSON object per line, flushed per event.
    const auto kind = d.endpoint->stream;
    std::size_t limit = 0;
    double idle_timeout = 0.0;
    if (auto it = query.find("limit"); it != query.end()) limit = static_cast<std::size_t>(std::stod(it->second));
    if (auto it = query.find("idle_timeout_s"); it != query.end()) idle_timeout = std::stod(it->second);
    auto sub = platform_.hub().subscribe();
    auto sent = std::make_shared<std::size_t>(0);
    auto idle = std::make_shared<double>(0.0);
    res.status = 200;
    res.set_chunked_content_provider(
        "application/x-ndjson",
        [this, sub, kind, limit, idle_timeout, sent, idle](std::size_t, httplib::DataSink& sink) {
          while (!stopping_.load()) {
            if (!sink.is_writable()) return false;
            auto e = sub->pop(0.2);
            if (!e) {
              if (sub->closed()) break;
              *idle += 0.2;
              if (idle_timeout > 0.0 && *idle >= idle_timeout) break;
              continue;
            }
            *idle = 0.0;
            if (kind == StreamKind::Advisories && e->value("type", "") != "message") continue;
            const std::string line = e->dump() + "\n";
            if (!sink.write(line.data(), line.size())) return false;
            if (limit > 0 && ++*sent >= limit) break;
            return true;
          }
          sink.done();
          return true;
        },
        [this, sub](bool) { platform_.hub().unsubscribe(sub); });
  };
  http_->Get(".*", handle);
  http_->Post(".*", handle);
  http_->Delete(".*", handle);
  http_->Put(".*", handle);
}

Server::~Server() { stop(); }

int Server::bind(const std::string& host, int port) {
  if (port == 0) return http_->bind_to_any_port(host);
  return http_->bind_to_port(host, port) ? port : -1;
}

void Server::start() {
  thread_ = std::thread([this] { http_->listen_after_bind(); });
  http_->wait_until_ready();
}

void Server::run() { http_->listen_after_bind(); }

void Server::stop() {
  if (stopping_.exchange(true)) return;
  http_->stop();
  if (thread_.joinable()) thread_.join();
}

}  // namespace ctmaas::api
