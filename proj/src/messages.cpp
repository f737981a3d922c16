#include "ctmaas/messages.hpp"

#include <array>
#include <cctype>
#include <cmath>
#include <cstdio>

namespace ctmaas::cits {

using nlohmann::json;

namespace {

constexpr std::array<std::string_view, 9> kCauseNames = {
    "LaneClosure",      "MobileRoadWorks", "PlannedRoadWorks",  "LongTermRoadWorks", "UnplannedRoadWorks",
    "WeatherConditions", "ObstacleOnRoad", "StationaryVehicle", "VmsFreeText",
};

constexpr std::array<std::string_view, 5> kKindNames = {
    "TrafficCongestion", "VmsFreeText", "SpeedAdvisory", "RerouteAdvisory", "StaticSign",
};

double round_to(double x, int places) {
  if (!std::isfinite(x)) return x;
  const double scale = std::pow(10.0, places);
  const double r = std::round(x * scale) / scale;
  return r == 0.0 ? 0.0 : r;
}

GeoPoint round_point(const GeoPoint& p) { return {round_to(p.lat, 6), round_to(p.lon, 6), round_to(p.alt, 2)}; }
double round_time(double t) { return round_to(t, 3); }
double round_speed(double v) { return round_to(v, 2); }

double round_heading(double h) {
  double r = round_to(h, 6);
  return r >= 360.0 ? 0.0 : r;
}

RelevanceZone round_zone(const RelevanceZone& z) { return {round_point(z.center), round_to(z.radius, 2)}; }

json point_to_json(const GeoPoint& p) { return json{{"lat", p.lat}, {"lon", p.lon}, {"alt", p.alt}}; }

std::string direction_name(PriorityDirection d) { return d == PriorityDirection::Request ? "Request" : "Response"; }
std::string verdict_name(PriorityVerdict v) { return v == PriorityVerdict::Granted ? "Granted" : "Denied"; }

/// Pulls typed fields out of a JSON object, collecting one violation per bad field.
class FieldReader {
 public:
  FieldReader(const json& obj, std::vector<std::string>& errors, std::string prefix = "")
      : obj_(obj), errors_(errors), prefix_(std::move(prefix)) {}

  std::string str(const char* key) {
    const json* v = find(key);
    if (!v) return {};
    if (!v->is_string()) {
      errors_.push_back(name(key) + " must be a string");
      return {};
    }
    return v->get<std::string>();
  }

  std::optional<std::string> opt_str(const char* key) {
    auto it = obj_.find(key);
    if (it == obj_.end() || it->is_null()) return std::nullopt;
    if (!it->is_string()) {
      errors_.push_back(name(key) + " must be a string");
      return std::nullopt;
    }
    return it->get<std::string>();
  }

  double num(const char* key) {
    const json* v = find(key);
    if (!v) return std::nan("");
    if (!v->is_number()) {
      errors_.push_back(name(key) + " must be a number");
      return std::nan("");
    }
    return v->get<double>();
  }

  double num_or(const char* key, double fallback) {
    auto it = obj_.find(key);
    if (it == obj_.end()) return fallback;
    return num(key);
  }

  const json* object(const char* key) {
    const json* v = find(key);
    if (!v) return nullptr;
    if (!v->is_object()) {
      errors_.push_back(name(key) + " must be an object");
      return nullptr;
    }
    return v;
  }

  GeoPoint point(const char* key) {
    const json* v = object(key);
    if (!v) return GeoPoint{std::nan(""), std::nan(""), 0.0};
    FieldReader sub(*v, errors_, name(key) + ".");
    return GeoPoint{sub.num("lat"), sub.num("lon"), sub.num_or("alt", 0.0)};
  }

  RelevanceZone zone(const char* key) {
    const json* v = object(key);
    if (!v) return RelevanceZone{GeoPoint{}, std::nan("")};
    FieldReader sub(*v, errors_, name(key) + ".");
    return RelevanceZone{sub.point("center"), sub.num("radius")};
  }

  std::string name(const char* key) const { return prefix_ + key; }

 private:
  const json* find(const char* key) {
    auto it = obj_.find(key);
    if (it == obj_.end()) {
      errors_.push_back(name(key) + " is required");
      return nullptr;
    }
    return &*it;
  }

  const json& obj_;
  std::vector<std::string>& errors_;
  std::string prefix_;
};

void check_point(const GeoPoint& p, const std::string& field, std::vector<std::string>& out) {
  if (!std::isfinite(p.lat) || p.lat < -90.0 || p.lat > 90.0) out.push_back(field + ".lat must be in [-90, 90]");
  if (!std::isfinite(p.lon) || p.lon < -180.0 || p.lon > 180.0) out.push_back(field + ".lon must be in [-180, 180]");
  if (!std::isfinite(p.alt)) out.push_back(field + ".alt must be finite");
}

void check_validity(double from, double to, std::vector<std::string>& out) {
  if (!std::isfinite(from) || from <= 0.0) out.push_back("valid_from must be a positive timestamp");
  if (!std::isfinite(to) || to <= 0.0) out.push_back("valid_to must be a positive timestamp");
  if (std::isfinite(from) && std::isfinite(to) && !(from < to)) out.push_back("valid_from must precede valid_to");
}

void check_msg_id(const std::string& id, std::vector<std::string>& out) {
  if (!is_uuid(id)) out.push_back("msg_id must be a UUID string");
}

void check_nonempty(const std::string& s, const char* field, std::vector<std::string>& out) {
  if (s.empty()) out.push_back(std::string(field) + " must be non-empty");
}

std::vector<std::string> check(const CamMessage& m) {
  std::vector<std::string> out;
  check_nonempty(m.station_id, "station_id", out);
  check_nonempty(m.vehicle_id, "vehicle_id", out);
  if (!std::isfinite(m.timestamp) || m.timestamp <= 0.0) out.push_back("timestamp must be positive");
  check_point(m.position, "position", out);
  if (!std::isfinite(m.speed) || m.speed < 0.0) out.push_back("speed must be >= 0");
  if (!std::isfinite(m.heading) || m.heading < 0.0 || m.heading >= 360.0) out.push_back("heading must be in [0, 360)");
  return out;
}

std::vector<std::string> check(const HazardMessage& m) {
  std::vector<std::string> out;
  check_msg_id(m.msg_id, out);
  auto z = zone_violations(m.zone);
  out.insert(out.end(), z.begin(), z.end());
  check_validity(m.valid_from, m.valid_to, out);
  if (m.cause == HazardCause::VmsFreeText && (!m.free_text || m.free_text->empty()))
    out.push_back("free_text required for cause VmsFreeText");
  if (m.cause != HazardCause::VmsFreeText && m.free_text)
    out.push_back("free_text only allowed for cause VmsFreeText");
  check_nonempty(m.originator, "originator", out);
  return out;
}

std::vector<std::string> check(const IvimMessage& m) {
  std::vector<std::string> out;
  check_msg_id(m.msg_id, out);
  auto z = zone_violations(m.zone);
  out.insert(out.end(), z.begin(), z.end());
  check_validity(m.valid_from, m.valid_to, out);
  if (m.payload.index() != static_cast<std::size_t>(m.kind)) {
    out.push_back("payload shape does not match kind " + std::string(to_string(m.kind)));
    return out;
  }
  std::visit(
      [&](const auto& p) {
        using P = std::decay_t<decltype(p)>;
        if constexpr (std::is_same_v<P, payload::FreeText>) {
          if (p.text.empty()) out.push_back("payload.text must be non-empty");
        } else if constexpr (std::is_same_v<P, payload::SpeedAdvice>) {
          if (!std::isfinite(p.advised_speed) || p.advised_speed <= 0.0)
            out.push_back("payload.advised_speed must be positive");
        } else if constexpr (std::is_same_v<P, payload::Reroute>) {
          if (p.vehicle_id.empty()) out.push_back("payload.vehicle_id must be non-empty");
          if (p.edge_ids.empty()) out.push_back("payload.edge_ids must be non-empty");
        } else if constexpr (std::is_same_v<P, payload::Sign>) {
          if (p.sign_code.empty()) out.push_back("payload.sign_code must be non-empty");
        }
      },
      m.payload);
  return out;
}

std::vector<std::string> check(const PriorityMessage& m) {
  std::vector<std::string> out;
  check_msg_id(m.msg_id, out);
  check_nonempty(m.vehicle_id, "vehicle_id", out);
  check_nonempty(m.intersection_id, "intersection_id", out);
  check_nonempty(m.approach_id, "approach_id", out);
  if (!std::isfinite(m.predicted_arrival) || m.predicted_arrival <= 0.0)
    out.push_back("predicted_arrival must be a positive timestamp");
  if (m.direction == PriorityDirection::Response && !m.verdict) out.push_back("verdict required for Response");
  if (m.direction == PriorityDirection::Request && m.verdict) out.push_back("verdict only allowed for Response");
  return out;
}

json payload_to_json(const IvimPayload& p) {
  return std::visit(
      [](const auto& v) -> json {
        using P = std::decay_t<decltype(v)>;
        if constexpr (std::is_same_v<P, payload::Congestion>) return json::object();
        else if constexpr (std::is_same_v<P, payload::FreeText>) return json{{"text", v.text}};
        else if constexpr (std::is_same_v<P, payload::SpeedAdvice>) return json{{"advised_speed", v.advised_speed}};
        else if constexpr (std::is_same_v<P, payload::Reroute>)
          return json{{"vehicle_id", v.vehicle_id}, {"trip_id", v.trip_id}, {"edge_ids", v.edge_ids}};
        else return json{{"sign_code", v.sign_code}};
      },
      p);
}

IvimPayload payload_from_json(IvimKind kind, const json& j, std::vector<std::string>& errors) {
  FieldReader r(j, errors, "payload.");
  switch (kind) {
    case IvimKind::TrafficCongestion:
      return payload::Congestion{};
    case IvimKind::VmsFreeText:
      return payload::FreeText{r.str("text")};
    case IvimKind::SpeedAdvisory:
      return payload::SpeedAdvice{r.num("advised_speed")};
    case IvimKind::RerouteAdvisory: {
      payload::Reroute out{r.str("vehicle_id"), r.opt_str("trip_id").value_or(""), {}};
      auto it = j.find("edge_ids");
      if (it == j.end() || !it->is_array()) {
        errors.push_back("payload.edge_ids must be an array of strings");
      } else {
        for (const auto& e : *it) {
          if (!e.is_string()) {
            errors.push_back("payload.edge_ids must be an array of strings");
            break;
          }
          out.edge_ids.push_back(e.get<std::string>());
        }
      }
      return out;
    }
    case IvimKind::StaticSign:
      return payload::Sign{r.str("sign_code")};
  }
  return payload::Congestion{};
}

}  // namespace

HazardFamily family_of(HazardCause cause) {
  switch (cause) {
    case HazardCause::LaneClosure:
    case HazardCause::MobileRoadWorks:
    case HazardCause::PlannedRoadWorks:
    case HazardCause::LongTermRoadWorks:
    case HazardCause::UnplannedRoadWorks:
      return HazardFamily::RWW;
    default:
      return HazardFamily::RHW;
  }
}

std::string_view to_string(HazardCause cause) { return kCauseNames[static_cast<std::size_t>(cause)]; }
std::string_view to_string(HazardFamily family) { return family == HazardFamily::RWW ? "RWW" : "RHW"; }
std::string_view to_string(IvimKind kind) { return kKindNames[static_cast<std::size_t>(kind)]; }

std::optional<HazardCause> hazard_cause_from(std::string_view name) {
  for (std::size_t i = 0; i < kCauseNames.size(); ++i)
    if (kCauseNames[i] == name) return static_cast<HazardCause>(i);
  return std::nullopt;
}

std::optional<IvimKind> ivim_kind_from(std::string_view name) {
  for (std::size_t i = 0; i < kKindNames.size(); ++i)
    if (kKindNames[i] == name) return static_cast<IvimKind>(i);
  return std::nullopt;
}

std::string_view msg_type(const Message& m) { return kMsgTypes[m.index()]; }

std::string message_key(const Message& m) {
  if (const auto* cam = std::get_if<CamMessage>(&m)) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.3f", cam->timestamp);
    return "cam:" + cam->station_id + ":" + buf;
  }
  return std::visit(
      [](const auto& v) -> std::string {
        if constexpr (requires { v.msg_id; }) return v.msg_id;
        else return {};
      },
      m);
}

std::optional<RelevanceZone> zone_of(const Message& m) {
  if (const auto* h = std::get_if<HazardMessage>(&m)) return h->zone;
  if (const auto* i = std::get_if<IvimMessage>(&m)) return i->zone;
  return std::nullopt;
}

std::optional<double> valid_to_of(const Message& m) {
  if (const auto* h = std::get_if<HazardMessage>(&m)) return h->valid_to;
  if (const auto* i = std::get_if<IvimMessage>(&m)) return i->valid_to;
  return std::nullopt;
}

ValidationError::ValidationError(std::vector<std::string> violations)
    : CodecError([&] {
        std::string s = "validation failed:";
        for (const auto& v : violations) s += " " + v + ";";
        return s;
      }()),
      violations_(std::move(violations)) {}

bool is_uuid(std::string_view s) {
  if (s.size() != 36) return false;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i == 8 || i == 13 || i == 18 || i == 23) {
      if (s[i] != '-') return false;
    } else if (!std::isxdigit(static_cast<unsigned char>(s[i])) || std::isupper(static_cast<unsigned char>(s[i]))) {
      return false;
    }
  }
  return true;
}

std::vector<std::string> zone_violations(const RelevanceZone& z, const std::string& field) {
  std::vector<std::string> out;
  check_point(z.center, field + ".center", out);
  if (!std::isfinite(z.radius) || z.radius <= 0.0 || z.radius > kMaxZoneRadiusM)
    out.push_back(field + ".radius must be in (0, 50000]");
  return out;
}

std::vector<std::string> violations(const Message& m) {
  return std::visit([](const auto& v) { return check(v); }, m);
}

void validate(const Message& m) {
  auto errors = violations(m);
  if (!errors.empty()) throw ValidationError(std::move(errors));
}

Message canonicalize(const Message& m) {
  return std::visit(
      [](auto v) -> Message {
        using T = std::decay_t<decltype(v)>;
        if constexpr (std::is_same_v<T, CamMessage>) {
          v.timestamp = round_time(v.timestamp);
          v.position = round_point(v.position);
          v.speed = round_speed(v.speed);
          v.heading = round_heading(v.heading);
        } else if constexpr (std::is_same_v<T, HazardMessage>) {
          v.zone = round_zone(v.zone);
          v.valid_from = round_time(v.valid_from);
          v.valid_to = round_time(v.valid_to);
        } else if constexpr (std::is_same_v<T, IvimMessage>) {
          v.zone = round_zone(v.zone);
          v.valid_from = round_time(v.valid_from);
          v.valid_to = round_time(v.valid_to);
          if (auto* s = std::get_if<payload::SpeedAdvice>(&v.payload)) s->advised_speed = round_speed(s->advised_speed);
        } else {
          v.predicted_arrival = round_time(v.predicted_arrival);
        }
        return v;
      },
      m);
}

json zone_to_json(const RelevanceZone& z) { return json{{"center", point_to_json(z.center)}, {"radius", z.radius}}; }

RelevanceZone zone_from_json(const json& j) {
  std::vector<std::string> errors;
  if (!j.is_object()) throw ValidationError({"zone must be an object"});
  FieldReader r(j, errors);
  RelevanceZone z{r.point("center"), r.num("radius")};
  if (errors.empty()) errors = zone_violations(z);
  if (!errors.empty()) throw ValidationError(std::move(errors));
  return z;
}

json to_json(const Message& m) {
  return std::visit(
      [](const auto& v) -> json {
        using T = std::decay_t<decltype(v)>;
        json j;
        if constexpr (std::is_same_v<T, CamMessage>) {
          j = {{"msg_type", "CAM"},         {"station_id", v.station_id}, {"vehicle_id", v.vehicle_id},
               {"trip_id", v.trip_id},      {"driver_id", v.driver_id},   {"timestamp", v.timestamp},
               {"position", point_to_json(v.position)}, {"speed", v.speed}, {"heading", v.heading}};
        } else if constexpr (std::is_same_v<T, HazardMessage>) {
          j = {{"msg_type", "HAZARD"},
               {"msg_id", v.msg_id},
               {"cause", std::string(to_string(v.cause))},
               {"zone", zone_to_json(v.zone)},
               {"valid_from", v.valid_from},
               {"valid_to", v.valid_to},
               {"originator", v.originator}};
          if (v.free_text) j["free_text"] = *v.free_text;
        } else if constexpr (std::is_same_v<T, IvimMessage>) {
          j = {{"msg_type", "IVIM"},
               {"msg_id", v.msg_id},
               {"kind", std::string(to_string(v.kind))},
               {"zone", zone_to_json(v.zone)},
               {"payload", payload_to_json(v.payload)},
               {"valid_from", v.valid_from},
               {"valid_to", v.valid_to}};
        } else {
          j = {{"msg_type", "PRIORITY"},
               {"msg_id", v.msg_id},
               {"direction", direction_name(v.direction)},
               {"vehicle_id", v.vehicle_id},
               {"intersection_id", v.intersection_id},
               {"approach_id", v.approach_id},
               {"predicted_arrival", v.predicted_arrival}};
          if (v.verdict) j["verdict"] = verdict_name(*v.verdict);
        }
        return j;
      },
      m);
}

Message from_json(const json& j) {
  if (!j.is_object()) throw MalformedInput("message must be a JSON object");
  auto type_it = j.find("msg_type");
  if (type_it == j.end() || !type_it->is_string()) throw MalformedInput("message lacks a string msg_type");
  const std::string type = type_it->get<std::string>();

  std::vector<std::string> errors;
  FieldReader r(j, errors);
  Message out;
  if (type == "CAM") {
    CamMessage m;
    m.station_id = r.str("station_id");
    m.vehicle_id = r.str("vehicle_id");
    m.trip_id = r.opt_str("trip_id").value_or("");
    m.driver_id = r.opt_str("driver_id").value_or("");
    m.timestamp = r.num("timestamp");
    m.position = r.point("position");
    m.speed = r.num("speed");
    m.heading = r.num("heading");
    out = m;
  } else if (type == "HAZARD") {
    HazardMessage m;
    m.msg_id = r.str("msg_id");
    const auto cause = r.str("cause");
    if (auto c = hazard_cause_from(cause)) m.cause = *c;
    else if (!cause.empty()) errors.push_back("cause '" + cause + "' is not a known hazard cause");
    m.zone = r.zone("zone");
    m.valid_from = r.num("valid_from");
    m.valid_to = r.num("valid_to");
    m.free_text = r.opt_str("free_text");
    m.originator = r.str("originator");
    out = m;
  } else if (type == "IVIM") {
    IvimMessage m;
    m.msg_id = r.str("msg_id");
    const auto kind = r.str("kind");
    if (auto k = ivim_kind_from(kind)) m.kind = *k;
    else if (!kind.empty()) errors.push_back("kind '" + kind + "' is not a known IVIM kind");
    m.zone = r.zone("zone");
    if (const json* p = r.object("payload")) m.payload = payload_from_json(m.kind, *p, errors);
    m.valid_from = r.num("valid_from");
    m.valid_to = r.num("valid_to");
    out = m;
  } else if (type == "PRIORITY") {
    PriorityMessage m;
    m.msg_id = r.str("msg_id");
    const auto dir = r.str("direction");
    if (dir == "Request") m.direction = PriorityDirection::Request;
    else if (dir == "Response") m.direction = PriorityDirection::Response;
    else if (!dir.empty()) errors.push_back("direction must be Request or Response");
    m.vehicle_id = r.str("vehicle_id");
    m.intersection_id = r.str("intersection_id");
    m.approach_id = r.str("approach_id");
    m.predicted_arrival = r.num("predicted_arrival");
    if (auto v = r.opt_str("verdict")) {
      if (*v == "Granted") m.verdict = PriorityVerdict::Granted;
      else if (*v == "Denied") m.verdict = PriorityVerdict::Denied;
      else errors.push_back("verdict must be Granted or Denied");
    }
    out = m;
  } else {
    throw UnknownMessageType("unknown msg_type '" + type + "'");
  }
  if (errors.empty()) errors = violations(out);
  if (!errors.empty()) throw ValidationError(std::move(errors));
  return out;
}

std::string encode(const Message& m) {
  validate(m);
  const Message canonical = canonicalize(m);
  validate(canonical);
  return to_json(canonical).dump();
}

Message decode(std::string_view bytes) {
  json j;
  try {
    j = json::parse(bytes.begin(), bytes.end());
  } catch (const json::parse_error& e) {
    throw MalformedInput(std::string("malformed message: ") + e.what());
  }
  return from_json(j);
}

bool is_relevant(const RelevanceZone& zone, const GeoPoint& p) { return haversine_distance(zone.center, p) <= zone.radius; }

std::span<const CatalogueRow> highway_catalogue() {
  static const CatalogueRow rows[] = {
      {"RWW", "Lane closure and other restrictions", HazardCause::LaneClosure},
      {"RWW", "Mobile road works", HazardCause::MobileRoadWorks},
      {"RWW", "Planned road works", HazardCause::PlannedRoadWorks},
      {"RWW", "Long-term road works", HazardCause::LongTermRoadWorks},
      {"RWW", "Unplanned road works", HazardCause::UnplannedRoadWorks},
      {"RHW", "Weather conditions warning", HazardCause::WeatherConditions},
      {"RHW", "Obstacle on the road", HazardCause::ObstacleOnRoad},
      {"RHW", "Stationary vehicle", HazardCause::StationaryVehicle},
      {"RHW", "VMS free text", HazardCause::VmsFreeText},
      {"IVS", "Traffic congestion", IvimKind::TrafficCongestion},
      {"IVS", "VMS free text", IvimKind::VmsFreeText},
  };
  return rows;
}

}  // namespace ctmaas::cits
