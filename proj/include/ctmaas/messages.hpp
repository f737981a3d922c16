#pragma once

#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

#include "ctmaas/geo.hpp"

namespace ctmaas::cits {

inline constexpr double kMaxZoneRadiusM = 50'000.0;

struct RelevanceZone {
  GeoPoint center;
  double radius = 0.0;  // m, in (0, 50000]

  friend bool operator==(const RelevanceZone&, const RelevanceZone&) = default;
};

struct CamMessage {
  std::string station_id;
  std::string vehicle_id;
  std::string trip_id;
  std::string driver_id;
  double timestamp = 0.0;
  GeoPoint position;
  double speed = 0.0;    // m/s
  double heading = 0.0;  // degrees [0, 360)

  friend bool operator==(const CamMessage&, const CamMessage&) = default;
};

enum class HazardFamily { RWW, RHW };

enum class HazardCause {
  LaneClosure,
  MobileRoadWorks,
  PlannedRoadWorks,
  LongTermRoadWorks,
  UnplannedRoadWorks,
  WeatherConditions,
  ObstacleOnRoad,
  StationaryVehicle,
  VmsFreeText,
};

inline constexpr HazardCause kAllHazardCauses[] = {
    HazardCause::LaneClosure,       HazardCause::MobileRoadWorks,   HazardCause::PlannedRoadWorks,
    HazardCause::LongTermRoadWorks, HazardCause::UnplannedRoadWorks, HazardCause::WeatherConditions,
    HazardCause::ObstacleOnRoad,    HazardCause::StationaryVehicle, HazardCause::VmsFreeText,
};

HazardFamily family_of(HazardCause cause);
std::string_view to_string(HazardCause cause);
std::string_view to_string(HazardFamily family);
std::optional<HazardCause> hazard_cause_from(std::string_view name);

struct HazardMessage {
  std::string msg_id;
  HazardCause cause = HazardCause::ObstacleOnRoad;
  RelevanceZone zone;
  double valid_from = 0.0;
  double valid_to = 0.0;
  std::optional<std::string> free_text;  // required iff cause == VmsFreeText
  std::string originator;

  friend bool operator==(const HazardMessage&, const HazardMessage&) = default;
};

enum class IvimKind { TrafficCongestion, VmsFreeText, SpeedAdvisory, RerouteAdvisory, StaticSign };

inline constexpr IvimKind kAllIvimKinds[] = {IvimKind::TrafficCongestion, IvimKind::VmsFreeText,
                                             IvimKind::SpeedAdvisory, IvimKind::RerouteAdvisory,
                                             IvimKind::StaticSign};

std::string_view to_string(IvimKind kind);
std::optional<IvimKind> ivim_kind_from(std::string_view name);

namespace payload {
struct Congestion {
  friend bool operator==(const Congestion&, const Congestion&) = default;
};
struct FreeText {
  std::string text;
  friend bool operator==(const FreeText&, const FreeText&) = default;
};
struct SpeedAdvice {
  double advised_speed = 0.0;  // m/s
  friend bool operator==(const SpeedAdvice&, const SpeedAdvice&) = default;
};
/// Addressed to one vehicle's trip; edge_ids starts at the vehicle's current edge.
struct Reroute {
  std::string vehicle_id;
  std::string trip_id;
  std::vector<std::string> edge_ids;
  friend bool operator==(const Reroute&, const Reroute&) = default;
};
struct Sign {
  std::string sign_code;
  friend bool operator==(const Sign&, const Sign&) = default;
};
}  // namespace payload

/// Alternative order mirrors IvimKind.
using IvimPayload =
    std::variant<payload::Congestion, payload::FreeText, payload::SpeedAdvice, payload::Reroute, payload::Sign>;

struct IvimMessage {
  std::string msg_id;
  IvimKind kind = IvimKind::TrafficCongestion;
  RelevanceZone zone;
  IvimPayload payload;
  double valid_from = 0.0;
  double valid_to = 0.0;

  friend bool operator==(const IvimMessage&, const IvimMessage&) = default;
};

enum class PriorityDirection { Request, Response };
enum class PriorityVerdict { Granted, Denied };

struct PriorityMessage {
  std::string msg_id;
  PriorityDirection direction = PriorityDirection::Request;
  std::string vehicle_id;
  std::string intersection_id;
  std::string approach_id;
  double predicted_arrival = 0.0;
  std::optional<PriorityVerdict> verdict;  // present iff Response

  friend bool operator==(const PriorityMessage&, const PriorityMessage&) = default;
};

using Message = std::variant<CamMessage, HazardMessage, IvimMessage, PriorityMessage>;

/// "CAM", "HAZARD", "IVIM" or "PRIORITY".
std::string_view msg_type(const Message& m);
inline constexpr std::string_view kMsgTypes[] = {"CAM", "HAZARD", "IVIM", "PRIORITY"};

/// msg_id, or a synthetic "cam:<station>:<timestamp>" key for CAMs.
std::string message_key(const Message& m);

/// Zone carried by the message; CAM and PRIORITY carry none.
std::optional<RelevanceZone> zone_of(const Message& m);

/// Validity end, if the family has one.
std::optional<double> valid_to_of(const Message& m);

// ---------------------------------------------------------------------------
// Errors: three distinguishable classes for decode, plus validation failures.

class CodecError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class MalformedInput : public CodecError {
 public:
  using CodecError::CodecError;
};

class UnknownMessageType : public CodecError {
 public:
  using CodecError::CodecError;
};

class ValidationError : public CodecError {
 public:
  explicit ValidationError(std::vector<std::string> violations);
  const std::vector<std::string>& violations() const noexcept { return violations_; }

 private:
  std::vector<std::string> violations_;
};

bool is_uuid(std::string_view s);

/// Every violated invariant, each message naming the field.
std::vector<std::string> violations(const Message& m);
void validate(const Message& m);

/// Rounds to wire precision: degrees to 6 places, m/s and meters to 2, timestamps to ms.
Message canonicalize(const Message& m);

/// Canonical JSON with lexicographic key order. Throws ValidationError.
std::string encode(const Message& m);
Message decode(std::string_view bytes);

nlohmann::json to_json(const Message& m);
/// Builds and validates a message from a parsed JSON object.
Message from_json(const nlohmann::json& j);

nlohmann::json zone_to_json(const RelevanceZone& z);
RelevanceZone zone_from_json(const nlohmann::json& j);
std::vector<std::string> zone_violations(const RelevanceZone& z, const std::string& field = "zone");

/// Closed ball test: haversine(center, p) <= radius.
bool is_relevant(const RelevanceZone& zone, const GeoPoint& p);

// ---------------------------------------------------------------------------
// Highway use-case catalogue: every hazard cause and IVS kind traced to a row.

struct CatalogueRow {
  std::string_view service;  // "RWW", "RHW", "IVS"
  std::string_view use_case;
  std::variant<HazardCause, IvimKind> maps_to;
};

std::span<const CatalogueRow> highway_catalogue();

}  // namespace ctmaas::cits
