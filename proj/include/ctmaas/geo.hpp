#pragma once

#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>

namespace ctmaas {

inline constexpr double kEarthRadiusM = 6'371'000.0;

/// WGS84 position in degrees; altitude in meters.
struct GeoPoint {
  double lat = 0.0;
  double lon = 0.0;
  double alt = 0.0;

  friend bool operator==(const GeoPoint&, const GeoPoint&) = default;
};

class GeoError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

inline bool is_valid(const GeoPoint& p) {
  return std::isfinite(p.lat) && std::isfinite(p.lon) && std::isfinite(p.alt) &&
         p.lat >= -90.0 && p.lat <= 90.0 && p.lon >= -180.0 && p.lon <= 180.0;
}

/// Throws GeoError naming `what` when the point is out of range or NaN.
void require_valid(const GeoPoint& p, const std::string& what = "position");

inline double deg2rad(double d) { return d * std::numbers::pi / 180.0; }
inline double rad2deg(double r) { return r * 180.0 / std::numbers::pi; }

/// Great-circle distance in meters.
double haversine_distance(const GeoPoint& a, const GeoPoint& b);

/// Initial bearing from a to b, degrees in [0, 360).
double initial_bearing(const GeoPoint& a, const GeoPoint& b);

/// Linear interpolation in lat/lon; adequate for the short edges of a road graph.
GeoPoint interpolate(const GeoPoint& a, const GeoPoint& b, double fraction);

/// Local east/north coordinates (meters) of `p` relative to `origin` using an
/// equirectangular projection at the origin's latitude.
struct PlanarXY {
  double x = 0.0;
  double y = 0.0;
};
PlanarXY to_local(const GeoPoint& origin, const GeoPoint& p);

/// Smallest absolute difference between two headings, degrees in [0, 180].
double heading_difference(double a_deg, double b_deg);

}  // namespace ctmaas
