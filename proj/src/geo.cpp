#include "ctmaas/geo.hpp"

#include <algorithm>

namespace ctmaas {

void require_valid(const GeoPoint& p, const std::string& what) {
  if (!std::isfinite(p.lat) || p.lat < -90.0 || p.lat > 90.0)
    throw GeoError(what + ".lat must be a finite value in [-90, 90]");
  if (!std::isfinite(p.lon) || p.lon < -180.0 || p.lon > 180.0)
    throw GeoError(what + ".lon must be a finite value in [-180, 180]");
  if (!std::isfinite(p.alt)) throw GeoError(what + ".alt must be finite");
}

double haversine_distance(const GeoPoint& a, const GeoPoint& b) {
  const double phi1 = deg2rad(a.lat);
  const double phi2 = deg2rad(b.lat);
  const double dphi = phi2 - phi1;
  const double dlambda = deg2rad(b.lon - a.lon);
  const double s1 = std::sin(dphi / 2.0);
  const double s2 = std::sin(dlambda / 2.0);
  double h = s1 * s1 + std::cos(phi1) * std::cos(phi2) * s2 * s2;
  h = std::clamp(h, 0.0, 1.0);
  return 2.0 * kEarthRadiusM * std::asin(std::sqrt(h));
}

double initial_bearing(const GeoPoint& a, const GeoPoint& b) {
  const double phi1 = deg2rad(a.lat);
  const double phi2 = deg2rad(b.lat);
  const double dlambda = deg2rad(b.lon - a.lon);
  const double y = std::sin(dlambda) * std::cos(phi2);
  const double x = std::cos(phi1) * std::sin(phi2) - std::sin(phi1) * std::cos(phi2) * std::cos(dlambda);
  double deg = rad2deg(std::atan2(y, x));
  deg = std::fmod(deg + 360.0, 360.0);
  return deg >= 360.0 ? 0.0 : deg;
}

GeoPoint interpolate(const GeoPoint& a, const GeoPoint& b, double fraction) {
  return GeoPoint{a.lat + (b.lat - a.lat) * fraction, a.lon + (b.lon - a.lon) * fraction,
                  a.alt + (b.alt - a.alt) * fraction};
}

PlanarXY to_local(const GeoPoint& origin, const GeoPoint& p) {
  const double k = deg2rad(1.0) * kEarthRadiusM;
  return PlanarXY{(p.lon - origin.lon) * k * std::cos(deg2rad(origin.lat)), (p.lat - origin.lat) * k};
}

double heading_difference(double a_deg, double b_deg) {
  double d = std::fmod(std::fabs(a_deg - b_deg), 360.0);
  return d > 180.0 ? 360.0 - d : d;
}

}  // namespace ctmaas
