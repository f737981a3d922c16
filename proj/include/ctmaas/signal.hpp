#pragma once

#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "ctmaas/broker.hpp"
#include "ctmaas/geo.hpp"
#include "ctmaas/ids.hpp"
#include "ctmaas/messages.hpp"

namespace ctmaas::signal {

struct Approach {
  std::string id;
  double green_start_s = 0.0;     // [0, cycle)
  double green_duration_s = 0.0;  // (0, cycle]
};

/// Fixed-time plan; approach green windows are half-open and may wrap the cycle.
struct SignalPlan {
  std::string intersection_id;
  GeoPoint position;
  double cycle_s = 0.0;
  std::vector<Approach> approaches;

  const Approach* approach(std::string_view id) const;
};

class SignalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};
class UnknownApproach : public SignalError {
 public:
  using SignalError::SignalError;
};
class InvalidSpeedBounds : public SignalError {
 public:
  using SignalError::SignalError;
};
class ArrivalInPast : public SignalError {
 public:
  using SignalError::SignalError;
};

void validate_plan(const SignalPlan& plan);
std::vector<SignalPlan> load_signal_plans(std::string_view document);
std::vector<SignalPlan> load_signal_plans_file(const std::string& path);
nlohmann::json to_json(const SignalPlan& plan);

/// Green extension on one approach. The extended window [green_end, expires_at] is closed
/// at its end so a vehicle arriving exactly at expires_at still sees Green.
struct PriorityGrant {
  std::string intersection_id;
  std::string vehicle_id;
  std::string approach_id;
  double extension_s = 0.0;
  double green_end = 0.0;
  double expires_at = 0.0;
};

enum class Phase { Green, Red };

struct SignalState {
  Phase phase = Phase::Red;
  double seconds_until_change = 0.0;  // +inf for an always-green approach
};

SignalState signal_state(const SignalPlan& plan, std::string_view approach_id, double t,
                         const PriorityGrant* grant = nullptr);

inline bool is_green(const SignalPlan& plan, std::string_view approach_id, double t,
                     const PriorityGrant* grant = nullptr) {
  return signal_state(plan, approach_id, t, grant).phase == Phase::Green;
}

/// Highest speed in [v_min, v_max] whose constant-speed arrival lands on Green within
/// `horizon_cycles` cycles; nullopt when none exists.
std::optional<double> glosa_advice(const SignalPlan& plan, std::string_view approach_id, double distance, double t,
                                   double v_min, double v_max, const PriorityGrant* grant = nullptr,
                                   double horizon_cycles = 2.0);

/// End of the green window that most recently ended at or before t (approach must be Red at t).
double last_green_end(const SignalPlan& plan, const Approach& approach, double t);

struct PriorityConfig {
  double max_extension_s = 15.0;
  double margin_s = 0.0;
  double min_extension_s = 1.0;
};

/// Owns the plans and the at-most-one active grant per intersection. Grant mutations are
/// serialized per intersection; reads are concurrent.
class SignalController {
 public:
  SignalController(std::vector<SignalPlan> plans, broker::Broker* broker, UuidSource& ids, PriorityConfig config = {});

  std::vector<SignalPlan> plans() const;
  const SignalPlan& plan(std::string_view intersection_id) const;

  SignalState state(std::string_view intersection_id, std::string_view approach_id, double t) const;
  std::optional<double> glosa(std::string_view intersection_id, std::string_view approach_id, double distance,
                              double t, double v_min, double v_max) const;

  /// Answers a Request with a Response, applying a grant when one is warranted. The
  /// response is published through the broker at the intersection position.
  cits::PriorityMessage request_priority(const cits::PriorityMessage& request, double now);

  std::optional<PriorityGrant> active_grant(std::string_view intersection_id, double now) const;
  std::vector<PriorityGrant> grant_history() const;
  const PriorityConfig& config() const { return config_; }

 private:
  struct Intersection {
    SignalPlan plan;
    mutable std::mutex mu;
    std::optional<PriorityGrant> grant;
  };
  Intersection& at(std::string_view id);
  const Intersection& at(std::string_view id) const;

  std::map<std::string, std::unique_ptr<Intersection>, std::less<>> intersections_;
  broker::Broker* broker_;
  UuidSource& ids_;
  PriorityConfig config_;
  mutable std::mutex history_mu_;
  std::vector<PriorityGrant> history_;
};

}  // namespace ctmaas::signal
