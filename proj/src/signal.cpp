#include "ctmaas/signal.hpp"

#include <cmath>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>

namespace ctmaas::signal {

using nlohmann::json;

const Approach* SignalPlan::approach(std::string_view id) const {
  for (const auto& a : approaches)
    if (a.id == id) return &a;
  return nullptr;
}

void validate_plan(const SignalPlan& plan) {
  const std::string who = "intersection " + plan.intersection_id;
  if (plan.intersection_id.empty()) throw SignalError("intersection id must be non-empty");
  if (!is_valid(plan.position)) throw SignalError(who + " has an invalid position");
  if (!(plan.cycle_s > 0.0) || !std::isfinite(plan.cycle_s)) throw SignalError(who + ": cycle_s must be positive");
  std::set<std::string> seen;
  for (const auto& a : plan.approaches) {
    if (a.id.empty()) throw SignalError(who + ": approach id must be non-empty");
    if (!seen.insert(a.id).second) throw SignalError(who + ": duplicate approach " + a.id);
    if (!(a.green_start_s >= 0.0 && a.green_start_s < plan.cycle_s))
      throw SignalError(who + ": green_start_s of " + a.id + " must be in [0, cycle)");
    if (!(a.green_duration_s > 0.0 && a.green_duration_s <= plan.cycle_s))
      throw SignalError(who + ": green_duration_s of " + a.id + " must be in (0, cycle]");
  }
}

std::vector<SignalPlan> load_signal_plans(std::string_view document) {
  json doc;
  try {
    doc = json::parse(document);
  } catch (const json::parse_error& e) {
    throw SignalError(std::string("signal plan document is not valid JSON: ") + e.what());
  }
  if (!doc.is_object() || !doc.contains("intersections") || !doc["intersections"].is_array())
    throw SignalError("signal plan document needs an 'intersections' array");
  std::vector<SignalPlan> plans;
  try {
    for (const auto& i : doc["intersections"]) {
      SignalPlan p;
      p.intersection_id = i.at("id").get<std::string>();
      p.position = GeoPoint{i.at("lat").get<double>(), i.at("lon").get<double>(), 0.0};
      p.cycle_s = i.at("cycle_s").get<double>();
      for (const auto& a : i.at("approaches"))
        p.approaches.push_back(Approach{a.at("id").get<std::string>(), a.at("green_start_s").get<double>(),
                                        a.at("green_duration_s").get<double>()});
      validate_plan(p);
      plans.push_back(std::move(p));
    }
  } catch (const json::exception& e) {
    throw SignalError(std::string("bad signal plan entry: ") + e.what());
  }
  return plans;
}

std::vector<SignalPlan> load_signal_plans_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw SignalError("cannot open signal plan file " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return load_signal_plans(ss.str());
}

json to_json(const SignalPlan& plan) {
  json approaches = json::array();
  for (const auto& a : plan.approaches)
    approaches.push_back({{"id", a.id}, {"green_start_s", a.green_start_s}, {"green_duration_s", a.green_duration_s}});
  return json{{"id", plan.intersection_id},
              {"lat", plan.position.lat},
              {"lon", plan.position.lon},
              {"cycle_s", plan.cycle_s},
              {"approaches", approaches}};
}

namespace {

const Approach& require_approach(const SignalPlan& plan, std::string_view id) {
  const Approach* a = plan.approach(id);
  if (!a) throw UnknownApproach("unknown approach " + std::string(id) + " at " + plan.intersection_id);
  return *a;
}

/// Position of t within the cycle relative to the approach's green start, in [0, cycle).
double relative_phase(const SignalPlan& plan, const Approach& a, double t) {
  double phase = std::fmod(t, plan.cycle_s);
  if (phase < 0.0) phase += plan.cycle_s;
  double rel = phase - a.green_start_s;
  if (rel < 0.0) rel += plan.cycle_s;
  if (rel >= plan.cycle_s) rel -= plan.cycle_s;
  return rel;
}

bool grant_applies(const PriorityGrant* grant, std::string_view approach_id) {
  return grant != nullptr && grant->approach_id == approach_id;
}

}  // namespace

double last_green_end(const SignalPlan& plan, const Approach& a, double t) {
  const double rel = relative_phase(plan, a, t);
  if (rel >= a.green_duration_s) return t - (rel - a.green_duration_s);
  return t - rel + a.green_duration_s - plan.cycle_s;
}

SignalState signal_state(const SignalPlan& plan, std::string_view approach_id, double t, const PriorityGrant* grant) {
  const Approach& a = require_approach(plan, approach_id);
  if (grant_applies(grant, approach_id) && t >= grant->green_end && t <= grant->expires_at)
    return {Phase::Green, grant->expires_at - t};
  if (a.green_duration_s >= plan.cycle_s) return {Phase::Green, std::numeric_limits<double>::infinity()};

  const double rel = relative_phase(plan, a, t);
  if (rel < a.green_duration_s) {
    double until = a.green_duration_s - rel;
    if (grant_applies(grant, approach_id) && std::fabs(t + until - grant->green_end) < 1e-6)
      until = grant->expires_at - t;
    return {Phase::Green, until};
  }
  return {Phase::Red, plan.cycle_s - rel};
}

std::optional<double> glosa_advice(const SignalPlan& plan, std::string_view approach_id, double distance, double t,
                                   double v_min, double v_max, const PriorityGrant* grant, double horizon_cycles) {
  if (!(distance > 0.0) || !std::isfinite(distance)) throw InvalidSpeedBounds("distance must be positive");
  if (!(v_min > 0.0) || !(v_min <= v_max) || !std::isfinite(v_max))
    throw InvalidSpeedBounds("speed bounds must satisfy 0 < v_min <= v_max");
  require_approach(plan, approach_id);

  const double horizon_end = t + horizon_cycles * plan.cycle_s;
  const double earliest = t + distance / v_max;
  const double latest = std::min(t + distance / v_min, horizon_end);
  if (earliest > horizon_end) return std::nullopt;

  const auto at_earliest = signal_state(plan, approach_id, earliest, grant);
  if (at_earliest.phase == Phase::Green) return v_max;

  const double green_at = earliest + at_earliest.seconds_until_change;
  if (green_at > latest) return std::nullopt;
  double v = std::min(distance / (green_at - t), v_max);
  // Rounding can land the arrival a hair before the green start; back off until it doesn't.
  for (int i = 0; i < 4096 && !is_green(plan, approach_id, t + distance / v, grant); ++i) v = std::nextafter(v, 0.0);
  if (v < v_min || !is_green(plan, approach_id, t + distance / v, grant) || t + distance / v > horizon_end)
    return std::nullopt;
  return v;
}

SignalController::SignalController(std::vector<SignalPlan> plans, broker::Broker* broker, UuidSource& ids,
                                   PriorityConfig config)
    : broker_(broker), ids_(ids), config_(config) {
  for (auto& p : plans) {
    validate_plan(p);
    auto node = std::make_unique<Intersection>();
    const std::string id = p.intersection_id;
    node->plan = std::move(p);
    if (!intersections_.emplace(id, std::move(node)).second) throw SignalError("duplicate intersection " + id);
  }
}

SignalController::Intersection& SignalController::at(std::string_view id) {
  auto it = intersections_.find(id);
  if (it == intersections_.end()) throw SignalError("unknown intersection " + std::string(id));
  return *it->second;
}

const SignalController::Intersection& SignalController::at(std::string_view id) const {
  auto it = intersections_.find(id);
  if (it == intersections_.end()) throw SignalError("unknown intersection " + std::string(id));
  return *it->second;
}

std::vector<SignalPlan> SignalController::plans() const {
  std::vector<SignalPlan> out;
  for (const auto& [id, node] : intersections_) out.push_back(node->plan);
  return out;
}

const SignalPlan& SignalController::plan(std::string_view intersection_id) const { return at(intersection_id).plan; }

SignalState SignalController::state(std::string_view intersection_id, std::string_view approach_id, double t) const {
  const auto& node = at(intersection_id);
  std::lock_guard lock(node.mu);
  return signal_state(node.plan, approach_id, t, node.grant ? &*node.grant : nullptr);
}

std::optional<double> SignalController::glosa(std::string_view intersection_id, std::string_view approach_id,
                                              double distance, double t, double v_min, double v_max) const {
  const auto& node = at(intersection_id);
  std::lock_guard lock(node.mu);
  return glosa_advice(node.plan, approach_id, distance, t, v_min, v_max, node.grant ? &*node.grant : nullptr);
}

std::optional<PriorityGrant> SignalController::active_grant(std::string_view intersection_id, double now) const {
  const auto& node = at(intersection_id);
  std::lock_guard lock(node.mu);
  if (node.grant && now <= node.grant->expires_at) return node.grant;
  return std::nullopt;
}

std::vector<PriorityGrant> SignalController::grant_history() const {
  std::lock_guard lock(history_mu_);
  return history_;
}

cits::PriorityMessage SignalController::request_priority(const cits::PriorityMessage& request, double now) {
  cits::validate(cits::Message{request});
  if (request.direction != cits::PriorityDirection::Request) throw SignalError("expected a priority Request");
  auto& node = at(request.intersection_id);
  const Approach& approach = require_approach(node.plan, request.approach_id);
  if (request.predicted_arrival < now) throw ArrivalInPast("predicted arrival lies in the past");

  cits::PriorityMessage response = request;
  response.msg_id = ids_.next();
  response.direction = cits::PriorityDirection::Response;
  {
    std::lock_guard lock(node.mu);
    if (node.grant && now > node.grant->expires_at) node.grant.reset();
    const double arrival = request.predicted_arrival;

    if (node.grant) {
      response.verdict = cits::PriorityVerdict::Denied;
    } else if (is_green(node.plan, approach.id, arrival)) {
      response.verdict = cits::PriorityVerdict::Granted;
    } else {
      const double green_end = last_green_end(node.plan, approach, arrival);
      const double needed = arrival - green_end;
      const double red_length = node.plan.cycle_s - approach.green_duration_s;
      if (green_end >= now && needed >= 0.0 && needed <= config_.max_extension_s) {
        double extension = std::max(needed + config_.margin_s, config_.min_extension_s);
        extension = std::min({extension, config_.max_extension_s, red_length});
        node.grant = PriorityGrant{node.plan.intersection_id, request.vehicle_id, approach.id, extension, green_end,
                                   green_end + extension};
        response.verdict = cits::PriorityVerdict::Granted;
        std::lock_guard hlock(history_mu_);
        history_.push_back(*node.grant);
      } else {
        response.verdict = cits::PriorityVerdict::Denied;
      }
    }
  }
  if (broker_) broker_->publish(response, now, node.plan.position);
  return response;
}

}  // namespace ctmaas::signal
