#include "ctmaas/platform.hpp"

#include <algorithm>
#include <chrono>
#include <fstream>
#include <sstream>

#define TOML_EXCEPTIONS 1
#include <toml++/toml.hpp>

namespace ctmaas {

using nlohmann::json;

namespace {

template <class T>
void read_into(const toml::table& t, std::string_view section, std::string_view key, T& out) {
  const auto node = t[section][key];
  if (!node) return;
  if constexpr (std::is_same_v<T, bool>) {
    if (auto v = node.value_exact<bool>()) out = *v;
    else throw ConfigError(std::string(section) + "." + std::string(key) + " must be a boolean");
  } else if constexpr (std::is_same_v<T, std::string>) {
    if (auto v = node.value_exact<std::string>()) out = *v;
    else throw ConfigError(std::string(section) + "." + std::string(key) + " must be a string");
  } else if constexpr (std::is_integral_v<T>) {
    if (auto v = node.value_exact<std::int64_t>()) out = static_cast<T>(*v);
    else throw ConfigError(std::string(section) + "." + std::string(key) + " must be an integer");
  } else {
    if (auto v = node.value<double>()) out = *v;
    else throw ConfigError(std::string(section) + "." + std::string(key) + " must be a number");
  }
}

double wall_clock() {
  using namespace std::chrono;
  return duration<double>(system_clock::now().time_since_epoch()).count();
}

cits::RelevanceZone network_coverage(const road::RoadGraph& g) {
  if (g.nodes().empty()) return cits::RelevanceZone{GeoPoint{}, cits::kMaxZoneRadiusM};
  double lat = 0.0, lon = 0.0;
  for (const auto& n : g.nodes()) {
    lat += n.position.lat;
    lon += n.position.lon;
  }
  const double k = static_cast<double>(g.nodes().size());
  const GeoPoint centre{lat / k, lon / k, 0.0};
  double radius = 0.0;
  for (const auto& n : g.nodes()) radius = std::max(radius, haversine_distance(centre, n.position));
  return cits::RelevanceZone{centre, std::min(radius + 2000.0, cits::kMaxZoneRadiusM)};
}

}  // namespace

PlatformConfig load_config(std::string_view text) {
  toml::table t;
  try {
    t = toml::parse(text);
  } catch (const toml::parse_error& e) {
    throw ConfigError(std::string("config is not valid TOML: ") + std::string(e.description()));
  }
  PlatformConfig c;
  read_into(t, "server", "port", c.port);
  read_into(t, "server", "seed", c.seed);
  read_into(t, "storage", "log", c.log_path);
  read_into(t, "storage", "snapshot", c.snapshot_path);
  read_into(t, "storage", "snapshot_interval_s", c.snapshot_interval_s);
  read_into(t, "data", "gazetteer", c.gazetteer_path);
  read_into(t, "auth", "secret", c.secret);
  read_into(t, "auth", "token_ttl_s", c.token_ttl_s);
  read_into(t, "fleet", "auto_apply", c.fleet.auto_apply);
  read_into(t, "fleet", "arrival_radius_m", c.fleet.arrival_radius_m);
  read_into(t, "fleet", "reroute_min_saving_s", c.fleet.reroute_min_saving_s);
  read_into(t, "fleet", "reroute_min_saving_ratio", c.fleet.reroute_min_saving_ratio);
  read_into(t, "fleet", "proposal_ttl_s", c.fleet.proposal_ttl_s);
  read_into(t, "fleet", "reroute_check_interval_s", c.reroute_check_interval_s);
  read_into(t, "geomessenger", "congestion_onset_ratio", c.geomessenger.congestion_onset_ratio);
  read_into(t, "geomessenger", "congestion_clear_ratio", c.geomessenger.congestion_clear_ratio);
  read_into(t, "geomessenger", "min_vehicles", c.geomessenger.min_vehicles);
  read_into(t, "geomessenger", "window_s", c.geomessenger.window_s);
  read_into(t, "geomessenger", "repeat_s", c.geomessenger.repeat_s);
  read_into(t, "geomessenger", "advisory_validity_s", c.geomessenger.advisory_validity_s);
  read_into(t, "geomessenger", "advisory_radius_m", c.geomessenger.advisory_radius_m);
  read_into(t, "priority", "max_extension_s", c.priority.max_extension_s);
  read_into(t, "priority", "margin_s", c.priority.margin_s);
  read_into(t, "broker", "sender_radius_m", c.broker.sender_radius_m);

  if (const auto* users = t["auth"]["users"].as_array()) {
    for (const auto& node : *users) {
      const auto* u = node.as_table();
      if (!u) throw ConfigError("auth.users entries must be tables");
      UserSeed s;
      s.user_id = (*u)["user_id"].value_or(std::string());
      s.display_name = (*u)["display_name"].value_or(s.user_id);
      s.credential = (*u)["credential"].value_or(std::string());
      const auto role = auth::role_from((*u)["role"].value_or(std::string()));
      if (s.user_id.empty() || s.credential.empty() || !role)
        throw ConfigError("auth.users entries need user_id, credential and a valid role");
      s.role = *role;
      if (auto d = (*u)["driver_id"].value<std::string>()) s.driver_id = *d;
      c.users.push_back(std::move(s));
    }
  }
  if (c.token_ttl_s <= 0.0) throw ConfigError("auth.token_ttl_s must be positive");
  if (c.port <= 0 || c.port > 65535) throw ConfigError("server.port out of range");
  return c;
}

PlatformConfig load_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return load_config(ss.str());
}

// -- EventHub ----------------------------------------------------------------

std::optional<json> EventHub::Subscriber::pop(double timeout_s) {
  std::unique_lock lock(mu_);
  cv_.wait_for(lock, std::chrono::duration<double>(timeout_s), [&] { return !queue_.empty() || closed_; });
  if (queue_.empty()) return std::nullopt;
  json e = std::move(queue_.front());
  queue_.pop_front();
  return e;
}

bool EventHub::Subscriber::closed() const {
  std::lock_guard lock(mu_);
  return closed_ && queue_.empty();
}

std::shared_ptr<EventHub::Subscriber> EventHub::subscribe() {
  auto s = std::make_shared<Subscriber>();
  std::lock_guard lock(mu_);
  s->closed_ = closed_;
  subs_.push_back(s);
  return s;
}

void EventHub::unsubscribe(const std::shared_ptr<Subscriber>& s) {
  std::lock_guard lock(mu_);
  subs_.erase(std::remove(subs_.begin(), subs_.end(), s), subs_.end());
}

void EventHub::publish(const json& event) {
  std::lock_guard lock(mu_);
  for (const auto& s : subs_) {
    {
      std::lock_guard slock(s->mu_);
      s->queue_.push_back(event);
    }
    s->cv_.notify_one();
  }
}

void EventHub::close() {
  std::lock_guard lock(mu_);
  closed_ = true;
  for (const auto& s : subs_) {
    {
      std::lock_guard slock(s->mu_);
      s->closed_ = true;
    }
    s->cv_.notify_all();
  }
}

std::size_t EventHub::subscriber_count() const {
  std::lock_guard lock(mu_);
  return subs_.size();
}

// -- Platform ----------------------------------------------------------------

Platform::Platform(road::RoadGraph graph, std::vector<signal::SignalPlan> plans, PlatformConfig config,
                   fleet::Gazetteer gazetteer)
    : config_(std::move(config)),
      ids_(config_.seed),
      graph_(std::move(graph)),
      broker_(config_.broker),
      geomessenger_(graph_, broker_, ids_, config_.geomessenger),
      signals_(std::move(plans), &broker_, ids_, config_.priority),
      store_(config_.log_path.empty() ? std::make_unique<store::Store>()
                                      : std::make_unique<store::Store>(config_.log_path, config_.snapshot_path)),
      fleet_(graph_, broker_, &geomessenger_, *store_, ids_, std::move(gazetteer), config_.fleet),
      auth_(config_.secret, store_.get(), config_.token_ttl_s),
      coverage_(graph_.read([](const road::RoadGraph& g) { return network_coverage(g); })),
      clock_(wall_clock) {
  const auto state = store_->state();
  fleet_.load(state);
  auth_.load(state);
  for (const auto& u : config_.users)
    if (!auth_.user(u.user_id)) auth_.add_user(u.user_id, u.display_name, u.role, u.credential, u.driver_id, 0.0);

  fleet_.set_event_sink([this](const json& e) { hub_.publish(e); });
  hub_subscription_ = broker_.subscribe("stream", coverage_, {"HAZARD", "IVIM", "PRIORITY"}, 0.0, [this](const cits::Message& m, const broker::Subscription&) {
    hub_.publish(json{{"type", "message"},
                      {"timestamp", now()},
                      {"msg_type", std::string(cits::msg_type(m))},
                      {"message", cits::to_json(m)}});
  });
}

Platform::~Platform() { hub_.close(); }

double Platform::now() const {
  std::lock_guard lock(clock_mu_);
  return clock_();
}

void Platform::set_clock(std::function<double()> clock) {
  std::lock_guard lock(clock_mu_);
  clock_ = std::move(clock);
}

bool Platform::ingest_cam(const cits::CamMessage& cam) {
  bool known = true;
  try {
    fleet_.vehicle(cam.vehicle_id);
  } catch (const fleet::UnknownEntity&) {
    known = false;
  }
  if (known) return fleet_.ingest_cam(cam);
  return geomessenger_.ingest_cam(cam);
}

void Platform::tick(double now) {
  std::lock_guard lock(tick_mu_);
  geomessenger_.tick(now);
  if (!last_reroute_check_ || now - *last_reroute_check_ >= config_.reroute_check_interval_s - 1e-9) {
    last_reroute_check_ = now;
    for (const auto& t : fleet_.trips()) {
      if (t.state != fleet::TripState::Active) continue;
      try {
        fleet_.maybe_reroute(t.trip_id, now);
      } catch (const fleet::Rejected&) {
        // The trip closed between listing and checking.
      }
    }
  }
  if (!config_.log_path.empty() && !config_.snapshot_path.empty() &&
      (!last_snapshot_ || now - *last_snapshot_ >= config_.snapshot_interval_s)) {
    last_snapshot_ = now;
    store_->snapshot(now);
  }
}

}  // namespace ctmaas
