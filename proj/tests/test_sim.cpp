#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <random>

#include "ctmaas/sim.hpp"
#include "sim_command.hpp"
#include "support/oracles.hpp"

using namespace ctmaas;
using namespace ctmaas::sim;
using nlohmann::json;
namespace oracle = ctmaas::oracle;

namespace {

GeoPoint north_of(const GeoPoint& p, double metres) {
  return GeoPoint{p.lat + metres / (6'371'000.0 * std::numbers::pi / 180.0), p.lon, 0.0};
}

const GeoPoint kP{40.0, 22.0};

/// P -x1-> Q -x2-> R, 1000 m each at 10 m/s, due north. Signal at Q on x1: green [0, 30) of 60.
Scenario line_scenario() {
  const GeoPoint q = north_of(kP, 1000), r = north_of(kP, 2000);
  Scenario s;
  s.name = "line";
  s.graph = road::load_graph(json{{"nodes",
                                   {{{"id", "P"}, {"lat", kP.lat}, {"lon", kP.lon}},
                                    {{"id", "Q"}, {"lat", q.lat}, {"lon", q.lon}},
                                    {{"id", "R"}, {"lat", r.lat}, {"lon", r.lon}}}},
                                  {"edges",
                                   {{{"id", "x1"}, {"from", "P"}, {"to", "Q"}, {"length_m", 1000}, {"free_flow_speed_ms", 10}},
                                    {{"id", "x2"}, {"from", "Q"}, {"to", "R"}, {"length_m", 1000}, {"free_flow_speed_ms", 10}}}}}
                                 .dump());
  s.plans.push_back(signal::SignalPlan{"sig-Q", q, 60.0, {signal::Approach{"x1", 0.0, 30.0}}});
  s.duration_s = 300;
  s.dt_s = 0.5;
  VehicleSpec v;
  v.label = "a";
  v.plate = "LN-1";
  v.depart = kP;
  v.stops.push_back(StopSpec{north_of(kP, 1500), std::nullopt, fleet::TaskKind::Delivery, 0.0});
  v.behavior.obeys_glosa = false;
  s.vehicles.push_back(v);
  return s;
}

void run_until(Simulation& sim, double t) {
  while (sim.time() < t - 1e-9) sim.step(std::min(sim.scenario().dt_s, t - sim.time()));
}

std::size_t sent_cams(const SimReport& r, const std::string& vehicle_id) {
  std::size_t n = 0;
  for (const auto& m : r.messages) {
    const auto* cam = std::get_if<cits::CamMessage>(&m.message);
    if (m.direction == "sent" && cam && cam->vehicle_id == vehicle_id) ++n;
  }
  return n;
}

std::filesystem::path scenario_path(const std::string& name) { return oracle::source_dir() / "scenarios" / name; }

struct TempDir {
  std::filesystem::path path;
  TempDir() {
    path = std::filesystem::temp_directory_path() / ("ctmaas-sim-" + std::to_string(std::random_device{}()));
    std::filesystem::create_directories(path);
  }
  ~TempDir() { std::filesystem::remove_all(path); }
};

}  // namespace

TEST(Kinematics, HalfSecondStepAtTenMetresPerSecond) {
  Simulation sim(line_scenario());
  sim.step(0.5);
  const auto& v = sim.vehicle("a");
  EXPECT_EQ(v.route, (std::vector<std::string>{"x1", "x2"}));
  EXPECT_DOUBLE_EQ(v.offset, 5.0);
  EXPECT_DOUBLE_EQ(v.speed, 10.0);
  run_until(sim, 10.0);
  EXPECT_NEAR(sim.vehicle("a").offset, 100.0, 1e-9);
}

TEST(Kinematics, RedLightHoldsVehicleAtTheLine) {
  Simulation sim(line_scenario());
  // Reaches Q at t = 100; 100 mod 60 = 40 is Red until 120.
  run_until(sim, 110.0);
  const auto& v = sim.vehicle("a");
  EXPECT_EQ(v.edge_index, 0u);
  EXPECT_NEAR(v.offset, 1000.0, 1e-9);
  EXPECT_TRUE(v.waiting_at_line);
  EXPECT_EQ(v.speed, 0.0);
  const auto r = sim.run();
  ASSERT_EQ(r.crossings.size(), 1u);
  EXPECT_NEAR(r.crossings[0].t, 120.0, 1e-9);
  EXPECT_EQ(r.crossings[0].phase, signal::Phase::Green);
  // 500 m more on x2 after the 20 s wait.
  ASSERT_TRUE(r.vehicle("a")->arrival_s);
  EXPECT_NEAR(*r.vehicle("a")->arrival_s, 170.0, 1e-9);
}

TEST(Kinematics, GreenArrivalIsNotDelayed) {
  auto s = line_scenario();
  s.plans[0].approaches[0] = signal::Approach{"x1", 30.0, 30.0};  // green [30, 60) mod 60, so t = 100 is Green
  const auto r = run(s);
  ASSERT_EQ(r.crossings.size(), 1u);
  EXPECT_NEAR(r.crossings[0].t, 100.0, 1e-9);
  EXPECT_NEAR(*r.vehicle("a")->arrival_s, 150.0, 1e-9);
}

TEST(Kinematics, GlosaCapArrivesOnGreenWithoutStopping) {
  auto s = line_scenario();
  s.vehicles[0].behavior.obeys_glosa = true;
  Simulation sim(s);
  // Consults 500 m before the line at t = 50.
  run_until(sim, 50.5);
  const auto& v = sim.vehicle("a");
  ASSERT_TRUE(v.glosa_cap);
  const auto sweep = oracle::glosa_sweep(s.plans[0], "x1", 500.0, s.start_time + 50.0, 5.0, 10.0);
  ASSERT_TRUE(sweep);
  EXPECT_GE(*v.glosa_cap, *sweep - 1e-9);
  EXPECT_LT(*v.glosa_cap, *sweep + 0.01);
  const auto r = sim.run();
  ASSERT_EQ(r.crossings.size(), 1u);
  EXPECT_EQ(r.crossings[0].phase, signal::Phase::Green);
  EXPECT_NEAR(r.crossings[0].t, 120.0, 0.1);
}

TEST(Kinematics, SlowEdgeSplitsTheStep) {
  auto s = line_scenario();
  s.disturbances.push_back(Disturbance{20.25, DisturbanceKind::SlowEdge, "x1", 0.5, "", 0.0, nullptr});
  Simulation sim(s);
  run_until(sim, 21.0);
  EXPECT_NEAR(sim.vehicle("a").offset, 202.5 + 0.75 * 5.0, 1e-9);
  EXPECT_DOUBLE_EQ(sim.truth().edge("x1").current_speed, 5.0);
}

TEST(Kinematics, StopVehicleHoldsThenResumes) {
  auto s = line_scenario();
  s.disturbances.push_back(Disturbance{10.0, DisturbanceKind::StopVehicle, "", 1.0, "a", 5.0, nullptr});
  Simulation sim(s);
  run_until(sim, 12.0);
  EXPECT_NEAR(sim.vehicle("a").offset, 100.0, 1e-9);
  EXPECT_EQ(sim.vehicle("a").speed, 0.0);
  run_until(sim, 20.0);
  EXPECT_NEAR(sim.vehicle("a").offset, 150.0, 1e-9);
}

TEST(Kinematics, DwellDelaysTheNextStop) {
  auto s = line_scenario();
  s.plans.clear();
  s.vehicles[0].stops.insert(s.vehicles[0].stops.begin(),
                             StopSpec{north_of(kP, 200), std::nullopt, fleet::TaskKind::Pickup, 7.0});
  s.vehicles[0].stops[1].dwell_s = 3.0;
  const auto r = run(s);
  const auto* v = r.vehicle("a");
  ASSERT_TRUE(v->arrival_s);
  EXPECT_NEAR(*v->arrival_s, 20.0 + 7.0 + 130.0, 1e-6);
  ASSERT_TRUE(v->completed_s);
  EXPECT_NEAR(*v->completed_s, *v->arrival_s + 3.0, 1e-6);
  ASSERT_TRUE(v->statistics);
}

TEST(Cams, OnePerIntervalWhileActive) {
  auto s = line_scenario();
  s.plans.clear();
  s.duration_s = 10.0;
  Simulation sim(s);
  const auto first = sim.step(0.5);
  ASSERT_EQ(first.size(), 1u);  // the departure CAM
  EXPECT_EQ(first[0].timestamp, s.start_time);
  const auto r = sim.run();
  // t = 0 at departure, then 1 .. 10.
  EXPECT_EQ(sent_cams(r, sim.vehicle("a").vehicle_id), 11u);
  double last = 0.0;
  for (const auto& m : r.messages)
    if (m.direction == "sent" && std::holds_alternative<cits::CamMessage>(m.message)) {
      EXPECT_GE(m.t, last);
      last = m.t;
    }
}

TEST(Cams, NoCamsAfterTheTripCloses) {
  auto s = line_scenario();
  s.plans.clear();
  s.duration_s = 200;
  const auto r = run(s);
  const auto* v = r.vehicle("a");
  ASSERT_TRUE(v->completed_s);
  for (const auto& m : r.messages)
    if (m.direction == "sent" && std::holds_alternative<cits::CamMessage>(m.message)) {
      EXPECT_LE(m.t, *v->completed_s + 1e-9);
    }
}

TEST(Cams, GpsNoiseIsSeededAndOnlyMovesReportedPositions) {
  auto s = line_scenario();
  s.plans.clear();
  s.duration_s = 20;
  s.vehicles[0].gps_noise_m = 5.0;
  auto positions = [](const SimReport& r) {
    std::vector<GeoPoint> out;
    for (const auto& m : r.messages)
      if (const auto* c = std::get_if<cits::CamMessage>(&m.message)) out.push_back(c->position);
    return out;
  };
  const auto a = run(s), b = run(s);
  EXPECT_EQ(to_json(a).dump(), to_json(b).dump());
  s.seed = 99;
  const auto c = run(s);
  EXPECT_NE(positions(a)[3].lat, positions(c)[3].lat);
  EXPECT_DOUBLE_EQ(a.vehicle("a")->odometer_m, c.vehicle("a")->odometer_m);
}

TEST(Eta, FreeFlowPredictionMatchesArrival) {
  auto s = line_scenario();
  s.plans.clear();
  const auto r = run(s);
  const auto* v = r.vehicle("a");
  ASSERT_TRUE(v->predicted_arrival_s && v->arrival_s && v->eta_error_s);
  EXPECT_NEAR(*v->arrival_s, 150.0, 1e-9);
  EXPECT_NEAR(*v->eta_error_s, 0.0, 0.01);
}

TEST(Scenarios, ShippedFilesLoad) {
  const auto c = load_scenario_file(scenario_path("congestion-reroute.json"));
  EXPECT_EQ(c.name, "congestion-reroute");
  EXPECT_EQ(c.vehicles.size(), 5u);
  EXPECT_EQ(c.seed, 7u);
  EXPECT_TRUE(c.platform.fleet.auto_apply);
  ASSERT_EQ(c.disturbances.size(), 1u);
  EXPECT_EQ(c.disturbances[0].edge_id, "e3");
  const auto p = load_scenario_file(scenario_path("priority.json"));
  EXPECT_FALSE(p.plans.empty());
  EXPECT_TRUE(p.vehicles[0].behavior.requests_priority);
  EXPECT_EQ(p.platform.priority.margin_s, 1.0);
}

TEST(Scenarios, InvalidDocumentsRejected) {
  const auto base = oracle::source_dir() / "scenarios";
  const json good = json::parse(std::ifstream(scenario_path("congestion-reroute.json")));
  auto expect_bad = [&](const json& doc, const std::string& why) {
    EXPECT_THROW(load_scenario(doc.dump(), base), ScenarioError) << why;
  };
  EXPECT_NO_THROW(load_scenario(good.dump(), base));
  EXPECT_THROW(load_scenario("{", base), ScenarioError);
  auto d = good;
  d["disturbances"][0]["edge_id"] = "nope";
  expect_bad(d, "unknown edge");
  d = good;
  d["disturbances"][0]["factor"] = 0;
  expect_bad(d, "zero factor");
  d = good;
  d["disturbances"][0]["at_s"] = 5000;
  expect_bad(d, "disturbance after the end");
  d = good;
  d["disturbances"][0] = json{{"at_s", 1}, {"kind", "StopVehicle"}, {"vehicle", "ghost"}, {"duration_s", 5}};
  expect_bad(d, "unknown vehicle");
  d = good;
  d["disturbances"][0]["kind"] = "Meteor";
  expect_bad(d, "unknown kind");
  d = good;
  d["vehicles"][1]["label"] = "v1";
  expect_bad(d, "duplicate label");
  d = good;
  d["vehicles"][0]["depart_s"] = 99999;
  expect_bad(d, "departure after the end");
  d = good;
  d["vehicles"][0]["stops"] = json::array();
  expect_bad(d, "no stops");
  d = good;
  d["graph"] = "missing.json";
  expect_bad(d, "missing graph");
  d = good;
  d["duration_s"] = 0;
  expect_bad(d, "zero duration");
  d = good;
  d["platform"]["auto_apply"] = "yes";
  expect_bad(d, "ill-typed override");
}

TEST(Scenarios, CongestionRunIsDeterministicAndConserving) {
  const auto s = load_scenario_file(scenario_path("congestion-reroute.json"));
  const auto a = run(s);
  const auto b = run(s);
  EXPECT_EQ(to_json(a).dump(), to_json(b).dump());
  for (const auto& v : a.vehicles) {
    ASSERT_TRUE(v.arrival_s) << v.label;
    EXPECT_NEAR(v.odometer_m, v.route_distance_m, 1e-6 * std::max(1.0, v.odometer_m)) << v.label;
    ASSERT_FALSE(v.final_route.empty());
    // Every walked route is connected in the ground-truth graph.
    for (std::size_t i = 0; i + 1 < v.final_route.size(); ++i)
      EXPECT_EQ(s.graph.edge(v.final_route[i]).to, s.graph.edge(v.final_route[i + 1]).from) << v.label;
    EXPECT_EQ(v.route_changes > 0, v.final_route != v.initial_route) << v.label;
  }
}

TEST(Scenarios, DisobedientVehicleKeepsItsRoute) {
  auto s = load_scenario_file(scenario_path("congestion-reroute.json"));
  for (auto& v : s.vehicles) v.behavior.obeys_reroute = false;
  const auto r = run(s);
  for (const auto& v : r.vehicles) {
    EXPECT_EQ(v.route_changes, 0) << v.label;
    EXPECT_EQ(v.final_route, v.initial_route) << v.label;
  }
}

TEST(Cli, RunScenarioWritesReport) {
  TempDir dir;
  const auto out = dir.path / "report.json";
  ASSERT_EQ(cli::run_scenario(scenario_path("priority.json").string(), out.string(), 5u), 0);
  std::ifstream in(out);
  ASSERT_TRUE(in);
  const auto j = json::parse(in);
  EXPECT_EQ(j["scenario"], "priority");
  EXPECT_EQ(j["seed"], 5);
  EXPECT_EQ(j["vehicles"].size(), 2u);
  EXPECT_FALSE(j["priority"].empty());
  EXPECT_EQ(cli::run_scenario((dir.path / "missing.json").string(), out.string(), std::nullopt), 2);
  EXPECT_EQ(cli::run_scenario(scenario_path("priority.json").string(), (dir.path / "no" / "such" / "r.json").string(),
                              std::nullopt),
            1);
}
