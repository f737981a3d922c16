#include <gtest/gtest.h>

#include "ctmaas/geomessenger.hpp"
#include "support/oracles.hpp"

using namespace ctmaas;
using namespace ctmaas::geomessenger;
namespace oracle = ctmaas::oracle;

namespace {

constexpr double T0 = 1'700'000'000.0;  // test times are offsets from here

struct Rig {
  road::LiveGraph graph{oracle::fixture_graph()};
  broker::Broker broker;
  UuidSource ids{42};
  Geomessenger gm{graph, broker, ids};

  cits::CamMessage cam_on(const std::string& edge, double fraction, const std::string& vehicle, double t,
                          double speed) {
    return graph.read([&](const road::RoadGraph& g) {
      const double len = g.edge(edge).length;
      return cits::CamMessage{"st-" + vehicle, vehicle, "", "", T0 + t, road::position_of(g, {edge, fraction * len}),
                              speed, road::heading_of(g, edge)};
    });
  }
  double ff(const std::string& edge) {
    return graph.read([&](const road::RoadGraph& g) { return g.edge(edge).free_flow_speed; });
  }
  std::vector<cits::Message> tick(double t) { return gm.tick(T0 + t); }
  Transition eval(const std::string& edge, double t) { return gm.evaluate_congestion(edge, T0 + t); }
  std::string reg(const TrafficEvent& e, double t) { return gm.register_event(e, T0 + t); }

  /// One CAM per vehicle, all at the given speed.
  void feed(const std::string& edge, int vehicles, double speed, double t) {
    for (int v = 0; v < vehicles; ++v)
      ASSERT_TRUE(gm.ingest_cam(cam_on(edge, 0.2 + 0.2 * v / vehicles, "v" + std::to_string(v), t, speed)));
  }
};

TrafficEvent event(EventCause cause, double from, double to) {
  TrafficEvent e;
  e.cause = cause;
  e.zone = cits::RelevanceZone{{40.0, 22.0}, 300};
  e.valid_from = T0 + from;
  e.valid_to = T0 + to;
  if (cause == EventCause::VmsFreeText) e.free_text = "slow down";
  return e;
}

}  // namespace

TEST(RegisterEvent, PlannedRoadWorksBecomesHazardWithSameZone) {
  Rig r;
  const auto e = event(EventCause::PlannedRoadWorks, 0, 600);
  r.reg(e, 0);
  const auto out = r.tick(0);
  ASSERT_EQ(out.size(), 1u);
  const auto& h = std::get<cits::HazardMessage>(out[0]);
  EXPECT_EQ(h.cause, cits::HazardCause::PlannedRoadWorks);
  EXPECT_EQ(h.zone, e.zone);
  EXPECT_EQ(h.valid_to, T0 + 600);
  EXPECT_EQ(cits::family_of(h.cause), cits::HazardFamily::RWW);
}

TEST(RegisterEvent, VmsFreeTextBecomesIvim) {
  Rig r;
  r.reg(event(EventCause::VmsFreeText, 0, 600), 0);
  const auto out = r.tick(1);
  ASSERT_EQ(out.size(), 1u);
  const auto& iv = std::get<cits::IvimMessage>(out[0]);
  EXPECT_EQ(iv.kind, cits::IvimKind::VmsFreeText);
  EXPECT_EQ(std::get<cits::payload::FreeText>(iv.payload).text, "slow down");
}

TEST(RegisterEvent, EveryCauseMapsToAValidMessage) {
  Rig r;
  for (int c = 0; c <= static_cast<int>(EventCause::Congestion); ++c) {
    const auto e = event(static_cast<EventCause>(c), 0, 60);
    const auto m = r.gm.message_for(e, r.ids.next());
    EXPECT_NO_THROW(cits::validate(m)) << to_string(e.cause);
    EXPECT_EQ(cits::msg_type(m) == "IVIM", e.cause == EventCause::Congestion || e.cause == EventCause::VmsFreeText);
  }
}

TEST(RegisterEvent, Rejections) {
  Rig r;
  EXPECT_THROW(r.reg(event(EventCause::ObstacleOnRoad, 0, 50), 100), EventRejected);
  EXPECT_THROW(r.reg(event(EventCause::ObstacleOnRoad, 60, 50), 0), cits::ValidationError);
  auto noisy = event(EventCause::ObstacleOnRoad, 0, 50);
  noisy.free_text = "no";
  EXPECT_THROW(r.reg(noisy, 0), cits::ValidationError);
  auto silent = event(EventCause::VmsFreeText, 0, 50);
  silent.free_text.reset();
  EXPECT_THROW(r.reg(silent, 0), cits::ValidationError);
  auto e = event(EventCause::ObstacleOnRoad, 0, 50);
  e.event_id = "evt-x";
  r.reg(e, 0);
  EXPECT_THROW(r.reg(e, 0), EventRejected);
  EXPECT_TRUE(r.gm.cancel_event("evt-x"));
  EXPECT_FALSE(r.gm.cancel_event("evt-x"));
}

TEST(EventJson, RoundTripAndViolations) {
  auto e = event(EventCause::VmsFreeText, 5, 50);
  e.event_id = "evt-1";
  e.source = EventSource::TMC;
  EXPECT_EQ(event_from_json(to_json(e)), e);
  try {
    event_from_json(nlohmann::json{{"cause", "Earthquake"}, {"valid_from", 0}});
    FAIL();
  } catch (const cits::ValidationError& err) {
    EXPECT_GE(err.violations().size(), 2u);
  }
}

TEST(Tick, RepeatsEveryTenSeconds) {
  Rig r;
  r.reg(event(EventCause::ObstacleOnRoad, 0, 600), 0);
  EXPECT_EQ(r.tick(0).size(), 1u);
  EXPECT_EQ(r.tick(5).size(), 0u);
  EXPECT_EQ(r.tick(10).size(), 1u);
}

TEST(Tick, EmptyAndExpired) {
  Rig r;
  EXPECT_TRUE(r.tick(0).empty());
  r.reg(event(EventCause::ObstacleOnRoad, 0, 7), 0);
  EXPECT_TRUE(r.tick(10).empty());
  EXPECT_TRUE(r.gm.active_events().empty());
}

TEST(Tick, NotBeforeValidFromAndPublishedThroughBroker) {
  Rig r;
  int delivered = 0;
  r.broker.subscribe("rsu", cits::RelevanceZone{{40.0, 22.0}, 100}, {"HAZARD"}, 0,
                     [&](const cits::Message&, const broker::Subscription&) { ++delivered; });
  r.reg(event(EventCause::ObstacleOnRoad, 20, 600), 0);
  EXPECT_TRUE(r.tick(10).empty());
  EXPECT_EQ(r.tick(20).size(), 1u);
  EXPECT_EQ(r.tick(30).size(), 1u);
  // same message id each repeat, so the broker delivers it once
  EXPECT_EQ(delivered, 1);
}

TEST(Tick, NoEmissionAfterValidToProperty) {
  std::mt19937_64 rng(17);
  for (int trial = 0; trial < 50; ++trial) {
    Rig r;
    std::map<std::string, TrafficEvent> registered;
    double now = 0;
    std::map<std::string, double> last;  // msg id -> last emission time
    for (int step = 0; step < 200; ++step) {
      if (oracle::coin(rng, 0.1)) {
        const double from = now + oracle::uniform(rng, -5, 30);
        auto e = event(EventCause::ObstacleOnRoad, from, from + oracle::uniform(rng, 1, 80));
        if (e.valid_to >= T0 + now) registered[r.reg(e, now)] = e;
      }
      now += oracle::uniform(rng, 0.5, 7);
      for (const auto& m : r.tick(now)) {
        const auto& h = std::get<cits::HazardMessage>(m);
        EXPECT_LE(h.valid_from, T0 + now);
        EXPECT_GE(h.valid_to, T0 + now);
        if (last.contains(h.msg_id)) EXPECT_GE(now - last[h.msg_id], 10 - 1e-6);
        last[h.msg_id] = now;
      }
      for (const auto& e : r.gm.active_events()) EXPECT_GE(e.valid_to, T0 + now);
    }
  }
}

TEST(IngestCam, SampleRecordedOnMatchedEdge) {
  Rig r;
  ASSERT_TRUE(r.gm.ingest_cam(r.cam_on("e3", 0.5, "v1", 100, 3)));
  const auto s = r.gm.congestion_state("e3");
  ASSERT_EQ(s.window_samples.size(), 1u);
  EXPECT_EQ(s.window_samples[0].speed, 3);
  EXPECT_EQ(s.window_samples[0].vehicle_id, "v1");
  EXPECT_DOUBLE_EQ(r.graph.read([](const road::RoadGraph& g) { return g.edge("e3").current_speed; }), 3);
}

TEST(IngestCam, OffNetworkDropped) {
  Rig r;
  cits::CamMessage far{"s", "v", "", "", T0, GeoPoint{41.0, 23.0}, 10, 0};
  EXPECT_FALSE(r.gm.ingest_cam(far));
  EXPECT_EQ(r.gm.dropped_cams(), 1u);
}

TEST(IngestCam, WindowKeepsOnlyLastMinute) {
  Rig r;
  r.gm.ingest_cam(r.cam_on("e3", 0.5, "v1", 0, 3));
  r.gm.ingest_cam(r.cam_on("e3", 0.5, "v1", 30, 4));
  r.gm.ingest_cam(r.cam_on("e3", 0.5, "v1", 61, 5));
  EXPECT_EQ(r.gm.congestion_state("e3").window_samples.size(), 2u);
}

TEST(Congestion, OnsetNeedsThreeVehiclesBelowThreshold) {
  {
    Rig r;
    r.feed("e3", 3, 0.39 * r.ff("e3"), 100);
    EXPECT_EQ(r.eval("e3", 100), Transition::Onset);
    const auto s = r.gm.congestion_state("e3");
    EXPECT_TRUE(s.congested);
    EXPECT_EQ(*s.since, T0 + 100);
    const auto events = r.gm.active_events();
    ASSERT_EQ(events.size(), 1u);
    EXPECT_EQ(events[0].cause, EventCause::Congestion);
    EXPECT_EQ(events[0].source, EventSource::AutoDetected);
    const auto out = r.tick(100);
    ASSERT_EQ(out.size(), 1u);
    EXPECT_EQ(std::get<cits::IvimMessage>(out[0]).kind, cits::IvimKind::TrafficCongestion);
  }
  {
    Rig r;
    r.feed("e3", 2, 0.39 * r.ff("e3"), 100);
    EXPECT_EQ(r.eval("e3", 100), Transition::None);
  }
  {
    Rig r;
    r.feed("e3", 3, 0.41 * r.ff("e3"), 100);
    EXPECT_EQ(r.eval("e3", 100), Transition::None);
  }
}

TEST(Congestion, HysteresisAndClearance) {
  Rig r;
  r.feed("e3", 3, 0.3 * r.ff("e3"), 100);
  ASSERT_EQ(r.eval("e3", 100), Transition::Onset);
  r.feed("e3", 3, 0.5 * r.ff("e3"), 170);
  EXPECT_EQ(r.eval("e3", 170), Transition::None);
  EXPECT_TRUE(r.gm.congestion_state("e3").congested);
  r.feed("e3", 3, 0.65 * r.ff("e3"), 240);
  EXPECT_EQ(r.eval("e3", 240), Transition::Clearance);
  EXPECT_FALSE(r.gm.congestion_state("e3").congested);
  EXPECT_TRUE(r.gm.active_events().empty());
}

TEST(Congestion, SilenceClears) {
  Rig r;
  r.feed("e3", 3, 0.3 * r.ff("e3"), 100);
  r.tick(100);
  EXPECT_TRUE(r.gm.congestion_state("e3").congested);
  r.tick(150);
  EXPECT_TRUE(r.gm.congestion_state("e3").congested);
  r.tick(220);
  EXPECT_FALSE(r.gm.congestion_state("e3").congested);
}

TEST(Congestion, NoFlappingInsideBand) {
  std::mt19937_64 rng(23);
  for (int trial = 0; trial < 40; ++trial) {
    Rig r;
    const double ff = r.ff("e3");
    bool congested = oracle::coin(rng);
    double t = 100;
    if (congested) {
      r.feed("e3", 3, 0.2 * ff, t);
      ASSERT_EQ(r.eval("e3", t), Transition::Onset);
    }
    for (int step = 0; step < 30; ++step) {
      t += 61;  // fresh window each step
      const int vehicles = oracle::uniform_int(rng, 1, 5);
      r.feed("e3", vehicles, oracle::uniform(rng, 0.401, 0.599) * ff, t);
      EXPECT_EQ(r.eval("e3", t), Transition::None) << "trial " << trial << " step " << step;
      EXPECT_EQ(r.gm.congestion_state("e3").congested, congested);
    }
  }
}

TEST(Congestion, AdvisoryRenewedWhileCongested) {
  Rig r;
  const double ff = r.ff("e3");
  double t = 100;
  r.feed("e3", 3, 0.2 * ff, t);
  r.tick(t);
  for (; t <= 400; t += 10) {
    r.feed("e3", 3, 0.2 * ff, t);
    r.tick(t);
    const auto events = r.gm.active_events();
    ASSERT_EQ(events.size(), 1u) << t;
    EXPECT_GE(events[0].valid_to, T0 + t);
  }
}
