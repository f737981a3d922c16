#include <gtest/gtest.h>

#include <atomic>
#include <chrono>
#include <thread>

#include "ctmaas/road_graph.hpp"
#include "support/oracles.hpp"

using namespace ctmaas;
using namespace ctmaas::road;
using ctmaas::oracle::enumerate_paths;
using ctmaas::oracle::fixture_graph;
using ctmaas::oracle::random_graph;
using ctmaas::oracle::ref_distance;
using ctmaas::oracle::route_consistent;

namespace {

constexpr const char* kTwoNodes = R"({
  "nodes": [{"id": "A", "lat": 0.0, "lon": 0.0}, {"id": "B", "lat": 0.0, "lon": 0.009}],
  "edges": [{"id": "e1", "from": "A", "to": "B", "length_m": 1000, "free_flow_speed_ms": 10}]
})";

RoadGraph line_graph(double length, double speed) {
  return RoadGraph({{"A", {0.0, 0.0}}, {"B", {0.0, 0.01}}}, {{"e1", "A", "B", length, speed, speed}});
}

}  // namespace

TEST(LoadGraph, MinimalGraph) {
  auto g = load_graph(kTwoNodes);
  ASSERT_EQ(g.edges().size(), 1u);
  auto out = g.out_edges("A");
  ASSERT_EQ(out.size(), 1u);
  EXPECT_EQ(g.edge_at(out[0]).id, "e1");
  EXPECT_TRUE(g.out_edges("B").empty());
  EXPECT_DOUBLE_EQ(g.edge("e1").current_speed, 10.0);
}

TEST(LoadGraph, DanglingEndpointNamesTheNode) {
  try {
    load_graph(R"({"nodes":[{"id":"A","lat":0,"lon":0}],
                   "edges":[{"id":"e1","from":"A","to":"X","length_m":10,"free_flow_speed_ms":5}]})");
    FAIL() << "expected GraphError";
  } catch (const GraphError& e) {
    EXPECT_EQ(e.element(), "X");
  }
}

TEST(LoadGraph, RejectsBadLengthSpeedAndSyntax) {
  auto element_of = [](const char* doc) {
    try {
      load_graph(doc);
    } catch (const GraphError& e) {
      return e.element();
    }
    return std::string("<accepted>");
  };
  EXPECT_EQ(element_of(R"({"nodes":[{"id":"A","lat":0,"lon":0},{"id":"B","lat":0,"lon":1}],
      "edges":[{"id":"bad","from":"A","to":"B","length_m":0,"free_flow_speed_ms":5}]})"),
            "bad");
  EXPECT_EQ(element_of(R"({"nodes":[{"id":"A","lat":0,"lon":0},{"id":"B","lat":0,"lon":1}],
      "edges":[{"id":"slow","from":"A","to":"B","length_m":10,"free_flow_speed_ms":-1}]})"),
            "slow");
  EXPECT_EQ(element_of(R"({"nodes":[{"id":"A","lat":0,"lon":0}],
      "edges":[{"id":"loop","from":"A","to":"A","length_m":10,"free_flow_speed_ms":5}]})"),
            "loop");
  EXPECT_THROW(load_graph("{\"nodes\": ["), GraphError);
}

TEST(LoadGraph, FixtureHasSixNodesNineEdges) {
  auto g = fixture_graph();
  EXPECT_EQ(g.nodes().size(), 6u);
  EXPECT_EQ(g.edges().size(), 9u);
}

TEST(Haversine, Examples) {
  EXPECT_DOUBLE_EQ(haversine_distance({0, 0}, {0, 0}), 0.0);
  // R times one degree in radians
  const double oracle = 6'371'000.0 * 3.14159265358979323846 / 180.0;
  EXPECT_NEAR(haversine_distance({0, 0}, {0, 1}), oracle, 1e-6);
  EXPECT_NEAR(haversine_distance({0, 0}, {0, 1}), 111'195.0, 1.0);
}

TEST(Haversine, MetricProperties) {
  std::mt19937_64 rng(42);
  for (int i = 0; i < 2000; ++i) {
    GeoPoint a{oracle::uniform(rng, -89, 89), oracle::uniform(rng, -179, 179)};
    GeoPoint b{oracle::uniform(rng, -89, 89), oracle::uniform(rng, -179, 179)};
    GeoPoint c{oracle::uniform(rng, -89, 89), oracle::uniform(rng, -179, 179)};
    const double ab = haversine_distance(a, b), ba = haversine_distance(b, a);
    EXPECT_GE(ab, 0.0);
    EXPECT_DOUBLE_EQ(ab, ba);
    EXPECT_GT(ab, 0.0);
    EXPECT_LE(haversine_distance(a, c), (ab + haversine_distance(b, c)) * (1 + 1e-6));
    EXPECT_NEAR(ab, ref_distance(a, b), 1e-6 * std::max(1.0, ab));
  }
}

TEST(EdgeTravelTime, Arithmetic) {
  RoadEdge e{"e", "A", "B", 1000, 10, 10};
  EXPECT_DOUBLE_EQ(edge_travel_time(e), 100.0);
  RoadEdge f{"f", "A", "B", 500, 25, 25};
  EXPECT_DOUBLE_EQ(edge_travel_time(f), 20.0);
  e.current_speed = 5;
  EXPECT_DOUBLE_EQ(edge_travel_time(e), 200.0);
}

TEST(ShortestPath, SameNodeIsEmpty) {
  auto g = fixture_graph();
  auto r = shortest_path(g, "C", "C");
  EXPECT_TRUE(r.edge_ids.empty());
  EXPECT_EQ(r.total_time, 0.0);
  EXPECT_EQ(r.total_length, 0.0);
}

TEST(ShortestPath, PicksFasterParallelEdge) {
  RoadGraph g({{"A", {0, 0}}, {"B", {0, 0.01}}},
              {{"slow", "A", "B", 1000, 10, 10}, {"fast", "A", "B", 1000, 12.5, 12.5}});
  auto r = shortest_path(g, "A", "B");
  ASSERT_EQ(r.edge_ids, std::vector<std::string>{"fast"});
  EXPECT_DOUBLE_EQ(r.total_time, 80.0);
}

TEST(ShortestPath, NoPathIsAnError) {
  auto g = line_graph(1000, 10);
  EXPECT_THROW(shortest_path(g, "B", "A"), NoPathError);
  EXPECT_THROW(shortest_path(g, "A", "Z"), UnknownElementError);
}

TEST(ShortestPath, FixtureMatchesEnumerationForAllPairs) {
  auto g = fixture_graph();
  for (const auto& a : g.nodes())
    for (const auto& b : g.nodes()) {
      auto oracle = enumerate_paths(g, a.id, b.id);
      ASSERT_TRUE(oracle.best_time) << a.id << "->" << b.id;
      auto r = shortest_path(g, a.id, b.id);
      EXPECT_NEAR(r.total_time, *oracle.best_time, 1e-9 * std::max(1.0, *oracle.best_time));
      EXPECT_TRUE(route_consistent(g, r, a.id, b.id));
    }
  auto af = shortest_path(g, "A", "F");
  EXPECT_EQ(af.edge_ids, (std::vector<std::string>{"e2", "e4", "e6"}));
}

TEST(ShortestPath, RandomGraphsMatchEnumeration) {
  std::mt19937_64 rng(20240601);
  for (int round = 0; round < 300; ++round) {
    auto g = random_graph(rng);
    for (const auto& a : g.nodes())
      for (const auto& b : g.nodes()) {
        auto oracle = enumerate_paths(g, a.id, b.id);
        if (!oracle.best_time) {
          EXPECT_THROW(shortest_path(g, a.id, b.id), NoPathError);
          continue;
        }
        auto r = shortest_path(g, a.id, b.id);
        ASSERT_NEAR(r.total_time, *oracle.best_time, 1e-9 * std::max(1.0, *oracle.best_time))
            << "round " << round << " " << a.id << "->" << b.id;
        ASSERT_TRUE(route_consistent(g, r, a.id, b.id));
        ASSERT_NE(std::find(oracle.best_paths.begin(), oracle.best_paths.end(), r.edge_ids), oracle.best_paths.end());
        ASSERT_EQ(shortest_path(g, a.id, b.id).edge_ids, r.edge_ids);
      }
  }
}

TEST(ShortestPath, RaisingSpeedNeverSlowsAnyPair) {
  auto base = fixture_graph();
  for (const auto& e : base.edges()) base.set_current_speed(e.id, e.free_flow_speed * 0.3);
  for (const auto& e : base.edges()) {
    auto faster = base;
    faster.set_current_speed(e.id, e.free_flow_speed);
    for (const auto& a : base.nodes())
      for (const auto& b : base.nodes())
        EXPECT_LE(shortest_path(faster, a.id, b.id).total_time, shortest_path(base, a.id, b.id).total_time + 1e-9);
  }
}

TEST(MapMatch, EdgeMidpoint) {
  auto g = fixture_graph();
  const auto& e = g.edge("e7");
  const GeoPoint mid = interpolate(g.edge_from_position(e), g.edge_to_position(e), 0.5);
  auto m = map_match(g, mid);
  EXPECT_EQ(m.edge_id, "e7");
  EXPECT_NEAR(m.offset, e.length / 2, 1.0);
  EXPECT_TRUE(m.on_network);
}

TEST(MapMatch, SharedNodeTieGoesToSmallerId) {
  auto g = fixture_graph();
  auto m = map_match(g, g.node("A").position);
  EXPECT_EQ(m.edge_id, "e1");
}

TEST(MapMatch, OffNetworkIsAResultNotAnError) {
  auto g = fixture_graph();
  auto m = map_match(g, GeoPoint{40.1, 22.5});
  EXPECT_FALSE(m.on_network);
  EXPECT_GT(m.lateral_distance, kOffNetworkDistanceM);
}

TEST(MapMatch, RandomPointsMatchNearestSegmentScan) {
  auto g = fixture_graph();
  std::mt19937_64 rng(7);
  for (int i = 0; i < 1000; ++i) {
    GeoPoint p{oracle::uniform(rng, 39.99, 40.01), oracle::uniform(rng, 21.995, 22.045)};
    // planar projection around p, written independently
    const double k = 6'371'000.0 * 3.14159265358979323846 / 180.0;
    auto xy = [&](const GeoPoint& q) {
      return std::pair{(q.lon - p.lon) * k * std::cos(p.lat * 3.14159265358979323846 / 180.0), (q.lat - p.lat) * k};
    };
    double best = std::numeric_limits<double>::infinity();
    std::string best_id;
    for (const auto& e : g.edges()) {
      auto [ax, ay] = xy(g.node(e.from).position);
      auto [bx, by] = xy(g.node(e.to).position);
      const double dx = bx - ax, dy = by - ay;
      const double t = std::clamp(-(ax * dx + ay * dy) / (dx * dx + dy * dy), 0.0, 1.0);
      const double d = std::hypot(ax + t * dx, ay + t * dy);
      if (d < best - 1e-6) {
        best = d;
        best_id = e.id;
      }
    }
    auto m = map_match(g, p);
    EXPECT_NEAR(m.lateral_distance, best, 1e-6);
    EXPECT_EQ(m.edge_id, best_id);
    EXPECT_EQ(m.on_network, best <= 100.0);
  }
}

TEST(UpdateEdgeSpeed, Examples) {
  auto mk = [](double current) {
    return RoadGraph({{"A", {0, 0}}, {"B", {0, 0.01}}}, {{"e1", "A", "B", 1000, 25, current}});
  };
  auto s = [](double speed, double t) { return SpeedSample{"e1", t, speed, "v"}; };
  {
    auto g = mk(25);
    std::vector<SpeedSample> v{s(10, 100), s(10, 110), s(10, 120)};
    EXPECT_DOUBLE_EQ(update_edge_speed(g, "e1", v, 120), 10.0);
  }
  {
    auto g = mk(25);
    std::vector<SpeedSample> v{s(30, 100), s(30, 110)};
    EXPECT_DOUBLE_EQ(update_edge_speed(g, "e1", v, 120), 25.0);
  }
  {
    auto g = mk(5);
    EXPECT_DOUBLE_EQ(update_edge_speed(g, "e1", {}, 120), 15.0);
    std::vector<SpeedSample> old{s(3, 10)};
    EXPECT_DOUBLE_EQ(update_edge_speed(g, "e1", old, 120), 20.0);
  }
  {
    auto g = mk(25);
    std::vector<SpeedSample> v{s(0, 119)};
    EXPECT_DOUBLE_EQ(update_edge_speed(g, "e1", v, 120), 0.5);
    EXPECT_THROW(update_edge_speed(g, "nope", v, 120), UnknownElementError);
  }
}

TEST(PredictTravelTime, Examples) {
  std::vector<TimedValue> constant{{0, 100}, {60, 100}, {120, 100}};
  EXPECT_DOUBLE_EQ(predict_travel_time(constant, 300), 100.0);
  std::vector<TimedValue> two{{0, 100}, {60, 200}};
  EXPECT_DOUBLE_EQ(predict_travel_time(two, 300), 0.3 * 200 + 0.7 * 100);
  std::vector<TimedValue> one{{0, 80}};
  EXPECT_DOUBLE_EQ(predict_travel_time(one, 0), 80.0);
  EXPECT_DOUBLE_EQ(predict_travel_time(two, 0), predict_travel_time(two, 3600));
  EXPECT_THROW(predict_travel_time(std::vector<TimedValue>{}, 10), std::invalid_argument);
}

TEST(PredictTravelTime, StaysWithinHistoryRange) {
  std::mt19937_64 rng(3);
  for (int i = 0; i < 1000; ++i) {
    std::vector<TimedValue> h;
    const int n = oracle::uniform_int(rng, 1, 30);
    for (int k = 0; k < n; ++k) h.push_back({k * 10.0, oracle::uniform(rng, 1, 1000)});
    const auto [lo, hi] = std::minmax_element(h.begin(), h.end(),
                                              [](const auto& a, const auto& b) { return a.value < b.value; });
    const double p = predict_travel_time(h, 60);
    EXPECT_GE(p, lo->value - 1e-9);
    EXPECT_LE(p, hi->value + 1e-9);
  }
}

TEST(Legs, PartialEdgesAndRemainingTime) {
  auto g = line_graph(1000, 10);
  auto leg = plan_leg(g, {"e1", 0}, {"e1", 1000});
  EXPECT_DOUBLE_EQ(leg.time, 100.0);
  EXPECT_DOUBLE_EQ(leg_remaining_time(g, leg, 0, 500), 50.0);
  EXPECT_DOUBLE_EQ(leg_remaining_length(g, leg, 0, 500), 500.0);

  auto f = fixture_graph();
  auto l2 = plan_leg(f, {"e1", 100}, {"e9", 300});
  EXPECT_EQ(l2.edge_ids.front(), "e1");
  EXPECT_EQ(l2.edge_ids.back(), "e9");
  double expect = (f.edge("e1").length - 100) / f.edge("e1").current_speed + 300 / f.edge("e9").current_speed;
  for (std::size_t i = 1; i + 1 < l2.edge_ids.size(); ++i) expect += edge_travel_time(f.edge(l2.edge_ids[i]));
  EXPECT_NEAR(l2.time, expect, 1e-9);
}

TEST(LiveGraph, ReadersNeverSeeATornUpdate) {
  LiveGraph live(fixture_graph());
  std::atomic<bool> stop{false};
  std::atomic<int> torn{0};
  std::thread writer([&] {
    for (int i = 0; i < 2000; ++i) {
      const double f = (i % 2) ? 0.5 : 1.0;
      live.write([&](RoadGraph& g) {
        for (const auto& e : g.edges()) g.set_current_speed(e.id, e.free_flow_speed * f);
      });
    }
    stop = true;
  });
  std::vector<std::thread> readers;
  for (int r = 0; r < 4; ++r)
    readers.emplace_back([&] {
      while (!stop) {
        live.read([&](const RoadGraph& g) {
          const double f0 = g.edges()[0].current_speed / g.edges()[0].free_flow_speed;
          for (const auto& e : g.edges())
            if (std::fabs(e.current_speed / e.free_flow_speed - f0) > 1e-12) ++torn;
          return 0;
        });
      }
    });
  writer.join();
  for (auto& t : readers) t.join();
  EXPECT_EQ(torn.load(), 0);
}
