#include <gtest/gtest.h>

#include <atomic>
#include <cmath>
#include <thread>

#include "ctmaas/signal.hpp"
#include "support/oracles.hpp"

using namespace ctmaas;
using namespace ctmaas::signal;
namespace oracle = ctmaas::oracle;

namespace {

SignalPlan one_approach(double cycle, double start, double duration) {
  SignalPlan p;
  p.intersection_id = "sig-1";
  p.position = GeoPoint{40.0, 22.0};
  p.cycle_s = cycle;
  p.approaches.push_back(Approach{"a", start, duration});
  return p;
}

cits::PriorityMessage request(UuidSource& ids, const std::string& vehicle, const std::string& approach,
                              double arrival) {
  return cits::PriorityMessage{ids.next(), cits::PriorityDirection::Request, vehicle, "sig-D", approach, arrival,
                               std::nullopt};
}

}  // namespace

TEST(SignalState, Examples) {
  const auto plan = one_approach(60, 0, 30);
  auto s = signal_state(plan, "a", 0);
  EXPECT_EQ(s.phase, Phase::Green);
  EXPECT_DOUBLE_EQ(s.seconds_until_change, 30);
  s = signal_state(plan, "a", 30);
  EXPECT_EQ(s.phase, Phase::Red);
  EXPECT_DOUBLE_EQ(s.seconds_until_change, 30);
  s = signal_state(plan, "a", 75);
  EXPECT_EQ(s.phase, Phase::Green);
  EXPECT_DOUBLE_EQ(s.seconds_until_change, 15);
}

TEST(SignalState, WrappingWindowAndAlwaysGreen) {
  const auto wrap = one_approach(60, 50, 20);
  EXPECT_TRUE(is_green(wrap, "a", 55));
  EXPECT_TRUE(is_green(wrap, "a", 5));
  EXPECT_FALSE(is_green(wrap, "a", 10));
  EXPECT_DOUBLE_EQ(signal_state(wrap, "a", 55).seconds_until_change, 15);
  const auto full = one_approach(60, 0, 60);
  const auto s = signal_state(full, "a", 1234.5);
  EXPECT_EQ(s.phase, Phase::Green);
  EXPECT_TRUE(std::isinf(s.seconds_until_change));
}

TEST(SignalState, UnknownApproachThrows) {
  EXPECT_THROW(signal_state(one_approach(60, 0, 30), "zz", 0), UnknownApproach);
}

TEST(SignalState, PeriodicAndAgreesWithIndependentCheck) {
  std::mt19937_64 rng(11);
  for (int i = 0; i < 300; ++i) {
    const auto plan = oracle::random_plan(rng);
    for (const auto& a : plan.approaches) {
      for (int k = 0; k < 20; ++k) {
        const double t = std::round(oracle::uniform(rng, 0, 1000) * 4) / 4;  // quarter seconds stay exact
        const auto s0 = signal_state(plan, a.id, t);
        const auto s1 = signal_state(plan, a.id, t + plan.cycle_s);
        EXPECT_EQ(s0.phase, s1.phase);
        EXPECT_EQ(s0.phase == Phase::Green, oracle::ref_green(plan, a.id, t)) << a.id << " t=" << t;
        if (!std::isfinite(s0.seconds_until_change)) continue;
        EXPECT_NEAR(s0.seconds_until_change, s1.seconds_until_change, 1e-9);
        EXPECT_GT(s0.seconds_until_change, 0);
        EXPECT_LE(s0.seconds_until_change, plan.cycle_s);
        // just before the change the phase holds, at the change it flips
        const double change = t + s0.seconds_until_change;
        EXPECT_EQ(oracle::ref_green(plan, a.id, change - 1e-6), s0.phase == Phase::Green);
        EXPECT_NE(oracle::ref_green(plan, a.id, change), s0.phase == Phase::Green);
      }
    }
  }
}

TEST(ValidatePlan, RejectsMalformed) {
  EXPECT_THROW(validate_plan(one_approach(0, 0, 10)), SignalError);
  EXPECT_THROW(validate_plan(one_approach(60, 60, 10)), SignalError);
  EXPECT_THROW(validate_plan(one_approach(60, 0, 0)), SignalError);
  EXPECT_THROW(validate_plan(one_approach(60, 0, 61)), SignalError);
  auto dup = one_approach(60, 0, 30);
  dup.approaches.push_back(dup.approaches[0]);
  EXPECT_THROW(validate_plan(dup), SignalError);
}

TEST(LoadPlans, Fixture) {
  const auto plans = oracle::fixture_plans();
  ASSERT_EQ(plans.size(), 2u);
  EXPECT_EQ(plans[0].intersection_id, "sig-D");
  EXPECT_EQ(plans[0].approaches.size(), 2u);
  EXPECT_THROW(load_signal_plans(R"({"intersections":[{"id":"x"}]})"), SignalError);
  const auto round = load_signal_plans(nlohmann::json{{"intersections", {to_json(plans[1])}}}.dump());
  EXPECT_EQ(round[0].approaches[1].green_start_s, 30);
}

TEST(Glosa, Examples) {
  const auto plan = one_approach(60, 0, 30);
  EXPECT_DOUBLE_EQ(*glosa_advice(plan, "a", 300, 0, 5, 15), 15);
  const auto late = one_approach(60, 25, 5);
  const auto v = glosa_advice(late, "a", 300, 0, 5, 15);
  ASSERT_TRUE(v);
  EXPECT_NEAR(*v, 12.0, 1e-9);
  EXPECT_TRUE(is_green(late, "a", 300 / *v));
  EXPECT_DOUBLE_EQ(*glosa_advice(one_approach(60, 0, 60), "a", 300, 17, 5, 13.9), 13.9);
}

TEST(Glosa, NoFeasibleSpeed) {
  // arriving at 10..20 s, green only in [40, 45)
  EXPECT_FALSE(glosa_advice(one_approach(60, 40, 5), "a", 200, 0, 10, 20));
}

TEST(Glosa, InvalidInputs) {
  const auto plan = one_approach(60, 0, 30);
  EXPECT_THROW(glosa_advice(plan, "a", 300, 0, 0, 10), InvalidSpeedBounds);
  EXPECT_THROW(glosa_advice(plan, "a", 300, 0, 12, 10), InvalidSpeedBounds);
  EXPECT_THROW(glosa_advice(plan, "a", 0, 0, 5, 10), InvalidSpeedBounds);
  EXPECT_THROW(glosa_advice(plan, "zz", 300, 0, 5, 10), UnknownApproach);
}

TEST(Glosa, RandomPlansSoundAndMaximal) {
  std::mt19937_64 rng(99);
  int advised = 0;
  for (int i = 0; i < 2000; ++i) {
    const auto plan = oracle::random_plan(rng);
    const auto& a = plan.approaches[oracle::uniform_int(rng, 0, static_cast<int>(plan.approaches.size()) - 1)];
    const double d = oracle::uniform(rng, 20, 800);
    const double t = oracle::uniform(rng, 0, 500);
    const double vmin = std::round(oracle::uniform(rng, 1, 8) * 100) / 100;
    const double vmax = std::round(oracle::uniform(rng, vmin + 0.5, 30) * 100) / 100;
    const auto got = glosa_advice(plan, a.id, d, t, vmin, vmax);
    const auto sweep = oracle::glosa_sweep(plan, a.id, d, t, vmin, vmax);
    if (got) {
      ++advised;
      EXPECT_GE(*got, vmin);
      EXPECT_LE(*got, vmax);
      EXPECT_TRUE(oracle::ref_green(plan, a.id, t + d / *got)) << "case " << i;
      EXPECT_LE(t + d / *got, t + 2 * plan.cycle_s + 1e-9);
    }
    if (sweep) {
      ASSERT_TRUE(got) << "case " << i << " sweep found " << *sweep;
      EXPECT_GE(*got, *sweep - 1e-9) << "case " << i;
      EXPECT_LT(*got, *sweep + 0.01) << "case " << i;
    }
  }
  EXPECT_GT(advised, 500);
}

TEST(Priority, ArrivalInGreenGrantedWithoutExtension) {
  UuidSource ids(3);
  broker::Broker b;
  SignalController c(oracle::fixture_plans(), &b, ids);
  const auto r = c.request_priority(request(ids, "bus-1", "e3", 20), 5);
  EXPECT_EQ(r.direction, cits::PriorityDirection::Response);
  EXPECT_EQ(r.verdict, cits::PriorityVerdict::Granted);
  EXPECT_FALSE(c.active_grant("sig-D", 5));
  EXPECT_TRUE(c.grant_history().empty());
}

TEST(Priority, ShortRedArrivalGetsExtension) {
  UuidSource ids(3);
  SignalController c(oracle::fixture_plans(), nullptr, ids);
  EXPECT_EQ(c.state("sig-D", "e3", 38).phase, Phase::Red);
  const auto r = c.request_priority(request(ids, "bus-1", "e3", 38), 25);
  EXPECT_EQ(r.verdict, cits::PriorityVerdict::Granted);
  const auto g = c.active_grant("sig-D", 25);
  ASSERT_TRUE(g);
  EXPECT_DOUBLE_EQ(g->extension_s, 8 + c.config().margin_s);
  EXPECT_DOUBLE_EQ(g->green_end, 30);
  EXPECT_EQ(c.state("sig-D", "e3", 38).phase, Phase::Green);
  EXPECT_EQ(c.state("sig-D", "e3", 38.5).phase, Phase::Red);
  EXPECT_FALSE(c.active_grant("sig-D", 38.5));
}

TEST(Priority, MarginAddedAndCapped) {
  UuidSource ids(3);
  SignalController c(oracle::fixture_plans(), nullptr, ids, PriorityConfig{15, 2, 1});
  c.request_priority(request(ids, "bus-1", "e3", 38), 25);
  EXPECT_DOUBLE_EQ(c.active_grant("sig-D", 25)->extension_s, 10);
  UuidSource ids2(4);
  SignalController tight(oracle::fixture_plans(), nullptr, ids2, PriorityConfig{15, 0, 1});
  EXPECT_EQ(tight.request_priority(request(ids2, "bus-1", "e3", 50), 25).verdict, cits::PriorityVerdict::Denied);
}

TEST(Priority, SecondRequestWhileGrantActiveDenied) {
  UuidSource ids(3);
  SignalController c(oracle::fixture_plans(), nullptr, ids);
  EXPECT_EQ(c.request_priority(request(ids, "bus-1", "e3", 38), 25).verdict, cits::PriorityVerdict::Granted);
  EXPECT_EQ(c.request_priority(request(ids, "bus-2", "e3", 36), 26).verdict, cits::PriorityVerdict::Denied);
  EXPECT_EQ(c.request_priority(request(ids, "bus-3", "e8", 40), 27).verdict, cits::PriorityVerdict::Denied);
  EXPECT_EQ(c.grant_history().size(), 1u);
  // after expiry the intersection accepts requests again
  EXPECT_EQ(c.request_priority(request(ids, "bus-4", "e3", 95), 85).verdict, cits::PriorityVerdict::Granted);
  EXPECT_EQ(c.grant_history().size(), 2u);
}

TEST(Priority, RejectsBadRequests) {
  UuidSource ids(3);
  SignalController c(oracle::fixture_plans(), nullptr, ids);
  EXPECT_THROW(c.request_priority(request(ids, "bus-1", "e3", 10), 20), ArrivalInPast);
  EXPECT_THROW(c.request_priority(request(ids, "bus-1", "zz", 30), 20), UnknownApproach);
  auto r = request(ids, "bus-1", "e3", 30);
  r.intersection_id = "sig-Q";
  EXPECT_THROW(c.request_priority(r, 20), SignalError);
  r = request(ids, "bus-1", "e3", 30);
  r.direction = cits::PriorityDirection::Response;
  r.verdict = cits::PriorityVerdict::Granted;
  EXPECT_THROW(c.request_priority(r, 20), SignalError);
}

TEST(Priority, ResponsePublishedAtIntersection) {
  UuidSource ids(3);
  broker::Broker b;
  int seen = 0;
  const auto plans = oracle::fixture_plans();
  b.subscribe("bus", cits::RelevanceZone{plans[0].position, 50}, {"PRIORITY"}, 0,
              [&](const cits::Message& m, const broker::Subscription&) {
                EXPECT_EQ(std::get<cits::PriorityMessage>(m).direction, cits::PriorityDirection::Response);
                ++seen;
              });
  SignalController c(plans, &b, ids);
  c.request_priority(request(ids, "bus-1", "e3", 38), 25);
  c.request_priority(request(ids, "bus-2", "e3", 39), 25);
  EXPECT_EQ(seen, 2);
}

TEST(Priority, ConcurrentRequestsYieldExactlyOneGrant) {
  for (int round = 0; round < 50; ++round) {
    UuidSource ids(round + 1);
    SignalController c(oracle::fixture_plans(), nullptr, ids);
    std::vector<cits::PriorityMessage> reqs;
    for (int i = 0; i < 8; ++i) reqs.push_back(request(ids, "bus-" + std::to_string(i), "e3", 35 + i % 3));
    std::atomic<int> granted{0};
    std::vector<std::thread> ts;
    for (int i = 0; i < 8; ++i)
      ts.emplace_back([&, i] {
        if (c.request_priority(reqs[i], 25).verdict == cits::PriorityVerdict::Granted) ++granted;
      });
    for (auto& t : ts) t.join();
    EXPECT_EQ(c.grant_history().size(), 1u);
    EXPECT_EQ(granted.load(), 1);
  }
}

TEST(Priority, GrantSafetyProperty) {
  std::mt19937_64 rng(5);
  for (int i = 0; i < 500; ++i) {
    UuidSource ids(i + 1);
    SignalController c(oracle::fixture_plans(), nullptr, ids);
    const auto& plan = c.plan("sig-D");
    const double now = oracle::uniform(rng, 0, 300);
    const double arrival = now + oracle::uniform(rng, 0, 60);
    const std::string approach = oracle::coin(rng, 0.5) ? "e3" : "e8";
    const auto r = c.request_priority(request(ids, "bus", approach, arrival), now);
    if (r.verdict == cits::PriorityVerdict::Granted) {
      EXPECT_EQ(c.state("sig-D", approach, arrival).phase, Phase::Green);
    }
    const auto g = c.active_grant("sig-D", now);
    if (!g) continue;
    EXPECT_GT(g->extension_s, 0);
    EXPECT_LE(g->extension_s, c.config().max_extension_s);
    EXPECT_LE(plan.approach(approach)->green_duration_s + g->extension_s, plan.cycle_s);
    // once expired the periodic schedule is back
    for (double t = g->expires_at + 1e-3; t < g->expires_at + 2 * plan.cycle_s; t += 0.5)
      EXPECT_EQ(c.state("sig-D", approach, t).phase == Phase::Green, oracle::ref_green(plan, approach, t)) << t;
  }
}
