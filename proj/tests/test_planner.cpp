#include <gtest/gtest.h>

#include <random>

#include "oracles.hpp"
#include "paradis/planner.hpp"

using namespace paradis;

namespace {

DeviceProfile dev(std::string id, double cap, double lat = 0, double bw = 100) {
    return DeviceProfile{id, "127.0.0.1:0", cap, lat, bw, true};
}

std::vector<SwitchSpec> candidates() {
    std::vector<SwitchSpec> out;
    for (const char* s : {"[1]x", "[0.5,0.5]x", "[0.5,0.25,0.25]x", "[4x0.25]x", "[0.75]x", "[0.25,0.75]x", "[1.2]x"})
        out.push_back(SwitchSpec::parse(s));
    return out;
}

std::vector<double> submodel_mflops(const ElasticModel<float>& m, const SwitchSpec& s) {
    const auto r = count_flops(m, s);
    std::vector<double> out;
    for (std::size_t i = 0; i < r.submodel_macs.size(); ++i) out.push_back(r.submodel_mflops(i));
    return out;
}

}  // namespace

TEST(Planner, SingleDevicePicksFullWidth) {
    ElasticModel<float> m(arch::toy());
    const std::vector<SwitchSpec> specs = {SwitchSpec({1.2}), SwitchSpec({1.0}), SwitchSpec::parse("[0.5,0.5]x"),
                                           SwitchSpec::parse("[4x0.25]x")};
    const auto p = plan(m, specs, {dev("a", 100)});
    EXPECT_EQ(p.spec.str(), "[1]x");
    ASSERT_EQ(p.assignment.size(), 1u);
    EXPECT_EQ(p.assignment[0].device_id, "a");
}

TEST(Planner, TwoEqualDevicesSplitInHalves) {
    ElasticModel<float> m(arch::toy());
    const std::vector<SwitchSpec> specs = {SwitchSpec({1.0}), SwitchSpec::parse("[0.5,0.5]x")};
    const auto two = plan(m, specs, {dev("a", 100), dev("b", 100)});
    EXPECT_EQ(two.spec.str(), "[0.5,0.5]x");
    const auto one = plan(m, {SwitchSpec({1.0})}, {dev("a", 100)});
    EXPECT_LE(two.compute_ms, 0.55 * one.compute_ms);
    EXPECT_NE(two.assignment[0].device_id, two.assignment[1].device_id);
}

TEST(Planner, HeavySubmodelOnStrongDevice) {
    ElasticModel<float> m(arch::toy());
    const std::vector<DeviceProfile> devices = {dev("slow1", 50), dev("fast", 100), dev("slow2", 50)};
    const auto p = plan(m, {SwitchSpec({1.0}), SwitchSpec::parse("[0.5,0.25,0.25]x")}, devices);
    EXPECT_EQ(p.spec.str(), "[0.5,0.25,0.25]x");
    EXPECT_EQ(p.assignment[0].device_id, "fast");
    EXPECT_EQ(p.assignment[1].device_id, "slow1");
    EXPECT_EQ(p.assignment[2].device_id, "slow2");
    const auto q = plan(m, {SwitchSpec::parse("[0.25,0.5,0.25]x")}, devices);
    EXPECT_EQ(q.assignment[1].device_id, "fast");
}

TEST(Planner, CostModelArithmetic) {
    PlanRequest req{4, 1000, 40};
    const auto a = cost_on(dev("d", 200, 1.5, 10), 0, 2.0, req);
    EXPECT_DOUBLE_EQ(a.compute_ms, 1000.0 * 4 * 2.0 / 200);
    EXPECT_DOUBLE_EQ(a.comm_ms, 1.5 + 1000.0 * 4 * 1040 / 10e6);
}

TEST(Planner, MatchesExhaustiveOracle) {
    ElasticModel<float> m(arch::toy());
    std::mt19937_64 rng(60);
    std::uniform_real_distribution<double> cap(5, 500), lat(0, 5), bw(1, 200);
    const auto specs = candidates();
    for (int trial = 0; trial < 300; ++trial) {
        const std::size_t n = 1 + trial % 4;
        std::vector<DeviceProfile> devices;
        for (std::size_t i = 0; i < n; ++i) devices.push_back(dev("d" + std::to_string(i), cap(rng), lat(rng), bw(rng)));
        const PlanRequest req = plan_request(m, 1 + trial % 8);
        const auto p = plan(m, specs, devices, req);
        double best = std::numeric_limits<double>::infinity();
        for (const auto& s : specs)
            if (s.total_width() <= 1.0) best = std::min(best, oracle::exhaustive_best_latency(submodel_mflops(m, s), devices, req));
        EXPECT_NEAR(p.latency_ms, best, 1e-9 * best) << "trial " << trial;
        EXPECT_NEAR(oracle::exhaustive_best_latency(submodel_mflops(m, p.spec), devices, req), p.latency_ms, 1e-9 * best);
    }
}

TEST(Planner, AssignmentIsOptimalEvenAgainstCapacityOrder) {
    // The most capable device sits behind a slow link; the heavy sub-model
    // belongs on the nearby one.
    ElasticModel<float> m(arch::toy());
    const PlanRequest req = plan_request(m, 1);
    const std::vector<DeviceProfile> devices = {dev("far", 10, 50), dev("near", 5, 0)};
    const auto spec = SwitchSpec::parse("[0.75,0.25]x");
    const auto p = assign(m, spec, devices, req);
    EXPECT_NEAR(p.latency_ms, oracle::exhaustive_best_latency(submodel_mflops(m, spec), devices, req), 1e-12);
}

TEST(Planner, TiesPreferWiderThenSmallerString) {
    ElasticModel<float> m(arch::toy());
    const auto p = plan(m, {SwitchSpec::parse("[0.5,0.5]x"), SwitchSpec::parse("[0.5,0.5]x")}, {dev("a", 1e12), dev("b", 1e12)});
    EXPECT_EQ(p.spec.str(), "[0.5,0.5]x");
    DeploymentPlan x, y;
    x.spec = SwitchSpec({0.5});
    y.spec = SwitchSpec({1.0});
    EXPECT_TRUE(better_plan(y, x));
    x.spec = SwitchSpec::parse("[0.25,0.75]x");
    y.spec = SwitchSpec::parse("[0.75,0.25]x");
    EXPECT_TRUE(better_plan(x, y));
    y.latency_ms = -1;
    EXPECT_TRUE(better_plan(y, x));
}

TEST(Planner, ReconfigureIsIdempotent) {
    ElasticModel<float> m(arch::toy());
    const std::vector<DeviceProfile> devices = {dev("a", 100), dev("b", 100), dev("c", 100), dev("d", 100)};
    const auto specs = candidates();
    const auto p = plan(m, specs, devices);
    const auto again = reconfigure(m, p, specs, devices);
    EXPECT_EQ(again, p);
    EXPECT_TRUE(changed_positions(p, again).empty());
}

TEST(Planner, FallsBackWhenDevicesLeave) {
    ElasticModel<float> m(arch::toy());
    std::vector<DeviceProfile> devices = {dev("a", 100), dev("b", 100)};
    const std::vector<SwitchSpec> specs = {SwitchSpec({1.0}), SwitchSpec::parse("[0.5,0.5]x")};
    const auto p = plan(m, specs, devices);
    devices[1].available = false;
    const auto q = reconfigure(m, p, specs, devices);
    EXPECT_EQ(q.spec.str(), "[1]x");
    EXPECT_EQ(q.assignment[0].device_id, "a");
    EXPECT_EQ(changed_positions(p, q), std::vector<std::size_t>{0});
}

TEST(Planner, ChangedPositionsBetweenSwitches) {
    ElasticModel<float> m(arch::toy());
    const std::vector<DeviceProfile> devices = {dev("a", 100), dev("b", 100), dev("c", 100), dev("d", 100)};
    const auto halves = plan(m, {SwitchSpec::parse("[0.5,0.5]x")}, devices);
    const auto quarters = plan(m, {SwitchSpec::parse("[4x0.25]x")}, devices);
    EXPECT_EQ(changed_positions(halves, quarters).size(), 4u);
    EXPECT_TRUE(changed_positions(quarters, quarters).empty());
}

TEST(Planner, Errors) {
    ElasticModel<float> m(arch::toy());
    EXPECT_THROW(plan(m, candidates(), {}), PlanError);
    auto off = dev("a", 100);
    off.available = false;
    EXPECT_THROW(plan(m, candidates(), {off}), PlanError);
    try {
        plan(m, {SwitchSpec::parse("[0.5,0.5]x"), SwitchSpec({1.2})}, {dev("a", 1)});
        FAIL();
    } catch (const PlanError& e) {
        EXPECT_NE(std::string(e.what()).find("[0.5,0.5]x"), std::string::npos);
    }
    EXPECT_THROW(plan(m, candidates(), {dev("a", 0)}), ConfigError);
}

TEST(DeviceFile, Parse) {
    const auto d = parse_devices("# id addr cap lat bw avail\n"
                                 "gpu0 10.0.0.1:7000 500 0.5 1000\n"
                                 "\n"
                                 "cpu1 10.0.0.2:7000 50 2 100 0   # offline\n");
    ASSERT_EQ(d.size(), 2u);
    EXPECT_EQ(d[0].address, "10.0.0.1:7000");
    EXPECT_DOUBLE_EQ(d[0].capacity_mflops, 500);
    EXPECT_TRUE(d[0].available);
    EXPECT_FALSE(d[1].available);
    try {
        parse_devices("a h:1 1 0 1\na h:2 1 0 1\nb h:3\nc h:4 -1 0 1\n");
        FAIL();
    } catch (const ConfigError& e) {
        ASSERT_EQ(e.problems().size(), 3u);
        EXPECT_EQ(e.problems()[0], "line 2: duplicate device id a");
        EXPECT_NE(e.problems()[1].find("line 3"), std::string::npos);
        EXPECT_NE(e.problems()[2].find("capacity must be > 0"), std::string::npos);
    }
    EXPECT_THROW(load_devices("/nonexistent/devices.txt"), Error);
}
