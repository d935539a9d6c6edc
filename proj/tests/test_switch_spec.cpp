#include <gtest/gtest.h>

#include "oracles.hpp"
#include "paradis/switch_spec.hpp"

using namespace paradis;

TEST(SwitchSpec, ParsesListsAndShorthand) {
    EXPECT_EQ(SwitchSpec::parse("[0.5,0.25,0.25]x").widths(), (std::vector<double>{0.5, 0.25, 0.25}));
    EXPECT_EQ(SwitchSpec::parse("[4x0.25]x").widths(), (std::vector<double>{0.25, 0.25, 0.25, 0.25}));
    EXPECT_EQ(SwitchSpec::parse(" [ 0.5 , 2x0.25 ] x ").widths(), (std::vector<double>{0.5, 0.25, 0.25}));
    EXPECT_EQ(SwitchSpec::parse("[1]x"), SwitchSpec({1.0}));
}

TEST(SwitchSpec, CanonicalFormRoundTrips) {
    for (const char* s : {"[1]x", "[1.2]x", "[0.5,0.5]x", "[0.5,0.25,0.25]x", "[0.125,0.125,0.125,0.125,0.125,0.125,0.125,0.125]x", "[0.3,0.7]x"}) {
        const auto spec = SwitchSpec::parse(s);
        EXPECT_EQ(spec.str(), s);
        EXPECT_EQ(SwitchSpec::parse(spec.str()), spec);
    }
    EXPECT_EQ(SwitchSpec::parse("[4x0.25]x").str(), "[0.25,0.25,0.25,0.25]x");
    EXPECT_EQ(SwitchSpec::parse("[1.0]x").str(), "[1]x");
}

TEST(SwitchSpec, RejectsMalformedWithGrammarHint) {
    for (const char* s : {"", "0.5,0.5", "[0.5,0.5]", "[0.5,,0.5]x", "[]x", "[0x0.5]x", "[a]x", "[-0.5]x", "[0]x", "[0.5]xx", "[inf]x"}) {
        try {
            SwitchSpec::parse(s);
            ADD_FAILURE() << "accepted " << s;
        } catch (const SwitchError& e) {
            EXPECT_NE(std::string(e.what()).find("[w1,w2,...]x"), std::string::npos) << e.what();
        }
    }
}

TEST(SwitchSpec, IntervalsAreContiguousAndLeftPacked) {
    for (const char* s : {"[0.5,0.5]x", "[0.5,0.25,0.25]x", "[4x0.25]x", "[8x0.125]x", "[0.3,0.3,0.4]x", "[1.2]x"}) {
        const auto spec = SwitchSpec::parse(s);
        for (std::size_t base : {3, 16, 32, 64, 100}) {
            const auto r = spec.channel_ranges(base);
            ASSERT_EQ(r.size(), spec.count());
            EXPECT_EQ(r.front().begin, 0u);
            for (std::size_t i = 1; i < r.size(); ++i) EXPECT_EQ(r[i].begin, r[i - 1].end);
        }
    }
}

TEST(SwitchSpec, RoundingMatchesExactArithmetic) {
    // widths as exact fractions over a common denominator
    struct Case {
        const char* spec;
        std::vector<std::uint64_t> nums;
        std::uint64_t den;
    };
    for (const Case& c : {Case{"[0.5,0.25,0.25]x", {2, 1, 1}, 4}, Case{"[8x0.125]x", {1, 1, 1, 1, 1, 1, 1, 1}, 8},
                          Case{"[0.3,0.3,0.4]x", {3, 3, 4}, 10}, Case{"[0.1,0.2,0.7]x", {1, 2, 7}, 10}, Case{"[1.2]x", {6}, 5}}) {
        const auto spec = SwitchSpec::parse(c.spec);
        for (std::size_t base = 1; base <= 128; ++base) {
            const auto r = spec.channel_ranges(base);
            std::uint64_t cum = 0;
            for (std::size_t i = 0; i < r.size(); ++i) {
                EXPECT_EQ(r[i].begin, oracle::boundary(cum, c.den, base)) << c.spec << " base " << base;
                cum += c.nums[i];
                EXPECT_EQ(r[i].end, oracle::boundary(cum, c.den, base)) << c.spec << " base " << base;
            }
        }
    }
}

TEST(SwitchSpec, HandWorkedSplitOf64) {
    const auto r = SwitchSpec::parse("[0.5,0.25,0.25]x").channel_ranges(64);
    EXPECT_EQ(r, (std::vector<Range>{{0, 32}, {32, 48}, {48, 64}}));
    EXPECT_EQ(SwitchSpec::parse("[0.5,0.5]x").channel_ranges(64), (std::vector<Range>{{0, 32}, {32, 64}}));
    EXPECT_EQ(SwitchSpec::parse("[1]x").channel_ranges(64), (std::vector<Range>{{0, 64}}));
}

TEST(SwitchSpec, OrderingAndTotals) {
    EXPECT_DOUBLE_EQ(SwitchSpec::parse("[4x0.25]x").total_width(), 1.0);
    EXPECT_LT(SwitchSpec::parse("[0.25,0.75]x"), SwitchSpec::parse("[0.5,0.5]x"));
    EXPECT_NE(SwitchSpec::parse("[0.5,0.25,0.25]x"), SwitchSpec::parse("[0.25,0.25,0.5]x"));
}
