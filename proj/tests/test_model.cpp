#include <gtest/gtest.h>

#include <algorithm>

#include "oracles.hpp"
#include "paradis/calibration.hpp"
#include "paradis/masked_monolith.hpp"
#include "paradis/model.hpp"

using namespace paradis;

namespace {

ModelManifest wide64() {
    ModelManifest m;
    m.in_height = m.in_width = 4;
    m.blocks = {{BlockKind::conv, 64, 3, 1}, {BlockKind::conv, 16, 3, 2}};
    return m;
}

ModelManifest tiny(BlockKind second = BlockKind::conv) {
    ModelManifest m;
    m.in_channels = 2;
    m.in_height = m.in_width = 4;
    m.num_classes = 3;
    m.wide_width = 1.5;
    m.blocks = {{BlockKind::conv, 4, 3, 1}, {second, 4, 3, second == BlockKind::residual ? 1u : 2u}, {BlockKind::conv, 4, 1, 1}};
    return m;
}

template <typename T>
Tensor<T> batch(const ModelManifest& m, std::size_t B, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    return oracle::random_tensor<T>({B, m.in_channels, m.in_height, m.in_width}, rng);
}

// Standalone width-1.0 network holding a copy of one sub-model's weights.
template <typename T>
ElasticModel<T> extract(const ElasticModel<T>& src, const SubModelSlice& s) {
    ModelManifest m = src.manifest();
    m.wide_width = 1.0;
    for (std::size_t b = 0; b < m.blocks.size(); ++b)
        for (const auto& l : src.layers())
            if (l.name == "block" + std::to_string(b) + ".conv") m.blocks[b].channels = s.axis(l.out_axis).size();
    ElasticModel<T> out(m);
    for (std::size_t i = 0; i < src.layers().size(); ++i) {
        const Layer& l = src.layers()[i];
        const Layer& o = out.layers()[i];
        const Range in = s.axis(l.in_axis), outr = s.axis(l.out_axis), k{0, l.kernel};
        switch (l.kind) {
            case LayerKind::conv: out.params()[o.weight].value = slice(src.params()[l.weight].value, {outr, in, k, k}); break;
            case LayerKind::depthwise: out.params()[o.weight].value = slice(src.params()[l.weight].value, {outr, Range{0, 1}, k, k}); break;
            case LayerKind::norm:
                out.params()[o.weight].value = slice(src.params()[l.weight].value, {outr});
                out.params()[o.bias].value = slice(src.params()[l.bias].value, {outr});
                break;
            case LayerKind::head:
                out.params()[o.weight].value = slice(src.params()[l.weight].value, {Range{0, src.num_classes()}, s.head_columns()});
                break;
        }
    }
    return out;
}

const std::vector<const char*> kSpecs = {"[1]x", "[0.5,0.5]x", "[0.5,0.25,0.25]x", "[4x0.25]x", "[8x0.125]x"};

}  // namespace

TEST(Resolve, HandWorkedIntervalsOn64Channels) {
    ElasticModel<float> m(wide64());
    const std::size_t ax = m.layers()[0].out_axis;
    auto ranges = [&](const char* s) {
        std::vector<Range> r;
        for (const auto& sl : m.resolve(SwitchSpec::parse(s))) r.push_back(sl.axis(ax));
        return r;
    };
    EXPECT_EQ(ranges("[1]x"), (std::vector<Range>{{0, 64}}));
    EXPECT_EQ(ranges("[0.5,0.5]x"), (std::vector<Range>{{0, 32}, {32, 64}}));
    EXPECT_EQ(ranges("[0.5,0.25,0.25]x"), (std::vector<Range>{{0, 32}, {32, 48}, {48, 64}}));
    EXPECT_EQ(ranges("[1.2]x"), (std::vector<Range>{{0, 77}}));
}

TEST(Resolve, PhysicalChannelsFollowWideRounding) {
    for (double wide : {1.0, 1.2, 1.5}) {
        const auto mf = arch::resnet_toy(10, wide);
        ElasticModel<float> m(mf);
        for (const auto& a : m.axes()) {
            if (!a.sliced) continue;
            const std::uint64_t num = std::uint64_t(std::llround(wide * 10));
            EXPECT_EQ(a.physical, oracle::boundary(num, 10, a.base));
        }
    }
}

TEST(Resolve, SubModelsNeverCrossConnect) {
    ElasticModel<float> m(arch::mobilenet_toy());
    for (const char* s : kSpecs) {
        for (const auto& sl : m.resolve(SwitchSpec::parse(s))) {
            for (const auto& l : m.layers()) {
                if (!m.axes()[l.in_axis].sliced) {
                    EXPECT_EQ(sl.axis(l.in_axis), (Range{0, m.manifest().in_channels})) << l.name;
                    EXPECT_EQ(l.name, "block0.conv");
                }
            }
            EXPECT_EQ(sl.head_columns(), sl.axis(m.head_axis()));
        }
    }
}

TEST(Resolve, ZeroChannelLayerIsNamed) {
    ElasticModel<float> m(tiny());
    try {
        m.resolve(SwitchSpec::parse("[8x0.125]x"));
        FAIL();
    } catch (const SwitchError& e) {
        EXPECT_NE(std::string(e.what()).find("block0.conv"), std::string::npos) << e.what();
    }
}

TEST(Resolve, BeyondWideWidthRejected) {
    ElasticModel<float> m(arch::toy());
    EXPECT_THROW(m.resolve(SwitchSpec::parse("[1.3]x")), SwitchError);
    EXPECT_THROW(m.resolve(SwitchSpec::parse("[1,0.25]x")), SwitchError);
    EXPECT_NO_THROW(m.resolve(SwitchSpec::parse("[1,0.2]x")));
}

TEST(Forward, FullSliceEqualsStandaloneNetworkBitwise) {
    ElasticModel<float> m(arch::toy());
    oracle::randomize(m, 1);
    const auto x = batch<float>(m.manifest(), 4, 2);
    Graph<float> g(false);
    ForwardOptions<float> fo;
    const auto slices = m.resolve(SwitchSpec({1.0}));
    auto mine = m.forward_submodel(g, slices[0], g.constant(x), fo).partial_logits.value();
    const auto plain = extract(m, slices[0]);
    auto ref = plain.forward_submodel(g, plain.resolve(SwitchSpec({1.0}))[0], g.constant(x), fo).partial_logits.value();
    EXPECT_EQ(mine, ref);
}

TEST(Forward, HalvesEqualExtractedNetworks) {
    ElasticModel<float> m(arch::toy());
    oracle::randomize(m, 3);
    const auto x = batch<float>(m.manifest(), 4, 4);
    Graph<float> g(false);
    ForwardOptions<float> fo;
    for (const auto& sl : m.resolve(SwitchSpec::parse("[0.5,0.5]x"))) {
        auto mine = m.forward_submodel(g, sl, g.constant(x), fo).partial_logits.value();
        const auto sub = extract(m, sl);
        auto ref = sub.forward_submodel(g, sub.resolve(SwitchSpec({1.0}))[0], g.constant(x), fo).partial_logits.value();
        EXPECT_EQ(mine, ref) << "position " << sl.position;
    }
}

TEST(Forward, SubModelsMatchDirectLoopOracle) {
    struct Case {
        const char* spec;
        std::vector<std::uint64_t> nums;
        std::uint64_t den;
    };
    for (auto mf : {arch::toy(), arch::mobilenet_toy(), arch::resnet_toy()}) {
        ElasticModel<double> m(mf);
        oracle::randomize(m, 5);
        const auto x = batch<double>(mf, 3, 6);
        for (const Case& c : {Case{"[1]x", {1}, 1}, Case{"[0.5,0.25,0.25]x", {2, 1, 1}, 4}, Case{"[1.2]x", {6}, 5}}) {
            Graph<double> g(false);
            ForwardOptions<double> fo;
            const auto slices = m.resolve(SwitchSpec::parse(c.spec));
            for (const auto& sl : slices) {
                auto mine = m.forward_submodel(g, sl, g.constant(x), fo).partial_logits.value();
                auto ref = oracle::submodel_forward(m, c.nums, c.den, sl.position, x);
                EXPECT_LT(max_abs_diff(mine, ref), 1e-9) << c.spec << " position " << sl.position;
            }
        }
    }
}

TEST(Forward, ZeroImageYieldsHeadBias) {
    ElasticModel<float> m(arch::toy());
    oracle::randomize(m, 7);
    for (auto& p : m.params())
        if (p.name.find(".beta") != std::string::npos) p.value.fill(0.f);
    Tensor<float> x(Shape{2, 3, 8, 8});
    const auto logits = infer_switch(m, SwitchSpec::parse("[0.5,0.5]x"), x, NormMode::batch);
    const auto& bias = m.params()[m.head().bias].value;
    for (std::size_t b = 0; b < 2; ++b)
        for (std::size_t c = 0; c < 10; ++c) EXPECT_EQ(logits.at(b, c), bias[c]);
}

TEST(Fuse, SinglePartialPlusBias) {
    Tensor<float> p(Shape{2, 3}, std::vector<float>{1, 2, 3, 4, 5, 6});
    Tensor<float> b(Shape{3}, std::vector<float>{0.5, -1, 2});
    EXPECT_EQ(fuse<float>({p}, b), (Tensor<float>(Shape{2, 3}, std::vector<float>{1.5, 1, 5, 4.5, 4, 8})));
    EXPECT_THROW(fuse<float>({}, b), Error);
    EXPECT_THROW(fuse<float>({p, Tensor<float>(Shape{3, 3})}, b), ShapeError);
}

TEST(Fuse, OrderOfPartialsDoesNotMatter) {
    std::mt19937_64 rng(8);
    std::vector<Tensor<float>> parts;
    for (int i = 0; i < 4; ++i) parts.push_back(oracle::random_tensor<float>({3, 5}, rng));
    const auto bias = oracle::random_tensor<float>({5}, rng);
    const auto ref = fuse(parts, bias);
    std::sort(parts.begin(), parts.end(), [](const auto& a, const auto& b) { return a[0] < b[0]; });
    do {
        EXPECT_LT(max_abs_diff(fuse(parts, bias), ref), 1e-6);
    } while (std::next_permutation(parts.begin(), parts.end(), [](const auto& a, const auto& b) { return a[0] < b[0]; }));
}

TEST(ForwardSwitch, FullEqualsSubModelPlusBias) {
    ElasticModel<float> m(arch::toy());
    oracle::randomize(m, 9);
    const auto x = batch<float>(m.manifest(), 3, 10);
    Graph<float> g(false);
    ForwardOptions<float> fo;
    auto out = m.forward_switch(g, SwitchSpec({1.0}), g.constant(x), fo);
    auto part = m.forward_submodel(g, m.resolve(SwitchSpec({1.0}))[0], g.constant(x), fo).partial_logits.value();
    EXPECT_EQ(out.logits.value(), fuse<float>({part}, m.params()[m.head().bias].value));
}

TEST(ForwardSwitch, MatchesMaskedMonolithInBothNormModes) {
    for (auto mf : {arch::toy(), arch::mobilenet_toy(), arch::resnet_toy()}) {
        ElasticModel<float> m(mf);
        oracle::randomize(m, 11);
        const auto x = batch<float>(mf, 4, 12);
        std::vector<SwitchSpec> specs;
        for (const char* s : kSpecs) specs.push_back(SwitchSpec::parse(s));
        specs.push_back(SwitchSpec({1.2}));
        const auto stats = calibrate(m, specs, {batch<float>(mf, 8, 13)});
        for (const auto& s : specs) {
            for (NormMode mode : {NormMode::batch, NormMode::stored}) {
                const auto a = infer_switch(m, s, x, mode, &stats);
                const auto b = masked_monolith_forward(m, s, x, mode, &stats);
                EXPECT_LT(max_rel_diff(a, b), 1e-5) << s.str() << (mode == NormMode::batch ? " batch" : " stored");
            }
        }
    }
}

TEST(ForwardSwitch, Deterministic) {
    ElasticModel<float> m(arch::toy());
    oracle::randomize(m, 14);
    const auto x = batch<float>(m.manifest(), 2, 15);
    const auto s = SwitchSpec::parse("[4x0.25]x");
    EXPECT_EQ(infer_switch(m, s, x, NormMode::batch), infer_switch(m, s, x, NormMode::batch));
}

TEST(ForwardSwitch, ActivationVectorIsZeroPaddedToFullWidth) {
    ElasticModel<float> m(arch::toy());
    oracle::randomize(m, 16);
    const auto x = batch<float>(m.manifest(), 2, 17);
    Graph<float> g(false);
    ForwardOptions<float> fo;
    const std::size_t N = m.pre_head_dim();
    auto full = m.forward_switch(g, SwitchSpec::parse("[0.5,0.5]x"), g.constant(x), fo);
    ASSERT_TRUE(full.activation);
    EXPECT_EQ(full.activation->shape(), (Shape{2, N}));
    auto part = m.forward_switch(g, SwitchSpec::parse("[0.5]x"), g.constant(x), fo);
    ASSERT_TRUE(part.activation);
    for (std::size_t c = N / 2; c < N; ++c) EXPECT_EQ(part.activation->value().at(0, c), 0.f);
    auto wide = m.forward_switch(g, SwitchSpec({1.2}), g.constant(x), fo);
    EXPECT_FALSE(wide.activation);
}

TEST(MaskedMonolith, FullSpecIsPlainForward) {
    ElasticModel<float> m(arch::resnet_toy());
    oracle::randomize(m, 18);
    const auto x = batch<float>(m.manifest(), 3, 19);
    EXPECT_LT(max_rel_diff(masked_monolith_forward(m, SwitchSpec({1.0}), x), infer_switch(m, SwitchSpec({1.0}), x, NormMode::batch)),
              1e-6);
}

TEST(MaskedMonolith, MaskIsIdempotent) {
    ElasticModel<float> m(arch::toy());
    oracle::randomize(m, 20);
    const auto slices = m.resolve(SwitchSpec::parse("[0.5,0.25,0.25]x"));
    const auto owners = channel_owners(m, slices);
    const Layer& l = m.layers()[2];
    ASSERT_EQ(l.kind, LayerKind::conv);
    const auto w = slice(m.params()[l.weight].value, {Range{0, owners[l.out_axis].size()}, Range{0, owners[l.in_axis].size()},
                                                       Range{0, l.kernel}, Range{0, l.kernel}});
    const auto once = block_diagonal_mask(w, owners[l.out_axis], owners[l.in_axis]);
    EXPECT_EQ(block_diagonal_mask(once, owners[l.out_axis], owners[l.in_axis]), once);
    EXPECT_NE(once, w);
}

TEST(EvalMode, MissingStatsNamesSwitchAndLayer) {
    ElasticModel<float> m(arch::toy());
    const auto x = batch<float>(m.manifest(), 2, 21);
    try {
        infer_switch(m, SwitchSpec::parse("[0.5,0.5]x"), x, NormMode::stored);
        FAIL();
    } catch (const MissingStatsError& e) {
        EXPECT_EQ(e.switch_id(), "[0.5,0.5]x");
        EXPECT_NE(std::string(e.what()).find("[0.5,0.5]x"), std::string::npos);
        EXPECT_NE(std::string(e.what()).find("layer"), std::string::npos);
    }
}

TEST(Gradients, StayInsideTheSubModelsBlocks) {
    ElasticModel<float> m(arch::toy());
    oracle::randomize(m, 22);
    m.zero_grad();
    const auto x = batch<float>(m.manifest(), 3, 23);
    const auto slices = m.resolve(SwitchSpec::parse("[0.5,0.5]x"));
    Graph<float> g;
    ForwardOptions<float> fo;
    auto out = m.forward_submodel(g, slices[1], g.constant(x), fo);
    g.backward(ops::sum(ops::square(out.partial_logits)));
    for (const auto& l : m.layers()) {
        if (l.kind != LayerKind::conv) continue;
        const auto& grad = m.params()[l.weight].grad;
        const Range o = slices[1].axis(l.out_axis), i = slices[1].axis(l.in_axis);
        bool inside_nonzero = false;
        for (std::size_t a = 0; a < grad.dim(0); ++a)
            for (std::size_t b = 0; b < grad.dim(1); ++b)
                for (std::size_t k = 0; k < l.kernel * l.kernel; ++k) {
                    const float v = grad[((a * grad.dim(1)) + b) * l.kernel * l.kernel + k];
                    if (o.contains(a) && i.contains(b)) inside_nonzero |= v != 0.f;
                    else EXPECT_EQ(v, 0.f) << l.name;
                }
        EXPECT_TRUE(inside_nonzero) << l.name;
    }
}

TEST(Gradients, WholeNetworkMatchesFiniteDifferences) {
    for (BlockKind kind : {BlockKind::conv, BlockKind::separable, BlockKind::residual}) {
        ElasticModel<double> m(tiny(kind));
        oracle::randomize(m, 24);
        const auto x = batch<double>(m.manifest(), 3, 25);
        std::mt19937_64 rng(26);
        const auto probe = oracle::random_tensor<double>({3, 3}, rng);
        for (const char* s : {"[1]x", "[0.5,0.5]x", "[1.5]x"}) {
            const auto spec = SwitchSpec::parse(s);
            auto loss_of = [&](Graph<double>& g, auto& model) {
                ForwardOptions<double> fo;
                auto out = model.forward_switch(g, spec, g.constant(x), fo);
                return ops::sum(ops::mul(out.logits, g.constant(probe)));
            };
            m.zero_grad();
            Graph<double> g;
            g.backward(loss_of(g, m));
            for (auto& p : m.params()) {
                const Tensor<double> analytic = p.grad;
                auto f = [&] {
                    Graph<double> h(false);
                    return loss_of(h, std::as_const(m)).value()[0];
                };
                const auto numeric = oracle::numeric_grad(f, p.value, 1e-5);
                EXPECT_LT(oracle::grad_rel_error(analytic, numeric), 1e-4) << s << " " << p.name << " kind " << int(kind);
            }
        }
    }
}

TEST(Export, DeployableSwitchesUnchangedAndIdempotent) {
    ElasticModel<float> m(arch::toy());
    oracle::randomize(m, 27);
    std::vector<SwitchSpec> specs{SwitchSpec({1.2}), SwitchSpec({1.0}), SwitchSpec::parse("[0.5,0.5]x")};
    m.set_switches(specs);
    m.attach_stats(calibrate(m, specs, {batch<float>(m.manifest(), 8, 28)}));
    const auto d = m.export_deployable();
    EXPECT_EQ(d.manifest().wide_width, 1.0);
    EXPECT_EQ(d.switches().size(), 2u);
    EXPECT_FALSE(d.stats().has_switch("[1.2]x"));
    const auto x = batch<float>(m.manifest(), 3, 29);
    for (std::size_t i = 1; i < specs.size(); ++i) EXPECT_EQ(infer_switch(d, specs[i], x), infer_switch(m, specs[i], x));
    const auto twice = d.export_deployable();
    for (std::size_t i = 0; i < d.params().size(); ++i) EXPECT_EQ(twice.params()[i].value, d.params()[i].value);
    EXPECT_LT(d.weight_count(), m.weight_count());
}

TEST(Manifest, InvalidArchitecturesListProblems) {
    ModelManifest m;
    EXPECT_THROW(ElasticModel<float>{m}, ConfigError);
    m.blocks = {{BlockKind::residual, 8, 3, 1}};
    EXPECT_THROW(ElasticModel<float>{m}, ConfigError);
    m.blocks = {{BlockKind::conv, 8, 2, 1}};
    EXPECT_THROW(ElasticModel<float>{m}, ConfigError);
    EXPECT_THROW(arch::by_name("vgg", 10, 1.2), ConfigError);
}
