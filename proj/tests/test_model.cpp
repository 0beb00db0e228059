#include <doctest.h>

#include <cmath>
#include <random>

#include "dualreg/losses.hpp"
#include "dualreg/model.hpp"
#include "dualreg/synth.hpp"
#include "support.hpp"

using namespace dualreg;
using namespace dualreg::testing;

namespace {

std::int64_t ceil_div(std::int64_t s, std::int64_t d) { return (s + d - 1) / d; }

Volume smooth_volume(const Shape3& s, std::uint64_t seed) {
    PhantomSpec spec;
    spec.shape = s;
    spec.num_regions = 3;
    spec.seed = seed;
    return make_phantom(spec).volume;
}

}  // namespace

TEST_CASE("level shapes follow ceil(s / 2^(5 - level))") {
    for (const Shape3 s : {Shape3{160, 192, 160}, Shape3{32, 32, 32}, Shape3{33, 17, 40}}) {
        for (int l = 1; l <= kPyramidLevels; ++l) {
            const auto got = level_shape(s, l);
            for (int a = 0; a < 3; ++a) CHECK(got[a] == ceil_div(s[a], std::int64_t{1} << (5 - l)));
        }
    }
}

TEST_CASE("pyramid emits four level fields and a full-resolution final field") {
    for (const Shape3 s : {Shape3{160, 192, 160}, Shape3{32, 32, 32}}) {
        CAPTURE(s[0]);
        RegistrationNet net(NetworkConfig{BackboneConfig{{2, 4, 4, 4}, 2}, RegistrationMode::pyramid});
        init_params(net, 3);
        const Volume m = s[0] == 32 ? smooth_volume(s, 1) : Volume(s, 0.5);
        const auto out = net.register_pair(m, m);
        int levels = 0;
        for (int l = 0; l < kPyramidLevels; ++l) {
            REQUIRE(out.level_fields[l].has_value());
            REQUIRE(out.accumulated[l].has_value());
            ++levels;
            const std::int64_t d = std::int64_t{16} >> l;
            for (int a = 0; a < 3; ++a) {
                CHECK(out.level_fields[l]->shape()[a] == ceil_div(s[a], d));
                CHECK(out.accumulated[l]->shape()[a] == ceil_div(s[a], d));
            }
        }
        CHECK(levels == 4);
        CHECK(out.final_field.shape() == s);
        CHECK(out.warped.shape() == s);
    }
}

TEST_CASE("backbone feature pyramid widths and shapes") {
    const BackboneConfig cfg{{4, 8, 6, 5}, 3};
    RegistrationNet net(NetworkConfig{cfg, RegistrationMode::pyramid});
    init_params(net, 2);
    const Shape3 s{32, 48, 16};
    const Volume v = smooth_volume(s, 4);
    const Tensor x = stack_volumes({&v});
    const auto enc = net.backbone().encode(net.params(), x, false, nullptr);
    for (int i = 0; i < 4; ++i) {
        CHECK(enc[i].channels() == cfg.encoder_channels[i]);
        CHECK(enc[i].spatial() == level_shape(s, 4 - i));
    }
    const auto pyr = net.backbone().forward(net.params(), x, false, nullptr);
    for (int l = 0; l < kPyramidLevels; ++l) {
        CHECK(pyr.levels[l].channels() == 3);
        CHECK(pyr.levels[l].spatial() == level_shape(s, l + 1));
    }
}

TEST_CASE("inputs smaller than 16 voxels are refused") {
    RegistrationNet net(NetworkConfig{BackboneConfig{{2, 4, 4, 4}, 2}, RegistrationMode::pyramid});
    init_params(net, 1);
    const Volume v(Shape3{8, 32, 32}, 0.0);
    CHECK_THROWS(net.register_pair(v, v));
}

TEST_CASE("both streams share one parameter set") {
    auto net = small_net(RegistrationMode::pyramid, 9);
    const Shape3 s{16, 16, 16};
    const Volume a = smooth_volume(s, 1);
    const Volume b = smooth_volume(s, 2);
    const Tensor ta = stack_volumes({&a});
    const Tensor tb = stack_volumes({&b});
    const auto [pa, pb] = forward_dual(net.backbone(), net.params(), ta, tb);
    const auto solo = net.backbone().forward(net.params(), tb, false, nullptr);
    for (int l = 0; l < kPyramidLevels; ++l) {
        const auto x = pb.levels[l].values();
        const auto y = solo.levels[l].values();
        REQUIRE(x.size() == y.size());
        for (std::size_t i = 0; i < x.size(); ++i) CHECK(x[i] == y[i]);
    }
    // swapping the inputs swaps the pyramids
    const auto [qa, qb] = forward_dual(net.backbone(), net.params(), tb, ta);
    for (int l = 0; l < kPyramidLevels; ++l) {
        const auto x = pa.levels[l].values();
        const auto y = qb.levels[l].values();
        for (std::size_t i = 0; i < x.size(); ++i) CHECK(x[i] == y[i]);
    }
}

TEST_CASE("zero heads start at the identity") {
    for (const auto mode : {RegistrationMode::pyramid, RegistrationMode::single_field}) {
        RegistrationNet net(NetworkConfig{BackboneConfig{{4, 8, 8, 8}, 4}, mode});
        init_params(net, 11);
        const Shape3 s{32, 32, 32};
        const Volume m = smooth_volume(s, 5);
        const Volume f = smooth_volume(s, 6);
        const auto out = net.register_pair(m, f);
        for (std::size_t i = 0; i < m.data().size(); ++i) REQUIRE(out.warped.data()[i] == m.data()[i]);
        for (const Real u : out.final_field.data()) REQUIRE(u == 0.0);

        LossConfig cfg;
        const auto same = net.register_pair(m, m);
        const auto terms = total_loss(m, m, same, cfg);
        CHECK(terms.smooth == 0.0);
        CHECK(std::abs(terms.total - (-1.0)) < 1e-4);
    }
}

TEST_CASE("single-field mode uses only the finest head") {
    auto net = small_net(RegistrationMode::single_field, 4);
    const Shape3 s{16, 16, 16};
    const Volume m = smooth_volume(s, 1);
    const Volume f = smooth_volume(s, 2);
    const auto base = net.register_pair(m, f);
    for (auto& e : net.params().entries()) {
        if (e.name.rfind("heads.level4", 0) != 0 && e.name.rfind("heads.", 0) == 0) {
            for (auto& v : e.value) v += 1.0;
        }
    }
    const auto moved = net.register_pair(m, f);
    for (std::size_t i = 0; i < base.final_field.data().size(); ++i) {
        REQUIRE(base.final_field.data()[i] == moved.final_field.data()[i]);
    }
    CHECK(!base.level_fields[0].has_value());
    CHECK(base.level_fields[3].has_value());
}

TEST_CASE("pyramid final field is the upsampled composition of all levels") {
    auto net = small_net(RegistrationMode::pyramid, 6, 0.2);
    const Shape3 s{32, 32, 32};
    const Volume m = smooth_volume(s, 7);
    const Volume f = smooth_volume(s, 8);
    const auto out = net.register_pair(m, f);
    DisplacementField acc = *out.level_fields[0];
    for (int l = 1; l < kPyramidLevels; ++l) {
        acc = compose(upsample_field(acc, out.level_fields[l]->shape()), *out.level_fields[l]);
        const auto& ref = *out.accumulated[l];
        for (std::size_t i = 0; i < acc.data().size(); ++i) REQUIRE(acc.data()[i] == doctest::Approx(ref.data()[i]).epsilon(1e-12));
    }
    const auto full = upsample_field(acc, s);
    for (std::size_t i = 0; i < full.data().size(); ++i) {
        REQUIRE(full.data()[i] == doctest::Approx(out.final_field.data()[i]).epsilon(1e-12));
    }
    const auto w = warp_trilinear(m, out.final_field);
    for (std::size_t i = 0; i < w.data().size(); ++i) REQUIRE(w.data()[i] == doctest::Approx(out.warped.data()[i]).epsilon(1e-12));
}
