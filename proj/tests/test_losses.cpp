#include <doctest.h>

#include "dualreg/losses.hpp"
#include "oracles.hpp"
#include "support.hpp"

using namespace dualreg;
using namespace dualreg::testing;

TEST_CASE("nlcc matches windowed statistics computed directly") {
    std::mt19937_64 rng(200);
    Real worst = 0.0;
    for (int n = 0; n < 120; ++n) {
        std::uniform_int_distribution<std::int64_t> ext(3, 6);
        const Shape3 s{ext(rng), ext(rng), ext(rng)};
        const int window = n % 2 == 0 ? 3 : 1 + 2 * static_cast<int>(std::min({s[0], s[1], s[2]}) / 2);
        LossConfig cfg;
        cfg.window = std::min<int>(window, static_cast<int>(std::min({s[0], s[1], s[2]})) | 1);
        if (cfg.window > std::min({s[0], s[1], s[2]})) cfg.window -= 2;
        const auto a = random_volume(s, rng), b = random_volume(s, rng);
        const Real got = nlcc(a, b, cfg);
        const Real want = oracle::nlcc({a.data().begin(), a.data().end()}, {b.data().begin(), b.data().end()}, s,
                                       cfg.window, cfg.epsilon);
        worst = std::max(worst, oracle::rel_err(got, want));
    }
    CHECK(worst <= 1e-6);
}

TEST_CASE("nlcc examples and properties") {
    std::mt19937_64 rng(201);
    const Shape3 s{12, 11, 10};
    const auto v = random_volume(s, rng);
    LossConfig cfg;
    cfg.window = 5;
    CHECK(nlcc(v, v, cfg) == doctest::Approx(-1.0).epsilon(1e-4));

    // Zero padding does not follow an intensity offset, so only the scale is
    // free at the border; interior windows are offset-invariant as well.
    Volume scaled(s);
    for (std::int64_t i = 0; i < s.voxels(); ++i) scaled[i] = 2.5 * v[i];
    CHECK(nlcc(v, scaled, cfg) == doctest::Approx(nlcc(v, v, cfg)).epsilon(1e-4));
    Volume shifted(s);
    for (std::int64_t i = 0; i < s.voxels(); ++i) shifted[i] = 2.5 * v[i] + 0.7;
    CHECK(nlcc(v, shifted, cfg) > nlcc(v, v, cfg));

    for (int n = 0; n < 10; ++n) {
        const auto a = random_volume(s, rng), b = random_volume(s, rng);
        const Real x = nlcc(a, b, cfg);
        CHECK(x <= 0.0);
        CHECK(x >= -1.0);
    }
    LossConfig big;
    big.window = 13;
    CHECK_THROWS_AS(nlcc(v, v, big), std::invalid_argument);
    CHECK_THROWS_AS(nlcc(v, Volume({12, 11, 9}), cfg), DataError);
    LossConfig even;
    even.window = 4;
    CHECK_THROWS_AS(even.validate(), std::invalid_argument);
}

TEST_CASE("nlcc gradient on 5^3 volumes with window 3") {
    std::mt19937_64 rng(202);
    const Shape3 s{5, 5, 5};
    for (int n = 0; n < 5; ++n) {
        const auto a = random_volume(s, rng), b = random_volume(s, rng);
        LossConfig cfg;
        cfg.window = 3;
        std::vector<Real> g(125);
        nlcc(a.data(), b.data(), s, cfg, g);
        std::vector<Real> x(a.data().begin(), a.data().end());
        auto f = [&] { return nlcc(x, b.data(), s, cfg); };
        CHECK(fd_check(x, g, f, 60, 1e-4, 1e-3, 1e-7, n).failed == 0);
    }
}

TEST_CASE("smoothness matches forward differences") {
    std::mt19937_64 rng(203);
    Real worst = 0.0;
    for (int n = 0; n < 120; ++n) {
        std::uniform_int_distribution<std::int64_t> ext(1, 6);
        const Shape3 s{ext(rng), ext(rng), ext(rng)};
        const auto f = random_field(s, rng, 2.0);
        worst = std::max(worst, oracle::rel_err(smoothness(f), oracle::smoothness(f)));
    }
    CHECK(worst <= 1e-9);
}

TEST_CASE("smoothness examples and properties") {
    CHECK(smoothness(DisplacementField::constant({4, 5, 6}, {1.0, -2.0, 0.5})) == 0.0);
    for (std::int64_t s : {2, 5, 8}) {
        DisplacementField f({s, s, s});
        for (std::int64_t i = 0; i < s; ++i)
            for (std::int64_t j = 0; j < s; ++j)
                for (std::int64_t k = 0; k < s; ++k) f.at(0, i, j, k) = static_cast<Real>(i);
        CHECK(smoothness(f) == doctest::Approx(static_cast<Real>(s - 1) / static_cast<Real>(s) / 9.0).epsilon(1e-12));
    }
    std::mt19937_64 rng(204);
    auto f = random_field({5, 4, 6}, rng, 1.0);
    const Real before = smoothness(f);
    for (auto& x : f.data()) x += 3.25;
    CHECK(smoothness(f) == doctest::Approx(before).epsilon(1e-12));
}

TEST_CASE("total loss combines the two terms") {
    std::mt19937_64 rng(205);
    const Shape3 s{10, 10, 10};
    RegistrationOutput out;
    out.warped = random_volume(s, rng);
    out.final_field = random_field(s, rng, 1.0);
    const auto fixed = random_volume(s, rng);
    LossConfig cfg;
    cfg.window = 5;
    const Real a = nlcc(out.warped, fixed, cfg);
    const Real b = smoothness(out.final_field);
    cfg.lambda = 0.0;
    CHECK(total_loss(out.warped, fixed, out, cfg).total == a);
    cfg.lambda = 2.0;
    const auto t = total_loss(out.warped, fixed, out, cfg);
    CHECK(t.total == doctest::Approx(a + 2.0 * b).epsilon(1e-14));
    CHECK(t.similarity == a);
    CHECK(t.smooth == b);
}

TEST_CASE("dice") {
    const Shape3 s{4, 4, 4};
    LabelMap a(s), b(s);
    SUBCASE("identical maps score one") {
        for (std::int64_t i = 0; i < 64; ++i) a.data()[i] = b.data()[i] = static_cast<std::uint16_t>(i % 3);
        const auto d = dice(a, b, {1, 2});
        CHECK(d.average == 1.0);
        for (const auto& r : d.regions) CHECK(!r.absent);
    }
    SUBCASE("disjoint supports score zero") {
        a.at(0, 0, 0) = 1;
        b.at(3, 3, 3) = 1;
        CHECK(dice(a, b, {1}).regions[0].score == 0.0);
    }
    SUBCASE("half overlap") {
        for (std::int64_t k = 0; k < 4; ++k) {
            a.at(0, 0, k) = a.at(0, 1, k) = 1;
            b.at(0, 1, k) = b.at(0, 2, k) = 1;
        }
        const auto d = dice(a, b, {1});
        CHECK(d.regions[0].score == 0.5);
    }
    SUBCASE("absent regions are flagged and score one") {
        a.at(1, 1, 1) = 2;
        b.at(1, 1, 1) = 2;
        const auto d = dice(a, b, {2, 7});
        CHECK(d.regions[1].absent);
        CHECK(d.regions[1].score == 1.0);
        CHECK(d.average == 1.0);
    }
    SUBCASE("symmetric and bounded") {
        std::mt19937_64 rng(206);
        for (int n = 0; n < 20; ++n) {
            const auto x = random_labels(s, rng, 3), y = random_labels(s, rng, 3);
            const auto dxy = dice(x, y, {1, 2, 3}), dyx = dice(y, x, {1, 2, 3});
            for (int r = 0; r < 3; ++r) {
                CHECK(dxy.regions[r].score == dyx.regions[r].score);
                CHECK(dxy.regions[r].score >= 0.0);
                CHECK(dxy.regions[r].score <= 1.0);
            }
        }
    }
    CHECK_THROWS_AS(dice(LabelMap({2, 2, 2}), LabelMap({2, 2, 3}), {1}), DataError);
}
