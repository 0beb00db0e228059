#include <doctest.h>

#include "dualreg/layers.hpp"
#include "dualreg/losses.hpp"
#include "fd.hpp"
#include "support.hpp"

using namespace dualreg;
using namespace dualreg::testing;

namespace {

/// Random linear functional of a tensor: sum(w * y).
struct Probe {
    std::vector<Real> w;
    explicit Probe(std::size_t n, std::uint64_t seed) : w(n) {
        std::mt19937_64 rng(seed);
        std::normal_distribution<Real> d;
        for (auto& v : w) v = d(rng);
    }
    Real operator()(std::span<const Real> y) const {
        Real s = 0;
        for (std::size_t i = 0; i < y.size(); ++i) s += w[i] * y[i];
        return s;
    }
    Tensor as_grad(const Tensor& like) const {
        Tensor g = zeros_like(like);
        std::copy(w.begin(), w.end(), g.data());
        return g;
    }
};

Tensor random_tensor(std::int64_t b, std::int64_t c, const Shape3& s, std::uint64_t seed, Real lo = -1, Real hi = 1) {
    Tensor t(b, c, s);
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<Real> u(lo, hi);
    for (auto& v : t.values()) v = u(rng);
    return t;
}

}  // namespace

TEST_CASE("warp backward matches finite differences") {
    const Shape3 s{5, 6, 4};
    Tensor src = random_tensor(1, 2, s, 1);
    Tensor field = random_tensor(1, 3, s, 2, -2.3, 2.3);
    Tensor out(1, 2, s);
    kernels::warp(src.data(), 2, s, field.data(), out.data());
    Probe probe(static_cast<std::size_t>(out.size()), 3);
    Tensor gsrc = zeros_like(src), gfield = zeros_like(field);
    const Tensor gout = probe.as_grad(out);
    kernels::warp_backward(src.data(), 2, s, field.data(), gout.data(), gsrc.data(), gfield.data());
    auto f = [&] {
        kernels::warp(src.data(), 2, s, field.data(), out.data());
        return probe(out.values());
    };
    std::vector<Real> xs(src.values().begin(), src.values().end());
    auto fs = [&] {
        std::copy(xs.begin(), xs.end(), src.data());
        return f();
    };
    CHECK(fd_check(xs, {gsrc.values().begin(), gsrc.values().end()}, fs, 100, 1e-6, 1e-5, 1e-6).failed == 0);
    std::copy(xs.begin(), xs.end(), src.data());
    std::vector<Real> xf(field.values().begin(), field.values().end());
    auto ff = [&] {
        std::copy(xf.begin(), xf.end(), field.data());
        return f();
    };
    CHECK(fd_check(xf, {gfield.values().begin(), gfield.values().end()}, ff, 100, 1e-6, 1e-5, 1e-8).failed == 0);
}

TEST_CASE("upsample and compose backward match finite differences") {
    const Shape3 from{3, 4, 2}, to{6, 7, 4};
    Tensor a = random_tensor(1, 3, from, 4);
    Tensor up(1, 3, to);
    Probe probe(static_cast<std::size_t>(up.size()), 5);
    Tensor ga(1, 3, from);
    kernels::upsample_backward(probe.as_grad(up).data(), 3, from, to, 2.0, ga.data());
    std::vector<Real> xa(a.values().begin(), a.values().end());
    auto fu = [&] {
        kernels::upsample(xa.data(), 3, from, to, 2.0, up.data());
        return probe(up.values());
    };
    CHECK(fd_check(xa, {ga.values().begin(), ga.values().end()}, fu, 60, 1e-6, 1e-6, 1e-8).failed == 0);

    Tensor u = random_tensor(1, 3, to, 6, -1.7, 1.7), v = random_tensor(1, 3, to, 7, -1.7, 1.7);
    Tensor c(1, 3, to);
    Probe pc(static_cast<std::size_t>(c.size()), 8);
    Tensor gu = zeros_like(u), gv = zeros_like(v);
    kernels::compose_backward(u.data(), v.data(), to, pc.as_grad(c).data(), gu.data(), gv.data());
    std::vector<Real> xu(u.values().begin(), u.values().end()), xv(v.values().begin(), v.values().end());
    auto fc = [&] {
        kernels::compose(xu.data(), xv.data(), to, c.data());
        return pc(c.values());
    };
    CHECK(fd_check(xu, {gu.values().begin(), gu.values().end()}, fc, 100, 1e-6, 1e-5, 1e-8).failed == 0);
    CHECK(fd_check(xv, {gv.values().begin(), gv.values().end()}, fc, 100, 1e-6, 1e-5, 1e-8).failed == 0);
}

TEST_CASE("conv, batch norm and feature upsampling backward match finite differences") {
    ParamStore store;
    std::mt19937_64 rng(9);
    std::normal_distribution<Real> nd(0.0, 0.3);
    for (int stride : {1, 2}) {
        for (int k : {1, 3}) {
            ParamStore st;
            auto conv = Conv3d::create(st, "c", 3, 4, k, stride);
            for (auto& e : st.entries())
                for (auto& v : e.value) v = nd(rng);
            Tensor x = random_tensor(2, 3, {5, 6, 7}, 10 + k + stride);
            const Tensor y = conv.forward(st, x);
            Probe probe(static_cast<std::size_t>(y.size()), 11);
            st.zero_grad();
            const Tensor gx = conv.backward(st, x, probe.as_grad(y));
            auto& w = st[conv.weight];
            auto fw = [&] { return probe(conv.forward(st, x).values()); };
            INFO("k=" << k << " stride=" << stride);
            CHECK(fd_check(w.value, w.grad, fw, 40, 1e-6, 1e-6, 1e-8).failed == 0);
            auto& b = st[conv.bias];
            CHECK(fd_check(b.value, b.grad, fw, 4, 1e-6, 1e-6, 1e-8).failed == 0);
            std::vector<Real> xv(x.values().begin(), x.values().end());
            auto fx = [&] {
                std::copy(xv.begin(), xv.end(), x.data());
                return probe(conv.forward(st, x).values());
            };
            CHECK(fd_check(xv, {gx.values().begin(), gx.values().end()}, fx, 60, 1e-6, 1e-6, 1e-8).failed == 0);
        }
    }

    ParamStore st;
    auto bn = BatchNorm3d::create(st, "bn", 3);
    for (auto& v : st[bn.gamma].value) v = 1.0 + nd(rng);
    for (auto& v : st[bn.beta].value) v = nd(rng);
    Tensor x = random_tensor(2, 3, {2, 3, 2}, 12);
    BatchNorm3d::Cache cache;
    const Tensor y = bn.forward(st, x, true, cache);
    Probe probe(static_cast<std::size_t>(y.size()), 13);
    st.zero_grad();
    const Tensor gx = bn.backward(st, cache, probe.as_grad(y));
    std::vector<Real> xv(x.values().begin(), x.values().end());
    auto fx = [&] {
        std::copy(xv.begin(), xv.end(), x.data());
        BatchNorm3d::Cache c;
        return probe(bn.forward(st, x, true, c).values());
    };
    CHECK(fd_check(xv, {gx.values().begin(), gx.values().end()}, fx, 24, 1e-6, 1e-5, 1e-8).failed == 0);
    std::copy(xv.begin(), xv.end(), x.data());
    auto& g = st[bn.gamma];
    CHECK(fd_check(g.value, g.grad, fx, 3, 1e-6, 1e-6, 1e-8).failed == 0);

    Tensor coarse = random_tensor(2, 2, {2, 3, 2}, 14);
    const Shape3 fine{4, 5, 3};
    Probe pu(static_cast<std::size_t>(2 * 2 * fine.voxels()), 15);
    const Tensor gc = upsample_features_backward(pu.as_grad(Tensor(2, 2, fine)), coarse.spatial());
    std::vector<Real> cv(coarse.values().begin(), coarse.values().end());
    auto fu = [&] {
        std::copy(cv.begin(), cv.end(), coarse.data());
        return pu(upsample_features(coarse, fine).values());
    };
    CHECK(fd_check(cv, {gc.values().begin(), gc.values().end()}, fu, 24, 1e-6, 1e-6, 1e-8).failed == 0);
}

TEST_CASE("loss gradients match finite differences") {
    std::mt19937_64 rng(21);
    const Shape3 s{7, 6, 8};
    auto w = random_volume(s, rng), f = random_volume(s, rng);
    LossConfig cfg;
    cfg.window = 5;
    std::vector<Real> g(static_cast<std::size_t>(s.voxels()));
    nlcc(w.data(), f.data(), s, cfg, g);
    std::vector<Real> xv(w.data().begin(), w.data().end());
    auto fn = [&] { return nlcc(xv, f.data(), s, cfg); };
    CHECK(fd_check(xv, g, fn, 100, 1e-6, 1e-5, 1e-9).failed == 0);

    auto field = random_field(s, rng, 2.0);
    std::vector<Real> gs(static_cast<std::size_t>(3 * s.voxels()), 0.0);
    smoothness(field.data(), s, gs);
    std::vector<Real> xf(field.data().begin(), field.data().end());
    auto fs = [&] { return smoothness(xf, s); };
    CHECK(fd_check(xf, gs, fs, 100, 1e-6, 1e-5, 1e-6).failed == 0);
}

TEST_CASE("pyramid module backward matches finite differences") {
    const Shape3 input{16, 16, 16};
    for (auto mode : {RegistrationMode::pyramid, RegistrationMode::single_field}) {
        ParamStore st;
        const auto heads = FieldHeads::create(st, 3);
        std::mt19937_64 rng(31);
        std::normal_distribution<Real> nd(0.0, 0.2);
        for (auto& e : st.entries())
            for (auto& v : e.value) v = nd(rng);
        FeaturePyramid pm, pf;
        for (int l = 0; l < kPyramidLevels; ++l) {
            pm.levels[l] = random_tensor(2, 3, level_shape(input, l + 1), 40 + l);
            pf.levels[l] = random_tensor(2, 3, level_shape(input, l + 1), 50 + l);
        }
        auto batch = phantom_batch(input, 3);
        LossConfig cfg;
        cfg.window = 5;
        auto run = [&](PyramidTape* tape) {
            return mode == RegistrationMode::pyramid ? run_pyramid(st, heads, pm, pf, batch.moving, tape)
                                                     : single_field_variant(st, heads, pm, pf, batch.moving, tape);
        };
        PyramidTape tape;
        const auto r = run(&tape);
        Tensor gw, gf;
        batch_loss(r, batch.fixed, cfg, &gw, &gf);
        st.zero_grad();
        const auto g = pyramid_backward(st, heads, mode, pm, pf, batch.moving, tape, gw, gf);
        for (int l = 0; l < kPyramidLevels; ++l) {
            if (mode == RegistrationMode::single_field && l < kPyramidLevels - 1) continue;
            for (int side = 0; side < 2; ++side) {
                Tensor& t = side == 0 ? pm.levels[l] : pf.levels[l];
                const Tensor& gt = side == 0 ? g.moving[l] : g.fixed[l];
                std::vector<Real> xv(t.values().begin(), t.values().end());
                auto fx = [&] {
                    std::copy(xv.begin(), xv.end(), t.data());
                    return batch_loss(run(nullptr), batch.fixed, cfg).total;
                };
                const auto rep = fd_check(xv, {gt.values().begin(), gt.values().end()}, fx, 30, 1e-6, 1e-2, 1e-7);
                std::copy(xv.begin(), xv.end(), t.data());
                INFO(to_string(mode) << " level " << l + 1 << " side " << side << " worst " << rep.worst);
                CHECK(rep.failed == 0);
            }
        }
    }
}

TEST_CASE("backbone backward matches finite differences") {
    const Shape3 input{32, 32, 32};
    auto net = small_net(RegistrationMode::pyramid, 7);
    const auto& bb = net.backbone();
    auto& st = net.params();
    Tensor x = phantom_batch(input, 5).moving;
    Backbone::Tape tape;
    const auto p = bb.forward(st, x, true, &tape);
    std::vector<Probe> probes;
    std::array<Tensor, 4> grads;
    for (int l = 0; l < 4; ++l) {
        probes.emplace_back(static_cast<std::size_t>(p.levels[l].size()), 60 + l);
        grads[l] = probes[l].as_grad(p.levels[l]);
    }
    st.zero_grad();
    bb.backward(st, tape, grads);
    auto f = [&] {
        const auto q = bb.forward(st, x, true, nullptr);
        Real s = 0;
        for (int l = 0; l < 4; ++l) s += probes[l](q.levels[l].values());
        return s;
    };
    Real global = 0.0;
    for (const auto& e : st.entries())
        for (Real g : e.grad) global = std::max(global, std::abs(g));
    for (auto& e : st.entries()) {
        if (!e.trainable || e.name.rfind("backbone.", 0) != 0) continue;
        const auto rep = fd_check(e.value, e.grad, f, 10, 1e-6, 1e-2, 1e-6 * global);
        INFO(e.name << " worst " << rep.worst);
        CHECK(rep.failed == 0);
    }
}
