#pragma once

#include <algorithm>
#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "support.hpp"

namespace dualreg::testing {

inline Real loss_of(const RegistrationNet& net, const PairBatch& b, const LossConfig& cfg, bool training) {
    const auto r = net.forward(b.moving, b.fixed, training);
    return batch_loss(r, b.fixed, cfg).total;
}

struct CheckResult {
    std::string name;
    int checked = 0;
    int failed = 0;
    Real worst = 0.0;
};

inline std::vector<CheckResult> check_network_gradients(RegistrationMode mode, int per_layer, Real step, Real rtol, int batch_size = 2, bool training = true) {
    auto net = small_net(mode, 5);
    const auto batch = phantom_batch({16, 16, 16}, 11, batch_size);
    LossConfig cfg;
    cfg.window = 5;
    cfg.lambda = 1.0;

    RegistrationNet::Tape tape;
    const auto r = net.forward(batch.moving, batch.fixed, training, &tape);
    Tensor gw, gf;
    batch_loss(r, batch.fixed, cfg, &gw, &gf);
    net.params().zero_grad();
    net.backward(tape, gw, gf);

    // Biases feeding a batch norm have an exactly zero gradient; their finite
    // differences are pure roundoff, so the floor scales with the whole network.
    Real global = 0.0;
    for (const auto& e : net.params().entries())
        for (Real g : e.grad) global = std::max(global, std::abs(g));

    std::vector<CheckResult> out;
    std::mt19937_64 rng(3);
    for (std::size_t e = 0; e < net.params().size(); ++e) {
        auto& entry = net.params()[e];
        if (!entry.trainable) continue;
        CheckResult res{entry.name};
        const auto n = entry.value.size();
        std::vector<std::size_t> idx(n);
        for (std::size_t i = 0; i < n; ++i) idx[i] = i;
        std::shuffle(idx.begin(), idx.end(), rng);
        idx.resize(std::min<std::size_t>(n, static_cast<std::size_t>(per_layer)));
        Real scale = 0.0;
        for (Real g : entry.grad) scale = std::max(scale, std::abs(g));
        for (std::size_t i : idx) {
            const Real saved = entry.value[i];
            entry.value[i] = saved + step;
            const Real lp = loss_of(net, batch, cfg, training);
            entry.value[i] = saved - step;
            const Real lm = loss_of(net, batch, cfg, training);
            entry.value[i] = saved;
            const Real numeric = (lp - lm) / (2 * step);
            const Real analytic = entry.grad[i];
            const Real denom = std::max({std::abs(numeric), std::abs(analytic), 1e-3 * scale, 1e-6 * global});
            const Real rel = std::abs(numeric - analytic) / denom;
            res.worst = std::max(res.worst, rel);
            ++res.checked;
            if (rel > rtol) ++res.failed;
        }
        out.push_back(res);
    }
    return out;
}

}  // namespace dualreg::testing
