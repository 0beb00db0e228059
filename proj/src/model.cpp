#include "dualreg/model.hpp"

#include <cmath>
#include <random>

namespace dualreg {

RegistrationNet::RegistrationNet(const NetworkConfig& config) : config_(config) { build(); }

RegistrationNet::RegistrationNet(const RegistrationNet& other) : config_(other.config_) {
    build();
    params_ = other.params_;
}

RegistrationNet& RegistrationNet::operator=(const RegistrationNet& other) {
    if (this != &other) {
        config_ = other.config_;
        params_ = ParamStore{};
        build();
        params_ = other.params_;
    }
    return *this;
}

void RegistrationNet::build() {
    for (auto c : config_.backbone.encoder_channels) {
        if (c < 1) throw std::invalid_argument("encoder channel widths must be positive");
    }
    if (config_.backbone.decoder_channels < 1) throw std::invalid_argument("decoder width must be positive");
    backbone_ = Backbone(params_, config_.backbone);
    heads_ = FieldHeads::create(params_, config_.backbone.decoder_channels);
}

BatchedRegistration RegistrationNet::forward(const Tensor& moving, const Tensor& fixed, bool training,
                                             Tape* tape) const {
    if (!moving.same_layout(fixed)) throw DataError("register: moving and fixed shapes differ");
    FeaturePyramid pm = backbone_.forward(params_, moving, training, tape ? &tape->moving_stream : nullptr);
    FeaturePyramid pf = backbone_.forward(params_, fixed, training, tape ? &tape->fixed_stream : nullptr);
    PyramidTape* pt = tape ? &tape->pyramid : nullptr;
    auto r = config_.mode == RegistrationMode::pyramid ? run_pyramid(params_, heads_, pm, pf, moving, pt)
                                                       : single_field_variant(params_, heads_, pm, pf, moving, pt);
    if (tape) {
        tape->moving_features = std::move(pm);
        tape->fixed_features = std::move(pf);
        tape->moving = moving;
    }
    return r;
}

void RegistrationNet::backward(const Tape& tape, const Tensor& grad_warped, const Tensor& grad_final_field) {
    const auto g = pyramid_backward(params_, heads_, config_.mode, tape.moving_features, tape.fixed_features,
                                    tape.moving, tape.pyramid, grad_warped, grad_final_field);
    backbone_.backward(params_, tape.moving_stream, g.moving);
    backbone_.backward(params_, tape.fixed_stream, g.fixed);
}

void RegistrationNet::update_running_stats(const Tape& tape) {
    backbone_.update_running_stats(params_, tape.moving_stream);
    backbone_.update_running_stats(params_, tape.fixed_stream);
}

RegistrationOutput RegistrationNet::register_pair(const Volume& moving, const Volume& fixed) const {
    require_same_shape(moving.shape(), fixed.shape(), "register");
    const auto r = forward(stack_volumes({&moving}), stack_volumes({&fixed}), false);
    return unbatch(r, 0, moving.spacing());
}

Tensor stack_volumes(const std::vector<const Volume*>& volumes) {
    if (volumes.empty()) throw std::invalid_argument("stack_volumes: empty batch");
    const auto shape = volumes.front()->shape();
    Tensor t(static_cast<std::int64_t>(volumes.size()), 1, shape);
    for (std::size_t n = 0; n < volumes.size(); ++n) {
        require_same_shape(volumes[n]->shape(), shape, "stack_volumes");
        std::copy(volumes[n]->data().begin(), volumes[n]->data().end(), t.sample(static_cast<std::int64_t>(n)));
    }
    return t;
}

void init_params(RegistrationNet& net, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<Real> normal(0.0, 1.0);
    auto& store = net.params();
    for (auto& e : store.entries()) {
        const bool head = e.name.rfind("heads.", 0) == 0;
        const bool weight = e.name.size() > 7 && e.name.compare(e.name.size() - 7, 7, ".weight") == 0;
        if (head) {
            std::fill(e.value.begin(), e.value.end(), 0.0);
        } else if (weight) {
            // shape (out, in, k, k, k); He-style scaling by fan-in
            const auto fan_in = static_cast<Real>(e.value.size() / e.shape[0]);
            const Real stddev = std::sqrt(2.0 / fan_in);
            for (auto& v : e.value) v = stddev * normal(rng);
        } else if (e.name.ends_with(".gamma") || e.name.ends_with(".running_var")) {
            std::fill(e.value.begin(), e.value.end(), 1.0);
        } else {
            std::fill(e.value.begin(), e.value.end(), 0.0);
        }
    }
    store.zero_grad();
}

BatchLoss batch_loss(const BatchedRegistration& r, const Tensor& fixed, const LossConfig& cfg, Tensor* grad_warped,
                     Tensor* grad_final_field) {
    const auto B = fixed.batch();
    const auto& shape = fixed.spatial();
    if (grad_warped) *grad_warped = zeros_like(r.warped);
    if (grad_final_field) *grad_final_field = zeros_like(r.final_field);
    BatchLoss loss;
    for (std::int64_t n = 0; n < B; ++n) {
        const std::span<const Real> w(r.warped.sample(n), static_cast<std::size_t>(shape.voxels()));
        const std::span<const Real> f(fixed.sample(n), static_cast<std::size_t>(shape.voxels()));
        std::span<Real> gw;
        if (grad_warped) gw = std::span<Real>(grad_warped->sample(n), static_cast<std::size_t>(shape.voxels()));
        const Real sim = nlcc(w, f, shape, cfg, gw);
        const std::span<const Real> u(r.final_field.sample(n), static_cast<std::size_t>(3 * shape.voxels()));
        std::span<Real> gu;
        if (grad_final_field) {
            gu = std::span<Real>(grad_final_field->sample(n), static_cast<std::size_t>(3 * shape.voxels()));
        }
        const Real smooth = smoothness(u, shape, gu, cfg.lambda / static_cast<Real>(B));
        loss.similarity += sim / static_cast<Real>(B);
        loss.smooth += smooth / static_cast<Real>(B);
    }
    if (grad_warped) {
        for (auto& v : grad_warped->values()) v /= static_cast<Real>(B);
    }
    loss.total = loss.similarity + cfg.lambda * loss.smooth;
    return loss;
}

}  // namespace dualreg
