#include "dualreg/training.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <random>
#include <sstream>

namespace dualreg {

using json = nlohmann::json;
namespace fs = std::filesystem;

void TrainConfig::validate() const {
    if (!(learning_rate > 0.0)) throw std::invalid_argument("learning_rate must be positive");
    if (batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
    if (iterations < 0) throw std::invalid_argument("iterations must be non-negative");
    if (checkpoint_every < 0) throw std::invalid_argument("checkpoint_every must be non-negative");
    for (int a = 0; a < 3; ++a) {
        if (input_shape[a] < 16) throw std::invalid_argument("input_shape extents must be >= 16");
    }
    loss.validate();
}

json to_json(const TrainConfig& c) {
    return json{{"learning_rate", c.learning_rate},
                {"batch_size", c.batch_size},
                {"iterations", c.iterations},
                {"seed", c.seed},
                {"mode", to_string(c.mode)},
                {"loss", {{"window", c.loss.window}, {"lambda", c.loss.lambda}, {"epsilon", c.loss.epsilon}}},
                {"encoder_channels", c.channels.encoder_channels},
                {"decoder_channels", c.channels.decoder_channels},
                {"input_shape", c.input_shape.dims},
                {"checkpoint_every", c.checkpoint_every},
                {"augment", c.augment}};
}

TrainConfig train_config_from_json(const json& j) {
    TrainConfig c;
    try {
        if (!j.is_object()) throw std::invalid_argument("train config must be a JSON object");
        c.learning_rate = j.value("learning_rate", c.learning_rate);
        c.batch_size = j.value("batch_size", c.batch_size);
        c.iterations = j.value("iterations", c.iterations);
        c.seed = j.value("seed", c.seed);
        if (j.contains("mode")) c.mode = parse_mode(j.at("mode").get<std::string>());
        if (j.contains("loss")) {
            const auto& l = j.at("loss");
            c.loss.window = l.value("window", c.loss.window);
            c.loss.lambda = l.value("lambda", c.loss.lambda);
            c.loss.epsilon = l.value("epsilon", c.loss.epsilon);
        }
        if (j.contains("encoder_channels")) {
            c.channels.encoder_channels = j.at("encoder_channels").get<std::array<std::int64_t, 4>>();
        }
        c.channels.decoder_channels = j.value("decoder_channels", c.channels.decoder_channels);
        if (j.contains("input_shape")) c.input_shape.dims = j.at("input_shape").get<std::array<std::int64_t, 3>>();
        c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
        c.augment = j.value("augment", c.augment);
    } catch (const json::exception& e) {
        throw std::invalid_argument(std::string("malformed train config: ") + e.what());
    }
    c.validate();
    return c;
}

std::string config_digest(const TrainConfig& c) {
    const auto text = to_json(c).dump();
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char ch : text) {
        h ^= ch;
        h *= 0x100000001b3ULL;
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

std::vector<std::size_t> epoch_order(std::size_t count, std::uint64_t seed, std::uint64_t epoch) {
    std::vector<std::size_t> order(count);
    for (std::size_t i = 0; i < count; ++i) order[i] = i;
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(epoch), static_cast<std::uint32_t>(epoch >> 32), 0x0ddba11u};
    std::mt19937_64 rng(seq);
    // Fisher-Yates with raw engine output keeps the order independent of the
    // standard library's distribution implementations.
    for (std::size_t i = count; i > 1; --i) {
        const auto j = static_cast<std::size_t>(rng() % i);
        std::swap(order[i - 1], order[j]);
    }
    return order;
}

// ---------------------------------------------------------------------------

AdamState AdamState::zeros_for(const ParamStore& store) {
    AdamState s;
    for (const auto& e : store.entries()) {
        s.m.emplace_back(e.trainable ? e.value.size() : 0, 0.0);
        s.v.emplace_back(e.trainable ? e.value.size() : 0, 0.0);
    }
    return s;
}

void AdamState::step(ParamStore& store, Real learning_rate, std::int64_t t) {
    constexpr Real beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
    const Real c1 = 1.0 - std::pow(beta1, static_cast<Real>(t));
    const Real c2 = 1.0 - std::pow(beta2, static_cast<Real>(t));
    for (std::size_t i = 0; i < store.size(); ++i) {
        auto& e = store[i];
        if (!e.trainable) continue;
        auto& m1 = m[i];
        auto& m2 = v[i];
        for (std::size_t q = 0; q < e.value.size(); ++q) {
            const Real g = e.grad[q];
            m1[q] = beta1 * m1[q] + (1.0 - beta1) * g;
            m2[q] = beta2 * m2[q] + (1.0 - beta2) * g * g;
            e.value[q] -= learning_rate * (m1[q] / c1) / (std::sqrt(m2[q] / c2) + eps);
        }
    }
}

// ---------------------------------------------------------------------------

namespace {

constexpr char kMagic[8] = {'D', 'R', 'P', 'N', 'C', 'K', 'P', 'T'};

template <typename T>
void put_le(std::string& out, T v) {
    unsigned char b[sizeof(T)];
    std::memcpy(b, &v, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(b, b + sizeof(T));
    out.append(reinterpret_cast<const char*>(b), sizeof(T));
}

template <typename T>
T get_le(const std::string& in, std::size_t offset) {
    if (offset + sizeof(T) > in.size()) throw DataError("checkpoint: truncated file");
    unsigned char b[sizeof(T)];
    std::memcpy(b, in.data() + offset, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(b, b + sizeof(T));
    T v;
    std::memcpy(&v, b, sizeof(T));
    return v;
}

}  // namespace

void save_checkpoint(const Checkpoint& ckpt, const fs::path& path) {
    json header;
    header["format"] = "dualreg-checkpoint";
    header["config"] = to_json(ckpt.config);
    header["config_digest"] = config_digest(ckpt.config);
    header["iteration"] = ckpt.iteration;
    json hist = json::array();
    for (const auto& r : ckpt.history) hist.push_back({r.step, r.total, r.similarity, r.smooth});
    header["loss_history"] = std::move(hist);

    std::string payload;
    json table = json::array();
    auto add_tensor = [&](const std::string& name, const std::vector<std::int64_t>& shape,
                          const std::vector<Real>& values) {
        const auto bytes = encode_payload("f64", values);
        table.push_back({{"name", name}, {"dtype", "f64"}, {"shape", shape}, {"offset", payload.size()},
                         {"nbytes", bytes.size()}});
        payload += bytes;
    };
    for (std::size_t i = 0; i < ckpt.params.size(); ++i) {
        const auto& e = ckpt.params[i];
        add_tensor(e.name, e.shape, e.value);
    }
    for (std::size_t i = 0; i < ckpt.params.size(); ++i) {
        const auto& e = ckpt.params[i];
        if (!e.trainable) continue;
        add_tensor("adam.m/" + e.name, e.shape, ckpt.adam.m.at(i));
        add_tensor("adam.v/" + e.name, e.shape, ckpt.adam.v.at(i));
    }
    header["tensors"] = std::move(table);

    const auto text = header.dump();
    std::string out(kMagic, sizeof kMagic);
    put_le<std::uint32_t>(out, kCheckpointVersion);
    put_le<std::uint64_t>(out, text.size());
    out += text;
    out += payload;

    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    auto tmp = path;
    tmp += ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        if (!f) throw DataError("cannot write checkpoint '" + path.string() + "'");
        f.write(out.data(), static_cast<std::streamsize>(out.size()));
        if (!f) throw DataError("write failed for checkpoint '" + path.string() + "'");
    }
    fs::rename(tmp, path);
}

Checkpoint load_checkpoint(const fs::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot open checkpoint '" + path.string() + "'");
    std::ostringstream os;
    os << f.rdbuf();
    const auto bytes = os.str();
    if (bytes.size() < 20 || std::memcmp(bytes.data(), kMagic, sizeof kMagic) != 0) {
        throw DataError("'" + path.string() + "' is not a checkpoint");
    }
    const auto version = get_le<std::uint32_t>(bytes, 8);
    if (version != kCheckpointVersion) throw DataError("checkpoint: unsupported version " + std::to_string(version));
    const auto header_len = get_le<std::uint64_t>(bytes, 12);
    const std::size_t payload_start = 20 + header_len;
    if (payload_start > bytes.size()) throw DataError("checkpoint: truncated header");

    Checkpoint ckpt;
    json header;
    try {
        header = json::parse(bytes.substr(20, header_len));
        ckpt.config = train_config_from_json(header.at("config"));
        ckpt.iteration = header.at("iteration").get<std::int64_t>();
        for (const auto& r : header.at("loss_history")) {
            ckpt.history.push_back({r.at(0).get<std::int64_t>(), r.at(1).get<Real>(), r.at(2).get<Real>(),
                                    r.at(3).get<Real>()});
        }
    } catch (const json::exception& e) {
        throw DataError(std::string("checkpoint: malformed header: ") + e.what());
    } catch (const std::invalid_argument& e) {
        throw DataError(std::string("checkpoint: ") + e.what());
    }
    if (header.value("config_digest", "") != config_digest(ckpt.config)) {
        throw DataError("checkpoint: config digest mismatch");
    }

    RegistrationNet net(ckpt.config.network());
    ckpt.params = net.params();
    ckpt.adam = AdamState::zeros_for(ckpt.params);
    std::size_t found = 0;
    for (const auto& t : header.at("tensors")) {
        const auto name = t.at("name").get<std::string>();
        const auto offset = t.at("offset").get<std::size_t>();
        const auto nbytes = t.at("nbytes").get<std::size_t>();
        if (payload_start + offset + nbytes > bytes.size()) throw DataError("checkpoint: tensor '" + name + "' truncated");
        auto values = decode_payload(t.at("dtype").get<std::string>(),
                                     std::string_view(bytes).substr(payload_start + offset, nbytes));
        std::vector<Real>* dst = nullptr;
        if (name.rfind("adam.m/", 0) == 0) {
            dst = &ckpt.adam.m.at(ckpt.params.find(name.substr(7)));
        } else if (name.rfind("adam.v/", 0) == 0) {
            dst = &ckpt.adam.v.at(ckpt.params.find(name.substr(7)));
        } else {
            dst = &ckpt.params[ckpt.params.find(name)].value;
            ++found;
        }
        if (values.size() != dst->size()) throw DataError("checkpoint: tensor '" + name + "' has wrong size");
        *dst = std::move(values);
    }
    if (found != ckpt.params.size()) throw DataError("checkpoint: missing parameter tensors");
    return ckpt;
}

RegistrationNet network_from_checkpoint(const Checkpoint& ckpt) {
    RegistrationNet net(ckpt.config.network());
    if (net.params().size() != ckpt.params.size()) throw DataError("checkpoint: parameter layout mismatch");
    for (std::size_t i = 0; i < ckpt.params.size(); ++i) {
        auto& e = net.params()[i];
        if (e.name != ckpt.params[i].name || e.value.size() != ckpt.params[i].value.size()) {
            throw DataError("checkpoint: parameter layout mismatch at '" + e.name + "'");
        }
        e.value = ckpt.params[i].value;
    }
    return net;
}

RegistrationOutput register_volumes(const Volume& moving, const Volume& fixed, const Checkpoint& ckpt) {
    require_same_shape(moving.shape(), ckpt.config.input_shape, "register (checkpoint input shape)");
    require_same_shape(fixed.shape(), ckpt.config.input_shape, "register (checkpoint input shape)");
    return network_from_checkpoint(ckpt).register_pair(moving, fixed);
}

// ---------------------------------------------------------------------------

Trainer::Trainer(TrainConfig config, std::vector<VolumePair> data)
    : config_(std::move(config)), data_(std::move(data)), net_(config_.network()) {
    config_.validate();
    check_data();
    init_params(net_, config_.seed);
    adam_ = AdamState::zeros_for(net_.params());
}

Trainer::Trainer(const Checkpoint& ckpt, std::vector<VolumePair> data)
    : config_(ckpt.config),
      data_(std::move(data)),
      net_(network_from_checkpoint(ckpt)),
      adam_(ckpt.adam),
      iteration_(ckpt.iteration),
      history_(ckpt.history) {
    check_data();
}

void Trainer::check_data() const {
    if (data_.empty()) throw DataError("train: dataset is empty");
    for (const auto& p : data_) {
        require_same_shape(p.moving.shape(), config_.input_shape, "train (moving vs config input_shape)");
        require_same_shape(p.fixed.shape(), config_.input_shape, "train (fixed vs config input_shape)");
    }
}

Augmentation draw_augmentation(const Shape3& shape, std::uint64_t seed, std::int64_t step, std::int64_t slot) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(step), static_cast<std::uint32_t>(static_cast<std::uint64_t>(step) >> 32),
                      static_cast<std::uint32_t>(slot), 0xa11ce5u};
    std::mt19937_64 rng(seq);
    std::vector<std::array<int, 3>> perms;
    std::array<int, 3> p{0, 1, 2};
    do {
        if (shape[p[0]] == shape[0] && shape[p[1]] == shape[1] && shape[p[2]] == shape[2]) perms.push_back(p);
    } while (std::next_permutation(p.begin(), p.end()));
    Augmentation a;
    a.perm = perms[static_cast<std::size_t>(rng() % perms.size())];
    const auto bits = rng();
    for (int k = 0; k < 3; ++k) a.flip[k] = (bits >> k) & 1;
    a.swap = (bits >> 3) & 1;
    return a;
}

Volume apply_augmentation(const Volume& v, const Augmentation& a) {
    const auto& s = v.shape();
    const Shape3 out_shape{s[a.perm[0]], s[a.perm[1]], s[a.perm[2]]};
    const Spacing& sp = v.spacing();
    Volume out(out_shape, 0.0, {sp[a.perm[0]], sp[a.perm[1]], sp[a.perm[2]]});
    std::int64_t p[3];
    for (p[0] = 0; p[0] < out_shape[0]; ++p[0])
        for (p[1] = 0; p[1] < out_shape[1]; ++p[1])
            for (p[2] = 0; p[2] < out_shape[2]; ++p[2]) {
                std::int64_t q[3];
                for (int k = 0; k < 3; ++k) q[a.perm[k]] = a.flip[k] ? out_shape[k] - 1 - p[k] : p[k];
                out.at(p[0], p[1], p[2]) = v.at(q[0], q[1], q[2]);
            }
    return out;
}

std::vector<std::size_t> Trainer::batch_indices(std::int64_t step) const {
    const auto count = data_.size();
    std::vector<std::size_t> out;
    std::vector<std::size_t> order;
    std::uint64_t cached_epoch = ~0ULL;
    for (std::int64_t b = 0; b < config_.batch_size; ++b) {
        const auto position = static_cast<std::uint64_t>(step * config_.batch_size + b);
        const auto epoch = position / count;
        if (epoch != cached_epoch) {
            order = epoch_order(count, config_.seed, epoch);
            cached_epoch = epoch;
        }
        out.push_back(order[position % count]);
    }
    return out;
}

LossRecord Trainer::step() {
    const auto idx = batch_indices(iteration_);
    std::vector<Volume> augmented;
    std::vector<const Volume*> moving, fixed;
    if (config_.augment) {
        augmented.reserve(2 * idx.size());
        for (std::size_t b = 0; b < idx.size(); ++b) {
            const auto& pair = data_[idx[b]];
            const auto a = draw_augmentation(pair.moving.shape(), config_.seed, iteration_, static_cast<std::int64_t>(b));
            augmented.push_back(apply_augmentation(a.swap ? pair.fixed : pair.moving, a));
            augmented.push_back(apply_augmentation(a.swap ? pair.moving : pair.fixed, a));
        }
        for (std::size_t b = 0; b < idx.size(); ++b) {
            moving.push_back(&augmented[2 * b]);
            fixed.push_back(&augmented[2 * b + 1]);
        }
    } else {
        for (auto i : idx) {
            moving.push_back(&data_[i].moving);
            fixed.push_back(&data_[i].fixed);
        }
    }
    const Tensor m = stack_volumes(moving);
    const Tensor f = stack_volumes(fixed);

    RegistrationNet::Tape tape;
    const auto r = net_.forward(m, f, true, &tape);
    Tensor grad_warped, grad_field;
    const auto loss = batch_loss(r, f, config_.loss, &grad_warped, &grad_field);
    if (!std::isfinite(loss.total)) {
        throw NumericError("non-finite loss at step " + std::to_string(iteration_) + " (nlcc=" +
                           std::to_string(loss.similarity) + ", smooth=" + std::to_string(loss.smooth) + ")");
    }
    net_.params().zero_grad();
    net_.backward(tape, grad_warped, grad_field);
    net_.update_running_stats(tape);
    adam_.step(net_.params(), config_.learning_rate, iteration_ + 1);

    LossRecord rec{iteration_, loss.total, loss.similarity, loss.smooth};
    history_.push_back(rec);
    ++iteration_;
    return rec;
}

void Trainer::run(const std::function<void(const LossRecord&)>& on_step,
                  const std::function<void(const Checkpoint&)>& on_checkpoint) {
    while (iteration_ < config_.iterations) {
        const auto rec = step();
        if (on_step) on_step(rec);
        if (on_checkpoint && config_.checkpoint_every > 0 && iteration_ % config_.checkpoint_every == 0) {
            on_checkpoint(checkpoint());
        }
    }
}

Checkpoint Trainer::checkpoint() const {
    Checkpoint c;
    c.config = config_;
    c.iteration = iteration_;
    c.history = history_;
    c.params = net_.params();
    c.adam = adam_;
    for (auto& e : c.params.entries()) std::fill(e.grad.begin(), e.grad.end(), 0.0);
    return c;
}

Checkpoint train(std::vector<VolumePair> data, const TrainConfig& config) {
    Trainer t(config, std::move(data));
    t.run();
    return t.checkpoint();
}

}  // namespace dualreg
