#pragma once

// Feed-forward regression network: ReLU hidden layers, identity scalar
// output. Forward pass, reverse-mode gradients, Glorot init, Adam, the input
// Jacobian, and JSON (de)serialization.
//
// Batched tensors are feature-major: a batch of B inputs is an (in x B)
// matrix with one sample per column.

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <limits>
#include <numeric>
#include <string>
#include <string_view>
#include <vector>

#include "nrtm/errors.hpp"
#include "nrtm/rng.hpp"
#include "nrtm/sampling.hpp"

namespace nrtm {

struct MlpModel {
    std::vector<std::size_t> layer_dims;
    std::vector<Eigen::MatrixXd> weights;  ///< layer l: layer_dims[l+1] x layer_dims[l]
    std::vector<Eigen::VectorXd> biases;   ///< layer l: layer_dims[l+1]

    std::size_t num_layers() const { return weights.size(); }
    std::size_t input_dim() const { return layer_dims.front(); }
    std::size_t num_parameters() const {
        std::size_t p = 0;
        for (std::size_t l = 0; l < weights.size(); ++l)
            p += static_cast<std::size_t>(weights[l].size() + biases[l].size());
        return p;
    }

    void validate() const {
        if (layer_dims.size() < 2) throw DimensionError("network needs at least input and output layers");
        if (layer_dims.back() != 1) throw DimensionError("network output dimension must be 1");
        for (auto d : layer_dims)
            if (d == 0) throw DimensionError("layer dimensions must be positive");
        if (weights.size() != layer_dims.size() - 1 || biases.size() != weights.size())
            throw DimensionError("parameter count does not match layer_dims");
        for (std::size_t l = 0; l < weights.size(); ++l) {
            if (static_cast<std::size_t>(weights[l].rows()) != layer_dims[l + 1] ||
                static_cast<std::size_t>(weights[l].cols()) != layer_dims[l] ||
                static_cast<std::size_t>(biases[l].size()) != layer_dims[l + 1])
                throw DimensionError("layer " + std::to_string(l) + " parameter shape mismatch");
            if (!weights[l].allFinite() || !biases[l].allFinite())
                throw NumericalError("layer " + std::to_string(l) + " has non-finite parameters");
        }
    }

    /// Bitwise parameter equality.
    bool operator==(const MlpModel& o) const {
        if (layer_dims != o.layer_dims || weights.size() != o.weights.size()) return false;
        for (std::size_t l = 0; l < weights.size(); ++l) {
            if (weights[l].size() != o.weights[l].size() || biases[l].size() != o.biases[l].size()) return false;
            if (std::memcmp(weights[l].data(), o.weights[l].data(), sizeof(double) * weights[l].size()) != 0)
                return false;
            if (std::memcmp(biases[l].data(), o.biases[l].data(), sizeof(double) * biases[l].size()) != 0)
                return false;
        }
        return true;
    }
};

/// Default subnetwork shape: 5 inputs, two hidden layers of 64, scalar output.
inline std::vector<std::size_t> default_layer_dims(std::size_t hidden = 64) {
    return {kChannelInputs, hidden, hidden, 1};
}

/// Glorot/Xavier uniform: W ~ U[-a, a], a = sqrt(6 / (fan_in + fan_out)); zero biases.
inline MlpModel glorot_init(const std::vector<std::size_t>& layer_dims, std::uint64_t seed) {
    MlpModel m;
    m.layer_dims = layer_dims;
    if (layer_dims.size() < 2) throw DimensionError("network needs at least input and output layers");
    Rng rng(seed);
    for (std::size_t l = 0; l + 1 < layer_dims.size(); ++l) {
        const auto fan_in = static_cast<Eigen::Index>(layer_dims[l]);
        const auto fan_out = static_cast<Eigen::Index>(layer_dims[l + 1]);
        const double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
        Eigen::MatrixXd w(fan_out, fan_in);
        for (Eigen::Index r = 0; r < fan_out; ++r)
            for (Eigen::Index c = 0; c < fan_in; ++c) w(r, c) = uniform(rng, -a, a);
        m.weights.push_back(std::move(w));
        m.biases.push_back(Eigen::VectorXd::Zero(fan_out));
    }
    m.validate();
    return m;
}

inline void check_input(const MlpModel& m, Eigen::Index rows) {
    if (static_cast<std::size_t>(rows) != m.input_dim())
        throw DimensionError("input has " + std::to_string(rows) + " features, network expects " +
                             std::to_string(m.input_dim()));
}

/// Scalar prediction for one input vector.
inline double forward(const MlpModel& m, const Eigen::Ref<const Eigen::VectorXd>& x) {
    check_input(m, x.size());
    Eigen::VectorXd a = x;
    const std::size_t last = m.num_layers() - 1;
    for (std::size_t l = 0; l < m.num_layers(); ++l) {
        Eigen::VectorXd z = m.weights[l] * a + m.biases[l];
        a = l == last ? z : z.cwiseMax(0.0);
    }
    return a(0);
}

/// Predictions for a feature-major batch.
inline Eigen::RowVectorXd forward_batch(const MlpModel& m, const Eigen::Ref<const Eigen::MatrixXd>& x) {
    check_input(m, x.rows());
    Eigen::MatrixXd a = x;
    const std::size_t last = m.num_layers() - 1;
    for (std::size_t l = 0; l < m.num_layers(); ++l) {
        Eigen::MatrixXd z = m.weights[l] * a;
        z.colwise() += m.biases[l];
        if (l != last) z = z.cwiseMax(0.0);
        a = std::move(z);
    }
    return a.row(0);
}

/// d(output)/d(input) at `x`: W_L D_{L-1} W_{L-1} ... D_1 W_1 with
/// D_l = diag(1[z_l > 0]).
inline Eigen::VectorXd input_jacobian(const MlpModel& m, const Eigen::Ref<const Eigen::VectorXd>& x) {
    check_input(m, x.size());
    std::vector<Eigen::VectorXd> pre(m.num_layers());
    Eigen::VectorXd a = x;
    for (std::size_t l = 0; l + 1 < m.num_layers(); ++l) {
        pre[l] = m.weights[l] * a + m.biases[l];
        a = pre[l].cwiseMax(0.0);
    }
    Eigen::RowVectorXd g = m.weights.back().row(0);
    for (std::size_t l = m.num_layers() - 1; l-- > 0;) {
        for (Eigen::Index j = 0; j < g.size(); ++j)
            if (!(pre[l](j) > 0.0)) g(j) = 0.0;
        g = g * m.weights[l];
    }
    return g.transpose();
}

enum class Loss { mse, mae };

inline std::string_view to_string(Loss l) { return l == Loss::mse ? "mse" : "mae"; }
inline Loss parse_loss(std::string_view s) {
    if (s == "mse") return Loss::mse;
    if (s == "mae") return Loss::mae;
    throw ConfigError("unknown loss '" + std::string(s) + "'");
}

/// Parameter-shaped gradient (or moment) storage.
struct Gradients {
    std::vector<Eigen::MatrixXd> weights;
    std::vector<Eigen::VectorXd> biases;

    static Gradients zeros_like(const MlpModel& m) {
        Gradients g;
        for (std::size_t l = 0; l < m.num_layers(); ++l) {
            g.weights.push_back(Eigen::MatrixXd::Zero(m.weights[l].rows(), m.weights[l].cols()));
            g.biases.push_back(Eigen::VectorXd::Zero(m.biases[l].size()));
        }
        return g;
    }
};

struct BackwardResult {
    Gradients grads;
    double loss = 0.0;
};

/// Reusable buffers for batched forward/backward passes.
class Workspace {
public:
    /// Mean batch loss and its exact gradient. ReLU'(0) = 0, |r|'(0) = 0.
    double backward(const MlpModel& m, const Eigen::Ref<const Eigen::MatrixXd>& x,
                    const Eigen::Ref<const Eigen::RowVectorXd>& t, Loss loss, Gradients& g) {
        const std::size_t layers = m.num_layers();
        const Eigen::Index batch = x.cols();
        if (batch == 0) throw DimensionError("empty batch");
        if (t.size() != batch) throw DimensionError("target count does not match batch size");
        check_input(m, x.rows());
        if (g.weights.size() != layers) g = Gradients::zeros_like(m);

        z_.resize(layers);
        a_.resize(layers);
        const auto input = [&](std::size_t l) {
            return l == 0 ? x : Eigen::Ref<const Eigen::MatrixXd>(a_[l - 1]);
        };
        for (std::size_t l = 0; l < layers; ++l) {
            const auto in = input(l);
            z_[l].resize(m.weights[l].rows(), batch);
            z_[l].noalias() = m.weights[l] * in;
            z_[l].colwise() += m.biases[l];
            if (l + 1 < layers) a_[l] = z_[l].cwiseMax(0.0);
        }

        const double inv_b = 1.0 / static_cast<double>(batch);
        Eigen::RowVectorXd r = z_.back().row(0) - t;
        double value;
        delta_.resize(1, batch);
        if (loss == Loss::mse) {
            value = r.squaredNorm() * inv_b;
            delta_.row(0) = (2.0 * inv_b) * r;
        } else {
            value = r.cwiseAbs().sum() * inv_b;
            for (Eigen::Index j = 0; j < batch; ++j)
                delta_(0, j) = r(j) > 0.0 ? inv_b : (r(j) < 0.0 ? -inv_b : 0.0);
        }
        if (!std::isfinite(value)) throw NumericalError("non-finite loss in backward pass");

        for (std::size_t l = layers; l-- > 0;) {
            const auto in = input(l);
            g.weights[l].noalias() = delta_ * in.transpose();
            g.biases[l] = delta_.rowwise().sum();
            if (l == 0) break;
            prev_.resize(m.weights[l].cols(), batch);
            prev_.noalias() = m.weights[l].transpose() * delta_;
            delta_ = (z_[l - 1].array() > 0.0).select(prev_, 0.0);
        }
        return value;
    }

private:
    std::vector<Eigen::MatrixXd> z_, a_;
    Eigen::MatrixXd delta_, prev_;
};

/// Gradients of the mean batch loss. `x` is feature-major, `t` one target per column.
inline BackwardResult backward(const MlpModel& m, const Eigen::Ref<const Eigen::MatrixXd>& x,
                               const Eigen::Ref<const Eigen::VectorXd>& t, Loss loss) {
    Workspace ws;
    BackwardResult res;
    res.grads = Gradients::zeros_like(m);
    res.loss = ws.backward(m, x, t.transpose(), loss, res.grads);
    return res;
}

struct AdamParams {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

struct AdamState {
    AdamParams hp;
    Gradients m;  ///< first moment
    Gradients v;  ///< second moment
    std::int64_t t = 0;

    static AdamState fresh(const MlpModel& model, AdamParams hp = {}) {
        return {hp, Gradients::zeros_like(model), Gradients::zeros_like(model), 0};
    }
};

/// One bias-corrected Adam update, in place.
inline void adam_step(MlpModel& model, const Gradients& g, AdamState& s) {
    if (s.m.weights.size() != model.num_layers()) {
        s.m = Gradients::zeros_like(model);
        s.v = Gradients::zeros_like(model);
    }
    ++s.t;
    const double b1 = s.hp.beta1, b2 = s.hp.beta2;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(s.t));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(s.t));
    const double lr = s.hp.lr, eps = s.hp.eps;
    const auto update = [&](auto& p, const auto& grad, auto& m1, auto& m2) {
        m1.array() = b1 * m1.array() + (1.0 - b1) * grad.array();
        m2.array() = b2 * m2.array() + (1.0 - b2) * grad.array().square();
        p.array() -= lr * (m1.array() / c1) / ((m2.array() / c2).sqrt() + eps);
    };
    for (std::size_t l = 0; l < model.num_layers(); ++l) {
        update(model.weights[l], g.weights[l], s.m.weights[l], s.v.weights[l]);
        update(model.biases[l], g.biases[l], s.m.biases[l], s.v.biases[l]);
    }
}

/// Mean absolute error of `pred` vs `y`, divided by `scale`.
inline double normalized_mae(const Eigen::Ref<const Eigen::RowVectorXd>& pred,
                             const Eigen::Ref<const Eigen::VectorXd>& y, double scale) {
    return (pred.transpose() - y).cwiseAbs().mean() / scale;
}

struct TrainOptions {
    std::size_t batch_size = 128;
    std::size_t max_epochs = 500;  ///< eta_epoch
    double epsilon = 1e-3;         ///< convergence threshold on validation nMAE
    std::size_t patience = 60;
    double min_improvement = 1e-5;
    Loss loss = Loss::mae;
    AdamParams adam{.lr = 3e-3};
    /// Learning-rate reduction on plateau: after `lr_patience` epochs without
    /// a new best validation nMAE, lr *= lr_factor (floored at min_lr).
    /// lr_factor = 1 disables the schedule.
    double lr_factor = 0.5;
    std::size_t lr_patience = 25;
    double min_lr = 1e-6;
    /// Per-epoch multiplicative learning-rate decay (1 = constant).
    double lr_gamma = 1.0;
    std::uint64_t seed = 0;
};

struct TrainReport {
    std::size_t epochs_run = 0;
    std::vector<double> train_loss;  ///< mean minibatch loss per epoch
    std::vector<double> val_nmae;    ///< after each epoch
    double initial_val_nmae = 0.0;   ///< before any update
    double best_val_nmae = 0.0;
    std::size_t best_epoch = 0;      ///< 0 = the initial parameters
    bool converged = false;
    double seconds = 0.0;
};

struct TrainResult {
    MlpModel model;
    TrainReport report;
};

/// Minibatch Adam on `train`, validated on `val` after every epoch.
///
/// Stops when validation nMAE <= epsilon (converged), when it has not improved
/// by more than min_improvement for `patience` epochs, or after max_epochs.
/// nMAE is normalized by the mean |target| of the train rows. Returns the
/// parameters with the lowest validation nMAE seen, which on convergence are
/// the final ones.
inline TrainResult train(MlpModel model, const Batch& train_set, const Batch& val_set, const TrainOptions& opts) {
    const auto start = std::chrono::steady_clock::now();
    model.validate();
    if (train_set.size() == 0 || val_set.size() == 0) throw ConfigError("train and validation sets must be nonempty");
    if (opts.batch_size == 0) throw ConfigError("network.batch_size must be >= 1");
    check_input(model, train_set.x.rows());
    check_input(model, val_set.x.rows());

    double scale = train_set.y.cwiseAbs().mean();
    if (!(scale > 0.0)) scale = 1.0;

    TrainResult res;
    TrainReport& rep = res.report;
    rep.initial_val_nmae = normalized_mae(forward_batch(model, val_set.x), val_set.y, scale);
    rep.best_val_nmae = rep.initial_val_nmae;
    MlpModel best = model;

    AdamState adam = AdamState::fresh(model, opts.adam);
    Workspace ws;
    Gradients grads = Gradients::zeros_like(model);
    Rng rng(opts.seed);
    const std::size_t n = train_set.size();
    std::vector<Eigen::Index> order(n);
    std::iota(order.begin(), order.end(), Eigen::Index{0});
    Eigen::MatrixXd bx(train_set.x.rows(), static_cast<Eigen::Index>(std::min(opts.batch_size, n)));
    Eigen::RowVectorXd by(bx.cols());
    std::size_t since_improvement = 0;
    std::size_t since_best = 0;

    for (std::size_t epoch = 1; epoch <= opts.max_epochs; ++epoch) {
        shuffle(std::span<Eigen::Index>(order), rng);
        double loss_sum = 0.0;
        std::size_t batches = 0;
        for (std::size_t lo = 0; lo < n; lo += opts.batch_size) {
            const auto cnt = static_cast<Eigen::Index>(std::min(opts.batch_size, n - lo));
            bx.resize(Eigen::NoChange, cnt);
            by.resize(cnt);
            for (Eigen::Index j = 0; j < cnt; ++j) {
                const Eigen::Index src = order[lo + static_cast<std::size_t>(j)];
                bx.col(j) = train_set.x.col(src);
                by(j) = train_set.y(src);
            }
            loss_sum += ws.backward(model, bx, by, opts.loss, grads);
            adam_step(model, grads, adam);
            ++batches;
        }
        adam.hp.lr = std::max(opts.min_lr, adam.hp.lr * opts.lr_gamma);
        const double train_loss = loss_sum / static_cast<double>(batches);
        const double nmae = normalized_mae(forward_batch(model, val_set.x), val_set.y, scale);
        if (!std::isfinite(train_loss) || !std::isfinite(nmae))
            throw NumericalError("training diverged at epoch " + std::to_string(epoch));
        rep.epochs_run = epoch;
        rep.train_loss.push_back(train_loss);
        rep.val_nmae.push_back(nmae);

        if (nmae < rep.best_val_nmae - opts.min_improvement) {
            since_improvement = 0;
        } else {
            ++since_improvement;
        }
        if (nmae < rep.best_val_nmae) {
            rep.best_val_nmae = nmae;
            rep.best_epoch = epoch;
            best = model;
            since_best = 0;
        } else if (++since_best >= opts.lr_patience && opts.lr_factor < 1.0) {
            adam.hp.lr = std::max(opts.min_lr, adam.hp.lr * opts.lr_factor);
            since_best = 0;
        }
        if (nmae <= opts.epsilon) {
            rep.converged = true;
            break;
        }
        if (since_improvement >= opts.patience) break;
    }

    res.model = std::move(best);
    rep.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return res;
}

// ---------------------------------------------------------------------------
// Serialization. Weight matrices are stored as arrays of rows.

inline nlohmann::json to_json(const MlpModel& m) {
    nlohmann::json j;
    j["layer_dims"] = m.layer_dims;
    auto& layers = j["layers"] = nlohmann::json::array();
    for (std::size_t l = 0; l < m.num_layers(); ++l) {
        nlohmann::json w = nlohmann::json::array();
        for (Eigen::Index r = 0; r < m.weights[l].rows(); ++r) {
            std::vector<double> row(static_cast<std::size_t>(m.weights[l].cols()));
            for (Eigen::Index c = 0; c < m.weights[l].cols(); ++c) row[static_cast<std::size_t>(c)] = m.weights[l](r, c);
            w.push_back(std::move(row));
        }
        std::vector<double> b(m.biases[l].data(), m.biases[l].data() + m.biases[l].size());
        layers.push_back({{"W", std::move(w)}, {"b", std::move(b)}});
    }
    return j;
}

inline MlpModel mlp_from_json(const nlohmann::json& j, const std::string& where = "model") {
    MlpModel m;
    try {
        m.layer_dims = j.at("layer_dims").get<std::vector<std::size_t>>();
        const auto& layers = j.at("layers");
        if (!layers.is_array() || layers.size() + 1 != m.layer_dims.size())
            throw ParseError(where + ": expected " + std::to_string(m.layer_dims.size() - 1) + " layers");
        for (std::size_t l = 0; l < layers.size(); ++l) {
            const auto rows = static_cast<Eigen::Index>(m.layer_dims[l + 1]);
            const auto cols = static_cast<Eigen::Index>(m.layer_dims[l]);
            const auto& w = layers[l].at("W");
            if (!w.is_array() || static_cast<Eigen::Index>(w.size()) != rows)
                throw ParseError(where + ".layers[" + std::to_string(l) + "].W: wrong row count");
            Eigen::MatrixXd wm(rows, cols);
            for (Eigen::Index r = 0; r < rows; ++r) {
                const auto row = w[static_cast<std::size_t>(r)].get<std::vector<double>>();
                if (static_cast<Eigen::Index>(row.size()) != cols)
                    throw ParseError(where + ".layers[" + std::to_string(l) + "].W[" + std::to_string(r) +
                                     "]: wrong column count");
                for (Eigen::Index c = 0; c < cols; ++c) wm(r, c) = row[static_cast<std::size_t>(c)];
            }
            const auto b = layers[l].at("b").get<std::vector<double>>();
            if (static_cast<Eigen::Index>(b.size()) != rows)
                throw ParseError(where + ".layers[" + std::to_string(l) + "].b: wrong length");
            m.weights.push_back(std::move(wm));
            m.biases.push_back(Eigen::Map<const Eigen::VectorXd>(b.data(), rows));
        }
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(where + ": " + e.what());
    }
    try {
        m.validate();
    } catch (const Error& e) {
        throw ParseError(where + ": " + e.what());
    }
    return m;
}

inline std::string save(const MlpModel& m) { return to_json(m).dump(); }

inline MlpModel load_mlp(std::string_view text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        throw ParseError(std::string("model parse error at byte ") + std::to_string(e.byte) + ": " + e.what());
    }
    return mlp_from_json(j);
}

}  // namespace nrtm
