#include <gtest/gtest.h>

#include <cmath>

#include "gradcheck.hpp"
#include "nrtm/neural_net.hpp"
#include "nrtm/rng.hpp"

using namespace nrtm;
using nrtm::testkit::activation_pattern;

namespace {

Batch random_batch(Rng& rng, Eigen::Index features, Eigen::Index n, auto target) {
    Batch b;
    b.x.resize(features, n);
    b.y.resize(n);
    for (Eigen::Index j = 0; j < n; ++j) {
        for (Eigen::Index f = 0; f < features; ++f) b.x(f, j) = uniform(rng, -1.0, 1.0);
        b.y(j) = target(b.x.col(j));
    }
    return b;
}

}  // namespace

TEST(Mlp, GlorotShapesAndBounds) {
    const MlpModel m = glorot_init({5, 64, 64, 1}, 1);
    ASSERT_EQ(m.num_layers(), 3u);
    EXPECT_EQ(m.num_parameters(), 5u * 64 + 64 + 64 * 64 + 64 + 64 + 1);
    for (std::size_t l = 0; l < 3; ++l) {
        const double lim = std::sqrt(6.0 / static_cast<double>(m.layer_dims[l] + m.layer_dims[l + 1]));
        EXPECT_LE(m.weights[l].cwiseAbs().maxCoeff(), lim);
        EXPECT_TRUE(m.biases[l].isZero());
    }
    EXPECT_EQ(glorot_init({5, 8, 1}, 4), glorot_init({5, 8, 1}, 4));
    EXPECT_FALSE(glorot_init({5, 8, 1}, 4) == glorot_init({5, 8, 1}, 5));
}

TEST(Mlp, RejectsBadShapes) {
    EXPECT_THROW(glorot_init({5}, 1), DimensionError);
    EXPECT_THROW(glorot_init({5, 8, 2}, 1), DimensionError);
    EXPECT_THROW(glorot_init({5, 0, 1}, 1), DimensionError);
    const MlpModel m = glorot_init({3, 4, 1}, 1);
    EXPECT_THROW(forward(m, Eigen::VectorXd::Zero(2)), DimensionError);
}

TEST(Mlp, BatchMatchesSingle) {
    Rng rng(2);
    MlpModel m = testkit::random_small_net(rng);
    Eigen::MatrixXd x = Eigen::MatrixXd::Random(static_cast<Eigen::Index>(m.input_dim()), 9);
    const Eigen::RowVectorXd yb = forward_batch(m, x);
    for (Eigen::Index j = 0; j < 9; ++j) EXPECT_DOUBLE_EQ(yb(j), forward(m, x.col(j)));
}

TEST(Backward, MseGradientMatchesFiniteDifferences) {
    const auto st = testkit::gradient_suite(Loss::mse, 101);
    EXPECT_GT(st.checked, 1000u);
    EXPECT_LE(st.max_rel_error, 1e-5);
}

TEST(Backward, MaeGradientMatchesFiniteDifferences) {
    const auto st = testkit::gradient_suite(Loss::mae, 202);
    EXPECT_GT(st.checked, 1000u);
    EXPECT_LE(st.max_rel_error, 1e-5);
}

TEST(Backward, ReportsLoss) {
    const MlpModel m = glorot_init({2, 3, 1}, 9);
    Eigen::MatrixXd x(2, 2);
    x << 0.1, -0.3, 0.7, 0.2;
    const Eigen::Vector2d t(0.5, -0.5);
    const Eigen::RowVectorXd r = forward_batch(m, x) - t.transpose();
    EXPECT_DOUBLE_EQ(backward(m, x, t, Loss::mse).loss, r.squaredNorm() / 2.0);
    EXPECT_DOUBLE_EQ(backward(m, x, t, Loss::mae).loss, r.cwiseAbs().sum() / 2.0);
    EXPECT_THROW(backward(m, x, Eigen::VectorXd::Zero(3), Loss::mse), DimensionError);
}

TEST(InputJacobian, MatchesFiniteDifferences) {
    Rng rng(31);
    double worst = 0.0;
    int checked = 0;
    for (int trial = 0; trial < 200; ++trial) {
        const MlpModel m = testkit::random_small_net(rng);
        Eigen::VectorXd x(static_cast<Eigen::Index>(m.input_dim()));
        for (Eigen::Index i = 0; i < x.size(); ++i) x(i) = uniform(rng, -2.0, 2.0);
        const Eigen::VectorXd g = input_jacobian(m, x);
        const auto p0 = activation_pattern(m, x);
        const double h = 1e-5;
        for (Eigen::Index i = 0; i < x.size(); ++i) {
            Eigen::VectorXd xp = x, xm = x;
            xp(i) += h;
            xm(i) -= h;
            if (activation_pattern(m, xp) != p0 || activation_pattern(m, xm) != p0) continue;
            const double fd = (forward(m, xp) - forward(m, xm)) / (2.0 * h);
            if (g(i) == 0.0 && fd == 0.0) continue;
            worst = std::max(worst, testkit::relative_error(fd, g(i)));
            ++checked;
        }
    }
    EXPECT_GT(checked, 200);
    EXPECT_LE(worst, 1e-6);
}

TEST(InputJacobian, LinearNetworkIsWeightProduct) {
    // With all pre-activations positive the network is W3 W2 W1 x + const.
    MlpModel m = glorot_init({3, 4, 4, 1}, 5);
    for (auto& w : m.weights) w = w.cwiseAbs();
    for (auto& b : m.biases) b.setConstant(1.0);
    const Eigen::Vector3d x(0.2, 0.4, 0.1);
    const Eigen::RowVectorXd prod = m.weights[2] * m.weights[1] * m.weights[0];
    const Eigen::VectorXd g = input_jacobian(m, x);
    for (Eigen::Index i = 0; i < 3; ++i) EXPECT_NEAR(g(i), prod(i), 1e-15);
}

TEST(Forward, PiecewiseLinearAlongSegments) {
    // Equal activation patterns at both ends of a segment imply the pattern is
    // constant along it, so the network is affine there.
    Rng rng(41);
    int checked = 0;
    for (int trial = 0; trial < 500; ++trial) {
        const MlpModel m = testkit::random_small_net(rng);
        const auto n = static_cast<Eigen::Index>(m.input_dim());
        Eigen::VectorXd x0(n), d(n);
        for (Eigen::Index i = 0; i < n; ++i) {
            x0(i) = uniform(rng, -1.0, 1.0);
            d(i) = uniform(rng, -0.05, 0.05);
        }
        const Eigen::VectorXd x1 = x0 + d;
        if (activation_pattern(m, x0) != activation_pattern(m, x1)) continue;
        const double lin = forward(m, x0) + input_jacobian(m, x0).dot(d);
        EXPECT_NEAR(forward(m, x1), lin, 1e-12);
        const Eigen::VectorXd mid = x0 + 0.5 * d;
        EXPECT_NEAR(forward(m, mid), 0.5 * (forward(m, x0) + forward(m, x1)), 1e-12);
        ++checked;
    }
    EXPECT_GT(checked, 100);
}

TEST(Adam, FirstStepIsSignedLearningRate) {
    MlpModel m = glorot_init({3, 5, 1}, 8);
    const MlpModel before = m;
    Rng rng(9);
    const Batch b = random_batch(rng, 3, 16, [](const auto& x) { return x.sum(); });
    const BackwardResult g = backward(m, b.x, b.y, Loss::mse);
    AdamState s = AdamState::fresh(m, AdamParams{.lr = 1e-3});
    adam_step(m, g.grads, s);
    for (std::size_t l = 0; l < m.num_layers(); ++l) {
        for (Eigen::Index i = 0; i < m.weights[l].size(); ++i) {
            const double gi = g.grads.weights[l].data()[i];
            const double step = m.weights[l].data()[i] - before.weights[l].data()[i];
            if (std::abs(gi) < 1e-3) continue;
            EXPECT_NEAR(step, -1e-3 * (gi > 0 ? 1.0 : -1.0), 1e-3 * 1e-4);
        }
    }
    EXPECT_EQ(s.t, 1);
}

TEST(Train, LossDecreasesOnQuadraticToy) {
    Rng rng(51);
    const auto f = [](const auto& x) { return x(0) * x(0) + 0.5 * x(1); };
    const Batch tr = random_batch(rng, 2, 256, f);
    const Batch va = random_batch(rng, 2, 64, f);
    TrainOptions o;
    o.batch_size = tr.size();
    o.max_epochs = 10;
    o.epsilon = 0.0;
    const TrainResult r = train(glorot_init({2, 16, 16, 1}, 52), tr, va, o);
    ASSERT_EQ(r.report.train_loss.size(), 10u);
    for (std::size_t e = 1; e < 10; ++e) EXPECT_LT(r.report.train_loss[e], r.report.train_loss[e - 1]) << "epoch " << e;
}

TEST(Train, ConstantTargetConvergesQuickly) {
    // All-zero parameters: hidden units are dead, so only the output bias
    // learns, which is all a constant target needs.
    Rng rng(61);
    const auto f = [](const auto&) { return 0.25; };
    const Batch tr = random_batch(rng, 5, 512, f);
    const Batch va = random_batch(rng, 5, 128, f);
    MlpModel m = glorot_init({5, 16, 16, 1}, 62);
    for (auto& w : m.weights) w.setZero();
    TrainOptions o;
    o.batch_size = 32;
    o.max_epochs = 100;
    o.loss = Loss::mse;
    const TrainResult r = train(m, tr, va, o);
    EXPECT_TRUE(r.report.converged);
    EXPECT_LE(r.report.epochs_run, 20u);
    EXPECT_LE(r.report.best_val_nmae, o.epsilon);
}

TEST(Train, ZeroEpochsReturnsInitialModel) {
    Rng rng(65);
    const Batch tr = random_batch(rng, 2, 20, [](const auto& x) { return x(0); });
    TrainOptions o;
    o.max_epochs = 0;
    const MlpModel m = glorot_init({2, 4, 1}, 66);
    const TrainResult r = train(m, tr, tr, o);
    EXPECT_EQ(r.model, m);
    EXPECT_EQ(r.report.epochs_run, 0u);
    EXPECT_FALSE(r.report.converged);
}

TEST(InputJacobian, ZeroWeightsGiveZeroGradient) {
    MlpModel m = glorot_init({5, 8, 8, 1}, 1);
    for (auto& w : m.weights) w.setZero();
    EXPECT_TRUE(input_jacobian(m, Eigen::VectorXd::Ones(5)).isZero(0.0));
}

TEST(Train, UnreachableEpsilonRunsAllEpochs) {
    Rng rng(71);
    const auto f = [](const auto& x) { return std::sin(3.0 * x(0)) * x(1); };
    const Batch tr = random_batch(rng, 2, 200, f);
    const Batch va = random_batch(rng, 2, 50, f);
    TrainOptions o;
    o.max_epochs = 15;
    o.epsilon = 0.0;
    o.patience = 1000;
    const TrainResult r = train(glorot_init({2, 8, 1}, 72), tr, va, o);
    EXPECT_FALSE(r.report.converged);
    EXPECT_EQ(r.report.epochs_run, 15u);
    EXPECT_EQ(r.report.val_nmae.size(), 15u);
}

TEST(Train, Deterministic) {
    Rng rng(81);
    const auto f = [](const auto& x) { return x(0) - x(1) * x(2); };
    const Batch tr = random_batch(rng, 3, 300, f);
    const Batch va = random_batch(rng, 3, 60, f);
    TrainOptions o;
    o.max_epochs = 8;
    o.seed = 99;
    const TrainResult a = train(glorot_init({3, 8, 8, 1}, 1), tr, va, o);
    const TrainResult b = train(glorot_init({3, 8, 8, 1}, 1), tr, va, o);
    EXPECT_EQ(a.model, b.model);
    EXPECT_EQ(a.report.val_nmae, b.report.val_nmae);
    o.seed = 100;
    const TrainResult c = train(glorot_init({3, 8, 8, 1}, 1), tr, va, o);
    EXPECT_FALSE(a.model == c.model);
}

TEST(Train, ReturnsBestSnapshot) {
    Rng rng(91);
    const auto f = [](const auto& x) { return x(0); };
    const Batch tr = random_batch(rng, 1, 100, f);
    const Batch va = random_batch(rng, 1, 40, f);
    TrainOptions o;
    o.max_epochs = 20;
    o.epsilon = 0.0;
    const TrainResult r = train(glorot_init({1, 4, 1}, 3), tr, va, o);
    const double scale = tr.y.cwiseAbs().mean();
    EXPECT_DOUBLE_EQ(normalized_mae(forward_batch(r.model, va.x), va.y, scale), r.report.best_val_nmae);
}

TEST(Train, RejectsEmptySets) {
    const Batch empty{Eigen::MatrixXd(2, 0), Eigen::VectorXd(0)};
    Rng rng(1);
    const Batch b = random_batch(rng, 2, 4, [](const auto&) { return 1.0; });
    EXPECT_THROW(train(glorot_init({2, 3, 1}, 1), empty, b, TrainOptions{}), ConfigError);
}

TEST(Serialization, RoundTripIsBitwise) {
    Rng rng(3);
    MlpModel m = testkit::random_small_net(rng);
    m.weights[0](0, 0) = 0.1 + 0.2;  // not exactly representable in short decimal
    const MlpModel back = load_mlp(save(m));
    EXPECT_EQ(back, m);
    EXPECT_EQ(save(back), save(m));
}

TEST(Serialization, TruncatedInputIsParseError) {
    const std::string text = save(glorot_init({5, 8, 1}, 2));
    EXPECT_THROW(load_mlp(text.substr(0, text.size() / 2)), ParseError);
    EXPECT_THROW(load_mlp("{\"layer_dims\":[2,1],\"layers\":[]}"), ParseError);
    EXPECT_THROW(load_mlp("{\"layer_dims\":[1,1],\"layers\":[{\"W\":[[1,2]],\"b\":[0]}]}"), ParseError);
}

TEST(Loss, Parse) {
    EXPECT_EQ(parse_loss("mse"), Loss::mse);
    EXPECT_EQ(parse_loss("mae"), Loss::mae);
    EXPECT_THROW(parse_loss("huber"), ConfigError);
}
