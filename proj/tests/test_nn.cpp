#include <cmath>
#include <limits>

#include <gtest/gtest.h>

#include "medl/nn.hpp"
#include "test_util.hpp"

using namespace medl;

namespace {

MlpSpec spec_of(std::vector<std::size_t> widths, Activation hidden = Activation::relu, double keep = 1.0) {
  MlpSpec s;
  s.widths = std::move(widths);
  s.hidden = hidden;
  s.keep_prob = keep;
  return s;
}

std::vector<Tensor> snapshot(Mlp& mlp) {
  std::vector<ParamRef> refs;
  mlp.collect("m", refs);
  std::vector<Tensor> out;
  for (const auto& r : refs) out.push_back(*r.value);
  return out;
}

}  // namespace

TEST(Init, GlorotBoundAndZeroBias) {
  Mlp mlp(spec_of({4, 3}), 42);
  const double bound = std::sqrt(6.0 / 7.0);
  EXPECT_NEAR(bound, 0.9258, 1e-4);
  const DenseLayer& layer = mlp.layers().at(0);
  ASSERT_EQ(layer.weight.shape(), (Shape{4, 3}));
  for (double w : layer.weight.data()) EXPECT_LT(std::abs(w), bound);
  for (double b : layer.bias.data()) EXPECT_EQ(b, 0.0);
}

TEST(Init, GlorotBoundHoldsForEveryLayer) {
  Mlp mlp(spec_of({7, 33, 5, 2}), 3);
  for (const DenseLayer& layer : mlp.layers()) {
    const double bound = std::sqrt(6.0 / static_cast<double>(layer.weight.dim(0) + layer.weight.dim(1)));
    for (double w : layer.weight.data()) EXPECT_LT(std::abs(w), bound);
  }
}

TEST(Init, DeterministicGivenSeed) {
  Mlp a(spec_of({3, 8, 2}), 7), b(spec_of({3, 8, 2}), 7), c(spec_of({3, 8, 2}), 8);
  EXPECT_EQ(snapshot(a), snapshot(b));
  EXPECT_NE(snapshot(a), snapshot(c));
}

TEST(Init, ParameterCount) {
  EXPECT_EQ(Mlp(spec_of({2, 5, 1}), 1).parameter_count(), 21u);
}

TEST(Init, RejectsZeroWidth) {
  EXPECT_THROW(Mlp(spec_of({2, 0, 1}), 1), ValidationError);
  EXPECT_THROW(Mlp(spec_of({2}), 1), ValidationError);
}

TEST(Forward, IdentityLayerReturnsInput) {
  Mlp mlp(spec_of({3, 3}), 1);
  mlp.layers()[0].weight = Tensor::matrix({{1, 0, 0}, {0, 1, 0}, {0, 0, 1}});
  const Tensor x = Tensor::matrix({{0.5, -2.0, 3.0}, {1.0, 0.0, -1.0}});
  EXPECT_EQ(mlp_predict(mlp, x), x);
}

TEST(Forward, ShapeMismatchIsAnError) {
  Mlp mlp(spec_of({3, 2}), 1);
  EXPECT_THROW(mlp_predict(mlp, Tensor({1, 4})), ShapeError);
}

TEST(Forward, KeepOneMakesTrainEqualEval) {
  Mlp mlp(spec_of({3, 6, 2}, Activation::relu, 1.0), 5);
  Rng rng(1);
  const Tensor x = standard_normal({4, 3}, rng);
  Tape tape;
  const MlpBinding b = mlp.bind(tape, false);
  const Tensor train = tape.value(b.forward(tape, tape.constant(x), Mode::train, &rng));
  const Tensor eval = tape.value(b.forward(tape, tape.constant(x), Mode::eval));
  EXPECT_EQ(train, eval);
}

// Mean over 1e5 independent masks of the train-mode output matches eval mode within 1%.
TEST(Forward, InvertedDropoutPreservesExpectation) {
  Mlp mlp(spec_of({3, 16, 2}, Activation::tanh, 0.8), 11);
  mlp.layers()[1].bias = Tensor::vector({0.7, -0.4});
  const std::vector<double> x{0.3, -1.2, 0.8};
  const std::size_t passes = 100000;
  Tensor batch({passes, 3});
  for (std::size_t r = 0; r < passes; ++r)
    for (std::size_t c = 0; c < 3; ++c) batch.at(r, c) = x[c];

  Rng rng(99);
  Tape tape;
  const MlpBinding b = mlp.bind(tape, false);
  const Tensor train = tape.value(b.forward(tape, tape.constant(batch), Mode::train, &rng));
  const Tensor eval = mlp_predict(mlp, batch.row_range(0, 1));
  for (std::size_t c = 0; c < 2; ++c) {
    double mean = 0.0;
    for (std::size_t r = 0; r < passes; ++r) mean += train.at(r, c);
    mean /= static_cast<double>(passes);
    EXPECT_LT(std::abs(mean - eval[c]) / std::abs(eval[c]), 0.01) << "output " << c;
  }
}

TEST(Adam, SingleStepByHand) {
  Tensor theta = Tensor::scalar(0.0);
  Tensor* params[] = {&theta};
  AdamConfig cfg;
  cfg.learning_rate = 0.001;
  AdamState adam(cfg, params);
  const Tensor grads[] = {Tensor::scalar(1.0)};
  adam.step(params, grads);
  // m_hat = 1, v_hat = 1
  EXPECT_NEAR(theta.item(), -0.001 / (1.0 + 1e-8), 1e-18);
  EXPECT_EQ(adam.steps(), 1u);
}

TEST(Adam, ZeroGradientLeavesParametersUnchanged) {
  Tensor theta = Tensor::vector({1.5, -2.0});
  Tensor* params[] = {&theta};
  AdamState adam(AdamConfig{}, params);
  const Tensor grads[] = {Tensor::vector({0.0, 0.0})};
  for (int i = 0; i < 5; ++i) adam.step(params, grads);
  EXPECT_EQ(theta, Tensor::vector({1.5, -2.0}));
}

TEST(Adam, ZeroLearningRateIsIdentity) {
  Tensor theta = Tensor::vector({1.5, -2.0});
  Tensor* params[] = {&theta};
  AdamConfig cfg;
  cfg.learning_rate = 0.0;
  AdamState adam(cfg, params);
  const Tensor grads[] = {Tensor::vector({3.0, -7.0})};
  adam.step(params, grads);
  EXPECT_EQ(theta, Tensor::vector({1.5, -2.0}));
}

TEST(Adam, IdenticalInputsGiveIdenticalUpdates) {
  Tensor a = Tensor::vector({0.1, 0.2}), b = a;
  Tensor* pa[] = {&a};
  Tensor* pb[] = {&b};
  AdamState sa(AdamConfig{}, pa), sb(AdamConfig{}, pb);
  const Tensor g[] = {Tensor::vector({0.3, -0.9})};
  for (int i = 0; i < 3; ++i) {
    sa.step(pa, g);
    sb.step(pb, g);
  }
  EXPECT_EQ(a, b);
}

TEST(Adam, NonFiniteGradientAbortsBeforeUpdate) {
  Tensor theta = Tensor::vector({1.0, 1.0});
  Tensor* params[] = {&theta};
  AdamState adam(AdamConfig{}, params);
  const Tensor grads[] = {Tensor::vector({1.0, std::numeric_limits<double>::quiet_NaN()})};
  EXPECT_THROW(adam.step(params, grads), NumericError);
  EXPECT_EQ(theta, Tensor::vector({1.0, 1.0}));
  EXPECT_EQ(adam.steps(), 0u);
}

TEST(EarlyStopping, DecreasingNeverStops) {
  EarlyStopper s(10);
  for (int i = 0; i < 100; ++i) EXPECT_FALSE(s.update(100.0 - i));
}

TEST(EarlyStopping, ConstantStopsAfterFourthEpoch) {
  EarlyStopper s(3);
  EXPECT_FALSE(s.update(1.0));
  EXPECT_FALSE(s.update(1.0));
  EXPECT_FALSE(s.update(1.0));
  EXPECT_TRUE(s.update(1.0));
}

TEST(EarlyStopping, CounterResetsOnImprovement) {
  EarlyStopper s(2);
  for (double v : {5.0, 4.0, 6.0, 3.0}) EXPECT_FALSE(s.update(v));
  EXPECT_EQ(s.best(), 3.0);
}

TEST(EarlyStopping, ImprovementBelowThresholdDoesNotCount) {
  EarlyStopper s(1);
  EXPECT_FALSE(s.update(1.0));
  EXPECT_TRUE(s.update(1.0 - 5e-7));
}

// Two-layer tanh MLP (hidden width 8) on XOR, 5000 full-batch Adam steps at lr 0.01.
TEST(Training, XorReachesLowCrossEntropy) {
  MlpSpec spec = spec_of({2, 8, 1}, Activation::tanh);
  Mlp mlp(spec, 2024);
  const Tensor x = Tensor::matrix({{0, 0}, {0, 1}, {1, 0}, {1, 1}});
  const Tensor y = Tensor::matrix({{0}, {1}, {1}, {0}});
  std::vector<ParamRef> refs;
  mlp.collect("xor", refs);
  std::vector<Tensor*> params;
  for (auto& r : refs) params.push_back(r.value);
  AdamConfig cfg;
  cfg.learning_rate = 0.01;
  AdamState adam(cfg, params);

  double bce = 0.0;
  for (int step = 0; step < 5000; ++step) {
    Tape tape;
    const MlpBinding b = mlp.bind(tape, true);
    const VarId logits = b.forward(tape, tape.constant(x));
    Tensor sign = y;
    for (double& v : sign.data()) v = 1.0 - 2.0 * v;
    const VarId loss = tape.reduce_mean(tape.softplus(tape.mul(tape.constant(sign), logits)));
    const Gradients g = tape.backward(loss);
    std::vector<Tensor> grads;
    for (std::size_t i = 0; i < b.weights.size(); ++i) {
      grads.push_back(g[b.weights[i]]);
      grads.push_back(g[b.biases[i]]);
    }
    adam.step(params, grads);
    bce = tape.value(loss).item();
  }
  EXPECT_LT(bce, 0.05);
}

namespace {

// Least squares through a single linear layer.
struct LinearProblem {
  Mlp mlp{spec_of({2, 1}, Activation::relu), 3};
  Tensor x, y;

  LinearProblem() {
    Rng rng(8);
    x = standard_normal({200, 2}, rng);
    y = Tensor({200, 1});
    for (std::size_t i = 0; i < 200; ++i) y[i] = 2.0 * x.at(i, 0) - x.at(i, 1) + 0.5;
  }

  std::vector<Tensor*> params() {
    std::vector<ParamRef> refs;
    mlp.collect("lin", refs);
    std::vector<Tensor*> out;
    for (auto& r : refs) out.push_back(r.value);
    return out;
  }

  BatchLoss loss() const {
    return [this](Tape& tape, std::span<const VarId> ids, const Tensor& bx, const Tensor& by, Mode mode, Rng& rng) {
      std::span<const VarId> rest = ids;
      const MlpBinding b = mlp.bind(rest);
      const VarId diff = tape.sub(b.forward(tape, tape.constant(bx), mode, &rng), tape.constant(by));
      return tape.reduce_mean(tape.mul(diff, diff));
    };
  }
};

}  // namespace

TEST(Training, FitIsDeterministicAndLearns) {
  TrainConfig cfg;
  cfg.epochs = 40;
  cfg.batch = 32;
  cfg.adam.learning_rate = 0.05;
  cfg.seed = 5;
  LinearProblem a, b;
  const auto pa = a.params(), pb = b.params();
  const TrainResult ra = fit(pa, a.x, a.y, a.x, a.y, cfg, a.loss());
  const TrainResult rb = fit(pb, b.x, b.y, b.x, b.y, cfg, b.loss());
  ASSERT_EQ(ra.log.size(), rb.log.size());
  for (std::size_t i = 0; i < ra.log.size(); ++i) {
    EXPECT_EQ(ra.log[i].epoch, i + 1);
    EXPECT_EQ(ra.log[i].train_loss, rb.log[i].train_loss);
    EXPECT_EQ(ra.log[i].val_loss, rb.log[i].val_loss);
  }
  EXPECT_LT(ra.log.back().val_loss, 1e-3);
}

TEST(Training, RestoresBestValidationParameters) {
  TrainConfig cfg;
  cfg.epochs = 30;
  cfg.batch = 50;
  cfg.adam.learning_rate = 0.05;
  cfg.seed = 1;
  LinearProblem p;
  const auto params = p.params();
  const TrainResult r = fit(params, p.x, p.y, p.x, p.y, cfg, p.loss());
  Rng rng(0);
  const double final_val = dataset_loss(params, p.x, p.y, 512, p.loss(), rng);
  EXPECT_DOUBLE_EQ(final_val, r.log.at(r.best_epoch - 1).val_loss);
}

TEST(Training, NanLossAbortsWithEpochAndBatch) {
  LinearProblem p;
  const auto params = p.params();
  TrainConfig cfg;
  cfg.epochs = 3;
  cfg.batch = 64;
  BatchLoss poisoned = [&p](Tape& tape, std::span<const VarId> ids, const Tensor& x, const Tensor& y, Mode m,
                            Rng& rng) {
    const VarId base = p.loss()(tape, ids, x, y, m, rng);
    return tape.mul(base, tape.constant(Tensor::scalar(std::numeric_limits<double>::quiet_NaN())));
  };
  try {
    fit(params, p.x, p.y, p.x, p.y, cfg, poisoned);
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("epoch 1 batch 0"), std::string::npos) << e.what();
  }
}
