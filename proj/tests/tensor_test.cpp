#include <gtest/gtest.h>

#include <filesystem>

#include "epvsq/tensor.hpp"
#include "oracles.hpp"

namespace epvsq {
namespace {

using testing::TensorD;
using testing::check_gradient;
using testing::random_tensor;

using testing::probe;

TEST(Conv3d, AllOnesGivesTwentySeven) {
  Tensor<float> in(Shape{1, 3, 3, 3}, 1.0f), k(Shape{1, 1, 3, 3, 3}, 1.0f), b(Shape{1});
  const auto out = kernels::conv3d_forward(in, k, b);
  ASSERT_EQ(out.shape(), (Shape{1, 1, 1, 1}));
  EXPECT_EQ(out[0], 27.0f);
}

TEST(Conv3d, DeltaKernelCropsInput) {
  Rng rng(1);
  const TensorD in = random_tensor(rng, {1, 6, 5, 7});
  TensorD k(Shape{1, 1, 3, 3, 3});
  k[13] = 1.0;
  const auto out = kernels::conv3d_forward(in, k, TensorD(Shape{1}));
  ASSERT_EQ(out.shape(), (Shape{1, 4, 3, 5}));
  for (std::size_t z = 0; z < 4; ++z)
    for (std::size_t y = 0; y < 3; ++y)
      for (std::size_t x = 0; x < 5; ++x) EXPECT_EQ(out[(z * 3 + y) * 5 + x], in[((z + 1) * 5 + y + 1) * 7 + x + 1]);
}

TEST(Conv3d, MatchesNaiveOracle) {
  Rng rng(2);
  const TensorD in = random_tensor(rng, {1, 5, 5, 5}), k = random_tensor(rng, {2, 1, 3, 3, 3}),
                b = random_tensor(rng, {2});
  EXPECT_LT(testing::max_relative_difference(kernels::conv3d_forward(in, k, b), testing::naive_conv3d(in, k, b)),
            1e-6);
  const TensorD in2 = random_tensor(rng, {3, 7, 6, 9}), k2 = random_tensor(rng, {4, 3, 3, 3, 3}),
                b2 = random_tensor(rng, {4});
  EXPECT_LT(testing::max_relative_difference(kernels::conv3d_forward(in2, k2, b2), testing::naive_conv3d(in2, k2, b2)),
            1e-6);
}

TEST(Conv3d, FloatPathAgreesWithDouble) {
  Rng rng(3);
  const TensorD in = random_tensor(rng, {2, 8, 7, 9}), k = random_tensor(rng, {3, 2, 3, 3, 3}),
                b = random_tensor(rng, {3});
  const auto f = kernels::conv3d_forward(tensor_cast<float>(in), tensor_cast<float>(k), tensor_cast<float>(b));
  const auto d = testing::naive_conv3d(in, k, b);
  for (std::size_t i = 0; i < d.size(); ++i) EXPECT_NEAR(f[i], d[i], 1e-4 * std::max(1.0, std::abs(d[i])));
}

TEST(Conv3d, SmallExtentIsShapeError) {
  Tensor<float> in(Shape{1, 2, 5, 5}), k(Shape{1, 1, 3, 3, 3}), b(Shape{1});
  EXPECT_THROW(kernels::conv3d_forward(in, k, b), ShapeError);
  Tensor<float> k2(Shape{1, 2, 3, 3, 3});
  Tensor<float> in2(Shape{1, 5, 5, 5});
  EXPECT_THROW(kernels::conv3d_forward(in2, k2, b), ShapeError);
}

TEST(Conv3d, GradientsMatchFiniteDifferences) {
  Rng rng(4);
  const TensorD in = random_tensor(rng, {2, 5, 6, 5}), k = random_tensor(rng, {3, 2, 3, 3, 3}),
                b = random_tensor(rng, {3});
  const TensorD r = random_tensor(rng, {3, 3, 4, 3});
  TensorD gi(in.shape()), gk(k.shape()), gb(b.shape());
  kernels::conv3d_backward(in, k, b, r, &gi, &gk, &gb);
  EXPECT_LT(check_gradient([&](const TensorD& x) { return probe(kernels::conv3d_forward(x, k, b), r); }, in, gi)
                .max_relative_error,
            1e-4);
  EXPECT_LT(check_gradient([&](const TensorD& x) { return probe(kernels::conv3d_forward(in, x, b), r); }, k, gk)
                .max_relative_error,
            1e-4);
  EXPECT_LT(check_gradient([&](const TensorD& x) { return probe(kernels::conv3d_forward(in, k, x), r); }, b, gb)
                .max_relative_error,
            1e-4);
}

TEST(MaxPool, ConstantInputGivesConstantOutput) {
  Tensor<float> in(Shape{2, 4, 6, 8}, 3.5f);
  const auto out = kernels::maxpool3d_forward(in, {2, 2, 2});
  ASSERT_EQ(out.shape(), (Shape{2, 2, 3, 4}));
  for (float v : out.data()) EXPECT_EQ(v, 3.5f);
}

TEST(MaxPool, PicksPlantedMaxima) {
  Tensor<float> in(Shape{1, 4, 4, 4});
  std::vector<float> planted;
  for (std::size_t z = 0; z < 2; ++z)
    for (std::size_t y = 0; y < 2; ++y)
      for (std::size_t x = 0; x < 2; ++x) {
        const float v = 10.0f + static_cast<float>(planted.size());
        in[((2 * z + (x & 1)) * 4 + 2 * y + 1) * 4 + 2 * x] = v;
        planted.push_back(v);
      }
  const auto out = kernels::maxpool3d_forward(in, {2, 2, 2});
  EXPECT_EQ(std::vector<float>(out.data().begin(), out.data().end()), planted);
}

TEST(MaxPool, RemainderIsDropped) {
  Tensor<float> in(Shape{1, 5, 9, 3}, 1.0f);
  EXPECT_EQ(kernels::maxpool3d_forward(in, {2, 4, 2}).shape(), (Shape{1, 2, 2, 1}));
  EXPECT_THROW(kernels::maxpool3d_forward(in, {2, 2, 4}), ShapeError);
}

TEST(MaxPool, TiesRouteToFirstIndex) {
  Tensor<double> in(Shape{1, 2, 2, 2}, 1.0);
  std::vector<std::uint32_t> arg;
  kernels::maxpool3d_forward(in, {2, 2, 2}, &arg);
  EXPECT_EQ(arg[0], 0u);
}

TEST(MaxPool, MatchesOracleAndFiniteDifferences) {
  Rng rng(5);
  const TensorD in = random_tensor(rng, {1, 8, 8, 8});
  std::vector<std::uint32_t> arg;
  const auto out = kernels::maxpool3d_forward(in, {2, 2, 2}, &arg);
  EXPECT_EQ(out, testing::naive_maxpool(in, 2));
  const TensorD r = random_tensor(rng, out.shape());
  TensorD gi(in.shape());
  kernels::maxpool3d_backward(arg, r, gi);
  EXPECT_LT(check_gradient([&](const TensorD& x) { return probe(kernels::maxpool3d_forward(x, {2, 2, 2}), r); }, in, gi)
                .max_relative_error,
            1e-4);
}

TEST(Dense, IdentityAndBiasOnly) {
  TensorD x(Shape{3}, std::vector<double>{1, -2, 3});
  TensorD eye(Shape{3, 3});
  for (int i = 0; i < 3; ++i) eye[i * 4] = 1;
  EXPECT_EQ(kernels::dense_forward(x, eye, TensorD(Shape{3})), x);
  TensorD b(Shape{2}, std::vector<double>{0.5, -1});
  EXPECT_EQ(kernels::dense_forward(x, TensorD(Shape{2, 3}), b), b);
}

TEST(Dense, MatchesMatvecAndFiniteDifferences) {
  Rng rng(6);
  const TensorD x = random_tensor(rng, {2, 3, 4}), w = random_tensor(rng, {5, 24}), b = random_tensor(rng, {5});
  const auto y = kernels::dense_forward(x, w, b);
  EXPECT_LT(testing::max_relative_difference(y, testing::naive_matvec(w, x, b)), 1e-12);
  const TensorD r = random_tensor(rng, {5});
  TensorD gx(x.shape()), gw(w.shape()), gb(b.shape());
  kernels::dense_backward(x, w, r, &gx, &gw, &gb);
  EXPECT_LT(check_gradient([&](const TensorD& v) { return probe(kernels::dense_forward(v, w, b), r); }, x, gx)
                .max_relative_error,
            1e-4);
  EXPECT_LT(check_gradient([&](const TensorD& v) { return probe(kernels::dense_forward(x, v, b), r); }, w, gw)
                .max_relative_error,
            1e-4);
  EXPECT_LT(check_gradient([&](const TensorD& v) { return probe(kernels::dense_forward(x, w, v), r); }, b, gb)
                .max_relative_error,
            1e-4);
}

TEST(Dense, ShapeMismatch) {
  EXPECT_THROW(kernels::dense_forward(TensorD(Shape{4}), TensorD(Shape{2, 3}), TensorD(Shape{2})), ShapeError);
}

// ---------------------------------------------------------------------------

TEST(Loss, ClosedForms) {
  EXPECT_EQ(loss({LossKind::MSE}, 3, 5), 4);
  EXPECT_EQ(loss({LossKind::MCE}, 3, 5), 8);
  EXPECT_EQ(loss({LossKind::MQE}, 3, 5), 16);
  EXPECT_EQ(loss({LossKind::RMSE}, 3, 5), 2);
  for (auto kind : {LossKind::MSE, LossKind::MCE, LossKind::MQE, LossKind::Tukey, LossKind::RMSE}) {
    EXPECT_EQ(loss({kind}, 2.5, 2.5), 0) << to_string(kind);
  }
}

TEST(Loss, TukeySaturates) {
  const double c = 4.685;
  const double expected = c * c / 6.0;  // 3.65820...
  EXPECT_NEAR(expected, 3.658204, 1e-6);
  EXPECT_NEAR(loss({LossKind::Tukey, c}, 10, 0), expected, 1e-12);
  EXPECT_NEAR(loss({LossKind::Tukey, c}, 0, 10), expected, 1e-12);
  const double e = 2.0, u = 1 - (e / c) * (e / c);
  EXPECT_NEAR(loss({LossKind::Tukey, c}, 2, 0), c * c / 6 * (1 - u * u * u), 1e-12);
}

TEST(Loss, DerivativesMatchFiniteDifferences) {
  for (auto kind : {LossKind::MSE, LossKind::MCE, LossKind::MQE, LossKind::Tukey, LossKind::RMSE}) {
    for (double e : {-3.1, -0.7, 0.4, 2.2, 6.0}) {
      const LossSpec spec{kind, 4.685};
      const double h = 1e-6;
      const double numeric = (loss(spec, e + h, 0) - loss(spec, e - h, 0)) / (2 * h);
      EXPECT_NEAR(evaluate_loss(spec, e, 0).derivative, numeric, 1e-5 * std::max(1.0, std::abs(numeric)))
          << to_string(kind) << " e=" << e;
    }
  }
}

TEST(Loss, NamesRoundTrip) {
  EXPECT_EQ(parse_loss_kind("mfe"), LossKind::MQE);
  EXPECT_EQ(parse_loss_kind(to_string(LossKind::Tukey)), LossKind::Tukey);
  EXPECT_THROW(parse_loss_kind("huber"), ConfigError);
}

// ---------------------------------------------------------------------------

TEST(Graph, SquareHasDerivativeSix) {
  Graph<double> g;
  const Var x = g.input(TensorD::scalar(3.0), true);
  const Var y = mul(g, x, x);
  g.backward(y);
  EXPECT_EQ(g.value(y)[0], 9.0);
  EXPECT_EQ(g.gradient(x)[0], 6.0);
}

TEST(Graph, NonScalarRootIsUsageError) {
  Graph<double> g;
  const Var x = g.input(TensorD(Shape{3}, 1.0), true);
  EXPECT_THROW(g.backward(relu(g, x)), UsageError);
}

TEST(Graph, DisconnectedParameterGetsZeroGradient) {
  Graph<double> g;
  const Var x = g.input(TensorD(Shape{3}, 2.0), true);
  const Var unused = g.input(TensorD(Shape{2, 2}, 1.0), true);
  g.backward(sum(g, mul(g, x, x)));
  EXPECT_EQ(g.gradient(unused), TensorD(Shape{2, 2}));
  EXPECT_EQ(g.gradient(x), TensorD(Shape{3}, 4.0));
}

TEST(Graph, ReluSubgradientAtZeroIsZero) {
  Graph<double> g;
  const Var x = g.input(TensorD(Shape{3}, std::vector<double>{-1, 0, 2}), true);
  const Var y = relu(g, x);
  for (double v : g.value(y).data()) EXPECT_GE(v, 0.0);
  g.backward(sum(g, y));
  EXPECT_EQ(g.gradient(x), TensorD(Shape{3}, std::vector<double>{0, 0, 1}));
}

using testing::Composite;
using testing::composite_forward;
using testing::random_composite;

// conv -> relu -> pool -> dense -> relu -> dense -> loss, checked against FD for every leaf.
TEST(Graph, CompositeNetworksMatchFiniteDifferences) {
  Rng rng(10);
  for (int trial = 0; trial < 5; ++trial) {
    const Composite base = random_composite(rng);
    EXPECT_LT(testing::composite_gradient_error(base), 1e-4) << "trial " << trial;
    Graph<double> g;
    std::vector<Var> leaves;
    composite_forward(base, g, leaves);
    for (const Var v : leaves) EXPECT_EQ(g.gradient(v).shape(), g.value(v).shape());
  }
}

TEST(Graph, ForwardBackwardIsDeterministic) {
  Rng rng(11);
  const Composite c = random_composite(rng);
  Graph<double> g1, g2;
  std::vector<Var> l1, l2;
  EXPECT_EQ(composite_forward(c, g1, l1), composite_forward(c, g2, l2));
  for (std::size_t i = 0; i < l1.size(); ++i) EXPECT_EQ(g1.gradient(l1[i]), g2.gradient(l2[i]));
}

// ---------------------------------------------------------------------------

TEST(Adadelta, ZeroGradientLeavesParametersUnchanged) {
  std::vector<TensorD> params{TensorD(Shape{3}, std::vector<double>{1, 2, 3})};
  const std::vector<TensorD> grads{TensorD(Shape{3})};
  AdadeltaState<double> st;
  adadelta_step<double>(params, grads, st);
  EXPECT_EQ(params[0], TensorD(Shape{3}, std::vector<double>{1, 2, 3}));
}

TEST(Adadelta, FirstAndSecondStep) {
  std::vector<TensorD> params{TensorD::scalar(0.0)};
  const std::vector<TensorD> grads{TensorD::scalar(1.0)};
  AdadeltaState<double> st;
  adadelta_step<double>(params, grads, st);
  // E[g^2] = 0.05, E[dx^2] = 0: dx = -sqrt(1e-6) / sqrt(0.05 + 1e-6).
  const double dx1 = -std::sqrt(1e-6) / std::sqrt(0.05 + 1e-6);
  EXPECT_NEAR(dx1, -0.004472, 1e-6);
  EXPECT_NEAR(params[0][0], dx1, 1e-15);
  adadelta_step<double>(params, grads, st);
  const double eg2 = 0.95 * 0.05 + 0.05, edx = 0.05 * dx1 * dx1;
  const double dx2 = -std::sqrt(edx + 1e-6) / std::sqrt(eg2 + 1e-6);
  EXPECT_NEAR(params[0][0] - dx1, dx2, 1e-15);
  EXPECT_GT(std::abs(dx2), std::abs(dx1));
}

// ---------------------------------------------------------------------------

TEST(Tnsr, RoundTripAndChecksum) {
  Rng rng(12);
  std::vector<NamedTensor> ts;
  ts.push_back({"conv0.w", tensor_cast<float>(random_tensor(rng, {2, 1, 3, 3, 3}))});
  ts.push_back({"fc.b", tensor_cast<float>(random_tensor(rng, {4}))});
  const auto path = std::filesystem::temp_directory_path() / "epvsq_tnsr_test.tnsr";
  write_tensors(path, ts);
  const auto back = read_tensors(path);
  ASSERT_EQ(back.size(), 2u);
  for (std::size_t i = 0; i < 2; ++i) {
    EXPECT_EQ(back[i].name, ts[i].name);
    EXPECT_EQ(back[i].tensor, ts[i].tensor);
  }
  Bytes raw = tnsr::encode(ts);
  raw[40] ^= 0x01;
  EXPECT_THROW(tnsr::decode(raw), FormatError);
  Bytes bad = tnsr::encode(ts);
  bad[0] = 'X';
  EXPECT_THROW(tnsr::decode(bad), FormatError);
}

}  // namespace
}  // namespace epvsq
