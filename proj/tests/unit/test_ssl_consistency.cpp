#include <gtest/gtest.h>

#include "fscil/grad_check.hpp"
#include "fscil/ssl.hpp"
#include "support.hpp"

using namespace fscil;
using fscil::testing::random_tensor;
using D = double;

namespace {

// Columns of a 4x4 Hadamard matrix minus the constant one: zero mean,
// population std 1, pairwise uncorrelated.
Tensor<D> hadamard_views() {
  return Tensor<D>::from({4, 3}, {1, 1, 1, 1, -1, -1, -1, 1, -1, -1, -1, 1});
}

}  // namespace

TEST(Transforms, InversesRoundTrip) {
  Rng rng(1);
  auto x = random_tensor({2, 3, 5, 5}, rng);
  for (auto t : kAllTransforms) {
    const auto back = apply_transform(apply_transform(x, t), inverse(t));
    for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_EQ(back[i], x[i]) << to_string(t);
  }
}

TEST(Transforms, Rot90IsCounterClockwise) {
  // [[1,2],[3,4]] rotated a quarter turn counter-clockwise is [[2,4],[1,3]].
  auto x = Tensor<D>::from({2, 2}, {1, 2, 3, 4});
  const auto y = apply_transform(x, ViewTransform::rot90);
  EXPECT_EQ(std::vector<D>(y.values().begin(), y.values().end()), (std::vector<D>{2, 4, 1, 3}));
  const auto h = apply_transform(x, ViewTransform::hflip);
  EXPECT_EQ(std::vector<D>(h.values().begin(), h.values().end()), (std::vector<D>{2, 1, 4, 3}));
}

TEST(Transforms, RotationNeedsSquareMaps) {
  auto x = Tensor<D>::zeros({1, 2, 3});
  EXPECT_THROW(apply_transform(x, ViewTransform::rot90), ShapeError);
  EXPECT_NO_THROW(apply_transform(x, ViewTransform::vflip));
}

TEST(Transforms, PerSampleTransforms) {
  auto x = Tensor<D>::from({2, 1, 2, 2}, {1, 2, 3, 4, 1, 2, 3, 4});
  const std::vector<ViewTransform> ts{ViewTransform::identity, ViewTransform::rot180};
  const auto y = apply_transform(x, std::span<const ViewTransform>(ts));
  EXPECT_EQ(std::vector<D>(y.values().begin(), y.values().end()), (std::vector<D>{1, 2, 3, 4, 4, 3, 2, 1}));
  const std::vector<ViewTransform> three(3, ViewTransform::identity);
  EXPECT_THROW(apply_transform(x, std::span<const ViewTransform>(three)), ShapeError);
}

TEST(Transforms, MaskTransformCommutesWithMixing) {
  // t(mix(l1, l2, m)) == mix(t(l1), t(l2), t(m)): transformed mixtures are valid positives.
  Rng rng(5);
  auto l1 = random_tensor({1, 2, 6, 6}, rng), l2 = random_tensor({1, 2, 6, 6}, rng);
  const auto m = make_cutmix_mask(6, 6, {}, rng);
  Tape<D> tape;
  for (auto t : kAllTransforms) {
    const auto a = apply_transform(mix_features(tape, l1, l2, m), t);
    const auto b = mix_features(tape, apply_transform(l1, t), apply_transform(l2, t), apply_transform(m, t));
    for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_EQ(a[i], b[i]);
    EXPECT_EQ(apply_transform(m, t).kappa_eff, m.kappa_eff);
  }
}

TEST(SslTerms, IdenticalViewsGiveZeroInvariance) {
  Rng rng(2);
  EnsembleNet<D> net(NetConfig{}, 4, rng);
  auto x1 = random_tensor({4, 3, 8, 8}, rng), x2 = random_tensor({4, 3, 8, 8}, rng);
  std::vector<MixMask> masks;
  for (int i = 0; i < 4; ++i) masks.push_back(make_cutmix_mask(8, 8, {}, rng));
  for (auto t : kAllTransforms) {
    const std::vector<ViewTransform> ts{t};
    Tape<D> tape;
    const auto views = build_views(tape, net, x1, x2, masks, ts, ts);
    EXPECT_EQ(invariance_term(tape, views.view1.pooled, views.view2.pooled).item(), 0.0);
  }
}

TEST(SslTerms, LossVanishesOnUnitStdUncorrelatedEqualViews) {
  const auto z = hadamard_views();
  Tape<D> tape;
  EXPECT_NEAR(ssl_loss(tape, z, z, SslParams{}).item(), 0.0, 1e-3);
  EXPECT_NEAR(covariance_term(tape, z).item(), 0.0, 1e-15);
}

TEST(SslTerms, DuplicatedDimensionCovarianceIsVarianceSquared) {
  // Z = [v, v]: the two off-diagonal entries are Var(v) each, so (1/2)·2·Var² = Var².
  const std::vector<D> v{0.5, -1.0, 2.0, 0.25, -0.75};
  const D mu = (0.5 - 1.0 + 2.0 + 0.25 - 0.75) / 5.0;
  D var = 0.0;
  for (D x : v) var += (x - mu) * (x - mu);
  var /= 4.0;
  std::vector<D> z;
  for (D x : v) z.insert(z.end(), {x, x});
  Tape<D> tape;
  EXPECT_NEAR(covariance_term(tape, Tensor<D>::from({5, 2}, z)).item(), var * var, 1e-12);
}

TEST(SslTerms, VarianceHingeByHand) {
  // Column values {0, 2}: population variance 1, std sqrt(1 + eps).
  auto z = Tensor<D>::from({2, 2}, {0, 0, 2, 0.2});
  Tape<D> tape;
  const D got = variance_term(tape, z, 1.0, 1e-4).item();
  const D want = (std::max(0.0, 1.0 - std::sqrt(1.0 + 1e-4)) + (1.0 - std::sqrt(0.01 + 1e-4))) / 2.0;
  EXPECT_NEAR(got, want, 1e-12);
}

TEST(SslTerms, InvarianceIsMeanSquaredDistance) {
  auto a = Tensor<D>::from({2, 2}, {1, 2, 3, 4});
  auto b = Tensor<D>::from({2, 2}, {1, 0, 0, 4});
  Tape<D> tape;
  EXPECT_NEAR(invariance_term(tape, a, b).item(), (4.0 + 9.0) / 4.0, 1e-15);
}

TEST(SslTerms, WeightsCombineTerms) {
  Rng rng(3);
  auto z = random_tensor({6, 4}, rng), z2 = random_tensor({6, 4}, rng);
  SslParams p;
  p.lambda_w = 2.0;
  p.mu_w = 3.0;
  p.nu_w = 0.5;
  Tape<D> tape;
  const D want = 2.0 * invariance_term(tape, z, z2).item() +
                 3.0 * (variance_term(tape, z, 1.0, 1e-4).item() + variance_term(tape, z2, 1.0, 1e-4).item()) +
                 0.5 * (covariance_term(tape, z).item() + covariance_term(tape, z2).item());
  EXPECT_NEAR(ssl_loss(tape, z, z2, p).item(), want, 1e-12);
}

TEST(SslTerms, GradientCheck) {
  for (int seed = 0; seed < 5; ++seed) {
    Rng rng(static_cast<std::uint64_t>(100 + seed));
    auto z = random_tensor({5, 3}, rng, 0.3), z2 = random_tensor({5, 3}, rng, 0.3);
    const D err = grad_check<D>([&](Tape<D>& t) { return ssl_loss(t, z, z2, SslParams{}); },
                                std::vector<Tensor<D>>{z, z2}, 1e-6);
    EXPECT_LT(err, 1e-4);
  }
}

TEST(SslTerms, RejectBadInputs) {
  Tape<D> tape;
  auto one = Tensor<D>::zeros({1, 3});
  EXPECT_THROW(variance_term(tape, one, 1.0, 1e-4), ShapeError);
  EXPECT_THROW(covariance_term(tape, one), ShapeError);
  EXPECT_THROW(invariance_term(tape, Tensor<D>::zeros({2, 3}), Tensor<D>::zeros({2, 4})), ShapeError);
  SslParams p;
  p.eps = 0.0;
  EXPECT_THROW(p.validate(), std::invalid_argument);
}
