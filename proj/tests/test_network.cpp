#include "ttac/network.hpp"

#include "test_support.hpp"

#include <doctest.h>

#include <filesystem>
#include <limits>

using namespace ttac;
using namespace ttac::testing;

namespace {

ModelParams zeroed(ModelParams p) {
  for (auto& layer : p.backbone) {
    layer.weight.setZero();
    layer.bias.setZero();
  }
  p.classifier.setZero();
  return p;
}

ModelParams scalar_model(double value) {
  ModelParams p;
  p.backbone.push_back({Matrix::Zero(1, 1), Vector::Zero(1)});
  p.classifier = Matrix::Zero(1, 2);
  p.classifier(0, 0) = value;
  return p;
}

}  // namespace

TEST_CASE("zero weights give uniform posteriors") {
  const ModelParams p = zeroed(ModelParams::init(small_arch(6, 10, 5, 4), 1));
  std::mt19937_64 rng(1);
  const ForwardTrace tr = forward(p, random_matrix(7, 6, rng));
  CHECK(tr.posteriors.isApprox(Matrix::Constant(7, 4, 0.25)));
}

TEST_CASE("identity network puts the argmax at the favoured coordinate") {
  ModelParams p;
  p.backbone.push_back({Matrix::Identity(3, 3), Vector::Zero(3)});
  p.classifier = Matrix::Zero(3, 4);
  p.classifier.leftCols(3) = Matrix::Identity(3, 3);
  Matrix x = Matrix::Zero(3, 3);
  x(0, 0) = 5;
  x(1, 1) = 5;
  x(2, 2) = 5;
  CHECK(argmax_rows(forward(p, x).posteriors) == std::vector<int>{0, 1, 2});
}

TEST_CASE("posteriors are normalized and features are rectified") {
  std::mt19937_64 rng(2);
  for (int t = 0; t < 10; ++t) {
    const ModelParams p = ModelParams::init(small_arch(8, 12, 6, 5), t);
    const ForwardTrace tr = forward(p, random_matrix(20, 8, rng, 3.0));
    CHECK((tr.posteriors.rowwise().sum().array() - 1.0).abs().maxCoeff() < 1e-10);
    CHECK(tr.posteriors.minCoeff() >= 0.0);
    CHECK(tr.posteriors.maxCoeff() <= 1.0);
    CHECK(tr.features().minCoeff() >= 0.0);
  }
}

TEST_CASE("forward is pure") {
  std::mt19937_64 rng(3);
  const ModelParams p = ModelParams::init(small_arch(8, 12, 6, 5), 3);
  const Matrix x = random_matrix(9, 8, rng);
  const ForwardTrace a = forward(p, x);
  const ForwardTrace b = forward(p, x);
  CHECK(a.logits == b.logits);
  CHECK(a.features() == b.features());
}

TEST_CASE("forward rejects a wrong input width") {
  const ModelParams p = ModelParams::init(small_arch(8, 12, 6, 5), 3);
  CHECK_THROWS_AS(forward(p, Matrix::Zero(2, 7)), ContractError);
}

TEST_CASE("zero upstream gradient gives zero parameter gradients") {
  std::mt19937_64 rng(4);
  const ModelParams p = ModelParams::init(small_arch(5, 7, 4, 3), 4);
  const ForwardTrace tr = forward(p, random_matrix(6, 5, rng));
  const ModelGradients g = backward(p, tr, Matrix(), Matrix());
  CHECK(g.max_abs() == 0.0);
  const ModelGradients g2 = backward(p, tr, Matrix::Zero(6, 4), Matrix::Zero(6, 3));
  CHECK(g2.max_abs() == 0.0);
}

TEST_CASE("a feature-only gradient leaves the classifier gradient at zero") {
  std::mt19937_64 rng(5);
  const ModelParams p = ModelParams::init(small_arch(5, 7, 4, 3), 5);
  const ForwardTrace tr = forward(p, random_matrix(6, 5, rng));
  Matrix dz = Matrix::Zero(6, 4);
  dz.row(2) = random_vector(4, rng).transpose();
  const ModelGradients g = backward(p, tr, dz, Matrix());
  CHECK(g.classifier.isZero(0.0));
}

TEST_CASE("backward matches finite differences for a mixed feature/logit loss") {
  std::mt19937_64 rng(6);
  for (int t = 0; t < 5; ++t) {
    Architecture arch = small_arch(5, 8, 6, 4);
    if (t % 2) arch.hidden = {7, 6};
    ModelParams p = ModelParams::init(arch, 60 + t);
    const Matrix x = kink_free_batch(p, 7, rng);
    const Matrix wz = random_matrix(7, 6, rng);
    const Matrix wl = random_matrix(7, 4, rng);
    auto loss = [&] {
      const ForwardTrace tr = forward(p, x);
      return wz.cwiseProduct(tr.features()).sum() + wl.cwiseProduct(tr.logits).sum();
    };
    const ModelGradients g = backward(p, forward(p, x), wz, wl);
    CHECK(central_difference(param_slots(p), flatten(g), loss).ok());
  }
}

TEST_CASE("entropy_loss examples") {
  const ModelParams p = zeroed(ModelParams::init(small_arch(4, 6, 5, 10), 7));
  const LogitLoss u = entropy_loss(forward(p, Matrix::Ones(3, 4)));
  CHECK(u.value == doctest::Approx(std::log(10.0)));
  CHECK(u.d_logits.cwiseAbs().maxCoeff() < 1e-12);

  ModelParams sharp = zeroed(ModelParams::init(small_arch(4, 6, 5, 3), 7));
  sharp.classifier(0, 5) = 1000.0;
  const LogitLoss s = entropy_loss(forward(sharp, Matrix::Ones(2, 4)));
  CHECK(s.value == doctest::Approx(0.0).epsilon(1e-9));
  CHECK(std::isfinite(s.value));
}

TEST_CASE("entropy and cross-entropy gradients match finite differences") {
  std::mt19937_64 rng(8);
  for (int t = 0; t < 5; ++t) {
    ModelParams p = ModelParams::init(small_arch(5, 8, 6, 4), 80 + t);
    const Matrix x = kink_free_batch(p, 6, rng);
    const std::vector<int> labels{0, 1, 2, 3, 1, 0};

    const ForwardTrace tr = forward(p, x);
    const ModelGradients ge = backward(p, tr, Matrix(), entropy_loss(tr).d_logits);
    CHECK(central_difference(param_slots(p), flatten(ge),
                             [&] { return entropy_loss(forward(p, x)).value; })
              .ok());

    const ModelGradients gc = backward(p, tr, Matrix(), cross_entropy_loss(tr, labels).d_logits);
    CHECK(central_difference(param_slots(p), flatten(gc),
                             [&] { return cross_entropy_loss(forward(p, x), labels).value; })
              .ok());
  }
}

TEST_CASE("cross_entropy_loss rejects out-of-range labels") {
  const ModelParams p = ModelParams::init(small_arch(4, 6, 5, 3), 9);
  const ForwardTrace tr = forward(p, Matrix::Ones(2, 4));
  const std::vector<int> bad{0, 3};
  CHECK_THROWS_AS(cross_entropy_loss(tr, bad), ContractError);
}

TEST_CASE("sgd_step examples") {
  SUBCASE("zero gradients leave parameters unchanged") {
    ModelParams p = ModelParams::init(small_arch(4, 6, 5, 3), 10);
    const ModelParams before = p;
    OptimizerState s = OptimizerState::for_params(p, 0.1, 0.9);
    sgd_step(p, ModelGradients::zeros_like(p), s);
    CHECK(p.classifier == before.classifier);
    CHECK(p.backbone[0].weight == before.backbone[0].weight);
  }
  SUBCASE("single plain step") {
    ModelParams p = scalar_model(5.0);
    OptimizerState s = OptimizerState::for_params(p, 1.0, 0.0);
    ModelGradients g = ModelGradients::zeros_like(p);
    g.classifier(0, 0) = 1.0;
    sgd_step(p, g, s);
    CHECK(p.classifier(0, 0) == doctest::Approx(4.0));
  }
  SUBCASE("two momentum steps") {
    ModelParams p = scalar_model(0.0);
    OptimizerState s = OptimizerState::for_params(p, 0.1, 0.9);
    ModelGradients g = ModelGradients::zeros_like(p);
    g.classifier(0, 0) = 1.0;
    sgd_step(p, g, s);
    sgd_step(p, g, s);
    CHECK(p.classifier(0, 0) == doctest::Approx(-0.29));
  }
}

TEST_CASE("sgd_step rejects non-finite gradients and leaves state untouched") {
  ModelParams p = ModelParams::init(small_arch(4, 6, 5, 3), 11);
  const ModelParams before = p;
  OptimizerState s = OptimizerState::for_params(p, 0.1, 0.9);
  ModelGradients g = ModelGradients::zeros_like(p);
  g.backbone[0].bias(1) = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_AS(sgd_step(p, g, s), NonFiniteGradient);
  CHECK(p.backbone[0].bias == before.backbone[0].bias);
  CHECK(s.velocity.max_abs() == 0.0);
}

TEST_CASE("checkpoint round trip is exact") {
  const ModelParams p = ModelParams::init(small_arch(6, 9, 5, 4), 12);
  const auto path = std::filesystem::temp_directory_path() / "ttac_test_model.json";
  save_model(p, path);
  const ModelParams q = load_model(path);
  std::filesystem::remove(path);
  REQUIRE(q.backbone.size() == p.backbone.size());
  for (std::size_t i = 0; i < p.backbone.size(); ++i) {
    CHECK(q.backbone[i].weight == p.backbone[i].weight);
    CHECK(q.backbone[i].bias == p.backbone[i].bias);
  }
  CHECK(q.classifier == p.classifier);
}

TEST_CASE("load_model rejects missing files") {
  CHECK_THROWS(load_model("/nonexistent/ttac_model.json"));
}

TEST_CASE("softmax is shift invariant and stable") {
  Vector a(3);
  a << 1000, 1001, 1002;
  Vector b(3);
  b << 0, 1, 2;
  CHECK(softmax(a).isApprox(softmax(b)));
  CHECK(softmax(a).allFinite());
}
