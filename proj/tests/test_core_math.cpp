#include "ttac/core_math.hpp"

#include "test_support.hpp"

#include <doctest.h>

using namespace ttac;
using namespace ttac::testing;

namespace {

Matrix m2(double a, double b, double c, double d) {
  Matrix m(2, 2);
  m << a, b, c, d;
  return m;
}

Vector vec2(double a, double b) {
  Vector v(2);
  v << a, b;
  return v;
}

Vector v1(double x) { return Vector::Constant(1, x); }

GaussianStats g1(double mean, double var) { return {v1(mean), Matrix::Constant(1, 1, var)}; }

}  // namespace

TEST_CASE("regularize_cov adds eps to the diagonal") {
  CHECK(regularize_cov(Matrix::Zero(2, 2), 1e-3).isApprox(1e-3 * Matrix::Identity(2, 2)));
  CHECK(regularize_cov(Matrix::Identity(2, 2), 0.5).isApprox(1.5 * Matrix::Identity(2, 2)));

  std::mt19937_64 rng(11);
  const Matrix a = random_matrix(5, 3, rng);
  const Matrix psd = a * a.transpose();  // rank 3, singular
  CHECK_NOTHROW(cholesky_psd(regularize_cov(psd, 1e-6)));

  const Eigen::VectorXd before = Eigen::SelfAdjointEigenSolver<Matrix>(psd).eigenvalues();
  const Eigen::VectorXd after =
      Eigen::SelfAdjointEigenSolver<Matrix>(regularize_cov(psd, 0.25)).eigenvalues();
  CHECK((after - before).isApprox(Vector::Constant(5, 0.25), 1e-9));
}

TEST_CASE("regularize_cov rejects bad input") {
  CHECK_THROWS_AS(regularize_cov(Matrix::Zero(2, 3), 1e-3), ContractError);
  CHECK_THROWS_AS(regularize_cov(m2(1, 0.5, 0.2, 1), 1e-3), ContractError);
  CHECK_THROWS_AS(regularize_cov(Matrix::Identity(2, 2), 0.0), ContractError);
}

TEST_CASE("Regularizer is scale-aware with an absolute floor") {
  const Regularizer reg{1e-5, 1e-6};
  CHECK(reg.eps_for(4.0 * Matrix::Identity(3, 3)) == doctest::Approx(4e-5));
  CHECK(reg.eps_for(Matrix::Zero(3, 3)) == doctest::Approx(1e-6));
}

TEST_CASE("cholesky_psd examples") {
  CHECK(cholesky_psd(Matrix::Identity(3, 3)).isApprox(Matrix::Identity(3, 3)));
  const Matrix l = cholesky_psd(m2(4, 2, 2, 3));
  CHECK(l.isApprox(m2(2, 0, 1, std::sqrt(2.0))));
  CHECK((l * l.transpose() - m2(4, 2, 2, 3)).norm() / m2(4, 2, 2, 3).norm() < 1e-8);
  Matrix diag = Matrix::Zero(2, 2);
  diag.diagonal() << 9, 16;
  CHECK(cholesky_psd(diag).diagonal().isApprox(vec2(3, 4)));
}

TEST_CASE("cholesky_psd names the failing pivot") {
  Matrix m = Matrix::Identity(3, 3);
  m(2, 2) = -1.0;
  try {
    cholesky_psd(m);
    FAIL("expected DecompositionError");
  } catch (const DecompositionError& e) {
    CHECK(e.pivot() == 2);
  }
}

TEST_CASE("gaussian_kl closed form") {
  const GaussianStats std3{Vector::Zero(3), Matrix::Identity(3, 3)};
  CHECK(gaussian_kl(std3, std3) == doctest::Approx(0.0).epsilon(1e-14));
  CHECK(gaussian_kl(g1(0, 1), g1(1, 1)) == doctest::Approx(0.5));
  CHECK(gaussian_kl(g1(0, 1), g1(0, 4)) == doctest::Approx(0.5 * (std::log(4.0) - 1.0 + 0.25)));
  CHECK_THROWS_AS(gaussian_kl(g1(0, 1), std3), ContractError);
}

TEST_CASE("gaussian_kl agrees with Monte Carlo in 1D") {
  std::mt19937_64 rng(17);
  std::normal_distribution<double> normal(0.0, 1.0);
  struct Case {
    GaussianStats p, q;
  };
  for (const Case& c : {Case{g1(0, 1), g1(1, 1)}, Case{g1(0, 1), g1(0, 4)}}) {
    const double sp = std::sqrt(c.p.cov(0, 0));
    const double sq = std::sqrt(c.q.cov(0, 0));
    double sum = 0.0;
    const int n = 1000000;
    for (int i = 0; i < n; ++i) {
      const double x = c.p.mean(0) + sp * normal(rng);
      const double zp = (x - c.p.mean(0)) / sp;
      const double zq = (x - c.q.mean(0)) / sq;
      sum += -0.5 * zp * zp - std::log(sp) + 0.5 * zq * zq + std::log(sq);
    }
    CHECK(sum / n == doctest::Approx(gaussian_kl(c.p, c.q)).epsilon(0.01));
  }
}

TEST_CASE("gaussian_kl is zero on identical and nonnegative on random SPD pairs") {
  std::mt19937_64 rng(19);
  for (int t = 0; t < 50; ++t) {
    const int d = 1 + t % 5;
    const GaussianStats p{random_vector(d, rng), random_spd(d, rng)};
    const GaussianStats q{random_vector(d, rng), random_spd(d, rng)};
    CHECK(std::abs(gaussian_kl(p, p)) < 1e-10);
    CHECK(gaussian_kl(p, q) >= -1e-10);
  }
}

TEST_CASE("gaussian_kl_with_grad matches finite differences") {
  std::mt19937_64 rng(23);
  for (int t = 0; t < 10; ++t) {
    const int d = 1 + t % 4;
    const GaussianStats p{random_vector(d, rng), random_spd(d, rng)};
    GaussianStats q{random_vector(d, rng), random_spd(d, rng)};
    const KlWithGradient g = gaussian_kl_with_grad(p, q);
    CHECK(g.value == doctest::Approx(gaussian_kl(p, q)));

    Matrix mean = q.mean;
    auto slots = matrix_slots(mean);
    CHECK(central_difference(slots, matrix_values(g.d_mean_q), [&] {
            return gaussian_kl(p, {mean.col(0), q.cov});
          }).ok());
    // Symmetric perturbations: the gradient w.r.t. the symmetric matrix.
    double worst = 0.0;
    const double h = 1e-5;
    for (int i = 0; i < d; ++i) {
      for (int j = 0; j <= i; ++j) {
        Matrix e = Matrix::Zero(d, d);
        e(i, j) += h;
        if (i != j) e(j, i) += h;
        const double num =
            (gaussian_kl(p, {q.mean, q.cov + e}) - gaussian_kl(p, {q.mean, q.cov - e})) / (2 * h);
        const double ana = i == j ? g.d_cov_q(i, i) : 2.0 * g.d_cov_q(i, j);
        worst = std::max(worst, std::abs(num - ana) / std::max(1.0, std::abs(num)));
      }
    }
    CHECK(worst < 1e-6);
  }
}

TEST_CASE("batch_moments examples") {
  Matrix two(2, 1);
  two << 0, 2;
  const GaussianStats g = batch_moments(two);
  CHECK(g.mean(0) == 1.0);
  CHECK(g.cov(0, 0) == 1.0);

  const GaussianStats one = batch_moments(Matrix::Constant(1, 3, 2.5));
  CHECK(one.mean.isApprox(Vector::Constant(3, 2.5)));
  CHECK(one.cov.isZero());

  std::mt19937_64 rng(29);
  const GaussianStats big = batch_moments(random_matrix(1000, 2, rng));
  CHECK(big.mean.cwiseAbs().maxCoeff() < 0.15);
  CHECK((big.cov - Matrix::Identity(2, 2)).cwiseAbs().maxCoeff() < 0.2);

  CHECK_THROWS_AS(batch_moments(Matrix(0, 2)), ContractError);
}

TEST_CASE("clipped_rate") {
  CHECK(clipped_rate(100, 1280) == doctest::Approx(0.01));
  CHECK(clipped_rate(1280, 1280) == doctest::Approx(1.0 / 1280));
  CHECK(clipped_rate(1000000, 1280) == doctest::Approx(1.0 / 1280));
  CHECK_THROWS_AS(clipped_rate(0, 10), ContractError);
  CHECK_THROWS_AS(clipped_rate(5, 0), ContractError);
}

TEST_CASE("running_update examples") {
  RunningStats s = RunningStats::zeros(1);
  s = running_update(s, Matrix::Constant(1, 1, 0.0));
  s = running_update(s, Matrix::Constant(1, 1, 2.0));
  CHECK(s.mean(0) == 1.0);
  CHECK(s.cov(0, 0) == 1.0);
  CHECK(s.count == 2);

  std::mt19937_64 rng(31);
  RunningStats warm = RunningStats::warm_start({random_vector(3, rng), random_spd(3, rng)}, 50, 64);
  Matrix copies(4, 3);
  copies.rowwise() = warm.mean.transpose();
  const RunningStats same = running_update(warm, copies);
  CHECK(same.mean.isApprox(warm.mean));
  CHECK(same.count == warm.count + 4);

  const Matrix all = random_matrix(1024, 4, rng);
  RunningStats streamed = RunningStats::zeros(4);
  for (int b = 0; b < 64; ++b) streamed = running_update(streamed, all.middleRows(16 * b, 16));
  const GaussianStats oracle = batch_moments(all);
  CHECK((streamed.mean - oracle.mean).norm() <= 1e-9 * std::max(1.0, oracle.mean.norm()));
  CHECK((streamed.cov - oracle.cov).norm() <= 1e-9 * oracle.cov.norm());

  CHECK_THROWS_AS(running_update(streamed, Matrix::Zero(2, 3)), ContractError);
}

TEST_CASE("running_update keeps the covariance symmetric and the count monotone") {
  std::mt19937_64 rng(37);
  RunningStats s = RunningStats::zeros(5, 40);
  std::int64_t last = 0;
  for (int b = 0; b < 30; ++b) {
    s = running_update(s, random_matrix(1 + b % 13, 5, rng, 3.0));
    CHECK((s.cov - s.cov.transpose()).cwiseAbs().maxCoeff() == 0.0);
    CHECK(s.count > last);
    last = s.count;
    CHECK_NOTHROW(cholesky_psd(regularize_cov(s.cov, 1e-9)));
  }
}

TEST_CASE("running_update is partition invariant without clipping") {
  std::mt19937_64 rng(41);
  const Matrix all = random_matrix(300, 3, rng, 2.0);
  const GaussianStats oracle = batch_moments(all);
  for (int trial = 0; trial < 10; ++trial) {
    std::uniform_int_distribution<int> len(1, 50);
    RunningStats s = RunningStats::zeros(3);
    for (int start = 0; start < 300;) {
      const int n = std::min(len(rng), 300 - start);
      s = running_update(s, all.middleRows(start, n));
      start += n;
    }
    CHECK((s.cov - oracle.cov).norm() <= 1e-9 * oracle.cov.norm());
  }
}

TEST_CASE("running_update caps the rate when a batch exceeds the clip") {
  std::mt19937_64 rng(43);
  const Matrix batch = random_matrix(12, 4, rng);
  const RunningStats s = running_update(RunningStats::zeros(4, 8), batch);
  const GaussianStats oracle = batch_moments(batch);
  CHECK(s.mean.isApprox(oracle.mean));
  CHECK(s.cov.isApprox(oracle.cov));
}

TEST_CASE("running_update_backward matches finite differences") {
  std::mt19937_64 rng(47);
  for (std::int64_t count : {0, 7, 500}) {
    const RunningStats before =
        count == 0 ? RunningStats::zeros(3, 64)
                   : RunningStats::warm_start({random_vector(3, rng), random_spd(3, rng)}, count, 64);
    Matrix batch = random_matrix(9, 3, rng);
    const Vector wm = random_vector(3, rng);
    const Matrix wc = random_spd(3, rng);
    auto loss = [&] {
      const RunningStats after = running_update(before, batch);
      return wm.dot(after.mean) + (wc.cwiseProduct(after.cov)).sum();
    };
    const Matrix grad = running_update_backward(before, batch, wm, wc);
    auto slots = matrix_slots(batch);
    CHECK(central_difference(slots, matrix_values(grad), loss).ok(1e-6));
  }
}

TEST_CASE("merge_mixture examples") {
  const GaussianStats g{vec2(1, 2), m2(2, 0.5, 0.5, 1)};
  const std::vector<GaussianStats> same{g, g};
  const GaussianStats merged = merge_mixture(same, MixtureWeights::uniform(2));
  CHECK(merged.mean.isApprox(g.mean));
  CHECK(merged.cov.isApprox(g.cov));

  const std::vector<GaussianStats> two{g1(0, 1), g1(2, 1)};
  const GaussianStats m = merge_mixture(two, MixtureWeights::uniform(2));
  CHECK(m.mean(0) == doctest::Approx(1.0));
  CHECK(m.cov(0, 0) == doctest::Approx(2.0));

  CHECK_THROWS_AS(merge_mixture(std::vector<GaussianStats>{}, MixtureWeights::uniform(1)), ContractError);
  const std::vector<GaussianStats> mixed{g1(0, 1), g};
  CHECK_THROWS_AS(merge_mixture(mixed, MixtureWeights::uniform(2)), ContractError);
}

TEST_CASE("merge_mixture matches pooled equal-size samples") {
  std::mt19937_64 rng(53);
  std::vector<GaussianStats> comps;
  std::vector<Matrix> pools;
  for (int k = 0; k < 3; ++k) {
    const Matrix s = random_matrix(4000, 2, rng);
    Matrix shifted = s;
    shifted.rowwise() += random_vector(2, rng, 3.0).transpose();
    comps.push_back(batch_moments(shifted));
    pools.push_back(shifted);
  }
  Matrix pooled(12000, 2);
  for (int k = 0; k < 3; ++k) pooled.middleRows(4000 * k, 4000) = pools[k];
  const GaussianStats merged = merge_mixture(comps, MixtureWeights::uniform(3));
  const GaussianStats direct = batch_moments(pooled);
  // Equal-size pools: the identity holds up to rounding.
  CHECK((merged.cov - direct.cov).norm() < 1e-9 * direct.cov.norm());
  CHECK((merged.mean - direct.mean).norm() < 1e-9 * std::max(1.0, direct.mean.norm()));
}

TEST_CASE("MixtureWeights validation") {
  CHECK(MixtureWeights::uniform(4)[2] == doctest::Approx(0.25));
  CHECK_THROWS_AS(MixtureWeights(vec2(0.5, 0.6)), ContractError);
  CHECK_THROWS_AS(MixtureWeights(vec2(1.5, -0.5)), ContractError);
}

TEST_CASE("GaussianStats requires a symmetric covariance") {
  CHECK_THROWS_AS(GaussianStats(Vector::Zero(2), m2(1, 0.3, 0.1, 1)), ContractError);
  CHECK_THROWS_AS(GaussianStats(Vector::Zero(3), Matrix::Identity(2, 2)), ContractError);
}
