#include <gtest/gtest.h>

#include <Eigen/Eigenvalues>

#include <cmath>
#include <numbers>

#include "downscaler/synth.hpp"
#include "downscaler/temporal_rw.hpp"

using namespace downscaler;

TEST(Rw1Structure, ThreeDays) {
  Eigen::MatrixXd expected(3, 3);
  expected << 1, -1, 0, -1, 2, -1, 0, -1, 1;
  EXPECT_EQ(rw1_structure(3).dense(), expected);
}

TEST(Rw1Structure, ConstantsAreTheNullSpace) {
  for (int n : {2, 5, 30}) EXPECT_LT(rw1_structure(n).multiply(Eigen::VectorXd::Ones(n)).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(Rw1Structure, EigenvaluesMatchDenseEigensolve) {
  const Eigen::MatrixXd q = rw1_structure(5).dense();
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(synth::dense_rw1_structure(5));
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> ours(q);
  EXPECT_LT((ours.eigenvalues() - es.eigenvalues()).cwiseAbs().maxCoeff(), 1e-12);
  for (int k = 0; k < 5; ++k)
    EXPECT_NEAR(es.eigenvalues()[k], 2.0 - 2.0 * std::cos(k * std::numbers::pi / 5), 1e-12);
}

TEST(Rw1Structure, QuadraticFormIsSumOfSquaredIncrements) {
  Rng rng(2);
  const Eigen::VectorXd x = std_normal_vector(rng, 9);
  EXPECT_NEAR(rw1_quad_form(x), x.dot(rw1_structure(9).multiply(x)), 1e-12);
}

TEST(TridiagonalCholesky, SolveAndInverseMatchDense) {
  Rng rng(3);
  Tridiagonal a = rw1_structure(8);
  a.diag.array() += 0.5;
  const TridiagonalCholesky chol(a);
  const Eigen::MatrixXd inv = synth::dense_inverse(a.dense());
  EXPECT_LT((chol.inverse() - inv).cwiseAbs().maxCoeff(), 1e-12);
  const Eigen::VectorXd b = std_normal_vector(rng, 8);
  EXPECT_LT((chol.solve(b) - inv * b).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(TridiagonalCholesky, RejectsSingular) {
  EXPECT_THROW(TridiagonalCholesky{rw1_structure(4)}, ParameterError);
}

namespace {

Rw1Data rw1_fixture(int n, Rng& rng, double zero_prob = 0.0) {
  Rw1Data d = Rw1Data::zeros(n);
  for (int t = 0; t < n; ++t) {
    if (uniform01(rng) < zero_prob) continue;
    d.sum_sq_coef[t] = 0.2 + 3.0 * uniform01(rng);
    d.sum_coef_resid[t] = 2.0 * std_normal(rng);
  }
  return d;
}

}  // namespace

TEST(Rw1Conditional, MomentsMatchDenseConstrainedAlgebra) {
  Rng rng(4);
  for (int n : {2, 3, 7, 30}) {
    const Rw1Data d = rw1_fixture(n, rng, 0.3);
    const double tau = 0.5 + 5 * uniform01(rng), sigma2 = 0.3 + uniform01(rng);
    const auto ours = rw1_conditional_moments(d, tau, sigma2);
    const auto oracle = synth::dense_rw1_conditional(d.sum_sq_coef, d.sum_coef_resid, tau, sigma2);
    EXPECT_LT((ours.mean - oracle.mean).cwiseAbs().maxCoeff(), 1e-10) << n;
    EXPECT_LT((ours.covariance - oracle.covariance).cwiseAbs().maxCoeff(), 1e-10) << n;
  }
}

TEST(Rw1Conditional, GapDayMatchesDenseOracle) {
  Rng rng(5);
  Rw1Data d = rw1_fixture(6, rng);
  d.sum_sq_coef[2] = d.sum_coef_resid[2] = 0.0;
  const auto ours = rw1_conditional_moments(d, 2.0, 1.0);
  const auto oracle = synth::dense_rw1_conditional(d.sum_sq_coef, d.sum_coef_resid, 2.0, 1.0);
  EXPECT_NEAR(ours.mean[2], oracle.mean[2], 1e-10);
  EXPECT_NEAR(ours.covariance(2, 2), oracle.covariance(2, 2), 1e-10);
}

TEST(Rw1Conditional, DominantLikelihoodProjectsData) {
  Rng rng(6);
  const int n = 6;
  const Eigen::VectorXd y = std_normal_vector(rng, n);
  const double kappa = 1e9;
  Rw1Data d{Eigen::VectorXd::Constant(n, kappa), kappa * y};
  const auto m = rw1_conditional_moments(d, 1.0, 1.0);
  const Eigen::VectorXd centred = (y.array() - y.mean()).matrix();
  EXPECT_LT((m.mean - centred).cwiseAbs().maxCoeff(), 1e-6);
}

TEST(Rw1Conditional, DrawsMatchMomentsWithinMonteCarloError) {
  Rng rng(7);
  const int n = 5;
  const Rw1Data d = rw1_fixture(n, rng);
  const double tau = 1.5, sigma2 = 0.8;
  const auto m = rw1_conditional_moments(d, tau, sigma2);
  const int draws = 200000;
  Eigen::VectorXd sum = Eigen::VectorXd::Zero(n);
  Eigen::MatrixXd outer = Eigen::MatrixXd::Zero(n, n);
  for (int i = 0; i < draws; ++i) {
    const Eigen::VectorXd x = sample_rw1_conditional(d, tau, sigma2, rng);
    ASSERT_NEAR(x.sum(), 0.0, 1e-12);
    const Eigen::VectorXd c = x - m.mean;
    sum += c;
    outer += c * c.transpose();
  }
  const Eigen::VectorXd mean_err = sum / draws;
  const Eigen::MatrixXd cov = outer / draws;
  for (int t = 0; t < n; ++t) {
    EXPECT_LT(std::abs(mean_err[t]), 3.0 * std::sqrt(m.covariance(t, t) / draws)) << t;
    for (int s = 0; s < n; ++s) {
      // Var of x_t x_s under a Gaussian: C_ts^2 + C_tt C_ss.
      const double se = std::sqrt((m.covariance(t, s) * m.covariance(t, s) + m.covariance(t, t) * m.covariance(s, s)) / draws);
      EXPECT_LT(std::abs(cov(t, s) - m.covariance(t, s)), 3.0 * se) << t << "," << s;
    }
  }
}

TEST(Rw1Conditional, NoDataDrawsFromConstrainedPrior) {
  Rng rng(8);
  const Rw1Data d = Rw1Data::zeros(4);
  const auto m = rw1_conditional_moments(d, 2.0, 1.0);
  const auto oracle = synth::dense_rw1_conditional(d.sum_sq_coef, d.sum_coef_resid, 2.0, 1.0);
  EXPECT_LT((m.covariance - oracle.covariance).cwiseAbs().maxCoeff(), 1e-10);
  EXPECT_NEAR(sample_rw1_conditional(d, 2.0, 1.0, rng).sum(), 0.0, 1e-12);
}

TEST(Rw1Conditional, InvalidInputsAreRejected) {
  const Rw1Data d = Rw1Data::zeros(4);
  EXPECT_THROW(rw1_conditional_moments(d, 0.0, 1.0), ParameterError);
  EXPECT_THROW(rw1_conditional_moments(d, 1.0, 0.0), ParameterError);
  EXPECT_THROW(rw1_conditional_moments(Rw1Data::zeros(1), 1.0, 1.0), ParameterError);
}

TEST(Rw1Interpolation, GapMidpoint) {
  Eigen::VectorXd v(3);
  v << 3.0, 0.0, 7.0;
  const auto r = interpolate_missing_days(v, 2.0, {true, false, true});
  EXPECT_DOUBLE_EQ(r.mean[1], 5.0);
  EXPECT_DOUBLE_EQ(r.variance[1], 0.25);
  EXPECT_EQ(r.variance[0], 0.0);
}

TEST(Rw1Interpolation, TrailingDaysExtrapolateFlatWithGrowingVariance) {
  Eigen::VectorXd v(5);
  v << 1.0, 2.0, 4.0, 0.0, 0.0;
  const double tau = 4.0;
  const auto r = interpolate_missing_days(v, tau, {true, true, true, false, false});
  EXPECT_NEAR(r.mean[3], 4.0, 1e-14);
  EXPECT_NEAR(r.mean[4], 4.0, 1e-14);
  EXPECT_NEAR(r.variance[3], 1.0 / tau, 1e-14);
  EXPECT_NEAR(r.variance[4], 2.0 / tau, 1e-14);
}

TEST(Rw1Interpolation, MultiDayGapsMatchDenseOracle) {
  Rng rng(9);
  const Eigen::VectorXd v = std_normal_vector(rng, 7);
  const std::vector<bool> observed{false, true, false, false, true, false, true};
  const auto r = interpolate_missing_days(v, 3.0, observed);
  const auto [mean, var] = synth::dense_rw1_interpolation(v, 3.0, observed);
  EXPECT_LT((r.mean - mean).cwiseAbs().maxCoeff(), 1e-10);
  EXPECT_LT((r.variance - var).cwiseAbs().maxCoeff(), 1e-10);
}

TEST(Rw1Interpolation, NeedsAnObservedDay) {
  EXPECT_THROW(interpolate_missing_days(Eigen::VectorXd::Zero(3), 1.0, {false, false, false}), InputError);
  EXPECT_THROW(interpolate_missing_days(Eigen::VectorXd::Zero(3), 1.0, {true}), InputError);
}
