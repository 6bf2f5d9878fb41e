#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <random>
#include <sstream>

#include "obsmatch/bart.hpp"
#include "obsmatch/common.hpp"

using namespace obsmatch;

namespace {

BartParams quick(int burn = 100, int draws = 300) {
  BartParams p;
  p.burn_in = burn;
  p.draws = draws;
  return p;
}

std::string snapshot(const BartPosterior& post) {
  std::ostringstream os;
  write_forest(os, post);
  return os.str();
}

Eigen::MatrixXd normal_design(Rng& rng, Eigen::Index n, Eigen::Index p) {
  std::normal_distribution<double> normal;
  Eigen::MatrixXd X(n, p);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < p; ++j) X(i, j) = normal(rng);
  return X;
}

}  // namespace

TEST_CASE("parameter validation rejects bad proposal mixes and counts") {
  BartParams p;
  CHECK_NOTHROW(p.validate());
  p.prob_grow = 0.5;
  CHECK_THROWS_AS(p.validate(), ValidationError);
  p = BartParams{};
  p.num_trees = 0;
  CHECK_THROWS_AS(p.validate(), ValidationError);
  p = BartParams{};
  p.draws = 0;
  CHECK_THROWS_AS(p.validate(), ValidationError);
  p = BartParams{};
  p.alpha = 1.0;
  CHECK_THROWS_AS(p.validate(), ValidationError);
}

TEST_CASE("constant response gives a constant prediction") {
  Rng rng(1);
  const auto X = normal_design(rng, 40, 2);
  const Eigen::VectorXd y = Eigen::VectorXd::Constant(40, 3.25);
  const auto post = fit_bart_regression(X, y, quick(10, 20), 7);
  CHECK(post.constant_response);
  for (Eigen::Index i = 0; i < 5; ++i) CHECK(std::abs(post.predict(Eigen::VectorXd(X.row(i))) - 3.25) < 1e-6);
  CHECK(std::abs(post.predict(Eigen::VectorXd(Eigen::VectorXd::Constant(2, 100.0))) - 3.25) < 1e-6);
}

TEST_CASE("step function is fit better than by the best linear predictor") {
  Rng rng(2);
  std::uniform_real_distribution<double> unif;
  std::normal_distribution<double> noise(0.0, 0.3);
  const Eigen::Index n = 500;
  Eigen::MatrixXd X(n, 2);
  Eigen::VectorXd f(n), y(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    X(i, 0) = unif(rng);
    X(i, 1) = unif(rng);
    f[i] = X(i, 0) > 0.5 ? 1.0 : -1.0;
    y[i] = f[i] + noise(rng);
  }
  const auto post = fit_bart_regression(X, y, BartParams{}, 11);

  Eigen::MatrixXd D(n, 3);
  D.col(0).setOnes();
  D.rightCols(2) = X;
  const Eigen::VectorXd beta = D.colPivHouseholderQr().solve(y);
  const Eigen::VectorXd linear = D * beta;

  double rmse_bart = 0, rmse_linear = 0;
  for (Eigen::Index i = 0; i < n; ++i) {
    rmse_bart += std::pow(post.train_fit_mean[static_cast<std::size_t>(i)] - f[i], 2);
    rmse_linear += std::pow(linear[i] - f[i], 2);
  }
  rmse_bart = std::sqrt(rmse_bart / n);
  rmse_linear = std::sqrt(rmse_linear / n);
  CHECK(rmse_bart < rmse_linear);
  CHECK(rmse_bart < 0.5 * rmse_linear);
}

TEST_CASE("same seed reproduces the draw sequence bit for bit") {
  Rng rng(3);
  const auto X = normal_design(rng, 60, 3);
  Eigen::VectorXd y = X.col(0) + 0.1 * X.col(1);
  const auto a = fit_bart_regression(X, y, quick(20, 30), 99);
  const auto b = fit_bart_regression(X, y, quick(20, 30), 99);
  const auto c = fit_bart_regression(X, y, quick(20, 30), 100);
  CHECK(snapshot(a) == snapshot(b));
  CHECK(a.sigma == b.sigma);
  CHECK(snapshot(a) != snapshot(c));
}

TEST_CASE("incremental backfitting matches the recomputed fit") {
  Rng rng(4);
  const auto X = normal_design(rng, 80, 3);
  Eigen::VectorXd y = X.col(0).array().square().matrix() + X.col(2);
  auto p = quick(20, 40);
  p.num_trees = 10;
  p.audit_backfit = true;
  const auto post = fit_bart_regression(X, y, p, 5);
  CHECK(post.max_backfit_error <= 1e-10);

  Eigen::VectorXi z(80);
  for (Eigen::Index i = 0; i < 80; ++i) z[i] = X(i, 1) > 0 ? 1 : 0;
  const auto bin = fit_bart_binary(X, z, p, 6);
  CHECK(bin.max_backfit_error <= 1e-10);
}

TEST_CASE("forced stump leaf draws follow the conjugate normal posterior") {
  Rng rng(5);
  std::normal_distribution<double> normal;
  const Eigen::Index n = 60;
  Eigen::MatrixXd X(n, 1);
  Eigen::VectorXd y(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    X(i, 0) = static_cast<double>(i) / n;
    y[i] = (X(i, 0) <= 0.3 ? 0.0 : 2.0) + normal(rng);
  }
  BartParams p;
  p.num_trees = 1;
  p.burn_in = 0;
  p.draws = 40000;
  p.forced_stump = BartParams::Stump{0, 0.3};
  p.fixed_sigma = 0.25;
  const auto post = fit_bart_regression(X, y, p, 8);

  // Closed form on the standardized scale, then mapped back.
  const double offset = 0.5 * (y.minCoeff() + y.maxCoeff());
  const double scale = y.maxCoeff() - y.minCoeff();
  const double tau2 = std::pow(0.5 / p.k, 2);
  const double s2 = 0.25 * 0.25;
  for (bool left : {true, false}) {
    double sum = 0;
    int count = 0;
    for (Eigen::Index i = 0; i < n; ++i) {
      if ((X(i, 0) <= 0.3) != left) continue;
      sum += (y[i] - offset) / scale;
      ++count;
    }
    const double prec = count / s2 + 1.0 / tau2;
    const double mean = offset + scale * (sum / s2) / prec;
    const double sd = scale / std::sqrt(prec);

    const double x = left ? 0.1 : 0.9;
    const auto draws = post.draw_values(&x);
    double m = 0, v = 0;
    for (double d : draws) m += d;
    m /= static_cast<double>(draws.size());
    for (double d : draws) v += (d - m) * (d - m);
    v /= static_cast<double>(draws.size() - 1);
    const double se = sd / std::sqrt(static_cast<double>(draws.size()));
    CHECK(std::abs(m - mean) < 5 * se);
    CHECK(std::abs(std::sqrt(v) / sd - 1.0) < 0.03);
  }
}

TEST_CASE("forced single stump binary fit is a two-level step function") {
  Rng rng(6);
  const auto X = normal_design(rng, 100, 2);
  Eigen::VectorXi z(100);
  for (Eigen::Index i = 0; i < 100; ++i) z[i] = X(i, 0) > 0 ? 1 : 0;
  BartParams p;
  p.num_trees = 1;
  p.draws = 1;
  p.burn_in = 0;
  p.forced_stump = BartParams::Stump{0, 0.0};
  const auto post = fit_bart_binary(X, z, p, 4);
  std::vector<double> levels;
  for (double x0 : {-2.0, -0.5, -0.01, 0.0, 0.01, 0.7, 3.0})
    for (double x1 : {-1.0, 2.0}) {
      const double v = post.predict(Eigen::VectorXd(Eigen::Vector2d(x0, x1)));
      bool seen = false;
      for (double l : levels) seen = seen || l == v;
      if (!seen) levels.push_back(v);
    }
  CHECK(levels.size() == 2);
  CHECK(post.predict(Eigen::VectorXd(Eigen::Vector2d(-1.0, 0.0))) == post.predict(Eigen::VectorXd(Eigen::Vector2d(0.0, 5.0))));
}

TEST_CASE("learnable threshold is classified accurately in sample") {
  Rng rng(7);
  const auto X = normal_design(rng, 500, 3);
  std::vector<double> x1(X.col(0).data(), X.col(0).data() + 500);
  std::nth_element(x1.begin(), x1.begin() + 250, x1.end());
  const double median = x1[250];
  Eigen::VectorXi z(500);
  for (Eigen::Index i = 0; i < 500; ++i) z[i] = X(i, 0) > median ? 1 : 0;
  const auto post = fit_bart_binary(X, z, quick(), 12);
  int correct = 0;
  for (Eigen::Index i = 0; i < 500; ++i)
    correct += (post.train_fit_mean[static_cast<std::size_t>(i)] > 0.5) == (z[i] == 1) ? 1 : 0;
  CHECK(correct / 500.0 > 0.85);
  for (double s : post.train_fit_mean) {
    CHECK(s > 0.0);
    CHECK(s < 1.0);
  }
}

TEST_CASE("hand-built forests predict the hand-computed sum") {
  BartPosterior post;
  post.num_features = 2;
  Forest zeros;
  zeros.trees = {Tree(), Tree::stump(1, 0.5, 0.0, 0.0)};
  post.draws = {zeros};
  CHECK(bart_predict(post, Eigen::Vector2d(0.3, 0.9)).mean == 0.0);

  Forest f;
  Tree deep = Tree::stump(0, 1.0, 0.0, 4.0);
  deep.split_leaf(1, 1, -1.0);
  deep.nodes()[static_cast<std::size_t>(deep.nodes()[static_cast<std::size_t>(1)].left)].value = -2.0;
  deep.nodes()[static_cast<std::size_t>(deep.nodes()[static_cast<std::size_t>(1)].right)].value = 0.5;
  f.trees = {Tree::stump(0, 0.0, 1.0, 3.0), deep};
  post.draws = {f};
  // x = (0.5, -2): first tree right (3), second tree left then left (-2).
  CHECK(bart_predict(post, Eigen::Vector2d(0.5, -2.0)).mean == doctest::Approx(1.0));
  // x = (-1, 0): first tree left (1), second tree left then right (0.5).
  CHECK(bart_predict(post, Eigen::Vector2d(-1.0, 0.0)).mean == doctest::Approx(1.5));
  // x = (2, 0): 3 + 4.
  CHECK(bart_predict(post, Eigen::Vector2d(2.0, 0.0)).mean == doctest::Approx(7.0));

  std::reverse(f.trees.begin(), f.trees.end());
  post.draws = {f};
  CHECK(bart_predict(post, Eigen::Vector2d(0.5, -2.0)).mean == doctest::Approx(1.0));
  CHECK_THROWS_AS(bart_predict(post, Eigen::Vector3d(0, 0, 0)), ValidationError);
}

TEST_CASE("recomputed training predictions equal the cached in-sample means") {
  Rng rng(8);
  const auto X = normal_design(rng, 50, 2);
  Eigen::VectorXd y = X.col(0) - X.col(1);
  const auto post = fit_bart_regression(X, y, quick(20, 50), 13);
  Eigen::VectorXi z(50);
  for (Eigen::Index i = 0; i < 50; ++i) z[i] = y[i] > 0 ? 1 : 0;
  const auto bin = fit_bart_binary(X, z, quick(20, 50), 14);
  for (Eigen::Index i = 0; i < 50; ++i) {
    const Eigen::VectorXd x = X.row(i);
    CHECK(post.predict(x) == doctest::Approx(post.train_fit_mean[static_cast<std::size_t>(i)]).epsilon(1e-10));
    CHECK(bin.predict(x) == doctest::Approx(bin.train_fit_mean[static_cast<std::size_t>(i)]).epsilon(1e-10));
  }
}

TEST_CASE("prediction does not depend on tree order within a draw") {
  Rng rng(9);
  const auto X = normal_design(rng, 50, 2);
  Eigen::VectorXd y = X.col(0).array().sin().matrix();
  auto post = fit_bart_regression(X, y, quick(20, 20), 15);
  const Eigen::VectorXd x = X.row(3);
  const double before = post.predict(x);
  std::mt19937_64 shuffle_rng(1);
  for (auto& f : post.draws) std::shuffle(f.trees.begin(), f.trees.end(), shuffle_rng);
  CHECK(post.predict(x) == doctest::Approx(before).epsilon(1e-12));
}

TEST_CASE("response standardization inverts exactly under affine rescaling") {
  Rng rng(10);
  const auto X = normal_design(rng, 60, 2);
  std::normal_distribution<double> normal;
  Eigen::VectorXd y(60);
  for (Eigen::Index i = 0; i < 60; ++i) y[i] = X(i, 0) + 0.2 * normal(rng);
  const Eigen::VectorXd y2 = (3.0 * y.array() - 7.0).matrix();
  const auto a = fit_bart_regression(X, y, quick(20, 30), 16);
  const auto b = fit_bart_regression(X, y2, quick(20, 30), 16);
  for (Eigen::Index i = 0; i < 10; ++i) {
    const Eigen::VectorXd x = X.row(i);
    CHECK(b.predict(x) == doctest::Approx(3.0 * a.predict(x) - 7.0).epsilon(1e-9));
  }
  for (std::size_t d = 0; d < a.sigma.size(); ++d) CHECK(b.sigma[d] == doctest::Approx(3.0 * a.sigma[d]).epsilon(1e-9));
  CHECK(a.offset == doctest::Approx(0.5 * (y.minCoeff() + y.maxCoeff())));
  CHECK(a.scale == doctest::Approx(y.maxCoeff() - y.minCoeff()));
}

TEST_CASE("forest snapshot round trip is exact") {
  Rng rng(11);
  const auto X = normal_design(rng, 50, 3);
  Eigen::VectorXi z(50);
  for (Eigen::Index i = 0; i < 50; ++i) z[i] = X(i, 2) > 0.2 ? 1 : 0;
  const auto post = fit_bart_binary(X, z, quick(10, 15), 17);
  std::istringstream in(snapshot(post));
  const auto back = read_forest(in);
  CHECK(snapshot(back) == snapshot(post));
  for (Eigen::Index i = 0; i < 50; ++i) {
    const Eigen::VectorXd x = X.row(i);
    CHECK(back.predict(x) == post.predict(x));
  }
  std::istringstream bad("not a forest");
  CHECK_THROWS_AS(read_forest(bad), ValidationError);
}

TEST_CASE("every retained draw has the configured tree count and nonempty leaves") {
  Rng rng(12);
  const auto X = normal_design(rng, 70, 2);
  Eigen::VectorXd y = (X.col(0).array() > 0).cast<double>().matrix() + 0.1 * X.col(1);
  auto p = quick(30, 30);
  p.num_trees = 8;
  const auto post = fit_bart_regression(X, y, p, 18);
  for (const auto& f : post.draws) {
    REQUIRE(f.trees.size() == 8);
    for (const auto& t : f.trees) {
      std::vector<int> hits(t.nodes().size(), 0);
      for (Eigen::Index i = 0; i < 70; ++i) {
        const Eigen::VectorXd x = X.row(i);
        ++hits[static_cast<std::size_t>(t.leaf_index(x.data()))];
      }
      for (int leaf : t.leaves()) CHECK(hits[static_cast<std::size_t>(leaf)] > 0);
    }
  }
}

TEST_CASE("binary fit requires both classes") {
  Rng rng(13);
  const auto X = normal_design(rng, 20, 2);
  CHECK_THROWS_AS(fit_bart_binary(X, Eigen::VectorXi::Ones(20), quick(5, 5), 1), ValidationError);
  CHECK_THROWS_AS(fit_bart_regression(X.topRows(5), Eigen::VectorXd::Ones(5), quick(5, 5), 1), ValidationError);
}
