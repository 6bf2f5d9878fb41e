#include "obsmatch/propensity.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <fmt/format.h>

#include "obsmatch/common.hpp"

namespace obsmatch {

std::string to_string(PropensityMethod method) {
  switch (method) {
    case PropensityMethod::mle: return "mle";
    case PropensityMethod::l1: return "l1";
    case PropensityMethod::bayes: return "bayes";
    case PropensityMethod::bart: return "bart";
  }
  return "mle";
}

PropensityMethod propensity_method_from_string(const std::string& s) {
  if (s == "mle") return PropensityMethod::mle;
  if (s == "l1") return PropensityMethod::l1;
  if (s == "bayes") return PropensityMethod::bayes;
  if (s == "bart") return PropensityMethod::bart;
  throw ValidationError(fmt::format("unknown propensity method '{}'", s));
}

int method_rank(PropensityMethod method) { return static_cast<int>(method); }

double clamp_score(double p) {
  constexpr double eps = 1e-12;
  return std::clamp(p, eps, 1.0 - eps);
}

std::size_t PropensityFit::num_features() const {
  if (method == PropensityMethod::bart) return forest ? static_cast<std::size_t>(forest->num_features) : 0;
  return beta.size() > 0 ? static_cast<std::size_t>(beta.size() - 1) : 0;
}

namespace {

Eigen::MatrixXd with_intercept(const Eigen::MatrixXd& X) {
  Eigen::MatrixXd A(X.rows(), X.cols() + 1);
  A.col(0).setOnes();
  A.rightCols(X.cols()) = X;
  return A;
}

void check_inputs(const Eigen::MatrixXd& X, const Eigen::VectorXi& z) {
  if (X.rows() != z.size()) throw ValidationError("covariate rows and treatment length differ");
  if (X.cols() < 1) throw ValidationError("propensity model needs at least one covariate");
  Eigen::Index treated = 0;
  for (Eigen::Index i = 0; i < z.size(); ++i) {
    if (z(i) != 0 && z(i) != 1) throw ValidationError("treatment values must be 0 or 1");
    treated += z(i);
  }
  if (treated == 0 || treated == z.size())
    throw ValidationError("propensity model needs both treated and control subjects");
}

double log_likelihood(const Eigen::VectorXd& eta, const Eigen::VectorXi& z) {
  double ll = 0.0;
  for (Eigen::Index i = 0; i < eta.size(); ++i) {
    // log(1 + exp(eta)) computed stably
    const double e = eta(i);
    const double softplus = e > 0 ? e + std::log1p(std::exp(-e)) : std::log1p(std::exp(e));
    ll += z(i) * e - softplus;
  }
  return ll;
}

Eigen::VectorXd probabilities(const Eigen::VectorXd& eta) {
  Eigen::VectorXd p(eta.size());
  for (Eigen::Index i = 0; i < eta.size(); ++i) p(i) = logistic(eta(i));
  return p;
}

Eigen::VectorXd solve_spd(const Eigen::MatrixXd& H, const Eigen::VectorXd& g) {
  Eigen::LDLT<Eigen::MatrixXd> ldlt(H);
  if (ldlt.info() == Eigen::Success && ldlt.isPositive()) {
    Eigen::VectorXd step = ldlt.solve(g);
    if (step.allFinite()) return step;
  }
  return H.completeOrthogonalDecomposition().solve(g);
}

std::vector<double> linear_scores(const Eigen::MatrixXd& A, const Eigen::VectorXd& beta) {
  const Eigen::VectorXd eta = A * beta;
  std::vector<double> s(static_cast<std::size_t>(eta.size()));
  for (Eigen::Index i = 0; i < eta.size(); ++i) s[static_cast<std::size_t>(i)] = clamp_score(logistic(eta(i)));
  return s;
}

}  // namespace

// ---------------------------------------------------------------------------
// Maximum likelihood
// ---------------------------------------------------------------------------

LogisticFit fit_logistic(const Eigen::MatrixXd& X, const Eigen::VectorXi& z,
                         const LogisticFitOptions& options) {
  check_inputs(X, z);
  const Eigen::MatrixXd A = with_intercept(X);
  const Eigen::Index d = A.cols();
  LogisticFit fit;
  fit.beta = Eigen::VectorXd::Zero(d);
  Eigen::VectorXd eta = A * fit.beta;
  double ll = log_likelihood(eta, z);
  const Eigen::VectorXd zd = z.cast<double>();

  for (int it = 0; it < options.max_iterations; ++it) {
    const Eigen::VectorXd p = probabilities(eta);
    const Eigen::VectorXd g = A.transpose() * (zd - p);
    if (g.cwiseAbs().maxCoeff() < options.gradient_tolerance) {
      fit.converged = true;
      break;
    }
    const Eigen::VectorXd w = p.array() * (1.0 - p.array());
    const Eigen::MatrixXd H = A.transpose() * w.asDiagonal() * A;
    Eigen::VectorXd step = solve_spd(H, g);

    // Step halving keeps the likelihood nondecreasing.
    double t = 1.0;
    Eigen::VectorXd beta_new;
    double ll_new = ll;
    for (int h = 0; h < 30; ++h) {
      beta_new = fit.beta + t * step;
      ll_new = log_likelihood(A * beta_new, z);
      if (ll_new >= ll - 1e-12 * std::abs(ll)) break;
      t *= 0.5;
    }
    const double change = ll_new - ll;
    fit.beta = beta_new;
    eta = A * fit.beta;
    ll = ll_new;
    fit.iterations = it + 1;

    if (fit.beta.norm() > 1e3) {
      fit.separated = true;
      break;
    }
    if (std::abs(change) < 1e-12 && g.norm() > 1e-4) {
      fit.separated = true;
      break;
    }
  }
  fit.log_likelihood = ll;

  const Eigen::VectorXd p = probabilities(eta);
  // Fitted probabilities numerically at 0 or 1 mean the likelihood is
  // still increasing along a separating direction.
  for (Eigen::Index i = 0; i < p.size(); ++i)
    if (std::min(p(i), 1.0 - p(i)) < 1e-8) fit.separated = true;
  if (fit.separated) fit.converged = false;

  const Eigen::VectorXd w = p.array() * (1.0 - p.array());
  const Eigen::MatrixXd H = A.transpose() * w.asDiagonal() * A;
  Eigen::LDLT<Eigen::MatrixXd> ldlt(H);
  fit.standard_errors = Eigen::VectorXd::Constant(d, std::numeric_limits<double>::infinity());
  if (ldlt.info() == Eigen::Success && ldlt.isPositive()) {
    const Eigen::MatrixXd cov = ldlt.solve(Eigen::MatrixXd::Identity(d, d));
    for (Eigen::Index j = 0; j < d; ++j)
      if (cov(j, j) > 0) fit.standard_errors(j) = std::sqrt(cov(j, j));
  }
  return fit;
}

PropensityFit fit_mle(const Eigen::MatrixXd& X, const Eigen::VectorXi& z,
                      const LogisticFitOptions& options) {
  const auto lf = fit_logistic(X, z, options);
  PropensityFit fit;
  fit.method = PropensityMethod::mle;
  fit.beta = lf.beta;
  fit.standard_errors = lf.standard_errors;
  fit.converged = lf.converged;
  fit.nonzero = static_cast<std::size_t>(X.cols());
  if (lf.separated) fit.warnings.push_back("separation detected: maximum likelihood estimate diverges");
  else if (!lf.converged) fit.warnings.push_back("iteration limit reached before convergence");
  fit.scores = linear_scores(with_intercept(X), fit.beta);
  return fit;
}

// ---------------------------------------------------------------------------
// L1-penalized
// ---------------------------------------------------------------------------

double l1_lambda_max(const Eigen::MatrixXd& X, const Eigen::VectorXi& z) {
  const double pbar = z.cast<double>().mean();
  const Eigen::VectorXd r = z.cast<double>().array() - pbar;
  return (X.transpose() * r).cwiseAbs().maxCoeff();
}

Eigen::VectorXd solve_l1_logistic(const Eigen::MatrixXd& X, const Eigen::VectorXi& z,
                                  double lambda, const Eigen::VectorXd& warm_start,
                                  double tolerance, int max_sweeps) {
  const Eigen::Index n = X.rows(), p = X.cols();
  Eigen::VectorXd beta = warm_start.size() == p + 1 ? warm_start : Eigen::VectorXd::Zero(p + 1);
  if (warm_start.size() != p + 1) {
    const double pbar = std::clamp(z.cast<double>().mean(), 1e-10, 1 - 1e-10);
    beta(0) = logit(pbar);
  }
  const Eigen::VectorXd zd = z.cast<double>();
  Eigen::VectorXd eta = (X * beta.tail(p)).array() + beta(0);

  int sweeps = 0;
  for (int outer = 0; outer < 500 && sweeps < max_sweeps; ++outer) {
    Eigen::VectorXd w(n), resid(n);
    for (Eigen::Index i = 0; i < n; ++i) {
      const double pi = logistic(eta(i));
      w(i) = std::max(pi * (1.0 - pi), 1e-5);
      // working response minus current linear predictor
      resid(i) = (zd(i) - pi) / w(i);
    }
    Eigen::VectorXd xwx(p);
    for (Eigen::Index j = 0; j < p; ++j) xwx(j) = (X.col(j).array().square() * w.array()).sum();
    const double wsum = w.sum();
    const Eigen::VectorXd beta_outer = beta;

    while (sweeps < max_sweeps) {
      ++sweeps;
      double max_change = 0.0;
      const double d0 = (w.array() * resid.array()).sum() / wsum;
      beta(0) += d0;
      resid.array() -= d0;
      max_change = std::max(max_change, std::abs(d0));
      for (Eigen::Index j = 0; j < p; ++j) {
        if (xwx(j) <= 0) continue;
        const double old = beta(j + 1);
        const double rho = (X.col(j).array() * w.array() * resid.array()).sum() + old * xwx(j);
        double updated = 0.0;
        if (rho > lambda) updated = (rho - lambda) / xwx(j);
        else if (rho < -lambda) updated = (rho + lambda) / xwx(j);
        const double delta = updated - old;
        if (delta != 0.0) {
          resid -= delta * X.col(j);
          beta(j + 1) = updated;
          max_change = std::max(max_change, std::abs(delta));
        }
      }
      if (max_change < tolerance) break;
    }
    eta = (X * beta.tail(p)).array() + beta(0);
    if ((beta - beta_outer).cwiseAbs().maxCoeff() < tolerance) break;
  }
  return beta;
}

namespace {

double binomial_deviance(const Eigen::MatrixXd& X, const Eigen::VectorXi& z,
                         const Eigen::VectorXd& beta) {
  const Eigen::VectorXd eta = (X * beta.tail(X.cols())).array() + beta(0);
  return -2.0 * log_likelihood(eta, z);
}

std::size_t count_nonzero(const Eigen::VectorXd& beta) {
  std::size_t k = 0;
  for (Eigen::Index j = 1; j < beta.size(); ++j)
    if (beta(j) != 0.0) ++k;
  return k;
}

// Fold labels that depend on row content rather than row position, so the
// fit is invariant to subject reordering.
std::vector<int> assign_folds(const Eigen::MatrixXd& X, const Eigen::VectorXi& z, int folds,
                              std::uint64_t seed) {
  const auto n = static_cast<std::size_t>(X.rows());
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    const auto ia = static_cast<Eigen::Index>(a), ib = static_cast<Eigen::Index>(b);
    if (z(ia) != z(ib)) return z(ia) < z(ib);
    for (Eigen::Index j = 0; j < X.cols(); ++j)
      if (X(ia, j) != X(ib, j)) return X(ia, j) < X(ib, j);
    return false;
  });
  std::vector<std::size_t> slots(n);
  std::iota(slots.begin(), slots.end(), 0);
  Rng rng(seed);
  std::shuffle(slots.begin(), slots.end(), rng);
  std::vector<int> fold(n);
  for (std::size_t k = 0; k < n; ++k) fold[order[k]] = static_cast<int>(slots[k] % static_cast<std::size_t>(folds));
  return fold;
}

Eigen::MatrixXd take_rows(const Eigen::MatrixXd& X, const std::vector<Eigen::Index>& rows) {
  Eigen::MatrixXd out(static_cast<Eigen::Index>(rows.size()), X.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = X.row(rows[i]);
  return out;
}

Eigen::VectorXi take_rows(const Eigen::VectorXi& z, const std::vector<Eigen::Index>& rows) {
  Eigen::VectorXi out(static_cast<Eigen::Index>(rows.size()));
  for (std::size_t i = 0; i < rows.size(); ++i) out(static_cast<Eigen::Index>(i)) = z(rows[i]);
  return out;
}

}  // namespace

PropensityFit fit_l1(const Eigen::MatrixXd& X, const Eigen::VectorXi& z, const L1Options& options) {
  check_inputs(X, z);
  if (options.folds < 2) throw ValidationError("cross-validation needs at least 2 folds");
  if (options.folds > X.rows()) throw ValidationError("more folds than subjects");

  std::vector<double> grid = options.lambda_grid;
  if (grid.empty()) {
    const double lmax = l1_lambda_max(X, z);
    const int m = std::max(options.grid_size, 2);
    for (int i = 0; i < m; ++i)
      grid.push_back(lmax * std::pow(options.min_ratio, static_cast<double>(i) / (m - 1)));
  } else {
    for (double l : grid)
      if (!(l >= 0.0) || !std::isfinite(l)) throw ValidationError("lambda values must be finite and >= 0");
    std::sort(grid.begin(), grid.end(), std::greater<>());
  }

  const auto fold = assign_folds(X, z, options.folds, options.seed);
  std::vector<double> cv(grid.size(), 0.0);
  for (int f = 0; f < options.folds; ++f) {
    std::vector<Eigen::Index> train, test;
    for (std::size_t i = 0; i < fold.size(); ++i)
      (fold[i] == f ? test : train).push_back(static_cast<Eigen::Index>(i));
    const auto Xtr = take_rows(X, train), Xte = take_rows(X, test);
    const auto ztr = take_rows(z, train), zte = take_rows(z, test);
    const Eigen::Index treated = ztr.sum();
    Eigen::VectorXd warm;
    for (std::size_t g = 0; g < grid.size(); ++g) {
      if (treated == 0 || treated == ztr.size()) {
        // Degenerate training fold: intercept-only prediction.
        warm = Eigen::VectorXd::Zero(X.cols() + 1);
        warm(0) = logit(std::clamp(ztr.cast<double>().mean(), 1e-6, 1 - 1e-6));
      } else {
        warm = solve_l1_logistic(Xtr, ztr, grid[g], warm, options.tolerance, options.max_sweeps);
      }
      cv[g] += binomial_deviance(Xte, zte, warm);
    }
  }

  PropensityFit fit;
  fit.method = PropensityMethod::l1;
  Eigen::VectorXd warm;
  std::size_t best = 0;
  Eigen::VectorXd best_beta;
  for (std::size_t g = 0; g < grid.size(); ++g) {
    warm = solve_l1_logistic(X, z, grid[g], warm, options.tolerance, options.max_sweeps);
    L1PathPoint pt;
    pt.lambda = grid[g];
    pt.nonzero = count_nonzero(warm);
    pt.cv_deviance = cv[g] / static_cast<double>(X.rows());
    fit.path.push_back(pt);
    // Strict improvement keeps the larger lambda on ties.
    if (g == 0 || cv[g] < cv[best]) {
      best = g;
      best_beta = warm;
    }
  }
  fit.beta = best_beta;
  fit.lambda = grid[best];
  fit.nonzero = count_nonzero(best_beta);
  fit.scores = linear_scores(with_intercept(X), fit.beta);
  return fit;
}

// ---------------------------------------------------------------------------
// Bayesian posterior mean under N(0, I) slopes
// ---------------------------------------------------------------------------

PropensityFit fit_bayes(const Eigen::MatrixXd& X, const Eigen::VectorXi& z,
                        const BayesOptions& options) {
  check_inputs(X, z);
  if (options.draws < 100) throw ValidationError("bayes fit needs at least 100 retained draws");
  if (options.burn_in < 0) throw ValidationError("burn_in must be nonnegative");

  const Eigen::MatrixXd A = with_intercept(X);
  const Eigen::Index d = A.cols();
  Eigen::VectorXd prior_prec = Eigen::VectorXd::Constant(d, 1.0 / (options.prior_sd * options.prior_sd));
  prior_prec(0) = 1.0 / (options.intercept_prior_sd * options.intercept_prior_sd);
  const Eigen::VectorXd zd = z.cast<double>();

  auto log_post = [&](const Eigen::VectorXd& b) {
    return log_likelihood(A * b, z) - 0.5 * (prior_prec.array() * b.array().square()).sum();
  };

  // Posterior mode by Newton; the log posterior is strictly concave.
  Eigen::VectorXd mode = Eigen::VectorXd::Zero(d);
  Eigen::MatrixXd H;
  for (int it = 0; it < 200; ++it) {
    const Eigen::VectorXd p = probabilities(A * mode);
    const Eigen::VectorXd g = A.transpose() * (zd - p) - (prior_prec.array() * mode.array()).matrix();
    const Eigen::VectorXd w = p.array() * (1.0 - p.array());
    H = A.transpose() * w.asDiagonal() * A;
    H.diagonal() += prior_prec;
    if (g.cwiseAbs().maxCoeff() < 1e-10) break;
    Eigen::VectorXd step = solve_spd(H, g);
    double t = 1.0;
    const double lp = log_post(mode);
    for (int h = 0; h < 30; ++h) {
      if (log_post(mode + t * step) >= lp) break;
      t *= 0.5;
    }
    mode += t * step;
  }
  const Eigen::MatrixXd cov = H.ldlt().solve(Eigen::MatrixXd::Identity(d, d));
  const Eigen::MatrixXd L = Eigen::LLT<Eigen::MatrixXd>(cov).matrixL();

  Rng rng(options.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> unif(0.0, 1.0);

  double log_scale = std::log(2.38 / std::sqrt(static_cast<double>(d)));
  Eigen::VectorXd current = mode;
  double current_lp = log_post(current);
  Eigen::VectorXd xi(d);

  PropensityFit fit;
  fit.method = PropensityMethod::bayes;
  fit.beta_draws.resize(options.draws, d);
  std::size_t accepted = 0;
  const int total = options.burn_in + options.draws;
  for (int it = 0; it < total; ++it) {
    for (Eigen::Index j = 0; j < d; ++j) xi(j) = normal(rng);
    const Eigen::VectorXd proposal = current + std::exp(log_scale) * (L * xi);
    const double prop_lp = log_post(proposal);
    const bool accept = std::log(unif(rng)) < prop_lp - current_lp;
    if (accept) {
      current = proposal;
      current_lp = prop_lp;
    }
    if (it < options.burn_in) {
      // Robbins-Monro adaptation of the proposal scale during burn-in only.
      const double gain = 1.0 / std::pow(it + 1.0, 0.6);
      log_scale += gain * ((accept ? 1.0 : 0.0) - options.target_acceptance);
    } else {
      if (accept) ++accepted;
      fit.beta_draws.row(it - options.burn_in) = current.transpose();
    }
  }
  fit.draws = static_cast<std::size_t>(options.draws);
  fit.acceptance_rate = static_cast<double>(accepted) / options.draws;
  if (fit.acceptance_rate < 0.05 || fit.acceptance_rate > 0.95)
    fit.warnings.push_back(
        fmt::format("metropolis acceptance rate {:.3f} outside [0.05, 0.95]", fit.acceptance_rate));

  fit.beta = fit.beta_draws.colwise().mean().transpose();
  fit.nonzero = static_cast<std::size_t>(X.cols());
  const Eigen::MatrixXd eta = A * fit.beta_draws.transpose();  // n x draws
  fit.scores.resize(static_cast<std::size_t>(A.rows()));
  for (Eigen::Index i = 0; i < A.rows(); ++i) {
    double s = 0.0;
    for (Eigen::Index k = 0; k < eta.cols(); ++k) s += logistic(eta(i, k));
    fit.scores[static_cast<std::size_t>(i)] = clamp_score(s / static_cast<double>(eta.cols()));
  }
  return fit;
}

// ---------------------------------------------------------------------------
// BART
// ---------------------------------------------------------------------------

PropensityFit fit_bart_propensity(const Eigen::MatrixXd& X, const Eigen::VectorXi& z,
                                  const BartParams& params, std::uint64_t seed) {
  check_inputs(X, z);
  auto posterior = std::make_shared<BartPosterior>(fit_bart_binary(X, z, params, seed));
  PropensityFit fit;
  fit.method = PropensityMethod::bart;
  fit.draws = posterior->draws.size();
  fit.acceptance_rate = posterior->acceptance_rate;
  fit.scores.reserve(posterior->train_fit_mean.size());
  for (double s : posterior->train_fit_mean) fit.scores.push_back(clamp_score(s));
  fit.forest = std::move(posterior);
  return fit;
}

double predict(const PropensityFit& fit, const Eigen::VectorXd& x) {
  if (static_cast<std::size_t>(x.size()) != fit.num_features())
    throw ValidationError(fmt::format("covariate vector has {} entries, fit expects {}", x.size(),
                                      fit.num_features()));
  switch (fit.method) {
    case PropensityMethod::mle:
    case PropensityMethod::l1:
      return clamp_score(logistic(fit.beta(0) + fit.beta.tail(x.size()).dot(x)));
    case PropensityMethod::bayes: {
      double s = 0.0;
      for (Eigen::Index k = 0; k < fit.beta_draws.rows(); ++k) {
        const auto row = fit.beta_draws.row(k);
        s += logistic(row(0) + row.tail(x.size()).dot(x.transpose()));
      }
      return clamp_score(s / static_cast<double>(fit.beta_draws.rows()));
    }
    case PropensityMethod::bart:
      return clamp_score(fit.forest->predict(x));
  }
  return 0.5;
}

}  // namespace obsmatch
