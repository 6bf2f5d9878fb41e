#include "oracles.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>

namespace obsmatch::oracle {

namespace {

double upper_normal_tail(double x) { return 0.5 * std::erfc(x / std::sqrt(2.0)); }

double sigmoid(double t) { return t >= 0 ? 1.0 / (1.0 + std::exp(-t)) : std::exp(t) / (1.0 + std::exp(t)); }

}  // namespace

std::int64_t bucket_min_cost(std::size_t n_treated, std::size_t n_control, int k,
                             const std::vector<std::int64_t>& cost) {
  const auto kk = static_cast<std::size_t>(k);
  const bool exact_k = n_control >= kk * n_treated;
  const bool pairs_only = n_control < n_treated;
  const std::size_t cap = pairs_only ? 1 : kk;

  std::vector<std::size_t> load(n_treated, 0);
  std::int64_t best = std::numeric_limits<std::int64_t>::max();
  std::function<void(std::size_t, std::int64_t)> visit = [&](std::size_t j, std::int64_t acc) {
    if (acc >= best) return;
    if (j == n_control) {
      for (std::size_t i = 0; i < n_treated; ++i) {
        if (exact_k && load[i] != kk) return;
        if (!exact_k && !pairs_only && load[i] == 0) return;
      }
      best = acc;
      return;
    }
    // Leaving a control unused is only allowed when there are surplus controls.
    if (exact_k) visit(j + 1, acc);
    for (std::size_t i = 0; i < n_treated; ++i) {
      if (load[i] == cap) continue;
      ++load[i];
      visit(j + 1, acc + cost[i * n_control + j]);
      --load[i];
    }
  };
  visit(0, 0);
  return best;
}

int interval_by_definition(double e) {
  if (e > 1.0 / 3.0 && e <= 1.0) return 1;
  for (int k = 2; k <= 14; ++k)
    if (e > 1.0 / (k + 2) && e <= 1.0 / (k + 1)) return k;
  if (e >= 0.0 && e <= 1.0 / 16.0) return 15;
  return -1;
}

Tails permutation_tails(const std::vector<double>& eps, const std::vector<std::size_t>& sizes,
                        const std::vector<std::size_t>& treated) {
  std::vector<std::size_t> start(sizes.size(), 0);
  for (std::size_t i = 1; i < sizes.size(); ++i) start[i] = start[i - 1] + sizes[i - 1];
  double observed = 0.0, scale = 0.0;
  for (std::size_t i = 0; i < sizes.size(); ++i) observed += eps[start[i] + treated[i]];
  for (double v : eps) scale += std::abs(v);
  const double tol = 1e-9 * (1.0 + scale);

  std::vector<std::size_t> pos(sizes.size(), 0);
  double ge = 0, le = 0, total = 0;
  while (true) {
    double s = 0.0;
    for (std::size_t i = 0; i < sizes.size(); ++i) s += eps[start[i] + pos[i]];
    total += 1;
    if (s >= observed - tol) ge += 1;
    if (s <= observed + tol) le += 1;
    std::size_t i = 0;
    while (i < sizes.size() && ++pos[i] == sizes[i]) pos[i++] = 0;
    if (i == sizes.size()) break;
  }
  return {ge / total, le / total};
}

Tails event_count_tails(const std::vector<int>& y, const std::vector<std::size_t>& sizes,
                        const std::vector<std::size_t>& treated) {
  std::vector<double> as_real(y.begin(), y.end());
  // Event counts are integers, so the tolerance used for real sums is harmless.
  return permutation_tails(as_real, sizes, treated);
}

double bernoulli_sum_upper(const std::vector<double>& p, int s) {
  std::vector<double> dist{1.0};
  for (double q : p) {
    std::vector<double> next(dist.size() + 1, 0.0);
    for (std::size_t k = 0; k < dist.size(); ++k) {
      next[k] += dist[k] * (1.0 - q);
      next[k + 1] += dist[k] * q;
    }
    dist.swap(next);
  }
  double ge = 0.0;
  for (std::size_t k = 0; k < dist.size(); ++k)
    if (static_cast<int>(k) >= s) ge += dist[k];
  return ge;
}

namespace {

struct Moment {
  double m, v;
};

// Keeps the points not dominated when both coordinates are to be maximised
// (upper = true) or when m is maximised and v minimised (upper = false).
std::vector<Moment> frontier(std::vector<Moment> pts, bool upper) {
  std::sort(pts.begin(), pts.end(), [&](const Moment& a, const Moment& b) {
    if (a.m != b.m) return a.m > b.m;
    return upper ? a.v > b.v : a.v < b.v;
  });
  std::vector<Moment> out;
  for (const auto& p : pts) {
    if (out.empty() || (upper ? p.v > out.back().v : p.v < out.back().v)) out.push_back(p);
  }
  return out;
}

std::vector<Moment> set_moments(const std::vector<double>& values, double gamma, int steps) {
  const std::size_t n = values.size();
  std::vector<int> u(n, 0);
  std::vector<Moment> pts;
  while (true) {
    double w = 0, s1 = 0, s2 = 0;
    for (std::size_t j = 0; j < n; ++j) {
      const double pw = std::pow(gamma, static_cast<double>(u[j]) / steps);
      w += pw;
      s1 += pw * values[j];
      s2 += pw * values[j] * values[j];
    }
    const double mu = s1 / w;
    pts.push_back({mu, std::max(0.0, s2 / w - mu * mu)});
    std::size_t j = 0;
    while (j < n && ++u[j] > steps) u[j++] = 0;
    if (j == n) break;
  }
  return pts;
}

}  // namespace

double max_set_mean(const std::vector<double>& values, double gamma, int steps) {
  double best = -std::numeric_limits<double>::infinity();
  for (const auto& p : set_moments(values, gamma, steps)) best = std::max(best, p.m);
  return best;
}

SensitivityGridResult sensitivity_grid(const std::vector<double>& eps, const std::vector<std::size_t>& sizes,
                                       const std::vector<std::size_t>& treated, double gamma, int steps) {
  std::vector<Moment> hi{{0.0, 0.0}}, lo{{0.0, 0.0}};
  double observed = 0.0;
  std::size_t start = 0;
  for (std::size_t i = 0; i < sizes.size(); ++i) {
    std::vector<double> vals(eps.begin() + static_cast<std::ptrdiff_t>(start),
                             eps.begin() + static_cast<std::ptrdiff_t>(start + sizes[i]));
    observed += vals[treated[i]];
    const auto pts = set_moments(vals, gamma, steps);
    const auto set_hi = frontier(pts, true), set_lo = frontier(pts, false);
    std::vector<Moment> nh, nl;
    for (const auto& a : hi)
      for (const auto& b : set_hi) nh.push_back({a.m + b.m, a.v + b.v});
    for (const auto& a : lo)
      for (const auto& b : set_lo) nl.push_back({a.m + b.m, a.v + b.v});
    hi = frontier(nh, true);
    lo = frontier(nl, false);
    start += sizes[i];
  }
  SensitivityGridResult r;
  r.max_mean = -std::numeric_limits<double>::infinity();
  for (const auto* group : {&hi, &lo}) {
    for (const auto& p : *group) {
      r.max_mean = std::max(r.max_mean, p.m);
      const double tail = p.v > 1e-300 ? upper_normal_tail((observed - p.m) / std::sqrt(p.v)) : 1.0;
      r.p_max = std::max(r.p_max, tail);
    }
  }
  return r;
}

Eigen::VectorXd logistic_newton(const Eigen::MatrixXd& X, const Eigen::VectorXi& z, int iterations) {
  const Eigen::Index n = X.rows(), p = X.cols() + 1;
  auto design = [&](Eigen::Index i, Eigen::Index j) { return j == 0 ? 1.0 : X(i, j - 1); };
  Eigen::VectorXd beta = Eigen::VectorXd::Zero(p);
  for (int it = 0; it < iterations; ++it) {
    Eigen::VectorXd g = Eigen::VectorXd::Zero(p);
    Eigen::MatrixXd H = Eigen::MatrixXd::Zero(p, p);
    for (Eigen::Index i = 0; i < n; ++i) {
      double eta = 0.0;
      for (Eigen::Index j = 0; j < p; ++j) eta += design(i, j) * beta[j];
      const double mu = sigmoid(eta), w = mu * (1.0 - mu);
      for (Eigen::Index a = 0; a < p; ++a) {
        g[a] += design(i, a) * (z[i] - mu);
        for (Eigen::Index b = 0; b < p; ++b) H(a, b) += w * design(i, a) * design(i, b);
      }
    }
    const Eigen::VectorXd step = H.ldlt().solve(g);
    beta += step;
    if (step.cwiseAbs().maxCoeff() < 1e-13 * (1.0 + beta.cwiseAbs().maxCoeff())) break;
  }
  return beta;
}

KktReport l1_kkt(const Eigen::MatrixXd& X, const Eigen::VectorXi& z, const Eigen::VectorXd& beta, double lambda) {
  const Eigen::Index n = X.rows(), p = X.cols();
  Eigen::VectorXd g = Eigen::VectorXd::Zero(p + 1);
  for (Eigen::Index i = 0; i < n; ++i) {
    double eta = beta[0];
    for (Eigen::Index j = 0; j < p; ++j) eta += X(i, j) * beta[j + 1];
    const double r = z[i] - sigmoid(eta);
    g[0] += r;
    for (Eigen::Index j = 0; j < p; ++j) g[j + 1] += X(i, j) * r;
  }
  KktReport rep;
  rep.max_stationarity_error = std::abs(g[0]);
  for (Eigen::Index j = 1; j <= p; ++j) {
    rep.max_abs_gradient = std::max(rep.max_abs_gradient, std::abs(g[j]));
    if (beta[j] != 0.0)
      rep.max_stationarity_error =
          std::max(rep.max_stationarity_error, std::abs(g[j] - lambda * (beta[j] > 0 ? 1.0 : -1.0)));
  }
  return rep;
}

QuadratureResult logistic_posterior_quadrature(const Eigen::VectorXd& x, const Eigen::VectorXi& z, double intercept_sd,
                                               double slope_sd, int points) {
  Eigen::MatrixXd X(x.size(), 1);
  X.col(0) = x;
  const Eigen::VectorXd mode = logistic_newton(X, z);
  // Curvature at the likelihood mode sets the integration window.
  Eigen::Matrix2d H = Eigen::Matrix2d::Zero();
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const double mu = sigmoid(mode[0] + mode[1] * x[i]), w = mu * (1.0 - mu);
    H(0, 0) += w;
    H(0, 1) += w * x[i];
    H(1, 1) += w * x[i] * x[i];
  }
  H(1, 0) = H(0, 1);
  H(0, 0) += 1.0 / (intercept_sd * intercept_sd);
  H(1, 1) += 1.0 / (slope_sd * slope_sd);
  const Eigen::Matrix2d cov = H.inverse();
  const double half0 = 10.0 * std::sqrt(cov(0, 0)), half1 = 10.0 * std::sqrt(cov(1, 1));

  std::vector<double> a(points), b(points);
  for (int k = 0; k < points; ++k) {
    const double t = -1.0 + 2.0 * k / (points - 1);
    a[k] = mode[0] + t * half0;
    b[k] = mode[1] + t * half1;
  }
  std::vector<double> logpost(static_cast<std::size_t>(points) * points);
  double top = -std::numeric_limits<double>::infinity();
  for (int p = 0; p < points; ++p) {
    for (int q = 0; q < points; ++q) {
      double ll = -0.5 * (a[p] * a[p]) / (intercept_sd * intercept_sd) - 0.5 * (b[q] * b[q]) / (slope_sd * slope_sd);
      for (Eigen::Index i = 0; i < x.size(); ++i) {
        const double eta = a[p] + b[q] * x[i];
        // log sigmoid(eta) when z = 1, log(1 - sigmoid(eta)) when z = 0
        const double s = z[i] == 1 ? eta : -eta;
        ll += s >= 0 ? -std::log1p(std::exp(-s)) : s - std::log1p(std::exp(s));
      }
      logpost[static_cast<std::size_t>(p) * points + q] = ll;
      top = std::max(top, ll);
    }
  }
  double w = 0, m0 = 0, m1 = 0, s0 = 0, s1 = 0;
  for (int p = 0; p < points; ++p) {
    for (int q = 0; q < points; ++q) {
      const double d = std::exp(logpost[static_cast<std::size_t>(p) * points + q] - top);
      w += d;
      m0 += d * a[p];
      m1 += d * b[q];
      s0 += d * a[p] * a[p];
      s1 += d * b[q] * b[q];
    }
  }
  QuadratureResult r;
  r.mean = {m0 / w, m1 / w};
  r.sd = {std::sqrt(s0 / w - r.mean[0] * r.mean[0]), std::sqrt(s1 / w - r.mean[1] * r.mean[1])};
  return r;
}

double conditional_loglik(const std::vector<int>& y, const std::vector<std::size_t>& sizes,
                          const std::vector<std::size_t>& treated, double theta) {
  double ll = 0.0;
  std::size_t start = 0;
  for (std::size_t i = 0; i < sizes.size(); ++i) {
    double denom = 0.0;
    for (std::size_t j = 0; j < sizes[i]; ++j) denom += std::exp(theta * y[start + j]);
    ll += theta * y[start + treated[i]] - std::log(denom);
    start += sizes[i];
  }
  return ll;
}

double mcnemar_p(const std::vector<int>& y_treated, const std::vector<int>& y_control) {
  double b = 0, c = 0;
  for (std::size_t i = 0; i < y_treated.size(); ++i) {
    if (y_treated[i] == 1 && y_control[i] == 0) b += 1;
    if (y_treated[i] == 0 && y_control[i] == 1) c += 1;
  }
  if (b + c == 0) return 1.0;
  const double stat = (b - c) * (b - c) / (b + c);
  return std::erfc(std::sqrt(stat / 2.0));
}

}  // namespace obsmatch::oracle
