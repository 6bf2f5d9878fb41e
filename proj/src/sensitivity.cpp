#include "obsmatch/sensitivity.hpp"

#include <algorithm>
#include <cmath>
#include <functional>

#include <fmt/format.h>

#include "obsmatch/common.hpp"
#include "obsmatch/parallel.hpp"

namespace obsmatch {

std::pair<double, double> separable_moments(std::vector<double> values, double gamma) {
  if (!(gamma >= 1.0)) throw ValidationError("sensitivity parameter gamma must be at least 1");
  const std::size_t n = values.size();
  if (n < 2) throw ValidationError("separable_moments: a matched set has at least two members");
  std::sort(values.begin(), values.end(), std::greater<>());
  double total = 0.0, total2 = 0.0, scale = 0.0;
  for (double v : values) {
    total += v;
    total2 += v * v;
    scale = std::max(scale, std::abs(v));
  }
  const double tie = 1e-12 * (1.0 + scale);
  double best_mu = -std::numeric_limits<double>::infinity(), best_nu = 0.0;
  double top = 0.0, top2 = 0.0;
  for (std::size_t a = 1; a < n; ++a) {
    top += values[a - 1];
    top2 += values[a - 1] * values[a - 1];
    const double denom = gamma * static_cast<double>(a) + static_cast<double>(n - a);
    const double mu = (gamma * top + (total - top)) / denom;
    const double nu = std::max(0.0, (gamma * top2 + (total2 - top2)) / denom - mu * mu);
    if (mu > best_mu + tie || (std::abs(mu - best_mu) <= tie && nu > best_nu)) {
      best_mu = mu;
      best_nu = nu;
    }
  }
  return {best_mu, best_nu};
}

SensitivityResult sensitivity_residual(const Eigen::VectorXd& eps, const StratifiedSample& sample, double gamma) {
  if (!(gamma >= 1.0)) throw ValidationError("sensitivity parameter gamma must be at least 1");
  if (sample.num_sets() == 0) throw ValidationError("sensitivity_residual: no matched sets");
  if (eps.size() != sample.y.size()) throw ValidationError("sensitivity_residual: residual count mismatch");

  SensitivityResult r;
  r.gamma = gamma;
  double t = 0.0, null_mean = 0.0;
  for (std::size_t i = 0; i < sample.num_sets(); ++i) {
    double s = 0.0;
    for (std::size_t j = sample.offsets[i]; j < sample.offsets[i + 1]; ++j) {
      s += eps[static_cast<Eigen::Index>(j)];
      if (sample.z[static_cast<Eigen::Index>(j)] == 1) t += eps[static_cast<Eigen::Index>(j)];
    }
    null_mean += s / static_cast<double>(sample.set_size(i));
  }
  r.positive_direction = t >= null_mean;
  const double sign = r.positive_direction ? 1.0 : -1.0;

  double mean = 0.0, var = 0.0;
  std::vector<double> vals;
  for (std::size_t i = 0; i < sample.num_sets(); ++i) {
    vals.clear();
    for (std::size_t j = sample.offsets[i]; j < sample.offsets[i + 1]; ++j)
      vals.push_back(sign * eps[static_cast<Eigen::Index>(j)]);
    const auto [mu, nu] = separable_moments(vals, gamma);
    mean += mu;
    var += nu;
  }
  r.expectation = mean;
  r.variance = var;
  if (var <= 1e-300) {
    r.p_upper = 1.0;
  } else {
    r.deviate = (sign * t - mean) / std::sqrt(var);
    r.p_upper = normal_sf(r.deviate);
  }
  r.p_two_sided = std::min(1.0, 2.0 * r.p_upper);
  return r;
}

SensitivityResult sensitivity_mh(const StratifiedSample& sample, double gamma, const MhSensitivityOptions& options) {
  if (!(gamma >= 1.0)) throw ValidationError("sensitivity parameter gamma must be at least 1");
  sample.validate();
  if (sample.num_sets() == 0) throw ValidationError("sensitivity_mh: no matched sets");

  struct Counts {
    double n, m;
    int yt;
  };
  std::vector<Counts> sets;
  double t = 0.0, null_mean = 0.0;
  for (std::size_t i = 0; i < sample.num_sets(); ++i) {
    Counts c{static_cast<double>(sample.set_size(i)), 0.0, 0};
    for (std::size_t j = sample.offsets[i]; j < sample.offsets[i + 1]; ++j) {
      const double v = sample.y[static_cast<Eigen::Index>(j)];
      if (v != 0.0 && v != 1.0) throw ValidationError("sensitivity_mh requires 0/1 outcomes");
      c.m += v;
      if (sample.z[static_cast<Eigen::Index>(j)] == 1) c.yt = static_cast<int>(v);
    }
    t += c.yt;
    null_mean += c.m / c.n;
    sets.push_back(c);
  }

  SensitivityResult r;
  r.gamma = gamma;
  r.positive_direction = t >= null_mean;
  // The lower tail of the event count is the upper tail of the non-event count.
  if (!r.positive_direction) {
    t = 0.0;
    for (auto& c : sets) {
      c.m = c.n - c.m;
      c.yt = 1 - c.yt;
      t += c.yt;
    }
  }

  std::vector<double> probs;
  int fixed = 0;
  double mean = 0.0, var = 0.0;
  for (const auto& c : sets) {
    if (c.m == 0) continue;
    if (c.m == c.n) {
      ++fixed;
      mean += 1.0;
      continue;
    }
    const double p = c.m * gamma / (c.m * gamma + c.n - c.m);
    probs.push_back(p);
    mean += p;
    var += p * (1.0 - p);
  }
  r.expectation = mean;
  r.variance = var;

  TestMode mode = options.mode;
  if (mode == TestMode::automatic || mode == TestMode::monte_carlo)
    mode = probs.size() <= options.exact_sets ? TestMode::exact : TestMode::normal;
  r.method = mode;

  if (var <= 0) {
    r.p_upper = 1.0;
  } else if (mode == TestMode::exact) {
    const auto dist = poisson_binomial(probs);
    const int target = static_cast<int>(std::lround(t)) - fixed;
    double ge = 0.0;
    for (std::size_t k = 0; k < dist.size(); ++k)
      if (static_cast<int>(k) >= target) ge += dist[k];
    r.p_upper = std::min(1.0, ge);
  } else {
    r.deviate = (t - mean - 0.5) / std::sqrt(var);
    r.p_upper = std::min(1.0, normal_sf(r.deviate));
  }
  r.p_two_sided = std::min(1.0, 2.0 * r.p_upper);
  return r;
}

std::vector<double> default_gamma_grid() {
  std::vector<double> g;
  for (int i = 0; i <= 40; ++i) g.push_back(1.0 + 0.05 * i);
  return g;
}

GammaCurve gamma_threshold(const std::function<double(double)>& compute, double alpha,
                           const std::vector<double>& grid, int threads) {
  if (grid.empty()) throw ValidationError("gamma grid is empty");
  if (grid.front() != 1.0) throw ValidationError("gamma grid must start at 1");
  for (std::size_t i = 1; i < grid.size(); ++i)
    if (!(grid[i] > grid[i - 1])) throw ValidationError("gamma grid must be strictly increasing");

  GammaCurve curve;
  curve.points.resize(grid.size());
  parallel_for(grid.size(), threads, [&](std::size_t i) { curve.points[i] = {grid[i], compute(grid[i])}; });
  for (const auto& pt : curve.points) {
    if (pt.p >= alpha) {
      curve.threshold = pt.gamma;
      break;
    }
  }
  curve.insignificant_at_one = curve.points.front().p >= alpha;
  return curve;
}

std::string format_gamma_threshold(const GammaCurve& curve) {
  if (curve.insignificant_at_one) return "1.00 (not significant without hidden bias)";
  if (!curve.threshold) return fmt::format("beyond grid (> {:.2f})", curve.points.back().gamma);
  return fmt::format("{:.2f}", *curve.threshold);
}

}  // namespace obsmatch
