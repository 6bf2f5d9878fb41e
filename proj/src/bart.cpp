#include "obsmatch/bart.hpp"

#include <algorithm>
#include <cmath>
#include <istream>
#include <ostream>
#include <sstream>

#include <boost/math/distributions/chi_squared.hpp>
#include <fmt/format.h>

#include "obsmatch/common.hpp"

namespace obsmatch {

void BartParams::validate() const {
  if (num_trees < 1) throw ValidationError("BART needs at least one tree");
  if (draws < 1) throw ValidationError("BART needs at least one retained draw");
  if (burn_in < 0) throw ValidationError("BART burn_in must be nonnegative");
  if (!(alpha > 0.0 && alpha < 1.0)) throw ValidationError("BART alpha must lie in (0, 1)");
  if (!(beta_depth > 0.0)) throw ValidationError("BART beta must be positive");
  if (!(k > 0.0)) throw ValidationError("BART k must be positive");
  if (!(nu > 0.0)) throw ValidationError("BART nu must be positive");
  if (!(q > 0.0 && q < 1.0)) throw ValidationError("BART q must lie in (0, 1)");
  if (prob_grow < 0 || prob_prune < 0 || prob_change < 0 ||
      std::abs(prob_grow + prob_prune + prob_change - 1.0) > 1e-9)
    throw ValidationError("BART proposal probabilities must be nonnegative and sum to 1");
  if (fixed_sigma && !(*fixed_sigma > 0.0)) throw ValidationError("fixed sigma must be positive");
}

// ---------------------------------------------------------------------------
// Tree
// ---------------------------------------------------------------------------

Tree::Tree() : nodes_(1) {}

double Tree::evaluate(const double* x) const { return nodes_[static_cast<std::size_t>(leaf_index(x))].value; }

int Tree::leaf_index(const double* x) const {
  int node = 0;
  while (!nodes_[static_cast<std::size_t>(node)].is_leaf()) {
    const auto& nd = nodes_[static_cast<std::size_t>(node)];
    node = x[nd.variable] <= nd.cut ? nd.left : nd.right;
  }
  return node;
}

int Tree::depth(int node) const {
  int d = 0;
  while (nodes_[static_cast<std::size_t>(node)].parent >= 0) {
    node = nodes_[static_cast<std::size_t>(node)].parent;
    ++d;
  }
  return d;
}

std::vector<int> Tree::leaves() const {
  std::vector<int> out;
  for (std::size_t i = 0; i < nodes_.size(); ++i)
    if (nodes_[i].is_leaf()) out.push_back(static_cast<int>(i));
  return out;
}

std::vector<int> Tree::prunable() const {
  std::vector<int> out;
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    const auto& nd = nodes_[i];
    if (!nd.is_leaf() && nodes_[static_cast<std::size_t>(nd.left)].is_leaf() &&
        nodes_[static_cast<std::size_t>(nd.right)].is_leaf())
      out.push_back(static_cast<int>(i));
  }
  return out;
}

int Tree::split_leaf(int leaf, int variable, double cut) {
  const int l = static_cast<int>(nodes_.size());
  TreeNode left, right;
  left.parent = right.parent = leaf;
  left.value = right.value = nodes_[static_cast<std::size_t>(leaf)].value;
  nodes_.push_back(left);
  nodes_.push_back(right);
  auto& nd = nodes_[static_cast<std::size_t>(leaf)];
  nd.variable = variable;
  nd.cut = cut;
  nd.left = l;
  nd.right = l + 1;
  return l;
}

void Tree::collapse(int node) {
  auto& nd = nodes_[static_cast<std::size_t>(node)];
  nd.variable = -1;
  nd.left = nd.right = -1;
  compact();
}

void Tree::compact() {
  std::vector<int> remap(nodes_.size(), -1);
  std::vector<TreeNode> out;
  // Breadth-first from the root keeps node order canonical.
  std::vector<int> queue{0};
  for (std::size_t h = 0; h < queue.size(); ++h) {
    const int old = queue[h];
    remap[static_cast<std::size_t>(old)] = static_cast<int>(out.size());
    out.push_back(nodes_[static_cast<std::size_t>(old)]);
    const auto& nd = nodes_[static_cast<std::size_t>(old)];
    if (!nd.is_leaf()) {
      queue.push_back(nd.left);
      queue.push_back(nd.right);
    }
  }
  for (auto& nd : out) {
    if (nd.parent >= 0) nd.parent = remap[static_cast<std::size_t>(nd.parent)];
    if (!nd.is_leaf()) {
      nd.left = remap[static_cast<std::size_t>(nd.left)];
      nd.right = remap[static_cast<std::size_t>(nd.right)];
    }
  }
  nodes_ = std::move(out);
}

Tree Tree::stump(int variable, double cut, double left_value, double right_value) {
  Tree t;
  t.split_leaf(0, variable, cut);
  t.nodes_[1].value = left_value;
  t.nodes_[2].value = right_value;
  return t;
}

double Forest::evaluate(const double* x) const {
  double s = 0.0;
  for (const auto& t : trees) s += t.evaluate(x);
  return s;
}

// ---------------------------------------------------------------------------
// Posterior
// ---------------------------------------------------------------------------

std::vector<double> BartPosterior::draw_values(const double* x) const {
  std::vector<double> out;
  out.reserve(draws.size());
  for (const auto& f : draws) out.push_back(offset + scale * f.evaluate(x));
  return out;
}

double BartPosterior::predict(const double* x) const {
  double s = 0.0;
  for (const auto& f : draws) {
    const double v = offset + scale * f.evaluate(x);
    s += binary ? normal_cdf(v) : v;
  }
  return s / static_cast<double>(draws.size());
}

double BartPosterior::predict(const Eigen::VectorXd& x) const {
  if (x.size() != num_features)
    throw ValidationError(fmt::format("BART prediction expects {} covariates, got {}", num_features, x.size()));
  return predict(x.data());
}

std::vector<double> BartPosterior::predict(const Eigen::MatrixXd& X) const {
  if (X.cols() != num_features)
    throw ValidationError(fmt::format("BART prediction expects {} covariates, got {}", num_features, X.cols()));
  std::vector<double> out(static_cast<std::size_t>(X.rows()));
  std::vector<double> row(static_cast<std::size_t>(X.cols()));
  for (Eigen::Index i = 0; i < X.rows(); ++i) {
    for (Eigen::Index j = 0; j < X.cols(); ++j) row[static_cast<std::size_t>(j)] = X(i, j);
    out[static_cast<std::size_t>(i)] = predict(row.data());
  }
  return out;
}

BartPrediction bart_predict(const BartPosterior& posterior, const Eigen::VectorXd& x) {
  if (x.size() != posterior.num_features)
    throw ValidationError(fmt::format("BART prediction expects {} covariates, got {}",
                                      posterior.num_features, x.size()));
  BartPrediction p;
  p.per_draw = posterior.draw_values(x.data());
  p.mean = posterior.predict(x.data());
  return p;
}

// ---------------------------------------------------------------------------
// Sampler
// ---------------------------------------------------------------------------

namespace {

// Draw from N(mean, 1) restricted to (lower, inf).
double truncated_normal_above(double mean, double lower, Rng& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  const double a = lower - mean;
  if (a <= 0.5) {
    for (;;) {
      const double x = normal(rng);
      if (x > a) return mean + x;
    }
  }
  // Exponential rejection sampler for the far tail.
  const double lam = 0.5 * (a + std::sqrt(a * a + 4.0));
  std::exponential_distribution<double> expo(lam);
  for (;;) {
    const double x = a + expo(rng);
    if (unif(rng) <= std::exp(-0.5 * (x - lam) * (x - lam))) return mean + x;
  }
}

class Sampler {
 public:
  Sampler(const Eigen::MatrixXd& X, const BartParams& params, std::uint64_t seed)
      : params_(params), rng_(seed), n_(static_cast<std::size_t>(X.rows())),
        p_(static_cast<int>(X.cols())) {
    // Row-major copy for tree evaluation.
    rows_.resize(n_ * static_cast<std::size_t>(p_));
    for (std::size_t i = 0; i < n_; ++i)
      for (int j = 0; j < p_; ++j) rows_[i * static_cast<std::size_t>(p_) + static_cast<std::size_t>(j)] = X(static_cast<Eigen::Index>(i), j);
    cuts_.resize(static_cast<std::size_t>(p_));
    for (int j = 0; j < p_; ++j) {
      std::vector<double> v(X.col(j).data(), X.col(j).data() + X.rows());
      std::sort(v.begin(), v.end());
      v.erase(std::unique(v.begin(), v.end()), v.end());
      if (!v.empty()) v.pop_back();  // cutting at the maximum leaves an empty right child
      cuts_[static_cast<std::size_t>(j)] = std::move(v);
    }
  }

  const double* row(std::size_t i) const { return rows_.data() + i * static_cast<std::size_t>(p_); }

  // Runs the chain on working response `target` (updated in place by
  // `refresh_target` for binary fits). Returns retained forests.
  template <typename RefreshTarget, typename OnDraw>
  std::vector<Forest> run(std::vector<double>& target, double leaf_sd, double sigma_init,
                          bool sample_sigma, double nu, double lambda, RefreshTarget refresh_target,
                          OnDraw on_draw) {
    const int m = params_.num_trees;
    trees_.assign(static_cast<std::size_t>(m), Tree());
    if (params_.forced_stump) {
      for (auto& t : trees_) t = Tree::stump(params_.forced_stump->variable, params_.forced_stump->cut, 0.0, 0.0);
    }
    tree_fit_.assign(static_cast<std::size_t>(m), std::vector<double>(n_, 0.0));
    total_fit_.assign(n_, 0.0);
    sigma_ = sigma_init;
    tau2_ = leaf_sd * leaf_sd;

    std::vector<Forest> kept;
    kept.reserve(static_cast<std::size_t>(params_.draws));
    std::vector<double> resid(n_);
    const int total = params_.burn_in + params_.draws;
    for (int it = 0; it < total; ++it) {
      refresh_target(target, total_fit_);
      for (std::size_t t = 0; t < trees_.size(); ++t) {
        auto& fit_t = tree_fit_[t];
        for (std::size_t i = 0; i < n_; ++i) resid[i] = target[i] - (total_fit_[i] - fit_t[i]);
        if (!params_.forced_stump) update_structure(trees_[t], resid);
        draw_leaves(trees_[t], resid);
        for (std::size_t i = 0; i < n_; ++i) {
          const double fresh = trees_[t].evaluate(row(i));
          total_fit_[i] = total_fit_[i] - fit_t[i] + fresh;
          fit_t[i] = fresh;
        }
        if (params_.audit_backfit) audit();
      }
      if (sample_sigma) {
        double ss = 0.0;
        for (std::size_t i = 0; i < n_; ++i) ss += (target[i] - total_fit_[i]) * (target[i] - total_fit_[i]);
        std::chi_squared_distribution<double> chi(nu + static_cast<double>(n_));
        sigma_ = std::sqrt((nu * lambda + ss) / chi(rng_));
      }
      if (it >= params_.burn_in) {
        Forest f;
        f.trees = trees_;
        kept.push_back(std::move(f));
        on_draw(total_fit_, sigma_);
      }
    }
    return kept;
  }

  Rng& rng() { return rng_; }
  double max_backfit_error() const { return max_backfit_error_; }
  double acceptance_rate() const {
    return proposals_ ? static_cast<double>(accepted_) / static_cast<double>(proposals_) : 0.0;
  }

 private:
  double split_prob(int depth) const { return params_.alpha * std::pow(1.0 + depth, -params_.beta_depth); }

  double leaf_log_marginal(std::size_t count, double sum) const {
    const double s2 = sigma_ * sigma_;
    const double nt = static_cast<double>(count) * tau2_;
    return -0.5 * std::log1p(nt / s2) + 0.5 * sum * sum * tau2_ / (s2 * (s2 + nt));
  }

  // Counts and residual sums of the children a rule would create from the
  // observations in `leaf`.
  struct SplitStats {
    std::size_t nl = 0, nr = 0;
    double sl = 0.0, sr = 0.0;
  };

  SplitStats split_stats(const std::vector<int>& leaf_of, int leaf, int var, double cut,
                         const std::vector<double>& resid) const {
    SplitStats s;
    for (std::size_t i = 0; i < n_; ++i) {
      if (leaf_of[i] != leaf) continue;
      if (row(i)[var] <= cut) {
        ++s.nl;
        s.sl += resid[i];
      } else {
        ++s.nr;
        s.sr += resid[i];
      }
    }
    return s;
  }

  std::vector<int> assign(const Tree& tree) const {
    std::vector<int> leaf_of(n_);
    for (std::size_t i = 0; i < n_; ++i) leaf_of[i] = tree.leaf_index(row(i));
    return leaf_of;
  }

  bool draw_rule(int& var, double& cut) {
    std::uniform_int_distribution<int> vd(0, p_ - 1);
    var = vd(rng_);
    const auto& c = cuts_[static_cast<std::size_t>(var)];
    if (c.empty()) return false;
    std::uniform_int_distribution<std::size_t> cd(0, c.size() - 1);
    cut = c[cd(rng_)];
    return true;
  }

  void update_structure(Tree& tree, const std::vector<double>& resid) {
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    const auto prunable = tree.prunable();
    const bool root_only = tree.nodes().size() == 1;
    const double pg = root_only ? 1.0 : params_.prob_grow;
    const double pp = root_only ? 0.0 : params_.prob_prune;
    const double u = unif(rng_);
    ++proposals_;
    const auto leaf_of = assign(tree);

    if (u < pg) {
      const auto leaves = tree.leaves();
      std::uniform_int_distribution<std::size_t> ld(0, leaves.size() - 1);
      const int leaf = leaves[ld(rng_)];
      int var = 0;
      double cut = 0.0;
      if (!draw_rule(var, cut)) return;
      const auto s = split_stats(leaf_of, leaf, var, cut, resid);
      if (s.nl == 0 || s.nr == 0) return;
      const int d = tree.depth(leaf);
      // Prunable count after the split: the leaf becomes prunable and its
      // parent stops being prunable if it was.
      std::size_t nog_new = prunable.size() + 1;
      const int parent = tree.nodes()[static_cast<std::size_t>(leaf)].parent;
      if (parent >= 0 && std::find(prunable.begin(), prunable.end(), parent) != prunable.end()) --nog_new;
      const double pp_new = params_.prob_prune;  // grown tree is never root-only
      const double ps = split_prob(d), ps1 = split_prob(d + 1);
      const double log_ratio =
          std::log(pp_new / pg) + std::log(static_cast<double>(leaves.size()) / static_cast<double>(nog_new)) +
          std::log(ps) + 2.0 * std::log1p(-ps1) - std::log1p(-ps) +
          leaf_log_marginal(s.nl, s.sl) + leaf_log_marginal(s.nr, s.sr) -
          leaf_log_marginal(s.nl + s.nr, s.sl + s.sr);
      if (std::log(unif(rng_)) < log_ratio) {
        tree.split_leaf(leaf, var, cut);
        ++accepted_;
      }
    } else if (u < pg + pp) {
      std::uniform_int_distribution<std::size_t> nd(0, prunable.size() - 1);
      const int node = prunable[nd(rng_)];
      const auto& nref = tree.nodes()[static_cast<std::size_t>(node)];
      const int left = nref.left, right = nref.right;
      std::size_t nl = 0, nr = 0;
      double sl = 0.0, sr = 0.0;
      for (std::size_t i = 0; i < n_; ++i) {
        if (leaf_of[i] == left) {
          ++nl;
          sl += resid[i];
        } else if (leaf_of[i] == right) {
          ++nr;
          sr += resid[i];
        }
      }
      const std::size_t leaves_after = tree.leaves().size() - 1;
      const bool root_after = node == 0;
      const double pg_after = root_after ? 1.0 : params_.prob_grow;
      const int d = tree.depth(node);
      const double ps = split_prob(d), ps1 = split_prob(d + 1);
      const double log_ratio =
          std::log(pg_after / pp) +
          std::log(static_cast<double>(prunable.size()) / static_cast<double>(leaves_after)) -
          (std::log(ps) + 2.0 * std::log1p(-ps1) - std::log1p(-ps)) +
          leaf_log_marginal(nl + nr, sl + sr) - leaf_log_marginal(nl, sl) - leaf_log_marginal(nr, sr);
      if (std::log(unif(rng_)) < log_ratio) {
        tree.collapse(node);
        ++accepted_;
      }
    } else {
      std::uniform_int_distribution<std::size_t> nd(0, prunable.size() - 1);
      const int node = prunable[nd(rng_)];
      int var = 0;
      double cut = 0.0;
      if (!draw_rule(var, cut)) return;
      const auto& nref = tree.nodes()[static_cast<std::size_t>(node)];
      const int left = nref.left, right = nref.right;
      std::size_t ol = 0, orr = 0, nl = 0, nr = 0;
      double osl = 0.0, osr = 0.0, sl = 0.0, sr = 0.0;
      for (std::size_t i = 0; i < n_; ++i) {
        if (leaf_of[i] != left && leaf_of[i] != right) continue;
        if (leaf_of[i] == left) {
          ++ol;
          osl += resid[i];
        } else {
          ++orr;
          osr += resid[i];
        }
        if (row(i)[var] <= cut) {
          ++nl;
          sl += resid[i];
        } else {
          ++nr;
          sr += resid[i];
        }
      }
      if (nl == 0 || nr == 0) return;
      const double log_ratio = leaf_log_marginal(nl, sl) + leaf_log_marginal(nr, sr) -
                               leaf_log_marginal(ol, osl) - leaf_log_marginal(orr, osr);
      if (std::log(unif(rng_)) < log_ratio) {
        auto& nm = tree.nodes()[static_cast<std::size_t>(node)];
        nm.variable = var;
        nm.cut = cut;
        ++accepted_;
      }
    }
  }

  void draw_leaves(Tree& tree, const std::vector<double>& resid) {
    auto& nodes = tree.nodes();
    std::vector<std::size_t> count(nodes.size(), 0);
    std::vector<double> sum(nodes.size(), 0.0);
    for (std::size_t i = 0; i < n_; ++i) {
      const auto l = static_cast<std::size_t>(tree.leaf_index(row(i)));
      ++count[l];
      sum[l] += resid[i];
    }
    std::normal_distribution<double> normal(0.0, 1.0);
    const double s2 = sigma_ * sigma_;
    for (std::size_t l = 0; l < nodes.size(); ++l) {
      if (!nodes[l].is_leaf()) continue;
      const double prec = static_cast<double>(count[l]) / s2 + 1.0 / tau2_;
      const double mean = (sum[l] / s2) / prec;
      nodes[l].value = mean + normal(rng_) / std::sqrt(prec);
    }
  }

  void audit() {
    for (std::size_t i = 0; i < n_; ++i) {
      double s = 0.0;
      for (const auto& t : trees_) s += t.evaluate(row(i));
      max_backfit_error_ = std::max(max_backfit_error_, std::abs(s - total_fit_[i]));
    }
  }

  BartParams params_;
  Rng rng_;
  std::size_t n_;
  int p_;
  std::vector<double> rows_;
  std::vector<std::vector<double>> cuts_;
  std::vector<Tree> trees_;
  std::vector<std::vector<double>> tree_fit_;
  std::vector<double> total_fit_;
  double sigma_ = 1.0;
  double tau2_ = 1.0;
  double max_backfit_error_ = 0.0;
  std::size_t proposals_ = 0, accepted_ = 0;
};

double rough_sigma(const Eigen::MatrixXd& X, const Eigen::VectorXd& y) {
  const Eigen::Index n = X.rows(), p = X.cols();
  if (n > p + 1) {
    Eigen::MatrixXd A(n, p + 1);
    A.col(0).setOnes();
    A.rightCols(p) = X;
    const Eigen::VectorXd b = A.completeOrthogonalDecomposition().solve(y);
    const double rss = (y - A * b).squaredNorm();
    const double s = std::sqrt(rss / static_cast<double>(n - p - 1));
    if (s > 0) return s;
  }
  const double mean = y.mean();
  return std::sqrt((y.array() - mean).square().sum() / static_cast<double>(std::max<Eigen::Index>(n - 1, 1)));
}

void check_design(const Eigen::MatrixXd& X, Eigen::Index n) {
  if (X.rows() != n) throw ValidationError("BART covariate rows and response length differ");
  if (X.cols() < 1) throw ValidationError("BART needs at least one covariate");
  if (!X.allFinite()) throw ValidationError("BART covariates must be finite");
}

}  // namespace

BartPosterior fit_bart_regression(const Eigen::MatrixXd& X, const Eigen::VectorXd& y,
                                  const BartParams& params, std::uint64_t seed) {
  params.validate();
  check_design(X, y.size());
  if (y.size() < 10) throw ValidationError("BART regression needs at least 10 observations");
  if (!y.allFinite()) throw ValidationError("BART response must be finite");

  BartPosterior post;
  post.binary = false;
  post.num_features = static_cast<int>(X.cols());
  const double lo = y.minCoeff(), hi = y.maxCoeff();
  const auto n = static_cast<std::size_t>(y.size());

  if (hi == lo) {
    post.constant_response = true;
    post.offset = lo;
    post.scale = 1.0;
    Forest zero;
    zero.trees.assign(static_cast<std::size_t>(params.num_trees), Tree());
    post.draws.assign(static_cast<std::size_t>(params.draws), zero);
    post.sigma.assign(static_cast<std::size_t>(params.draws), 0.0);
    post.train_fit_mean.assign(n, lo);
    return post;
  }

  post.offset = 0.5 * (lo + hi);
  post.scale = hi - lo;
  const Eigen::VectorXd ys = (y.array() - post.offset) / post.scale;
  std::vector<double> target(ys.data(), ys.data() + ys.size());

  const double sigest = rough_sigma(X, ys);
  boost::math::chi_squared chi(params.nu);
  const double lambda = sigest * sigest * boost::math::quantile(chi, 1.0 - params.q) / params.nu;
  const double leaf_sd = 0.5 / (params.k * std::sqrt(static_cast<double>(params.num_trees)));

  Sampler sampler(X, params, seed);
  std::vector<double> fit_sum(n, 0.0);
  auto on_draw = [&](const std::vector<double>& total, double sigma) {
    for (std::size_t i = 0; i < n; ++i) fit_sum[i] += post.offset + post.scale * total[i];
    post.sigma.push_back(sigma * post.scale);
  };
  const double sigma0 = params.fixed_sigma ? *params.fixed_sigma : sigest;
  post.draws = sampler.run(target, leaf_sd, sigma0, !params.fixed_sigma, params.nu, lambda,
                           [](std::vector<double>&, const std::vector<double>&) {}, on_draw);
  post.train_fit_mean.resize(n);
  for (std::size_t i = 0; i < n; ++i) post.train_fit_mean[i] = fit_sum[i] / static_cast<double>(post.draws.size());
  post.acceptance_rate = sampler.acceptance_rate();
  post.max_backfit_error = sampler.max_backfit_error();
  return post;
}

BartPosterior fit_bart_binary(const Eigen::MatrixXd& X, const Eigen::VectorXi& z,
                              const BartParams& params, std::uint64_t seed) {
  params.validate();
  check_design(X, z.size());
  Eigen::Index treated = 0;
  for (Eigen::Index i = 0; i < z.size(); ++i) {
    if (z(i) != 0 && z(i) != 1) throw ValidationError("binary BART response must be 0/1");
    treated += z(i);
  }
  if (treated == 0 || treated == z.size())
    throw ValidationError("binary BART needs both classes present");

  BartPosterior post;
  post.binary = true;
  post.num_features = static_cast<int>(X.cols());
  post.offset = normal_quantile(static_cast<double>(treated) / static_cast<double>(z.size()));
  post.scale = 1.0;
  const auto n = static_cast<std::size_t>(z.size());
  const double leaf_sd = 3.0 / (params.k * std::sqrt(static_cast<double>(params.num_trees)));

  Sampler sampler(X, params, seed);
  std::vector<double> target(n, 0.0);
  // Latent utilities minus the offset; z = 1 iff latent > 0.
  auto refresh = [&](std::vector<double>& t, const std::vector<double>& total) {
    for (std::size_t i = 0; i < n; ++i) {
      const double mean = total[i];
      if (z(static_cast<Eigen::Index>(i)) == 1) t[i] = truncated_normal_above(mean, -post.offset, sampler.rng());
      else t[i] = -truncated_normal_above(-mean, post.offset, sampler.rng());
    }
  };
  std::vector<double> fit_sum(n, 0.0);
  auto on_draw = [&](const std::vector<double>& total, double) {
    for (std::size_t i = 0; i < n; ++i) fit_sum[i] += normal_cdf(post.offset + total[i]);
  };
  post.draws = sampler.run(target, leaf_sd, 1.0, false, params.nu, 0.0, refresh, on_draw);
  post.train_fit_mean.resize(n);
  for (std::size_t i = 0; i < n; ++i) post.train_fit_mean[i] = fit_sum[i] / static_cast<double>(post.draws.size());
  post.acceptance_rate = sampler.acceptance_rate();
  post.max_backfit_error = sampler.max_backfit_error();
  return post;
}

// ---------------------------------------------------------------------------
// Snapshot format
// ---------------------------------------------------------------------------

namespace {

std::string hex(double v) { return fmt::format("{:a}", v); }

double read_double(std::istream& in) {
  std::string tok;
  if (!(in >> tok)) throw ValidationError("truncated forest snapshot");
  char* end = nullptr;
  const double v = std::strtod(tok.c_str(), &end);
  if (end != tok.c_str() + tok.size()) throw ValidationError(fmt::format("bad number '{}' in forest snapshot", tok));
  return v;
}

void expect(std::istream& in, const std::string& word) {
  std::string tok;
  if (!(in >> tok) || tok != word)
    throw ValidationError(fmt::format("forest snapshot: expected '{}', found '{}'", word, tok));
}

long read_int(std::istream& in) {
  long v = 0;
  if (!(in >> v)) throw ValidationError("truncated forest snapshot");
  return v;
}

}  // namespace

void write_forest(std::ostream& out, const BartPosterior& post) {
  out << "obsmatch-bart-forest 1\n";
  out << "binary " << (post.binary ? 1 : 0) << '\n';
  out << "features " << post.num_features << '\n';
  out << "offset " << hex(post.offset) << '\n';
  out << "scale " << hex(post.scale) << '\n';
  out << "constant " << (post.constant_response ? 1 : 0) << '\n';
  out << "acceptance " << hex(post.acceptance_rate) << '\n';
  out << "draws " << post.draws.size() << '\n';
  for (std::size_t d = 0; d < post.draws.size(); ++d) {
    const auto& f = post.draws[d];
    out << "draw " << d << " sigma " << hex(d < post.sigma.size() ? post.sigma[d] : 0.0) << " trees "
        << f.trees.size() << '\n';
    for (const auto& t : f.trees) {
      out << "tree " << t.nodes().size() << '\n';
      for (const auto& nd : t.nodes())
        out << nd.variable << ' ' << hex(nd.cut) << ' ' << nd.left << ' ' << nd.right << ' ' << nd.parent
            << ' ' << hex(nd.value) << '\n';
    }
  }
  out << "train " << post.train_fit_mean.size() << '\n';
  for (std::size_t i = 0; i < post.train_fit_mean.size(); ++i)
    out << hex(post.train_fit_mean[i]) << (i + 1 == post.train_fit_mean.size() ? "" : " ");
  out << '\n';
}

BartPosterior read_forest(std::istream& in) {
  expect(in, "obsmatch-bart-forest");
  if (read_int(in) != 1) throw ValidationError("unsupported forest snapshot version");
  BartPosterior post;
  expect(in, "binary");
  post.binary = read_int(in) != 0;
  expect(in, "features");
  post.num_features = static_cast<int>(read_int(in));
  expect(in, "offset");
  post.offset = read_double(in);
  expect(in, "scale");
  post.scale = read_double(in);
  expect(in, "constant");
  post.constant_response = read_int(in) != 0;
  expect(in, "acceptance");
  post.acceptance_rate = read_double(in);
  expect(in, "draws");
  const long draws = read_int(in);
  if (draws < 0) throw ValidationError("negative draw count in forest snapshot");
  for (long d = 0; d < draws; ++d) {
    expect(in, "draw");
    read_int(in);
    expect(in, "sigma");
    const double sigma = read_double(in);
    if (!post.binary) post.sigma.push_back(sigma);
    expect(in, "trees");
    const long m = read_int(in);
    Forest f;
    for (long t = 0; t < m; ++t) {
      expect(in, "tree");
      const long count = read_int(in);
      Tree tree;
      auto& nodes = tree.nodes();
      nodes.assign(static_cast<std::size_t>(count), TreeNode{});
      for (auto& nd : nodes) {
        nd.variable = static_cast<int>(read_int(in));
        nd.cut = read_double(in);
        nd.left = static_cast<int>(read_int(in));
        nd.right = static_cast<int>(read_int(in));
        nd.parent = static_cast<int>(read_int(in));
        nd.value = read_double(in);
        if (nd.variable >= post.num_features) throw ValidationError("forest snapshot split variable out of range");
      }
      for (const auto& nd : nodes)
        if (!nd.is_leaf() && (nd.left < 0 || nd.right < 0 || nd.left >= count || nd.right >= count))
          throw ValidationError("forest snapshot has a dangling child index");
      f.trees.push_back(std::move(tree));
    }
    post.draws.push_back(std::move(f));
  }
  expect(in, "train");
  const long n = read_int(in);
  for (long i = 0; i < n; ++i) post.train_fit_mean.push_back(read_double(in));
  return post;
}

}  // namespace obsmatch
