#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace obsmatch {

struct BartParams {
  int num_trees = 50;
  double alpha = 0.95;       // tree prior: P(split at depth d) = alpha (1 + d)^-beta
  double beta_depth = 2.0;
  double k = 2.0;            // leaf prior scale
  double nu = 3.0;           // error-variance prior degrees of freedom
  double q = 0.9;            // prior quantile of the rough sigma estimate
  int burn_in = 200;
  int draws = 800;
  double prob_grow = 0.4;
  double prob_prune = 0.4;
  double prob_change = 0.2;
  // Every tree starts as this stump and structure moves are disabled.
  struct Stump {
    int variable = 0;
    double cut = 0.0;  // left branch takes x <= cut
  };
  std::optional<Stump> forced_stump;
  // Hold sigma fixed (on the standardized scale) instead of sampling it.
  std::optional<double> fixed_sigma;
  // Recompute the full fit from scratch after every tree update and record
  // the largest discrepancy from the incrementally maintained fit.
  bool audit_backfit = false;

  // Throws ValidationError.
  void validate() const;
};

struct TreeNode {
  int variable = -1;  // -1 marks a leaf
  double cut = 0.0;
  int left = -1;
  int right = -1;
  int parent = -1;
  double value = 0.0;  // leaf value

  bool is_leaf() const { return variable < 0; }
};

// Binary decision tree stored as a node array; node 0 is the root.
class Tree {
 public:
  Tree();

  const std::vector<TreeNode>& nodes() const { return nodes_; }
  std::vector<TreeNode>& nodes() { return nodes_; }

  // Leaf value reached by x.
  double evaluate(const double* x) const;
  int leaf_index(const double* x) const;
  int depth(int node) const;
  std::vector<int> leaves() const;
  // Internal nodes whose children are both leaves.
  std::vector<int> prunable() const;

  int split_leaf(int leaf, int variable, double cut);
  void collapse(int node);
  // Node indices are compacted so unused slots never accumulate.
  void compact();

  static Tree stump(int variable, double cut, double left_value, double right_value);

 private:
  std::vector<TreeNode> nodes_;
};

// Posterior draws of a sum-of-trees model. Predictions on the original scale
// are offset + scale * (sum of tree values); binary fits additionally pass
// that through the standard normal cdf.
struct Forest {
  std::vector<Tree> trees;

  double evaluate(const double* x) const;
};

struct BartPosterior {
  bool binary = false;
  int num_features = 0;
  double offset = 0.0;
  double scale = 1.0;
  std::vector<Forest> draws;
  std::vector<double> sigma;  // per-draw error sd on the original scale (regression only)
  // Posterior mean of the in-sample fit (link-inverse applied for binary),
  // accumulated during sampling.
  std::vector<double> train_fit_mean;
  bool constant_response = false;
  double acceptance_rate = 0.0;
  double max_backfit_error = 0.0;

  // Per-draw values on the original (latent, for binary) scale.
  std::vector<double> draw_values(const double* x) const;
  // Posterior mean; binary fits average Phi over draws.
  double predict(const double* x) const;
  double predict(const Eigen::VectorXd& x) const;
  std::vector<double> predict(const Eigen::MatrixXd& X) const;
};

BartPosterior fit_bart_regression(const Eigen::MatrixXd& X, const Eigen::VectorXd& y,
                                  const BartParams& params, std::uint64_t seed);

BartPosterior fit_bart_binary(const Eigen::MatrixXd& X, const Eigen::VectorXi& z,
                              const BartParams& params, std::uint64_t seed);

// Posterior mean and per-draw values at x.
struct BartPrediction {
  double mean = 0.0;
  std::vector<double> per_draw;
};

BartPrediction bart_predict(const BartPosterior& posterior, const Eigen::VectorXd& x);

// Text snapshot; doubles are written as hex floats so the round trip is exact.
void write_forest(std::ostream& out, const BartPosterior& posterior);
BartPosterior read_forest(std::istream& in);

}  // namespace obsmatch
