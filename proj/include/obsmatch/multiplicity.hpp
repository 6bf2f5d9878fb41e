#pragma once

#include <optional>
#include <string>
#include <vector>

#include "obsmatch/inference.hpp"

namespace obsmatch {

// Adjusted p-values of the step-up procedure, in the input order.
std::vector<double> benjamini_hochberg(const std::vector<double>& pvals);

enum class Equivalence { equivalent, not_shown };
std::string to_string(Equivalence e);

struct EquivalenceResult {
  Equivalence decision = Equivalence::not_shown;
  double margin = 0.0;
  bool empty_region = false;
};

// Equivalent iff the accepted hull lies inside the open interval (-margin, margin).
EquivalenceResult equivalence_test(const ConfidenceRegion& region, double margin);

enum class Decision { reject, fail_to_reject, untested };
std::string to_string(Decision d);

struct StageDecision {
  int comparison = 0;  // 1..4
  int stage = 0;       // 1..3
  std::optional<double> p_value;
  Decision decision = Decision::untested;
  std::string note;
};

// Fixed-sequence testing of the four comparisons. Stage 1 tests comparison 1;
// stage 2 tests comparisons 2 and 3 and is reached only after a stage-1
// rejection; stage 3 (equivalence between the two control groups, comparison
// 4) is reached only when both stage-2 tests reject. Calls must follow this
// order; anything else throws ProtocolError.
class OrderedProcedure {
 public:
  explicit OrderedProcedure(double alpha = 0.05);

  double alpha() const { return alpha_; }
  // 1, 2 or 3 while testing is open; 0 once stopped or finished.
  int next_stage() const { return next_stage_; }
  bool stopped() const { return next_stage_ == 0; }

  void stage1(double p1);
  void stage2(double p2, double p3);
  void stage3(const EquivalenceResult& equivalence);

  // One entry per comparison 1..4, untested ones included.
  std::vector<StageDecision> decisions() const;

 private:
  double alpha_;
  int next_stage_ = 1;
  std::vector<StageDecision> decisions_;
};

// Convenience wrapper; later arguments must be empty when their stage is not
// reached and present when it is.
std::vector<StageDecision> ordered_procedure(double p1, std::optional<double> p2, std::optional<double> p3,
                                             std::optional<EquivalenceResult> equivalence, double alpha = 0.05);

struct SecondaryOutcome {
  std::string name;
  double p_raw = 1.0;
  std::optional<double> p_bh;  // set only when BH was applied
  std::optional<double> ci_lower;
  std::optional<double> ci_upper;
  std::optional<double> gamma_star;
  std::string gamma_note;
};

// Applies BH only when some raw p-value is below `alpha`; raw values are
// always kept.
void adjust_secondary(std::vector<SecondaryOutcome>& outcomes, double alpha = 0.05);

std::string format_decisions(const std::vector<StageDecision>& decisions);

}  // namespace obsmatch
