#include "obsmatch/multiplicity.hpp"

#include <algorithm>
#include <numeric>

#include <fmt/format.h>

#include "obsmatch/common.hpp"

namespace obsmatch {

std::vector<double> benjamini_hochberg(const std::vector<double>& pvals) {
  const std::size_t m = pvals.size();
  for (double p : pvals)
    if (!(p >= 0.0 && p <= 1.0)) throw ValidationError("benjamini_hochberg: p-values must lie in [0, 1]");
  std::vector<std::size_t> order(m);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return pvals[a] < pvals[b]; });
  std::vector<double> adj(m);
  double running = 1.0;
  for (std::size_t k = m; k-- > 0;) {
    const std::size_t i = order[k];
    // m / rank first, so the largest p keeps its value exactly and adj >= p
    running = std::min(running, pvals[i] * (static_cast<double>(m) / static_cast<double>(k + 1)));
    adj[i] = running;
  }
  return adj;
}

std::string to_string(Equivalence e) { return e == Equivalence::equivalent ? "equivalent" : "not shown"; }

EquivalenceResult equivalence_test(const ConfidenceRegion& region, double margin) {
  EquivalenceResult r;
  r.margin = margin;
  if (region.empty()) {
    r.empty_region = true;
    return r;
  }
  if (margin > 0 && *region.lower > -margin && *region.upper < margin) r.decision = Equivalence::equivalent;
  return r;
}

std::string to_string(Decision d) {
  switch (d) {
    case Decision::reject: return "reject";
    case Decision::fail_to_reject: return "fail to reject";
    case Decision::untested: return "untested";
  }
  return "untested";
}

OrderedProcedure::OrderedProcedure(double alpha) : alpha_(alpha) {
  if (!(alpha > 0 && alpha < 1)) throw ValidationError("alpha must lie in (0, 1)");
}

namespace {

void check_p(double p) {
  if (!(p >= 0.0 && p <= 1.0)) throw ValidationError("p-values must lie in [0, 1]");
}

}  // namespace

void OrderedProcedure::stage1(double p1) {
  if (next_stage_ != 1) throw ProtocolError("stage 1 has already been run");
  check_p(p1);
  const bool rej = p1 <= alpha_;
  decisions_.push_back({1, 1, p1, rej ? Decision::reject : Decision::fail_to_reject,
                        rej ? "" : "stopped: comparison 1 not rejected"});
  next_stage_ = rej ? 2 : 0;
}

void OrderedProcedure::stage2(double p2, double p3) {
  if (next_stage_ != 2)
    throw ProtocolError(next_stage_ == 1 ? "stage 2 requires stage 1 first" : "stage 2 is not reachable");
  check_p(p2);
  check_p(p3);
  const bool r2 = p2 <= alpha_, r3 = p3 <= alpha_;
  const std::string note = r2 && r3 ? "" : "stopped: stage 3 needs both stage-2 rejections";
  decisions_.push_back({2, 2, p2, r2 ? Decision::reject : Decision::fail_to_reject, note});
  decisions_.push_back({3, 2, p3, r3 ? Decision::reject : Decision::fail_to_reject, note});
  next_stage_ = r2 && r3 ? 3 : 0;
}

void OrderedProcedure::stage3(const EquivalenceResult& equivalence) {
  if (next_stage_ != 3) throw ProtocolError("stage 3 requires rejections at stages 1 and 2");
  StageDecision d{4, 3, std::nullopt, Decision::fail_to_reject, ""};
  if (equivalence.decision == Equivalence::equivalent) d.decision = Decision::reject;
  d.note = fmt::format("equivalence {} (margin {:.4g}, confidence-interval inclusion){}", to_string(equivalence.decision),
                       equivalence.margin, equivalence.empty_region ? "; empty confidence region" : "");
  decisions_.push_back(d);
  next_stage_ = 0;
}

std::vector<StageDecision> OrderedProcedure::decisions() const {
  std::vector<StageDecision> out;
  for (int c = 1; c <= 4; ++c) {
    const auto it = std::find_if(decisions_.begin(), decisions_.end(), [&](const StageDecision& d) { return d.comparison == c; });
    if (it != decisions_.end()) {
      out.push_back(*it);
    } else {
      out.push_back({c, c == 1 ? 1 : (c == 4 ? 3 : 2), std::nullopt, Decision::untested, ""});
    }
  }
  return out;
}

std::vector<StageDecision> ordered_procedure(double p1, std::optional<double> p2, std::optional<double> p3,
                                             std::optional<EquivalenceResult> equivalence, double alpha) {
  OrderedProcedure proc(alpha);
  proc.stage1(p1);
  if (proc.next_stage() == 2) {
    if (!p2 || !p3) throw ProtocolError("stage 2 reached but comparison 2 or 3 p-value missing");
    proc.stage2(*p2, *p3);
  } else if (p2 || p3) {
    throw ProtocolError("stage 2 p-values supplied although stage 1 did not reject");
  }
  if (proc.next_stage() == 3) {
    if (!equivalence) throw ProtocolError("stage 3 reached but no equivalence result supplied");
    proc.stage3(*equivalence);
  } else if (equivalence) {
    throw ProtocolError("equivalence result supplied although stage 3 was not reached");
  }
  return proc.decisions();
}

void adjust_secondary(std::vector<SecondaryOutcome>& outcomes, double alpha) {
  const bool any = std::any_of(outcomes.begin(), outcomes.end(), [&](const SecondaryOutcome& o) { return o.p_raw < alpha; });
  for (auto& o : outcomes) o.p_bh.reset();
  if (!any) return;
  std::vector<double> raw;
  for (const auto& o : outcomes) raw.push_back(o.p_raw);
  const auto adj = benjamini_hochberg(raw);
  for (std::size_t i = 0; i < outcomes.size(); ++i) outcomes[i].p_bh = adj[i];
}

std::string format_decisions(const std::vector<StageDecision>& decisions) {
  std::string out;
  for (const auto& d : decisions) {
    out += fmt::format("Comparison {}: stage {}, p {}, {}", d.comparison, d.stage,
                       d.p_value ? fmt::format("{:.4g}", *d.p_value) : std::string("NA"), to_string(d.decision));
    if (!d.note.empty()) out += " (" + d.note + ")";
    out += "\n";
  }
  return out;
}

}  // namespace obsmatch
