#pragma once

#include <cstdint>
#include <vector>

namespace obsmatch {

// Successive-shortest-path min-cost flow on integer costs. Costs must be
// nonnegative; Dijkstra with Johnson potentials finds each augmenting path.
class MinCostFlow {
 public:
  explicit MinCostFlow(int nodes);

  int add_edge(int from, int to, std::int64_t capacity, std::int64_t cost);

  struct Result {
    std::int64_t flow = 0;
    std::int64_t cost = 0;
  };

  // Pushes up to max_flow units from source to sink at minimum total cost.
  Result solve(int source, int sink, std::int64_t max_flow);

  std::int64_t flow_on(int edge) const;

 private:
  struct Edge {
    int to;
    int rev;
    std::int64_t capacity;
    std::int64_t cost;
  };
  std::vector<std::vector<Edge>> graph_;
  std::vector<std::pair<int, int>> edge_index_;  // edge id -> (node, slot)
  std::vector<std::int64_t> original_capacity_;
};

}  // namespace obsmatch
