#include "obsmatch/min_cost_flow.hpp"

#include <limits>
#include <queue>
#include <stdexcept>

#include "obsmatch/common.hpp"

namespace obsmatch {

MinCostFlow::MinCostFlow(int nodes) : graph_(static_cast<std::size_t>(nodes)) {}

int MinCostFlow::add_edge(int from, int to, std::int64_t capacity, std::int64_t cost) {
  if (cost < 0) throw ValidationError("min-cost flow edge costs must be nonnegative");
  if (capacity < 0) throw ValidationError("min-cost flow capacities must be nonnegative");
  auto& gf = graph_[static_cast<std::size_t>(from)];
  auto& gt = graph_[static_cast<std::size_t>(to)];
  const int id = static_cast<int>(edge_index_.size());
  edge_index_.emplace_back(from, static_cast<int>(gf.size()));
  original_capacity_.push_back(capacity);
  gf.push_back(Edge{to, static_cast<int>(gt.size()) + (from == to ? 1 : 0), capacity, cost});
  gt.push_back(Edge{from, static_cast<int>(gf.size()) - 1, 0, -cost});
  return id;
}

MinCostFlow::Result MinCostFlow::solve(int source, int sink, std::int64_t max_flow) {
  constexpr std::int64_t inf = std::numeric_limits<std::int64_t>::max() / 4;
  const std::size_t n = graph_.size();
  std::vector<std::int64_t> potential(n, 0), dist(n);
  std::vector<int> prev_node(n), prev_edge(n);
  Result result;

  using Item = std::pair<std::int64_t, int>;
  while (result.flow < max_flow) {
    std::fill(dist.begin(), dist.end(), inf);
    dist[static_cast<std::size_t>(source)] = 0;
    std::priority_queue<Item, std::vector<Item>, std::greater<>> heap;
    heap.emplace(0, source);
    while (!heap.empty()) {
      const auto [d, u] = heap.top();
      heap.pop();
      if (d > dist[static_cast<std::size_t>(u)]) continue;
      const auto& edges = graph_[static_cast<std::size_t>(u)];
      for (std::size_t k = 0; k < edges.size(); ++k) {
        const auto& e = edges[k];
        if (e.capacity <= 0) continue;
        const std::int64_t nd = d + e.cost + potential[static_cast<std::size_t>(u)] -
                                potential[static_cast<std::size_t>(e.to)];
        if (nd < dist[static_cast<std::size_t>(e.to)]) {
          dist[static_cast<std::size_t>(e.to)] = nd;
          prev_node[static_cast<std::size_t>(e.to)] = u;
          prev_edge[static_cast<std::size_t>(e.to)] = static_cast<int>(k);
          heap.emplace(nd, e.to);
        }
      }
    }
    if (dist[static_cast<std::size_t>(sink)] >= inf) break;
    for (std::size_t v = 0; v < n; ++v)
      if (dist[v] < inf) potential[v] += dist[v];

    std::int64_t push = max_flow - result.flow;
    for (int v = sink; v != source; v = prev_node[static_cast<std::size_t>(v)]) {
      const auto& e = graph_[static_cast<std::size_t>(prev_node[static_cast<std::size_t>(v)])]
                            [static_cast<std::size_t>(prev_edge[static_cast<std::size_t>(v)])];
      push = std::min(push, e.capacity);
    }
    for (int v = sink; v != source; v = prev_node[static_cast<std::size_t>(v)]) {
      auto& e = graph_[static_cast<std::size_t>(prev_node[static_cast<std::size_t>(v)])]
                      [static_cast<std::size_t>(prev_edge[static_cast<std::size_t>(v)])];
      e.capacity -= push;
      graph_[static_cast<std::size_t>(v)][static_cast<std::size_t>(e.rev)].capacity += push;
      result.cost += push * e.cost;
    }
    result.flow += push;
  }
  return result;
}

std::int64_t MinCostFlow::flow_on(int edge) const {
  const auto [node, slot] = edge_index_.at(static_cast<std::size_t>(edge));
  const auto& e = graph_[static_cast<std::size_t>(node)][static_cast<std::size_t>(slot)];
  return original_capacity_[static_cast<std::size_t>(edge)] - e.capacity;
}

}  // namespace obsmatch
