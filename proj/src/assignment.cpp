#include "unidet/assignment.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>

namespace unidet {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

[[noreturn]] void fail(const std::string& msg) { throw std::invalid_argument(msg); }

// Unit-capacity min-cost flow solved by successive shortest augmenting paths.
// Bellman-Ford handles the negative matching costs; scanning edges in
// insertion order with strict-improvement updates keeps every run identical.
struct FlowGraph {
  struct Edge {
    int to = 0;
    int twin = 0;
    int cap = 0;
    double cost = 0.0;
  };
  std::vector<Edge> edges;
  int nodes = 0;

  int add_node() { return nodes++; }

  std::size_t add_edge(int from, int to, double cost) {
    edges.push_back({to, static_cast<int>(edges.size()) + 1, 1, cost});
    edges.push_back({from, static_cast<int>(edges.size()) - 1, 0, -cost});
    // The forward edge leaves `from`; keep its origin recoverable via twin.
    return edges.size() - 2;
  }

  int origin(std::size_t e) const { return edges[edges[e].twin].to; }

  bool augment(int source, int sink) {
    std::vector<double> dist(static_cast<std::size_t>(nodes), kInf);
    std::vector<int> parent(static_cast<std::size_t>(nodes), -1);
    dist[static_cast<std::size_t>(source)] = 0.0;
    for (int pass = 0; pass < nodes; ++pass) {
      bool changed = false;
      for (std::size_t e = 0; e < edges.size(); ++e) {
        if (edges[e].cap == 0) continue;
        const int from = origin(e);
        const int to = edges[e].to;
        if (dist[static_cast<std::size_t>(from)] == kInf) continue;
        const double cand = dist[static_cast<std::size_t>(from)] + edges[e].cost;
        if (cand < dist[static_cast<std::size_t>(to)]) {
          dist[static_cast<std::size_t>(to)] = cand;
          parent[static_cast<std::size_t>(to)] = static_cast<int>(e);
          changed = true;
        }
      }
      if (!changed) break;
    }
    if (dist[static_cast<std::size_t>(sink)] == kInf) return false;
    for (int node = sink; node != source;) {
      Edge& e = edges[static_cast<std::size_t>(parent[static_cast<std::size_t>(node)])];
      e.cap -= 1;
      edges[static_cast<std::size_t>(e.twin)].cap += 1;
      node = origin(static_cast<std::size_t>(parent[static_cast<std::size_t>(node)]));
    }
    return true;
  }
};

void sort_pairs(Matching& matching) {
  std::sort(matching.pairs.begin(), matching.pairs.end());
}

// Jonker-Volgenant row assignment for rows <= cols; p[j] holds the 1-based
// row owning column j.
std::vector<int> assign_rows(const std::vector<double>& a, std::size_t rows,
                             std::size_t cols) {
  const double big = std::numeric_limits<double>::max() / 4;
  std::vector<double> u(rows + 1, 0.0), v(cols + 1, 0.0), minv(cols + 1, 0.0);
  std::vector<int> p(cols + 1, 0), way(cols + 1, 0);
  for (std::size_t i = 1; i <= rows; ++i) {
    p[0] = static_cast<int>(i);
    std::size_t j0 = 0;
    std::fill(minv.begin(), minv.end(), big);
    std::vector<char> used(cols + 1, 0);
    do {
      used[j0] = 1;
      const std::size_t i0 = static_cast<std::size_t>(p[j0]);
      double delta = big;
      std::size_t j1 = 0;
      for (std::size_t j = 1; j <= cols; ++j) {
        if (used[j]) continue;
        const double cur = a[(i0 - 1) * cols + (j - 1)] - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = static_cast<int>(j0);
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= cols; ++j) {
        if (used[j]) {
          u[static_cast<std::size_t>(p[j])] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const std::size_t j1 = static_cast<std::size_t>(way[j0]);
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  return p;
}

}  // namespace

double match_cost(const std::vector<double>& class_scores, int gt_class,
                  const Box3D& predicted, const Box3D& gt, double lambda) {
  if (gt_class < 0 || static_cast<std::size_t>(gt_class) >= class_scores.size()) {
    fail("match_cost: class " + std::to_string(gt_class) + " outside the " +
         std::to_string(class_scores.size()) + " scored classes");
  }
  if (lambda < 0.0) fail("match_cost: lambda must be non-negative");
  return -lambda * class_scores[static_cast<std::size_t>(gt_class)] +
         diou_distance(predicted, gt);
}

CostMatrix build_masked_costs(const std::vector<Proposal>& proposals,
                              const std::vector<Box3D>& gt_boxes,
                              const std::vector<int>& gt_classes,
                              const SuperpointPartition& partition, std::size_t j,
                              double lambda) {
  if (proposals.size() != partition.count) {
    fail("build_masked_costs: " + std::to_string(proposals.size()) +
         " proposals for " + std::to_string(partition.count) + " superpoints");
  }
  if (gt_boxes.size() != gt_classes.size()) {
    fail("build_masked_costs: " + std::to_string(gt_boxes.size()) + " gt boxes vs " +
         std::to_string(gt_classes.size()) + " gt classes");
  }
  if (j == 0) fail("build_masked_costs: candidate count must be positive");
  for (std::size_t i = 0; i < proposals.size(); ++i) {
    if (proposals[i].query_index != static_cast<int>(i)) {
      fail("build_masked_costs: proposal " + std::to_string(i) +
           " carries query_index " + std::to_string(proposals[i].query_index) +
           "; proposals must be ordered by superpoint");
    }
  }
  CostMatrix cm;
  cm.proposals = proposals.size();
  cm.gts = gt_boxes.size();
  cm.lambda = lambda;
  cm.values.assign(cm.proposals * cm.gts, kInf);
  cm.finite.assign(cm.proposals * cm.gts, 0);
  for (std::size_t k = 0; k < cm.gts; ++k) {
    for (int s : nearest_superpoints(partition, gt_boxes[k], j)) {
      const std::size_t i = static_cast<std::size_t>(s);
      cm.values[i * cm.gts + k] =
          match_cost(proposals[i].class_scores, gt_classes[k], proposals[i].box,
                     gt_boxes[k], lambda);
      cm.finite[i * cm.gts + k] = 1;
    }
  }
  return cm;
}

Matching match_disentangled(const CostMatrix& costs) {
  if (costs.proposals == 0) fail("match_disentangled: no proposals");
  if (costs.values.size() != costs.proposals * costs.gts ||
      costs.finite.size() != costs.values.size()) {
    fail("match_disentangled: cost matrix storage does not match its shape");
  }
  FlowGraph graph;
  const int source = graph.add_node();
  std::vector<int> gt_node(costs.gts);
  for (std::size_t k = 0; k < costs.gts; ++k) gt_node[k] = graph.add_node();
  std::vector<int> prop_node(costs.proposals, -1);
  const int sink = graph.add_node();
  for (std::size_t k = 0; k < costs.gts; ++k) graph.add_edge(source, gt_node[k], 0.0);
  struct CostEdge {
    std::size_t edge;
    int proposal;
    int gt;
  };
  std::vector<CostEdge> cost_edges;
  for (std::size_t k = 0; k < costs.gts; ++k) {
    for (std::size_t i = 0; i < costs.proposals; ++i) {
      if (!costs.is_finite(i, k)) continue;
      if (prop_node[i] < 0) {
        prop_node[i] = graph.add_node();
        graph.add_edge(prop_node[i], sink, 0.0);
      }
      cost_edges.push_back({graph.add_edge(gt_node[k], prop_node[i], costs.at(i, k)),
                            static_cast<int>(i), static_cast<int>(k)});
    }
  }
  while (graph.augment(source, sink)) {
  }
  Matching matching;
  for (const CostEdge& ce : cost_edges) {
    if (graph.edges[ce.edge].cap == 0) matching.pairs.emplace_back(ce.proposal, ce.gt);
  }
  sort_pairs(matching);
  return matching;
}

Matching match_hungarian(const std::vector<double>& costs, std::size_t rows,
                         std::size_t cols) {
  if (rows == 0 || cols == 0) fail("match_hungarian: empty cost matrix");
  if (costs.size() != rows * cols) {
    fail("match_hungarian: expected " + std::to_string(rows * cols) + " entries, got " +
         std::to_string(costs.size()));
  }
  for (std::size_t i = 0; i < costs.size(); ++i) {
    if (!std::isfinite(costs[i])) {
      fail("match_hungarian: cost at (" + std::to_string(i / cols) + ", " +
           std::to_string(i % cols) + ") is not finite");
    }
  }
  const bool transposed = rows > cols;
  std::vector<double> a;
  std::size_t n = rows, m = cols;
  if (transposed) {
    n = cols;
    m = rows;
    a.resize(costs.size());
    for (std::size_t i = 0; i < rows; ++i) {
      for (std::size_t k = 0; k < cols; ++k) a[k * rows + i] = costs[i * cols + k];
    }
  } else {
    a = costs;
  }
  const std::vector<int> p = assign_rows(a, n, m);
  Matching matching;
  for (std::size_t j = 1; j <= m; ++j) {
    if (p[j] == 0) continue;
    const int row = p[j] - 1;
    const int col = static_cast<int>(j) - 1;
    if (transposed) {
      matching.pairs.emplace_back(col, row);
    } else {
      matching.pairs.emplace_back(row, col);
    }
  }
  sort_pairs(matching);
  return matching;
}

DetectionLoss detection_loss(const Matching& matching, const Tensor& logits,
                             const Tensor& encodings, const std::vector<Vec3>& refs,
                             const std::vector<Box3D>& gt_boxes,
                             const std::vector<int>& gt_classes, double beta) {
  if (!logits.defined() || logits.ndim() != 2 || logits.cols() < 2) {
    fail("detection_loss: logits must be M x (classes + 1)");
  }
  const std::size_t m = logits.rows();
  const std::size_t real_classes = logits.cols() - 1;
  if (!encodings.defined() || encodings.ndim() != 2 || encodings.cols() != 8 ||
      encodings.rows() != m) {
    fail("detection_loss: encodings must be M x 8 with M matching the logits");
  }
  if (refs.size() != m) {
    fail("detection_loss: got " + std::to_string(refs.size()) +
         " reference points for " + std::to_string(m) + " proposals");
  }
  if (gt_boxes.size() != gt_classes.size()) {
    fail("detection_loss: " + std::to_string(gt_boxes.size()) + " gt boxes vs " +
         std::to_string(gt_classes.size()) + " gt classes");
  }
  if (beta < 0.0) fail("detection_loss: beta must be non-negative");
  for (int c : gt_classes) {
    if (c < 0 || static_cast<std::size_t>(c) >= real_classes) {
      fail("detection_loss: gt class " + std::to_string(c) + " outside the " +
           std::to_string(real_classes) + " real classes");
    }
  }
  std::vector<char> prop_used(m, 0), gt_used(gt_boxes.size(), 0);
  std::vector<int> targets(m, static_cast<int>(real_classes));
  std::vector<std::pair<int, int>> pairs = matching.pairs;
  std::sort(pairs.begin(), pairs.end());
  std::vector<int> reg_rows;
  std::vector<Box3D> reg_boxes;
  for (const auto& [pi, gi] : pairs) {
    if (pi < 0 || static_cast<std::size_t>(pi) >= m || gi < 0 ||
        static_cast<std::size_t>(gi) >= gt_boxes.size()) {
      fail("detection_loss: pair (" + std::to_string(pi) + ", " + std::to_string(gi) +
           ") outside the proposal or gt range");
    }
    if (prop_used[static_cast<std::size_t>(pi)]++ != 0 ||
        gt_used[static_cast<std::size_t>(gi)]++ != 0) {
      fail("detection_loss: matching reuses proposal " + std::to_string(pi) +
           " or gt " + std::to_string(gi));
    }
    targets[static_cast<std::size_t>(pi)] = gt_classes[static_cast<std::size_t>(gi)];
    reg_rows.push_back(pi);
    reg_boxes.push_back(gt_boxes[static_cast<std::size_t>(gi)]);
  }
  DetectionLoss result;
  result.classification = cross_entropy(logits, targets);
  if (reg_rows.empty()) {
    result.regression = Tensor::scalar(0.0);
    result.regression_active = false;
    result.total = scale(result.classification, beta);
  } else {
    result.regression = mean_all(diou_matched(encodings, refs, reg_rows, reg_boxes));
    result.regression_active = true;
    result.total = add(scale(result.classification, beta), result.regression);
  }
  return result;
}

}  // namespace unidet
