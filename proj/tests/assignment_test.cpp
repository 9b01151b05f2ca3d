#include "unidet/assignment.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>
#include <vector>

#include <doctest.h>

#include "unidet/geometry.hpp"
#include "unidet/heads.hpp"
#include "unidet/random.hpp"
#include "unidet/superpoint.hpp"
#include "unidet/tensor.hpp"

using namespace unidet;

namespace {

Box3D cube_at(double x, double y = 0.0, double z = 0.0, double size = 1.0) {
  return {x, y, z, size, size, size, 0.0};
}

SuperpointPartition partition_at(const std::vector<Vec3>& centers) {
  SuperpointPartition partition;
  partition.count = centers.size();
  for (std::size_t s = 0; s < centers.size(); ++s) {
    partition.assignment.push_back(static_cast<int>(s));
    partition.centers.push_back(centers[s]);
    partition.sizes.push_back(1);
  }
  return partition;
}

std::vector<Proposal> proposals_at(const std::vector<Vec3>& centers,
                                   std::size_t classes, Rng& rng) {
  std::vector<Proposal> proposals(centers.size());
  for (std::size_t i = 0; i < centers.size(); ++i) {
    proposals[i].query_index = static_cast<int>(i);
    proposals[i].box = cube_at(centers[i][0], centers[i][1], centers[i][2]);
    std::vector<double> raw(classes);
    double sum = 0.0;
    for (double& v : raw) {
      v = rng.uniform(0.05, 1.0);
      sum += v;
    }
    for (double& v : raw) v /= sum;
    proposals[i].class_scores = raw;
  }
  return proposals;
}

double matching_total(const CostMatrix& cm, const Matching& matching) {
  double total = 0.0;
  for (const auto& [i, k] : matching.pairs) {
    REQUIRE(cm.is_finite(static_cast<std::size_t>(i), static_cast<std::size_t>(k)));
    total += cm.at(static_cast<std::size_t>(i), static_cast<std::size_t>(k));
  }
  return total;
}

void check_injective(const Matching& matching) {
  std::vector<int> props, gts;
  for (const auto& [i, k] : matching.pairs) {
    props.push_back(i);
    gts.push_back(k);
  }
  std::sort(props.begin(), props.end());
  std::sort(gts.begin(), gts.end());
  CHECK(std::adjacent_find(props.begin(), props.end()) == props.end());
  CHECK(std::adjacent_find(gts.begin(), gts.end()) == gts.end());
}

struct BruteBest {
  std::size_t cardinality = 0;
  double total = 0.0;
  bool seen = false;
};

void brute_masked(const CostMatrix& cm, std::size_t k, std::vector<char>& used,
                  std::size_t cardinality, double total, BruteBest& best) {
  if (k == cm.gts) {
    if (!best.seen || cardinality > best.cardinality ||
        (cardinality == best.cardinality && total < best.total)) {
      best = {cardinality, total, true};
    }
    return;
  }
  brute_masked(cm, k + 1, used, cardinality, total, best);
  for (std::size_t i = 0; i < cm.proposals; ++i) {
    if (!cm.is_finite(i, k) || used[i]) continue;
    used[i] = 1;
    brute_masked(cm, k + 1, used, cardinality + 1, total + cm.at(i, k), best);
    used[i] = 0;
  }
}

BruteBest brute_masked_best(const CostMatrix& cm) {
  BruteBest best;
  std::vector<char> used(cm.proposals, 0);
  brute_masked(cm, 0, used, 0, 0.0, best);
  return best;
}

double brute_dense_best(const std::vector<double>& costs, std::size_t rows,
                        std::size_t cols) {
  const bool flip = rows > cols;
  const std::size_t n = flip ? cols : rows;
  const std::size_t m = flip ? rows : cols;
  std::vector<int> order(m);
  std::iota(order.begin(), order.end(), 0);
  double best = std::numeric_limits<double>::infinity();
  do {
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t r = flip ? static_cast<std::size_t>(order[i]) : i;
      const std::size_t c = flip ? i : static_cast<std::size_t>(order[i]);
      total += costs[r * cols + c];
    }
    best = std::min(best, total);
  } while (std::next_permutation(order.begin(), order.end()));
  return best;
}

}  // namespace

TEST_CASE("matching cost combines class score and box distance") {
  const Box3D unit = cube_at(0.0);
  CHECK(diou_distance(unit, cube_at(3.0)) == 1.5);
  CHECK(match_cost({1.0, 0.0}, 0, unit, unit, 0.25) == -0.25);
  CHECK(match_cost({0.0, 1.0}, 0, unit, unit, 0.25) == 0.0);
  CHECK(match_cost({0.5, 0.5}, 0, unit, cube_at(3.0), 0.25) == 1.375);

  SUBCASE("bad arguments throw") {
    CHECK_THROWS_AS(match_cost({1.0}, 1, unit, unit, 0.25), std::invalid_argument);
    CHECK_THROWS_AS(match_cost({1.0}, -1, unit, unit, 0.25), std::invalid_argument);
    CHECK_THROWS_AS(match_cost({1.0}, 0, unit, unit, -0.5), std::invalid_argument);
  }

  SUBCASE("monotone in both terms") {
    Rng rng(41);
    for (int trial = 0; trial < 20; ++trial) {
      const double p = rng.uniform(0.0, 0.9);
      const double bump = rng.uniform(0.01, 1.0 - p);
      const Box3D near = cube_at(rng.uniform(0.0, 0.5));
      const Box3D far = cube_at(rng.uniform(2.0, 5.0));
      CHECK(match_cost({p + bump}, 0, unit, near, 0.25) <
            match_cost({p}, 0, unit, near, 0.25));
      CHECK(match_cost({p}, 0, unit, near, 0.25) <= match_cost({p}, 0, unit, far, 0.25));
    }
  }
}

TEST_CASE("masked costs are finite exactly on the nearest superpoints") {
  Rng rng(43);

  SUBCASE("five superpoints, one object, three candidates") {
    const std::vector<Vec3> centers = {
        {0.0, 0.0, 0.0}, {1.0, 0.0, 0.0}, {2.0, 0.0, 0.0}, {3.0, 0.0, 0.0},
        {4.0, 0.0, 0.0}};
    const auto proposals = proposals_at(centers, 2, rng);
    const CostMatrix cm = build_masked_costs(proposals, {cube_at(0.2)}, {1},
                                             partition_at(centers));
    REQUIRE(cm.proposals == 5);
    REQUIRE(cm.gts == 1);
    int finite_count = 0;
    for (std::size_t i = 0; i < 5; ++i) finite_count += cm.is_finite(i, 0) ? 1 : 0;
    CHECK(finite_count == 3);
    CHECK(cm.is_finite(0, 0));
    CHECK(cm.is_finite(1, 0));
    CHECK(cm.is_finite(2, 0));
    CHECK(cm.at(1, 0) == match_cost(proposals[1].class_scores, 1, proposals[1].box,
                                    cube_at(0.2), 0.25));
    CHECK(std::isinf(cm.at(4, 0)));
  }

  SUBCASE("fewer superpoints than candidates") {
    const std::vector<Vec3> centers = {{0.0, 0.0, 0.0}, {1.0, 0.0, 0.0}};
    const CostMatrix cm = build_masked_costs(proposals_at(centers, 2, rng),
                                             {cube_at(0.0)}, {0}, partition_at(centers));
    CHECK(cm.is_finite(0, 0));
    CHECK(cm.is_finite(1, 0));
  }

  SUBCASE("finite pattern matches a sort oracle") {
    for (int trial = 0; trial < 30; ++trial) {
      const std::size_t m = 1 + rng.index(8);
      const std::size_t k = 1 + rng.index(4);
      std::vector<Vec3> centers(m);
      for (auto& c : centers) {
        c = {rng.uniform(-4.0, 4.0), rng.uniform(-4.0, 4.0), rng.uniform(0.0, 2.0)};
      }
      std::vector<Box3D> gts;
      std::vector<int> classes;
      for (std::size_t g = 0; g < k; ++g) {
        gts.push_back(cube_at(rng.uniform(-4.0, 4.0), rng.uniform(-4.0, 4.0),
                              rng.uniform(0.0, 2.0)));
        classes.push_back(static_cast<int>(rng.index(2)));
      }
      const CostMatrix cm = build_masked_costs(proposals_at(centers, 2, rng), gts,
                                               classes, partition_at(centers));
      for (std::size_t g = 0; g < k; ++g) {
        std::vector<std::pair<double, int>> order;
        for (std::size_t i = 0; i < m; ++i) {
          const double dx = centers[i][0] - gts[g].cx;
          const double dy = centers[i][1] - gts[g].cy;
          const double dz = centers[i][2] - gts[g].cz;
          order.emplace_back(dx * dx + dy * dy + dz * dz, static_cast<int>(i));
        }
        std::sort(order.begin(), order.end());
        std::vector<char> expected(m, 0);
        for (std::size_t t = 0; t < std::min<std::size_t>(3, m); ++t) {
          expected[static_cast<std::size_t>(order[t].second)] = 1;
        }
        for (std::size_t i = 0; i < m; ++i) {
          CHECK(cm.is_finite(i, g) == (expected[i] != 0));
        }
      }
    }
  }

  SUBCASE("misordered proposals are rejected") {
    const std::vector<Vec3> centers = {{0.0, 0.0, 0.0}, {1.0, 0.0, 0.0}};
    auto proposals = proposals_at(centers, 2, rng);
    std::swap(proposals[0], proposals[1]);
    CHECK_THROWS_AS(build_masked_costs(proposals, {cube_at(0.0)}, {0},
                                       partition_at(centers)),
                    std::invalid_argument);
  }
}

TEST_CASE("disentangled matching picks cheapest feasible assignments") {
  auto masked = [](std::size_t m, std::size_t k,
                   const std::vector<std::tuple<int, int, double>>& entries) {
    CostMatrix cm;
    cm.proposals = m;
    cm.gts = k;
    cm.values.assign(m * k, std::numeric_limits<double>::infinity());
    cm.finite.assign(m * k, 0);
    for (const auto& [i, g, c] : entries) {
      cm.values[static_cast<std::size_t>(i) * k + static_cast<std::size_t>(g)] = c;
      cm.finite[static_cast<std::size_t>(i) * k + static_cast<std::size_t>(g)] = 1;
    }
    return cm;
  };

  SUBCASE("single object takes its cheapest candidate") {
    const CostMatrix cm = masked(3, 1, {{0, 0, 0.5}, {1, 0, 0.2}, {2, 0, 0.9}});
    const Matching matching = match_disentangled(cm);
    REQUIRE(matching.pairs.size() == 1);
    CHECK(matching.pairs[0] == std::pair<int, int>(1, 0));
  }

  SUBCASE("a shared candidate forces the globally cheaper swap") {
    // Object 0 prefers proposal 1, but giving it up lets object 1 match at
    // all; the optimum pays 0.6 + 0.1 instead of stranding object 1.
    const CostMatrix cm = masked(2, 2, {{0, 0, 0.6}, {1, 0, 0.1}, {1, 1, 0.1}});
    const Matching matching = match_disentangled(cm);
    REQUIRE(matching.pairs.size() == 2);
    CHECK(matching.pairs[0] == std::pair<int, int>(0, 0));
    CHECK(matching.pairs[1] == std::pair<int, int>(1, 1));
  }

  SUBCASE("disjoint candidate sets decouple into per-object minima") {
    const CostMatrix cm = masked(
        6, 3, {{0, 0, 0.4}, {1, 0, 0.3}, {2, 1, -0.2}, {3, 1, 0.7}, {4, 2, 0.05},
               {5, 2, 0.01}});
    const Matching matching = match_disentangled(cm);
    REQUIRE(matching.pairs.size() == 3);
    CHECK(matching.pairs[0] == std::pair<int, int>(1, 0));
    CHECK(matching.pairs[1] == std::pair<int, int>(2, 1));
    CHECK(matching.pairs[2] == std::pair<int, int>(5, 2));
  }

  SUBCASE("capacity conflicts leave an object unmatched") {
    const CostMatrix cm = masked(1, 2, {{0, 0, 0.3}, {0, 1, 0.4}});
    const Matching matching = match_disentangled(cm);
    REQUIRE(matching.pairs.size() == 1);
    CHECK(matching.pairs[0] == std::pair<int, int>(0, 0));
  }

  SUBCASE("matches the exhaustive optimum on random instances") {
    Rng rng(47);
    for (int trial = 0; trial < 60; ++trial) {
      const std::size_t m = 2 + rng.index(7);
      const std::size_t k = 1 + rng.index(6);
      std::vector<std::tuple<int, int, double>> entries;
      for (std::size_t g = 0; g < k; ++g) {
        std::vector<int> picks;
        for (std::size_t i = 0; i < m; ++i) picks.push_back(static_cast<int>(i));
        for (std::size_t t = 0; t < std::min<std::size_t>(3, m); ++t) {
          const std::size_t pick = t + rng.index(picks.size() - t);
          std::swap(picks[t], picks[pick]);
          entries.emplace_back(picks[t], static_cast<int>(g), rng.uniform(-0.5, 2.0));
        }
      }
      const CostMatrix cm = masked(m, k, entries);
      const Matching matching = match_disentangled(cm);
      check_injective(matching);
      const BruteBest best = brute_masked_best(cm);
      CHECK(matching.pairs.size() == best.cardinality);
      CHECK(matching_total(cm, matching) == doctest::Approx(best.total).epsilon(1e-12));

      const Matching again = match_disentangled(cm);
      CHECK(again.pairs == matching.pairs);
    }
  }
}

TEST_CASE("dense Hungarian matching is exactly optimal") {
  SUBCASE("two by two") {
    const Matching matching = match_hungarian({1.0, 2.0, 3.0, 1.0}, 2, 2);
    REQUIRE(matching.pairs.size() == 2);
    CHECK(matching.pairs[0] == std::pair<int, int>(0, 0));
    CHECK(matching.pairs[1] == std::pair<int, int>(1, 1));
  }

  SUBCASE("dominant diagonal stays on the diagonal") {
    std::vector<double> costs(16, 5.0);
    for (std::size_t i = 0; i < 4; ++i) costs[i * 4 + i] = 0.1;
    const Matching matching = match_hungarian(costs, 4, 4);
    REQUIRE(matching.pairs.size() == 4);
    for (std::size_t i = 0; i < 4; ++i) {
      CHECK(matching.pairs[i] ==
            std::pair<int, int>(static_cast<int>(i), static_cast<int>(i)));
    }
  }

  SUBCASE("random square instances match permutation brute force") {
    Rng rng(53);
    for (int trial = 0; trial < 20; ++trial) {
      const std::size_t n = 2 + rng.index(5);
      std::vector<double> costs(n * n);
      for (double& c : costs) c = rng.uniform(-1.0, 2.0);
      const Matching matching = match_hungarian(costs, n, n);
      REQUIRE(matching.pairs.size() == n);
      check_injective(matching);
      double total = 0.0;
      for (const auto& [i, k] : matching.pairs) {
        total += costs[static_cast<std::size_t>(i) * n + static_cast<std::size_t>(k)];
      }
      CHECK(total == doctest::Approx(brute_dense_best(costs, n, n)).epsilon(1e-12));
    }
  }

  SUBCASE("rectangular instances assign the smaller side") {
    Rng rng(59);
    for (const auto& [rows, cols] : {std::pair<std::size_t, std::size_t>{2, 5},
                                    std::pair<std::size_t, std::size_t>{5, 2}}) {
      for (int trial = 0; trial < 10; ++trial) {
        std::vector<double> costs(rows * cols);
        for (double& c : costs) c = rng.uniform(-1.0, 2.0);
        const Matching matching = match_hungarian(costs, rows, cols);
        REQUIRE(matching.pairs.size() == std::min(rows, cols));
        check_injective(matching);
        double total = 0.0;
        for (const auto& [i, k] : matching.pairs) {
          total +=
              costs[static_cast<std::size_t>(i) * cols + static_cast<std::size_t>(k)];
        }
        CHECK(total ==
              doctest::Approx(brute_dense_best(costs, rows, cols)).epsilon(1e-12));
      }
    }
  }

  SUBCASE("non-finite entries are rejected") {
    CHECK_THROWS_AS(
        match_hungarian({1.0, std::numeric_limits<double>::infinity(), 0.0, 1.0}, 2, 2),
        std::invalid_argument);
    CHECK_THROWS_AS(match_hungarian({1.0}, 1, 2), std::invalid_argument);
  }
}

TEST_CASE("disentangled matching agrees with a sentinel Hungarian run") {
  Rng rng(61);
  int compared = 0;
  for (int trial = 0; trial < 40; ++trial) {
    const std::size_t m = 3 + rng.index(4);
    const std::size_t k = 1 + rng.index(3);
    CostMatrix cm;
    cm.proposals = m;
    cm.gts = k;
    cm.values.assign(m * k, std::numeric_limits<double>::infinity());
    cm.finite.assign(m * k, 0);
    for (std::size_t g = 0; g < k; ++g) {
      for (std::size_t t = 0; t < 3; ++t) {
        const std::size_t i = rng.index(m);
        cm.values[i * k + g] = rng.uniform(-0.5, 1.5);
        cm.finite[i * k + g] = 1;
      }
    }
    const double sentinel = 1e6;
    std::vector<double> dense(m * k);
    for (std::size_t idx = 0; idx < dense.size(); ++idx) {
      dense[idx] = cm.finite[idx] != 0 ? cm.values[idx] : sentinel;
    }
    const Matching via_hungarian = match_hungarian(dense, m, k);
    bool uses_sentinel = false;
    double hungarian_total = 0.0;
    for (const auto& [i, g] : via_hungarian.pairs) {
      if (cm.finite[static_cast<std::size_t>(i) * k + static_cast<std::size_t>(g)] == 0) {
        uses_sentinel = true;
      } else {
        hungarian_total += cm.at(static_cast<std::size_t>(i), static_cast<std::size_t>(g));
      }
    }
    if (uses_sentinel) continue;
    const Matching direct = match_disentangled(cm);
    CHECK(direct.pairs.size() == via_hungarian.pairs.size());
    CHECK(matching_total(cm, direct) == doctest::Approx(hungarian_total).epsilon(1e-12));
    ++compared;
  }
  CHECK(compared > 0);
}

TEST_CASE("detection loss supervises matched and unmatched proposals") {
  const std::vector<Box3D> gts = {{0.5, 0.5, 0.5, 2.0, 2.0, 2.0, 0.0},
                                  {4.0, 1.0, 0.5, 2.0, 2.0, 2.0, 0.0}};
  const std::vector<int> classes = {1, 0};
  const std::vector<Vec3> refs = {{0.5, 0.5, 0.5}, {4.0, 1.0, 0.5}, {8.0, 8.0, 1.0}};
  const std::vector<double> perfect_row = {1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 0.0, 1.0};

  SUBCASE("perfect predictions cost almost nothing") {
    std::vector<double> logit_rows = {
        -20.0, 20.0, -20.0,
        20.0, -20.0, -20.0,
        -20.0, -20.0, 20.0};
    std::vector<double> enc_rows;
    for (int r = 0; r < 3; ++r) {
      enc_rows.insert(enc_rows.end(), perfect_row.begin(), perfect_row.end());
    }
    Matching matching;
    matching.pairs = {{0, 0}, {1, 1}};
    const DetectionLoss loss = detection_loss(
        matching, Tensor::from({3, 3}, std::move(logit_rows)),
        Tensor::from({3, 8}, std::move(enc_rows)), refs, gts, classes);
    CHECK(loss.regression_active);
    CHECK(loss.regression.value() == 0.0);
    CHECK(loss.total.value() < 1e-4);
  }

  SUBCASE("classification enters the total at half weight") {
    Rng rng(67);
    std::vector<double> enc_rows;
    for (int r = 0; r < 3; ++r) {
      enc_rows.insert(enc_rows.end(), perfect_row.begin(), perfect_row.end());
    }
    const Tensor enc = Tensor::from({3, 8}, std::move(enc_rows));
    std::vector<double> base_logits(9), other_logits(9);
    for (std::size_t i = 0; i < 9; ++i) {
      base_logits[i] = rng.uniform(-1.0, 1.0);
      other_logits[i] = rng.uniform(-1.0, 1.0);
    }
    Matching matching;
    matching.pairs = {{0, 0}, {1, 1}};
    const DetectionLoss a = detection_loss(
        matching, Tensor::from({3, 3}, std::move(base_logits)), enc, refs, gts, classes);
    const DetectionLoss b = detection_loss(
        matching, Tensor::from({3, 3}, std::move(other_logits)), enc, refs, gts, classes);
    const double cls_delta = b.classification.value() - a.classification.value();
    CHECK(b.total.value() - a.total.value() ==
          doctest::Approx(0.5 * cls_delta).epsilon(1e-12));
  }

  SUBCASE("an empty matching disables the regression term") {
    Rng rng(71);
    std::vector<double> logits(9), enc(24);
    for (double& v : logits) v = rng.uniform(-1.0, 1.0);
    for (std::size_t i = 0; i < 24; ++i) enc[i] = i % 8 < 6 ? 1.0 : 0.5;
    const DetectionLoss loss =
        detection_loss(Matching{}, Tensor::from({3, 3}, std::move(logits)),
                       Tensor::from({3, 8}, std::move(enc)), refs, {}, {});
    CHECK_FALSE(loss.regression_active);
    CHECK(loss.regression.value() == 0.0);
    CHECK(loss.total.value() ==
          doctest::Approx(0.5 * loss.classification.value()).epsilon(1e-12));
  }

  SUBCASE("invalid matchings and classes are rejected") {
    Rng rng(73);
    std::vector<double> logits(9), enc(24);
    for (double& v : logits) v = rng.uniform(-1.0, 1.0);
    for (std::size_t i = 0; i < 24; ++i) enc[i] = i % 8 < 6 ? 1.0 : 0.5;
    const Tensor tl = Tensor::from({3, 3}, std::move(logits));
    const Tensor te = Tensor::from({3, 8}, std::move(enc));
    Matching duplicate;
    duplicate.pairs = {{0, 0}, {0, 1}};
    CHECK_THROWS_AS(detection_loss(duplicate, tl, te, refs, gts, classes),
                    std::invalid_argument);
    Matching out_of_range;
    out_of_range.pairs = {{5, 0}};
    CHECK_THROWS_AS(detection_loss(out_of_range, tl, te, refs, gts, classes),
                    std::invalid_argument);
    CHECK_THROWS_AS(detection_loss(Matching{}, tl, te, refs, gts, {2, 9}),
                    std::invalid_argument);
  }
}

TEST_CASE("full loss gradients flow through both heads") {
  Rng rng(79);
  HeadConfig config;
  config.in_channels = 8;
  config.num_classes = 2;
  PredictionHeads heads = make_heads(config, rng);
  std::vector<double> data(4 * 8);
  for (double& v : data) v = rng.uniform(-1.0, 1.0);
  const Tensor x = Tensor::from({4, 8}, std::move(data));
  const std::vector<Vec3> refs = {
      {0.0, 0.0, 0.0}, {2.0, 0.0, 0.5}, {0.0, 2.5, 0.0}, {3.0, 3.0, 1.0}};
  const std::vector<Box3D> gts = {{0.1, 0.2, 0.1, 1.5, 1.2, 1.1, 0.2},
                                  {2.1, 0.1, 0.4, 1.0, 1.4, 0.9, -0.3}};
  const std::vector<int> classes = {0, 1};
  Matching matching;
  matching.pairs = {{0, 0}, {1, 1}};

  auto loss_value = [&](const Tensor& features) {
    return detection_loss(matching, class_logits(heads, features),
                          box_encodings(heads, features), refs, gts, classes)
        .total;
  };

  SUBCASE("against the pooled features") {
    const auto report = grad_check(loss_value, x, 1e-5, 1e-3);
    CHECK(report.pass);
  }

  SUBCASE("against parameters of both branches") {
    auto check_param = [&](Tensor& slot) {
      const Tensor original = slot;
      const auto report = grad_check(
          [&](const Tensor& t) {
            slot = t;
            return loss_value(x);
          },
          original, 1e-5, 1e-3);
      slot = original;
      CHECK(report.pass);
    };
    check_param(heads.cls_w[0]);
    check_param(heads.cls_b[1]);
    check_param(heads.box_w[1]);
    check_param(heads.box_b[0]);
  }
}
